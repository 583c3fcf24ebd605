use std::sync::Arc;

use certspoof::attacks::{ghostcert, scale_budget, AttackConfig, AttackGoal, ProjectionMode};
use certspoof::data::{synthetic_digits, SyntheticConfig};
use certspoof::models::{
    compose_denoised, ensemble_logits, Checkpoint, Classifier, ConvArchitecture, Differentiable, Ensemble,
    IdentityDenoiser, LinearClassifier, SmallConvNet,
};
use certspoof::rng::{gaussian_noise, Phase, StreamId};
use certspoof::saliency::{overlap_score, SaliencyMap, SalientRegionMask};
use certspoof::smoothing::{
    certify, clopper_pearson_lower, outcome_from_counts, sample_class_counts, ClassCounts, SmoothingConfig,
};
use certspoof::{Image, Mask, Shape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn random_linear(rng: &mut ChaCha8Rng, shape: Shape, classes: usize, scale: f64) -> LinearClassifier {
    let rows = (0..classes)
        .map(|_| (0..shape.len()).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    LinearClassifier::new(shape, rows, vec![0.0; classes]).unwrap()
}

#[test]
fn radius_grows_with_the_top_count() {
    let cfg = SmoothingConfig { n: 500, ..SmoothingConfig::default() };
    let mut last = 0.0;
    for k in 0..=500u64 {
        let mut counts = ClassCounts::new();
        (0..k).for_each(|_| counts.record(3));
        (k..500).for_each(|_| counts.record(1));
        let o = outcome_from_counts(3, counts, &cfg, 0);
        assert!(o.radius >= last, "k={k}");
        last = o.radius;
    }
    assert!(last > 0.0);
    let lo = |a| clopper_pearson_lower(450, 500, a).unwrap();
    assert!(lo(0.001) <= lo(0.01) && lo(0.01) <= lo(0.1));
}

#[test]
fn certification_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let shape = Shape::new(4, 4, 1);
    let clf = random_linear(&mut rng, shape, 3, 1.0);
    let x = Image::filled(shape, 0.3);
    let cfg = SmoothingConfig { n: 300, ..SmoothingConfig::default() };
    assert_eq!(certify(&clf, &x, &cfg, 11).unwrap(), certify(&clf, &x, &cfg, 11).unwrap());
}

#[test]
fn ensemble_ignores_member_order() {
    let shape = Shape::new(10, 10, 1);
    let nets: Vec<Arc<dyn Differentiable>> = (0..3)
        .map(|s| Arc::new(SmallConvNet::new(ConvArchitecture::desk(shape, 4), s).unwrap()) as Arc<dyn Differentiable>)
        .collect();
    let mut reversed = nets.clone();
    reversed.reverse();
    let a = Ensemble::new(nets).unwrap();
    let b = Ensemble::new(reversed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let x = Image::from_vec(shape, (0..100).map(|_| rng.random()).collect()).unwrap();
        let (la, lb) = (ensemble_logits(&a, &x).unwrap(), ensemble_logits(&b, &x).unwrap());
        for (p, q) in la.iter().zip(&lb) {
            assert!((p - q).abs() <= 1e-12 * p.abs().max(1.0));
        }
        assert_eq!(a.label(&x), b.label(&x));
    }
}

#[test]
fn identity_denoiser_keeps_every_test_label() {
    let data = synthetic_digits(&SyntheticConfig { train_count: 1, test_count: 200, ..Default::default() }).unwrap().test;
    let base = Arc::new(SmallConvNet::new(ConvArchitecture::desk(data.shape(), 10), 8).unwrap());
    let composed = compose_denoised(base.clone(), Arc::new(IdentityDenoiser { shape: data.shape() })).unwrap();
    for (x, _) in data.iter() {
        assert_eq!(composed.label(x), base.label(x));
    }
}

#[test]
fn checkpoint_bytes_preserve_logits() {
    let shape = Shape::new(28, 28, 1);
    let net = SmallConvNet::new(ConvArchitecture::desk(shape, 10), 21).unwrap();
    let back = Checkpoint::from_bytes(&Checkpoint::Classifier(net.clone()).to_bytes()).unwrap().into_classifier().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..8 {
        let x = Image::from_vec(shape, (0..shape.len()).map(|_| rng.random()).collect()).unwrap();
        let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
        assert_eq!(bits(net.logits(&x)), bits(back.logits(&x)));
    }
}

#[test]
fn overlap_score_stays_below_one_and_grows_with_mass() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let values: Vec<f64> = (0..36).map(|_| rng.random()).collect();
        let s = SaliencyMap::from_values(6, 6, values).unwrap();
        let m = Mask::from_fn(6, 6, |_, _| rng.random_bool(0.4));
        let score = overlap_score(&m, &s).unwrap();
        assert!((0.0..1.0).contains(&score));
    }
    // same mask, more saliency mass inside it
    let m = Mask::from_fn(2, 2, |y, _| y == 0);
    let low = SaliencyMap::from_values(2, 2, vec![0.2, 0.2, 1.0, 1.0]).unwrap();
    let high = SaliencyMap::from_values(2, 2, vec![0.6, 0.6, 1.0, 1.0]).unwrap();
    assert!(overlap_score(&m, &high).unwrap() > overlap_score(&m, &low).unwrap());
}

#[test]
fn one_step_matches_plain_single_sample_pgd() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let shape = Shape::new(3, 3, 2);
    let clf = random_linear(&mut rng, shape, 4, 0.5);
    let x = Image::filled(shape, 0.5);
    let (sigma, seed, lambda) = (0.3, 77, 0.05);
    let cfg = AttackConfig {
        epsilon: 1.0,
        step_size: lambda,
        steps: 1,
        noise_batch: 1,
        sigma,
        seed,
        mask_inside_forward: true,
        projection: ProjectionMode::Ball,
    };
    let r = ghostcert(&clf, &x, AttackGoal::Untargeted { source: 2 }, &SalientRegionMask::full(3, 3), &cfg).unwrap();

    // hand-written reference: ∇ₓ CE(Wz + b, y) = Wᵀ(softmax − e_y)
    let eta = gaussian_noise(shape, sigma, seed, StreamId::new(Phase::Attack, 0, 0));
    let z: Vec<f64> = (0..4)
        .map(|c| {
            let row = &clf.rows()[c];
            (0..shape.len()).map(|i| row[i] * (x.as_slice()[i] + eta.as_slice()[i])).sum()
        })
        .collect();
    let max = z.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = e.iter().sum();
    let coef: Vec<f64> = (0..4).map(|c| e[c] / total - if c == 2 { 1.0 } else { 0.0 }).collect();
    let g: Vec<f64> = (0..shape.len()).map(|i| (0..4).map(|c| coef[c] * clf.rows()[c][i]).sum()).collect();
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    for (i, gi) in g.iter().enumerate() {
        let want = lambda * gi / norm;
        assert!((r.delta.as_slice()[i] - want).abs() < 1e-12, "pixel {i}");
    }
}

#[test]
fn stronger_budgets_lower_the_source_probability() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let shape = Shape::new(28, 28, 1);
    let sigma = 0.25;
    let epsilons = [2.0, 4.0, 6.0, 8.0, 10.0];
    let mut mean_p = vec![0.0; epsilons.len()];
    let instances = 20;
    for inst in 0..instances {
        let clf = random_linear(&mut rng, shape, 10, 0.05);
        let x = Image::from_vec(shape, (0..shape.len()).map(|_| rng.random()).collect()).unwrap();
        let source = clf.label(&x);
        for (j, &eps) in epsilons.iter().enumerate() {
            let budget = scale_budget(eps, shape);
            let cfg = AttackConfig {
                epsilon: budget,
                step_size: 2.5 * budget / 20.0,
                steps: 20,
                noise_batch: 4,
                sigma,
                seed: inst,
                ..AttackConfig::default()
            };
            let r = ghostcert(&clf, &x, AttackGoal::Untargeted { source }, &SalientRegionMask::full(28, 28), &cfg).unwrap();
            let counts = sample_class_counts(&clf, &r.adversarial, sigma, 2000, 1000 + inst).unwrap();
            mean_p[j] += counts.get(source) as f64 / 2000.0 / instances as f64;
        }
    }
    assert!(mean_p.windows(2).all(|w| w[1] <= w[0]), "{mean_p:?}");
    assert!(mean_p[4] < mean_p[0]);
}
