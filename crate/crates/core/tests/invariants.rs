use certspoof::attacks::{
    ghostcert, project_and_mask, shadow_attack_bounded, total_variation, AttackConfig, AttackGoal, ProjectionMode,
    ShadowConfig,
};
use certspoof::evaluation::{
    summarize, AttackKind, CertRecord, DefenseKind, MaskStrategy, OutcomeCounts, TrialRecord, RECORD_SCHEMA_VERSION,
};
use certspoof::models::LinearClassifier;
use certspoof::saliency::{
    propose_regions, select_salient_region_mask, unmask_candidate, RegionProposal, RegionProposalSet, SaliencyMap,
    SalientRegionMask,
};
use certspoof::smoothing::{certify, clopper_pearson_lower, normal_cdf, normal_quantile, Decision, SmoothingConfig};
use certspoof::{Image, Mask, Shape};
use proptest::prelude::*;

fn image_strategy(h: usize, w: usize, c: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(0u8..=255, h * w * c)
        .prop_map(move |v| Image::from_vec(Shape::new(h, w, c), v.into_iter().map(|b| b as f64 / 255.0).collect()).unwrap())
}

fn mask_strategy(h: usize, w: usize) -> impl Strategy<Value = Mask> {
    prop::collection::vec(any::<bool>(), h * w).prop_map(move |bits| {
        let mut m = Mask::zeros(h, w);
        for (i, b) in bits.into_iter().enumerate() {
            m.set(i / w, i % w, b);
        }
        m
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn clopper_pearson_is_a_monotone_lower_bound(n in 1u64..400, frac in 0.0f64..=1.0, alpha in 0.0005f64..0.2) {
        let k = ((n as f64) * frac).floor() as u64;
        let lo = clopper_pearson_lower(k, n, alpha).unwrap();
        prop_assert!((0.0..=1.0).contains(&lo));
        prop_assert!(lo <= k as f64 / n as f64 + 1e-12);
        if k < n {
            prop_assert!(clopper_pearson_lower(k + 1, n, alpha).unwrap() >= lo);
        }
    }

    #[test]
    fn quantile_inverts_the_cdf(p in 1e-12f64..(1.0 - 1e-12)) {
        let q = normal_quantile(p).unwrap();
        prop_assert!((normal_cdf(q) - p).abs() <= 1e-9);
    }

    #[test]
    fn projection_respects_budget_and_support(
        d in prop::collection::vec(-3.0f64..3.0, 20),
        eps in 0.01f64..5.0,
        m in mask_strategy(4, 5),
        sphere in any::<bool>(),
    ) {
        let delta = Image::from_vec(Shape::new(4, 5, 1), d).unwrap();
        let mode = if sphere { ProjectionMode::Sphere } else { ProjectionMode::Ball };
        let p = project_and_mask(&delta, eps, &m, mode).unwrap();
        prop_assert!(p.l2_norm() <= eps + 1e-12);
        for i in 0..20 {
            if !m.get_flat(i) {
                prop_assert_eq!(p.as_slice()[i], 0.0);
            }
        }
    }

    #[test]
    fn total_variation_ignores_constant_offsets(x in image_strategy(3, 4, 2), c in -1.0f64..1.0) {
        let tv = total_variation(&x);
        prop_assert!(tv >= 0.0);
        let shifted = Image::from_fn(x.shape(), |y, xx, ch| x.get(y, xx, ch) + c);
        prop_assert!((total_variation(&shifted) - tv).abs() < 1e-9);
    }

    #[test]
    fn proposals_and_unmask_partition_the_frame(x in image_strategy(9, 7, 3), min_area in 1usize..6) {
        let props = propose_regions(&x, min_area);
        let mut cover = vec![0u8; 63];
        for p in props.proposals() {
            prop_assert!(p.area() >= min_area);
            for (i, c) in cover.iter_mut().enumerate() {
                *c += p.mask().get_flat(i) as u8;
            }
        }
        let u = unmask_candidate(&props);
        for (i, c) in cover.iter().enumerate() {
            prop_assert_eq!(*c + u.get_flat(i) as u8, 1, "pixel {} covered {} times", i, c);
        }
        prop_assert!(props.proposals().iter().all(|p| p.mask().as_bytes().iter().all(|b| *b <= 1)));
    }

    #[test]
    fn top_k_ignores_proposal_order(
        x in image_strategy(8, 8, 1),
        sal in prop::collection::vec(0.0f64..1.0, 64),
        k in 1usize..6,
        rot in 0usize..50,
    ) {
        let props = propose_regions(&x, 1);
        prop_assume!(props.len() > 1);
        let s = SaliencyMap::from_values(8, 8, sal).unwrap();
        let a = select_salient_region_mask(&props, &s, k).unwrap();
        let mut shuffled: Vec<RegionProposal> = props.proposals().to_vec();
        let shift = rot % shuffled.len();
        shuffled.rotate_left(shift);
        shuffled.reverse();
        let b = select_salient_region_mask(&RegionProposalSet::new(8, 8, shuffled).unwrap(), &s, k).unwrap();
        prop_assert_eq!(a.mask.as_bytes(), b.mask.as_bytes());
        prop_assert!(a.mask.as_bytes().iter().all(|v| *v <= 1));
    }

    #[test]
    fn ghostcert_stays_on_mask_and_in_budget(
        x in image_strategy(4, 4, 1),
        w in prop::collection::vec(-2.0f64..2.0, 16),
        m in mask_strategy(4, 4),
        eps in 0.05f64..3.0,
        steps in 0usize..12,
        sphere in any::<bool>(),
        inside in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let clf = LinearClassifier::binary(Shape::new(4, 4, 1), w, 0.1).unwrap();
        let mask = SalientRegionMask { mask: m.clone(), selected: Vec::new(), k: 0 };
        let cfg = AttackConfig {
            epsilon: eps,
            step_size: eps / 3.0,
            steps,
            noise_batch: 3,
            sigma: 0.25,
            seed,
            mask_inside_forward: inside,
            projection: if sphere { ProjectionMode::Sphere } else { ProjectionMode::Ball },
        };
        let r = ghostcert(&clf, &x, AttackGoal::Untargeted { source: 0 }, &mask, &cfg).unwrap();
        prop_assert!(r.l2_norm <= eps + 1e-6);
        for i in 0..16 {
            if !m.get_flat(i) {
                prop_assert_eq!(r.delta.as_slice()[i], 0.0);
            }
        }
        prop_assert_eq!(&r.adversarial, &x.add(&r.delta).clipped(0.0, 1.0));
        let again = ghostcert(&clf, &x, AttackGoal::Untargeted { source: 0 }, &mask, &cfg).unwrap();
        prop_assert_eq!(r.delta, again.delta);
    }

    #[test]
    fn bounded_shadow_stays_in_budget(x in image_strategy(3, 3, 3), bound in 0.01f64..2.0, seed in any::<u64>()) {
        let clf = LinearClassifier::binary(Shape::new(3, 3, 3), (0..27).map(|i| (i as f64 - 13.0) / 10.0).collect(), 0.0).unwrap();
        let cfg = ShadowConfig { step_size: 0.2, steps: 6, noise_batch: 2, seed, ..Default::default() };
        let r = shadow_attack_bounded(&clf, &x, AttackGoal::Untargeted { source: 0 }, &cfg, bound).unwrap();
        prop_assert!(r.l2_norm <= bound + 1e-6);
    }

    #[test]
    fn certification_outcome_invariants(w0 in -3.0f64..3.0, b in -1.0f64..1.0, seed in any::<u64>()) {
        let clf = LinearClassifier::binary(Shape::new(1, 2, 1), vec![w0, 1.0], b).unwrap();
        let cfg = SmoothingConfig { n: 300, ..SmoothingConfig::default() };
        let o = certify(&clf, &Image::filled(Shape::new(1, 2, 1), 0.5), &cfg, seed).unwrap();
        match o.decision {
            Decision::Abstain => {
                prop_assert_eq!(o.radius, 0.0);
                prop_assert!(o.pa_lower <= cfg.threshold());
            }
            Decision::Class(_) => {
                prop_assert!(o.pa_lower > 0.5);
                prop_assert!(o.radius > 0.0);
            }
        }
        prop_assert_eq!(o.counts.total(), cfg.n);
    }

    #[test]
    fn targeted_outcomes_partition_every_record_set(decisions in prop::collection::vec(0usize..5, 1..60)) {
        // 0..=3 are labels (source 1, target 2), 4 abstains
        let records: Vec<TrialRecord> = decisions.iter().map(|d| record(if *d == 4 { Decision::Abstain } else { Decision::Class(*d) })).collect();
        let s = summarize(&records).unwrap();
        let c: OutcomeCounts = s.counts;
        prop_assert_eq!(c.total(), records.len());
        let sum = s.asr + s.dos + c.other as f64 / s.trials as f64 + c.source as f64 / s.trials as f64;
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert!(s.asr <= s.asr_untargeted);
    }
}

fn record(post: Decision) -> TrialRecord {
    TrialRecord {
        schema_version: RECORD_SCHEMA_VERSION,
        image_id: 0,
        source_label: 1,
        target_label: Some(2),
        defense: DefenseKind::Single,
        sigma: 0.25,
        epsilon: 2.0,
        budget: 0.1,
        attack: AttackKind::Ghostcert,
        mask: MaskStrategy::default(),
        mask_area: None,
        smoothing: SmoothingConfig::default(),
        step_size: 0.01,
        steps: 1,
        noise_batch: 1,
        source: CertRecord { decision: Decision::Class(1), radius: 0.3, pa_lower: 0.8, seed: 0 },
        post: Some(CertRecord { decision: post, radius: 0.1, pa_lower: 0.6, seed: 1 }),
        l2_norm: 0.0,
        linf_norm: 0.0,
        total_variation: 0.0,
        skipped_steps: 0,
        attack_seed: 0,
        adversarial: None,
        error: None,
        wall_time_secs: 0.0,
    }
}
