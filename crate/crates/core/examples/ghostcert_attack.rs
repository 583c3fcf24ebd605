// Spoof a certificate with GhostCert: masked, noise-averaged PGD that
// moves the smoothed prediction away from the true label while the
// perturbation stays small and inside the salient regions.

use certspoof::attacks::{ghostcert, scale_budget, AttackConfig, AttackGoal};
use certspoof::data::{synthetic_digits, SyntheticConfig};
use certspoof::models::{train_noise_augmented, ConvArchitecture, SmallConvNet, TrainingConfig};
use certspoof::report::perturbation_panel;
use certspoof::saliency::{default_min_area, gradcam, propose_regions, select_salient_region_mask};
use certspoof::smoothing::{certify, Decision, SmoothingConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sigma = 0.25;
    let data = synthetic_digits(&SyntheticConfig { train_count: 600, test_count: 20, ..Default::default() })?;
    let mut net = SmallConvNet::new(ConvArchitecture::desk(data.train.shape(), 10), 3)?;
    let train = TrainingConfig { epochs: 2, sigma, ..Default::default() };
    train_noise_augmented(&mut net, data.train.images(), data.train.labels(), &train)?;
    let smoothing = SmoothingConfig { n: 200, ..SmoothingConfig::with_sigma(sigma)? };

    // attack the first test image the smoothed classifier certifies correctly
    let mut eligible = None;
    for (i, (x, label)) in data.test.iter().enumerate() {
        let o = certify(&net, x, &smoothing, i as u64)?;
        if o.decision == Decision::Class(label) {
            eligible = Some((x, label, o));
            break;
        }
    }
    let Some((x, label, before)) = eligible else {
        println!("no test image is certified correctly");
        return Ok(());
    };
    println!("clean: label {label}, certified {} with radius {:.3}", before.decision, before.radius);

    let props = propose_regions(x, default_min_area(x.height(), x.width()));
    let mask = select_salient_region_mask(&props, &gradcam(&net, x, label)?, 5)?;
    let dir = tempfile::tempdir()?;
    for eps in [2.0, 10.0] {
        // budgets are quoted for 224×224×3 images and rescaled to this one
        let budget = scale_budget(eps, x.shape());
        let cfg = AttackConfig {
            epsilon: budget,
            step_size: 2.5 * budget / 40.0,
            steps: 40,
            noise_batch: 8,
            sigma,
            seed: 5,
            ..AttackConfig::default()
        };
        let r = ghostcert(&net, x, AttackGoal::Untargeted { source: label }, &mask, &cfg)?;
        let after = certify(&net, &r.adversarial, &smoothing, 2)?;
        println!(
            "eps {eps} (l2 budget {budget:.3}): |delta| = {:.3}, tv {:.2}, now {} with radius {:.3}",
            r.l2_norm, r.total_variation, after.decision, after.radius
        );
        perturbation_panel(x, &r.adversarial)?.save(dir.path().join(format!("panel_eps{eps}.png")))?;
    }
    Ok(())
}
