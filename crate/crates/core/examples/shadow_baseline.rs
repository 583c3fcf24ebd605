// The Shadow baseline: noise-averaged PGD on the whole frame with
// total-variation, colour-mean and channel-similarity penalties, with and
// without an L2 bound.

use certspoof::attacks::{
    channel_dissimilarity, color_mean_penalty, scale_budget, shadow_attack, shadow_attack_bounded, total_variation,
    AttackGoal, ShadowConfig,
};
use certspoof::data::{synthetic_digits, GlyphStyle, SyntheticConfig};
use certspoof::models::{train_noise_augmented, ConvArchitecture, SmallConvNet, TrainingConfig};
use certspoof::smoothing::{certify, SmoothingConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sigma = 0.25;
    let cfg = SyntheticConfig { style: GlyphStyle::Color32, train_count: 400, test_count: 5, ..Default::default() };
    let data = synthetic_digits(&cfg)?;
    let mut net = SmallConvNet::new(ConvArchitecture::desk(data.train.shape(), 10), 4)?;
    train_noise_augmented(&mut net, data.train.images(), data.train.labels(), &TrainingConfig { epochs: 2, sigma, ..Default::default() })?;
    let smoothing = SmoothingConfig { n: 200, ..SmoothingConfig::with_sigma(sigma)? };

    let (x, label) = (data.test.image(0), data.test.label(0));
    let goal = AttackGoal::Untargeted { source: label };
    let shadow = ShadowConfig { step_size: 0.02, steps: 30, noise_batch: 8, sigma, ..ShadowConfig::default() };
    let bound = scale_budget(10.0, x.shape());
    for (name, r) in [
        ("unbounded", shadow_attack(&net, x, goal, &shadow)?),
        ("bounded", shadow_attack_bounded(&net, x, goal, &shadow, bound)?),
    ] {
        let post = certify(&net, &r.adversarial, &smoothing, 3)?;
        println!(
            "{name}: l2 {:.4}, tv {:.3}, colour mean {:.2e}, channel dissimilarity {:.2e} -> {} radius {:.3}",
            r.l2_norm,
            total_variation(&r.delta),
            color_mean_penalty(&r.delta),
            channel_dissimilarity(&r.delta),
            post.decision,
            post.radius
        );
    }
    Ok(())
}
