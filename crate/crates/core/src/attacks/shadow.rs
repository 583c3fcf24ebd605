use serde::{Deserialize, Serialize};

use crate::attacks::{noise_averaged_gradient, AttackGoal, AttackResult, AttackSettings};
use crate::error::{Error, Result};
use crate::models::Differentiable;
use crate::tensor::{Image, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShadowConfig {
    pub step_size: f64,
    pub steps: usize,
    pub tv_weight: f64,
    pub color_mean_weight: f64,
    pub channel_sim_weight: f64,
    /// L2 bound for the bounded variant; `None` leaves `δ` unconstrained.
    pub l2_bound: Option<f64>,
    pub sigma: f64,
    pub noise_batch: usize,
    pub seed: u64,
}

impl Default for ShadowConfig {
    fn default() -> Self {
        Self {
            step_size: 1e-4,
            steps: 100,
            tv_weight: 0.3,
            color_mean_weight: 1.0,
            channel_sim_weight: 0.5,
            l2_bound: None,
            sigma: 0.25,
            noise_batch: 32,
            seed: 0,
        }
    }
}

impl ShadowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || self.noise_batch == 0 {
            return Err(Error::Config("step_size and noise_batch must be positive".into()));
        }
        if [self.tv_weight, self.color_mean_weight, self.channel_sim_weight]
            .iter()
            .any(|w| !(*w >= 0.0))
        {
            return Err(Error::Config("penalty weights must be non-negative".into()));
        }
        if let Some(b) = self.l2_bound {
            if !(b > 0.0) {
                return Err(Error::Config("l2_bound must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Anisotropic total variation summed over channels.
pub fn total_variation(delta: &Image) -> f64 {
    let (h, w, c) = (delta.height(), delta.width(), delta.channels());
    let mut tv = 0.0;
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = delta.get(y, x, ch);
                if y + 1 < h {
                    tv += (delta.get(y + 1, x, ch) - v).abs();
                }
                if x + 1 < w {
                    tv += (delta.get(y, x + 1, ch) - v).abs();
                }
            }
        }
    }
    tv
}

fn total_variation_subgradient(delta: &Image) -> Image {
    let (h, w, c) = (delta.height(), delta.width(), delta.channels());
    let mut g = Image::zeros(delta.shape());
    let sign = |d: f64| if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 };
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = delta.get(y, x, ch);
                let here = delta.index(y, x, ch);
                if y + 1 < h {
                    let s = sign(delta.get(y + 1, x, ch) - v);
                    g.as_mut_slice()[here] -= s;
                    g.as_mut_slice()[delta.index(y + 1, x, ch)] += s;
                }
                if x + 1 < w {
                    let s = sign(delta.get(y, x + 1, ch) - v);
                    g.as_mut_slice()[here] -= s;
                    g.as_mut_slice()[delta.index(y, x + 1, ch)] += s;
                }
            }
        }
    }
    g
}

fn channel_means(delta: &Image) -> Vec<f64> {
    let c = delta.channels();
    let pixels = (delta.height() * delta.width()) as f64;
    let mut means = vec![0.0; c];
    for px in delta.as_slice().chunks(c) {
        for (m, v) in means.iter_mut().zip(px) {
            *m += v / pixels;
        }
    }
    means
}

/// `Σ_ch mean_ch(δ)²`.
pub fn color_mean_penalty(delta: &Image) -> f64 {
    channel_means(delta).iter().map(|m| m * m).sum()
}

/// Mean squared deviation of each channel from the per-pixel channel mean.
pub fn channel_dissimilarity(delta: &Image) -> f64 {
    let c = delta.channels();
    let mut total = 0.0;
    for px in delta.as_slice().chunks(c) {
        let mean = px.iter().sum::<f64>() / c as f64;
        total += px.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    }
    total / delta.as_slice().len() as f64
}

fn penalty_gradient(delta: &Image, cfg: &ShadowConfig) -> Image {
    let c = delta.channels();
    let pixels = (delta.height() * delta.width()) as f64;
    let n = delta.as_slice().len() as f64;
    let mut g = total_variation_subgradient(delta);
    g.scale(cfg.tv_weight);
    let means = channel_means(delta);
    for (px, gp) in delta.as_slice().chunks(c).zip(g.as_mut_slice().chunks_mut(c)) {
        let pm = px.iter().sum::<f64>() / c as f64;
        for ch in 0..c {
            gp[ch] += cfg.color_mean_weight * 2.0 * means[ch] / pixels;
            gp[ch] += cfg.channel_sim_weight * 2.0 * (px[ch] - pm) / n;
        }
    }
    g
}

fn penalties(delta: &Image, cfg: &ShadowConfig) -> f64 {
    cfg.tv_weight * total_variation(delta)
        + cfg.color_mean_weight * color_mean_penalty(delta)
        + cfg.channel_sim_weight * channel_dissimilarity(delta)
}

fn run(clf: &dyn Differentiable, x: &Image, goal: AttackGoal, cfg: &ShadowConfig) -> Result<AttackResult> {
    cfg.validate()?;
    let full = Mask::ones(x.height(), x.width());
    let mut delta = Image::zeros(x.shape());
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut skipped = Vec::new();
    for step in 0..cfg.steps {
        let (value, mut g) = noise_averaged_gradient(clf, x, &delta, goal, cfg.sigma, cfg.noise_batch, cfg.seed, step)?;
        trace.push(value - penalties(&delta, cfg));
        g.axpy(-1.0, &penalty_gradient(&delta, cfg));
        let norm = g.l2_norm();
        if norm == 0.0 || !norm.is_finite() {
            log::debug!("shadow step {step}: gradient norm {norm}, skipping");
            skipped.push(step);
            continue;
        }
        delta.axpy(cfg.step_size / norm, &g);
        if let Some(bound) = cfg.l2_bound {
            delta = crate::attacks::project_and_mask(&delta, bound, &full, crate::attacks::ProjectionMode::Ball)?;
        }
    }
    Ok(AttackResult::materialize(
        x,
        &delta,
        trace,
        skipped,
        goal,
        AttackSettings::Shadow(*cfg),
        cfg.seed,
    ))
}

/// Penalised noise-averaged PGD without a norm constraint; any `l2_bound`
/// in `cfg` is ignored.
pub fn shadow_attack(clf: &dyn Differentiable, x: &Image, goal: AttackGoal, cfg: &ShadowConfig) -> Result<AttackResult> {
    run(clf, x, goal, &ShadowConfig { l2_bound: None, ..*cfg })
}

/// [`shadow_attack`] with a projection onto the L2 ball of radius `bound`
/// after every step.
pub fn shadow_attack_bounded(
    clf: &dyn Differentiable,
    x: &Image,
    goal: AttackGoal,
    cfg: &ShadowConfig,
    bound: f64,
) -> Result<AttackResult> {
    if !(bound > 0.0) {
        return Err(Error::Config("l2 bound must be positive".into()));
    }
    run(clf, x, goal, &ShadowConfig { l2_bound: Some(bound), ..*cfg })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::LinearClassifier;
    use crate::tensor::Shape;

    #[test]
    fn total_variation_examples() {
        assert_eq!(total_variation(&Image::filled(Shape::new(3, 4, 2), 0.7)), 0.0);
        let d = Image::from_vec(Shape::new(1, 2, 1), vec![0.0, 1.0]).unwrap();
        assert_eq!(total_variation(&d), 1.0);
        let d = Image::from_vec(Shape::new(2, 2, 1), vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(total_variation(&d), 4.0);
    }

    #[test]
    fn grayscale_has_no_channel_dissimilarity() {
        let d = Image::from_fn(Shape::new(3, 3, 1), |y, x, _| (y * 3 + x) as f64);
        assert_eq!(channel_dissimilarity(&d), 0.0);
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        // away from TV kinks the penalty is smooth
        let shape = Shape::new(3, 3, 3);
        let d = Image::from_fn(shape, |y, x, c| ((y * 7 + x * 3 + c * 5) % 11) as f64 * 0.1 + 0.013 * c as f64);
        let cfg = ShadowConfig { tv_weight: 0.3, color_mean_weight: 1.0, channel_sim_weight: 0.5, ..Default::default() };
        let g = penalty_gradient(&d, &cfg);
        let h = 1e-6;
        for i in 0..shape.len() {
            let mut up = d.clone();
            up.as_mut_slice()[i] += h;
            let mut down = d.clone();
            down.as_mut_slice()[i] -= h;
            let fd = (penalties(&up, &cfg) - penalties(&down, &cfg)) / (2.0 * h);
            assert!((fd - g.as_slice()[i]).abs() < 1e-6, "{i}: {fd} vs {}", g.as_slice()[i]);
        }
    }

    #[test]
    fn infinite_bound_recovers_unbounded() {
        let shape = Shape::new(2, 2, 1);
        let clf = LinearClassifier::binary(shape, vec![1.0, -0.5, 0.2, 0.3], 0.0).unwrap();
        let x = Image::filled(shape, 0.4);
        let goal = AttackGoal::Untargeted { source: 0 };
        let cfg = ShadowConfig { step_size: 0.05, steps: 10, noise_batch: 4, ..Default::default() };
        let a = shadow_attack(&clf, &x, goal, &cfg).unwrap();
        let b = shadow_attack_bounded(&clf, &x, goal, &cfg, f64::INFINITY).unwrap();
        assert_eq!(a.delta, b.delta);
        let c = shadow_attack_bounded(&clf, &x, goal, &cfg, 0.1).unwrap();
        assert!(c.l2_norm <= 0.1 + 1e-12);
    }
}
