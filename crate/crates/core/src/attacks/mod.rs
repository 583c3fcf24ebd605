//! Certificate-spoofing attacks against smoothed classifiers.
//!
//! [`ghostcert`] runs masked PGD on a noise-averaged cross-entropy: every
//! step draws `noise_batch` Gaussian samples, averages the loss gradient at
//! `x + Δ_i + δ`, takes a normalised step and projects back onto the
//! masked L2 budget. Ensembles and denoised pipelines are attacked through
//! the same code path by passing the composed classifier.
//!
//! [`shadow_attack`] is the penalised baseline (total variation, channel
//! means, channel similarity) and [`shadow_attack_bounded`] adds an L2 ball.

mod shadow;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{cross_entropy, Differentiable};
use crate::rng::{gaussian_noise, Phase, StreamId};
use crate::saliency::SalientRegionMask;
use crate::tensor::{Image, Mask, Shape};

pub use shadow::{
    channel_dissimilarity, color_mean_penalty, shadow_attack, shadow_attack_bounded, total_variation, ShadowConfig,
};

/// Pixel count of the 224×224×3 frame that budgets are quoted in.
pub const REFERENCE_DIMENSION: usize = 224 * 224 * 3;

/// Rescales an L2 budget quoted for a 224×224×3 image to `shape`, keeping
/// the per-pixel RMS distortion fixed.
pub fn scale_budget(epsilon: f64, shape: Shape) -> f64 {
    epsilon * (shape.len() as f64 / REFERENCE_DIMENSION as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackGoal {
    /// Push the smoothed prediction away from `source`.
    Untargeted { source: usize },
    /// Pull the smoothed prediction towards `target`.
    Targeted { source: usize, target: usize },
}

impl AttackGoal {
    pub fn source(&self) -> usize {
        match *self {
            AttackGoal::Untargeted { source } | AttackGoal::Targeted { source, .. } => source,
        }
    }

    pub fn target(&self) -> Option<usize> {
        match *self {
            AttackGoal::Untargeted { .. } => None,
            AttackGoal::Targeted { target, .. } => Some(target),
        }
    }

    pub fn is_targeted(&self) -> bool {
        matches!(self, AttackGoal::Targeted { .. })
    }

    fn validate(&self, num_classes: usize) -> Result<()> {
        let src = self.source();
        if src >= num_classes {
            return Err(Error::Domain(format!("source label {src} out of range")));
        }
        if let Some(t) = self.target() {
            if t >= num_classes {
                return Err(Error::Domain(format!("target label {t} out of range")));
            }
            if t == src {
                return Err(Error::Domain("target label equals the source label".into()));
            }
        }
        Ok(())
    }

    /// Objective to ascend and its gradient over the logits: the
    /// cross-entropy of the source label, or minus that of the target.
    fn objective(&self, logits: &[f64]) -> (f64, Vec<f64>) {
        match *self {
            AttackGoal::Untargeted { source } => cross_entropy(logits, source),
            AttackGoal::Targeted { target, .. } => {
                let (l, g) = cross_entropy(logits, target);
                (-l, g.into_iter().map(|v| -v).collect())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    /// Rescale to exactly `ε` every step, then mask.
    Sphere,
    /// Rescale only when outside the `ε` ball, then mask.
    Ball,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// L2 budget in pixel units of the attacked image.
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    /// Noise samples averaged per step.
    pub noise_batch: usize,
    pub sigma: f64,
    pub seed: u64,
    /// Differentiate through `δ ⊙ m` rather than `δ`, so the step direction
    /// only uses on-mask gradient.
    pub mask_inside_forward: bool,
    pub projection: ProjectionMode,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 2.0,
            step_size: 1e-4,
            steps: 100,
            noise_batch: 32,
            sigma: 0.25,
            seed: 0,
            mask_inside_forward: true,
            projection: ProjectionMode::Ball,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !(self.step_size > 0.0) {
            return Err(Error::Config("epsilon and step_size must be positive".into()));
        }
        if self.noise_batch == 0 {
            return Err(Error::Config("noise_batch must be at least 1".into()));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::Config("sigma must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "attack", rename_all = "snake_case")]
pub enum AttackSettings {
    Ghostcert(AttackConfig),
    Shadow(ShadowConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    /// Effective perturbation `adversarial − x`.
    pub delta: Image,
    /// `clip(x + δ, 0, 1)`.
    pub adversarial: Image,
    pub l2_norm: f64,
    pub linf_norm: f64,
    pub total_variation: f64,
    /// Mean objective over the noise batch before each step.
    pub loss_trace: Vec<f64>,
    /// Steps skipped because the gradient vanished.
    pub skipped_steps: Vec<usize>,
    pub goal: AttackGoal,
    pub settings: AttackSettings,
    pub seed: u64,
}

impl AttackResult {
    pub(crate) fn materialize(
        x: &Image,
        iterate: &Image,
        loss_trace: Vec<f64>,
        skipped_steps: Vec<usize>,
        goal: AttackGoal,
        settings: AttackSettings,
        seed: u64,
    ) -> Self {
        let adversarial = x.add(iterate).clipped(0.0, 1.0);
        let delta = adversarial.sub(x);
        Self {
            l2_norm: delta.l2_norm(),
            linf_norm: delta.linf_norm(),
            total_variation: total_variation(&delta),
            delta,
            adversarial,
            loss_trace,
            skipped_steps,
            goal,
            settings,
            seed,
        }
    }
}

/// Rescales `delta` onto the `ε` sphere ([`ProjectionMode::Sphere`]) or into
/// the `ε` ball ([`ProjectionMode::Ball`]) and zeroes it off the mask. A
/// zero `delta` stays zero.
pub fn project_and_mask(delta: &Image, epsilon: f64, mask: &Mask, mode: ProjectionMode) -> Result<Image> {
    if !mask.matches(delta.shape()) {
        return Err(Error::shape(delta.shape(), format!("{}x{} mask", mask.height(), mask.width())));
    }
    let norm = delta.l2_norm();
    let factor = match mode {
        _ if norm == 0.0 => 1.0,
        ProjectionMode::Sphere => epsilon / norm,
        ProjectionMode::Ball if norm > epsilon => epsilon / norm,
        ProjectionMode::Ball => 1.0,
    };
    let mut out = delta.scaled(factor);
    mask.apply(&mut out);
    // masking cannot increase the norm, but rescaling can overshoot by an ulp
    let n = out.l2_norm();
    if n > epsilon {
        out.scale(epsilon / n);
    }
    Ok(out)
}

/// Mean attack objective and its gradient with respect to `delta`, averaged
/// over `noise_batch` Gaussian draws on the `(seed, step)` stream.
pub fn noise_averaged_gradient(
    clf: &dyn Differentiable,
    x: &Image,
    delta: &Image,
    goal: AttackGoal,
    sigma: f64,
    noise_batch: usize,
    seed: u64,
    step: usize,
) -> Result<(f64, Image)> {
    x.ensure_shape(clf.input_shape())?;
    delta.ensure_shape(x.shape())?;
    goal.validate(clf.num_classes())?;
    let base = x.add(delta);
    let mut grad = Image::zeros(x.shape());
    let mut total = 0.0;
    for i in 0..noise_batch {
        let noise = gaussian_noise(x.shape(), sigma, seed, StreamId::new(Phase::Attack, step as u32, i as u32));
        let (logits, pullback) = clf.logits_with_pullback(&base.add(&noise));
        let (value, dlogits) = goal.objective(&logits);
        total += value;
        grad.add_assign(&pullback(&dlogits));
    }
    let n = noise_batch as f64;
    grad.scale(1.0 / n);
    Ok((total / n, grad))
}

/// Masked, noise-averaged PGD that searches for a perturbation inside
/// `mask` with `‖δ‖₂ ≤ ε` which moves the smoothed prediction according to
/// `goal`.
pub fn ghostcert(
    clf: &dyn Differentiable,
    x: &Image,
    goal: AttackGoal,
    mask: &SalientRegionMask,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    x.ensure_shape(clf.input_shape())?;
    goal.validate(clf.num_classes())?;
    let m = &mask.mask;
    if !m.matches(x.shape()) {
        return Err(Error::shape(x.shape(), format!("{}x{} mask", m.height(), m.width())));
    }
    let mut delta = Image::zeros(x.shape());
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut skipped = Vec::new();
    for step in 0..cfg.steps {
        let forward = if cfg.mask_inside_forward { m.applied(&delta) } else { delta.clone() };
        let (value, mut g) =
            noise_averaged_gradient(clf, x, &forward, goal, cfg.sigma, cfg.noise_batch, cfg.seed, step)?;
        trace.push(value);
        if cfg.mask_inside_forward {
            m.apply(&mut g);
        }
        let norm = g.l2_norm();
        if norm == 0.0 || !norm.is_finite() {
            log::debug!("ghostcert step {step}: gradient norm {norm}, skipping");
            skipped.push(step);
            continue;
        }
        delta.axpy(cfg.step_size / norm, &g);
        delta = project_and_mask(&delta, cfg.epsilon, m, cfg.projection)?;
    }
    Ok(AttackResult::materialize(
        x,
        &delta,
        trace,
        skipped,
        goal,
        AttackSettings::Ghostcert(*cfg),
        cfg.seed,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Classifier, LinearClassifier};
    use crate::smoothing::{certify, Decision, SmoothingConfig};

    #[test]
    fn projection_examples() {
        let shape = Shape::new(1, 4, 1);
        let d = Image::from_vec(shape, vec![6.0, 8.0, 0.0, 0.0]).unwrap();
        let full = Mask::ones(1, 4);
        let p = project_and_mask(&d, 2.0, &full, ProjectionMode::Sphere).unwrap();
        assert!((p.l2_norm() - 2.0).abs() < 1e-12);
        assert_eq!(project_and_mask(&d, 2.0, &Mask::zeros(1, 4), ProjectionMode::Ball).unwrap(), Image::zeros(shape));
        let small = Image::from_vec(shape, vec![0.6, 0.8, 0.0, 0.0]).unwrap();
        assert_eq!(project_and_mask(&small, 2.0, &full, ProjectionMode::Ball).unwrap(), small);
        assert_eq!(
            project_and_mask(&Image::zeros(shape), 2.0, &full, ProjectionMode::Sphere).unwrap(),
            Image::zeros(shape)
        );
    }

    #[test]
    fn zero_steps_leave_image_unchanged() {
        let shape = Shape::new(2, 2, 1);
        let clf = LinearClassifier::binary(shape, vec![1.0, -1.0, 0.5, 0.0], 0.1).unwrap();
        let x = Image::filled(shape, 0.5);
        let cfg = AttackConfig { steps: 0, ..AttackConfig::default() };
        let r = ghostcert(&clf, &x, AttackGoal::Untargeted { source: 0 }, &SalientRegionMask::full(2, 2), &cfg).unwrap();
        assert_eq!(r.adversarial, x);
        assert_eq!(r.l2_norm, 0.0);
    }

    #[test]
    fn rejects_target_equal_to_source() {
        let shape = Shape::new(1, 2, 1);
        let clf = LinearClassifier::binary(shape, vec![1.0, 0.0], 0.0).unwrap();
        let goal = AttackGoal::Targeted { source: 1, target: 1 };
        let r = ghostcert(&clf, &Image::zeros(shape), goal, &SalientRegionMask::full(1, 2), &AttackConfig::default());
        assert!(r.is_err());
    }

    #[test]
    fn linear_attack_crosses_the_boundary() {
        // w = (1, 0), b = -0.3 and x = (0.5, 0.5): margin 0.2 on the class-0
        // side. The optimal direction is −w, and ε = 0.5 exceeds the margin.
        let shape = Shape::new(1, 2, 1);
        let clf = LinearClassifier::binary(shape, vec![1.0, 0.0], -0.3).unwrap();
        let x = Image::filled(shape, 0.5);
        let smoothing = SmoothingConfig { sigma: 0.1, n0: 10, n: 2000, alpha: 0.001, mu: 0.0 };
        assert_eq!(certify(&clf, &x, &smoothing, 1).unwrap().decision, Decision::Class(0));
        let cfg = AttackConfig { epsilon: 0.5, step_size: 0.05, steps: 40, noise_batch: 8, sigma: 0.1, ..Default::default() };
        let r = ghostcert(&clf, &x, AttackGoal::Untargeted { source: 0 }, &SalientRegionMask::full(1, 2), &cfg).unwrap();
        assert!(r.delta.get(0, 0, 0) < -0.4);
        assert!(r.l2_norm <= 0.5 + 1e-6);
        assert_ne!(certify(&clf, &r.adversarial, &smoothing, 2).unwrap().decision, Decision::Class(0));
        assert_eq!(clf.label(&r.adversarial), 1);
    }

    #[test]
    fn budget_scaling_keeps_rms_distortion() {
        let s = scale_budget(10.0, Shape::new(28, 28, 1));
        assert!((s - 10.0 * (784.0f64 / 150528.0).sqrt()).abs() < 1e-12);
        assert_eq!(scale_budget(3.0, Shape::new(224, 224, 3)), 3.0);
    }
}
