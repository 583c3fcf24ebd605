//! Randomized-smoothing prediction and certification.
//!
//! A smoothed classifier returns the class the base classifier is most likely
//! to output under isotropic Gaussian input noise. [`certify`] follows the
//! two-phase Monte-Carlo procedure: a small selection batch picks the
//! candidate class, a fresh estimation batch lower-bounds its probability,
//! and the lower bound becomes an L2 radius `σ·Φ⁻¹(p_A)`.

pub mod stats;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::rng::{gaussian_noise, Phase, StreamId};
use crate::tensor::{Image, Shape};

pub use stats::{
    binomial_test_half, clopper_pearson_lower, normal_cdf, normal_quantile, two_sided_radius,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothingConfig {
    pub sigma: f64,
    pub n0: u64,
    pub n: u64,
    pub alpha: f64,
    #[serde(default)]
    pub mu: f64,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self {
            sigma: 0.25,
            n0: 10,
            n: 1000,
            alpha: 0.001,
            mu: 0.0,
        }
    }
}

impl SmoothingConfig {
    pub fn new(sigma: f64, n0: u64, n: u64, alpha: f64, mu: f64) -> Result<Self> {
        let cfg = Self {
            sigma,
            n0,
            n,
            alpha,
            mu,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_sigma(sigma: f64) -> Result<Self> {
        let cfg = Self {
            sigma,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if self.n0 == 0 || self.n == 0 {
            return Err(Error::Config("n0 and n must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must be in (0, 1), got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(Error::Config(format!("mu must be in [0, 1], got {}", self.mu)));
        }
        Ok(())
    }

    /// Lower-bound threshold a top-class probability must exceed.
    pub fn threshold(&self) -> f64 {
        0.5 + self.mu / 2.0
    }
}

/// Monte-Carlo label histogram.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    counts: BTreeMap<usize, u64>,
    total: u64,
}

impl ClassCounts {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, label: usize) {
        *self.counts.entry(label).or_insert(0) += 1;
        self.total += 1;
    }

    pub fn get(&self, label: usize) -> u64 {
        self.counts.get(&label).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, u64)> + '_ {
        self.counts.iter().map(|(&k, &v)| (k, v))
    }

    /// Labels ordered by descending count, ties broken by smaller label.
    pub fn ranked(&self) -> Vec<(usize, u64)> {
        let mut v: Vec<_> = self.iter().collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        v
    }

    pub fn top(&self) -> Option<(usize, u64)> {
        self.ranked().first().copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Class(usize),
    Abstain,
}

impl Decision {
    pub fn class(self) -> Option<usize> {
        match self {
            Decision::Class(c) => Some(c),
            Decision::Abstain => None,
        }
    }

    pub fn is_abstain(self) -> bool {
        matches!(self, Decision::Abstain)
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Decision::Class(c) => write!(f, "{c}"),
            Decision::Abstain => f.write_str("ABSTAIN"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificationOutcome {
    pub decision: Decision,
    pub radius: f64,
    pub pa_lower: f64,
    pub counts: ClassCounts,
    pub seed: u64,
}

/// A batch of i.i.d. Gaussian noise draws reproducible from `seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBatch {
    pub samples: Vec<Image>,
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseBatch {
    pub fn draw(shape: Shape, sigma: f64, count: usize, seed: u64) -> Self {
        let samples = (0..count)
            .map(|i| gaussian_noise(shape, sigma, seed, StreamId::new(Phase::Sample, 0, i as u32)))
            .collect();
        Self {
            samples,
            sigma,
            seed,
        }
    }
}

fn counts_on_stream(
    classifier: &dyn Classifier,
    x: &Image,
    sigma: f64,
    count: u64,
    seed: u64,
    phase: Phase,
) -> ClassCounts {
    let mut counts = ClassCounts::new();
    if sigma == 0.0 {
        let label = classifier.label(x);
        for _ in 0..count {
            counts.record(label);
        }
        return counts;
    }
    let mut noisy = x.clone();
    for i in 0..count {
        let noise = gaussian_noise(x.shape(), sigma, seed, StreamId::new(phase, 0, i as u32));
        for ((out, base), eps) in noisy
            .as_mut_slice()
            .iter_mut()
            .zip(x.as_slice())
            .zip(noise.as_slice())
        {
            *out = base + eps;
        }
        counts.record(classifier.label(&noisy));
    }
    counts
}

/// Counts base-classifier labels over `count` noisy copies of `x`.
pub fn sample_class_counts(
    classifier: &dyn Classifier,
    x: &Image,
    sigma: f64,
    count: u64,
    seed: u64,
) -> Result<ClassCounts> {
    if count == 0 {
        return Err(Error::Domain("sample count must be at least 1".into()));
    }
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::Domain(format!("sigma must be >= 0, got {sigma}")));
    }
    x.ensure_shape(classifier.input_shape())?;
    Ok(counts_on_stream(classifier, x, sigma, count, seed, Phase::Sample))
}

/// Smoothed prediction with abstention.
///
/// The top class is returned only when a two-sided binomial test of its count
/// against the runner-up rejects p = 0.5 at level `alpha`.
pub fn predict_smoothed(
    classifier: &dyn Classifier,
    x: &Image,
    cfg: &SmoothingConfig,
    seed: u64,
) -> Result<Decision> {
    cfg.validate()?;
    x.ensure_shape(classifier.input_shape())?;
    let counts = counts_on_stream(classifier, x, cfg.sigma, cfg.n, seed, Phase::Prediction);
    let ranked = counts.ranked();
    let (top, n_a) = ranked[0];
    let n_b = ranked.get(1).map_or(0, |r| r.1);
    if binomial_test_half(n_a, n_a + n_b) > cfg.alpha {
        Ok(Decision::Abstain)
    } else {
        Ok(Decision::Class(top))
    }
}

/// Certifies `x` under the smoothed classifier.
pub fn certify(
    classifier: &dyn Classifier,
    x: &Image,
    cfg: &SmoothingConfig,
    seed: u64,
) -> Result<CertificationOutcome> {
    cfg.validate()?;
    x.ensure_shape(classifier.input_shape())?;
    let selection = counts_on_stream(classifier, x, cfg.sigma, cfg.n0, seed, Phase::Selection);
    let (candidate, _) = selection.top().expect("n0 >= 1");
    let counts = counts_on_stream(classifier, x, cfg.sigma, cfg.n, seed, Phase::Estimation);
    Ok(outcome_from_counts(candidate, counts, cfg, seed))
}

/// Applies the certification rule to estimation counts for a preselected
/// candidate class.
pub fn outcome_from_counts(
    candidate: usize,
    counts: ClassCounts,
    cfg: &SmoothingConfig,
    seed: u64,
) -> CertificationOutcome {
    let pa_lower = clopper_pearson_lower(counts.get(candidate), counts.total(), cfg.alpha)
        .expect("validated inputs");
    if pa_lower > cfg.threshold() {
        let radius = cfg.sigma * normal_quantile(pa_lower).expect("0.5 < pa_lower < 1");
        CertificationOutcome {
            decision: Decision::Class(candidate),
            radius,
            pa_lower,
            counts,
            seed,
        }
    } else {
        CertificationOutcome {
            decision: Decision::Abstain,
            radius: 0.0,
            pa_lower,
            counts,
            seed,
        }
    }
}
