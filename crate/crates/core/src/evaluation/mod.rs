//! Evaluation protocol: eligible-image selection, target assignment, the
//! (defense × ε × attack × goal) grid, ablations and metrics.
//!
//! Every trial draws its seeds from the grid master seed through
//! [`derive_seed`] keyed on the defense, σ, image and goal. The budget, attack
//! kind and mask strategy are left out of the key, so cells that differ only
//! in those share noise (common random numbers) and adding a cell never
//! changes an existing trial.

mod metrics;
mod store;

use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attacks::{
    ghostcert, scale_budget, shadow_attack, shadow_attack_bounded, AttackConfig, AttackGoal, AttackResult,
    ProjectionMode, ShadowConfig,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{compose_denoised, Denoiser, Differentiable, Ensemble, SmallConvNet};
use crate::rng::derive_seed;
use crate::saliency::{
    default_min_area, gradcam, gradcam_raw, input_gradient_saliency, propose_regions, random_pixel_mask,
    random_region_mask, select_salient_region_mask, SaliencyMap, SalientRegionMask,
};
use crate::smoothing::{certify, CertificationOutcome, Decision, SmoothingConfig};
use crate::tensor::{Image, Shape};

pub use metrics::{
    asr_targeted, asr_untargeted, dos_rate, imperceptibility_metrics, mean_spoofing_radius, summarize,
    Imperceptibility, MetricsSummary, OutcomeCounts,
};
pub use store::{read_records, write_records, RecordStore};

/// Version tag written into every [`TrialRecord`].
pub const RECORD_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    Single,
    Ensemble,
    Denoised,
}

impl fmt::Display for DefenseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DefenseKind::Single => "single",
            DefenseKind::Ensemble => "ensemble",
            DefenseKind::Denoised => "denoised",
        })
    }
}

#[derive(Clone)]
enum SaliencySource {
    GradCam(Vec<Arc<SmallConvNet>>),
    DenoisedGradCam(Arc<SmallConvNet>, Arc<dyn Denoiser>),
    InputGradient,
}

/// A smoothed defense: the base classifier the verifier samples, the noise
/// level it certifies at, and how saliency is computed for it.
#[derive(Clone)]
pub struct Defense {
    kind: DefenseKind,
    sigma: f64,
    classifier: Arc<dyn Differentiable>,
    saliency: SaliencySource,
}

impl fmt::Debug for Defense {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Defense")
            .field("kind", &self.kind)
            .field("sigma", &self.sigma)
            .field("shape", &self.classifier.input_shape())
            .finish()
    }
}

impl Defense {
    pub fn single(net: SmallConvNet, sigma: f64) -> Self {
        let net = Arc::new(net);
        Self {
            kind: DefenseKind::Single,
            sigma,
            classifier: net.clone(),
            saliency: SaliencySource::GradCam(vec![net]),
        }
    }

    pub fn ensemble(members: Vec<SmallConvNet>, sigma: f64) -> Result<Self> {
        let members: Vec<Arc<SmallConvNet>> = members.into_iter().map(Arc::new).collect();
        let ens = Ensemble::new(members.iter().map(|m| m.clone() as Arc<dyn Differentiable>).collect())?;
        Ok(Self {
            kind: DefenseKind::Ensemble,
            sigma,
            classifier: Arc::new(ens),
            saliency: SaliencySource::GradCam(members),
        })
    }

    /// Fails when the denoiser was trained for a different noise level.
    pub fn denoised(base: SmallConvNet, denoiser: Arc<dyn Denoiser>, sigma: f64) -> Result<Self> {
        if let Some(trained) = denoiser.trained_sigma() {
            if (trained - sigma).abs() > 1e-12 {
                return Err(Error::Config(format!(
                    "denoiser trained for sigma {trained} cannot certify at sigma {sigma}"
                )));
            }
        }
        let base = Arc::new(base);
        let composed = compose_denoised(base.clone(), denoiser.clone())?;
        Ok(Self {
            kind: DefenseKind::Denoised,
            sigma,
            classifier: Arc::new(composed),
            saliency: SaliencySource::DenoisedGradCam(base, denoiser),
        })
    }

    /// Wraps an arbitrary classifier; saliency falls back to the input
    /// gradient.
    pub fn from_classifier(kind: DefenseKind, classifier: Arc<dyn Differentiable>, sigma: f64) -> Self {
        Self {
            kind,
            sigma,
            classifier,
            saliency: SaliencySource::InputGradient,
        }
    }

    pub fn kind(&self) -> DefenseKind {
        self.kind
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn classifier(&self) -> &dyn Differentiable {
        self.classifier.as_ref()
    }

    pub fn input_shape(&self) -> Shape {
        self.classifier.input_shape()
    }

    pub fn smoothing(&self, params: &CertificationParams) -> Result<SmoothingConfig> {
        SmoothingConfig::new(self.sigma, params.n0, params.n, params.alpha, params.mu)
    }

    /// GradCAM for class `label`. Ensembles average the members' raw maps
    /// before normalising; denoised defenses use the base network on `D(x)`.
    pub fn saliency(&self, x: &Image, label: usize) -> Result<SaliencyMap> {
        match &self.saliency {
            SaliencySource::GradCam(nets) if nets.len() == 1 => gradcam(&nets[0], x, label),
            SaliencySource::GradCam(nets) => {
                let mut acc = vec![0.0; x.height() * x.width()];
                for net in nets {
                    let (a, g) = net.last_conv_activations_and_gradients(x, label)?;
                    for (s, v) in acc.iter_mut().zip(gradcam_raw(&a, &g, x.height(), x.width())?) {
                        *s += v / nets.len() as f64;
                    }
                }
                SaliencyMap::normalized(x.height(), x.width(), acc)
            }
            SaliencySource::DenoisedGradCam(base, denoiser) => gradcam(base, &denoiser.denoise(x), label),
            SaliencySource::InputGradient => input_gradient_saliency(self.classifier(), x, label),
        }
    }

    fn seed_key(&self, what: &str, image: usize) -> String {
        format!("{what}/{}/{}/{image}", self.kind, self.sigma)
    }
}

/// Certification settings other than σ, which belongs to the defense.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CertificationParams {
    pub n0: u64,
    pub n: u64,
    pub alpha: f64,
    pub mu: f64,
}

impl Default for CertificationParams {
    fn default() -> Self {
        let d = SmoothingConfig::default();
        Self {
            n0: d.n0,
            n: d.n,
            alpha: d.alpha,
            mu: d.mu,
        }
    }
}

/// The certification fields a trial keeps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertRecord {
    pub decision: Decision,
    pub radius: f64,
    pub pa_lower: f64,
    pub seed: u64,
}

impl From<&CertificationOutcome> for CertRecord {
    fn from(o: &CertificationOutcome) -> Self {
        Self {
            decision: o.decision,
            radius: o.radius,
            pa_lower: o.pa_lower,
            seed: o.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EligibleImage {
    pub index: usize,
    pub label: usize,
    pub source: CertRecord,
}

/// Scans `dataset` in index order and keeps images the smoothed defense
/// certifies as their true label, stopping after `count`.
pub fn select_eligible_images(
    dataset: &Dataset,
    defense: &Defense,
    params: &CertificationParams,
    count: usize,
    seed: u64,
) -> Result<Vec<EligibleImage>> {
    if count == 0 {
        return Err(Error::Domain("eligible image count must be at least 1".into()));
    }
    let smoothing = defense.smoothing(params)?;
    let mut out = Vec::with_capacity(count);
    for (index, (x, label)) in dataset.iter().enumerate() {
        if out.len() == count {
            break;
        }
        let outcome = certify(defense.classifier(), x, &smoothing, derive_seed(seed, &defense.seed_key("select", index)))?;
        if outcome.decision == Decision::Class(label) {
            out.push(EligibleImage {
                index,
                label,
                source: CertRecord::from(&outcome),
            });
        }
    }
    if out.len() < count {
        log::warn!(
            "only {} of {count} requested images are certified correctly by the {} defense at sigma {}",
            out.len(),
            defense.kind,
            defense.sigma
        );
    }
    Ok(out)
}

/// Label of the first image after `source_index` (wrapping) whose label
/// differs from the source label.
pub fn pick_target_label(labels: &[usize], source_index: usize) -> Result<usize> {
    let src = *labels
        .get(source_index)
        .ok_or_else(|| Error::Domain(format!("source index {source_index} out of range")))?;
    (1..labels.len())
        .map(|off| labels[(source_index + off) % labels.len()])
        .find(|&l| l != src)
        .ok_or_else(|| Error::Domain("dataset has a single distinct label".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Ghostcert,
    Shadow,
    ShadowBounded,
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackKind::Ghostcert => "ghostcert",
            AttackKind::Shadow => "shadow",
            AttackKind::ShadowBounded => "shadow_bounded",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalKind {
    Untargeted,
    Targeted,
}

impl fmt::Display for GoalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GoalKind::Untargeted => "untargeted",
            GoalKind::Targeted => "targeted",
        })
    }
}

/// Support of the GhostCert perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskStrategy {
    /// Top-k proposals (plus the unmask candidate) by saliency overlap.
    Saliency { k: usize },
    /// Each pixel kept independently with probability `fraction`.
    RandomPixel { fraction: f64 },
    /// `k` proposals drawn uniformly without replacement.
    RandomRegions { k: usize },
    Full,
}

/// Regions unioned into the mask unless configured otherwise.
pub const DEFAULT_K: usize = 5;

impl Default for MaskStrategy {
    fn default() -> Self {
        MaskStrategy::Saliency { k: DEFAULT_K }
    }
}

impl fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskStrategy::Saliency { k } => write!(f, "saliency_k{k}"),
            MaskStrategy::RandomPixel { fraction } => write!(f, "random_pixel_{fraction}"),
            MaskStrategy::RandomRegions { k } => write!(f, "random_regions_k{k}"),
            MaskStrategy::Full => f.write_str("full"),
        }
    }
}

/// Label the saliency map is computed for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencyLabel {
    #[default]
    Source,
    /// The target label for targeted attacks, the source otherwise.
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum StepRule {
    Fixed { value: f64 },
    /// `factor · budget / steps`.
    BudgetFraction { factor: f64 },
}

impl StepRule {
    pub fn step_size(&self, budget: f64, steps: usize) -> f64 {
        match *self {
            StepRule::Fixed { value } => value,
            StepRule::BudgetFraction { factor } => factor * budget / steps.max(1) as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackParams {
    pub steps: usize,
    pub noise_batch: usize,
    pub step: StepRule,
    pub projection: ProjectionMode,
    pub mask_inside_forward: bool,
}

impl Default for AttackParams {
    fn default() -> Self {
        let d = AttackConfig::default();
        Self {
            steps: d.steps,
            noise_batch: d.noise_batch,
            step: StepRule::BudgetFraction { factor: 2.5 },
            projection: d.projection,
            mask_inside_forward: d.mask_inside_forward,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShadowWeights {
    pub tv: f64,
    pub color_mean: f64,
    pub channel_sim: f64,
}

impl Default for ShadowWeights {
    fn default() -> Self {
        let d = ShadowConfig::default();
        Self {
            tv: d.tv_weight,
            color_mean: d.color_mean_weight,
            channel_sim: d.channel_sim_weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    /// Eligible images per defense.
    pub images: usize,
    /// Budgets in the 224×224×3 scale unless `scale_budget` is false.
    pub epsilons: Vec<f64>,
    pub scale_budget: bool,
    pub attacks: Vec<AttackKind>,
    pub goals: Vec<GoalKind>,
    pub mask: MaskStrategy,
    pub saliency_label: SaliencyLabel,
    pub certification: CertificationParams,
    pub attack: AttackParams,
    pub shadow: ShadowWeights,
    pub seed: u64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            images: 100,
            epsilons: vec![2.0, 4.0, 6.0, 8.0, 10.0],
            scale_budget: true,
            attacks: vec![AttackKind::Ghostcert, AttackKind::ShadowBounded],
            goals: vec![GoalKind::Untargeted, GoalKind::Targeted],
            mask: MaskStrategy::default(),
            saliency_label: SaliencyLabel::Source,
            certification: CertificationParams::default(),
            attack: AttackParams::default(),
            shadow: ShadowWeights::default(),
            seed: 0,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.images == 0 {
            return Err(Error::Config("images must be at least 1".into()));
        }
        if self.epsilons.is_empty() || self.epsilons.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return Err(Error::Config("epsilons must be a non-empty list of positive budgets".into()));
        }
        if self.attacks.is_empty() || self.goals.is_empty() {
            return Err(Error::Config("attacks and goals must be non-empty".into()));
        }
        match self.mask {
            MaskStrategy::Saliency { k } | MaskStrategy::RandomRegions { k } if k == 0 => {
                return Err(Error::Config("mask k must be at least 1".into()))
            }
            MaskStrategy::RandomPixel { fraction } if !(0.0..=1.0).contains(&fraction) => {
                return Err(Error::Config("random pixel fraction must be in [0, 1]".into()))
            }
            _ => {}
        }
        if self.attack.noise_batch == 0 {
            return Err(Error::Config("noise_batch must be at least 1".into()));
        }
        let step_ok = match self.attack.step {
            StepRule::Fixed { value } => value > 0.0,
            StepRule::BudgetFraction { factor } => factor > 0.0,
        };
        if !step_ok {
            return Err(Error::Config("step size must be positive".into()));
        }
        if [self.shadow.tv, self.shadow.color_mean, self.shadow.channel_sim].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("shadow weights must be non-negative".into()));
        }
        let c = &self.certification;
        SmoothingConfig::new(1.0, c.n0, c.n, c.alpha, c.mu).map(|_| ())
    }

    pub fn budget(&self, epsilon: f64, shape: Shape) -> f64 {
        if self.scale_budget {
            scale_budget(epsilon, shape)
        } else {
            epsilon
        }
    }
}

/// One cell of the grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub defense: DefenseKind,
    pub sigma: f64,
    pub attack: AttackKind,
    pub goal: GoalKind,
    /// [`MaskStrategy::Full`] for the Shadow attacks.
    pub mask: MaskStrategy,
    pub epsilon: f64,
}

impl CellKey {
    pub fn id(&self) -> String {
        format!(
            "{}/sigma={}/{}/{}/{}/eps={}",
            self.defense, self.sigma, self.attack, self.goal, self.mask, self.epsilon
        )
    }
}

/// An `f64` image stored as hex of its little-endian bytes, so it survives
/// text serialisation bit-exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedImage {
    pub shape: Shape,
    pub data: String,
}

impl EncodedImage {
    pub fn encode(x: &Image) -> Self {
        let bytes: Vec<u8> = x.as_slice().iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            shape: x.shape(),
            data: hex::encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<Image> {
        let bytes = hex::decode(&self.data).map_err(|e| Error::format("encoded image", 0, e.to_string()))?;
        if bytes.len() != self.shape.len() * 8 {
            return Err(Error::format(
                "encoded image",
                0,
                format!("expected {} bytes for {}, found {}", self.shape.len() * 8, self.shape, bytes.len()),
            ));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Image::from_vec(self.shape, data)
    }
}

/// Post-attack outcome relative to the source and target labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Source,
    Target,
    Other,
    Abstain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub schema_version: u32,
    pub image_id: usize,
    pub source_label: usize,
    pub target_label: Option<usize>,
    pub defense: DefenseKind,
    pub sigma: f64,
    pub epsilon: f64,
    /// ε after resolution scaling, in pixel units of the attacked image.
    pub budget: f64,
    pub attack: AttackKind,
    pub mask: MaskStrategy,
    pub mask_area: Option<usize>,
    pub smoothing: SmoothingConfig,
    pub step_size: f64,
    pub steps: usize,
    pub noise_batch: usize,
    pub source: CertRecord,
    pub post: Option<CertRecord>,
    pub l2_norm: f64,
    pub linf_norm: f64,
    pub total_variation: f64,
    pub skipped_steps: usize,
    pub attack_seed: u64,
    pub adversarial: Option<EncodedImage>,
    pub error: Option<String>,
    pub wall_time_secs: f64,
}

impl TrialRecord {
    pub fn cell(&self) -> CellKey {
        CellKey {
            defense: self.defense,
            sigma: self.sigma,
            attack: self.attack,
            goal: if self.target_label.is_some() { GoalKind::Targeted } else { GoalKind::Untargeted },
            mask: self.mask,
            epsilon: self.epsilon,
        }
    }

    /// Store key: image id plus cell id.
    pub fn key(&self) -> String {
        trial_key(self.image_id, &self.cell())
    }

    pub fn is_completed(&self) -> bool {
        self.error.is_none() && self.post.is_some()
    }

    pub fn outcome(&self) -> Option<Outcome> {
        let post = self.post.as_ref()?;
        Some(match post.decision {
            Decision::Abstain => Outcome::Abstain,
            Decision::Class(c) if c == self.source_label => Outcome::Source,
            Decision::Class(c) if Some(c) == self.target_label => Outcome::Target,
            Decision::Class(_) => Outcome::Other,
        })
    }

    pub fn adversarial_image(&self) -> Result<Option<Image>> {
        self.adversarial.as_ref().map(EncodedImage::decode).transpose()
    }

    /// Equality ignoring wall time.
    pub fn same_result(&self, other: &TrialRecord) -> bool {
        let mut a = self.clone();
        a.wall_time_secs = other.wall_time_secs;
        a == *other
    }
}

pub fn trial_key(image_id: usize, cell: &CellKey) -> String {
    format!("{image_id}@{}", cell.id())
}

/// Seeds for one trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrialSeeds {
    pub attack: u64,
    pub mask: u64,
    pub certify: u64,
}

impl TrialSeeds {
    pub fn derive(master: u64, defense: &Defense, image: usize, goal: GoalKind) -> Self {
        Self {
            attack: derive_seed(master, &format!("{}/{goal}", defense.seed_key("attack", image))),
            mask: derive_seed(master, &defense.seed_key("mask", image)),
            certify: derive_seed(master, &defense.seed_key("certify", image)),
        }
    }
}

/// Builds the GhostCert support for `x`.
pub fn build_mask(
    defense: &Defense,
    x: &Image,
    saliency_label: usize,
    strategy: MaskStrategy,
    seed: u64,
) -> Result<SalientRegionMask> {
    let (h, w) = (x.height(), x.width());
    match strategy {
        MaskStrategy::Full => Ok(SalientRegionMask::full(h, w)),
        MaskStrategy::RandomPixel { fraction } => random_pixel_mask(h, w, fraction, seed),
        MaskStrategy::Saliency { k } => {
            let props = propose_regions(x, default_min_area(h, w));
            let s = defense.saliency(x, saliency_label)?;
            select_salient_region_mask(&props, &s, k)
        }
        MaskStrategy::RandomRegions { k } => random_region_mask(&propose_regions(x, default_min_area(h, w)), k, seed),
    }
}

/// Attacks one eligible image in one cell and certifies the result.
/// Failures are recorded in the returned record, never propagated.
pub fn run_trial(defense: &Defense, image: &EligibleImage, x: &Image, target: Option<usize>, cell: &CellKey, spec: &GridSpec) -> TrialRecord {
    let start = Instant::now();
    let seeds = TrialSeeds::derive(spec.seed, defense, image.index, cell.goal);
    let budget = spec.budget(cell.epsilon, x.shape());
    let step_size = spec.attack.step.step_size(budget, spec.attack.steps);
    let smoothing = defense.smoothing(&spec.certification);
    let mut record = TrialRecord {
        schema_version: RECORD_SCHEMA_VERSION,
        image_id: image.index,
        source_label: image.label,
        target_label: target,
        defense: defense.kind(),
        sigma: defense.sigma(),
        epsilon: cell.epsilon,
        budget,
        attack: cell.attack,
        mask: cell.mask,
        mask_area: None,
        smoothing: smoothing.as_ref().copied().unwrap_or_default(),
        step_size,
        steps: spec.attack.steps,
        noise_batch: spec.attack.noise_batch,
        source: image.source,
        post: None,
        l2_norm: 0.0,
        linf_norm: 0.0,
        total_variation: 0.0,
        skipped_steps: 0,
        attack_seed: seeds.attack,
        adversarial: None,
        error: None,
        wall_time_secs: 0.0,
    };
    let outcome = smoothing.and_then(|smoothing| {
        let goal = match target {
            None => AttackGoal::Untargeted { source: image.label },
            Some(t) => AttackGoal::Targeted { source: image.label, target: t },
        };
        let (result, area) = attack_once(defense, x, goal, cell, spec, budget, step_size, &seeds)?;
        let post = certify(defense.classifier(), &result.adversarial, &smoothing, seeds.certify)?;
        Ok((result, area, post))
    });
    match outcome {
        Ok((result, area, post)) => {
            record.mask_area = area;
            record.post = Some(CertRecord::from(&post));
            record.l2_norm = result.l2_norm;
            record.linf_norm = result.linf_norm;
            record.total_variation = result.total_variation;
            record.skipped_steps = result.skipped_steps.len();
            record.adversarial = Some(EncodedImage::encode(&result.adversarial));
        }
        Err(e) => {
            log::warn!("trial {} failed: {e}", trial_key(image.index, cell));
            record.error = Some(e.to_string());
        }
    }
    record.wall_time_secs = start.elapsed().as_secs_f64();
    record
}

#[allow(clippy::too_many_arguments)]
fn attack_once(
    defense: &Defense,
    x: &Image,
    goal: AttackGoal,
    cell: &CellKey,
    spec: &GridSpec,
    budget: f64,
    step_size: f64,
    seeds: &TrialSeeds,
) -> Result<(AttackResult, Option<usize>)> {
    let clf = defense.classifier();
    let shadow = ShadowConfig {
        step_size,
        steps: spec.attack.steps,
        tv_weight: spec.shadow.tv,
        color_mean_weight: spec.shadow.color_mean,
        channel_sim_weight: spec.shadow.channel_sim,
        l2_bound: None,
        sigma: defense.sigma(),
        noise_batch: spec.attack.noise_batch,
        seed: seeds.attack,
    };
    match cell.attack {
        AttackKind::Ghostcert => {
            let label = match (spec.saliency_label, goal.target()) {
                (SaliencyLabel::Target, Some(t)) => t,
                _ => goal.source(),
            };
            let mask = build_mask(defense, x, label, cell.mask, seeds.mask)?;
            let cfg = AttackConfig {
                epsilon: budget,
                step_size,
                steps: spec.attack.steps,
                noise_batch: spec.attack.noise_batch,
                sigma: defense.sigma(),
                seed: seeds.attack,
                mask_inside_forward: spec.attack.mask_inside_forward,
                projection: spec.attack.projection,
            };
            let area = mask.mask.area();
            Ok((ghostcert(clf, x, goal, &mask, &cfg)?, Some(area)))
        }
        AttackKind::Shadow => Ok((shadow_attack(clf, x, goal, &shadow)?, None)),
        AttackKind::ShadowBounded => Ok((shadow_attack_bounded(clf, x, goal, &shadow, budget)?, None)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: CellKey,
    pub summary: MetricsSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EligibleSet {
    pub defense: DefenseKind,
    pub sigma: f64,
    pub images: Vec<EligibleImage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridOutput {
    pub eligible: Vec<EligibleSet>,
    pub records: Vec<TrialRecord>,
    pub summaries: Vec<CellSummary>,
}

/// Cells of `spec` for one defense in execution order.
pub fn grid_cells(defense: &Defense, spec: &GridSpec) -> Vec<CellKey> {
    let mut cells = Vec::new();
    for &goal in &spec.goals {
        for &attack in &spec.attacks {
            for &epsilon in &spec.epsilons {
                cells.push(CellKey {
                    defense: defense.kind(),
                    sigma: defense.sigma(),
                    attack,
                    goal,
                    mask: if attack == AttackKind::Ghostcert { spec.mask } else { MaskStrategy::Full },
                    epsilon,
                });
            }
        }
    }
    cells
}

/// Runs every cell of `spec` for every defense. Trials already completed in
/// `store` are reused rather than rerun; new trials are appended to it.
pub fn run_grid(dataset: &Dataset, defenses: &[Defense], spec: &GridSpec, store: &mut RecordStore) -> Result<GridOutput> {
    spec.validate()?;
    let mut out = GridOutput {
        eligible: Vec::new(),
        records: Vec::new(),
        summaries: Vec::new(),
    };
    for defense in defenses {
        dataset.image(0).ensure_shape(defense.input_shape())?;
        let eligible = select_eligible_images(dataset, defense, &spec.certification, spec.images, spec.seed)?;
        for cell in grid_cells(defense, spec) {
            let mut cell_records = Vec::with_capacity(eligible.len());
            for image in &eligible {
                let key = trial_key(image.index, &cell);
                if let Some(done) = store.get(&key).filter(|r| r.is_completed()) {
                    cell_records.push(done.clone());
                    continue;
                }
                let target = match cell.goal {
                    GoalKind::Untargeted => None,
                    GoalKind::Targeted => Some(pick_target_label(dataset.labels(), image.index)?),
                };
                let record = run_trial(defense, image, dataset.image(image.index), target, &cell, spec);
                store.append(&record)?;
                cell_records.push(record);
            }
            match summarize(&cell_records) {
                Ok(summary) => {
                    log::info!("{}: asr {:.3} over {} trials", cell.id(), summary.asr, summary.trials);
                    out.summaries.push(CellSummary { cell, summary });
                }
                Err(e) => log::warn!("{}: no summary ({e})", cell.id()),
            }
            out.records.extend(cell_records);
        }
        out.eligible.push(EligibleSet {
            defense: defense.kind(),
            sigma: defense.sigma(),
            images: eligible,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    /// Saliency-guided against random-pixel (50%) and random-region masks.
    MaskStrategy,
    /// Saliency-guided masks with `k ∈ {3, 5, 7}`.
    KSensitivity,
}

impl std::str::FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask_strategy" | "mask-strategy" => Ok(AblationKind::MaskStrategy),
            "k_sensitivity" | "k-sensitivity" => Ok(AblationKind::KSensitivity),
            other => Err(Error::Config(format!("unknown ablation kind {other:?}"))),
        }
    }
}

impl AblationKind {
    pub fn variants(self, k: usize) -> Vec<MaskStrategy> {
        match self {
            AblationKind::MaskStrategy => vec![
                MaskStrategy::Saliency { k },
                MaskStrategy::RandomPixel { fraction: 0.5 },
                MaskStrategy::RandomRegions { k },
            ],
            AblationKind::KSensitivity => [3, 5, 7].map(|k| MaskStrategy::Saliency { k }).to_vec(),
        }
    }
}

/// Runs the GhostCert cells of `spec` once per mask variant of `kind`.
/// Every variant sees the same eligible images and seeds.
pub fn run_ablation(
    kind: AblationKind,
    dataset: &Dataset,
    defense: &Defense,
    spec: &GridSpec,
    store: &mut RecordStore,
) -> Result<GridOutput> {
    let k = match spec.mask {
        MaskStrategy::Saliency { k } | MaskStrategy::RandomRegions { k } => k,
        _ => DEFAULT_K,
    };
    let mut out = GridOutput {
        eligible: Vec::new(),
        records: Vec::new(),
        summaries: Vec::new(),
    };
    for mask in kind.variants(k) {
        let variant = GridSpec {
            attacks: vec![AttackKind::Ghostcert],
            mask,
            ..spec.clone()
        };
        let part = run_grid(dataset, std::slice::from_ref(defense), &variant, store)?;
        if out.eligible.is_empty() {
            out.eligible = part.eligible;
        }
        out.records.extend(part.records);
        out.summaries.extend(part.summaries);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ConstantClassifier, LinearClassifier};

    fn two_class_dataset(n: usize) -> Dataset {
        let shape = Shape::new(2, 2, 1);
        let images = (0..n).map(|i| Image::filled(shape, if i % 2 == 0 { 0.2 } else { 0.8 })).collect();
        let labels = (0..n).map(|i| i % 2).collect();
        Dataset::new(shape, 2, images, labels).unwrap()
    }

    fn linear_defense() -> Defense {
        // class 1 iff mean pixel > 0.5
        let clf = LinearClassifier::binary(Shape::new(2, 2, 1), vec![-1.0; 4], 2.0).unwrap();
        Defense::from_classifier(DefenseKind::Single, Arc::new(clf), 0.25)
    }

    fn fast_spec() -> GridSpec {
        GridSpec {
            images: 2,
            epsilons: vec![0.5],
            scale_budget: false,
            attacks: vec![AttackKind::Ghostcert],
            goals: vec![GoalKind::Untargeted],
            mask: MaskStrategy::Full,
            certification: CertificationParams { n: 200, ..Default::default() },
            attack: AttackParams { steps: 5, noise_batch: 2, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn target_label_scan() {
        assert_eq!(pick_target_label(&[5, 5, 3], 0).unwrap(), 3);
        assert_eq!(pick_target_label(&[1, 2], 1).unwrap(), 1);
        assert!(pick_target_label(&[4, 4, 4], 1).is_err());
        assert!(pick_target_label(&[4], 0).is_err());
    }

    #[test]
    fn abstaining_defense_has_no_eligible_images() {
        // a classifier whose smoothed prediction is the wrong label everywhere
        let clf = ConstantClassifier::new(Shape::new(2, 2, 1), 3, 2);
        let d = Defense::from_classifier(DefenseKind::Single, Arc::new(clf), 0.25);
        let got = select_eligible_images(&two_class_dataset(6), &d, &CertificationParams::default(), 3, 0).unwrap();
        assert!(got.is_empty());
    }

    #[test]
    fn perfect_classifier_takes_the_first_images() {
        let got =
            select_eligible_images(&two_class_dataset(6), &linear_defense(), &CertificationParams::default(), 3, 0)
                .unwrap();
        assert_eq!(got.iter().map(|e| e.index).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn one_cell_grid_gives_two_records_and_one_summary() {
        let data = two_class_dataset(4);
        let mut store = RecordStore::in_memory();
        let out = run_grid(&data, &[linear_defense()], &fast_spec(), &mut store).unwrap();
        assert_eq!(out.records.len(), 2);
        assert_eq!(out.summaries.len(), 1);
        assert_eq!(out.summaries[0].summary.asr, asr_untargeted(&out.records).unwrap());

        // rerunning against the same store reuses every trial
        let again = run_grid(&data, &[linear_defense()], &fast_spec(), &mut store).unwrap();
        assert_eq!(store.len(), 2);
        assert_eq!(again.records, out.records);
    }

    #[test]
    fn trials_are_reproducible_and_store_the_adversarial_exactly() {
        let data = two_class_dataset(2);
        let d = linear_defense();
        let spec = fast_spec();
        let img = select_eligible_images(&data, &d, &spec.certification, 1, 0).unwrap()[0];
        let cell = grid_cells(&d, &spec)[0];
        let a = run_trial(&d, &img, data.image(img.index), None, &cell, &spec);
        let b = run_trial(&d, &img, data.image(img.index), None, &cell, &spec);
        assert!(a.same_result(&b));
        let adv = a.adversarial_image().unwrap().unwrap();
        let post = certify(d.classifier(), &adv, &a.smoothing, a.post.unwrap().seed).unwrap();
        assert_eq!(CertRecord::from(&post), a.post.unwrap());
    }

    #[test]
    fn tiny_budget_changes_nothing() {
        let data = two_class_dataset(4);
        let spec = GridSpec { epsilons: vec![1e-9], ..fast_spec() };
        let out = run_grid(&data, &[linear_defense()], &spec, &mut RecordStore::in_memory()).unwrap();
        assert_eq!(out.summaries[0].summary.asr, 0.0);
    }

    #[test]
    fn failing_trials_are_recorded_not_fatal() {
        // a targeted goal on a one-class problem cannot be built
        let data = two_class_dataset(2);
        let d = linear_defense();
        let spec = fast_spec();
        let img = select_eligible_images(&data, &d, &spec.certification, 1, 0).unwrap()[0];
        let cell = CellKey { goal: GoalKind::Targeted, ..grid_cells(&d, &spec)[0] };
        let r = run_trial(&d, &img, data.image(0), Some(img.label), &cell, &spec);
        assert!(!r.is_completed());
        assert!(r.error.is_some());
    }

    #[test]
    fn identical_strategies_give_identical_asr() {
        let data = two_class_dataset(4);
        let d = linear_defense();
        let spec = GridSpec { mask: MaskStrategy::Saliency { k: 1 }, ..fast_spec() };
        let a = run_grid(&data, std::slice::from_ref(&d), &spec, &mut RecordStore::in_memory()).unwrap();
        let b = run_grid(&data, std::slice::from_ref(&d), &spec, &mut RecordStore::in_memory()).unwrap();
        assert_eq!(a.summaries[0].summary.asr, b.summaries[0].summary.asr);
    }

    #[test]
    fn ablation_has_one_summary_per_variant() {
        let data = two_class_dataset(4);
        let out = run_ablation(AblationKind::KSensitivity, &data, &linear_defense(), &fast_spec(), &mut RecordStore::in_memory())
            .unwrap();
        let masks: Vec<_> = out.summaries.iter().map(|s| s.cell.mask).collect();
        assert_eq!(masks, [3, 5, 7].map(|k| MaskStrategy::Saliency { k }).to_vec());
        let ids: Vec<Vec<usize>> = [3, 5, 7]
            .iter()
            .map(|k| {
                out.records
                    .iter()
                    .filter(|r| r.mask == MaskStrategy::Saliency { k: *k })
                    .map(|r| r.image_id)
                    .collect()
            })
            .collect();
        assert!(ids.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn denoiser_sigma_must_match() {
        use crate::models::{ConvArchitecture, ConvDenoiser, DenoiserSpec};
        let shape = Shape::new(8, 8, 1);
        let net = SmallConvNet::new(ConvArchitecture::desk(shape, 3), 0).unwrap();
        let mut den = ConvDenoiser::new(DenoiserSpec::desk(shape), 0).unwrap();
        den.set_trained_sigma(0.5);
        let den: Arc<dyn Denoiser> = Arc::new(den);
        assert!(Defense::denoised(net.clone(), den.clone(), 0.25).is_err());
        assert!(Defense::denoised(net, den, 0.5).is_ok());
    }

    #[test]
    fn encoded_images_round_trip_exactly() {
        let x = Image::from_fn(Shape::new(2, 3, 2), |y, x, c| (y as f64 + 0.1) / (x as f64 + 3.0) + c as f64 * 1e-17);
        let e = EncodedImage::encode(&x);
        let json = serde_json::to_string(&e).unwrap();
        let back: EncodedImage = serde_json::from_str(&json).unwrap();
        assert_eq!(back.decode().unwrap(), x);
        let short = EncodedImage { data: e.data[..16].to_string(), ..e };
        assert!(short.decode().is_err());
    }
}
