use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::AttackConfig;
use crate::data::{default_data_root, DatasetFormat, GlyphStyle};
use crate::error::{Error, Result};
use crate::evaluation::{AblationKind, AttackKind, DefenseKind, GoalKind, GridSpec};
use crate::models::TrainingConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    #[default]
    Full,
    /// N = 200, 20 images, the smallest and largest budgets only.
    Fast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    #[default]
    Synthetic,
    Idx,
    CifarBinary,
    ImageDirectory,
}

impl DataSource {
    pub fn format(self) -> Option<DatasetFormat> {
        match self {
            DataSource::Synthetic => None,
            DataSource::Idx => Some(DatasetFormat::Idx),
            DataSource::CifarBinary => Some(DatasetFormat::CifarBinary),
            DataSource::ImageDirectory => Some(DatasetFormat::ImageDirectory),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Dataset directory; defaults to `$CERTSPOOF_DATA`.
    pub path: Option<PathBuf>,
    pub style: GlyphStyle,
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            path: None,
            style: GlyphStyle::Gray28,
            train_count: 6000,
            test_count: 1000,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn resolved_path(&self) -> PathBuf {
        self.path.clone().unwrap_or_else(default_data_root)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSource {
    #[default]
    Checkpoints,
    /// Every defense is a classifier that always answers `constant_label`.
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelsConfig {
    pub source: ModelSource,
    /// Checkpoint directory; defaults to `<out>/models`.
    pub dir: Option<PathBuf>,
    pub defenses: Vec<DefenseKind>,
    pub sigmas: Vec<f64>,
    pub ensemble_size: usize,
    pub constant_label: usize,
}

impl Default for ModelsConfig {
    fn default() -> Self {
        Self {
            source: ModelSource::Checkpoints,
            dir: None,
            defenses: vec![DefenseKind::Single, DefenseKind::Ensemble, DefenseKind::Denoised],
            sigmas: vec![0.25, 0.5, 1.0],
            ensemble_size: 3,
            constant_label: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CertifyConfig {
    /// Test images certified, from index 0.
    pub images: usize,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        Self { images: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SingleAttackConfig {
    pub defense: DefenseKind,
    pub sigma: f64,
    /// Position in the eligible-image list.
    pub image: usize,
    pub attack: AttackKind,
    pub goal: GoalKind,
    pub epsilon: f64,
}

impl Default for SingleAttackConfig {
    fn default() -> Self {
        Self {
            defense: DefenseKind::Single,
            sigma: 0.25,
            image: 0,
            attack: AttackKind::Ghostcert,
            goal: GoalKind::Untargeted,
            epsilon: AttackConfig::default().epsilon,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub kind: AblationKind,
    pub defense: DefenseKind,
    pub sigma: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            kind: AblationKind::MaskStrategy,
            defense: DefenseKind::Single,
            sigma: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    /// Record files to render; defaults to `<out>/records.jsonl`.
    pub records: Vec<PathBuf>,
    pub max_panels: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            records: Vec::new(),
            max_panels: 8,
        }
    }
}

/// Settings for every command, read from TOML. Unknown keys are rejected.
/// The grid seed is always taken from the top-level `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub data: DataConfig,
    pub models: ModelsConfig,
    /// Classifier and denoiser training; `sigma` is set per model.
    pub train: TrainingConfig,
    pub certify: CertifyConfig,
    pub attack: SingleAttackConfig,
    pub grid: GridSpec,
    pub ablation: AblationConfig,
    pub report: ReportConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            profile: Profile::Full,
            seed: 0,
            data: DataConfig::default(),
            models: ModelsConfig::default(),
            train: TrainingConfig::default(),
            certify: CertifyConfig::default(),
            attack: SingleAttackConfig::default(),
            grid: GridSpec::default(),
            ablation: AblationConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Applies the profile and the top-level seed. The fast profile logs
    /// every reduction it makes.
    pub fn resolve(mut self) -> Self {
        self.grid.seed = self.seed;
        if self.profile == Profile::Fast {
            let g = &mut self.grid;
            if g.certification.n > 200 {
                log::warn!("fast profile: certification samples {} -> 200", g.certification.n);
                g.certification.n = 200;
            }
            if g.images > 20 {
                log::warn!("fast profile: eligible images {} -> 20", g.images);
                g.images = 20;
            }
            if g.epsilons.len() > 2 {
                let lo = g.epsilons.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = g.epsilons.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                log::warn!("fast profile: budgets {:?} -> [{lo}, {hi}]", g.epsilons);
                g.epsilons = vec![lo, hi];
            }
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.train.validate()?;
        let m = &self.models;
        if m.sigmas.is_empty() || m.sigmas.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Config("models.sigmas must be a non-empty list of positive values".into()));
        }
        if m.defenses.is_empty() {
            return Err(Error::Config("models.defenses must be non-empty".into()));
        }
        if m.ensemble_size < 2 && m.defenses.contains(&DefenseKind::Ensemble) {
            return Err(Error::Config("models.ensemble_size must be at least 2".into()));
        }
        if self.data.source == DataSource::Synthetic && (self.data.train_count == 0 || self.data.test_count == 0) {
            return Err(Error::Config("synthetic train_count and test_count must be positive".into()));
        }
        if self.certify.images == 0 {
            return Err(Error::Config("certify.images must be positive".into()));
        }
        if !(self.attack.epsilon > 0.0) {
            return Err(Error::Config("attack.epsilon must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("seed = 1\n[grid]\nimages = 3\n").is_ok());
        assert!(RunConfig::from_toml("sede = 1\n").is_err());
        assert!(RunConfig::from_toml("[grid]\nimagez = 3\n").is_err());
    }

    #[test]
    fn fast_profile_shrinks_the_grid() {
        let cfg = RunConfig::from_toml("profile = \"fast\"\nseed = 9\n").unwrap().resolve();
        assert_eq!(cfg.grid.certification.n, 200);
        assert_eq!(cfg.grid.images, 20);
        assert_eq!(cfg.grid.epsilons, vec![2.0, 10.0]);
        assert_eq!(cfg.grid.seed, 9);
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }
}
