//! Command-line front end: `ingest`, `train`, `certify`, `attack`,
//! `evaluate`, `ablate` and `report`.
//!
//! Each command writes into `--out` and leaves a `provenance.json` there.
//! Exit codes: 0 on success, 2 for configuration errors, 1 for runtime
//! failures. Failures also print a JSON error report on stderr.

mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::data::{ingest_dataset, ingest_with_manifest, synthetic_digits, Dataset, DatasetSplits, SyntheticConfig};
use crate::error::{Error, Result};
use crate::evaluation::{
    grid_cells, pick_target_label, run_ablation, run_grid, run_trial, select_eligible_images, CellKey, Defense,
    DefenseKind, GoalKind, GridOutput, MaskStrategy, RecordStore, TrialRecord, RECORD_SCHEMA_VERSION,
};
use crate::models::{
    load_checkpoint, save_checkpoint, train_denoiser, train_noise_augmented, Checkpoint, ConstantClassifier,
    ConvArchitecture, ConvDenoiser, Denoiser, DenoiserSpec, SmallConvNet, TrainingConfig, CHECKPOINT_VERSION,
};
use crate::report::{perturbation_panel, render_report, summaries_csv, RENDERER_VERSION};
use crate::rng::derive_seed;
use crate::smoothing::{certify, CertificationOutcome};

pub use config::{
    AblationConfig, CertifyConfig, DataConfig, DataSource, ModelSource, ModelsConfig, Profile, ReportConfig,
    RunConfig, SingleAttackConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "certspoof", version, about = "Certificate spoofing against randomized smoothing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub profile: Option<Profile>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory owned by this invocation.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Reuse trials already in the output record store.
    #[arg(long, global = true)]
    pub resume: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Validate a dataset and write its manifest.
    Ingest,
    /// Train the classifiers and denoisers for every configured defense.
    Train,
    /// Certify the first test images under every defense.
    Certify,
    /// Attack one eligible image.
    Attack,
    /// Run the evaluation grid.
    Evaluate,
    /// Run a mask ablation.
    Ablate,
    /// Render tables, plots and panels from trial records.
    Report,
}

#[derive(Serialize)]
struct Provenance<'a> {
    command: Command,
    config_hash: String,
    seed: u64,
    profile: Profile,
    crate_version: &'static str,
    checkpoint_version: u32,
    record_schema_version: u32,
    renderer_version: u32,
    dataset_hash: Option<String>,
    config: &'a RunConfig,
}

#[derive(Serialize)]
struct ErrorReport {
    kind: &'static str,
    exit_code: i32,
    message: String,
}

fn is_config_error(e: &Error) -> bool {
    matches!(e, Error::Config(_))
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return EXIT_OK;
        }
        Err(e) => {
            report_error(None, EXIT_CONFIG, "config", e.to_string());
            return EXIT_CONFIG;
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let (code, kind) = if is_config_error(&e) { (EXIT_CONFIG, "config") } else { (EXIT_RUNTIME, "runtime") };
            report_error(Some(&cli.out), code, kind, e.to_string());
            code
        }
    }
}

fn report_error(out: Option<&Path>, exit_code: i32, kind: &'static str, message: String) {
    let report = ErrorReport { kind, exit_code, message };
    let json = serde_json::to_string(&report).expect("error report serialises");
    eprintln!("{json}");
    if let Some(out) = out {
        if std::fs::create_dir_all(out).is_ok() {
            let _ = std::fs::write(out.join("error.json"), json + "\n");
        }
    }
}

/// Loads and resolves the configuration named by `cli`.
pub fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(p) = cli.profile {
        cfg.profile = p;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let cfg = cfg.resolve();
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = effective_config(cli)?;
    let out = &cli.out;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let _ = std::fs::remove_file(out.join("error.json"));
    let dataset_hash = match cli.command {
        Command::Ingest => cmd_ingest(&cfg, out)?,
        Command::Train => cmd_train(&cfg, out)?,
        Command::Certify => cmd_certify(&cfg, out)?,
        Command::Attack => cmd_attack(&cfg, out)?,
        Command::Evaluate => cmd_evaluate(&cfg, out, cli.resume)?,
        Command::Ablate => cmd_ablate(&cfg, out, cli.resume)?,
        Command::Report => cmd_report(&cfg, out)?,
    };
    let prov = Provenance {
        command: cli.command,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        profile: cfg.profile,
        crate_version: env!("CARGO_PKG_VERSION"),
        checkpoint_version: CHECKPOINT_VERSION,
        record_schema_version: RECORD_SCHEMA_VERSION,
        renderer_version: RENDERER_VERSION,
        dataset_hash,
        config: &cfg,
    };
    write_json(&out.join("provenance.json"), &prov)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let json = serde_json::to_string_pretty(value)?;
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_data(cfg: &DataConfig) -> Result<DatasetSplits> {
    match cfg.source.format() {
        None => synthetic_digits(&SyntheticConfig {
            style: cfg.style,
            train_count: cfg.train_count,
            test_count: cfg.test_count,
            seed: cfg.seed,
        }),
        Some(format) => ingest_dataset(&cfg.resolved_path(), format),
    }
}

fn models_dir(cfg: &RunConfig, out: &Path) -> PathBuf {
    cfg.models.dir.clone().unwrap_or_else(|| out.join("models"))
}

fn checkpoint_name(kind: DefenseKind, sigma: f64, part: &str) -> String {
    format!("{kind}_sigma{sigma}_{part}.ckpt")
}

fn cmd_ingest(cfg: &RunConfig, out: &Path) -> Result<Option<String>> {
    let (splits, manifest) = match cfg.data.source.format() {
        Some(format) => ingest_with_manifest(&cfg.data.resolved_path(), format, out)?,
        None => {
            let splits = load_data(&cfg.data)?;
            let manifest = crate::data::Manifest::describe(&splits, crate::data::DatasetFormat::Idx);
            write_json(&out.join("manifest.json"), &manifest)?;
            (splits, manifest)
        }
    };
    println!(
        "{} train / {} test images of shape {}, {} classes, manifest {}",
        splits.train.len(),
        splits.test.len(),
        manifest.shape,
        manifest.num_classes,
        manifest.hash()
    );
    Ok(Some(splits.test.content_hash()))
}

#[derive(Serialize)]
struct TrainedModel {
    defense: DefenseKind,
    sigma: f64,
    file: String,
    report: serde_json::Value,
}

fn train_classifier(data: &Dataset, cfg: &TrainingConfig, seed: u64) -> Result<(SmallConvNet, serde_json::Value)> {
    let mut net = SmallConvNet::new(ConvArchitecture::desk(data.shape(), data.num_classes()), seed)?;
    let report = train_noise_augmented(&mut net, data.images(), data.labels(), &TrainingConfig { seed, ..*cfg })?;
    log::info!(
        "classifier sigma {}: clean {:.3}, noisy {:.3}",
        cfg.sigma,
        report.clean_accuracy,
        report.noisy_accuracy
    );
    Ok((net, serde_json::to_value(report)?))
}

fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<Option<String>> {
    if cfg.models.source == ModelSource::Constant {
        return Err(Error::Config("constant models need no training".into()));
    }
    let data = load_data(&cfg.data)?;
    let dir = models_dir(cfg, out);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut trained = Vec::new();
    let mut save = |kind, sigma, part: String, ckpt: Checkpoint, report| -> Result<()> {
        let file = checkpoint_name(kind, sigma, &part);
        save_checkpoint(&dir.join(&file), &ckpt)?;
        trained.push(TrainedModel { defense: kind, sigma, file, report });
        Ok(())
    };
    for &sigma in &cfg.models.sigmas {
        let tcfg = TrainingConfig { sigma, ..cfg.train };
        for &kind in &cfg.models.defenses {
            let seed = |part: &str| derive_seed(cfg.seed, &format!("train/{kind}/{sigma}/{part}"));
            match kind {
                DefenseKind::Single => {
                    let (net, rep) = train_classifier(&data.train, &tcfg, seed("base"))?;
                    save(kind, sigma, "base".into(), Checkpoint::Classifier(net), rep)?;
                }
                DefenseKind::Ensemble => {
                    for m in 0..cfg.models.ensemble_size {
                        let part = format!("member{m}");
                        let (net, rep) = train_classifier(&data.train, &tcfg, seed(&part))?;
                        save(kind, sigma, part, Checkpoint::Classifier(net), rep)?;
                    }
                }
                DefenseKind::Denoised => {
                    // the base network sees clean images only; the denoiser
                    // carries the noise robustness
                    let clean = TrainingConfig { sigma: 0.0, ..tcfg };
                    let (net, rep) = train_classifier(&data.train, &clean, seed("base"))?;
                    save(kind, sigma, "base".into(), Checkpoint::Classifier(net), rep)?;
                    let mut den = ConvDenoiser::new(DenoiserSpec::desk(data.train.shape()), seed("denoiser"))?;
                    let rep = train_denoiser(&mut den, data.train.images(), &TrainingConfig { seed: seed("denoiser"), ..tcfg })?;
                    log::info!("denoiser sigma {sigma}: mse {:.5} (identity {:.5})", rep.denoised_mse, rep.identity_mse);
                    save(kind, sigma, "denoiser".into(), Checkpoint::Denoiser(den), serde_json::to_value(rep)?)?;
                }
            }
        }
    }
    write_json(&out.join("training.json"), &trained)?;
    println!("trained {} models into {}", trained.len(), dir.display());
    Ok(Some(data.train.content_hash()))
}

/// Builds one defense from checkpoints in `dir`, or a constant classifier.
pub fn load_defense(cfg: &RunConfig, dir: &Path, kind: DefenseKind, sigma: f64, data: &Dataset) -> Result<Defense> {
    if cfg.models.source == ModelSource::Constant {
        if cfg.models.constant_label >= data.num_classes() {
            return Err(Error::Config(format!(
                "constant_label {} outside {} classes",
                cfg.models.constant_label,
                data.num_classes()
            )));
        }
        let clf = ConstantClassifier::new(data.shape(), data.num_classes(), cfg.models.constant_label);
        return Ok(Defense::from_classifier(kind, Arc::new(clf), sigma));
    }
    let net = |part: &str| load_checkpoint(&dir.join(checkpoint_name(kind, sigma, part)))?.into_classifier();
    let defense = match kind {
        DefenseKind::Single => Defense::single(net("base")?, sigma),
        DefenseKind::Ensemble => {
            let members = (0..cfg.models.ensemble_size)
                .map(|m| net(&format!("member{m}")))
                .collect::<Result<Vec<_>>>()?;
            Defense::ensemble(members, sigma)?
        }
        DefenseKind::Denoised => {
            let den = load_checkpoint(&dir.join(checkpoint_name(kind, sigma, "denoiser")))?.into_denoiser()?;
            Defense::denoised(net("base")?, Arc::new(den) as Arc<dyn Denoiser>, sigma)?
        }
    };
    if defense.input_shape() != data.shape() {
        return Err(Error::shape(data.shape(), defense.input_shape()));
    }
    Ok(defense)
}

fn all_defenses(cfg: &RunConfig, out: &Path, data: &Dataset) -> Result<Vec<Defense>> {
    let dir = models_dir(cfg, out);
    let mut v = Vec::new();
    for &sigma in &cfg.models.sigmas {
        for &kind in &cfg.models.defenses {
            v.push(load_defense(cfg, &dir, kind, sigma, data)?);
        }
    }
    Ok(v)
}

#[derive(Serialize)]
struct CertificationRow {
    defense: DefenseKind,
    sigma: f64,
    image_id: usize,
    label: usize,
    outcome: CertificationOutcome,
}

fn cmd_certify(cfg: &RunConfig, out: &Path) -> Result<Option<String>> {
    let data = load_data(&cfg.data)?.test;
    let mut rows = Vec::new();
    for defense in all_defenses(cfg, out, &data)? {
        let smoothing = defense.smoothing(&cfg.grid.certification)?;
        for i in 0..cfg.certify.images.min(data.len()) {
            let seed = derive_seed(cfg.seed, &format!("certify/{}/{}/{i}", defense.kind(), defense.sigma()));
            let outcome = certify(defense.classifier(), data.image(i), &smoothing, seed)?;
            rows.push(CertificationRow {
                defense: defense.kind(),
                sigma: defense.sigma(),
                image_id: i,
                label: data.label(i),
                outcome,
            });
        }
    }
    write_jsonl(&out.join("certifications.jsonl"), &rows)?;
    println!("{} certifications written", rows.len());
    Ok(Some(data.content_hash()))
}

fn cmd_attack(cfg: &RunConfig, out: &Path) -> Result<Option<String>> {
    let data = load_data(&cfg.data)?.test;
    let a = &cfg.attack;
    let defense = load_defense(cfg, &models_dir(cfg, out), a.defense, a.sigma, &data)?;
    let eligible = select_eligible_images(&data, &defense, &cfg.grid.certification, a.image + 1, cfg.seed)?;
    let image = eligible
        .get(a.image)
        .ok_or_else(|| Error::Empty(format!("only {} eligible images, wanted position {}", eligible.len(), a.image)))?;
    let target = match a.goal {
        GoalKind::Untargeted => None,
        GoalKind::Targeted => Some(pick_target_label(data.labels(), image.index)?),
    };
    let cell = CellKey {
        defense: a.defense,
        sigma: a.sigma,
        attack: a.attack,
        goal: a.goal,
        mask: if a.attack == crate::evaluation::AttackKind::Ghostcert { cfg.grid.mask } else { MaskStrategy::Full },
        epsilon: a.epsilon,
    };
    let record = run_trial(&defense, image, data.image(image.index), target, &cell, &cfg.grid);
    write_json(&out.join("attack.json"), &record)?;
    if let Some(adv) = record.adversarial_image()? {
        perturbation_panel(data.image(image.index), &adv)?.save(out.join("attack_panel.png"))?;
    }
    match (&record.error, record.post) {
        (Some(e), _) => return Err(Error::Domain(format!("attack failed: {e}"))),
        (None, Some(post)) => println!(
            "image {} label {} radius {:.3} -> {} radius {:.3}, l2 {:.4}",
            record.image_id, record.source_label, record.source.radius, post.decision, post.radius, record.l2_norm
        ),
        (None, None) => {}
    }
    Ok(Some(data.content_hash()))
}

fn open_store(path: &Path, resume: bool) -> Result<RecordStore> {
    if resume {
        RecordStore::open(path)
    } else {
        RecordStore::create(path)
    }
}

fn finish_grid(out: &Path, output: &GridOutput, prefix: &str) -> Result<()> {
    std::fs::write(out.join(format!("{prefix}summary.csv")), summaries_csv(&output.summaries))
        .map_err(|e| Error::io(out, e))?;
    write_json(&out.join(format!("{prefix}eligible.json")), &output.eligible)?;
    let failed = output.records.iter().filter(|r| !r.is_completed()).count();
    println!("{} trials ({failed} failed), {} cells", output.records.len(), output.summaries.len());
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, out: &Path, resume: bool) -> Result<Option<String>> {
    let data = load_data(&cfg.data)?.test;
    let defenses = all_defenses(cfg, out, &data)?;
    let planned: usize = defenses.iter().map(|d| grid_cells(d, &cfg.grid).len()).sum();
    log::info!("{} defenses, {planned} cells, {} images each", defenses.len(), cfg.grid.images);
    let mut store = open_store(&out.join("records.jsonl"), resume)?;
    let output = run_grid(&data, &defenses, &cfg.grid, &mut store)?;
    finish_grid(out, &output, "")?;
    Ok(Some(data.content_hash()))
}

fn cmd_ablate(cfg: &RunConfig, out: &Path, resume: bool) -> Result<Option<String>> {
    let data = load_data(&cfg.data)?.test;
    let ab = &cfg.ablation;
    let defense = load_defense(cfg, &models_dir(cfg, out), ab.defense, ab.sigma, &data)?;
    let mut store = open_store(&out.join("ablation_records.jsonl"), resume)?;
    let output = run_ablation(ab.kind, &data, &defense, &cfg.grid, &mut store)?;
    finish_grid(out, &output, "ablation_")?;
    Ok(Some(data.content_hash()))
}

fn cmd_report(cfg: &RunConfig, out: &Path) -> Result<Option<String>> {
    let paths = if cfg.report.records.is_empty() {
        vec![out.join("records.jsonl")]
    } else {
        cfg.report.records.clone()
    };
    let mut records: Vec<TrialRecord> = Vec::new();
    for p in &paths {
        records.extend(crate::evaluation::read_records(p)?);
    }
    let data = match load_data(&cfg.data) {
        Ok(d) => Some(d.test),
        Err(e) => {
            log::warn!("dataset unavailable, skipping panels: {e}");
            None
        }
    };
    let files = render_report(&records, data.as_ref(), &out.join("report"), cfg.report.max_panels)?;
    println!(
        "{} records -> {}, {} plots, {} panels",
        records.len(),
        files.summary_csv.display(),
        files.plots.len(),
        files.panels.len()
    );
    Ok(data.map(|d| d.content_hash()))
}
