// Render tables, ASR/radius plots and perturbation panels from trial
// records, as `certspoof report` does.

use certspoof::data::{synthetic_digits, SyntheticConfig};
use certspoof::evaluation::{
    read_records, run_grid, write_records, AttackKind, AttackParams, CertificationParams, Defense, GoalKind,
    GridSpec, RecordStore,
};
use certspoof::models::{train_noise_augmented, ConvArchitecture, SmallConvNet, TrainingConfig};
use certspoof::report::{panel_caption, render_report};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sigma = 0.25;
    let data = synthetic_digits(&SyntheticConfig { train_count: 600, test_count: 40, ..Default::default() })?;
    let mut net = SmallConvNet::new(ConvArchitecture::desk(data.train.shape(), 10), 3)?;
    train_noise_augmented(&mut net, data.train.images(), data.train.labels(), &TrainingConfig { epochs: 2, sigma, ..Default::default() })?;
    let spec = GridSpec {
        images: 4,
        epsilons: vec![2.0, 6.0, 10.0],
        attacks: vec![AttackKind::Ghostcert],
        goals: vec![GoalKind::Untargeted],
        certification: CertificationParams { n: 200, ..Default::default() },
        attack: AttackParams { steps: 30, noise_batch: 8, ..Default::default() },
        ..Default::default()
    };
    let grid = run_grid(&data.test, &[Defense::single(net, sigma)], &spec, &mut RecordStore::in_memory())?;

    let dir = tempfile::tempdir()?;
    write_records(&dir.path().join("records.jsonl"), &grid.records)?;
    let records = read_records(&dir.path().join("records.jsonl"))?;
    let files = render_report(&records, Some(&data.test), &dir.path().join("report"), 4)?;
    print!("{}", std::fs::read_to_string(&files.summary_csv)?);
    for p in files.plots.iter().chain(&files.panels) {
        println!("wrote {}", p.strip_prefix(dir.path())?.display());
    }
    println!("panels: {}", panel_caption());
    Ok(())
}
