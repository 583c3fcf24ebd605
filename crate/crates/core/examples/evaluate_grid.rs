// Run a small evaluation grid: select images the smoothed defense
// certifies correctly, attack each in every (attack, goal, ε) cell,
// re-certify and summarise. Records go to a JSONL store so an
// interrupted run resumes where it stopped.

use certspoof::data::{synthetic_digits, SyntheticConfig};
use certspoof::evaluation::{
    run_grid, AttackKind, AttackParams, CertificationParams, Defense, GoalKind, GridSpec, RecordStore,
};
use certspoof::models::{train_noise_augmented, ConvArchitecture, SmallConvNet, TrainingConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sigma = 0.25;
    let data = synthetic_digits(&SyntheticConfig { train_count: 600, test_count: 40, ..Default::default() })?;
    let mut net = SmallConvNet::new(ConvArchitecture::desk(data.train.shape(), 10), 3)?;
    train_noise_augmented(&mut net, data.train.images(), data.train.labels(), &TrainingConfig { epochs: 2, sigma, ..Default::default() })?;
    let defense = Defense::single(net, sigma);

    let spec = GridSpec {
        images: 4,
        epsilons: vec![2.0, 10.0],
        attacks: vec![AttackKind::Ghostcert, AttackKind::ShadowBounded],
        goals: vec![GoalKind::Untargeted, GoalKind::Targeted],
        certification: CertificationParams { n: 200, ..Default::default() },
        attack: AttackParams { steps: 30, noise_batch: 8, ..Default::default() },
        ..Default::default()
    };
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("records.jsonl");
    let out = run_grid(&data.test, std::slice::from_ref(&defense), &spec, &mut RecordStore::create(&path)?)?;
    let eligible: Vec<usize> = out.eligible[0].images.iter().map(|e| e.index).collect();
    println!("eligible test images {eligible:?}");
    for s in &out.summaries {
        let m = &s.summary;
        println!(
            "{:<55} asr {:.2} dos {:.2} spoof radius {:>6} l2 {:.3}",
            s.cell.id(),
            m.asr,
            m.dos,
            m.mean_spoofing_radius.map_or("-".into(), |r| format!("{r:.3}")),
            m.mean_l2
        );
    }

    // a second run over the same store reuses every trial
    let again = run_grid(&data.test, &[defense], &spec, &mut RecordStore::open(&path)?)?;
    assert_eq!(again.summaries, out.summaries);
    println!("resumed run reproduced {} trials", again.records.len());
    Ok(())
}
