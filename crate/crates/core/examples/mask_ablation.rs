// Compare saliency-guided masks with random-pixel and random-region masks
// of the same kind on the same images and seeds.

use certspoof::data::{synthetic_digits, SyntheticConfig};
use certspoof::evaluation::{
    run_ablation, AblationKind, AttackParams, CertificationParams, Defense, GoalKind, GridSpec, RecordStore,
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
        epsilons: vec![10.0],
        goals: vec![GoalKind::Untargeted],
        certification: CertificationParams { n: 200, ..Default::default() },
        attack: AttackParams { steps: 30, noise_batch: 8, ..Default::default() },
        ..Default::default()
    };
    for kind in [AblationKind::MaskStrategy, AblationKind::KSensitivity] {
        let out = run_ablation(kind, &data.test, &defense, &spec, &mut RecordStore::in_memory())?;
        println!("{kind:?}");
        for s in &out.summaries {
            let area: f64 = out
                .records
                .iter()
                .filter(|r| r.cell() == s.cell)
                .filter_map(|r| r.mask_area)
                .map(|a| a as f64)
                .sum::<f64>()
                / s.summary.trials as f64;
            println!("  {:<20} asr {:.2}, mean mask area {area:.0} px", s.cell.mask.to_string(), s.summary.asr);
        }
    }
    Ok(())
}
