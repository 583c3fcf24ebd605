// Train a small noise-augmented CNN on synthetic digits, save it as a
// checkpoint, load it back and certify a few test images with it.

use certspoof::data::{synthetic_digits, SyntheticConfig};
use certspoof::models::{
    load_checkpoint, save_checkpoint, train_noise_augmented, Checkpoint, ConvArchitecture, SmallConvNet,
    TrainingConfig,
};
use certspoof::smoothing::{certify, SmoothingConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = synthetic_digits(&SyntheticConfig { train_count: 600, test_count: 20, ..Default::default() })?;
    let sigma = 0.25;
    let mut net = SmallConvNet::new(ConvArchitecture::desk(data.train.shape(), 10), 7)?;
    let cfg = TrainingConfig { epochs: 2, sigma, ..Default::default() };
    let report = train_noise_augmented(&mut net, data.train.images(), data.train.labels(), &cfg)?;
    println!("clean accuracy {:.3}, noisy accuracy {:.3}", report.clean_accuracy, report.noisy_accuracy);

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("single_sigma0.25_base.ckpt");
    save_checkpoint(&path, &Checkpoint::Classifier(net.clone()))?;
    let loaded = load_checkpoint(&path)?.into_classifier()?;
    assert_eq!(loaded, net);
    println!("checkpoint: {} bytes", std::fs::metadata(&path)?.len());

    let smoothing = SmoothingConfig { n: 200, ..SmoothingConfig::with_sigma(sigma)? };
    for i in 0..5 {
        let o = certify(&loaded, data.test.image(i), &smoothing, i as u64)?;
        println!("test image {i} (label {}): {} radius {:.3}", data.test.label(i), o.decision, o.radius);
    }
    Ok(())
}
