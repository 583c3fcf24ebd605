// Write the synthetic digits as idx files, ingest them back and print the
// manifest that `certspoof ingest` would store.

use certspoof::data::{ingest_with_manifest, write_synthetic_idx, DatasetFormat, SyntheticConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let cfg = SyntheticConfig { train_count: 200, test_count: 50, ..Default::default() };
    let written = write_synthetic_idx(&dir.path().join("digits"), &cfg)?;
    let (splits, manifest) = ingest_with_manifest(&dir.path().join("digits"), DatasetFormat::Idx, dir.path())?;

    assert_eq!(splits.test.content_hash(), written.test.content_hash());
    println!("{} train / {} test images of shape {}", splits.train.len(), splits.test.len(), manifest.shape);
    println!("classes {}, manifest hash {}", manifest.num_classes, manifest.hash());
    print!("{}", std::fs::read_to_string(dir.path().join("manifest.json"))?);
    Ok(())
}
