// Build the salient-region mask GhostCert perturbs: segment the image
// into region proposals, score them against a GradCAM map and keep the
// top k. The proposals are also saved to and reloaded from a text file.

use certspoof::data::{synthetic_digits, SyntheticConfig};
use certspoof::models::{train_noise_augmented, ConvArchitecture, SmallConvNet, TrainingConfig};
use certspoof::saliency::{
    default_min_area, gradcam, load_region_proposals, propose_regions, random_pixel_mask, save_region_proposals,
    select_salient_region_mask, unmask_candidate,
};
use certspoof::Mask;

fn show(mask: &Mask) {
    for y in 0..mask.height() {
        let row: String = (0..mask.width()).map(|x| if mask.get(y, x) { '#' } else { '.' }).collect();
        println!("  {row}");
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = synthetic_digits(&SyntheticConfig { train_count: 600, test_count: 4, ..Default::default() })?;
    let mut net = SmallConvNet::new(ConvArchitecture::desk(data.train.shape(), 10), 3)?;
    train_noise_augmented(&mut net, data.train.images(), data.train.labels(), &TrainingConfig { epochs: 2, ..Default::default() })?;

    let (x, label) = (data.test.image(0), data.test.label(0));
    let (h, w) = (x.height(), x.width());
    let props = propose_regions(x, default_min_area(h, w));
    println!("{} proposals, {} pixels left to the unmask candidate", props.len(), unmask_candidate(&props).area());

    let saliency = gradcam(&net, x, label)?;
    let mask = select_salient_region_mask(&props, &saliency, 5)?;
    println!("top-5 mask for a '{label}', {} of {} pixels, picks {:?}", mask.mask.area(), h * w, mask.selected);
    show(&mask.mask);

    let random = random_pixel_mask(h, w, 0.5, 1)?;
    println!("random 50% baseline covers {} pixels", random.mask.area());

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("regions.txt");
    save_region_proposals(&path, &props)?;
    assert_eq!(load_region_proposals(&path, h, w, default_min_area(h, w))?, props);
    println!("proposal file: {} bytes", std::fs::metadata(&path)?.len());
    Ok(())
}
