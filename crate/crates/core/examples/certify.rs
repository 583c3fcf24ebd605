// Certify a linear classifier and compare with its exact certificate.
//
// For a binary linear classifier the smoothed prediction and its radius
// are known in closed form: the radius is the L2 distance to the decision
// boundary. The Monte-Carlo certificate approaches it from below.

use certspoof::models::LinearClassifier;
use certspoof::smoothing::{certify, predict_smoothed, SmoothingConfig};
use certspoof::{Image, Shape};

fn main() -> certspoof::Result<()> {
    let shape = Shape::new(1, 2, 1);
    let clf = LinearClassifier::binary(shape, vec![3.0, 4.0], -2.0)?;
    let cfg = SmoothingConfig { n: 100_000, ..SmoothingConfig::with_sigma(0.5)? };

    for (i, (a, b)) in [(0.2, 0.3), (0.4, 0.6), (0.6, 0.7), (0.9, 0.9)].into_iter().enumerate() {
        let x = Image::from_vec(shape, vec![a, b])?;
        let exact = clf.signed_margin(&x).abs();
        let o = certify(&clf, &x, &cfg, i as u64)?;
        let pred = predict_smoothed(&clf, &x, &cfg, i as u64)?;
        println!(
            "x = ({a}, {b}): certify {} radius {:.4} (exact {exact:.4}, pA >= {:.4}), predict {pred}",
            o.decision, o.radius, o.pa_lower
        );
    }
    Ok(())
}
