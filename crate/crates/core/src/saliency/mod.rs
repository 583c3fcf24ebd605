//! Salient-region masks: saliency maps, region proposals and top-k
//! selection, plus the random baselines used in ablations.

mod regions;
mod segment;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{loss_and_input_gradient, Differentiable, SmallConvNet};
use crate::tensor::{Image, Tensor};

pub use regions::{
    load_region_proposals, overlap_score, random_pixel_mask, random_region_mask, save_region_proposals,
    select_salient_region_mask, unmask_candidate, Candidate, RegionProposal, RegionProposalSet,
    SalientRegionMask,
};
pub use segment::{default_min_area, propose_regions, propose_regions_with, SegmentParams};

/// Per-pixel saliency in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl SaliencyMap {
    /// Min-max normalises `values`. A constant map becomes all ones when
    /// positive and all zeros otherwise.
    pub fn normalized(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(height * width, values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("saliency values must be finite".into()));
        }
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let values = if values.is_empty() {
            values
        } else if hi > lo {
            values.iter().map(|v| (v - lo) / (hi - lo)).collect()
        } else {
            vec![if hi > 0.0 { 1.0 } else { 0.0 }; values.len()]
        };
        Ok(Self { height, width, values })
    }

    /// Wraps values already in `[0, 1]` without rescaling.
    pub fn from_values(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(height * width, values.len()));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain("saliency values must lie in [0, 1]".into()));
        }
        Ok(Self { height, width, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }
}

/// Bilinear resize of a single-channel map with half-pixel centres.
pub(crate) fn bilinear_resize(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let coord = |o: usize, scale: f64, n: usize| {
        let c = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = c.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, c - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, sy, h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, sx, w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// `ReLU(Σ_k w_k A^k)` with `w_k` the spatial mean of `∂score/∂A^k`,
/// upsampled to `height × width` but not normalised.
pub fn gradcam_raw(activations: &Tensor, gradients: &Tensor, height: usize, width: usize) -> Result<Vec<f64>> {
    if activations.shape() != gradients.shape() {
        return Err(Error::shape(activations.shape(), gradients.shape()));
    }
    let (fh, fw, k) = (activations.height(), activations.width(), activations.channels());
    let pixels = (fh * fw) as f64;
    let mut weights = vec![0.0; k];
    for (i, g) in gradients.as_slice().iter().enumerate() {
        weights[i % k] += g / pixels;
    }
    let cam: Vec<f64> = activations
        .as_slice()
        .chunks(k)
        .map(|a| a.iter().zip(&weights).map(|(a, w)| a * w).sum::<f64>().max(0.0))
        .collect();
    Ok(bilinear_resize(&cam, fh, fw, height, width))
}

/// GradCAM from precomputed feature maps and their gradients.
pub fn gradcam_from_maps(activations: &Tensor, gradients: &Tensor, height: usize, width: usize) -> Result<SaliencyMap> {
    SaliencyMap::normalized(height, width, gradcam_raw(activations, gradients, height, width)?)
}

/// GradCAM of `net` for class `y` at the last convolutional layer.
pub fn gradcam(net: &SmallConvNet, x: &Image, y: usize) -> Result<SaliencyMap> {
    let (acts, grads) = net.last_conv_activations_and_gradients(x, y)?;
    gradcam_from_maps(&acts, &grads, x.height(), x.width())
}

/// Per-pixel L2 norm (over channels) of the loss gradient, divided by its
/// maximum.
pub fn input_gradient_saliency(clf: &dyn Differentiable, x: &Image, y: usize) -> Result<SaliencyMap> {
    let (_, g) = loss_and_input_gradient(clf, x, y)?;
    let mags: Vec<f64> = g
        .as_slice()
        .chunks(x.channels())
        .map(|p| p.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let max = mags.iter().cloned().fold(0.0, f64::max);
    let values = if max > 0.0 {
        mags.iter().map(|m| m / max).collect()
    } else {
        vec![0.0; mags.len()]
    };
    SaliencyMap::from_values(x.height(), x.width(), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ConstantClassifier, LinearClassifier};
    use crate::tensor::Shape;

    #[test]
    fn zero_gradients_give_zero_map() {
        let acts = Tensor::from_fn(Shape::new(2, 2, 3), |y, x, c| (y + x + c) as f64);
        let grads = Tensor::zeros(Shape::new(2, 2, 3));
        let map = gradcam_from_maps(&acts, &grads, 8, 8).unwrap();
        assert!(map.is_zero());
        assert_eq!((map.height(), map.width()), (8, 8));
    }

    #[test]
    fn single_map_hand_evaluation() {
        // F = [[0, 1], [2, 4]], gradient 0.5 everywhere, so w = 0.5 and the
        // CAM is 0.5·F; normalising divides by max 2.
        let acts = Tensor::from_vec(Shape::new(2, 2, 1), vec![0.0, 1.0, 2.0, 4.0]).unwrap();
        let grads = Tensor::filled(Shape::new(2, 2, 1), 0.5);
        let map = gradcam_from_maps(&acts, &grads, 2, 2).unwrap();
        assert_eq!(map.values(), &[0.0, 0.25, 0.5, 1.0]);

        // a negative pooled gradient is removed by the ReLU
        let neg = Tensor::filled(Shape::new(2, 2, 1), -0.5);
        assert!(gradcam_from_maps(&acts, &neg, 2, 2).unwrap().is_zero());
    }

    #[test]
    fn upsampling_preserves_constant_and_corners() {
        let up = bilinear_resize(&[3.0; 4], 2, 2, 7, 5);
        assert!(up.iter().all(|v| (*v - 3.0).abs() < 1e-15));
        let up = bilinear_resize(&[0.0, 1.0, 2.0, 3.0], 2, 2, 4, 4);
        assert_eq!(up[0], 0.0);
        assert_eq!(up[15], 3.0);
        // between the two left centres
        assert!((up[4] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn input_gradient_of_constant_classifier_is_zero() {
        let clf = ConstantClassifier::new(Shape::new(3, 3, 1), 2, 0);
        let map = input_gradient_saliency(&clf, &Image::zeros(Shape::new(3, 3, 1)), 1).unwrap();
        assert!(map.is_zero());
    }

    #[test]
    fn linear_saliency_follows_weights() {
        let shape = Shape::new(1, 4, 1);
        let w = vec![1.0, -2.0, 0.5, 4.0];
        let clf = LinearClassifier::binary(shape, w.clone(), 0.0).unwrap();
        let map = input_gradient_saliency(&clf, &Image::filled(shape, 0.3), 0).unwrap();
        for (m, wi) in map.values().iter().zip(&w) {
            assert!((m - wi.abs() / 4.0).abs() < 1e-12);
        }
    }
}
