//! Base classifiers, ensembles and denoisers.
//!
//! Anything that can be smoothed implements [`Classifier`]. Attacks and
//! saliency additionally need input gradients, exposed through
//! [`Differentiable`] as a forward pass returning a pullback closure
//! (a vector-Jacobian product over the logits).

mod checkpoint;
mod convnet;
mod denoiser;
mod ensemble;
mod layers;
mod linear;
mod train;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{argmax, Image, Shape};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use convnet::{ConvArchitecture, ConvSpec, ConvTrace, SmallConvNet};
pub use denoiser::{
    compose_denoised, ConstantDenoiser, ConvDenoiser, DenoisedClassifier, Denoiser, DenoiserSpec,
    IdentityDenoiser, ImagePullback,
};
pub use ensemble::{ensemble_logits, Ensemble};
pub use layers::{Conv2d, Dense};
pub use linear::{ConstantClassifier, LinearClassifier};
pub use train::{
    evaluate_accuracy, train_denoiser, train_noise_augmented, DenoiserReport, TrainingConfig,
    TrainingReport,
};

/// Maps a cotangent over the logits to a gradient over the input image.
pub type Pullback<'a> = Box<dyn FnOnce(&[f64]) -> Image + 'a>;

pub trait Classifier: Send + Sync {
    fn input_shape(&self) -> Shape;

    fn num_classes(&self) -> usize;

    fn logits(&self, x: &Image) -> Vec<f64>;

    fn label(&self, x: &Image) -> usize {
        argmax(&self.logits(x))
    }
}

pub trait Differentiable: Classifier {
    fn logits_with_pullback<'a>(&'a self, x: &Image) -> (Vec<f64>, Pullback<'a>);
}

impl<T: Classifier + ?Sized> Classifier for Arc<T> {
    fn input_shape(&self) -> Shape {
        (**self).input_shape()
    }
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }
    fn logits(&self, x: &Image) -> Vec<f64> {
        (**self).logits(x)
    }
    fn label(&self, x: &Image) -> usize {
        (**self).label(x)
    }
}

impl<T: Differentiable + ?Sized> Differentiable for Arc<T> {
    fn logits_with_pullback<'a>(&'a self, x: &Image) -> (Vec<f64>, Pullback<'a>) {
        (**self).logits_with_pullback(x)
    }
}

/// Numerically stable softmax cross-entropy and its gradient over logits.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let log_sum_exp = max + sum.ln();
    let loss = log_sum_exp - logits[label];
    let mut grad: Vec<f64> = logits.iter().map(|z| (z - log_sum_exp).exp()).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy loss at `(x, y)` and its gradient with respect to `x`.
pub fn loss_and_input_gradient(
    clf: &dyn Differentiable,
    x: &Image,
    y: usize,
) -> Result<(f64, Image)> {
    if y >= clf.num_classes() {
        return Err(Error::Domain(format!(
            "label {y} out of range for {} classes",
            clf.num_classes()
        )));
    }
    x.ensure_shape(clf.input_shape())?;
    let (logits, pullback) = clf.logits_with_pullback(x);
    let (loss, dlogits) = cross_entropy(&logits, y);
    Ok((loss, pullback(&dlogits)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_c() {
        let (loss, grad) = cross_entropy(&[0.3; 7], 2);
        assert!((loss - 7f64.ln()).abs() < 1e-12);
        assert!((grad.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_prediction_has_near_zero_loss() {
        let (loss, _) = cross_entropy(&[50.0, 0.0, -10.0], 0);
        assert!(loss < 1e-20);
    }

    #[test]
    fn huge_logits_stay_finite() {
        let (loss, grad) = cross_entropy(&[1e4, -1e4], 1);
        assert!(loss.is_finite() && grad.iter().all(|g| g.is_finite()));
        assert!((loss - 2e4).abs() < 1e-6);
    }

    #[test]
    fn out_of_range_label() {
        let clf = ConstantClassifier::new(Shape::new(1, 1, 1), 2, 0);
        assert!(loss_and_input_gradient(&clf, &Image::zeros(Shape::new(1, 1, 1)), 2).is_err());
    }
}
