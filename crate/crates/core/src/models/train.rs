use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Classifier, ConvDenoiser, SmallConvNet};
use crate::rng::{gaussian_noise, stream_rng, Phase, StreamId};
use crate::tensor::Image;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Standard deviation of the Gaussian augmentation noise.
    pub sigma: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            learning_rate: 2e-3,
            sigma: 0.25,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.sigma >= 0.0) {
            return Err(Error::Config("learning_rate must be positive and sigma non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub epochs: usize,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub clean_accuracy: f64,
    /// Accuracy on one noisy copy of each training image.
    pub noisy_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserReport {
    pub epochs: usize,
    pub epoch_losses: Vec<f64>,
    /// Mean squared error of the identity map on the same noisy inputs.
    pub identity_mse: f64,
    pub denoised_mse: f64,
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    fn new(lr: f64, sizes: &[usize]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|n| vec![0.0; *n]).collect(),
            v: sizes.iter().map(|n| vec![0.0; *n]).collect(),
        }
    }

    fn step(&mut self, params: Vec<&mut Vec<f64>>, grads: &[Vec<f64>], scale: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, p) in params.into_iter().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                let g = grads[k][i] * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

fn check_dataset(images: &[Image], labels: &[usize]) -> Result<()> {
    if images.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    if images.len() != labels.len() {
        return Err(Error::shape(format!("{} labels", images.len()), labels.len()));
    }
    Ok(())
}

fn noisy(x: &Image, sigma: f64, seed: u64, step: u32, index: u32) -> Image {
    x.add(&gaussian_noise(x.shape(), sigma, seed, StreamId::new(Phase::Training, step, index)))
}

/// Fraction of `images` the classifier labels correctly.
pub fn evaluate_accuracy(clf: &dyn Classifier, images: &[Image], labels: &[usize]) -> Result<f64> {
    check_dataset(images, labels)?;
    let correct = images
        .iter()
        .zip(labels)
        .filter(|(x, y)| clf.label(x) == **y)
        .count();
    Ok(correct as f64 / images.len() as f64)
}

/// Trains `net` with Gaussian noise augmentation and Adam.
pub fn train_noise_augmented(
    net: &mut SmallConvNet,
    images: &[Image],
    labels: &[usize],
    cfg: &TrainingConfig,
) -> Result<TrainingReport> {
    cfg.validate()?;
    check_dataset(images, labels)?;
    let shape = net.input_shape();
    if let Some(x) = images.iter().find(|x| x.shape() != shape) {
        return Err(Error::shape(shape, x.shape()));
    }
    if let Some(y) = labels.iter().find(|y| **y >= net.num_classes()) {
        return Err(Error::Domain(format!("label {y} out of range")));
    }
    let sizes: Vec<usize> = net.parameters().iter().map(|p| p.len()).collect();
    let mut adam = Adam::new(cfg.learning_rate, &sizes);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut shuffle_rng = stream_rng(cfg.seed, StreamId::new(Phase::Training, 0, u32::MAX));
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = net.zero_gradients();
            for &i in batch {
                let x = noisy(&images[i], cfg.sigma, cfg.seed, epoch as u32 + 1, i as u32);
                total += net.accumulate_gradients(&x, labels[i], &mut grads).0;
            }
            adam.step(net.parameters_mut(), &grads, 1.0 / batch.len() as f64);
        }
        let mean = total / images.len() as f64;
        log::debug!("epoch {epoch}: loss {mean:.4}");
        epoch_losses.push(mean);
    }
    let clean_accuracy = evaluate_accuracy(&*net, images, labels)?;
    let noisy_images: Vec<Image> = images
        .iter()
        .enumerate()
        .map(|(i, x)| noisy(x, cfg.sigma, cfg.seed ^ 0x5eed, 0, i as u32))
        .collect();
    let noisy_accuracy = evaluate_accuracy(&*net, &noisy_images, labels)?;
    Ok(TrainingReport {
        epochs: cfg.epochs,
        epoch_losses,
        clean_accuracy,
        noisy_accuracy,
    })
}

/// Trains `denoiser` to map `x + N(0, σ²I)` back to `x` under squared error.
pub fn train_denoiser(
    denoiser: &mut ConvDenoiser,
    images: &[Image],
    cfg: &TrainingConfig,
) -> Result<DenoiserReport> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let shape = denoiser.spec().shape;
    if let Some(x) = images.iter().find(|x| x.shape() != shape) {
        return Err(Error::shape(shape, x.shape()));
    }
    let sizes: Vec<usize> = denoiser.parameters().iter().map(|p| p.len()).collect();
    let mut adam = Adam::new(cfg.learning_rate, &sizes);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut shuffle_rng = stream_rng(cfg.seed, StreamId::new(Phase::Training, 0, u32::MAX - 1));
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = denoiser.zero_gradients();
            for &i in batch {
                let x = noisy(&images[i], cfg.sigma, cfg.seed, epoch as u32 + 1, i as u32);
                total += denoiser.accumulate_gradients(&x, &images[i], &mut grads);
            }
            adam.step(denoiser.parameters_mut(), &grads, 1.0 / batch.len() as f64);
        }
        epoch_losses.push(total / images.len() as f64);
    }
    denoiser.set_trained_sigma(cfg.sigma);

    use crate::models::Denoiser;
    let (mut identity, mut denoised) = (0.0, 0.0);
    for (i, x) in images.iter().enumerate() {
        let xn = noisy(x, cfg.sigma, cfg.seed ^ 0x5eed, 0, i as u32);
        let n = x.as_slice().len() as f64;
        identity += xn.sub(x).as_slice().iter().map(|d| d * d).sum::<f64>() / n;
        denoised += denoiser.denoise(&xn).sub(x).as_slice().iter().map(|d| d * d).sum::<f64>() / n;
    }
    let count = images.len() as f64;
    Ok(DenoiserReport {
        epochs: cfg.epochs,
        epoch_losses,
        identity_mse: identity / count,
        denoised_mse: denoised / count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ConvArchitecture, DenoiserSpec};
    use crate::tensor::Shape;

    fn toy() -> (Vec<Image>, Vec<usize>) {
        let shape = Shape::new(8, 8, 1);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..24 {
            let y = i % 2;
            images.push(Image::from_fn(shape, |r, c, _| {
                let on = if y == 0 { c < 4 } else { r < 4 };
                if on { 0.9 } else { 0.1 }
            }));
            labels.push(y);
        }
        (images, labels)
    }

    #[test]
    fn learns_separable_toy_problem() {
        let (images, labels) = toy();
        let mut net = SmallConvNet::new(ConvArchitecture::desk(Shape::new(8, 8, 1), 2), 1).unwrap();
        let cfg = TrainingConfig {
            epochs: 6,
            batch_size: 8,
            sigma: 0.1,
            ..TrainingConfig::default()
        };
        let report = train_noise_augmented(&mut net, &images, &labels, &cfg).unwrap();
        assert_eq!(report.clean_accuracy, 1.0);
        assert!(report.epoch_losses.last() < report.epoch_losses.first());
    }

    #[test]
    fn zero_epochs_leave_weights_unchanged() {
        let (images, labels) = toy();
        let mut net = SmallConvNet::new(ConvArchitecture::desk(Shape::new(8, 8, 1), 2), 1).unwrap();
        let before = net.clone();
        let cfg = TrainingConfig { epochs: 0, ..TrainingConfig::default() };
        train_noise_augmented(&mut net, &images, &labels, &cfg).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let mut net = SmallConvNet::new(ConvArchitecture::desk(Shape::new(8, 8, 1), 2), 1).unwrap();
        let err = train_noise_augmented(&mut net, &[], &[], &TrainingConfig::default());
        assert!(matches!(err, Err(Error::Empty(_))));
    }

    #[test]
    fn denoiser_beats_identity() {
        let (images, _) = toy();
        let mut d = ConvDenoiser::new(DenoiserSpec::desk(Shape::new(8, 8, 1)), 2).unwrap();
        let cfg = TrainingConfig {
            epochs: 10,
            batch_size: 4,
            sigma: 0.25,
            learning_rate: 5e-3,
            seed: 3,
        };
        let report = train_denoiser(&mut d, &images, &cfg).unwrap();
        assert!(report.denoised_mse < report.identity_mse, "{report:?}");
        assert_eq!(d.spec().trained_sigma, Some(0.25));
    }
}
