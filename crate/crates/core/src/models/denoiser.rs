use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::layers::{relu_backward, relu_in_place, Conv2d};
use crate::models::{Classifier, Differentiable, Pullback};
use crate::tensor::{Image, Shape, Tensor};

/// Maps an output-image cotangent to an input-image gradient.
pub type ImagePullback<'a> = Box<dyn FnOnce(&Image) -> Image + 'a>;

pub trait Denoiser: Send + Sync {
    fn shape(&self) -> Shape;

    fn denoise(&self, x: &Image) -> Image;

    fn denoise_with_pullback<'a>(&'a self, x: &Image) -> (Image, ImagePullback<'a>);

    /// Noise level the denoiser was trained for, if any.
    fn trained_sigma(&self) -> Option<f64> {
        None
    }
}

#[derive(Debug, Clone, Copy)]
pub struct IdentityDenoiser {
    pub shape: Shape,
}

impl Denoiser for IdentityDenoiser {
    fn shape(&self) -> Shape {
        self.shape
    }

    fn denoise(&self, x: &Image) -> Image {
        x.clone()
    }

    fn denoise_with_pullback<'a>(&'a self, x: &Image) -> (Image, ImagePullback<'a>) {
        (x.clone(), Box::new(|g: &Image| g.clone()))
    }
}

/// Ignores its input and always returns the same image.
#[derive(Debug, Clone)]
pub struct ConstantDenoiser {
    pub output: Image,
}

impl Denoiser for ConstantDenoiser {
    fn shape(&self) -> Shape {
        self.output.shape()
    }

    fn denoise(&self, _x: &Image) -> Image {
        self.output.clone()
    }

    fn denoise_with_pullback<'a>(&'a self, _x: &Image) -> (Image, ImagePullback<'a>) {
        let shape = self.output.shape();
        (self.output.clone(), Box::new(move |_| Image::zeros(shape)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserSpec {
    pub shape: Shape,
    pub hidden_channels: usize,
    /// Number of 3×3 conv layers, at least 2.
    pub depth: usize,
    pub trained_sigma: Option<f64>,
}

impl DenoiserSpec {
    pub fn desk(shape: Shape) -> Self {
        Self {
            shape,
            hidden_channels: 8,
            depth: 3,
            trained_sigma: None,
        }
    }
}

/// Small residual convolutional denoiser: `clip(x + r(x), 0, 1)` where `r`
/// is a ReLU conv stack.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvDenoiser {
    spec: DenoiserSpec,
    pub(crate) convs: Vec<Conv2d>,
}

struct DenoiseTrace {
    inputs: Vec<Tensor>,
    /// `x + r(x)` before clipping.
    raw: Tensor,
}

impl ConvDenoiser {
    /// Initial denoiser: random hidden layers and a zero output layer, so it
    /// starts as the clipped identity.
    pub fn new(spec: DenoiserSpec, seed: u64) -> Result<Self> {
        let mut d = Self::zeroed(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = d.convs.len() - 1;
        for c in &mut d.convs[..last] {
            c.init(&mut rng);
        }
        Ok(d)
    }

    pub fn zeroed(spec: DenoiserSpec) -> Result<Self> {
        if spec.depth < 2 || spec.hidden_channels == 0 || spec.shape.is_empty() {
            return Err(Error::Config(format!("invalid denoiser spec {spec:?}")));
        }
        let c = spec.shape.channels;
        let h = spec.hidden_channels;
        let mut convs = vec![Conv2d::new(c, h, 3, 1, 1, true)];
        for _ in 0..spec.depth - 2 {
            convs.push(Conv2d::new(h, h, 3, 1, 1, true));
        }
        convs.push(Conv2d::new(h, c, 3, 1, 1, true));
        Ok(Self { spec, convs })
    }

    pub fn spec(&self) -> &DenoiserSpec {
        &self.spec
    }

    pub(crate) fn set_trained_sigma(&mut self, sigma: f64) {
        self.spec.trained_sigma = Some(sigma);
    }

    fn forward(&self, x: &Image) -> DenoiseTrace {
        let mut inputs = Vec::with_capacity(self.convs.len());
        let mut current = x.clone();
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            let mut out = conv.forward(&current);
            if i < last {
                relu_in_place(out.as_mut_slice());
            }
            inputs.push(std::mem::replace(&mut current, out));
        }
        current.add_assign(x);
        DenoiseTrace { inputs, raw: current }
    }

    fn backward(&self, trace: &DenoiseTrace, dout: &Image, mut grads: Option<&mut [Vec<f64>]>) -> Image {
        let mut g = dout.clone();
        for (gv, raw) in g.as_mut_slice().iter_mut().zip(trace.raw.as_slice()) {
            if !(*raw > 0.0 && *raw < 1.0) {
                *gv = 0.0;
            }
        }
        let skip = g.clone();
        for i in (0..self.convs.len()).rev() {
            let input = &trace.inputs[i];
            let pg = grads.as_deref_mut().map(|all| {
                let (w, b) = all[2 * i..2 * i + 2].split_at_mut(1);
                (w[0].as_mut_slice(), b[0].as_mut_slice())
            });
            let mut gin = self.convs[i].backward(input, &g, pg);
            if i > 0 {
                relu_backward(input.as_slice(), gin.as_mut_slice());
            }
            g = gin;
        }
        g.add_assign(&skip);
        g
    }

    pub fn parameters(&self) -> Vec<&[f64]> {
        self.convs
            .iter()
            .flat_map(|c| [c.weight.as_slice(), c.bias.as_slice()])
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out
    }

    pub(crate) fn zero_gradients(&self) -> Vec<Vec<f64>> {
        self.parameters().iter().map(|p| vec![0.0; p.len()]).collect()
    }

    /// Mean squared error between `denoise(noisy)` and `clean`; accumulates
    /// parameter gradients.
    pub(crate) fn accumulate_gradients(&self, noisy: &Image, clean: &Image, grads: &mut [Vec<f64>]) -> f64 {
        let trace = self.forward(noisy);
        let out = trace.raw.clipped(0.0, 1.0);
        let n = out.as_slice().len() as f64;
        let mut dout = out.sub(clean);
        let loss = dout.as_slice().iter().map(|d| d * d).sum::<f64>() / n;
        dout.scale(2.0 / n);
        self.backward(&trace, &dout, Some(grads));
        loss
    }

    pub(crate) fn from_parts(spec: DenoiserSpec, tensors: Vec<Vec<f64>>) -> Result<Self> {
        let mut d = Self::zeroed(spec)?;
        let expected: Vec<usize> = d.parameters().iter().map(|p| p.len()).collect();
        if tensors.len() != expected.len() {
            return Err(Error::shape(format!("{} tensors", expected.len()), tensors.len()));
        }
        for (i, (t, want)) in tensors.iter().zip(&expected).enumerate() {
            if t.len() != *want {
                return Err(Error::shape(format!("tensor {i} of length {want}"), t.len()));
            }
        }
        for (slot, t) in d.parameters_mut().into_iter().zip(tensors) {
            *slot = t;
        }
        Ok(d)
    }
}

impl Denoiser for ConvDenoiser {
    fn shape(&self) -> Shape {
        self.spec.shape
    }

    fn denoise(&self, x: &Image) -> Image {
        self.forward(x).raw.clipped(0.0, 1.0)
    }

    fn denoise_with_pullback<'a>(&'a self, x: &Image) -> (Image, ImagePullback<'a>) {
        let trace = self.forward(x);
        let out = trace.raw.clipped(0.0, 1.0);
        (out, Box::new(move |g: &Image| self.backward(&trace, g, None)))
    }

    fn trained_sigma(&self) -> Option<f64> {
        self.spec.trained_sigma
    }
}

/// Base classifier applied to denoised inputs, `f ∘ D`.
#[derive(Clone)]
pub struct DenoisedClassifier {
    base: Arc<dyn Differentiable>,
    denoiser: Arc<dyn Denoiser>,
}

impl DenoisedClassifier {
    pub fn base(&self) -> &Arc<dyn Differentiable> {
        &self.base
    }

    pub fn denoiser(&self) -> &Arc<dyn Denoiser> {
        &self.denoiser
    }
}

impl std::fmt::Debug for DenoisedClassifier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DenoisedClassifier")
            .field("shape", &self.base.input_shape())
            .field("trained_sigma", &self.denoiser.trained_sigma())
            .finish()
    }
}

pub fn compose_denoised(
    base: Arc<dyn Differentiable>,
    denoiser: Arc<dyn Denoiser>,
) -> Result<DenoisedClassifier> {
    if base.input_shape() != denoiser.shape() {
        return Err(Error::shape(base.input_shape(), denoiser.shape()));
    }
    Ok(DenoisedClassifier { base, denoiser })
}

impl Classifier for DenoisedClassifier {
    fn input_shape(&self) -> Shape {
        self.base.input_shape()
    }

    fn num_classes(&self) -> usize {
        self.base.num_classes()
    }

    fn logits(&self, x: &Image) -> Vec<f64> {
        self.base.logits(&self.denoiser.denoise(x))
    }
}

impl Differentiable for DenoisedClassifier {
    fn logits_with_pullback<'a>(&'a self, x: &Image) -> (Vec<f64>, Pullback<'a>) {
        let (clean, denoise_pb) = self.denoiser.denoise_with_pullback(x);
        let (logits, base_pb) = self.base.logits_with_pullback(&clean);
        (logits, Box::new(move |cot: &[f64]| denoise_pb(&base_pb(cot))))
    }
}
