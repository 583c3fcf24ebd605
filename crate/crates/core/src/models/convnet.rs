use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::layers::{relu_backward, relu_in_place, Conv2d, Dense};
use crate::models::{cross_entropy, Classifier, Differentiable, Pullback};
use crate::tensor::{Image, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub const fn new(out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            out_channels,
            kernel,
            stride,
            padding,
        }
    }
}

/// Architecture descriptor: ReLU conv stack, ReLU hidden dense layers, then
/// a linear head producing logits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvArchitecture {
    pub input: Shape,
    pub convs: Vec<ConvSpec>,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    pub use_bias: bool,
}

impl ConvArchitecture {
    /// Two stride-2 conv layers and one hidden layer; sized for 28×28 or
    /// 32×32 inputs on a CPU.
    pub fn desk(input: Shape, num_classes: usize) -> Self {
        Self {
            input,
            convs: vec![ConvSpec::new(8, 3, 2, 1), ConvSpec::new(16, 3, 2, 1)],
            hidden: vec![64],
            num_classes,
            use_bias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input.is_empty() || self.num_classes < 2 {
            return Err(Error::Config("architecture needs a non-empty input and >= 2 classes".into()));
        }
        let mut shape = self.input;
        for spec in &self.convs {
            if spec.kernel == 0 || spec.stride == 0 || spec.out_channels == 0 {
                return Err(Error::Config(format!("degenerate conv layer {spec:?}")));
            }
            if shape.height + 2 * spec.padding < spec.kernel || shape.width + 2 * spec.padding < spec.kernel {
                return Err(Error::Config(format!("conv kernel larger than feature map {shape}")));
            }
            shape = Shape::new(
                (shape.height + 2 * spec.padding - spec.kernel) / spec.stride + 1,
                (shape.width + 2 * spec.padding - spec.kernel) / spec.stride + 1,
                spec.out_channels,
            );
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layers must be non-empty".into()));
        }
        Ok(())
    }
}

/// Desk-scale convolutional classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct SmallConvNet {
    arch: ConvArchitecture,
    pub(crate) convs: Vec<Conv2d>,
    pub(crate) dense: Vec<Dense>,
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ConvTrace {
    conv_inputs: Vec<Tensor>,
    last_conv: Option<Tensor>,
    dense_inputs: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
}

impl ConvTrace {
    pub fn last_conv_activations(&self) -> Option<&Tensor> {
        self.last_conv.as_ref()
    }
}

impl SmallConvNet {
    /// Randomly initialised network; `seed` fixes all weights.
    pub fn new(arch: ConvArchitecture, seed: u64) -> Result<Self> {
        let mut net = Self::zeroed(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for c in &mut net.convs {
            c.init(&mut rng);
        }
        for d in &mut net.dense {
            d.init(&mut rng);
        }
        Ok(net)
    }

    pub fn zeroed(arch: ConvArchitecture) -> Result<Self> {
        arch.validate()?;
        let mut convs = Vec::new();
        let mut shape = arch.input;
        for spec in &arch.convs {
            let layer = Conv2d::new(
                shape.channels,
                spec.out_channels,
                spec.kernel,
                spec.stride,
                spec.padding,
                arch.use_bias,
            );
            shape = layer.output_shape(shape);
            convs.push(layer);
        }
        let mut width = shape.len();
        let mut dense = Vec::new();
        for &h in &arch.hidden {
            dense.push(Dense::new(width, h, arch.use_bias));
            width = h;
        }
        dense.push(Dense::new(width, arch.num_classes, arch.use_bias));
        Ok(Self { arch, convs, dense })
    }

    pub fn architecture(&self) -> &ConvArchitecture {
        &self.arch
    }

    pub fn last_conv_shape(&self) -> Option<Shape> {
        let mut shape = self.arch.input;
        for c in &self.convs {
            shape = c.output_shape(shape);
        }
        (!self.convs.is_empty()).then_some(shape)
    }

    pub fn forward(&self, x: &Image) -> ConvTrace {
        let mut conv_inputs = Vec::with_capacity(self.convs.len());
        let mut current = x.clone();
        for conv in &self.convs {
            let mut out = conv.forward(&current);
            relu_in_place(out.as_mut_slice());
            conv_inputs.push(std::mem::replace(&mut current, out));
        }
        let last_conv = (!self.convs.is_empty()).then(|| current.clone());
        let mut v = current.into_vec();
        let mut dense_inputs = Vec::with_capacity(self.dense.len());
        let last = self.dense.len() - 1;
        for (i, layer) in self.dense.iter().enumerate() {
            let mut out = layer.forward(&v);
            if i < last {
                relu_in_place(&mut out);
            }
            dense_inputs.push(std::mem::replace(&mut v, out));
        }
        ConvTrace {
            conv_inputs,
            last_conv,
            dense_inputs,
            logits: v,
        }
    }

    /// Backpropagates `dlogits` through the dense head; returns the gradient
    /// over the flattened last feature map (or the input, without convs).
    fn backward_dense(&self, trace: &ConvTrace, dlogits: &[f64], grads: Option<&mut [Vec<f64>]>) -> Vec<f64> {
        let mut g = dlogits.to_vec();
        let n_conv_params = 2 * self.convs.len();
        let mut grads = grads;
        for i in (0..self.dense.len()).rev() {
            let layer = &self.dense[i];
            let input = &trace.dense_inputs[i];
            let pg = grads.as_deref_mut().map(|all| {
                let (w, b) = all[n_conv_params + 2 * i..n_conv_params + 2 * i + 2].split_at_mut(1);
                (w[0].as_mut_slice(), b[0].as_mut_slice())
            });
            let mut gin = layer.backward(input, &g, pg);
            if i > 0 {
                // input of dense i is the ReLU output of dense i-1
                relu_backward(input, &mut gin);
            }
            g = gin;
        }
        g
    }

    fn backward_from(&self, trace: &ConvTrace, dlogits: &[f64], mut grads: Option<&mut [Vec<f64>]>) -> Image {
        let g_flat = self.backward_dense(trace, dlogits, grads.as_deref_mut());
        let Some(last) = &trace.last_conv else {
            return Image::from_vec(self.arch.input, g_flat).expect("head input is the image");
        };
        let mut g = Tensor::from_vec(last.shape(), g_flat).expect("flattened feature map");
        relu_backward(last.as_slice(), g.as_mut_slice());
        for i in (0..self.convs.len()).rev() {
            let input = &trace.conv_inputs[i];
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
        g
    }

    /// Activations of the last conv layer and the gradient of logit `y` with
    /// respect to them.
    pub fn last_conv_activations_and_gradients(&self, x: &Image, y: usize) -> Result<(Tensor, Tensor)> {
        if self.convs.is_empty() {
            return Err(Error::Unsupported("network has no convolutional layer".into()));
        }
        if y >= self.arch.num_classes {
            return Err(Error::Domain(format!("label {y} out of range")));
        }
        x.ensure_shape(self.arch.input)?;
        let trace = self.forward(x);
        let mut onehot = vec![0.0; self.arch.num_classes];
        onehot[y] = 1.0;
        let g = self.backward_dense(&trace, &onehot, None);
        let acts = trace.last_conv.expect("has convs");
        let grads = Tensor::from_vec(acts.shape(), g).expect("same shape");
        Ok((acts, grads))
    }

    pub fn parameters(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for c in &self.convs {
            out.push(&c.weight);
            out.push(&c.bias);
        }
        for d in &self.dense {
            out.push(&d.weight);
            out.push(&d.bias);
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        for d in &mut self.dense {
            out.push(&mut d.weight);
            out.push(&mut d.bias);
        }
        out
    }

    pub(crate) fn zero_gradients(&self) -> Vec<Vec<f64>> {
        self.parameters().iter().map(|p| vec![0.0; p.len()]).collect()
    }

    /// Cross-entropy at `(x, y)`; accumulates parameter gradients into `grads`.
    pub(crate) fn accumulate_gradients(&self, x: &Image, y: usize, grads: &mut [Vec<f64>]) -> (f64, bool) {
        let trace = self.forward(x);
        let correct = crate::tensor::argmax(&trace.logits) == y;
        let (loss, dlogits) = cross_entropy(&trace.logits, y);
        self.backward_from(&trace, &dlogits, Some(grads));
        (loss, correct)
    }

    pub(crate) fn from_parts(arch: ConvArchitecture, tensors: Vec<Vec<f64>>) -> Result<Self> {
        let mut net = Self::zeroed(arch)?;
        let expected: Vec<usize> = net.parameters().iter().map(|p| p.len()).collect();
        if tensors.len() != expected.len() {
            return Err(Error::shape(format!("{} tensors", expected.len()), tensors.len()));
        }
        for (i, (t, want)) in tensors.iter().zip(&expected).enumerate() {
            if t.len() != *want {
                return Err(Error::shape(format!("tensor {i} of length {want}"), t.len()));
            }
        }
        let mut it = tensors.into_iter();
        for c in &mut net.convs {
            c.weight = it.next().expect("counted");
            c.bias = it.next().expect("counted");
        }
        for d in &mut net.dense {
            d.weight = it.next().expect("counted");
            d.bias = it.next().expect("counted");
        }
        Ok(net)
    }
}

impl Classifier for SmallConvNet {
    fn input_shape(&self) -> Shape {
        self.arch.input
    }

    fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    fn logits(&self, x: &Image) -> Vec<f64> {
        self.forward(x).logits
    }
}

impl Differentiable for SmallConvNet {
    fn logits_with_pullback<'a>(&'a self, x: &Image) -> (Vec<f64>, Pullback<'a>) {
        let trace = self.forward(x);
        let logits = trace.logits.clone();
        (logits, Box::new(move |cot: &[f64]| self.backward_from(&trace, cot, None)))
    }
}
