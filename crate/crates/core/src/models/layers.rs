use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::tensor::{Shape, Tensor};

/// 2-D convolution over HWC tensors. Weights are laid out `[ky][kx][in][out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Vec<f64>,
    /// Empty when the layer has no bias.
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        use_bias: bool,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: vec![0.0; kernel * kernel * in_channels * out_channels],
            bias: if use_bias { vec![0.0; out_channels] } else { Vec::new() },
        }
    }

    /// He-normal initialisation.
    pub fn init(&mut self, rng: &mut impl Rng) {
        let fan_in = (self.kernel * self.kernel * self.in_channels) as f64;
        let std = (2.0 / fan_in).sqrt();
        for w in &mut self.weight {
            let z: f64 = StandardNormal.sample(rng);
            *w = std * z;
        }
    }

    pub fn output_shape(&self, input: Shape) -> Shape {
        let h = (input.height + 2 * self.padding - self.kernel) / self.stride + 1;
        let w = (input.width + 2 * self.padding - self.kernel) / self.stride + 1;
        Shape::new(h, w, self.out_channels)
    }

    #[inline]
    fn row(&self, ky: usize, kx: usize, i: usize) -> usize {
        ((ky * self.kernel + kx) * self.in_channels + i) * self.out_channels
    }

    pub fn forward(&self, input: &Tensor) -> Tensor {
        debug_assert_eq!(input.channels(), self.in_channels);
        let in_shape = input.shape();
        let out_shape = self.output_shape(in_shape);
        let mut out = Tensor::zeros(out_shape);
        let oc = self.out_channels;
        let src = input.as_slice();
        let dst = out.as_mut_slice();
        for oy in 0..out_shape.height {
            for ox in 0..out_shape.width {
                let o_start = (oy * out_shape.width + ox) * oc;
                let acc = &mut dst[o_start..o_start + oc];
                if !self.bias.is_empty() {
                    acc.copy_from_slice(&self.bias);
                }
                for ky in 0..self.kernel {
                    let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                    if iy < 0 || iy >= in_shape.height as isize {
                        continue;
                    }
                    for kx in 0..self.kernel {
                        let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                        if ix < 0 || ix >= in_shape.width as isize {
                            continue;
                        }
                        let i_start = (iy as usize * in_shape.width + ix as usize) * self.in_channels;
                        for i in 0..self.in_channels {
                            let v = src[i_start + i];
                            if v == 0.0 {
                                continue;
                            }
                            let r = self.row(ky, kx, i);
                            let w = &self.weight[r..r + oc];
                            for (a, wv) in acc.iter_mut().zip(w) {
                                *a += v * wv;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Propagates `dout` back to the input; accumulates parameter gradients
    /// into `grads = (dweight, dbias)` when given.
    pub fn backward(
        &self,
        input: &Tensor,
        dout: &Tensor,
        mut grads: Option<(&mut [f64], &mut [f64])>,
    ) -> Tensor {
        let in_shape = input.shape();
        let out_shape = dout.shape();
        let oc = self.out_channels;
        let mut dinput = Tensor::zeros(in_shape);
        let src = input.as_slice();
        let dsrc = dinput.as_mut_slice();
        let g = dout.as_slice();
        for oy in 0..out_shape.height {
            for ox in 0..out_shape.width {
                let o_start = (oy * out_shape.width + ox) * oc;
                let go = &g[o_start..o_start + oc];
                if go.iter().all(|v| *v == 0.0) {
                    continue;
                }
                if let Some((_, db)) = grads.as_mut() {
                    for (d, v) in db.iter_mut().zip(go) {
                        *d += v;
                    }
                }
                for ky in 0..self.kernel {
                    let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                    if iy < 0 || iy >= in_shape.height as isize {
                        continue;
                    }
                    for kx in 0..self.kernel {
                        let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                        if ix < 0 || ix >= in_shape.width as isize {
                            continue;
                        }
                        let i_start = (iy as usize * in_shape.width + ix as usize) * self.in_channels;
                        for i in 0..self.in_channels {
                            let r = self.row(ky, kx, i);
                            let w = &self.weight[r..r + oc];
                            dsrc[i_start + i] += w.iter().zip(go).map(|(a, b)| a * b).sum::<f64>();
                            if let Some((dw, _)) = grads.as_mut() {
                                let v = src[i_start + i];
                                if v != 0.0 {
                                    for (d, gv) in dw[r..r + oc].iter_mut().zip(go) {
                                        *d += v * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        dinput
    }
}

/// Fully connected layer with weights laid out `[in][out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    /// Empty when the layer has no bias.
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize, use_bias: bool) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: if use_bias { vec![0.0; outputs] } else { Vec::new() },
        }
    }

    pub fn init(&mut self, rng: &mut impl Rng) {
        let std = (2.0 / self.inputs as f64).sqrt();
        for w in &mut self.weight {
            let z: f64 = StandardNormal.sample(rng);
            *w = std * z;
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = if self.bias.is_empty() {
            vec![0.0; self.outputs]
        } else {
            self.bias.clone()
        };
        for (i, v) in x.iter().enumerate() {
            if *v == 0.0 {
                continue;
            }
            let w = &self.weight[i * self.outputs..(i + 1) * self.outputs];
            for (o, wv) in out.iter_mut().zip(w) {
                *o += v * wv;
            }
        }
        out
    }

    pub fn backward(
        &self,
        x: &[f64],
        dout: &[f64],
        mut grads: Option<(&mut [f64], &mut [f64])>,
    ) -> Vec<f64> {
        let mut dx = vec![0.0; self.inputs];
        for (i, d) in dx.iter_mut().enumerate() {
            let w = &self.weight[i * self.outputs..(i + 1) * self.outputs];
            *d = w.iter().zip(dout).map(|(a, b)| a * b).sum();
            if let Some((dw, _)) = grads.as_mut() {
                let v = x[i];
                if v != 0.0 {
                    for (g, o) in dw[i * self.outputs..(i + 1) * self.outputs].iter_mut().zip(dout) {
                        *g += v * o;
                    }
                }
            }
        }
        if let Some((_, db)) = grads {
            for (g, o) in db.iter_mut().zip(dout) {
                *g += o;
            }
        }
        dx
    }
}

pub(crate) fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Zeroes gradient entries where the ReLU output was not positive.
pub(crate) fn relu_backward(activation: &[f64], grad: &mut [f64]) {
    for (g, a) in grad.iter_mut().zip(activation) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}
