use crate::error::{Error, Result};
use crate::models::{Classifier, Differentiable, Pullback};
use crate::tensor::{Image, Shape};

/// Always predicts one class; its input gradient is identically zero.
#[derive(Debug, Clone)]
pub struct ConstantClassifier {
    shape: Shape,
    num_classes: usize,
    label: usize,
}

impl ConstantClassifier {
    pub fn new(shape: Shape, num_classes: usize, label: usize) -> Self {
        assert!(label < num_classes, "label out of range");
        Self {
            shape,
            num_classes,
            label,
        }
    }
}

impl Classifier for ConstantClassifier {
    fn input_shape(&self) -> Shape {
        self.shape
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn logits(&self, _x: &Image) -> Vec<f64> {
        let mut z = vec![0.0; self.num_classes];
        z[self.label] = 1.0;
        z
    }

    fn label(&self, _x: &Image) -> usize {
        self.label
    }
}

impl Differentiable for ConstantClassifier {
    fn logits_with_pullback<'a>(&'a self, x: &Image) -> (Vec<f64>, Pullback<'a>) {
        let shape = self.shape;
        (self.logits(x), Box::new(move |_| Image::zeros(shape)))
    }
}

/// Multi-class affine classifier `z = W·vec(x) + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    shape: Shape,
    rows: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl LinearClassifier {
    pub fn new(shape: Shape, rows: Vec<Vec<f64>>, bias: Vec<f64>) -> Result<Self> {
        if rows.is_empty() || rows.len() != bias.len() {
            return Err(Error::shape(format!("{} bias terms", rows.len()), bias.len()));
        }
        if let Some(row) = rows.iter().find(|r| r.len() != shape.len()) {
            return Err(Error::shape(shape.len(), row.len()));
        }
        Ok(Self { shape, rows, bias })
    }

    /// Two-class classifier: class 0 iff `w·x + b > 0`.
    pub fn binary(shape: Shape, w: Vec<f64>, b: f64) -> Result<Self> {
        let zeros = vec![0.0; w.len()];
        Self::new(shape, vec![w, zeros], vec![b, 0.0])
    }

    /// Signed L2 distance from `x` to the decision boundary of a binary
    /// classifier; positive on the class-0 side.
    pub fn signed_margin(&self, x: &Image) -> f64 {
        let w: Vec<f64> = self.rows[0].iter().zip(&self.rows[1]).map(|(a, b)| a - b).collect();
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        let score: f64 =
            w.iter().zip(x.as_slice()).map(|(a, b)| a * b).sum::<f64>() + self.bias[0] - self.bias[1];
        score / norm
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

impl Classifier for LinearClassifier {
    fn input_shape(&self) -> Shape {
        self.shape
    }

    fn num_classes(&self) -> usize {
        self.rows.len()
    }

    fn logits(&self, x: &Image) -> Vec<f64> {
        let xs = x.as_slice();
        self.rows
            .iter()
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(xs).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    fn label(&self, x: &Image) -> usize {
        let z = self.logits(x);
        // ties go to the later class, so a binary boundary point is class 1
        let mut best = 0;
        for (i, v) in z.iter().enumerate().skip(1) {
            if *v >= z[best] {
                best = i;
            }
        }
        best
    }
}

impl Differentiable for LinearClassifier {
    fn logits_with_pullback<'a>(&'a self, x: &Image) -> (Vec<f64>, Pullback<'a>) {
        let logits = self.logits(x);
        let pullback = move |cot: &[f64]| {
            let mut g = Image::zeros(self.shape);
            for (row, c) in self.rows.iter().zip(cot) {
                for (gi, w) in g.as_mut_slice().iter_mut().zip(row) {
                    *gi += c * w;
                }
            }
            g
        };
        (logits, Box::new(pullback))
    }
}
