use std::sync::Arc;

use crate::error::{Error, Result};
use crate::models::{Classifier, Differentiable, Pullback};
use crate::tensor::{Image, Shape};

/// Soft ensemble whose logits are the arithmetic mean of its members' logits.
#[derive(Clone)]
pub struct Ensemble {
    members: Vec<Arc<dyn Differentiable>>,
}

impl std::fmt::Debug for Ensemble {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Ensemble").field("members", &self.members.len()).finish()
    }
}

impl Ensemble {
    pub fn new(members: Vec<Arc<dyn Differentiable>>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::Empty("ensemble needs at least one member".into()))?;
        let (classes, shape) = (first.num_classes(), first.input_shape());
        for m in &members[1..] {
            if m.num_classes() != classes {
                return Err(Error::shape(format!("{classes} classes"), m.num_classes()));
            }
            if m.input_shape() != shape {
                return Err(Error::shape(shape, m.input_shape()));
            }
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[Arc<dyn Differentiable>] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Mean of the member logits at `x`.
pub fn ensemble_logits(ens: &Ensemble, x: &Image) -> Result<Vec<f64>> {
    x.ensure_shape(ens.input_shape())?;
    let k = ens.members.len() as f64;
    let mut mean = vec![0.0; ens.num_classes()];
    for m in &ens.members {
        let z = m.logits(x);
        if z.len() != mean.len() {
            return Err(Error::shape(format!("{} logits", mean.len()), z.len()));
        }
        for (a, b) in mean.iter_mut().zip(&z) {
            *a += b;
        }
    }
    mean.iter_mut().for_each(|v| *v /= k);
    Ok(mean)
}

impl Classifier for Ensemble {
    fn input_shape(&self) -> Shape {
        self.members[0].input_shape()
    }

    fn num_classes(&self) -> usize {
        self.members[0].num_classes()
    }

    fn logits(&self, x: &Image) -> Vec<f64> {
        ensemble_logits(self, x).expect("members validated at construction")
    }
}

impl Differentiable for Ensemble {
    fn logits_with_pullback<'a>(&'a self, x: &Image) -> (Vec<f64>, Pullback<'a>) {
        let k = self.members.len() as f64;
        let mut mean = vec![0.0; self.num_classes()];
        let mut pullbacks = Vec::with_capacity(self.members.len());
        for m in &self.members {
            let (z, pb) = m.logits_with_pullback(x);
            for (a, b) in mean.iter_mut().zip(&z) {
                *a += b / k;
            }
            pullbacks.push(pb);
        }
        let shape = self.input_shape();
        let pullback = move |cot: &[f64]| {
            let scaled: Vec<f64> = cot.iter().map(|c| c / k).collect();
            let mut g = Image::zeros(shape);
            for pb in pullbacks {
                g.add_assign(&pb(&scaled));
            }
            g
        };
        (mean, Box::new(pullback))
    }
}
