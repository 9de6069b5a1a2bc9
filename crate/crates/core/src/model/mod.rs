//! Encoder `f`, projection head `g`, and the downstream classifier head.
//!
//! All arithmetic is `f64`. Layers expose explicit forward/backward passes;
//! gradients are returned in a value of the same type as the layer (a
//! "gradient twin") so optimizers can walk parameters and gradients in
//! lockstep through [`Params`].

mod checkpoint;
mod encoder;
mod heads;
mod optim;

use ndarray::{Array1, Array2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{Checkpoint, HeadState, MetricRecord, RngState, CHECKPOINT_VERSION};
pub use encoder::{
    head_dims_for, images_to_batch, ConvEncoder, EncoderAdapter, EncoderCache, EncoderNet,
    LinearEncoder, WeightsSource,
};
pub use heads::{
    embedding_spread, softmax, softmax_cross_entropy, ClassifierHead, ProjectionCache, ProjectionHead,
};
pub use optim::{build_optimizer, Adam, Lars, Optimizer, OptimizerKind};

/// Visits named parameter buffers in a fixed order.
pub trait Params {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, v| n += v.len());
        n
    }

    /// Flattened copy of every parameter, in visit order.
    fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |_, _, v| out.extend_from_slice(v));
        out
    }

    fn set_zero(&mut self) {
        self.visit_mut(&mut |_, v| v.iter_mut().for_each(|x| *x = 0.0));
    }

    /// `self += other`, parameter by parameter.
    fn accumulate(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let src = other.flat();
        let mut i = 0;
        self.visit_mut(&mut |_, v| {
            for x in v.iter_mut() {
                *x += src[i];
                i += 1;
            }
        });
    }

    fn scale(&mut self, s: f64) {
        self.visit_mut(&mut |_, v| v.iter_mut().for_each(|x| *x *= s));
    }
}

impl<T: Params + ?Sized> Params for &mut T {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        (**self).visit(f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        (**self).visit_mut(f)
    }
}

/// Two modules trained jointly, e.g. encoder and head under one optimizer.
impl<A: Params, B: Params> Params for (A, B) {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_child("0", &self.0, f);
        visit_child("1", &self.1, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        visit_child_mut("0", &mut self.0, f);
        visit_child_mut("1", &mut self.1, f);
    }
}

fn normal<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Dense layer `y = x W^T + b` over row-major batches.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// (out, in)
    pub weight: Array2<f64>,
    pub bias: Option<Array1<f64>>,
}

impl Linear {
    /// He-normal init for rectifier networks.
    pub fn new<R: rand::Rng + ?Sized>(input: usize, output: usize, bias: bool, rng: &mut R) -> Self {
        let std = (2.0 / input as f64).sqrt();
        let weight = Array2::from_shape_fn((output, input), |_| normal(rng) * std);
        Self {
            weight,
            bias: bias.then(|| Array1::zeros(output)),
        }
    }

    pub fn from_weights(weight: Array2<f64>, bias: Option<Array1<f64>>) -> Self {
        Self { weight, bias }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: self.bias.as_ref().map(|b| Array1::zeros(b.len())),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("B x {}", self.input_dim()),
                got: format!("{} x {}", x.nrows(), x.ncols()),
            });
        }
        let mut y = x.dot(&self.weight.t());
        if let Some(b) = &self.bias {
            y += b;
        }
        Ok(y)
    }

    /// Returns (parameter gradients, input gradient).
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>) -> (Linear, Array2<f64>) {
        let grad = Linear {
            weight: dy.t().dot(x).as_standard_layout().into_owned(),
            bias: self.bias.as_ref().map(|_| dy.sum_axis(Axis(0))),
        };
        (grad, dy.dot(&self.weight))
    }
}

impl Params for Linear {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f("weight", self.weight.shape(), self.weight.as_slice().expect("standard layout"));
        if let Some(b) = &self.bias {
            f("bias", b.shape(), b.as_slice().expect("standard layout"));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("weight", self.weight.as_slice_mut().expect("standard layout"));
        if let Some(b) = &mut self.bias {
            f("bias", b.as_slice_mut().expect("standard layout"));
        }
    }
}

/// Visits a child module with a name prefix.
pub(crate) fn visit_child(
    prefix: &str,
    child: &dyn Params,
    f: &mut dyn FnMut(&str, &[usize], &[f64]),
) {
    child.visit(&mut |n, s, v| f(&format!("{prefix}.{n}"), s, v));
}

pub(crate) fn visit_child_mut(
    prefix: &str,
    child: &mut dyn Params,
    f: &mut dyn FnMut(&str, &mut [f64]),
) {
    child.visit_mut(&mut |n, v| f(&format!("{prefix}.{n}"), v));
}

pub(crate) fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Inverted dropout mask: kept units scaled by `1 / (1 - rate)`.
pub(crate) fn dropout_mask<R: rand::Rng + ?Sized>(
    shape: (usize, usize),
    rate: f64,
    rng: &mut R,
) -> Array2<f64> {
    let keep = 1.0 - rate;
    Array2::from_shape_fn(shape, |_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
}

/// SHA-256 over parameter names, shapes and little-endian values.
pub fn params_hash(p: &dyn Params) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    p.visit(&mut |name, shape, v| {
        h.update(name.as_bytes());
        for d in shape {
            h.update((*d as u64).to_le_bytes());
        }
        for x in v {
            h.update(x.to_le_bytes());
        }
    });
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}
