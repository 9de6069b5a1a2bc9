use ndarray::{Array1, Array2, Axis};

use super::{dropout_mask, relu, visit_child, visit_child_mut, Linear, Params};
use crate::error::{Error, Result};

/// `z = W2 relu(W1 h)`, one hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub hidden: Linear,
    pub output: Linear,
}

pub struct ProjectionCache {
    h: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

impl ProjectionHead {
    pub fn new<R: rand::Rng + ?Sized>(
        input: usize,
        hidden: usize,
        output: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            hidden: Linear::new(input, hidden, bias, rng),
            output: Linear::new(hidden, output, bias, rng),
        }
    }

    /// Interprets a width list from [`super::head_dims_for`]: three entries are
    /// `[in, hidden, out]`, two are `[hidden, out]` with `in = feature_dim`.
    pub fn from_dims<R: rand::Rng + ?Sized>(
        feature_dim: usize,
        dims: &[usize],
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let (input, hidden, output) = match *dims {
            [hidden, output] => (feature_dim, hidden, output),
            [input, hidden, output] => (input, hidden, output),
            _ => {
                return Err(Error::Config(format!(
                    "projection head needs 2 or 3 widths, got {dims:?}"
                )))
            }
        };
        if input != feature_dim {
            return Err(Error::ShapeMismatch {
                expected: format!("head input {feature_dim}"),
                got: format!("{input}"),
            });
        }
        Ok(Self::new(input, hidden, output, bias, rng))
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.output.output_dim()
    }

    pub fn has_bias(&self) -> bool {
        self.hidden.bias.is_some()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            hidden: self.hidden.zeros_like(),
            output: self.output.zeros_like(),
        }
    }

    pub fn project(&self, h: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_train(h)?.0)
    }

    pub fn forward_train(&self, h: &Array2<f64>) -> Result<(Array2<f64>, ProjectionCache)> {
        let pre = self.hidden.forward(h)?;
        let act = relu(&pre);
        let z = self.output.forward(&act)?;
        Ok((
            z,
            ProjectionCache {
                h: h.clone(),
                pre,
                act,
            },
        ))
    }

    /// Returns (parameter gradients, gradient w.r.t. `h`).
    pub fn backward(&self, cache: &ProjectionCache, dz: &Array2<f64>) -> (ProjectionHead, Array2<f64>) {
        let (g_out, mut dact) = self.output.backward(&cache.act, dz);
        ndarray::Zip::from(&mut dact)
            .and(&cache.pre)
            .for_each(|d, &p| if p <= 0.0 { *d = 0.0 });
        let (g_hidden, dh) = self.hidden.backward(&cache.h, &dact);
        (
            ProjectionHead {
                hidden: g_hidden,
                output: g_out,
            },
            dh,
        )
    }
}

impl Params for ProjectionHead {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_child("hidden", &self.hidden, f);
        visit_child("output", &self.output, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        visit_child_mut("hidden", &mut self.hidden, f);
        visit_child_mut("output", &mut self.output, f);
    }
}

/// Dropout followed by a linear layer to class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub dropout_rate: f64,
    pub linear: Linear,
}

impl ClassifierHead {
    pub fn new<R: rand::Rng + ?Sized>(feature_dim: usize, n_classes: usize, dropout_rate: f64, rng: &mut R) -> Self {
        let mut linear = Linear::new(feature_dim, n_classes, true, rng);
        // logits start small so initial predictions are near uniform
        linear.weight.mapv_inplace(|w| w * 0.1);
        Self {
            dropout_rate,
            linear,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.linear.output_dim()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            dropout_rate: self.dropout_rate,
            linear: self.linear.zeros_like(),
        }
    }

    /// Eval mode: dropout inactive.
    pub fn logits(&self, h: &Array2<f64>) -> Result<Array2<f64>> {
        self.linear.forward(h)
    }

    /// Train mode. Returns logits and the dropout mask used.
    pub fn forward_train<R: rand::Rng + ?Sized>(
        &self,
        h: &Array2<f64>,
        rng: &mut R,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let mask = if self.dropout_rate > 0.0 {
            dropout_mask(h.dim(), self.dropout_rate, rng)
        } else {
            Array2::ones(h.dim())
        };
        let dropped = h * &mask;
        Ok((self.linear.forward(&dropped)?, mask))
    }

    /// Returns (parameter gradients, gradient w.r.t. `h`).
    pub fn backward(&self, h: &Array2<f64>, mask: &Array2<f64>, dlogits: &Array2<f64>) -> (ClassifierHead, Array2<f64>) {
        let dropped = h * mask;
        let (g, dx) = self.linear.backward(&dropped, dlogits);
        (
            ClassifierHead {
                dropout_rate: self.dropout_rate,
                linear: g,
            },
            dx * mask,
        )
    }
}

impl Params for ClassifierHead {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_child("linear", &self.linear, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        visit_child_mut("linear", &mut self.linear, f);
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

/// Mean cross-entropy and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let p = softmax(logits);
    let b = labels.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = p.clone();
    for (i, &y) in labels.iter().enumerate() {
        loss -= p[[i, y]].max(1e-300).ln();
        grad[[i, y]] -= 1.0;
    }
    (loss / b, grad / b)
}

/// Mean over dimensions of the per-dimension standard deviation across rows.
/// Near zero when all embeddings coincide.
pub fn embedding_spread(z: &Array2<f64>) -> f64 {
    if z.nrows() < 2 {
        return f64::NAN;
    }
    let std: Array1<f64> = z.std_axis(Axis(0), 0.0);
    std.mean().unwrap_or(0.0)
}
