use serde::{Deserialize, Serialize};

use super::Params;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Lars,
}

impl std::str::FromStr for OptimizerKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(OptimizerKind::Adam),
            "lars" => Ok(OptimizerKind::Lars),
            other => Err(crate::Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

pub trait Optimizer {
    /// Updates `params` in place from `grads`, which must share its layout.
    fn step(&mut self, params: &mut dyn Params, grads: &dyn Params);
}

fn grad_buffers(grads: &dyn Params) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    grads.visit(&mut |_, _, v| out.push(v.to_vec()));
    out
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut dyn Params, grads: &dyn Params) {
        let g = grad_buffers(grads);
        if self.m.is_empty() {
            self.m = g.iter().map(|b| vec![0.0; b.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut idx = 0;
        params.visit_mut(&mut |_, p| {
            let (m, v, gb) = (&mut self.m[idx], &mut self.v[idx], &g[idx]);
            for i in 0..p.len() {
                let gi = gb[i] + self.weight_decay * p[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
            idx += 1;
        });
    }
}

/// Momentum SGD with a per-buffer trust ratio.
#[derive(Debug, Clone)]
pub struct Lars {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub trust_coefficient: f64,
    velocity: Vec<Vec<f64>>,
}

impl Lars {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            momentum: 0.9,
            weight_decay: 1e-6,
            trust_coefficient: 1e-3,
            velocity: Vec::new(),
        }
    }
}

impl Optimizer for Lars {
    fn step(&mut self, params: &mut dyn Params, grads: &dyn Params) {
        let g = grad_buffers(grads);
        if self.velocity.is_empty() {
            self.velocity = g.iter().map(|b| vec![0.0; b.len()]).collect();
        }
        let mut idx = 0;
        params.visit_mut(&mut |_, p| {
            let gb = &g[idx];
            let pn = p.iter().map(|x| x * x).sum::<f64>().sqrt();
            let gn = gb.iter().map(|x| x * x).sum::<f64>().sqrt();
            let trust = if pn > 0.0 && gn > 0.0 {
                self.trust_coefficient * pn / (gn + self.weight_decay * pn)
            } else {
                1.0
            };
            let vel = &mut self.velocity[idx];
            for i in 0..p.len() {
                let gi = gb[i] + self.weight_decay * p[i];
                vel[i] = self.momentum * vel[i] + trust * self.lr * gi;
                p[i] -= vel[i];
            }
            idx += 1;
        });
    }
}

pub fn build_optimizer(kind: OptimizerKind, lr: f64) -> Box<dyn Optimizer + Send> {
    match kind {
        OptimizerKind::Adam => Box::new(Adam::new(lr)),
        OptimizerKind::Lars => Box::new(Lars::new(lr)),
    }
}
