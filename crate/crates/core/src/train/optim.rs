use std::fmt;
use std::str::FromStr;

use crate::error::Error;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(Error::Config(format!("unknown optimizer {other:?}, expected sgd or adam"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
        })
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Per-parameter optimizer state. Entries line up with the store's tensors.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self { kind, learning_rate, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Update every trainable tensor that has a gradient. `grads[i]` belongs
    /// to store entry `i`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        self.step += 1;
        if self.m.len() < grads.len() {
            self.m.resize(grads.len(), Vec::new());
            self.v.resize(grads.len(), Vec::new());
        }
        let lr = self.learning_rate;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - ADAM_BETA1.powi(t), 1.0 - ADAM_BETA2.powi(t));
        for (i, entry) in store.tensors_mut().enumerate() {
            let Some(Some(g)) = grads.get(i) else { continue };
            if !entry.trainable {
                continue;
            }
            let p = entry.tensor.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, &gi) in p.iter_mut().zip(g.data()) {
                        *w = (*w as f64 - lr * gi as f64) as f32;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    if m.is_empty() {
                        m.resize(p.len(), 0.0);
                        v.resize(p.len(), 0.0);
                    }
                    for (((w, &gi), mi), vi) in p.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        let gi = gi as f64;
                        *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                        *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                        let update = lr * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
                        *w = (*w as f64 - update) as f32;
                    }
                }
            }
        }
    }
}
