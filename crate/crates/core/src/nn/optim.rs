//! Adam and AdamW with bias correction.
//!
//! ```text
//! θ ← θ − lr·wd·θ                      (AdamW only, decoupled)
//! m ← β₁·m + (1 − β₁)·g
//! v ← β₂·v + (1 − β₂)·g²
//! θ ← θ − lr · (m / (1 − β₁ᵗ)) / (√(v / (1 − β₂ᵗ)) + ε)
//! ```

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    AdamW,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Decoupled decay rate; ignored by plain Adam.
    pub weight_decay: f64,
    pub first: BTreeMap<String, Vec<f64>>,
    pub second: BTreeMap<String, Vec<f64>>,
    pub step_count: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            kind,
            learning_rate,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
            step_count: 0,
        }
    }

    /// Applies one update to every parameter that requires a gradient.
    /// Fails before touching anything if any such parameter has no gradient.
    pub fn step(&mut self, params: &mut ParamSet<f64>) -> Result<()> {
        if let Some(p) = params
            .iter()
            .find(|p| p.tensor.requires_grad() && p.tensor.grad().is_none())
        {
            return Err(Error::Training(format!(
                "missing gradient for parameter `{}`",
                p.name
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let (b1, b2) = self.betas;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let lr = self.learning_rate;
        let decay = match self.kind {
            OptimizerKind::AdamW => lr * self.weight_decay,
            OptimizerKind::Adam => 0.0,
        };
        for p in params.iter_mut().filter(|p| p.tensor.requires_grad()) {
            let n = p.tensor.len();
            let m = self
                .first
                .entry(p.name.clone())
                .or_insert_with(|| vec![0.0; n]);
            let v = self
                .second
                .entry(p.name.clone())
                .or_insert_with(|| vec![0.0; n]);
            if m.len() != n || v.len() != n {
                return Err(Error::Training(format!(
                    "moment shape for `{}` does not match the parameter",
                    p.name
                )));
            }
            let grad = p.tensor.grad().expect("checked above").to_vec();
            for (i, theta) in p.tensor.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                *theta -= decay * *theta;
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                *theta -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
