//! Parameter update rules: Adam (default) and plain SGD.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Which update rule a training run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<OptimizerKind> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::Config(format!("unknown optimizer {:?}", other))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

/// Adaptive-moment state for one fixed parameter list. Parameters are
/// identified by their position in the slice passed to [`Optimizer::step`],
/// so the caller must pass the same tensors in the same order every step.
#[derive(Debug)]
struct AdamState {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    /// Per-parameter step counts (a parameter absent from a step — e.g. an
    /// owner not in the batch — keeps its bias correction honest this way).
    t: Vec<u64>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// An update rule plus its state.
#[derive(Debug)]
pub struct Optimizer {
    pub learning_rate: f64,
    rule: Rule,
}

#[derive(Debug)]
enum Rule {
    Sgd,
    Adam(AdamState),
}

impl Optimizer {
    pub fn sgd(learning_rate: f64) -> Result<Optimizer> {
        check_lr(learning_rate)?;
        Ok(Optimizer { learning_rate, rule: Rule::Sgd })
    }

    /// Adam with the standard moment constants β₁ = 0.9, β₂ = 0.999,
    /// ε = 1e-8.
    pub fn adam(learning_rate: f64) -> Result<Optimizer> {
        check_lr(learning_rate)?;
        Ok(Optimizer {
            learning_rate,
            rule: Rule::Adam(AdamState {
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-8,
                t: Vec::new(),
                m: Vec::new(),
                v: Vec::new(),
            }),
        })
    }

    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Optimizer> {
        match kind {
            OptimizerKind::Adam => Optimizer::adam(learning_rate),
            OptimizerKind::Sgd => Optimizer::sgd(learning_rate),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self.rule {
            Rule::Sgd => OptimizerKind::Sgd,
            Rule::Adam(_) => OptimizerKind::Adam,
        }
    }

    /// Apply one update to every parameter that accumulated a gradient.
    /// A parameter whose gradient is absent or identically zero this step —
    /// e.g. the position distribution of an owner outside the current batch —
    /// is skipped without disturbing its moments (lazy sparse update).
    pub fn step(&mut self, params: &[Tensor]) -> Result<()> {
        fn live_grad(p: &Tensor) -> Option<Vec<f64>> {
            p.grad().filter(|g| g.iter().any(|&x| x != 0.0))
        }
        match &mut self.rule {
            Rule::Sgd => {
                for p in params {
                    if let Some(g) = live_grad(p) {
                        let lr = self.learning_rate;
                        p.update_data(|data| {
                            for (d, gi) in data.iter_mut().zip(&g) {
                                *d -= lr * gi;
                            }
                        });
                    }
                }
            }
            Rule::Adam(state) => {
                if state.m.len() < params.len() {
                    for p in &params[state.m.len()..] {
                        state.t.push(0);
                        state.m.push(vec![0.0; p.numel()]);
                        state.v.push(vec![0.0; p.numel()]);
                    }
                }
                for (i, p) in params.iter().enumerate() {
                    if state.m[i].len() != p.numel() {
                        return Err(Error::Dim(format!(
                            "optimizer: parameter {} changed size from {} to {}",
                            i,
                            state.m[i].len(),
                            p.numel()
                        )));
                    }
                    let Some(g) = live_grad(p) else { continue };
                    state.t[i] += 1;
                    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
                    let bc1 = 1.0 - b1.powi(state.t[i] as i32);
                    let bc2 = 1.0 - b2.powi(state.t[i] as i32);
                    let (m, v) = (&mut state.m[i], &mut state.v[i]);
                    let lr = self.learning_rate;
                    p.update_data(|data| {
                        for (((d, gi), mi), vi) in
                            data.iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut())
                        {
                            *mi = b1 * *mi + (1.0 - b1) * gi;
                            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                            let m_hat = *mi / bc1;
                            let v_hat = *vi / bc2;
                            *d -= lr * m_hat / (v_hat.sqrt() + eps);
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

fn check_lr(learning_rate: f64) -> Result<()> {
    if !(learning_rate.is_finite() && learning_rate > 0.0) {
        return Err(Error::Config(format!(
            "learning rate must be positive and finite, got {}",
            learning_rate
        )));
    }
    Ok(())
}
