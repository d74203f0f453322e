//! Baseline optimizers: SGD, heavy-ball momentum, Adam, AdamW, Polyak
//! averaging over SGD, and Lookahead over SGD.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Adam,
    Adamw,
    PolyakSgd,
    LookaheadSgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sgd" => Ok(Self::Sgd),
            "momentum" => Ok(Self::Momentum),
            "adam" => Ok(Self::Adam),
            "adamw" => Ok(Self::Adamw),
            "polyak_sgd" | "polyak" => Ok(Self::PolyakSgd),
            "lookahead_sgd" | "lookahead" => Ok(Self::LookaheadSgd),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub beta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, AdamW only.
    pub wd: f64,
    pub lookahead_k: u64,
    pub lookahead_alpha: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            beta: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            wd: 0.0,
            lookahead_k: 5,
            lookahead_alpha: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Slots {
    None,
    Velocity(Vec<f64>),
    Moments { m: Vec<f64>, v: Vec<f64> },
    Average(Vec<f64>),
    Slow(Option<Vec<f64>>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    kind: OptimizerKind,
    pub lr: f64,
    pub hyper: Hyper,
    slots: Slots,
    step_count: u64,
}

/// `slow + alpha * (fast - slow)`.
pub fn lookahead_sync(slow: f64, fast: f64, alpha: f64) -> f64 {
    slow + alpha * (fast - slow)
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64, hyper: Hyper, n_params: usize) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        if kind == OptimizerKind::LookaheadSgd && hyper.lookahead_k == 0 {
            return Err(Error::Config("lookahead_k must be at least 1".into()));
        }
        let slots = match kind {
            OptimizerKind::Sgd => Slots::None,
            OptimizerKind::Momentum => Slots::Velocity(vec![0.0; n_params]),
            OptimizerKind::Adam | OptimizerKind::Adamw => Slots::Moments {
                m: vec![0.0; n_params],
                v: vec![0.0; n_params],
            },
            OptimizerKind::PolyakSgd => Slots::Average(vec![0.0; n_params]),
            OptimizerKind::LookaheadSgd => Slots::Slow(None),
        };
        Ok(Self {
            kind,
            lr,
            hyper,
            slots,
            step_count: 0,
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update of `params` in place along gradient `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != grad.len() {
            return Err(Error::LengthMismatch {
                expected: params.len(),
                got: grad.len(),
            });
        }
        let step = self.step_count + 1;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteStep {
                step,
                context: "gradient".into(),
            });
        }
        let lr = self.lr;
        let h = self.hyper;
        match &mut self.slots {
            Slots::None => sgd(params, grad, lr),
            Slots::Velocity(v) => {
                for ((p, g), vi) in params.iter_mut().zip(grad).zip(v.iter_mut()) {
                    *vi = h.beta * *vi + g;
                    *p -= lr * *vi;
                }
            }
            Slots::Moments { m, v } => {
                if self.kind == OptimizerKind::Adamw {
                    let shrink = 1.0 - lr * h.wd;
                    params.iter_mut().for_each(|p| *p *= shrink);
                }
                let t = step as i32;
                let c1 = 1.0 - h.beta1.powi(t);
                let c2 = 1.0 - h.beta2.powi(t);
                for (i, (p, g)) in params.iter_mut().zip(grad).enumerate() {
                    m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
                    v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
                    let m_hat = m[i] / c1;
                    let v_hat = v[i] / c2;
                    *p -= lr * m_hat / (v_hat.sqrt() + h.eps);
                }
            }
            Slots::Average(avg) => {
                sgd(params, grad, lr);
                let t = step as f64;
                for (a, p) in avg.iter_mut().zip(params.iter()) {
                    *a += (p - *a) / t;
                }
            }
            Slots::Slow(slow) => {
                let slow = slow.get_or_insert_with(|| params.to_vec());
                sgd(params, grad, lr);
                if step % h.lookahead_k == 0 {
                    for (s, p) in slow.iter_mut().zip(params.iter_mut()) {
                        *s = lookahead_sync(*s, *p, h.lookahead_alpha);
                        *p = *s;
                    }
                }
            }
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFiniteStep {
                step,
                context: format!("{:?} update", self.kind),
            });
        }
        self.step_count = step;
        Ok(())
    }

    /// Running mean of every post-step iterate (Polyak averaging).
    pub fn polyak_average(&self) -> Result<&[f64]> {
        match &self.slots {
            Slots::Average(avg) if self.step_count > 0 => Ok(avg),
            Slots::Average(_) => Err(Error::Empty("polyak average before the first step")),
            _ => Err(Error::Contract(format!(
                "{:?} does not keep an iterate average",
                self.kind
            ))),
        }
    }

    /// Parameters to evaluate: the Polyak average when kept, else `params`.
    pub fn eval_params<'a>(&'a self, params: &'a [f64]) -> &'a [f64] {
        match &self.slots {
            Slots::Average(avg) if self.step_count > 0 => avg,
            _ => params,
        }
    }
}

fn sgd(params: &mut [f64], grad: &[f64], lr: f64) {
    for (p, g) in params.iter_mut().zip(grad) {
        *p -= lr * g;
    }
}
