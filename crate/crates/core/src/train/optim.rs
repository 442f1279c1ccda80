//! First-order optimizers over a flat parameter vector.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adamw,
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adamw => "adamw",
        })
    }
}

pub const SGD_MOMENTUM: f64 = 0.9;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimizer state; constant learning rate, no weight decay.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd {
        lr: f64,
        momentum: Vec<f64>,
        started: bool,
    },
    Adamw {
        lr: f64,
        m: Vec<f64>,
        v: Vec<f64>,
        t: i32,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, n: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd {
                lr,
                momentum: vec![0.0; n],
                started: false,
            },
            OptimizerKind::Adamw => Optimizer::Adamw {
                lr,
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            },
        }
    }

    /// One update in place. Results are rounded to f32-representable values
    /// so that checkpoints capture the parameters exactly.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), grads.len());
        match self {
            Optimizer::Sgd {
                lr,
                momentum,
                started,
            } => {
                for ((p, &g), buf) in params.iter_mut().zip(grads).zip(momentum.iter_mut()) {
                    *buf = if *started { SGD_MOMENTUM * *buf + g } else { g };
                    *p -= *lr * *buf;
                }
                *started = true;
            }
            Optimizer::Adamw { lr, m, v, t } => {
                *t += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(*t);
                let c2 = 1.0 - ADAM_BETA2.powi(*t);
                for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= *lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
        }
        for p in params.iter_mut() {
            *p = *p as f32 as f64;
        }
    }
}
