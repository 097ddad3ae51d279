use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::Param;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd {
        lr: f64,
        momentum: f64,
        #[serde(default)]
        weight_decay: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        #[serde(default = "adam_eps")]
        eps: f64,
    },
}

fn adam_eps() -> f64 {
    1e-8
}

/// First-order optimizer. State is matched to parameters by position, so the
/// same network must be passed on every step.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    first: Vec<ArrayD<f64>>,
    second: Vec<ArrayD<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        match self.kind {
            OptimizerKind::Sgd { lr, .. } | OptimizerKind::Adam { lr, .. } => lr,
        }
    }

    pub fn set_lr(&mut self, new_lr: f64) {
        match &mut self.kind {
            OptimizerKind::Sgd { lr, .. } | OptimizerKind::Adam { lr, .. } => *lr = new_lr,
        }
    }

    /// Applies one update from the accumulated gradients. Gradients are left
    /// untouched.
    pub fn step(&mut self, params: Vec<&mut Param>) {
        let params: Vec<&mut Param> = params.into_iter().filter(|p| p.trainable).collect();
        if self.first.len() != params.len() {
            self.first = params.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect();
            self.second = self.first.clone();
        }
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd {
                lr,
                momentum,
                weight_decay,
            } => {
                for (p, v) in params.into_iter().zip(self.first.iter_mut()) {
                    ndarray::Zip::from(&mut p.value)
                        .and(&p.grad)
                        .and(v)
                        .for_each(|w, &g, v| {
                            *v = momentum * *v + g + weight_decay * *w;
                            *w -= lr * *v;
                        });
                }
            }
            OptimizerKind::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for ((p, m), v) in params
                    .into_iter()
                    .zip(self.first.iter_mut())
                    .zip(self.second.iter_mut())
                {
                    ndarray::Zip::from(&mut p.value)
                        .and(&p.grad)
                        .and(m)
                        .and(v)
                        .for_each(|w, &g, m, v| {
                            *m = beta1 * *m + (1.0 - beta1) * g;
                            *v = beta2 * *v + (1.0 - beta2) * g * g;
                            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                        });
                }
            }
        }
    }
}
