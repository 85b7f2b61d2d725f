//! First-order optimizers over the trainable tensors of a [`ParamStore`].

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::stllm::{Gradients, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Momentum,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: i32,
    first: Vec<(ParamId, Array2<f64>)>,
    second: Vec<Array2<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, store: &ParamStore) -> Self {
        let first: Vec<(ParamId, Array2<f64>)> =
            store.trainable_ids().into_iter().map(|id| (id, Array2::zeros(store.get(id).dim()))).collect();
        let second = match kind {
            OptimizerKind::Adam => first.iter().map(|(_, m)| m.clone()).collect(),
            OptimizerKind::Momentum => Vec::new(),
        };
        Self { kind, lr, step: 0, first, second }
    }

    /// Applies one update; frozen tensors are never written.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let lr = self.lr;
        match self.kind {
            OptimizerKind::Adam => {
                let c1 = 1.0 - BETA1.powi(self.step);
                let c2 = 1.0 - BETA2.powi(self.step);
                for ((id, m), v) in self.first.iter_mut().zip(&mut self.second) {
                    let Some(g) = grads.get(*id) else { continue };
                    m.zip_mut_with(g, |m, &g| *m = BETA1 * *m + (1.0 - BETA1) * g);
                    v.zip_mut_with(g, |v, &g| *v = BETA2 * *v + (1.0 - BETA2) * g * g);
                    let p = store.get_mut(*id);
                    ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                        *p -= lr * (m / c1) / ((v / c2).sqrt() + ADAM_EPS);
                    });
                }
            }
            OptimizerKind::Momentum => {
                for (id, vel) in &mut self.first {
                    let Some(g) = grads.get(*id) else { continue };
                    vel.zip_mut_with(g, |v, &g| *v = MOMENTUM * *v + g);
                    store.get_mut(*id).scaled_add(-lr, vel);
                }
            }
        }
    }
}
