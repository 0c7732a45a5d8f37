//! SGD-with-momentum and Adam. Updates apply to non-frozen parameters only;
//! a non-finite gradient anywhere aborts the whole step before any value
//! changes.

use serde::{Deserialize, Serialize};

use super::{Graph, NodeId, NodeKind};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd {
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(flatten)]
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam {
                beta1: default_beta1(),
                beta2: default_beta2(),
                eps: default_eps(),
            },
            lr: 1e-3,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug)]
struct ParamState<T> {
    m: Vec<T>,
    v: Vec<T>,
}

#[derive(Debug)]
pub struct Optimizer<T: Scalar> {
    cfg: OptimizerConfig,
    state: Vec<Option<ParamState<T>>>,
    step_count: u64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Optimizer {
            cfg,
            state: Vec::new(),
            step_count: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// Apply one update from the gradients currently in the graph.
    pub fn step(&mut self, graph: &mut Graph<T>) -> Result<()> {
        let params: Vec<NodeId> = graph
            .param_ids()
            .into_iter()
            .filter(|&id| matches!(graph.node(id).kind, NodeKind::Param { frozen: false }))
            .collect();

        for &id in &params {
            if graph.grad(id).data().iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient(graph.node(id).name.clone()));
            }
        }

        if self.state.len() < graph.len() {
            self.state.resize_with(graph.len(), || None);
        }
        self.step_count += 1;

        let lr = T::from_f64(self.cfg.lr);
        let wd = T::from_f64(self.cfg.weight_decay);
        for &id in &params {
            let grad: Vec<T> = graph.grad(id).data().to_vec();
            let slot = &mut self.state[id.0];
            match self.cfg.kind {
                OptimizerKind::Sgd { momentum } => {
                    let mu = T::from_f64(momentum);
                    let value = graph.value_mut(id).data_mut();
                    if momentum == 0.0 {
                        for (w, &g) in value.iter_mut().zip(&grad) {
                            let g = g + wd * *w;
                            *w = *w - lr * g;
                        }
                    } else {
                        let st = slot.get_or_insert_with(|| ParamState {
                            m: vec![T::zero(); grad.len()],
                            v: Vec::new(),
                        });
                        for ((w, &g), m) in value.iter_mut().zip(&grad).zip(st.m.iter_mut()) {
                            let g = g + wd * *w;
                            *m = mu * *m + g;
                            *w = *w - lr * *m;
                        }
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let b1 = T::from_f64(beta1);
                    let b2 = T::from_f64(beta2);
                    let epsv = T::from_f64(eps);
                    let bias1 = T::from_f64(1.0 - beta1.powi(self.step_count as i32));
                    let bias2 = T::from_f64(1.0 - beta2.powi(self.step_count as i32));
                    let st = slot.get_or_insert_with(|| ParamState {
                        m: vec![T::zero(); grad.len()],
                        v: vec![T::zero(); grad.len()],
                    });
                    let value = graph.value_mut(id).data_mut();
                    for (k, (w, &g)) in value.iter_mut().zip(&grad).enumerate() {
                        let g = g + wd * *w;
                        st.m[k] = b1 * st.m[k] + (T::one() - b1) * g;
                        st.v[k] = b2 * st.v[k] + (T::one() - b2) * g * g;
                        let mhat = st.m[k] / bias1;
                        let vhat = st.v[k] / bias2;
                        *w = *w - lr * mhat / (vhat.sqrt() + epsv);
                    }
                }
            }
        }
        Ok(())
    }
}
