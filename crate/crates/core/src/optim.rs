//! Adam optimizer over a [`ParamStore`].

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter array; frozen arrays keep empty moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = |id| {
            if store.entry(id).frozen {
                Array2::zeros((0, 0))
            } else {
                Array2::zeros(store.get(id).dim())
            }
        };
        Self {
            config,
            m: store.ids().map(zeros).collect(),
            v: store.ids().map(zeros).collect(),
            t: 0,
        }
    }

    /// One update of every trainable array. Missing gradients count as zero.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let ids: Vec<_> = store.trainable().collect();
        for id in ids {
            let i = id.index();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            match grads.get(id) {
                Some(g) => Zip::from(&mut *m).and(&mut *v).and(g).for_each(|m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                }),
                None => {
                    m.mapv_inplace(|x| beta1 * x);
                    v.mapv_inplace(|x| beta2 * x);
                }
            }
            Zip::from(store.get_mut(id)).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
            });
        }
    }
}
