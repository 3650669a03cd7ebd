use ndarray::Zip;

use crate::graph::{Grads, Tensor};
use crate::store::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            eps: 1e-8,
            clip_norm: Some(10.0),
        }
    }
}

/// Adam over the trainable tensors of one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    ids: Vec<ParamId>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let ids: Vec<ParamId> = store.trainable_ids().collect();
        let m = ids.iter().map(|&id| Tensor::zeros(store.get(id).raw_dim())).collect();
        let v = ids.iter().map(|&id| Tensor::zeros(store.get(id).raw_dim())).collect();
        Self {
            cfg,
            step: 0,
            ids,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// First and second moment buffers, in store order.
    pub fn moments(&self) -> impl Iterator<Item = (ParamId, &Tensor, &Tensor)> {
        self.ids
            .iter()
            .zip(self.m.iter().zip(&self.v))
            .map(|(&id, (m, v))| (id, m, v))
    }

    pub fn restore(&mut self, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) {
        assert_eq!(m.len(), self.ids.len());
        assert_eq!(v.len(), self.ids.len());
        self.step = step;
        self.m = m;
        self.v = v;
    }

    /// Applies one update; returns the pre-clip global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) -> f64 {
        let gmap = grads.for_store(store);
        let lookup = |id: ParamId| gmap.iter().find(|(p, _)| *p == id).map(|(_, g)| *g);
        let sq: f64 = self
            .ids
            .iter()
            .filter_map(|&id| lookup(id))
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum();
        let norm = sq.sqrt();
        let clip = match self.cfg.clip_norm {
            Some(max) if norm > max => max / (norm + 1e-6),
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            ..
        } = self.cfg;
        for (i, &id) in self.ids.iter().enumerate() {
            let Some(g) = lookup(id) else { continue };
            let p = store.get_mut(id);
            Zip::from(p)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(g)
                .for_each(|p, m, v, &g| {
                    let g = g * clip;
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
        }
        norm
    }
}
