use crate::graph::Gradients;
use crate::params::ParamStore;

/// ADAM with bias correction. Frozen entries are never touched.
#[derive(Clone, Copy, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(1e-3)
    }
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update of every trainable entry. Entries without a gradient are
    /// treated as having a zero gradient.
    pub fn step(&self, store: &mut ParamStore, grads: &Gradients) {
        store.adam_steps += 1;
        let t = store.adam_steps as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            let g = grads.param(id);
            let e = store.entry_mut(id);
            let n = e.value.len();
            let (value, m, v) = (e.value.data_mut(), e.m.data_mut(), e.v.data_mut());
            for i in 0..n {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                value[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
