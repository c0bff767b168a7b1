use super::params::ParamStore;
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient L2 norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update from the gradients in `store` and returns the
    /// gradient norm before clipping. Gradients are left untouched.
    pub fn step(&mut self, store: &mut ParamStore) -> f64 {
        if self.m.len() != store.len() {
            let shapes: Vec<_> = store.ids().map(|id| store.value(id).shape()).collect();
            self.m = shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect();
            self.v = self.m.clone();
        }
        let norm = store.grad_norm();
        let clip = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g: Vec<f64> = store.grad(id).data().iter().map(|x| x * clip).collect();
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            let w = store.value_mut(id).data_mut();
            for j in 0..g.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                w[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        norm
    }
}
