use super::{ParamStore, Tensor};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for every parameter of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// One bias-corrected Adam update from the accumulated gradients, which
    /// are zeroed afterwards.
    pub fn step(&mut self, store: &mut ParamStore, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (i, p) in store.iter_mut().enumerate() {
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for j in 0..value.len() {
                let g = grad[j];
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                value[j] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        store.zero_grad();
    }
}
