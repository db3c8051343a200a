use super::params::ParamStore;

/// Adam hyperparameters; the learning rate is passed per step so schedules stay outside.
#[derive(Clone, Copy, Debug, PartialEq)]
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

/// One bias-corrected Adam update of every parameter, then zeroes the gradient slots.
pub fn adam_step(store: &mut ParamStore, lr: f64, config: AdamConfig) {
    let AdamConfig { beta1, beta2, eps } = config;
    for entry in store.entries_mut() {
        entry.step += 1;
        let t = entry.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let values = entry.value.data_mut();
        let m = entry.first_moment.data_mut();
        let v = entry.second_moment.data_mut();
        for (k, g) in entry.grad.data_mut().iter_mut().enumerate() {
            m[k] = beta1 * m[k] + (1.0 - beta1) * *g;
            v[k] = beta2 * v[k] + (1.0 - beta2) * *g * *g;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            values[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            *g = 0.0;
        }
    }
}
