//! Bias-corrected Adam.

#[derive(Debug, Clone, Copy, PartialEq)]
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

/// One Adam update of a flat tensor. `step` is 1-based.
pub fn adam_update(
    params: &mut [f64],
    first: &mut [f64],
    second: &mut [f64],
    grads: &[f64],
    lr: f64,
    step: u64,
    cfg: &AdamConfig,
) {
    debug_assert!(step >= 1);
    let c1 = 1.0 - cfg.beta1.powf(step as f64);
    let c2 = 1.0 - cfg.beta2.powf(step as f64);
    for i in 0..params.len() {
        let g = grads[i];
        first[i] = cfg.beta1 * first[i] + (1.0 - cfg.beta1) * g;
        second[i] = cfg.beta2 * second[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = first[i] / c1;
        let v_hat = second[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}
