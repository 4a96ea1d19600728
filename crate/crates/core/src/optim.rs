//! Bias-corrected Adam.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn zeros(len: usize) -> Self {
        Self { step: 0, m: vec![0.0; len], v: vec![0.0; len] }
    }
}

/// One Adam update. Returns the new parameter values and moment state; the
/// inputs are left untouched.
pub fn adam_step(
    param: &Tensor,
    grad: &[f64],
    state: &AdamState,
    cfg: &AdamConfig,
) -> Result<(Tensor, AdamState)> {
    let n = param.numel();
    if grad.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::shape(format!(
            "adam: param {n}, grad {}, state {}/{}",
            grad.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    let step = state.step + 1;
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    for (i, &g) in grad.iter().enumerate() {
        let mi = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        let vi = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = mi / bc1;
        let v_hat = vi / bc2;
        out.push(param.data()[i] - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps));
        m.push(mi);
        v.push(vi);
    }
    Ok((Tensor::new(param.shape().to_vec(), out)?, AdamState { step, m, v }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let p = Tensor::scalar(0.5).unwrap();
        let cfg = AdamConfig::new(1e-3);
        let (q, st) = adam_step(&p, &[1.0], &AdamState::zeros(1), &cfg).unwrap();
        let delta = q.data()[0] - 0.5;
        assert!((delta - (-1e-3 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((delta + 9.99999e-4).abs() < 1e-9);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_grad_keeps_param() {
        let p = Tensor::new(vec![3], vec![1.0, -2.0, 0.25]).unwrap();
        let (q, _) = adam_step(&p, &[0.0; 3], &AdamState::zeros(3), &AdamConfig::new(0.1)).unwrap();
        assert!(q.bit_eq(&p));
    }

    #[test]
    fn quadratic_descent_is_monotone() {
        // Scalar oracle: f(x) = x^2, f'(x) = 2x.
        let cfg = AdamConfig::new(0.1);
        let mut x = Tensor::scalar(1.0).unwrap();
        let mut st = AdamState::zeros(1);
        let mut prev = 1.0f64;
        for _ in 0..10 {
            let g = 2.0 * x.data()[0];
            let (nx, ns) = adam_step(&x, &[g], &st, &cfg).unwrap();
            let cur = nx.data()[0].abs();
            assert!(cur < prev, "{cur} !< {prev}");
            prev = cur;
            x = nx;
            st = ns;
        }
    }

    #[test]
    fn shape_mismatch() {
        let p = Tensor::zeros(&[2]).unwrap();
        assert!(adam_step(&p, &[0.0], &AdamState::zeros(2), &AdamConfig::new(0.1)).is_err());
    }
}
