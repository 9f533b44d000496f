//! Adam optimizer with bias correction.

use super::tensor::{Real, Tensor};

/// Per-parameter optimizer state. Buffers match the parameter's length;
/// `step` increments by exactly one per update.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Real = f32> {
    pub first_moment: Vec<T>,
    pub second_moment: Vec<T>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize) -> Self {
        AdamState {
            first_moment: vec![T::zero(); len],
            second_moment: vec![T::zero(); len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update on a single parameter buffer.
/// Deterministic given its inputs.
pub fn adam_step<T: Real>(
    param: &mut [T],
    grad: &[T],
    state: &mut AdamState<T>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    assert_eq!(param.len(), grad.len(), "gradient length mismatch");
    assert_eq!(param.len(), state.first_moment.len(), "state length mismatch");
    state.step += 1;
    let b1 = T::of(beta1);
    let b2 = T::of(beta2);
    let one = T::one();
    let lr_t = T::of(lr);
    let eps_t = T::of(eps);
    let corr1 = one - T::of(beta1.powi(state.step as i32));
    let corr2 = one - T::of(beta2.powi(state.step as i32));
    for i in 0..param.len() {
        let g = grad[i];
        let m = b1 * state.first_moment[i] + (one - b1) * g;
        let v = b2 * state.second_moment[i] + (one - b2) * g * g;
        state.first_moment[i] = m;
        state.second_moment[i] = v;
        let m_hat = m / corr1;
        let v_hat = v / corr2;
        param[i] -= lr_t * m_hat / (v_hat.sqrt() + eps_t);
    }
}

/// Drives [`adam_step`] over an ordered parameter list, holding one
/// [`AdamState`] per tensor. Gradients are consumed (zeroed) by `step`.
#[derive(Debug)]
pub struct Adam<T: Real = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub states: Vec<AdamState<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &[Tensor<T>], lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            states: params.iter().map(|p| AdamState::new(p.len())).collect(),
        }
    }

    /// Applies one update to every parameter that has a gradient, then
    /// clears all gradients. A parameter without a gradient is skipped and
    /// its state (including the step count) is left untouched.
    pub fn step(&mut self, params: &[Tensor<T>]) {
        assert_eq!(params.len(), self.states.len(), "parameter list changed");
        for (p, st) in params.iter().zip(&mut self.states) {
            if let Some(g) = p.grad() {
                adam_step(
                    &mut p.data_mut(),
                    &g,
                    st,
                    self.lr,
                    self.beta1,
                    self.beta2,
                    self.eps,
                );
            }
            p.zero_grad();
        }
    }
}
