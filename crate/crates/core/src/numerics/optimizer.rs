//! AdamW with decoupled weight decay, plus the stepped learning-rate
//! schedule (halved every five epochs).

use serde::{Deserialize, Serialize};

use super::ParamVector;
use crate::{Error, Result};

/// Per-parameter AdamW state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_stability: f64,
}

impl OptimizerState {
    pub fn new(param_len: usize, learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            first_moment: vec![0.0; param_len],
            second_moment: vec![0.0; param_len],
            step_count: 0,
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps_stability: 1e-8,
        }
    }

    /// Extend the moment vectors when parameters are appended (new proxies).
    pub fn grow_to(&mut self, param_len: usize) {
        if param_len > self.first_moment.len() {
            self.first_moment.resize(param_len, 0.0);
            self.second_moment.resize(param_len, 0.0);
        }
    }
}

/// One AdamW update. Weight decay multiplies the parameters directly
/// (decoupled form); moment estimates are bias-corrected.
pub fn adamw_step(
    params: &mut ParamVector,
    grads: &ParamVector,
    state: &mut OptimizerState,
) -> Result<()> {
    if params.len() != grads.len()
        || params.len() != state.first_moment.len()
        || params.len() != state.second_moment.len()
    {
        return Err(Error::DimensionMismatch(format!(
            "adamw_step: params {}, grads {}, moments {}",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    grads.validate_finite().map_err(|_| Error::NonFinite {
        op: "adamw gradients",
    })?;

    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads.values[i];
        let m = &mut state.first_moment[i];
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        let v = &mut state.second_moment[i];
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        let p = &mut params.values[i];
        *p -= state.learning_rate * state.weight_decay * *p;
        *p -= state.learning_rate * m_hat / (v_hat.sqrt() + state.eps_stability);
    }
    Ok(())
}

/// Learning rate halved every five epochs.
pub fn lr_schedule(initial_lr: f64, epoch: usize) -> f64 {
    initial_lr * 0.5f64.powi((epoch / 5) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        // g = 1, lr = 0.1, wd = 0, step 1: bias correction gives
        // m_hat = v_hat = 1, so the step is about -0.1.
        let mut params = ParamVector::new(vec![0.5]);
        let grads = ParamVector::new(vec![1.0]);
        let mut state = OptimizerState::new(1, 0.1, 0.0);
        adamw_step(&mut params, &grads, &mut state).unwrap();
        assert!((params.values[0] - (0.5 - 0.1)).abs() < 1e-6);
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut params = ParamVector::new(vec![1.0, -2.0, 0.3]);
        let grads = ParamVector::new(vec![0.0; 3]);
        let mut state = OptimizerState::new(3, 0.1, 0.0);
        for _ in 0..5 {
            adamw_step(&mut params, &grads, &mut state).unwrap();
        }
        assert_eq!(params.values, vec![1.0, -2.0, 0.3]);
    }

    #[test]
    fn decoupled_decay_scales_params() {
        let mut params = ParamVector::new(vec![2.0]);
        let grads = ParamVector::new(vec![0.0]);
        let mut state = OptimizerState::new(1, 0.1, 1e-4);
        adamw_step(&mut params, &grads, &mut state).unwrap();
        assert!((params.values[0] - 2.0 * (1.0 - 0.1 * 1e-4)).abs() < 1e-15);
    }

    #[test]
    fn nonfinite_grads_error() {
        let mut params = ParamVector::new(vec![1.0]);
        let grads = ParamVector::new(vec![f64::NAN]);
        let mut state = OptimizerState::new(1, 0.1, 0.0);
        assert!(adamw_step(&mut params, &grads, &mut state).is_err());
    }

    #[test]
    fn schedule_halves_every_five_epochs() {
        assert_eq!(lr_schedule(1e-4, 0), 1e-4);
        assert_eq!(lr_schedule(1e-4, 4), 1e-4);
        assert_eq!(lr_schedule(1e-4, 5), 5e-5);
        assert_eq!(lr_schedule(1e-4, 12), 2.5e-5);
    }
}
