use super::Tensor;
use crate::error::TensorError;
use serde::{Deserialize, Serialize};

/// Bias-corrected Adam.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(0.001)
    }
}

/// First/second moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
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

    /// Applies one step to `params` in place. The state lazily sizes itself
    /// on the first call and must be reused with the same parameter order.
    pub fn update(
        &self,
        params: &mut [&mut Tensor],
        grads: &[Tensor],
        state: &mut AdamState,
    ) -> Result<(), TensorError> {
        if params.len() != grads.len() {
            return Err(TensorError::dim("adam", "parameter", params.len(), grads.len()));
        }
        if state.m.is_empty() {
            state.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            state.v = state.m.clone();
        }
        if state.m.len() != params.len() {
            return Err(TensorError::dim("adam", "state", state.m.len(), params.len()));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.len() != g.len() {
                return Err(TensorError::dim("adam", "gradient", p.len(), g.len()));
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(state.m.iter_mut().zip(state.v.iter_mut()))
        {
            for (((w, &gv), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gv;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gv * gv;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let adam = Adam::new(0.001);
        let state = AdamState::default();
        for g in [0.3, -2.0, 1e-3] {
            let mut p = Tensor::scalar(1.0);
            let mut s = state.clone();
            adam.update(&mut [&mut p], &[Tensor::scalar(g)], &mut s).unwrap();
            // closed form: lr * |g| / (|g| + eps)
            let expected = 0.001 * g.abs() / (g.abs() + 1e-8);
            assert!(((1.0 - p.item()).abs() - expected).abs() < 1e-15);
            assert_eq!((1.0 - p.item()).signum(), g.signum());
        }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let adam = Adam::new(0.001);
        let mut state = AdamState::default();
        let mut p = Tensor::vector(vec![0.5, -0.25]);
        for _ in 0..3 {
            adam.update(&mut [&mut p], &[Tensor::zeros(&[2])], &mut state).unwrap();
        }
        assert_eq!(p.data(), &[0.5, -0.25]);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let adam = Adam::new(0.0);
        let mut state = AdamState::default();
        let mut p = Tensor::vector(vec![0.5, -0.25]);
        for _ in 0..5 {
            adam.update(&mut [&mut p], &[Tensor::vector(vec![3.0, -1.0])], &mut state)
                .unwrap();
        }
        assert_eq!(p.data(), &[0.5, -0.25]);
        assert_eq!(state.step, 5);
    }
}
