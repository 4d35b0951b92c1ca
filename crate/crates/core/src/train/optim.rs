use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
        }
    }

    /// One update of every parameter in place.
    pub fn step(
        &self,
        params: &mut [&mut Matrix],
        grads: &[Matrix],
        state: &mut AdamWState,
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != state.first.len() {
            return Err(Error::shape(format!(
                "{} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                state.first.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&state.first) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::shape("parameter, gradient and moment shapes differ"));
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = state.first[i].data_mut();
            let v = state.second[i].data_mut();
            for (j, theta) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *theta -= lr * self.weight_decay * *theta;
                *theta -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub step: u64,
    pub first: Vec<Matrix>,
    pub second: Vec<Matrix>,
}

impl AdamWState {
    pub fn zeros_like(params: &[&Matrix]) -> Self {
        let z: Vec<Matrix> = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self {
            step: 0,
            first: z.clone(),
            second: z,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let mut x = Matrix::from_rows(&[[1.5, -2.0]]).unwrap();
        let before = x.clone();
        let mut state = AdamWState::zeros_like(&[&x]);
        AdamW::new(0.0)
            .step(&mut [&mut x], &[Matrix::zeros(1, 2)], &mut state, 0.1)
            .unwrap();
        assert_eq!(x, before);
    }

    #[test]
    fn decay_only_shrinks_proportionally() {
        let mut x = Matrix::from_rows(&[[2.0, -4.0]]).unwrap();
        let mut state = AdamWState::zeros_like(&[&x]);
        AdamW::new(0.05)
            .step(&mut [&mut x], &[Matrix::zeros(1, 2)], &mut state, 0.1)
            .unwrap();
        assert_eq!(x.data(), &[2.0 - 0.1 * 0.05 * 2.0, -4.0 + 0.1 * 0.05 * 4.0]);
    }

    #[test]
    fn one_step_on_square() {
        // f(x) = x^2 at x = 1: g = 2, m = 0.2, v = 0.004, m_hat = 2, v_hat = 4.
        let (lr, wd) = (0.01, 0.05);
        let mut x = Matrix::scalar(1.0);
        let mut state = AdamWState::zeros_like(&[&x]);
        AdamW::new(wd)
            .step(&mut [&mut x], &[Matrix::scalar(2.0)], &mut state, lr)
            .unwrap();
        let want = (1.0 - lr * wd) - lr * 2.0 / (2.0 + 1e-8);
        assert!((x.as_scalar().unwrap() - want).abs() < 1e-12);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn shape_mismatch() {
        let mut x = Matrix::zeros(1, 2);
        let mut state = AdamWState::zeros_like(&[&x]);
        assert!(AdamW::new(0.0)
            .step(&mut [&mut x], &[Matrix::zeros(2, 1)], &mut state, 0.1)
            .is_err());
    }
}
