use serde::{Deserialize, Serialize};

use super::{Matrix, Parameter, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with decoupled weight decay.
///
/// Moment buffers are matched to parameters by position, so callers must pass
/// parameters in the same order on every step.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Matrix<T>>,
    second: Vec<Matrix<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update and zeroes every gradient.
    pub fn step(&mut self, params: &mut [&mut Parameter<T>]) {
        if self.first.is_empty() {
            for p in params.iter() {
                let (r, c) = p.value.shape();
                self.first.push(Matrix::zeros(r, c));
                self.second.push(Matrix::zeros(r, c));
            }
        }
        assert_eq!(
            self.first.len(),
            params.len(),
            "optimizer was initialized for a different parameter list"
        );
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bias1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bias2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let lr = T::lit(c.lr);
        let decay = T::one() - lr * T::lit(c.weight_decay);
        let eps = T::lit(c.eps);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            assert_eq!(p.value.shape(), m.shape(), "shape changed for {}", p.name);
            let grads = p.grad.data();
            let values = p.value.data_mut();
            for (((w, &g), mi), vi) in values
                .iter_mut()
                .zip(grads)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                *w = *w * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.zero_grad();
        }
    }

    /// Clears the moments of selected rows of parameter `index`.
    pub fn reset_rows(&mut self, index: usize, rows: &[usize]) {
        if let (Some(m), Some(v)) = (self.first.get_mut(index), self.second.get_mut(index)) {
            for &r in rows {
                m.row_mut(r).fill(T::zero());
                v.row_mut(r).fill(T::zero());
            }
        }
    }
}
