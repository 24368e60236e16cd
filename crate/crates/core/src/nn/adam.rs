use super::layers::Param;
use super::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates. Moments are allocated on the
/// first step and matched to parameters by position.
#[derive(Debug, Clone)]
pub struct Adam<T: Scalar = f32> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update using each parameter's stored gradient.
    pub fn step(&mut self, params: &mut [&mut Param<T>]) {
        if self.first.len() != params.len() {
            self.first = params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape().to_vec()))
                .collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let correction1 = 1.0 - beta1.powi(t);
        let correction2 = 1.0 - beta2.powi(t);
        for ((param, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            debug_assert_eq!(param.value.shape(), m.shape());
            let grads = param.grad.data();
            for (((w, g), m), v) in param
                .value
                .data_mut()
                .iter_mut()
                .zip(grads)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let g = g.as_f64();
                let m_new = beta1 * m.as_f64() + (1.0 - beta1) * g;
                let v_new = beta2 * v.as_f64() + (1.0 - beta2) * g * g;
                *m = T::from_f64(m_new);
                *v = T::from_f64(v_new);
                let m_hat = m_new / correction1;
                let v_hat = v_new / correction2;
                *w = T::from_f64(w.as_f64() - learning_rate * m_hat / (v_hat.sqrt() + epsilon));
            }
        }
    }
}
