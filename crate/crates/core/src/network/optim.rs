use serde::{Deserialize, Serialize};

use super::{Param, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adaptive-moment gradient descent. Moment buffers are matched to
/// parameters by position, so the parameter order must not change between
/// steps.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: Vec<&mut Param<T>>, lr: f64) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), params.len(), "parameter list changed between steps");
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let b1 = T::from_f64(c.beta1).unwrap();
        let b2 = T::from_f64(c.beta2).unwrap();
        let one = T::one();
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let step_size = T::from_f64(lr * bias2.sqrt() / bias1).unwrap();
        let eps = T::from_f64(c.epsilon * bias2.sqrt()).unwrap();
        for ((p, m), v) in params.into_iter().zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), mi), vi) in p.value.iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (one - b1) * g;
                *vi = b2 * *vi + (one - b2) * g * g;
                *w = *w - step_size * *mi / (vi.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the first update is lr * sign(g).
        let mut p = Param::new("w".into(), vec![2], vec![1.0f64, -1.0]);
        p.grad = vec![0.3, -7.0];
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(vec![&mut p], 0.01);
        assert!((p.value[0] - 0.99).abs() < 1e-6);
        assert!((p.value[1] + 0.99).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Param::new("w".into(), vec![1], vec![5.0f64]);
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..2000 {
            p.grad = vec![2.0 * (p.value[0] - 1.5)];
            adam.step(vec![&mut p], 0.05);
        }
        assert!((p.value[0] - 1.5).abs() < 1e-2);
    }
}
