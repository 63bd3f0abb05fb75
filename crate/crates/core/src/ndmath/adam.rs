use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment estimates for a fixed list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<I: IntoIterator<Item = usize>>(config: AdamConfig, shapes: I) -> Self {
        let lens: Vec<usize> = shapes.into_iter().collect();
        AdamState {
            config,
            t: 0,
            m: lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Moments for the given parameter slices, in order.
    pub fn for_params(config: AdamConfig, params: &[&[f64]]) -> Self {
        AdamState::new(config, params.iter().map(|p| p.len()))
    }

    pub fn shapes(&self) -> Vec<usize> {
        self.m.iter().map(Vec::len).collect()
    }

    /// One bias-corrected Adam update. `t` is incremented before correction.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer tracks {} tensors, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(Error::ShapeMismatch(format!(
                    "tensor of {} values, gradient {}, moments {}",
                    p.len(),
                    g.len(),
                    m.len()
                )));
            }
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut w = vec![1.0, -2.0, 3.0];
        let mut state = AdamState::new(AdamConfig::with_lr(0.0005), [3]);
        state.step(&mut [&mut w], &[&[0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(w, vec![1.0, -2.0, 3.0]);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut w = [1.0];
        let mut state = AdamState::new(AdamConfig::with_lr(0.0005), [1]);
        state.step(&mut [&mut w], &[&[0.5]]).unwrap();
        // 40-digit reference: 0.99950000000999999980...
        assert!((w[0] - 0.999_500_000_01).abs() < 1e-15);
    }

    #[test]
    fn two_steps_match_hand_unrolled_recurrence() {
        let cfg = AdamConfig::with_lr(0.0005);
        let mut w = [1.0];
        let mut state = AdamState::new(cfg, [1]);
        state.step(&mut [&mut w], &[&[0.5]]).unwrap();
        state.step(&mut [&mut w], &[&[0.5]]).unwrap();
        // unrolled by hand, step by step
        let g: f64 = 0.5;
        let (b1, b2, lr, eps) = (0.9f64, 0.999f64, 0.0005f64, 1e-8f64);
        let m1 = (1.0 - b1) * g;
        let v1 = (1.0 - b2) * g * g;
        let w1 = 1.0 - lr * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + eps);
        let m2 = b1 * m1 + (1.0 - b1) * g;
        let v2 = b2 * v1 + (1.0 - b2) * g * g;
        let w2 = w1 - lr * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);
        assert!((w[0] - w2).abs() <= 1e-12);
        assert!((state.m[0][0] - m2).abs() <= 1e-12);
        assert!((state.v[0][0] - v2).abs() <= 1e-12);
        assert_eq!(state.t, 2);
        assert!((w[0] - 0.999_000_000_02).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut w = [1.0, 2.0];
        let mut state = AdamState::new(AdamConfig::with_lr(0.1), [2]);
        assert!(state.step(&mut [&mut w], &[&[1.0]]).is_err());
        assert!(state.step(&mut [], &[]).is_err());
        assert_eq!(state.t, 0);
    }
}
