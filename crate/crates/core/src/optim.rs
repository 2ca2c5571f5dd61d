//! Adam with decoupled weight decay.

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
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
            weight_decay: 0.1,
        }
    }
}

/// Optimizer state for a list of parameter buffers of fixed sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<S> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(config: AdamWConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            m: sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
        }
    }

    /// Starts a new step; call [`AdamW::update`] once per buffer afterwards.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Updates buffer `slot` in place. A `None` gradient still applies decay.
    pub fn update(&mut self, slot: usize, param: &mut [S], grad: Option<&[S]>) {
        let c = &self.config;
        let t = self.step.max(1) as i32;
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let bc1 = S::of(1.0 - c.beta1.powi(t));
        let bc2 = S::of(1.0 - c.beta2.powi(t));
        let lr = S::of(c.lr);
        let decay = S::one() - S::of(c.lr * c.weight_decay);
        let eps = S::of(c.eps);
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        assert_eq!(m.len(), param.len(), "optimizer slot {slot} size changed");
        for i in 0..param.len() {
            let g = grad.map_or(S::zero(), |g| g[i]);
            m[i] = b1 * m[i] + (S::one() - b1) * g;
            v[i] = b2 * v[i] + (S::one() - b2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            param[i] = param[i] * decay - lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::<f64>::new(cfg, &[3]);
        let mut p = vec![1.0, -2.0, 0.5];
        opt.begin_step();
        opt.update(0, &mut p, Some(&[0.3, -7.0, 0.0]));
        assert!((p[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p[1] - (-2.0 + 1e-3)).abs() < 1e-9);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn decay_is_decoupled_from_gradient() {
        let mut opt = AdamW::<f64>::new(AdamWConfig::default(), &[1]);
        let mut p = vec![2.0];
        opt.begin_step();
        opt.update(0, &mut p, None);
        assert!((p[0] - 2.0 * (1.0 - 1e-4)).abs() < 1e-15);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let cfg = AdamWConfig {
            lr: 0.05,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::<f64>::new(cfg, &[2]);
        let mut p = vec![3.0, -4.0];
        for _ in 0..2000 {
            let g = vec![2.0 * (p[0] - 1.0), 2.0 * (p[1] + 0.5)];
            opt.begin_step();
            opt.update(0, &mut p, Some(&g));
        }
        assert!((p[0] - 1.0).abs() < 1e-2 && (p[1] + 0.5).abs() < 1e-2);
    }
}
