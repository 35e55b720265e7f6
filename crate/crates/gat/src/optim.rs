//! AdamW with decoupled weight decay and the warmup-cosine learning
//! rate schedule.

use serde::{Deserialize, Serialize};

/// Optimization and training-control settings. Defaults are the values
/// used by every pipeline in this crate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub warmup_start_lr: f64,
    pub warmup_epochs: usize,
    /// Training length and cosine horizon: the rate reaches zero here.
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Early stopping is not considered before this epoch count.
    pub min_epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> OptimizerConfig {
        OptimizerConfig {
            base_lr: 1e-4,
            warmup_start_lr: 2e-5,
            warmup_epochs: 5,
            max_epochs: 60,
            patience: 10,
            min_epochs: 20,
            batch_size: 32,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

/// Learning rate at a fractional epoch: linear from `warmup_start_lr`
/// to `base_lr` over the warmup, then cosine from `base_lr` to zero at
/// `max_epochs`.
pub fn lr_at(cfg: &OptimizerConfig, epoch: f64) -> f64 {
    let w = cfg.warmup_epochs as f64;
    if epoch < w {
        return cfg.warmup_start_lr + (cfg.base_lr - cfg.warmup_start_lr) * (epoch / w);
    }
    let h = cfg.max_epochs as f64;
    if epoch >= h {
        return 0.0;
    }
    let u = (epoch - w) / (h - w);
    0.5 * cfg.base_lr * (1.0 + (std::f64::consts::PI * u).cos())
}

/// AdamW over one flat parameter vector.
pub struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl AdamW {
    pub fn new(n: usize, cfg: &OptimizerConfig) -> AdamW {
        AdamW {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        }
    }

    /// One update. Decay is decoupled: parameters are first scaled by
    /// `1 - lr * weight_decay`, so a zero gradient still shrinks them
    /// by exactly that factor.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let shrink = 1.0 - lr * self.weight_decay;
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] = params[i] * shrink - lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_and_cosine_endpoints() {
        let cfg = OptimizerConfig::default();
        assert_eq!(lr_at(&cfg, 0.0), 2e-5);
        assert!((lr_at(&cfg, 5.0) - 1e-4).abs() < 1e-18);
        assert!((lr_at(&cfg, 2.5) - 6e-5).abs() < 1e-18);
        assert!(lr_at(&cfg, 60.0) < 1e-6);
        assert!(lr_at(&cfg, 61.0) < 1e-6);
        // Halfway through the cosine the rate is half the base.
        assert!((lr_at(&cfg, 32.5) - 5e-5).abs() < 1e-18);
    }

    #[test]
    fn schedule_is_continuous_and_unimodal() {
        let cfg = OptimizerConfig::default();
        let up = lr_at(&cfg, 5.0 - 1e-9);
        assert!((up - lr_at(&cfg, 5.0)).abs() < 1e-12);
        let mut prev = lr_at(&cfg, 0.0);
        for k in 1..=50 {
            let e = k as f64 * 0.1;
            let cur = lr_at(&cfg, e);
            assert!(cur >= prev, "warmup must not decrease at {e}");
            prev = cur;
        }
        for k in 51..=600 {
            let e = k as f64 * 0.1;
            let cur = lr_at(&cfg, e);
            assert!(cur <= prev + 1e-18, "cosine must not increase at {e}");
            prev = cur;
        }
    }

    #[test]
    fn zero_gradient_step_is_a_pure_decay() {
        let cfg = OptimizerConfig::default();
        let mut opt = AdamW::new(3, &cfg);
        let mut p = [1.0, -2.0, 0.5];
        let lr = 0.01;
        opt.step(&mut p, &[0.0; 3], lr);
        let f = 1.0 - lr * cfg.weight_decay;
        assert_eq!(p, [1.0 * f, -2.0 * f, 0.5 * f]);
    }

    #[test]
    fn first_step_matches_the_hand_computed_value() {
        let cfg = OptimizerConfig { weight_decay: 0.0, ..OptimizerConfig::default() };
        let mut opt = AdamW::new(1, &cfg);
        let mut p = [1.0];
        opt.step(&mut p, &[0.5], 1e-3);
        // m_hat = 0.5, v_hat = 0.25, so the update is
        // 1e-3 * 0.5 / (0.5 + 1e-8) = 9.99999980e-4.
        assert!((p[0] - 0.99900000002).abs() < 1e-11, "{}", p[0]);
    }

    #[test]
    fn steps_match_a_scalar_reference() {
        let cfg = OptimizerConfig::default();
        let mut opt = AdamW::new(1, &cfg);
        let mut p = [0.7];
        let grads = [0.3, -0.1, 0.25, 0.0, -0.4];
        let lr = 2e-3;
        let (mut m, mut v, mut rp) = (0.0f64, 0.0f64, 0.7f64);
        for (t, &g) in grads.iter().enumerate() {
            opt.step(&mut p, &[g], lr);
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mh = m / (1.0 - cfg.beta1.powi(t as i32 + 1));
            let vh = v / (1.0 - cfg.beta2.powi(t as i32 + 1));
            rp = rp * (1.0 - lr * cfg.weight_decay) - lr * mh / (vh.sqrt() + cfg.eps);
            assert!((p[0] - rp).abs() < 1e-15, "step {t}: {} vs {rp}", p[0]);
        }
    }

    #[test]
    fn minimizes_a_quadratic() {
        let cfg = OptimizerConfig { weight_decay: 0.0, ..OptimizerConfig::default() };
        let mut opt = AdamW::new(1, &cfg);
        let mut p = [0.0];
        for _ in 0..4000 {
            let g = 2.0 * (p[0] - 3.0);
            opt.step(&mut p, &[g], 5e-3);
        }
        assert!((p[0] - 3.0).abs() < 1e-2, "{}", p[0]);
    }
}
