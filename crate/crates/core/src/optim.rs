//! Adaptive-moment optimizer with per-group learning rates.

use serde::{Deserialize, Serialize};

use crate::grad::SplatGrad;
use crate::splat::Splat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr_position_start: f64,
    pub lr_position_end: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
    pub lr_opacity: f64,
    pub lr_sh_dc: f64,
    pub lr_sh_rest: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr_position_start: 1.6e-4,
            lr_position_end: 1.6e-6,
            lr_scale: 0.005,
            lr_rotation: 0.001,
            lr_opacity: 0.05,
            lr_sh_dc: 0.0025,
            lr_sh_rest: 0.0025 / 20.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

impl AdamConfig {
    /// Exponential interpolation from start to end over `horizon` steps.
    pub fn position_lr(&self, step: u64, horizon: u64) -> f64 {
        if horizon == 0 {
            return self.lr_position_start;
        }
        let t = (step.min(horizon) as f64) / horizon as f64;
        if t == 0.0 {
            self.lr_position_start
        } else if t == 1.0 {
            self.lr_position_end
        } else {
            self.lr_position_start * (self.lr_position_end / self.lr_position_start).powf(t)
        }
    }
}

/// A splat with its first and second moment estimates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OwnedSplat {
    pub splat: Splat,
    pub m: SplatGrad,
    pub v: SplatGrad,
}

impl OwnedSplat {
    pub fn fresh(splat: Splat) -> Self {
        let m = SplatGrad::zeros_like(&splat);
        OwnedSplat { v: m.clone(), m, splat }
    }

    /// One update with gradient `g` at 1-based step `step`.
    pub fn adam_step(&mut self, g: &SplatGrad, step: u64, lr_position: f64, cfg: &AdamConfig) {
        adam_update(&mut self.splat, &mut self.m, &mut self.v, g, step, lr_position, cfg);
    }
}

/// Adaptive-moment update of one splat's parameters and moments.
pub fn adam_update(
    s: &mut Splat,
    m: &mut SplatGrad,
    v: &mut SplatGrad,
    g: &SplatGrad,
    step: u64,
    lr_position: f64,
    cfg: &AdamConfig,
) {
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - b1.powi(step as i32);
    let bc2 = 1.0 - b2.powi(step as i32);
    let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64, lr: f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    };
    for i in 0..3 {
        update(&mut s.mu[i], &mut m.mu[i], &mut v.mu[i], g.mu[i], lr_position);
        update(&mut s.log_scale[i], &mut m.log_scale[i], &mut v.log_scale[i], g.log_scale[i], cfg.lr_scale);
    }
    for i in 0..4 {
        update(&mut s.rotation[i], &mut m.rotation[i], &mut v.rotation[i], g.rotation[i], cfg.lr_rotation);
    }
    update(&mut s.opacity_logit, &mut m.opacity_logit, &mut v.opacity_logit, g.opacity_logit, cfg.lr_opacity);
    for k in 0..s.sh.len() {
        let lr = if k == 0 { cfg.lr_sh_dc } else { cfg.lr_sh_rest };
        for ch in 0..3 {
            update(&mut s.sh[k][ch], &mut m.sh[k][ch], &mut v.sh[k][ch], g.sh[k][ch], lr);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    #[test]
    fn position_schedule_endpoints() {
        let cfg = AdamConfig::default();
        assert_eq!(cfg.position_lr(0, 1000), 1.6e-4);
        assert_eq!(cfg.position_lr(1000, 1000), 1.6e-6);
        approx::assert_relative_eq!(cfg.position_lr(500, 1000), 1.6e-5, max_relative = 1e-12);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = AdamConfig::default();
        let mut o = OwnedSplat::fresh(Splat::isotropic(0, Vector3::zeros(), 0.1, 0.5, [0.5; 3]));
        let mut g = SplatGrad::zeros_like(&o.splat);
        g.mu.x = 3.0;
        g.opacity_logit = -0.2;
        o.adam_step(&g, 1, 1e-3, &cfg);
        approx::assert_relative_eq!(o.splat.mu.x, -1e-3, max_relative = 1e-9);
        approx::assert_relative_eq!(o.splat.opacity_logit, 0.05, max_relative = 1e-9);
        assert_eq!(o.splat.mu.y, 0.0);
    }
}
