//! Per-splat gradient accumulators.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::splat::Splat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplatGrad {
    pub id: u64,
    pub mu: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    pub sh: Vec<[f64; 3]>,
}

impl SplatGrad {
    pub fn zeros_like(splat: &Splat) -> Self {
        SplatGrad {
            id: splat.id,
            mu: Vector3::zeros(),
            log_scale: Vector3::zeros(),
            rotation: [0.0; 4],
            opacity_logit: 0.0,
            sh: vec![[0.0; 3]; splat.sh.len()],
        }
    }

    pub fn add_assign(&mut self, other: &SplatGrad) {
        debug_assert_eq!(self.id, other.id);
        self.mu += other.mu;
        self.log_scale += other.log_scale;
        for i in 0..4 {
            self.rotation[i] += other.rotation[i];
        }
        self.opacity_logit += other.opacity_logit;
        for (a, b) in self.sh.iter_mut().zip(&other.sh) {
            for ch in 0..3 {
                a[ch] += b[ch];
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.mu *= factor;
        self.log_scale *= factor;
        self.rotation.iter_mut().for_each(|v| *v *= factor);
        self.opacity_logit *= factor;
        self.sh.iter_mut().flatten().for_each(|v| *v *= factor);
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }

    pub fn is_zero(&self) -> bool {
        self.values().all(|v| v == 0.0)
    }

    /// All components in a fixed order: mu, log_scale, rotation, opacity, sh.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.mu
            .iter()
            .chain(self.log_scale.iter())
            .chain(self.rotation.iter())
            .copied()
            .chain(std::iter::once(self.opacity_logit))
            .chain(self.sh.iter().flatten().copied())
    }
}

/// Gradients for a list of splats, aligned index-for-index.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBuffers {
    pub grads: Vec<SplatGrad>,
}

impl GradBuffers {
    pub fn zeros(splats: &[Splat]) -> Self {
        GradBuffers {
            grads: splats.iter().map(SplatGrad::zeros_like).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn add_assign(&mut self, other: &GradBuffers) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn clear(&mut self) {
        for g in &mut self.grads {
            g.scale(0.0);
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.grads.iter().find(|g| !g.is_finite()) {
            Some(g) => Err(Error::NonFiniteGradient { id: g.id }),
            None => Ok(()),
        }
    }
}
