//! Gaussian primitives and their 3D evaluation.
//!
//! Parameters are stored unconstrained (log-scales, raw quaternion, opacity
//! logit) so the optimizer can move them freely; the activated values are
//! derived on use.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{c, Real};

/// Default truncation radius, in standard deviations.
pub const DEFAULT_TRUNCATION: f64 = 3.0;

/// Largest admissible covariance condition number.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splat {
    pub id: u64,
    pub mu: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    /// Quaternion `(w, x, y, z)`; renormalized before use.
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    /// `(deg + 1)^2` RGB coefficient triples, band-major.
    pub sh: Vec<[f64; 3]>,
}

impl Splat {
    /// Isotropic splat with a constant (degree 0) color.
    pub fn isotropic(id: u64, mu: Vector3<f64>, scale: f64, alpha: f64, rgb: [f64; 3]) -> Self {
        Splat {
            id,
            mu,
            log_scale: Vector3::repeat(scale.ln()),
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: logit(alpha),
            sh: vec![rgb_to_dc(rgb)],
        }
    }

    pub fn alpha(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scales(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn max_scale(&self) -> f64 {
        self.log_scale.max().exp()
    }

    /// Stored SH degree, inferred from the coefficient count.
    pub fn sh_degree(&self) -> usize {
        sh_degree_for_len(self.sh.len())
    }

    /// Truncation reach `D_i = multiplier * largest semi-axis`.
    pub fn reach(&self, multiplier: f64) -> f64 {
        multiplier * self.max_scale()
    }

    pub fn rotation_matrix<T: Real>(&self) -> Matrix3<T> {
        quat_to_matrix(&normalize_quat(&self.rotation).map(c::<T>))
    }

    /// `R S S^T R^T`.
    pub fn covariance<T: Real>(&self) -> Matrix3<T> {
        let r = self.rotation_matrix::<T>();
        let s = self.log_scale.map(|v| c::<T>(v).exp());
        let rs = r * Matrix3::from_diagonal(&s);
        rs * rs.transpose()
    }

    /// Condition number of the covariance, `(s_max / s_min)^2`.
    pub fn condition_number(&self) -> f64 {
        ((self.log_scale.max() - self.log_scale.min()) * 2.0).exp()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Zeroth-band SH basis constant.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;

pub fn rgb_to_dc(rgb: [f64; 3]) -> [f64; 3] {
    rgb.map(|v| (v - 0.5) / SH_C0)
}

pub fn dc_to_rgb(dc: [f64; 3]) -> [f64; 3] {
    dc.map(|v| v * SH_C0 + 0.5)
}

pub fn sh_coeffs_for_degree(deg: usize) -> usize {
    (deg + 1) * (deg + 1)
}

pub fn sh_degree_for_len(len: usize) -> usize {
    let mut deg = 0;
    while sh_coeffs_for_degree(deg + 1) <= len {
        deg += 1;
    }
    deg
}

pub fn normalize_quat(q: &[f64; 4]) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if n == 0.0 {
        return [1.0, 0.0, 0.0, 0.0];
    }
    q.map(|v| v / n)
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_matrix<T: Real>(q: &[T; 4]) -> Matrix3<T> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let one = T::one();
    let two = c::<T>(2.0);
    Matrix3::new(
        one - two * (y * y + z * z),
        two * (x * y - w * z),
        two * (x * z + w * y),
        two * (x * y + w * z),
        one - two * (x * x + z * z),
        two * (y * z - w * x),
        two * (x * z - w * y),
        two * (y * z + w * x),
        one - two * (x * x + y * y),
    )
}

/// Unnormalized 3D Gaussian `exp(-1/2 (x-mu)^T Sigma^-1 (x-mu))`, zero beyond
/// `truncation` Mahalanobis units.
pub fn gaussian_weight(splat: &Splat, x: &Vector3<f64>, truncation: f64) -> Result<f64> {
    let condition = splat.condition_number();
    if !(condition <= MAX_CONDITION) {
        return Err(Error::DegenerateCovariance { condition });
    }
    // Sigma^-1 = R S^-2 R^T, so the Mahalanobis form is |S^-1 R^T (x - mu)|^2.
    let r = splat.rotation_matrix::<f64>();
    let local = r.transpose() * (x - splat.mu);
    let inv_s = splat.log_scale.map(|v| (-v).exp());
    let m2 = local.component_mul(&inv_s).norm_squared();
    if m2 > truncation * truncation {
        return Ok(0.0);
    }
    Ok((-0.5 * m2).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit_splat() -> Splat {
        Splat {
            id: 0,
            mu: Vector3::new(0.5, -1.0, 2.0),
            log_scale: Vector3::zeros(),
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: 0.0,
            sh: vec![[0.0; 3]],
        }
    }

    #[test]
    fn weight_at_center_is_one() {
        let s = unit_splat();
        assert_eq!(gaussian_weight(&s, &s.mu, 3.0).unwrap(), 1.0);
    }

    #[test]
    fn weight_one_sigma() {
        let s = unit_splat();
        let x = s.mu + Vector3::new(1.0, 0.0, 0.0);
        assert_relative_eq!(gaussian_weight(&s, &x, 3.0).unwrap(), 0.606_530_659_712_633_4, epsilon = 1e-12);
    }

    #[test]
    fn weight_truncated_beyond_three_sigma() {
        let s = unit_splat();
        let x = s.mu + Vector3::new(4.0, 0.0, 0.0);
        assert_eq!(gaussian_weight(&s, &x, 3.0).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_covariance_is_rejected() {
        let mut s = unit_splat();
        s.log_scale = Vector3::new(0.0, 0.0, -20.0);
        assert!(matches!(
            gaussian_weight(&s, &s.mu, 3.0),
            Err(Error::DegenerateCovariance { .. })
        ));
    }

    #[test]
    fn rotation_matrix_is_orthonormal_for_unnormalized_quaternion() {
        let mut s = unit_splat();
        s.rotation = [2.0, 0.3, -1.1, 0.7];
        let r = s.rotation_matrix::<f64>();
        assert_relative_eq!(r * r.transpose(), Matrix3::identity(), epsilon = 1e-12);
        assert_relative_eq!(r.determinant(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn sh_degree_inference() {
        assert_eq!(sh_degree_for_len(1), 0);
        assert_eq!(sh_degree_for_len(4), 1);
        assert_eq!(sh_degree_for_len(9), 2);
        assert_eq!(sh_degree_for_len(16), 3);
    }

    #[test]
    fn dc_round_trip() {
        let rgb = [0.1, 0.5, 0.9];
        let back = dc_to_rgb(rgb_to_dc(rgb));
        for i in 0..3 {
            assert_relative_eq!(back[i], rgb[i], epsilon = 1e-15);
        }
    }
}
