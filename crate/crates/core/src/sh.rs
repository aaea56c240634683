//! Real spherical-harmonic color, degrees 0 through 3.
//!
//! Basis ordering and signs follow the common Gaussian splatting convention;
//! the evaluated color is offset by 0.5 and clamped at zero.

use nalgebra::Vector3;

use crate::scalar::{c, Real};

const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

pub const MAX_DEGREE: usize = 3;

/// Basis values for `deg`, written into `out[..(deg+1)^2]`.
pub fn basis<T: Real>(dir: &Vector3<T>, deg: usize, out: &mut [T; 16]) {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    out[0] = c(C0);
    if deg == 0 {
        return;
    }
    let c1: T = c(C1);
    out[1] = -c1 * y;
    out[2] = c1 * z;
    out[3] = -c1 * x;
    if deg == 1 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, yz, xz) = (x * y, y * z, x * z);
    let two: T = c(2.0);
    let three: T = c(3.0);
    let four: T = c(4.0);
    out[4] = c::<T>(C2[0]) * xy;
    out[5] = c::<T>(C2[1]) * yz;
    out[6] = c::<T>(C2[2]) * (two * zz - xx - yy);
    out[7] = c::<T>(C2[3]) * xz;
    out[8] = c::<T>(C2[4]) * (xx - yy);
    if deg == 2 {
        return;
    }
    out[9] = c::<T>(C3[0]) * y * (three * xx - yy);
    out[10] = c::<T>(C3[1]) * xy * z;
    out[11] = c::<T>(C3[2]) * y * (four * zz - xx - yy);
    out[12] = c::<T>(C3[3]) * z * (two * zz - three * xx - three * yy);
    out[13] = c::<T>(C3[4]) * x * (four * zz - xx - yy);
    out[14] = c::<T>(C3[5]) * z * (xx - yy);
    out[15] = c::<T>(C3[6]) * x * (xx - three * yy);
}

/// Partial derivatives of each basis function with respect to the
/// (unnormalized-in-use) direction components.
pub fn basis_grad<T: Real>(dir: &Vector3<T>, deg: usize, out: &mut [Vector3<T>; 16]) {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let zero = T::zero();
    out[0] = Vector3::zeros();
    if deg == 0 {
        return;
    }
    let c1: T = c(C1);
    out[1] = Vector3::new(zero, -c1, zero);
    out[2] = Vector3::new(zero, zero, c1);
    out[3] = Vector3::new(-c1, zero, zero);
    if deg == 1 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let two: T = c(2.0);
    let three: T = c(3.0);
    let four: T = c(4.0);
    let six: T = c(6.0);
    let eight: T = c(8.0);
    out[4] = Vector3::new(y, x, zero) * c::<T>(C2[0]);
    out[5] = Vector3::new(zero, z, y) * c::<T>(C2[1]);
    out[6] = Vector3::new(-two * x, -two * y, four * z) * c::<T>(C2[2]);
    out[7] = Vector3::new(z, zero, x) * c::<T>(C2[3]);
    out[8] = Vector3::new(two * x, -two * y, zero) * c::<T>(C2[4]);
    if deg == 2 {
        return;
    }
    out[9] = Vector3::new(six * x * y, three * xx - three * yy, zero) * c::<T>(C3[0]);
    out[10] = Vector3::new(y * z, x * z, x * y) * c::<T>(C3[1]);
    out[11] = Vector3::new(-two * x * y, four * zz - xx - three * yy, eight * y * z) * c::<T>(C3[2]);
    out[12] = Vector3::new(-six * x * z, -six * y * z, six * zz - three * xx - three * yy)
        * c::<T>(C3[3]);
    out[13] = Vector3::new(four * zz - three * xx - yy, -two * x * y, eight * x * z) * c::<T>(C3[4]);
    out[14] = Vector3::new(two * x * z, -two * y * z, xx - yy) * c::<T>(C3[5]);
    out[15] = Vector3::new(three * xx - three * yy, -six * x * y, zero) * c::<T>(C3[6]);
}

/// SH color seen from `view_dir` (unit), `0.5` offset, clamped at zero.
///
/// Returns the color and, per channel, whether the clamp was inactive.
pub fn eval_sh_masked<T: Real>(sh: &[[f64; 3]], view_dir: &Vector3<T>, deg: usize) -> (Vector3<T>, [bool; 3]) {
    let deg = deg.min(crate::splat::sh_degree_for_len(sh.len())).min(MAX_DEGREE);
    let mut b = [T::zero(); 16];
    basis(view_dir, deg, &mut b);
    let mut raw = Vector3::repeat(c::<T>(0.5));
    for (k, coeff) in sh.iter().take(crate::splat::sh_coeffs_for_degree(deg)).enumerate() {
        for ch in 0..3 {
            raw[ch] += b[k] * c::<T>(coeff[ch]);
        }
    }
    let mut mask = [true; 3];
    for ch in 0..3 {
        if raw[ch] < T::zero() {
            raw[ch] = T::zero();
            mask[ch] = false;
        }
    }
    (raw, mask)
}

pub fn eval_sh<T: Real>(sh: &[[f64; 3]], view_dir: &Vector3<T>, deg: usize) -> Vector3<T> {
    eval_sh_masked(sh, view_dir, deg).0
}
