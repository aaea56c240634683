//! Pinhole cameras and per-pixel rays.
//!
//! Poses are world-to-camera (`p_cam = R(q_wc) p_world + t_wc`), with the
//! camera looking down +z, x to the right and y down the image.
//! Pixel `(px, py)` samples the continuous image point `(px + 0.5, py + 0.5)`.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{c, Real};
use crate::splat::{normalize_quat, quat_to_matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation `(w, x, y, z)`.
    pub q_wc: [f64; 4],
    pub t_wc: Vector3<f64>,
}

impl Camera {
    pub fn new(
        width: u32,
        height: u32,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        q_wc: [f64; 4],
        t_wc: Vector3<f64>,
    ) -> Result<Self> {
        // Already-unit rotations are kept bit-for-bit so poses survive a save and load.
        let norm = q_wc.iter().map(|v| v * v).sum::<f64>().sqrt();
        let q_wc = if (norm - 1.0).abs() <= 1e-12 { q_wc } else { normalize_quat(&q_wc) };
        let cam = Camera {
            width,
            height,
            fx,
            fy,
            cx,
            cy,
            q_wc,
            t_wc,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera("zero-sized image".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidCamera(format!("focal lengths must be positive (fx={}, fy={})", self.fx, self.fy)));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64 && self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(Error::InvalidCamera(format!(
                "principal point ({}, {}) outside the {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        let q = &self.q_wc;
        let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidCamera(format!("rotation quaternion norm {n}")));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`; `up` is the world direction that
    /// should appear upward in the image.
    pub fn look_at(
        width: u32,
        height: u32,
        focal: f64,
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-12 {
            return Err(Error::InvalidCamera("up vector parallel to viewing direction".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        // Rows are the camera axes expressed in world coordinates.
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let q = matrix_to_quat(&r);
        let t = -(quat_to_matrix(&q) * eye);
        Camera::new(width, height, focal, focal, width as f64 / 2.0, height as f64 / 2.0, q, t)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        quat_to_matrix(&normalize_quat(&self.q_wc))
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.t_wc)
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.t_wc
    }

    /// Pinhole projection; `None` for points at or behind the camera plane.
    pub fn project(&self, p: &Vector3<f64>) -> Option<Vector2<f64>> {
        let q = self.world_to_camera(p);
        if q.z <= 0.0 {
            return None;
        }
        Some(Vector2::new(self.fx * q.x / q.z + self.cx, self.fy * q.y / q.z + self.cy))
    }

    /// Ray through the continuous image point `(u, v)`.
    pub fn ray_through(&self, u: f64, v: f64) -> Ray<f64> {
        let d_cam = Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        Ray {
            o: self.center(),
            d: (self.rotation().transpose() * d_cam).normalize(),
        }
    }

    /// Ray through the center of pixel `(px, py)`.
    pub fn pixel_ray(&self, px: u32, py: u32) -> Ray<f64> {
        self.view::<f64>().pixel_ray(px, py)
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn view<T: Real>(&self) -> ViewContext<T> {
        ViewContext::new(self)
    }
}

/// Rotation matrix to unit quaternion `(w, x, y, z)`.
pub fn matrix_to_quat(r: &Matrix3<f64>) -> [f64; 4] {
    let trace = r[(0, 0)] + r[(1, 1)] + r[(2, 2)];
    let q = if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (r[(2, 1)] - r[(1, 2)]) / s,
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(1, 0)] - r[(0, 1)]) / s,
        ]
    } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
        let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
        [
            (r[(2, 1)] - r[(1, 2)]) / s,
            0.25 * s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
        ]
    } else if r[(1, 1)] > r[(2, 2)] {
        let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
        [
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            0.25 * s,
            (r[(1, 2)] + r[(2, 1)]) / s,
        ]
    } else {
        let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
        [
            (r[(1, 0)] - r[(0, 1)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
            (r[(1, 2)] + r[(2, 1)]) / s,
            0.25 * s,
        ]
    };
    normalize_quat(&q)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray<T: Real> {
    pub o: Vector3<T>,
    /// Unit direction.
    pub d: Vector3<T>,
}

impl<T: Real> Ray<T> {
    pub fn new(o: Vector3<T>, d: Vector3<T>) -> Result<Self> {
        let n = d.norm();
        if n == T::zero() || !n.is_finite() {
            return Err(Error::InvalidRay);
        }
        Ok(Ray { o, d: d / n })
    }

    pub fn at(&self, t: T) -> Vector3<T> {
        self.o + self.d * t
    }
}

/// Camera quantities converted once to the working scalar type.
#[derive(Clone, Debug)]
pub struct ViewContext<T: Real> {
    pub width: u32,
    pub height: u32,
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub rot: Matrix3<T>,
    pub trans: Vector3<T>,
    pub center: Vector3<T>,
}

impl<T: Real> ViewContext<T> {
    pub fn new(cam: &Camera) -> Self {
        let r = cam.rotation();
        ViewContext {
            width: cam.width,
            height: cam.height,
            fx: c(cam.fx),
            fy: c(cam.fy),
            cx: c(cam.cx),
            cy: c(cam.cy),
            rot: r.map(c),
            trans: cam.t_wc.map(c),
            center: cam.center().map(c),
        }
    }

    /// Continuous image coordinates of a pixel center.
    #[inline]
    pub fn pixel_center(&self, px: u32, py: u32) -> Vector2<T> {
        let half = c::<T>(0.5);
        Vector2::new(c::<T>(px as f64) + half, c::<T>(py as f64) + half)
    }

    #[inline]
    pub fn pixel_ray(&self, px: u32, py: u32) -> Ray<T> {
        let p = self.pixel_center(px, py);
        let d_cam = Vector3::new((p.x - self.cx) / self.fx, (p.y - self.cy) / self.fy, T::one());
        let d = self.rot.transpose() * d_cam;
        Ray {
            o: self.center,
            d: d / d.norm(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn identity_pose_sits_at_origin_looking_down_z() {
        let cam = Camera::new(100, 100, 100.0, 100.0, 50.0, 50.0, [1.0, 0.0, 0.0, 0.0], Vector3::zeros()).unwrap();
        assert_eq!(cam.center(), Vector3::zeros());
        let p = cam.project(&Vector3::new(0.0, 0.0, 2.0)).unwrap();
        assert_eq!(p, Vector2::new(50.0, 50.0));
    }

    #[test]
    fn invalid_intrinsics_are_rejected() {
        assert!(Camera::new(10, 10, 0.0, 1.0, 5.0, 5.0, [1.0, 0.0, 0.0, 0.0], Vector3::zeros()).is_err());
        assert!(Camera::new(10, 10, 1.0, 1.0, 10.0, 5.0, [1.0, 0.0, 0.0, 0.0], Vector3::zeros()).is_err());
    }

    #[test]
    fn look_at_centers_target() {
        let eye = Vector3::new(3.0, -1.0, 2.0);
        let target = Vector3::new(0.1, 0.2, -0.3);
        let cam = Camera::look_at(64, 48, 50.0, eye, target, Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_relative_eq!(cam.center(), eye, epsilon = 1e-12);
        let p = cam.project(&target).unwrap();
        assert_relative_eq!(p, Vector2::new(32.0, 24.0), epsilon = 1e-9);
        // World up maps to image up (negative v).
        let above = cam.project(&(target + Vector3::new(0.0, 0.0, 0.1))).unwrap();
        assert!(above.y < 24.0);
    }

    #[test]
    fn pixel_ray_passes_through_pixel_center() {
        let cam = Camera::look_at(40, 30, 35.0, Vector3::new(0.0, -4.0, 1.0), Vector3::zeros(), Vector3::z()).unwrap();
        let ray = cam.pixel_ray(7, 21);
        assert_relative_eq!(ray.d.norm(), 1.0, epsilon = 1e-12);
        let p = cam.project(&ray.at(3.0)).unwrap();
        assert_relative_eq!(p, Vector2::new(7.5, 21.5), epsilon = 1e-9);
    }

    #[test]
    fn quaternion_round_trip() {
        let cam = Camera::look_at(10, 10, 10.0, Vector3::new(1.0, 2.0, 3.0), Vector3::zeros(), Vector3::z()).unwrap();
        let r = cam.rotation();
        let q = matrix_to_quat(&r);
        assert_relative_eq!(quat_to_matrix(&q), r, epsilon = 1e-12);
    }
}
