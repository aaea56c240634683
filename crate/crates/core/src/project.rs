//! Projection of 3D splats to screen-space Gaussians and per-ray sampling.

use nalgebra::{Matrix2, Matrix2x3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, Ray, ViewContext};
use crate::scalar::{c, Real};
use crate::sh;
use crate::splat::{Splat, DEFAULT_TRUNCATION};

/// Ordering key used when compositing along a ray.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DepthKey {
    /// `t_i = d^T (u_i - o)` for each ray. Required for exact partial merging.
    PerRay,
    /// Camera-space z of the splat center, shared by all rays of a view.
    ViewZ,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderSettings {
    /// Active SH degree (capped by what each splat stores).
    pub sh_degree: usize,
    /// 2D truncation radius in standard deviations.
    pub truncation: f64,
    /// Multiplier on the largest semi-axis giving the reach `D_i`.
    pub reach_multiplier: f64,
    pub near: f64,
    /// Screen-space low-pass added to the projected covariance (pixel^2).
    pub cov_blur: f64,
    pub max_sigma: f64,
    /// Compositing stops once transmittance falls below this; 0 disables.
    pub stop_threshold: f64,
    pub depth_key: DepthKey,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            sh_degree: sh::MAX_DEGREE,
            truncation: DEFAULT_TRUNCATION,
            reach_multiplier: DEFAULT_TRUNCATION,
            near: 0.01,
            cov_blur: 0.3,
            max_sigma: 0.99,
            stop_threshold: 1e-4,
            depth_key: DepthKey::PerRay,
        }
    }
}

impl RenderSettings {
    /// Termination-free, per-ray ordering: the mode used for equivalence checks.
    pub fn oracle() -> Self {
        RenderSettings {
            stop_threshold: 0.0,
            ..Default::default()
        }
    }

    pub fn with_sh_degree(mut self, deg: usize) -> Self {
        self.sh_degree = deg;
        self
    }
}

/// A splat projected into one view.
#[derive(Clone, Debug)]
pub struct Splat2D<T: Real> {
    /// Position in the slice that was projected.
    pub index: usize,
    pub source_id: u64,
    pub mean2d: Vector2<T>,
    pub cov2d: Matrix2<T>,
    /// Inverse covariance `(a, b, c)` of `[[a, b], [b, c]]`.
    pub conic: [T; 3],
    /// Camera-space depth of the center.
    pub depth_key: T,
    pub color: Vector3<T>,
    /// Channels where the SH color clamp was inactive.
    pub color_mask: [bool; 3],
    pub alpha: T,
    pub mu: Vector3<T>,
    /// Reach `D_i`: rays farther than this from the center never see the splat.
    pub reach: T,
    /// Inclusive pixel bounds `[x0, x1, y0, y1]` of the truncated footprint.
    pub bbox: [u32; 4],
}

/// One splat's effect on one ray.
#[derive(Clone, Copy, Debug)]
pub struct Sample<T: Real> {
    /// Ray parameter of the splat center's projection onto the ray.
    pub t: T,
    pub key: T,
    pub id: u64,
    /// Index into the projected list.
    pub slot: u32,
    pub g: T,
    pub sigma: T,
}

pub fn project_splat<T: Real>(
    index: usize,
    splat: &Splat,
    view: &ViewContext<T>,
    settings: &RenderSettings,
) -> Option<Splat2D<T>> {
    let mu = splat.mu.map(c::<T>);
    let p = view.rot * mu + view.trans;
    if p.z <= c(settings.near) {
        return None;
    }
    let inv_z = T::one() / p.z;
    let mean2d = Vector2::new(view.fx * p.x * inv_z + view.cx, view.fy * p.y * inv_z + view.cy);
    let j = perspective_jacobian(view, &p);
    let sigma_cam = view.rot * splat.covariance::<T>() * view.rot.transpose();
    let mut cov2d = j * sigma_cam * j.transpose();
    let blur = c::<T>(settings.cov_blur);
    cov2d[(0, 0)] += blur;
    cov2d[(1, 1)] += blur;
    // Symmetrize so both off-diagonal entries agree exactly.
    let off = (cov2d[(0, 1)] + cov2d[(1, 0)]) * c::<T>(0.5);
    cov2d[(0, 1)] = off;
    cov2d[(1, 0)] = off;
    let det = cov2d[(0, 0)] * cov2d[(1, 1)] - off * off;
    if !(det > T::zero()) {
        return None;
    }
    let conic = [cov2d[(1, 1)] / det, -off / det, cov2d[(0, 0)] / det];

    let trunc = c::<T>(settings.truncation);
    let rx = trunc * cov2d[(0, 0)].sqrt();
    let ry = trunc * cov2d[(1, 1)].sqrt();
    let bbox = pixel_span(mean2d.x, rx, view.width).zip(pixel_span(mean2d.y, ry, view.height))?;

    let to_splat = mu - view.center;
    let dir = to_splat / to_splat.norm();
    let (color, color_mask) = sh::eval_sh_masked(&splat.sh, &dir, settings.sh_degree);
    Some(Splat2D {
        index,
        source_id: splat.id,
        mean2d,
        cov2d,
        conic,
        depth_key: p.z,
        color,
        color_mask,
        alpha: c(splat.alpha()),
        mu,
        reach: c(splat.reach(settings.reach_multiplier)),
        bbox: [bbox.0 .0, bbox.0 .1, bbox.1 .0, bbox.1 .1],
    })
}

/// Inclusive range of pixels whose centers fall in `[center - r, center + r]`.
fn pixel_span<T: Real>(center: T, r: T, size: u32) -> Option<(u32, u32)> {
    let half = c::<T>(0.5);
    let lo = (center - r - half).ceil();
    let hi = (center + r - half).floor();
    let lo = if lo < T::zero() { 0.0 } else { lo.to_f64() };
    let hi = hi.to_f64().min(size as f64 - 1.0);
    if !(lo <= hi) {
        return None;
    }
    Some((lo as u32, hi as u32))
}

pub(crate) fn perspective_jacobian<T: Real>(view: &ViewContext<T>, p: &Vector3<T>) -> Matrix2x3<T> {
    let inv_z = T::one() / p.z;
    let inv_z2 = inv_z * inv_z;
    Matrix2x3::new(
        view.fx * inv_z,
        T::zero(),
        -view.fx * p.x * inv_z2,
        T::zero(),
        view.fy * inv_z,
        -view.fy * p.y * inv_z2,
    )
}

pub fn project_all<T: Real>(splats: &[Splat], camera: &Camera, settings: &RenderSettings) -> Vec<Splat2D<T>> {
    let view = camera.view::<T>();
    splats
        .par_iter()
        .enumerate()
        .filter_map(|(i, s)| project_splat(i, s, &view, settings))
        .collect()
}

/// Screen-space Gaussian at a continuous pixel position (peak 1), zero
/// beyond `truncation` standard deviations.
pub fn eval_2d<T: Real>(s: &Splat2D<T>, pixel: &Vector2<T>, truncation: f64) -> T {
    let dx = pixel - s.mean2d;
    let m = s.conic[0] * dx.x * dx.x + c::<T>(2.0) * s.conic[1] * dx.x * dx.y + s.conic[2] * dx.y * dx.y;
    let tr = c::<T>(truncation);
    if m > tr * tr {
        return T::zero();
    }
    (-c::<T>(0.5) * m).exp()
}

/// Effective opacity `min(alpha * g, max_sigma)`.
pub fn opacity_at<T: Real>(s: &Splat2D<T>, pixel: &Vector2<T>, settings: &RenderSettings) -> T {
    let sigma = s.alpha * eval_2d(s, pixel, settings.truncation);
    sigma.min(c(settings.max_sigma))
}

/// Evaluates splat `s` on the ray of pixel `(px, py)`.
///
/// A splat takes part in a ray when the pixel lies inside its truncated
/// footprint, the center projects onto the ray in front of the camera
/// (`t > 0`), and the ray passes within the reach `D_i` of the center.
/// The last condition keeps the ray/splat intersection point inside the
/// region used to assign splats to subsets.
#[inline]
pub fn sample<T: Real>(
    s: &Splat2D<T>,
    slot: u32,
    px: u32,
    py: u32,
    pixel: &Vector2<T>,
    ray: &Ray<T>,
    settings: &RenderSettings,
) -> Option<(Sample<T>, Vector3<T>)> {
    if px < s.bbox[0] || px > s.bbox[1] || py < s.bbox[2] || py > s.bbox[3] {
        return None;
    }
    let g = eval_2d(s, pixel, settings.truncation);
    if g == T::zero() {
        return None;
    }
    let t = ray.d.dot(&(s.mu - ray.o));
    if !(t > T::zero()) {
        return None;
    }
    let x = ray.o + ray.d * t;
    if (x - s.mu).norm_squared() > s.reach * s.reach {
        return None;
    }
    let sigma = (s.alpha * g).min(c(settings.max_sigma));
    let key = match settings.depth_key {
        DepthKey::PerRay => t,
        DepthKey::ViewZ => s.depth_key,
    };
    Some((
        Sample {
            t,
            key,
            id: s.source_id,
            slot,
            g,
            sigma,
        },
        x,
    ))
}

pub fn sort_samples<T: Real>(samples: &mut [Sample<T>]) {
    samples.sort_unstable_by(|a, b| a.key.partial_cmp(&b.key).unwrap().then(a.id.cmp(&b.id)));
}

/// Per-tile lists of projected splats whose footprint touches the tile.
#[derive(Clone, Debug)]
pub struct TileBins {
    pub tile: u32,
    pub tiles_x: u32,
    pub tiles_y: u32,
    pub lists: Vec<Vec<u32>>,
}

impl TileBins {
    pub fn build<T: Real>(splats: &[Splat2D<T>], width: u32, height: u32, tile: u32) -> Self {
        let tiles_x = width.div_ceil(tile);
        let tiles_y = height.div_ceil(tile);
        let mut lists = vec![Vec::new(); (tiles_x * tiles_y) as usize];
        for (slot, s) in splats.iter().enumerate() {
            for ty in s.bbox[2] / tile..=s.bbox[3] / tile {
                for tx in s.bbox[0] / tile..=s.bbox[1] / tile {
                    lists[(ty * tiles_x + tx) as usize].push(slot as u32);
                }
            }
        }
        TileBins {
            tile,
            tiles_x,
            tiles_y,
            lists,
        }
    }

    #[inline]
    pub fn at(&self, px: u32, py: u32) -> &[u32] {
        &self.lists[((py / self.tile) * self.tiles_x + px / self.tile) as usize]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn axis_camera() -> Camera {
        Camera::new(100, 100, 100.0, 100.0, 50.0, 50.0, [1.0, 0.0, 0.0, 0.0], Vector3::zeros()).unwrap()
    }

    #[test]
    fn on_axis_splat_hits_principal_point() {
        let s = Splat::isotropic(0, Vector3::new(0.0, 0.0, 2.0), 0.1, 0.5, [0.5; 3]);
        let p = project_splat::<f64>(0, &s, &axis_camera().view(), &RenderSettings::default()).unwrap();
        assert_eq!(p.mean2d, Vector2::new(50.0, 50.0));
        assert_eq!(p.depth_key, 2.0);
    }

    #[test]
    fn behind_camera_is_culled() {
        let s = Splat::isotropic(0, Vector3::new(0.0, 0.0, -1.0), 0.1, 0.5, [0.5; 3]);
        assert!(project_splat::<f64>(0, &s, &axis_camera().view(), &RenderSettings::default()).is_none());
    }

    #[test]
    fn off_image_is_culled() {
        let s = Splat::isotropic(0, Vector3::new(50.0, 0.0, 2.0), 0.1, 0.5, [0.5; 3]);
        assert!(project_splat::<f64>(0, &s, &axis_camera().view(), &RenderSettings::default()).is_none());
    }

    #[test]
    fn isotropic_covariance_on_axis() {
        let (scale, z, f) = (0.05, 2.0, 100.0);
        let s = Splat::isotropic(0, Vector3::new(0.0, 0.0, z), scale, 0.5, [0.5; 3]);
        let p = project_splat::<f64>(0, &s, &axis_camera().view(), &RenderSettings::default()).unwrap();
        let expected = (f * scale / z).powi(2) + 0.3;
        assert_relative_eq!(p.cov2d[(0, 0)], expected, epsilon = 1e-12);
        assert_relative_eq!(p.cov2d[(1, 1)], expected, epsilon = 1e-12);
        assert_relative_eq!(p.cov2d[(0, 1)], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn eval_2d_values() {
        let s = Splat2D::<f64> {
            index: 0,
            source_id: 0,
            mean2d: Vector2::new(10.0, 20.0),
            cov2d: Matrix2::identity(),
            conic: [1.0, 0.0, 1.0],
            depth_key: 1.0,
            color: Vector3::zeros(),
            color_mask: [true; 3],
            alpha: 0.5,
            mu: Vector3::zeros(),
            reach: 1.0,
            bbox: [0, 100, 0, 100],
        };
        assert_eq!(eval_2d(&s, &Vector2::new(10.0, 20.0), 3.0), 1.0);
        assert_relative_eq!(eval_2d(&s, &Vector2::new(11.0, 20.0), 3.0), (-0.5f64).exp(), epsilon = 1e-15);
        assert_eq!(eval_2d(&s, &Vector2::new(13.5, 20.0), 3.0), 0.0);
        let settings = RenderSettings::default();
        let mut opaque = s.clone();
        opaque.alpha = 1.0;
        assert_eq!(opacity_at(&opaque, &Vector2::new(10.0, 20.0), &settings), 0.99);
    }

    #[test]
    fn pixel_span_clips_to_image() {
        assert_eq!(pixel_span(5.0f64, 2.0, 100), Some((3, 6)));
        assert_eq!(pixel_span(-1.0f64, 2.0, 100), Some((0, 0)));
        assert_eq!(pixel_span(-5.0f64, 2.0, 100), None);
        assert_eq!(pixel_span(99.0f64, 3.0, 100), Some((96, 99)));
    }
}
