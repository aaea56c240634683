//! Analytic adjoint of the forward renderer.
//!
//! The pass runs in two stages. Per pixel, the compositing adjoint produces
//! screen-space gradients (mean, conic, opacity, color) that are summed per
//! projected splat; rows are split into a fixed number of bands whose
//! partial sums are reduced in band order, so results do not depend on the
//! thread count. Per splat, those screen-space gradients are pushed through
//! projection, covariance, SH and activations to the stored parameters.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::camera::{Camera, ViewContext};
use crate::error::Result;
use crate::grad::{GradBuffers, SplatGrad};
use crate::project::{perspective_jacobian, RenderSettings, Sample, Splat2D};
use crate::raster::{ungated, ProjectedView};
use crate::scalar::{c, Real};
use crate::sh;
use crate::splat::{normalize_quat, sh_coeffs_for_degree, Splat};

const BANDS: u32 = 16;

/// Screen-space gradient of one projected splat.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Grad2D<T: Real> {
    pub mean: Vector2<T>,
    /// Entry-wise gradient of the conic matrix: `(d/da, d/db, d/dc)` where
    /// `d/db` is the gradient of each (equal) off-diagonal entry.
    pub conic: [T; 3],
    pub alpha: T,
    pub color: Vector3<T>,
}

impl<T: Real> Grad2D<T> {
    fn add(&mut self, o: &Grad2D<T>) {
        self.mean += o.mean;
        for i in 0..3 {
            self.conic[i] += o.conic[i];
        }
        self.alpha += o.alpha;
        self.color += o.color;
    }
}

impl<T: Real> ProjectedView<T> {
    /// Screen-space gradients of `sum(grad_color * color) + sum(grad_t * T)`
    /// for the image produced by [`ProjectedView::render_gated`] with the same
    /// gate and background.
    pub fn backward_gated(
        &self,
        background: &Vector3<T>,
        grad_color: &[T],
        grad_t: &[T],
        gate: &(impl Fn(&Splat2D<T>, &Vector3<T>) -> bool + Sync),
    ) -> Vec<Grad2D<T>> {
        let (w, h) = (self.width(), self.height());
        assert_eq!(grad_color.len(), 3 * (w * h) as usize);
        assert_eq!(grad_t.len(), (w * h) as usize);
        let rows_per_band = h.div_ceil(BANDS).max(1);
        let n = self.splats.len();
        let bands: Vec<Vec<Grad2D<T>>> = (0..h.div_ceil(rows_per_band))
            .into_par_iter()
            .map(|band| {
                let mut acc = vec![Grad2D::default(); n];
                let mut buf = Vec::new();
                let mut trans = Vec::new();
                for py in band * rows_per_band..((band + 1) * rows_per_band).min(h) {
                    for px in 0..w {
                        let idx = (py * w + px) as usize;
                        let gc = Vector3::new(grad_color[3 * idx], grad_color[3 * idx + 1], grad_color[3 * idx + 2]);
                        let gt = grad_t[idx];
                        if gc == Vector3::zeros() && gt == T::zero() {
                            continue;
                        }
                        self.samples_into(px, py, gate, &mut buf);
                        self.backward_pixel(px, py, &buf, background, gc, gt, &mut trans, &mut acc);
                    }
                }
                acc
            })
            .collect();
        let mut total = vec![Grad2D::default(); n];
        for band in &bands {
            for (t, b) in total.iter_mut().zip(band) {
                t.add(b);
            }
        }
        total
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_pixel(
        &self,
        px: u32,
        py: u32,
        samples: &[Sample<T>],
        background: &Vector3<T>,
        gc: Vector3<T>,
        gt: T,
        trans: &mut Vec<T>,
        acc: &mut [Grad2D<T>],
    ) {
        let stop = c::<T>(self.settings.stop_threshold);
        let max_sigma = c::<T>(self.settings.max_sigma);
        // Replay the forward pass to find the transmittance in front of each
        // composited sample and where termination happened.
        trans.clear();
        let mut t_run = T::one();
        for s in samples {
            trans.push(t_run);
            t_run *= T::one() - s.sigma;
            if t_run < stop {
                break;
            }
        }
        let used = trans.len();
        let pixel = self.view.pixel_center(px, py);
        // `behind`: color seen behind sample i, relative to the light reaching it.
        // `rest`: product of (1 - sigma) over samples after i.
        let mut behind = *background;
        let mut rest = T::one();
        for i in (0..used).rev() {
            let s = &samples[i];
            let sp = &self.splats[s.slot as usize];
            let t_i = trans[i];
            let col = sp.color;
            let d_sigma = gc.dot(&(col - behind)) * t_i - gt * t_i * rest;
            let g = &mut acc[s.slot as usize];
            g.color += gc * (s.sigma * t_i);
            if sp.alpha * s.g < max_sigma {
                g.alpha += d_sigma * s.g;
                let d_g = d_sigma * sp.alpha;
                let d_m = -c::<T>(0.5) * s.g * d_g;
                let dx = pixel - sp.mean2d;
                let [a, b, cc] = sp.conic;
                g.mean -= Vector2::new(a * dx.x + b * dx.y, b * dx.x + cc * dx.y) * (c::<T>(2.0) * d_m);
                g.conic[0] += d_m * dx.x * dx.x;
                g.conic[1] += d_m * dx.x * dx.y;
                g.conic[2] += d_m * dx.y * dx.y;
            }
            behind = col * s.sigma + behind * (T::one() - s.sigma);
            rest *= T::one() - s.sigma;
        }
    }
}

/// Pushes a splat's screen-space gradient back to its stored parameters.
pub fn chain_to_splat<T: Real>(
    splat: &Splat,
    s2d: &Splat2D<T>,
    g2d: &Grad2D<T>,
    view: &ViewContext<T>,
    settings: &RenderSettings,
) -> SplatGrad {
    let mut out = SplatGrad::zeros_like(splat);
    let two = c::<T>(2.0);

    // Activations.
    let alpha = s2d.alpha;
    out.opacity_logit = (g2d.alpha * alpha * (T::one() - alpha)).to_f64();

    // Conic -> 2D covariance: dCov = -A dA A.
    let [a, b, cc] = s2d.conic;
    let conic = Matrix2::new(a, b, b, cc);
    let g_conic = Matrix2::new(g2d.conic[0], g2d.conic[1], g2d.conic[1], g2d.conic[2]);
    let g_cov = -(conic * g_conic * conic);

    let mu = s2d.mu;
    let p = view.rot * mu + view.trans;
    let j = perspective_jacobian(view, &p);
    let sigma3 = splat.covariance::<T>();
    let sigma_cam = view.rot * sigma3 * view.rot.transpose();

    let g_sigma_cam = j.transpose() * g_cov * j;
    let g_j = g_cov * j * sigma_cam * two;
    let g_sigma3 = view.rot.transpose() * g_sigma_cam * view.rot;

    // Sigma = M M^T with M = R S.
    let q = normalize_quat(&splat.rotation);
    let qt = q.map(c::<T>);
    let r = crate::splat::quat_to_matrix(&qt);
    let s = splat.log_scale.map(|v| c::<T>(v).exp());
    let m = r * Matrix3::from_diagonal(&s);
    let g_m = (g_sigma3 + g_sigma3.transpose()) * m;
    // Rotation only sees the anisotropic part: with dR = R W (W skew),
    // dSigma = R (W S^2 - S^2 W) R^T, so the tangent gradient is
    // H_ij (s_j^2 - s_i^2) with H = R^T sym(G) R. Equal scales give an exact
    // zero instead of a cancellation residue that Adam would amplify.
    let h = r.transpose() * (g_sigma3 + g_sigma3.transpose()) * r * c::<T>(0.5);
    let s2 = s.component_mul(&s);
    let tangent = Matrix3::from_fn(|i, j| h[(i, j)] * (s2[j] - s2[i]));
    let g_r = r * tangent;
    for k in 0..3 {
        let mut d_s = T::zero();
        for i in 0..3 {
            d_s += r[(i, k)] * g_m[(i, k)];
        }
        out.log_scale[k] = (d_s * s[k]).to_f64();
    }
    out.rotation = quat_grad(&splat.rotation, &q, &g_r.map(|v| v.to_f64()));

    // Camera-space point from the mean and from the Jacobian entries.
    let inv_z = T::one() / p.z;
    let inv_z2 = inv_z * inv_z;
    let inv_z3 = inv_z2 * inv_z;
    let (fx, fy) = (view.fx, view.fy);
    let mut g_p = Vector3::new(
        g2d.mean.x * fx * inv_z,
        g2d.mean.y * fy * inv_z,
        -(g2d.mean.x * fx * p.x + g2d.mean.y * fy * p.y) * inv_z2,
    );
    g_p.x -= g_j[(0, 2)] * fx * inv_z2;
    g_p.y -= g_j[(1, 2)] * fy * inv_z2;
    g_p.z += -g_j[(0, 0)] * fx * inv_z2 + g_j[(0, 2)] * two * fx * p.x * inv_z3 - g_j[(1, 1)] * fy * inv_z2
        + g_j[(1, 2)] * two * fy * p.y * inv_z3;
    let mut g_mu = view.rot.transpose() * g_p;

    // View-dependent color.
    let deg = settings.sh_degree.min(splat.sh_degree()).min(sh::MAX_DEGREE);
    let to_splat = mu - view.center;
    let dist = to_splat.norm();
    let dir = to_splat / dist;
    let mut basis = [T::zero(); 16];
    sh::basis(&dir, deg, &mut basis);
    let mut g_col = g2d.color;
    for ch in 0..3 {
        if !s2d.color_mask[ch] {
            g_col[ch] = T::zero();
        }
    }
    for k in 0..sh_coeffs_for_degree(deg) {
        for ch in 0..3 {
            out.sh[k][ch] = (basis[k] * g_col[ch]).to_f64();
        }
    }
    if deg > 0 {
        let mut dbasis = [Vector3::zeros(); 16];
        sh::basis_grad(&dir, deg, &mut dbasis);
        let mut g_dir = Vector3::zeros();
        for k in 1..sh_coeffs_for_degree(deg) {
            let coeff = splat.sh[k];
            let w = g_col[0] * c::<T>(coeff[0]) + g_col[1] * c::<T>(coeff[1]) + g_col[2] * c::<T>(coeff[2]);
            g_dir += dbasis[k] * w;
        }
        g_mu += (g_dir - dir * dir.dot(&g_dir)) / dist;
    }
    out.mu = g_mu.map(|v| v.to_f64());
    out
}

/// Gradient with respect to the raw quaternion, given the gradient with
/// respect to the rotation matrix built from its normalized form `q`.
fn quat_grad(raw: &[f64; 4], q: &[f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let gq = [
        2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)] + x * g[(2, 1)]),
        2.0 * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)] + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]),
        2.0 * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)] - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]),
        2.0 * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)] - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]),
    ];
    let norm = (raw[0] * raw[0] + raw[1] * raw[1] + raw[2] * raw[2] + raw[3] * raw[3]).sqrt();
    let dot: f64 = (0..4).map(|i| gq[i] * q[i]).sum();
    std::array::from_fn(|i| (gq[i] - q[i] * dot) / norm)
}

/// Gradients of the given image-space cotangents with respect to every
/// splat parameter, for the view rendered by `render_view` with the same
/// inputs.
pub fn render_backward<T: Real>(
    splats: &[Splat],
    camera: &Camera,
    background: &Vector3<f64>,
    grad_color: &[T],
    grad_t: &[T],
    settings: &RenderSettings,
) -> Result<GradBuffers> {
    let pv = ProjectedView::<T>::new(splats, camera, settings);
    let g2d = pv.backward_gated(&background.map(c), grad_color, grad_t, &ungated);
    let grads = gradients_from_view(splats, &pv, &g2d);
    grads.check_finite()?;
    Ok(grads)
}

/// Applies [`chain_to_splat`] to every projected splat.
pub fn gradients_from_view<T: Real>(splats: &[Splat], pv: &ProjectedView<T>, g2d: &[Grad2D<T>]) -> GradBuffers {
    let mut out = GradBuffers::zeros(splats);
    let chained: Vec<(usize, SplatGrad)> = pv
        .splats
        .par_iter()
        .zip(g2d.par_iter())
        .filter(|(_, g)| **g != Grad2D::default())
        .map(|(s2d, g)| (s2d.index, chain_to_splat(&splats[s2d.index], s2d, g, &pv.view, &pv.settings)))
        .collect();
    for (i, g) in chained {
        out.grads[i] = g;
    }
    out
}
