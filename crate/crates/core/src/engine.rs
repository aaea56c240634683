//! Per-subset partial renders, their per-ray merge, and the merge adjoint.
//!
//! A subset renders only the splats whose ray intersection point lies in its
//! subspace, producing a background-free color `C_k` and a transmittance
//! `T_k` per pixel. Compositing the partials in the order the ray crosses the
//! subspaces reproduces the single-worker render.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backward::gradients_from_view;
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::grad::GradBuffers;
use crate::partition::{subspace_order, PartitionTable, Subspace};
use crate::project::{RenderSettings, Splat2D};
use crate::raster::{ProjectedView, RenderedImage};
use crate::scalar::{c, Real};
use crate::splat::Splat;

/// Whether partial renders apply the subspace indicator.
///
/// `Disabled` exists only as a negative control: every member of `N_k`
/// then contributes wherever its footprint lands.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Gating {
    Indicator,
    Disabled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartialImage<T: Real> {
    pub k: usize,
    pub view_id: u64,
    pub width: u32,
    pub height: u32,
    /// Row-major `H x W x 3`.
    pub color: Vec<T>,
    /// Row-major `H x W`.
    pub transmittance: Vec<T>,
}

impl<T: Real> PartialImage<T> {
    /// The partial of a subset that no ray enters.
    pub fn idle(k: usize, view_id: u64, width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        PartialImage {
            k,
            view_id,
            width,
            height,
            color: vec![T::zero(); 3 * n],
            transmittance: vec![T::one(); n],
        }
    }

    pub fn pixel(&self, px: u32, py: u32) -> (Vector3<T>, T) {
        let i = py as usize * self.width as usize + px as usize;
        (
            Vector3::new(self.color[3 * i], self.color[3 * i + 1], self.color[3 * i + 2]),
            self.transmittance[i],
        )
    }

    pub fn cast<U: Real>(&self) -> PartialImage<U> {
        PartialImage {
            k: self.k,
            view_id: self.view_id,
            width: self.width,
            height: self.height,
            color: self.color.iter().map(|v| U::of(v.to_f64())).collect(),
            transmittance: self.transmittance.iter().map(|v| U::of(v.to_f64())).collect(),
        }
    }
}

fn gate_for<'a, T: Real>(subspace: &'a Subspace, gating: Gating) -> impl Fn(&Splat2D<T>, &Vector3<T>) -> bool + Sync + 'a {
    move |_, x| gating == Gating::Disabled || subspace.contains(x)
}

/// Partial render of an already projected subset.
pub fn partial_from_view<T: Real>(
    pv: &ProjectedView<T>,
    subspace: &Subspace,
    view_id: u64,
    gating: Gating,
) -> PartialImage<T> {
    let img = pv.render_gated(&Vector3::zeros(), &gate_for(subspace, gating));
    PartialImage {
        k: subspace.k,
        view_id,
        width: img.width,
        height: img.height,
        color: img.color,
        transmittance: img.transmittance,
    }
}

/// `(C_k, T_k)` for the splats of one subset.
pub fn partial_render<T: Real>(
    splats: &[Splat],
    subspace: &Subspace,
    camera: &Camera,
    view_id: u64,
    settings: &RenderSettings,
    gating: Gating,
) -> PartialImage<T> {
    let pv = ProjectedView::new(splats, camera, settings);
    partial_from_view(&pv, subspace, view_id, gating)
}

/// Gradients of a subset's splats given cotangents on its partial maps.
pub fn partial_backward<T: Real>(
    splats: &[Splat],
    pv: &ProjectedView<T>,
    subspace: &Subspace,
    gating: Gating,
    grad_color: &[T],
    grad_t: &[T],
) -> Result<GradBuffers> {
    let g2d = pv.backward_gated(&Vector3::zeros(), grad_color, grad_t, &gate_for(subspace, gating));
    let grads = gradients_from_view(splats, pv, &g2d);
    grads.check_finite()?;
    Ok(grads)
}

/// Per-pixel subspace traversal order, stored row-major in compressed form.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MergeOrder {
    pub width: u32,
    pub height: u32,
    offsets: Vec<u32>,
    ks: Vec<u16>,
}

impl MergeOrder {
    pub fn compute<T: Real>(camera: &Camera, table: &PartitionTable) -> Self {
        let view = camera.view::<T>();
        let (w, h) = (camera.width, camera.height);
        let rows: Vec<Vec<Vec<u16>>> = (0..h)
            .into_par_iter()
            .map(|py| {
                (0..w)
                    .map(|px| {
                        subspace_order(&view.pixel_ray(px, py), table)
                            .into_iter()
                            .map(|k| k as u16)
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let mut offsets = Vec::with_capacity((w * h) as usize + 1);
        let mut ks = Vec::new();
        offsets.push(0);
        for row in rows {
            for order in row {
                ks.extend(order);
                offsets.push(ks.len() as u32);
            }
        }
        MergeOrder {
            width: w,
            height: h,
            offsets,
            ks,
        }
    }

    /// The same order for every pixel.
    pub fn uniform(width: u32, height: u32, order: &[usize]) -> Self {
        let n = (width * height) as usize;
        MergeOrder {
            width,
            height,
            offsets: (0..=n).map(|i| (i * order.len()) as u32).collect(),
            ks: (0..n).flat_map(|_| order.iter().map(|&k| k as u16)).collect(),
        }
    }

    #[inline]
    pub fn at(&self, pixel: usize) -> &[u16] {
        &self.ks[self.offsets[pixel] as usize..self.offsets[pixel + 1] as usize]
    }

    fn max_k(&self) -> Option<usize> {
        self.ks.iter().max().map(|&k| k as usize)
    }
}

fn index_partials<'a, T: Real>(partials: &'a [PartialImage<T>], order: &MergeOrder) -> Result<Vec<Option<&'a PartialImage<T>>>> {
    let n = partials.iter().map(|p| p.k + 1).max().unwrap_or(0).max(order.max_k().map_or(0, |k| k + 1));
    let mut by_k: Vec<Option<&PartialImage<T>>> = vec![None; n];
    for p in partials {
        if p.width != order.width || p.height != order.height {
            return Err(Error::ResolutionMismatch {
                left_w: p.width as usize,
                left_h: p.height as usize,
                right_w: order.width as usize,
                right_h: order.height as usize,
            });
        }
        by_k[p.k] = Some(p);
    }
    let mut missing: Vec<usize> = order.ks.iter().map(|&k| k as usize).filter(|&k| by_k[k].is_none()).collect();
    if !missing.is_empty() {
        missing.sort_unstable();
        missing.dedup();
        return Err(Error::MissingPartial(missing));
    }
    Ok(by_k)
}

/// Composites partials per pixel in traversal order, then the background.
pub fn merge<T: Real>(partials: &[PartialImage<T>], order: &MergeOrder, background: &Vector3<f64>) -> Result<RenderedImage<T>> {
    let by_k = index_partials(partials, order)?;
    let bg: Vector3<T> = background.map(c);
    let n = (order.width * order.height) as usize;
    let mut color = vec![T::zero(); 3 * n];
    let mut transmittance = vec![T::zero(); n];
    color
        .par_chunks_mut(3)
        .zip(transmittance.par_iter_mut())
        .enumerate()
        .for_each(|(i, (col, tr))| {
            let mut acc = Vector3::zeros();
            let mut t = T::one();
            for &k in order.at(i) {
                let p = by_k[k as usize].unwrap();
                let ck = Vector3::new(p.color[3 * i], p.color[3 * i + 1], p.color[3 * i + 2]);
                acc += ck * t;
                t *= p.transmittance[i];
            }
            let out = acc + bg * t;
            col.copy_from_slice(out.as_slice());
            *tr = t;
        });
    Ok(RenderedImage {
        width: order.width,
        height: order.height,
        color,
        transmittance,
        background: bg,
    })
}

/// Cotangents `(dL/dC_k, dL/dT_k)` for each partial, in the order of
/// `partials`, given cotangents on the merged color and transmittance.
pub fn merge_backward<T: Real>(
    partials: &[PartialImage<T>],
    order: &MergeOrder,
    background: &Vector3<f64>,
    grad_color: &[T],
    grad_t: &[T],
) -> Result<Vec<(Vec<T>, Vec<T>)>> {
    let by_k = index_partials(partials, order)?;
    let slot_of: BTreeMap<usize, usize> = partials.iter().enumerate().map(|(i, p)| (p.k, i)).collect();
    let bg: Vector3<T> = background.map(c);
    let n = (order.width * order.height) as usize;
    let mut out: Vec<(Vec<T>, Vec<T>)> = partials.iter().map(|_| (vec![T::zero(); 3 * n], vec![T::zero(); n])).collect();
    // Rows are independent; compute per row then scatter.
    let rows: Vec<Vec<(usize, usize, Vector3<T>, T)>> = (0..order.height as usize)
        .into_par_iter()
        .map(|py| {
            let mut res = Vec::new();
            let mut prefix = Vec::new();
            for px in 0..order.width as usize {
                let i = py * order.width as usize + px;
                let ks = order.at(i);
                let g = Vector3::new(grad_color[3 * i], grad_color[3 * i + 1], grad_color[3 * i + 2]);
                prefix.clear();
                let mut t = T::one();
                for &k in ks {
                    prefix.push(t);
                    t *= by_k[k as usize].unwrap().transmittance[i];
                }
                // Value downstream of position j per unit light reaching j + 1.
                let mut rest = g.dot(&bg) + grad_t[i];
                for (j, &k) in ks.iter().enumerate().rev() {
                    let p = by_k[k as usize].unwrap();
                    let ck = Vector3::new(p.color[3 * i], p.color[3 * i + 1], p.color[3 * i + 2]);
                    res.push((i, slot_of[&(k as usize)], g * prefix[j], prefix[j] * rest));
                    rest = g.dot(&ck) + p.transmittance[i] * rest;
                }
            }
            res
        })
        .collect();
    for row in rows {
        for (i, slot, gc, gt) in row {
            out[slot].0[3 * i..3 * i + 3].copy_from_slice(gc.as_slice());
            out[slot].1[i] = gt;
        }
    }
    Ok(out)
}

/// Number of subsets in which each splat contributes on pixel `(px, py)`.
pub fn contribution_counts<T: Real>(
    subsets: &[(&ProjectedView<T>, &Subspace)],
    px: u32,
    py: u32,
    gating: Gating,
) -> BTreeMap<u64, u32> {
    let mut counts = BTreeMap::new();
    let mut buf = Vec::new();
    for (pv, sub) in subsets {
        pv.samples_into(px, py, &gate_for(sub, gating), &mut buf);
        for s in &buf {
            *counts.entry(s.id).or_insert(0) += 1;
        }
    }
    counts
}

/// Splats of subset `k` in id order.
pub fn subset_splats(table: &PartitionTable, k: usize, splats: &[Splat]) -> Vec<Splat> {
    let ids = &table.membership[k];
    splats.iter().filter(|s| ids.binary_search(&s.id).is_ok()).cloned().collect()
}

/// Renders every subset in-process and merges: the reference distributed
/// path without any transport.
pub fn render_partitioned<T: Real>(
    splats: &[Splat],
    table: &PartitionTable,
    camera: &Camera,
    background: &Vector3<f64>,
    settings: &RenderSettings,
    gating: Gating,
) -> Result<(RenderedImage<T>, Vec<PartialImage<T>>)> {
    let partials: Vec<PartialImage<T>> = table
        .subspaces
        .iter()
        .map(|sub| partial_render(&subset_splats(table, sub.k, splats), sub, camera, 0, settings, gating))
        .collect();
    let order = MergeOrder::compute::<T>(camera, table);
    Ok((merge(&partials, &order, background)?, partials))
}

/// Outcome of rendering with a camera whose optical axis lies in the plane
/// splitting two subspaces.
#[derive(Clone, Debug)]
pub struct BoundaryReport {
    pub partials: Vec<PartialImage<f64>>,
    pub merged: RenderedImage<f64>,
    /// Pixels never entering subspace `k` whose partial is not exactly `(0, 1)`.
    pub offending: Vec<(usize, u32, u32)>,
    /// Off-side pixel count per subspace.
    pub off_side: Vec<usize>,
}

impl BoundaryReport {
    pub fn passed(&self) -> bool {
        self.offending.is_empty() && self.off_side.iter().all(|&n| n > 0)
    }
}

/// Checks that each partial is exactly idle wherever its subspace is not
/// crossed by the pixel ray.
pub fn boundary_validity_test(
    splats: &[Splat],
    table: &PartitionTable,
    camera: &Camera,
    background: &Vector3<f64>,
    settings: &RenderSettings,
    gating: Gating,
) -> Result<BoundaryReport> {
    let (merged, partials) = render_partitioned::<f64>(splats, table, camera, background, settings, gating)?;
    let order = MergeOrder::compute::<f64>(camera, table);
    let mut offending = Vec::new();
    let mut off_side = vec![0; table.len()];
    for py in 0..camera.height {
        for px in 0..camera.width {
            let i = (py * camera.width + px) as usize;
            for p in &partials {
                if order.at(i).contains(&(p.k as u16)) {
                    continue;
                }
                off_side[p.k] += 1;
                let (ck, tk) = p.pixel(px, py);
                if ck != Vector3::zeros() || tk != 1.0 {
                    offending.push((p.k, px, py));
                }
            }
        }
    }
    Ok(BoundaryReport {
        partials,
        merged,
        offending,
        off_side,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::from_plane;

    fn partial(k: usize, c: f64, t: f64) -> PartialImage<f64> {
        PartialImage {
            k,
            view_id: 0,
            width: 1,
            height: 1,
            color: vec![c, c, c],
            transmittance: vec![t],
        }
    }

    #[test]
    fn two_subset_merge_by_hand() {
        let parts = [partial(0, 0.3, 0.5), partial(1, 0.4, 0.8)];
        let order = MergeOrder::uniform(1, 1, &[0, 1]);
        let img = merge(&parts, &order, &Vector3::zeros()).unwrap();
        approx::assert_relative_eq!(img.color[0], 0.5, epsilon = 1e-15);
        approx::assert_relative_eq!(img.transmittance[0], 0.4, epsilon = 1e-15);
    }

    #[test]
    fn single_subset_merge_adds_background() {
        let parts = [partial(0, 0.3, 0.5)];
        let order = MergeOrder::uniform(1, 1, &[0]);
        let img = merge(&parts, &order, &Vector3::new(0.2, 0.2, 0.2)).unwrap();
        assert_eq!(img.color[0], 0.3 + 0.5 * 0.2);
    }

    #[test]
    fn missing_partial_is_reported() {
        let order = MergeOrder::uniform(1, 1, &[0, 1]);
        let err = merge(&[partial(0, 0.3, 0.5)], &order, &Vector3::zeros()).unwrap_err();
        assert!(matches!(err, Error::MissingPartial(ref ks) if ks == &[1]));
    }

    #[test]
    fn merge_adjoint_by_hand() {
        let parts = [partial(0, 0.3, 0.5), partial(1, 0.4, 0.8)];
        let order = MergeOrder::uniform(1, 1, &[0, 1]);
        let g = merge_backward(&parts, &order, &Vector3::zeros(), &[1.0, 0.0, 0.0], &[0.0]).unwrap();
        assert_eq!(g[0].0, vec![1.0, 0.0, 0.0]);
        assert_eq!(g[1].0, vec![0.5, 0.0, 0.0]);
        approx::assert_relative_eq!(g[0].1[0], 0.4, epsilon = 1e-15);
        assert_eq!(g[1].1[0], 0.0);
    }

    #[test]
    fn single_subset_adjoint() {
        let parts = [partial(0, 0.3, 0.5)];
        let order = MergeOrder::uniform(1, 1, &[0]);
        let bg = Vector3::new(0.1, 0.2, 0.3);
        let g = merge_backward(&parts, &order, &bg, &[1.0, 2.0, 3.0], &[0.5]).unwrap();
        assert_eq!(g[0].0, vec![1.0, 2.0, 3.0]);
        approx::assert_relative_eq!(g[0].1[0], 0.1 + 0.4 + 0.9 + 0.5, epsilon = 1e-15);
    }

    #[test]
    fn single_splat_partial() {
        let cam = Camera::new(32, 32, 40.0, 40.0, 16.0, 16.0, [1.0, 0.0, 0.0, 0.0], Vector3::zeros()).unwrap();
        let mu = cam.pixel_ray(16, 16).at(3.0);
        let s = Splat::isotropic(0, mu, 0.05, 0.6, [1.0, 0.0, 0.0]);
        let table = from_plane(Vector3::x(), -100.0);
        let p = partial_render::<f64>(&[s], &table.subspaces[0], &cam, 0, &RenderSettings::oracle(), Gating::Indicator);
        let (ck, tk) = p.pixel(16, 16);
        approx::assert_relative_eq!(ck.x, 0.6, epsilon = 1e-12);
        approx::assert_relative_eq!(tk, 0.4, epsilon = 1e-12);
        let (ck, tk) = p.pixel(0, 0);
        assert_eq!((ck, tk), (Vector3::zeros(), 1.0));
    }
}
