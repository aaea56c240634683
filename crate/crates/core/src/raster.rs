//! Single-worker forward renderer.
//!
//! Every pixel is composited front to back over the splats it sees, sorted
//! by ray parameter with ties broken by id. Splats are binned into screen
//! tiles only to skip work: a splat outside a pixel's footprint contributes
//! exactly nothing, so binning does not change any value.

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;

use crate::camera::{Camera, Ray, ViewContext};
use crate::project::{project_all, sample, sort_samples, RenderSettings, Sample, Splat2D, TileBins};
use crate::scalar::{c, Real};
use crate::splat::Splat;

pub const TILE: u32 = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage<T: Real> {
    pub width: u32,
    pub height: u32,
    /// Row-major `H x W x 3`.
    pub color: Vec<T>,
    /// Row-major `H x W`; final product of `(1 - sigma)`.
    pub transmittance: Vec<T>,
    pub background: Vector3<T>,
}

impl<T: Real> RenderedImage<T> {
    pub fn pixel(&self, px: u32, py: u32) -> Vector3<T> {
        let i = 3 * (py as usize * self.width as usize + px as usize);
        Vector3::new(self.color[i], self.color[i + 1], self.color[i + 2])
    }

    pub fn transmittance_at(&self, px: u32, py: u32) -> T {
        self.transmittance[py as usize * self.width as usize + px as usize]
    }

    pub fn to_f64(&self) -> RenderedImage<f64> {
        RenderedImage {
            width: self.width,
            height: self.height,
            color: self.color.iter().map(|v| v.to_f64()).collect(),
            transmittance: self.transmittance.iter().map(|v| v.to_f64()).collect(),
            background: self.background.map(|v| v.to_f64()),
        }
    }
}

/// Result of compositing one ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelValue<T: Real> {
    pub color: Vector3<T>,
    pub transmittance: T,
    /// Number of samples composited before termination.
    pub used: usize,
}

/// Front-to-back alpha compositing of pre-sorted samples.
///
/// The returned color is `C + T * background`.
#[inline]
pub fn composite<T: Real>(
    samples: &[Sample<T>],
    colors: impl Fn(&Sample<T>) -> Vector3<T>,
    background: &Vector3<T>,
    stop_threshold: T,
) -> PixelValue<T> {
    let mut color = Vector3::zeros();
    let mut trans = T::one();
    let mut used = 0;
    for s in samples {
        let w = s.sigma * trans;
        color += colors(s) * w;
        trans *= T::one() - s.sigma;
        used += 1;
        if trans < stop_threshold {
            break;
        }
    }
    PixelValue {
        color: color + background * trans,
        transmittance: trans,
        used,
    }
}

/// A view with all splats projected and binned, ready for per-pixel queries.
pub struct ProjectedView<T: Real> {
    pub view: ViewContext<T>,
    pub splats: Vec<Splat2D<T>>,
    pub bins: TileBins,
    pub settings: RenderSettings,
}

impl<T: Real> ProjectedView<T> {
    pub fn new(splats: &[Splat], camera: &Camera, settings: &RenderSettings) -> Self {
        let projected = project_all::<T>(splats, camera, settings);
        let bins = TileBins::build(&projected, camera.width, camera.height, TILE);
        ProjectedView {
            view: camera.view(),
            splats: projected,
            bins,
            settings: settings.clone(),
        }
    }

    pub fn width(&self) -> u32 {
        self.view.width
    }

    pub fn height(&self) -> u32 {
        self.view.height
    }

    /// Sorted samples of the splats on pixel `(px, py)` that pass `gate`,
    /// which receives the intersection point `x_i`.
    pub fn samples_into(
        &self,
        px: u32,
        py: u32,
        gate: &impl Fn(&Splat2D<T>, &Vector3<T>) -> bool,
        out: &mut Vec<Sample<T>>,
    ) -> Ray<T> {
        out.clear();
        let pixel = self.view.pixel_center(px, py);
        let ray = self.view.pixel_ray(px, py);
        for &slot in self.bins.at(px, py) {
            let s = &self.splats[slot as usize];
            if let Some((smp, x)) = sample(s, slot, px, py, &pixel, &ray, &self.settings) {
                if gate(s, &x) {
                    out.push(smp);
                }
            }
        }
        sort_samples(out);
        ray
    }

    #[inline]
    pub fn color_of(&self, s: &Sample<T>) -> Vector3<T> {
        self.splats[s.slot as usize].color
    }

    /// Renders every pixel with the given gate and background.
    pub fn render_gated(
        &self,
        background: &Vector3<T>,
        gate: &(impl Fn(&Splat2D<T>, &Vector3<T>) -> bool + Sync),
    ) -> RenderedImage<T> {
        let (w, h) = (self.width(), self.height());
        let stop = c::<T>(self.settings.stop_threshold);
        let rows: Vec<(Vec<T>, Vec<T>)> = (0..h)
            .into_par_iter()
            .map(|py| {
                let mut buf = Vec::new();
                let mut color = Vec::with_capacity(3 * w as usize);
                let mut trans = Vec::with_capacity(w as usize);
                for px in 0..w {
                    self.samples_into(px, py, gate, &mut buf);
                    let v = composite(&buf, |s| self.color_of(s), background, stop);
                    color.extend_from_slice(v.color.as_slice());
                    trans.push(v.transmittance);
                }
                (color, trans)
            })
            .collect();
        let mut color = Vec::with_capacity(3 * (w * h) as usize);
        let mut transmittance = Vec::with_capacity((w * h) as usize);
        for (c_row, t_row) in rows {
            color.extend(c_row);
            transmittance.extend(t_row);
        }
        RenderedImage {
            width: w,
            height: h,
            color,
            transmittance,
            background: *background,
        }
    }

    /// Number of (pixel, splat) footprint evaluations a full render performs.
    pub fn work_units(&self) -> u64 {
        let mut total = 0u64;
        for s in &self.splats {
            total += ((s.bbox[1] - s.bbox[0] + 1) as u64) * ((s.bbox[3] - s.bbox[2] + 1) as u64);
        }
        total
    }
}

pub(crate) fn ungated<T: Real>(_: &Splat2D<T>, _: &Vector3<T>) -> bool {
    true
}

pub fn render_view<T: Real>(
    splats: &[Splat],
    camera: &Camera,
    background: &Vector3<f64>,
    settings: &RenderSettings,
) -> RenderedImage<T> {
    let pv = ProjectedView::<T>::new(splats, camera, settings);
    pv.render_gated(&background.map(c), &ungated)
}

/// Single-ray render of pixel `(px, py)`: same arithmetic as [`render_view`]
/// at that pixel, without tile binning.
pub fn render_ray<T: Real>(
    splats: &[Splat],
    camera: &Camera,
    px: u32,
    py: u32,
    background: &Vector3<f64>,
    settings: &RenderSettings,
) -> (Vector3<T>, T) {
    let projected = project_all::<T>(splats, camera, settings);
    let view = camera.view::<T>();
    let pixel: Vector2<T> = view.pixel_center(px, py);
    let ray = view.pixel_ray(px, py);
    let mut buf: Vec<Sample<T>> = projected
        .iter()
        .enumerate()
        .filter_map(|(slot, s)| sample(s, slot as u32, px, py, &pixel, &ray, settings).map(|(smp, _)| smp))
        .collect();
    sort_samples(&mut buf);
    let v = composite(&buf, |s| projected[s.slot as usize].color, &background.map(c), c(settings.stop_threshold));
    (v.color, v.transmittance)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn camera() -> Camera {
        Camera::new(32, 32, 40.0, 40.0, 16.0, 16.0, [1.0, 0.0, 0.0, 0.0], Vector3::zeros()).unwrap()
    }

    #[test]
    fn empty_scene_is_background() {
        let bg = Vector3::new(0.2, 0.4, 0.6);
        let img = render_view::<f64>(&[], &camera(), &bg, &RenderSettings::oracle());
        for py in 0..32 {
            for px in 0..32 {
                assert_eq!(img.pixel(px, py), bg);
                assert_eq!(img.transmittance_at(px, py), 1.0);
            }
        }
    }

    #[test]
    fn composite_two_half_layers() {
        let mk = |t: f64, id: u64| Sample {
            t,
            key: t,
            id,
            slot: id as u32,
            g: 1.0,
            sigma: 0.5,
        };
        let c1 = Vector3::new(1.0, 0.0, 0.2);
        let c2 = Vector3::new(0.0, 1.0, 0.6);
        let v = composite(&[mk(1.0, 0), mk(2.0, 1)], |s| if s.id == 0 { c1 } else { c2 }, &Vector3::zeros(), 0.0);
        assert_eq!(v.color, c1 * 0.5 + c2 * 0.25);
        assert_eq!(v.transmittance, 0.25);
    }

    #[test]
    fn full_occlusion_returns_splat_color() {
        let mk = |sigma: f64| Sample {
            t: 1.0,
            key: 1.0,
            id: 0,
            slot: 0,
            g: 1.0,
            sigma,
        };
        let col = Vector3::new(0.3, 0.7, 0.1);
        let v = composite(&[mk(1.0)], |_| col, &Vector3::new(1.0, 1.0, 1.0), 0.0);
        assert_eq!(v.color, col);
        assert_eq!(v.transmittance, 0.0);
    }

    #[test]
    fn early_termination_stops_compositing() {
        let mk = |id: u64| Sample {
            t: id as f64,
            key: id as f64,
            id,
            slot: 0,
            g: 1.0,
            sigma: 0.995,
        };
        let samples: Vec<_> = (0..5).map(mk).collect();
        let v = composite(&samples, |_| Vector3::repeat(1.0), &Vector3::zeros(), 1e-4);
        assert_eq!(v.used, 2);
        let v = composite(&samples, |_| Vector3::repeat(1.0), &Vector3::zeros(), 0.0);
        assert_eq!(v.used, 5);
    }

    #[test]
    fn single_splat_at_pixel_center() {
        // Pixel (16, 16) has center (16.5, 16.5); place the splat on that ray.
        let cam = camera();
        let ray = cam.pixel_ray(16, 16);
        let mu = ray.at(3.0);
        let s = Splat::isotropic(7, mu, 0.05, 0.6, [1.0, 0.0, 0.0]);
        let img = render_view::<f64>(&[s], &cam, &Vector3::zeros(), &RenderSettings::oracle());
        let px = img.pixel(16, 16);
        approx::assert_relative_eq!(px.x, 0.6, epsilon = 1e-12);
        approx::assert_relative_eq!(img.transmittance_at(16, 16), 0.4, epsilon = 1e-12);
    }
}
