//! PSNR, SSIM, and the training loss `(1 - lambda) L1 + lambda (1 - SSIM)`
//! with its analytic gradient.
//!
//! SSIM uses an 11x11 Gaussian window (sigma 1.5) applied separably with
//! zero padding, per channel, averaged over all pixels and channels.

use crate::error::Result;
use crate::image::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;
pub const DEFAULT_LAMBDA: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    /// `+inf` for identical images.
    pub psnr: f64,
    pub ssim: f64,
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.same_size(b)?;
    let n = a.data.len().max(1) as f64;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

pub fn psnr(render: &Image, target: &Image) -> Result<f64> {
    let e = mse(render, target)?;
    Ok(if e == 0.0 { f64::INFINITY } else { -10.0 * e.log10() })
}

/// Renders are clamped to `[0, 1]` before comparison.
pub fn metrics(render: &Image, target: &Image) -> Result<Metrics> {
    render.same_size(target)?;
    let clamped = Image {
        data: render.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        ..render.clone()
    };
    Ok(Metrics {
        psnr: psnr(&clamped, target)?,
        ssim: ssim(&clamped, target)?,
    })
}

fn kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - half;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = k.iter().sum();
    k.map(|v| v / sum)
}

/// Separable zero-padded Gaussian filter of one `w x h` plane. The filter is
/// symmetric, so it is its own adjoint.
fn blur(plane: &[f64], w: usize, h: usize) -> Vec<f64> {
    let k = kernel();
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = x as isize + i as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += kv * plane[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let yy = y as isize + i as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    acc += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn channel(img: &Image, c: usize) -> Vec<f64> {
    img.data.iter().skip(c).step_by(3).copied().collect()
}

/// Mean SSIM and, when asked, its gradient with respect to `x`.
fn ssim_impl(x: &Image, y: &Image, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    x.same_size(y)?;
    let (w, h) = (x.width as usize, x.height as usize);
    let n = w * h;
    if n == 0 {
        return Ok((1.0, want_grad.then(Vec::new)));
    }
    let total = (3 * n) as f64;
    let mut sum = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; 3 * n]);
    for c in 0..3 {
        let xs = channel(x, c);
        let ys = channel(y, c);
        let mx = blur(&xs, w, h);
        let my = blur(&ys, w, h);
        let exx = blur(&xs.iter().map(|v| v * v).collect::<Vec<_>>(), w, h);
        let eyy = blur(&ys.iter().map(|v| v * v).collect::<Vec<_>>(), w, h);
        let exy = blur(&xs.iter().zip(&ys).map(|(a, b)| a * b).collect::<Vec<_>>(), w, h);
        let mut d_mx = vec![0.0; n];
        let mut d_exx = vec![0.0; n];
        let mut d_exy = vec![0.0; n];
        for i in 0..n {
            let (ux, uy) = (mx[i], my[i]);
            let a1 = 2.0 * ux * uy + C1;
            let a2 = 2.0 * (exy[i] - ux * uy) + C2;
            let b1 = ux * ux + uy * uy + C1;
            let b2 = (exx[i] - ux * ux) + (eyy[i] - uy * uy) + C2;
            let s = a1 * a2 / (b1 * b2);
            sum += s;
            if want_grad {
                let inv = 1.0 / (b1 * b2 * total);
                d_mx[i] = (2.0 * uy * a2 - 2.0 * uy * a1) * inv - s * 2.0 * ux / (b1 * total) + s * 2.0 * ux / (b2 * total);
                d_exx[i] = -s / (b2 * total);
                d_exy[i] = 2.0 * a1 * inv;
            }
        }
        if let Some(g) = grad.as_mut() {
            let g_mx = blur(&d_mx, w, h);
            let g_exx = blur(&d_exx, w, h);
            let g_exy = blur(&d_exy, w, h);
            for i in 0..n {
                g[3 * i + c] = g_mx[i] + 2.0 * xs[i] * g_exx[i] + ys[i] * g_exy[i];
            }
        }
    }
    Ok((sum / total, grad))
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// Gradient of mean SSIM with respect to the first image.
pub fn ssim_grad(a: &Image, b: &Image) -> Result<(f64, Vec<f64>)> {
    let (s, g) = ssim_impl(a, b, true)?;
    Ok((s, g.unwrap_or_default()))
}

/// Training loss and its gradient with respect to `render`.
pub fn loss(render: &Image, target: &Image, lambda: f64) -> Result<(f64, Vec<f64>)> {
    render.same_size(target)?;
    let total = render.data.len().max(1) as f64;
    let mut l1 = 0.0;
    let mut grad: Vec<f64> = render
        .data
        .iter()
        .zip(&target.data)
        .map(|(r, t)| {
            let d = r - t;
            l1 += d.abs();
            let sign = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            (1.0 - lambda) * sign / total
        })
        .collect();
    l1 /= total;
    if lambda == 0.0 {
        return Ok(((1.0 - lambda) * l1, grad));
    }
    let (s, sg) = ssim_grad(render, target)?;
    for (g, d) in grad.iter_mut().zip(&sg) {
        *g -= lambda * d;
    }
    Ok(((1.0 - lambda) * l1 + lambda * (1.0 - s), grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(w: u32, h: u32, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image {
            width: w,
            height: h,
            data: (0..3 * w * h).map(|_| rng.random()).collect(),
        }
    }

    #[test]
    fn identical_images() {
        let a = noise(16, 12, 1);
        let m = metrics(&a, &a).unwrap();
        assert_eq!(m.psnr, f64::INFINITY);
        assert_relative_eq!(m.ssim, 1.0, epsilon = 1e-12);
        let (l, g) = loss(&a, &a, DEFAULT_LAMBDA).unwrap();
        assert_relative_eq!(l, 0.0, epsilon = 1e-12);
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn psnr_closed_form() {
        let a = Image::filled(8, 8, [0.0; 3]);
        let b = Image::filled(8, 8, [0.5; 3]);
        assert_relative_eq!(psnr(&a, &b).unwrap(), 10.0 * 4.0f64.log10(), epsilon = 1e-12);
        assert_relative_eq!(psnr(&a, &b).unwrap(), 6.0206, epsilon = 1e-4);
    }

    #[test]
    fn pure_l1() {
        let a = Image::filled(7, 5, [0.3, 0.4, 0.5]);
        let b = Image::filled(7, 5, [0.4, 0.5, 0.6]);
        assert_relative_eq!(loss(&a, &b, 0.0).unwrap().0, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn ssim_symmetric() {
        let a = noise(13, 9, 2);
        let b = noise(13, 9, 3);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let a = noise(14, 11, 4);
        let b = noise(14, 11, 5);
        let (_, g) = ssim_grad(&a, &b).unwrap();
        let h = 1e-6;
        for i in (0..a.data.len()).step_by(7) {
            let mut p = a.clone();
            let mut m = a.clone();
            p.data[i] += h;
            m.data[i] -= h;
            let fd = (ssim(&p, &b).unwrap() - ssim(&m, &b).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(1e-3), "{i}: fd {fd} analytic {}", g[i]);
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let a = noise(12, 10, 6);
        let b = noise(12, 10, 7);
        let (_, g) = loss(&a, &b, DEFAULT_LAMBDA).unwrap();
        let h = 1e-7;
        for i in (0..a.data.len()).step_by(11) {
            let mut p = a.clone();
            let mut m = a.clone();
            p.data[i] += h;
            m.data[i] -= h;
            let fd = (loss(&p, &b, DEFAULT_LAMBDA).unwrap().0 - loss(&m, &b, DEFAULT_LAMBDA).unwrap().0) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(1e-3), "{i}: fd {fd} analytic {}", g[i]);
        }
    }

    #[test]
    fn size_mismatch() {
        assert!(metrics(&Image::new(2, 2), &Image::new(3, 2)).is_err());
    }
}
