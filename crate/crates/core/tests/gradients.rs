//! Finite-difference checks of the analytic backward pass.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatdist::backward::render_backward;
use splatdist::raster::render_view;
use splatdist::{Camera, RenderSettings, Splat};

fn settings() -> RenderSettings {
    // Wide footprints so the truncation cut-offs sit where weights are ~0.
    RenderSettings {
        truncation: 8.0,
        reach_multiplier: 8.0,
        ..RenderSettings::oracle()
    }
}

fn scene(seed: u64, n: usize) -> (Vec<Splat>, Camera) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let splats = (0..n)
        .map(|i| {
            let mu = Vector3::new(rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6));
            let mut s = Splat::isotropic(i as u64, mu, 0.1, rng.random_range(0.2..0.8), [0.5, 0.5, 0.5]);
            for k in 0..3 {
                s.log_scale[k] = rng.random_range(-2.8..-1.8);
            }
            s.rotation = [rng.random_range(0.5..1.0), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
            s.sh = (0..16).map(|_| [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)]).collect();
            s.sh[0] = [rng.random_range(-0.5..1.0), rng.random_range(-0.5..1.0), rng.random_range(-0.5..1.0)];
            s
        })
        .collect();
    let cam = Camera::look_at(32, 32, 30.0, Vector3::new(0.3, -3.0, 0.5), Vector3::zeros(), Vector3::z()).unwrap();
    (splats, cam)
}

fn loss(splats: &[Splat], cam: &Camera, bg: &Vector3<f64>, gc: &[f64], gt: &[f64]) -> f64 {
    let img = render_view::<f64>(splats, cam, bg, &settings());
    img.color.iter().zip(gc).map(|(a, b)| a * b).sum::<f64>() + img.transmittance.iter().zip(gt).map(|(a, b)| a * b).sum::<f64>()
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    let (splats, cam) = scene(3, 12);
    let bg = Vector3::new(0.1, 0.2, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = cam.pixel_count();
    let gc: Vec<f64> = (0..3 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let gt: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let analytic = render_backward::<f64>(&splats, &cam, &bg, &gc, &gt, &settings()).unwrap();
    assert!(analytic.grads.iter().all(|g| g.opacity_logit != 0.0), "every splat should be visible");
    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..splats.len() {
        let a: Vec<f64> = analytic.grads[i].values().collect();
        for p in 0..a.len() {
            let fd = {
                let mut plus = splats.clone();
                let mut minus = splats.clone();
                perturb(&mut plus[i], p, h);
                perturb(&mut minus[i], p, -h);
                (loss(&plus, &cam, &bg, &gc, &gt) - loss(&minus, &cam, &bg, &gc, &gt)) / (2.0 * h)
            };
            let err = (a[p] - fd).abs() / a[p].abs().max(fd.abs()).max(1e-3);
            if err > 1e-3 {
                println!("splat {i} param {p}: analytic {} fd {}", a[p], fd);
            }
            worst = worst.max(err);
        }
    }
    assert!(worst < 1e-3, "worst relative error {worst}");
}

fn perturb(s: &mut Splat, p: usize, h: f64) {
    match p {
        0..=2 => s.mu[p] += h,
        3..=5 => s.log_scale[p - 3] += h,
        6..=9 => s.rotation[p - 6] += h,
        10 => s.opacity_logit += h,
        _ => s.sh[(p - 11) / 3][(p - 11) % 3] += h,
    }
}
