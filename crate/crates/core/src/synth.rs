//! Seeded synthetic scenes, and scene bundles on disk.
//!
//! A scene is a set of ground-truth splats, a ring of cameras around the
//! origin, target images rendered from the splats, and a point cloud taken
//! from the splat centers.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::cameras::{load_cameras, save_cameras, NamedCamera};
use crate::error::{Error, Result};
use crate::image::{load_image, save_image, Image};
use crate::ply::{load_points, save_points, save_splats, PlyFormat, PointCloud};
use crate::project::RenderSettings;
use crate::raster::render_view;
use crate::splat::{dc_to_rgb, logit, sh_coeffs_for_degree, Splat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distribution {
    /// Centers uniform in `[-extent, extent]^3`.
    Uniform,
    /// 90% of centers in the positive octant, the rest uniform.
    Clustered,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub splats: usize,
    pub distribution: Distribution,
    pub extent: f64,
    /// Per-axis log-scale range.
    pub log_scale: (f64, f64),
    pub opacity: (f64, f64),
    pub sh_degree: usize,
    pub views: usize,
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    pub ring_radius: f64,
    /// Amplitude of the camera height oscillation around the ring.
    pub ring_height: f64,
    pub background: [f64; 3],
    /// Points in the initial cloud; the first `splats` are the exact centers.
    pub points: usize,
    pub holdout_every: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            splats: 5000,
            distribution: Distribution::Uniform,
            extent: 1.0,
            log_scale: (-4.0, -2.5),
            opacity: (0.3, 0.9),
            sh_degree: 0,
            views: 64,
            width: 64,
            height: 64,
            focal: 70.0,
            ring_radius: 3.5,
            ring_height: 1.2,
            background: [0.0; 3],
            points: 5000,
            holdout_every: 8,
        }
    }
}

pub struct Scene {
    pub cameras: Vec<NamedCamera>,
    pub targets: Vec<Image>,
    pub points: PointCloud,
    pub bounds: (Vector3<f64>, Vector3<f64>),
    pub background: [f64; 3],
    /// Every `holdout_every`-th view (the last of each group) is held out.
    pub holdout_every: usize,
}

impl Scene {
    pub fn is_held_out(&self, view: usize) -> bool {
        self.holdout_every > 0 && view % self.holdout_every == self.holdout_every - 1
    }

    pub fn train_views(&self) -> Vec<usize> {
        (0..self.cameras.len()).filter(|&i| !self.is_held_out(i)).collect()
    }

    pub fn test_views(&self) -> Vec<usize> {
        (0..self.cameras.len()).filter(|&i| self.is_held_out(i)).collect()
    }

    pub fn background(&self) -> Vector3<f64> {
        Vector3::from(self.background)
    }
}

pub fn random_splats(spec: &SynthSpec, rng: &mut impl Rng) -> Vec<Splat> {
    let e = spec.extent;
    let coeffs = sh_coeffs_for_degree(spec.sh_degree);
    (0..spec.splats)
        .map(|i| {
            let clustered = spec.distribution == Distribution::Clustered && rng.random_bool(0.9);
            let range = if clustered { 0.0..e } else { -e..e };
            let mu = Vector3::new(
                rng.random_range(range.clone()),
                rng.random_range(range.clone()),
                rng.random_range(range),
            );
            let log_scale = Vector3::from_fn(|_, _| rng.random_range(spec.log_scale.0..=spec.log_scale.1));
            let rotation = [
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
            ];
            let opacity_logit = logit(rng.random_range(spec.opacity.0..=spec.opacity.1));
            let mut sh = vec![[0.0; 3]; coeffs];
            sh[0] = crate::splat::rgb_to_dc([rng.random(), rng.random(), rng.random()]);
            for band in sh.iter_mut().skip(1) {
                *band = [0.0; 3].map(|_: f64| rng.random_range(-0.1..0.1));
            }
            Splat {
                id: i as u64,
                mu,
                log_scale,
                rotation,
                opacity_logit,
                sh,
            }
        })
        .collect()
}

/// Cameras on a ring around the z axis, all looking at the origin.
pub fn camera_ring(spec: &SynthSpec) -> Result<Vec<NamedCamera>> {
    (0..spec.views)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / spec.views as f64;
            let eye = Vector3::new(
                spec.ring_radius * a.cos(),
                spec.ring_radius * a.sin(),
                spec.ring_height * (3.0 * a).sin(),
            );
            Ok(NamedCamera {
                name: format!("view_{i:03}"),
                camera: Camera::look_at(spec.width, spec.height, spec.focal, eye, Vector3::zeros(), Vector3::z())?,
            })
        })
        .collect()
}

/// Splat centers with their base colors, then samples drawn from the splat
/// Gaussians until `count` points exist.
pub fn point_cloud(splats: &[Splat], count: usize, rng: &mut impl Rng) -> PointCloud {
    let mut cloud = PointCloud::default();
    if splats.is_empty() {
        return cloud;
    }
    for i in 0..count {
        let s = &splats[i % splats.len()];
        let p = if i < splats.len() {
            s.mu
        } else {
            let z = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
            s.mu + s.rotation_matrix::<f64>() * s.scales().component_mul(&z)
        };
        cloud.points.push(p);
        cloud.colors.push(dc_to_rgb(s.sh[0]).map(|v| v.clamp(0.0, 1.0)));
    }
    cloud
}

/// Generates a scene; targets are rendered in f64 without early termination.
pub fn synth_scene(spec: &SynthSpec, seed: u64) -> Result<(Scene, Vec<Splat>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let splats = random_splats(spec, &mut rng);
    let cameras = camera_ring(spec)?;
    let bg = Vector3::from(spec.background);
    let settings = RenderSettings::oracle().with_sh_degree(spec.sh_degree);
    let targets = cameras
        .iter()
        .map(|c| Image::from_render(&render_view::<f64>(&splats, &c.camera, &bg, &settings)))
        .collect();
    let points = point_cloud(&splats, spec.points, &mut rng);
    let e = spec.extent;
    let scene = Scene {
        cameras,
        targets,
        points,
        bounds: (Vector3::repeat(-e), Vector3::repeat(e)),
        background: spec.background,
        holdout_every: spec.holdout_every,
    };
    Ok((scene, splats))
}

/// The manifest of a bundle directory (`bundle.json`). Paths are relative to
/// the directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneBundle {
    pub cameras: PathBuf,
    pub images: Vec<PathBuf>,
    pub points: PathBuf,
    pub bounds: [[f64; 3]; 2],
    pub background: [f64; 3],
    pub holdout_every: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<PathBuf>,
}

pub const MANIFEST: &str = "bundle.json";

pub fn write_bundle(dir: &Path, scene: &Scene, ground_truth: Option<&[Splat]>) -> Result<SceneBundle> {
    fs::create_dir_all(dir.join("images")).map_err(|e| Error::file(dir, e))?;
    let images: Vec<PathBuf> = scene
        .cameras
        .iter()
        .map(|c| PathBuf::from("images").join(format!("{}.png", c.name)))
        .collect();
    for (rel, img) in images.iter().zip(&scene.targets) {
        save_image(&dir.join(rel), img)?;
    }
    save_cameras(&dir.join("cameras.json"), &scene.cameras)?;
    save_points(&dir.join("points.ply"), &scene.points, PlyFormat::BinaryLittleEndian)?;
    let gt = match ground_truth {
        Some(splats) => {
            save_splats(&dir.join("ground_truth.ply"), splats)?;
            Some(PathBuf::from("ground_truth.ply"))
        }
        None => None,
    };
    let (lo, hi) = scene.bounds;
    let bundle = SceneBundle {
        cameras: "cameras.json".into(),
        images,
        points: "points.ply".into(),
        bounds: [lo.into(), hi.into()],
        background: scene.background,
        holdout_every: scene.holdout_every,
        ground_truth: gt,
    };
    let text = serde_json::to_string_pretty(&bundle).expect("plain JSON values");
    let path = dir.join(MANIFEST);
    fs::write(&path, text + "\n").map_err(|e| Error::file(&path, e))?;
    Ok(bundle)
}

pub fn load_bundle(dir: &Path) -> Result<Scene> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::file(&path, e))?;
    let bundle: SceneBundle = serde_json::from_str(&text).map_err(|e| Error::Schema {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let cameras = load_cameras(&dir.join(&bundle.cameras))?;
    if cameras.len() != bundle.images.len() {
        return Err(Error::Schema {
            path: "images".into(),
            message: format!("{} images for {} cameras", bundle.images.len(), cameras.len()),
        });
    }
    let mut targets = Vec::with_capacity(cameras.len());
    for (i, (cam, rel)) in cameras.iter().zip(&bundle.images).enumerate() {
        let img = load_image(&dir.join(rel))?;
        if (img.width, img.height) != (cam.camera.width, cam.camera.height) {
            return Err(Error::Schema {
                path: format!("images[{i}]"),
                message: format!(
                    "{} is {}x{} but camera {} is {}x{}",
                    rel.display(),
                    img.width,
                    img.height,
                    cam.name,
                    cam.camera.width,
                    cam.camera.height
                ),
            });
        }
        targets.push(img);
    }
    Ok(Scene {
        cameras,
        targets,
        points: load_points(&dir.join(&bundle.points))?,
        bounds: (Vector3::from(bundle.bounds[0]), Vector3::from(bundle.bounds[1])),
        background: bundle.background,
        holdout_every: bundle.holdout_every,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            splats: 200,
            views: 6,
            width: 24,
            height: 20,
            focal: 25.0,
            points: 300,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic() {
        let (a, sa) = synth_scene(&small(), 3).unwrap();
        let (b, sb) = synth_scene(&small(), 3).unwrap();
        assert_eq!(sa, sb);
        assert_eq!(a.targets, b.targets);
        assert_eq!(a.points, b.points);
    }

    #[test]
    fn empty_scene_is_background() {
        let spec = SynthSpec {
            splats: 0,
            points: 0,
            background: [0.2, 0.3, 0.4],
            ..small()
        };
        let (scene, _) = synth_scene(&spec, 1).unwrap();
        for img in &scene.targets {
            assert!(img.data.chunks(3).all(|p| p == [0.2, 0.3, 0.4]));
        }
    }

    #[test]
    fn clustered_fraction() {
        let spec = SynthSpec {
            splats: 4000,
            distribution: Distribution::Clustered,
            ..small()
        };
        let splats = random_splats(&spec, &mut ChaCha8Rng::seed_from_u64(0));
        let inside = splats.iter().filter(|s| s.mu.iter().all(|v| *v >= 0.0)).count();
        let frac = inside as f64 / splats.len() as f64;
        assert!(frac > 0.88 && frac < 0.93, "{frac}");
    }

    #[test]
    fn split_holds_out_every_eighth() {
        let (scene, _) = synth_scene(&SynthSpec { views: 16, ..small() }, 0).unwrap();
        assert_eq!(scene.test_views(), vec![7, 15]);
        assert_eq!(scene.train_views().len(), 14);
    }

    #[test]
    fn bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (scene, gt) = synth_scene(&small(), 9).unwrap();
        write_bundle(dir.path(), &scene, Some(&gt)).unwrap();
        let back = load_bundle(dir.path()).unwrap();
        assert_eq!(back.cameras, scene.cameras);
        for (a, b) in back.targets.iter().zip(&scene.targets) {
            assert_eq!(a, &b.quantized());
        }
        assert_eq!(back.points.len(), 300);
        assert_eq!(back.holdout_every, 8);
    }

    #[test]
    fn bundle_resolution_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (scene, _) = synth_scene(&small(), 9).unwrap();
        write_bundle(dir.path(), &scene, None).unwrap();
        save_image(&dir.path().join("images/view_002.png"), &Image::new(5, 5)).unwrap();
        let err = load_bundle(dir.path()).err().unwrap().to_string();
        assert!(err.contains("images[2]"), "{err}");
    }
}
