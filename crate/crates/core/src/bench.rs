//! Workload balance, communication volume and per-worker timing.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::Vector3;
use serde::Serialize;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::manager::{Cluster, ClusterConfig};
use crate::optim::OwnedSplat;
use crate::partition::{build_fixed_grid, PartitionTable};
use crate::protocol::Precision;
use crate::raster::render_view;
use crate::splat::{sh_coeffs_for_degree, Splat};

/// Scalars per splat: position, log-scale, rotation, opacity and SH.
pub fn params_per_splat(sh_degree: usize) -> usize {
    3 + 3 + 4 + 1 + 3 * sh_coeffs_for_degree(sh_degree)
}

/// Parameters plus both optimizer moments, as f32.
pub fn bytes_per_splat(sh_degree: usize) -> usize {
    3 * params_per_splat(sh_degree) * 4
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BalanceReport {
    pub kind: String,
    pub subsets: usize,
    pub total: usize,
    /// Subset sizes including overlap replicas.
    pub counts: Vec<usize>,
    /// Splat centers per subspace.
    pub center_counts: Vec<usize>,
    pub min: usize,
    pub max: usize,
    pub mean: f64,
    /// Largest over smallest nonzero subset size.
    pub ratio: f64,
    /// Largest over smallest nonzero center count.
    pub center_ratio: f64,
    /// Replicas beyond one per splat, relative to the splat count.
    pub overlap_fraction: f64,
    pub bytes_per_splat: usize,
    pub memory_per_worker: Vec<usize>,
}

fn nonzero_ratio(counts: &[usize]) -> f64 {
    let nz: Vec<usize> = counts.iter().copied().filter(|&c| c > 0).collect();
    match (nz.iter().max(), nz.iter().min()) {
        (Some(&hi), Some(&lo)) => hi as f64 / lo as f64,
        _ => 1.0,
    }
}

pub fn balance_stats(table: &PartitionTable, splats: &[Splat]) -> BalanceReport {
    let counts: Vec<usize> = table.membership.iter().map(Vec::len).collect();
    let center_counts = table.center_counts(splats);
    let sum: usize = counts.iter().sum();
    let degree = splats.iter().map(Splat::sh_degree).max().unwrap_or(0);
    let bps = bytes_per_splat(degree);
    BalanceReport {
        kind: table.kind.name().to_string(),
        subsets: table.len(),
        total: splats.len(),
        min: counts.iter().copied().min().unwrap_or(0),
        max: counts.iter().copied().max().unwrap_or(0),
        mean: if counts.is_empty() { 0.0 } else { sum as f64 / counts.len() as f64 },
        ratio: nonzero_ratio(&counts),
        center_ratio: nonzero_ratio(&center_counts),
        overlap_fraction: if splats.is_empty() {
            0.0
        } else {
            (sum as f64 - splats.len() as f64) / splats.len() as f64
        },
        bytes_per_splat: bps,
        memory_per_worker: counts.iter().map(|c| c * bps).collect(),
        counts,
        center_counts,
    }
}

impl BalanceReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{} K={} splats={} counts min={} max={} mean={:.1} ratio={:.3} center_ratio={:.3} overlap={:.4}",
            self.kind, self.subsets, self.total, self.min, self.max, self.mean, self.ratio, self.center_ratio, self.overlap_fraction
        );
        let _ = writeln!(s, "{:>4} {:>10} {:>10} {:>12}", "k", "members", "centers", "memory_B");
        for k in 0..self.subsets {
            let _ = writeln!(
                s,
                "{:>4} {:>10} {:>10} {:>12}",
                k, self.counts[k], self.center_counts[k], self.memory_per_worker[k]
            );
        }
        s
    }
}

/// A fixed grid over `[lo, hi]` with `k` cells (a power of two), halving
/// x, then y, then z.
pub fn grid_with_cells(lo: &Vector3<f64>, hi: &Vector3<f64>, k: usize) -> Result<PartitionTable> {
    if !k.is_power_of_two() {
        return Err(Error::Config(format!("{k} cells: need a power of two")));
    }
    let mut cells = [1usize; 3];
    for i in 0..k.trailing_zeros() as usize {
        cells[i % 3] *= 2;
    }
    let size = Vector3::from_fn(|a, _| (hi[a] - lo[a]) / cells[a] as f64);
    build_fixed_grid(lo, hi, &size)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CommModel {
    /// Partial color and transmittance maps per view.
    pub forward_bytes: u64,
    /// Their cotangents.
    pub backward_bytes: u64,
}

/// `K * H * W * 4` scalars each way per view.
pub fn comm_model(camera: &Camera, workers: usize, precision: Precision) -> CommModel {
    let bytes = workers as u64 * camera.width as u64 * camera.height as u64 * 4 * precision.bytes() as u64;
    CommModel {
        forward_bytes: bytes,
        backward_bytes: bytes,
    }
}

/// Data-parallel reference: every worker exchanges the gradient of every
/// splat each step (f32).
pub fn data_parallel_bytes(splats: usize, sh_degree: usize, workers: usize) -> u64 {
    (workers * splats * params_per_splat(sh_degree) * 4) as u64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TimingMode {
    Mono,
    Mp,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WorkerTiming {
    pub worker: usize,
    pub compute_ms: f64,
    /// Round time not spent computing (waiting and transfer).
    pub wait_ms: f64,
    pub work_units: u64,
    /// Work units the worker idled behind the slowest worker of each round,
    /// over the summed per-round maxima.
    pub wait_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimingReport {
    pub mode: TimingMode,
    pub workers: usize,
    pub batch: usize,
    pub views: usize,
    pub rounds: usize,
    pub wall_ms: f64,
    /// Summed per-round maximum of worker work units.
    pub critical_units: u64,
    pub max_wait_fraction: f64,
    pub comm_bytes: u64,
    pub map_bytes: u64,
    pub per_worker: Vec<WorkerTiming>,
}

impl TimingReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "mode={:?} K={} batch={} views={} rounds={} wall_ms={:.2} critical_units={} max_wait_fraction={:.4} comm_bytes={} map_bytes={}",
            self.mode,
            self.workers,
            self.batch,
            self.views,
            self.rounds,
            self.wall_ms,
            self.critical_units,
            self.max_wait_fraction,
            self.comm_bytes,
            self.map_bytes
        );
        let _ = writeln!(s, "{:>4} {:>12} {:>12} {:>14} {:>10}", "k", "compute_ms", "wait_ms", "work_units", "wait_frac");
        for w in &self.per_worker {
            let _ = writeln!(
                s,
                "{:>4} {:>12.3} {:>12.3} {:>14} {:>10.4}",
                w.worker, w.compute_ms, w.wait_ms, w.work_units, w.wait_fraction
            );
        }
        s
    }
}

/// Renders `cameras` in rounds of `batch` views, monolithically or with one
/// worker per subset of `table`, and accounts compute, waiting and traffic.
pub fn timing_harness(
    splats: &[Splat],
    table: &PartitionTable,
    cameras: &[Camera],
    background: &Vector3<f64>,
    batch: usize,
    mode: TimingMode,
    cfg: &ClusterConfig,
) -> Result<TimingReport> {
    if batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let start = Instant::now();
    let rounds = cameras.len().div_ceil(batch);
    if mode == TimingMode::Mono {
        let mut units = 0u64;
        for cam in cameras {
            let pv = crate::raster::ProjectedView::<f32>::new(splats, cam, &cfg.settings);
            units += pv.work_units();
            let _ = render_view::<f32>(splats, cam, background, &cfg.settings);
        }
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        return Ok(TimingReport {
            mode,
            workers: 1,
            batch,
            views: cameras.len(),
            rounds,
            wall_ms,
            critical_units: units,
            max_wait_fraction: 0.0,
            comm_bytes: 0,
            map_bytes: 0,
            per_worker: vec![WorkerTiming {
                worker: 0,
                compute_ms: wall_ms,
                wait_ms: 0.0,
                work_units: units,
                wait_fraction: 0.0,
            }],
        });
    }
    let k = table.len();
    let mut cluster = Cluster::launch(k, cfg)?;
    let owned: Vec<OwnedSplat> = splats.iter().cloned().map(OwnedSplat::fresh).collect();
    cluster.install(table.clone(), &owned)?;
    let before = cluster.counters();
    let mut compute_ns = vec![0u64; k];
    let mut wait_ns = vec![0u64; k];
    let mut units = vec![0u64; k];
    let mut idle_units = vec![0u64; k];
    let mut critical = 0u64;
    for chunk in cameras.chunks(batch) {
        let round_start = Instant::now();
        let views = match cfg.precision {
            Precision::F32 => cluster.render_batch::<f32>(chunk, false)?.into_iter().map(|v| v.stats).collect::<Vec<_>>(),
            Precision::F64 => cluster.render_batch::<f64>(chunk, false)?.into_iter().map(|v| v.stats).collect(),
        };
        let round_ns = round_start.elapsed().as_nanos() as u64;
        let mut round_units = vec![0u64; k];
        let mut round_compute = vec![0u64; k];
        for stats in &views {
            for (w, s) in stats.iter().enumerate() {
                round_units[w] += s.work_units;
                round_compute[w] += s.compute_ns;
            }
        }
        let max_units = round_units.iter().copied().max().unwrap_or(0);
        critical += max_units;
        for w in 0..k {
            units[w] += round_units[w];
            idle_units[w] += max_units - round_units[w];
            compute_ns[w] += round_compute[w];
            wait_ns[w] += round_ns.saturating_sub(round_compute[w]);
        }
    }
    let after = cluster.counters();
    let comm_bytes = after
        .iter()
        .zip(&before)
        .map(|(a, b)| (a.bytes_sent + a.bytes_received) - (b.bytes_sent + b.bytes_received))
        .sum();
    let map_bytes = after
        .iter()
        .zip(&before)
        .map(|(a, b)| a.map_bytes_received - b.map_bytes_received)
        .sum();
    cluster.shutdown()?;
    let per_worker: Vec<WorkerTiming> = (0..k)
        .map(|w| WorkerTiming {
            worker: w,
            compute_ms: compute_ns[w] as f64 / 1e6,
            wait_ms: wait_ns[w] as f64 / 1e6,
            work_units: units[w],
            wait_fraction: if critical == 0 { 0.0 } else { idle_units[w] as f64 / critical as f64 },
        })
        .collect();
    Ok(TimingReport {
        mode,
        workers: k,
        batch,
        views: cameras.len(),
        rounds,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        critical_units: critical,
        max_wait_fraction: per_worker.iter().map(|w| w.wait_fraction).fold(0.0, f64::max),
        comm_bytes,
        map_bytes,
        per_worker,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::{assign_subsets, build_kdtree};
    use crate::project::RenderSettings;
    use crate::synth::{random_splats, Distribution, SynthSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scene(n: usize, distribution: Distribution) -> Vec<Splat> {
        let spec = SynthSpec {
            splats: n,
            distribution,
            ..Default::default()
        };
        random_splats(&spec, &mut ChaCha8Rng::seed_from_u64(5))
    }

    fn kd(splats: &[Splat], depth: u32) -> PartitionTable {
        let centers: Vec<_> = splats.iter().map(|s| s.mu).collect();
        assign_subsets(build_kdtree(&centers, depth).unwrap(), splats, 3.0)
    }

    #[test]
    fn comm_arithmetic() {
        let cam = Camera::new(100, 100, 50.0, 50.0, 50.0, 50.0, [1.0, 0.0, 0.0, 0.0], Vector3::zeros()).unwrap();
        assert_eq!(comm_model(&cam, 2, Precision::F32).forward_bytes, 320_000);
        assert_eq!(comm_model(&cam, 0, Precision::F32).forward_bytes, 0);
        assert_eq!(data_parallel_bytes(10, 3, 2), 2 * 10 * 59 * 4);
    }

    #[test]
    fn counts_match_recount() {
        let splats = scene(3000, Distribution::Uniform);
        let table = kd(&splats, 2);
        let r = balance_stats(&table, &splats);
        for (k, m) in table.membership.iter().enumerate() {
            let recount = splats.iter().filter(|s| m.contains(&s.id)).count();
            assert_eq!(r.counts[k], recount);
        }
        assert!(r.counts.iter().sum::<usize>() >= splats.len());
        assert_eq!(r.center_counts.iter().sum::<usize>(), splats.len());
    }

    #[test]
    fn single_subset_ratio_is_one() {
        let splats = scene(500, Distribution::Clustered);
        let r = balance_stats(&kd(&splats, 0), &splats);
        assert_eq!(r.ratio, 1.0);
        assert_eq!(r.overlap_fraction, 0.0);
    }

    #[test]
    fn kd_balances_uniform_scene() {
        let splats = scene(100_000, Distribution::Uniform);
        let r = balance_stats(&kd(&splats, 1), &splats);
        assert!(r.ratio <= 1.1, "{}", r.ratio);
    }

    #[test]
    fn grid_unbalanced_on_clustered_scene() {
        let splats = scene(20_000, Distribution::Clustered);
        let lo = Vector3::repeat(-1.0);
        let hi = Vector3::repeat(1.0);
        let grid = assign_subsets(grid_with_cells(&lo, &hi, 2).unwrap(), &splats, 3.0);
        let g = balance_stats(&grid, &splats);
        assert!(g.ratio >= 3.0, "{}", g.ratio);
        let g8 = balance_stats(&grid_with_cells(&lo, &hi, 8).unwrap(), &splats);
        assert!(g8.center_ratio > 4.0, "{}", g8.center_ratio);
    }

    #[test]
    fn mono_timing_has_no_traffic() {
        let splats = scene(200, Distribution::Uniform);
        let cam = Camera::look_at(24, 24, 24.0, Vector3::new(3.0, 0.0, 0.5), Vector3::zeros(), Vector3::z()).unwrap();
        let cfg = ClusterConfig::new(RenderSettings::default(), Precision::F32);
        let r = timing_harness(&splats, &kd(&splats, 0), &[cam], &Vector3::zeros(), 1, TimingMode::Mono, &cfg).unwrap();
        assert_eq!(r.comm_bytes, 0);
        assert_eq!(r.max_wait_fraction, 0.0);
    }
}
