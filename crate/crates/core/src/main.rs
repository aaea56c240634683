use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use splatdist::bench::{balance_stats, comm_model, data_parallel_bytes, grid_with_cells, timing_harness, TimingMode};
use splatdist::cameras::{load_cameras, NamedCamera};
use splatdist::engine::{boundary_validity_test, Gating};
use splatdist::image::{save_image, Image};
use splatdist::manager::{run_manager, ClusterConfig, TransportKind};
use splatdist::optim::AdamConfig;
use splatdist::partition::{assign_subsets, build_kdtree, from_plane, PartitionTable};
use splatdist::ply::load_splats;
use splatdist::protocol::Precision;
use splatdist::raster::render_view;
use splatdist::synth::{camera_ring, load_bundle, random_splats, synth_scene, write_bundle, Distribution, SynthSpec};
use splatdist::trainer::{init_from_pointcloud, train, TrainConfig};
use splatdist::transport::StdioLink;
use splatdist::worker::run_worker;
use splatdist::{Camera, RenderSettings, Splat};

/// Model-parallel Gaussian splatting: partial renders per spatial subset,
/// merged exactly. Image metrics are PSNR and SSIM (no learned metrics).
#[derive(Parser)]
#[command(name = "splatdist", version)]
struct Cli {
    /// Threads for in-process rendering.
    #[arg(long, global = true, env = "SPLATDIST_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a partition table and print it.
    Partition(PartitionArgs),
    /// Render views on a single worker.
    Render(RenderArgs),
    /// Render views with K workers and merge their partial images.
    RenderDist(RenderDistArgs),
    /// Optimize splats against a scene bundle.
    Train(TrainArgs),
    /// Render with the optical axis on a splitting plane and check that
    /// each partial image is empty on its far side.
    ValidateBoundary(BoundaryArgs),
    /// Compare merged distributed renders with single-worker renders.
    ValidateEquivalence(EquivalenceArgs),
    /// Balance, communication and timing reports.
    Bench(BenchArgs),
    /// Generate a synthetic scene bundle.
    Synth(SynthArgs),
    /// Serve the worker protocol on stdin/stdout.
    #[command(hide = true)]
    Worker,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DistArg {
    Uniform,
    Clustered,
}

impl From<DistArg> for Distribution {
    fn from(d: DistArg) -> Self {
        match d {
            DistArg::Uniform => Distribution::Uniform,
            DistArg::Clustered => Distribution::Clustered,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KindArg {
    Kd,
    Grid,
}

#[derive(Args, Clone)]
struct SceneArgs {
    /// Splat checkpoint (PLY); a synthetic scene is generated when absent.
    #[arg(long)]
    splats: Option<PathBuf>,
    /// Splat count of the synthetic scene.
    #[arg(long, default_value_t = 5000)]
    count: usize,
    #[arg(long, value_enum, default_value_t = DistArg::Uniform)]
    distribution: DistArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SceneArgs {
    fn load(&self) -> Result<Vec<Splat>> {
        match &self.splats {
            Some(p) => Ok(load_splats(p)?),
            None => {
                let spec = SynthSpec {
                    splats: self.count,
                    distribution: self.distribution.into(),
                    ..Default::default()
                };
                Ok(random_splats(&spec, &mut ChaCha8Rng::seed_from_u64(self.seed)))
            }
        }
    }
}

#[derive(Args)]
struct PartitionArgs {
    #[command(flatten)]
    scene: SceneArgs,
    /// KD-tree depth; K = 2^depth.
    #[arg(long, default_value_t = 1)]
    depth: u32,
    #[arg(long, value_enum, default_value_t = KindArg::Kd)]
    kind: KindArg,
    /// Print the balance report as JSON instead of the table dump.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Clone)]
struct ViewArgs {
    /// Splat checkpoint (PLY).
    #[arg(long)]
    splats: PathBuf,
    /// Camera list (JSON).
    #[arg(long)]
    cameras: PathBuf,
    /// Output directory for PNG (or PPM with --ppm) images.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    ppm: bool,
    /// Background color `r,g,b`.
    #[arg(long, value_parser = parse_rgb, default_value = "0,0,0")]
    background: [f64; 3],
    /// Double precision without early termination.
    #[arg(long)]
    oracle: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RenderArgs {
    #[command(flatten)]
    view: ViewArgs,
}

#[derive(Args)]
struct RenderDistArgs {
    #[command(flatten)]
    view: ViewArgs,
    #[arg(long, env = "SPLATDIST_WORKERS", default_value_t = 2)]
    workers: usize,
    /// Run workers as child processes instead of threads.
    #[arg(long)]
    processes: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Scene bundle directory.
    #[arg(long)]
    bundle: PathBuf,
    /// Initial splats (PLY); otherwise initialized from the bundle's point cloud.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Splats drawn from the point cloud (defaults to its size).
    #[arg(long)]
    init_count: Option<usize>,
    #[arg(long, default_value_t = 0)]
    sh_degree: usize,
    #[arg(long, default_value_t = 2000)]
    iterations: u64,
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.2)]
    lambda_ssim: f64,
    #[arg(long, default_value_t = 1.6e-4)]
    lr_position_start: f64,
    #[arg(long, default_value_t = 1.6e-6)]
    lr_position_end: f64,
    /// Position decay horizon in steps (defaults to --iterations).
    #[arg(long)]
    lr_horizon: Option<u64>,
    #[arg(long, default_value_t = 0.005)]
    lr_scale: f64,
    #[arg(long, default_value_t = 0.001)]
    lr_rotation: f64,
    #[arg(long, default_value_t = 0.05)]
    lr_opacity: f64,
    #[arg(long, default_value_t = 0.0025)]
    lr_sh_dc: f64,
    #[arg(long, default_value_t = 0.000125)]
    lr_sh_rest: f64,
    /// Epochs between partition rebuilds (0 disables).
    #[arg(long, default_value_t = 10)]
    repartition_interval: u64,
    /// Sum gradients of splats shared between subsets before each update.
    #[arg(long)]
    grad_sync: bool,
    /// Worker count; without it training renders in-process.
    #[arg(long, env = "SPLATDIST_WORKERS")]
    workers: Option<usize>,
    #[arg(long)]
    processes: bool,
    #[arg(long)]
    oracle: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    log_interval: u64,
    /// Metric log (newline-delimited JSON); stdout when absent.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Final checkpoint (PLY).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BoundaryArgs {
    #[arg(long, default_value_t = 2000)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 96)]
    width: u32,
}

#[derive(Args)]
struct EquivalenceArgs {
    #[arg(long, env = "SPLATDIST_WORKERS", default_value_t = 4)]
    workers: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of scenes, seeded consecutively from --seed.
    #[arg(long, default_value_t = 1)]
    scenes: u64,
    #[arg(long, default_value_t = 5000)]
    count: usize,
    #[arg(long, default_value_t = 8)]
    views: usize,
    /// Check only double precision.
    #[arg(long)]
    oracle: bool,
    #[arg(long)]
    processes: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    scene: SceneArgs,
    #[arg(long, env = "SPLATDIST_WORKERS", default_value_t = 4)]
    workers: usize,
    /// Batch sizes to time.
    #[arg(long, value_delimiter = ',', default_value = "1,4")]
    batch: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    views: usize,
    #[arg(long)]
    processes: bool,
    /// Machine-readable records (JSON lines) instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5000)]
    count: usize,
    #[arg(long, value_enum, default_value_t = DistArg::Uniform)]
    distribution: DistArg,
    #[arg(long, default_value_t = 64)]
    views: usize,
    #[arg(long, default_value_t = 64)]
    width: u32,
    #[arg(long, default_value_t = 64)]
    height: u32,
    /// Points in the initial cloud (defaults to the splat count).
    #[arg(long)]
    points: Option<usize>,
    #[arg(long, default_value_t = 0)]
    sh_degree: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_rgb(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    <[f64; 3]>::try_from(parts).map_err(|_| "expected r,g,b".to_string())
}

fn settings(oracle: bool) -> (RenderSettings, Precision) {
    if oracle {
        (RenderSettings::oracle(), Precision::F64)
    } else {
        (RenderSettings::default(), Precision::F32)
    }
}

fn transport(processes: bool) -> Result<TransportKind> {
    Ok(if processes {
        TransportKind::Processes(std::env::current_exe().context("locating the worker executable")?)
    } else {
        TransportKind::Threads
    })
}

fn kd_table(splats: &[Splat], workers: usize, settings: &RenderSettings) -> Result<PartitionTable> {
    if !workers.is_power_of_two() {
        bail!("--workers {workers}: a KD-tree needs a power of two");
    }
    let centers: Vec<_> = splats.iter().map(|s| s.mu).collect();
    Ok(assign_subsets(
        build_kdtree(&centers, workers.trailing_zeros())?,
        splats,
        settings.reach_multiplier,
    ))
}

fn image_path(out: &Path, cam: &NamedCamera, ppm: bool) -> PathBuf {
    out.join(format!("{}.{}", cam.name, if ppm { "ppm" } else { "png" }))
}

fn load_views(args: &ViewArgs) -> Result<(Vec<Splat>, Vec<NamedCamera>)> {
    let cams = load_cameras(&args.cameras)?;
    let splats = load_splats(&args.splats)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    Ok((splats, cams))
}

fn cmd_partition(a: &PartitionArgs) -> Result<()> {
    let splats = a.scene.load()?;
    let s = RenderSettings::default();
    let table = match a.kind {
        KindArg::Kd => kd_table(&splats, 1 << a.depth, &s)?,
        KindArg::Grid => {
            let lo = splats.iter().fold(Vector3::repeat(f64::INFINITY), |m, s| m.inf(&s.mu));
            let hi = splats.iter().fold(Vector3::repeat(f64::NEG_INFINITY), |m, s| m.sup(&s.mu));
            assign_subsets(grid_with_cells(&lo, &hi, 1 << a.depth)?, &splats, s.reach_multiplier)
        }
    };
    let report = balance_stats(&table, &splats);
    if a.json {
        println!("{}", serde_json::to_string(&report)?);
    } else {
        print!("{}", table.dump());
        print!("{}", report.to_text());
        println!("leaves {}", table.len());
    }
    Ok(())
}

fn cmd_render(a: &RenderArgs) -> Result<()> {
    let (splats, cams) = load_views(&a.view)?;
    let (s, precision) = settings(a.view.oracle);
    let bg = Vector3::from(a.view.background);
    for cam in &cams {
        let img = match precision {
            Precision::F32 => Image::from_render(&render_view::<f32>(&splats, &cam.camera, &bg, &s)),
            Precision::F64 => Image::from_render(&render_view::<f64>(&splats, &cam.camera, &bg, &s)),
        };
        let path = image_path(&a.view.out, cam, a.view.ppm);
        save_image(&path, &img)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn cmd_render_dist(a: &RenderDistArgs) -> Result<()> {
    let (splats, cams) = load_views(&a.view)?;
    let (s, precision) = settings(a.view.oracle);
    let bg = Vector3::from(a.view.background);
    let table = kd_table(&splats, a.workers, &s)?;
    let mut cfg = ClusterConfig::new(s, precision);
    cfg.transport = transport(a.processes)?;
    let cameras: Vec<Camera> = cams.iter().map(|c| c.camera.clone()).collect();
    let (images, counters) = match precision {
        Precision::F32 => {
            let r = run_manager::<f32>(&splats, &cameras, table, &bg, &cfg)?;
            (r.images.iter().map(Image::from_render).collect::<Vec<_>>(), r.counters)
        }
        Precision::F64 => {
            let r = run_manager::<f64>(&splats, &cameras, table, &bg, &cfg)?;
            (r.images.iter().map(Image::from_render).collect(), r.counters)
        }
    };
    for (cam, img) in cams.iter().zip(&images) {
        let path = image_path(&a.view.out, cam, a.view.ppm);
        save_image(&path, img)?;
        println!("{}", path.display());
    }
    let map: u64 = counters.iter().map(|c| c.map_bytes_received).sum();
    let total: u64 = counters.iter().map(|c| c.bytes_sent + c.bytes_received).sum();
    println!("workers {} map_bytes {} link_bytes {}", a.workers, map, total);
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let scene = load_bundle(&a.bundle)?;
    let init = match &a.init {
        Some(p) => load_splats(p)?,
        None => {
            let n = a.init_count.unwrap_or(scene.points.len());
            init_from_pointcloud(&scene.points, n, a.sh_degree, a.seed)?
        }
    };
    let (s, precision) = settings(a.oracle);
    let cfg = TrainConfig {
        iterations: a.iterations,
        batch_size: a.batch_size,
        lambda_ssim: a.lambda_ssim,
        adam: AdamConfig {
            lr_position_start: a.lr_position_start,
            lr_position_end: a.lr_position_end,
            lr_scale: a.lr_scale,
            lr_rotation: a.lr_rotation,
            lr_opacity: a.lr_opacity,
            lr_sh_dc: a.lr_sh_dc,
            lr_sh_rest: a.lr_sh_rest,
            ..Default::default()
        },
        lr_horizon: a.lr_horizon,
        repartition_interval: a.repartition_interval,
        grad_sync: a.grad_sync,
        seed: a.seed,
        workers: a.workers,
        precision,
        settings: s.with_sh_degree(a.sh_degree),
        log_interval: a.log_interval,
        checkpoint: a.out.clone(),
        transport: Some(transport(a.processes)?),
    };
    let start_count = init.len();
    let mut sink: Box<dyn Write> = match &a.log {
        Some(p) => Box::new(BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout()),
    };
    let outcome = train(&scene, init, &cfg, Some(sink.as_mut()))?;
    sink.flush()?;
    eprintln!(
        "splats {} -> {}; held-out psnr {:.3} ssim {:.4}; repartitions {}; replica divergence {:.3e}; {:.1}s",
        start_count,
        outcome.splats.len(),
        outcome.test_psnr,
        outcome.test_ssim,
        outcome.repartitions.len(),
        outcome.replica_divergence,
        outcome.wall.as_secs_f64()
    );
    Ok(())
}

fn cmd_validate_boundary(a: &BoundaryArgs) -> Result<()> {
    let spec = SynthSpec {
        splats: a.count,
        ..Default::default()
    };
    let splats = random_splats(&spec, &mut ChaCha8Rng::seed_from_u64(a.seed));
    let s = RenderSettings::oracle();
    let table = assign_subsets(from_plane(Vector3::x(), 0.0), &splats, s.reach_multiplier);
    // Camera on the plane x = 0, looking along +y.
    let cam = Camera::look_at(a.width, a.width, a.width as f64, Vector3::new(0.0, -4.0, 0.3), Vector3::new(0.0, 0.0, 0.3), Vector3::z())?;
    let bg = Vector3::new(0.2, 0.2, 0.2);
    let on = boundary_validity_test(&splats, &table, &cam, &bg, &s, Gating::Indicator)?;
    let off = boundary_validity_test(&splats, &table, &cam, &bg, &s, Gating::Disabled)?;
    println!(
        "indicator: off-side pixels {:?}, violations {} -> {}",
        on.off_side,
        on.offending.len(),
        if on.passed() { "PASS" } else { "FAIL" }
    );
    println!(
        "control without indicator: violations {} -> {}",
        off.offending.len(),
        if off.passed() { "unexpected PASS" } else { "fails as expected" }
    );
    if !on.passed() || off.passed() {
        bail!("boundary validation failed");
    }
    Ok(())
}

fn cmd_validate_equivalence(a: &EquivalenceArgs) -> Result<()> {
    let s = RenderSettings::oracle();
    let mut failed = false;
    for seed in a.seed..a.seed + a.scenes {
        let spec = SynthSpec {
            splats: a.count,
            views: a.views,
            ..Default::default()
        };
        let splats = random_splats(&spec, &mut ChaCha8Rng::seed_from_u64(seed));
        let cams: Vec<Camera> = camera_ring(&spec)?.into_iter().map(|c| c.camera).collect();
        let bg = Vector3::from(spec.background);
        let table = kd_table(&splats, a.workers, &s)?;
        let precisions: &[Precision] = if a.oracle { &[Precision::F64] } else { &[Precision::F32, Precision::F64] };
        for &p in precisions {
            let mut cfg = ClusterConfig::new(s.clone(), p);
            cfg.transport = transport(a.processes)?;
            let (worst, tol) = match p {
                Precision::F32 => {
                    let r = run_manager::<f32>(&splats, &cams, table.clone(), &bg, &cfg)?;
                    let d = cams.iter().zip(&r.images).fold(0.0f64, |m, (c, img)| {
                        let mono = render_view::<f32>(&splats, c, &bg, &s);
                        img.color.iter().zip(&mono.color).fold(m, |m, (x, y)| m.max((x - y).abs() as f64))
                    });
                    (d, 1e-4)
                }
                Precision::F64 => {
                    let r = run_manager::<f64>(&splats, &cams, table.clone(), &bg, &cfg)?;
                    let d = cams.iter().zip(&r.images).fold(0.0f64, |m, (c, img)| {
                        let mono = render_view::<f64>(&splats, c, &bg, &s);
                        img.color.iter().zip(&mono.color).fold(m, |m, (x, y)| m.max((x - y).abs()))
                    });
                    (d, 1e-9)
                }
            };
            let ok = worst <= tol;
            failed |= !ok;
            println!(
                "seed {seed} K={} {:?} max|dist-mono| {worst:.3e} (tol {tol:.0e}) {}",
                a.workers,
                p,
                if ok { "PASS" } else { "FAIL" }
            );
        }
    }
    if failed {
        bail!("distributed renders differ from single-worker renders");
    }
    Ok(())
}

fn cmd_bench(a: &BenchArgs) -> Result<()> {
    let splats = a.scene.load()?;
    let s = RenderSettings::default();
    let kd = kd_table(&splats, a.workers, &s)?;
    let lo = Vector3::repeat(-1.0);
    let hi = Vector3::repeat(1.0);
    let grid = assign_subsets(grid_with_cells(&lo, &hi, a.workers)?, &splats, s.reach_multiplier);
    let spec = SynthSpec {
        views: a.views,
        ..Default::default()
    };
    let cams: Vec<Camera> = camera_ring(&spec)?.into_iter().map(|c| c.camera).collect();
    let bg = Vector3::zeros();
    let mut cfg = ClusterConfig::new(s, Precision::F32);
    cfg.transport = transport(a.processes)?;
    let model = comm_model(&cams[0], a.workers, Precision::F32);
    let dp = data_parallel_bytes(splats.len(), splats.iter().map(Splat::sh_degree).max().unwrap_or(0), a.workers);
    let mut out = io::stdout().lock();
    for table in [&kd, &grid] {
        let report = balance_stats(table, &splats);
        if a.json {
            writeln!(out, "{}", serde_json::json!({ "record": "balance", "report": report }))?;
        } else {
            write!(out, "{}", report.to_text())?;
        }
    }
    if a.json {
        writeln!(
            out,
            "{}",
            serde_json::json!({ "record": "comm", "model": model, "data_parallel_bytes_per_step": dp })
        )?;
    } else {
        writeln!(
            out,
            "comm per view: forward {} B, backward {} B; data-parallel gradient exchange {} B/step",
            model.forward_bytes, model.backward_bytes, dp
        )?;
    }
    let mono = timing_harness(&splats, &kd, &cams, &bg, 1, TimingMode::Mono, &cfg)?;
    let mut rows = vec![("mono", mono)];
    for &b in &a.batch {
        rows.push(("kd", timing_harness(&splats, &kd, &cams, &bg, b, TimingMode::Mp, &cfg)?));
        rows.push(("grid", timing_harness(&splats, &grid, &cams, &bg, b, TimingMode::Mp, &cfg)?));
    }
    for (name, r) in rows {
        if a.json {
            writeln!(out, "{}", serde_json::json!({ "record": "timing", "partition": name, "report": r }))?;
        } else {
            write!(out, "[{name}] {}", r.to_text())?;
        }
    }
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        splats: a.count,
        distribution: a.distribution.into(),
        views: a.views,
        width: a.width,
        height: a.height,
        points: a.points.unwrap_or(a.count),
        sh_degree: a.sh_degree,
        ..Default::default()
    };
    let (scene, gt) = synth_scene(&spec, a.seed)?;
    write_bundle(&a.out, &scene, Some(&gt))?;
    println!(
        "{}: {} splats, {} views ({} held out), {} points",
        a.out.display(),
        gt.len(),
        scene.cameras.len(),
        scene.test_views().len(),
        scene.points.len()
    );
    Ok(())
}

fn cmd_worker() -> Result<()> {
    let mut link = StdioLink::new(io::BufReader::new(io::stdin()), io::BufWriter::new(io::stdout()));
    run_worker(&mut link)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match &cli.command {
        Command::Partition(a) => cmd_partition(a),
        Command::Render(a) => cmd_render(a),
        Command::RenderDist(a) => cmd_render_dist(a),
        Command::Train(a) => cmd_train(a),
        Command::ValidateBoundary(a) => cmd_validate_boundary(a),
        Command::ValidateEquivalence(a) => cmd_validate_equivalence(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Worker => cmd_worker(),
    }
}

// Library errors already embed their source, so skip causes the message repeats.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}
