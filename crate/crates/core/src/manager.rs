//! The manager side of the worker protocol.
//!
//! A [`Cluster`] owns one link per worker and drives barrier-synchronized
//! rounds: every request goes to every worker, and the round completes when
//! each worker has answered each request, in order.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::thread::JoinHandle;
use std::time::Duration;

use nalgebra::Vector3;

use crate::camera::Camera;
use crate::engine::{merge, Gating, MergeOrder, PartialImage};
use crate::error::{Error, Result};
use crate::grad::SplatGrad;
use crate::optim::{AdamConfig, OwnedSplat};
use crate::partition::PartitionTable;
use crate::project::RenderSettings;
use crate::protocol::{Message, Precision, ScalarMap, WorkStats, WorkerConfig};
use crate::raster::RenderedImage;
use crate::scalar::Real;
use crate::transport::{channel_pair, Link, LinkCounters, ProcessLink};
use crate::worker::run_worker;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TransportKind {
    /// Workers on threads of this process.
    Threads,
    /// Workers as child processes of the given executable, started with the
    /// `worker` subcommand.
    Processes(PathBuf),
}

#[derive(Clone, Debug)]
pub struct ClusterConfig {
    pub settings: RenderSettings,
    pub precision: Precision,
    pub gating: Gating,
    pub adam: AdamConfig,
    pub timeout: Duration,
    pub transport: TransportKind,
}

impl ClusterConfig {
    pub fn new(settings: RenderSettings, precision: Precision) -> Self {
        ClusterConfig {
            settings,
            precision,
            gating: Gating::Indicator,
            adam: AdamConfig::default(),
            timeout: Duration::from_secs(120),
            transport: TransportKind::Threads,
        }
    }
}

/// Partials of one view, indexed by worker.
#[derive(Clone, Debug)]
pub struct ViewPartials<T: Real> {
    pub view_id: u64,
    pub partials: Vec<PartialImage<T>>,
    pub stats: Vec<WorkStats>,
}

pub struct Cluster {
    links: Vec<Box<dyn Link>>,
    threads: Vec<JoinHandle<Result<()>>>,
    pub table: PartitionTable,
    timeout: Duration,
    precision: Precision,
    next_view_id: u64,
    /// Subset holding each splat's center when the table was installed.
    home: BTreeMap<u64, usize>,
}

impl Cluster {
    pub fn launch(workers: usize, cfg: &ClusterConfig) -> Result<Self> {
        if workers == 0 {
            return Err(Error::Config("at least one worker is required".into()));
        }
        let mut links: Vec<Box<dyn Link>> = Vec::with_capacity(workers);
        let mut threads = Vec::new();
        for _ in 0..workers {
            match &cfg.transport {
                TransportKind::Threads => {
                    let (manager_end, mut worker_end) = channel_pair();
                    threads.push(std::thread::spawn(move || run_worker(&mut worker_end)));
                    links.push(Box::new(manager_end));
                }
                TransportKind::Processes(exe) => links.push(Box::new(ProcessLink::spawn(exe, &["worker"])?)),
            }
        }
        let mut cluster = Cluster {
            links,
            threads,
            table: PartitionTable {
                epoch: 0,
                kind: crate::partition::PartitionKind::KdTree,
                depth: 0,
                subspaces: Vec::new(),
                membership: Vec::new(),
            },
            timeout: cfg.timeout,
            precision: cfg.precision,
            next_view_id: 0,
            home: BTreeMap::new(),
        };
        for w in 0..workers {
            cluster.send(
                w,
                &Message::Configure(Box::new(WorkerConfig {
                    k: w,
                    settings: cfg.settings.clone(),
                    precision: cfg.precision,
                    gating: cfg.gating,
                    adam: cfg.adam.clone(),
                })),
            )?;
        }
        cluster.expect_acks()?;
        Ok(cluster)
    }

    pub fn workers(&self) -> usize {
        self.links.len()
    }

    fn send(&mut self, w: usize, msg: &Message) -> Result<()> {
        self.links[w].send(msg).map_err(|e| Error::WorkerFailed {
            worker: w,
            message: e.to_string(),
        })
    }

    fn recv(&mut self, w: usize) -> Result<Message> {
        match self.links[w].recv(Some(self.timeout)) {
            Ok(Message::Failure { message, .. }) => Err(Error::WorkerFailed { worker: w, message }),
            Ok(m) => Ok(m),
            Err(Error::Protocol(msg)) if msg.starts_with("timed out") => Err(Error::WorkerTimeout { worker: w }),
            Err(e) => Err(Error::WorkerFailed {
                worker: w,
                message: e.to_string(),
            }),
        }
    }

    fn expect_acks(&mut self) -> Result<()> {
        for w in 0..self.workers() {
            match self.recv(w)? {
                Message::Ack { .. } => {}
                other => return Err(unexpected(w, "Ack", &other)),
            }
        }
        Ok(())
    }

    /// Hands each worker its subset (parameters and moments) under a new table.
    pub fn install(&mut self, table: PartitionTable, splats: &[OwnedSplat]) -> Result<()> {
        if table.len() != self.workers() {
            return Err(Error::Config(format!(
                "{} subspaces for {} workers",
                table.len(),
                self.workers()
            )));
        }
        let by_id: BTreeMap<u64, &OwnedSplat> = splats.iter().map(|o| (o.splat.id, o)).collect();
        for sub in &table.subspaces {
            let members = table.membership[sub.k]
                .iter()
                .map(|id| (*by_id[id]).clone())
                .collect();
            self.send(
                sub.k,
                &Message::Repartition {
                    epoch: table.epoch,
                    subspace: sub.clone(),
                    neighbors: table.subspaces.iter().filter(|n| n.k != sub.k).cloned().collect(),
                    splats: members,
                },
            )?;
        }
        self.home = splats
            .iter()
            .map(|o| (o.splat.id, table.locate(&o.splat.mu)))
            .collect();
        self.table = table;
        self.expect_acks()
    }

    /// Dispatches every view to every worker, then collects all partials.
    pub fn render_batch<T: Real>(&mut self, cameras: &[Camera], retain: bool) -> Result<Vec<ViewPartials<T>>> {
        if Precision::of::<T>() != self.precision {
            return Err(Error::Config("render precision differs from the cluster's".into()));
        }
        let first = self.next_view_id;
        self.next_view_id += cameras.len() as u64;
        let epoch = self.table.epoch;
        for w in 0..self.workers() {
            for (i, cam) in cameras.iter().enumerate() {
                self.send(
                    w,
                    &Message::RenderTask {
                        epoch,
                        view_id: first + i as u64,
                        camera: cam.clone(),
                        retain,
                    },
                )?;
            }
        }
        let mut out: Vec<ViewPartials<T>> = (0..cameras.len())
            .map(|i| ViewPartials {
                view_id: first + i as u64,
                partials: Vec::with_capacity(self.workers()),
                stats: Vec::with_capacity(self.workers()),
            })
            .collect();
        for w in 0..self.workers() {
            for (i, cam) in cameras.iter().enumerate() {
                match self.recv(w)? {
                    Message::PartialResult {
                        k,
                        view_id,
                        width,
                        height,
                        color,
                        transmittance,
                        stats,
                    } => {
                        let n = cam.pixel_count();
                        if view_id != first + i as u64 || k != w {
                            return Err(Error::Protocol(format!(
                                "worker {w} answered view {view_id} for subset {k}, expected view {} for subset {w}",
                                first + i as u64
                            )));
                        }
                        if (width, height) != (cam.width, cam.height) || color.values.len() != 3 * n || transmittance.values.len() != n {
                            return Err(Error::Protocol(format!("worker {w} sent a partial of the wrong shape")));
                        }
                        out[i].partials.push(PartialImage {
                            k,
                            view_id,
                            width,
                            height,
                            color: color.to_vec(),
                            transmittance: transmittance.to_vec(),
                        });
                        out[i].stats.push(stats);
                    }
                    other => return Err(unexpected(w, "PartialResult", &other)),
                }
            }
        }
        Ok(out)
    }

    /// Sends per-worker cotangents for retained views; returns the workers'
    /// backward statistics per view.
    pub fn backward_batch<T: Real>(&mut self, views: &[(u64, Vec<(Vec<T>, Vec<T>)>)]) -> Result<Vec<Vec<WorkStats>>> {
        let epoch = self.table.epoch;
        for w in 0..self.workers() {
            for (view_id, cots) in views {
                self.send(
                    w,
                    &Message::BackwardTask {
                        epoch,
                        view_id: *view_id,
                        grad_color: ScalarMap::from_slice(&cots[w].0),
                        grad_t: ScalarMap::from_slice(&cots[w].1),
                    },
                )?;
            }
        }
        let mut stats = vec![Vec::with_capacity(self.workers()); views.len()];
        for w in 0..self.workers() {
            for (i, (view_id, _)) in views.iter().enumerate() {
                match self.recv(w)? {
                    Message::BackwardDone { view_id: v, stats: s, .. } if v == *view_id => stats[i].push(s),
                    other => return Err(unexpected(w, "BackwardDone", &other)),
                }
            }
        }
        Ok(stats)
    }

    /// Ids that belong to more than one subset.
    pub fn shared_ids(&self) -> Vec<u64> {
        let mut count: BTreeMap<u64, usize> = BTreeMap::new();
        for m in &self.table.membership {
            for &id in m {
                *count.entry(id).or_default() += 1;
            }
        }
        count.into_iter().filter(|&(_, c)| c > 1).map(|(id, _)| id).collect()
    }

    /// Sums the gradients of shared splats over their replicas, in subset
    /// order, and gives every replica the sum.
    pub fn sync_shared(&mut self) -> Result<usize> {
        let shared = self.shared_ids();
        let per_worker: Vec<Vec<u64>> = self
            .table
            .membership
            .iter()
            .map(|m| shared.iter().copied().filter(|id| m.binary_search(id).is_ok()).collect())
            .collect();
        for (w, ids) in per_worker.iter().enumerate() {
            self.send(w, &Message::GradRequest { ids: ids.clone() })?;
        }
        let mut sums: BTreeMap<u64, SplatGrad> = BTreeMap::new();
        for w in 0..self.workers() {
            match self.recv(w)? {
                Message::GradReport { grads, .. } => {
                    for g in grads {
                        match sums.get_mut(&g.id) {
                            Some(acc) => acc.add_assign(&g),
                            None => {
                                sums.insert(g.id, g);
                            }
                        }
                    }
                }
                other => return Err(unexpected(w, "GradReport", &other)),
            }
        }
        for (w, ids) in per_worker.iter().enumerate() {
            let grads = ids.iter().map(|id| sums[id].clone()).collect();
            self.send(w, &Message::GradSync { grads })?;
        }
        self.expect_acks()?;
        Ok(shared.len())
    }

    /// Replaces worker `w`'s accumulated gradients for the given splats.
    pub fn set_grads(&mut self, w: usize, grads: Vec<SplatGrad>) -> Result<()> {
        self.send(w, &Message::GradSync { grads })?;
        match self.recv(w)? {
            Message::Ack { .. } => Ok(()),
            other => Err(unexpected(w, "Ack", &other)),
        }
    }

    /// Applies the optimizer everywhere, then copies every splat whose
    /// overlap region has grown into a neighbor subspace over to that
    /// subset, so membership stays a superset of the contributors between
    /// rebuilds. Returns the number of replicas added.
    pub fn step(&mut self, step: u64, lr_position: f64) -> Result<usize> {
        for w in 0..self.workers() {
            self.send(w, &Message::Step { step, lr_position })?;
        }
        let mut wanted: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
        let mut source: BTreeMap<u64, usize> = BTreeMap::new();
        for w in 0..self.workers() {
            match self.recv(w)? {
                Message::Stepped { reach, .. } => {
                    for (id, j) in reach {
                        let j = j as usize;
                        if j >= self.workers() || self.table.membership[j].binary_search(&id).is_ok() {
                            continue;
                        }
                        wanted.entry(j).or_default().push(id);
                        // Prefer the replica the gather would return.
                        if !source.contains_key(&id) || self.home.get(&id) == Some(&w) {
                            source.insert(id, w);
                        }
                    }
                }
                other => return Err(unexpected(w, "Stepped", &other)),
            }
        }
        if wanted.is_empty() {
            return Ok(0);
        }
        let mut by_source: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
        for (&id, &w) in &source {
            by_source.entry(w).or_default().push(id);
        }
        let mut fetched: BTreeMap<u64, OwnedSplat> = BTreeMap::new();
        for (&w, ids) in &by_source {
            self.send(w, &Message::FetchSplats { ids: ids.clone() })?;
        }
        for &w in by_source.keys() {
            match self.recv(w)? {
                Message::Snapshot { splats, .. } => fetched.extend(splats.into_iter().map(|o| (o.splat.id, o))),
                other => return Err(unexpected(w, "Snapshot", &other)),
            }
        }
        let mut added = 0;
        for (&j, ids) in &mut wanted {
            ids.sort_unstable();
            ids.dedup();
            let splats = ids.iter().map(|id| fetched[id].clone()).collect();
            self.send(j, &Message::Adopt { splats })?;
            let members = &mut self.table.membership[j];
            members.extend(ids.iter().copied());
            members.sort_unstable();
            added += ids.len();
        }
        for &j in wanted.keys() {
            match self.recv(j)? {
                Message::Ack { .. } => {}
                other => return Err(unexpected(j, "Ack", &other)),
            }
        }
        Ok(added)
    }

    /// Every worker's splats with their moments.
    pub fn snapshot(&mut self) -> Result<Vec<Vec<OwnedSplat>>> {
        for w in 0..self.workers() {
            self.send(w, &Message::SnapshotRequest)?;
        }
        (0..self.workers())
            .map(|w| match self.recv(w)? {
                Message::Snapshot { splats, .. } => Ok(splats),
                other => Err(unexpected(w, "Snapshot", &other)),
            })
            .collect()
    }

    /// One copy of every splat, taken from the worker whose subspace held its
    /// center at install time; sorted by id.
    pub fn gather(&mut self) -> Result<Vec<OwnedSplat>> {
        let snaps = self.snapshot()?;
        let mut out = Vec::new();
        for (w, splats) in snaps.into_iter().enumerate() {
            out.extend(splats.into_iter().filter(|o| self.home.get(&o.splat.id) == Some(&w)));
        }
        out.sort_by_key(|o| o.splat.id);
        Ok(out)
    }

    /// Largest absolute parameter difference between replicas of one splat.
    pub fn replica_divergence(snapshots: &[Vec<OwnedSplat>]) -> f64 {
        let mut first: BTreeMap<u64, &crate::splat::Splat> = BTreeMap::new();
        let mut worst = 0.0f64;
        for o in snapshots.iter().flatten() {
            match first.get(&o.splat.id) {
                None => {
                    first.insert(o.splat.id, &o.splat);
                }
                Some(a) => {
                    let b = &o.splat;
                    let mut d = (a.mu - b.mu).amax().max((a.log_scale - b.log_scale).amax());
                    d = d.max((a.opacity_logit - b.opacity_logit).abs());
                    for (x, y) in a.rotation.iter().zip(&b.rotation) {
                        d = d.max((x - y).abs());
                    }
                    for (x, y) in a.sh.iter().flatten().zip(b.sh.iter().flatten()) {
                        d = d.max((x - y).abs());
                    }
                    worst = worst.max(d);
                }
            }
        }
        worst
    }

    /// Asks each worker to write its subset to `prefix-<k>.ply`.
    pub fn checkpoint_subsets(&mut self, prefix: &str) -> Result<()> {
        for w in 0..self.workers() {
            self.send(
                w,
                &Message::Checkpoint {
                    path: format!("{prefix}-{w}.ply"),
                },
            )?;
        }
        self.expect_acks()
    }

    pub fn counters(&self) -> Vec<LinkCounters> {
        self.links.iter().map(|l| l.counters()).collect()
    }

    pub fn shutdown(mut self) -> Result<()> {
        for w in 0..self.workers() {
            self.send(w, &Message::Shutdown)?;
        }
        self.expect_acks()?;
        self.links.clear();
        for t in self.threads.drain(..) {
            t.join()
                .map_err(|_| Error::Protocol("worker thread panicked".into()))??;
        }
        Ok(())
    }
}

fn unexpected(w: usize, wanted: &str, got: &Message) -> Error {
    Error::Protocol(format!("worker {w} sent {} while {wanted} was expected", got.name()))
}

/// Output of a render-only run.
pub struct DistributedRender<T: Real> {
    pub images: Vec<RenderedImage<T>>,
    pub partials: Vec<ViewPartials<T>>,
    pub counters: Vec<LinkCounters>,
}

/// Renders `cameras` with `table.len()` workers and merges every view.
pub fn run_manager<T: Real>(
    splats: &[crate::splat::Splat],
    cameras: &[Camera],
    table: PartitionTable,
    background: &Vector3<f64>,
    cfg: &ClusterConfig,
) -> Result<DistributedRender<T>> {
    let mut cluster = Cluster::launch(table.len(), cfg)?;
    let owned: Vec<OwnedSplat> = splats.iter().cloned().map(OwnedSplat::fresh).collect();
    let result = (|| -> Result<(Vec<RenderedImage<T>>, Vec<ViewPartials<T>>)> {
        cluster.install(table, &owned)?;
        let mut images = Vec::with_capacity(cameras.len());
        let mut partials = Vec::with_capacity(cameras.len());
        for cam in cameras {
            let mut views = cluster.render_batch::<T>(std::slice::from_ref(cam), false)?;
            let view = views.pop().expect("one view");
            let order = MergeOrder::compute::<T>(cam, &cluster.table);
            images.push(merge(&view.partials, &order, background)?);
            partials.push(view);
        }
        Ok((images, partials))
    })();
    let counters = cluster.counters();
    let shutdown = cluster.shutdown();
    let (images, partials) = result?;
    shutdown?;
    Ok(DistributedRender {
        images,
        partials,
        counters,
    })
}
