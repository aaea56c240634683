//! A worker owning one subset: renders partials, runs their backward pass,
//! and updates its splats.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use crate::camera::Camera;
use crate::engine::{partial_backward, partial_from_view, Gating};
use crate::error::{Error, Result};
use crate::grad::{GradBuffers, SplatGrad};
use crate::optim::{adam_update, AdamConfig, OwnedSplat};
use crate::partition::{qualifies, Subspace};
use crate::ply::save_splats;
use crate::protocol::{Message, Precision, ScalarMap, WorkStats, WorkerConfig};
use crate::raster::ProjectedView;
use crate::scalar::Real;
use crate::splat::Splat;
use crate::transport::Link;

enum CachedView {
    F32(ProjectedView<f32>),
    F64(ProjectedView<f64>),
}

pub struct WorkerState {
    pub k: usize,
    pub epoch: u64,
    pub subspace: Subspace,
    pub neighbors: Vec<Subspace>,
    /// Owned splats in ascending id order.
    pub splats: Vec<Splat>,
    pub m: Vec<SplatGrad>,
    pub v: Vec<SplatGrad>,
    pub grads: GradBuffers,
    config: Option<WorkerConfig>,
    cache: BTreeMap<u64, CachedView>,
}

impl Default for WorkerState {
    fn default() -> Self {
        WorkerState {
            k: 0,
            epoch: 0,
            subspace: Subspace::everything(0),
            neighbors: Vec::new(),
            splats: Vec::new(),
            m: Vec::new(),
            v: Vec::new(),
            grads: GradBuffers { grads: Vec::new() },
            config: None,
            cache: BTreeMap::new(),
        }
    }
}

impl WorkerState {
    fn config(&self) -> Result<&WorkerConfig> {
        self.config
            .as_ref()
            .ok_or_else(|| Error::Protocol("worker used before Configure".into()))
    }

    fn check_epoch(&self, epoch: u64) -> Result<()> {
        if epoch != self.epoch {
            return Err(Error::EpochMismatch {
                worker: self.epoch,
                task: epoch,
            });
        }
        Ok(())
    }

    fn install(&mut self, epoch: u64, subspace: Subspace, neighbors: Vec<Subspace>, mut owned: Vec<OwnedSplat>) {
        owned.sort_by_key(|o| o.splat.id);
        self.epoch = epoch;
        self.k = subspace.k;
        self.subspace = subspace;
        self.neighbors = neighbors;
        self.splats = owned.iter().map(|o| o.splat.clone()).collect();
        self.grads = GradBuffers::zeros(&self.splats);
        let (m, v) = owned.into_iter().map(|o| (o.m, o.v)).unzip();
        self.m = m;
        self.v = v;
        self.cache.clear();
    }

    fn owned(&self) -> Vec<OwnedSplat> {
        self.splats
            .iter()
            .zip(self.m.iter().zip(&self.v))
            .map(|(s, (m, v))| OwnedSplat {
                splat: s.clone(),
                m: m.clone(),
                v: v.clone(),
            })
            .collect()
    }

    fn render(&mut self, view_id: u64, camera: &Camera, retain: bool) -> Result<Message> {
        let cfg = self.config()?.clone();
        match cfg.precision {
            Precision::F32 => {
                let (msg, pv) = self.render_as::<f32>(view_id, camera, &cfg);
                if retain {
                    self.cache.insert(view_id, CachedView::F32(pv));
                }
                Ok(msg)
            }
            Precision::F64 => {
                let (msg, pv) = self.render_as::<f64>(view_id, camera, &cfg);
                if retain {
                    self.cache.insert(view_id, CachedView::F64(pv));
                }
                Ok(msg)
            }
        }
    }

    fn render_as<T: Real>(&self, view_id: u64, camera: &Camera, cfg: &WorkerConfig) -> (Message, ProjectedView<T>) {
        let start = Instant::now();
        let pv = ProjectedView::<T>::new(&self.splats, camera, &cfg.settings);
        let partial = partial_from_view(&pv, &self.subspace, view_id, cfg.gating);
        let stats = WorkStats {
            splats_projected: pv.splats.len() as u64,
            work_units: pv.work_units(),
            compute_ns: start.elapsed().as_nanos() as u64,
        };
        (Message::partial_result(&partial, stats), pv)
    }

    fn backward(&mut self, view_id: u64, grad_color: &ScalarMap, grad_t: &ScalarMap) -> Result<Message> {
        let gating = self.config()?.gating;
        let start = Instant::now();
        let cached = self
            .cache
            .remove(&view_id)
            .ok_or_else(|| Error::Protocol(format!("backward for view {view_id} without a retained render")))?;
        let (grads, work_units) = match &cached {
            CachedView::F32(pv) => (self.backward_as(pv, gating, grad_color, grad_t)?, pv.work_units()),
            CachedView::F64(pv) => (self.backward_as(pv, gating, grad_color, grad_t)?, pv.work_units()),
        };
        self.grads.add_assign(&grads);
        Ok(Message::BackwardDone {
            k: self.k,
            view_id,
            stats: WorkStats {
                splats_projected: 0,
                work_units,
                compute_ns: start.elapsed().as_nanos() as u64,
            },
        })
    }

    fn backward_as<T: Real>(&self, pv: &ProjectedView<T>, gating: Gating, gc: &ScalarMap, gt: &ScalarMap) -> Result<GradBuffers> {
        let n = pv.width() as usize * pv.height() as usize;
        if gc.values.len() != 3 * n || gt.values.len() != n {
            return Err(Error::Protocol(format!(
                "gradient maps of {} and {} values for a {}x{} view",
                gc.values.len(),
                gt.values.len(),
                pv.width(),
                pv.height()
            )));
        }
        partial_backward(&self.splats, pv, &self.subspace, gating, &gc.to_vec::<T>(), &gt.to_vec::<T>())
    }

    /// Adds splats to this subset; ones already held are left alone.
    fn adopt(&mut self, splats: Vec<OwnedSplat>) {
        let mut owned = self.owned();
        for o in splats {
            if self.index_of(o.splat.id).is_none() {
                owned.push(o);
            }
        }
        let (epoch, sub, neighbors) = (self.epoch, self.subspace.clone(), std::mem::take(&mut self.neighbors));
        self.install(epoch, sub, neighbors, owned);
    }

    /// Neighbor subsets that held splats now qualify for.
    fn reach(&self, multiplier: f64) -> Vec<(u64, u32)> {
        let mut out = Vec::new();
        for s in &self.splats {
            for n in &self.neighbors {
                if qualifies(s, n, multiplier) {
                    out.push((s.id, n.k as u32));
                }
            }
        }
        out
    }

    fn index_of(&self, id: u64) -> Option<usize> {
        self.splats.binary_search_by_key(&id, |s| s.id).ok()
    }

    fn step(&mut self, step: u64, lr_position: f64, adam: &AdamConfig) {
        for (i, s) in self.splats.iter_mut().enumerate() {
            adam_update(s, &mut self.m[i], &mut self.v[i], &self.grads.grads[i], step, lr_position, adam);
        }
        self.grads.clear();
        self.cache.clear();
    }

    /// Handles one message; `Ok(None)` means no reply is due.
    pub fn handle(&mut self, msg: Message) -> Result<Option<Message>> {
        let k = self.k;
        Ok(Some(match msg {
            Message::Configure(cfg) => {
                self.k = cfg.k;
                self.config = Some(*cfg);
                Message::Ack { k: self.k }
            }
            Message::Repartition {
                epoch,
                subspace,
                neighbors,
                splats,
            } => {
                self.install(epoch, subspace, neighbors, splats);
                Message::Ack { k: self.k }
            }
            Message::RenderTask {
                epoch,
                view_id,
                camera,
                retain,
            } => {
                self.check_epoch(epoch)?;
                self.render(view_id, &camera, retain)?
            }
            Message::BackwardTask {
                epoch,
                view_id,
                grad_color,
                grad_t,
            } => {
                self.check_epoch(epoch)?;
                self.backward(view_id, &grad_color, &grad_t)?
            }
            Message::GradRequest { ids } => {
                let grads = ids
                    .iter()
                    .filter_map(|&id| self.index_of(id).map(|i| self.grads.grads[i].clone()))
                    .collect();
                Message::GradReport { k, grads }
            }
            Message::GradSync { grads } => {
                for g in grads {
                    if let Some(i) = self.index_of(g.id) {
                        self.grads.grads[i] = g;
                    }
                }
                Message::Ack { k }
            }
            Message::Step { step, lr_position } => {
                let cfg = self.config()?;
                let (adam, multiplier) = (cfg.adam.clone(), cfg.settings.reach_multiplier);
                self.step(step, lr_position, &adam);
                Message::Stepped {
                    k,
                    reach: self.reach(multiplier),
                }
            }
            Message::FetchSplats { ids } => Message::Snapshot {
                k,
                splats: self
                    .owned()
                    .into_iter()
                    .filter(|o| ids.binary_search(&o.splat.id).is_ok())
                    .collect(),
            },
            Message::Adopt { splats } => {
                self.adopt(splats);
                Message::Ack { k }
            }
            Message::SnapshotRequest => Message::Snapshot { k, splats: self.owned() },
            Message::Checkpoint { path } => {
                save_splats(Path::new(&path), &self.splats)?;
                Message::Ack { k }
            }
            Message::Shutdown => Message::Ack { k },
            other => return Err(Error::Protocol(format!("worker cannot handle {}", other.name()))),
        }))
    }
}

/// Serves messages until `Shutdown` or until the link closes.
pub fn run_worker(link: &mut dyn Link) -> Result<()> {
    let mut state = WorkerState::default();
    loop {
        let msg = match link.recv(None) {
            Ok(m) => m,
            // The manager going away ends the worker.
            Err(Error::Protocol(_)) => return Ok(()),
            Err(e) => return Err(e),
        };
        let shutdown = matches!(msg, Message::Shutdown);
        match state.handle(msg) {
            Ok(Some(reply)) => link.send(&reply)?,
            Ok(None) => {}
            Err(e) => link.send(&Message::Failure {
                k: state.k,
                message: e.to_string(),
            })?,
        }
        if shutdown {
            return Ok(());
        }
    }
}
