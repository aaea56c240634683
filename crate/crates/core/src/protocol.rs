//! Manager/worker messages and their binary framing.
//!
//! A frame is `u32 length | u8 version | u8 tag | body`, little-endian, where
//! `length` counts everything after itself. Scalar maps travel row-major at
//! the precision announced in their header.

use std::io::{Read, Write};

use nalgebra::Vector3;

use crate::camera::Camera;
use crate::engine::{Gating, PartialImage};
use crate::error::{Error, Result};
use crate::grad::SplatGrad;
use crate::optim::{AdamConfig, OwnedSplat};
use crate::partition::{HalfSpace, Subspace};
use crate::project::{DepthKey, RenderSettings};
use crate::scalar::Real;
use crate::splat::Splat;

pub const VERSION: u8 = 1;
/// Upper bound on a frame body, as a guard against corrupt length prefixes.
pub const MAX_FRAME: u32 = 1 << 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn of<T: Real>() -> Self {
        if T::BYTES == 4 {
            Precision::F32
        } else {
            Precision::F64
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

/// A row-major scalar map carried at a given precision. Values are held as
/// `f64`; for `F32` maps they are exactly representable in `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarMap {
    pub precision: Precision,
    pub values: Vec<f64>,
}

impl ScalarMap {
    pub fn from_slice<T: Real>(v: &[T]) -> Self {
        ScalarMap {
            precision: Precision::of::<T>(),
            values: v.iter().map(|x| x.to_f64()).collect(),
        }
    }

    pub fn to_vec<T: Real>(&self) -> Vec<T> {
        self.values.iter().map(|&x| T::of(x)).collect()
    }

    pub fn wire_bytes(&self) -> usize {
        self.values.len() * self.precision.bytes()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct WorkStats {
    pub splats_projected: u64,
    /// Footprint evaluations, a machine-independent cost measure.
    pub work_units: u64,
    pub compute_ns: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorkerConfig {
    pub k: usize,
    pub settings: RenderSettings,
    pub precision: Precision,
    pub gating: Gating,
    pub adam: AdamConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    Configure(Box<WorkerConfig>),
    Repartition {
        epoch: u64,
        subspace: Subspace,
        /// Every other subspace of the table, for membership checks.
        neighbors: Vec<Subspace>,
        splats: Vec<OwnedSplat>,
    },
    RenderTask {
        epoch: u64,
        view_id: u64,
        camera: Camera,
        /// Keep the projected view for a following backward pass.
        retain: bool,
    },
    PartialResult {
        k: usize,
        view_id: u64,
        width: u32,
        height: u32,
        color: ScalarMap,
        transmittance: ScalarMap,
        stats: WorkStats,
    },
    BackwardTask {
        epoch: u64,
        view_id: u64,
        grad_color: ScalarMap,
        grad_t: ScalarMap,
    },
    BackwardDone {
        k: usize,
        view_id: u64,
        stats: WorkStats,
    },
    /// Asks for the accumulated gradients of the listed splats.
    GradRequest { ids: Vec<u64> },
    GradReport { k: usize, grads: Vec<SplatGrad> },
    /// Summed gradients that replace the local ones before the next step.
    GradSync { grads: Vec<SplatGrad> },
    Step { step: u64, lr_position: f64 },
    SnapshotRequest,
    Snapshot { k: usize, splats: Vec<OwnedSplat> },
    Checkpoint { path: String },
    Shutdown,
    Ack { k: usize },
    Failure { k: usize, message: String },
    /// Reply to `Step`: `(id, subspace)` pairs where a held splat now
    /// qualifies for a neighbor's subset.
    Stepped { k: usize, reach: Vec<(u64, u32)> },
    /// Asks for the listed splats with their moments; answered by `Snapshot`.
    FetchSplats { ids: Vec<u64> },
    /// New members for the receiving subset.
    Adopt { splats: Vec<OwnedSplat> },
}

impl Message {
    fn tag(&self) -> u8 {
        match self {
            Message::Configure(_) => 1,
            Message::Repartition { .. } => 2,
            Message::RenderTask { .. } => 3,
            Message::PartialResult { .. } => 4,
            Message::BackwardTask { .. } => 5,
            Message::BackwardDone { .. } => 6,
            Message::GradRequest { .. } => 7,
            Message::GradReport { .. } => 8,
            Message::GradSync { .. } => 9,
            Message::Step { .. } => 10,
            Message::SnapshotRequest => 11,
            Message::Snapshot { .. } => 12,
            Message::Checkpoint { .. } => 13,
            Message::Shutdown => 14,
            Message::Ack { .. } => 15,
            Message::Failure { .. } => 16,
            Message::Stepped { .. } => 17,
            Message::FetchSplats { .. } => 18,
            Message::Adopt { .. } => 19,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Message::Configure(_) => "Configure",
            Message::Repartition { .. } => "Repartition",
            Message::RenderTask { .. } => "RenderTask",
            Message::PartialResult { .. } => "PartialResult",
            Message::BackwardTask { .. } => "BackwardTask",
            Message::BackwardDone { .. } => "BackwardDone",
            Message::GradRequest { .. } => "GradRequest",
            Message::GradReport { .. } => "GradReport",
            Message::GradSync { .. } => "GradSync",
            Message::Step { .. } => "Step",
            Message::SnapshotRequest => "SnapshotRequest",
            Message::Snapshot { .. } => "Snapshot",
            Message::Checkpoint { .. } => "Checkpoint",
            Message::Shutdown => "Shutdown",
            Message::Ack { .. } => "Ack",
            Message::Failure { .. } => "Failure",
            Message::Stepped { .. } => "Stepped",
            Message::FetchSplats { .. } => "FetchSplats",
            Message::Adopt { .. } => "Adopt",
        }
    }

    /// Bytes of image-shaped scalar maps carried by this message.
    pub fn map_bytes(&self) -> usize {
        match self {
            Message::PartialResult { color, transmittance, .. } => color.wire_bytes() + transmittance.wire_bytes(),
            Message::BackwardTask { grad_color, grad_t, .. } => grad_color.wire_bytes() + grad_t.wire_bytes(),
            _ => 0,
        }
    }

    pub fn partial_result<T: Real>(p: &PartialImage<T>, stats: WorkStats) -> Self {
        Message::PartialResult {
            k: p.k,
            view_id: p.view_id,
            width: p.width,
            height: p.height,
            color: ScalarMap::from_slice(&p.color),
            transmittance: ScalarMap::from_slice(&p.transmittance),
            stats,
        }
    }

    /// Full frame including the length prefix.
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Enc(Vec::with_capacity(64 + self.map_bytes()));
        w.u32(0);
        w.u8(VERSION);
        w.u8(self.tag());
        match self {
            Message::Configure(cfg) => {
                w.u64(cfg.k as u64);
                w.settings(&cfg.settings);
                w.precision(cfg.precision);
                w.u8(match cfg.gating {
                    Gating::Indicator => 0,
                    Gating::Disabled => 1,
                });
                let a = &cfg.adam;
                for v in [
                    a.lr_position_start,
                    a.lr_position_end,
                    a.lr_scale,
                    a.lr_rotation,
                    a.lr_opacity,
                    a.lr_sh_dc,
                    a.lr_sh_rest,
                    a.beta1,
                    a.beta2,
                    a.eps,
                ] {
                    w.f64(v);
                }
            }
            Message::Repartition {
                epoch,
                subspace,
                neighbors,
                splats,
            } => {
                w.u64(*epoch);
                w.subspace(subspace);
                w.u64(neighbors.len() as u64);
                neighbors.iter().for_each(|n| w.subspace(n));
                w.u64(splats.len() as u64);
                for s in splats {
                    w.owned(s);
                }
            }
            Message::RenderTask {
                epoch,
                view_id,
                camera,
                retain,
            } => {
                w.u64(*epoch);
                w.u64(*view_id);
                w.camera(camera);
                w.u8(*retain as u8);
            }
            Message::PartialResult {
                k,
                view_id,
                width,
                height,
                color,
                transmittance,
                stats,
            } => {
                w.u64(*k as u64);
                w.u64(*view_id);
                w.u32(*width);
                w.u32(*height);
                w.stats(stats);
                w.map(color);
                w.map(transmittance);
            }
            Message::BackwardTask {
                epoch,
                view_id,
                grad_color,
                grad_t,
            } => {
                w.u64(*epoch);
                w.u64(*view_id);
                w.map(grad_color);
                w.map(grad_t);
            }
            Message::BackwardDone { k, view_id, stats } => {
                w.u64(*k as u64);
                w.u64(*view_id);
                w.stats(stats);
            }
            Message::GradRequest { ids } | Message::FetchSplats { ids } => {
                w.u64(ids.len() as u64);
                ids.iter().for_each(|&id| w.u64(id));
            }
            Message::GradReport { k, grads } => {
                w.u64(*k as u64);
                w.grads(grads);
            }
            Message::GradSync { grads } => w.grads(grads),
            Message::Step { step, lr_position } => {
                w.u64(*step);
                w.f64(*lr_position);
            }
            Message::SnapshotRequest | Message::Shutdown => {}
            Message::Snapshot { k, splats } => {
                w.u64(*k as u64);
                w.u64(splats.len() as u64);
                for s in splats {
                    w.owned(s);
                }
            }
            Message::Checkpoint { path } => w.str(path),
            Message::Ack { k } => w.u64(*k as u64),
            Message::Failure { k, message } => {
                w.u64(*k as u64);
                w.str(message);
            }
            Message::Stepped { k, reach } => {
                w.u64(*k as u64);
                w.u64(reach.len() as u64);
                for &(id, j) in reach {
                    w.u64(id);
                    w.u32(j);
                }
            }
            Message::Adopt { splats } => {
                w.u64(splats.len() as u64);
                splats.iter().for_each(|s| w.owned(s));
            }
        }
        let len = (w.0.len() - 4) as u32;
        w.0[..4].copy_from_slice(&len.to_le_bytes());
        w.0
    }

    /// Decodes a frame body (everything after the length prefix).
    pub fn decode(body: &[u8]) -> Result<Self> {
        let mut r = Dec { buf: body, pos: 0 };
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::Protocol(format!("unsupported version {version}")));
        }
        let tag = r.u8()?;
        let msg = match tag {
            1 => {
                let k = r.u64()? as usize;
                let settings = r.settings()?;
                let precision = r.precision()?;
                let gating = match r.u8()? {
                    0 => Gating::Indicator,
                    1 => Gating::Disabled,
                    g => return Err(Error::Protocol(format!("bad gating {g}"))),
                };
                let adam = AdamConfig {
                    lr_position_start: r.f64()?,
                    lr_position_end: r.f64()?,
                    lr_scale: r.f64()?,
                    lr_rotation: r.f64()?,
                    lr_opacity: r.f64()?,
                    lr_sh_dc: r.f64()?,
                    lr_sh_rest: r.f64()?,
                    beta1: r.f64()?,
                    beta2: r.f64()?,
                    eps: r.f64()?,
                };
                Message::Configure(Box::new(WorkerConfig {
                    k,
                    settings,
                    precision,
                    gating,
                    adam,
                }))
            }
            2 => {
                let epoch = r.u64()?;
                let subspace = r.subspace()?;
                let n = r.len()?;
                let neighbors = (0..n).map(|_| r.subspace()).collect::<Result<_>>()?;
                let n = r.len()?;
                let splats = (0..n).map(|_| r.owned()).collect::<Result<_>>()?;
                Message::Repartition {
                    epoch,
                    subspace,
                    neighbors,
                    splats,
                }
            }
            3 => Message::RenderTask {
                epoch: r.u64()?,
                view_id: r.u64()?,
                camera: r.camera()?,
                retain: r.u8()? != 0,
            },
            4 => Message::PartialResult {
                k: r.u64()? as usize,
                view_id: r.u64()?,
                width: r.u32()?,
                height: r.u32()?,
                stats: r.stats()?,
                color: r.map()?,
                transmittance: r.map()?,
            },
            5 => Message::BackwardTask {
                epoch: r.u64()?,
                view_id: r.u64()?,
                grad_color: r.map()?,
                grad_t: r.map()?,
            },
            6 => Message::BackwardDone {
                k: r.u64()? as usize,
                view_id: r.u64()?,
                stats: r.stats()?,
            },
            7 => {
                let n = r.len()?;
                Message::GradRequest {
                    ids: (0..n).map(|_| r.u64()).collect::<Result<_>>()?,
                }
            }
            8 => Message::GradReport {
                k: r.u64()? as usize,
                grads: r.grads()?,
            },
            9 => Message::GradSync { grads: r.grads()? },
            10 => Message::Step {
                step: r.u64()?,
                lr_position: r.f64()?,
            },
            11 => Message::SnapshotRequest,
            12 => {
                let k = r.u64()? as usize;
                let n = r.len()?;
                let splats = (0..n).map(|_| r.owned()).collect::<Result<_>>()?;
                Message::Snapshot { k, splats }
            }
            13 => Message::Checkpoint { path: r.str()? },
            14 => Message::Shutdown,
            15 => Message::Ack { k: r.u64()? as usize },
            16 => Message::Failure {
                k: r.u64()? as usize,
                message: r.str()?,
            },
            17 => {
                let k = r.u64()? as usize;
                let n = r.len()?;
                let reach = (0..n).map(|_| Ok((r.u64()?, r.u32()?))).collect::<Result<_>>()?;
                Message::Stepped { k, reach }
            }
            18 => {
                let n = r.len()?;
                Message::FetchSplats {
                    ids: (0..n).map(|_| r.u64()).collect::<Result<_>>()?,
                }
            }
            19 => {
                let n = r.len()?;
                Message::Adopt {
                    splats: (0..n).map(|_| r.owned()).collect::<Result<_>>()?,
                }
            }
            t => return Err(Error::Protocol(format!("unknown message tag {t}"))),
        };
        if r.pos != body.len() {
            return Err(Error::Protocol(format!("{} trailing bytes after {}", body.len() - r.pos, msg.name())));
        }
        Ok(msg)
    }
}

/// Reads one frame body from a byte stream; `Ok(None)` on clean end of stream.
pub fn read_frame(input: &mut impl Read) -> Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match input.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_le_bytes(len);
    if len > MAX_FRAME {
        return Err(Error::Protocol(format!("frame length {len} exceeds limit")));
    }
    let mut body = vec![0u8; len as usize];
    input.read_exact(&mut body)?;
    Ok(Some(body))
}

pub fn write_frame(out: &mut impl Write, frame: &[u8]) -> Result<()> {
    out.write_all(frame)?;
    out.flush()?;
    Ok(())
}

struct Enc(Vec<u8>);

impl Enc {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn vec3(&mut self, v: &Vector3<f64>) {
        v.iter().for_each(|&x| self.f64(x));
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn precision(&mut self, p: Precision) {
        self.u8(p.bytes() as u8);
    }
    fn map(&mut self, m: &ScalarMap) {
        self.precision(m.precision);
        self.u64(m.values.len() as u64);
        match m.precision {
            Precision::F32 => m.values.iter().for_each(|&v| self.0.extend_from_slice(&(v as f32).to_le_bytes())),
            Precision::F64 => m.values.iter().for_each(|&v| self.f64(v)),
        }
    }
    fn settings(&mut self, s: &RenderSettings) {
        self.u64(s.sh_degree as u64);
        for v in [s.truncation, s.reach_multiplier, s.near, s.cov_blur, s.max_sigma, s.stop_threshold] {
            self.f64(v);
        }
        self.u8(match s.depth_key {
            DepthKey::PerRay => 0,
            DepthKey::ViewZ => 1,
        });
    }
    fn camera(&mut self, c: &Camera) {
        self.u32(c.width);
        self.u32(c.height);
        for v in [c.fx, c.fy, c.cx, c.cy] {
            self.f64(v);
        }
        c.q_wc.iter().for_each(|&v| self.f64(v));
        self.vec3(&c.t_wc);
    }
    fn subspace(&mut self, s: &Subspace) {
        self.u64(s.k as u64);
        self.vec3(&s.lo);
        self.vec3(&s.hi);
        self.u64(s.planes.len() as u64);
        for p in &s.planes {
            self.vec3(&p.n);
            self.f64(p.d);
            self.u8(p.closed as u8);
        }
    }
    fn splat(&mut self, s: &Splat) {
        self.u64(s.id);
        self.vec3(&s.mu);
        self.vec3(&s.log_scale);
        s.rotation.iter().for_each(|&v| self.f64(v));
        self.f64(s.opacity_logit);
        self.u64(s.sh.len() as u64);
        s.sh.iter().flatten().for_each(|&v| self.f64(v));
    }
    fn grad(&mut self, g: &SplatGrad) {
        self.u64(g.id);
        self.u64(g.sh.len() as u64);
        g.values().for_each(|v| self.f64(v));
    }
    fn grads(&mut self, gs: &[SplatGrad]) {
        self.u64(gs.len() as u64);
        gs.iter().for_each(|g| self.grad(g));
    }
    fn owned(&mut self, o: &OwnedSplat) {
        self.splat(&o.splat);
        self.grad(&o.m);
        self.grad(&o.v);
    }
    fn stats(&mut self, s: &WorkStats) {
        self.u64(s.splats_projected);
        self.u64(s.work_units);
        self.u64(s.compute_ns);
    }
}

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Dec<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Protocol("truncated frame".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    /// A count, bounded by the bytes left so corrupt input cannot trigger
    /// huge allocations.
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n > (self.buf.len() - self.pos) as u64 {
            return Err(Error::Protocol(format!("count {n} exceeds frame size")));
        }
        Ok(n as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn vec3(&mut self) -> Result<Vector3<f64>> {
        Ok(Vector3::new(self.f64()?, self.f64()?, self.f64()?))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Protocol("invalid utf-8".into()))
    }
    fn precision(&mut self) -> Result<Precision> {
        match self.u8()? {
            4 => Ok(Precision::F32),
            8 => Ok(Precision::F64),
            p => Err(Error::Protocol(format!("bad scalar width {p}"))),
        }
    }
    fn map(&mut self) -> Result<ScalarMap> {
        let precision = self.precision()?;
        let n = self.u64()? as usize;
        let raw = self.take(n.checked_mul(precision.bytes()).ok_or_else(|| Error::Protocol("map too large".into()))?)?;
        let values = match precision {
            Precision::F32 => raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect(),
            Precision::F64 => raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect(),
        };
        Ok(ScalarMap { precision, values })
    }
    fn settings(&mut self) -> Result<RenderSettings> {
        Ok(RenderSettings {
            sh_degree: self.u64()? as usize,
            truncation: self.f64()?,
            reach_multiplier: self.f64()?,
            near: self.f64()?,
            cov_blur: self.f64()?,
            max_sigma: self.f64()?,
            stop_threshold: self.f64()?,
            depth_key: match self.u8()? {
                0 => DepthKey::PerRay,
                1 => DepthKey::ViewZ,
                d => return Err(Error::Protocol(format!("bad depth key {d}"))),
            },
        })
    }
    fn camera(&mut self) -> Result<Camera> {
        let cam = Camera {
            width: self.u32()?,
            height: self.u32()?,
            fx: self.f64()?,
            fy: self.f64()?,
            cx: self.f64()?,
            cy: self.f64()?,
            q_wc: [self.f64()?, self.f64()?, self.f64()?, self.f64()?],
            t_wc: self.vec3()?,
        };
        cam.validate().map_err(|e| Error::Protocol(e.to_string()))?;
        Ok(cam)
    }
    fn subspace(&mut self) -> Result<Subspace> {
        let k = self.u64()? as usize;
        let lo = self.vec3()?;
        let hi = self.vec3()?;
        let n = self.len()?;
        let planes = (0..n)
            .map(|_| {
                Ok(HalfSpace {
                    n: self.vec3()?,
                    d: self.f64()?,
                    closed: self.u8()? != 0,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Subspace { k, planes, lo, hi })
    }
    fn splat(&mut self) -> Result<Splat> {
        let id = self.u64()?;
        let mu = self.vec3()?;
        let log_scale = self.vec3()?;
        let rotation = [self.f64()?, self.f64()?, self.f64()?, self.f64()?];
        let opacity_logit = self.f64()?;
        let n = self.len()?;
        let sh = (0..n)
            .map(|_| Ok([self.f64()?, self.f64()?, self.f64()?]))
            .collect::<Result<_>>()?;
        Ok(Splat {
            id,
            mu,
            log_scale,
            rotation,
            opacity_logit,
            sh,
        })
    }
    fn grad(&mut self) -> Result<SplatGrad> {
        let id = self.u64()?;
        let n = self.len()?;
        let mu = self.vec3()?;
        let log_scale = self.vec3()?;
        let rotation = [self.f64()?, self.f64()?, self.f64()?, self.f64()?];
        let opacity_logit = self.f64()?;
        let sh = (0..n)
            .map(|_| Ok([self.f64()?, self.f64()?, self.f64()?]))
            .collect::<Result<_>>()?;
        Ok(SplatGrad {
            id,
            mu,
            log_scale,
            rotation,
            opacity_logit,
            sh,
        })
    }
    fn grads(&mut self) -> Result<Vec<SplatGrad>> {
        let n = self.len()?;
        (0..n).map(|_| self.grad()).collect()
    }
    fn owned(&mut self) -> Result<OwnedSplat> {
        Ok(OwnedSplat {
            splat: self.splat()?,
            m: self.grad()?,
            v: self.grad()?,
        })
    }
    fn stats(&mut self) -> Result<WorkStats> {
        Ok(WorkStats {
            splats_projected: self.u64()?,
            work_units: self.u64()?,
            compute_ns: self.u64()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn round_trip(m: Message) {
        let frame = m.encode();
        assert_eq!(u32::from_le_bytes(frame[..4].try_into().unwrap()) as usize, frame.len() - 4);
        assert_eq!(Message::decode(&frame[4..]).unwrap(), m);
    }

    #[test]
    fn messages_round_trip() {
        let splat = Splat::isotropic(42, Vector3::new(1.0, -2.0, 0.5), 0.1, 0.3, [0.1, 0.5, 0.9]);
        let cam = Camera::look_at(20, 10, 15.0, Vector3::new(0.0, -3.0, 0.0), Vector3::zeros(), Vector3::z()).unwrap();
        round_trip(Message::Configure(Box::new(WorkerConfig {
            k: 3,
            settings: RenderSettings::oracle(),
            precision: Precision::F64,
            gating: Gating::Indicator,
            adam: AdamConfig::default(),
        })));
        let halves = crate::partition::from_plane(Vector3::x(), 0.5).subspaces;
        round_trip(Message::Repartition {
            epoch: 2,
            subspace: halves[1].clone(),
            neighbors: vec![halves[0].clone()],
            splats: vec![OwnedSplat::fresh(splat.clone())],
        });
        round_trip(Message::Stepped {
            k: 1,
            reach: vec![(42, 0), (7, 3)],
        });
        round_trip(Message::FetchSplats { ids: vec![42, 7] });
        round_trip(Message::Adopt {
            splats: vec![OwnedSplat::fresh(splat.clone())],
        });
        round_trip(Message::RenderTask {
            epoch: 1,
            view_id: 9,
            camera: cam,
            retain: true,
        });
        round_trip(Message::PartialResult {
            k: 1,
            view_id: 9,
            width: 2,
            height: 1,
            color: ScalarMap::from_slice(&[0.25f32, 0.5, 0.75, 0.0, 1.0, 0.125]),
            transmittance: ScalarMap::from_slice(&[1.0f32, 0.5]),
            stats: WorkStats {
                splats_projected: 3,
                work_units: 4,
                compute_ns: 5,
            },
        });
        round_trip(Message::GradSync {
            grads: vec![SplatGrad::zeros_like(&splat)],
        });
        round_trip(Message::Failure {
            k: 0,
            message: "boom".into(),
        });
        round_trip(Message::Shutdown);
    }

    #[test]
    fn f32_map_payload_size() {
        let m = Message::PartialResult {
            k: 0,
            view_id: 0,
            width: 100,
            height: 100,
            color: ScalarMap::from_slice(&vec![0.0f32; 30000]),
            transmittance: ScalarMap::from_slice(&vec![1.0f32; 10000]),
            stats: WorkStats::default(),
        };
        assert_eq!(m.map_bytes(), 160_000);
    }

    #[test]
    fn corrupt_frames_are_rejected() {
        assert!(Message::decode(&[2, 3]).is_err());
        assert!(Message::decode(&[VERSION, 200]).is_err());
        let mut frame = Message::Ack { k: 1 }.encode();
        frame.push(0);
        assert!(Message::decode(&frame[4..]).is_err());
        assert!(Message::decode(&Message::Ack { k: 1 }.encode()[4..8]).is_err());
    }
}
