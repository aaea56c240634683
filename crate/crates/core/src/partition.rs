//! Convex subspaces, overlapping splat subsets and per-ray subspace order.
//!
//! Subspaces are intersections of half-spaces. Sibling leaves share a split
//! plane with opposite senses (`<` on one side, `>=` on the other), and the
//! outermost faces are dropped, so every point of space lies in exactly one
//! subspace.

use std::fmt::Write as _;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::camera::Ray;
use crate::error::{Error, Result};
use crate::scalar::{c, Real};
use crate::splat::Splat;

/// `n . x + d <= 0` when closed, `< 0` when open.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HalfSpace {
    pub n: Vector3<f64>,
    pub d: f64,
    pub closed: bool,
}

impl HalfSpace {
    pub fn new(n: Vector3<f64>, d: f64, closed: bool) -> Self {
        let len = n.norm();
        HalfSpace {
            n: n / len,
            d: d / len,
            closed,
        }
    }

    /// `x[axis] < value`.
    pub fn below(axis: usize, value: f64) -> Self {
        HalfSpace {
            n: unit(axis, 1.0),
            d: -value,
            closed: false,
        }
    }

    /// `x[axis] >= value`.
    pub fn at_or_above(axis: usize, value: f64) -> Self {
        HalfSpace {
            n: unit(axis, -1.0),
            d: value,
            closed: true,
        }
    }

    #[inline]
    pub fn value<T: Real>(&self, x: &Vector3<T>) -> T {
        x.x * c::<T>(self.n.x) + x.y * c::<T>(self.n.y) + x.z * c::<T>(self.n.z) + c::<T>(self.d)
    }

    #[inline]
    pub fn contains<T: Real>(&self, x: &Vector3<T>) -> bool {
        let v = self.value(x);
        if self.closed {
            v <= T::zero()
        } else {
            v < T::zero()
        }
    }
}

fn unit(axis: usize, sign: f64) -> Vector3<f64> {
    let mut n = Vector3::zeros();
    n[axis] = sign;
    n
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subspace {
    pub k: usize,
    pub planes: Vec<HalfSpace>,
    /// Axis-aligned bounds; unbounded faces are infinite.
    pub lo: Vector3<f64>,
    pub hi: Vector3<f64>,
}

impl Subspace {
    pub fn everything(k: usize) -> Self {
        Subspace {
            k,
            planes: Vec::new(),
            lo: Vector3::repeat(f64::NEG_INFINITY),
            hi: Vector3::repeat(f64::INFINITY),
        }
    }

    #[inline]
    pub fn contains<T: Real>(&self, x: &Vector3<T>) -> bool {
        self.planes.iter().all(|p| p.contains(x))
    }

    /// Ray-parameter interval `[t_in, t_out]` of the line inside this
    /// subspace, or `None` if the line misses it.
    pub fn clip<T: Real>(&self, ray: &Ray<T>) -> Option<(T, T)> {
        let mut t_in = -T::infinity();
        let mut t_out = T::infinity();
        for p in &self.planes {
            let n = p.n.map(c::<T>);
            let nd = n.dot(&ray.d);
            let val = p.value(&ray.o);
            if nd == T::zero() {
                if !p.contains(&ray.o) {
                    return None;
                }
                continue;
            }
            let t = -val / nd;
            if nd > T::zero() {
                t_out = t_out.min(t);
            } else {
                t_in = t_in.max(t);
            }
        }
        (t_in <= t_out).then_some((t_in, t_out))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PartitionKind {
    KdTree,
    FixedGrid,
}

impl PartitionKind {
    pub fn name(self) -> &'static str {
        match self {
            PartitionKind::KdTree => "kdtree",
            PartitionKind::FixedGrid => "grid",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionTable {
    pub epoch: u64,
    pub kind: PartitionKind,
    pub depth: u32,
    pub subspaces: Vec<Subspace>,
    /// Sorted splat ids of each subset; empty until [`assign_subsets`].
    pub membership: Vec<Vec<u64>>,
}

impl PartitionTable {
    pub fn len(&self) -> usize {
        self.subspaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subspaces.is_empty()
    }

    /// The unique subspace containing `x`.
    pub fn locate<T: Real>(&self, x: &Vector3<T>) -> usize {
        self.subspaces
            .iter()
            .position(|s| s.contains(x))
            .expect("subspaces tile space")
    }

    pub fn with_epoch(mut self, epoch: u64) -> Self {
        self.epoch = epoch;
        self
    }

    /// Number of splat centers in each subspace.
    pub fn center_counts(&self, splats: &[Splat]) -> Vec<usize> {
        let mut counts = vec![0; self.len()];
        for s in splats {
            counts[self.locate(&s.mu)] += 1;
        }
        counts
    }

    /// Human-readable listing of every subspace's planes and members.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "partition kind={} depth={} epoch={} subspaces={}",
            self.kind.name(),
            self.depth,
            self.epoch,
            self.len()
        );
        for s in &self.subspaces {
            let members = self.membership.get(s.k).map(Vec::as_slice).unwrap_or(&[]);
            let _ = writeln!(out, "subspace {} planes={} members={}", s.k, s.planes.len(), members.len());
            for p in &s.planes {
                let _ = writeln!(
                    out,
                    "  plane {} {} {} {} {}",
                    p.n.x,
                    p.n.y,
                    p.n.z,
                    p.d,
                    if p.closed { "closed" } else { "open" }
                );
            }
            let ids: Vec<String> = members.iter().map(u64::to_string).collect();
            let _ = writeln!(out, "  members {}", ids.join(" "));
        }
        out
    }
}

/// Median-split KD tree of depth `depth` over `centers`.
///
/// Each node splits along the axis of widest center extent; the plane sits at
/// the median (midpoint of the two middle values for even counts). The left
/// child takes `<`, the right child `>=`.
pub fn build_kdtree(centers: &[Vector3<f64>], depth: u32) -> Result<PartitionTable> {
    if centers.is_empty() {
        return Err(Error::Empty("no centers to partition"));
    }
    if depth > 0 && extent(centers, &(0..centers.len()).collect::<Vec<_>>()).max() == 0.0 {
        return Err(Error::DegeneratePointSet);
    }
    let mut leaves = Vec::new();
    let all: Vec<usize> = (0..centers.len()).collect();
    split_node(centers, all, depth, Subspace::everything(0), &mut leaves);
    for (k, s) in leaves.iter_mut().enumerate() {
        s.k = k;
    }
    Ok(PartitionTable {
        epoch: 0,
        kind: PartitionKind::KdTree,
        depth,
        membership: vec![Vec::new(); leaves.len()],
        subspaces: leaves,
    })
}

fn extent(centers: &[Vector3<f64>], idx: &[usize]) -> Vector3<f64> {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for &i in idx {
        lo = lo.inf(&centers[i]);
        hi = hi.sup(&centers[i]);
    }
    if idx.is_empty() {
        Vector3::zeros()
    } else {
        hi - lo
    }
}

fn split_node(centers: &[Vector3<f64>], mut idx: Vec<usize>, depth: u32, node: Subspace, out: &mut Vec<Subspace>) {
    if depth == 0 {
        out.push(node);
        return;
    }
    let ext = extent(centers, &idx);
    let axis = ext.imax();
    let value = if ext[axis] > 0.0 {
        idx.sort_by(|&a, &b| centers[a][axis].total_cmp(&centers[b][axis]).then(a.cmp(&b)));
        let n = idx.len();
        let m = n / 2;
        let upper = centers[idx[m]][axis];
        if n % 2 == 0 {
            let lower = centers[idx[m - 1]][axis];
            let mid = 0.5 * (lower + upper);
            if lower < mid {
                mid
            } else {
                upper
            }
        } else {
            upper
        }
    } else {
        // Zero or one distinct center left: any plane inside the node works.
        fallback_plane(centers, &idx, &node, axis)
    };
    let (left_idx, right_idx): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| centers[i][axis] < value);
    let mut left = node.clone();
    left.planes.push(HalfSpace::below(axis, value));
    left.hi[axis] = value;
    let mut right = node;
    right.planes.push(HalfSpace::at_or_above(axis, value));
    right.lo[axis] = value;
    split_node(centers, left_idx, depth - 1, left, out);
    split_node(centers, right_idx, depth - 1, right, out);
}

fn fallback_plane(centers: &[Vector3<f64>], idx: &[usize], node: &Subspace, axis: usize) -> f64 {
    if let Some(&i) = idx.first() {
        return centers[i][axis];
    }
    let (lo, hi) = (node.lo[axis], node.hi[axis]);
    match (lo.is_finite(), hi.is_finite()) {
        (true, true) => 0.5 * (lo + hi),
        (true, false) => lo + 1.0,
        (false, true) => hi - 1.0,
        (false, false) => 0.0,
    }
}

/// Regular grid over `[lo, hi]` with the given cell size; outer cells extend
/// to infinity.
pub fn build_fixed_grid(lo: &Vector3<f64>, hi: &Vector3<f64>, cell_size: &Vector3<f64>) -> Result<PartitionTable> {
    if cell_size.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Config(format!("cell size must be positive, got {cell_size:?}")));
    }
    let counts: Vec<usize> = (0..3)
        .map(|a| (((hi[a] - lo[a]) / cell_size[a]).ceil() as usize).max(1))
        .collect();
    let mut subspaces = Vec::new();
    for iz in 0..counts[2] {
        for iy in 0..counts[1] {
            for ix in 0..counts[0] {
                let cell = [ix, iy, iz];
                let mut s = Subspace::everything(subspaces.len());
                for a in 0..3 {
                    if cell[a] > 0 {
                        let v = lo[a] + cell[a] as f64 * cell_size[a];
                        s.planes.push(HalfSpace::at_or_above(a, v));
                        s.lo[a] = v;
                    }
                    if cell[a] + 1 < counts[a] {
                        let v = lo[a] + (cell[a] + 1) as f64 * cell_size[a];
                        s.planes.push(HalfSpace::below(a, v));
                        s.hi[a] = v;
                    }
                }
                subspaces.push(s);
            }
        }
    }
    Ok(PartitionTable {
        epoch: 0,
        kind: PartitionKind::FixedGrid,
        depth: 0,
        membership: vec![Vec::new(); subspaces.len()],
        subspaces,
    })
}

/// Two subspaces split by a single plane: `k = 0` is the open side
/// `n . x + d < 0`, `k = 1` the closed complement.
pub fn from_plane(n: Vector3<f64>, d: f64) -> PartitionTable {
    let front = HalfSpace::new(n, d, false);
    let back = HalfSpace {
        n: -front.n,
        d: -front.d,
        closed: true,
    };
    let mk = |k: usize, p: HalfSpace| Subspace {
        planes: vec![p],
        ..Subspace::everything(k)
    };
    PartitionTable {
        epoch: 0,
        kind: PartitionKind::KdTree,
        depth: 1,
        subspaces: vec![mk(0, front), mk(1, back)],
        membership: vec![Vec::new(); 2],
    }
}

/// Overlap threshold `D_i` of a splat.
pub fn overlap_threshold(splat: &Splat, multiplier: f64) -> f64 {
    splat.reach(multiplier)
}

/// Whether `splat` belongs in the subset of `sub`: its center lies within
/// `D_i` of every plane, up to a small slack for the renderer's rounding.
pub fn qualifies(splat: &Splat, sub: &Subspace, multiplier: f64) -> bool {
    let reach = overlap_threshold(splat, multiplier);
    let scale = 1.0 + splat.mu.amax();
    sub.planes.iter().all(|p| {
        let slack = 1e-4 * reach + 1e-5 * (scale + p.d.abs());
        p.value(&splat.mu) <= reach + slack
    })
}

/// Fills `N_k`: splat `i` joins subset `k` when its center is within `D_i`
/// of every plane of `S_k`.
///
/// A small relative slack absorbs rounding in the renderer's intersection
/// points, so any splat that can contribute inside `S_k` is a member.
pub fn assign_subsets(mut table: PartitionTable, splats: &[Splat], multiplier: f64) -> PartitionTable {
    let mut membership = vec![Vec::new(); table.len()];
    for s in splats {
        for sub in &table.subspaces {
            if qualifies(s, sub, multiplier) {
                membership[sub.k].push(s.id);
            }
        }
    }
    for m in &mut membership {
        m.sort_unstable();
    }
    table.membership = membership;
    table
}

/// Orthogonal projection of `u` onto the ray's line.
#[inline]
pub fn intersection_point<T: Real>(ray: &Ray<T>, u: &Vector3<T>) -> Vector3<T> {
    ray.o + ray.d * ray.d.dot(&(u - ray.o))
}

#[inline]
pub fn indicator<T: Real>(x: &Vector3<T>, subspace: &Subspace) -> u8 {
    subspace.contains(x) as u8
}

/// Subspaces the ray passes through in front of its origin, in traversal
/// order (entry parameter ascending, ties by index).
pub fn subspace_order<T: Real>(ray: &Ray<T>, table: &PartitionTable) -> Vec<usize> {
    let mut hits: Vec<(T, usize)> = Vec::with_capacity(table.len());
    for s in &table.subspaces {
        if let Some((t_in, t_out)) = s.clip(ray) {
            if t_out > T::zero() {
                hits.push((t_in.max(T::zero()), s.k));
            }
        }
    }
    hits.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    hits.into_iter().map(|(_, k)| k).collect()
}
