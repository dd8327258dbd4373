//! Reliability-guided correlation over the whole subset grid.
//!
//! The seed point and its four neighbours are optimised first on one thread.
//! Every converged point then claims its unclaimed neighbours and pushes them
//! onto the owning thread's priority queue, keyed by its own ZNCC. Idle
//! threads steal the best entry from another queue. When every queue is empty
//! and nothing is in flight, the best-correlated unclaimed point (by FFT peak
//! quality) is used as a new seed, so disconnected regions are still visited.

use std::cmp::Ordering as CmpOrdering;
use std::collections::BinaryHeap;
use std::sync::atomic::{AtomicU8, AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};
use std::time::Duration;

use crate::error::{DicError, Result};
use crate::fftcc::{multiwindow_displacement, InitField};
use crate::grid::{build_subset_grid, SubsetGrid};
use crate::image::GrayImage;
use crate::interp::SplineCoefficients;
use crate::optimizer::{lm_minimize_with, LmWorkspace, ShapeParams, SubsetData, SubsetResult, SubsetStatus};
use crate::params::{CostKind, DicParams, Method, ShapeKind};
use crate::roi::RoiMask;

const UNCLAIMED: u8 = 0;
const CLAIMED: u8 = 1;
const DONE: u8 = 2;

/// Displacement field for one deformed image.
#[derive(Debug, Clone, PartialEq)]
pub struct DicResult {
    pub grid: SubsetGrid,
    pub u_x: Vec<f64>,
    pub u_y: Vec<f64>,
    pub zncc: Vec<f64>,
    pub iterations: Vec<u32>,
    pub status: Vec<SubsetStatus>,
    pub shapes: Vec<ShapeParams>,
    pub image_label: String,
    pub cost: CostKind,
    pub shape: ShapeKind,
}

impl DicResult {
    pub fn len(&self) -> usize {
        self.u_x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u_x.is_empty()
    }

    pub fn converged_count(&self) -> usize {
        self.status.iter().filter(|s| **s == SubsetStatus::Converged).count()
    }

    /// Fraction of present points that converged.
    pub fn converged_fraction(&self) -> f64 {
        let present = self.grid.present_count();
        if present == 0 {
            0.0
        } else {
            self.converged_count() as f64 / present as f64
        }
    }

    pub fn mean_zncc(&self) -> f64 {
        let (s, n) = self
            .zncc
            .iter()
            .zip(&self.status)
            .filter(|(z, s)| **s != SubsetStatus::Absent && z.is_finite())
            .fold((0.0, 0usize), |(s, n), (z, _)| (s + z, n + 1));
        if n == 0 {
            f64::NAN
        } else {
            s / n as f64
        }
    }
}

/// Set the displacements of every non-converged point to NaN.
pub fn flag_unconverged(result: &DicResult, as_nan: bool) -> DicResult {
    let mut out = result.clone();
    if as_nan {
        for i in 0..out.len() {
            if out.status[i] != SubsetStatus::Converged {
                out.u_x[i] = f64::NAN;
                out.u_y[i] = f64::NAN;
            }
        }
    }
    out
}

/// Diagnostics of one reliability-guided run.
#[derive(Debug, Clone, Default)]
pub struct RgStats {
    /// Points handed to the optimiser (each point counts once).
    pub optimisations: usize,
    /// Points in processing order (only when tracing).
    pub order: Vec<usize>,
    /// Per pop: the popped priority and the best priority left in the same
    /// queue right after (only when tracing).
    pub trace: Vec<(f64, f64)>,
    pub reseeds: usize,
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    priority: f64,
    seq: u64,
    point: usize,
    guess: ShapeParams,
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == CmpOrdering::Equal
    }
}

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<CmpOrdering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> CmpOrdering {
        // highest priority first, then first pushed
        self.priority
            .total_cmp(&other.priority)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Shape parameters of a converged point re-expressed around a neighbour
/// offset by `(dx, dy)` pixels.
fn recenter(shape: &ShapeParams, dx: f64, dy: f64) -> ShapeParams {
    let p = shape.as_slice();
    let (wx, wy) = shape.warp(dx, dy);
    let mut q = p.to_vec();
    q[0] = wx - dx;
    q[1] = wy - dy;
    if p.len() == 12 {
        q[2] = p[2] + 2.0 * p[6] * dx + p[7] * dy;
        q[3] = p[3] + p[7] * dx + 2.0 * p[8] * dy;
        q[4] = p[4] + 2.0 * p[9] * dx + p[10] * dy;
        q[5] = p[5] + p[10] * dx + 2.0 * p[11] * dy;
    }
    ShapeParams::from_slice(shape.kind(), &q).unwrap_or(*shape)
}

struct Scheduler<'a> {
    reference: &'a GrayImage,
    spline: &'a SplineCoefficients,
    grid: &'a SubsetGrid,
    init: &'a InitField,
    params: &'a DicParams,
    claims: Vec<AtomicU8>,
    results: Vec<OnceLock<SubsetResult>>,
    queues: Vec<Mutex<BinaryHeap<Entry>>>,
    seq: AtomicUsize,
    queued: AtomicUsize,
    in_flight: AtomicUsize,
    done: AtomicUsize,
    total: usize,
    optimisations: AtomicUsize,
    reseed: Mutex<ReseedCursor>,
    tracing: bool,
    order: Mutex<Vec<usize>>,
    trace: Mutex<Vec<(f64, f64)>>,
}

struct ReseedCursor {
    order: Vec<usize>,
    next: usize,
    used: usize,
}

impl<'a> Scheduler<'a> {
    fn translation_guess(&self, i: usize) -> ShapeParams {
        ShapeParams::translation(self.params.shape, self.init.u[i], self.init.v[i])
    }

    fn claim(&self, i: usize) -> bool {
        self.claims[i]
            .compare_exchange(UNCLAIMED, CLAIMED, Ordering::AcqRel, Ordering::Acquire)
            .is_ok()
    }

    /// Optimise one claimed point, retrying from the rigid estimate if the
    /// propagated guess fails.
    fn process(&self, ws: &mut LmWorkspace, i: usize, guess: ShapeParams) -> SubsetResult {
        self.optimisations.fetch_add(1, Ordering::Relaxed);
        if self.tracing {
            self.order.lock().unwrap().push(i);
        }
        let idx = self.grid.index_of(i);
        let center = self.grid.center(idx);
        let fallback = self.translation_guess(i);
        let failed = |status| SubsetResult {
            grid_index: idx,
            center: (center.0 as f64, center.1 as f64),
            params: fallback,
            zncc: f64::NAN,
            final_cost: f64::NAN,
            iterations: 0,
            status,
        };
        let mut subset = match SubsetData::from_image(self.reference, center, self.grid.subset_size()) {
            Ok(s) => s,
            Err(_) => return failed(SubsetStatus::Diverged),
        };
        subset.grid_index = idx;
        let first = lm_minimize_with(ws, &subset, self.spline, &guess, self.params);
        if first.status == SubsetStatus::Converged {
            return first;
        }
        let second = lm_minimize_with(ws, &subset, self.spline, &fallback, self.params);
        if second.status == SubsetStatus::Converged {
            return second;
        }
        let mut best = if second.zncc > first.zncc || first.zncc.is_nan() { second } else { first };
        best.iterations = first.iterations + second.iterations;
        best
    }

    fn finish(&self, i: usize, r: SubsetResult) {
        let _ = self.results[i].set(r);
        self.claims[i].store(DONE, Ordering::Release);
        self.done.fetch_add(1, Ordering::AcqRel);
    }

    /// Claim and enqueue the unclaimed neighbours of a converged point.
    fn spawn(&self, owner: usize, i: usize, r: &SubsetResult) {
        if r.status != SubsetStatus::Converged {
            return;
        }
        let (cx, cy) = self.grid.center_linear(i);
        for j in self.grid.neighbors4(i) {
            if !self.grid.is_present(j) || !self.claim(j) {
                continue;
            }
            let (nx, ny) = self.grid.center_linear(j);
            let guess = recenter(&r.params, nx as f64 - cx as f64, ny as f64 - cy as f64);
            self.push(owner, j, guess, r.zncc);
        }
    }

    fn push(&self, owner: usize, point: usize, guess: ShapeParams, priority: f64) {
        let seq = self.seq.fetch_add(1, Ordering::Relaxed) as u64;
        self.queued.fetch_add(1, Ordering::AcqRel);
        self.queues[owner].lock().unwrap().push(Entry {
            priority,
            seq,
            point,
            guess,
        });
    }

    /// Pop from the own queue, else steal round-robin from the others.
    fn pop(&self, me: usize) -> Option<Entry> {
        let n = self.queues.len();
        for k in 0..n {
            let q = (me + k) % n;
            let mut heap = self.queues[q].lock().unwrap();
            if let Some(e) = heap.pop() {
                self.in_flight.fetch_add(1, Ordering::AcqRel);
                self.queued.fetch_sub(1, Ordering::AcqRel);
                if self.tracing {
                    let rest = heap.peek().map_or(f64::NEG_INFINITY, |t| t.priority);
                    if q == me {
                        self.trace.lock().unwrap().push((e.priority, rest));
                    }
                }
                return Some(e);
            }
        }
        None
    }

    /// Claim the best remaining unclaimed point as a fresh seed.
    fn reseed(&self, me: usize) -> bool {
        let mut cur = self.reseed.lock().unwrap();
        // re-check under the lock: someone may have reseeded already
        if self.queued.load(Ordering::Acquire) != 0 || self.in_flight.load(Ordering::Acquire) != 0 {
            return true;
        }
        while cur.next < cur.order.len() {
            let i = cur.order[cur.next];
            cur.next += 1;
            if self.claim(i) {
                cur.used += 1;
                let guess = self.translation_guess(i);
                self.push(me, i, guess, f64::NEG_INFINITY);
                return true;
            }
        }
        false
    }

    fn worker(&self, me: usize) {
        let mut ws = LmWorkspace::new();
        let mut idle = 0u32;
        loop {
            if self.done.load(Ordering::Acquire) >= self.total {
                return;
            }
            if let Some(e) = self.pop(me) {
                idle = 0;
                let r = self.process(&mut ws, e.point, e.guess);
                self.spawn(me, e.point, &r);
                self.finish(e.point, r);
                self.in_flight.fetch_sub(1, Ordering::AcqRel);
                continue;
            }
            if self.queued.load(Ordering::Acquire) == 0 && self.in_flight.load(Ordering::Acquire) == 0 {
                if self.reseed(me) {
                    continue;
                }
                if self.done.load(Ordering::Acquire) >= self.total {
                    return;
                }
            }
            idle += 1;
            if idle < 64 {
                std::thread::yield_now();
            } else {
                std::thread::sleep(Duration::from_micros(50));
            }
        }
    }
}

fn rigid_result(grid: &SubsetGrid, init: &InitField, params: &DicParams, label: &str) -> DicResult {
    let n = grid.len();
    let mut out = DicResult {
        grid: grid.clone(),
        u_x: init.u.clone(),
        u_y: init.v.clone(),
        zncc: init.peak_quality.clone(),
        iterations: vec![0; n],
        status: vec![SubsetStatus::Absent; n],
        shapes: (0..n)
            .map(|i| ShapeParams::translation(params.shape, init.u[i], init.v[i]))
            .collect(),
        image_label: label.to_string(),
        cost: params.cost,
        shape: params.shape,
    };
    for i in 0..n {
        if !grid.is_present(i) {
            out.u_x[i] = f64::NAN;
            out.u_y[i] = f64::NAN;
            out.zncc[i] = f64::NAN;
            continue;
        }
        out.status[i] = if !init.valid[i] {
            SubsetStatus::Diverged
        } else if init.peak_quality[i] >= params.zncc_accept_threshold {
            SubsetStatus::Converged
        } else {
            SubsetStatus::LowCorrelation
        };
    }
    out
}

/// Correlate one deformed image against the reference on a prepared grid.
pub fn correlate_image(
    reference: &GrayImage,
    deformed: &GrayImage,
    label: &str,
    grid: &SubsetGrid,
    seed: (f64, f64),
    params: &DicParams,
) -> Result<DicResult> {
    correlate_image_with_stats(reference, deformed, label, grid, seed, params, false).map(|(r, _)| r)
}

/// As [`correlate_image`], also returning scheduler diagnostics. Tracing
/// records the processing order and queue priorities.
pub fn correlate_image_with_stats(
    reference: &GrayImage,
    deformed: &GrayImage,
    label: &str,
    grid: &SubsetGrid,
    seed: (f64, f64),
    params: &DicParams,
    tracing: bool,
) -> Result<(DicResult, RgStats)> {
    params.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(params.threads)
        .build()
        .map_err(|e| DicError::InvalidParameter(format!("thread pool: {e}")))?;
    let init = pool.install(|| multiwindow_displacement(reference, deformed, grid, params))?;
    if params.method == Method::Multiwindow {
        let r = rigid_result(grid, &init, params, label);
        return Ok((flag_unconverged(&r, params.nan_unconverged), RgStats::default()));
    }
    let spline = pool.install(|| SplineCoefficients::from_image(deformed.clone()))?;
    drop(pool);

    let seed_idx = grid.linear(grid.nearest(seed.0, seed.1));
    let seed_center = grid.center_linear(seed_idx);
    let seed_err = |reason: String| DicError::SeedFailed {
        x: seed_center.0 as f64,
        y: seed_center.1 as f64,
        reason,
    };
    if !grid.is_present(seed_idx) {
        return Err(seed_err("nearest grid point lies outside the region of interest".into()));
    }

    let mut reseed_order: Vec<usize> = (0..grid.len()).filter(|&i| grid.is_present(i)).collect();
    reseed_order.sort_by(|&a, &b| init.peak_quality[b].total_cmp(&init.peak_quality[a]).then(a.cmp(&b)));
    let threads = params.threads;
    let sched = Scheduler {
        reference,
        spline: &spline,
        grid,
        init: &init,
        params,
        claims: (0..grid.len())
            .map(|i| AtomicU8::new(if grid.is_present(i) { UNCLAIMED } else { DONE }))
            .collect(),
        results: (0..grid.len()).map(|_| OnceLock::new()).collect(),
        queues: (0..threads).map(|_| Mutex::new(BinaryHeap::new())).collect(),
        seq: AtomicUsize::new(0),
        queued: AtomicUsize::new(0),
        in_flight: AtomicUsize::new(0),
        done: AtomicUsize::new(0),
        total: grid.present_count(),
        optimisations: AtomicUsize::new(0),
        reseed: Mutex::new(ReseedCursor {
            order: reseed_order,
            next: 0,
            used: 0,
        }),
        tracing,
        order: Mutex::new(Vec::new()),
        trace: Mutex::new(Vec::new()),
    };

    // seed and its four neighbours on this thread
    let mut ws = LmWorkspace::new();
    sched.claim(seed_idx);
    let seed_result = sched.process(&mut ws, seed_idx, sched.translation_guess(seed_idx));
    if seed_result.status != SubsetStatus::Converged {
        return Err(seed_err(format!(
            "optimisation ended {} with zncc {:.4}",
            seed_result.status.name(),
            seed_result.zncc
        )));
    }
    let (sx, sy) = seed_center;
    let mut ring = Vec::new();
    for j in grid.neighbors4(seed_idx) {
        if grid.is_present(j) && sched.claim(j) {
            let (nx, ny) = grid.center_linear(j);
            let guess = recenter(&seed_result.params, nx as f64 - sx as f64, ny as f64 - sy as f64);
            ring.push((j, sched.process(&mut ws, j, guess)));
        }
    }
    let ring_ok = ring.iter().filter(|(_, r)| r.status == SubsetStatus::Converged).count();
    if !ring.is_empty() && ring_ok == 0 {
        return Err(seed_err("none of the four neighbours converged".into()));
    }
    sched.spawn(0, seed_idx, &seed_result);
    sched.finish(seed_idx, seed_result);
    for (j, r) in ring {
        sched.spawn(0, j, &r);
        sched.finish(j, r);
    }

    std::thread::scope(|s| {
        for t in 1..threads {
            let sched = &sched;
            s.spawn(move || sched.worker(t));
        }
        sched.worker(0);
    });

    let n = grid.len();
    let mut out = rigid_result(grid, &init, params, label);
    for i in 0..n {
        if !grid.is_present(i) {
            continue;
        }
        let r = sched.results[i].get().expect("every present point is processed");
        out.zncc[i] = r.zncc;
        out.iterations[i] = r.iterations;
        out.status[i] = r.status;
        if r.status == SubsetStatus::Converged {
            out.u_x[i] = r.params.u();
            out.u_y[i] = r.params.v();
            out.shapes[i] = r.params;
        }
    }
    let stats = RgStats {
        optimisations: sched.optimisations.load(Ordering::Relaxed),
        order: sched.order.into_inner().unwrap(),
        trace: sched.trace.into_inner().unwrap(),
        reseeds: sched.reseed.into_inner().unwrap().used,
    };
    Ok((flag_unconverged(&out, params.nan_unconverged), stats))
}

/// Correlate a sequence of deformed images against one reference.
pub fn correlate_2d<'a>(
    reference: &GrayImage,
    deformed: impl IntoIterator<Item = (&'a str, &'a GrayImage)>,
    roi: &RoiMask,
    seed: (f64, f64),
    params: &DicParams,
) -> Result<Vec<DicResult>> {
    params.validate()?;
    if roi.dims() != reference.dims() {
        return Err(DicError::DimensionMismatch(format!(
            "ROI is {:?}, reference is {:?}",
            roi.dims(),
            reference.dims()
        )));
    }
    let grid = build_subset_grid(roi, params.subset_size, params.subset_step)?;
    deformed
        .into_iter()
        .map(|(label, img)| {
            if img.dims() != reference.dims() {
                return Err(DicError::DimensionMismatch(format!(
                    "{label} is {:?}, reference is {:?}",
                    img.dims(),
                    reference.dims()
                )));
            }
            correlate_image(reference, img, label, &grid, seed, params)
        })
        .collect()
}
