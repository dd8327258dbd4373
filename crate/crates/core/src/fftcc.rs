//! Multi-window FFT cross-correlation.
//!
//! Rigid displacements are estimated coarse to fine: large power-of-two
//! windows catch large motions, each halving of the window refines the guess
//! handed down from the previous level. The last level runs at the subset size
//! directly on the subset centers.

use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{DicError, Result};
use crate::grid::SubsetGrid;
use crate::image::GrayImage;
use crate::params::{DicParams, Method};

/// Consistent estimator of the standard deviation from the MAD.
pub const MAD_SCALE: f64 = 1.4826;

/// Relative magnitude below which a cross-spectrum bin is zeroed.
const SPECTRUM_GUARD: f64 = 1e-12;

/// Smallest outlier threshold used between pyramid levels, pixels.
pub const LEVEL_MAD_FLOOR: f64 = 1.0;

/// Search half-width of the direct correlation at the subset-size level.
const FINAL_SEARCH_RADIUS: i64 = 2;
const MAX_RECENTER: usize = 4;

/// Correlation peaks checked per window at the first pyramid level.
const FIRST_LEVEL_PEAKS: usize = 8;
/// Samples per axis when scoring a first-level candidate.
const FIRST_LEVEL_SAMPLES: usize = 256;

/// Descending correlation window sizes, ending at the subset size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowPyramid {
    sizes: Vec<usize>,
}

impl WindowPyramid {
    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// True when there is no coarse FFT level.
    pub fn is_single_level(&self) -> bool {
        self.sizes.len() == 1
    }
}

pub fn plan_window_pyramid(max_displacement: f64, subset_size: usize) -> WindowPyramid {
    if max_displacement < subset_size as f64 {
        return WindowPyramid {
            sizes: vec![subset_size],
        };
    }
    let mut size = 1usize;
    while size as f64 <= max_displacement {
        size *= 2;
    }
    let mut sizes = Vec::new();
    while size > subset_size {
        sizes.push(size);
        size /= 2;
    }
    sizes.push(subset_size);
    WindowPyramid { sizes }
}

/// Correlation surface indexed by displacement, with circular wrap.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMap {
    n: usize,
    values: Vec<f64>,
}

impl CorrelationMap {
    pub fn size(&self) -> usize {
        self.n
    }

    /// Correlation for the displacement `(dx, dy)` taken modulo the size.
    pub fn at(&self, dx: i64, dy: i64) -> f64 {
        let n = self.n as i64;
        self.values[(dy.rem_euclid(n) * n + dx.rem_euclid(n)) as usize]
    }

    /// Global maximum as a displacement in `(-n/2, n/2]` and its value.
    pub fn peak(&self) -> (i64, i64, f64) {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        let n = self.n as i64;
        let wrap = |d: i64| if d > n / 2 { d - n } else { d };
        let (px, py) = ((best % self.n) as i64, (best / self.n) as i64);
        (wrap(px), wrap(py), self.values[best])
    }

    /// Up to `k` strict local maxima (3x3, with wrap), strongest first, as
    /// displacements in `(-n/2, n/2]`.
    pub fn top_peaks(&self, k: usize) -> Vec<(i64, i64, f64)> {
        let n = self.n as i64;
        let wrap = |d: i64| if d > n / 2 { d - n } else { d };
        let mut found: Vec<(i64, i64, f64)> = Vec::new();
        for py in 0..n {
            for px in 0..n {
                let v = self.values[(py * n + px) as usize];
                if found.len() == k && v <= found[k - 1].2 {
                    continue;
                }
                let mut is_max = true;
                'nb: for dy in -1..=1 {
                    for dx in -1..=1 {
                        if (dx, dy) != (0, 0) && self.at(px + dx, py + dy) >= v {
                            is_max = false;
                            break 'nb;
                        }
                    }
                }
                if !is_max {
                    continue;
                }
                let pos = found.partition_point(|p| p.2 >= v);
                found.insert(pos, (wrap(px), wrap(py), v));
                found.truncate(k);
            }
        }
        found
    }
}

/// Integer displacement of the correlation peak and its height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowMatch {
    pub du: i64,
    pub dv: i64,
    pub peak: f64,
}

/// Phase-normalised FFT cross-correlation for one window size.
pub struct FftCorrelator {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

/// Per-thread buffers for [`FftCorrelator`].
pub struct FftWorkspace {
    buf: Vec<Complex<f64>>,
    scratch: Vec<Complex<f64>>,
    map: CorrelationMap,
}

impl FftCorrelator {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn workspace(&self) -> FftWorkspace {
        let n2 = self.n * self.n;
        let scratch = self
            .fwd
            .get_inplace_scratch_len()
            .max(self.inv.get_inplace_scratch_len());
        FftWorkspace {
            buf: vec![Complex::default(); n2],
            scratch: vec![Complex::default(); scratch],
            map: CorrelationMap {
                n: self.n,
                values: vec![0.0; n2],
            },
        }
    }

    /// Correlate two row-major `n x n` windows. The returned map peaks at
    /// the displacement that carries `f` onto `g`.
    pub fn correlate<'w>(&self, f: &[f64], g: &[f64], ws: &'w mut FftWorkspace) -> Result<&'w CorrelationMap> {
        let n = self.n;
        let n2 = n * n;
        if f.len() != n2 || g.len() != n2 {
            return Err(DicError::DimensionMismatch(format!(
                "windows of {} and {} samples for size {n}",
                f.len(),
                g.len()
            )));
        }
        let fm = f.iter().sum::<f64>() / n2 as f64;
        let gm = g.iter().sum::<f64>() / n2 as f64;
        // both real transforms from one complex transform of f + i g
        for ((z, &a), &b) in ws.buf.iter_mut().zip(f).zip(g) {
            *z = Complex::new(a - fm, b - gm);
        }
        self.fft2(&mut ws.buf, &mut ws.scratch, &*self.fwd);

        // the spectrum is stored transposed; symmetry pairs (a,b) with (-a,-b)
        // either way, so the transposition is irrelevant here
        let mut max_mag = 0.0f64;
        let buf = &mut ws.buf;
        for a in 0..n {
            let na = (n - a) % n;
            for b in 0..n {
                let nb = (n - b) % n;
                if (na, nb) < (a, b) {
                    continue;
                }
                let z = buf[a * n + b];
                let zc = buf[na * n + nb].conj();
                let ff = (z + zc) * 0.5;
                let gg = (z - zc) * Complex::new(0.0, -0.5);
                let c = ff * gg.conj();
                let mag = ff.norm() * gg.norm();
                max_mag = max_mag.max(mag);
                buf[a * n + b] = c;
                // the partner bin holds the conjugate cross-spectrum
                buf[na * n + nb] = c.conj();
            }
        }
        let floor = SPECTRUM_GUARD * max_mag;
        let mut kept = 0usize;
        for (i, c) in buf.iter_mut().enumerate() {
            let mag = c.norm();
            if i == 0 || !(mag >= floor) || mag == 0.0 {
                *c = Complex::default();
            } else {
                *c /= mag;
                kept += 1;
            }
        }
        if kept == 0 {
            return Err(DicError::DegenerateSpectrum);
        }
        self.fft2(buf, &mut ws.scratch, &*self.inv);

        // R peaks at index -d for a displacement d; store by displacement
        let scale = 1.0 / n2 as f64;
        let values = &mut ws.map.values;
        for y in 0..n {
            let sy = (n - y) % n;
            for x in 0..n {
                let sx = (n - x) % n;
                values[sy * n + sx] = buf[y * n + x].re * scale;
            }
        }
        Ok(&ws.map)
    }

    /// Rows, transpose, rows. Applied twice it returns to the original layout.
    fn fft2(&self, buf: &mut [Complex<f64>], scratch: &mut [Complex<f64>], plan: &dyn Fft<f64>) {
        plan.process_with_scratch(buf, scratch);
        transpose_square(buf, self.n);
        plan.process_with_scratch(buf, scratch);
    }
}

fn transpose_square<T: Copy>(buf: &mut [T], n: usize) {
    const B: usize = 32;
    for bi in (0..n).step_by(B) {
        for bj in (bi..n).step_by(B) {
            for i in bi..(bi + B).min(n) {
                let j0 = if bi == bj { i + 1 } else { bj };
                for j in j0..(bj + B).min(n) {
                    buf.swap(i * n + j, j * n + i);
                }
            }
        }
    }
}

/// One-shot correlation of two equal square windows.
pub fn fftcc_window(ref_window: &[f64], def_window: &[f64], n: usize) -> Result<WindowMatch> {
    let c = FftCorrelator::new(n);
    let mut ws = c.workspace();
    let (du, dv, peak) = c.correlate(ref_window, def_window, &mut ws)?.peak();
    Ok(WindowMatch { du, dv, peak })
}

/// Offset of the vertex of the parabola through `(-1, ln rm)`, `(0, ln r0)`,
/// `(1, ln rp)`.
pub fn gaussian_peak_offset(rm: f64, r0: f64, rp: f64) -> Result<f64> {
    if !(rm > 0.0 && r0 > 0.0 && rp > 0.0) {
        return Err(DicError::FitFailed);
    }
    let (lm, l0, lp) = (rm.ln(), r0.ln(), rp.ln());
    let den = 2.0 * lm - 4.0 * l0 + 2.0 * lp;
    if den == 0.0 || !den.is_finite() {
        return Err(DicError::FitFailed);
    }
    let d = (lm - lp) / den;
    if !(d.abs() < 1.0) {
        return Err(DicError::FitFailed);
    }
    Ok(d)
}

/// Separable three-point Gaussian refinement around `peak` (a displacement).
pub fn gaussian_subpixel(map: &CorrelationMap, peak: (i64, i64)) -> Result<(f64, f64)> {
    let (x, y) = peak;
    let dx = gaussian_peak_offset(map.at(x - 1, y), map.at(x, y), map.at(x + 1, y))?;
    let dy = gaussian_peak_offset(map.at(x, y - 1), map.at(x, y), map.at(x, y + 1))?;
    Ok((dx, dy))
}

/// Rigid displacement estimate per grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct InitField {
    pub cols: usize,
    pub rows: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub valid: Vec<bool>,
    pub peak_quality: Vec<f64>,
}

impl InitField {
    pub fn zeros(cols: usize, rows: usize) -> Self {
        let n = cols * rows;
        Self {
            cols,
            rows,
            u: vec![0.0; n],
            v: vec![0.0; n],
            valid: vec![false; n],
            peak_quality: vec![0.0; n],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.cols, self.rows)
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

fn median(values: &mut [f64]) -> f64 {
    let n = values.len();
    values.sort_unstable_by(f64::total_cmp);
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median and scaled MAD of the given samples.
pub fn median_mad(samples: &[f64]) -> (f64, f64) {
    let mut s = samples.to_vec();
    let m = median(&mut s);
    for x in s.iter_mut() {
        *x = (*x - m).abs();
    }
    (m, MAD_SCALE * median(&mut s))
}

/// Outlier rejection with threshold `k * MAD'` per component.
pub fn mad_filter(field: &InitField, k: f64) -> InitField {
    mad_filter_with_floor(field, k, 0.0)
}

/// As [`mad_filter`], with the threshold never below `floor` pixels.
pub fn mad_filter_with_floor(field: &InitField, k: f64, floor: f64) -> InitField {
    let mut out = field.clone();
    let idx: Vec<usize> = (0..field.len()).filter(|&i| field.valid[i]).collect();
    if idx.is_empty() {
        return out;
    }
    for comp in [&field.u, &field.v] {
        let samples: Vec<f64> = idx.iter().map(|&i| comp[i]).collect();
        let (m, mad) = median_mad(&samples);
        let thr = (k * mad).max(floor);
        for &i in &idx {
            if (comp[i] - m).abs() > thr {
                out.valid[i] = false;
            }
        }
    }
    fill_invalid(&mut out);
    out
}

/// Replace every invalid point by the median of its valid 8-neighbours, or by
/// the median of all valid points when it has none. Validity flags are kept.
pub fn fill_invalid(field: &mut InitField) {
    let valid_idx: Vec<usize> = (0..field.len()).filter(|&i| field.valid[i]).collect();
    if valid_idx.is_empty() || valid_idx.len() == field.len() {
        return;
    }
    let global_u = median(&mut valid_idx.iter().map(|&i| field.u[i]).collect::<Vec<_>>());
    let global_v = median(&mut valid_idx.iter().map(|&i| field.v[i]).collect::<Vec<_>>());
    let (cols, rows) = (field.cols as i64, field.rows as i64);
    let mut nu = Vec::with_capacity(8);
    let mut nv = Vec::with_capacity(8);
    let mut updates = Vec::new();
    for i in 0..field.len() {
        if field.valid[i] {
            continue;
        }
        let (r, c) = ((i / field.cols) as i64, (i % field.cols) as i64);
        nu.clear();
        nv.clear();
        for dr in -1..=1 {
            for dc in -1..=1 {
                let (rr, cc) = (r + dr, c + dc);
                if (dr, dc) == (0, 0) || rr < 0 || cc < 0 || rr >= rows || cc >= cols {
                    continue;
                }
                let j = (rr * cols + cc) as usize;
                if field.valid[j] {
                    nu.push(field.u[j]);
                    nv.push(field.v[j]);
                }
            }
        }
        if nu.is_empty() {
            updates.push((i, global_u, global_v));
        } else {
            updates.push((i, median(&mut nu), median(&mut nv)));
        }
    }
    for (i, u, v) in updates {
        field.u[i] = u;
        field.v[i] = v;
    }
}

/// Displacements on a rectilinear lattice of window centers.
struct LevelField {
    xs: Vec<f64>,
    ys: Vec<f64>,
    field: InitField,
}

impl LevelField {
    /// Bilinear interpolation of the four surrounding nodes, clamped at the
    /// lattice edges.
    fn interp(&self, x: f64, y: f64) -> (f64, f64) {
        let (i, tx) = bracket(&self.xs, x);
        let (j, ty) = bracket(&self.ys, y);
        let cols = self.field.cols;
        let i1 = (i + 1).min(self.xs.len() - 1);
        let j1 = (j + 1).min(self.ys.len() - 1);
        let at = |c: &Vec<f64>, ii: usize, jj: usize| c[jj * cols + ii];
        let lerp = |c: &Vec<f64>| {
            let top = at(c, i, j) * (1.0 - tx) + at(c, i1, j) * tx;
            let bot = at(c, i, j1) * (1.0 - tx) + at(c, i1, j1) * tx;
            top * (1.0 - ty) + bot * ty
        };
        (lerp(&self.field.u), lerp(&self.field.v))
    }
}

fn bracket(nodes: &[f64], x: f64) -> (usize, f64) {
    if nodes.len() == 1 || x <= nodes[0] {
        return (0, 0.0);
    }
    let last = nodes.len() - 1;
    if x >= nodes[last] {
        return (last, 0.0);
    }
    let i = nodes.partition_point(|&v| v <= x) - 1;
    (i, (x - nodes[i]) / (nodes[i + 1] - nodes[i]))
}

/// Window top-left coordinates along one axis: spacing `n/2` across
/// `[lo, hi]`, clamped inside an axis of length `len`.
fn level_positions(lo: usize, hi: usize, n: usize, len: usize) -> Vec<usize> {
    let spacing = (n / 2).max(1);
    let mut out: Vec<usize> = Vec::new();
    let mut c = lo;
    loop {
        let tl = c.saturating_sub(n / 2).min(len - n);
        if out.last() != Some(&tl) {
            out.push(tl);
        }
        if c >= hi {
            break;
        }
        c = (c + spacing).min(hi);
    }
    out
}

fn copy_window(img: &GrayImage, x0: usize, y0: usize, n: usize, out: &mut [f64]) {
    for (r, dst) in out.chunks_exact_mut(n).enumerate() {
        dst.copy_from_slice(&img.row(y0 + r)[x0..x0 + n]);
    }
}

/// Direct ZNCC of `ref` pixels in `[x0, x0+n) x [y0, y0+n)` against `def`
/// displaced by `(cx, cy)`, over the part that stays inside the image, on
/// every `stride`-th pixel.
fn overlap_zncc(rf: &GrayImage, df: &GrayImage, x0: usize, y0: usize, n: usize, cx: i64, cy: i64, stride: usize) -> f64 {
    let (w, h) = (rf.width() as i64, rf.height() as i64);
    let (mut sf, mut sg, mut sff, mut sgg, mut sfg, mut cnt) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for y in (y0..y0 + n).step_by(stride) {
        let yy = y as i64 + cy;
        if yy < 0 || yy >= h {
            continue;
        }
        let fr = rf.row(y);
        let gr = df.row(yy as usize);
        for x in (x0..x0 + n).step_by(stride) {
            let xx = x as i64 + cx;
            if xx < 0 || xx >= w {
                continue;
            }
            let (a, b) = (fr[x], gr[xx as usize]);
            sf += a;
            sg += b;
            sff += a * a;
            sgg += b * b;
            sfg += a * b;
            cnt += 1.0;
        }
    }
    // a sliver of overlap at the image edge scores on too few samples
    let per_axis = n.div_ceil(stride) as f64;
    if cnt < 16.0 || cnt < per_axis * per_axis / 8.0 {
        return f64::NEG_INFINITY;
    }
    let vf = sff - sf * sf / cnt;
    let vg = sgg - sg * sg / cnt;
    if vf <= 0.0 || vg <= 0.0 {
        return f64::NEG_INFINITY;
    }
    (sfg - sf * sg / cnt) / (vf * vg).sqrt()
}

/// One FFT level over a lattice of `n`-sized windows.
fn fft_level(
    rf: &GrayImage,
    df: &GrayImage,
    n: usize,
    bbox: (usize, usize, usize, usize),
    prev: Option<&LevelField>,
    max_disp: f64,
) -> LevelField {
    let (w, h) = rf.dims();
    let xs_tl = level_positions(bbox.0, bbox.2, n, w);
    let ys_tl = level_positions(bbox.1, bbox.3, n, h);
    let (cols, rows) = (xs_tl.len(), ys_tl.len());
    let half = (n / 2) as f64;
    let corr = FftCorrelator::new(n);
    let n2 = n * n;
    let results: Vec<(f64, f64, bool, f64)> = (0..cols * rows)
        .into_par_iter()
        .map_init(
            || (corr.workspace(), vec![0.0; n2], vec![0.0; n2]),
            |(ws, fwin, gwin), i| {
                let (x0, y0) = (xs_tl[i % cols], ys_tl[i / cols]);
                let (gu, gv) = match prev {
                    Some(p) => p.interp(x0 as f64 + half, y0 as f64 + half),
                    None => (0.0, 0.0),
                };
                let (su, sv) = (gu.round() as i64, gv.round() as i64);
                let (dx0, dy0) = (x0 as i64 + su, y0 as i64 + sv);
                if dx0 < 0 || dy0 < 0 || dx0 as usize + n > w || dy0 as usize + n > h {
                    return (gu, gv, false, 0.0);
                }
                copy_window(rf, x0, y0, n, fwin);
                copy_window(df, dx0 as usize, dy0 as usize, n, gwin);
                let map = match corr.correlate(fwin, gwin, ws) {
                    Ok(map) => map,
                    Err(_) => return (gu, gv, false, 0.0),
                };
                if prev.is_some() {
                    let (du, dv, peak) = map.peak();
                    return ((su + du) as f64, (sv + dv) as f64, true, peak);
                }
                // With no guess the window edges leave a spike near zero
                // shift that can outrank a true peak of small overlap, and
                // shifts beyond n/2 alias. Score the strongest peaks and
                // their aliases directly in the image domain.
                let ni = n as i64;
                let cands = |d: i64| {
                    [d, d - ni, d + ni]
                        .into_iter()
                        .filter(|c| (*c as f64).abs() <= max_disp)
                        .collect::<Vec<_>>()
                };
                let stride = (n / FIRST_LEVEL_SAMPLES).max(1);
                let mut best = (0, 0, f64::NEG_INFINITY, 0.0);
                for (pu, pv, peak) in map.top_peaks(FIRST_LEVEL_PEAKS) {
                    for a in cands(pu) {
                        for b in cands(pv) {
                            let z = overlap_zncc(rf, df, x0, y0, n, a, b, stride);
                            if z > best.2 {
                                best = (a, b, z, peak);
                            }
                        }
                    }
                }
                if best.2 == f64::NEG_INFINITY {
                    return (gu, gv, false, 0.0);
                }
                (best.0 as f64, best.1 as f64, true, best.3)
            },
        )
        .collect();
    let mut field = InitField::zeros(cols, rows);
    for (i, (u, v, ok, q)) in results.into_iter().enumerate() {
        field.u[i] = u;
        field.v[i] = v;
        field.valid[i] = ok;
        field.peak_quality[i] = q;
    }
    LevelField {
        xs: xs_tl.iter().map(|&x| x as f64 + half).collect(),
        ys: ys_tl.iter().map(|&y| y as f64 + half).collect(),
        field,
    }
}

/// Zero-mean reference subset with its norm.
struct RefSubset {
    values: Vec<f64>,
    norm: f64,
}

fn ref_subset(img: &GrayImage, cx: usize, cy: usize, half: usize) -> RefSubset {
    let size = 2 * half + 1;
    let mut values = Vec::with_capacity(size * size);
    for y in cy - half..=cy + half {
        values.extend_from_slice(&img.row(y)[cx - half..=cx + half]);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let mut ss = 0.0;
    for v in values.iter_mut() {
        *v -= mean;
        ss += *v * *v;
    }
    RefSubset {
        values,
        norm: ss.sqrt(),
    }
}

/// ZNCC of a reference subset against the deformed image displaced by an
/// integer shift; `None` if the footprint leaves the image.
fn subset_zncc(rs: &RefSubset, df: &GrayImage, cx: usize, cy: usize, half: usize, s: (i64, i64)) -> Option<f64> {
    let (x, y) = (cx as i64 + s.0, cy as i64 + s.1);
    let h = half as i64;
    if x - h < 0 || y - h < 0 || x + h >= df.width() as i64 || y + h >= df.height() as i64 {
        return None;
    }
    let size = 2 * half + 1;
    let (x0, y0) = ((x - h) as usize, (y - h) as usize);
    let (mut sg, mut sgg, mut sfg) = (0.0, 0.0, 0.0);
    for (r, fr) in rs.values.chunks_exact(size).enumerate() {
        let gr = &df.row(y0 + r)[x0..x0 + size];
        for (a, b) in fr.iter().zip(gr) {
            sg += b;
            sgg += b * b;
            sfg += a * b;
        }
    }
    let count = (size * size) as f64;
    let vg = sgg - sg * sg / count;
    if vg <= 0.0 || rs.norm == 0.0 {
        return Some(0.0);
    }
    Some(sfg / (rs.norm * vg.sqrt()))
}

/// Integer search for the best direct ZNCC around `start`, re-centering when
/// the best score lands on the search boundary.
fn search_subset(
    rs: &RefSubset,
    df: &GrayImage,
    cx: usize,
    cy: usize,
    half: usize,
    start: (i64, i64),
    radius: i64,
    subpixel: bool,
) -> Option<(f64, f64, f64)> {
    let mut center = start;
    let mut best: Option<((i64, i64), f64)> = None;
    for _ in 0..=MAX_RECENTER {
        let mut local: Option<((i64, i64), f64)> = None;
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let s = (center.0 + dx, center.1 + dy);
                if let Some(z) = subset_zncc(rs, df, cx, cy, half, s) {
                    if local.map_or(true, |(_, b)| z > b) {
                        local = Some((s, z));
                    }
                }
            }
        }
        let Some((s, z)) = local else { break };
        let improved = best.map_or(true, |(_, b)| z > b);
        if improved {
            best = Some((s, z));
        }
        let on_edge = (s.0 - center.0).abs() == radius || (s.1 - center.1).abs() == radius;
        if !on_edge || !improved {
            break;
        }
        center = s;
    }
    let ((sx, sy), z) = best?;
    let (mut fx, mut fy) = (sx as f64, sy as f64);
    if subpixel {
        let score = |s: (i64, i64)| subset_zncc(rs, df, cx, cy, half, s).unwrap_or(f64::NAN);
        if let Ok(d) = gaussian_peak_offset(score((sx - 1, sy)), z, score((sx + 1, sy))) {
            fx += d;
        }
        if let Ok(d) = gaussian_peak_offset(score((sx, sy - 1)), z, score((sx, sy + 1))) {
            fy += d;
        }
    }
    Some((fx, fy, z))
}

/// Coarse-to-fine rigid displacement at every grid point.
///
/// Runs on the current rayon pool. Points whose shifted footprint leaves the
/// image are marked invalid and filled from their neighbours.
pub fn multiwindow_displacement(
    reference: &GrayImage,
    deformed: &GrayImage,
    grid: &SubsetGrid,
    params: &DicParams,
) -> Result<InitField> {
    params.validate()?;
    if reference.dims() != deformed.dims() {
        return Err(DicError::DimensionMismatch(format!(
            "reference is {:?}, deformed is {:?}",
            reference.dims(),
            deformed.dims()
        )));
    }
    if grid.image_dims() != reference.dims() || grid.subset_size() != params.subset_size {
        return Err(DicError::DimensionMismatch(
            "subset grid was built for a different image or subset size".into(),
        ));
    }
    let (w, h) = reference.dims();
    let pyramid = plan_window_pyramid(params.max_displacement, params.subset_size);
    let (ox, oy) = grid.origin();
    let bbox = (
        ox,
        oy,
        ox + (grid.cols() - 1) * grid.step(),
        oy + (grid.rows() - 1) * grid.step(),
    );

    let mut prev: Option<LevelField> = None;
    for &n in &pyramid.sizes()[..pyramid.sizes().len() - 1] {
        if n > w.min(h) {
            log::debug!("skipping {n} px window level on a {w}x{h} image");
            continue;
        }
        let mut level = fft_level(reference, deformed, n, bbox, prev.as_ref(), params.max_displacement);
        if level.field.valid_count() == 0 {
            return Err(DicError::AllInvalid);
        }
        level.field = if params.mad_enabled {
            mad_filter_with_floor(&level.field, params.mad_k, LEVEL_MAD_FLOOR)
        } else {
            let mut f = level.field;
            fill_invalid(&mut f);
            f
        };
        log::debug!(
            "window {n}: {}x{} windows, {} valid",
            level.field.cols,
            level.field.rows,
            level.field.valid_count()
        );
        prev = Some(level);
    }

    let half = grid.half_width();
    let radius = if prev.is_none() {
        FINAL_SEARCH_RADIUS.max(params.max_displacement.ceil() as i64)
    } else {
        FINAL_SEARCH_RADIUS
    };
    let subpixel = params.method == Method::Multiwindow;
    let results: Vec<Option<(f64, f64, f64)>> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            if !grid.is_present(i) {
                return None;
            }
            let (cx, cy) = grid.center_linear(i);
            let (gu, gv) = prev.as_ref().map_or((0.0, 0.0), |p| p.interp(cx as f64, cy as f64));
            let rs = ref_subset(reference, cx, cy, half);
            if rs.norm == 0.0 {
                return None;
            }
            let start = (gu.round() as i64, gv.round() as i64);
            search_subset(&rs, deformed, cx, cy, half, start, radius, subpixel)
        })
        .collect();

    let mut field = InitField::zeros(grid.cols(), grid.rows());
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Some((u, v, q)) => {
                field.u[i] = u;
                field.v[i] = v;
                field.valid[i] = true;
                field.peak_quality[i] = q;
            }
            None => {
                if let Some(p) = &prev {
                    let (cx, cy) = grid.center_linear(i);
                    let (u, v) = p.interp(cx as f64, cy as f64);
                    field.u[i] = u;
                    field.v[i] = v;
                }
            }
        }
    }
    if field.valid_count() == 0 {
        return Err(DicError::AllInvalid);
    }
    if params.mad_enabled {
        // absent points stay out of the statistics
        field = mad_filter_with_floor(&field, params.mad_k, LEVEL_MAD_FLOOR);
    } else {
        fill_invalid(&mut field);
    }
    Ok(field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_subset_grid;
    use crate::roi::RoiMask;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n * n).map(|_| rng.gen_range(0.0..255.0)).collect()
    }

    /// `out(x) = w(x - s)` with circular wrap.
    fn circ_shift(w: &[f64], n: usize, sx: i64, sy: i64) -> Vec<f64> {
        let ni = n as i64;
        let mut out = vec![0.0; n * n];
        for y in 0..ni {
            for x in 0..ni {
                let src = ((y - sy).rem_euclid(ni) * ni + (x - sx).rem_euclid(ni)) as usize;
                out[(y * ni + x) as usize] = w[src];
            }
        }
        out
    }

    /// Brute force: spatial normalised correlation for every circular shift.
    fn brute_force_argmax(f: &[f64], g: &[f64], n: usize) -> (i64, i64) {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (fm, gm) = (mean(f), mean(g));
        let fz: Vec<f64> = f.iter().map(|v| v - fm).collect();
        let gz: Vec<f64> = g.iter().map(|v| v - gm).collect();
        let nf = fz.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ng = gz.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ni = n as i64;
        let mut best = (0, 0, f64::NEG_INFINITY);
        for sy in 0..ni {
            for sx in 0..ni {
                let mut acc = 0.0;
                for y in 0..ni {
                    for x in 0..ni {
                        let gi = ((y + sy) % ni * ni + (x + sx) % ni) as usize;
                        acc += fz[(y * ni + x) as usize] * gz[gi];
                    }
                }
                let s = acc / (nf * ng);
                if s > best.2 {
                    best = (sx, sy, s);
                }
            }
        }
        let wrap = |d: i64| if d > ni / 2 { d - ni } else { d };
        (wrap(best.0), wrap(best.1))
    }

    #[test]
    fn pyramid_examples() {
        assert_eq!(plan_window_pyramid(800.0, 17).sizes(), &[1024, 512, 256, 128, 64, 32, 17]);
        assert_eq!(plan_window_pyramid(0.0, 31).sizes(), &[31]);
        assert_eq!(
            plan_window_pyramid(2000.0, 31).sizes(),
            &[2048, 1024, 512, 256, 128, 64, 32, 31]
        );
        assert_eq!(plan_window_pyramid(64.0, 31).sizes(), &[128, 64, 32, 31]);
        assert_eq!(plan_window_pyramid(20.0, 31).sizes(), &[31]);
    }

    #[test]
    fn identical_windows_peak_at_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = noise(32, &mut rng);
        let m = fftcc_window(&f, &f, 32).unwrap();
        assert_eq!((m.du, m.dv), (0, 0));
        assert!(m.peak > 0.99);
    }

    #[test]
    fn circular_shift_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = noise(32, &mut rng);
        let g = circ_shift(&f, 32, 3, -2);
        let m = fftcc_window(&f, &g, 32).unwrap();
        assert_eq!((m.du, m.dv), (3, -2));
        assert_eq!(brute_force_argmax(&f, &g, 32), (3, -2));
    }

    #[test]
    fn unrelated_noise_has_weak_peak() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = noise(64, &mut rng);
        let g = noise(64, &mut rng);
        let matched = fftcc_window(&f, &f, 64).unwrap().peak;
        let unmatched = fftcc_window(&f, &g, 64).unwrap().peak;
        assert!(unmatched < 0.1 * matched, "{unmatched} vs {matched}");
    }

    #[test]
    fn top_peaks_are_sorted_local_maxima() {
        let n = 16;
        let mut values = vec![0.0; n * n];
        values[3 * n + 5] = 0.9;
        values[3 * n + 6] = 0.5; // shoulder of the first peak, not a maximum
        values[12 * n + 15] = 0.7; // (-1, -4) after wrap
        values[8 * n + 8] = 0.2;
        let map = CorrelationMap { n, values };
        assert_eq!(map.top_peaks(2), vec![(5, 3, 0.9), (-1, -4, 0.7)]);
        assert_eq!(map.top_peaks(10).len(), 3);
        assert_eq!(map.top_peaks(1)[0], {
            let (x, y, v) = map.peak();
            (x, y, v)
        });
    }

    #[test]
    fn flat_window_is_degenerate() {
        let f = vec![7.0; 16 * 16];
        assert!(matches!(fftcc_window(&f, &f, 16), Err(DicError::DegenerateSpectrum)));
    }

    #[test]
    fn gaussian_fit_examples() {
        assert_eq!(gaussian_peak_offset(0.5, 1.0, 0.5).unwrap(), 0.0);
        let g = |x: f64| (-(x - 0.3) * (x - 0.3) / (2.0 * 0.8)).exp();
        let d = gaussian_peak_offset(g(-1.0), g(0.0), g(1.0)).unwrap();
        assert!((d - 0.3).abs() < 1e-12);
        let m = gaussian_peak_offset(g(1.0), g(0.0), g(-1.0)).unwrap();
        assert!((m + d).abs() < 1e-15);
        assert!(matches!(gaussian_peak_offset(0.0, 1.0, 0.5), Err(DicError::FitFailed)));
        assert!(matches!(gaussian_peak_offset(1.0, 1.0, 1.0), Err(DicError::FitFailed)));
    }

    #[test]
    fn gaussian_subpixel_on_map() {
        let n = 8;
        let (cx, cy) = (0.3, -0.2);
        let mut values = vec![0.0; n * n];
        for y in 0..n as i64 {
            for x in 0..n as i64 {
                let wrap = |d: i64| if d > 4 { d - 8 } else { d } as f64;
                let (dx, dy) = (wrap(x) - cx, wrap(y) - cy);
                values[(y as usize) * n + x as usize] = (-(dx * dx + dy * dy) / 1.5).exp();
            }
        }
        let map = CorrelationMap { n, values };
        let (px, py, _) = map.peak();
        assert_eq!((px, py), (0, 0));
        let (dx, dy) = gaussian_subpixel(&map, (px, py)).unwrap();
        assert!((dx - cx).abs() < 1e-12 && (dy - cy).abs() < 1e-12);
    }

    fn field_from(u: &[f64]) -> InitField {
        let mut f = InitField::zeros(u.len(), 1);
        f.u.copy_from_slice(u);
        f.valid.fill(true);
        f
    }

    #[test]
    fn mad_example_flags_wild_value() {
        let f = field_from(&[0.9, 1.0, 1.05, 1.1, 5.0]);
        let (m, mad) = median_mad(&f.u);
        assert!((m - 1.05).abs() < 1e-15);
        assert!((mad - 0.07413).abs() < 1e-12);
        let out = mad_filter(&f, 3.0);
        assert_eq!(out.valid, vec![true, true, true, true, false]);
        // sole valid neighbour is 1.1
        assert_eq!(out.u[4], 1.1);
    }

    #[test]
    fn mad_identical_values_untouched() {
        let f = field_from(&[2.0; 6]);
        assert_eq!(mad_filter(&f, 3.0), f);
    }

    /// Rule applied by hand: flag where |x - median| exceeds k * MAD'.
    fn brute_flags(f: &InitField, k: f64) -> Vec<bool> {
        let mut bad = vec![false; f.len()];
        for comp in [&f.u, &f.v] {
            let mut s = comp.clone();
            s.sort_by(f64::total_cmp);
            let n = s.len();
            let m = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
            let mut d: Vec<f64> = comp.iter().map(|x| (x - m).abs()).collect();
            d.sort_by(f64::total_cmp);
            let mad = 1.4826 * if n % 2 == 1 { d[n / 2] } else { 0.5 * (d[n / 2 - 1] + d[n / 2]) };
            for (b, x) in bad.iter_mut().zip(comp) {
                *b |= (x - m).abs() > k * mad;
            }
        }
        bad
    }

    #[test]
    fn uniform_field_single_wild_vector() {
        let mut f = InitField::zeros(7, 5);
        f.valid.fill(true);
        f.u.fill(4.0);
        f.v.fill(-1.0);
        f.u[17] = 30.0;
        f.v[17] = 12.0;
        let expected = brute_flags(&f, 3.0);
        assert_eq!(expected.iter().filter(|&&b| b).count(), 1);
        let out = mad_filter(&f, 3.0);
        let flagged: Vec<bool> = out.valid.iter().map(|v| !v).collect();
        assert_eq!(flagged, expected);
        assert_eq!((out.u[17], out.v[17]), (4.0, -1.0));
    }

    #[test]
    fn mad_filter_idempotent_on_fixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut f = InitField::zeros(10, 10);
        f.valid.fill(true);
        for i in 0..100 {
            f.u[i] = 3.0 + rng.gen_range(-0.2..0.2);
            f.v[i] = -2.0 + rng.gen_range(-0.2..0.2);
        }
        f.u[11] = 40.0;
        f.v[57] = -35.0;
        let once = mad_filter(&f, 3.0);
        let twice = mad_filter(&once, 3.0);
        assert_eq!(once, twice);
        assert!(!once.valid[11] && !once.valid[57]);
    }

    fn speckle(w: usize, h: usize, seed: u64) -> GrayImage {
        // smooth random texture: sum of a few random blobs per cell
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blobs: Vec<(f64, f64)> = (0..w * h / 12)
            .map(|_| (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64)))
            .collect();
        let mut px = vec![0.0; w * h];
        for &(bx, by) in &blobs {
            let (x0, x1) = ((bx - 4.0).max(0.0) as usize, ((bx + 5.0) as usize).min(w));
            let (y0, y1) = ((by - 4.0).max(0.0) as usize, ((by + 5.0) as usize).min(h));
            for y in y0..y1 {
                for x in x0..x1 {
                    let d2 = (x as f64 - bx).powi(2) + (y as f64 - by).powi(2);
                    px[y * w + x] += 100.0 * (-d2 / 2.9).exp();
                }
            }
        }
        GrayImage::new(w, h, px, 8).unwrap()
    }

    fn shifted(img: &GrayImage, sx: i64, sy: i64) -> GrayImage {
        let (w, h) = (img.width() as i64, img.height() as i64);
        GrayImage::from_fn(img.width(), img.height(), 8, |x, y| {
            let xs = (x as i64 - sx).rem_euclid(w) as usize;
            let ys = (y as i64 - sy).rem_euclid(h) as usize;
            img.get(xs, ys)
        })
        .unwrap()
    }

    #[test]
    fn zero_motion_field() {
        let img = speckle(200, 160, 4);
        let roi = RoiMask::all(200, 160);
        let grid = build_subset_grid(&roi, 31, 15).unwrap();
        let params = DicParams {
            max_displacement: 40.0,
            ..Default::default()
        };
        let f = multiwindow_displacement(&img, &img, &grid, &params).unwrap();
        assert!(f.valid.iter().all(|&v| v));
        assert!(f.u.iter().chain(&f.v).all(|&d| d == 0.0));
    }

    #[test]
    fn circular_translation_recovered() {
        let img = speckle(320, 320, 5);
        let def = shifted(&img, 40, -12);
        let roi = RoiMask::exclude_border((320, 320), 60).unwrap();
        let grid = build_subset_grid(&roi, 31, 15).unwrap();
        let mut params = DicParams {
            max_displacement: 64.0,
            method: Method::MultiwindowRg,
            ..Default::default()
        };
        assert_eq!(plan_window_pyramid(64.0, 31).sizes(), &[128, 64, 32, 31]);
        let f = multiwindow_displacement(&img, &def, &grid, &params).unwrap();
        for i in 0..f.len() {
            assert!(f.valid[i]);
            assert_eq!((f.u[i], f.v[i]), (40.0, -12.0), "point {i}");
        }
        params.method = Method::Multiwindow;
        let f = multiwindow_displacement(&img, &def, &grid, &params).unwrap();
        for i in 0..f.len() {
            assert!((f.u[i] - 40.0).abs() < 0.1 && (f.v[i] + 12.0).abs() < 0.1);
        }
    }

    #[test]
    fn single_level_search_covers_max_displacement() {
        let img = speckle(160, 160, 6);
        let def = shifted(&img, -7, 9);
        let roi = RoiMask::exclude_border((160, 160), 20).unwrap();
        let grid = build_subset_grid(&roi, 31, 20).unwrap();
        let params = DicParams {
            max_displacement: 12.0,
            ..Default::default()
        };
        let f = multiwindow_displacement(&img, &def, &grid, &params).unwrap();
        assert!(f.u.iter().all(|&u| u == -7.0) && f.v.iter().all(|&v| v == 9.0));
    }

    #[test]
    fn wrapped_first_level_is_disambiguated() {
        // displacement 40 with a 64 px first window aliases to -24
        let img = speckle(256, 256, 7);
        let def = shifted(&img, 40, 0);
        let roi = RoiMask::from_rects(
            (256, 256),
            &[crate::roi::Rect { x0: 20, y0: 20, x1: 190, y1: 236 }],
        );
        let grid = build_subset_grid(&roi, 21, 20).unwrap();
        let params = DicParams {
            subset_size: 21,
            max_displacement: 50.0,
            ..Default::default()
        };
        let f = multiwindow_displacement(&img, &def, &grid, &params).unwrap();
        for i in 0..f.len() {
            assert_eq!((f.u[i], f.v[i]), (40.0, 0.0), "point {i}");
        }
    }

    #[test]
    fn large_shift_with_small_window_overlap() {
        // 370 px in a 512 px first window: under 30% of the window overlaps
        let big = speckle(1070, 520, 8);
        let img = GrayImage::from_fn(700, 520, 8, |x, y| big.get(x + 370, y)).unwrap();
        let def = GrayImage::from_fn(700, 520, 8, |x, y| big.get(x, y)).unwrap();
        let roi = RoiMask::from_rects((700, 520), &[crate::roi::Rect { x0: 20, y0: 20, x1: 300, y1: 500 }]);
        let grid = build_subset_grid(&roi, 31, 30).unwrap();
        let params = DicParams {
            max_displacement: 500.0,
            ..Default::default()
        };
        let f = multiwindow_displacement(&img, &def, &grid, &params).unwrap();
        for i in 0..f.len() {
            if grid.is_present(i) {
                assert_eq!((f.u[i], f.v[i]), (370.0, 0.0), "point {i}");
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            #[test]
            fn fft_peak_equals_brute_force(seed in any::<u64>(), big in any::<bool>(), sx in -15i64..16, sy in -15i64..16) {
                let n = if big { 32 } else { 16 };
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let f = noise(n, &mut rng);
                let (sx, sy) = (sx % (n as i64 / 2), sy % (n as i64 / 2));
                let g = circ_shift(&f, n, sx, sy);
                let m = fftcc_window(&f, &g, n).unwrap();
                prop_assert_eq!((m.du, m.dv), brute_force_argmax(&f, &g, n));
                prop_assert_eq!((m.du, m.dv), (sx, sy));
            }

            #[test]
            fn pyramid_shape(max in 0.0f64..5000.0, half in 2usize..40) {
                let s = 2 * half + 1;
                let p = plan_window_pyramid(max, s);
                let z = p.sizes();
                prop_assert_eq!(*z.last().unwrap(), s);
                prop_assert!(z.windows(2).all(|w| w[0] > w[1]));
                if z.len() > 1 {
                    prop_assert!(z[0] as f64 > max);
                    prop_assert!(z[..z.len() - 1].iter().all(|v| v.is_power_of_two()));
                }
            }
        }
    }
}
