//! Per-subset Levenberg-Marquardt refinement of shape parameters.

use nalgebra::{DMatrix, DVector};

use crate::error::{DicError, Result};
use crate::grid::GridIndex;
use crate::image::GrayImage;
use crate::interp::SplineCoefficients;
use crate::params::{CostKind, DicParams, ShapeKind};

const LAMBDA_INIT: f64 = 1e-3;
const LAMBDA_MAX: f64 = 1e12;

/// Shape-function parameters `p0..p11`; only the first
/// `kind.param_count()` entries are used.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeParams {
    kind: ShapeKind,
    p: [f64; 12],
}

impl ShapeParams {
    pub fn zeros(kind: ShapeKind) -> Self {
        Self { kind, p: [0.0; 12] }
    }

    pub fn translation(kind: ShapeKind, u: f64, v: f64) -> Self {
        let mut s = Self::zeros(kind);
        s.p[0] = u;
        s.p[1] = v;
        s
    }

    pub fn from_slice(kind: ShapeKind, p: &[f64]) -> Result<Self> {
        if p.len() != kind.param_count() {
            return Err(DicError::InvalidParameter(format!(
                "{kind} shape takes {} parameters, got {}",
                kind.param_count(),
                p.len()
            )));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(DicError::InvalidParameter("non-finite shape parameter".into()));
        }
        let mut s = Self::zeros(kind);
        s.p[..p.len()].copy_from_slice(p);
        Ok(s)
    }

    pub fn kind(&self) -> ShapeKind {
        self.kind
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.p[..self.kind.param_count()]
    }

    pub fn u(&self) -> f64 {
        self.p[0]
    }

    pub fn v(&self) -> f64 {
        self.p[1]
    }

    /// Same parameters under another shape order; dropped terms are lost,
    /// new terms start at zero.
    pub fn with_kind(&self, kind: ShapeKind) -> Self {
        let mut s = Self::zeros(kind);
        let n = kind.param_count().min(self.kind.param_count());
        s.p[..n].copy_from_slice(&self.p[..n]);
        s
    }

    pub fn is_finite(&self) -> bool {
        self.as_slice().iter().all(|v| v.is_finite())
    }

    /// Map a subset-local coordinate to its displaced local coordinate.
    #[inline]
    pub fn warp(&self, x: f64, y: f64) -> (f64, f64) {
        let p = &self.p;
        match self.kind {
            ShapeKind::Rigid => (p[0] + x, p[1] + y),
            ShapeKind::Affine => (
                p[0] + (1.0 + p[2]) * x + p[3] * y,
                p[1] + p[4] * x + (1.0 + p[5]) * y,
            ),
            ShapeKind::Quadratic => {
                let (xx, xy, yy) = (x * x, x * y, y * y);
                (
                    p[0] + (1.0 + p[2]) * x + p[3] * y + p[6] * xx + p[7] * xy + p[8] * yy,
                    p[1] + p[4] * x + (1.0 + p[5]) * y + p[9] * xx + p[10] * xy + p[11] * yy,
                )
            }
        }
    }

    fn add(&mut self, dp: &[f64]) {
        for (a, b) in self.p.iter_mut().zip(dp) {
            *a += b;
        }
    }
}

/// Free-function form of [`ShapeParams::warp`].
pub fn warp(shape: &ShapeParams, local: (f64, f64)) -> (f64, f64) {
    shape.warp(local.0, local.1)
}

/// Outcome of one subset optimisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u32)]
pub enum SubsetStatus {
    Converged = 0,
    MaxIter = 1,
    OutOfDomain = 2,
    Diverged = 3,
    Absent = 4,
    /// Update converged but the final ZNCC is below the acceptance threshold.
    LowCorrelation = 5,
}

impl SubsetStatus {
    pub const ALL: [SubsetStatus; 6] = [
        SubsetStatus::Converged,
        SubsetStatus::MaxIter,
        SubsetStatus::OutOfDomain,
        SubsetStatus::Diverged,
        SubsetStatus::Absent,
        SubsetStatus::LowCorrelation,
    ];

    pub fn code(self) -> u32 {
        self as u32
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.code() == code)
    }

    pub fn name(self) -> &'static str {
        match self {
            SubsetStatus::Converged => "CONVERGED",
            SubsetStatus::MaxIter => "MAX_ITER",
            SubsetStatus::OutOfDomain => "OUT_OF_DOMAIN",
            SubsetStatus::Diverged => "DIVERGED",
            SubsetStatus::Absent => "ABSENT",
            SubsetStatus::LowCorrelation => "LOW_CORRELATION",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubsetResult {
    pub grid_index: GridIndex,
    pub center: (f64, f64),
    pub params: ShapeParams,
    pub zncc: f64,
    pub final_cost: f64,
    pub iterations: u32,
    pub status: SubsetStatus,
}

/// Reference subset sampled at integer pixels.
#[derive(Debug, Clone)]
pub struct SubsetData {
    pub grid_index: GridIndex,
    center: (usize, usize),
    half: usize,
    coords: Vec<(f64, f64)>,
    f: Vec<f64>,
    mean: f64,
    zn_norm: f64,
    norm: f64,
}

impl SubsetData {
    pub fn from_image(reference: &GrayImage, center: (usize, usize), subset_size: usize) -> Result<Self> {
        if subset_size % 2 == 0 {
            return Err(DicError::InvalidParameter(format!("subset size {subset_size} is even")));
        }
        let half = subset_size / 2;
        let (cx, cy) = center;
        if cx < half || cy < half || cx + half >= reference.width() || cy + half >= reference.height() {
            return Err(DicError::InvalidParameter(format!(
                "subset at ({cx}, {cy}) does not fit inside the image"
            )));
        }
        let mut coords = Vec::with_capacity(subset_size * subset_size);
        let mut f = Vec::with_capacity(subset_size * subset_size);
        for y in cy - half..=cy + half {
            let row = reference.row(y);
            for x in cx - half..=cx + half {
                coords.push((x as f64 - cx as f64, y as f64 - cy as f64));
                f.push(row[x]);
            }
        }
        Self::from_values(center, half, coords, f)
    }

    fn from_values(center: (usize, usize), half: usize, coords: Vec<(f64, f64)>, f: Vec<f64>) -> Result<Self> {
        let n = f.len() as f64;
        let mean = f.iter().sum::<f64>() / n;
        let zn_norm = f.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>().sqrt();
        let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(zn_norm > 0.0) {
            return Err(DicError::DegenerateSubset);
        }
        Ok(Self {
            grid_index: GridIndex { row: 0, col: 0 },
            center,
            half,
            coords,
            f,
            mean,
            zn_norm,
            norm,
        })
    }

    pub fn center(&self) -> (usize, usize) {
        self.center
    }

    pub fn len(&self) -> usize {
        self.f.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.f
    }

    pub fn coords(&self) -> &[(f64, f64)] {
        &self.coords
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn zero_mean_norm(&self) -> f64 {
        self.zn_norm
    }

    fn target(&self, cost: CostKind, i: usize) -> f64 {
        match cost {
            CostKind::Ssd => self.f[i],
            CostKind::Nssd => self.f[i] / self.norm,
            CostKind::Znssd => (self.f[i] - self.mean) / self.zn_norm,
        }
    }
}

fn norms(v: &[f64]) -> (f64, f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let zn = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>().sqrt();
    let plain = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (mean, zn, plain)
}

/// Matching cost between reference and deformed gray levels.
pub fn cost(kind: CostKind, f: &[f64], g: &[f64]) -> Result<f64> {
    if f.len() != g.len() || f.is_empty() {
        return Err(DicError::DimensionMismatch(format!("{} vs {} samples", f.len(), g.len())));
    }
    let (fm, fz, fp) = norms(f);
    let (gm, gz, gp) = norms(g);
    let sum = |a: &dyn Fn(f64) -> f64, b: &dyn Fn(f64) -> f64| -> f64 {
        f.iter().zip(g).map(|(&x, &y)| (a(x) - b(y)).powi(2)).sum()
    };
    match kind {
        CostKind::Ssd => Ok(sum(&|x| x, &|y| y)),
        CostKind::Nssd => {
            if fp == 0.0 || gp == 0.0 {
                return Err(DicError::DegenerateSubset);
            }
            Ok(sum(&|x| x / fp, &|y| y / gp))
        }
        CostKind::Znssd => {
            if fz == 0.0 || gz == 0.0 {
                return Err(DicError::DegenerateSubset);
            }
            Ok(sum(&|x| (x - fm) / fz, &|y| (y - gm) / gz))
        }
    }
}

/// Zero-normalised cross-correlation coefficient.
pub fn zncc(f: &[f64], g: &[f64]) -> Result<f64> {
    if f.len() != g.len() || f.is_empty() {
        return Err(DicError::DimensionMismatch(format!("{} vs {} samples", f.len(), g.len())));
    }
    let (fm, fz, _) = norms(f);
    let (gm, gz, _) = norms(g);
    if fz == 0.0 || gz == 0.0 {
        return Err(DicError::DegenerateSubset);
    }
    Ok(f.iter().zip(g).map(|(x, y)| (x - fm) * (y - gm)).sum::<f64>() / (fz * gz))
}

/// Scratch buffers reused across optimisations on one thread.
#[derive(Debug, Default)]
pub struct LmWorkspace {
    g: Vec<f64>,
    gx: Vec<f64>,
    gy: Vec<f64>,
    r: Vec<f64>,
    jac: Vec<f64>,
}

/// Cost, ZNCC and normal equations at one parameter vector.
struct Linearisation {
    cost: f64,
    zncc: f64,
    jtj: DMatrix<f64>,
    jtr: DVector<f64>,
}

impl LmWorkspace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sample the deformed image over the warped subset.
    fn sample(&mut self, subset: &SubsetData, spline: &SplineCoefficients, shape: &ShapeParams) -> Result<()> {
        let n = subset.len();
        self.g.resize(n, 0.0);
        self.gx.resize(n, 0.0);
        self.gy.resize(n, 0.0);
        let (cx, cy) = (subset.center.0 as f64, subset.center.1 as f64);
        for (i, &(x, y)) in subset.coords.iter().enumerate() {
            let (wx, wy) = shape.warp(x, y);
            let (px, py) = (cx + wx, cy + wy);
            if !spline.in_domain(px, py) {
                return Err(DicError::OutOfDomain { x: px, y: py });
            }
            let (v, gx, gy) = spline.eval_with_grad_unchecked(px, py);
            self.g[i] = v;
            self.gx[i] = gx;
            self.gy[i] = gy;
        }
        Ok(())
    }

    /// Residuals `r_i = g^_i - f^_i` and their Jacobian (row-major, one row
    /// per pixel) for the normalisation implied by `cost`.
    fn residuals(&mut self, subset: &SubsetData, cost: CostKind, np: usize) -> Result<(f64, f64)> {
        let n = subset.len();
        let (gm, gz, gp) = norms(&self.g);
        let scale = match cost {
            CostKind::Ssd => 1.0,
            CostKind::Nssd => gp,
            CostKind::Znssd => gz,
        };
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(DicError::DegenerateSubset);
        }
        let offset = if cost == CostKind::Znssd { gm } else { 0.0 };
        self.r.resize(n, 0.0);
        let mut total = 0.0;
        let mut cross = 0.0;
        for i in 0..n {
            let gh = (self.g[i] - offset) / scale;
            self.r[i] = gh - subset.target(cost, i);
            total += self.r[i] * self.r[i];
            cross += (subset.f[i] - subset.mean) * (self.g[i] - gm);
        }
        let zncc = if gz > 0.0 { cross / (subset.zn_norm * gz) } else { 0.0 };

        // raw derivatives dg/dp
        self.jac.resize(n * np, 0.0);
        for (i, &(x, y)) in subset.coords.iter().enumerate() {
            let (gx, gy) = (self.gx[i], self.gy[i]);
            let row = &mut self.jac[i * np..(i + 1) * np];
            row[0] = gx;
            row[1] = gy;
            if np >= 6 {
                row[2] = gx * x;
                row[3] = gx * y;
                row[4] = gy * x;
                row[5] = gy * y;
            }
            if np == 12 {
                let (xx, xy, yy) = (x * x, x * y, y * y);
                row[6] = gx * xx;
                row[7] = gx * xy;
                row[8] = gx * yy;
                row[9] = gy * xx;
                row[10] = gy * xy;
                row[11] = gy * yy;
            }
        }
        if cost != CostKind::Ssd {
            // d(g^) = d(g - offset)/s - (g - offset) * (sum (g - offset) dg) / s^3
            let mut mean_d = vec![0.0; np];
            let mut proj = vec![0.0; np];
            for i in 0..n {
                let gc = self.g[i] - offset;
                for k in 0..np {
                    let d = self.jac[i * np + k];
                    mean_d[k] += d;
                    proj[k] += gc * d;
                }
            }
            if cost == CostKind::Znssd {
                mean_d.iter_mut().for_each(|m| *m /= n as f64);
            } else {
                mean_d.fill(0.0);
            }
            let s3 = scale * scale * scale;
            for i in 0..n {
                let gc = self.g[i] - offset;
                for k in 0..np {
                    let d = &mut self.jac[i * np + k];
                    *d = (*d - mean_d[k]) / scale - gc * proj[k] / s3;
                }
            }
        }
        Ok((total, zncc))
    }

    fn linearise(
        &mut self,
        subset: &SubsetData,
        spline: &SplineCoefficients,
        shape: &ShapeParams,
        cost: CostKind,
    ) -> Result<Linearisation> {
        let np = shape.kind().param_count();
        self.sample(subset, spline, shape)?;
        let (total, zncc) = self.residuals(subset, cost, np)?;
        let mut jtj = DMatrix::<f64>::zeros(np, np);
        let mut jtr = DVector::<f64>::zeros(np);
        for (row, &r) in self.jac.chunks_exact(np).zip(&self.r) {
            for a in 0..np {
                jtr[a] += row[a] * r;
                for b in a..np {
                    jtj[(a, b)] += row[a] * row[b];
                }
            }
        }
        for a in 0..np {
            for b in 0..a {
                jtj[(a, b)] = jtj[(b, a)];
            }
        }
        Ok(Linearisation {
            cost: total,
            zncc,
            jtj,
            jtr,
        })
    }
}

/// Residual vector and Jacobian matrix (pixels x parameters) of the cost at
/// `shape`.
pub fn residuals_and_jacobian(
    subset: &SubsetData,
    spline: &SplineCoefficients,
    shape: &ShapeParams,
    cost: CostKind,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let mut ws = LmWorkspace::new();
    let np = shape.kind().param_count();
    ws.sample(subset, spline, shape)?;
    ws.residuals(subset, cost, np)?;
    let jac = DMatrix::from_row_slice(subset.len(), np, &ws.jac);
    Ok((ws.r, jac))
}

/// Norm of an update with gradient terms weighted by the subset half-width
/// and quadratic terms by its square.
pub fn scaled_update_norm(dp: &[f64], half_width: f64) -> f64 {
    dp.iter()
        .enumerate()
        .map(|(k, d)| {
            let w = match k {
                0 | 1 => 1.0,
                2..=5 => half_width,
                _ => half_width * half_width,
            };
            (w * d) * (w * d)
        })
        .sum::<f64>()
        .sqrt()
}

fn solve(a: DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Some(ch.solve(b));
    }
    a.lu().solve(b)
}

pub fn lm_minimize(
    subset: &SubsetData,
    deformed: &SplineCoefficients,
    init: &ShapeParams,
    params: &DicParams,
) -> SubsetResult {
    lm_minimize_with(&mut LmWorkspace::new(), subset, deformed, init, params)
}

/// [`lm_minimize`] with caller-owned scratch space.
pub fn lm_minimize_with(
    ws: &mut LmWorkspace,
    subset: &SubsetData,
    deformed: &SplineCoefficients,
    init: &ShapeParams,
    params: &DicParams,
) -> SubsetResult {
    let mut shape = init.with_kind(params.shape);
    let half = subset.half as f64;
    let mut result = SubsetResult {
        grid_index: subset.grid_index,
        center: (subset.center.0 as f64, subset.center.1 as f64),
        params: shape,
        zncc: f64::NAN,
        final_cost: f64::NAN,
        iterations: 0,
        status: SubsetStatus::Diverged,
    };
    if !shape.is_finite() {
        return result;
    }
    let mut lin = match ws.linearise(subset, deformed, &shape, params.cost) {
        Ok(l) => l,
        Err(DicError::OutOfDomain { .. }) => {
            result.status = SubsetStatus::OutOfDomain;
            return result;
        }
        Err(_) => return result,
    };
    result.zncc = lin.zncc;
    result.final_cost = lin.cost;
    if !lin.cost.is_finite() {
        return result;
    }

    let mut lambda = LAMBDA_INIT;
    let mut last_out_of_domain = false;
    let mut iterations = 0u32;
    let finish = |result: &mut SubsetResult, converged: bool, zncc: f64| {
        result.status = if !converged {
            SubsetStatus::MaxIter
        } else if zncc >= params.zncc_accept_threshold {
            SubsetStatus::Converged
        } else {
            SubsetStatus::LowCorrelation
        };
    };
    while (iterations as usize) < params.max_iterations {
        iterations += 1;
        let mut damped = lin.jtj.clone();
        for k in 0..damped.nrows() {
            let d = lin.jtj[(k, k)];
            damped[(k, k)] += lambda * if d > 0.0 { d } else { 1.0 };
        }
        let Some(dp) = solve(damped, &(-&lin.jtr)) else {
            result.iterations = iterations;
            result.status = SubsetStatus::Diverged;
            return result;
        };
        let step = scaled_update_norm(dp.as_slice(), half);
        if !step.is_finite() {
            result.iterations = iterations;
            result.status = SubsetStatus::Diverged;
            return result;
        }
        let mut trial = shape;
        trial.add(dp.as_slice());
        match ws.linearise(subset, deformed, &trial, params.cost) {
            Ok(next) if next.cost.is_finite() && next.cost <= lin.cost => {
                shape = trial;
                lin = next;
                lambda = (lambda / 10.0).max(1e-12);
                last_out_of_domain = false;
                result.params = shape;
                result.zncc = lin.zncc;
                result.final_cost = lin.cost;
                if step <= params.update_precision {
                    result.iterations = iterations;
                    finish(&mut result, true, lin.zncc);
                    return result;
                }
            }
            Ok(next) if !next.cost.is_finite() => {
                result.iterations = iterations;
                result.status = SubsetStatus::Diverged;
                return result;
            }
            Err(DicError::OutOfDomain { .. }) => {
                last_out_of_domain = true;
                lambda *= 10.0;
            }
            Err(_) => {
                result.iterations = iterations;
                result.status = SubsetStatus::Diverged;
                return result;
            }
            Ok(_) => {
                last_out_of_domain = false;
                // a rejected step this small means we are at the minimum
                if step <= params.update_precision {
                    result.iterations = iterations;
                    finish(&mut result, true, lin.zncc);
                    return result;
                }
                lambda *= 10.0;
            }
        }
        if lambda > LAMBDA_MAX {
            break;
        }
    }
    result.iterations = iterations;
    if last_out_of_domain {
        result.status = SubsetStatus::OutOfDomain;
    } else {
        finish(&mut result, false, lin.zncc);
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interp::prefilter;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(0.0..255.0)).collect()
    }

    /// Smooth random texture evaluated analytically.
    struct Texture {
        blobs: Vec<(f64, f64, f64)>,
    }

    impl Texture {
        fn new(w: f64, h: f64, seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let count = (w * h / 10.0) as usize;
            let blobs = (0..count)
                .map(|_| (rng.gen_range(-5.0..w + 5.0), rng.gen_range(-5.0..h + 5.0), rng.gen_range(40.0..120.0)))
                .collect();
            Self { blobs }
        }

        fn at(&self, x: f64, y: f64) -> f64 {
            let mut v = 10.0;
            for &(bx, by, a) in &self.blobs {
                let d2 = (x - bx).powi(2) + (y - by).powi(2);
                if d2 < 36.0 {
                    v += a * (-d2 / 4.0).exp();
                }
            }
            v
        }

        fn image(&self, w: usize, h: usize, map: impl Fn(f64, f64) -> (f64, f64)) -> GrayImage {
            GrayImage::from_fn(w, h, 8, |x, y| {
                let (sx, sy) = map(x as f64, y as f64);
                self.at(sx, sy)
            })
            .unwrap()
        }
    }

    #[test]
    fn warp_examples() {
        let z = ShapeParams::zeros(ShapeKind::Quadratic);
        assert_eq!(z.warp(3.0, -7.0), (3.0, -7.0));
        let r = ShapeParams::from_slice(ShapeKind::Rigid, &[3.5, -1.25]).unwrap();
        assert_eq!(warp(&r, (2.0, 4.0)), (5.5, 2.75));
        let a = ShapeParams::from_slice(ShapeKind::Affine, &[0.0, 0.0, 0.01, 0.0, 0.0, 0.0]).unwrap();
        let (x, y) = a.warp(10.0, 0.0);
        assert!((x - 10.1).abs() < 1e-12 && y == 0.0);
        let mut q = [0.0; 12];
        q[6] = 0.001;
        q[10] = -0.002;
        let q = ShapeParams::from_slice(ShapeKind::Quadratic, &q).unwrap();
        assert_eq!(q.warp(10.0, 5.0), (10.0 + 0.1, 5.0 - 0.1));
        assert!(ShapeParams::from_slice(ShapeKind::Affine, &[0.0; 2]).is_err());
    }

    #[test]
    fn costs_vanish_for_identical_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_vec(50, &mut rng);
        for k in [CostKind::Ssd, CostKind::Nssd, CostKind::Znssd] {
            assert!(cost(k, &f, &f).unwrap().abs() < 1e-24);
        }
        let g: Vec<f64> = f.iter().map(|v| 2.5 * v + 40.0).collect();
        assert!(cost(CostKind::Znssd, &f, &g).unwrap() < 1e-24);
        assert!(matches!(cost(CostKind::Znssd, &f, &[3.0; 50]), Err(DicError::DegenerateSubset)));
    }

    #[test]
    fn znssd_zncc_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let f = random_vec(31, &mut rng);
            let g = random_vec(31, &mut rng);
            // independent ZNCC evaluation
            let fm = f.iter().sum::<f64>() / 31.0;
            let gm = g.iter().sum::<f64>() / 31.0;
            let num: f64 = f.iter().zip(&g).map(|(a, b)| (a - fm) * (b - gm)).sum();
            let nf: f64 = f.iter().map(|a| (a - fm).powi(2)).sum::<f64>().sqrt();
            let ng: f64 = g.iter().map(|b| (b - gm).powi(2)).sum::<f64>().sqrt();
            let z = num / (nf * ng);
            let c = cost(CostKind::Znssd, &f, &g).unwrap();
            assert!((c - (2.0 - 2.0 * z)).abs() < 1e-12);
            assert!((0.0..=4.0).contains(&c));
            assert!((zncc(&f, &g).unwrap() - z).abs() < 1e-12);
        }
    }

    fn setup(shift: (f64, f64), seed: u64) -> (SubsetData, SplineCoefficients) {
        let tex = Texture::new(80.0, 80.0, seed);
        let reference = tex.image(80, 80, |x, y| (x, y));
        let deformed = tex.image(80, 80, |x, y| (x - shift.0, y - shift.1));
        let subset = SubsetData::from_image(&reference, (40, 40), 31).unwrap();
        (subset, prefilter(&deformed).unwrap())
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let (subset, spline) = setup((0.3, -0.2), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for cost in [CostKind::Ssd, CostKind::Nssd, CostKind::Znssd] {
            for kind in [ShapeKind::Rigid, ShapeKind::Affine, ShapeKind::Quadratic] {
                let np = kind.param_count();
                let p: Vec<f64> = (0..np)
                    .map(|k| match k {
                        0 | 1 => rng.gen_range(-0.5..0.5),
                        2..=5 => rng.gen_range(-0.01..0.01),
                        _ => rng.gen_range(-1e-4..1e-4),
                    })
                    .collect();
                let shape = ShapeParams::from_slice(kind, &p).unwrap();
                let (_, jac) = residuals_and_jacobian(&subset, &spline, &shape, cost).unwrap();
                for k in 0..np {
                    let h = match k {
                        0 | 1 => 1e-5,
                        2..=5 => 1e-6,
                        _ => 1e-8,
                    };
                    let mut pp = p.clone();
                    pp[k] += h;
                    let (rp, _) = residuals_and_jacobian(&subset, &spline, &ShapeParams::from_slice(kind, &pp).unwrap(), cost).unwrap();
                    pp[k] -= 2.0 * h;
                    let (rm, _) = residuals_and_jacobian(&subset, &spline, &ShapeParams::from_slice(kind, &pp).unwrap(), cost).unwrap();
                    let fd: Vec<f64> = rp.iter().zip(&rm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
                    let col: Vec<f64> = (0..subset.len()).map(|i| jac[(i, k)]).collect();
                    let diff = fd.iter().zip(&col).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                    let scale = col.iter().map(|a| a * a).sum::<f64>().sqrt();
                    assert!(diff <= 1e-4 * scale, "{cost} {kind} p{k}: {diff} vs {scale}");
                }
            }
        }
    }

    #[test]
    fn identity_problem_converges_immediately() {
        let tex = Texture::new(80.0, 80.0, 5);
        let img = tex.image(80, 80, |x, y| (x, y));
        let subset = SubsetData::from_image(&img, (40, 40), 31).unwrap();
        let spline = prefilter(&img).unwrap();
        let r = lm_minimize(&subset, &spline, &ShapeParams::zeros(ShapeKind::Affine), &DicParams::default());
        assert_eq!(r.status, SubsetStatus::Converged);
        assert!(r.iterations <= 2);
        assert!(r.params.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-6);
        assert!(r.zncc > 0.999999);
    }

    #[test]
    fn subpixel_translation_recovered() {
        let (subset, spline) = setup((0.25, 0.40), 6);
        let r = lm_minimize(&subset, &spline, &ShapeParams::zeros(ShapeKind::Affine), &DicParams::default());
        assert_eq!(r.status, SubsetStatus::Converged);
        assert!((r.params.u() - 0.25).abs() < 0.02 && (r.params.v() - 0.40).abs() < 0.02, "{:?}", r.params);
        assert!((r.zncc - (1.0 - r.final_cost / 2.0)).abs() < 1e-12);
    }

    #[test]
    fn uniform_strain_recovered() {
        let tex = Texture::new(100.0, 100.0, 7);
        let c = 50.0;
        let reference = tex.image(100, 100, |x, y| (x, y));
        // material point X moves to c + 1.01 (X - c)
        let deformed = tex.image(100, 100, |x, y| (c + (x - c) / 1.01, y));
        let subset = SubsetData::from_image(&reference, (50, 50), 31).unwrap();
        let spline = prefilter(&deformed).unwrap();
        let r = lm_minimize(&subset, &spline, &ShapeParams::zeros(ShapeKind::Affine), &DicParams::default());
        assert_eq!(r.status, SubsetStatus::Converged);
        assert!((r.params.as_slice()[2] - 0.01).abs() < 0.001, "{:?}", r.params);
    }

    #[test]
    fn quadratic_matches_rigid_on_translation() {
        let (subset, spline) = setup((-0.6, 0.35), 8);
        let p = DicParams::default();
        let rigid = lm_minimize(&subset, &spline, &ShapeParams::zeros(ShapeKind::Rigid), &DicParams { shape: ShapeKind::Rigid, ..p.clone() });
        let quad = lm_minimize(&subset, &spline, &ShapeParams::zeros(ShapeKind::Quadratic), &DicParams { shape: ShapeKind::Quadratic, ..p.clone() });
        assert_eq!(rigid.status, SubsetStatus::Converged);
        assert_eq!(quad.status, SubsetStatus::Converged);
        assert!((rigid.params.u() - quad.params.u()).abs() <= p.update_precision);
        assert!((rigid.params.v() - quad.params.v()).abs() <= p.update_precision);
    }

    #[test]
    fn flat_subset_rejected_and_domain_reported() {
        let flat = GrayImage::filled(40, 40, 9.0, 8).unwrap();
        assert!(matches!(SubsetData::from_image(&flat, (20, 20), 11), Err(DicError::DegenerateSubset)));
        let (subset, spline) = setup((0.0, 0.0), 9);
        let far = ShapeParams::translation(ShapeKind::Affine, 30.0, 0.0);
        let r = lm_minimize(&subset, &spline, &far, &DicParams::default());
        assert_eq!(r.status, SubsetStatus::OutOfDomain);
    }

    #[test]
    fn status_codes_round_trip() {
        for s in SubsetStatus::ALL {
            assert_eq!(SubsetStatus::from_code(s.code()), Some(s));
        }
        assert_eq!(SubsetStatus::from_code(99), None);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn znssd_affine_invariant(seed in any::<u64>(), a in 0.05f64..20.0, b in -500.0f64..500.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let f = random_vec(40, &mut rng);
                let g = random_vec(40, &mut rng);
                let g2: Vec<f64> = g.iter().map(|v| a * v + b).collect();
                let c1 = cost(CostKind::Znssd, &f, &g).unwrap();
                let c2 = cost(CostKind::Znssd, &f, &g2).unwrap();
                prop_assert!((c1 - c2).abs() <= 1e-10 * c1.abs().max(1e-300));
            }

            #[test]
            fn accepted_steps_never_increase_cost(sx in -0.8f64..0.8, sy in -0.8f64..0.8) {
                let (subset, spline) = setup((sx, sy), 10);
                let p = DicParams::default();
                let init = ShapeParams::zeros(ShapeKind::Affine);
                let start = {
                    let (r, _) = residuals_and_jacobian(&subset, &spline, &init, CostKind::Znssd).unwrap();
                    r.iter().map(|v| v * v).sum::<f64>()
                };
                let mut prev = start;
                for iters in 1..6 {
                    let r = lm_minimize(&subset, &spline, &init, &DicParams { max_iterations: iters, ..p.clone() });
                    prop_assert!(r.final_cost <= prev + 1e-15);
                    prev = r.final_cost;
                }
            }
        }
    }
}
