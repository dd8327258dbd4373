//! Strain from displacement fields by windowed polynomial smoothing.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{DicError, Result};
use crate::optimizer::SubsetStatus;
use crate::params::keyword_enum;
use crate::rgdic::DicResult;

/// Polynomial used for the local displacement fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StrainBasis {
    #[default]
    Bilinear,
    Biquadratic,
}

impl StrainBasis {
    pub fn len(self) -> usize {
        match self {
            StrainBasis::Bilinear => 3,
            StrainBasis::Biquadratic => 8,
        }
    }

    /// Basis terms `[1, x, y]` or `[1, x, y, x², y², x²y, xy², x²y²]`.
    fn terms(self, x: f64, y: f64, out: &mut [f64]) {
        out[0] = 1.0;
        out[1] = x;
        out[2] = y;
        if self == StrainBasis::Biquadratic {
            out[3] = x * x;
            out[4] = y * y;
            out[5] = x * x * y;
            out[6] = x * y * y;
            out[7] = x * x * y * y;
        }
    }

    /// Total degree of each term, for undoing coordinate scaling.
    fn degrees(self) -> &'static [(i32, i32)] {
        match self {
            StrainBasis::Bilinear => &[(0, 0), (1, 0), (0, 1)],
            StrainBasis::Biquadratic => &[(0, 0), (1, 0), (0, 1), (2, 0), (0, 2), (2, 1), (1, 2), (2, 2)],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StrainFormulation {
    GreenLagrange,
    Hencky,
    EulerAlmansi,
    #[default]
    BiotRight,
    BiotLeft,
}

keyword_enum!(StrainBasis, "strain basis", StrainBasis::Bilinear => "bilinear", StrainBasis::Biquadratic => "biquadratic");
keyword_enum!(
    StrainFormulation, "strain formulation",
    StrainFormulation::GreenLagrange => "green_lagrange",
    StrainFormulation::Hencky => "hencky",
    StrainFormulation::EulerAlmansi => "euler_almansi",
    StrainFormulation::BiotRight => "biot_right",
    StrainFormulation::BiotLeft => "biot_left",
);

#[derive(Debug, Clone, PartialEq)]
pub struct StrainParams {
    /// Odd edge length of the fitting window, in displacement-grid points.
    pub window_points: usize,
    pub basis: StrainBasis,
    pub formulation: StrainFormulation,
}

impl Default for StrainParams {
    fn default() -> Self {
        Self {
            window_points: 5,
            basis: StrainBasis::Bilinear,
            formulation: StrainFormulation::BiotRight,
        }
    }
}

impl StrainParams {
    pub fn validate(&self) -> Result<()> {
        if self.window_points < 3 || self.window_points % 2 == 0 {
            return Err(DicError::InvalidParameter(format!(
                "window_points must be odd and >= 3, got {}",
                self.window_points
            )));
        }
        if self.window_points * self.window_points < self.min_points() {
            return Err(DicError::InvalidParameter(format!(
                "a {0}x{0} window cannot hold the {1} points a {2} fit needs",
                self.window_points,
                self.min_points(),
                self.basis
            )));
        }
        Ok(())
    }

    /// Valid samples a window needs to be fitted.
    pub fn min_points(&self) -> usize {
        self.basis.len() + 2
    }
}

/// Symmetric 2x2 tensor stored as `[xx, yy, xy]`.
pub type Sym2 = [f64; 3];
/// Row-major 2x2 matrix `[[xx, xy], [yx, yy]]`.
pub type Mat2 = [[f64; 2]; 2];

/// Strain on a lattice of window centers.
#[derive(Debug, Clone, PartialEq)]
pub struct StrainField {
    pub cols: usize,
    pub rows: usize,
    /// Window-center coordinates along x (per column) and y (per row).
    pub window_x: Vec<f64>,
    pub window_y: Vec<f64>,
    pub deformation: Vec<Mat2>,
    pub strain: Vec<Sym2>,
    pub valid: Vec<bool>,
    pub vsg: usize,
    pub formulation: StrainFormulation,
    pub image_label: String,
}

impl StrainField {
    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn center(&self, i: usize) -> (f64, f64) {
        (self.window_x[i % self.cols], self.window_y[i / self.cols])
    }
}

/// Least-squares fit of `samples` (`(x, y, value)` in pixels relative to the
/// window center) to the basis. Non-finite values are skipped.
pub fn fit_window(samples: &[(f64, f64, f64)], basis: StrainBasis) -> Result<Vec<f64>> {
    let pts: Vec<&(f64, f64, f64)> = samples.iter().filter(|s| s.2.is_finite()).collect();
    let nb = basis.len();
    if pts.len() < nb {
        return Err(DicError::RankDeficient);
    }
    // scale coordinates to about unit size for conditioning
    let l = pts
        .iter()
        .map(|p| p.0.abs().max(p.1.abs()))
        .fold(0.0, f64::max)
        .max(1.0);
    let mut a = DMatrix::<f64>::zeros(pts.len(), nb);
    let mut b = DVector::<f64>::zeros(pts.len());
    let mut row = vec![0.0; nb];
    for (i, p) in pts.iter().enumerate() {
        basis.terms(p.0 / l, p.1 / l, &mut row);
        for k in 0..nb {
            a[(i, k)] = row[k];
        }
        b[i] = p.2;
    }
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-10 * smax) {
        return Err(DicError::RankDeficient);
    }
    let c = svd.solve(&b, 0.0).map_err(|_| DicError::RankDeficient)?;
    Ok(basis
        .degrees()
        .iter()
        .zip(c.iter())
        .map(|(&(dx, dy), v)| v / l.powi(dx + dy))
        .collect())
}

/// `F = I + grad u` at the window center from the fitted coefficients of
/// `u_x` and `u_y`.
pub fn deformation_gradient(cx: &[f64], cy: &[f64]) -> Mat2 {
    [[1.0 + cx[1], cx[2]], [cy[1], 1.0 + cy[2]]]
}

/// Eigen-decomposition of a symmetric 2x2 `[a, c, b]` (xx, yy, xy).
fn sym_eigen(m: Sym2) -> ([f64; 2], [f64; 2]) {
    let [a, c, b] = m;
    let mid = 0.5 * (a + c);
    let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let theta = 0.5 * (2.0 * b).atan2(a - c);
    ([mid + rad, mid - rad], [theta.cos(), theta.sin()])
}

/// Apply a scalar function to a symmetric 2x2 through its eigenvalues.
fn sym_map(m: Sym2, f: impl Fn(f64) -> f64) -> Result<Sym2> {
    let ([l1, l2], [c, s]) = sym_eigen(m);
    let (f1, f2) = (f(l1), f(l2));
    if !f1.is_finite() || !f2.is_finite() {
        return Err(DicError::SingularDeformation);
    }
    Ok([f1 * c * c + f2 * s * s, f1 * s * s + f2 * c * c, (f1 - f2) * c * s])
}

/// `FᵀF - I` and `FFᵀ - I`, formed so that small strains lose no digits.
fn stretch_minus_identity(f: &Mat2) -> (Sym2, Sym2) {
    let (a, b, c, d) = (f[0][0] - 1.0, f[0][1], f[1][0], f[1][1] - 1.0);
    // F = I + H: FᵀF - I = H + Hᵀ + HᵀH
    let right = [
        2.0 * a + a * a + c * c,
        2.0 * d + b * b + d * d,
        b + c + a * b + c * d,
    ];
    let left = [
        2.0 * a + a * a + b * b,
        2.0 * d + c * c + d * d,
        b + c + a * c + b * d,
    ];
    (right, left)
}

pub fn strain_tensor(f: &Mat2, formulation: StrainFormulation) -> Result<Sym2> {
    let det = f[0][0] * f[1][1] - f[0][1] * f[1][0];
    if !(det > 0.0) {
        return Err(DicError::SingularDeformation);
    }
    let (right, left) = stretch_minus_identity(f);
    // each map takes an eigenvalue m of (stretch² - I)
    let half_log = |m: f64| if m > -1.0 { 0.5 * m.ln_1p() } else { f64::NAN };
    let root = |m: f64| if m > -1.0 { m / ((1.0 + m).sqrt() + 1.0) } else { f64::NAN };
    let almansi = |m: f64| if m > -1.0 { 0.5 * m / (1.0 + m) } else { f64::NAN };
    match formulation {
        StrainFormulation::GreenLagrange => Ok([0.5 * right[0], 0.5 * right[1], 0.5 * right[2]]),
        StrainFormulation::Hencky => sym_map(right, half_log),
        StrainFormulation::EulerAlmansi => sym_map(left, almansi),
        StrainFormulation::BiotRight => sym_map(right, root),
        StrainFormulation::BiotLeft => sym_map(left, root),
    }
}

/// Slide an `N x N` window over the displacement grid (stride one point) and
/// compute `F` and the strain at each window center.
pub fn calculate_strain_field(result: &DicResult, params: &StrainParams) -> Result<StrainField> {
    params.validate()?;
    let grid = &result.grid;
    let n = params.window_points;
    if grid.rows() < n || grid.cols() < n {
        return Err(DicError::GridTooSmall {
            rows: grid.rows(),
            cols: grid.cols(),
            window: n,
        });
    }
    let h = n / 2;
    let (cols, rows) = (grid.cols() - n + 1, grid.rows() - n + 1);
    let step = grid.step() as f64;
    let usable = |i: usize| result.status[i] == SubsetStatus::Converged && result.u_x[i].is_finite() && result.u_y[i].is_finite();

    let per_window: Vec<Option<(Mat2, Sym2)>> = (0..cols * rows)
        .into_par_iter()
        .map(|w| {
            let (r0, c0) = (w / cols, w % cols);
            let center = (r0 + h) * grid.cols() + c0 + h;
            if !grid.is_present(center) {
                return None;
            }
            let mut sx = Vec::with_capacity(n * n);
            let mut sy = Vec::with_capacity(n * n);
            for dr in 0..n {
                for dc in 0..n {
                    let i = (r0 + dr) * grid.cols() + c0 + dc;
                    if !usable(i) {
                        continue;
                    }
                    let x = (dc as f64 - h as f64) * step;
                    let y = (dr as f64 - h as f64) * step;
                    sx.push((x, y, result.u_x[i]));
                    sy.push((x, y, result.u_y[i]));
                }
            }
            if sx.len() < params.min_points() {
                return None;
            }
            let cx = fit_window(&sx, params.basis).ok()?;
            let cy = fit_window(&sy, params.basis).ok()?;
            let f = deformation_gradient(&cx, &cy);
            let e = strain_tensor(&f, params.formulation).ok()?;
            Some((f, e))
        })
        .collect();

    let (ox, oy) = grid.origin();
    let nan2 = [[f64::NAN; 2]; 2];
    Ok(StrainField {
        cols,
        rows,
        window_x: (0..cols).map(|c| (ox + (c + h) * grid.step()) as f64).collect(),
        window_y: (0..rows).map(|r| (oy + (r + h) * grid.step()) as f64).collect(),
        deformation: per_window.iter().map(|w| w.map_or(nan2, |(f, _)| f)).collect(),
        strain: per_window.iter().map(|w| w.map_or([f64::NAN; 3], |(_, e)| e)).collect(),
        valid: per_window.iter().map(|w| w.is_some()).collect(),
        vsg: virtual_strain_gauge(n, grid.step(), grid.subset_size()),
        formulation: params.formulation,
        image_label: result.image_label.clone(),
    })
}

/// Footprint of one strain value: `(N - 1) s + w` pixels.
pub fn virtual_strain_gauge(window_points: usize, step: usize, subset_size: usize) -> usize {
    (window_points - 1) * step + subset_size
}

impl fmt::Display for StrainParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.window_points, self.basis, self.formulation)
    }
}

impl FromStr for StrainParams {
    type Err = DicError;

    /// Parses `N basis formulation`, e.g. `5 bilinear hencky`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(DicError::InvalidParameter(format!("expected `N basis formulation`, got {s:?}")));
        }
        let window_points = parts[0]
            .parse()
            .map_err(|_| DicError::InvalidParameter(format!("bad window size {:?}", parts[0])))?;
        Ok(Self {
            window_points,
            basis: parts[1].parse()?,
            formulation: parts[2].parse()?,
        })
    }
}
