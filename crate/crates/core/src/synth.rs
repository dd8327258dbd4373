//! Synthetic speckle images with analytic ground truth, and the metrology
//! used to score an engine on them (noise floor, spatial resolution, MEI).

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{DicError, Result};
use crate::image::GrayImage;
use crate::interp::prefilter;
use crate::optimizer::SubsetStatus;
use crate::params::DicParams;
use crate::rgdic::{correlate_2d, DicResult};
use crate::roi::RoiMask;

pub const DEFAULT_SUPERSAMPLE: usize = 4;
/// Gray levels of the speckle background and of a saturated speckle.
pub const SPECKLE_BACKGROUND: f64 = 20.0;
pub const SPECKLE_PEAK: f64 = 235.0;
/// Attenuation threshold that defines the spatial resolution.
pub const ATTENUATION_LEVEL: f64 = 0.9;
pub const RESOLUTION_POLY_DEGREE: usize = 12;

/// Speckle image: Gaussian blobs of FWHM `mean_diameter` at uniform random
/// centers, covering roughly `density` of the area, mapped to 8-bit gray
/// levels through `1 - exp(-sum)`.
pub fn gen_speckle(width: usize, height: usize, mean_diameter: f64, density: f64, rng_seed: u64) -> Result<GrayImage> {
    if !(2.0..=10.0).contains(&mean_diameter) {
        return Err(DicError::InvalidParameter(format!("speckle diameter {mean_diameter} outside [2, 10]")));
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(DicError::InvalidParameter(format!("speckle density {density} outside (0, 1]")));
    }
    let sigma = mean_diameter / 2.355;
    let reach = (3.0 * sigma).ceil() as i64;
    let blob_area = PI * mean_diameter * mean_diameter / 4.0;
    let (wf, hf) = (width as f64, height as f64);
    let margin = reach as f64;
    let padded_area = (wf + 2.0 * margin) * (hf + 2.0 * margin);
    let count = (density * padded_area / blob_area).round() as usize;

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut sum = vec![0.0; width * height];
    let inv2s2 = 1.0 / (2.0 * sigma * sigma);
    let span = (2 * reach + 1) as usize;
    let mut wx = vec![0.0; span];
    let mut wy = vec![0.0; span];
    for _ in 0..count {
        let cx = rng.gen_range(-margin..wf + margin);
        let cy = rng.gen_range(-margin..hf + margin);
        let (ix, iy) = (cx.round() as i64, cy.round() as i64);
        for k in 0..span {
            let d = (ix - reach + k as i64) as f64 - cx;
            wx[k] = (-d * d * inv2s2).exp();
            let d = (iy - reach + k as i64) as f64 - cy;
            wy[k] = (-d * d * inv2s2).exp();
        }
        for (j, wyj) in wy.iter().enumerate() {
            let y = iy - reach + j as i64;
            if y < 0 || y >= height as i64 {
                continue;
            }
            let row = &mut sum[y as usize * width..(y as usize + 1) * width];
            for (i, wxi) in wx.iter().enumerate() {
                let x = ix - reach + i as i64;
                if x >= 0 && x < width as i64 {
                    row[x as usize] += wyj * wxi;
                }
            }
        }
    }
    let pixels = sum
        .into_iter()
        .map(|s| SPECKLE_BACKGROUND + (SPECKLE_PEAK - SPECKLE_BACKGROUND) * (1.0 - (-s).exp()))
        .collect();
    GrayImage::new(width, height, pixels, 8)
}

/// Linear period sweep `p(x)` from `p_left` at `x_left` to `p_right` at
/// `x_right`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeriodMap {
    pub x_left: f64,
    pub x_right: f64,
    pub p_left: f64,
    pub p_right: f64,
}

impl PeriodMap {
    pub fn period(&self, x: f64) -> f64 {
        let t = (x - self.x_left) / (self.x_right - self.x_left);
        self.p_left + (self.p_right - self.p_left) * t
    }

    fn min_period(&self) -> f64 {
        self.p_left.min(self.p_right)
    }
}

/// Analytic displacement field `u(X)` defined on reference coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DeformationFieldSpec {
    Translation { ux: f64, uy: f64 },
    /// `u = E (X - c)` with the symmetric small-strain tensor `E`.
    UniformStrain { exx: f64, eyy: f64, exy: f64, center: (f64, f64) },
    /// Radial stretch about `center`; points at distance `radius` move out by
    /// `extension` pixels.
    RadialStretch { center: (f64, f64), radius: f64, extension: f64 },
    /// Star pattern: `u_y = A cos(2 pi (Y - y_mid) / p(X))`, `u_x = 0`. The
    /// crest runs along the row `y_mid`.
    StarSinusoid { amplitude: f64, y_mid: f64, period: PeriodMap },
    /// `u_x = bx + A sin(2 pi Y / P)`, `u_y = by + A sin(2 pi X / P)`.
    SinusoidalShear { base: (f64, f64), amplitude: f64, period: f64 },
}

const INVERSE_TOL: f64 = 1e-12;
const INVERSE_MAX_ITER: usize = 200;

impl DeformationFieldSpec {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Translation { .. } => "translation",
            Self::UniformStrain { .. } => "uniform_strain",
            Self::RadialStretch { .. } => "radial_stretch",
            Self::StarSinusoid { .. } => "star_sinusoid",
            Self::SinusoidalShear { .. } => "sinusoidal_shear",
        }
    }

    /// Displacement of the reference point `(x, y)`.
    pub fn displacement(&self, x: f64, y: f64) -> (f64, f64) {
        match *self {
            Self::Translation { ux, uy } => (ux, uy),
            Self::UniformStrain { exx, eyy, exy, center } => {
                let (dx, dy) = (x - center.0, y - center.1);
                (exx * dx + exy * dy, exy * dx + eyy * dy)
            }
            Self::RadialStretch { center, radius, extension } => {
                let k = extension / radius;
                (k * (x - center.0), k * (y - center.1))
            }
            Self::StarSinusoid { amplitude, y_mid, period } => {
                (0.0, amplitude * (2.0 * PI * (y - y_mid) / period.period(x)).cos())
            }
            Self::SinusoidalShear { base, amplitude, period } => (
                base.0 + amplitude * (2.0 * PI * y / period).sin(),
                base.1 + amplitude * (2.0 * PI * x / period).sin(),
            ),
        }
    }

    /// Linear part `[[a, b], [c, d]]` for the fields that have one.
    fn linear(&self) -> Option<[[f64; 2]; 2]> {
        match *self {
            Self::UniformStrain { exx, eyy, exy, .. } => Some([[exx, exy], [exy, eyy]]),
            Self::RadialStretch { radius, extension, .. } => {
                let k = extension / radius;
                Some([[k, 0.0], [0.0, k]])
            }
            _ => None,
        }
    }

    /// Check that `X -> X + u(X)` is a bijection the warper can invert over an
    /// image of `width` columns.
    pub fn validate(&self, width: usize) -> Result<()> {
        let bad = |m: String| Err(DicError::NonInvertibleSpec(m));
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        match *self {
            Self::Translation { ux, uy } if !finite(&[ux, uy]) => bad("non-finite shift".into()),
            Self::UniformStrain { exx, eyy, exy, center } if !finite(&[exx, eyy, exy, center.0, center.1]) => {
                bad("non-finite strain".into())
            }
            Self::RadialStretch { radius, .. } if !(radius > 0.0) => bad(format!("radius {radius} must be positive")),
            Self::StarSinusoid { amplitude, period, .. } => {
                let pmin = period.min_period();
                let p_at_edge = period.period(0.0).min(period.period(width.saturating_sub(1) as f64));
                if !(pmin > 0.0 && p_at_edge > 0.0) || period.x_right == period.x_left {
                    return bad(format!("period map {period:?} is not positive"));
                }
                let lip = 2.0 * PI * amplitude.abs() / pmin.min(p_at_edge);
                if !(lip < 1.0) {
                    return bad(format!("amplitude {amplitude} folds the shortest period {pmin}"));
                }
                Ok(())
            }
            Self::SinusoidalShear { amplitude, period, base } => {
                if !(period > 0.0) || !finite(&[amplitude, base.0, base.1]) {
                    return bad(format!("period {period} must be positive"));
                }
                if !(2.0 * PI * amplitude.abs() / period < 1.0) {
                    return bad(format!("amplitude {amplitude} folds period {period}"));
                }
                Ok(())
            }
            _ => {
                if let Some(m) = self.linear() {
                    let det = (1.0 + m[0][0]) * (1.0 + m[1][1]) - m[0][1] * m[1][0];
                    if !(det > 0.0) {
                        return bad(format!("deformation gradient determinant {det}"));
                    }
                }
                Ok(())
            }
        }
    }

    /// Reference point that lands on the deformed point `(x, y)`.
    pub fn inverse(&self, x: f64, y: f64) -> Result<(f64, f64)> {
        match *self {
            Self::Translation { ux, uy } => Ok((x - ux, y - uy)),
            Self::UniformStrain { center, .. } | Self::RadialStretch { center, .. } => {
                let m = self.linear().expect("linear field");
                let (a, b, c, d) = (1.0 + m[0][0], m[0][1], m[1][0], 1.0 + m[1][1]);
                let det = a * d - b * c;
                if !(det > 0.0) {
                    return Err(DicError::NonInvertibleSpec(format!("deformation gradient determinant {det}")));
                }
                let (dx, dy) = (x - center.0, y - center.1);
                Ok((center.0 + (d * dx - b * dy) / det, center.1 + (a * dy - c * dx) / det))
            }
            _ => {
                let (mut px, mut py) = (x, y);
                for _ in 0..INVERSE_MAX_ITER {
                    let (u, v) = self.displacement(px, py);
                    let (nx, ny) = (x - u, y - v);
                    let step = (nx - px).abs().max((ny - py).abs());
                    (px, py) = (nx, ny);
                    if step <= INVERSE_TOL * (1.0 + x.abs().max(y.abs())) {
                        return Ok((px, py));
                    }
                }
                Err(DicError::NonInvertibleSpec(format!("inverse mapping of ({x}, {y}) did not converge")))
            }
        }
    }
}

/// Star field over a `width` x `height` image: crest on the middle row,
/// period growing linearly from `period.p_left` at x = 0 to `period.p_right`
/// at the last column.
pub fn star_field(width: usize, height: usize, amplitude: f64, p_left: f64, p_right: f64) -> Result<DeformationFieldSpec> {
    if !(amplitude > 0.0) {
        return Err(DicError::InvalidParameter(format!("amplitude {amplitude} must be positive")));
    }
    let spec = DeformationFieldSpec::StarSinusoid {
        amplitude,
        y_mid: (height / 2) as f64,
        period: PeriodMap {
            x_left: 0.0,
            x_right: width.saturating_sub(1).max(1) as f64,
            p_left,
            p_right,
        },
    };
    spec.validate(width)?;
    Ok(spec)
}

/// Warp `image` by `spec`: every output pixel averages `supersample`^2
/// sub-pixel samples of the source spline taken at the inverse-mapped
/// positions. The source is mirror-extended beyond its edges.
pub fn deform_image(image: &GrayImage, spec: &DeformationFieldSpec, supersample: usize) -> Result<GrayImage> {
    if supersample == 0 {
        return Err(DicError::InvalidParameter("supersample must be at least 1".into()));
    }
    spec.validate(image.width())?;
    let spline = prefilter(image)?;
    let (w, h) = image.dims();
    let s = supersample;
    let offsets: Vec<f64> = (0..s).map(|i| (i as f64 + 0.5) / s as f64 - 0.5).collect();
    let norm = 1.0 / (s * s) as f64;
    let max = image.max_value();
    let mut pixels = vec![0.0; w * h];
    pixels
        .par_chunks_mut(w)
        .enumerate()
        .try_for_each(|(y, row)| -> Result<()> {
            for (x, out) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for oy in &offsets {
                    for ox in &offsets {
                        let (sx, sy) = spec.inverse(x as f64 + ox, y as f64 + oy)?;
                        acc += spline.eval_mirror(sx, sy);
                    }
                }
                *out = (acc * norm).clamp(0.0, max);
            }
            Ok(())
        })?;
    GrayImage::new(w, h, pixels, image.source_depth())
}

/// Add zero-mean Gaussian noise of standard deviation `sigma` gray levels,
/// clamped to the image's bit-depth range.
pub fn add_noise(image: &GrayImage, sigma: f64, rng_seed: u64) -> Result<GrayImage> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(DicError::InvalidParameter(format!("noise sigma {sigma} must be non-negative")));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let max = image.max_value();
    let pixels = image
        .pixels()
        .iter()
        .map(|&p| (p + normal.sample(&mut rng)).clamp(0.0, max))
        .collect();
    GrayImage::new(image.width(), image.height(), pixels, image.source_depth())
}

/// Mean speckle size: FWHM of the image autocorrelation (averaged over the x
/// and y axes) divided by sqrt(2), which recovers the FWHM of a Gaussian
/// speckle.
pub fn speckle_diameter(image: &GrayImage) -> f64 {
    let (w, h) = image.dims();
    let (pw, ph) = (2 * w, 2 * h);
    let mean = image.pixels().iter().sum::<f64>() / (w * h) as f64;
    let mut buf = vec![Complex::new(0.0, 0.0); pw * ph];
    for y in 0..h {
        for (x, v) in image.row(y).iter().enumerate() {
            buf[y * pw + x].re = v - mean;
        }
    }
    let mut planner = FftPlanner::new();
    let fx = planner.plan_fft_forward(pw);
    let ix = planner.plan_fft_inverse(pw);
    let fy = planner.plan_fft_forward(ph);
    let iy = planner.plan_fft_inverse(ph);
    let mut col = vec![Complex::new(0.0, 0.0); ph];
    let columns = |buf: &mut [Complex<f64>], col: &mut [Complex<f64>], plan: &dyn rustfft::Fft<f64>| {
        for x in 0..pw {
            for y in 0..ph {
                col[y] = buf[y * pw + x];
            }
            plan.process(col);
            for y in 0..ph {
                buf[y * pw + x] = col[y];
            }
        }
    };
    for r in buf.chunks_mut(pw) {
        fx.process(r);
    }
    columns(&mut buf, &mut col, fy.as_ref());
    for c in buf.iter_mut() {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    for r in buf.chunks_mut(pw) {
        ix.process(r);
    }
    columns(&mut buf, &mut col, iy.as_ref());
    let zero = buf[0].re;
    let half_width = |step: &dyn Fn(usize) -> f64, n: usize| {
        for k in 1..n {
            let (a, b) = (step(k - 1) / zero, step(k) / zero);
            if b <= 0.5 {
                return (k - 1) as f64 + (a - 0.5) / (a - b);
            }
        }
        n as f64
    };
    let hx = half_width(&|k| buf[k].re, w);
    let hy = half_width(&|k| buf[k * pw].re, h);
    (hx + hy) / std::f64::consts::SQRT_2
}

/// Sample standard deviation of `u_y` over converged points.
pub fn converged_std_uy(result: &DicResult) -> Result<f64> {
    let vals: Vec<f64> = result
        .status
        .iter()
        .zip(&result.u_y)
        .filter(|(s, v)| **s == SubsetStatus::Converged && v.is_finite())
        .map(|(_, v)| *v)
        .collect();
    if vals.len() < 2 {
        return Err(DicError::TooFewEntries { needed: 2, got: vals.len() });
    }
    let m = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (vals.len() - 1) as f64;
    Ok(var.sqrt())
}

/// Displacement noise `n`: 1 sigma of the vertical displacement when the
/// reference is correlated against a noisy copy of itself.
pub fn noise_floor(
    reference: &GrayImage,
    reference_noisy: &GrayImage,
    roi: &RoiMask,
    seed: (f64, f64),
    params: &DicParams,
) -> Result<f64> {
    let r = correlate_2d(reference, [("noise", reference_noisy)], roi, seed, params)?;
    converged_std_uy(&r[0])
}

/// Least-squares polynomial in Chebyshev form on `[lo, hi]`.
#[derive(Debug, Clone)]
pub struct ChebyshevFit {
    lo: f64,
    hi: f64,
    coeffs: Vec<f64>,
}

impl ChebyshevFit {
    pub fn fit(samples: &[(f64, f64)], degree: usize) -> Result<Self> {
        let n = degree + 1;
        if samples.len() < n {
            return Err(DicError::TooFewEntries { needed: n, got: samples.len() });
        }
        let lo = samples.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
        let hi = samples.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
        if !(hi > lo) {
            return Err(DicError::RankDeficient);
        }
        let mut a = DMatrix::zeros(samples.len(), n);
        let mut b = DVector::zeros(samples.len());
        let mut row = vec![0.0; n];
        for (i, &(x, v)) in samples.iter().enumerate() {
            chebyshev_row(scale(x, lo, hi), &mut row);
            for (k, t) in row.iter().enumerate() {
                a[(i, k)] = *t;
            }
            b[i] = v;
        }
        let svd = a.svd(true, true);
        let smax = svd.singular_values.max();
        if svd.singular_values.min() <= 1e-10 * smax {
            return Err(DicError::RankDeficient);
        }
        let c = svd.solve(&b, 0.0).map_err(|_| DicError::RankDeficient)?;
        Ok(Self { lo, hi, coeffs: c.iter().copied().collect() })
    }

    pub fn eval(&self, x: f64) -> f64 {
        let t = scale(x, self.lo, self.hi);
        let (mut b1, mut b2) = (0.0, 0.0);
        for &c in self.coeffs.iter().skip(1).rev() {
            let b0 = 2.0 * t * b1 - b2 + c;
            b2 = b1;
            b1 = b0;
        }
        t * b1 - b2 + self.coeffs[0]
    }

    pub fn range(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }
}

fn scale(x: f64, lo: f64, hi: f64) -> f64 {
    (2.0 * x - lo - hi) / (hi - lo)
}

fn chebyshev_row(t: f64, row: &mut [f64]) {
    row[0] = 1.0;
    if row.len() > 1 {
        row[1] = t;
    }
    for k in 2..row.len() {
        row[k] = 2.0 * t * row[k - 1] - row[k - 2];
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Plateau amplitude: median of the profile over the rightmost 10% of its x
/// range.
pub fn profile_plateau(profile: &[(f64, f64)]) -> f64 {
    let lo = profile.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
    let hi = profile.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
    let cut = hi - 0.1 * (hi - lo);
    median(profile.iter().filter(|s| s.0 >= cut).map(|s| s.1).collect())
}

/// Spatial resolution: fit a 12th-order polynomial to the displacement
/// profile, find the largest x where it crosses 90% of the plateau and
/// return the local period there. Non-finite samples are ignored.
pub fn spatial_resolution(profile: &[(f64, f64)], period_of_x: impl Fn(f64) -> f64) -> Result<f64> {
    let x = crossing_position(profile)?;
    Ok(period_of_x(x))
}

/// Abscissa of the attenuation crossing used by [`spatial_resolution`].
pub fn crossing_position(profile: &[(f64, f64)]) -> Result<f64> {
    let clean: Vec<(f64, f64)> = profile.iter().copied().filter(|s| s.0.is_finite() && s.1.is_finite()).collect();
    let fit = ChebyshevFit::fit(&clean, RESOLUTION_POLY_DEGREE)?;
    let plateau = profile_plateau(&clean);
    if plateau == 0.0 || !plateau.is_finite() {
        return Err(DicError::NoCrossing);
    }
    let g = |x: f64| fit.eval(x) / plateau - ATTENUATION_LEVEL;
    let (lo, hi) = fit.range();
    let samples = 64 * clean.len().max(64);
    let at = |k: usize| lo + (hi - lo) * k as f64 / samples as f64;
    let mut right = g(hi);
    for k in (0..samples).rev() {
        let left = g(at(k));
        if (left < 0.0) != (right < 0.0) || left == 0.0 {
            let (mut a, mut b) = (at(k), at(k + 1));
            let ga = left;
            for _ in 0..100 {
                let m = 0.5 * (a + b);
                if (g(m) < 0.0) == (ga < 0.0) {
                    a = m;
                } else {
                    b = m;
                }
            }
            return Ok(0.5 * (a + b));
        }
        right = left;
    }
    Err(DicError::NoCrossing)
}

/// Metrological efficiency indicator `n * l10`.
pub fn mei(noise: f64, l10: f64) -> f64 {
    noise * l10
}

/// Mean of the three smallest MEI values.
pub fn mei_summary(values: &[f64]) -> Result<f64> {
    if values.len() < 3 {
        return Err(DicError::TooFewEntries { needed: 3, got: values.len() });
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    Ok(v[..3].iter().sum::<f64>() / 3.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetrologyRow {
    pub subset_size: usize,
    pub noise: f64,
    pub l10: f64,
    pub mei: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetrologyReport {
    pub rows: Vec<MetrologyRow>,
    pub summary: f64,
}

/// Midline of a star-field result: converged `(x, u_y)` samples on the grid
/// row closest to `y_mid`.
pub fn midline_profile(result: &DicResult, y_mid: f64) -> Vec<(f64, f64)> {
    let g = &result.grid;
    let row = (0..g.rows())
        .min_by(|&a, &b| {
            let ya = g.center_linear(a * g.cols()).1 as f64;
            let yb = g.center_linear(b * g.cols()).1 as f64;
            (ya - y_mid).abs().total_cmp(&(yb - y_mid).abs())
        })
        .unwrap_or(0);
    (0..g.cols())
        .map(|c| row * g.cols() + c)
        .filter(|&i| result.status[i] == SubsetStatus::Converged)
        .map(|i| (g.center_linear(i).0 as f64, result.u_y[i]))
        .collect()
}

/// Noise floor and spatial resolution over a set of subset sizes.
#[allow(clippy::too_many_arguments)]
pub fn metrology_sweep(
    reference: &GrayImage,
    reference_noisy: &GrayImage,
    deformed: &GrayImage,
    roi: &RoiMask,
    seed: (f64, f64),
    subset_sizes: &[usize],
    base: &DicParams,
    y_mid: f64,
    period: &PeriodMap,
) -> Result<MetrologyReport> {
    let mut rows = Vec::with_capacity(subset_sizes.len());
    for &size in subset_sizes {
        let params = DicParams { subset_size: size, ..base.clone() };
        let noise = noise_floor(reference, reference_noisy, roi, seed, &params)?;
        let r = correlate_2d(reference, [("star", deformed)], roi, seed, &params)?;
        let l10 = spatial_resolution(&midline_profile(&r[0], y_mid), |x| period.period(x))?;
        log::info!("subset {size}: noise {noise:.5} px, l10 {l10:.2} px");
        rows.push(MetrologyRow { subset_size: size, noise, l10, mei: mei(noise, l10) });
    }
    let summary = mei_summary(&rows.iter().map(|r| r.mei).collect::<Vec<_>>())?;
    Ok(MetrologyReport { rows, summary })
}
