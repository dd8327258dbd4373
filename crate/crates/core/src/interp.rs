//! Interpolating bicubic b-splines.
//!
//! Samples are converted to spline coefficients with the separable recursive
//! prefilter (one causal and one anticausal first-order pass per axis, pole
//! `sqrt(3) - 2`, mirror boundaries). Evaluation is the tensor product of
//! cubic b-spline weights over a 4x4 coefficient neighbourhood.

use rayon::prelude::*;

use crate::error::{DicError, Result};
use crate::image::GrayImage;

/// Pole of the cubic b-spline prefilter.
pub const POLE: f64 = 1.732_050_807_568_877_2 - 2.0;

/// Truncation tolerance for the causal initialisation sum.
const HORIZON_TOL: f64 = 1e-12;

/// Pixels kept clear of each image edge during evaluation.
pub const DOMAIN_MARGIN_LO: f64 = 1.5;
pub const DOMAIN_MARGIN_HI: f64 = 2.5;

#[derive(Debug, Clone, PartialEq)]
pub struct SplineCoefficients {
    width: usize,
    height: usize,
    coeffs: Vec<f64>,
}

/// Convert an image to interpolating spline coefficients.
pub fn prefilter(image: &GrayImage) -> Result<SplineCoefficients> {
    SplineCoefficients::from_image(image.clone())
}

impl SplineCoefficients {
    /// Prefilter in place, reusing the image's pixel buffer.
    pub fn from_image(image: GrayImage) -> Result<Self> {
        let (width, height) = image.dims();
        if width < 4 || height < 4 {
            return Err(DicError::ImageTooSmall { width, height });
        }
        let mut coeffs = image.into_pixels();
        coeffs
            .par_chunks_mut(width)
            .for_each(|row| prefilter_line(row, POLE));
        prefilter_columns(&mut coeffs, width, height);
        Ok(Self {
            width,
            height,
            coeffs,
        })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// True when `(x, y)` lies in the safe evaluation window
    /// `[1.5, w - 2.5] x [1.5, h - 2.5]`.
    #[inline]
    pub fn in_domain(&self, x: f64, y: f64) -> bool {
        x >= DOMAIN_MARGIN_LO
            && y >= DOMAIN_MARGIN_LO
            && x <= self.width as f64 - DOMAIN_MARGIN_HI
            && y <= self.height as f64 - DOMAIN_MARGIN_HI
    }

    pub fn eval(&self, x: f64, y: f64) -> Result<f64> {
        if !self.in_domain(x, y) {
            return Err(DicError::OutOfDomain { x, y });
        }
        Ok(self.eval_with_grad_unchecked(x, y).0)
    }

    /// Analytic `(dI/dx, dI/dy)`.
    pub fn eval_grad(&self, x: f64, y: f64) -> Result<(f64, f64)> {
        if !self.in_domain(x, y) {
            return Err(DicError::OutOfDomain { x, y });
        }
        let (_, gx, gy) = self.eval_with_grad_unchecked(x, y);
        Ok((gx, gy))
    }

    /// Value and gradient without the domain check. The caller guarantees
    /// `1 <= x < w - 2` and `1 <= y < h - 2`.
    #[inline]
    pub fn eval_with_grad_unchecked(&self, x: f64, y: f64) -> (f64, f64, f64) {
        let ix = x.floor();
        let iy = y.floor();
        let (wx, dwx) = weights_and_derivs(x - ix);
        let (wy, dwy) = weights_and_derivs(y - iy);
        let x0 = ix as usize - 1;
        let y0 = iy as usize - 1;
        let mut v = 0.0;
        let mut gx = 0.0;
        let mut gy = 0.0;
        for j in 0..4 {
            let row = &self.coeffs[(y0 + j) * self.width + x0..][..4];
            let sx = row[0] * wx[0] + row[1] * wx[1] + row[2] * wx[2] + row[3] * wx[3];
            let sdx = row[0] * dwx[0] + row[1] * dwx[1] + row[2] * dwx[2] + row[3] * dwx[3];
            v += wy[j] * sx;
            gx += wy[j] * sdx;
            gy += dwy[j] * sx;
        }
        (v, gx, gy)
    }

    /// Evaluate anywhere, extending the coefficients by mirror symmetry.
    pub fn eval_mirror(&self, x: f64, y: f64) -> f64 {
        let ix = x.floor();
        let iy = y.floor();
        let (wx, _) = weights_and_derivs(x - ix);
        let (wy, _) = weights_and_derivs(y - iy);
        let (ix, iy) = (ix as i64, iy as i64);
        let mut v = 0.0;
        for (j, wyj) in wy.iter().enumerate() {
            let yy = mirror(iy - 1 + j as i64, self.height);
            let row = &self.coeffs[yy * self.width..(yy + 1) * self.width];
            let mut s = 0.0;
            for (i, wxi) in wx.iter().enumerate() {
                s += wxi * row[mirror(ix - 1 + i as i64, self.width)];
            }
            v += wyj * s;
        }
        v
    }

    /// Reconstruct the sample at an integer pixel (valid on the whole image).
    pub fn value_at_pixel(&self, x: usize, y: usize) -> f64 {
        const K: [f64; 3] = [1.0 / 6.0, 4.0 / 6.0, 1.0 / 6.0];
        let mut v = 0.0;
        for (j, kj) in K.iter().enumerate() {
            let yy = mirror(y as i64 - 1 + j as i64, self.height);
            for (i, ki) in K.iter().enumerate() {
                let xx = mirror(x as i64 - 1 + i as i64, self.width);
                v += kj * ki * self.coeffs[yy * self.width + xx];
            }
        }
        v
    }
}

/// Whole-sample symmetric extension of an index into `0..n`.
#[inline]
fn mirror(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Cubic b-spline weights for taps `i-1, i, i+1, i+2` at fractional offset
/// `t`, and their derivatives with respect to `t`.
#[inline]
fn weights_and_derivs(t: f64) -> ([f64; 4], [f64; 4]) {
    let t2 = t * t;
    let t3 = t2 * t;
    let s = 1.0 - t;
    let w = [
        s * s * s / 6.0,
        (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
        (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
        t3 / 6.0,
    ];
    let d = [
        -0.5 * s * s,
        1.5 * t2 - 2.0 * t,
        -1.5 * t2 + t + 0.5,
        0.5 * t2,
    ];
    (w, d)
}

fn horizon(z: f64) -> usize {
    (HORIZON_TOL.ln() / z.abs().ln()).ceil() as usize
}

/// Causal initial value `sum_k z^k c[k]` over the mirror-extended signal.
fn causal_init(line: &[f64], z: f64) -> f64 {
    let n = line.len();
    let h = horizon(z);
    if h < n {
        let mut zk = 1.0;
        let mut sum = 0.0;
        for &c in &line[..h] {
            sum += zk * c;
            zk *= z;
        }
        sum
    } else {
        let iz = 1.0 / z;
        let mut zn = z;
        let mut z2n = z.powi(n as i32 - 1);
        let mut sum = line[0] + z2n * line[n - 1];
        z2n *= z2n * iz;
        for &c in &line[1..n - 1] {
            sum += (zn + z2n) * c;
            zn *= z;
            z2n *= iz;
        }
        sum / (1.0 - zn * zn)
    }
}

/// In-place 1D prefilter of one contiguous line.
pub(crate) fn prefilter_line(line: &mut [f64], z: f64) {
    let n = line.len();
    if n < 2 {
        return;
    }
    let gain = (1.0 - z) * (1.0 - 1.0 / z);
    line.iter_mut().for_each(|v| *v *= gain);
    line[0] = causal_init(line, z);
    for k in 1..n {
        line[k] += z * line[k - 1];
    }
    line[n - 1] = (z / (z * z - 1.0)) * (line[n - 1] + z * line[n - 2]);
    for k in (0..n - 1).rev() {
        line[k] = z * (line[k + 1] - line[k]);
    }
}

/// Column pass: the same recursion run down the rows, vectorised across a
/// strip of columns. Strips are processed in parallel.
fn prefilter_columns(data: &mut [f64], width: usize, height: usize) {
    let strips = (rayon::current_num_threads() * 4).clamp(1, width.div_ceil(16).max(1));
    let strip_w = width.div_ceil(strips);
    let mut groups: Vec<Vec<&mut [f64]>> = (0..width.div_ceil(strip_w))
        .map(|_| Vec::with_capacity(height))
        .collect();
    for row in data.chunks_mut(width) {
        for (group, piece) in groups.iter_mut().zip(row.chunks_mut(strip_w)) {
            group.push(piece);
        }
    }
    groups
        .into_par_iter()
        .for_each(|mut rows| prefilter_strip(&mut rows, POLE));
}

fn prefilter_strip(rows: &mut [&mut [f64]], z: f64) {
    let n = rows.len();
    let m = rows[0].len();
    let gain = (1.0 - z) * (1.0 - 1.0 / z);
    for r in rows.iter_mut() {
        r.iter_mut().for_each(|v| *v *= gain);
    }
    // causal init, column by column
    let mut col = vec![0.0; n];
    let mut init = vec![0.0; m];
    let h = horizon(z);
    for (j, slot) in init.iter_mut().enumerate() {
        let len = if h < n { h } else { n };
        for (k, c) in col[..len].iter_mut().enumerate() {
            *c = rows[k][j];
        }
        if h < n {
            let mut zk = 1.0;
            let mut sum = 0.0;
            for &c in &col[..h] {
                sum += zk * c;
                zk *= z;
            }
            *slot = sum;
        } else {
            *slot = causal_init(&col, z);
        }
    }
    rows[0].copy_from_slice(&init);
    for k in 1..n {
        let (done, rest) = rows.split_at_mut(k);
        let prev = &done[k - 1];
        for (c, p) in rest[0].iter_mut().zip(prev.iter()) {
            *c += z * *p;
        }
    }
    {
        let (head, last) = rows.split_at_mut(n - 1);
        let before = &head[n - 2];
        let a = z / (z * z - 1.0);
        for (c, p) in last[0].iter_mut().zip(before.iter()) {
            *c = a * (*c + z * *p);
        }
    }
    for k in (0..n - 1).rev() {
        let (head, tail) = rows.split_at_mut(k + 1);
        let next = &tail[0];
        for (c, nx) in head[k].iter_mut().zip(next.iter()) {
            *c = z * (*nx - *c);
        }
    }
}
