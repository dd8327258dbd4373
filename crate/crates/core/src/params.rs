//! Correlation configuration.

use std::fmt;
use std::str::FromStr;

use crate::error::{DicError, Result};

/// Matching criterion minimised per subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CostKind {
    Ssd,
    Nssd,
    #[default]
    Znssd,
}

/// Subset shape function order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ShapeKind {
    Rigid,
    #[default]
    Affine,
    Quadratic,
}

impl ShapeKind {
    pub fn param_count(self) -> usize {
        match self {
            ShapeKind::Rigid => 2,
            ShapeKind::Affine => 6,
            ShapeKind::Quadratic => 12,
        }
    }
}

/// Whether the multi-window FFT estimate is the final answer or only the
/// starting point for reliability-guided optimisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Method {
    Multiwindow,
    #[default]
    MultiwindowRg,
}

macro_rules! keyword_enum {
    ($ty:ty, $what:literal, $( $variant:path => $name:literal ),+ $(,)?) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $( $variant => $name ),+ }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
        impl FromStr for $ty {
            type Err = DicError;
            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $( $name => Ok($variant), )+
                    _ => Err(DicError::InvalidParameter(format!(
                        concat!("unknown ", $what, " {:?}"), s
                    ))),
                }
            }
        }
    };
}

pub(crate) use keyword_enum;

keyword_enum!(CostKind, "cost", CostKind::Ssd => "ssd", CostKind::Nssd => "nssd", CostKind::Znssd => "znssd");
keyword_enum!(ShapeKind, "shape function", ShapeKind::Rigid => "rigid", ShapeKind::Affine => "affine", ShapeKind::Quadratic => "quadratic");
keyword_enum!(Method, "method", Method::Multiwindow => "multiwindow", Method::MultiwindowRg => "multiwindow_rg");

/// Full correlation configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct DicParams {
    /// Odd edge length of the square subset, pixels.
    pub subset_size: usize,
    /// Grid spacing between subset centers, pixels.
    pub subset_step: usize,
    /// Upper bound on expected displacement; sizes the FFT window pyramid.
    pub max_displacement: f64,
    pub cost: CostKind,
    pub shape: ShapeKind,
    pub method: Method,
    pub max_iterations: usize,
    /// Convergence threshold on the scaled parameter update, pixels.
    pub update_precision: f64,
    /// Minimum ZNCC for a subset to count as converged.
    pub zncc_accept_threshold: f64,
    pub threads: usize,
    /// Outlier multiplier for the MAD filter between pyramid levels.
    pub mad_k: f64,
    pub mad_enabled: bool,
    /// Replace displacements of unconverged points with NaN.
    pub nan_unconverged: bool,
}

impl Default for DicParams {
    fn default() -> Self {
        Self {
            subset_size: 31,
            subset_step: 15,
            max_displacement: 128.0,
            cost: CostKind::Znssd,
            shape: ShapeKind::Affine,
            method: Method::MultiwindowRg,
            max_iterations: 40,
            update_precision: 0.01,
            zncc_accept_threshold: 0.70,
            threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
            mad_k: 3.0,
            mad_enabled: true,
            nan_unconverged: false,
        }
    }
}

impl DicParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DicError::InvalidParameter(m));
        if self.subset_size < 5 || self.subset_size % 2 == 0 {
            return bad(format!("subset_size must be odd and >= 5, got {}", self.subset_size));
        }
        if self.subset_step == 0 {
            return bad("subset_step must be >= 1".into());
        }
        if !(self.max_displacement >= 0.0) || !self.max_displacement.is_finite() {
            return bad(format!("max_displacement must be >= 0, got {}", self.max_displacement));
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be >= 1".into());
        }
        if self.threads == 0 {
            return bad("threads must be >= 1".into());
        }
        if !(self.update_precision > 0.0) {
            return bad(format!("update_precision must be > 0, got {}", self.update_precision));
        }
        if !(-1.0..=1.0).contains(&self.zncc_accept_threshold) {
            return bad(format!(
                "zncc_accept_threshold must lie in [-1, 1], got {}",
                self.zncc_accept_threshold
            ));
        }
        if !(self.mad_k > 0.0) {
            return bad(format!("mad_k must be > 0, got {}", self.mad_k));
        }
        Ok(())
    }

    pub fn half_width(&self) -> usize {
        (self.subset_size - 1) / 2
    }
}
