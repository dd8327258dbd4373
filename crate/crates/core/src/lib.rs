//! Subset-based 2D digital image correlation.
//!
//! Multi-window FFT cross-correlation seeds a reliability-guided
//! Levenberg-Marquardt refinement on a b-spline interpolated deformed image;
//! strain is fitted to the displacement field afterwards.

pub mod error;
pub mod fftcc;
pub mod grid;
pub mod image;
pub mod interp;
pub mod optimizer;
pub mod params;
pub mod results_io;
pub mod rgdic;
pub mod roi;
pub mod strain;
pub mod synth;

pub use error::{DicError, Result};
pub use fftcc::{fftcc_window, multiwindow_displacement, plan_window_pyramid, InitField, WindowPyramid};
pub use grid::{build_subset_grid, GridIndex, SubsetGrid};
pub use image::{load_image, write_pgm, GrayImage};
pub use interp::{prefilter, SplineCoefficients};
pub use optimizer::{lm_minimize, ShapeParams, SubsetResult, SubsetStatus};
pub use params::{CostKind, DicParams, Method, ShapeKind};
pub use results_io::{import_2d, import_strain, DicImport, StrainImport};
pub use rgdic::{correlate_2d, correlate_image, DicResult};
pub use roi::{roi_exclude_border, Rect, RoiMask};
pub use strain::{calculate_strain_field, StrainBasis, StrainField, StrainFormulation, StrainParams};
pub use synth::{add_noise, deform_image, gen_speckle, star_field, DeformationFieldSpec, PeriodMap};
