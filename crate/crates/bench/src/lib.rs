//! Shared fixtures for the engine benchmarks.

use dic_core::synth::{deform_image, gen_speckle, DeformationFieldSpec};
use dic_core::GrayImage;

/// Speckled reference and a warped copy of it, both `size` square.
pub fn speckle_pair(size: usize, spec: &DeformationFieldSpec) -> (GrayImage, GrayImage) {
    let src = gen_speckle(size, size, 4.0, 0.5, 1).expect("speckle");
    let zero = DeformationFieldSpec::Translation { ux: 0.0, uy: 0.0 };
    let r = deform_image(&src, &zero, 2).expect("reference");
    let d = deform_image(&src, spec, 2).expect("deformed");
    (r, d)
}
