use dic_core::strain::StrainFormulation;
use dic_core::synth::{deform_image, gen_speckle, noise_floor, add_noise, DeformationFieldSpec, DEFAULT_SUPERSAMPLE};
use dic_core::{
    calculate_strain_field, correlate_2d, roi_exclude_border, DicParams, GrayImage, StrainBasis, StrainParams,
    SubsetStatus,
};

fn pair(w: usize, h: usize, seed: u64, spec: &DeformationFieldSpec) -> (GrayImage, GrayImage) {
    let src = gen_speckle(w, h, 4.0, 0.5, seed).unwrap();
    let zero = DeformationFieldSpec::Translation { ux: 0.0, uy: 0.0 };
    let r = deform_image(&src, &zero, DEFAULT_SUPERSAMPLE).unwrap();
    let d = deform_image(&src, spec, DEFAULT_SUPERSAMPLE).unwrap();
    (r, d)
}

fn params(threads: usize) -> DicParams {
    DicParams {
        threads,
        max_displacement: 16.0,
        ..DicParams::default()
    }
}

#[test]
fn subpixel_translation_recovered() {
    let spec = DeformationFieldSpec::Translation { ux: 0.25, uy: 0.4 };
    let (r, d) = pair(320, 300, 11, &spec);
    let roi = roi_exclude_border(r.dims(), 20).unwrap();
    let res = correlate_2d(&r, [("d", &d)], &roi, (160.0, 150.0), &params(1)).unwrap();
    let res = &res[0];
    let mut err = 0.0;
    let mut n = 0;
    for i in 0..res.len() {
        if res.status[i] == SubsetStatus::Converged {
            err += (res.u_x[i] - 0.25).abs() + (res.u_y[i] - 0.4).abs();
            n += 1;
        }
    }
    assert!(n as f64 >= 0.99 * res.grid.present_count() as f64);
    let mae = err / (2 * n) as f64;
    assert!(mae <= 0.02, "mean abs error {mae}");
}

#[test]
fn uniform_strain_end_to_end() {
    let (w, h) = (360, 300);
    let spec = DeformationFieldSpec::UniformStrain {
        exx: 0.01,
        eyy: 0.0,
        exy: 0.0,
        center: (w as f64 / 2.0, h as f64 / 2.0),
    };
    let (r, d) = pair(w, h, 12, &spec);
    let roi = roi_exclude_border(r.dims(), 20).unwrap();
    let res = correlate_2d(&r, [("d", &d)], &roi, (180.0, 150.0), &params(1)).unwrap();
    let res = &res[0];
    for i in 0..res.len() {
        if res.grid.is_present(i) {
            let (x, y) = res.grid.center_linear(i);
            let (ux, uy) = spec.displacement(x as f64, y as f64);
            assert!((res.u_x[i] - ux).abs() < 0.05 && (res.u_y[i] - uy).abs() < 0.05, "point {i}");
        }
    }
    let sp = StrainParams {
        window_points: 5,
        basis: StrainBasis::Bilinear,
        formulation: StrainFormulation::BiotRight,
    };
    let field = calculate_strain_field(res, &sp).unwrap();
    let mut checked = 0;
    for i in 0..field.len() {
        if field.valid[i] {
            assert!((field.strain[i][0] - 0.01).abs() <= 5e-4, "exx {}", field.strain[i][0]);
            assert!(field.strain[i][1].abs() <= 5e-4);
            checked += 1;
        }
    }
    assert!(checked > 10);
}

#[test]
fn noise_floor_falls_with_subset_size() {
    let src = gen_speckle(260, 260, 4.0, 0.5, 5).unwrap();
    let noisy = add_noise(&src, 4.0, 6).unwrap();
    let roi = roi_exclude_border(src.dims(), 20).unwrap();
    let mut last = f64::INFINITY;
    for size in [11, 21, 31] {
        let p = DicParams {
            subset_size: size,
            subset_step: 10,
            ..params(1)
        };
        let n = noise_floor(&src, &noisy, &roi, (130.0, 130.0), &p).unwrap();
        assert!(n < last, "subset {size}: {n} not below {last}");
        let again = noise_floor(&src, &noisy, &roi, (130.0, 130.0), &p).unwrap();
        assert_eq!(n.to_bits(), again.to_bits());
        last = n;
    }
    let p = DicParams { subset_step: 10, ..params(1) };
    assert!(noise_floor(&src, &src, &roi, (130.0, 130.0), &p).unwrap() < 1e-6);
}

#[test]
fn single_thread_runs_are_bit_identical() {
    let spec = DeformationFieldSpec::SinusoidalShear {
        base: (3.0, -2.0),
        amplitude: 1.5,
        period: 200.0,
    };
    let (r, d) = pair(240, 220, 21, &spec);
    let roi = roi_exclude_border(r.dims(), 15).unwrap();
    let run = || correlate_2d(&r, [("d", &d)], &roi, (120.0, 110.0), &params(1)).unwrap().remove(0);
    let (a, b) = (run(), run());
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.u_x), bits(&b.u_x));
    assert_eq!(bits(&a.u_y), bits(&b.u_y));
    assert_eq!(a.status, b.status);
}

#[test]
fn multi_thread_matches_single_thread() {
    let spec = DeformationFieldSpec::SinusoidalShear {
        base: (-4.0, 6.0),
        amplitude: 2.0,
        period: 300.0,
    };
    let (r, d) = pair(300, 260, 22, &spec);
    let roi = roi_exclude_border(r.dims(), 15).unwrap();
    let one = correlate_2d(&r, [("d", &d)], &roi, (150.0, 130.0), &params(1)).unwrap().remove(0);
    let four = correlate_2d(&r, [("d", &d)], &roi, (150.0, 130.0), &params(4)).unwrap().remove(0);
    for i in 0..one.len() {
        if one.status[i] == SubsetStatus::Converged && four.status[i] == SubsetStatus::Converged {
            assert!((one.u_x[i] - four.u_x[i]).abs() < 0.02 && (one.u_y[i] - four.u_y[i]).abs() < 0.02);
        }
    }
    assert_eq!(one.converged_count(), four.converged_count());
}
