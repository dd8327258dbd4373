use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use dic_bench::speckle_pair;
use dic_core::optimizer::SubsetData;
use dic_core::synth::DeformationFieldSpec;
use dic_core::{correlate_2d, fftcc_window, lm_minimize, prefilter, roi_exclude_border, DicParams, ShapeParams};

fn shift() -> DeformationFieldSpec {
    DeformationFieldSpec::Translation { ux: 2.3, uy: -1.6 }
}

fn window(img: &dic_core::GrayImage, x0: usize, y0: usize, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * n);
    for y in y0..y0 + n {
        for x in x0..x0 + n {
            out.push(img.get(x, y));
        }
    }
    out
}

fn bench_fftcc(c: &mut Criterion) {
    let (r, d) = speckle_pair(160, &shift());
    let mut g = c.benchmark_group("fftcc_window");
    for n in [32, 64, 128] {
        let (f, h) = (window(&r, 16, 16, n), window(&d, 16, 16, n));
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, &n| {
            b.iter(|| fftcc_window(black_box(&f), black_box(&h), n).unwrap())
        });
    }
    g.finish();
}

fn bench_spline(c: &mut Criterion) {
    let (r, _) = speckle_pair(512, &shift());
    c.bench_function("prefilter_512", |b| b.iter(|| prefilter(black_box(&r)).unwrap()));
    let coeffs = prefilter(&r).unwrap();
    c.bench_function("eval_grad_10k", |b| {
        b.iter(|| {
            let mut s = 0.0;
            for i in 0..10_000 {
                let t = i as f64 * 0.037;
                s += coeffs.eval_grad(20.0 + t % 400.0, 30.0 + (t * 1.3) % 400.0).unwrap().0;
            }
            s
        })
    });
}

fn bench_lm(c: &mut Criterion) {
    let (r, d) = speckle_pair(200, &shift());
    let coeffs = prefilter(&d).unwrap();
    let params = DicParams::default();
    let subset = SubsetData::from_image(&r, (100, 100), params.subset_size).unwrap();
    let init = ShapeParams::translation(params.shape, 2.0, -2.0);
    c.bench_function("lm_affine_31", |b| {
        b.iter(|| lm_minimize(black_box(&subset), &coeffs, &init, &params))
    });
}

fn bench_pipeline(c: &mut Criterion) {
    let (r, d) = speckle_pair(400, &shift());
    let roi = roi_exclude_border(r.dims(), 20).unwrap();
    let params = DicParams {
        threads: 1,
        max_displacement: 8.0,
        ..DicParams::default()
    };
    let mut g = c.benchmark_group("correlate_2d");
    g.sample_size(10);
    g.bench_function("400px_step15", |b| {
        b.iter(|| correlate_2d(&r, [("d", &d)], &roi, (200.0, 200.0), &params).unwrap())
    });
    g.finish();
}

criterion_group!(benches, bench_fftcc, bench_spline, bench_lm, bench_pipeline);
criterion_main!(benches);
