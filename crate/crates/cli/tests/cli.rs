use std::path::Path;
use std::process::{Command, Output};

use dic_core::{write_pgm, GrayImage};

fn dic(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dic"))
        .current_dir(dir)
        .env_remove("DIC_NUM_THREADS")
        .args(args)
        .output()
        .expect("spawn dic")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Reference plus two shifted copies under `dir/img`.
fn fixture(dir: &Path) {
    for (ux, name) in [("0.5", "a"), ("-1.25", "b")] {
        let out = dic(
            dir,
            &["synth", "--width", "200", "--height", "180", "--rng-seed", "7", "--ux", ux, "--uy", "0.3", "--output", name],
        );
        ok(&out);
    }
    std::fs::create_dir_all(dir.join("img")).unwrap();
    std::fs::copy(dir.join("a/ref.pgm"), dir.join("img/ref.pgm")).unwrap();
    std::fs::copy(dir.join("a/def_0001.pgm"), dir.join("img/def_0001.pgm")).unwrap();
    std::fs::copy(dir.join("b/def_0001.pgm"), dir.join("img/def_0002.pgm")).unwrap();
}

#[test]
fn dic2d_writes_one_file_per_image() {
    let t = tempfile::tempdir().unwrap();
    fixture(t.path());
    let out = dic(
        t.path(),
        &[
            "dic2d", "--ref", "img/ref.pgm", "--def", "img/def_*.pgm", "--roi-border", "20", "--seed", "100,90",
            "--subset-size", "31", "--subset-step", "15", "--output", "res", "--threads", "1",
        ],
    );
    ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("def_0001.pgm") && stdout.contains("converged") && stdout.contains("mean ZNCC"));
    let mut names: Vec<String> = std::fs::read_dir(t.path().join("res"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names, vec!["dic_results_def_0001.csv", "dic_results_def_0002.csv", "run_config.yaml"]);

    let imp = dic_core::import_2d(&t.path().join("res/dic_results_*").display().to_string(), false, ',').unwrap();
    assert_eq!(imp.u_x.dim().0, 2);
    let n = imp.results[1].len();
    let mean = imp.u_x.index_axis(ndarray::Axis(0), 1).iter().sum::<f64>() / n as f64;
    assert!((mean + 1.25).abs() < 0.02, "mean u_x {mean}");

    let out = dic(t.path(), &["strain", "--data", "res/dic_results_*", "--window-points", "5", "--basis", "biquadratic", "--formulation", "hencky", "--output", "st"]);
    ok(&out);
    assert!(t.path().join("st/strain_def_0001.csv").exists());
    assert!(t.path().join("st/strain_def_0002.csv").exists());
    let cfg = std::fs::read_to_string(t.path().join("st/run_config.yaml")).unwrap();
    assert!(cfg.contains("formulation: hencky") && cfg.contains("window_points: 5"));
}

#[test]
fn missing_seed_is_a_config_error() {
    let t = tempfile::tempdir().unwrap();
    fixture(t.path());
    let out = dic(t.path(), &["dic2d", "--ref", "img/ref.pgm", "--def", "img/def_*.pgm"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--seed"));
    let out = dic(t.path(), &["dic2d", "--ref", "img/ref.pgm", "--def", "img/nothing_*.pgm", "--seed", "1,1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = dic(t.path(), &["dic2d", "--ref", "img/ref.pgm", "--def", "img/def_*.pgm", "--seed", "1,1", "--subset-size", "30"]);
    assert_eq!(out.status.code(), Some(2));
    let out = dic(t.path(), &["dic2d", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn seed_on_flat_patch_is_a_correlation_failure() {
    let t = tempfile::tempdir().unwrap();
    fixture(t.path());
    let src = dic_core::load_image(t.path().join("img/ref.pgm")).unwrap();
    let flat = GrayImage::from_fn(200, 180, 8, |x, y| if x < 80 && y < 80 { 120.0 } else { src.get(x, y) }).unwrap();
    write_pgm(&flat, t.path().join("flat.pgm")).unwrap();
    let out = dic(
        t.path(),
        &["dic2d", "--ref", "flat.pgm", "--def", "flat.pgm", "--roi-border", "10", "--seed", "40,40", "--subset-size", "21", "--output", "r"],
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn yaml_and_flags_resolve_identically() {
    let t = tempfile::tempdir().unwrap();
    fixture(t.path());
    let yaml = "version: 1\ncommand: dic2d\nreference: img/ref.pgm\ndeformed: img/def_*.pgm\nroi_border: 20\nseed: [100, 90]\nsubset_size: 25\nsubset_step: 12\nshape: quadratic\nthreads: 1\noutput: out\n";
    std::fs::write(t.path().join("cfg.yaml"), yaml).unwrap();
    ok(&dic(t.path(), &["dic2d", "--config", "cfg.yaml"]));
    let from_yaml = std::fs::read(t.path().join("out/run_config.yaml")).unwrap();
    let from_yaml_csv = std::fs::read(t.path().join("out/dic_results_def_0001.csv")).unwrap();
    std::fs::remove_dir_all(t.path().join("out")).unwrap();
    ok(&dic(
        t.path(),
        &[
            "dic2d", "--ref", "img/ref.pgm", "--def", "img/def_*.pgm", "--roi-border", "20", "--seed", "100,90",
            "--subset-size", "25", "--subset-step", "12", "--shape", "quadratic", "--threads", "1", "--output", "out",
        ],
    ));
    assert_eq!(from_yaml, std::fs::read(t.path().join("out/run_config.yaml")).unwrap());
    assert_eq!(from_yaml_csv, std::fs::read(t.path().join("out/dic_results_def_0001.csv")).unwrap());

    // flags override the file, and the echoed config can be fed back in
    ok(&dic(t.path(), &["dic2d", "--config", "cfg.yaml", "--subset-step", "10", "--output", "o2"]));
    let echoed = std::fs::read_to_string(t.path().join("o2/run_config.yaml")).unwrap();
    assert!(echoed.contains("subset_step: 10") && echoed.contains("subset_size: 25"));
    ok(&dic(t.path(), &["dic2d", "--config", "o2/run_config.yaml", "--output", "o3"]));
    let again = std::fs::read_to_string(t.path().join("o3/run_config.yaml")).unwrap();
    assert_eq!(echoed.replace("output: o2", "output: o3"), again);

    std::fs::write(t.path().join("bad.yaml"), "subset_sise: 3\n").unwrap();
    assert_eq!(dic(t.path(), &["dic2d", "--config", "bad.yaml"]).status.code(), Some(2));
}

#[test]
fn binary_output_is_reproducible_single_threaded() {
    let t = tempfile::tempdir().unwrap();
    fixture(t.path());
    let args = |o: &'static str| {
        vec![
            "dic2d", "--ref", "img/ref.pgm", "--def", "img/def_0002.pgm", "--roi-border", "20", "--seed", "100,90",
            "--threads", "1", "--binary", "--output", o,
        ]
    };
    ok(&dic(t.path(), &args("x")));
    ok(&dic(t.path(), &args("y")));
    let a = std::fs::read(t.path().join("x/dic_results_def_0002.bin")).unwrap();
    let b = std::fs::read(t.path().join("y/dic_results_def_0002.bin")).unwrap();
    assert_eq!(a, b);
    assert_eq!(&a[..8], b"DICF2D\0\0");
}

#[test]
fn thread_env_is_default_but_flag_wins() {
    let t = tempfile::tempdir().unwrap();
    fixture(t.path());
    let base = ["dic2d", "--ref", "img/ref.pgm", "--def", "img/def_0001.pgm", "--seed", "100,90", "--roi-border", "20"];
    let run = |extra: &[&str], out: &str| {
        let mut args: Vec<&str> = base.to_vec();
        args.extend_from_slice(extra);
        args.extend_from_slice(&["--output", out]);
        let o = Command::new(env!("CARGO_BIN_EXE_dic"))
            .current_dir(t.path())
            .env("DIC_NUM_THREADS", "3")
            .args(&args)
            .output()
            .unwrap();
        ok(&o);
        std::fs::read_to_string(t.path().join(out).join("run_config.yaml")).unwrap()
    };
    assert!(run(&[], "e").contains("threads: 3"));
    assert!(run(&["--threads", "2"], "f").contains("threads: 2"));
}

#[test]
fn metrology_on_synthetic_star() {
    let t = tempfile::tempdir().unwrap();
    ok(&dic(
        t.path(),
        &[
            "synth", "--width", "400", "--height", "120", "--field", "star", "--amplitude", "0.5", "--period-left", "12",
            "--period-right", "120", "--noise", "2", "--rng-seed", "3", "--output", "star",
        ],
    ));
    let out = dic(
        t.path(),
        &[
            "metrology", "--ref", "star/ref.pgm", "--ref-noisy", "star/ref_noisy.pgm", "--def", "star/def_0001.pgm",
            "--roi-border", "5", "--seed", "300,60", "--subset-sizes", "11,15,21", "--subset-step", "3",
            "--period-left", "12", "--period-right", "120", "--threads", "1", "--output", "m",
        ],
    );
    ok(&out);
    let table = std::fs::read_to_string(t.path().join("m/metrology.csv")).unwrap();
    assert!(table.starts_with("subset_size,noise,l10,mei\n"));
    assert_eq!(table.lines().filter(|l| !l.starts_with('#')).count(), 4);
    assert!(table.contains("# mei_summary="));
}
