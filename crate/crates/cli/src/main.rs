mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use config::*;
use dic_core::results_io::{self, glob_sorted};
use dic_core::strain::calculate_strain_field;
use dic_core::synth::{self, DeformationFieldSpec, PeriodMap};
use dic_core::{
    build_subset_grid, correlate_image, load_image, write_pgm, DicError, DicParams, GrayImage, Method, Rect, RoiMask,
};

const EXIT_CONFIG: u8 = 2;
const EXIT_CORRELATION: u8 = 3;

#[derive(Parser)]
#[command(name = "dic", version, about = "Subset-based 2D digital image correlation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Correlate deformed images against a reference and write displacement fields.
    Dic2d(Dic2dArgs),
    /// Compute strain fields from displacement result files.
    Strain(StrainArgs),
    /// Generate a synthetic speckle reference and a warped copy.
    Synth(SynthArgs),
    /// Noise floor, spatial resolution and MEI over a sweep of subset sizes.
    Metrology(MetrologyArgs),
}

#[derive(Args, Default)]
struct CommonArgs {
    /// YAML configuration file; flags take precedence over its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    output: Option<PathBuf>,
    /// error, warn, info, debug or trace.
    #[arg(long)]
    log_level: Option<String>,
}

#[derive(Args, Default)]
struct RoiArgs {
    /// Mask image; nonzero pixels are inside the region of interest.
    #[arg(long)]
    roi_mask: Option<PathBuf>,
    /// Exclude a border of this many pixels.
    #[arg(long)]
    roi_border: Option<usize>,
    /// Include the rectangle x0,y0,x1,y1 (half-open); repeatable.
    #[arg(long = "roi-rect", value_parser = parse_rect)]
    roi_rects: Vec<[usize; 4]>,
}

#[derive(Args, Default)]
struct EngineArgs {
    #[arg(long)]
    subset_size: Option<usize>,
    #[arg(long)]
    subset_step: Option<usize>,
    #[arg(long)]
    max_displacement: Option<f64>,
    /// ssd, nssd or znssd.
    #[arg(long)]
    cost: Option<String>,
    /// rigid, affine or quadratic.
    #[arg(long)]
    shape: Option<String>,
    /// multiwindow or multiwindow_rg.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    update_precision: Option<f64>,
    #[arg(long)]
    zncc_threshold: Option<f64>,
    /// Worker threads (default: $DIC_NUM_THREADS, else all cores).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    mad_k: Option<f64>,
    /// Enable the MAD outlier filter between window levels.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    mad: Option<bool>,
    /// Write NaN displacements at unconverged points.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    nan_unconverged: Option<bool>,
}

#[derive(Args)]
struct Dic2dArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Reference image.
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    /// Glob of deformed images, processed in lexicographic order.
    #[arg(long = "def")]
    deformed: Option<String>,
    #[command(flatten)]
    roi: RoiArgs,
    /// Seed point x,y for reliability-guided propagation.
    #[arg(long, value_parser = parse_pair)]
    seed: Option<[f64; 2]>,
    #[command(flatten)]
    engine: EngineArgs,
    /// Write the binary format instead of CSV.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    binary: Option<bool>,
    #[arg(long)]
    delimiter: Option<char>,
}

#[derive(Args)]
struct StrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Glob of displacement result files.
    #[arg(long)]
    data: Option<String>,
    /// The result files are binary.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    binary: Option<bool>,
    #[arg(long)]
    window_points: Option<usize>,
    /// bilinear or biquadratic.
    #[arg(long)]
    basis: Option<String>,
    /// green_lagrange, hencky, euler_almansi, biot_right or biot_left.
    #[arg(long)]
    formulation: Option<String>,
    #[arg(long)]
    delimiter: Option<char>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    /// Mean speckle diameter, pixels.
    #[arg(long)]
    diameter: Option<f64>,
    #[arg(long)]
    density: Option<f64>,
    #[arg(long)]
    rng_seed: Option<u64>,
    /// translation, uniform_strain, radial_stretch, star or sinusoidal_shear.
    #[arg(long)]
    field: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    ux: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    uy: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    exx: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    eyy: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    exy: Option<f64>,
    /// Radial stretch: outward motion of the nearest image edge, pixels.
    #[arg(long, allow_hyphen_values = true)]
    extension: Option<f64>,
    #[arg(long)]
    amplitude: Option<f64>,
    /// Sinusoidal shear period, pixels.
    #[arg(long)]
    period: Option<f64>,
    /// Star period at the left edge, pixels.
    #[arg(long)]
    period_left: Option<f64>,
    /// Star period at the right edge, pixels.
    #[arg(long)]
    period_right: Option<f64>,
    /// Gaussian noise (gray levels) added to ref_noisy and the deformed image.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    supersample: Option<usize>,
}

#[derive(Args)]
struct MetrologyArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    #[arg(long = "ref-noisy")]
    reference_noisy: Option<PathBuf>,
    #[arg(long = "def")]
    deformed: Option<PathBuf>,
    #[command(flatten)]
    roi: RoiArgs,
    #[arg(long, value_parser = parse_pair)]
    seed: Option<[f64; 2]>,
    /// Comma-separated subset sizes.
    #[arg(long, value_delimiter = ',')]
    subset_sizes: Vec<usize>,
    #[arg(long)]
    period_left: Option<f64>,
    #[arg(long)]
    period_right: Option<f64>,
    /// Row of the displacement crest (default: middle row).
    #[arg(long)]
    y_mid: Option<f64>,
    #[command(flatten)]
    engine: EngineArgs,
    #[arg(long)]
    delimiter: Option<char>,
}

fn parse_pair(s: &str) -> Result<[f64; 2], String> {
    let v: Vec<&str> = s.split(',').collect();
    match v.as_slice() {
        [a, b] => Ok([
            a.trim().parse().map_err(|_| format!("bad number {a:?}"))?,
            b.trim().parse().map_err(|_| format!("bad number {b:?}"))?,
        ]),
        _ => Err(format!("expected x,y, got {s:?}")),
    }
}

fn parse_rect(s: &str) -> Result<[usize; 4], String> {
    let v = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| format!("bad integer {p:?}")))
        .collect::<Result<Vec<_>, _>>()?;
    v.try_into().map_err(|_| format!("expected x0,y0,x1,y1, got {s:?}"))
}

/// A failure and the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let error = e.into();
        let code = match error.downcast_ref::<DicError>() {
            Some(
                DicError::SeedFailed { .. }
                | DicError::AllInvalid
                | DicError::DegenerateSpectrum
                | DicError::DegenerateSubset
                | DicError::FitFailed
                | DicError::OutOfDomain { .. }
                | DicError::NoCrossing
                | DicError::RankDeficient
                | DicError::SingularDeformation
                | DicError::GridTooSmall { .. },
            ) => EXIT_CORRELATION,
            _ => EXIT_CONFIG,
        };
        Failure { code, error }
    }
}

fn correlation_failure(e: impl Into<anyhow::Error>) -> Failure {
    Failure { code: EXIT_CORRELATION, error: e.into() }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Dic2d(a) => {
            let file = load_file(&a.common)?;
            let cfg = resolve_dic2d(a, file)?;
            init_logging(&cfg.log_level)?;
            run_dic2d(&cfg)
        }
        Command::Strain(a) => {
            let file = load_file(&a.common)?;
            let cfg = resolve_strain(a, file)?;
            init_logging(&cfg.log_level)?;
            run_strain(&cfg)
        }
        Command::Synth(a) => {
            let file = load_file(&a.common)?;
            let cfg = resolve_synth(a, file)?;
            init_logging(&cfg.log_level)?;
            run_synth(&cfg)
        }
        Command::Metrology(a) => {
            let file = load_file(&a.common)?;
            let cfg = resolve_metrology(a, file)?;
            init_logging(&cfg.log_level)?;
            run_metrology(&cfg)
        }
    }
}

fn load_file(common: &CommonArgs) -> anyhow::Result<FileConfig> {
    match &common.config {
        Some(p) => FileConfig::load(p),
        None => Ok(FileConfig::default()),
    }
}

fn init_logging(level: &str) -> anyhow::Result<()> {
    let filter: log::LevelFilter = level.parse().map_err(|_| anyhow!("unknown log level {level:?}"))?;
    let _ = env_logger::Builder::new().filter_level(filter).format_timestamp(None).try_init();
    Ok(())
}

fn resolve_engine(a: EngineArgs, f: &mut FileConfig) -> anyhow::Result<EngineConfig> {
    let d = DicParams::default();
    let threads = match pick_opt(a.threads, f.threads) {
        Some(n) => n,
        None => default_threads()?,
    };
    let cfg = EngineConfig {
        subset_size: pick(a.subset_size, f.subset_size, d.subset_size),
        subset_step: pick(a.subset_step, f.subset_step, d.subset_step),
        max_displacement: pick(a.max_displacement, f.max_displacement, d.max_displacement),
        cost: pick(a.cost, f.cost.take(), d.cost.to_string()).to_ascii_lowercase(),
        shape: pick(a.shape, f.shape.take(), d.shape.to_string()).to_ascii_lowercase(),
        method: pick(a.method, f.method.take(), d.method.to_string()).to_ascii_lowercase(),
        max_iterations: pick(a.max_iterations, f.max_iterations, d.max_iterations),
        update_precision: pick(a.update_precision, f.update_precision, d.update_precision),
        zncc_threshold: pick(a.zncc_threshold, f.zncc_threshold, d.zncc_accept_threshold),
        threads,
        mad_k: pick(a.mad_k, f.mad_k, d.mad_k),
        mad: pick(a.mad, f.mad, d.mad_enabled),
        nan_unconverged: pick(a.nan_unconverged, f.nan_unconverged, d.nan_unconverged),
    };
    cfg.params()?;
    Ok(cfg)
}

fn resolve_roi(a: RoiArgs, f: &mut FileConfig) -> anyhow::Result<RoiSource> {
    let rects = (!a.roi_rects.is_empty()).then_some(a.roi_rects);
    let from_flags = RoiSource::resolve(a.roi_mask, a.roi_border, rects)?;
    let flat = RoiSource::resolve(f.roi_mask.take(), f.roi_border, f.roi_rects.take())?;
    if flat.is_some() && f.roi.is_some() {
        bail!("config gives both a roi block and roi_* keys");
    }
    let from_file = f.roi.take().or(flat);
    Ok(from_flags.or(from_file).unwrap_or(RoiSource::All))
}

fn required<T>(v: Option<T>, flag: &str) -> anyhow::Result<T> {
    v.ok_or_else(|| anyhow!("missing required {flag}"))
}

fn log_level(common: &mut CommonArgs, f: &mut FileConfig) -> String {
    pick(common.log_level.take(), f.log_level.take(), "info".into())
}

fn output_dir(common: &mut CommonArgs, f: &mut FileConfig) -> PathBuf {
    pick(common.output.take(), f.output.take(), PathBuf::from("."))
}

fn resolve_dic2d(mut a: Dic2dArgs, mut f: FileConfig) -> anyhow::Result<Dic2dConfig> {
    f.check_command("dic2d")?;
    let engine = resolve_engine(a.engine, &mut f)?;
    let seed = pick_opt(a.seed, f.seed);
    if engine.method == Method::MultiwindowRg.as_str() && seed.is_none() {
        bail!("missing required --seed (needed by method {})", engine.method);
    }
    Ok(Dic2dConfig {
        version: CONFIG_VERSION,
        command: "dic2d".into(),
        reference: required(pick_opt(a.reference, f.reference.take()), "--ref")?,
        deformed: required(pick_opt(a.deformed, f.deformed.take()), "--def")?,
        roi: resolve_roi(a.roi, &mut f)?,
        seed,
        engine,
        output: output_dir(&mut a.common, &mut f),
        binary: pick(a.binary, f.binary, false),
        delimiter: pick(a.delimiter, f.delimiter, ','),
        log_level: log_level(&mut a.common, &mut f),
    })
}

fn resolve_strain(mut a: StrainArgs, mut f: FileConfig) -> anyhow::Result<StrainConfig> {
    f.check_command("strain")?;
    let d = dic_core::StrainParams::default();
    let cfg = StrainConfig {
        version: CONFIG_VERSION,
        command: "strain".into(),
        data: required(pick_opt(a.data, f.data.take()), "--data")?,
        binary: pick(a.binary, f.binary, false),
        window_points: pick(a.window_points, f.window_points, d.window_points),
        basis: pick(a.basis, f.basis.take(), d.basis.to_string()).to_ascii_lowercase(),
        formulation: pick(a.formulation, f.formulation.take(), d.formulation.to_string()).to_ascii_lowercase(),
        output: output_dir(&mut a.common, &mut f),
        delimiter: pick(a.delimiter, f.delimiter, ','),
        log_level: log_level(&mut a.common, &mut f),
    };
    cfg.params()?;
    Ok(cfg)
}

fn resolve_synth(mut a: SynthArgs, mut f: FileConfig) -> anyhow::Result<SynthConfig> {
    f.check_command("synth")?;
    let width = pick(a.width, f.width, 500);
    Ok(SynthConfig {
        version: CONFIG_VERSION,
        command: "synth".into(),
        width,
        height: pick(a.height, f.height, 500),
        diameter: pick(a.diameter, f.diameter, 4.0),
        density: pick(a.density, f.density, 0.5),
        rng_seed: pick(a.rng_seed, f.rng_seed, 0),
        field: pick(a.field, f.field.take(), "translation".into()).to_ascii_lowercase(),
        ux: pick(a.ux, f.ux, 0.0),
        uy: pick(a.uy, f.uy, 0.0),
        exx: pick(a.exx, f.exx, 0.0),
        eyy: pick(a.eyy, f.eyy, 0.0),
        exy: pick(a.exy, f.exy, 0.0),
        extension: pick(a.extension, f.extension, 0.0),
        amplitude: pick(a.amplitude, f.amplitude, 0.5),
        period: pick(a.period, f.period, 200.0),
        period_left: pick(a.period_left, f.period_left, 10.0),
        period_right: pick(a.period_right, f.period_right, 150.0),
        noise: pick(a.noise, f.noise, 0.0),
        supersample: pick(a.supersample, f.supersample, synth::DEFAULT_SUPERSAMPLE),
        output: output_dir(&mut a.common, &mut f),
        log_level: log_level(&mut a.common, &mut f),
    })
}

fn resolve_metrology(mut a: MetrologyArgs, mut f: FileConfig) -> anyhow::Result<MetrologyConfig> {
    f.check_command("metrology")?;
    let engine = resolve_engine(a.engine, &mut f)?;
    let sizes = if a.subset_sizes.is_empty() { f.subset_sizes.take() } else { Some(a.subset_sizes) };
    let sizes = sizes.unwrap_or_else(|| vec![11, 15, 19, 21, 25, 31]);
    if sizes.len() < 3 {
        bail!("--subset-sizes needs at least three entries");
    }
    Ok(MetrologyConfig {
        version: CONFIG_VERSION,
        command: "metrology".into(),
        reference: required(pick_opt(a.reference, f.reference.take()), "--ref")?,
        reference_noisy: required(pick_opt(a.reference_noisy, f.reference_noisy.take()), "--ref-noisy")?,
        deformed: required(pick_opt(a.deformed, f.deformed.take().map(PathBuf::from)), "--def")?,
        roi: resolve_roi(a.roi, &mut f)?,
        seed: required(pick_opt(a.seed, f.seed), "--seed")?,
        subset_sizes: sizes,
        period_left: pick(a.period_left, f.period_left, 10.0),
        period_right: pick(a.period_right, f.period_right, 150.0),
        y_mid: pick_opt(a.y_mid, f.y_mid),
        engine,
        output: output_dir(&mut a.common, &mut f),
        delimiter: pick(a.delimiter, f.delimiter, ','),
        log_level: log_level(&mut a.common, &mut f),
    })
}

fn build_roi(source: &RoiSource, dims: (usize, usize)) -> anyhow::Result<RoiMask> {
    Ok(match source {
        RoiSource::All => RoiMask::all(dims.0, dims.1),
        RoiSource::Mask { path } => {
            let m = RoiMask::load(path)?;
            if m.dims() != dims {
                bail!("ROI mask {} is {:?}, reference is {:?}", path.display(), m.dims(), dims);
            }
            m
        }
        RoiSource::Border { border } => dic_core::roi_exclude_border(dims, *border)?,
        RoiSource::Rects { rects } => {
            let rects: Vec<Rect> = rects.iter().map(|r| Rect { x0: r[0], y0: r[1], x1: r[2], y1: r[3] }).collect();
            RoiMask::from_rects(dims, &rects)
        }
    })
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn file_label(path: &Path) -> String {
    path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn run_dic2d(cfg: &Dic2dConfig) -> Outcome {
    let params = cfg.engine.params()?;
    let reference = load_image(&cfg.reference)?;
    let files = glob_sorted(&cfg.deformed)?;
    let roi = build_roi(&cfg.roi, reference.dims())?;
    let grid = build_subset_grid(&roi, params.subset_size, params.subset_step)?;
    create_dir(&cfg.output)?;
    write_run_config(cfg, &cfg.output)?;
    let seed = cfg.seed.map_or((0.0, 0.0), |s| (s[0], s[1]));
    for path in &files {
        let deformed = load_image(path)?;
        if deformed.dims() != reference.dims() {
            return Err(DicError::DimensionMismatch(format!(
                "{} is {:?}, reference is {:?}",
                path.display(),
                deformed.dims(),
                reference.dims()
            ))
            .into());
        }
        let label = file_label(path);
        let start = Instant::now();
        let result = correlate_image(&reference, &deformed, &label, &grid, seed, &params)
            .with_context(|| format!("correlating {}", path.display()))
            .map_err(correlation_failure)?;
        drop(deformed);
        let out = if cfg.binary {
            results_io::write_dic_binary(&result, &cfg.output)?
        } else {
            results_io::write_dic_csv(&result, &cfg.output, cfg.delimiter)?
        };
        let points = grid.present_count();
        println!(
            "{label}: {points} points, {:.2}% converged, mean ZNCC {:.4}, {:.2} s -> {}",
            100.0 * result.converged_count() as f64 / points.max(1) as f64,
            result.mean_zncc(),
            start.elapsed().as_secs_f64(),
            out.display()
        );
    }
    Ok(())
}

fn run_strain(cfg: &StrainConfig) -> Outcome {
    let params = cfg.params()?;
    let files = glob_sorted(&cfg.data)?;
    create_dir(&cfg.output)?;
    write_run_config(cfg, &cfg.output)?;
    for path in &files {
        let result = if cfg.binary {
            results_io::read_dic_binary(path)?
        } else {
            results_io::read_dic_csv(path, cfg.delimiter)?
        };
        let field = calculate_strain_field(&result, &params).map_err(correlation_failure)?;
        let out = results_io::write_strain_csv(&field, &cfg.output, cfg.delimiter)?;
        let valid = field.valid.iter().filter(|v| **v).count();
        println!(
            "{}: {valid}/{} windows valid, VSG {} px -> {}",
            file_label(path),
            field.len(),
            field.vsg,
            out.display()
        );
    }
    Ok(())
}

fn synth_spec(cfg: &SynthConfig) -> anyhow::Result<DeformationFieldSpec> {
    let center = ((cfg.width as f64 - 1.0) / 2.0, (cfg.height as f64 - 1.0) / 2.0);
    Ok(match cfg.field.as_str() {
        "translation" => DeformationFieldSpec::Translation { ux: cfg.ux, uy: cfg.uy },
        "uniform_strain" => DeformationFieldSpec::UniformStrain { exx: cfg.exx, eyy: cfg.eyy, exy: cfg.exy, center },
        "radial_stretch" => DeformationFieldSpec::RadialStretch {
            center,
            radius: center.0.min(center.1),
            extension: cfg.extension,
        },
        "star" => synth::star_field(cfg.width, cfg.height, cfg.amplitude, cfg.period_left, cfg.period_right)?,
        "sinusoidal_shear" => DeformationFieldSpec::SinusoidalShear {
            base: (cfg.ux, cfg.uy),
            amplitude: cfg.amplitude,
            period: cfg.period,
        },
        other => bail!("unknown field {other:?}"),
    })
}

fn run_synth(cfg: &SynthConfig) -> Outcome {
    let spec = synth_spec(cfg)?;
    spec.validate(cfg.width)?;
    let src = synth::gen_speckle(cfg.width, cfg.height, cfg.diameter, cfg.density, cfg.rng_seed)?;
    create_dir(&cfg.output)?;
    write_run_config(cfg, &cfg.output)?;
    let zero = DeformationFieldSpec::Translation { ux: 0.0, uy: 0.0 };
    let reference = synth::deform_image(&src, &zero, cfg.supersample)?;
    let mut deformed = synth::deform_image(&src, &spec, cfg.supersample)?;
    drop(src);
    let mut written: Vec<PathBuf> = Vec::new();
    let mut save = |img: &GrayImage, name: &str| -> anyhow::Result<()> {
        let p = cfg.output.join(name);
        write_pgm(img, &p)?;
        written.push(p);
        Ok(())
    };
    save(&reference, "ref.pgm")?;
    if cfg.noise > 0.0 {
        save(&synth::add_noise(&reference, cfg.noise, cfg.rng_seed.wrapping_add(1))?, "ref_noisy.pgm")?;
        deformed = synth::add_noise(&deformed, cfg.noise, cfg.rng_seed.wrapping_add(2))?;
    }
    save(&deformed, "def_0001.pgm")?;
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn run_metrology(cfg: &MetrologyConfig) -> Outcome {
    let params = cfg.engine.params()?;
    let reference = load_image(&cfg.reference)?;
    let noisy = load_image(&cfg.reference_noisy)?;
    let deformed = load_image(&cfg.deformed)?;
    for (img, p) in [(&noisy, &cfg.reference_noisy), (&deformed, &cfg.deformed)] {
        if img.dims() != reference.dims() {
            return Err(DicError::DimensionMismatch(format!("{} differs in size from the reference", p.display())).into());
        }
    }
    let roi = build_roi(&cfg.roi, reference.dims())?;
    create_dir(&cfg.output)?;
    write_run_config(cfg, &cfg.output)?;
    let (w, h) = reference.dims();
    let period = PeriodMap {
        x_left: 0.0,
        x_right: (w - 1).max(1) as f64,
        p_left: cfg.period_left,
        p_right: cfg.period_right,
    };
    let y_mid = cfg.y_mid.unwrap_or((h / 2) as f64);
    let report = synth::metrology_sweep(
        &reference,
        &noisy,
        &deformed,
        &roi,
        (cfg.seed[0], cfg.seed[1]),
        &cfg.subset_sizes,
        &params,
        y_mid,
        &period,
    )
    .map_err(correlation_failure)?;
    let d = cfg.delimiter;
    let mut text = format!("subset_size{d}noise{d}l10{d}mei\n");
    for r in &report.rows {
        text += &format!(
            "{}{d}{}{d}{}{d}{}\n",
            r.subset_size,
            results_io::format_real(r.noise),
            results_io::format_real(r.l10),
            results_io::format_real(r.mei)
        );
        println!("subset {:>3}: noise {:.5} px, l10 {:.2} px, MEI {:.4}", r.subset_size, r.noise, r.l10, r.mei);
    }
    text += &format!("# mei_summary={}\n", results_io::format_real(report.summary));
    let out = cfg.output.join("metrology.csv");
    std::fs::write(&out, text).with_context(|| format!("writing {}", out.display()))?;
    println!("MEI summary (mean of three lowest): {:.4} -> {}", report.summary, out.display());
    Ok(())
}
