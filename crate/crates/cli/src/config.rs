//! Run configuration: YAML file keys, flag overrides and the fully resolved
//! form echoed to `run_config.yaml`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use dic_core::strain::{StrainBasis, StrainFormulation, StrainParams};
use dic_core::{CostKind, DicParams, Method, ShapeKind};

pub const CONFIG_VERSION: u32 = 1;
pub const THREADS_ENV: &str = "DIC_NUM_THREADS";
pub const RUN_CONFIG_NAME: &str = "run_config.yaml";

/// Every key a configuration file may carry. Keys irrelevant to the chosen
/// subcommand are ignored.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub version: Option<u32>,
    pub command: Option<String>,

    pub reference: Option<PathBuf>,
    pub deformed: Option<String>,
    pub roi: Option<RoiSource>,
    pub roi_mask: Option<PathBuf>,
    pub roi_border: Option<usize>,
    pub roi_rects: Option<Vec<[usize; 4]>>,
    pub seed: Option<[f64; 2]>,

    pub subset_size: Option<usize>,
    pub subset_step: Option<usize>,
    pub max_displacement: Option<f64>,
    pub cost: Option<String>,
    pub shape: Option<String>,
    pub method: Option<String>,
    pub max_iterations: Option<usize>,
    pub update_precision: Option<f64>,
    pub zncc_threshold: Option<f64>,
    pub threads: Option<usize>,
    pub mad_k: Option<f64>,
    pub mad: Option<bool>,
    pub nan_unconverged: Option<bool>,

    pub data: Option<String>,
    pub window_points: Option<usize>,
    pub basis: Option<String>,
    pub formulation: Option<String>,

    pub width: Option<usize>,
    pub height: Option<usize>,
    pub diameter: Option<f64>,
    pub density: Option<f64>,
    pub rng_seed: Option<u64>,
    pub field: Option<String>,
    pub ux: Option<f64>,
    pub uy: Option<f64>,
    pub exx: Option<f64>,
    pub eyy: Option<f64>,
    pub exy: Option<f64>,
    pub extension: Option<f64>,
    pub amplitude: Option<f64>,
    pub period: Option<f64>,
    pub period_left: Option<f64>,
    pub period_right: Option<f64>,
    pub noise: Option<f64>,
    pub supersample: Option<usize>,

    pub reference_noisy: Option<PathBuf>,
    pub subset_sizes: Option<Vec<usize>>,
    pub y_mid: Option<f64>,

    pub output: Option<PathBuf>,
    pub binary: Option<bool>,
    pub delimiter: Option<char>,
    pub log_level: Option<String>,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: FileConfig =
            serde_yaml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if let Some(v) = cfg.version {
            if v != CONFIG_VERSION {
                bail!("config {} has version {v}, expected {CONFIG_VERSION}", path.display());
            }
        }
        Ok(cfg)
    }

    /// Reject a file written for a different subcommand.
    pub fn check_command(&self, expected: &str) -> anyhow::Result<()> {
        match &self.command {
            Some(c) if c != expected => bail!("config is for command {c:?}, not {expected:?}"),
            _ => Ok(()),
        }
    }
}

/// Flag value, else file value, else default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

pub fn pick_opt<T>(flag: Option<T>, file: Option<T>) -> Option<T> {
    flag.or(file)
}

/// Thread count when neither flag nor file sets one.
pub fn default_threads() -> anyhow::Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => {
            let n: usize = v.trim().parse().with_context(|| format!("{THREADS_ENV}={v:?} is not a thread count"))?;
            if n == 0 {
                bail!("{THREADS_ENV} must be at least 1");
            }
            Ok(n)
        }
        Err(_) => Ok(DicParams::default().threads),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RoiSource {
    All,
    Mask { path: PathBuf },
    Border { border: usize },
    Rects { rects: Vec<[usize; 4]> },
}

impl RoiSource {
    pub fn resolve(
        mask: Option<PathBuf>,
        border: Option<usize>,
        rects: Option<Vec<[usize; 4]>>,
    ) -> anyhow::Result<Option<Self>> {
        let given = mask.is_some() as u8 + border.is_some() as u8 + rects.is_some() as u8;
        if given > 1 {
            bail!("give only one of --roi-mask, --roi-border and --roi-rect");
        }
        Ok(if let Some(path) = mask {
            Some(Self::Mask { path })
        } else if let Some(border) = border {
            Some(Self::Border { border })
        } else {
            rects.map(|rects| Self::Rects { rects })
        })
    }
}

/// Engine settings in the order they are written out.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EngineConfig {
    pub subset_size: usize,
    pub subset_step: usize,
    pub max_displacement: f64,
    pub cost: String,
    pub shape: String,
    pub method: String,
    pub max_iterations: usize,
    pub update_precision: f64,
    pub zncc_threshold: f64,
    pub threads: usize,
    pub mad_k: f64,
    pub mad: bool,
    pub nan_unconverged: bool,
}

impl EngineConfig {
    pub fn params(&self) -> anyhow::Result<DicParams> {
        let p = DicParams {
            subset_size: self.subset_size,
            subset_step: self.subset_step,
            max_displacement: self.max_displacement,
            cost: self.cost.parse::<CostKind>()?,
            shape: self.shape.parse::<ShapeKind>()?,
            method: self.method.parse::<Method>()?,
            max_iterations: self.max_iterations,
            update_precision: self.update_precision,
            zncc_accept_threshold: self.zncc_threshold,
            threads: self.threads,
            mad_k: self.mad_k,
            mad_enabled: self.mad,
            nan_unconverged: self.nan_unconverged,
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Dic2dConfig {
    pub version: u32,
    pub command: String,
    pub reference: PathBuf,
    pub deformed: String,
    pub roi: RoiSource,
    pub seed: Option<[f64; 2]>,
    #[serde(flatten)]
    pub engine: EngineConfig,
    pub output: PathBuf,
    pub binary: bool,
    pub delimiter: char,
    pub log_level: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrainConfig {
    pub version: u32,
    pub command: String,
    pub data: String,
    pub binary: bool,
    pub window_points: usize,
    pub basis: String,
    pub formulation: String,
    pub output: PathBuf,
    pub delimiter: char,
    pub log_level: String,
}

impl StrainConfig {
    pub fn params(&self) -> anyhow::Result<StrainParams> {
        let p = StrainParams {
            window_points: self.window_points,
            basis: self.basis.parse::<StrainBasis>()?,
            formulation: self.formulation.parse::<StrainFormulation>()?,
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthConfig {
    pub version: u32,
    pub command: String,
    pub width: usize,
    pub height: usize,
    pub diameter: f64,
    pub density: f64,
    pub rng_seed: u64,
    pub field: String,
    pub ux: f64,
    pub uy: f64,
    pub exx: f64,
    pub eyy: f64,
    pub exy: f64,
    pub extension: f64,
    pub amplitude: f64,
    pub period: f64,
    pub period_left: f64,
    pub period_right: f64,
    pub noise: f64,
    pub supersample: usize,
    pub output: PathBuf,
    pub log_level: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetrologyConfig {
    pub version: u32,
    pub command: String,
    pub reference: PathBuf,
    pub reference_noisy: PathBuf,
    pub deformed: PathBuf,
    pub roi: RoiSource,
    pub seed: [f64; 2],
    pub subset_sizes: Vec<usize>,
    pub period_left: f64,
    pub period_right: f64,
    pub y_mid: Option<f64>,
    #[serde(flatten)]
    pub engine: EngineConfig,
    pub output: PathBuf,
    pub delimiter: char,
    pub log_level: String,
}

/// Write `value` as `run_config.yaml` inside `dir`.
pub fn write_run_config<T: Serialize>(value: &T, dir: &Path) -> anyhow::Result<PathBuf> {
    let path = dir.join(RUN_CONFIG_NAME);
    let text = serde_yaml::to_string(value)?;
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}
