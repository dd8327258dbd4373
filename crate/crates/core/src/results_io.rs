//! Result files: CSV and compact binary displacement fields, strain CSV, and
//! glob-based batch import.
//!
//! The byte layout of every format is described in `docs/FORMATS.md`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;

use crate::error::{DicError, Result};
use crate::grid::SubsetGrid;
use crate::optimizer::{ShapeParams, SubsetStatus};
use crate::params::{CostKind, ShapeKind};
use crate::rgdic::DicResult;
use crate::strain::{StrainField, StrainFormulation};

pub const DIC_PREFIX: &str = "dic_results_";
pub const STRAIN_PREFIX: &str = "strain_";
pub const BINARY_MAGIC: [u8; 8] = *b"DICF2D\0\0";
pub const FORMAT_VERSION: u32 = 1;
pub const DIC_COLUMNS: [&str; 7] = ["x", "y", "u_x", "u_y", "zncc", "iterations", "status"];
pub const STRAIN_COLUMNS: [&str; 10] = ["x", "y", "Fxx", "Fxy", "Fyx", "Fyy", "exx", "eyy", "exy", "valid"];

/// Render a real with 9 significant digits in the style of C's `%.9g`;
/// NaN is written `nan`.
pub fn format_real(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..9).contains(&exp) {
        let m = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{m}e{sign}{:02}", exp.abs());
    }
    let decimals = (8 - exp).max(0) as usize;
    strip_zeros(&format!("{v:.decimals$}")).to_string()
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn parse_real(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok()
}

/// File stem used in output names: `def_0001.tiff` -> `def_0001`.
pub fn label_stem(label: &str) -> String {
    Path::new(label)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| label.to_string())
}

pub fn dic_csv_name(label: &str) -> String {
    format!("{DIC_PREFIX}{}.csv", label_stem(label))
}

pub fn dic_binary_name(label: &str) -> String {
    format!("{DIC_PREFIX}{}.bin", label_stem(label))
}

pub fn strain_csv_name(label: &str) -> String {
    format!("{STRAIN_PREFIX}{}.csv", label_stem(label))
}

fn status_legend() -> String {
    SubsetStatus::ALL
        .iter()
        .map(|s| format!("{}={}", s.code(), s.name()))
        .collect::<Vec<_>>()
        .join(" ")
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| DicError::io(path, e))?))
}

/// Write `dic_results_<stem>.csv` into `dir`.
pub fn write_dic_csv(result: &DicResult, dir: impl AsRef<Path>, delimiter: char) -> Result<PathBuf> {
    let path = dir.as_ref().join(dic_csv_name(&result.image_label));
    let mut w = create(&path)?;
    write_dic_csv_to(result, &mut w, delimiter)
        .and_then(|_| w.flush())
        .map_err(|e| DicError::io(&path, e))?;
    Ok(path)
}

pub fn write_dic_csv_to(result: &DicResult, w: &mut impl Write, delimiter: char) -> std::io::Result<()> {
    let g = &result.grid;
    let (iw, ih) = g.image_dims();
    let (ox, oy) = g.origin();
    writeln!(w, "# format=dic_results")?;
    writeln!(w, "# version={FORMAT_VERSION}")?;
    writeln!(w, "# image_label={}", result.image_label)?;
    writeln!(w, "# subset_size={}", g.subset_size())?;
    writeln!(w, "# subset_step={}", g.step())?;
    writeln!(w, "# cost={}", result.cost)?;
    writeln!(w, "# shape={}", result.shape)?;
    writeln!(w, "# image_width={iw}")?;
    writeln!(w, "# image_height={ih}")?;
    writeln!(w, "# grid_cols={}", g.cols())?;
    writeln!(w, "# grid_rows={}", g.rows())?;
    writeln!(w, "# grid_origin_x={ox}")?;
    writeln!(w, "# grid_origin_y={oy}")?;
    writeln!(w, "# status_legend={}", status_legend())?;
    let d = delimiter.to_string();
    writeln!(w, "{}", DIC_COLUMNS.join(&d))?;
    for i in 0..result.len() {
        let (x, y) = g.center_linear(i);
        writeln!(
            w,
            "{x}{d}{y}{d}{}{d}{}{d}{}{d}{}{d}{}",
            format_real(result.u_x[i]),
            format_real(result.u_y[i]),
            format_real(result.zncc[i]),
            result.iterations[i],
            result.status[i].code()
        )?;
    }
    Ok(())
}

/// Key/value metadata lines and data rows of a comment-headed CSV.
struct CsvTable {
    meta: Vec<(String, String)>,
    rows: Vec<(usize, Vec<String>)>,
}

impl CsvTable {
    fn get(&self, path: &Path, key: &str) -> Result<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| parse_err(path, 0, format!("missing header field {key:?}")))
    }

    fn get_num<T: std::str::FromStr>(&self, path: &Path, key: &str) -> Result<T> {
        let v = self.get(path, key)?;
        v.parse()
            .map_err(|_| parse_err(path, 0, format!("header field {key}={v:?} is not a number")))
    }
}

fn parse_err(path: &Path, line: usize, message: String) -> DicError {
    DicError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    }
}

fn read_table(path: &Path, delimiter: char, columns: &[&str]) -> Result<CsvTable> {
    let file = File::open(path).map_err(|e| DicError::io(path, e))?;
    let mut meta = Vec::new();
    let mut rows = Vec::new();
    let mut saw_header = false;
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DicError::io(path, e))?;
        let lineno = n + 1;
        if let Some(c) = line.strip_prefix('#') {
            if let Some((k, v)) = c.trim_start().split_once('=') {
                meta.push((k.trim().to_string(), v.trim_end().to_string()));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<String> = line.split(delimiter).map(|s| s.trim().to_string()).collect();
        if !saw_header {
            if cells != columns {
                return Err(parse_err(path, lineno, format!("expected column header {:?}", columns.join(&delimiter.to_string()))));
            }
            saw_header = true;
            continue;
        }
        if cells.len() != columns.len() {
            return Err(parse_err(path, lineno, format!("expected {} fields, found {}", columns.len(), cells.len())));
        }
        rows.push((lineno, cells));
    }
    if !saw_header {
        return Err(parse_err(path, 0, "no column header".into()));
    }
    Ok(CsvTable { meta, rows })
}

fn cell_real(path: &Path, line: usize, cell: &str, name: &str) -> Result<f64> {
    parse_real(cell).ok_or_else(|| parse_err(path, line, format!("bad {name} value {cell:?}")))
}

fn cell_int<T: std::str::FromStr>(path: &Path, line: usize, cell: &str, name: &str) -> Result<T> {
    cell.parse().map_err(|_| parse_err(path, line, format!("bad {name} value {cell:?}")))
}

pub fn read_dic_csv(path: impl AsRef<Path>, delimiter: char) -> Result<DicResult> {
    let path = path.as_ref();
    let t = read_table(path, delimiter, &DIC_COLUMNS)?;
    let version: u32 = t.get_num(path, "version")?;
    if version != FORMAT_VERSION {
        return Err(DicError::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let cost: CostKind = t.get(path, "cost")?.parse()?;
    let shape: ShapeKind = t.get(path, "shape")?.parse()?;
    let header = Header {
        subset_size: t.get_num(path, "subset_size")?,
        step: t.get_num(path, "subset_step")?,
        cost,
        shape,
        image_dims: (t.get_num(path, "image_width")?, t.get_num(path, "image_height")?),
        grid_dims: (t.get_num(path, "grid_cols")?, t.get_num(path, "grid_rows")?),
        origin: (t.get_num(path, "grid_origin_x")?, t.get_num(path, "grid_origin_y")?),
        label: t.get(path, "image_label")?.to_string(),
    };
    let n = header.grid_dims.0 * header.grid_dims.1;
    if t.rows.len() != n {
        let line = t.rows.last().map_or(0, |r| r.0);
        return Err(parse_err(path, line, format!("expected {n} data rows, found {}", t.rows.len())));
    }
    let mut cols = Columns::with_len(n);
    for (i, (line, c)) in t.rows.iter().enumerate() {
        let line = *line;
        let x: usize = cell_int(path, line, &c[0], "x")?;
        let y: usize = cell_int(path, line, &c[1], "y")?;
        let expect = (
            header.origin.0 + (i % header.grid_dims.0) * header.step,
            header.origin.1 + (i / header.grid_dims.0) * header.step,
        );
        if (x, y) != expect {
            return Err(parse_err(path, line, format!("row is at ({x}, {y}), grid expects {expect:?}")));
        }
        cols.u_x[i] = cell_real(path, line, &c[2], "u_x")?;
        cols.u_y[i] = cell_real(path, line, &c[3], "u_y")?;
        cols.zncc[i] = cell_real(path, line, &c[4], "zncc")?;
        cols.iterations[i] = cell_int(path, line, &c[5], "iterations")?;
        let code: u32 = cell_int(path, line, &c[6], "status")?;
        cols.status[i] = SubsetStatus::from_code(code)
            .ok_or_else(|| parse_err(path, line, format!("unknown status code {code}")))?;
    }
    assemble(path, header, cols)
}

/// Header fields shared by both displacement formats.
struct Header {
    subset_size: usize,
    step: usize,
    cost: CostKind,
    shape: ShapeKind,
    image_dims: (usize, usize),
    grid_dims: (usize, usize),
    origin: (usize, usize),
    label: String,
}

struct Columns {
    u_x: Vec<f64>,
    u_y: Vec<f64>,
    zncc: Vec<f64>,
    iterations: Vec<u32>,
    status: Vec<SubsetStatus>,
}

impl Columns {
    fn with_len(n: usize) -> Self {
        Self {
            u_x: vec![0.0; n],
            u_y: vec![0.0; n],
            zncc: vec![0.0; n],
            iterations: vec![0; n],
            status: vec![SubsetStatus::Absent; n],
        }
    }
}

fn assemble(path: &Path, h: Header, c: Columns) -> Result<DicResult> {
    let present = c.status.iter().map(|s| *s != SubsetStatus::Absent).collect();
    let grid = SubsetGrid::from_parts(h.subset_size, h.step, h.origin, h.grid_dims, h.image_dims, present)
        .map_err(|e| parse_err(path, 0, e.to_string()))?;
    let shapes = c
        .u_x
        .iter()
        .zip(&c.u_y)
        .map(|(&u, &v)| ShapeParams::translation(h.shape, u, v))
        .collect();
    Ok(DicResult {
        grid,
        u_x: c.u_x,
        u_y: c.u_y,
        zncc: c.zncc,
        iterations: c.iterations,
        status: c.status,
        shapes,
        image_label: h.label,
        cost: h.cost,
        shape: h.shape,
    })
}

fn cost_code(c: CostKind) -> u32 {
    match c {
        CostKind::Ssd => 0,
        CostKind::Nssd => 1,
        CostKind::Znssd => 2,
    }
}

fn shape_code(s: ShapeKind) -> u32 {
    match s {
        ShapeKind::Rigid => 0,
        ShapeKind::Affine => 1,
        ShapeKind::Quadratic => 2,
    }
}

/// Write `dic_results_<stem>.bin` into `dir`.
pub fn write_dic_binary(result: &DicResult, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let path = dir.as_ref().join(dic_binary_name(&result.image_label));
    let mut w = create(&path)?;
    write_dic_binary_to(result, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| DicError::io(&path, e))?;
    Ok(path)
}

pub fn write_dic_binary_to(result: &DicResult, w: &mut impl Write) -> std::io::Result<()> {
    let g = &result.grid;
    w.write_all(&BINARY_MAGIC)?;
    for v in [
        FORMAT_VERSION,
        g.subset_size() as u32,
        g.step() as u32,
        cost_code(result.cost),
        shape_code(result.shape),
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    let (iw, ih) = g.image_dims();
    let (ox, oy) = g.origin();
    for v in [iw, ih, g.cols(), g.rows(), ox, oy] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    let label = result.image_label.as_bytes();
    w.write_all(&(label.len() as u32).to_le_bytes())?;
    w.write_all(label)?;
    for arr in [&result.u_x, &result.u_y, &result.zncc] {
        for v in arr.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    for v in &result.iterations {
        w.write_all(&v.to_le_bytes())?;
    }
    for s in &result.status {
        w.write_all(&s.code().to_le_bytes())?;
    }
    Ok(())
}

/// Little-endian cursor that reports truncation against a file path.
struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let Some(end) = end else {
            return Err(DicError::TruncatedFile(self.path.to_path_buf()));
        };
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| parse_err(self.path, 0, format!("value {v} overflows")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| DicError::TruncatedFile(self.path.to_path_buf()))?)?;
        Ok(bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect())
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| DicError::TruncatedFile(self.path.to_path_buf()))?)?;
        Ok(bytes.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).collect())
    }
}

pub fn read_dic_binary(path: impl AsRef<Path>) -> Result<DicResult> {
    let path = path.as_ref();
    let mut data = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|e| DicError::io(path, e))?;
    decode_dic_binary(&data, path)
}

/// Decode a binary result held in memory; `path` is only used in errors.
pub fn decode_dic_binary(data: &[u8], path: &Path) -> Result<DicResult> {
    if data.len() < BINARY_MAGIC.len() {
        return Err(if BINARY_MAGIC.starts_with(data) {
            DicError::TruncatedFile(path.to_path_buf())
        } else {
            DicError::BadMagic(path.to_path_buf())
        });
    }
    if data[..8] != BINARY_MAGIC {
        return Err(DicError::BadMagic(path.to_path_buf()));
    }
    let mut c = Cursor { data, pos: 8, path };
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(DicError::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let subset_size = c.u32()? as usize;
    let step = c.u32()? as usize;
    let cost = match c.u32()? {
        0 => CostKind::Ssd,
        1 => CostKind::Nssd,
        2 => CostKind::Znssd,
        k => return Err(parse_err(path, 0, format!("unknown cost code {k}"))),
    };
    let shape = match c.u32()? {
        0 => ShapeKind::Rigid,
        1 => ShapeKind::Affine,
        2 => ShapeKind::Quadratic,
        k => return Err(parse_err(path, 0, format!("unknown shape code {k}"))),
    };
    let image_dims = (c.usize()?, c.usize()?);
    let grid_dims = (c.usize()?, c.usize()?);
    let origin = (c.usize()?, c.usize()?);
    let label_len = c.u32()? as usize;
    let label = String::from_utf8(c.take(label_len)?.to_vec())
        .map_err(|_| parse_err(path, 0, "image label is not UTF-8".into()))?;
    let n = grid_dims
        .0
        .checked_mul(grid_dims.1)
        .ok_or_else(|| parse_err(path, 0, "grid dimensions overflow".into()))?;
    let u_x = c.f64s(n)?;
    let u_y = c.f64s(n)?;
    let zncc = c.f64s(n)?;
    let iterations = c.u32s(n)?;
    let status = c
        .u32s(n)?
        .into_iter()
        .map(|k| SubsetStatus::from_code(k).ok_or_else(|| parse_err(path, 0, format!("unknown status code {k}"))))
        .collect::<Result<Vec<_>>>()?;
    if c.pos != data.len() {
        return Err(parse_err(path, 0, format!("{} trailing bytes", data.len() - c.pos)));
    }
    let header = Header {
        subset_size,
        step,
        cost,
        shape,
        image_dims,
        grid_dims,
        origin,
        label,
    };
    assemble(path, header, Columns { u_x, u_y, zncc, iterations, status })
}

/// Files matching `pattern`, sorted lexicographically by path.
pub fn glob_sorted(pattern: &str) -> Result<Vec<PathBuf>> {
    let paths = glob::glob(pattern).map_err(|e| DicError::InvalidParameter(format!("bad pattern {pattern:?}: {e}")))?;
    let mut files: Vec<PathBuf> = paths.filter_map(|p| p.ok()).filter(|p| p.is_file()).collect();
    if files.is_empty() {
        return Err(DicError::NoMatch(pattern.to_string()));
    }
    files.sort();
    Ok(files)
}

/// Imported displacement results stacked as `[image, y, x]` arrays.
#[derive(Debug, Clone)]
pub struct DicImport {
    pub files: Vec<PathBuf>,
    pub results: Vec<DicResult>,
    /// Subset-center coordinates along x and y.
    pub ss_x: Vec<f64>,
    pub ss_y: Vec<f64>,
    pub u_x: Array3<f64>,
    pub u_y: Array3<f64>,
    pub zncc: Array3<f64>,
}

pub fn import_2d(pattern: &str, binary: bool, delimiter: char) -> Result<DicImport> {
    let files = glob_sorted(pattern)?;
    let results = files
        .iter()
        .map(|f| if binary { read_dic_binary(f) } else { read_dic_csv(f, delimiter) })
        .collect::<Result<Vec<_>>>()?;
    let g = &results[0].grid;
    let (cols, rows) = g.dims();
    for (f, r) in files.iter().zip(&results) {
        if r.grid.dims() != (cols, rows) || r.grid.origin() != g.origin() || r.grid.step() != g.step() {
            return Err(DicError::DimensionMismatch(format!(
                "{} has a different grid than {}",
                f.display(),
                files[0].display()
            )));
        }
    }
    let stack = |get: &dyn Fn(&DicResult) -> &Vec<f64>| {
        Array3::from_shape_fn((results.len(), rows, cols), |(k, y, x)| get(&results[k])[y * cols + x])
    };
    let (ox, oy) = g.origin();
    Ok(DicImport {
        ss_x: (0..cols).map(|c| (ox + c * g.step()) as f64).collect(),
        ss_y: (0..rows).map(|r| (oy + r * g.step()) as f64).collect(),
        u_x: stack(&|r| &r.u_x),
        u_y: stack(&|r| &r.u_y),
        zncc: stack(&|r| &r.zncc),
        files,
        results,
    })
}

/// Write `strain_<stem>.csv` into `dir`.
pub fn write_strain_csv(field: &StrainField, dir: impl AsRef<Path>, delimiter: char) -> Result<PathBuf> {
    let path = dir.as_ref().join(strain_csv_name(&field.image_label));
    let mut w = create(&path)?;
    write_strain_csv_to(field, &mut w, delimiter)
        .and_then(|_| w.flush())
        .map_err(|e| DicError::io(&path, e))?;
    Ok(path)
}

pub fn write_strain_csv_to(field: &StrainField, w: &mut impl Write, delimiter: char) -> std::io::Result<()> {
    writeln!(w, "# format=strain_results")?;
    writeln!(w, "# version={FORMAT_VERSION}")?;
    writeln!(w, "# image_label={}", field.image_label)?;
    writeln!(w, "# formulation={}", field.formulation)?;
    writeln!(w, "# vsg={}", field.vsg)?;
    writeln!(w, "# window_cols={}", field.cols)?;
    writeln!(w, "# window_rows={}", field.rows)?;
    let d = delimiter.to_string();
    writeln!(w, "{}", STRAIN_COLUMNS.join(&d))?;
    for i in 0..field.len() {
        let (x, y) = field.center(i);
        let f = field.deformation[i];
        let e = field.strain[i];
        let reals = [f[0][0], f[0][1], f[1][0], f[1][1], e[0], e[1], e[2]];
        write!(w, "{}{d}{}", format_real(x), format_real(y))?;
        for v in reals {
            write!(w, "{d}{}", format_real(v))?;
        }
        writeln!(w, "{d}{}", field.valid[i] as u8)?;
    }
    Ok(())
}

pub fn read_strain_csv(path: impl AsRef<Path>, delimiter: char) -> Result<StrainField> {
    let path = path.as_ref();
    let t = read_table(path, delimiter, &STRAIN_COLUMNS)?;
    let version: u32 = t.get_num(path, "version")?;
    if version != FORMAT_VERSION {
        return Err(DicError::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let cols: usize = t.get_num(path, "window_cols")?;
    let rows: usize = t.get_num(path, "window_rows")?;
    let formulation: StrainFormulation = t.get(path, "formulation")?.parse()?;
    if t.rows.len() != cols * rows {
        let line = t.rows.last().map_or(0, |r| r.0);
        return Err(parse_err(path, line, format!("expected {} data rows, found {}", cols * rows, t.rows.len())));
    }
    let mut field = StrainField {
        cols,
        rows,
        window_x: vec![0.0; cols],
        window_y: vec![0.0; rows],
        deformation: Vec::with_capacity(cols * rows),
        strain: Vec::with_capacity(cols * rows),
        valid: Vec::with_capacity(cols * rows),
        vsg: t.get_num(path, "vsg")?,
        formulation,
        image_label: t.get(path, "image_label")?.to_string(),
    };
    for (i, (line, c)) in t.rows.iter().enumerate() {
        let line = *line;
        let mut v = [0.0; 9];
        for (k, slot) in v.iter_mut().enumerate() {
            *slot = cell_real(path, line, &c[k], STRAIN_COLUMNS[k])?;
        }
        let (r, col) = (i / cols, i % cols);
        if r == 0 {
            field.window_x[col] = v[0];
        }
        if col == 0 {
            field.window_y[r] = v[1];
        }
        field.deformation.push([[v[2], v[3]], [v[4], v[5]]]);
        field.strain.push([v[6], v[7], v[8]]);
        field.valid.push(match c[9].as_str() {
            "1" => true,
            "0" => false,
            other => return Err(parse_err(path, line, format!("bad valid flag {other:?}"))),
        });
    }
    Ok(field)
}

/// Imported strain results stacked as `[image, y, x]` arrays.
#[derive(Debug, Clone)]
pub struct StrainImport {
    pub files: Vec<PathBuf>,
    pub fields: Vec<StrainField>,
    pub window_x: Vec<f64>,
    pub window_y: Vec<f64>,
    pub eps_xx: Array3<f64>,
    pub eps_yy: Array3<f64>,
    pub eps_xy: Array3<f64>,
}

pub fn import_strain(pattern: &str, delimiter: char) -> Result<StrainImport> {
    let files = glob_sorted(pattern)?;
    let fields = files
        .iter()
        .map(|f| read_strain_csv(f, delimiter))
        .collect::<Result<Vec<_>>>()?;
    let (cols, rows) = (fields[0].cols, fields[0].rows);
    if let Some((f, _)) = files.iter().zip(&fields).find(|(_, s)| (s.cols, s.rows) != (cols, rows)) {
        return Err(DicError::DimensionMismatch(format!(
            "{} has a different window lattice than {}",
            f.display(),
            files[0].display()
        )));
    }
    let stack = |k: usize| Array3::from_shape_fn((fields.len(), rows, cols), |(i, y, x)| fields[i].strain[y * cols + x][k]);
    Ok(StrainImport {
        window_x: fields[0].window_x.clone(),
        window_y: fields[0].window_y.clone(),
        eps_xx: stack(0),
        eps_yy: stack(1),
        eps_xy: stack(2),
        files,
        fields,
    })
}
