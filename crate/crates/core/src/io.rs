//! File formats.
//!
//! * Dense CSV: one matrix row per line, comma separated, no header.
//! * Triplets: a `# rows cols` header, then `row,col,value` lines with
//!   0-based indices. Cells not listed are unobserved.
//! * Trace CSV: header `iter,objective,shared_err,unique_err,orth_residual,grad_norm_sq`,
//!   absent errors as empty fields.
//!
//! Reals are written with 17 significant digits, which round-trips every
//! finite `f64` exactly.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{HmfError, Result};
use crate::matrix::DenseMatrix;
use crate::model::{
    FactorState, GroundTruth, LocalFactors, ObservationMask, ObservationSet, SourceObservation, TraceRecord,
};

pub const TRACE_HEADER: &str = "iter,objective,shared_err,unique_err,orth_residual,grad_norm_sq";

pub fn format_real(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> HmfError {
    HmfError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_real(token: &str, path: &Path, line: usize) -> Result<f64> {
    token
        .trim()
        .parse::<f64>()
        .map_err(|_| parse_error(path, line, format!("not a number: {token:?}")))
}

fn parse_index(token: &str, path: &Path, line: usize) -> Result<usize> {
    token
        .trim()
        .parse::<usize>()
        .map_err(|_| parse_error(path, line, format!("not an index: {token:?}")))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| HmfError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| HmfError::io(path, e))
}

/// Records of a headerless CSV with their 1-based line numbers. Lines
/// before `first_line` are assumed consumed by the caller.
fn csv_records(text: &str, path: &Path, first_line: usize) -> Result<Vec<(usize, csv::StringRecord)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_error(path, line + first_line - 1, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize) + first_line - 1;
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        out.push((line, rec));
    }
    Ok(out)
}

pub fn format_dense_csv(m: &DenseMatrix) -> String {
    let mut out = String::new();
    for r in 0..m.rows() {
        let line: Vec<String> = m.row(r).iter().map(|&x| format_real(x)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Parses dense CSV text; `path` only labels errors. An empty text is a
/// `0 × 0` matrix.
pub fn parse_dense_csv(text: &str, path: &Path) -> Result<DenseMatrix> {
    let records = csv_records(text, path, 1)?;
    let cols = records.first().map_or(0, |(_, r)| r.len());
    let mut data = Vec::with_capacity(records.len() * cols);
    for (line, rec) in &records {
        if rec.len() != cols {
            return Err(parse_error(
                path,
                *line,
                format!("expected {cols} fields, found {}", rec.len()),
            ));
        }
        for token in rec.iter() {
            data.push(parse_real(token, path, *line)?);
        }
    }
    DenseMatrix::from_vec(records.len(), cols, data)
}

pub fn read_dense_csv(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    let path = path.as_ref();
    parse_dense_csv(&read_text(path)?, path)
}

pub fn write_dense_csv(path: impl AsRef<Path>, m: &DenseMatrix) -> Result<()> {
    write_text(path.as_ref(), &format_dense_csv(m))
}

/// Declared shape plus `(row, col, value)` records.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletFile {
    pub rows: usize,
    pub cols: usize,
    pub records: Vec<(usize, usize, f64)>,
}

impl TripletFile {
    /// Observed cells in row-major order; a source without a mask lists every cell.
    pub fn from_observation(source: &SourceObservation) -> Self {
        let (rows, cols) = source.matrix.shape();
        let records = match &source.mask {
            Some(mask) => mask
                .entries
                .iter()
                .map(|&(r, c)| (r, c, source.matrix[(r, c)]))
                .collect(),
            None => (0..rows)
                .flat_map(|r| (0..cols).map(move |c| (r, c)))
                .map(|(r, c)| (r, c, source.matrix[(r, c)]))
                .collect(),
        };
        TripletFile { rows, cols, records }
    }

    /// Zero-padded matrix plus the mask of listed cells.
    pub fn to_observation(&self) -> Result<SourceObservation> {
        let mut m = DenseMatrix::zeros(self.rows, self.cols);
        for &(r, c, v) in &self.records {
            if r >= self.rows || c >= self.cols {
                return Err(HmfError::Invalid(vec![format!(
                    "cell ({r}, {c}) outside {}x{}",
                    self.rows, self.cols
                )]));
            }
            m[(r, c)] = v;
        }
        let mask = ObservationMask::new(self.rows, self.cols, self.records.iter().map(|&(r, c, _)| (r, c)).collect())?;
        SourceObservation::masked(m, mask)
    }

    pub fn format(&self) -> String {
        let mut records = self.records.clone();
        records.sort_by_key(|&(r, c, _)| (r, c));
        let mut out = format!("# {} {}\n", self.rows, self.cols);
        for (r, c, v) in records {
            out.push_str(&format!("{r},{c},{}\n", format_real(v)));
        }
        out
    }

    /// Parses triplet text. With `one_based`, indices in the body are shifted
    /// down by one before bounds checks.
    pub fn parse(text: &str, path: &Path, one_based: bool) -> Result<Self> {
        let (header, body) = text.split_once('\n').unwrap_or((text, ""));
        let shape: Vec<&str> = header
            .trim()
            .strip_prefix('#')
            .ok_or_else(|| parse_error(path, 1, "expected header `# rows cols`"))?
            .split_whitespace()
            .collect();
        if shape.len() != 2 {
            return Err(parse_error(path, 1, "expected header `# rows cols`"));
        }
        let rows = parse_index(shape[0], path, 1)?;
        let cols = parse_index(shape[1], path, 1)?;

        let mut seen = HashSet::new();
        let mut records = Vec::new();
        for (line, rec) in csv_records(body, path, 2)? {
            if rec.len() != 3 {
                return Err(parse_error(path, line, format!("expected 3 fields, found {}", rec.len())));
            }
            let mut r = parse_index(&rec[0], path, line)?;
            let mut c = parse_index(&rec[1], path, line)?;
            if one_based {
                if r == 0 || c == 0 {
                    return Err(parse_error(path, line, "index 0 in a one-based file"));
                }
                r -= 1;
                c -= 1;
            }
            if r >= rows || c >= cols {
                return Err(parse_error(path, line, format!("cell ({r}, {c}) outside {rows}x{cols}")));
            }
            if !seen.insert((r, c)) {
                return Err(parse_error(path, line, format!("duplicate cell ({r}, {c})")));
            }
            records.push((r, c, parse_real(&rec[2], path, line)?));
        }
        Ok(TripletFile { rows, cols, records })
    }
}

pub fn read_triplets(path: impl AsRef<Path>, one_based: bool) -> Result<SourceObservation> {
    let path = path.as_ref();
    TripletFile::parse(&read_text(path)?, path, one_based)?.to_observation()
}

pub fn write_triplets(path: impl AsRef<Path>, source: &SourceObservation) -> Result<()> {
    write_text(path.as_ref(), &TripletFile::from_observation(source).format())
}

/// Output of [`group_triplets`].
#[derive(Debug, Clone)]
pub struct GroupedObservations {
    pub observations: ObservationSet,
    /// `column_map[g][j]` is the original column of local column `j` in group `g`.
    pub column_map: Vec<Vec<usize>>,
    pub warnings: Vec<String>,
}

/// Splits one set of records into per-group sources by column.
///
/// Every column listed in `col_to_group` with a group joins that group's
/// source, keeping the original column order.
pub fn group_triplets(
    rows: usize,
    records: &[(usize, usize, f64)],
    col_to_group: &[Option<usize>],
    n_groups: usize,
) -> Result<GroupedObservations> {
    let mut column_map = vec![Vec::new(); n_groups];
    let mut local_index = vec![0usize; col_to_group.len()];
    for (c, g) in col_to_group.iter().enumerate() {
        if let Some(g) = *g {
            if g >= n_groups {
                return Err(HmfError::Parameter(format!("column {c} assigned to group {g} of {n_groups}")));
            }
            local_index[c] = column_map[g].len();
            column_map[g].push(c);
        }
    }

    let mut per_group: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); n_groups];
    let mut seen = HashSet::new();
    for &(r, c, v) in records {
        let g = col_to_group
            .get(c)
            .copied()
            .flatten()
            .ok_or_else(|| HmfError::Parameter(format!("column {c} has no group")))?;
        if r >= rows {
            return Err(HmfError::Invalid(vec![format!("row {r} outside {rows} rows")]));
        }
        if !seen.insert((r, c)) {
            return Err(HmfError::Invalid(vec![format!("duplicate cell ({r}, {c})")]));
        }
        per_group[g].push((r, local_index[c], v));
    }

    let mut warnings = Vec::new();
    let mut sources = Vec::with_capacity(n_groups);
    for (g, recs) in per_group.into_iter().enumerate() {
        if column_map[g].is_empty() {
            warnings.push(format!("group {g} has no columns"));
        }
        let file = TripletFile {
            rows,
            cols: column_map[g].len(),
            records: recs,
        };
        sources.push(file.to_observation()?);
    }
    Ok(GroupedObservations {
        observations: ObservationSet::new(sources)?,
        column_map,
        warnings,
    })
}

fn grid(len: usize, patch: usize, pad: bool, what: &str) -> Result<usize> {
    if patch == 0 {
        return Err(HmfError::Parameter(format!("patch {what} must be positive")));
    }
    if !len.is_multiple_of(patch) && !pad {
        return Err(HmfError::dim(format!("image {what} divisible by patch {what} {patch}"), "multiple", len));
    }
    Ok(len.div_ceil(patch))
}

/// One row per patch, patches in row-major grid order, each flattened
/// row-major. With `pad`, the image is zero-padded up to whole patches.
pub fn patchify(image: &DenseMatrix, patch_h: usize, patch_w: usize, pad: bool) -> Result<DenseMatrix> {
    let gh = grid(image.rows(), patch_h, pad, "height")?;
    let gw = grid(image.cols(), patch_w, pad, "width")?;
    Ok(DenseMatrix::from_fn(gh * gw, patch_h * patch_w, |p, t| {
        let r = (p / gw) * patch_h + t / patch_w;
        let c = (p % gw) * patch_w + t % patch_w;
        if r < image.rows() && c < image.cols() {
            image[(r, c)]
        } else {
            0.0
        }
    }))
}

/// Inverse of [`patchify`], cropping any padding.
pub fn unpatchify(
    patches: &DenseMatrix,
    image_h: usize,
    image_w: usize,
    patch_h: usize,
    patch_w: usize,
) -> Result<DenseMatrix> {
    let gh = grid(image_h, patch_h, true, "height")?;
    let gw = grid(image_w, patch_w, true, "width")?;
    if patches.shape() != (gh * gw, patch_h * patch_w) {
        return Err(HmfError::dim(
            "unpatchify",
            format!("{}x{}", gh * gw, patch_h * patch_w),
            format!("{}x{}", patches.rows(), patches.cols()),
        ));
    }
    Ok(DenseMatrix::from_fn(image_h, image_w, |r, c| {
        let p = (r / patch_h) * gw + c / patch_w;
        patches[(p, (r % patch_h) * patch_w + c % patch_w)]
    }))
}

fn optional_real(x: Option<f64>) -> String {
    x.map(format_real).unwrap_or_default()
}

pub fn format_trace(records: &[TraceRecord]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.iter,
            format_real(r.objective),
            optional_real(r.shared_err),
            optional_real(r.unique_err),
            format_real(r.orth_residual),
            format_real(r.grad_norm_sq)
        ));
    }
    out
}

pub fn parse_trace(text: &str, path: &Path) -> Result<Vec<TraceRecord>> {
    let (header, body) = text.split_once('\n').unwrap_or((text, ""));
    if header.trim() != TRACE_HEADER {
        return Err(parse_error(path, 1, format!("expected header `{TRACE_HEADER}`")));
    }
    let optional = |token: &str, line| -> Result<Option<f64>> {
        if token.is_empty() {
            Ok(None)
        } else {
            parse_real(token, path, line).map(Some)
        }
    };
    csv_records(body, path, 2)?
        .into_iter()
        .map(|(line, rec)| {
            if rec.len() != 6 {
                return Err(parse_error(path, line, format!("expected 6 fields, found {}", rec.len())));
            }
            Ok(TraceRecord {
                iter: parse_index(&rec[0], path, line)?,
                objective: parse_real(&rec[1], path, line)?,
                shared_err: optional(&rec[2], line)?,
                unique_err: optional(&rec[3], line)?,
                orth_residual: parse_real(&rec[4], path, line)?,
                grad_norm_sq: parse_real(&rec[5], path, line)?,
            })
        })
        .collect()
}

pub fn write_trace(path: impl AsRef<Path>, records: &[TraceRecord]) -> Result<()> {
    write_text(path.as_ref(), &format_trace(records))
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Vec<TraceRecord>> {
    let path = path.as_ref();
    parse_trace(&read_text(path)?, path)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HmfError::io(dir, e))
}

fn factor_path(dir: &Path, name: &str, i: usize) -> PathBuf {
    dir.join(format!("{name}_{i}.csv"))
}

/// Writes `u_g.csv` and `v_g_{i}.csv`, `u_l_{i}.csv`, `v_l_{i}.csv` per source.
pub fn write_factors(dir: impl AsRef<Path>, state: &FactorState) -> Result<()> {
    let dir = dir.as_ref();
    ensure_dir(dir)?;
    write_dense_csv(dir.join("u_g.csv"), &state.u_g)?;
    for (i, l) in state.locals.iter().enumerate() {
        write_dense_csv(factor_path(dir, "v_g", i), &l.v_g)?;
        write_dense_csv(factor_path(dir, "u_l", i), &l.u_l)?;
        write_dense_csv(factor_path(dir, "v_l", i), &l.v_l)?;
    }
    Ok(())
}

/// Reads the layout of [`write_factors`]; sources are counted by the
/// consecutive `v_g_{i}.csv` files present.
pub fn read_factors(dir: impl AsRef<Path>) -> Result<FactorState> {
    let dir = dir.as_ref();
    let u_g = read_dense_csv(dir.join("u_g.csv"))?;
    let mut locals = Vec::new();
    while factor_path(dir, "v_g", locals.len()).exists() {
        let i = locals.len();
        locals.push(LocalFactors {
            v_g: read_dense_csv(factor_path(dir, "v_g", i))?,
            u_l: read_dense_csv(factor_path(dir, "u_l", i))?,
            v_l: read_dense_csv(factor_path(dir, "v_l", i))?,
        });
    }
    Ok(FactorState { u_g, locals })
}

/// Factors as in [`write_factors`] plus `noise_{i}.csv`.
pub fn write_ground_truth(dir: impl AsRef<Path>, truth: &GroundTruth) -> Result<()> {
    let dir = dir.as_ref();
    write_factors(dir, &truth.to_state())?;
    for (i, e) in truth.noise.iter().enumerate() {
        write_dense_csv(factor_path(dir, "noise", i), e)?;
    }
    Ok(())
}

/// Reads factors and, when every source has one, its noise file.
pub fn read_ground_truth(dir: impl AsRef<Path>) -> Result<GroundTruth> {
    let dir = dir.as_ref();
    let state = read_factors(dir)?;
    let n = state.locals.len();
    let noise = if (0..n).all(|i| factor_path(dir, "noise", i).exists()) {
        (0..n)
            .map(|i| read_dense_csv(factor_path(dir, "noise", i)))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    Ok(GroundTruth {
        u_g: state.u_g,
        locals: state.locals,
        noise,
    })
}
