//! On-disk dataset layout and plain-text numeric files.
//!
//! A dataset is a directory holding a `dataset.toml` manifest, one text file
//! per view and an optional label file:
//!
//! ```text
//! format_version = 1
//! subject_count = 70
//! labels_file = "labels.txt"
//!
//! [[views]]
//! name = "fmri"
//! node_count = 90
//! matrix_file = "fmri.txt"
//!
//! [metadata]
//! source = "synthetic"
//! ```
//!
//! A view file stores its `N` affinity matrices as blocks of `M` lines of
//! `M` space-separated numbers, blocks separated by one blank line. Labels
//! are one positive integer per line. Numbers are written in the shortest
//! form that parses back to the identical `f64`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tensor::{GraphViewTensor, Tensor3};

pub const MANIFEST_FILE: &str = "dataset.toml";
pub const FORMAT_VERSION: u32 = 1;
/// Slices with asymmetry up to this are symmetrized on load; larger is rejected.
pub const LOAD_SYMMETRY_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub name: String,
    pub node_count: usize,
    pub matrix_file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub subject_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels_file: Option<String>,
    pub views: Vec<ViewEntry>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub views: Vec<GraphViewTensor>,
    pub labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn view_names(&self) -> Vec<&str> {
        self.manifest.views.iter().map(|v| v.name.as_str()).collect()
    }

    pub fn subject_count(&self) -> usize {
        self.manifest.subject_count
    }
}

/// Formats `x` so that parsing the text yields exactly `x`.
pub fn format_f64(x: f64) -> String {
    let a = x.abs();
    if a == 0.0 || (1e-4..1e15).contains(&a) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn parse_row(line: &str, path: &Path, lineno: usize) -> Result<Vec<f64>> {
    line.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|tok| {
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::format(path, format!("line {lineno}: cannot parse '{tok}'")))?;
            if !v.is_finite() {
                return Err(Error::format(path, format!("line {lineno}: non-finite value '{tok}'")));
            }
            Ok(v)
        })
        .collect()
}

/// Writes a matrix with a `# rows cols` header line.
pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    let mut out = format!("# {} {}\n", m.rows(), m.cols());
    for i in 0..m.rows() {
        push_row(&mut out, m.row(i));
    }
    write_file(path, &out)
}

fn push_row(out: &mut String, row: &[f64]) {
    for (j, &v) in row.iter().enumerate() {
        if j > 0 {
            out.push(' ');
        }
        out.push_str(&format_f64(v));
    }
    out.push('\n');
}

/// Reads a matrix written by [`write_matrix`]; the header is checked when present.
pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let text = read_to_string(path)?;
    let mut declared = None;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if let Some(header) = line.strip_prefix('#') {
            let dims: Vec<usize> = header.split_whitespace().filter_map(|t| t.parse().ok()).collect();
            if dims.len() == 2 && declared.is_none() {
                declared = Some((dims[0], dims[1]));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        rows.push(parse_row(line, path, lineno + 1)?);
    }
    let m = Matrix::from_rows(&rows).map_err(|e| Error::format(path, e.to_string()))?;
    if let Some((r, c)) = declared {
        if m.shape() != (r, c) && !(r == 0 || c == 0) {
            return Err(Error::format(
                path,
                format!("header declares {r}x{c} but found {}x{}", m.rows(), m.cols()),
            ));
        }
    }
    Ok(m)
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut out = String::with_capacity(labels.len() * 3);
    for l in labels {
        let _ = writeln!(out, "{l}");
    }
    write_file(path, &out)
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = read_to_string(path)?;
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let l: usize = line
            .parse()
            .map_err(|_| Error::format(path, format!("line {}: bad label '{line}'", lineno + 1)))?;
        if l == 0 {
            return Err(Error::format(path, format!("line {}: labels start at 1", lineno + 1)));
        }
        labels.push(l);
    }
    Ok(labels)
}

/// Serializes one view as `N` blank-line separated `M x M` blocks.
pub fn write_view(path: &Path, view: &GraphViewTensor) -> Result<()> {
    let t = view.tensor();
    let (m, _, n) = t.dims();
    let data = t.as_slice();
    let mut out = String::with_capacity(m * m * n * 20);
    let mut row = vec![0.0; m];
    for k in 0..n {
        if k > 0 {
            out.push('\n');
        }
        for i in 0..m {
            for (j, x) in row.iter_mut().enumerate() {
                *x = data[i + m * (j + m * k)];
            }
            push_row(&mut out, &row);
        }
    }
    write_file(path, &out)
}

/// Parses a view file into an `M x M x N` tensor (not yet validated).
pub fn read_view(path: &Path, m: usize, n: usize) -> Result<Tensor3> {
    let text = read_to_string(path)?;
    let mut blocks: Vec<Vec<Vec<f64>>> = vec![Vec::new()];
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.starts_with('#') {
            continue;
        }
        if line.is_empty() {
            if blocks.last().is_some_and(|b| !b.is_empty()) {
                blocks.push(Vec::new());
            }
            continue;
        }
        let row = parse_row(line, path, lineno + 1)?;
        if row.len() != m {
            return Err(Error::format(
                path,
                format!("line {}: {} values, expected M = {m}", lineno + 1, row.len()),
            ));
        }
        blocks.last_mut().expect("non-empty").push(row);
    }
    if blocks.last().is_some_and(|b| b.is_empty()) {
        blocks.pop();
    }
    if blocks.len() != n {
        return Err(Error::format(
            path,
            format!("{} matrix blocks, manifest declares N = {n}", blocks.len()),
        ));
    }
    if let Some((k, b)) = blocks.iter().enumerate().find(|(_, b)| b.len() != m) {
        return Err(Error::format(
            path,
            format!("block {k} has {} rows, expected M = {m}", b.len()),
        ));
    }
    Tensor3::from_fn((m, m, n), |i, j, k| blocks[k][i][j])
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let path = manifest_path(path);
    let text = read_to_string(&path)?;
    let manifest: DatasetManifest = toml::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::format(
            &path,
            format!("unsupported format_version {}", manifest.format_version),
        ));
    }
    if manifest.views.is_empty() {
        return Err(Error::format(&path, "manifest lists no views"));
    }
    if manifest.subject_count == 0 {
        return Err(Error::format(&path, "subject_count must be positive"));
    }
    if let Some(v) = manifest.views.iter().find(|v| v.node_count == 0) {
        return Err(Error::format(&path, format!("view '{}' has node_count 0", v.name)));
    }
    Ok(manifest)
}

/// Loads and validates a dataset from its directory or manifest path.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest_file = manifest_path(path);
    let manifest = read_manifest(&manifest_file)?;
    let root = manifest_file.parent().unwrap_or(Path::new("."));
    let n = manifest.subject_count;
    let mut views = Vec::with_capacity(manifest.views.len());
    for entry in &manifest.views {
        let file = root.join(&entry.matrix_file);
        let t = read_view(&file, entry.node_count, n)?;
        let view = GraphViewTensor::symmetrized(t, LOAD_SYMMETRY_TOL).map_err(|e| match e {
            Error::Asymmetric { slice, asymmetry, .. } => Error::format(
                &file,
                format!(
                    "view '{}' slice {slice} is not symmetric (max asymmetry {asymmetry:e} > {LOAD_SYMMETRY_TOL:e})",
                    entry.name
                ),
            ),
            other => other,
        })?;
        views.push(view);
    }
    let labels = match manifest.labels_file.as_deref() {
        None | Some("") => None,
        Some(f) => {
            let file = root.join(f);
            let labels = read_labels(&file)?;
            if labels.len() != n {
                return Err(Error::format(
                    &file,
                    format!("{} labels for {n} subjects", labels.len()),
                ));
            }
            Some(labels)
        }
    };
    Ok(Dataset {
        manifest,
        views,
        labels,
    })
}

/// Checks that every view entry declares the same subject count, naming
/// the first pair that disagrees.
pub fn check_subject_counts(views: &[(&str, &GraphViewTensor)]) -> Result<()> {
    if let Some((first, x0)) = views.first() {
        for (name, x) in &views[1..] {
            if x.subject_count() != x0.subject_count() {
                return Err(Error::SubjectMismatch {
                    first: first.to_string(),
                    first_n: x0.subject_count(),
                    second: name.to_string(),
                    second_n: x.subject_count(),
                });
            }
        }
    }
    Ok(())
}

/// Writes a dataset directory and returns the manifest path.
pub fn save_dataset(
    dir: &Path,
    views: &[(&str, &GraphViewTensor)],
    labels: Option<&[usize]>,
    metadata: BTreeMap<String, String>,
) -> Result<PathBuf> {
    let (_, first) = views
        .first()
        .ok_or_else(|| Error::InvalidArgument("dataset needs at least one view".into()))?;
    check_subject_counts(views)?;
    let n = first.subject_count();
    if let Some(l) = labels {
        if l.len() != n {
            return Err(Error::Shape(format!("{} labels for {n} subjects", l.len())));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(views.len());
    for (name, view) in views {
        let file = format!("{name}.txt");
        write_view(&dir.join(&file), view)?;
        entries.push(ViewEntry {
            name: name.to_string(),
            node_count: view.node_count(),
            matrix_file: file,
        });
    }
    let labels_file = match labels {
        Some(l) => {
            write_labels(&dir.join("labels.txt"), l)?;
            Some("labels.txt".to_string())
        }
        None => None,
    };
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        subject_count: n,
        labels_file,
        views: entries,
        metadata,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = toml::to_string(&manifest).map_err(|e| Error::format(&path, e.to_string()))?;
    write_file(&path, &text)?;
    Ok(path)
}

/// Writes `iteration,<columns...>` rows, one per iteration starting at 1.
pub fn write_trace(path: &Path, columns: &[&str], series: &[&[f64]]) -> Result<()> {
    let len = series.first().map_or(0, |s| s.len());
    if series.iter().any(|s| s.len() != len) || columns.len() != series.len() {
        return Err(Error::Shape("trace columns have different lengths".into()));
    }
    let mut out = String::from("iteration");
    for c in columns {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for i in 0..len {
        let _ = write!(out, "{}", i + 1);
        for s in series {
            out.push(',');
            out.push_str(&format_f64(s[i]));
        }
        out.push('\n');
    }
    write_file(path, &out)
}

/// Reads back a file written by [`write_trace`] as columns.
pub fn read_trace(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::format(path, "empty trace file"))?
        .split(',')
        .skip(1)
        .map(str::to_string)
        .collect();
    let mut cols = vec![Vec::new(); header.len()];
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals = parse_row(line, path, lineno + 2)?;
        if vals.len() != header.len() + 1 {
            return Err(Error::format(path, format!("line {}: wrong column count", lineno + 2)));
        }
        for (c, v) in cols.iter_mut().zip(&vals[1..]) {
            c.push(*v);
        }
    }
    Ok((header, cols))
}

pub(crate) fn write_text(path: &Path, contents: &str) -> Result<()> {
    write_file(path, contents)
}
