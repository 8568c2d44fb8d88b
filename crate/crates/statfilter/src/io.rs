//! File formats: CSV time series, NDJSON snapshot records, and the JSON run
//! manifest.
//!
//! Every float is written with Rust's shortest round-trip formatting, so a
//! value survives write → read exactly and a reproducible run produces
//! byte-identical files no matter how many workers computed it. Readers
//! re-validate structure (column counts, uniform observation spacing) and
//! report failures as [`Error::Parse`] with the offending file and detail.

use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::filter::FilterRecord;
use crate::obs::ObservationSeries;
use crate::truth::TruthPath;

/// Shortest decimal representation that parses back to the same bits.
pub fn fmt_float(x: f64) -> String {
    format!("{x}")
}

/// Lowercase hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        write!(out, "{b:02x}").expect("writing to a String cannot fail");
    }
    out
}

fn parse_field(raw: &str, label: &str, line: usize, col: usize) -> Result<f64> {
    raw.trim().parse::<f64>().map_err(|e| Error::Parse {
        path: label.to_string(),
        detail: format!("row {line}, column {col}: `{raw}` is not a number ({e})"),
    })
}

fn parse_error(label: &str, detail: impl Into<String>) -> Error {
    Error::Parse { path: label.to_string(), detail: detail.into() }
}

/// Infer the state dimension from a CSV column count, given the count as a
/// function of `d`. Returns `None` when no `d` in 1..=512 fits.
fn infer_dim(width: usize, cols: impl Fn(usize) -> usize) -> Option<usize> {
    (1..=512).find(|&d| cols(d) == width)
}

fn push_mean_cov(record: &mut Vec<String>, mean: &DVector<f64>, cov: &DMatrix<f64>) {
    let d = mean.len();
    for i in 0..d {
        record.push(fmt_float(mean[i]));
    }
    for i in 0..d {
        for j in 0..d {
            record.push(fmt_float(cov[(i, j)]));
        }
    }
}

fn mean_cov_header(header: &mut Vec<String>, d: usize) {
    for i in 1..=d {
        header.push(format!("mean_{i}"));
    }
    for i in 1..=d {
        for j in 1..=d {
            header.push(format!("cov_{i}{j}"));
        }
    }
}

// ---------------------------------------------------------------------------
// Truth statistics CSV
// ---------------------------------------------------------------------------

/// One parsed row of a truth statistics file.
#[derive(Debug, Clone)]
pub struct TruthCsvRow {
    pub t: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub skew: DVector<f64>,
    pub kurt: DVector<f64>,
}

fn truth_width(d: usize) -> usize {
    1 + d + d * d + 2 * d
}

/// Write a truth path as CSV: `t, mean_1.., cov_11.. (row-major), skew_1..,
/// kurt_1..`.
pub fn write_truth_csv<W: Write>(w: W, path: &TruthPath) -> Result<()> {
    let d = path.d;
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["t".to_string()];
    mean_cov_header(&mut header, d);
    for i in 1..=d {
        header.push(format!("skew_{i}"));
    }
    for i in 1..=d {
        header.push(format!("kurt_{i}"));
    }
    wtr.write_record(&header)?;
    for rec in &path.records {
        let mut row = Vec::with_capacity(truth_width(d));
        row.push(fmt_float(rec.t));
        push_mean_cov(&mut row, &rec.stat.mean, &rec.stat.cov);
        for i in 0..d {
            row.push(fmt_float(rec.skew[i]));
        }
        for i in 0..d {
            row.push(fmt_float(rec.kurt[i]));
        }
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Read a truth statistics CSV; the dimension is inferred from the width.
pub fn read_truth_csv<R: Read>(r: R, label: &str) -> Result<(usize, Vec<TruthCsvRow>)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let width = rdr.headers().map_err(|e| parse_error(label, e.to_string()))?.len();
    let d = infer_dim(width, truth_width)
        .ok_or_else(|| parse_error(label, format!("{width} columns does not match 1 + d + d^2 + 2d for any d")))?;
    let mut rows = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| parse_error(label, e.to_string()))?;
        if rec.len() != width {
            return Err(parse_error(label, format!("row {}: expected {width} fields, got {}", idx + 2, rec.len())));
        }
        let f = |col: usize| parse_field(&rec[col], label, idx + 2, col + 1);
        let t = f(0)?;
        let mut mean = DVector::zeros(d);
        for i in 0..d {
            mean[i] = f(1 + i)?;
        }
        let mut cov = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] = f(1 + d + i * d + j)?;
            }
        }
        let base = 1 + d + d * d;
        let mut skew = DVector::zeros(d);
        let mut kurt = DVector::zeros(d);
        for i in 0..d {
            skew[i] = f(base + i)?;
            kurt[i] = f(base + d + i)?;
        }
        rows.push(TruthCsvRow { t, mean, cov, skew, kurt });
    }
    Ok((d, rows))
}

// ---------------------------------------------------------------------------
// Observation CSV
// ---------------------------------------------------------------------------

fn obs_width(d: usize) -> usize {
    1 + d + d * d
}

/// Write an observation series as CSV: `t, ym_1.., yv_11.. (row-major)`.
pub fn write_obs_csv<W: Write>(w: W, obs: &ObservationSeries) -> Result<()> {
    let d = obs.d;
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["t".to_string()];
    for i in 1..=d {
        header.push(format!("ym_{i}"));
    }
    for i in 1..=d {
        for j in 1..=d {
            header.push(format!("yv_{i}{j}"));
        }
    }
    wtr.write_record(&header)?;
    for n in 0..obs.n_knots() {
        let (t, y) = obs.knot(n);
        let mut row = Vec::with_capacity(obs_width(d));
        row.push(fmt_float(t));
        for k in 0..y.len() {
            row.push(fmt_float(y[k]));
        }
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Read an observation CSV, inferring `d` from the width and validating the
/// knot spacing is uniform to 1e-9 relative tolerance.
pub fn read_obs_csv<R: Read>(r: R, label: &str) -> Result<ObservationSeries> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let width = rdr.headers().map_err(|e| parse_error(label, e.to_string()))?.len();
    let d = infer_dim(width, obs_width)
        .ok_or_else(|| parse_error(label, format!("{width} columns does not match 1 + d + d^2 for any d")))?;
    let mut ts = Vec::new();
    let mut ys = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| parse_error(label, e.to_string()))?;
        if rec.len() != width {
            return Err(parse_error(label, format!("row {}: expected {width} fields, got {}", idx + 2, rec.len())));
        }
        let f = |col: usize| parse_field(&rec[col], label, idx + 2, col + 1);
        ts.push(f(0)?);
        let mut y = DVector::zeros(d + d * d);
        for k in 0..d + d * d {
            y[k] = f(1 + k)?;
        }
        ys.push(y);
    }
    if ts.len() < 2 {
        return Err(parse_error(label, format!("need at least 2 observation rows, got {}", ts.len())));
    }
    let delta = ts[1] - ts[0];
    if !(delta > 0.0) {
        return Err(parse_error(label, format!("knot times must increase, got spacing {delta}")));
    }
    let tol = 1e-9 * delta.abs().max(1.0);
    for n in 1..ts.len() {
        let gap = ts[n] - ts[n - 1];
        if (gap - delta).abs() > tol {
            return Err(parse_error(
                label,
                format!("non-uniform spacing at row {}: gap {gap} differs from {delta}", n + 2),
            ));
        }
    }
    ObservationSeries::new(d, ts[0], delta, ys)
}

// ---------------------------------------------------------------------------
// Filter statistics CSV
// ---------------------------------------------------------------------------

fn filter_width(d: usize) -> usize {
    1 + d + d * d + d + 2
}

/// One parsed row of a filter (or oracle moment-series) file.
#[derive(Debug, Clone)]
pub struct FilterCsvRow {
    pub t: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub hbar_m: DVector<f64>,
    pub tr_h_cov: f64,
    pub psd_projections: usize,
}

/// Write filter records as CSV: `t, mean, cov (row-major), hm_1.., tr_hcov,
/// psd_projections`. The same schema is used by the d=1 grid oracle so the
/// two outputs diff directly.
pub fn write_filter_csv<W: Write>(w: W, d: usize, records: &[FilterRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["t".to_string()];
    mean_cov_header(&mut header, d);
    for i in 1..=d {
        header.push(format!("hm_{i}"));
    }
    header.push("tr_hcov".to_string());
    header.push("psd_projections".to_string());
    wtr.write_record(&header)?;
    for rec in records {
        let mut row = Vec::with_capacity(filter_width(d));
        row.push(fmt_float(rec.t));
        push_mean_cov(&mut row, &rec.stat.mean, &rec.stat.cov);
        for i in 0..d {
            row.push(fmt_float(rec.hbar_m[i]));
        }
        row.push(fmt_float(rec.tr_h_cov));
        row.push(rec.psd_events.to_string());
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Read a filter statistics CSV; the dimension is inferred from the width.
pub fn read_filter_csv<R: Read>(r: R, label: &str) -> Result<(usize, Vec<FilterCsvRow>)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let width = rdr.headers().map_err(|e| parse_error(label, e.to_string()))?.len();
    let d = infer_dim(width, filter_width)
        .ok_or_else(|| parse_error(label, format!("{width} columns does not match 1 + d + d^2 + d + 2 for any d")))?;
    let mut rows = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| parse_error(label, e.to_string()))?;
        if rec.len() != width {
            return Err(parse_error(label, format!("row {}: expected {width} fields, got {}", idx + 2, rec.len())));
        }
        let f = |col: usize| parse_field(&rec[col], label, idx + 2, col + 1);
        let t = f(0)?;
        let mut mean = DVector::zeros(d);
        for i in 0..d {
            mean[i] = f(1 + i)?;
        }
        let mut cov = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] = f(1 + d + i * d + j)?;
            }
        }
        let base = 1 + d + d * d;
        let mut hbar_m = DVector::zeros(d);
        for i in 0..d {
            hbar_m[i] = f(base + i)?;
        }
        let tr_h_cov = f(base + d)?;
        let psd_projections = rec[base + d + 1].trim().parse::<usize>().map_err(|e| {
            parse_error(label, format!("row {}: psd_projections `{}` is not a count ({e})", idx + 2, &rec[base + d + 1]))
        })?;
        rows.push(FilterCsvRow { t, mean, cov, hbar_m, tr_h_cov, psd_projections });
    }
    Ok((d, rows))
}

// ---------------------------------------------------------------------------
// NDJSON snapshot records
// ---------------------------------------------------------------------------

/// One marginal histogram of a particle cloud at a snapshot time.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HistogramRecord {
    pub t: f64,
    /// Zero-based state component the histogram marginalizes onto.
    pub component: usize,
    /// `counts.len() + 1` ascending bin edges.
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
}

/// One grid-density snapshot. `z_centers` is included on the first record of
/// a stream and omitted afterwards (the grid does not change mid-run).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DensityRecord {
    pub t: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_centers: Option<Vec<f64>>,
    pub rho: Vec<f64>,
}

/// Write records as newline-delimited JSON, one record per line.
pub fn write_ndjson<W: Write, T: Serialize>(mut w: W, records: &[T]) -> Result<()> {
    for rec in records {
        let line = serde_json::to_string(rec)
            .map_err(|e| Error::Config(format!("failed to serialize NDJSON record: {e}")))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Read newline-delimited JSON records, skipping blank lines.
pub fn read_ndjson<R: Read, T: DeserializeOwned>(mut r: R, label: &str) -> Result<Vec<T>> {
    let mut text = String::new();
    r.read_to_string(&mut text)?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(line)
                .map_err(|e| parse_error(label, format!("line {}: {e}", idx + 1)))?,
        );
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Run manifest
// ---------------------------------------------------------------------------

/// Current manifest schema identifier.
pub const MANIFEST_SCHEMA: &str = "statfilter-run/v1";

/// The system definition a run used, embedded so the manifest is
/// self-contained.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SystemRef {
    /// Builtin name or the path the definition was loaded from.
    pub label: String,
    /// Full TOML text of the system definition.
    pub toml: String,
    /// SHA-256 of `toml`.
    pub sha256: String,
}

/// One file a run produced.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OutputRef {
    /// Path relative to the manifest's directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Reproducibility audit record written next to every run's outputs.
///
/// The manifest pins everything needed to reproduce the run — resolved
/// configuration, seed, and the full system definition — plus content hashes
/// of every file produced, so two runs can be compared without keeping the
/// (possibly large) outputs around.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub schema: String,
    /// Subcommand that produced the run.
    pub command: String,
    pub seed: u64,
    pub reproducible: bool,
    /// Resolved run configuration, serialized generically.
    pub config: serde_json::Value,
    /// SHA-256 of the canonical (sorted-key) JSON encoding of `config`.
    pub config_sha256: String,
    pub system: SystemRef,
    pub outputs: Vec<OutputRef>,
}

impl RunManifest {
    pub fn new<C: Serialize>(
        command: &str,
        seed: u64,
        reproducible: bool,
        config: &C,
        system_label: &str,
        system_toml: &str,
    ) -> Result<Self> {
        let config = serde_json::to_value(config)
            .map_err(|e| Error::Config(format!("failed to serialize run config: {e}")))?;
        let canonical = serde_json::to_vec(&config)
            .map_err(|e| Error::Config(format!("failed to serialize run config: {e}")))?;
        Ok(RunManifest {
            schema: MANIFEST_SCHEMA.to_string(),
            command: command.to_string(),
            seed,
            reproducible,
            config_sha256: sha256_hex(&canonical),
            config,
            system: SystemRef {
                label: system_label.to_string(),
                toml: system_toml.to_string(),
                sha256: sha256_hex(system_toml.as_bytes()),
            },
            outputs: Vec::new(),
        })
    }

    /// Hash `dir/rel` and append it to the output list.
    pub fn add_output(&mut self, dir: &Path, rel: &str) -> Result<()> {
        let bytes = fs::read(dir.join(rel))?;
        self.outputs.push(OutputRef {
            path: rel.to_string(),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    /// Write `manifest.json` into `dir` and return its path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("failed to serialize manifest: {e}")))?;
        fs::write(&path, text + "\n")?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| parse_error(&path.display().to_string(), e.to_string()))
    }
}

/// Create `dir` (and parents) if needed, then write `bytes` to `dir/rel`.
pub fn write_output(dir: &Path, rel: &str, bytes: &[u8]) -> Result<()> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}
