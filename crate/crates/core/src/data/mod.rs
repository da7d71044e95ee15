//! Ingestion, normalization, windowing and splitting of multivariate process
//! records, plus a synthetic multimode plant.
//!
//! CSV contract: UTF-8, comma-separated, one header row. Every column except
//! `label` (required, non-negative integer) and `mode` (optional,
//! non-negative integer) is a process variable, in file order. Rows are time
//! steps; one file is one run.

mod synth;
mod window;

pub use synth::{synth_generate, FaultKind, FaultSpec, GenConfig, GeneratedRun, ModeSpec};
pub use window::{stratified_split, SplitSpec, WindowRef, WindowedDataset};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Standard deviations below this are replaced by it.
pub const STD_FLOOR: f64 = 1e-8;

/// One run: an `N × v` matrix with a label (and optionally a mode) per row.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    pub columns: Vec<String>,
    /// Row-major `N × v`.
    pub values: Vec<f64>,
    pub labels: Vec<usize>,
    pub modes: Option<Vec<usize>>,
}

impl RawSeries {
    pub fn new(columns: Vec<String>, values: Vec<f64>, labels: Vec<usize>, modes: Option<Vec<usize>>) -> Result<Self> {
        let v = columns.len();
        if v == 0 {
            return Err(Error::Data("series has no variable columns".into()));
        }
        if labels.is_empty() {
            return Err(Error::Data("series has no rows".into()));
        }
        if values.len() != labels.len() * v {
            return Err(Error::Data(format!(
                "{} values do not fill {} rows of {v} variables",
                values.len(),
                labels.len()
            )));
        }
        if modes.as_ref().is_some_and(|m| m.len() != labels.len()) {
            return Err(Error::Data("mode column length differs from label column".into()));
        }
        Ok(Self { columns, values, labels, modes })
    }

    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn vars(&self) -> usize {
        self.columns.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let v = self.vars();
        &self.values[i * v..][..v]
    }
}

/// Read one run. With `num_classes`, labels outside `0..num_classes` are
/// rejected.
pub fn load_csv(path: &Path, num_classes: Option<usize>) -> Result<RawSeries> {
    let shown = path.display();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let find = |name: &str| header.iter().position(|h| h.trim() == name);
    let label_col = find("label").ok_or_else(|| Error::Data(format!("{shown}: missing required column \"label\"")))?;
    let mode_col = find("mode");
    let var_cols: Vec<usize> = (0..header.len()).filter(|&c| c != label_col && Some(c) != mode_col).collect();
    if var_cols.is_empty() {
        return Err(Error::Data(format!("{shown}: no variable columns besides label/mode")));
    }

    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut modes = mode_col.map(|_| Vec::new());
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = i + 2;
        if record.len() != header.len() {
            return Err(Error::Data(format!(
                "{shown}: row {line} has {} fields, header has {}",
                record.len(),
                header.len()
            )));
        }
        let index = |c: usize, what: &str| -> Result<usize> {
            record[c].trim().parse::<usize>().map_err(|_| {
                Error::Data(format!(
                    "{shown}: row {line}, column \"{}\": {what} {:?} is not a non-negative integer",
                    &header[c], &record[c]
                ))
            })
        };
        let label = index(label_col, "label")?;
        if let Some(l) = num_classes.filter(|&l| label >= l) {
            return Err(Error::Data(format!(
                "{shown}: row {line}, column \"label\": {label} is outside 0..{l}"
            )));
        }
        labels.push(label);
        if let (Some(c), Some(m)) = (mode_col, modes.as_mut()) {
            m.push(index(c, "mode")?);
        }
        for &c in &var_cols {
            let x: f64 = record[c].trim().parse().map_err(|_| {
                Error::Data(format!(
                    "{shown}: row {line}, column \"{}\": {:?} is not a number",
                    &header[c], &record[c]
                ))
            })?;
            if !x.is_finite() {
                return Err(Error::Data(format!("{shown}: row {line}, column \"{}\": value is not finite", &header[c])));
            }
            values.push(x);
        }
    }
    if labels.is_empty() {
        return Err(Error::Data(format!("{shown}: no data rows")));
    }
    let columns = var_cols.iter().map(|&c| header[c].trim().to_string()).collect();
    RawSeries::new(columns, values, labels, modes)
}

/// Write a run in the schema [`load_csv`] reads. Values use the shortest
/// representation that parses back to the same `f64`.
pub fn write_csv(path: &Path, series: &RawSeries) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header: Vec<&str> = series.columns.iter().map(String::as_str).collect();
    header.push("label");
    if series.modes.is_some() {
        header.push("mode");
    }
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    let mut fields = Vec::with_capacity(header.len());
    for i in 0..series.rows() {
        fields.clear();
        fields.extend(series.row(i).iter().map(|x| x.to_string()));
        fields.push(series.labels[i].to_string());
        if let Some(m) = &series.modes {
            fields.push(m[i].to_string());
        }
        w.write_record(&fields).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!("checked is_io_error"),
        }
    } else {
        Error::Data(format!("{}: {e}", path.display()))
    }
}

/// Per-variable z-score parameters estimated from fault-free rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub source: NormSource,
}

/// Where a [`NormStats`] came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormSource {
    pub normal_label: usize,
    /// Fault-free rows pooled over all runs and modes.
    pub rows: usize,
    /// Variables whose std was raised to the floor.
    pub floored: Vec<usize>,
}

impl NormStats {
    /// Wrap given moments; stds below the floor are raised and flagged.
    pub fn new(mean: Vec<f64>, std: Vec<f64>, normal_label: usize, rows: usize) -> Self {
        let floored = std.iter().enumerate().filter(|(_, &s)| !(s >= STD_FLOOR)).map(|(i, _)| i).collect();
        let std = std.into_iter().map(|s| if s >= STD_FLOOR { s } else { STD_FLOOR }).collect();
        Self {
            mean,
            std,
            source: NormSource { normal_label, rows, floored },
        }
    }

    /// Mean 0, std 1 for `v` variables.
    pub fn identity(v: usize) -> Self {
        Self::new(vec![0.0; v], vec![1.0; v], 0, 0)
    }
}

/// Population mean/std per variable over the rows labeled `normal_label`,
/// pooled across `series`.
pub fn compute_norm_stats(series: &[RawSeries], normal_label: usize) -> Result<NormStats> {
    let v = check_same_width(series)?;
    let normal_rows = || {
        series
            .iter()
            .flat_map(|s| (0..s.rows()).filter(move |&i| s.labels[i] == normal_label).map(move |i| s.row(i)))
    };
    let n = normal_rows().count();
    if n < 2 {
        return Err(Error::Data(format!(
            "need at least 2 rows with the normal label {normal_label} to estimate normalization, found {n}"
        )));
    }
    let mut mean = vec![0.0; v];
    for row in normal_rows() {
        mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; v];
    for row in normal_rows() {
        for j in 0..v {
            var[j] += (row[j] - mean[j]).powi(2);
        }
    }
    let std = var.into_iter().map(|s| (s / n as f64).sqrt()).collect();
    Ok(NormStats::new(mean, std, normal_label, n))
}

fn check_same_width(series: &[RawSeries]) -> Result<usize> {
    let first = series.first().ok_or_else(|| Error::Data("no series given".into()))?;
    let v = first.vars();
    if let Some(bad) = series.iter().position(|s| s.vars() != v) {
        return Err(Error::Data(format!(
            "series {bad} has {} variables, series 0 has {v}",
            series[bad].vars()
        )));
    }
    Ok(v)
}

/// `(x - mean) / std` per variable; labels and modes are kept.
pub fn apply_zscore(series: &RawSeries, stats: &NormStats) -> Result<RawSeries> {
    let v = series.vars();
    if stats.mean.len() != v || stats.std.len() != v {
        return Err(Error::Data(format!(
            "normalization has {} variables, series has {v}",
            stats.mean.len()
        )));
    }
    let values = series
        .values
        .chunks_exact(v)
        .flat_map(|row| row.iter().enumerate().map(|(j, x)| (x - stats.mean[j]) / stats.std[j]))
        .collect();
    Ok(RawSeries {
        values,
        ..series.clone()
    })
}
