use std::path::Path;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use super::{DataError, DatasetBundle, Result, Split, Targets, Timeline};
use crate::models::Task;
use crate::tensor::Tensor;

const DATE_FORMATS: [&str; 3] = ["%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M", "%Y-%m-%dT%H:%M:%S"];
/// Columns the energy dataset documents as random noise attributes.
const RANDOM_COLUMNS: [&str; 2] = ["rv1", "rv2"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UciOptions {
    pub date_column: String,
    pub target: String,
    pub window: usize,
    pub stride: usize,
    /// Steps past the window end at which the target is read.
    pub horizon: usize,
    pub impute: bool,
    /// Keep the target column among the input channels.
    pub include_target: bool,
}

impl Default for UciOptions {
    fn default() -> Self {
        UciOptions {
            date_column: "date".into(),
            target: "Appliances".into(),
            window: 100,
            stride: 1,
            horizon: 0,
            impute: true,
            include_target: false,
        }
    }
}

/// Fills gaps: interior runs linearly, leading and trailing runs with the
/// nearest observed value.
pub fn impute_linear(series: &[Option<f64>]) -> Option<Vec<f64>> {
    let observed: Vec<usize> = (0..series.len()).filter(|&i| series[i].is_some()).collect();
    let (&first, &last) = (observed.first()?, observed.last()?);
    let mut out = vec![0.0; series.len()];
    out[..=first].fill(series[first].unwrap());
    for w in observed.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (va, vb) = (series[a].unwrap(), series[b].unwrap());
        for (k, slot) in out[a..=b].iter_mut().enumerate() {
            *slot = va + (vb - va) * k as f64 / (b - a) as f64;
        }
    }
    out[last..].fill(series[last].unwrap());
    Some(out)
}

/// Start rows of windows of length `window` with step `stride` that leave
/// `horizon` rows after the window.
pub fn windows(rows: usize, window: usize, stride: usize, horizon: usize) -> Vec<usize> {
    if window == 0 || stride == 0 || rows < window + horizon {
        return Vec::new();
    }
    (0..=rows - window - horizon).step_by(stride).collect()
}

/// Concatenates non-overlapping `[T, C]` windows back into rows.
pub fn unwindow(samples: &[Tensor]) -> Vec<Vec<f64>> {
    samples
        .iter()
        .flat_map(|s| {
            let c = s.shape()[1];
            s.data().chunks(c).map(<[f64]>::to_vec).collect::<Vec<_>>()
        })
        .collect()
}

fn parse_cell(raw: &str) -> Option<f64> {
    let s = raw.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("nan") || s == "?" {
        return None;
    }
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

fn parse_time(s: &str) -> Option<NaiveDateTime> {
    DATE_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s.trim(), f).ok())
}

/// A parsed CSV before windowing.
#[derive(Debug, Clone)]
pub struct CsvTable {
    pub stamps: Vec<String>,
    pub columns: Vec<String>,
    /// Column-major values after imputation.
    pub values: Vec<Vec<f64>>,
}

impl CsvTable {
    pub fn rows(&self) -> usize {
        self.stamps.len()
    }
}

pub fn read_table(path: &Path, opts: &UciOptions) -> Result<CsvTable> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(DataError::MissingHeader);
    }
    let date_idx = header
        .iter()
        .position(|h| *h == opts.date_column)
        .ok_or_else(|| DataError::MissingColumn(opts.date_column.clone()))?;
    if !header.contains(&opts.target) {
        return Err(DataError::MissingColumn(opts.target.clone()));
    }
    let columns: Vec<String> = header.iter().filter(|h| **h != opts.date_column).cloned().collect();
    let mut raw: Vec<Vec<Option<f64>>> = vec![Vec::new(); columns.len()];
    let mut stamps = Vec::new();
    let mut prev: Option<NaiveDateTime> = None;
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = row + 2;
        let stamp = rec.get(date_idx).unwrap_or("").to_string();
        let t = parse_time(&stamp).ok_or_else(|| DataError::BadTimestamp {
            row: line,
            value: stamp.clone(),
        })?;
        if prev.is_some_and(|p| t <= p) {
            return Err(DataError::NonMonotone { row: line, value: stamp });
        }
        prev = Some(t);
        stamps.push(stamp);
        let mut col = 0;
        for (j, cell) in rec.iter().enumerate() {
            if j == date_idx {
                continue;
            }
            let v = parse_cell(cell);
            if v.is_none() && !opts.impute {
                return Err(DataError::NonNumeric {
                    row: line,
                    column: header[j].clone(),
                    value: cell.to_string(),
                });
            }
            if col < raw.len() {
                raw[col].push(v);
            }
            col += 1;
        }
        for r in raw.iter_mut().skip(col) {
            r.push(None);
        }
    }
    let values = raw
        .iter()
        .zip(&columns)
        .map(|(series, name)| impute_linear(series).ok_or_else(|| DataError::FullyMissing(name.clone())))
        .collect::<Result<Vec<_>>>()?;
    Ok(CsvTable { stamps, columns, values })
}

/// Loaded energy CSV: windowed bundle plus the raw row count.
#[derive(Debug, Clone)]
pub struct EnergyCsv {
    pub bundle: DatasetBundle,
    pub raw_rows: usize,
}

/// Reads a dated CSV and cuts it into regression windows whose target is
/// the target column at the window's last row plus `horizon`.
pub fn load_energy_csv(path: &Path, opts: &UciOptions) -> Result<EnergyCsv> {
    if opts.window == 0 || opts.stride == 0 {
        return Err(DataError::Invalid("window and stride must be positive".into()));
    }
    let table = read_table(path, opts)?;
    let target_idx = table.columns.iter().position(|c| *c == opts.target).expect("checked in read_table");
    let features: Vec<usize> = (0..table.columns.len())
        .filter(|&j| opts.include_target || j != target_idx)
        .collect();
    let c = features.len();
    let starts = windows(table.rows(), opts.window, opts.stride, opts.horizon);
    let mut samples = Vec::with_capacity(starts.len());
    let mut targets = Vec::with_capacity(starts.len());
    for &s in &starts {
        let mut data = Vec::with_capacity(opts.window * c);
        for r in s..s + opts.window {
            data.extend(features.iter().map(|&j| table.values[j][r]));
        }
        samples.push(Tensor::new(vec![opts.window, c], data)?);
        targets.push(table.values[target_idx][s + opts.window - 1 + opts.horizon]);
    }
    let channel_names: Vec<String> = features.iter().map(|&j| table.columns[j].clone()).collect();
    let flags = channel_names
        .iter()
        .filter(|n| RANDOM_COLUMNS.contains(&n.as_str()))
        .map(|n| format!("channel {n:?} is a random attribute with no expected relevance"))
        .collect();
    let n = samples.len();
    Ok(EnergyCsv {
        raw_rows: table.rows(),
        bundle: DatasetBundle {
            samples,
            targets: Targets::Values(targets),
            channel_names,
            timestamps: Some(Timeline {
                stamps: table.stamps,
                starts,
            }),
            task: Task::Regression,
            splits: vec![Split::Train; n],
            clean: None,
            masks: None,
            injections: None,
            norm: None,
            flags,
        },
    })
}
