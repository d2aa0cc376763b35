//! Dataset bundles: synthetic generation, preprocessing and splits.

mod synthetic;
mod uci;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::Task;
use crate::tensor::{NumericError, Tensor};

pub use synthetic::{channel_amplitude, generate_synthetic, Injection, Pattern, PatternMix, SyntheticSpec, SYNTHETIC_CHANNELS};
pub use uci::{impute_linear, load_energy_csv, read_table, unwindow, windows, CsvTable, EnergyCsv, UciOptions};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing header row")]
    MissingHeader,
    #[error("column {0:?} not found in header")]
    MissingColumn(String),
    #[error("row {row}, column {column:?}: non-numeric value {value:?}")]
    NonNumeric { row: usize, column: String, value: String },
    #[error("row {row}: timestamp {value:?} is not after the previous one")]
    NonMonotone { row: usize, value: String },
    #[error("row {row}: cannot parse timestamp {value:?}")]
    BadTimestamp { row: usize, value: String },
    #[error("channel {0:?} has no observed values")]
    FullyMissing(String),
    #[error("class {class} has {count} samples, fewer than the {splits} requested splits")]
    ClassTooSmall { class: usize, count: usize, splits: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "values")]
pub enum Targets {
    Labels(Vec<usize>),
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Labels(v) => v.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match self {
            Targets::Labels(v) => Some(v),
            Targets::Values(_) => None,
        }
    }

    pub fn values(&self) -> Option<&[f64]> {
        match self {
            Targets::Values(v) => Some(v),
            Targets::Labels(_) => None,
        }
    }

    pub fn as_f64(&self, i: usize) -> f64 {
        match self {
            Targets::Labels(v) => v[i] as f64,
            Targets::Values(v) => v[i],
        }
    }
}

/// Real-time stamps shared by overlapping windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub stamps: Vec<String>,
    /// Row index of each sample's first timestep.
    pub starts: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    Zscore,
    Unit,
}

/// Train-split statistics; normalized value is `(x - shift) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mode: NormMode,
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
    /// Channels with zero spread on train, left centered.
    pub degenerate: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub samples: Vec<Tensor>,
    pub targets: Targets,
    pub channel_names: Vec<String>,
    pub timestamps: Option<Timeline>,
    pub task: Task,
    pub splits: Vec<Split>,
    /// Unmodified signals, synthetic only.
    pub clean: Option<Vec<Tensor>>,
    /// Ground-truth importance per sample, row-major `T × C`, synthetic only.
    pub masks: Option<Vec<Vec<bool>>>,
    pub injections: Option<Vec<Option<Injection>>>,
    pub norm: Option<NormStats>,
    /// Human-readable notes (flagged columns, degenerate channels).
    pub flags: Vec<String>,
}

impl DatasetBundle {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.samples.first().map_or(0, |s| s.shape()[0])
    }

    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn num_classes(&self) -> usize {
        match &self.targets {
            Targets::Labels(l) => l.iter().max().map_or(0, |m| m + 1).max(2),
            Targets::Values(_) => 1,
        }
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Stacks samples into a `[B, T, C]` batch.
    pub fn batch(&self, idx: &[usize]) -> Tensor {
        stack(idx.iter().map(|&i| &self.samples[i]))
    }

    pub fn sample_timestamps(&self, i: usize) -> Option<&[String]> {
        self.timestamps.as_ref().map(|tl| {
            let s = tl.starts[i];
            &tl.stamps[s..s + self.seq_len()]
        })
    }

    /// Per-channel mean over the train split.
    pub fn train_channel_means(&self) -> Vec<f64> {
        let c = self.channels();
        let mut sum = vec![0.0; c];
        let mut n = 0usize;
        for i in self.indices(Split::Train) {
            for row in self.samples[i].data().chunks(c) {
                row.iter().zip(&mut sum).for_each(|(v, s)| *s += v);
                n += 1;
            }
        }
        sum.iter().map(|s| s / n.max(1) as f64).collect()
    }

    /// Checks the structural invariants: uniform shapes and aligned lists.
    pub fn validate(&self) -> Result<()> {
        let (t, c) = (self.seq_len(), self.channels());
        if self.samples.iter().any(|s| s.shape() != [t, c]) {
            return Err(DataError::Invalid("samples must share one T × C shape".into()));
        }
        if self.targets.len() != self.len() || self.splits.len() != self.len() {
            return Err(DataError::Invalid("targets and splits must align with samples".into()));
        }
        Ok(())
    }
}

pub fn stack<'a>(samples: impl Iterator<Item = &'a Tensor>) -> Tensor {
    let mut data = Vec::new();
    let mut b = 0;
    let mut shape = vec![0, 0];
    for s in samples {
        shape = s.shape().to_vec();
        data.extend_from_slice(s.data());
        b += 1;
    }
    Tensor::new(vec![b, shape[0], shape[1]], data).expect("stacked samples share a shape")
}

/// Computes per-channel statistics on the train split.
pub fn channel_stats(bundle: &DatasetBundle, mode: NormMode) -> NormStats {
    let c = bundle.channels();
    let train = bundle.indices(Split::Train);
    let rows = || {
        train
            .iter()
            .flat_map(move |&i| bundle.samples[i].data().chunks(c))
    };
    let mut shift = vec![0.0; c];
    let mut scale = vec![1.0; c];
    let mut degenerate = Vec::new();
    for ch in 0..c {
        let vals = || rows().map(move |r| r[ch]);
        let (s, sc) = match mode {
            NormMode::Zscore => {
                let n = vals().count().max(1) as f64;
                let mean = vals().sum::<f64>() / n;
                let var = vals().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                (mean, var.sqrt())
            }
            NormMode::Unit => {
                let lo = vals().fold(f64::INFINITY, f64::min);
                let hi = vals().fold(f64::NEG_INFINITY, f64::max);
                (lo, hi - lo)
            }
        };
        shift[ch] = s;
        if sc > 1e-12 {
            scale[ch] = sc;
        } else {
            degenerate.push(ch);
        }
    }
    NormStats {
        mode,
        shift,
        scale,
        degenerate,
    }
}

/// Normalizes every split with train-split statistics. Clean signals, when
/// present, are transformed identically.
pub fn normalize_channels(mut bundle: DatasetBundle, mode: NormMode) -> DatasetBundle {
    let stats = channel_stats(&bundle, mode);
    let c = bundle.channels();
    let apply = |t: &mut Tensor| {
        for row in t.data_mut().chunks_mut(c) {
            for (ch, v) in row.iter_mut().enumerate() {
                *v = (*v - stats.shift[ch]) / stats.scale[ch];
            }
        }
    };
    bundle.samples.iter_mut().for_each(apply);
    if let Some(clean) = &mut bundle.clean {
        clean.iter_mut().for_each(apply);
    }
    for &ch in &stats.degenerate {
        bundle
            .flags
            .push(format!("channel {:?} has zero variance on train; left centered", bundle.channel_names[ch]));
    }
    bundle.norm = Some(stats);
    bundle
}

/// Circular time shift within `±jitter_frac·T` plus iid Gaussian noise.
pub fn augment(sample: &Tensor, jitter_frac: f64, noise_sigma: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let (t, c) = (sample.shape()[0], sample.shape()[1]);
    let max_shift = (jitter_frac * t as f64).floor() as i64;
    let shift = if max_shift > 0 { rng.random_range(-max_shift..=max_shift) } else { 0 };
    let mut out = shift_time(sample, shift);
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).expect("positive sigma");
        out.data_mut().iter_mut().for_each(|v| *v += normal.sample(rng));
    }
    debug_assert_eq!(out.shape(), [t, c]);
    out
}

/// Circular shift: value at `t` moves to `(t + shift) mod T`.
pub fn shift_time(sample: &Tensor, shift: i64) -> Tensor {
    let (t, c) = (sample.shape()[0], sample.shape()[1]);
    let mut out = vec![0.0; t * c];
    for (i, row) in sample.data().chunks(c).enumerate() {
        let j = (i as i64 + shift).rem_euclid(t as i64) as usize;
        out[j * c..(j + 1) * c].copy_from_slice(row);
    }
    Tensor::new(vec![t, c], out).expect("same shape")
}

/// Assigns split tags. Classification is stratified: samples are grouped by
/// class, shuffled within class, and labelled by a low-discrepancy sequence
/// so both the totals and each class track the fractions.
pub fn split(bundle: &mut DatasetBundle, fractions: [f64; 3], seed: u64) -> Result<()> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::Invalid(format!("split fractions {fractions:?} must be in [0,1] and sum to 1")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = bundle.len();
    let order: Vec<usize> = match &bundle.targets {
        Targets::Labels(labels) => {
            let classes = labels.iter().max().map_or(0, |m| m + 1);
            let nonzero = fractions.iter().filter(|f| **f > 0.0).count();
            let mut order = Vec::with_capacity(n);
            for class in 0..classes {
                let mut members: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
                if !members.is_empty() && members.len() < nonzero {
                    return Err(DataError::ClassTooSmall {
                        class,
                        count: members.len(),
                        splits: nonzero,
                    });
                }
                members.shuffle(&mut rng);
                order.extend(members);
            }
            order
        }
        Targets::Values(_) => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            order
        }
    };
    let tags = [Split::Train, Split::Val, Split::Test];
    let mut assigned = [0.0f64; 3];
    bundle.splits = vec![Split::Train; n];
    for (j, &i) in order.iter().enumerate() {
        let k = (0..3)
            .max_by(|&a, &b| {
                let da = (j + 1) as f64 * fractions[a] - assigned[a];
                let db = (j + 1) as f64 * fractions[b] - assigned[b];
                da.partial_cmp(&db).unwrap().then(b.cmp(&a))
            })
            .unwrap();
        assigned[k] += 1.0;
        bundle.splits[i] = tags[k];
    }
    Ok(())
}
