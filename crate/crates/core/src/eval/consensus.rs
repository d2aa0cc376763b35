//! Explanation error of fusion strategies against known importance masks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::stats::{bootstrap_mean_ci, Interval};
use super::{EvalError, Result};
use crate::fusion::{fit_linear_projection, fuse, minmax_normalize, FusionConfig, Projection, Strategy};
use crate::saliency::{Heatmap, Source};

/// Upper bound of the iid uniform background noise in each branch.
pub const BACKGROUND_NOISE: f64 = 0.1;
/// Blob amplitudes are uniform in this range.
pub const BLOB_AMPLITUDE: (f64, f64) = (0.5, 1.0);
/// Interval lengths of the true region and of each blob.
pub const REGION_LEN: (usize, usize) = (5, 15);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusInstance {
    pub hr: Heatmap,
    pub ht: Heatmap,
    pub truth: Heatmap,
}

/// A rectangle of one channel and an inclusive time interval.
type Block = (usize, usize, usize);

fn random_block(t: usize, c: usize, rng: &mut ChaCha8Rng) -> Block {
    let len = rng.random_range(REGION_LEN.0..=REGION_LEN.1).min(t);
    let start = rng.random_range(0..=t - len);
    (rng.random_range(0..c), start, start + len - 1)
}

fn overlaps(a: Block, b: Block) -> bool {
    a.0 == b.0 && a.1 <= b.2 && b.1 <= a.2
}

fn paint(values: &mut [f64], c: usize, b: Block, v: f64) {
    for t in b.1..=b.2 {
        values[t * c + b.0] += v;
    }
}

fn noise(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.0..BACKGROUND_NOISE)).collect()
}

/// `hr = H* + A + n_r`, `ht = H* + B + n_t`, with blocks `H*`, `A`, `B`
/// pairwise disjoint and independent backgrounds.
pub fn disjoint_noise_instance(t: usize, c: usize, rng: &mut ChaCha8Rng) -> ConsensusInstance {
    let truth_block = random_block(t, c, rng);
    let mut blobs: Vec<Block> = Vec::new();
    while blobs.len() < 2 {
        let b = random_block(t, c, rng);
        if !overlaps(b, truth_block) && blobs.iter().all(|o| !overlaps(b, *o)) {
            blobs.push(b);
        }
    }
    let mut truth = vec![0.0; t * c];
    paint(&mut truth, c, truth_block, 1.0);
    let mut hr: Vec<f64> = truth.iter().zip(noise(t * c, rng)).map(|(a, b)| a + b).collect();
    let mut ht: Vec<f64> = truth.iter().zip(noise(t * c, rng)).map(|(a, b)| a + b).collect();
    paint(&mut hr, c, blobs[0], rng.random_range(BLOB_AMPLITUDE.0..BLOB_AMPLITUDE.1));
    paint(&mut ht, c, blobs[1], rng.random_range(BLOB_AMPLITUDE.0..BLOB_AMPLITUDE.1));
    instance(t, c, hr, ht, truth)
}

/// Both branches carry the same blob and the same background.
pub fn shared_noise_instance(t: usize, c: usize, rng: &mut ChaCha8Rng) -> ConsensusInstance {
    let truth_block = random_block(t, c, rng);
    let blob = loop {
        let b = random_block(t, c, rng);
        if !overlaps(b, truth_block) {
            break b;
        }
    };
    let mut truth = vec![0.0; t * c];
    paint(&mut truth, c, truth_block, 1.0);
    let mut hr: Vec<f64> = truth.iter().zip(noise(t * c, rng)).map(|(a, b)| a + b).collect();
    paint(&mut hr, c, blob, rng.random_range(BLOB_AMPLITUDE.0..BLOB_AMPLITUDE.1));
    let ht = hr.clone();
    instance(t, c, hr, ht, truth)
}

fn instance(t: usize, c: usize, hr: Vec<f64>, ht: Vec<f64>, truth: Vec<f64>) -> ConsensusInstance {
    let mk = |v, s| Heatmap::new(t, c, v, s).expect("nonnegative construction");
    ConsensusInstance {
        hr: mk(hr, Source::Resnet),
        ht: mk(ht, Source::Transformer),
        truth: mk(truth, Source::Fused),
    }
}

/// `n` instances from one seeded stream.
pub fn instance_family(
    n: usize,
    t: usize,
    c: usize,
    seed: u64,
    make: fn(usize, usize, &mut ChaCha8Rng) -> ConsensusInstance,
) -> Vec<ConsensusInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| make(t, c, &mut rng)).collect()
}

/// Squared Euclidean distance between the min-max normalized map and `truth`.
pub fn explanation_error(fused: &Heatmap, truth: &Heatmap) -> f64 {
    minmax_normalize(fused)
        .values
        .iter()
        .zip(&truth.values)
        .map(|(a, b)| (a - b).powi(2))
        .sum()
}

/// Fits the concatenation projection to a calibration family by least squares.
pub fn calibrate_concat(calibration: &[ConsensusInstance]) -> Result<Projection> {
    let inputs: Vec<(Heatmap, Heatmap)> = calibration.iter().map(|i| (i.hr.clone(), i.ht.clone())).collect();
    let targets: Vec<Heatmap> = calibration.iter().map(|i| i.truth.clone()).collect();
    fit_linear_projection(&inputs, &targets).map_err(|e| EvalError::Invalid(e.to_string()))
}

/// The three compared arms: multiplicative (α = 1), weighted (α = 0.5) and
/// the calibrated concatenation projection.
pub fn default_arms(concat: Projection) -> Vec<(String, FusionConfig)> {
    vec![
        ("multiplicative".into(), FusionConfig::default()),
        (
            "weighted".into(),
            FusionConfig {
                strategy: Strategy::Weighted,
                alpha: 0.5,
                ..FusionConfig::default()
            },
        ),
        (
            "concat_project".into(),
            FusionConfig {
                strategy: Strategy::ConcatProject,
                projection: concat,
                ..FusionConfig::default()
            },
        ),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmErrors {
    pub strategy: String,
    pub errors: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub baseline: String,
    pub other: String,
    /// Mean of `other − baseline` with a bootstrap interval.
    pub difference: Interval,
    /// Share of instances where the baseline error is strictly lower.
    pub baseline_wins: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusReport {
    pub arms: Vec<ArmErrors>,
    /// Strategy names by ascending mean error.
    pub ordering: Vec<String>,
    pub paired: Vec<PairedComparison>,
}

/// Per-arm errors over `instances` and paired comparisons of the first arm
/// against each other arm (bootstrap of `resamples` draws).
pub fn consensus_experiment(
    instances: &[ConsensusInstance],
    arms: &[(String, FusionConfig)],
    resamples: usize,
    seed: u64,
) -> Result<ConsensusReport> {
    if instances.is_empty() || arms.is_empty() {
        return Err(EvalError::Empty);
    }
    for inst in instances {
        if inst.truth.shape != inst.hr.shape || inst.ht.shape != inst.hr.shape {
            return Err(EvalError::Invalid("every instance needs a ground-truth mask of the heatmap shape".into()));
        }
    }
    let mut out = Vec::with_capacity(arms.len());
    for (name, cfg) in arms {
        let errors = instances
            .iter()
            .map(|i| {
                fuse(&i.hr, &i.ht, cfg)
                    .map(|f| explanation_error(&f, &i.truth))
                    .map_err(|e| EvalError::Invalid(e.to_string()))
            })
            .collect::<Result<Vec<f64>>>()?;
        let mean = errors.iter().sum::<f64>() / errors.len() as f64;
        out.push(ArmErrors {
            strategy: name.clone(),
            errors,
            mean,
        });
    }
    let mut ordering: Vec<&ArmErrors> = out.iter().collect();
    ordering.sort_by(|a, b| a.mean.total_cmp(&b.mean));
    let ordering = ordering.iter().map(|a| a.strategy.clone()).collect();
    let base = &out[0];
    let mut paired = Vec::new();
    for other in &out[1..] {
        let diffs: Vec<f64> = other.errors.iter().zip(&base.errors).map(|(o, b)| o - b).collect();
        let wins = base.errors.iter().zip(&other.errors).filter(|(b, o)| b < o).count();
        paired.push(PairedComparison {
            baseline: base.strategy.clone(),
            other: other.strategy.clone(),
            difference: bootstrap_mean_ci(&diffs, resamples, 0.95, seed)?,
            baseline_wins: wins as f64 / instances.len() as f64,
        });
    }
    Ok(ConsensusReport {
        arms: out,
        ordering,
        paired,
    })
}
