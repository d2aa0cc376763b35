//! Masking-based faithfulness and noise-sensitivity of heatmaps.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::metrics::{classification_metrics, regression_metrics};
use super::{EvalError, Result};
use crate::datasets::{stack, Targets};
use crate::models::{argmax, Model, Task};
use crate::saliency::Heatmap;
use crate::tensor::Tensor;

/// Masked fractions whose drops are integrated into the faithfulness AUC.
pub const DEFAULT_FRACTIONS: [f64; 10] = [0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5];
/// Share of cells perturbed at each end of the ranking in the sensitivity test.
pub const SENSITIVITY_FRACTION: f64 = 0.2;
const PREDICT_BATCH: usize = 64;

/// Cell indices by descending heatmap value; ties are ordered by a
/// seeded random key.
pub fn rank_cells(h: &Heatmap, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let keys: Vec<u64> = (0..h.values.len()).map(|_| rng.random()).collect();
    let mut idx: Vec<usize> = (0..h.values.len()).collect();
    idx.sort_by(|&a, &b| h.values[b].total_cmp(&h.values[a]).then(keys[a].cmp(&keys[b])));
    idx
}

/// A uniformly random cell order.
pub fn random_order(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// Number of cells masked at fraction `f` of `n`.
pub fn cells_for_fraction(f: f64, n: usize) -> usize {
    ((f * n as f64).round() as usize).min(n)
}

/// Replaces the first `k` cells of `order` (row-major `T × C`) with the
/// per-channel `fill`.
pub fn mask_cells(sample: &Tensor, order: &[usize], k: usize, fill: &[f64]) -> Tensor {
    let c = sample.shape()[1];
    let mut out = sample.clone();
    let data = out.data_mut();
    for &cell in &order[..k] {
        data[cell] = fill[cell % c];
    }
    out
}

/// Accuracy for classification, R² (0 when undefined) for regression.
pub fn task_metric(model: &Model, samples: &[Tensor], targets: &Targets) -> Result<f64> {
    let x = stack(samples.iter());
    let raw = model.predict_raw(&x, PREDICT_BATCH)?;
    match (model.task(), targets) {
        (Task::Classification, Targets::Labels(l)) => {
            let preds: Vec<usize> = raw.iter().map(|r| argmax(r)).collect();
            Ok(classification_metrics(&preds, l)?.accuracy)
        }
        (Task::Regression, Targets::Values(v)) => {
            let preds: Vec<f64> = raw.iter().map(|r| model.unscale(r[0])).collect();
            Ok(regression_metrics(&preds, v)?.r2.unwrap_or(0.0))
        }
        _ => Err(EvalError::Invalid("targets do not match the model task".into())),
    }
}

/// Metric after masking the first `round(f·n)` cells of each sample's order.
pub fn masked_metric(
    model: &Model,
    samples: &[Tensor],
    targets: &Targets,
    orders: &[Vec<usize>],
    f: f64,
    fill: &[f64],
) -> Result<f64> {
    let masked: Vec<Tensor> = samples
        .iter()
        .zip(orders)
        .map(|(s, o)| mask_cells(s, o, cells_for_fraction(f, o.len()), fill))
        .collect();
    task_metric(model, &masked, targets)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessCurve {
    pub fractions: Vec<f64>,
    pub base: f64,
    pub metric: Vec<f64>,
    pub random_metric: Vec<f64>,
    /// `base - metric`.
    pub drop_abs: Vec<f64>,
    /// `(base - metric) / base`, zero when `base` is zero.
    pub drop_rel: Vec<f64>,
    pub random_drop_abs: Vec<f64>,
    pub random_drop_rel: Vec<f64>,
    /// Trapezoid integral of `drop_abs` over `fractions`.
    pub auc: f64,
    pub random_auc: f64,
}

pub fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2).zip(y.windows(2)).map(|(a, b)| (a[1] - a[0]) * (b[0] + b[1]) / 2.0).sum()
}

fn check_aligned(samples: &[Tensor], heatmaps: &[Heatmap]) -> Result<()> {
    if samples.len() != heatmaps.len() {
        return Err(EvalError::LengthMismatch(samples.len(), heatmaps.len()));
    }
    if samples.is_empty() {
        return Err(EvalError::Empty);
    }
    for (s, h) in samples.iter().zip(heatmaps) {
        if s.shape() != h.shape {
            return Err(EvalError::Invalid(format!("heatmap {:?} vs sample {:?}", h.shape, s.shape())));
        }
    }
    Ok(())
}

/// Deletion curve for heatmap-ranked masking and a random-order baseline
/// under the same fill. `fractions` must lie in (0, 1] and ascend.
pub fn deletion_test(
    model: &Model,
    samples: &[Tensor],
    targets: &Targets,
    heatmaps: &[Heatmap],
    fractions: &[f64],
    fill: &[f64],
    seed: u64,
) -> Result<FaithfulnessCurve> {
    check_aligned(samples, heatmaps)?;
    if fractions.is_empty() || fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
        return Err(EvalError::Invalid(format!("fractions must lie in (0, 1]: {fractions:?}")));
    }
    if fractions.windows(2).any(|w| w[1] <= w[0]) {
        return Err(EvalError::Invalid("fractions must ascend".into()));
    }
    if fill.len() != samples[0].shape()[1] {
        return Err(EvalError::LengthMismatch(fill.len(), samples[0].shape()[1]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ranked: Vec<Vec<usize>> = heatmaps.iter().map(|h| rank_cells(h, &mut rng)).collect();
    let random: Vec<Vec<usize>> = heatmaps.iter().map(|h| random_order(h.values.len(), &mut rng)).collect();
    let base = task_metric(model, samples, targets)?;
    let mut metric = Vec::new();
    let mut random_metric = Vec::new();
    for &f in fractions {
        metric.push(masked_metric(model, samples, targets, &ranked, f, fill)?);
        random_metric.push(masked_metric(model, samples, targets, &random, f, fill)?);
    }
    let drops = |m: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let abs: Vec<f64> = m.iter().map(|v| base - v).collect();
        let rel = abs.iter().map(|d| if base != 0.0 { d / base } else { 0.0 }).collect();
        (abs, rel)
    };
    let (drop_abs, drop_rel) = drops(&metric);
    let (random_drop_abs, random_drop_rel) = drops(&random_metric);
    Ok(FaithfulnessCurve {
        fractions: fractions.to_vec(),
        base,
        auc: trapezoid(fractions, &drop_abs),
        random_auc: trapezoid(fractions, &random_drop_abs),
        metric,
        random_metric,
        drop_abs,
        drop_rel,
        random_drop_abs,
        random_drop_rel,
    })
}

impl FaithfulnessCurve {
    /// Plot-ready rows: `fraction,metric,random_metric,drop_abs,drop_rel,random_drop_abs,random_drop_rel`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("fraction,metric,random_metric,drop_abs,drop_rel,random_drop_abs,random_drop_rel\n");
        for i in 0..self.fractions.len() {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                self.fractions[i],
                self.metric[i],
                self.random_metric[i],
                self.drop_abs[i],
                self.drop_rel[i],
                self.random_drop_abs[i],
                self.random_drop_rel[i]
            ));
        }
        s
    }
}

/// Output the sensitivity test watches: the predicted-class logit, or the
/// regression output.
fn watched_outputs(model: &Model, samples: &[Tensor], classes: Option<&[usize]>) -> Result<Vec<f64>> {
    let raw = model.predict_raw(&stack(samples.iter()), PREDICT_BATCH)?;
    Ok(match classes {
        Some(c) => raw.iter().zip(c).map(|(r, k)| r[*k]).collect(),
        None => raw.iter().map(|r| r[0]).collect(),
    })
}

/// Mean |Δoutput| from Gaussian noise of scale `sigma` on the top 20% of
/// heatmap-ranked cells, divided by the same for the bottom 20%.
pub fn sensitivity_test(model: &Model, samples: &[Tensor], heatmaps: &[Heatmap], sigma: f64, seed: u64) -> Result<f64> {
    check_aligned(samples, heatmaps)?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(EvalError::Undefined(format!("sensitivity needs sigma > 0, got {sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    let raw = model.predict_raw(&stack(samples.iter()), PREDICT_BATCH)?;
    let classes: Option<Vec<usize>> = match model.task() {
        Task::Classification => Some(raw.iter().map(|r| argmax(r)).collect()),
        Task::Regression => None,
    };
    let clean = watched_outputs(model, samples, classes.as_deref())?;
    let mut top = Vec::with_capacity(samples.len());
    let mut bottom = Vec::with_capacity(samples.len());
    for (s, h) in samples.iter().zip(heatmaps) {
        let order = rank_cells(h, &mut rng);
        let k = cells_for_fraction(SENSITIVITY_FRACTION, order.len()).max(1);
        let mut noisy = |cells: &[usize]| {
            let mut out = s.clone();
            for &cell in cells {
                out.data_mut()[cell] += normal.sample(&mut rng);
            }
            out
        };
        top.push(noisy(&order[..k]));
        bottom.push(noisy(&order[order.len() - k..]));
    }
    let mean_delta = |xs: &[Tensor]| -> Result<f64> {
        let out = watched_outputs(model, xs, classes.as_deref())?;
        Ok(out.iter().zip(&clean).map(|(a, b)| (a - b).abs()).sum::<f64>() / out.len() as f64)
    };
    let (num, den) = (mean_delta(&top)?, mean_delta(&bottom)?);
    if den == 0.0 {
        return Err(EvalError::Undefined("noise on bottom cells left every output unchanged".into()));
    }
    Ok(num / den)
}
