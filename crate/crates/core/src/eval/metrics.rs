use serde::{Deserialize, Serialize};

use super::{EvalError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub rmse: f64,
    /// `None` when the targets have zero variance.
    pub r2: Option<f64>,
}

/// Accuracy and macro-F1; classes absent from both inputs are skipped.
pub fn classification_metrics(preds: &[usize], labels: &[usize]) -> Result<ClassificationMetrics> {
    if preds.len() != labels.len() {
        return Err(EvalError::LengthMismatch(preds.len(), labels.len()));
    }
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    let k = preds.iter().chain(labels).max().unwrap() + 1;
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fneg = vec![0usize; k];
    for (&p, &l) in preds.iter().zip(labels) {
        if p == l {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fneg[l] += 1;
        }
    }
    let correct: usize = tp.iter().sum();
    let mut f1_sum = 0.0;
    let mut present = 0;
    for c in 0..k {
        if tp[c] + fp[c] + fneg[c] == 0 {
            continue;
        }
        present += 1;
        let denom = 2 * tp[c] + fp[c] + fneg[c];
        f1_sum += 2.0 * tp[c] as f64 / denom as f64;
    }
    Ok(ClassificationMetrics {
        accuracy: correct as f64 / preds.len() as f64,
        macro_f1: f1_sum / present as f64,
    })
}

pub fn regression_metrics(preds: &[f64], targets: &[f64]) -> Result<RegressionMetrics> {
    if preds.len() != targets.len() {
        return Err(EvalError::LengthMismatch(preds.len(), targets.len()));
    }
    if targets.len() < 2 {
        return Err(EvalError::Empty);
    }
    let n = targets.len() as f64;
    let ss_res: f64 = preds.iter().zip(targets).map(|(p, y)| (p - y).powi(2)).sum();
    let mean = targets.iter().sum::<f64>() / n;
    let ss_tot: f64 = targets.iter().map(|y| (y - mean).powi(2)).sum();
    Ok(RegressionMetrics {
        rmse: (ss_res / n).sqrt(),
        r2: (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot),
    })
}
