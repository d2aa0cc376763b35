//! Paired tests and bootstrap intervals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, ContinuousCDF, DiscreteCDF, Normal};

use super::{EvalError, Result};

/// Below this many nonzero differences the null distribution is enumerated.
pub const WILCOXON_EXACT_MAX: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wilcoxon {
    /// Pairs with a nonzero difference.
    pub n: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Two-sided.
    pub p_value: f64,
    pub exact: bool,
}

/// Average ranks (1-based) of `|d|`, ties sharing their mean rank.
pub fn signed_ranks(d: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..d.len()).collect();
    idx.sort_by(|&a, &b| d[a].abs().total_cmp(&d[b].abs()));
    let mut ranks = vec![0.0; d.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && d[idx[j + 1]].abs() == d[idx[i]].abs() {
            j += 1;
        }
        let r = (i + j + 2) as f64 / 2.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Wilcoxon signed-rank test on `x - y`. Zero differences are dropped.
/// With fewer than [`WILCOXON_EXACT_MAX`] pairs the p-value comes from the
/// exact permutation distribution of the observed ranks; otherwise from the
/// tie-corrected normal approximation with continuity correction.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<Wilcoxon> {
    if x.len() != y.len() {
        return Err(EvalError::LengthMismatch(x.len(), y.len()));
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|v| *v != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return Ok(Wilcoxon {
            n,
            w_plus: 0.0,
            w_minus: 0.0,
            p_value: 1.0,
            exact: true,
        });
    }
    let ranks = signed_ranks(&d);
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let total = n as f64 * (n as f64 + 1.0) / 2.0;
    let w_minus = total - w_plus;
    if n < WILCOXON_EXACT_MAX {
        // Doubled ranks are integers, so the sign-flip distribution is a
        // subset-sum count over them.
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let max: usize = doubled.iter().sum();
        let mut counts = vec![0.0f64; max + 1];
        counts[0] = 1.0;
        for &r in &doubled {
            for s in (r..=max).rev() {
                counts[s] += counts[s - r];
            }
        }
        let all = 2f64.powi(n as i32);
        let obs = (2.0 * w_plus).round() as usize;
        let lower: f64 = counts[..=obs].iter().sum::<f64>() / all;
        let upper: f64 = counts[obs..].iter().sum::<f64>() / all;
        return Ok(Wilcoxon {
            n,
            w_plus,
            w_minus,
            p_value: (2.0 * lower.min(upper)).min(1.0),
            exact: true,
        });
    }
    let nf = n as f64;
    let mut ties = 0.0;
    let mut sorted = ranks.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|r| **r == sorted[i]).count();
        ties += (j * j * j - j) as f64;
        i += j;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - ties / 48.0;
    let mean = total / 2.0;
    let dev = (w_plus - mean).abs();
    let z = if var > 0.0 { (dev - 0.5).max(0.0) / var.sqrt() } else { 0.0 };
    let normal = Normal::standard();
    Ok(Wilcoxon {
        n,
        w_plus,
        w_minus,
        p_value: (2.0 * (1.0 - normal.cdf(z))).min(1.0),
        exact: false,
    })
}

/// One-sided sign test: `P(X ≥ successes)` for `X ~ Binomial(n, 1/2)`.
pub fn sign_test(successes: u64, n: u64) -> f64 {
    if successes == 0 {
        return 1.0;
    }
    let b = Binomial::new(0.5, n).expect("valid binomial");
    b.sf(successes - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub estimate: f64,
    pub low: f64,
    pub high: f64,
}

/// Percentile bootstrap interval of the mean. Resample `i` draws from
/// ChaCha8 stream `i` of `seed`.
pub fn bootstrap_mean_ci(values: &[f64], resamples: usize, level: f64, seed: u64) -> Result<Interval> {
    if values.is_empty() {
        return Err(EvalError::Empty);
    }
    if resamples == 0 || !(level > 0.0 && level < 1.0) {
        return Err(EvalError::Invalid(format!("resamples {resamples}, level {level}")));
    }
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let q = |p: f64| means[((p * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    let tail = (1.0 - level) / 2.0;
    Ok(Interval {
        estimate: values.iter().sum::<f64>() / n as f64,
        low: q(tail),
        high: q(1.0 - tail),
    })
}
