//! Aligning and fusing branch heatmaps, then normalizing, smoothing and
//! cutting them into salient regions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::saliency::{Heatmap, Source};

/// Spread below this is treated as a constant map.
pub const MINMAX_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("heatmap shapes differ: {0:?} vs {1:?}")]
    Shape([usize; 2], [usize; 2]),
    #[error("heatmap values must be finite and nonnegative")]
    Negative,
    #[error("alpha {0} outside [0, 1]")]
    BadAlpha(f64),
    #[error("smoothing window {0} must be odd and positive")]
    EvenWindow(usize),
    #[error("smoothing window {window} exceeds length {len}")]
    WindowTooLong { window: usize, len: usize },
    #[error("quantile {0} outside (0, 1)")]
    BadQuantile(f64),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("target length must be at least 1")]
    TargetLen,
}

pub type Result<T> = std::result::Result<T, FusionError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Multiplicative,
    Weighted,
    Learned,
    ConcatProject,
}

impl Strategy {
    pub const NAMES: [&'static str; 4] = ["multiplicative", "weighted", "learned", "concat_project"];

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "multiplicative" => Some(Self::Multiplicative),
            "weighted" => Some(Self::Weighted),
            "learned" => Some(Self::Learned),
            "concat_project" => Some(Self::ConcatProject),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        Self::NAMES[self as usize]
    }
}

/// Per-cell `relu(w_r · hr + w_t · ht + bias)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub w_r: f64,
    pub w_t: f64,
    pub bias: f64,
}

impl Default for Projection {
    fn default() -> Self {
        Projection {
            w_r: 0.5,
            w_t: 0.5,
            bias: 0.0,
        }
    }
}

impl Projection {
    fn apply(&self, r: f64, t: f64) -> f64 {
        (self.w_r * r + self.w_t * t + self.bias).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub strategy: Strategy,
    pub alpha: f64,
    pub smoothing_window: usize,
    pub threshold_quantile: f64,
    pub use_dtw: bool,
    /// Runs on one channel separated by at most this many cells merge.
    pub gap_merge: usize,
    pub projection: Projection,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            strategy: Strategy::Multiplicative,
            alpha: 1.0,
            smoothing_window: 5,
            threshold_quantile: 0.2,
            use_dtw: false,
            gap_merge: 2,
            projection: Projection::default(),
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(FusionError::BadAlpha(self.alpha));
        }
        if self.smoothing_window.is_multiple_of(2) {
            return Err(FusionError::EvenWindow(self.smoothing_window));
        }
        if !(self.threshold_quantile > 0.0 && self.threshold_quantile < 1.0) {
            return Err(FusionError::BadQuantile(self.threshold_quantile));
        }
        Ok(())
    }
}

/// Align-corners linear interpolation to `target` points. Endpoints are kept.
pub fn upsample_linear(v: &[f64], target: usize) -> Result<Vec<f64>> {
    if target == 0 {
        return Err(FusionError::TargetLen);
    }
    let n = v.len();
    if n == 0 {
        return Err(FusionError::Empty("sequence"));
    }
    if n == 1 || target == 1 {
        return Ok(vec![v[0]; target]);
    }
    let scale = (n - 1) as f64 / (target - 1) as f64;
    Ok((0..target)
        .map(|i| {
            let p = i as f64 * scale;
            let lo = (p.floor() as usize).min(n - 1);
            let hi = (lo + 1).min(n - 1);
            let f = p - lo as f64;
            v[lo] + (v[hi] - v[lo]) * f
        })
        .collect())
}

/// Upsamples every channel of `h` to `target` timesteps.
pub fn upsample_heatmap(h: &Heatmap, target: usize) -> Result<Heatmap> {
    let c = h.c();
    let cols = (0..c)
        .map(|ch| upsample_linear(&h.channel(ch), target))
        .collect::<Result<Vec<_>>>()?;
    let values = (0..target).flat_map(|t| cols.iter().map(move |col| col[t])).collect();
    let mut out = h.clone();
    out.shape = [target, c];
    out.values = values;
    out.timestamps = None;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtwAlignment {
    /// `a` resampled onto `b`'s indices by averaging matched values.
    pub warped: Vec<f64>,
    pub path: Vec<(usize, usize)>,
    pub cost: f64,
}

/// Minimal-cost monotone alignment under `|a_i - b_j|`. Backtracking
/// prefers the diagonal, then advancing `a`, then advancing `b`.
pub fn dtw_align(a: &[f64], b: &[f64]) -> Result<DtwAlignment> {
    let (n, m) = (a.len(), b.len());
    if n == 0 || m == 0 {
        return Err(FusionError::Empty("dtw input"));
    }
    let mut d = vec![f64::INFINITY; n * m];
    for i in 0..n {
        for j in 0..m {
            let step = (a[i] - b[j]).abs();
            let prev = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 { d[(i - 1) * m + j - 1] } else { f64::INFINITY };
                let up = if i > 0 { d[(i - 1) * m + j] } else { f64::INFINITY };
                let left = if j > 0 { d[i * m + j - 1] } else { f64::INFINITY };
                diag.min(up).min(left)
            };
            d[i * m + j] = prev + step;
        }
    }
    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        let diag = if i > 0 && j > 0 { d[(i - 1) * m + j - 1] } else { f64::INFINITY };
        let up = if i > 0 { d[(i - 1) * m + j] } else { f64::INFINITY };
        let left = if j > 0 { d[i * m + j - 1] } else { f64::INFINITY };
        if diag <= up && diag <= left {
            i -= 1;
            j -= 1;
        } else if up <= left {
            i -= 1;
        } else {
            j -= 1;
        }
        path.push((i, j));
    }
    path.reverse();
    let mut sum = vec![0.0; m];
    let mut count = vec![0usize; m];
    for &(i, j) in &path {
        sum[j] += a[i];
        count[j] += 1;
    }
    let warped = sum.iter().zip(&count).map(|(s, c)| s / *c as f64).collect();
    Ok(DtwAlignment {
        warped,
        path,
        cost: d[n * m - 1],
    })
}

fn check_pair(hr: &Heatmap, ht: &Heatmap) -> Result<()> {
    if hr.shape != ht.shape {
        return Err(FusionError::Shape(hr.shape, ht.shape));
    }
    let bad = |h: &Heatmap| h.values.iter().any(|v| !v.is_finite() || *v < 0.0);
    if bad(hr) || bad(ht) {
        return Err(FusionError::Negative);
    }
    Ok(())
}

/// Warps `hr` in time onto `ht` using DTW between their min-max scaled
/// channel-mean profiles; every channel gets the same warping.
pub fn dtw_warp(hr: &Heatmap, ht: &Heatmap) -> Result<Heatmap> {
    check_pair(hr, ht)?;
    let scaled = |v: Vec<f64>| minmax_slice(&v);
    let al = dtw_align(&scaled(hr.temporal_profile()), &scaled(ht.temporal_profile()))?;
    let (t, c) = (hr.t(), hr.c());
    let mut sum = vec![0.0; t * c];
    let mut count = vec![0usize; t];
    for &(i, j) in &al.path {
        for ch in 0..c {
            sum[j * c + ch] += hr.at(i, ch);
        }
        count[j] += 1;
    }
    let mut out = hr.clone();
    out.values = sum
        .iter()
        .enumerate()
        .map(|(k, s)| s / count[k / c] as f64)
        .collect();
    Ok(out)
}

/// Combines two equally shaped nonnegative maps by `cfg.strategy`.
pub fn fuse(hr: &Heatmap, ht: &Heatmap, cfg: &FusionConfig) -> Result<Heatmap> {
    check_pair(hr, ht)?;
    if !(0.0..=1.0).contains(&cfg.alpha) {
        return Err(FusionError::BadAlpha(cfg.alpha));
    }
    let a = cfg.alpha;
    let pairs = hr.values.iter().zip(&ht.values);
    let values: Vec<f64> = match cfg.strategy {
        Strategy::Multiplicative => pairs.map(|(r, t)| a * r * t).collect(),
        Strategy::Weighted => pairs.map(|(r, t)| a * r + (1.0 - a) * t).collect(),
        Strategy::Learned => {
            let p = Projection {
                w_r: cfg.projection.w_r.max(0.0),
                w_t: cfg.projection.w_t.max(0.0),
                bias: cfg.projection.bias,
            };
            pairs.map(|(r, t)| p.apply(*r, *t)).collect()
        }
        Strategy::ConcatProject => pairs.map(|(r, t)| cfg.projection.apply(*r, *t)).collect(),
    };
    let mut out = hr.clone();
    out.values = values;
    out.source = Source::Fused;
    out.normalized = false;
    out.strategy = Some(cfg.strategy.as_str().into());
    Ok(out)
}

/// Fits a per-cell projection by full-batch gradient descent on mean
/// squared error against `targets`. `nonneg` clamps the two weights at 0
/// after every step.
pub fn fit_projection(
    inputs: &[(Heatmap, Heatmap)],
    targets: &[Heatmap],
    nonneg: bool,
    steps: usize,
    lr: f64,
) -> Result<Projection> {
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(FusionError::Empty("projection training set"));
    }
    for ((r, t), y) in inputs.iter().zip(targets) {
        check_pair(r, t)?;
        if y.shape != r.shape {
            return Err(FusionError::Shape(y.shape, r.shape));
        }
    }
    let n: usize = targets.iter().map(|y| y.values.len()).sum();
    let mut p = Projection::default();
    for _ in 0..steps {
        let (mut gr, mut gt, mut gb) = (0.0, 0.0, 0.0);
        for ((hr, ht), y) in inputs.iter().zip(targets) {
            for ((r, t), yv) in hr.values.iter().zip(&ht.values).zip(&y.values) {
                let z = p.w_r * r + p.w_t * t + p.bias;
                if z <= 0.0 {
                    continue;
                }
                let e = 2.0 * (z - yv) / n as f64;
                gr += e * r;
                gt += e * t;
                gb += e;
            }
        }
        p.w_r -= lr * gr;
        p.w_t -= lr * gt;
        p.bias -= lr * gb;
        if nonneg {
            p.w_r = p.w_r.max(0.0);
            p.w_t = p.w_t.max(0.0);
        }
    }
    Ok(p)
}

/// Least-squares fit of the unrestricted linear projection
/// `w_r · hr + w_t · ht + bias` to `targets`, solved in closed form. Collinear
/// branches get a ridge of 1e-9 of the mean weight diagonal, which splits
/// their weight evenly.
pub fn fit_linear_projection(inputs: &[(Heatmap, Heatmap)], targets: &[Heatmap]) -> Result<Projection> {
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(FusionError::Empty("projection training set"));
    }
    let mut a = [[0.0f64; 4]; 3];
    for ((hr, ht), y) in inputs.iter().zip(targets) {
        check_pair(hr, ht)?;
        if y.shape != hr.shape {
            return Err(FusionError::Shape(y.shape, hr.shape));
        }
        for ((r, t), yv) in hr.values.iter().zip(&ht.values).zip(&y.values) {
            let x = [*r, *t, 1.0];
            for i in 0..3 {
                for j in 0..3 {
                    a[i][j] += x[i] * x[j];
                }
                a[i][3] += x[i] * yv;
            }
        }
    }
    let solved = solve3(a).or_else(|| {
        let ridge = 1e-9 * (a[0][0] + a[1][1]) / 2.0;
        let mut r = a;
        r[0][0] += ridge;
        r[1][1] += ridge;
        solve3(r)
    });
    let x = solved.ok_or(FusionError::Empty("nondegenerate projection inputs"))?;
    Ok(Projection {
        w_r: x[0],
        w_t: x[1],
        bias: x[2],
    })
}

/// Gauss-Jordan with partial pivoting on an augmented 3 × 4 system.
#[allow(clippy::needless_range_loop)]
fn solve3(mut a: [[f64; 4]; 3]) -> Option<[f64; 3]> {
    let scale = a.iter().map(|r| r[..3].iter().map(|v| v.abs()).fold(0.0, f64::max)).fold(0.0, f64::max);
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        a.swap(col, pivot);
        if a[col][col].abs() <= 1e-12 * scale.max(1e-300) {
            return None;
        }
        for row in 0..3 {
            if row != col {
                let f = a[row][col] / a[col][col];
                for k in col..4 {
                    a[row][k] -= f * a[col][k];
                }
            }
        }
    }
    Some([a[0][3] / a[0][0], a[1][3] / a[1][1], a[2][3] / a[2][2]])
}

#[allow(clippy::neg_cmp_op_on_partial_ord)]
fn minmax_slice(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo > MINMAX_EPS) {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

/// Global `(v - min) / (max - min)`; a constant map becomes all zeros.
pub fn minmax_normalize(h: &Heatmap) -> Heatmap {
    let mut out = h.clone();
    out.values = minmax_slice(&h.values);
    out.normalized = true;
    out
}

/// Centered moving average along time with windows truncated at the edges.
pub fn smooth_moving_average(h: &Heatmap, window: usize) -> Result<Heatmap> {
    if window.is_multiple_of(2) {
        return Err(FusionError::EvenWindow(window));
    }
    let (t, c) = (h.t(), h.c());
    if window > t {
        return Err(FusionError::WindowTooLong { window, len: t });
    }
    let half = window / 2;
    let mut out = h.clone();
    for ch in 0..c {
        let col = h.channel(ch);
        let mut prefix = vec![0.0; t + 1];
        for i in 0..t {
            prefix[i + 1] = prefix[i] + col[i];
        }
        for i in 0..t {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(t);
            let mean = (prefix[hi] - prefix[lo]) / (hi - lo) as f64;
            out.values[i * c + ch] = mean.clamp(
                col[lo..hi].iter().copied().fold(f64::INFINITY, f64::min),
                col[lo..hi].iter().copied().fold(f64::NEG_INFINITY, f64::max),
            );
        }
    }
    out.normalized = false;
    Ok(out)
}

/// The three exported maps of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedMaps {
    pub resnet: Heatmap,
    pub transformer: Heatmap,
    pub fused: Heatmap,
}

/// Upsample when lengths differ, optionally warp, min-max each branch,
/// fuse, then smooth and min-max. Branch maps get the same post-processing,
/// so weighted fusion with `alpha = 1` reproduces the ResNet map exactly.
pub fn fuse_branches(hr: &Heatmap, ht: &Heatmap, cfg: &FusionConfig) -> Result<FusedMaps> {
    cfg.validate()?;
    let hr = if hr.t() != ht.t() { upsample_heatmap(hr, ht.t())? } else { hr.clone() };
    let hr = if cfg.use_dtw { dtw_warp(&hr, ht)? } else { hr };
    let (nr, nt) = (minmax_normalize(&hr), minmax_normalize(ht));
    let fused = fuse(&nr, &nt, cfg)?;
    Ok(FusedMaps {
        fused: post_process(&fused, cfg)?,
        resnet: post_process(&nr, cfg)?,
        transformer: post_process(&nt, cfg)?,
    })
}

pub fn fuse_pipeline(hr: &Heatmap, ht: &Heatmap, cfg: &FusionConfig) -> Result<Heatmap> {
    Ok(fuse_branches(hr, ht, cfg)?.fused)
}

/// Smoothing then min-max, as applied to every exported map.
pub fn post_process(h: &Heatmap, cfg: &FusionConfig) -> Result<Heatmap> {
    let w = cfg.smoothing_window.min(if h.t() % 2 == 1 { h.t() } else { h.t().saturating_sub(1) }).max(1);
    Ok(minmax_normalize(&smooth_moving_average(h, w)?))
}

/// A maximal run of salient cells on one channel, inclusive bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SalientRegion {
    pub channel: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub channel_name: Option<String>,
    pub t_start: usize,
    pub t_end: usize,
    pub peak_value: f64,
    pub peak_time: usize,
    /// Real-time bounds of `t_start` and `t_end` when the data has a clock.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub timestamps: Option<(String, String)>,
}

impl SalientRegion {
    pub fn width(&self) -> usize {
        self.t_end - self.t_start + 1
    }
}

/// Cells at or above the nearest-rank top-`q` value. When that value is
/// the map minimum and the map is not constant, minimum cells are left out.
pub fn threshold_mask(h: &Heatmap, q: f64) -> Result<Vec<bool>> {
    if !(q > 0.0 && q < 1.0) {
        return Err(FusionError::BadQuantile(q));
    }
    let n = h.values.len();
    if n == 0 {
        return Err(FusionError::Empty("heatmap"));
    }
    let mut sorted = h.values.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let k = ((q * n as f64).ceil() as usize).clamp(1, n);
    let thr = sorted[k - 1];
    let (lo, hi) = (sorted[n - 1], sorted[0]);
    Ok(h.values.iter().map(|&v| v >= thr && (v > lo || hi == lo)).collect())
}

/// Per-channel runs of `mask`, merging runs whose gap is at most `gap_merge`.
pub fn regions_from_mask(h: &Heatmap, mask: &[bool], gap_merge: usize) -> Vec<SalientRegion> {
    let (t, c) = (h.t(), h.c());
    let mut out = Vec::new();
    for ch in 0..c {
        let mut runs: Vec<(usize, usize)> = Vec::new();
        let mut i = 0;
        while i < t {
            if !mask[i * c + ch] {
                i += 1;
                continue;
            }
            let s = i;
            while i < t && mask[i * c + ch] {
                i += 1;
            }
            match runs.last_mut() {
                Some(last) if s - last.1 - 1 <= gap_merge => last.1 = i - 1,
                _ => runs.push((s, i - 1)),
            }
        }
        for (s, e) in runs {
            let mut peak_time = s;
            for ti in s..=e {
                if h.at(ti, ch) > h.at(peak_time, ch) {
                    peak_time = ti;
                }
            }
            out.push(SalientRegion {
                channel: ch,
                channel_name: None,
                t_start: s,
                t_end: e,
                peak_value: h.at(peak_time, ch),
                peak_time,
                timestamps: None,
            });
        }
    }
    out
}

pub fn threshold_regions(h: &Heatmap, q: f64, gap_merge: usize) -> Result<Vec<SalientRegion>> {
    let mask = threshold_mask(h, q)?;
    Ok(regions_from_mask(h, &mask, gap_merge))
}
