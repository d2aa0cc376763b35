//! Per-branch relevance maps: Grad-CAM for the convolutional branch,
//! attention rollout and global attention for the transformer, channel
//! saliency from input gradients, and receptive-field analysis.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::upsample_linear;
use crate::models::{argmax, ForwardCache, Mode, Model, ModelError, Task, Track};
use crate::tensor::{NumericError, Tensor};

/// Row sums of attention inputs must be within this of 1.
pub const STOCHASTIC_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SaliencyError {
    #[error("model has no {0} branch")]
    MissingBranch(&'static str),
    #[error("target {target} out of range for {outputs} outputs")]
    TargetOutOfRange { target: usize, outputs: usize },
    #[error("sample {sample} out of range for batch of {batch}")]
    SampleOutOfRange { sample: usize, batch: usize },
    #[error("no gradient reached {0}; was the pass run with input tracking?")]
    MissingGradients(&'static str),
    #[error("row {row} of layer {layer} sums to {sum}, not 1")]
    NonStochastic { layer: usize, row: usize, sum: f64 },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("heatmap shape {got:?} does not match {expected:?}")]
    Shape { expected: [usize; 2], got: [usize; 2] },
    #[error("heatmap values must be finite and nonnegative")]
    Negative,
    #[error("heatmap json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

pub type Result<T> = std::result::Result<T, SaliencyError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Resnet,
    Transformer,
    Fused,
}

/// A `T × C` relevance grid, row-major (time-major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub shape: [usize; 2],
    pub values: Vec<f64>,
    pub source: Source,
    pub normalized: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel_names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamps: Option<Vec<String>>,
}

impl Heatmap {
    pub fn new(t: usize, c: usize, values: Vec<f64>, source: Source) -> Result<Self> {
        let h = Heatmap {
            shape: [t, c],
            values,
            source,
            normalized: false,
            strategy: None,
            channel_names: None,
            timestamps: None,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn zeros(t: usize, c: usize, source: Source) -> Self {
        Heatmap::new(t, c, vec![0.0; t * c], source).expect("zeros are valid")
    }

    pub fn validate(&self) -> Result<()> {
        let [t, c] = self.shape;
        if self.values.len() != t * c {
            return Err(SaliencyError::Shape {
                expected: self.shape,
                got: [self.values.len(), 1],
            });
        }
        if self.values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(SaliencyError::Negative);
        }
        if self.channel_names.as_ref().is_some_and(|n| n.len() != c)
            || self.timestamps.as_ref().is_some_and(|s| s.len() != t)
        {
            return Err(SaliencyError::Shape {
                expected: self.shape,
                got: [
                    self.timestamps.as_ref().map_or(t, Vec::len),
                    self.channel_names.as_ref().map_or(c, Vec::len),
                ],
            });
        }
        Ok(())
    }

    pub fn t(&self) -> usize {
        self.shape[0]
    }

    pub fn c(&self) -> usize {
        self.shape[1]
    }

    pub fn at(&self, t: usize, c: usize) -> f64 {
        self.values[t * self.shape[1] + c]
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        (0..self.t()).map(|t| self.at(t, c)).collect()
    }

    /// Mean over channels at each timestep.
    pub fn temporal_profile(&self) -> Vec<f64> {
        self.values
            .chunks(self.c().max(1))
            .map(|row| row.iter().sum::<f64>() / row.len().max(1) as f64)
            .collect()
    }

    pub fn with_names(mut self, names: Option<&[String]>) -> Self {
        self.channel_names = names.map(<[String]>::to_vec);
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("heatmap serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let h: Heatmap = serde_json::from_str(s)?;
        h.validate()?;
        Ok(h)
    }

    /// Values as a `[T, C]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape.to_vec(), self.values.clone()).expect("validated")
    }
}

/// `relu(Σ_k α_k A_k(t))` with `α_k` the time-mean of `grads[k]`.
pub fn grad_cam_map(features: &[Vec<f64>], grads: &[Vec<f64>]) -> Result<Vec<f64>> {
    let t = features.first().map_or(0, Vec::len);
    if features.is_empty() || t == 0 {
        return Err(SaliencyError::Empty("feature maps"));
    }
    let mut map = vec![0.0; t];
    for (a, g) in features.iter().zip(grads) {
        let alpha = g.iter().sum::<f64>() / g.len() as f64;
        map.iter_mut().zip(a).for_each(|(m, v)| *m += alpha * v);
    }
    map.iter_mut().for_each(|m| *m = m.max(0.0));
    Ok(map)
}

/// Rows of a `[K, T']` slab as vectors.
fn rows(data: &[f64], k: usize, t: usize) -> Vec<Vec<f64>> {
    (0..k).map(|i| data[i * t..(i + 1) * t].to_vec()).collect()
}

/// Square matrix as rows.
pub type Matrix = Vec<Vec<f64>>;

fn identity(n: usize) -> Matrix {
    (0..n)
        .map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect())
        .collect()
}

fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let n = a.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i][k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i][j] += aik * b[k][j];
            }
        }
    }
    out
}

fn check_stochastic(layer: usize, m: &Matrix) -> Result<()> {
    let n = m.len();
    for (row, r) in m.iter().enumerate() {
        let sum: f64 = r.iter().sum();
        if r.len() != n || (sum - 1.0).abs() > STOCHASTIC_TOL || r.iter().any(|v| *v < 0.0) {
            return Err(SaliencyError::NonStochastic { layer, row, sum });
        }
    }
    Ok(())
}

/// Rollout result: `R = Ā_L ⋯ Ā_1` and the column means of `R`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub matrix: Matrix,
    pub relevance: Vec<f64>,
}

/// Multiplies residual-corrected maps `Ā = rownorm((A + I) / 2)` from the
/// first layer up. Inputs are head-averaged, one per layer.
pub fn rollout(layers: &[Matrix]) -> Result<Rollout> {
    let n = layers.first().map_or(0, Vec::len);
    if layers.is_empty() || n == 0 {
        return Err(SaliencyError::Empty("attention layers"));
    }
    let mut r = identity(n);
    for (l, a) in layers.iter().enumerate() {
        check_stochastic(l, a)?;
        let corrected: Matrix = a
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let mut row: Vec<f64> = row
                    .iter()
                    .enumerate()
                    .map(|(j, v)| 0.5 * (v + f64::from(u8::from(i == j))))
                    .collect();
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
                row
            })
            .collect();
        r = matmul(&corrected, &r);
    }
    let relevance = (0..n)
        .map(|j| r.iter().map(|row| row[j]).sum::<f64>() / n as f64)
        .collect();
    Ok(Rollout { matrix: r, relevance })
}

/// Arithmetic mean of every supplied map.
pub fn mean_maps(maps: &[Matrix]) -> Result<Matrix> {
    let n = maps.first().map_or(0, Vec::len);
    if maps.is_empty() || n == 0 {
        return Err(SaliencyError::Empty("attention maps"));
    }
    let mut out = vec![vec![0.0; n]; n];
    for m in maps {
        for (o, r) in out.iter_mut().zip(m) {
            o.iter_mut().zip(r).for_each(|(a, b)| *a += b);
        }
    }
    let k = maps.len() as f64;
    out.iter_mut().for_each(|r| r.iter_mut().for_each(|v| *v /= k));
    Ok(out)
}

fn check_sample(cache: &ForwardCache, sample: usize) -> Result<()> {
    if sample >= cache.batch {
        return Err(SaliencyError::SampleOutOfRange {
            sample,
            batch: cache.batch,
        });
    }
    Ok(())
}

/// Every `(layer, head)` attention map for one sample.
pub fn head_maps(cache: &ForwardCache, sample: usize) -> Result<Vec<Vec<Matrix>>> {
    check_sample(cache, sample)?;
    let tr = cache.transformer.as_ref().ok_or(SaliencyError::MissingBranch("transformer"))?;
    let t = cache.seq_len;
    Ok(tr
        .attention
        .iter()
        .map(|&a| {
            let d = cache.tape.value(a).data();
            (0..tr.heads)
                .map(|h| {
                    let base = (sample * tr.heads + h) * t * t;
                    rows(&d[base..base + t * t], t, t)
                })
                .collect()
        })
        .collect())
}

/// Head-averaged rollout for one sample of a forward pass.
pub fn attention_rollout(cache: &ForwardCache, sample: usize) -> Result<Rollout> {
    let layers = head_maps(cache, sample)?
        .iter()
        .map(|heads| mean_maps(heads))
        .collect::<Result<Vec<_>>>()?;
    rollout(&layers)
}

/// Mean of all `L · h` attention maps for one sample.
pub fn global_attention(cache: &ForwardCache, sample: usize) -> Result<Matrix> {
    let all: Vec<Matrix> = head_maps(cache, sample)?.into_iter().flatten().collect();
    mean_maps(&all)
}

/// Normalizes to sum 1; an all-zero vector becomes uniform.
pub fn normalize_sum(v: &[f64]) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter().map(|x| x / s).collect()
    } else {
        vec![1.0 / v.len().max(1) as f64; v.len()]
    }
}

/// `s(c) = mean_t |g[t, c]|`, normalized to sum 1. `grad` is row-major `T × C`.
pub fn channel_saliency_from_grad(grad: &[f64], t: usize, c: usize) -> Vec<f64> {
    let mut s = vec![0.0; c];
    for row in grad.chunks(c).take(t) {
        s.iter_mut().zip(row).for_each(|(a, g)| *a += g.abs());
    }
    s.iter_mut().for_each(|a| *a /= t.max(1) as f64);
    normalize_sum(&s)
}

/// Outer product `r(t) · s(c)` as a heatmap.
pub fn outer_heatmap(r: &[f64], s: &[f64], source: Source) -> Result<Heatmap> {
    let values = r.iter().flat_map(|rt| s.iter().map(move |sc| rt * sc)).collect();
    Heatmap::new(r.len(), s.len(), values, source)
}

/// Effective receptive field after each layer: `ERF_l = ERF_{l-1} + (k_l - 1) ∏_{i<l} s_i`, `ERF_0 = 1`.
pub fn effective_receptive_field(schedule: &[(usize, usize)]) -> Vec<usize> {
    let mut erf = 1;
    let mut jump = 1;
    schedule
        .iter()
        .map(|&(k, s)| {
            erf += (k.saturating_sub(1)) * jump;
            jump *= s;
            erf
        })
        .collect()
}

/// Stem convolution kernels, `[filter][channel][tap]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterExport {
    pub kernel: usize,
    pub channel_names: Option<Vec<String>>,
    pub filters: Vec<Vec<Vec<f64>>>,
}

pub fn first_layer_filters(model: &Model, channel_names: Option<&[String]>) -> Result<FilterExport> {
    let r = model.resnet().ok_or(SaliencyError::MissingBranch("resnet"))?;
    let w = &model.params.tensors[r.stem_weight_index()];
    let (f, c, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let d = w.data();
    let filters = (0..f)
        .map(|i| (0..c).map(|j| d[(i * c + j) * k..(i * c + j + 1) * k].to_vec()).collect())
        .collect();
    Ok(FilterExport {
        kernel: k,
        channel_names: channel_names.map(<[String]>::to_vec),
        filters,
    })
}

/// Where transformer temporal relevance comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalSource {
    #[default]
    Rollout,
    Global,
}

/// Branch maps for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub target: usize,
    pub output: Vec<f64>,
    pub channel_saliency: Vec<f64>,
    /// Grad-CAM at feature resolution `T'`.
    pub grad_cam: Option<Vec<f64>>,
    /// Transformer temporal relevance, sums to 1.
    pub temporal: Option<Vec<f64>>,
    pub resnet: Option<Heatmap>,
    pub transformer: Option<Heatmap>,
}

/// Explains every sample of a `[B, T, C]` batch with one forward and one
/// backward pass. Gradients are taken of the model output at `targets[b]`
/// (the predicted class when `None`); for the hybrid the convolutional
/// features see `g` times the branch gradient, which leaves normalized
/// Grad-CAM unchanged.
pub fn explain_batch(
    model: &Model,
    x: &Tensor,
    targets: Option<&[usize]>,
    temporal: TemporalSource,
) -> Result<Vec<Explanation>> {
    let mut cache = model.forward(x, Mode::Eval, Track::INPUT)?;
    let (b, t) = (cache.batch, cache.seq_len);
    let c = x.shape()[2];
    let outputs = cache.tape.shape(cache.output)[1];
    let rows_out = cache.output_rows();
    let targets: Vec<usize> = match targets {
        Some(ts) => ts.to_vec(),
        None => rows_out
            .iter()
            .map(|r| match model.task() {
                Task::Classification => argmax(r),
                Task::Regression => 0,
            })
            .collect(),
    };
    if targets.len() != b {
        return Err(SaliencyError::SampleOutOfRange {
            sample: targets.len(),
            batch: b,
        });
    }
    if let Some(&bad) = targets.iter().find(|&&k| k >= outputs) {
        return Err(SaliencyError::TargetOutOfRange { target: bad, outputs });
    }
    let mut pick = vec![0.0; b * outputs];
    for (i, &k) in targets.iter().enumerate() {
        pick[i * outputs + k] = 1.0;
    }
    let score = cache.tape.dot_const(cache.output, pick)?;
    let grads = cache.tape.backward(score)?;
    let gx = grads.get(cache.input).ok_or(SaliencyError::MissingGradients("input"))?;
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let s = channel_saliency_from_grad(&gx[i * t * c..(i + 1) * t * c], t, c);
        let (grad_cam, resnet) = match &cache.resnet {
            Some(r) => {
                let fs = cache.tape.shape(r.features).to_vec();
                let (k, tp) = (fs[1], fs[2]);
                let a = &cache.tape.value(r.features).data()[i * k * tp..(i + 1) * k * tp];
                let g = grads
                    .get(r.features)
                    .ok_or(SaliencyError::MissingGradients("resnet features"))?;
                let g = &g[i * k * tp..(i + 1) * k * tp];
                let cam = grad_cam_map(&rows(a, k, tp), &rows(g, k, tp))?;
                let up = upsample_linear(&cam, t).map_err(|_| SaliencyError::Empty("grad-cam"))?;
                (Some(cam), Some(outer_heatmap(&up, &s, Source::Resnet)?))
            }
            None => (None, None),
        };
        let (temporal_rel, transformer) = match &cache.transformer {
            Some(_) => {
                let rel = match temporal {
                    TemporalSource::Rollout => attention_rollout(&cache, i)?.relevance,
                    TemporalSource::Global => {
                        let g = global_attention(&cache, i)?;
                        (0..t).map(|j| g.iter().map(|r| r[j]).sum::<f64>() / t as f64).collect()
                    }
                };
                let rel = normalize_sum(&rel);
                let h = outer_heatmap(&rel, &s, Source::Transformer)?;
                (Some(rel), Some(h))
            }
            None => (None, None),
        };
        out.push(Explanation {
            target: targets[i],
            output: rows_out[i].clone(),
            channel_saliency: s,
            grad_cam,
            temporal: temporal_rel,
            resnet,
            transformer,
        });
    }
    Ok(out)
}

/// [`explain_batch`] over `samples` (each `T × C`) in chunks of `batch_size`.
pub fn explain_samples(
    model: &Model,
    samples: &[&Tensor],
    batch_size: usize,
    temporal: TemporalSource,
) -> Result<Vec<Explanation>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let x = crate::datasets::stack(chunk.iter().copied());
        out.extend(explain_batch(model, &x, None, temporal)?);
    }
    Ok(out)
}
