//! The two branches and the gated hybrid that combines them.
//!
//! Parameters live in a flat, named [`ParamSet`]; layer structs hold
//! indices into it. Every forward pass binds the whole set onto a fresh
//! tape, so the returned [`ForwardCache`] can be differentiated with respect
//! to parameters, the input, or any intermediate activation.

mod resnet;
mod transformer;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{BatchStats, Tape, Var};
use crate::tensor::{NumericError, Tensor};

pub use resnet::{ResNet, ResNetConfig, ResNetTrace};
pub use transformer::{scaled_dot_attention, AttentionMode, Transformer, TransformerConfig, TransformerTrace};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("branch tasks disagree: resnet {resnet:?}/{resnet_outputs}, transformer {transformer:?}/{transformer_outputs}")]
    TaskMismatch {
        resnet: Task,
        resnet_outputs: usize,
        transformer: Task,
        transformer_outputs: usize,
    },
    #[error("sequence length {t} too short: {reason}")]
    TooShort { t: usize, reason: String },
    #[error("input has shape {got:?}, model expects [B, T, {channels}]")]
    BadInput { got: Vec<usize>, channels: usize },
    #[error("parameter {0} missing or mis-shaped in stored state")]
    StateMismatch(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Resnet,
    Transformer,
    Hybrid,
}

impl ModelKind {
    pub const NAMES: [&'static str; 3] = ["resnet", "transformer", "hybrid"];

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "resnet" => Some(Self::Resnet),
            "transformer" => Some(Self::Transformer),
            "hybrid" => Some(Self::Hybrid),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Resnet => "resnet",
            Self::Transformer => "transformer",
            Self::Hybrid => "hybrid",
        }
    }
}

/// Ordered, named tensors. Order is fixed by construction and is part of
/// the checkpoint contract.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.tensors[i])
    }

    /// Copies values from `other`, which must have identical names and shapes.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        if other.names != self.names {
            let missing = self
                .names
                .iter()
                .zip(other.names.iter().chain(std::iter::repeat(&String::new())))
                .find(|(a, b)| a != b)
                .map(|(a, _)| a.clone())
                .unwrap_or_else(|| "<extra entries>".into());
            return Err(ModelError::StateMismatch(missing));
        }
        for ((name, dst), src) in self.names.iter().zip(&mut self.tensors).zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(ModelError::StateMismatch(name.clone()));
            }
            *dst = Tensor::new(src.shape().to_vec(), src.data().to_vec())?;
        }
        Ok(())
    }
}

/// Kaiming-uniform init: U(-b, b) with `b = sqrt(6 / fan_in)`.
pub(crate) fn kaiming(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let b = (6.0 / fan_in.max(1) as f64).sqrt();
    uniform(rng, shape, b)
}

pub(crate) fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], b: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-b..=b)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite init")
}

/// Whether a pass records batch statistics and applies dropout.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Which leaves of a forward pass require gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Track {
    pub params: bool,
    pub input: bool,
}

impl Track {
    pub const NONE: Track = Track {
        params: false,
        input: false,
    };
    pub const PARAMS: Track = Track {
        params: true,
        input: false,
    };
    pub const INPUT: Track = Track {
        params: false,
        input: true,
    };
}

/// Shared state threaded through one forward pass.
pub(crate) struct Ctx<'a, 'm> {
    pub tape: Tape,
    pub params: Vec<Var>,
    pub buffers: &'a ParamSet,
    pub mode: Mode<'m>,
    pub bn_updates: Vec<(usize, BatchStats)>,
}

impl Ctx<'_, '_> {
    pub fn p(&self, i: usize) -> Var {
        self.params[i]
    }

    /// `x [N, in] · W [in, out] + b`.
    pub fn linear(&mut self, x: Var, w: usize, b: usize) -> crate::tensor::Result<Var> {
        let y = self.tape.matmul(x, self.params[w])?;
        self.tape.add_trailing(y, self.params[b])
    }

    /// Layer norm over `axis` followed by the learned affine on trailing dims.
    pub fn layer_norm(&mut self, x: Var, axis: usize, gamma: usize, beta: usize) -> crate::tensor::Result<Var> {
        let y = self.tape.layer_norm(x, axis, LN_EPS)?;
        let y = self.tape.mul_trailing(y, self.params[gamma])?;
        self.tape.add_trailing(y, self.params[beta])
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> crate::tensor::Result<Var> {
        let Mode::Train(rng) = &mut self.mode else {
            return Ok(x);
        };
        if p <= 0.0 {
            return Ok(x);
        }
        let n = self.tape.value(x).numel();
        let keep = 1.0 / (1.0 - p);
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        self.tape.mul_const(x, mask)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub task: Task,
    pub num_outputs: usize,
    pub in_channels: usize,
    pub seq_len: usize,
    pub resnet: Option<ResNetConfig>,
    pub transformer: Option<TransformerConfig>,
}

impl ModelConfig {
    /// Desk-scale defaults for the given kind and data shape.
    pub fn new(kind: ModelKind, task: Task, num_outputs: usize, in_channels: usize, seq_len: usize) -> Self {
        let resnet = matches!(kind, ModelKind::Resnet | ModelKind::Hybrid)
            .then(|| ResNetConfig::desk(in_channels, num_outputs, task));
        let transformer = matches!(kind, ModelKind::Transformer | ModelKind::Hybrid)
            .then(|| TransformerConfig::desk(in_channels, seq_len, num_outputs, task));
        ModelConfig {
            kind,
            task,
            num_outputs,
            in_channels,
            seq_len,
            resnet,
            transformer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_outputs == 0 || self.in_channels == 0 {
            return Err(ModelError::Config("num_outputs and in_channels must be positive".into()));
        }
        if self.task == Task::Regression && self.num_outputs != 1 {
            return Err(ModelError::Config("regression models have exactly one output".into()));
        }
        let need_r = matches!(self.kind, ModelKind::Resnet | ModelKind::Hybrid);
        let need_t = matches!(self.kind, ModelKind::Transformer | ModelKind::Hybrid);
        if need_r != self.resnet.is_some() || need_t != self.transformer.is_some() {
            return Err(ModelError::Config(format!("branch configs do not match kind {}", self.kind.as_str())));
        }
        if let Some(r) = &self.resnet {
            r.validate()?;
            r.feature_len(self.seq_len)?;
            if r.task != self.task || r.num_outputs != self.num_outputs || r.in_channels != self.in_channels {
                return Err(self.mismatch());
            }
        }
        if let Some(t) = &self.transformer {
            t.validate()?;
            if t.task != self.task || t.num_outputs != self.num_outputs || t.in_channels != self.in_channels {
                return Err(self.mismatch());
            }
            if t.max_len < self.seq_len {
                return Err(ModelError::Config(format!(
                    "sequence length {} exceeds transformer max_len {}",
                    self.seq_len, t.max_len
                )));
            }
        }
        Ok(())
    }

    fn mismatch(&self) -> ModelError {
        let (rt, ro) = self
            .resnet
            .as_ref()
            .map_or((self.task, self.num_outputs), |r| (r.task, r.num_outputs));
        let (tt, to) = self
            .transformer
            .as_ref()
            .map_or((self.task, self.num_outputs), |t| (t.task, t.num_outputs));
        ModelError::TaskMismatch {
            resnet: rt,
            resnet_outputs: ro,
            transformer: tt,
            transformer_outputs: to,
        }
    }
}

/// Affine map from standardized model outputs back to target units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScale {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    /// Batch-norm running statistics.
    pub buffers: ParamSet,
    pub target_scale: Option<TargetScale>,
    resnet: Option<ResNet>,
    transformer: Option<Transformer>,
    gate: Option<usize>,
}

/// Everything saliency needs from one forward pass.
pub struct ForwardCache {
    pub tape: Tape,
    pub input: Var,
    pub params: Vec<Var>,
    /// Model output `[B, num_outputs]`; regression outputs are standardized.
    pub output: Var,
    pub resnet: Option<ResNetTrace>,
    pub transformer: Option<TransformerTrace>,
    /// Sigmoid of the hybrid gate, when present.
    pub gate: Option<f64>,
    pub bn_updates: Vec<(usize, BatchStats)>,
    pub batch: usize,
    pub seq_len: usize,
}

impl ForwardCache {
    pub fn output_rows(&self) -> Vec<Vec<f64>> {
        let v = self.tape.value(self.output);
        v.data().chunks(v.shape()[1]).map(<[f64]>::to_vec).collect()
    }
}

/// `g * r + (1 - g) * t` with `g` a single-element var in [0, 1].
pub fn hybrid_combine(tape: &mut Tape, r: Var, t: Var, g: Var) -> crate::tensor::Result<Var> {
    let rg = tape.mul_scalar(r, g)?;
    let one_minus = tape.affine(g, -1.0, 1.0)?;
    let tg = tape.mul_scalar(t, one_minus)?;
    tape.add(rg, tg)
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::default();
        let mut buffers = ParamSet::default();
        let resnet = config
            .resnet
            .as_ref()
            .map(|c| ResNet::build(c.clone(), &mut params, &mut buffers, &mut rng));
        let transformer = config
            .transformer
            .as_ref()
            .map(|c| Transformer::build(c.clone(), &mut params, &mut rng));
        let gate = (config.kind == ModelKind::Hybrid).then(|| params.add("hybrid.gate_logit", Tensor::zeros(&[1])));
        Ok(Model {
            config,
            params,
            buffers,
            target_scale: None,
            resnet,
            transformer,
            gate,
        })
    }

    /// Rebuilds a model from stored state, checking names and shapes.
    pub fn from_state(config: ModelConfig, params: &ParamSet, buffers: &ParamSet, target_scale: Option<TargetScale>) -> Result<Self> {
        let mut m = Model::new(config, 0)?;
        m.params.load_from(params)?;
        m.buffers.load_from(buffers)?;
        m.target_scale = target_scale;
        Ok(m)
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn task(&self) -> Task {
        self.config.task
    }

    pub fn resnet(&self) -> Option<&ResNet> {
        self.resnet.as_ref()
    }

    pub fn transformer(&self) -> Option<&Transformer> {
        self.transformer.as_ref()
    }

    /// Current gate value `sigmoid(logit)` for hybrids.
    pub fn gate_value(&self) -> Option<f64> {
        self.gate
            .map(|g| crate::autodiff::sigmoid(self.params.tensors[g].data()[0]))
    }

    pub fn set_gate_logit(&mut self, logit: f64) {
        if let Some(g) = self.gate {
            self.params.tensors[g].data_mut()[0] = logit;
        }
    }

    /// Forward pass on a `[B, T, C]` batch.
    pub fn forward(&self, x: &Tensor, mode: Mode<'_>, track: Track) -> Result<ForwardCache> {
        let s = x.shape();
        if s.len() != 3 || s[2] != self.config.in_channels {
            return Err(ModelError::BadInput {
                got: s.to_vec(),
                channels: self.config.in_channels,
            });
        }
        let (batch, seq_len) = (s[0], s[1]);
        let mut tape = Tape::new();
        let params = self
            .params
            .tensors
            .iter()
            .map(|p| tape.input(p, track.params))
            .collect::<crate::tensor::Result<Vec<_>>>()?;
        let input = tape.input(x, track.input)?;
        let mut ctx = Ctx {
            tape,
            params,
            buffers: &self.buffers,
            mode,
            bn_updates: Vec::new(),
        };
        let rtrace = match &self.resnet {
            Some(r) => Some(r.forward(&mut ctx, input)?),
            None => None,
        };
        let ttrace = match &self.transformer {
            Some(t) => Some(t.forward(&mut ctx, input)?),
            None => None,
        };
        let (output, gate) = match (&rtrace, &ttrace, self.gate) {
            (Some(r), Some(t), Some(g)) => {
                let gv = ctx.tape.sigmoid(ctx.p(g))?;
                let out = hybrid_combine(&mut ctx.tape, r.output, t.output, gv)?;
                (out, Some(ctx.tape.value(gv).data()[0]))
            }
            (Some(r), None, _) => (r.output, None),
            (None, Some(t), _) => (t.output, None),
            _ => return Err(ModelError::Config("model has no branches".into())),
        };
        Ok(ForwardCache {
            tape: ctx.tape,
            input,
            params: ctx.params,
            output,
            resnet: rtrace,
            transformer: ttrace,
            gate,
            bn_updates: ctx.bn_updates,
            batch,
            seq_len,
        })
    }

    /// Folds training-mode batch statistics into the running buffers.
    pub fn apply_bn_updates(&mut self, updates: &[(usize, BatchStats)]) {
        for (mean_idx, stats) in updates {
            let var_idx = mean_idx + 1;
            for (r, b) in self.buffers.tensors[*mean_idx].data_mut().iter_mut().zip(&stats.mean) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
            for (r, b) in self.buffers.tensors[var_idx].data_mut().iter_mut().zip(&stats.var) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
        }
    }

    /// Eval-mode raw outputs (standardized for regression), batched.
    pub fn predict_raw(&self, x: &Tensor, batch_size: usize) -> Result<Vec<Vec<f64>>> {
        let s = x.shape();
        if s.len() != 3 {
            return Err(ModelError::BadInput {
                got: s.to_vec(),
                channels: self.config.in_channels,
            });
        }
        let per = s[1] * s[2];
        let mut out = Vec::with_capacity(s[0]);
        for start in (0..s[0]).step_by(batch_size.max(1)) {
            let end = (start + batch_size.max(1)).min(s[0]);
            let chunk = Tensor::new(vec![end - start, s[1], s[2]], x.data()[start * per..end * per].to_vec())?;
            let cache = self.forward(&chunk, Mode::Eval, Track::NONE)?;
            out.extend(cache.output_rows());
        }
        Ok(out)
    }

    /// Class indices (classification) or target-unit values (regression).
    pub fn predict(&self, x: &Tensor) -> Result<Vec<f64>> {
        let raw = self.predict_raw(x, 64)?;
        Ok(match self.config.task {
            Task::Classification => raw.iter().map(|r| argmax(r) as f64).collect(),
            Task::Regression => raw.iter().map(|r| self.unscale(r[0])).collect(),
        })
    }

    pub fn unscale(&self, v: f64) -> f64 {
        match self.target_scale {
            Some(s) => v * s.std + s.mean,
            None => v,
        }
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
