//! Optimization loop, early stopping, checkpoints and the fusion-weight
//! grid search.

use std::cmp::Ordering;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::datasets::{augment, stack, DatasetBundle, Split, Targets};
use crate::eval::{classification_metrics, regression_metrics};
use crate::models::{argmax, ForwardCache, Mode, Model, ModelConfig, ModelError, ParamSet, TargetScale, Task, Track};
use crate::tensor::{NumericError, Tensor};

pub const CHECKPOINT_FORMAT: &str = "tsxplain-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Scores closer than this are ties in the alpha grid search.
pub const ALPHA_TIE_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("bundle task {bundle:?} does not match model task {model:?}")]
    TaskMismatch { bundle: Task, model: Task },
    #[error("split {0:?} is empty")]
    EmptySplit(Split),
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error("checkpoint {path}: {detail}")]
    Corrupt { path: String, detail: String },
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint config hash {found} does not match expected {expected}")]
    HashMismatch { found: String, expected: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("alpha grid is empty")]
    EmptyGrid,
    #[error("objective returned non-finite score {score} at alpha {alpha}")]
    BadScore { alpha: f64, score: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub huber_delta: f64,
    /// Weight of each branch's own loss in hybrid training.
    pub aux_weight: f64,
    /// Circular time-shift range as a fraction of T; 0 disables.
    pub jitter_frac: f64,
    /// Additive Gaussian noise on training inputs; 0 disables.
    pub noise_sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            batch_size: 32,
            weight_decay: 1e-4,
            max_epochs: 30,
            patience: 10,
            seed: 0,
            huber_delta: 1.0,
            aux_weight: 0.5,
            jitter_frac: 0.05,
            noise_sigma: 0.1,
        }
    }
}

impl TrainConfig {
    // Negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr must be finite and nonnegative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be finite and nonnegative");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(self.huber_delta > 0.0) || !(self.aux_weight >= 0.0) {
            return bad("huber_delta must be positive and aux_weight nonnegative");
        }
        if !(0.0..0.5).contains(&self.jitter_frac) || !(self.noise_sigma >= 0.0) {
            return bad("jitter_frac must be in [0, 0.5) and noise_sigma nonnegative");
        }
        Ok(())
    }
}

/// First and second moment estimates, one vector per parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.numel()]).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One AdamW update with decoupled weight decay. Parameters without a
    /// gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<&[f64]>], lr: f64, weight_decay: f64) {
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for (i, p) in params.tensors.iter_mut().enumerate() {
            let Some(g) = grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + ADAM_EPS) + weight_decay * *w;
                *w -= lr * update;
            }
        }
    }
}

/// Patience counter on validation loss; improvement is a strict decrease.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best_loss: f64,
    pub best_epoch: usize,
    pub bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    /// Records one epoch; returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> (bool, bool) {
        if loss < self.best_loss {
            self.best_loss = loss;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            (true, false)
        } else {
            self.bad_epochs += 1;
            (false, self.bad_epochs >= self.patience)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Accuracy for classification, R² for regression.
    pub val_metric: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

/// Where the per-epoch random stream resumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub params: ParamSet,
    pub buffers: ParamSet,
    pub target_scale: Option<TargetScale>,
    pub optimizer: AdamState,
    /// Epochs completed when this state was taken.
    pub epoch: usize,
    pub val_loss: f64,
    pub val_metric: f64,
    pub early_stopping: EarlyStopping,
    pub rng: RngState,
    pub history: History,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model> {
        Ok(Model::from_state(
            self.model_config.clone(),
            &self.params,
            &self.buffers,
            self.target_scale,
        )?)
    }
}

/// SHA-256 over the model config and the training config with
/// `max_epochs` cleared, so a run can be extended.
pub fn config_hash(model: &ModelConfig, train: &TrainConfig) -> String {
    let train = TrainConfig {
        max_epochs: 0,
        ..train.clone()
    };
    let bytes = serde_json::to_vec(&(model, &train)).expect("configs serialize");
    hex::encode(Sha256::digest(bytes))
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = serde_json::to_vec(ckpt).expect("checkpoint serializes");
    std::fs::write(path, bytes).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads a checkpoint, verifying version, internal hash consistency and,
/// when given, the caller's expected config hash.
pub fn load_checkpoint(path: &Path, expected_hash: Option<&str>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let corrupt = |detail: String| TrainError::Corrupt {
        path: path.display().to_string(),
        detail,
    };
    let value: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| corrupt(e.to_string()))?;
    if value.get("format").and_then(|f| f.as_str()) != Some(CHECKPOINT_FORMAT) {
        return Err(corrupt("missing format tag".into()));
    }
    let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let ckpt: Checkpoint = serde_json::from_value(value).map_err(|e| corrupt(e.to_string()))?;
    let recomputed = config_hash(&ckpt.model_config, &ckpt.train_config);
    if recomputed != ckpt.config_hash {
        return Err(corrupt(format!("stored hash {} disagrees with stored configs", ckpt.config_hash)));
    }
    if let Some(expected) = expected_hash {
        if expected != ckpt.config_hash {
            return Err(TrainError::HashMismatch {
                found: ckpt.config_hash,
                expected: expected.to_string(),
            });
        }
    }
    Ok(ckpt)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub history: History,
}

/// Loss of one split under eval mode plus its task metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitScore {
    pub loss: f64,
    pub metric: f64,
}

fn batch_targets(bundle: &DatasetBundle, idx: &[usize], scale: Option<TargetScale>) -> BatchTargets {
    match &bundle.targets {
        Targets::Labels(l) => BatchTargets::Labels(idx.iter().map(|&i| l[i]).collect()),
        Targets::Values(v) => {
            let s = scale.unwrap_or(TargetScale { mean: 0.0, std: 1.0 });
            BatchTargets::Values(idx.iter().map(|&i| (v[i] - s.mean) / s.std).collect())
        }
    }
}

enum BatchTargets {
    Labels(Vec<usize>),
    Values(Vec<f64>),
}

fn task_loss(tape: &mut Tape, out: Var, targets: &BatchTargets, delta: f64) -> crate::tensor::Result<Var> {
    match targets {
        BatchTargets::Labels(l) => tape.cross_entropy(out, l),
        BatchTargets::Values(v) => tape.huber(out, v, delta),
    }
}

/// Main loss plus, for hybrids, `aux_weight` times each branch's own loss.
fn training_loss(cache: &mut ForwardCache, targets: &BatchTargets, cfg: &TrainConfig) -> crate::tensor::Result<(Var, f64)> {
    let tape = &mut cache.tape;
    let main = task_loss(tape, cache.output, targets, cfg.huber_delta)?;
    let main_value = tape.value(main).data()[0];
    let (Some(r), Some(t)) = (&cache.resnet, &cache.transformer) else {
        return Ok((main, main_value));
    };
    if cfg.aux_weight == 0.0 {
        return Ok((main, main_value));
    }
    let lr = task_loss(tape, r.output, targets, cfg.huber_delta)?;
    let lt = task_loss(tape, t.output, targets, cfg.huber_delta)?;
    let aux = tape.add(lr, lt)?;
    let aux = tape.affine(aux, cfg.aux_weight, 0.0)?;
    Ok((tape.add(main, aux)?, main_value))
}

/// Eval-mode training objective on samples `idx` and its gradient for
/// every parameter tensor (zeros where a parameter is unused).
pub fn objective_and_gradient(
    model: &Model,
    bundle: &DatasetBundle,
    idx: &[usize],
    cfg: &TrainConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut cache = model.forward(&bundle.batch(idx), Mode::Eval, Track::PARAMS)?;
    let targets = batch_targets(bundle, idx, model.target_scale);
    let (loss, _) = training_loss(&mut cache, &targets, cfg)?;
    let value = cache.tape.value(loss).data()[0];
    let grads = cache.tape.backward(loss)?;
    let out = cache
        .params
        .iter()
        .zip(&model.params.tensors)
        .map(|(v, p)| grads.get(*v).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
        .collect();
    Ok((value, out))
}

/// Eval-mode loss and metric over a split; the last short batch is kept.
pub fn evaluate_split(model: &Model, bundle: &DatasetBundle, split: Split, cfg: &TrainConfig) -> Result<SplitScore> {
    let idx = bundle.indices(split);
    if idx.is_empty() {
        return Err(TrainError::EmptySplit(split));
    }
    let mut loss_sum = 0.0;
    let mut raw = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(cfg.batch_size) {
        let mut cache = model.forward(&bundle.batch(chunk), Mode::Eval, Track::NONE)?;
        let targets = batch_targets(bundle, chunk, model.target_scale);
        let l = task_loss(&mut cache.tape, cache.output, &targets, cfg.huber_delta)?;
        loss_sum += cache.tape.value(l).data()[0] * chunk.len() as f64;
        raw.extend(cache.output_rows());
    }
    let metric = match &bundle.targets {
        Targets::Labels(l) => {
            let preds: Vec<usize> = raw.iter().map(|r| argmax(r)).collect();
            let truth: Vec<usize> = idx.iter().map(|&i| l[i]).collect();
            classification_metrics(&preds, &truth).map(|m| m.accuracy).unwrap_or(0.0)
        }
        Targets::Values(v) => {
            let preds: Vec<f64> = raw.iter().map(|r| model.unscale(r[0])).collect();
            let truth: Vec<f64> = idx.iter().map(|&i| v[i]).collect();
            regression_metrics(&preds, &truth).ok().and_then(|m| m.r2).unwrap_or(0.0)
        }
    };
    Ok(SplitScore {
        loss: loss_sum / idx.len() as f64,
        metric,
    })
}

fn target_scale(bundle: &DatasetBundle) -> Option<TargetScale> {
    let v = bundle.targets.values()?;
    let train = bundle.indices(Split::Train);
    let n = train.len().max(1) as f64;
    let mean = train.iter().map(|&i| v[i]).sum::<f64>() / n;
    let var = train.iter().map(|&i| (v[i] - mean).powi(2)).sum::<f64>() / n;
    let std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    Some(TargetScale { mean, std })
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

#[allow(clippy::too_many_arguments)]
fn snapshot(
    model: &Model,
    cfg: &TrainConfig,
    hash: &str,
    adam: &AdamState,
    epoch: usize,
    score: SplitScore,
    early: EarlyStopping,
    history: &History,
) -> Checkpoint {
    Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config_hash: hash.to_string(),
        model_config: model.config.clone(),
        train_config: cfg.clone(),
        params: model.params.clone(),
        buffers: model.buffers.clone(),
        target_scale: model.target_scale,
        optimizer: adam.clone(),
        epoch,
        val_loss: score.loss,
        val_metric: score.metric,
        early_stopping: early,
        rng: RngState {
            seed: cfg.seed,
            next_epoch: epoch,
        },
        history: history.clone(),
    }
}

fn check_inputs(model: &Model, bundle: &DatasetBundle, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    bundle
        .validate()
        .map_err(|e| TrainError::Config(e.to_string()))?;
    if bundle.task != model.task() {
        return Err(TrainError::TaskMismatch {
            bundle: bundle.task,
            model: model.task(),
        });
    }
    for split in [Split::Train, Split::Val] {
        if bundle.indices(split).is_empty() {
            return Err(TrainError::EmptySplit(split));
        }
    }
    if bundle.indices(Split::Train).len() < cfg.batch_size {
        return Err(TrainError::Config(format!(
            "train split has fewer samples than batch_size {}",
            cfg.batch_size
        )));
    }
    Ok(())
}

/// Trains from scratch. On return `model` holds the best-validation state.
pub fn train(model: &mut Model, bundle: &DatasetBundle, cfg: &TrainConfig) -> Result<TrainOutcome> {
    check_inputs(model, bundle, cfg)?;
    model.target_scale = target_scale(bundle);
    let adam = AdamState::new(&model.params);
    run(model, bundle, cfg, adam, 0, EarlyStopping::new(cfg.patience), History::default(), None)
}

/// Continues from a checkpoint whose config hash matches `cfg`.
pub fn resume(ckpt: &Checkpoint, bundle: &DatasetBundle, cfg: &TrainConfig) -> Result<(Model, TrainOutcome)> {
    let hash = config_hash(&ckpt.model_config, cfg);
    if hash != ckpt.config_hash {
        return Err(TrainError::HashMismatch {
            found: ckpt.config_hash.clone(),
            expected: hash,
        });
    }
    let mut model = ckpt.model()?;
    check_inputs(&model, bundle, cfg)?;
    let outcome = run(
        &mut model,
        bundle,
        cfg,
        ckpt.optimizer.clone(),
        ckpt.rng.next_epoch,
        ckpt.early_stopping,
        ckpt.history.clone(),
        None,
    )?;
    Ok((model, outcome))
}

#[allow(clippy::too_many_arguments)]
fn run(
    model: &mut Model,
    bundle: &DatasetBundle,
    cfg: &TrainConfig,
    mut adam: AdamState,
    start_epoch: usize,
    mut early: EarlyStopping,
    mut history: History,
    mut best: Option<Checkpoint>,
) -> Result<TrainOutcome> {
    let hash = config_hash(&model.config, cfg);
    let train_idx = bundle.indices(Split::Train);
    let mut last = None;
    for epoch in start_epoch..cfg.max_epochs {
        if history.stopped_early {
            break;
        }
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks_exact(cfg.batch_size) {
            let x = if cfg.jitter_frac > 0.0 || cfg.noise_sigma > 0.0 {
                let aug: Vec<Tensor> = chunk
                    .iter()
                    .map(|&i| augment(&bundle.samples[i], cfg.jitter_frac, cfg.noise_sigma, &mut rng))
                    .collect();
                stack(aug.iter())
            } else {
                bundle.batch(chunk)
            };
            let targets = batch_targets(bundle, chunk, model.target_scale);
            let diverged = |detail: String| TrainError::Diverged { epoch, detail };
            let mut cache = model
                .forward(&x, Mode::Train(&mut rng), Track::PARAMS)
                .map_err(|e| diverged(e.to_string()))?;
            let (loss, main) = training_loss(&mut cache, &targets, cfg).map_err(|e| diverged(e.to_string()))?;
            let grads = cache.tape.backward(loss).map_err(|e| diverged(e.to_string()))?;
            let per_param: Vec<Option<&[f64]>> = cache.params.iter().map(|&p| grads.get(p)).collect();
            adam.step(&mut model.params, &per_param, cfg.lr, cfg.weight_decay);
            model.apply_bn_updates(&cache.bn_updates);
            if model.params.tensors.iter().any(|t| !t.is_finite()) {
                return Err(diverged("non-finite parameters after update".into()));
            }
            loss_sum += main;
            batches += 1;
        }
        let score = evaluate_split(model, bundle, Split::Val, cfg)?;
        if !score.loss.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                detail: format!("validation loss is {}", score.loss),
            });
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            val_loss: score.loss,
            val_metric: score.metric,
        });
        let (improved, stop) = early.observe(epoch, score.loss);
        if improved {
            history.best_epoch = Some(epoch);
        }
        history.stopped_early = stop;
        log::info!(
            "epoch {epoch}: train {:.5} val {:.5} metric {:.4}",
            loss_sum / batches.max(1) as f64,
            score.loss,
            score.metric
        );
        let snap = snapshot(model, cfg, &hash, &adam, epoch + 1, score, early, &history);
        if improved {
            best = Some(snap.clone());
        }
        last = Some(snap);
    }
    let last = match last {
        Some(l) => l,
        None => {
            let score = evaluate_split(model, bundle, Split::Val, cfg)?;
            snapshot(model, cfg, &hash, &adam, start_epoch, score, early, &history)
        }
    };
    let mut best = best.unwrap_or_else(|| last.clone());
    best.history = last.history.clone();
    model.params.load_from(&best.params)?;
    model.buffers.load_from(&best.buffers)?;
    Ok(TrainOutcome {
        history: last.history.clone(),
        best,
        last,
    })
}

/// Result of an exhaustive scan over candidate fusion weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSearch {
    pub alpha: f64,
    pub score: f64,
    /// `(alpha, score)` for every grid point, in grid order.
    pub scores: Vec<(f64, f64)>,
}

pub fn default_alpha_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

/// Scores every grid point and returns the maximizer. Scores within
/// [`ALPHA_TIE_TOL`] tie; ties go to the alpha nearest 0.5 (distances
/// within the same tolerance are equal), then the lower.
pub fn grid_search_alpha<F>(grid: &[f64], mut objective: F) -> Result<AlphaSearch>
where
    F: FnMut(f64) -> Result<f64>,
{
    if grid.is_empty() {
        return Err(TrainError::EmptyGrid);
    }
    let mut scores = Vec::with_capacity(grid.len());
    for &alpha in grid {
        let score = objective(alpha)?;
        if !score.is_finite() {
            return Err(TrainError::BadScore { alpha, score });
        }
        scores.push((alpha, score));
    }
    let top = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    let (alpha, score) = scores
        .iter()
        .copied()
        .filter(|s| top - s.1 <= ALPHA_TIE_TOL)
        .min_by(|a, b| {
            let da = (a.0 - 0.5).abs();
            let db = (b.0 - 0.5).abs();
            let by_distance = if (da - db).abs() <= ALPHA_TIE_TOL { Ordering::Equal } else { da.total_cmp(&db) };
            by_distance.then(a.0.total_cmp(&b.0))
        })
        .expect("grid is nonempty");
    Ok(AlphaSearch { alpha, score, scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_synthetic, normalize_channels, split, NormMode, SyntheticSpec};
    use crate::models::ModelKind;

    fn tiny_bundle(n: usize, seed: u64) -> DatasetBundle {
        let spec = SyntheticSpec {
            n_samples: n,
            seq_len: 24,
            seed,
            ..SyntheticSpec::default()
        };
        let mut b = generate_synthetic(&spec).unwrap();
        split(&mut b, [0.6, 0.2, 0.2], seed).unwrap();
        normalize_channels(b, NormMode::Zscore)
    }

    fn tiny_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            lr: 1e-3,
            batch_size: 8,
            max_epochs: epochs,
            ..TrainConfig::default()
        }
    }

    fn model(kind: ModelKind, b: &DatasetBundle) -> Model {
        let cfg = ModelConfig::new(kind, b.task, b.num_classes(), b.channels(), b.seq_len());
        Model::new(cfg, 1).unwrap()
    }

    #[test]
    fn zero_lr_and_decay_keep_parameters() {
        let b = tiny_bundle(40, 0);
        let mut m = model(ModelKind::Hybrid, &b);
        let before = m.params.clone();
        let cfg = TrainConfig {
            lr: 0.0,
            weight_decay: 0.0,
            ..tiny_cfg(2)
        };
        train(&mut m, &b, &cfg).unwrap();
        assert_eq!(m.params, before);
    }

    #[test]
    fn separable_batch_loss_decreases() {
        // One batch per epoch; label 1 samples carry a +2 shift on every cell.
        let mut b = tiny_bundle(16, 3);
        let labels: Vec<usize> = (0..16).map(|i| i % 2).collect();
        for (i, s) in b.samples.iter_mut().enumerate() {
            let shift = if labels[i] == 1 { 2.0 } else { 0.0 };
            s.data_mut().iter_mut().for_each(|v| *v += shift);
        }
        b.targets = Targets::Labels(labels);
        b.splits = (0..16).map(|i| if i < 12 { Split::Train } else { Split::Val }).collect();
        let mut m = model(ModelKind::Resnet, &b);
        let cfg = TrainConfig {
            batch_size: 12,
            jitter_frac: 0.0,
            noise_sigma: 0.0,
            ..tiny_cfg(5)
        };
        let out = train(&mut m, &b, &cfg).unwrap();
        let losses: Vec<f64> = out.history.epochs.iter().map(|e| e.train_loss).collect();
        assert_eq!(losses.len(), 5);
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn early_stop_after_exactly_patience_flat_epochs() {
        let mut es = EarlyStopping::new(3);
        assert_eq!(es.observe(0, 1.0), (true, false));
        assert_eq!(es.observe(1, 1.0), (false, false));
        assert_eq!(es.observe(2, 1.0), (false, false));
        assert_eq!(es.observe(3, 1.0), (false, true));
        assert_eq!(es.best_epoch, 0);
    }

    #[test]
    fn runs_are_deterministic() {
        let b = tiny_bundle(40, 1);
        let mut m1 = model(ModelKind::Hybrid, &b);
        let mut m2 = model(ModelKind::Hybrid, &b);
        let h1 = train(&mut m1, &b, &tiny_cfg(2)).unwrap().history;
        let h2 = train(&mut m2, &b, &tiny_cfg(2)).unwrap().history;
        assert_eq!(h1, h2);
        assert_eq!(m1.params, m2.params);
    }

    #[test]
    fn checkpoint_round_trip_and_hash_check() {
        let b = tiny_bundle(40, 2);
        let mut m = model(ModelKind::Hybrid, &b);
        let cfg = tiny_cfg(2);
        let out = train(&mut m, &b, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("best.json");
        save_checkpoint(&path, &out.best).unwrap();
        let back = load_checkpoint(&path, Some(&out.best.config_hash)).unwrap();
        assert_eq!(back, out.best);
        let recomputed = evaluate_split(&back.model().unwrap(), &b, Split::Val, &cfg).unwrap();
        assert!((recomputed.metric - back.val_metric).abs() <= 1e-10);
        assert!((recomputed.loss - back.val_loss).abs() <= 1e-10);
        assert!(matches!(
            load_checkpoint(&path, Some("deadbeef")),
            Err(TrainError::HashMismatch { .. })
        ));
        std::fs::write(&path, b"{not json").unwrap();
        assert!(matches!(load_checkpoint(&path, None), Err(TrainError::Corrupt { .. })));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let b = tiny_bundle(40, 2);
        let mut m = model(ModelKind::Resnet, &b);
        let mut ck = train(&mut m, &b, &tiny_cfg(1)).unwrap().best;
        ck.version = 99;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        save_checkpoint(&path, &ck).unwrap();
        assert!(matches!(
            load_checkpoint(&path, None),
            Err(TrainError::VersionMismatch { found: 99, .. })
        ));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let b = tiny_bundle(40, 4);
        let mut full = model(ModelKind::Hybrid, &b);
        let whole = train(&mut full, &b, &tiny_cfg(3)).unwrap();
        let mut part = model(ModelKind::Hybrid, &b);
        let first = train(&mut part, &b, &tiny_cfg(2)).unwrap();
        let (_, rest) = resume(&first.last, &b, &tiny_cfg(3)).unwrap();
        let a = &whole.history.epochs[2];
        let r = &rest.history.epochs[2];
        assert!((a.train_loss - r.train_loss).abs() <= 1e-8);
        assert!((a.val_loss - r.val_loss).abs() <= 1e-8);
    }

    #[test]
    fn grid_search_cases() {
        assert_eq!(grid_search_alpha(&[0.7], |_| Ok(1.0)).unwrap().alpha, 0.7);
        let peak = grid_search_alpha(&default_alpha_grid(), |a| Ok(-(a - 0.3f64).powi(2))).unwrap();
        assert!((peak.alpha - 0.3).abs() < 1e-12);
        let flat = grid_search_alpha(&default_alpha_grid(), |_| Ok(2.0)).unwrap();
        assert_eq!(flat.alpha, 0.5);
        let sym = grid_search_alpha(&[0.2, 0.8, 0.4, 0.6], |a| Ok(if a == 0.5 { 0.0 } else { 1.0 })).unwrap();
        assert_eq!(sym.alpha, 0.4);
        let pair = grid_search_alpha(&default_alpha_grid(), |a| Ok(if a == 0.3 || a == 0.7 { 1.0 } else { 0.0 })).unwrap();
        assert_eq!(pair.alpha, 0.3);
        assert!(matches!(grid_search_alpha(&[], |_| Ok(0.0)), Err(TrainError::EmptyGrid)));
    }
}
