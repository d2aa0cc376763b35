use serde_json::json;
use tsxplain_core::datasets::Split;
use tsxplain_core::models::{Model, ModelConfig, ModelKind};
use tsxplain_core::training::{evaluate_split, save_checkpoint, train, TrainConfig};

use crate::data;
use crate::error::{CliError, Result};
use crate::output::OutputDir;
use crate::settings::Settings;
use crate::{ModelArg, TrainArgs};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LAST_CHECKPOINT_FILE: &str = "last_checkpoint.json";
/// Learning rate used when none is configured.
pub const DEFAULT_LR: f64 = 1e-3;

pub fn run(args: TrainArgs) -> Result<()> {
    let mut s = Settings::load(args.common.config.as_deref())?;
    let loaded = data::load(&mut s, args.data)?;
    let kind: String = s.get("model", args.model.map(|m| m.to_string()), ModelArg::Hybrid.to_string())?;
    let kind = ModelKind::parse(&kind).ok_or_else(|| {
        CliError::Usage(format!("model {kind:?}: expected one of {}", ModelKind::NAMES.join(", ")))
    })?;
    let d = TrainConfig::default();
    let augment = s.get("augment", args.no_augment.then_some(false), true)?;
    let cfg = TrainConfig {
        lr: s.get("lr", args.lr, DEFAULT_LR)?,
        batch_size: s.get("batch_size", args.batch_size, d.batch_size)?,
        weight_decay: s.get("weight_decay", args.weight_decay, d.weight_decay)?,
        max_epochs: s.get("epochs", args.epochs, d.max_epochs)?,
        patience: s.get("patience", args.patience, d.patience)?,
        seed: s.get("seed", args.common.seed, d.seed)?,
        huber_delta: s.get("huber_delta", None, d.huber_delta)?,
        aux_weight: s.get("aux_weight", args.aux_weight, d.aux_weight)?,
        jitter_frac: if augment { s.get("jitter_frac", None, d.jitter_frac)? } else { 0.0 },
        noise_sigma: if augment { s.get("noise_sigma", None, d.noise_sigma)? } else { 0.0 },
    };
    s.reject_unknown()?;
    cfg.validate()?;
    let bundle = &loaded.data;
    let config = ModelConfig::new(kind, bundle.task, bundle.num_classes(), bundle.channels(), bundle.seq_len());
    let mut model = Model::new(config, cfg.seed)?;
    let outcome = train(&mut model, bundle, &cfg)?;
    let best = outcome.best.model()?;
    let mut scores = serde_json::Map::new();
    for (name, split) in [("train", Split::Train), ("val", Split::Val), ("test", Split::Test)] {
        if !bundle.indices(split).is_empty() {
            let sc = evaluate_split(&best, bundle, split, &cfg)?;
            scores.insert(name.into(), json!({"loss": sc.loss, "metric": sc.metric}));
        }
    }
    let metric_name = match bundle.task {
        tsxplain_core::models::Task::Classification => "accuracy",
        tsxplain_core::models::Task::Regression => "r2",
    };
    let metrics = json!({
        "model": kind.as_str(),
        "metric": metric_name,
        "best_epoch": outcome.history.best_epoch,
        "epochs_run": outcome.history.epochs.len(),
        "stopped_early": outcome.history.stopped_early,
        "splits": scores,
    });
    let mut out = OutputDir::create(&args.common.out)?;
    let ckpt = out.root().join(CHECKPOINT_FILE);
    save_checkpoint(&ckpt, &outcome.best)?;
    let bytes = std::fs::read(&ckpt).map_err(|e| CliError::io(&ckpt, e))?;
    out.write(CHECKPOINT_FILE, &bytes)?;
    let last = out.root().join(LAST_CHECKPOINT_FILE);
    save_checkpoint(&last, &outcome.last)?;
    let bytes = std::fs::read(&last).map_err(|e| CliError::io(&last, e))?;
    out.write(LAST_CHECKPOINT_FILE, &bytes)?;
    out.write_json("history.json", &outcome.history)?;
    out.write_json("metrics.json", &metrics)?;
    out.finish("train", &s, metrics.clone())?;
    println!(
        "trained {} for {} epochs (best epoch {:?})",
        kind.as_str(),
        outcome.history.epochs.len(),
        outcome.history.best_epoch
    );
    for (name, v) in &scores {
        println!("{name}: loss {:.4}, {metric_name} {:.4}", v["loss"].as_f64().unwrap_or(f64::NAN), v["metric"].as_f64().unwrap_or(f64::NAN));
    }
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}
