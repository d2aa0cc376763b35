//! Command implementations and the helpers they share.

pub mod ablate;
pub mod eval;
pub mod explain;
pub mod synth;
pub mod train;

use std::path::{Path, PathBuf};

use tsxplain_core::datasets::{DatasetBundle, Split};
use tsxplain_core::fusion::{FusionConfig, Projection, Strategy};
use tsxplain_core::models::{argmax, Model, ModelKind, Task};
use tsxplain_core::saliency::{Heatmap, Source, TemporalSource};
use tsxplain_core::training::load_checkpoint;

use crate::error::{CliError, Result};
use crate::settings::Settings;
use crate::{FusionArg, FusionArgs, TemporalArg};

pub fn load_model(settings: &mut Settings, key: &str, flag: Option<PathBuf>) -> Result<Model> {
    let path: String = settings.require(key, flag.map(|p| p.display().to_string()))?;
    let path = Path::new(&path);
    if !path.exists() {
        return Err(CliError::Data(format!("{}: no such file or directory", path.display())));
    }
    Ok(load_checkpoint(path, None)?.model()?)
}

pub fn optional_model(settings: &mut Settings, key: &str, flag: Option<PathBuf>) -> Result<Option<Model>> {
    match settings.get_opt(key, flag.map(|p| p.display().to_string()))? {
        Some(p) => load_model(settings, key, Some(PathBuf::from(p))).map(Some),
        None => Ok(None),
    }
}

pub fn require_hybrid(model: &Model, command: &str) -> Result<()> {
    if model.kind() != ModelKind::Hybrid {
        return Err(CliError::Usage(format!(
            "{command} needs a hybrid checkpoint, got {}",
            model.kind().as_str()
        )));
    }
    Ok(())
}

/// The model must accept the bundle's `T × C` samples and task.
pub fn check_compatible(model: &Model, data: &DatasetBundle) -> Result<()> {
    let cfg = &model.config;
    if cfg.in_channels != data.channels() || cfg.seq_len != data.seq_len() || cfg.task != data.task {
        return Err(CliError::Data(format!(
            "checkpoint expects {:?} samples of {}x{}, data has {:?} samples of {}x{}",
            cfg.task,
            cfg.seq_len,
            cfg.in_channels,
            data.task,
            data.seq_len(),
            data.channels()
        )));
    }
    Ok(())
}

pub fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(CliError::Usage(format!("split {s:?}: expected one of train, val, test"))),
    }
}

fn parse_fusion(s: &str) -> Result<FusionArg> {
    <FusionArg as clap::ValueEnum>::from_str(s, true)
        .map_err(|_| CliError::Usage(format!("fusion {s:?}: expected one of multiplicative, weighted, learned")))
}

pub fn read_projection(path: &Path) -> Result<Projection> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Fusion settings plus the Transformer temporal source.
pub fn fusion_config(settings: &mut Settings, args: &FusionArgs) -> Result<(FusionConfig, TemporalSource)> {
    let name: String = settings.get("fusion", args.fusion.map(|f| f.to_string()), FusionArg::Multiplicative.to_string())?;
    let strategy = match parse_fusion(&name)? {
        FusionArg::Multiplicative => Strategy::Multiplicative,
        FusionArg::Weighted => Strategy::Weighted,
        FusionArg::Learned => Strategy::Learned,
    };
    let default_alpha = if strategy == Strategy::Weighted { 0.5 } else { 1.0 };
    let defaults = FusionConfig::default();
    let projection = match settings.get_opt("projection", args.projection.as_ref().map(|p| p.display().to_string()))? {
        Some(p) => read_projection(Path::new(&p))?,
        None => Projection::default(),
    };
    let cfg = FusionConfig {
        strategy,
        alpha: settings.get("alpha", args.alpha, default_alpha)?,
        smoothing_window: settings.get("smoothing_window", args.smoothing_window, defaults.smoothing_window)?,
        threshold_quantile: settings.get("quantile", args.quantile, defaults.threshold_quantile)?,
        use_dtw: settings.get("dtw", args.dtw.then_some(true), false)?,
        projection,
        ..defaults
    };
    cfg.validate()?;
    let temporal: String = settings.get("temporal", args.temporal.map(|t| t.to_string()), TemporalArg::Rollout.to_string())?;
    let temporal = match temporal.as_str() {
        "rollout" => TemporalSource::Rollout,
        "global" => TemporalSource::Global,
        other => return Err(CliError::Usage(format!("temporal {other:?}: expected rollout or global"))),
    };
    Ok((cfg, temporal))
}

/// Ground-truth mask of sample `i` as a 0/1 heatmap, when the bundle has masks.
pub fn mask_heatmap(bundle: &DatasetBundle, i: usize) -> Option<Heatmap> {
    let m = bundle.masks.as_ref()?.get(i)?;
    let values = m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    Heatmap::new(bundle.seq_len(), bundle.channels(), values, Source::Fused).ok()
}

/// Human-readable model output for one sample.
pub fn describe_prediction(model: &Model, raw: &[f64]) -> String {
    match model.task() {
        Task::Classification => {
            let k = argmax(raw);
            let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = raw.iter().map(|v| (v - max).exp()).sum();
            format!("class {k} (probability {:.3})", 1.0 / z)
        }
        Task::Regression => format!("{:.4}", model.unscale(raw[0])),
    }
}
