use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};
use tsxplain_core::datasets::{DatasetBundle, Targets};
use tsxplain_core::eval::faithfulness::{deletion_test, sensitivity_test, FaithfulnessCurve, DEFAULT_FRACTIONS};
use tsxplain_core::eval::text::{bleu4, flesch_kincaid, rouge_l, tokenize};
use tsxplain_core::eval::{classification_metrics, regression_metrics, wilcoxon_signed_rank, EvalError, Wilcoxon};
use tsxplain_core::explain::{flag_low_variance_channels, ReportOptions, TemplateSet, NO_REGIONS};
use tsxplain_core::models::{argmax, Model, Task};
use tsxplain_core::saliency::{explain_samples, Heatmap};
use tsxplain_core::tensor::Tensor;

use super::explain::{fuse_explanation, report_for, HEATMAP_DIR, VARIANCE_THRESHOLD};
use super::{check_compatible, fusion_config, load_model, mask_heatmap, optional_model, parse_split};
use crate::data;
use crate::error::{CliError, Result};
use crate::output::OutputDir;
use crate::settings::Settings;
use crate::EvalArgs;

pub const DEFAULT_LIMIT: usize = 200;
pub const DEFAULT_SIGMA: f64 = 1.0;
const EXPLAIN_BATCH: usize = 32;
const PREDICT_BATCH: usize = 64;

pub fn parse_fractions(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|f| {
            f.trim()
                .parse::<f64>()
                .map_err(|e| CliError::Usage(format!("fraction {f:?}: {e}")))
        })
        .collect()
}

fn format_fractions(f: &[f64]) -> String {
    f.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

/// Cross-entropy for classification, squared error in target units for regression.
pub fn per_sample_losses(model: &Model, x: &Tensor, targets: &Targets) -> Result<Vec<f64>> {
    let raw = model.predict_raw(x, PREDICT_BATCH)?;
    Ok(match targets {
        Targets::Labels(l) => raw
            .iter()
            .zip(l)
            .map(|(r, &y)| {
                let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                m + r.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - r[y]
            })
            .collect(),
        Targets::Values(v) => raw.iter().zip(v).map(|(r, y)| (model.unscale(r[0]) - y).powi(2)).collect(),
    })
}

fn subset_targets(t: &Targets, idx: &[usize]) -> Targets {
    match t {
        Targets::Labels(l) => Targets::Labels(idx.iter().map(|&i| l[i]).collect()),
        Targets::Values(v) => Targets::Values(idx.iter().map(|&i| v[i]).collect()),
    }
}

fn task_metrics(model: &Model, x: &Tensor, targets: &Targets) -> Result<Value> {
    let raw = model.predict_raw(x, PREDICT_BATCH)?;
    Ok(match (model.task(), targets) {
        (Task::Classification, Targets::Labels(l)) => {
            let preds: Vec<usize> = raw.iter().map(|r| argmax(r)).collect();
            serde_json::to_value(classification_metrics(&preds, l)?).expect("metrics serialize")
        }
        (Task::Regression, Targets::Values(v)) => {
            let preds: Vec<f64> = raw.iter().map(|r| model.unscale(r[0])).collect();
            serde_json::to_value(regression_metrics(&preds, v)?).expect("metrics serialize")
        }
        _ => return Err(CliError::Data("targets do not match the model task".into())),
    })
}

/// `<id>.json` heatmaps in `dir`, by ascending id.
pub fn read_heatmap_dir(dir: &Path, bundle: &DatasetBundle) -> Result<Vec<(usize, Heatmap)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        let id = match (path.extension(), path.file_stem().and_then(|s| s.to_str())) {
            (Some(ext), Some(stem)) if ext == "json" => match stem.parse::<usize>() {
                Ok(id) => id,
                Err(_) => continue,
            },
            _ => continue,
        };
        if id >= bundle.len() {
            return Err(CliError::Data(format!("{}: sample {id} out of range", path.display())));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        let h = Heatmap::from_json(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        if h.shape != [bundle.seq_len(), bundle.channels()] {
            return Err(CliError::Data(format!("{}: shape {:?} does not match the data", path.display(), h.shape)));
        }
        out.push((id, h));
    }
    if out.is_empty() {
        return Err(CliError::Data(format!("{}: no <sample id>.json heatmaps", dir.display())));
    }
    out.sort_by_key(|(id, _)| *id);
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct Sensitivity {
    pub sigma: f64,
    pub ratio: Option<f64>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct TextMetrics {
    pub reports: usize,
    /// Against reports rendered from the ground-truth masks.
    pub bleu4: Option<f64>,
    pub rouge_l_f1: Option<f64>,
    pub flesch_kincaid: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub metrics_b: Value,
    pub mean_loss_a: f64,
    pub mean_loss_b: f64,
    pub wilcoxon: Wilcoxon,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub split: String,
    pub samples: usize,
    pub metrics: Value,
    pub explained: Vec<usize>,
    pub fractions: Vec<f64>,
    pub faithfulness: FaithfulnessCurve,
    pub faithfulness_resnet: Option<FaithfulnessCurve>,
    pub sensitivity: Sensitivity,
    pub text: TextMetrics,
    pub comparison: Option<Comparison>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn report_text(sentences: &[String]) -> String {
    if sentences.is_empty() {
        NO_REGIONS.to_string()
    } else {
        sentences.join(" ")
    }
}

pub fn run(args: EvalArgs) -> Result<()> {
    let mut s = Settings::load(args.common.config.as_deref())?;
    let model = load_model(&mut s, "checkpoint", args.checkpoint)?;
    let model_b = optional_model(&mut s, "checkpoint_b", args.checkpoint_b)?;
    let loaded = data::load(&mut s, args.data)?;
    let heatmap_dir = s.get_opt("heatmaps", args.heatmaps.map(|p| p.display().to_string()))?;
    let fractions = s.get("fractions", args.fractions, format_fractions(&DEFAULT_FRACTIONS))?;
    let fractions = parse_fractions(&fractions)?;
    let split_name: String = s.get("split", args.split, "test".to_string())?;
    let split = parse_split(&split_name)?;
    let limit: usize = s.get("limit", args.limit, DEFAULT_LIMIT)?;
    let sigma: f64 = s.get("sigma", args.sigma, DEFAULT_SIGMA)?;
    let seed: u64 = s.get("seed", args.common.seed, 0)?;
    let (cfg, temporal) = fusion_config(&mut s, &args.fusion)?;
    s.reject_unknown()?;
    let bundle = &loaded.data;
    check_compatible(&model, bundle)?;
    if let Some(b) = &model_b {
        check_compatible(b, bundle)?;
    }
    let idx = bundle.indices(split);
    if idx.is_empty() {
        return Err(CliError::Data(format!("split {split_name} is empty")));
    }
    let x = bundle.batch(&idx);
    let targets = subset_targets(&bundle.targets, &idx);
    let metrics = task_metrics(&model, &x, &targets)?;

    let mut out = OutputDir::create(&args.common.out)?;
    let set = TemplateSet::bundled();
    let opts = ReportOptions::default();
    let low_variance = flag_low_variance_channels(&loaded.raw, VARIANCE_THRESHOLD);
    let (explained, fused, resnet): (Vec<usize>, Vec<Heatmap>, Option<Vec<Heatmap>>) = match &heatmap_dir {
        Some(dir) => {
            let maps = read_heatmap_dir(Path::new(dir), bundle)?;
            let (ids, maps) = maps.into_iter().unzip();
            (ids, maps, None)
        }
        None => {
            let ids: Vec<usize> = idx.iter().copied().take(limit.max(1)).collect();
            let samples: Vec<&Tensor> = ids.iter().map(|&i| &bundle.samples[i]).collect();
            let expl = explain_samples(&model, &samples, EXPLAIN_BATCH, temporal)?;
            let mut fused = Vec::with_capacity(ids.len());
            let mut resnet = Vec::with_capacity(ids.len());
            for (e, &i) in expl.iter().zip(&ids) {
                let maps = fuse_explanation(e, bundle, i, &cfg)?;
                out.write(&format!("{HEATMAP_DIR}/{i}.json"), maps.fused.to_json().as_bytes())?;
                fused.push(maps.fused);
                resnet.push(maps.resnet);
            }
            (ids, fused, Some(resnet))
        }
    };
    let samples: Vec<Tensor> = explained.iter().map(|&i| bundle.samples[i].clone()).collect();
    let sub_targets = subset_targets(&bundle.targets, &explained);
    let fill = bundle.train_channel_means();
    let faithfulness = deletion_test(&model, &samples, &sub_targets, &fused, &fractions, &fill, seed)?;
    let faithfulness_resnet = match &resnet {
        Some(r) => Some(deletion_test(&model, &samples, &sub_targets, r, &fractions, &fill, seed)?),
        None => None,
    };
    let sensitivity = match sensitivity_test(&model, &samples, &fused, sigma, seed) {
        Ok(r) => Sensitivity {
            sigma,
            ratio: Some(r),
            note: None,
        },
        Err(EvalError::Undefined(note)) => Sensitivity {
            sigma,
            ratio: None,
            note: Some(note),
        },
        Err(e) => return Err(e.into()),
    };

    let outputs = model.predict_raw(&tsxplain_core::datasets::stack(samples.iter()), PREDICT_BATCH)?;
    let (mut bleu, mut rouge, mut fk) = (Vec::new(), Vec::new(), Vec::new());
    for ((&i, h), o) in explained.iter().zip(&fused).zip(&outputs) {
        let report = report_for(&model, bundle, i, o, h, &cfg, &low_variance, &set, &opts, None)?;
        let candidate = report_text(&report.sentences);
        if let Ok(v) = flesch_kincaid(&format!("{candidate} {}", report.summary)) {
            fk.push(v);
        }
        if let Some(mask) = mask_heatmap(bundle, i) {
            let reference = report_for(&model, bundle, i, o, &mask, &cfg, &[], &set, &opts, None)?;
            let (c, r) = (tokenize(&candidate), tokenize(&report_text(&reference.sentences)));
            if let Ok(b) = bleu4(&c, std::slice::from_ref(&r)) {
                bleu.push(b);
            }
            rouge.push(rouge_l(&c, &r).f1);
        }
    }
    let text = TextMetrics {
        reports: explained.len(),
        bleu4: mean(&bleu),
        rouge_l_f1: mean(&rouge),
        flesch_kincaid: mean(&fk),
    };

    let comparison = match &model_b {
        Some(b) => {
            let la = per_sample_losses(&model, &x, &targets)?;
            let lb = per_sample_losses(b, &x, &targets)?;
            Some(Comparison {
                metrics_b: task_metrics(b, &x, &targets)?,
                mean_loss_a: mean(&la).unwrap_or(0.0),
                mean_loss_b: mean(&lb).unwrap_or(0.0),
                wilcoxon: wilcoxon_signed_rank(&la, &lb)?,
            })
        }
        None => None,
    };
    let report = MetricReport {
        split: split_name,
        samples: idx.len(),
        metrics,
        explained,
        fractions,
        faithfulness,
        faithfulness_resnet,
        sensitivity,
        text,
        comparison,
    };
    out.write_json("metrics.json", &report)?;
    out.write("faithfulness.csv", report.faithfulness.to_csv().as_bytes())?;
    if let Some(r) = &report.faithfulness_resnet {
        out.write("faithfulness_resnet.csv", r.to_csv().as_bytes())?;
    }
    let summary = json!({
        "samples": report.samples,
        "explained": report.explained.len(),
        "deletion_auc": report.faithfulness.auc,
        "random_auc": report.faithfulness.random_auc,
        "wilcoxon_p": report.comparison.as_ref().map(|c| c.wilcoxon.p_value),
    });
    out.finish("eval", &s, summary)?;
    println!("{} split, {} samples: {}", report.split, report.samples, report.metrics);
    println!(
        "deletion AUC {:.4} (random {:.4}) over {} explained samples",
        report.faithfulness.auc,
        report.faithfulness.random_auc,
        report.explained.len()
    );
    match report.sensitivity.ratio {
        Some(r) => println!("sensitivity ratio {r:.3} at sigma {}", report.sensitivity.sigma),
        None => println!("sensitivity undefined: {}", report.sensitivity.note.as_deref().unwrap_or("")),
    }
    if let Some(c) = &report.comparison {
        println!("paired Wilcoxon p = {:.4e} (n = {})", c.wilcoxon.p_value, c.wilcoxon.n);
    }
    Ok(())
}
