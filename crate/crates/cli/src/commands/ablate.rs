use serde::Serialize;
use serde_json::json;
use tsxplain_core::eval::consensus::{
    calibrate_concat, consensus_experiment, disjoint_noise_instance, explanation_error, instance_family,
    shared_noise_instance, ConsensusInstance, ConsensusReport,
};
use tsxplain_core::eval::faithfulness::{deletion_test, DEFAULT_FRACTIONS};
use tsxplain_core::eval::{bootstrap_mean_ci, Interval};
use tsxplain_core::fusion::{fit_projection, FusionConfig, Projection, Strategy};
use tsxplain_core::saliency::{explain_samples, Heatmap, TemporalSource};
use tsxplain_core::tensor::Tensor;
use tsxplain_core::training::{default_alpha_grid, grid_search_alpha, AlphaSearch, TrainError};

use super::explain::fuse_explanation;
use super::{check_compatible, mask_heatmap, optional_model, require_hybrid};
use crate::data;
use crate::error::{CliError, Result};
use crate::output::OutputDir;
use crate::settings::Settings;
use crate::AblateArgs;

pub const CSV_HELP: &str = "\
ablation.csv has one row per strategy (multiplicative, weighted, learned, concat_project):
  strategy        fusion strategy name
  family_mse      mean squared error to the planted mask over the disjoint-noise family
  family_ci_low   lower end of the 95% bootstrap interval of family_mse
  family_ci_high  upper end of the 95% bootstrap interval of family_mse
  mult_win_rate   share of instances where multiplicative has strictly lower error (empty for multiplicative)
  model_mse       mean squared error of the model's fused map to the ground-truth mask (needs --checkpoint and masks)
  deletion_auc    deletion-curve AUC of the model's fused maps (needs --checkpoint)";

pub const STRATEGIES: [&str; 4] = ["multiplicative", "weighted", "learned", "concat_project"];
const FAMILY_SHAPE: (usize, usize) = (100, 5);
const PROJECTION_STEPS: usize = 2000;
const PROJECTION_LR: f64 = 0.5;
const EXPLAIN_BATCH: usize = 32;
/// Fraction whose accuracy drop scores each alpha of the grid search.
const ALPHA_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Serialize)]
pub struct Row {
    pub strategy: String,
    pub family_mse: f64,
    pub family_ci: Interval,
    pub mult_win_rate: Option<f64>,
    pub model_mse: Option<f64>,
    pub deletion_auc: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn to_csv(rows: &[Row]) -> String {
    let mut s = String::from("strategy,family_mse,family_ci_low,family_ci_high,mult_win_rate,model_mse,deletion_auc\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.strategy,
            r.family_mse,
            r.family_ci.low,
            r.family_ci.high,
            opt(r.mult_win_rate),
            opt(r.model_mse),
            opt(r.deletion_auc)
        ));
    }
    s
}

fn arm(strategy: Strategy, alpha: f64, projection: Projection) -> FusionConfig {
    FusionConfig {
        strategy,
        alpha,
        projection,
        ..FusionConfig::default()
    }
}

/// Arms in [`STRATEGIES`] order; both projections are fitted on `calibration`.
pub fn arms(calibration: &[ConsensusInstance]) -> Result<Vec<(String, FusionConfig)>> {
    let inputs: Vec<(Heatmap, Heatmap)> = calibration.iter().map(|i| (i.hr.clone(), i.ht.clone())).collect();
    let targets: Vec<Heatmap> = calibration.iter().map(|i| i.truth.clone()).collect();
    let learned = fit_projection(&inputs, &targets, true, PROJECTION_STEPS, PROJECTION_LR)?;
    let concat = calibrate_concat(calibration)?;
    Ok(vec![
        (STRATEGIES[0].into(), arm(Strategy::Multiplicative, 1.0, Projection::default())),
        (STRATEGIES[1].into(), arm(Strategy::Weighted, 0.5, Projection::default())),
        (STRATEGIES[2].into(), arm(Strategy::Learned, 1.0, learned)),
        (STRATEGIES[3].into(), arm(Strategy::ConcatProject, 1.0, concat)),
    ])
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelAblation {
    pub samples: Vec<usize>,
    pub mse: Vec<Option<f64>>,
    pub deletion_auc: Vec<f64>,
    pub alpha_search: AlphaSearch,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn run(args: AblateArgs) -> Result<()> {
    let mut s = Settings::load(args.common.config.as_deref())?;
    let data_flag = args.data.map(|p| p.display().to_string());
    let loaded = match s.get_opt("data", data_flag)? {
        Some(p) => Some(data::load(&mut s, Some(p.into()))?),
        None => None,
    };
    let model = optional_model(&mut s, "checkpoint", args.checkpoint)?;
    let seed: u64 = s.get("seed", args.common.seed, 0)?;
    let n: usize = s.get("instances", args.instances, 200)?;
    let n_cal: usize = s.get("calibration", args.calibration, 50)?;
    let resamples: usize = s.get("resamples", args.resamples, 1000)?;
    let limit: usize = s.get("limit", args.limit, 100)?;
    s.reject_unknown()?;
    if n == 0 || n_cal == 0 || resamples == 0 {
        return Err(CliError::Usage("--instances, --calibration and --resamples must be positive".into()));
    }
    let (t, c) = loaded.as_ref().map_or(FAMILY_SHAPE, |l| (l.data.seq_len(), l.data.channels()));

    let calibration = instance_family(n_cal, t, c, seed, disjoint_noise_instance);
    let arms = arms(&calibration)?;
    let family = instance_family(n, t, c, seed.wrapping_add(1), disjoint_noise_instance);
    let consensus = consensus_experiment(&family, &arms, resamples, seed)?;
    let shared_cal = instance_family(n_cal, t, c, seed.wrapping_add(2), shared_noise_instance);
    let shared = consensus_experiment(
        &instance_family(n, t, c, seed.wrapping_add(3), shared_noise_instance),
        &self::arms(&shared_cal)?,
        resamples,
        seed,
    )?;

    let model_part = match (&model, &loaded) {
        (Some(m), Some(l)) => Some(model_ablation(m, &l.data, &arms, limit, seed)?),
        (Some(_), None) => return Err(CliError::Usage("--checkpoint needs --data".into())),
        _ => None,
    };
    let rows = rows(&consensus, &arms, model_part.as_ref(), resamples, seed)?;

    let mut out = OutputDir::create(&args.common.out)?;
    out.write("ablation.csv", to_csv(&rows).as_bytes())?;
    let projections: Vec<_> = arms.iter().map(|(n, a)| json!({"strategy": n, "projection": a.projection})).collect();
    out.write_json(
        "ablation.json",
        &json!({
            "family_shape": [t, c],
            "rows": rows,
            "projections": projections,
            "disjoint_noise": consensus,
            "shared_noise": shared,
            "model": model_part,
        }),
    )?;
    out.finish("ablate", &s, json!({"ordering": consensus.ordering}))?;
    print!("{}", to_csv(&rows));
    println!("ordering by family error: {}", consensus.ordering.join(" < "));
    if let Some(m) = &model_part {
        println!("best weighted alpha {} (drop {:.4})", m.alpha_search.alpha, m.alpha_search.score);
    }
    Ok(())
}

fn rows(
    consensus: &ConsensusReport,
    arms: &[(String, FusionConfig)],
    model: Option<&ModelAblation>,
    resamples: usize,
    seed: u64,
) -> Result<Vec<Row>> {
    let mut rows = Vec::with_capacity(arms.len());
    for (k, a) in consensus.arms.iter().enumerate() {
        rows.push(Row {
            strategy: a.strategy.clone(),
            family_mse: a.mean,
            family_ci: bootstrap_mean_ci(&a.errors, resamples, 0.95, seed)?,
            mult_win_rate: (k > 0).then(|| consensus.paired[k - 1].baseline_wins),
            model_mse: model.and_then(|m| m.mse[k]),
            deletion_auc: model.map(|m| m.deletion_auc[k]),
        });
    }
    Ok(rows)
}

/// Fused maps of the first `limit` test samples under every arm, scored
/// against the masks and by deletion; plus the weighted-alpha grid search.
fn model_ablation(
    model: &tsxplain_core::models::Model,
    bundle: &tsxplain_core::datasets::DatasetBundle,
    arms: &[(String, FusionConfig)],
    limit: usize,
    seed: u64,
) -> Result<ModelAblation> {
    require_hybrid(model, "ablate")?;
    check_compatible(model, bundle)?;
    let ids: Vec<usize> = bundle
        .indices(tsxplain_core::datasets::Split::Test)
        .into_iter()
        .take(limit.max(1))
        .collect();
    if ids.is_empty() {
        return Err(CliError::Data("test split is empty".into()));
    }
    let samples: Vec<Tensor> = ids.iter().map(|&i| bundle.samples[i].clone()).collect();
    let refs: Vec<&Tensor> = samples.iter().collect();
    let expl = explain_samples(model, &refs, EXPLAIN_BATCH, TemporalSource::Rollout)?;
    let targets = match &bundle.targets {
        tsxplain_core::datasets::Targets::Labels(l) => {
            tsxplain_core::datasets::Targets::Labels(ids.iter().map(|&i| l[i]).collect())
        }
        tsxplain_core::datasets::Targets::Values(v) => {
            tsxplain_core::datasets::Targets::Values(ids.iter().map(|&i| v[i]).collect())
        }
    };
    let fill = bundle.train_channel_means();
    let fused_for = |cfg: &FusionConfig| -> Result<Vec<Heatmap>> {
        expl.iter()
            .zip(&ids)
            .map(|(e, &i)| fuse_explanation(e, bundle, i, cfg).map(|m| m.fused))
            .collect()
    };
    let (mut mse, mut aucs) = (Vec::new(), Vec::new());
    for (_, cfg) in arms {
        let fused = fused_for(cfg)?;
        let errs: Vec<f64> = ids
            .iter()
            .zip(&fused)
            .filter_map(|(&i, h)| {
                mask_heatmap(bundle, i)
                    .filter(|m| m.values.iter().any(|v| *v > 0.0))
                    .map(|m| explanation_error(h, &m))
            })
            .collect();
        mse.push(mean(&errs));
        aucs.push(deletion_test(model, &samples, &targets, &fused, &DEFAULT_FRACTIONS, &fill, seed)?.auc);
    }
    let alpha_search = grid_search_alpha(&default_alpha_grid(), |alpha| {
        let cfg = arm(Strategy::Weighted, alpha, Projection::default());
        let fused = fused_for(&cfg).map_err(|e| TrainError::Config(e.to_string()))?;
        let curve = deletion_test(model, &samples, &targets, &fused, &[ALPHA_FRACTION], &fill, seed)
            .map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(curve.drop_abs[0])
    })?;
    Ok(ModelAblation {
        samples: ids,
        mse,
        deletion_auc: aucs,
        alpha_search,
    })
}
