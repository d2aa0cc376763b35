use serde_json::json;
use tsxplain_core::datasets::{stack, DatasetBundle};
use tsxplain_core::explain::{
    describe_regions, flag_low_variance_channels, generate_report, identify_regions, Domain, ExplanationReport,
    GenerationMode, LowVarianceChannel, ReportInput, ReportOptions, StubBehavior, StubClient, TemplateSet, TextClient,
    MAX_REGIONS,
};
use tsxplain_core::fusion::{fuse_branches, FusedMaps, FusionConfig};
use tsxplain_core::models::{Mode, Model, Track};
use tsxplain_core::saliency::{
    effective_receptive_field, explain_batch, first_layer_filters, global_attention, Explanation, Heatmap,
};

use super::{check_compatible, describe_prediction, fusion_config, load_model, require_hybrid};
use crate::data;
use crate::error::{CliError, Result};
use crate::output::OutputDir;
use crate::settings::Settings;
use crate::{ExplainArgs, ModeArg};

pub const HEATMAP_DIR: &str = "heatmaps";
pub const VARIANCE_THRESHOLD: f64 = 0.01;

/// Names, timestamps and strategy stamped onto an exported map.
pub fn annotate(h: &Heatmap, bundle: &DatasetBundle, i: usize, strategy: Option<&str>) -> Heatmap {
    let mut h = h.clone().with_names(Some(&bundle.channel_names));
    h.timestamps = bundle.sample_timestamps(i).map(<[String]>::to_vec);
    if strategy.is_some() {
        h.strategy = strategy.map(str::to_string);
    }
    h
}

/// Fuses one explanation's branch maps and annotates all three.
pub fn fuse_explanation(e: &Explanation, bundle: &DatasetBundle, i: usize, cfg: &FusionConfig) -> Result<FusedMaps> {
    let (hr, ht) = match (&e.resnet, &e.transformer) {
        (Some(r), Some(t)) => (r, t),
        _ => return Err(CliError::Usage("fusion needs both branch heatmaps".into())),
    };
    let maps = fuse_branches(hr, ht, cfg)?;
    Ok(FusedMaps {
        resnet: annotate(&maps.resnet, bundle, i, None),
        transformer: annotate(&maps.transformer, bundle, i, None),
        fused: annotate(&maps.fused, bundle, i, Some(cfg.strategy.as_str())),
    })
}

/// Regions, descriptors and the report for sample `i` of `bundle`
/// (normalized values drive the pattern shapes).
#[allow(clippy::too_many_arguments)]
pub fn report_for(
    model: &Model,
    bundle: &DatasetBundle,
    i: usize,
    output: &[f64],
    fused: &Heatmap,
    cfg: &FusionConfig,
    low_variance: &[LowVarianceChannel],
    set: &TemplateSet,
    opts: &ReportOptions,
    client: Option<&dyn TextClient>,
) -> Result<ExplanationReport> {
    let regions = identify_regions(
        fused,
        Some(&bundle.channel_names),
        bundle.sample_timestamps(i),
        cfg.threshold_quantile,
        cfg.gap_merge,
        MAX_REGIONS,
    )?;
    let descriptors = describe_regions(&regions, bundle.samples[i].data(), bundle.channels())?;
    let input = ReportInput {
        sample_id: i.to_string(),
        prediction: describe_prediction(model, output),
        seq_len: bundle.seq_len(),
        regions,
        descriptors,
        low_variance: low_variance.to_vec(),
    };
    Ok(generate_report(&input, set, opts, client)?)
}

pub fn report_options(s: &mut Settings, domain: Option<String>, mode: Option<ModeArg>) -> Result<ReportOptions> {
    let domain: String = s.get("domain", domain, Domain::Generic.as_str().to_string())?;
    let domain = Domain::parse(&domain)
        .ok_or_else(|| CliError::Usage(format!("domain {domain:?}: expected one of clinical, industrial, generic")))?;
    let mode: String = s.get("mode", mode.map(|m| m.to_string()), ModeArg::Template.to_string())?;
    let mode = match mode.as_str() {
        "template" => GenerationMode::Template,
        "stub" => GenerationMode::ExternalClient,
        other => return Err(CliError::Usage(format!("mode {other:?}: expected template or stub"))),
    };
    Ok(ReportOptions {
        domain,
        mode,
        ..ReportOptions::default()
    })
}

pub fn run(args: ExplainArgs) -> Result<()> {
    let mut s = Settings::load(args.common.config.as_deref())?;
    let model = load_model(&mut s, "checkpoint", args.checkpoint)?;
    require_hybrid(&model, "explain")?;
    let loaded = data::load(&mut s, args.data)?;
    let idx: usize = s.get("sample_id", args.sample_id, 0)?;
    let (cfg, temporal) = fusion_config(&mut s, &args.fusion)?;
    let opts = report_options(&mut s, args.domain, args.mode)?;
    let threshold: f64 = s.get("variance_threshold", args.variance_threshold, VARIANCE_THRESHOLD)?;
    s.get::<u64>("seed", args.common.seed, 0)?;
    s.reject_unknown()?;
    let bundle = &loaded.data;
    check_compatible(&model, bundle)?;
    if idx >= bundle.len() {
        return Err(CliError::Usage(format!("--sample-id {idx} out of range for {} samples", bundle.len())));
    }

    let x = stack(std::iter::once(&bundle.samples[idx]));
    let e = explain_batch(&model, &x, None, temporal)?.remove(0);
    let maps = fuse_explanation(&e, bundle, idx, &cfg)?;
    let low_variance = flag_low_variance_channels(&loaded.raw, threshold);
    let stub = StubClient(StubBehavior::Echo);
    let client: Option<&dyn TextClient> = Some(&stub);
    let set = TemplateSet::bundled();
    let report = report_for(&model, bundle, idx, &e.output, &maps.fused, &cfg, &low_variance, &set, &opts, client)?;

    let cache = model.forward(&x, Mode::Eval, Track::NONE)?;
    let attention = global_attention(&cache, 0)?;
    let resnet_cfg = model.config.resnet.as_ref().expect("hybrid has a resnet branch");
    let schedule = resnet_cfg.layer_schedule();
    let erf = effective_receptive_field(&schedule);
    let filters = first_layer_filters(&model, Some(&bundle.channel_names))?;

    let mut out = OutputDir::create(&args.common.out)?;
    for (name, h) in [("resnet", &maps.resnet), ("transformer", &maps.transformer), ("fused", &maps.fused)] {
        out.write(&format!("{HEATMAP_DIR}/{name}.json"), h.to_json().as_bytes())?;
    }
    out.write("report.md", report.to_markdown().as_bytes())?;
    let mut json_report = report.to_json();
    json_report.push('\n');
    out.write("report.json", json_report.as_bytes())?;
    out.write_json("attention_global.json", &json!({"sample": idx, "matrix": attention}))?;
    out.write_json("erf.json", &json!({"layers": schedule, "erf": erf}))?;
    out.write_json("filters.json", &filters)?;
    let summary = json!({
        "sample": idx,
        "prediction": report.prediction,
        "regions": report.regions.len(),
        "strategy": cfg.strategy.as_str(),
        "mode": report.mode,
    });
    out.finish("explain", &s, summary)?;
    println!("sample {idx}: {}", report.prediction);
    for r in &report.sentences {
        println!("  {r}");
    }
    println!("{}", report.summary);
    println!("wrote heatmaps and report to {}", args.common.out.display());
    Ok(())
}
