//! One pass/fail line per acceptance criterion. Runs without the libtest
//! harness so the lines reach stdout; exits nonzero when an evaluated
//! criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use pulldown_cmark::{Event, HeadingLevel, Options, Parser, Tag, TagEnd};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsxplain_core::autodiff::{Tape, Var};
use tsxplain_core::datasets::{
    generate_synthetic, load_energy_csv, normalize_channels, split, DatasetBundle, NormMode, Split, SyntheticSpec,
    Targets, UciOptions,
};
use tsxplain_core::eval::consensus::{calibrate_concat, consensus_experiment, default_arms, disjoint_noise_instance, instance_family};
use tsxplain_core::eval::faithfulness::deletion_test;
use tsxplain_core::eval::sign_test;
use tsxplain_core::eval::text::{bleu4, flesch_kincaid_from_counts, rouge_l, syllables, tokenize};
use tsxplain_core::explain::{
    describe_regions, generate_report, identify_regions, ReportInput, ReportOptions, TemplateSet, MAX_REGIONS,
};
use tsxplain_core::fusion::{fuse_branches, minmax_normalize, smooth_moving_average, FusionConfig};
use tsxplain_core::gradcheck::{gradcheck, step, within_tolerance};
use tsxplain_core::models::{Mode, Model, ModelConfig, ModelKind, ResNetConfig, Task, Track, TransformerConfig};
use tsxplain_core::saliency::{
    effective_receptive_field, explain_samples, head_maps, rollout, Explanation, Heatmap, Source, TemporalSource,
};
use tsxplain_core::tensor::{Result as TResult, Tensor};
use tsxplain_core::training::{
    default_alpha_grid, grid_search_alpha, objective_and_gradient, train, TrainConfig, ALPHA_TIE_TOL,
};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const GRAD_CONFIGS: usize = 100;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const HYBRID_COORDS: usize = 8;
const ATTENTION_FORWARDS: usize = 50;
const STOCHASTIC_TOL: f64 = 1e-9;
const ORACLE_TOL: f64 = 1e-9;
const SYNTH_N: usize = 2000;
const SYNTH_T: usize = 100;
const SYNTH_SEED: u64 = 0;
const SYNTH_EPOCHS: usize = 15;
const SYNTH_LR: f64 = 1e-3;
const SYNTH_MIN_ACCURACY: f64 = 0.90;
const SYNTH_BUDGET: Duration = Duration::from_secs(600);
const FAITH_SEEDS: u64 = 20;
const FAITH_FRACTION: f64 = 0.2;
const FAITH_SUBSET: usize = 150;
const FAITH_MIN_RANDOM_WINS: u64 = 16;
const FAITH_MIN_RESNET_WINS: u64 = 14;
const FAITH_MAX_P: f64 = 0.05;
const CONSENSUS_INSTANCES: usize = 200;
const CONSENSUS_SHAPE: (usize, usize) = (60, 4);
const CONSENSUS_VS_WEIGHTED: f64 = 0.95;
const CONSENSUS_VS_CONCAT: f64 = 0.90;
const GRID_OBJECTIVES: usize = 500;
/// Comma-separated criterion ids to run; all when unset.
const ONLY_ENV: &str = "TSXPLAIN_ACCEPTANCE_ONLY";
const UCI_ENV: &str = "TSXPLAIN_UCI_CSV";
const UCI_ROWS: usize = 19_735;
const UCI_EPOCHS: usize = 5;
const UCI_STRIDE: usize = 10;
const TEXT_SAMPLES: usize = 100;
const TEXT_BUDGET: Duration = Duration::from_secs(10);

enum Outcome {
    Pass(String),
    Fail(String),
    /// Required input is absent; the criterion is reported failed, not evaluated.
    Unavailable(String),
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

fn scores(t: &mut Tape, h: Var) -> TResult<Var> {
    let ht = t.transpose_last2(h)?;
    t.bmm(h, ht)
}

/// Every tape op inside one of five composite objectives.
fn op_groups(rng: &mut ChaCha8Rng) -> TResult<(usize, usize)> {
    let mut checked = 0;
    let mut failures = 0;
    let mut tally = |r: tsxplain_core::gradcheck::GradCheckReport| {
        checked += r.checked;
        failures += r.failures;
    };

    let (a, b, bias, s) = (rand_tensor(rng, &[2, 3]), rand_tensor(rng, &[2, 3]), rand_tensor(rng, &[3]), rand_tensor(rng, &[1]));
    let w: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let m: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    tally(gradcheck(&[a, b, bias, s], |t, v| {
        let x = t.mul(v[0], v[1])?;
        let x = t.sub(x, v[1])?;
        let x = t.add_trailing(x, v[2])?;
        let x = t.mul_trailing(x, v[2])?;
        let x = t.mul_scalar(x, v[3])?;
        let x = t.mul_const(x, m.clone())?;
        let x = t.affine(x, 0.7, 0.1)?;
        let g = t.gelu(x)?;
        let sg = t.sigmoid(x)?;
        let x = t.add(g, sg)?;
        let mm = t.mean_axis(x, 0)?;
        let mm = t.mean(mm)?;
        let d = t.dot_const(x, w.clone())?;
        t.add(mm, d)
    })?);

    let (a, b, q, k) = (rand_tensor(rng, &[3, 4]), rand_tensor(rng, &[4, 2]), rand_tensor(rng, &[2, 3, 4]), rand_tensor(rng, &[2, 3, 4]));
    let w: Vec<f64> = (0..18).map(|_| rng.random_range(-1.0..1.0)).collect();
    tally(gradcheck(&[a, b, q, k], |t, v| {
        let m = t.matmul(v[0], v[1])?;
        let kt = t.transpose_last2(v[3])?;
        let sc = t.bmm(v[2], kt)?;
        let p = t.softmax(sc, 2)?;
        let o = t.bmm(p, v[2])?;
        let o = t.reshape(o, &[6, 4])?;
        let o = t.narrow_rows(o, 3)?;
        let o = t.matmul(o, v[1])?;
        let both = t.add(o, m)?;
        let l1 = t.dot_const(both, w[..6].to_vec())?;
        let l2 = t.dot_const(p, w.clone())?;
        t.add(l1, l2)
    })?);

    let x = rand_tensor(rng, &[2, 3, 4]);
    let w: Vec<f64> = (0..36).map(|_| rng.random_range(-1.0..1.0)).collect();
    tally(gradcheck(&[x], |t, v| {
        let h = t.split_heads(v[0], 2)?;
        let sc = scores(t, h)?;
        let h = t.banded_softmax(sc, 1)?;
        let h = t.layer_norm(h, 2, 1e-5)?;
        let h = t.layer_norm(h, 0, 1e-5)?;
        let m = t.merge_heads(h, 2)?;
        t.dot_const(m, w.clone())
    })?);

    let x = rand_tensor(rng, &[2, 2, 9]);
    let (w1, b1, g, be, w2) = (
        rand_tensor(rng, &[3, 2, 3]),
        rand_tensor(rng, &[3]),
        rand_tensor(rng, &[3]),
        rand_tensor(rng, &[3]),
        rand_tensor(rng, &[2, 3, 3]),
    );
    let mw: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
    tally(gradcheck(&[x, w1, b1, g, be, w2], |t, v| {
        let y = t.conv1d(v[0], v[1], Some(v[2]), 1, 1)?;
        let (y, _) = t.batch_norm(y, v[3], v[4], 1e-5, None)?;
        let y = t.relu(y)?;
        let y = t.conv1d(y, v[5], None, 2, 1)?;
        let y = t.max_pool1d(y, 3, 1, 1)?;
        t.dot_const(y, mw.clone())
    })?);

    let (x, g, be, logits) = (rand_tensor(rng, &[2, 3, 4]), rand_tensor(rng, &[3]), rand_tensor(rng, &[3]), rand_tensor(rng, &[4, 3]));
    let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
    let target: Vec<f64> = (0..24).map(|_| rng.random_range(-2.0..2.0)).collect();
    let (rm, rv) = ([0.1, -0.2, 0.3], [1.5, 0.7, 1.1]);
    tally(gradcheck(&[x, g, be, logits], |t, v| {
        let (y, _) = t.batch_norm(v[0], v[1], v[2], 1e-5, Some((&rm, &rv)))?;
        let gp = t.global_avg_pool(y)?;
        let s = t.sum(gp)?;
        let h = t.huber(y, &target, 1.0)?;
        let ce = t.cross_entropy(v[3], &labels)?;
        let a = t.add(s, h)?;
        t.add(a, ce)
    })?);
    Ok((checked, failures))
}

fn micro_hybrid(rng: &mut ChaCha8Rng, c: usize, t: usize, task: Task, outputs: usize) -> ModelConfig {
    let heads = rng.random_range(1..3);
    let head_dim = rng.random_range(2..4);
    let mut cfg = ModelConfig::new(ModelKind::Hybrid, task, outputs, c, t);
    cfg.resnet = Some(ResNetConfig {
        stem_filters: rng.random_range(2..4),
        stem_kernel: [3, 5][rng.random_range(0..2)],
        stem_stride: rng.random_range(1..3),
        pool_stride: rng.random_range(1..3),
        stage_filters: vec![3, 4],
        blocks_per_stage: 1,
        ..ResNetConfig::desk(c, outputs, task)
    });
    cfg.transformer = Some(TransformerConfig {
        embed_dim: heads * head_dim,
        layers: rng.random_range(1..3),
        heads,
        head_dim,
        ffn_ratio: 2,
        dropout: 0.0,
        ..TransformerConfig::desk(c, t, outputs, task)
    });
    cfg
}

/// Moves every parameter off its initial value. Zero BN shifts put
/// all-zero input windows exactly on a ReLU kink.
fn jitter(model: &mut Model, rng: &mut ChaCha8Rng) {
    for t in &mut model.params.tensors {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
    }
}

/// Finite differences of the full hybrid training objective at random
/// parameter coordinates; alternates classification and regression.
fn hybrid_loss_check(rng: &mut ChaCha8Rng, config: usize) -> (usize, usize) {
    let t = rng.random_range(20..28);
    let mut b = generate_synthetic(&SyntheticSpec {
        n_samples: 8,
        seq_len: t,
        seed: config as u64,
        ..SyntheticSpec::default()
    })
    .unwrap();
    b = normalize_channels(b, NormMode::Zscore);
    let (task, outputs) = if config.is_multiple_of(2) {
        (Task::Classification, 2)
    } else {
        b.task = Task::Regression;
        b.targets = Targets::Values((0..b.len()).map(|_| rng.random_range(-2.0..2.0)).collect());
        (Task::Regression, 1)
    };
    let mut model = Model::new(micro_hybrid(rng, b.channels(), t, task, outputs), config as u64).unwrap();
    jitter(&mut model, rng);
    let idx: Vec<usize> = (0..4).collect();
    let cfg = TrainConfig::default();
    let (_, grads) = objective_and_gradient(&model, &b, &idx, &cfg).unwrap();
    let mut failures = 0;
    for _ in 0..HYBRID_COORDS {
        let p = rng.random_range(0..model.params.len());
        let j = rng.random_range(0..model.params.tensors[p].numel());
        let x0 = model.params.tensors[p].data()[j];
        let h = step(x0);
        model.params.tensors[p].data_mut()[j] = x0 + h;
        let fp = objective_and_gradient(&model, &b, &idx, &cfg).unwrap().0;
        model.params.tensors[p].data_mut()[j] = x0 - h;
        let fm = objective_and_gradient(&model, &b, &idx, &cfg).unwrap().0;
        model.params.tensors[p].data_mut()[j] = x0;
        if !within_tolerance(grads[p][j], (fp - fm) / (2.0 * h)) {
            failures += 1;
        }
    }
    (HYBRID_COORDS, failures)
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let (mut checked, mut failures) = (0, 0);
    for config in 0..GRAD_CONFIGS {
        let mut rng = ChaCha8Rng::seed_from_u64(config as u64);
        let (c, f) = op_groups(&mut rng).unwrap();
        let (hc, hf) = hybrid_loss_check(&mut rng, config);
        checked += c + hc;
        failures += f + hf;
    }
    let elapsed = start.elapsed();
    verdict(
        failures == 0 && elapsed < GRAD_BUDGET,
        format!(
            "{GRAD_CONFIGS} configurations, {checked} coordinates, {failures} outside max(1e-4 abs, 1e-3 rel), {:.1}s (budget {}s)",
            elapsed.as_secs_f64(),
            GRAD_BUDGET.as_secs()
        ),
    )
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

fn criterion_attention() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut rows = 0usize;
    for k in 0..ATTENTION_FORWARDS {
        let t = rng.random_range(2..40);
        let c = rng.random_range(1..6);
        let mut cfg = ModelConfig::new(ModelKind::Transformer, Task::Classification, 2, c, t);
        if k % 2 == 1 {
            let tc = cfg.transformer.take().unwrap();
            cfg.transformer = Some(tc.windowed(2 * rng.random_range(0..4) + 1));
        }
        let model = Model::new(cfg, k as u64).unwrap();
        let x = rand_tensor(&mut rng, &[2, t, c]);
        let cache = model.forward(&x, Mode::Eval, Track::NONE).unwrap();
        for s in 0..2 {
            let maps = head_maps(&cache, s).unwrap();
            let layer_means: Vec<Vec<Vec<f64>>> = maps
                .iter()
                .map(|heads| {
                    (0..t)
                        .map(|i| (0..t).map(|j| heads.iter().map(|h| h[i][j]).sum::<f64>() / heads.len() as f64).collect())
                        .collect()
                })
                .collect();
            let r = rollout(&layer_means).unwrap();
            for row in maps.iter().flatten().flatten().chain(r.matrix.iter()) {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                rows += 1;
            }
        }
    }
    let id = rollout(&[identity(7), identity(7), identity(7)]).unwrap();
    let identity_ok = id.matrix == identity(7);
    verdict(
        worst <= STOCHASTIC_TOL && identity_ok,
        format!("{ATTENTION_FORWARDS} forwards, {rows} attention and rollout rows, max |sum - 1| = {worst:.2e}; identity rollout exact: {identity_ok}"),
    )
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= ORACLE_TOL
}

fn criterion_formulas() -> Outcome {
    let mut failed: Vec<&str> = Vec::new();
    let mut check = |name: &'static str, ok: bool| {
        if !ok {
            failed.push(name);
        }
    };
    check("erf single k7", effective_receptive_field(&[(7, 1)]) == vec![7]);
    check("erf k7s2,k3s1", effective_receptive_field(&[(7, 2), (3, 1)]) == vec![7, 7 + (3 - 1) * 2]);
    check("erf k1", effective_receptive_field(&[(1, 1), (1, 2), (1, 1)]).iter().all(|e| *e == 1));

    let h = |v: Vec<f64>| Heatmap::new(v.len(), 1, v, Source::Fused).unwrap();
    let n = minmax_normalize(&h(vec![2.0, 4.0, 6.0]));
    check("minmax [2,4,6]", close(n.values[0], 0.0) && close(n.values[1], 0.5) && close(n.values[2], 1.0));
    check("minmax constant", minmax_normalize(&h(vec![5.0, 5.0])).values == vec![0.0, 0.0]);
    let s = smooth_moving_average(&h(vec![0.0, 3.0, 0.0]), 3).unwrap();
    check("moving average [0,3,0]", close(s.values[0], 1.5) && close(s.values[1], 1.0) && close(s.values[2], 1.5));
    let raw = h(vec![0.3, 0.9, 0.1, 0.4]);
    check("moving average window 1", smooth_moving_average(&raw, 1).unwrap().values == raw.values);

    let c = tokenize("the cat sat on the mat with a red hat");
    let r = tokenize("the cat is on the mat with the red hat");
    let oracle = (0.8f64 * (5.0 / 9.0) * (2.0 / 8.0) * (1.0 / 7.0)).powf(0.25);
    check("bleu 10-token", close(bleu4(&c, &[r]).unwrap(), oracle));
    check("bleu identity", close(bleu4(&c, std::slice::from_ref(&c)).unwrap(), 1.0));

    let rl = rouge_l(&tokenize("a b c d"), &tokenize("a c d e"));
    check("rouge-l", close(rl.recall, 0.75) && close(rl.precision, 0.75) && close(rl.f1, 0.75));
    check("rouge-l disjoint", rouge_l(&tokenize("x y"), &tokenize("a b")).f1 == 0.0);

    check("flesch-kincaid 10/1/13", close(flesch_kincaid_from_counts(10, 1, 13), 3.65));
    check("syllables", syllables("table") == 2 && syllables("make") == 1 && syllables("elevated") == 4);
    let n = failed.len();
    verdict(n == 0, format!("13 oracle cases within {ORACLE_TOL:e}; failing: {failed:?}"))
}

struct Trained {
    model: Model,
    data: DatasetBundle,
}

fn criterion_synthetic() -> (Outcome, Trained) {
    let start = Instant::now();
    let mut raw = generate_synthetic(&SyntheticSpec {
        n_samples: SYNTH_N,
        seq_len: SYNTH_T,
        seed: SYNTH_SEED,
        ..SyntheticSpec::default()
    })
    .unwrap();
    split(&mut raw, [0.7, 0.15, 0.15], SYNTH_SEED).unwrap();
    let data = normalize_channels(raw, NormMode::Zscore);
    let cfg = ModelConfig::new(ModelKind::Hybrid, data.task, 2, data.channels(), data.seq_len());
    let mut model = Model::new(cfg, SYNTH_SEED).unwrap();
    let tc = TrainConfig {
        lr: SYNTH_LR,
        max_epochs: SYNTH_EPOCHS,
        seed: SYNTH_SEED,
        ..TrainConfig::default()
    };
    let out = train(&mut model, &data, &tc).unwrap();
    let elapsed = start.elapsed();
    let idx = data.indices(Split::Test);
    let preds = model.predict(&data.batch(&idx)).unwrap();
    let labels = data.targets.labels().unwrap();
    let correct = idx.iter().zip(&preds).filter(|(&i, p)| **p as usize == labels[i]).count();
    let acc = correct as f64 / idx.len() as f64;
    let outcome = verdict(
        acc >= SYNTH_MIN_ACCURACY && elapsed < SYNTH_BUDGET,
        format!(
            "hybrid test accuracy {acc:.4} (need >= {SYNTH_MIN_ACCURACY}) on {} samples after {} epochs, {:.0}s (budget {}s)",
            idx.len(),
            out.history.epochs.len(),
            elapsed.as_secs_f64(),
            SYNTH_BUDGET.as_secs()
        ),
    );
    (outcome, Trained { model, data })
}

fn subset_targets(t: &Targets, idx: &[usize]) -> Targets {
    match t {
        Targets::Labels(l) => Targets::Labels(idx.iter().map(|&i| l[i]).collect()),
        Targets::Values(v) => Targets::Values(idx.iter().map(|&i| v[i]).collect()),
    }
}

struct TestMaps {
    idx: Vec<usize>,
    explanations: Vec<Explanation>,
    fused: Vec<Heatmap>,
    resnet: Vec<Heatmap>,
}

fn test_maps(tr: &Trained) -> TestMaps {
    let idx = tr.data.indices(Split::Test);
    let samples: Vec<&Tensor> = idx.iter().map(|&i| &tr.data.samples[i]).collect();
    let explanations = explain_samples(&tr.model, &samples, 32, TemporalSource::Rollout).unwrap();
    let cfg = FusionConfig::default();
    let (mut fused, mut resnet) = (Vec::new(), Vec::new());
    for e in &explanations {
        let m = fuse_branches(e.resnet.as_ref().unwrap(), e.transformer.as_ref().unwrap(), &cfg).unwrap();
        fused.push(m.fused);
        resnet.push(m.resnet);
    }
    TestMaps {
        idx,
        explanations,
        fused,
        resnet,
    }
}

/// Each seed draws a test subset and the random masking order.
fn criterion_faithfulness(tr: &Trained, maps: &TestMaps) -> Outcome {
    let fill = tr.data.train_channel_means();
    let (mut vs_random, mut vs_resnet) = (0u64, 0u64);
    let (mut fused_drops, mut random_drops, mut resnet_drops) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 0..FAITH_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pos: Vec<usize> = (0..maps.idx.len()).collect();
        pos.shuffle(&mut rng);
        pos.truncate(FAITH_SUBSET.min(pos.len()));
        let ids: Vec<usize> = pos.iter().map(|&p| maps.idx[p]).collect();
        let samples: Vec<Tensor> = ids.iter().map(|&i| tr.data.samples[i].clone()).collect();
        let targets = subset_targets(&tr.data.targets, &ids);
        let fused: Vec<Heatmap> = pos.iter().map(|&p| maps.fused[p].clone()).collect();
        let resnet: Vec<Heatmap> = pos.iter().map(|&p| maps.resnet[p].clone()).collect();
        let f = deletion_test(&tr.model, &samples, &targets, &fused, &[FAITH_FRACTION], &fill, seed).unwrap();
        let r = deletion_test(&tr.model, &samples, &targets, &resnet, &[FAITH_FRACTION], &fill, seed).unwrap();
        vs_random += u64::from(f.drop_abs[0] > f.random_drop_abs[0]);
        vs_resnet += u64::from(f.drop_abs[0] > r.drop_abs[0]);
        fused_drops.push(f.drop_abs[0]);
        random_drops.push(f.random_drop_abs[0]);
        resnet_drops.push(r.drop_abs[0]);
    }
    let p = sign_test(vs_random, FAITH_SEEDS);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    verdict(
        vs_random >= FAITH_MIN_RANDOM_WINS && p < FAITH_MAX_P && vs_resnet >= FAITH_MIN_RESNET_WINS,
        format!(
            "fused > random in {vs_random}/{FAITH_SEEDS} (sign p = {p:.2e}), fused > ResNet-only in {vs_resnet}/{FAITH_SEEDS}; mean accuracy drop at f={FAITH_FRACTION}: fused {:.3}, random {:.3}, ResNet {:.3}",
            mean(&fused_drops),
            mean(&random_drops),
            mean(&resnet_drops)
        ),
    )
}

fn criterion_consensus() -> Outcome {
    let (t, c) = CONSENSUS_SHAPE;
    let proj = calibrate_concat(&instance_family(50, t, c, 1, disjoint_noise_instance)).unwrap();
    let family = instance_family(CONSENSUS_INSTANCES, t, c, 2, disjoint_noise_instance);
    let r = consensus_experiment(&family, &default_arms(proj), 1000, 3).unwrap();
    let (w, k) = (r.paired[0].baseline_wins, r.paired[1].baseline_wins);
    verdict(
        w >= CONSENSUS_VS_WEIGHTED && k >= CONSENSUS_VS_CONCAT,
        format!(
            "multiplicative lower error than weighted in {:.1}% (need {}%), than concat_project in {:.1}% (need {}%) of {CONSENSUS_INSTANCES}; mean errors {:?}",
            100.0 * w,
            100.0 * CONSENSUS_VS_WEIGHTED,
            100.0 * k,
            100.0 * CONSENSUS_VS_CONCAT,
            r.arms.iter().map(|a| (a.strategy.as_str(), (a.mean * 1000.0).round() / 1000.0)).collect::<Vec<_>>()
        ),
    )
}

/// Exhaustive scan written independently of the library.
fn brute_argmax(grid: &[f64], scores: &[f64]) -> f64 {
    let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut best: Option<f64> = None;
    for (a, s) in grid.iter().zip(scores) {
        if top - s > ALPHA_TIE_TOL {
            continue;
        }
        best = Some(match best {
            None => *a,
            Some(b) => {
                // Distances compared in nano-units so 0.3 and 0.7 are equidistant.
                let (da, db) = (((a - 0.5).abs() * 1e9).round(), ((b - 0.5).abs() * 1e9).round());
                if da < db || (da == db && *a < b) {
                    *a
                } else {
                    b
                }
            }
        });
    }
    best.unwrap()
}

fn criterion_grid_search() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let grid = default_alpha_grid();
    let mut mismatches = 0;
    let mut ties = 0;
    for k in 0..GRID_OBJECTIVES {
        let mut scores: Vec<f64> = (0..grid.len()).map(|_| rng.random_range(0.0..1.0)).collect();
        if k % 3 == 0 {
            // Plant ties at random grid points.
            let top = rng.random_range(1.0..2.0);
            for _ in 0..rng.random_range(2..5) {
                scores[rng.random_range(0..grid.len())] = top;
            }
            ties += 1;
        }
        let found = grid_search_alpha(&grid, |a| Ok(scores[grid.iter().position(|g| *g == a).unwrap()])).unwrap();
        if found.alpha != brute_argmax(&grid, &scores) {
            mismatches += 1;
        }
    }
    let peak = grid_search_alpha(&grid, |a| Ok(-(a - 0.3f64).powi(2))).unwrap().alpha;
    let flat = grid_search_alpha(&grid, |_| Ok(1.0)).unwrap().alpha;
    let single = grid_search_alpha(&[0.8], |_| Ok(0.0)).unwrap().alpha;
    let sym = grid_search_alpha(&grid, |a| Ok(if (a - 0.3).abs() < 1e-9 || (a - 0.7).abs() < 1e-9 { 1.0 } else { 0.0 })).unwrap().alpha;
    verdict(
        mismatches == 0 && close(peak, 0.3) && flat == 0.5 && single == 0.8 && close(sym, 0.3),
        format!(
            "{GRID_OBJECTIVES} random objectives ({ties} with planted ties), {mismatches} disagree with brute force; peak 0.3 -> {peak}, flat -> {flat}, symmetric tie 0.3/0.7 -> {sym}"
        ),
    )
}

fn criterion_uci() -> Outcome {
    let path = match std::env::var(UCI_ENV) {
        Ok(p) if Path::new(&p).is_file() => PathBuf::from(p),
        Ok(p) => return Outcome::Unavailable(format!("{UCI_ENV}={p} is not a file")),
        Err(_) => return Outcome::Unavailable(format!("energy CSV not provided; set {UCI_ENV} to energydata_complete.csv")),
    };
    let opts = UciOptions {
        stride: UCI_STRIDE,
        ..UciOptions::default()
    };
    let csv = load_energy_csv(&path, &opts).unwrap();
    let mut b = csv.bundle;
    split(&mut b, [0.7, 0.15, 0.15], 0).unwrap();
    let b = normalize_channels(b, NormMode::Zscore);
    let cfg = ModelConfig::new(ModelKind::Hybrid, Task::Regression, 1, b.channels(), b.seq_len());
    let mut model = Model::new(cfg, 0).unwrap();
    let tc = TrainConfig {
        max_epochs: UCI_EPOCHS,
        patience: UCI_EPOCHS,
        lr: SYNTH_LR,
        ..TrainConfig::default()
    };
    let out = train(&mut model, &b, &tc).unwrap();
    let losses: Vec<f64> = out.history.epochs.iter().map(|e| e.train_loss).collect();
    let decreasing = losses.len() >= 3 && losses[1] < losses[0] && losses[2] < losses[1];
    let r2 = out.history.epochs.iter().map(|e| e.val_metric).fold(f64::NEG_INFINITY, f64::max);
    let final_r2 = out.history.epochs.last().map_or(f64::NAN, |e| e.val_metric);
    verdict(
        csv.raw_rows == UCI_ROWS && decreasing && final_r2 > 0.0,
        format!(
            "{} rows (need {UCI_ROWS}); {} windows; train loss {:?}; validation R² final {final_r2:.4} (best {r2:.4})",
            csv.raw_rows,
            b.len(),
            losses.iter().map(|l| (l * 1e4).round() / 1e4).collect::<Vec<_>>()
        ),
    )
}

fn run_cli(args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_tsxplain"))
        .args(args)
        .env("RUST_LOG", "warn")
        .stdout(std::process::Stdio::null())
        .status()
        .unwrap();
    assert!(status.success(), "tsxplain {args:?} exited with {status}");
}

/// Every `.json` under `dir`, keyed by relative path; manifest timing removed.
fn json_outputs(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "json") {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                let mut bytes = std::fs::read(&p).unwrap();
                if rel == "manifest.json" {
                    let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
                    v.as_object_mut().unwrap().remove("timing");
                    bytes = serde_json::to_vec(&v).unwrap();
                }
                out.insert(rel, bytes);
            }
        }
    }
    out
}

fn criterion_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let p = |s: &str| tmp.path().join(s).display().to_string();
    let runs: Vec<(&str, Vec<String>)> = vec![
        ("synth", vec!["synth", "--n", "100", "--seed", "7"].into_iter().map(String::from).collect()),
        (
            "train",
            vec!["train", "--data", &p("synth-a"), "--model", "hybrid", "--epochs", "2", "--seed", "3"]
                .into_iter()
                .map(String::from)
                .collect(),
        ),
        (
            "explain",
            vec!["explain", "--checkpoint", &format!("{}/checkpoint.json", p("train-a")), "--data", &p("synth-a"), "--sample-id", "4"]
                .into_iter()
                .map(String::from)
                .collect(),
        ),
        (
            "eval",
            vec!["eval", "--checkpoint", &format!("{}/checkpoint.json", p("train-a")), "--data", &p("synth-a"), "--limit", "8", "--seed", "5"]
                .into_iter()
                .map(String::from)
                .collect(),
        ),
        (
            "ablate",
            vec![
                "ablate",
                "--data",
                &p("synth-a"),
                "--checkpoint",
                &format!("{}/checkpoint.json", p("train-a")),
                "--instances",
                "40",
                "--calibration",
                "10",
                "--resamples",
                "100",
                "--limit",
                "8",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
        ),
    ];
    let mut differing = Vec::new();
    let mut files = 0;
    for (name, args) in &runs {
        let mut outs = Vec::new();
        for run in ["a", "b"] {
            let out = p(&format!("{name}-{run}"));
            let mut full: Vec<&str> = args.iter().map(String::as_str).collect();
            full.extend(["--out", &out]);
            run_cli(&full);
            outs.push(json_outputs(Path::new(&out)));
        }
        files += outs[0].len();
        if outs[0].keys().ne(outs[1].keys()) {
            differing.push(format!("{name}: file sets differ"));
        }
        for (k, v) in &outs[0] {
            if outs[1].get(k) != Some(v) {
                differing.push(format!("{name}/{k}"));
            }
        }
    }
    verdict(
        differing.is_empty(),
        format!("5 commands run twice, {files} JSON files compared (manifest timing excluded); differing: {differing:?}"),
    )
}

/// Every table row has the header's cell count and an H1 opens the document.
fn commonmark_ok(md: &str) -> bool {
    let mut opts = Options::empty();
    opts.insert(Options::ENABLE_TABLES);
    let (mut h1, mut widths, mut cells) = (0, Vec::new(), 0);
    for ev in Parser::new_ext(md, opts) {
        match ev {
            Event::Start(Tag::Heading { level: HeadingLevel::H1, .. }) => h1 += 1,
            Event::Start(Tag::TableHead) | Event::Start(Tag::TableRow) => cells = 0,
            Event::Start(Tag::TableCell) => cells += 1,
            Event::End(TagEnd::TableHead) | Event::End(TagEnd::TableRow) => widths.push(cells),
            _ => {}
        }
    }
    h1 == 1 && widths.windows(2).all(|w| w[0] == w[1])
}

fn criterion_text(tr: &Trained, maps: &TestMaps) -> Outcome {
    let set = TemplateSet::bundled();
    let opts = ReportOptions::default();
    let cfg = FusionConfig::default();
    let n = TEXT_SAMPLES.min(maps.idx.len());
    let start = Instant::now();
    let mut reports = Vec::with_capacity(n);
    for k in 0..n {
        let i = maps.idx[k];
        let regions = identify_regions(
            &maps.fused[k],
            Some(&tr.data.channel_names),
            None,
            cfg.threshold_quantile,
            cfg.gap_merge,
            MAX_REGIONS,
        )
        .unwrap();
        let descriptors = describe_regions(&regions, tr.data.samples[i].data(), tr.data.channels()).unwrap();
        let input = ReportInput {
            sample_id: i.to_string(),
            prediction: format!("class {}", maps.explanations[k].target),
            seq_len: tr.data.seq_len(),
            regions,
            descriptors,
            low_variance: vec![],
        };
        reports.push(generate_report(&input, &set, &opts, None).unwrap().to_markdown());
    }
    let elapsed = start.elapsed();
    let parsed = reports.iter().filter(|m| commonmark_ok(m)).count();
    let self_bleu = reports
        .iter()
        .filter(|m| {
            let t = tokenize(m);
            bleu4(&t, std::slice::from_ref(&t)).unwrap() == 1.0
        })
        .count();
    verdict(
        elapsed < TEXT_BUDGET && parsed == n && self_bleu == n,
        format!(
            "{n} template reports in {:.3}s (budget {}s); CommonMark ok {parsed}/{n}; self-BLEU = 1.0 for {self_bleu}/{n}",
            elapsed.as_secs_f64(),
            TEXT_BUDGET.as_secs()
        ),
    )
}

/// Share of injected test samples whose top channel saliency is the planted channel.
fn planted_channel_share(tr: &Trained, maps: &TestMaps) -> (usize, usize) {
    let inj = tr.data.injections.as_ref().unwrap();
    let (mut hit, mut total) = (0, 0);
    for (k, &i) in maps.idx.iter().enumerate() {
        if let Some(j) = inj[i] {
            let s = &maps.explanations[k].channel_saliency;
            let top = (0..s.len()).max_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap();
            hit += usize::from(top == j.channel);
            total += 1;
        }
    }
    (hit, total)
}

fn main() {
    let mut failed = Vec::new();
    let mut report = |id: u32, name: &str, o: Outcome| {
        let line = match &o {
            Outcome::Pass(d) => format!("[PASS] {id:>2} {name}: {d}"),
            Outcome::Fail(d) => format!("[FAIL] {id:>2} {name}: {d}"),
            Outcome::Unavailable(d) => format!("[FAIL] {id:>2} {name}: not evaluated, {d}"),
        };
        println!("{line}");
        if matches!(o, Outcome::Fail(_)) {
            failed.push(id);
        }
    };
    let only: Option<Vec<u32>> = std::env::var(ONLY_ENV)
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let selected = |id: u32| only.as_ref().is_none_or(|o| o.contains(&id));
    if selected(1) {
        report(1, "gradient correctness", criterion_gradients());
    }
    if selected(2) {
        report(2, "attention invariants", criterion_attention());
    }
    if selected(3) {
        report(3, "formula fidelity", criterion_formulas());
    }
    // 5, 10 and the planted-channel line reuse the model trained for 4.
    let trained = if [4, 5, 10].into_iter().any(selected) {
        let (o4, trained) = criterion_synthetic();
        report(4, "synthetic end-to-end", o4);
        let maps = test_maps(&trained);
        Some((trained, maps))
    } else {
        None
    };
    if let (true, Some((tr, maps))) = (selected(5), &trained) {
        report(5, "faithfulness", criterion_faithfulness(tr, maps));
    }
    if selected(6) {
        report(6, "consensus claim", criterion_consensus());
    }
    if selected(7) {
        report(7, "grid search", criterion_grid_search());
    }
    if selected(8) {
        report(8, "UCI regression", criterion_uci());
    }
    if selected(9) {
        report(9, "determinism", criterion_determinism());
    }
    if let Some((tr, maps)) = &trained {
        if selected(10) {
            report(10, "text pipeline", criterion_text(tr, maps));
        }
        let (hit, total) = planted_channel_share(tr, maps);
        let share = hit as f64 / total.max(1) as f64;
        println!(
            "[INFO]    per sample, the injected channel has the largest channel saliency in {hit}/{total} positive test samples ({:.1}%)",
            100.0 * share
        );
    }
    if !failed.is_empty() {
        eprintln!("acceptance criteria failed: {failed:?}");
        std::process::exit(1);
    }
}
