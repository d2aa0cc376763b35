use serde_json::json;
use tsxplain_core::datasets::{generate_synthetic, split, Split, SyntheticSpec};

use crate::data::{BUNDLE_FILE, SPLIT_FRACTIONS};
use crate::error::{CliError, Result};
use crate::output::{sha256_hex, OutputDir};
use crate::settings::Settings;
use crate::SynthArgs;

pub fn run(args: SynthArgs) -> Result<()> {
    let mut s = Settings::load(args.common.config.as_deref())?;
    let d = SyntheticSpec::default();
    let spec = SyntheticSpec {
        n_samples: s.get("n", args.n, d.n_samples)?,
        seq_len: s.get("seq_len", args.seq_len, d.seq_len)?,
        seed: s.get("seed", args.common.seed, d.seed)?,
        anomaly_rate: s.get("anomaly_rate", args.anomaly_rate, d.anomaly_rate)?,
        pattern_mix: d.pattern_mix,
    };
    s.reject_unknown()?;
    if spec.n_samples == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let mut bundle = generate_synthetic(&spec).map_err(|e| CliError::Usage(e.to_string()))?;
    split(&mut bundle, SPLIT_FRACTIONS, spec.seed)?;
    let bytes = serde_json::to_vec(&bundle).expect("bundle serializes");
    let dataset_hash = sha256_hex(&bytes);
    let mut out = OutputDir::create(&args.common.out)?;
    out.write(BUNDLE_FILE, &bytes)?;
    let labels = bundle.targets.labels().unwrap_or(&[]);
    let positives = labels.iter().filter(|l| **l == 1).count();
    let count = |sp: Split| bundle.splits.iter().filter(|x| **x == sp).count();
    let summary = json!({
        "samples": bundle.len(),
        "seq_len": bundle.seq_len(),
        "channels": bundle.channel_names,
        "injected": positives,
        "splits": {"train": count(Split::Train), "val": count(Split::Val), "test": count(Split::Test)},
        "dataset_hash": dataset_hash,
    });
    out.finish("synth", &s, summary)?;
    println!(
        "wrote {} samples of {}x{} ({} injected; train/val/test {}/{}/{}) to {}",
        bundle.len(),
        bundle.seq_len(),
        bundle.channels(),
        positives,
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
        args.common.out.display()
    );
    println!("channels: {}", bundle.channel_names.join(", "));
    println!("dataset sha256: {dataset_hash}");
    Ok(())
}
