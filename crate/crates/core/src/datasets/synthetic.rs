use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DataError, DatasetBundle, Result, Split, Targets};
use crate::models::Task;
use crate::tensor::Tensor;

pub const SYNTHETIC_CHANNELS: [&str; 5] = [
    "low_freq_sine",
    "step_function",
    "gaussian_noise",
    "high_freq_sine",
    "quadratic_trend",
];

/// Channels eligible for injection; the pure-noise channel is excluded.
const INJECTABLE: [usize; 4] = [0, 1, 3, 4];
const SIGNAL_NOISE: f64 = 0.05;
const NOISE_CHANNEL_SIGMA: f64 = 0.5;
const SPIKE_AMPLITUDE: f64 = 3.0;
const DRIFT_TOP: f64 = 1.5;
const DRIFT_LEN: usize = 20;
const OSC_AMPLITUDE: f64 = 1.0;
const OSC_PERIOD: f64 = 10.0;
const OSC_LEN: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    Spike,
    Drift,
    Oscillation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatternMix {
    pub spike: f64,
    pub drift: f64,
    pub oscillation: f64,
}

impl Default for PatternMix {
    fn default() -> Self {
        PatternMix {
            spike: 1.0 / 3.0,
            drift: 1.0 / 3.0,
            oscillation: 1.0 / 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub anomaly_rate: f64,
    pub pattern_mix: PatternMix,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_samples: 2000,
            seq_len: 100,
            seed: 0,
            anomaly_rate: 0.5,
            pattern_mix: PatternMix::default(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let m = &self.pattern_mix;
        let w = [m.spike, m.drift, m.oscillation];
        if w.iter().any(|v| *v < 0.0) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(DataError::Invalid("pattern_mix weights must be nonnegative and sum to 1".into()));
        }
        if self.seq_len < 20 {
            return Err(DataError::Invalid(format!("seq_len {} must be at least 20", self.seq_len)));
        }
        if !(0.0..=1.0).contains(&self.anomaly_rate) {
            return Err(DataError::Invalid("anomaly_rate must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Peak amplitude of a channel's deterministic component; injection sizes
/// are multiples of it. Zero for the pure-noise channel.
pub fn channel_amplitude(channel: usize, seq_len: usize) -> f64 {
    match channel {
        0 | 1 | 3 => 1.0,
        4 => ((seq_len - 1) * (seq_len - 1)) as f64 / 100.0,
        _ => 0.0,
    }
}

/// One injected pattern: `len` steps from `start` on `channel`, scaled by
/// the channel's peak amplitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Injection {
    pub pattern: Pattern,
    pub channel: usize,
    pub start: usize,
    pub len: usize,
    pub scale: f64,
}

impl Injection {
    /// Additive offset at step `k` of the interval.
    pub fn offset(&self, k: usize) -> f64 {
        let unit = match self.pattern {
            Pattern::Spike => SPIKE_AMPLITUDE,
            Pattern::Drift => (k + 1) as f64 / self.len as f64 * DRIFT_TOP,
            Pattern::Oscillation => OSC_AMPLITUDE * (2.0 * PI * (k as f64 + 0.5) / OSC_PERIOD).sin(),
        };
        unit * self.scale
    }
}

fn clean_signal(t_len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let c = SYNTHETIC_CHANNELS.len();
    let small = Normal::new(0.0, SIGNAL_NOISE).unwrap();
    let wide = Normal::new(0.0, NOISE_CHANNEL_SIGMA).unwrap();
    let cycles = rng.random_range(1.0..2.0);
    let phase0 = rng.random_range(0.0..2.0 * PI);
    let step_at = rng.random_range(t_len / 4..=3 * t_len / 4);
    let period = rng.random_range(4.0..6.0);
    let phase3 = rng.random_range(0.0..2.0 * PI);
    let mut x = vec![0.0; t_len * c];
    for t in 0..t_len {
        let tf = t as f64;
        let row = &mut x[t * c..(t + 1) * c];
        row[0] = (2.0 * PI * cycles * tf / t_len as f64 + phase0).sin() + small.sample(rng);
        row[1] = if t >= step_at { 1.0 } else { 0.0 } + small.sample(rng);
        row[2] = wide.sample(rng);
        row[3] = (2.0 * PI * tf / period + phase3).sin() + small.sample(rng);
        row[4] = tf * tf / 100.0;
    }
    x
}

fn draw_pattern(mix: &PatternMix, rng: &mut ChaCha8Rng) -> Pattern {
    let u: f64 = rng.random();
    if u < mix.spike {
        Pattern::Spike
    } else if u < mix.spike + mix.drift {
        Pattern::Drift
    } else {
        Pattern::Oscillation
    }
}

/// Generates the five-channel benchmark with optional injected anomalies.
/// Positives carry one pattern; `masks` mark exactly the modified cells.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<DatasetBundle> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (t_len, c) = (spec.seq_len, SYNTHETIC_CHANNELS.len());
    let mut samples = Vec::with_capacity(spec.n_samples);
    let mut clean = Vec::with_capacity(spec.n_samples);
    let mut masks = Vec::with_capacity(spec.n_samples);
    let mut injections = Vec::with_capacity(spec.n_samples);
    let mut labels = Vec::with_capacity(spec.n_samples);
    for _ in 0..spec.n_samples {
        let base = clean_signal(t_len, &mut rng);
        let mut x = base.clone();
        let mut mask = vec![false; t_len * c];
        let positive = rng.random::<f64>() < spec.anomaly_rate;
        let inj = if positive {
            let pattern = draw_pattern(&spec.pattern_mix, &mut rng);
            let channel = INJECTABLE[rng.random_range(0..INJECTABLE.len())];
            let len = match pattern {
                Pattern::Spike => rng.random_range(1..=2),
                Pattern::Drift => DRIFT_LEN,
                Pattern::Oscillation => OSC_LEN,
            }
            .min(t_len);
            let start = rng.random_range(0..=t_len - len);
            let inj = Injection {
                pattern,
                channel,
                start,
                len,
                scale: channel_amplitude(channel, t_len),
            };
            for k in 0..len {
                let cell = (start + k) * c + channel;
                x[cell] += inj.offset(k);
                mask[cell] = true;
            }
            Some(inj)
        } else {
            None
        };
        samples.push(Tensor::new(vec![t_len, c], x)?);
        clean.push(Tensor::new(vec![t_len, c], base)?);
        masks.push(mask);
        injections.push(inj);
        labels.push(usize::from(positive));
    }
    Ok(DatasetBundle {
        samples,
        targets: Targets::Labels(labels),
        channel_names: SYNTHETIC_CHANNELS.iter().map(|s| s.to_string()).collect(),
        timestamps: None,
        task: Task::Classification,
        splits: vec![Split::Train; spec.n_samples],
        clean: Some(clean),
        masks: Some(masks),
        injections: Some(injections),
        norm: None,
        flags: vec![],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize, rate: f64, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n_samples: n,
            seq_len: 100,
            seed,
            anomaly_rate: rate,
            pattern_mix: PatternMix::default(),
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        assert_eq!(generate_synthetic(&spec(20, 0.5, 4)).unwrap(), generate_synthetic(&spec(20, 0.5, 4)).unwrap());
    }

    #[test]
    fn zero_rate_has_no_positives() {
        let b = generate_synthetic(&spec(50, 0.0, 1)).unwrap();
        assert!(b.targets.labels().unwrap().iter().all(|l| *l == 0));
        assert!(b.masks.unwrap().iter().all(|m| m.iter().all(|v| !v)));
    }

    #[test]
    fn quadratic_channel_is_exact() {
        let b = generate_synthetic(&spec(10, 0.0, 2)).unwrap();
        for s in &b.samples {
            for t in 0..100 {
                assert_eq!(s.at2(t, 4), (t * t) as f64 / 100.0);
            }
        }
    }

    #[test]
    fn mask_cells_are_modified_cells() {
        let b = generate_synthetic(&spec(200, 0.5, 3)).unwrap();
        let clean = b.clean.as_ref().unwrap();
        for (i, m) in b.masks.as_ref().unwrap().iter().enumerate() {
            for (cell, &on) in m.iter().enumerate() {
                let changed = b.samples[i].data()[cell] != clean[i].data()[cell];
                assert_eq!(on, changed, "sample {i} cell {cell}");
            }
            assert_eq!(b.injections.as_ref().unwrap()[i].is_some(), b.targets.labels().unwrap()[i] == 1);
        }
    }

    #[test]
    fn injections_scale_with_channel_amplitude() {
        let b = generate_synthetic(&spec(400, 1.0, 5)).unwrap();
        let clean = b.clean.as_ref().unwrap();
        let mut seen = [false; 5];
        for (i, inj) in b.injections.as_ref().unwrap().iter().enumerate() {
            let inj = inj.unwrap();
            if inj.pattern != Pattern::Spike {
                continue;
            }
            let cell = inj.start * 5 + inj.channel;
            let delta = b.samples[i].data()[cell] - clean[i].data()[cell];
            let want = if inj.channel == 4 { 3.0 * 99.0 * 99.0 / 100.0 } else { 3.0 };
            assert!((delta - want).abs() < 1e-9);
            seen[inj.channel] = true;
        }
        assert!(seen[0] && seen[4] && !seen[2]);
    }

    #[test]
    fn invalid_mix_is_rejected() {
        let mut s = spec(1, 0.5, 0);
        s.pattern_mix.spike = 0.9;
        assert!(generate_synthetic(&s).is_err());
        let mut s = spec(1, 0.5, 0);
        s.seq_len = 10;
        assert!(generate_synthetic(&s).is_err());
    }
}
