use serde::{Deserialize, Serialize};

use super::{ExplainError, Result};
use crate::datasets::DatasetBundle;
use crate::fusion::{threshold_regions, SalientRegion};
use crate::saliency::Heatmap;

pub const MAX_REGIONS: usize = 5;
/// Least absolute fitted slope, in input units per timestep, for a trend.
pub const SLOPE_MIN: f64 = 0.01;
/// Regions at most this wide are pointwise anomalies.
pub const POINTWISE_MAX_WIDTH: usize = 2;
/// Least overlap, as a fraction of the shorter region, to pair two channels.
pub const MIN_OVERLAP: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    PointwiseAnomaly,
    IntervalTrend,
    CrossChannelCorrelation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Rising,
    Falling,
    Flat,
    Spike,
}

impl PatternKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::PointwiseAnomaly => "pointwise_anomaly",
            Self::IntervalTrend => "interval_trend",
            Self::CrossChannelCorrelation => "cross_channel_correlation",
        }
    }
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Rising => "rising",
            Self::Falling => "falling",
            Self::Flat => "flat",
            Self::Spike => "spike",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternDescriptor {
    pub kind: PatternKind,
    pub direction: Direction,
    /// Indices into the region list the descriptor was built from.
    pub linked_regions: Vec<usize>,
    pub strength: f64,
}

impl PatternDescriptor {
    /// Noun phrase bound to the `[pattern]` slot.
    pub fn phrase(&self) -> &'static str {
        match (self.kind, self.direction) {
            (PatternKind::PointwiseAnomaly, _) => "a sharp spike",
            (PatternKind::IntervalTrend, Direction::Rising) => "a sustained rise",
            (PatternKind::IntervalTrend, Direction::Falling) => "a sustained decline",
            (PatternKind::IntervalTrend, _) => "a persistent level shift",
            (PatternKind::CrossChannelCorrelation, _) => "a coordinated change",
        }
    }
}

/// Salient regions of a normalized map, named, stamped, sorted by peak
/// value descending (ties by channel then start) and capped at `max_regions`.
pub fn identify_regions(
    h: &Heatmap,
    names: Option<&[String]>,
    timestamps: Option<&[String]>,
    q: f64,
    gap_merge: usize,
    max_regions: usize,
) -> Result<Vec<SalientRegion>> {
    if let Some(n) = names {
        if n.len() != h.c() {
            return Err(ExplainError::NameCount {
                expected: h.c(),
                got: n.len(),
            });
        }
    }
    if let Some(ts) = timestamps {
        if ts.len() != h.t() {
            return Err(ExplainError::TimestampCount {
                expected: h.t(),
                got: ts.len(),
            });
        }
    }
    if !h.values.iter().any(|v| *v > 0.0) {
        return Ok(Vec::new());
    }
    let mut regions = threshold_regions(h, q, gap_merge)?;
    regions.sort_by(|a, b| {
        b.peak_value
            .total_cmp(&a.peak_value)
            .then(a.channel.cmp(&b.channel))
            .then(a.t_start.cmp(&b.t_start))
    });
    regions.truncate(max_regions);
    for r in &mut regions {
        r.channel_name = names.map(|n| n[r.channel].clone());
        r.timestamps = timestamps.map(|ts| (ts[r.t_start].clone(), ts[r.t_end].clone()));
    }
    Ok(regions)
}

/// Least-squares slope and coefficient of determination of `y` against its index.
pub fn linear_fit(y: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    if y.len() < 2 {
        return (0.0, 0.0);
    }
    let mx = (n - 1.0) / 2.0;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (i, v) in y.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (v - my);
        sxx += dx * dx;
        syy += (v - my).powi(2);
    }
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0) } else { 0.0 };
    (slope, r2)
}

/// Shape of one region: narrow regions are spikes, wider ones trends
/// whose direction follows the fitted slope of `signal` over the region.
pub fn classify_pattern(region: &SalientRegion, signal: &[f64], index: usize) -> Result<PatternDescriptor> {
    if region.t_end >= signal.len() || region.t_start > region.t_end {
        return Err(ExplainError::OutOfRange(format!(
            "region {}..={} on a signal of length {}",
            region.t_start,
            region.t_end,
            signal.len()
        )));
    }
    let peak = region.peak_value.clamp(0.0, 1.0);
    if region.width() <= POINTWISE_MAX_WIDTH {
        return Ok(PatternDescriptor {
            kind: PatternKind::PointwiseAnomaly,
            direction: Direction::Spike,
            linked_regions: vec![index],
            strength: peak,
        });
    }
    let (slope, r2) = linear_fit(&signal[region.t_start..=region.t_end]);
    let (direction, strength) = if slope.abs() > SLOPE_MIN {
        (if slope > 0.0 { Direction::Rising } else { Direction::Falling }, r2)
    } else {
        (Direction::Flat, peak)
    };
    Ok(PatternDescriptor {
        kind: PatternKind::IntervalTrend,
        direction,
        linked_regions: vec![index],
        strength,
    })
}

/// Pairs of regions on different channels whose overlap covers at least
/// half of the shorter one; strength is that overlap fraction.
pub fn find_correlations(regions: &[SalientRegion]) -> Vec<PatternDescriptor> {
    let mut out = Vec::new();
    for i in 0..regions.len() {
        for j in i + 1..regions.len() {
            let (a, b) = (&regions[i], &regions[j]);
            if a.channel == b.channel {
                continue;
            }
            let lo = a.t_start.max(b.t_start);
            let hi = a.t_end.min(b.t_end);
            if lo > hi {
                continue;
            }
            let frac = (hi - lo + 1) as f64 / a.width().min(b.width()) as f64;
            if frac >= MIN_OVERLAP {
                out.push(PatternDescriptor {
                    kind: PatternKind::CrossChannelCorrelation,
                    direction: Direction::Flat,
                    linked_regions: vec![i, j],
                    strength: frac,
                });
            }
        }
    }
    out
}

/// One shape descriptor per region, in region order, then the correlations.
/// `sample` is row-major `T × C`.
pub fn describe_regions(regions: &[SalientRegion], sample: &[f64], channels: usize) -> Result<Vec<PatternDescriptor>> {
    let mut out = Vec::with_capacity(regions.len());
    for (i, r) in regions.iter().enumerate() {
        if r.channel >= channels {
            return Err(ExplainError::OutOfRange(format!("channel {} of {channels}", r.channel)));
        }
        let signal: Vec<f64> = sample.iter().skip(r.channel).step_by(channels).copied().collect();
        out.push(classify_pattern(r, &signal, i)?);
    }
    out.extend(find_correlations(regions));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowVarianceChannel {
    pub channel: usize,
    pub name: String,
    pub share: f64,
}

/// Each channel's share of the summed per-channel variance over all
/// samples and timesteps. All-constant data gives equal shares.
pub fn variance_shares(bundle: &DatasetBundle) -> Vec<f64> {
    let c = bundle.channels();
    let (mut sum, mut sq, mut n) = (vec![0.0; c], vec![0.0; c], 0usize);
    for s in &bundle.samples {
        for row in s.data().chunks(c) {
            for ch in 0..c {
                sum[ch] += row[ch];
                sq[ch] += row[ch] * row[ch];
            }
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    let var: Vec<f64> = (0..c).map(|ch| (sq[ch] / n - (sum[ch] / n).powi(2)).max(0.0)).collect();
    let total: f64 = var.iter().sum();
    if total <= 0.0 {
        return vec![1.0 / c as f64; c];
    }
    var.iter().map(|v| v / total).collect()
}

/// Channels whose variance share is below `threshold`, ascending by share.
pub fn flag_low_variance_channels(bundle: &DatasetBundle, threshold: f64) -> Vec<LowVarianceChannel> {
    let mut out: Vec<LowVarianceChannel> = variance_shares(bundle)
        .into_iter()
        .enumerate()
        .filter(|(_, s)| *s < threshold)
        .map(|(channel, share)| LowVarianceChannel {
            channel,
            name: bundle.channel_names[channel].clone(),
            share,
        })
        .collect();
    out.sort_by(|a, b| a.share.total_cmp(&b.share).then(a.channel.cmp(&b.channel)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::saliency::Source;

    fn region(channel: usize, t_start: usize, t_end: usize) -> SalientRegion {
        SalientRegion {
            channel,
            channel_name: None,
            t_start,
            t_end,
            peak_value: 1.0,
            peak_time: t_start,
            timestamps: None,
        }
    }

    #[test]
    fn empty_map_has_no_regions() {
        let h = Heatmap::zeros(10, 2, Source::Fused);
        assert!(identify_regions(&h, None, None, 0.2, 2, 5).unwrap().is_empty());
    }

    #[test]
    fn spike_region_carries_channel_name() {
        let mut v = vec![0.0; 20 * 3];
        v[4 * 3 + 1] = 1.0;
        let h = Heatmap::new(20, 3, v, Source::Fused).unwrap();
        let names: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
        let r = identify_regions(&h, Some(&names), None, 0.2, 2, 5).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].channel_name.as_deref(), Some("b"));
        assert!(identify_regions(&h, Some(&names[..2]), None, 0.2, 2, 5).is_err());
    }

    #[test]
    fn regions_sorted_by_peak_and_capped() {
        let (t, c) = (40, 2);
        let mut v = vec![0.0; t * c];
        for (k, peak) in [0.3, 0.9, 0.5, 1.0, 0.7, 0.6, 0.8].iter().enumerate() {
            v[(k * 5) * c + k % 2] = *peak;
        }
        let h = Heatmap::new(t, c, v, Source::Fused).unwrap();
        let r = identify_regions(&h, None, None, 0.4, 0, 5).unwrap();
        let mut oracle: Vec<f64> = h.values.iter().copied().filter(|v| *v > 0.0).collect();
        oracle.sort_by(|a, b| b.total_cmp(a));
        oracle.truncate(5);
        assert_eq!(r.iter().map(|g| g.peak_value).collect::<Vec<_>>(), oracle);
    }

    #[test]
    fn width_rule_and_ramp_direction() {
        let ramp: Vec<f64> = (0..30).map(|i| 0.1 * i as f64).collect();
        let d = classify_pattern(&region(0, 5, 5), &ramp, 0).unwrap();
        assert_eq!((d.kind, d.direction), (PatternKind::PointwiseAnomaly, Direction::Spike));
        let d = classify_pattern(&region(0, 5, 20), &ramp, 0).unwrap();
        assert_eq!((d.kind, d.direction), (PatternKind::IntervalTrend, Direction::Rising));
        assert!((d.strength - 1.0).abs() < 1e-12);
        let down: Vec<f64> = ramp.iter().map(|v| -v).collect();
        assert_eq!(classify_pattern(&region(0, 5, 20), &down, 0).unwrap().direction, Direction::Falling);
        let flat = vec![0.3; 30];
        assert_eq!(classify_pattern(&region(0, 5, 20), &flat, 0).unwrap().direction, Direction::Flat);
    }

    #[test]
    fn overlap_arithmetic() {
        let full = find_correlations(&[region(0, 10, 19), region(3, 10, 19)]);
        assert_eq!(full.len(), 1);
        assert_eq!(full[0].strength, 1.0);
        assert_eq!(full[0].linked_regions, vec![0, 1]);
        // 3 shared cells over a shorter width of 5.
        let part = find_correlations(&[region(0, 0, 9), region(1, 7, 11)]);
        assert_eq!(part[0].strength, 3.0 / 5.0);
        assert!(find_correlations(&[region(0, 0, 9), region(1, 8, 13)]).is_empty());
        assert!(find_correlations(&[region(0, 0, 9), region(0, 0, 9)]).is_empty());
    }
}
