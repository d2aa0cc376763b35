use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::patterns::{LowVarianceChannel, PatternDescriptor, PatternKind};
use super::templates::{render_template, time_bounds, variable_name, Domain, TemplateSet};
use super::{ExplainError, Result};
use crate::fusion::SalientRegion;

pub const NO_REGIONS: &str = "no salient regions above threshold";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationMode {
    Template,
    ExternalClient,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error("text generation timed out after {0:?}")]
    Timeout(Duration),
    #[error("text generation failed: {0}")]
    Failed(String),
}

/// A text generator that maps a prompt to one paragraph. Implementations
/// must return within `timeout` or fail with [`ClientError::Timeout`].
pub trait TextClient {
    fn generate(&self, prompt: &str, timeout: Duration) -> std::result::Result<String, ClientError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StubBehavior {
    Echo,
    Timeout,
    Fail,
}

/// Deterministic client; `Echo` answers with the prompt digest.
#[derive(Debug, Clone, Copy)]
pub struct StubClient(pub StubBehavior);

impl TextClient for StubClient {
    fn generate(&self, prompt: &str, timeout: Duration) -> std::result::Result<String, ClientError> {
        match self.0 {
            StubBehavior::Echo => Ok(format!("Stub summary for prompt {}.", prompt_digest(prompt))),
            StubBehavior::Timeout => Err(ClientError::Timeout(timeout)),
            StubBehavior::Fail => Err(ClientError::Failed("stub configured to fail".into())),
        }
    }
}

/// First 16 hex digits of the SHA-256 of `prompt`.
pub fn prompt_digest(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))[..16].to_string()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportInput {
    pub sample_id: String,
    pub prediction: String,
    pub seq_len: usize,
    pub regions: Vec<SalientRegion>,
    pub descriptors: Vec<PatternDescriptor>,
    pub low_variance: Vec<LowVarianceChannel>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportOptions {
    pub domain: Domain,
    pub mode: GenerationMode,
    pub timeout: Duration,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            domain: Domain::Generic,
            mode: GenerationMode::Template,
            timeout: Duration::from_secs(10),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationReport {
    pub sample_id: String,
    pub prediction: String,
    pub regions: Vec<SalientRegion>,
    pub descriptors: Vec<PatternDescriptor>,
    /// One per region, in region order.
    pub sentences: Vec<String>,
    pub summary: String,
    pub mode: GenerationMode,
    pub notices: Vec<String>,
    pub low_variance: Vec<LowVarianceChannel>,
    /// Filled by evaluation; empty at generation time.
    pub metrics: BTreeMap<String, f64>,
}

fn check_input(input: &ReportInput) -> Result<()> {
    for r in &input.regions {
        if r.t_start > r.t_end || r.t_end >= input.seq_len || r.peak_time < r.t_start || r.peak_time > r.t_end {
            return Err(ExplainError::OutOfRange(format!(
                "region {}..={} (peak {}) for length {}",
                r.t_start, r.t_end, r.peak_time, input.seq_len
            )));
        }
    }
    for d in &input.descriptors {
        if d.linked_regions.iter().any(|&i| i >= input.regions.len()) {
            return Err(ExplainError::OutOfRange(format!("descriptor links {:?}", d.linked_regions)));
        }
        if d.kind == PatternKind::CrossChannelCorrelation && d.linked_regions.len() < 2 {
            return Err(ExplainError::OutOfRange("correlation links fewer than two regions".into()));
        }
    }
    Ok(())
}

/// Region spanning every linked region, named after all of them.
fn merged_region(regions: &[SalientRegion], links: &[usize]) -> SalientRegion {
    let linked: Vec<&SalientRegion> = links.iter().map(|&i| &regions[i]).collect();
    let names: Vec<String> = linked.iter().map(|r| variable_name(r)).collect();
    let first = linked.iter().min_by_key(|r| r.t_start).expect("two links");
    let last = linked.iter().max_by_key(|r| r.t_end).expect("two links");
    let peak = linked.iter().max_by(|a, b| a.peak_value.total_cmp(&b.peak_value)).expect("two links");
    SalientRegion {
        channel: linked[0].channel,
        channel_name: Some(names.join(" and ")),
        t_start: first.t_start,
        t_end: last.t_end,
        peak_value: peak.peak_value,
        peak_time: peak.peak_time,
        timestamps: match (&first.timestamps, &last.timestamps) {
            (Some(a), Some(b)) => Some((a.0.clone(), b.1.clone())),
            _ => None,
        },
    }
}

/// The paragraph produced without an external client.
fn template_summary(input: &ReportInput, correlations: &[String]) -> String {
    let Some(top) = input.regions.first() else {
        return format!("The model found {NO_REGIONS}.");
    };
    let (start, end) = time_bounds(top);
    let channels: std::collections::BTreeSet<usize> = input.regions.iter().map(|r| r.channel).collect();
    let plural = |n: usize| if n == 1 { "" } else { "s" };
    let (n, k) = (input.regions.len(), channels.len());
    let mut s = format!(
        "The prediction rests mainly on {} ({start}–{end}, peak {:.2}). {n} salient region{} across {k} channel{} {} reported.",
        variable_name(top),
        top.peak_value,
        plural(n),
        plural(k),
        if n == 1 { "was" } else { "were" },
    );
    for c in correlations {
        s.push(' ');
        s.push_str(c);
    }
    s
}

/// Prompt sent to an external client; see `docs/formats.md`.
pub fn build_prompt(input: &ReportInput, sentences: &[String]) -> String {
    let mut p = String::new();
    p.push_str("Summarize the following time-series model explanation in one short paragraph.\n");
    let _ = writeln!(p, "sample: {}", input.sample_id);
    let _ = writeln!(p, "prediction: {}", input.prediction);
    p.push_str("regions:\n");
    for (i, r) in input.regions.iter().enumerate() {
        let (start, end) = time_bounds(r);
        let shape = input
            .descriptors
            .iter()
            .find(|d| d.linked_regions == [i])
            .map_or("unclassified".to_string(), |d| format!("{}/{}", d.kind.as_str(), d.direction.as_str()));
        let _ = writeln!(
            p,
            "{}. {} | {start}–{end} | peak {:.3} at {} | {shape}",
            i + 1,
            variable_name(r),
            r.peak_value,
            r.peak_time
        );
    }
    p.push_str("findings:\n");
    for s in sentences {
        let _ = writeln!(p, "- {s}");
    }
    p
}

/// Renders per-region sentences and a summary. External mode embeds the
/// client's paragraph and falls back to the template summary on failure.
pub fn generate_report(
    input: &ReportInput,
    set: &TemplateSet,
    opts: &ReportOptions,
    client: Option<&dyn TextClient>,
) -> Result<ExplanationReport> {
    check_input(input)?;
    let mut sentences = Vec::with_capacity(input.regions.len());
    for (i, r) in input.regions.iter().enumerate() {
        let d = input
            .descriptors
            .iter()
            .find(|d| d.linked_regions == [i] && d.kind != PatternKind::CrossChannelCorrelation)
            .ok_or_else(|| ExplainError::OutOfRange(format!("region {i} has no shape descriptor")))?;
        let t = set.select(opts.domain, d.kind, d.direction)?;
        sentences.push(render_template(d, r, t, set)?);
    }
    let mut correlations = Vec::new();
    for d in input.descriptors.iter().filter(|d| d.kind == PatternKind::CrossChannelCorrelation) {
        let merged = merged_region(&input.regions, &d.linked_regions);
        let t = set.select(opts.domain, d.kind, d.direction)?;
        correlations.push(render_template(d, &merged, t, set)?);
    }
    let mut notices = Vec::new();
    let mut mode = GenerationMode::Template;
    let mut summary = None;
    if opts.mode == GenerationMode::ExternalClient {
        match client {
            None => notices.push("No text-generation client configured; used template mode.".to_string()),
            Some(c) => match c.generate(&build_prompt(input, &sentences), opts.timeout) {
                Ok(text) => {
                    mode = GenerationMode::ExternalClient;
                    summary = Some(text.trim().to_string());
                }
                Err(e) => notices.push(format!("External text generation unavailable ({e}); used template mode.")),
            },
        }
    }
    Ok(ExplanationReport {
        sample_id: input.sample_id.clone(),
        prediction: input.prediction.clone(),
        regions: input.regions.clone(),
        descriptors: input.descriptors.clone(),
        sentences,
        summary: summary.unwrap_or_else(|| template_summary(input, &correlations)),
        mode,
        notices,
        low_variance: input.low_variance.clone(),
        metrics: BTreeMap::new(),
    })
}

fn cell(s: &str) -> String {
    s.replace('|', "\\|")
}

impl ExplanationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_markdown(&self) -> String {
        let mut m = String::new();
        let _ = writeln!(m, "# Explanation for sample {}\n", cell(&self.sample_id));
        let _ = writeln!(m, "## Prediction\n\n{}\n", self.prediction);
        m.push_str("## Top regions\n\n");
        if self.regions.is_empty() {
            let _ = writeln!(m, "The model found {NO_REGIONS}.\n");
        } else {
            m.push_str("| Rank | Channel | Interval | Peak | Peak time | Pattern |\n");
            m.push_str("| ---: | --- | --- | ---: | ---: | --- |\n");
            for (i, r) in self.regions.iter().enumerate() {
                let (start, end) = time_bounds(r);
                let shape = self
                    .descriptors
                    .iter()
                    .find(|d| d.linked_regions == [i])
                    .map_or("unclassified".to_string(), |d| format!("{} ({})", d.kind.as_str(), d.direction.as_str()));
                let _ = writeln!(
                    m,
                    "| {} | {} | {start}–{end} | {:.3} | {} | {shape} |",
                    i + 1,
                    cell(&variable_name(r)),
                    r.peak_value,
                    r.peak_time
                );
            }
            m.push('\n');
        }
        m.push_str("## Findings\n\n");
        if self.sentences.is_empty() {
            m.push_str("No findings to report.\n\n");
        }
        for s in &self.sentences {
            let _ = writeln!(m, "- {s}");
        }
        if !self.sentences.is_empty() {
            m.push('\n');
        }
        let _ = writeln!(m, "## Summary\n\n{}\n", self.summary);
        m.push_str("## Pruning recommendations\n\n");
        if self.low_variance.is_empty() {
            m.push_str("No channel falls below the variance-share threshold.\n");
        } else {
            for c in &self.low_variance {
                let _ = writeln!(
                    m,
                    "- Consider removing {} ({:.4}% of total variance).",
                    c.name,
                    100.0 * c.share
                );
            }
        }
        if !self.notices.is_empty() {
            m.push_str("\n## Notices\n\n");
            for n in &self.notices {
                let _ = writeln!(m, "- {n}");
            }
        }
        m
    }
}
