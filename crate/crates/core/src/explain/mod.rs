//! Salient regions, temporal pattern descriptors, template rendering and
//! Markdown reports.

mod patterns;
mod report;
mod templates;

use thiserror::Error;

pub use patterns::{
    classify_pattern, describe_regions, find_correlations, flag_low_variance_channels, identify_regions, linear_fit,
    variance_shares, Direction, LowVarianceChannel, PatternDescriptor, PatternKind, MAX_REGIONS, MIN_OVERLAP,
    POINTWISE_MAX_WIDTH, SLOPE_MIN,
};
pub use report::{
    build_prompt, generate_report, prompt_digest, ClientError, ExplanationReport, GenerationMode, ReportInput,
    ReportOptions, StubBehavior, StubClient, TextClient, NO_REGIONS,
};
pub use templates::{render_template, slots_in, time_bounds, Domain, Implication, Template, TemplateSet, SLOTS};

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("expected {expected} channel names, got {got}")]
    NameCount { expected: usize, got: usize },
    #[error("expected {expected} timestamps, got {got}")]
    TimestampCount { expected: usize, got: usize },
    #[error("template {template:?} uses unknown slot {slot}")]
    UnknownSlot { template: String, slot: String },
    #[error("cannot bind slot {slot} in template {template:?}")]
    UnboundSlot { slot: String, template: String },
    #[error("no template for domain {domain}, pattern {kind}/{direction}")]
    NoTemplate {
        domain: &'static str,
        kind: &'static str,
        direction: &'static str,
    },
    #[error("invalid template assets: {0}")]
    Assets(String),
    #[error("out of range: {0}")]
    OutOfRange(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Fusion(#[from] crate::fusion::FusionError),
}

pub type Result<T> = std::result::Result<T, ExplainError>;
