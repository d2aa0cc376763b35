use std::collections::BTreeSet;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use super::patterns::{Direction, PatternDescriptor, PatternKind};
use super::{ExplainError, Result};
use crate::fusion::SalientRegion;

pub const SLOTS: [&str; 5] = ["[variable]", "[start time]", "[end time]", "[pattern]", "[implication]"];

const BUNDLED_TEMPLATES: &str = include_str!("../../assets/templates.json");
const BUNDLED_IMPLICATIONS: &str = include_str!("../../assets/implications.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Clinical,
    Industrial,
    Generic,
}

impl Domain {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "clinical" => Some(Self::Clinical),
            "industrial" => Some(Self::Industrial),
            "generic" => Some(Self::Generic),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Clinical => "clinical",
            Self::Industrial => "industrial",
            Self::Generic => "generic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub id: String,
    pub domain: Domain,
    pub kind: PatternKind,
    /// `None` matches every direction of `kind`.
    pub direction: Option<Direction>,
    pub text: String,
    /// Slots the text uses; must equal the set found in `text`.
    pub slots: Vec<String>,
}

/// Bracketed tokens in `text`, in order of first appearance.
pub fn slots_in(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('[') {
        let Some(len) = rest[open..].find(']') else { break };
        let slot = &rest[open..open + len + 1];
        if !out.iter().any(|s| s == slot) {
            out.push(slot.to_string());
        }
        rest = &rest[open + len + 1..];
    }
    out
}

impl Template {
    /// Every slot in the text is declared and has a binding rule.
    pub fn validate(&self) -> Result<()> {
        let found = slots_in(&self.text);
        for s in &found {
            if !SLOTS.contains(&s.as_str()) {
                return Err(ExplainError::UnknownSlot {
                    template: self.id.clone(),
                    slot: s.clone(),
                });
            }
        }
        let declared: BTreeSet<&str> = self.slots.iter().map(String::as_str).collect();
        let used: BTreeSet<&str> = found.iter().map(String::as_str).collect();
        if declared != used {
            return Err(ExplainError::Assets(format!(
                "template {:?} declares slots {declared:?} but uses {used:?}",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Implication {
    pub domain: Domain,
    pub kind: PatternKind,
    pub direction: Direction,
    pub implication: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    pub templates: Vec<Template>,
    pub implications: Vec<Implication>,
}

impl TemplateSet {
    pub fn from_json(templates: &str, implications: &str) -> Result<Self> {
        let set = TemplateSet {
            templates: serde_json::from_str(templates)?,
            implications: serde_json::from_str(implications)?,
        };
        for t in &set.templates {
            t.validate()?;
        }
        Ok(set)
    }

    /// The tables shipped in `assets/`.
    pub fn bundled() -> Self {
        Self::from_json(BUNDLED_TEMPLATES, BUNDLED_IMPLICATIONS).expect("bundled templates are valid")
    }

    /// First exact-direction match in `domain`, else the first wildcard.
    pub fn select(&self, domain: Domain, kind: PatternKind, direction: Direction) -> Result<&Template> {
        let in_domain = || self.templates.iter().filter(move |t| t.domain == domain && t.kind == kind);
        in_domain()
            .find(|t| t.direction == Some(direction))
            .or_else(|| in_domain().find(|t| t.direction.is_none()))
            .ok_or_else(|| ExplainError::NoTemplate {
                domain: domain.as_str(),
                kind: kind.as_str(),
                direction: direction.as_str(),
            })
    }

    pub fn implication(&self, domain: Domain, kind: PatternKind, direction: Direction) -> Option<&str> {
        self.implications
            .iter()
            .find(|i| i.domain == domain && i.kind == kind && i.direction == direction)
            .map(|i| i.implication.as_str())
    }
}

/// `HH:MM` when both stamps share a date, else `YYYY-MM-DD HH:MM`; stamps
/// in other formats are rendered verbatim.
fn clock_bounds(start: &str, end: &str) -> (String, String) {
    const FMT: &str = "%Y-%m-%d %H:%M:%S";
    match (NaiveDateTime::parse_from_str(start, FMT), NaiveDateTime::parse_from_str(end, FMT)) {
        (Ok(a), Ok(b)) if a.date() == b.date() => (a.format("%H:%M").to_string(), b.format("%H:%M").to_string()),
        (Ok(a), Ok(b)) => (
            a.format("%Y-%m-%d %H:%M").to_string(),
            b.format("%Y-%m-%d %H:%M").to_string(),
        ),
        _ => (start.to_string(), end.to_string()),
    }
}

/// Interval bounds in the data's native units. Without a clock the start
/// carries the unit word: `("timestep 10", "30")`.
pub fn time_bounds(region: &SalientRegion) -> (String, String) {
    match &region.timestamps {
        Some((a, b)) => clock_bounds(a, b),
        None => (format!("timestep {}", region.t_start), region.t_end.to_string()),
    }
}

pub fn variable_name(region: &SalientRegion) -> String {
    region
        .channel_name
        .clone()
        .unwrap_or_else(|| format!("channel {}", region.channel))
}

/// Fills every slot of `template`; the first character is upper-cased.
pub fn render_template(
    desc: &PatternDescriptor,
    region: &SalientRegion,
    template: &Template,
    set: &TemplateSet,
) -> Result<String> {
    let (start, end) = time_bounds(region);
    let mut text = template.text.clone();
    for slot in slots_in(&template.text) {
        let value = match slot.as_str() {
            "[variable]" => variable_name(region),
            "[start time]" => start.clone(),
            "[end time]" => end.clone(),
            "[pattern]" => desc.phrase().to_string(),
            "[implication]" => set
                .implication(template.domain, desc.kind, desc.direction)
                .ok_or_else(|| ExplainError::UnboundSlot {
                    slot: slot.clone(),
                    template: template.id.clone(),
                })?
                .to_string(),
            _ => {
                return Err(ExplainError::UnboundSlot {
                    slot: slot.clone(),
                    template: template.id.clone(),
                })
            }
        };
        text = text.replace(&slot, &value);
    }
    let mut chars = text.chars();
    Ok(match chars.next() {
        Some(f) => f.to_uppercase().chain(chars).collect(),
        None => text,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kitchen() -> SalientRegion {
        SalientRegion {
            channel: 0,
            channel_name: Some("T_kitchen".into()),
            t_start: 10,
            t_end: 30,
            peak_value: 0.9,
            peak_time: 20,
            timestamps: None,
        }
    }

    fn rising() -> PatternDescriptor {
        PatternDescriptor {
            kind: PatternKind::IntervalTrend,
            direction: Direction::Rising,
            linked_regions: vec![0],
            strength: 0.9,
        }
    }

    #[test]
    fn generic_rising_sentence_is_exact() {
        let set = TemplateSet::bundled();
        let t = set.select(Domain::Generic, PatternKind::IntervalTrend, Direction::Rising).unwrap();
        let s = render_template(&rising(), &kitchen(), t, &set).unwrap();
        assert_eq!(s, "Model detected elevated T_kitchen between timestep 10–30, suggesting sustained deviation.");
        assert_eq!(render_template(&rising(), &kitchen(), t, &set).unwrap(), s);
    }

    #[test]
    fn missing_implication_names_the_slot() {
        let mut set = TemplateSet::bundled();
        set.implications.retain(|i| i.domain != Domain::Generic);
        let t = set.select(Domain::Generic, PatternKind::IntervalTrend, Direction::Rising).unwrap().clone();
        let err = render_template(&rising(), &kitchen(), &t, &set).unwrap_err();
        assert!(err.to_string().contains("[implication]"), "{err}");
    }

    #[test]
    fn unknown_slot_is_rejected_on_load() {
        let bad = r#"[{"id":"x","domain":"generic","kind":"interval_trend","direction":null,
            "text":"[variable] did [something]","slots":["[variable]","[something]"]}]"#;
        let err = TemplateSet::from_json(bad, "[]").unwrap_err();
        assert!(err.to_string().contains("[something]"));
    }

    #[test]
    fn clock_rendering() {
        let mut r = kitchen();
        r.timestamps = Some(("2016-01-11 02:10:00".into(), "2016-01-11 02:40:00".into()));
        assert_eq!(time_bounds(&r), ("02:10".into(), "02:40".into()));
        r.timestamps = Some(("2016-01-11 23:50:00".into(), "2016-01-12 00:20:00".into()));
        assert_eq!(time_bounds(&r), ("2016-01-11 23:50".into(), "2016-01-12 00:20".into()));
    }

    #[test]
    fn every_bundled_pattern_has_a_template_and_implication() {
        let set = TemplateSet::bundled();
        let cases = [
            (PatternKind::PointwiseAnomaly, Direction::Spike),
            (PatternKind::IntervalTrend, Direction::Rising),
            (PatternKind::IntervalTrend, Direction::Falling),
            (PatternKind::IntervalTrend, Direction::Flat),
            (PatternKind::CrossChannelCorrelation, Direction::Flat),
        ];
        for d in [Domain::Clinical, Domain::Industrial, Domain::Generic] {
            for (k, dir) in cases {
                let t = set.select(d, k, dir).unwrap();
                let desc = PatternDescriptor {
                    kind: k,
                    direction: dir,
                    linked_regions: vec![0],
                    strength: 1.0,
                };
                let s = render_template(&desc, &kitchen(), t, &set).unwrap();
                assert!(!s.contains('[') && s.starts_with(|c: char| c.is_uppercase()), "{s}");
            }
        }
    }
}
