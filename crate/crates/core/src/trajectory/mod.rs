//! Tagged diagnostic trajectories.
//!
//! A trajectory is the structured output of the inspector:
//!
//! ```text
//! <think>..</think>[<call_tool>..</call_tool><observation>..</observation><think>..</think>]
//! [<location>..</location><type>..</type>]<answer>Yes|No</answer>
//! ```
//!
//! [`parse_trajectory`] never fails: malformed text is reported as a
//! [`FormatReport`] listing every rule that was broken. The first-round
//! routing grammar lives in [`routing`] and the keyword parser used for
//! untagged baseline responses in [`baseline`].

mod baseline;
mod grammar;
mod routing;
mod toolcall;

use std::fmt;
use std::ops::Not;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use baseline::{parse_baseline_answer, BaselineAnswer};
pub use grammar::{
    parse_trajectory, parse_trajectory_with, render_trajectory, ParseMode, RenderError,
    TrajectoryRecord,
};
pub use routing::{parse_routing, RoutingDecision, Suspicion, TargetScale, TargetType};
pub use toolcall::{parse_tool_calls, ArgValue, ToolCall, ToolName};

/// Final binary verdict. `Yes` means anomalous.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BinaryLabel {
    Yes,
    No,
}

impl BinaryLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            BinaryLabel::Yes => "Yes",
            BinaryLabel::No => "No",
        }
    }

    pub fn is_anomalous(self) -> bool {
        self == BinaryLabel::Yes
    }

    pub fn from_anomalous(anomalous: bool) -> Self {
        if anomalous {
            BinaryLabel::Yes
        } else {
            BinaryLabel::No
        }
    }

    /// Case-insensitive match on `yes`/`no`, ignoring surrounding whitespace
    /// and a trailing period.
    pub fn parse_loose(s: &str) -> Option<Self> {
        let s = s.trim().trim_end_matches('.').trim();
        if s.eq_ignore_ascii_case("yes") {
            Some(BinaryLabel::Yes)
        } else if s.eq_ignore_ascii_case("no") {
            Some(BinaryLabel::No)
        } else {
            None
        }
    }
}

impl Not for BinaryLabel {
    type Output = BinaryLabel;

    fn not(self) -> BinaryLabel {
        match self {
            BinaryLabel::Yes => BinaryLabel::No,
            BinaryLabel::No => BinaryLabel::Yes,
        }
    }
}

impl fmt::Display for BinaryLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BinaryLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Yes" => Ok(BinaryLabel::Yes),
            "No" => Ok(BinaryLabel::No),
            other => Err(format!("expected Yes or No, got {other:?}")),
        }
    }
}

/// One tagged block of a trajectory, in emission order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Segment {
    Think(String),
    CallTool(ToolCall),
    Observation(String),
    Location(String),
    DefectType(String),
    Answer(BinaryLabel),
}

impl Segment {
    pub fn tag(&self) -> &'static str {
        match self {
            Segment::Think(_) => "think",
            Segment::CallTool(_) => "call_tool",
            Segment::Observation(_) => "observation",
            Segment::Location(_) => "location",
            Segment::DefectType(_) => "type",
            Segment::Answer(_) => "answer",
        }
    }
}

/// A trajectory that satisfies every grammar rule. Obtain one from
/// [`parse_trajectory`] or build it with [`Trajectory::new`], which checks
/// the same rules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    segments: Vec<Segment>,
}

impl Trajectory {
    pub fn new(segments: Vec<Segment>) -> Result<Self, FormatReport> {
        let violations = grammar::check_segments(&segments);
        if violations.is_empty() {
            Ok(Trajectory { segments })
        } else {
            Err(FormatReport::from_violations(
                violations,
                grammar::first_answer(&segments),
            ))
        }
    }

    /// Skips validation. [`render_trajectory`] still rejects invalid values.
    pub fn new_unchecked(segments: Vec<Segment>) -> Self {
        Trajectory { segments }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn into_segments(self) -> Vec<Segment> {
        self.segments
    }

    pub fn answer(&self) -> BinaryLabel {
        grammar::first_answer(&self.segments).expect("validated trajectory carries an answer")
    }

    pub fn location(&self) -> Option<&str> {
        self.segments.iter().find_map(|s| match s {
            Segment::Location(l) => Some(l.as_str()),
            _ => None,
        })
    }

    pub fn defect_type(&self) -> Option<&str> {
        self.segments.iter().find_map(|s| match s {
            Segment::DefectType(t) => Some(t.as_str()),
            _ => None,
        })
    }

    pub fn tool_calls(&self) -> impl Iterator<Item = &ToolCall> {
        self.segments.iter().filter_map(|s| match s {
            Segment::CallTool(c) => Some(c),
            _ => None,
        })
    }

    pub fn thinks(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Think(t) => Some(t.as_str()),
            _ => None,
        })
    }
}

/// A single broken grammar rule.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "code", rename_all = "kebab-case")]
pub enum Violation {
    MissingAnswer,
    DuplicateAnswer,
    AnswerNotFinal,
    InvalidAnswer,
    MalformedTag { tag: String },
    UnknownTag { tag: String },
    NestedTag { tag: String },
    TextOutsideTags,
    MissingThink,
    EmptyThink,
    MalformedToolCall,
    OrphanObservation,
    MissingObservation,
    MissingLocationOnYes,
    MissingTypeOnYes,
    UnexpectedLocationOnNo,
    UnexpectedTypeOnNo,
    DuplicateLocation,
    DuplicateType,
    // routing grammar
    MissingField { field: String },
    InvalidValue { field: String, value: String },
    NoneNotSingleton,
}

impl Violation {
    pub fn code(&self) -> &'static str {
        match self {
            Violation::MissingAnswer => "missing-answer",
            Violation::DuplicateAnswer => "duplicate-answer",
            Violation::AnswerNotFinal => "answer-not-final",
            Violation::InvalidAnswer => "invalid-answer",
            Violation::MalformedTag { .. } => "malformed-tag",
            Violation::UnknownTag { .. } => "unknown-tag",
            Violation::NestedTag { .. } => "nested-tag",
            Violation::TextOutsideTags => "text-outside-tags",
            Violation::MissingThink => "missing-think",
            Violation::EmptyThink => "empty-think",
            Violation::MalformedToolCall => "malformed-tool-call",
            Violation::OrphanObservation => "orphan-observation",
            Violation::MissingObservation => "missing-observation",
            Violation::MissingLocationOnYes => "missing-location-on-yes",
            Violation::MissingTypeOnYes => "missing-type-on-yes",
            Violation::UnexpectedLocationOnNo => "unexpected-location-on-no",
            Violation::UnexpectedTypeOnNo => "unexpected-type-on-no",
            Violation::DuplicateLocation => "duplicate-location",
            Violation::DuplicateType => "duplicate-type",
            Violation::MissingField { .. } => "missing-field",
            Violation::InvalidValue { .. } => "invalid-value",
            Violation::NoneNotSingleton => "none-not-singleton",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::MalformedTag { tag }
            | Violation::UnknownTag { tag }
            | Violation::NestedTag { tag } => write!(f, "{}({})", self.code(), tag),
            Violation::MissingField { field } => write!(f, "{}({})", self.code(), field),
            Violation::InvalidValue { field, value } => {
                write!(f, "{}({}={:?})", self.code(), field, value)
            }
            _ => f.write_str(self.code()),
        }
    }
}

/// Outcome of a failed parse. `valid` is true exactly when `violations` is
/// empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FormatReport {
    pub valid: bool,
    pub violations: Vec<Violation>,
    /// Answer value recovered from the text, if any `<answer>` block held one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<BinaryLabel>,
}

impl FormatReport {
    pub fn from_violations(violations: Vec<Violation>, answer: Option<BinaryLabel>) -> Self {
        FormatReport {
            valid: violations.is_empty(),
            violations,
            answer,
        }
    }

    pub fn summary(&self) -> String {
        self.violations
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(", ")
    }
}

impl fmt::Display for FormatReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid output: {}", self.summary())
    }
}
