//! Accuracy-gated trajectory reward and the group-relative policy math.
//!
//! ```text
//! R = acc * (1 + alpha*loc + beta*type + gamma*tool) + format
//! tool = lambda * [delta_conf > 0] - eta * calls
//! ```

mod grpo;
mod taxonomy;

pub use grpo::{
    group_advantages, group_advantages_with, grpo_objective, kl_estimate, GrpoParams, StdMode,
    TrajectoryGroup, DEGENERATE_STD,
};
pub use taxonomy::{fold_label, type_reward, Taxonomy};

use serde::{Deserialize, Serialize};

use crate::imaging::BBox;
use crate::trajectory::{parse_trajectory, parse_trajectory_with, BinaryLabel, ParseMode};

#[derive(Debug, thiserror::Error)]
pub enum RewardError {
    #[error("{field} = {value} is out of range")]
    OutOfRange { field: &'static str, value: f64 },
    #[error("non-finite input {0}")]
    NonFinite(f64),
    #[error("exp overflow at log-ratio {0}")]
    Overflow(f64),
    #[error("group needs at least 2 members, got {0}")]
    GroupTooSmall(usize),
    #[error("length mismatch: {ratios} ratios, {advantages} advantages, {kls} kl terms")]
    LengthMismatch { ratios: usize, advantages: usize, kls: usize },
    #[error("ground-truth type {0:?} is not in the taxonomy")]
    UnknownType(String),
    #[error("taxonomy: {0}")]
    Taxonomy(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub eta: f64,
    pub format_penalty: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            alpha: 0.8,
            beta: 0.6,
            gamma: 0.5,
            lambda: 0.3,
            eta: 0.1,
            format_penalty: -1.0,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<(), RewardError> {
        for (field, value) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda", self.lambda),
            ("eta", self.eta),
        ] {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(RewardError::OutOfRange { field, value });
            }
        }
        if !(self.format_penalty <= 0.0 && self.format_penalty.is_finite()) {
            return Err(RewardError::OutOfRange {
                field: "format_penalty",
                value: self.format_penalty,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub acc: u8,
    pub loc: f64,
    #[serde(rename = "type")]
    pub type_: f64,
    pub tool: f64,
    pub format: f64,
    pub total: f64,
}

impl RewardBreakdown {
    /// Re-evaluates the total from the stored parts.
    pub fn recompute(&self, w: &RewardWeights) -> f64 {
        gated(self.acc == 1, self.loc, self.type_, self.tool, w) + self.format
    }
}

fn gated(acc: bool, loc: f64, type_: f64, tool: f64, w: &RewardWeights) -> f64 {
    if acc {
        1.0 + w.alpha * loc + w.beta * type_ + w.gamma * tool
    } else {
        0.0
    }
}

/// Intersection over union on half-open pixel boxes.
pub fn iou(pred: &BBox, gt: &BBox) -> f64 {
    let inter = pred.intersection(gt).map_or(0, |b| b.area());
    let union = pred.area() + gt.area() - inter;
    inter as f64 / union as f64
}

pub fn tool_reward(num_valid_calls: usize, delta_conf: f64, w: &RewardWeights) -> f64 {
    let bonus = if delta_conf > 0.0 { w.lambda } else { 0.0 };
    bonus - w.eta * num_valid_calls as f64
}

/// `logp_label - logp_other`.
pub fn decision_margin(logp_label: f64, logp_other: f64) -> Result<f64, RewardError> {
    for v in [logp_label, logp_other] {
        if !v.is_finite() {
            return Err(RewardError::NonFinite(v));
        }
    }
    Ok(logp_label - logp_other)
}

/// Decision margins without and with tool context.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginPair {
    pub before: f64,
    pub after: f64,
    pub delta: f64,
}

impl MarginPair {
    pub fn new(before: f64, after: f64) -> Self {
        MarginPair {
            before,
            after,
            delta: after - before,
        }
    }
}

pub fn total_reward(
    acc: bool,
    loc: f64,
    type_: f64,
    tool: f64,
    format_valid: bool,
    w: &RewardWeights,
) -> Result<RewardBreakdown, RewardError> {
    for (field, value) in [("loc", loc), ("type", type_)] {
        if !(0.0..=1.0).contains(&value) {
            return Err(RewardError::OutOfRange { field, value });
        }
    }
    if !tool.is_finite() {
        return Err(RewardError::NonFinite(tool));
    }
    let format = if format_valid { 0.0 } else { w.format_penalty };
    Ok(RewardBreakdown {
        acc: acc as u8,
        loc,
        type_,
        tool,
        format,
        total: gated(acc, loc, type_, tool, w) + format,
    })
}

/// One trajectory plus the supervision needed to score it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoringInput {
    pub text: String,
    pub label: BinaryLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_box: Option<BBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_conf: Option<f64>,
    /// Successfully executed calls; defaults to the well-formed calls in `text`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub executed_calls: Option<usize>,
}

/// Scores a raw trajectory. Malformed text takes the format penalty; its
/// answer is still read leniently so accuracy credit is not lost twice.
///
/// Normal samples earn `loc = 1` and `type = 1` for emitting neither field.
/// An anomalous sample without a ground-truth box earns `loc = 0`.
pub fn score_trajectory(
    input: &ScoringInput,
    taxonomy: &Taxonomy,
    w: &RewardWeights,
) -> Result<RewardBreakdown, RewardError> {
    let (traj, format_valid) = match parse_trajectory(&input.text) {
        Ok(t) => (Some(t), true),
        Err(_) => (parse_trajectory_with(&input.text, ParseMode::Lenient).ok(), false),
    };
    let Some(traj) = traj else {
        return total_reward(false, 0.0, 0.0, 0.0, false, w);
    };
    let acc = traj.answer() == input.label;
    let (loc, type_) = if input.label.is_anomalous() {
        let loc = match (traj.location().and_then(BBox::find_in_text), input.gt_box) {
            (Some(p), Some(g)) => iou(&p, &g),
            _ => 0.0,
        };
        let type_ = match (traj.defect_type(), input.gt_type.as_deref()) {
            (Some(p), Some(g)) => taxonomy.type_reward(p, g)?,
            _ => 0.0,
        };
        (loc, type_)
    } else {
        (
            traj.location().is_none() as u8 as f64,
            traj.defect_type().is_none() as u8 as f64,
        )
    };
    let calls = input.executed_calls.unwrap_or_else(|| traj.tool_calls().count());
    let tool = tool_reward(calls, input.delta_conf.unwrap_or(0.0), w);
    total_reward(acc, loc, type_, tool, format_valid, w)
}
