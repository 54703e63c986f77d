//! Shipped prompt templates and tool-context fusion.

use super::Observation;
use crate::imaging::RasterImage;

pub const ROUND1_ROUTING: &str = include_str!("../../assets/round1_routing.txt");
pub const ROUND2_DECISION: &str = include_str!("../../assets/round2_decision.txt");
pub const BASELINE_ZERO_SHOT: &str = include_str!("../../assets/baseline_zero_shot.txt");
pub const TRAINING_PROMPT: &str = include_str!("../../assets/training.txt");
pub const STAGE1_DESCRIPTION: &str = include_str!("../../assets/stage1_description.txt");
pub const STAGE2_FORMATTING: &str = include_str!("../../assets/stage2_formatting.txt");
pub const JUDGE_RUBRIC: &str = include_str!("../../assets/judge.txt");

/// Replaces each `(placeholder, value)` in turn.
pub fn fill(template: &str, pairs: &[(&str, &str)]) -> String {
    pairs
        .iter()
        .fold(template.to_string(), |acc, (k, v)| acc.replace(k, v))
}

pub fn round2_prompt(tool_context: &str) -> String {
    fill(ROUND2_DECISION, &[("{tool_context}", tool_context)])
}

pub fn training_prompt(question: &str) -> String {
    fill(TRAINING_PROMPT, &[("{Question}", question)])
}

/// Text block for the round-two prompt plus the images it references.
#[derive(Clone, Debug, Default)]
pub struct FusedContext {
    pub text: String,
    pub attachments: Vec<RasterImage>,
}

/// Outcome of one dispatched tool, as seen by [`fuse_context`].
#[derive(Clone, Copy, Debug)]
pub enum ToolOutcome<'a> {
    Ok(&'a Observation),
    Failed { tool: &'a str, error: &'a str },
}

/// Renders outcomes in dispatch order. Images are numbered from 1 in
/// attachment order; the query image itself is not counted.
pub fn fuse_context(outcomes: &[ToolOutcome<'_>]) -> FusedContext {
    let mut out = FusedContext::default();
    let mut blocks = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        let (tool, result) = match *o {
            ToolOutcome::Failed { tool, error } => (tool.to_string(), format!("unavailable ({error})")),
            ToolOutcome::Ok(obs) => {
                let tool = obs.tool().as_str().to_string();
                let result = match obs {
                    Observation::Text { text, .. } => text.clone(),
                    Observation::Measurement { measurement, .. } => measurement.to_string(),
                    Observation::Image { image, .. } => match image {
                        Some(img) => {
                            out.attachments.push((**img).clone());
                            format!("image #{} from tool {tool}", out.attachments.len())
                        }
                        None => "unavailable (image payload missing)".to_string(),
                    },
                };
                (tool, result)
            }
        };
        blocks.push(format!("tool: {tool}\nresult: {result}"));
    }
    out.text = blocks.join("\n");
    out
}
