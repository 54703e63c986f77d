use serde::{Deserialize, Serialize};

use super::PolicyResponse;
use crate::trajectory::BinaryLabel;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum AnswerLogprobs {
    Available { yes: f64, no: f64 },
    Unavailable,
}

impl AnswerLogprobs {
    /// Log-probability margin in favour of `label`.
    pub fn margin_for(&self, label: BinaryLabel) -> Option<f64> {
        match *self {
            AnswerLogprobs::Available { yes, no } => Some(match label {
                BinaryLabel::Yes => yes - no,
                BinaryLabel::No => no - yes,
            }),
            AnswerLogprobs::Unavailable => None,
        }
    }
}

fn label_word(l: BinaryLabel) -> &'static str {
    match l {
        BinaryLabel::Yes => "yes",
        BinaryLabel::No => "no",
    }
}

/// True when `token` is a non-empty leading piece of `word`.
fn starts_label(token: &str, word: &str) -> bool {
    let t = token.trim().to_ascii_lowercase();
    !t.is_empty() && word.starts_with(&t)
}

/// Reads the Yes/No log-probabilities at the first token of the answer
/// literal inside `<answer>...</answer>`.
pub fn answer_logprobs(resp: &PolicyResponse) -> AnswerLogprobs {
    let Some(tokens) = resp.token_logprobs.as_deref() else {
        return AnswerLogprobs::Unavailable;
    };
    let text = &resp.text;
    let Some(open) = text.rfind("<answer>") else {
        return AnswerLogprobs::Unavailable;
    };
    let body_start = open + "<answer>".len();
    let body = &text[body_start..];
    let lead = body.len() - body.trim_start().len();
    let target = body_start + lead;
    let end = body.find("</answer>").map_or(text.len(), |e| body_start + e);
    let Some(label) = BinaryLabel::parse_loose(&text[target..end]) else {
        return AnswerLogprobs::Unavailable;
    };

    let mut pos = 0usize;
    for tok in tokens {
        let start = pos;
        pos += tok.token.len();
        if pos <= target {
            continue;
        }
        // Token covering the first answer character; skip leading whitespace
        // that belongs to the same token.
        let covered = text.get(start..pos.min(text.len())).unwrap_or("");
        let from = target.saturating_sub(start);
        let piece = covered.get(from..).unwrap_or(covered);
        if !starts_label(piece, label_word(label)) && !starts_label(&tok.token, label_word(label)) {
            return AnswerLogprobs::Unavailable;
        }
        let other = !label;
        let Some(alt) = tok.top.iter().find(|a| starts_label(&a.token, label_word(other))) else {
            return AnswerLogprobs::Unavailable;
        };
        return match label {
            BinaryLabel::Yes => AnswerLogprobs::Available { yes: tok.logprob, no: alt.logprob },
            BinaryLabel::No => AnswerLogprobs::Available { yes: alt.logprob, no: tok.logprob },
        };
    }
    AnswerLogprobs::Unavailable
}
