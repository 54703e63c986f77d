//! Keyword parser for untagged baseline responses.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::BinaryLabel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineAnswer {
    Label(BinaryLabel),
    Unparseable,
}

impl BaselineAnswer {
    pub fn label(self) -> Option<BinaryLabel> {
        match self {
            BaselineAnswer::Label(l) => Some(l),
            BaselineAnswer::Unparseable => None,
        }
    }
}

fn keyword_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    // `defect-free` is listed first so it wins over a bare `defect...` prefix;
    // `\b` keeps `normal` from matching inside `abnormal` and `no` inside `not`.
    RE.get_or_init(|| {
        Regex::new(r"(?i)\b(defect-free|anomalous|defective|abnormal|normal|yes|no)\b").unwrap()
    })
}

/// Maps a free-form response to a label using the last decision keyword in
/// the text.
pub fn parse_baseline_answer(text: &str) -> BaselineAnswer {
    keyword_regex()
        .find_iter(text)
        .last()
        .map(|m| {
            let word = m.as_str().to_ascii_lowercase();
            let anomalous = matches!(word.as_str(), "yes" | "anomalous" | "defective" | "abnormal");
            BaselineAnswer::Label(BinaryLabel::from_anomalous(anomalous))
        })
        .unwrap_or(BaselineAnswer::Unparseable)
}
