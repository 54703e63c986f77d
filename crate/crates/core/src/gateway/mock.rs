//! Deterministic scripted backend.
//!
//! Script format:
//!
//! ```json
//! {
//!   "sessions": { "<session>": [ <step>, ... ] },
//!   "fallback": [ <step>, ... ]
//! }
//! ```
//!
//! A step is a bare string (the reply), or an object with `text`, optional
//! `when` (substring the last user turn must contain), optional
//! `answer_logprobs: {yes, no}`, or `fail: transient|timeout|auth|malformed`.
//! Each session consumes its own list (or its own copy of `fallback`) in
//! order, taking the first unconsumed step whose `when` matches.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{GatewayError, Policy, PolicyRequest, PolicyResponse, Role, TokenLogprob, TopLogprob, Transport, TransportError};
use crate::trajectory::BinaryLabel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailKind {
    Transient,
    Timeout,
    Auth,
    Malformed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelLogprobs {
    pub yes: f64,
    pub no: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptStep {
    Text(String),
    Full {
        #[serde(default)]
        text: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        when: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        answer_logprobs: Option<LabelLogprobs>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        fail: Option<FailKind>,
    },
}

impl ScriptStep {
    pub fn reply(text: impl Into<String>) -> Self {
        ScriptStep::Text(text.into())
    }

    pub fn with_logprobs(text: impl Into<String>, yes: f64, no: f64) -> Self {
        ScriptStep::Full {
            text: text.into(),
            when: None,
            answer_logprobs: Some(LabelLogprobs { yes, no }),
            fail: None,
        }
    }

    pub fn fail(kind: FailKind) -> Self {
        ScriptStep::Full { text: String::new(), when: None, answer_logprobs: None, fail: Some(kind) }
    }

    pub fn when(self, needle: impl Into<String>) -> Self {
        match self {
            ScriptStep::Text(text) => ScriptStep::Full {
                text,
                when: Some(needle.into()),
                answer_logprobs: None,
                fail: None,
            },
            ScriptStep::Full { text, answer_logprobs, fail, .. } => ScriptStep::Full {
                text,
                when: Some(needle.into()),
                answer_logprobs,
                fail,
            },
        }
    }

    fn matches(&self, prompt: &str) -> bool {
        match self {
            ScriptStep::Full { when: Some(w), .. } => prompt.contains(w.as_str()),
            _ => true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    #[serde(default)]
    pub sessions: BTreeMap<String, Vec<ScriptStep>>,
    #[serde(default)]
    pub fallback: Vec<ScriptStep>,
}

#[derive(Debug, Default)]
pub struct ScriptedPolicy {
    script: Script,
    consumed: Mutex<HashMap<String, Vec<bool>>>,
    requests: Mutex<Vec<PolicyRequest>>,
}

impl ScriptedPolicy {
    pub fn new(script: Script) -> Self {
        ScriptedPolicy { script, ..Default::default() }
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        Ok(Self::new(serde_json::from_str(text)?))
    }

    pub fn load(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    /// Every request received, in arrival order.
    pub fn requests(&self) -> Vec<PolicyRequest> {
        self.requests.lock().unwrap().clone()
    }

    fn steps_for(&self, session: &str) -> &[ScriptStep] {
        self.script.sessions.get(session).map_or(&self.script.fallback, |v| v)
    }
}

fn synth_logprobs(text: &str, lp: LabelLogprobs) -> Option<Vec<TokenLogprob>> {
    let open = text.rfind("<answer>")? + "<answer>".len();
    let body = &text[open..];
    let start = open + (body.len() - body.trim_start().len());
    let word_len = text[start..]
        .find(|c: char| !c.is_ascii_alphabetic())
        .unwrap_or(text.len() - start);
    let word = &text[start..start + word_len];
    let label = BinaryLabel::parse_loose(word)?;
    let (mine, other) = match label {
        BinaryLabel::Yes => (lp.yes, lp.no),
        BinaryLabel::No => (lp.no, lp.yes),
    };
    let other_word = (!label).as_str();
    let plain = |t: &str| TokenLogprob { token: t.to_string(), logprob: 0.0, top: Vec::new() };
    let mut out = Vec::new();
    if start > 0 {
        out.push(plain(&text[..start]));
    }
    out.push(TokenLogprob {
        token: word.to_string(),
        logprob: mine,
        top: vec![
            TopLogprob { token: word.to_string(), logprob: mine },
            TopLogprob { token: other_word.to_string(), logprob: other },
        ],
    });
    if start + word_len < text.len() {
        out.push(plain(&text[start + word_len..]));
    }
    Some(out)
}

impl Transport for ScriptedPolicy {
    fn send(&self, req: &PolicyRequest) -> Result<PolicyResponse, TransportError> {
        self.requests.lock().unwrap().push(req.clone());
        let prompt = req
            .messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map_or("", |m| m.text.as_str());
        let steps = self.steps_for(&req.session);
        let step = {
            let mut consumed = self.consumed.lock().unwrap();
            let used = consumed
                .entry(req.session.clone())
                .or_insert_with(|| vec![false; steps.len()]);
            let idx = (0..steps.len())
                .find(|&i| !used[i] && steps[i].matches(prompt))
                .ok_or_else(|| {
                    TransportError::Malformed(format!("script exhausted for session {:?}", req.session))
                })?;
            used[idx] = true;
            &steps[idx]
        };
        let (text, lp) = match step {
            ScriptStep::Text(t) => (t.clone(), None),
            ScriptStep::Full { fail: Some(kind), .. } => {
                let msg = format!("scripted {kind:?} failure");
                return Err(match kind {
                    FailKind::Transient => TransportError::Transient(msg),
                    FailKind::Timeout => TransportError::Timeout(msg),
                    FailKind::Auth => TransportError::Auth(msg),
                    FailKind::Malformed => TransportError::Malformed(msg),
                });
            }
            ScriptStep::Full { text, answer_logprobs, .. } => (text.clone(), *answer_logprobs),
        };
        let token_logprobs = if req.want_logprobs { lp.and_then(|lp| synth_logprobs(&text, lp)) } else { None };
        Ok(PolicyResponse { text, token_logprobs })
    }
}

/// Single-attempt use without a [`super::Gateway`]; scripted failures
/// surface directly.
impl Policy for ScriptedPolicy {
    fn complete(&self, req: &PolicyRequest) -> Result<PolicyResponse, GatewayError> {
        req.validate()?;
        self.send(req).map_err(|e| match e {
            TransportError::Auth(m) => GatewayError::Auth(m),
            TransportError::Malformed(m) => GatewayError::Malformed(m),
            e => GatewayError::Timeout { attempts: 1, last: e.to_string() },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{answer_logprobs, AnswerLogprobs, Gateway, RecordingSleeper};
    use std::sync::Arc;

    #[test]
    fn fixed_reply_verbatim() {
        let p = ScriptedPolicy::from_json(r#"{"sessions": {"s": ["hello\n world"]}}"#).unwrap();
        assert_eq!(p.send(&PolicyRequest::new("s", "q")).unwrap().text, "hello\n world");
        assert!(matches!(p.send(&PolicyRequest::new("s", "q")), Err(TransportError::Malformed(_))));
    }

    #[test]
    fn fail_twice_then_succeed_through_gateway() {
        let p = ScriptedPolicy::from_json(
            r#"{"sessions": {"s": [{"fail": "transient"}, {"fail": "timeout"}, "fine"]}}"#,
        )
        .unwrap();
        let g = Gateway::new(p).with_sleeper(Arc::new(RecordingSleeper::default()));
        assert_eq!(g.complete(&PolicyRequest::new("s", "q")).unwrap().text, "fine");
        assert_eq!(g.retries(), 2);
    }

    #[test]
    fn sessions_are_independent_and_fallback_is_per_session() {
        let p = ScriptedPolicy::from_json(r#"{"fallback": ["one", "two"]}"#).unwrap();
        assert_eq!(p.send(&PolicyRequest::new("a", "q")).unwrap().text, "one");
        assert_eq!(p.send(&PolicyRequest::new("b", "q")).unwrap().text, "one");
        assert_eq!(p.send(&PolicyRequest::new("a", "q")).unwrap().text, "two");
    }

    #[test]
    fn when_selects_by_prompt() {
        let script = Script {
            sessions: BTreeMap::from([(
                "s".to_string(),
                vec![ScriptStep::reply("second").when("round two"), ScriptStep::reply("first").when("round one")],
            )]),
            fallback: vec![],
        };
        let p = ScriptedPolicy::new(script);
        assert_eq!(p.send(&PolicyRequest::new("s", "this is round one")).unwrap().text, "first");
        assert_eq!(p.send(&PolicyRequest::new("s", "now round two")).unwrap().text, "second");
    }

    #[test]
    fn synthesized_logprobs() {
        let script = Script {
            sessions: BTreeMap::from([(
                "s".to_string(),
                vec![ScriptStep::with_logprobs("<think>x</think><answer>Yes</answer>", -0.2, -2.0); 2],
            )]),
            fallback: vec![],
        };
        let p = ScriptedPolicy::new(script);
        let r = p.send(&PolicyRequest::new("s", "q").with_logprobs(true)).unwrap();
        assert_eq!(answer_logprobs(&r), AnswerLogprobs::Available { yes: -0.2, no: -2.0 });
        let concat: String = r.token_logprobs.unwrap().iter().map(|t| t.token.clone()).collect();
        assert_eq!(concat, r.text);
        let r = p.send(&PolicyRequest::new("s", "q")).unwrap();
        assert_eq!(r.token_logprobs, None);
    }
}
