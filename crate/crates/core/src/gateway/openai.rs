use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{PolicyRequest, PolicyResponse, TokenLogprob, TopLogprob, Transport, TransportError};

pub const ENV_ENDPOINT: &str = "PATCHWISE_ENDPOINT";
pub const ENV_MODEL: &str = "PATCHWISE_MODEL";
pub const ENV_API_KEY: &str = "PATCHWISE_API_KEY";

/// Endpoint settings. The key is never read from config files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointConfig {
    /// Base URL; `/chat/completions` is appended unless already present.
    pub url: String,
    pub model: String,
    pub timeout_secs: u64,
    pub top_logprobs: u8,
    pub concurrency: usize,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            url: "http://localhost:8000/v1".into(),
            model: "qwen3-vl-8b".into(),
            timeout_secs: 120,
            top_logprobs: 5,
            concurrency: 8,
        }
    }
}

impl EndpointConfig {
    /// Environment values override the stored URL and model.
    pub fn with_env(mut self) -> Self {
        if let Ok(u) = std::env::var(ENV_ENDPOINT) {
            if !u.is_empty() {
                self.url = u;
            }
        }
        if let Ok(m) = std::env::var(ENV_MODEL) {
            if !m.is_empty() {
                self.model = m;
            }
        }
        self
    }

    fn completions_url(&self) -> String {
        let base = self.url.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        }
    }
}

pub struct OpenAiTransport {
    config: EndpointConfig,
    api_key: String,
    agent: ureq::Agent,
}

impl std::fmt::Debug for OpenAiTransport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OpenAiTransport").field("config", &self.config).finish_non_exhaustive()
    }
}

impl OpenAiTransport {
    /// Fails with an auth error when the key is empty, before any I/O.
    pub fn new(config: EndpointConfig, api_key: impl Into<String>) -> Result<Self, TransportError> {
        let api_key = api_key.into();
        if api_key.trim().is_empty() {
            return Err(TransportError::Auth(format!("{ENV_API_KEY} is not set")));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(OpenAiTransport { config, api_key, agent })
    }

    pub fn from_env(config: EndpointConfig) -> Result<Self, TransportError> {
        let key = std::env::var(ENV_API_KEY).unwrap_or_default();
        Self::new(config.with_env(), key)
    }

    pub fn api_key(&self) -> &str {
        &self.api_key
    }

    pub fn body(&self, req: &PolicyRequest) -> Value {
        let last_user = req.messages.iter().rposition(|m| m.role == super::Role::User);
        let messages: Vec<Value> = req
            .messages
            .iter()
            .enumerate()
            .map(|(i, m)| {
                if Some(i) == last_user && !req.images.is_empty() {
                    let mut parts = vec![json!({"type": "text", "text": m.text})];
                    parts.extend(req.images.iter().map(|b64| {
                        json!({"type": "image_url", "image_url": {"url": format!("data:image/png;base64,{b64}")}})
                    }));
                    json!({"role": m.role, "content": parts})
                } else {
                    json!({"role": m.role, "content": m.text})
                }
            })
            .collect();
        let mut body = json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        if req.want_logprobs {
            body["logprobs"] = json!(true);
            body["top_logprobs"] = json!(self.config.top_logprobs);
        }
        body
    }
}

pub(crate) fn parse_completion(payload: &str) -> Result<PolicyResponse, TransportError> {
    let v: Value = serde_json::from_str(payload).map_err(|e| TransportError::Malformed(e.to_string()))?;
    let choice = v
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| TransportError::Malformed("no choices".into()))?;
    let text = match choice.pointer("/message/content") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Array(parts)) => parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect(),
        _ => return Err(TransportError::Malformed("missing message content".into())),
    };
    let token_logprobs = match choice.pointer("/logprobs/content") {
        Some(Value::Array(items)) => {
            let mut out = Vec::with_capacity(items.len());
            for it in items {
                let token = it.get("token").and_then(Value::as_str);
                let logprob = it.get("logprob").and_then(Value::as_f64);
                let (Some(token), Some(logprob)) = (token, logprob) else {
                    return Err(TransportError::Malformed("logprob entry without token/logprob".into()));
                };
                let top = it
                    .get("top_logprobs")
                    .and_then(Value::as_array)
                    .map(|alts| {
                        alts.iter()
                            .filter_map(|a| {
                                Some(TopLogprob {
                                    token: a.get("token")?.as_str()?.to_string(),
                                    logprob: a.get("logprob")?.as_f64()?,
                                })
                            })
                            .collect()
                    })
                    .unwrap_or_default();
                out.push(TokenLogprob { token: token.to_string(), logprob, top });
            }
            Some(out)
        }
        _ => None,
    };
    Ok(PolicyResponse { text, token_logprobs })
}

impl Transport for OpenAiTransport {
    fn send(&self, req: &PolicyRequest) -> Result<PolicyResponse, TransportError> {
        let result = self
            .agent
            .post(&self.config.completions_url())
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(self.body(req));
        let mut resp = match result {
            Ok(r) => r,
            Err(ureq::Error::Timeout(t)) => return Err(TransportError::Timeout(t.to_string())),
            Err(e @ (ureq::Error::BadUri(_) | ureq::Error::Http(_) | ureq::Error::InvalidProxyUrl)) => {
                return Err(TransportError::Malformed(e.to_string()))
            }
            Err(e) => return Err(TransportError::Transient(e.to_string())),
        };
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError::Transient(e.to_string()))?;
        match status {
            200..=299 => parse_completion(&body),
            401 | 403 => Err(TransportError::Auth(format!("HTTP {status}"))),
            408 | 429 | 500..=599 => Err(TransportError::Transient(format!("HTTP {status}"))),
            _ => Err(TransportError::Malformed(format!("HTTP {status}: {}", truncate(&body, 200)))),
        }
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_key_fails_fast() {
        let e = OpenAiTransport::new(EndpointConfig::default(), "").unwrap_err();
        assert!(matches!(e, TransportError::Auth(_)));
    }

    #[test]
    fn body_shape() {
        let t = OpenAiTransport::new(EndpointConfig::default(), "k").unwrap();
        let req = PolicyRequest::new("s", "look").with_images(vec!["QUJD".into()]).with_logprobs(true);
        let b = t.body(&req);
        assert_eq!(b["messages"][0]["content"][0]["text"], "look");
        assert_eq!(b["messages"][0]["content"][1]["image_url"]["url"], "data:image/png;base64,QUJD");
        assert_eq!(b["logprobs"], true);
        assert!(b.get("session").is_none());
        assert!(!b.to_string().contains("\"k\""));
    }

    #[test]
    fn url_joining() {
        let mut c = EndpointConfig::default();
        c.url = "http://h/v1/".into();
        assert_eq!(c.completions_url(), "http://h/v1/chat/completions");
        c.url = "http://h/v1/chat/completions".into();
        assert_eq!(c.completions_url(), "http://h/v1/chat/completions");
    }

    #[test]
    fn parses_logprobs_payload() {
        let payload = r#"{"choices":[{"message":{"role":"assistant","content":"<answer>No</answer>"},
            "logprobs":{"content":[{"token":"<answer>","logprob":0.0,"top_logprobs":[]},
            {"token":"No","logprob":-0.4,"top_logprobs":[{"token":"No","logprob":-0.4},{"token":"Yes","logprob":-1.2}]},
            {"token":"</answer>","logprob":0.0}]}}]}"#;
        let r = parse_completion(payload).unwrap();
        assert_eq!(r.text, "<answer>No</answer>");
        assert_eq!(r.token_logprobs.as_ref().unwrap()[1].top[1].logprob, -1.2);
        assert!(matches!(parse_completion("{}"), Err(TransportError::Malformed(_))));
        assert!(matches!(parse_completion("not json"), Err(TransportError::Malformed(_))));
    }

    #[test]
    fn unreachable_host_is_transient() {
        let mut c = EndpointConfig::default();
        c.url = "http://127.0.0.1:9".into();
        c.timeout_secs = 2;
        let t = OpenAiTransport::new(c, "k").unwrap();
        let e = t.send(&PolicyRequest::new("s", "q")).unwrap_err();
        assert!(e.is_retryable(), "{e:?}");
    }
}
