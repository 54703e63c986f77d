//! Syntax of the `<call_tool>` block.
//!
//! Canonical form is `name(key=value, ...)` with one call per line or
//! `;`-separated. Values are finite numbers or double-quoted strings.
//! Looser shapes seen in teacher output (`T_crop: upper-left corner`,
//! `prior capacitor top`) parse into a single `query` argument.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToolName {
    Crop,
    Prior,
    Enhance,
    Measure,
}

impl ToolName {
    pub const ALL: [ToolName; 4] = [
        ToolName::Crop,
        ToolName::Prior,
        ToolName::Enhance,
        ToolName::Measure,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ToolName::Crop => "crop",
            ToolName::Prior => "prior",
            ToolName::Enhance => "enhance",
            ToolName::Measure => "measure",
        }
    }
}

impl fmt::Display for ToolName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ToolName {
    type Err = String;

    /// Accepts `crop` as well as the `T_crop` spelling used in training
    /// prompts, case-insensitively.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        let bare = lower.strip_prefix("t_").unwrap_or(&lower);
        match bare {
            "crop" => Ok(ToolName::Crop),
            "prior" => Ok(ToolName::Prior),
            "enhance" => Ok(ToolName::Enhance),
            "measure" => Ok(ToolName::Measure),
            _ => Err(format!("unknown tool {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArgValue {
    Number(f64),
    Text(String),
}

impl ArgValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            ArgValue::Number(n) => Some(*n),
            ArgValue::Text(t) => t.trim().parse().ok(),
        }
    }

    pub fn as_text(&self) -> String {
        match self {
            ArgValue::Number(n) => format!("{n}"),
            ArgValue::Text(t) => t.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub tool: ToolName,
    #[serde(default)]
    pub args: BTreeMap<String, ArgValue>,
}

impl ToolCall {
    pub fn new(tool: ToolName) -> Self {
        ToolCall {
            tool,
            args: BTreeMap::new(),
        }
    }

    pub fn with_arg(mut self, key: &str, value: ArgValue) -> Self {
        self.args.insert(key.to_string(), value);
        self
    }

    pub fn arg(&self, key: &str) -> Option<&ArgValue> {
        self.args.get(key)
    }

    pub fn num(&self, key: &str) -> Option<f64> {
        self.args.get(key).and_then(ArgValue::as_f64)
    }

    pub fn text(&self, key: &str) -> Option<String> {
        self.args.get(key).map(ArgValue::as_text)
    }

    /// Canonical `name(key=value, ...)` form. Fails on non-finite numbers or
    /// keys that are not identifiers.
    pub fn render(&self) -> Result<String, String> {
        let mut out = String::new();
        out.push_str(self.tool.as_str());
        out.push('(');
        for (i, (k, v)) in self.args.iter().enumerate() {
            if !is_ident(k) {
                return Err(format!("argument key {k:?} is not an identifier"));
            }
            if i > 0 {
                out.push_str(", ");
            }
            out.push_str(k);
            out.push('=');
            match v {
                ArgValue::Number(n) if n.is_finite() => out.push_str(&format!("{n}")),
                ArgValue::Number(n) => return Err(format!("non-finite argument {k}={n}")),
                ArgValue::Text(t) => {
                    out.push('"');
                    for c in t.chars() {
                        if c == '"' || c == '\\' {
                            out.push('\\');
                        }
                        out.push(c);
                    }
                    out.push('"');
                }
            }
        }
        out.push(')');
        Ok(out)
    }
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Parses the content of one `<call_tool>` block into one or more calls.
pub fn parse_tool_calls(content: &str) -> Result<Vec<ToolCall>, String> {
    let pieces = split_top_level(content)?;
    let calls = pieces
        .iter()
        .map(|p| p.trim())
        .filter(|p| !p.is_empty())
        .map(parse_one)
        .collect::<Result<Vec<_>, _>>()?;
    if calls.is_empty() {
        return Err("empty tool call".into());
    }
    Ok(calls)
}

fn split_top_level(content: &str) -> Result<Vec<String>, String> {
    let mut pieces = Vec::new();
    let mut cur = String::new();
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for c in content.chars() {
        if in_str {
            cur.push(c);
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_str = false;
            }
            continue;
        }
        match c {
            '"' => {
                in_str = true;
                cur.push(c);
            }
            '(' => {
                depth += 1;
                cur.push(c);
            }
            ')' => {
                depth = depth.checked_sub(1).ok_or("unbalanced ')'")?;
                cur.push(c);
            }
            ';' | '\n' if depth == 0 => pieces.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    if in_str {
        return Err("unterminated string".into());
    }
    if depth != 0 {
        return Err("unbalanced '('".into());
    }
    pieces.push(cur);
    Ok(pieces)
}

fn parse_one(piece: &str) -> Result<ToolCall, String> {
    let name_end = piece
        .char_indices()
        .find(|&(_, c)| !(c.is_ascii_alphanumeric() || c == '_'))
        .map(|(i, _)| i)
        .unwrap_or(piece.len());
    let tool: ToolName = piece[..name_end].parse()?;
    let rest = piece[name_end..].trim();
    let mut call = ToolCall::new(tool);
    if rest.is_empty() {
        return Ok(call);
    }
    if let Some(inner) = rest.strip_prefix('(') {
        let inner = inner
            .strip_suffix(')')
            .ok_or_else(|| format!("trailing text after arguments in {piece:?}"))?;
        for arg in split_args(inner)? {
            let arg = arg.trim();
            if arg.is_empty() {
                continue;
            }
            let (k, v) = arg
                .split_once('=')
                .ok_or_else(|| format!("argument {arg:?} is not key=value"))?;
            let k = k.trim();
            if !is_ident(k) {
                return Err(format!("bad argument key {k:?}"));
            }
            call.args.insert(k.to_string(), parse_value(v.trim())?);
        }
        return Ok(call);
    }
    let query = rest.strip_prefix(':').unwrap_or(rest).trim();
    if !query.is_empty() {
        call.args
            .insert("query".into(), ArgValue::Text(query.to_string()));
    }
    Ok(call)
}

fn split_args(inner: &str) -> Result<Vec<String>, String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut in_str = false;
    let mut escaped = false;
    for c in inner.chars() {
        if in_str {
            cur.push(c);
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_str = false;
            }
        } else if c == '"' {
            in_str = true;
            cur.push(c);
        } else if c == ',' {
            out.push(std::mem::take(&mut cur));
        } else {
            cur.push(c);
        }
    }
    if in_str {
        return Err("unterminated string".into());
    }
    out.push(cur);
    Ok(out)
}

fn parse_value(v: &str) -> Result<ArgValue, String> {
    if let Some(body) = v.strip_prefix('"') {
        let body = body
            .strip_suffix('"')
            .ok_or_else(|| format!("unterminated string {v:?}"))?;
        let mut out = String::with_capacity(body.len());
        let mut chars = body.chars();
        while let Some(c) = chars.next() {
            if c == '\\' {
                match chars.next() {
                    Some(e) => out.push(e),
                    None => return Err("dangling escape".into()),
                }
            } else if c == '"' {
                return Err(format!("unescaped quote in {v:?}"));
            } else {
                out.push(c);
            }
        }
        return Ok(ArgValue::Text(out));
    }
    if v.is_empty() {
        return Err("empty argument value".into());
    }
    match v.parse::<f64>() {
        Ok(n) if n.is_finite() => Ok(ArgValue::Number(n)),
        _ => Ok(ArgValue::Text(v.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_form_parses() {
        let calls = parse_tool_calls("crop(x0=10, y0=20, x1=50, y1=60)").unwrap();
        assert_eq!(calls.len(), 1);
        assert_eq!(calls[0].tool, ToolName::Crop);
        assert_eq!(calls[0].num("x1"), Some(50.0));
    }

    #[test]
    fn prompt_spelling_and_query_form() {
        let calls = parse_tool_calls("T_prior: capacitor top view\nT_enhance(mode=\"edge\")").unwrap();
        assert_eq!(calls[0].tool, ToolName::Prior);
        assert_eq!(calls[0].text("query").as_deref(), Some("capacitor top view"));
        assert_eq!(calls[1].tool, ToolName::Enhance);
        assert_eq!(calls[1].text("mode").as_deref(), Some("edge"));
    }

    #[test]
    fn semicolons_inside_strings_do_not_split() {
        let calls = parse_tool_calls(r#"prior(category="a;b", view="*")"#).unwrap();
        assert_eq!(calls.len(), 1);
        assert_eq!(calls[0].text("category").as_deref(), Some("a;b"));
    }

    #[test]
    fn unknown_tool_is_rejected() {
        assert!(parse_tool_calls("zoom(x=1)").is_err());
        assert!(parse_tool_calls("   ").is_err());
        assert!(parse_tool_calls("crop(x0=1").is_err());
    }

    #[test]
    fn render_round_trips_quoted_numbers_as_text() {
        let call = ToolCall::new(ToolName::Measure)
            .with_arg("a", ArgValue::Text("10".into()))
            .with_arg("b", ArgValue::Number(0.25))
            .with_arg("c", ArgValue::Text("say \"hi\"".into()));
        let text = call.render().unwrap();
        assert_eq!(parse_tool_calls(&text).unwrap(), vec![call]);
    }
}
