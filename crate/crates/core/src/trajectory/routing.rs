//! Line-oriented `Field: value` grammar of the first-round routing reply.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{BinaryLabel, FormatReport, ToolName, Violation};

macro_rules! closed_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "kebab-case")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl FromStr for $name {
            type Err = ();
            fn from_str(s: &str) -> Result<Self, ()> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($text => Ok($name::$variant),)+
                    _ => Err(()),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

closed_enum!(TargetScale {
    Tiny => "tiny",
    Small => "small",
    Medium => "medium",
    Large => "large",
    Unknown => "unknown",
});

closed_enum!(TargetType {
    Edge => "edge",
    Corner => "corner",
    Spacing => "spacing",
    Bending => "bending",
    SurfaceMark => "surface-mark",
    Component => "component",
    Texture => "texture",
    Unknown => "unknown",
});

closed_enum!(Suspicion {
    Low => "low",
    Medium => "medium",
    High => "high",
});

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub think: String,
    /// Requested tools in the order given. Empty means `none`.
    pub needed_tools: Vec<ToolName>,
    pub tool_target: String,
    pub target_region: String,
    pub target_scale: TargetScale,
    pub target_type: TargetType,
    pub suspicion: Suspicion,
    pub preliminary: BinaryLabel,
}

impl RoutingDecision {
    pub fn needs_no_tools(&self) -> bool {
        self.needed_tools.is_empty()
    }
}

const FIELDS: [&str; 8] = [
    "think",
    "need tools",
    "tool target",
    "target region",
    "target scale",
    "target type",
    "suspicion level",
    "preliminary answer",
];

/// Parses a round-one reply. All eight fields are mandatory. A `Think`
/// value may continue over following lines until the next known field.
pub fn parse_routing(text: &str) -> Result<RoutingDecision, FormatReport> {
    let mut values: [Option<String>; 8] = Default::default();
    let mut current: Option<usize> = None;
    for line in text.lines() {
        let trimmed = line.trim();
        let field = trimmed.split_once(':').and_then(|(k, v)| {
            let key = k.trim().trim_start_matches(['-', '*', ' ']).trim_end_matches('*');
            FIELDS
                .iter()
                .position(|f| f.eq_ignore_ascii_case(key.trim()))
                .map(|idx| (idx, v.trim().trim_start_matches('*').trim()))
        });
        match field {
            Some((idx, v)) => {
                values[idx] = Some(v.to_string());
                current = Some(idx);
            }
            None => {
                if let (Some(idx), false) = (current, trimmed.is_empty()) {
                    let slot = values[idx].get_or_insert_with(String::new);
                    if !slot.is_empty() {
                        slot.push('\n');
                    }
                    slot.push_str(trimmed);
                }
            }
        }
    }

    let mut violations = Vec::new();
    let mut take = |idx: usize| -> Option<String> {
        let v = values[idx].take();
        if v.is_none() {
            violations.push(Violation::MissingField {
                field: FIELDS[idx].to_string(),
            });
        }
        v
    };
    let think = take(0);
    let tools = take(1);
    let tool_target = take(2);
    let target_region = take(3);
    let scale = take(4);
    let ttype = take(5);
    let suspicion = take(6);
    let preliminary = take(7);

    let needed_tools = tools.and_then(|t| parse_tool_list(&t, &mut violations));
    let scale = enum_field::<TargetScale>(scale, "target scale", &mut violations);
    let ttype = enum_field::<TargetType>(ttype, "target type", &mut violations);
    let suspicion = enum_field::<Suspicion>(suspicion, "suspicion level", &mut violations);
    let preliminary = preliminary.and_then(|p| {
        let label = BinaryLabel::parse_loose(&p);
        if label.is_none() {
            violations.push(Violation::InvalidValue {
                field: "preliminary answer".into(),
                value: p,
            });
        }
        label
    });

    match (
        think,
        needed_tools,
        tool_target,
        target_region,
        scale,
        ttype,
        suspicion,
        preliminary,
    ) {
        (Some(think), Some(needed_tools), Some(tool_target), Some(target_region), Some(target_scale), Some(target_type), Some(suspicion), Some(preliminary))
            if violations.is_empty() =>
        {
            Ok(RoutingDecision {
                think,
                needed_tools,
                tool_target,
                target_region,
                target_scale,
                target_type,
                suspicion,
                preliminary,
            })
        }
        _ => Err(FormatReport::from_violations(violations, None)),
    }
}

fn enum_field<T: FromStr>(
    value: Option<String>,
    field: &str,
    violations: &mut Vec<Violation>,
) -> Option<T> {
    let value = value?;
    match value.parse() {
        Ok(v) => Some(v),
        Err(_) => {
            violations.push(Violation::InvalidValue {
                field: field.to_string(),
                value,
            });
            None
        }
    }
}

/// `qwen3vlmax-api` in the routing prompt names the remote prior service
/// and maps to the prior tool.
fn parse_tool_list(list: &str, violations: &mut Vec<Violation>) -> Option<Vec<ToolName>> {
    let mut tools = Vec::new();
    let mut saw_none = false;
    let mut entries = 0;
    let mut ok = true;
    for raw in list.split(',') {
        let entry = raw.trim().to_ascii_lowercase();
        if entry.is_empty() {
            continue;
        }
        entries += 1;
        if entry == "none" {
            saw_none = true;
            continue;
        }
        let tool = if entry == "qwen3vlmax-api" {
            Ok(ToolName::Prior)
        } else {
            entry.parse::<ToolName>()
        };
        match tool {
            Ok(t) if !tools.contains(&t) => tools.push(t),
            Ok(_) => {}
            Err(_) => {
                ok = false;
                violations.push(Violation::InvalidValue {
                    field: "need tools".into(),
                    value: raw.trim().to_string(),
                });
            }
        }
    }
    if entries == 0 {
        violations.push(Violation::InvalidValue {
            field: "need tools".into(),
            value: list.to_string(),
        });
        return None;
    }
    if saw_none && entries > 1 {
        violations.push(Violation::NoneNotSingleton);
        return None;
    }
    ok.then_some(tools)
}
