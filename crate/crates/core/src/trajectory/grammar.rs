use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{parse_tool_calls, BinaryLabel, FormatReport, Segment, Trajectory, Violation};

const KNOWN_TAGS: [&str; 6] = ["think", "call_tool", "observation", "location", "type", "answer"];

/// Strict mode rejects any non-whitespace text outside tags and unknown
/// tags. Lenient mode (used on free-running model output) ignores both,
/// accepts `yes`/`no` in any case, and drops `<location>none</location>` /
/// `<type>none</type>` placeholders that the decision prompts ask for on
/// normal samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ParseMode {
    #[default]
    Strict,
    Lenient,
}

#[derive(Debug, thiserror::Error)]
#[error("cannot render invalid trajectory: {}", .0.summary())]
pub struct RenderError(pub FormatReport);

/// JSONL row for a parsed model output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub raw_text: String,
    pub segments: Vec<Segment>,
    pub valid: bool,
    pub violations: Vec<Violation>,
}

impl TrajectoryRecord {
    pub fn from_text(raw_text: &str, mode: ParseMode) -> Self {
        let scan = scan(raw_text, mode);
        let mut violations = scan.violations;
        violations.extend(structural_violations(&scan.items));
        dedup(&mut violations);
        TrajectoryRecord {
            raw_text: raw_text.to_string(),
            segments: scan.items.into_iter().filter_map(Item::into_segment).collect(),
            valid: violations.is_empty(),
            violations,
        }
    }
}

fn tag_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"<(/?)([A-Za-z_][A-Za-z0-9_]*)>").unwrap())
}

struct Token {
    start: usize,
    end: usize,
    closing: bool,
    name: String,
}

impl Token {
    fn known(&self) -> bool {
        KNOWN_TAGS.contains(&self.name.as_str())
    }
}

/// Parsed block; malformed tool calls and invalid answers are kept as
/// markers so pairing and answer checks see them in order.
enum Item {
    Seg(Segment),
    BadCall,
    BadAnswer,
}

impl Item {
    fn into_segment(self) -> Option<Segment> {
        match self {
            Item::Seg(s) => Some(s),
            _ => None,
        }
    }
}

struct Scan {
    items: Vec<Item>,
    violations: Vec<Violation>,
}

fn tokenize(text: &str) -> Vec<Token> {
    tag_regex()
        .captures_iter(text)
        .map(|c| {
            let m = c.get(0).unwrap();
            Token {
                start: m.start(),
                end: m.end(),
                closing: !c[1].is_empty(),
                name: c[2].to_string(),
            }
        })
        .collect()
}

fn scan(text: &str, mode: ParseMode) -> Scan {
    let strict = mode == ParseMode::Strict;
    let tokens = tokenize(text);
    let mut violations = Vec::new();
    let mut items = Vec::new();
    let mut pos = 0;
    let mut i = 0;
    let outside = |slice: &str, violations: &mut Vec<Violation>| {
        if strict && !slice.trim().is_empty() {
            violations.push(Violation::TextOutsideTags);
        }
    };

    while i < tokens.len() {
        let tok = &tokens[i];
        outside(&text[pos..tok.start], &mut violations);
        if !tok.known() {
            if strict {
                violations.push(Violation::UnknownTag {
                    tag: tok.name.clone(),
                });
            }
            // a matching close with only unknown tags between swallows the
            // whole block, content included
            let close = (!tok.closing)
                .then(|| {
                    (i + 1..tokens.len())
                        .take_while(|&j| !tokens[j].known())
                        .find(|&j| tokens[j].closing && tokens[j].name == tok.name)
                })
                .flatten();
            match close {
                Some(j) => {
                    pos = tokens[j].end;
                    i = j + 1;
                }
                None => {
                    pos = tok.end;
                    i += 1;
                }
            }
            continue;
        }
        if tok.closing {
            violations.push(Violation::MalformedTag {
                tag: tok.name.clone(),
            });
            pos = tok.end;
            i += 1;
            continue;
        }

        let close = (i + 1..tokens.len()).find(|&j| tokens[j].closing && tokens[j].name == tok.name);
        let (content, next_pos, next_i) = match close {
            Some(j) => {
                if tokens[i + 1..j].iter().any(Token::known) {
                    violations.push(Violation::NestedTag {
                        tag: tok.name.clone(),
                    });
                }
                (&text[tok.end..tokens[j].start], tokens[j].end, j + 1)
            }
            None => {
                violations.push(Violation::MalformedTag {
                    tag: tok.name.clone(),
                });
                match (i + 1..tokens.len()).find(|&j| tokens[j].known() && !tokens[j].closing) {
                    Some(j) => (&text[tok.end..tokens[j].start], tokens[j].start, j),
                    None => (&text[tok.end..], text.len(), tokens.len()),
                }
            }
        };
        push_block(&tok.name, content, mode, &mut items, &mut violations);
        pos = next_pos;
        i = next_i;
    }
    outside(&text[pos..], &mut violations);
    Scan { items, violations }
}

fn is_none_placeholder(s: &str) -> bool {
    s.trim().eq_ignore_ascii_case("none")
}

fn push_block(
    name: &str,
    content: &str,
    mode: ParseMode,
    items: &mut Vec<Item>,
    violations: &mut Vec<Violation>,
) {
    let lenient = mode == ParseMode::Lenient;
    match name {
        "think" => items.push(Item::Seg(Segment::Think(content.to_string()))),
        "observation" => items.push(Item::Seg(Segment::Observation(content.to_string()))),
        "location" if lenient && is_none_placeholder(content) => {}
        "type" if lenient && is_none_placeholder(content) => {}
        "location" => items.push(Item::Seg(Segment::Location(content.to_string()))),
        "type" => items.push(Item::Seg(Segment::DefectType(content.to_string()))),
        "call_tool" => match parse_tool_calls(content) {
            Ok(calls) => items.extend(calls.into_iter().map(|c| Item::Seg(Segment::CallTool(c)))),
            Err(_) => {
                violations.push(Violation::MalformedToolCall);
                items.push(Item::BadCall);
            }
        },
        "answer" => {
            let label = if lenient {
                BinaryLabel::parse_loose(content)
            } else {
                content.trim().parse().ok()
            };
            match label {
                Some(l) => items.push(Item::Seg(Segment::Answer(l))),
                None => {
                    violations.push(Violation::InvalidAnswer);
                    items.push(Item::BadAnswer);
                }
            }
        }
        _ => unreachable!("only known tags reach push_block"),
    }
}

fn structural_violations(items: &[Item]) -> Vec<Violation> {
    let mut out = Vec::new();
    let answer_positions: Vec<usize> = items
        .iter()
        .enumerate()
        .filter(|(_, it)| matches!(it, Item::Seg(Segment::Answer(_)) | Item::BadAnswer))
        .map(|(i, _)| i)
        .collect();
    let first_answer = answer_positions.first().copied();
    let answer = items.iter().find_map(|it| match it {
        Item::Seg(Segment::Answer(l)) => Some(*l),
        _ => None,
    });

    match answer_positions.len() {
        0 => out.push(Violation::MissingAnswer),
        1 => {}
        _ => out.push(Violation::DuplicateAnswer),
    }
    if let Some(a) = first_answer {
        if a + 1 < items.len() && answer_positions.len() == 1 {
            out.push(Violation::AnswerNotFinal);
        }
    }

    let before = &items[..first_answer.unwrap_or(items.len())];
    let mut thinks = before.iter().filter_map(|it| match it {
        Item::Seg(Segment::Think(t)) => Some(t),
        _ => None,
    });
    let mut any_think = false;
    for t in thinks.by_ref() {
        any_think = true;
        if t.trim().is_empty() {
            out.push(Violation::EmptyThink);
        }
    }
    if !any_think {
        out.push(Violation::MissingThink);
    }

    let mut pending = 0usize;
    for it in before {
        match it {
            Item::Seg(Segment::CallTool(_)) | Item::BadCall => pending += 1,
            Item::Seg(Segment::Observation(_)) => {
                if pending == 0 {
                    out.push(Violation::OrphanObservation);
                }
                pending = 0;
            }
            _ => {}
        }
    }
    if pending > 0 {
        out.push(Violation::MissingObservation);
    }

    let locations = items
        .iter()
        .filter(|it| matches!(it, Item::Seg(Segment::Location(_))))
        .count();
    let types = items
        .iter()
        .filter(|it| matches!(it, Item::Seg(Segment::DefectType(_))))
        .count();
    if locations > 1 {
        out.push(Violation::DuplicateLocation);
    }
    if types > 1 {
        out.push(Violation::DuplicateType);
    }
    match answer {
        Some(BinaryLabel::Yes) => {
            if locations == 0 {
                out.push(Violation::MissingLocationOnYes);
            }
            if types == 0 {
                out.push(Violation::MissingTypeOnYes);
            }
        }
        Some(BinaryLabel::No) => {
            if locations > 0 {
                out.push(Violation::UnexpectedLocationOnNo);
            }
            if types > 0 {
                out.push(Violation::UnexpectedTypeOnNo);
            }
        }
        None => {}
    }
    out
}

fn dedup(v: &mut Vec<Violation>) {
    let mut seen = std::collections::HashSet::new();
    v.retain(|x| seen.insert(x.clone()));
}

pub(super) fn first_answer(segments: &[Segment]) -> Option<BinaryLabel> {
    segments.iter().find_map(|s| match s {
        Segment::Answer(l) => Some(*l),
        _ => None,
    })
}

/// Grammar rules for an already-built segment list, plus the content
/// constraint that no text may contain something that scans as a tag.
pub(super) fn check_segments(segments: &[Segment]) -> Vec<Violation> {
    let mut out = Vec::new();
    for s in segments {
        let content = match s {
            Segment::Think(t)
            | Segment::Observation(t)
            | Segment::Location(t)
            | Segment::DefectType(t) => Some(t.as_str()),
            _ => None,
        };
        if let Some(c) = content {
            if tag_regex().is_match(c) {
                out.push(Violation::NestedTag {
                    tag: s.tag().to_string(),
                });
            }
        }
        if let Segment::CallTool(call) = s {
            match call.render() {
                Ok(r) if !tag_regex().is_match(&r) => {}
                _ => out.push(Violation::MalformedToolCall),
            }
        }
    }
    let items: Vec<Item> = segments.iter().cloned().map(Item::Seg).collect();
    out.extend(structural_violations(&items));
    dedup(&mut out);
    out
}

/// Parses model output in strict mode.
pub fn parse_trajectory(text: &str) -> Result<Trajectory, FormatReport> {
    parse_trajectory_with(text, ParseMode::Strict)
}

pub fn parse_trajectory_with(text: &str, mode: ParseMode) -> Result<Trajectory, FormatReport> {
    let scan = scan(text, mode);
    let mut violations = scan.violations;
    violations.extend(structural_violations(&scan.items));
    dedup(&mut violations);
    let segments: Vec<Segment> = scan.items.into_iter().filter_map(Item::into_segment).collect();
    if violations.is_empty() {
        Ok(Trajectory { segments })
    } else {
        let answer = first_answer(&segments);
        Err(FormatReport::from_violations(violations, answer))
    }
}

/// Canonical serialization: tags in segment order, no separators.
pub fn render_trajectory(t: &Trajectory) -> Result<String, RenderError> {
    let violations = check_segments(&t.segments);
    if !violations.is_empty() {
        return Err(RenderError(FormatReport::from_violations(
            violations,
            first_answer(&t.segments),
        )));
    }
    let mut out = String::new();
    for s in &t.segments {
        let tag = s.tag();
        let body = match s {
            Segment::Think(x)
            | Segment::Observation(x)
            | Segment::Location(x)
            | Segment::DefectType(x) => x.clone(),
            Segment::CallTool(c) => c.render().expect("checked above"),
            Segment::Answer(l) => l.as_str().to_string(),
        };
        out.push('<');
        out.push_str(tag);
        out.push('>');
        out.push_str(&body);
        out.push_str("</");
        out.push_str(tag);
        out.push('>');
    }
    Ok(out)
}
