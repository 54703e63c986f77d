//! Two-round tool-augmented inference.
//!
//! Round one asks for a routing decision. When tools are requested they run
//! serially in the requested order, their results are fused into the
//! round-two prompt, and round two produces the tagged verdict.

pub mod prompts;
mod tools;

pub use prompts::{fuse_context, FusedContext, ToolOutcome};
pub use tools::{dispatch_tool, points_in_text, Observation, ToolEnv, ToolError, ToolSettings};

use std::path::PathBuf;
use std::time::Instant;

use base64::Engine;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::gateway::{answer_logprobs, GatewayError, Policy, PolicyRequest};
use crate::imaging::{BBox, ImagingError, RasterImage};
use crate::priors::PriorSource;
use crate::rewards::MarginPair;
use crate::trajectory::{
    parse_baseline_answer, parse_routing, parse_trajectory_with, ArgValue, BinaryLabel, ParseMode,
    RoutingDecision, ToolCall, ToolName, Violation,
};

#[derive(Debug, thiserror::Error)]
pub enum OrchestratorError {
    #[error("loading {path}: {source}")]
    Image { path: PathBuf, source: ImagingError },
    #[error(transparent)]
    Encode(#[from] ImagingError),
    #[error("policy: {0}")]
    Policy(#[from] GatewayError),
    #[error("building worker pool: {0}")]
    Pool(String),
}

/// What to do when round one asks for no tools.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoneRoute {
    /// Take the preliminary answer; one round total.
    #[default]
    Preliminary,
    /// Ask again with the single-shot decision prompt.
    Baseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub temperature: f64,
    pub max_tokens: u32,
    /// Request answer logprobs and run the no-tool probe pass.
    pub want_logprobs: bool,
    pub none_route: NoneRoute,
    pub tools: ToolSettings,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            temperature: 0.0,
            max_tokens: 1024,
            want_logprobs: true,
            none_route: NoneRoute::Preliminary,
            tools: ToolSettings::default(),
        }
    }
}

/// Identity of the sample being diagnosed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRef {
    pub id: String,
    pub path: PathBuf,
    pub category: String,
    pub view: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParsedRound {
    Routing(RoutingDecision),
    Decision {
        #[serde(skip_serializing_if = "Option::is_none")]
        answer: Option<BinaryLabel>,
        #[serde(skip_serializing_if = "Option::is_none")]
        location: Option<String>,
        #[serde(rename = "type", skip_serializing_if = "Option::is_none")]
        defect_type: Option<String>,
        /// Strict-grammar findings; empty when the output is well formed.
        violations: Vec<Violation>,
    },
    Unparseable {
        violations: Vec<Violation>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Round {
    pub prompt: String,
    pub raw_response: String,
    pub parsed: ParsedRound,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToolInvocation {
    pub call: ToolCall,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub observation: Option<Observation>,
    pub success: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinalAnswer {
    /// `None` when no round produced a readable verdict.
    pub answer: Option<BinaryLabel>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub location: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
    #[serde(rename = "type", skip_serializing_if = "Option::is_none")]
    pub defect_type: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub round1_ms: f64,
    pub tools_ms: f64,
    pub probe_ms: f64,
    pub round2_ms: f64,
    pub total_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisRecord {
    pub sample_id: String,
    pub rounds: Vec<Round>,
    pub tool_calls: Vec<ToolInvocation>,
    #[serde(rename = "final")]
    pub final_answer: FinalAnswer,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub margins: Option<MarginPair>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    pub timing: Timing,
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1000.0
}

fn b64_png(img: &RasterImage) -> Result<String, ImagingError> {
    Ok(base64::engine::general_purpose::STANDARD.encode(img.to_png_bytes()?))
}

/// Reads a tagged decision leniently; falls back to the keyword parser.
fn parse_decision(text: &str) -> (ParsedRound, FinalAnswer) {
    let strict = parse_trajectory_with(text, ParseMode::Strict).err().map(|r| r.violations).unwrap_or_default();
    match parse_trajectory_with(text, ParseMode::Lenient) {
        Ok(t) => {
            let location = t.location().map(str::to_string);
            let defect_type = t.defect_type().map(str::to_string);
            let fin = FinalAnswer {
                answer: Some(t.answer()),
                bbox: location.as_deref().and_then(BBox::find_in_text),
                location: location.clone(),
                defect_type: defect_type.clone(),
            };
            (
                ParsedRound::Decision { answer: Some(t.answer()), location, defect_type, violations: strict },
                fin,
            )
        }
        Err(report) => match parse_baseline_answer(text).label() {
            Some(l) => (
                ParsedRound::Decision { answer: Some(l), location: None, defect_type: None, violations: strict },
                FinalAnswer { answer: Some(l), ..Default::default() },
            ),
            None => (ParsedRound::Unparseable { violations: report.violations }, FinalAnswer::default()),
        },
    }
}

/// Builds the call for a routed tool. Crop gets the box written in the
/// tool target when there is one.
fn routed_call(tool: ToolName, d: &RoutingDecision) -> ToolCall {
    let mut call = ToolCall::new(tool);
    let target = d.tool_target.trim();
    let has_target = !target.is_empty() && !target.eq_ignore_ascii_case("none");
    match tool {
        ToolName::Crop => {
            if let Some(b) = BBox::find_in_text(target) {
                for (k, v) in [("x0", b.x0), ("y0", b.y0), ("x1", b.x1), ("y1", b.y1)] {
                    call = call.with_arg(k, ArgValue::Number(v as f64));
                }
            } else if has_target {
                call = call.with_arg("query", ArgValue::Text(target.to_string()));
            }
        }
        ToolName::Measure if has_target => {
            call = call.with_arg("query", ArgValue::Text(target.to_string()));
        }
        _ => {}
    }
    call
}

pub struct Orchestrator<'a> {
    pub policy: &'a dyn Policy,
    pub priors: Option<&'a dyn PriorSource>,
    pub config: &'a InferenceConfig,
}

impl<'a> Orchestrator<'a> {
    pub fn new(policy: &'a dyn Policy, priors: Option<&'a dyn PriorSource>, config: &'a InferenceConfig) -> Self {
        Orchestrator { policy, priors, config }
    }

    fn request(&self, session: &str, prompt: String, images: Vec<String>, logprobs: bool) -> PolicyRequest {
        let mut r = PolicyRequest::new(session, prompt).with_images(images).with_logprobs(logprobs);
        r.temperature = self.config.temperature;
        r.max_tokens = self.config.max_tokens;
        r
    }

    /// Diagnoses one image. Tool failures are recorded and never abort the
    /// run; policy failures do.
    pub fn run_inference(&self, image: &RasterImage, sample: &SampleRef) -> Result<DiagnosisRecord, OrchestratorError> {
        let started = Instant::now();
        let query_png = b64_png(image)?;
        let mut rec = DiagnosisRecord {
            sample_id: sample.id.clone(),
            rounds: Vec::with_capacity(2),
            tool_calls: Vec::new(),
            final_answer: FinalAnswer::default(),
            margins: None,
            notes: Vec::new(),
            timing: Timing::default(),
        };

        let t = Instant::now();
        let prompt1 = prompts::ROUND1_ROUTING.to_string();
        let resp1 = self.policy.complete(&self.request(&sample.id, prompt1.clone(), vec![query_png.clone()], false))?;
        rec.timing.round1_ms = ms_since(t);

        let decision = match parse_routing(&resp1.text) {
            Ok(d) => {
                rec.rounds.push(Round {
                    prompt: prompt1,
                    raw_response: resp1.text,
                    parsed: ParsedRound::Routing(d.clone()),
                    wall_ms: rec.timing.round1_ms,
                });
                d
            }
            Err(report) => {
                rec.notes.push(format!("protocol violation: round-one output unparseable ({})", report.summary()));
                rec.rounds.push(Round {
                    prompt: prompt1,
                    raw_response: resp1.text,
                    parsed: ParsedRound::Unparseable { violations: report.violations },
                    wall_ms: rec.timing.round1_ms,
                });
                self.decide_directly(&mut rec, &sample.id, &query_png)?;
                rec.timing.total_ms = ms_since(started);
                return Ok(rec);
            }
        };

        if decision.needs_no_tools() {
            match self.config.none_route {
                NoneRoute::Preliminary => {
                    rec.final_answer.answer = Some(decision.preliminary);
                }
                NoneRoute::Baseline => {
                    // Replaces the routing round so the record keeps one decision round.
                    rec.rounds.clear();
                    self.decide_directly(&mut rec, &sample.id, &query_png)?;
                }
            }
            rec.timing.total_ms = ms_since(started);
            return Ok(rec);
        }

        let t = Instant::now();
        let env = ToolEnv {
            category: &sample.category,
            view: &sample.view,
            priors: self.priors,
            background: None,
            settings: &self.config.tools,
        };
        let mut focus: Option<RasterImage> = None;
        for &tool in &decision.needed_tools {
            let call = routed_call(tool, &decision);
            let tt = Instant::now();
            let target = match (tool, &focus) {
                (ToolName::Enhance, Some(f)) => f,
                _ => image,
            };
            let out = dispatch_tool(&call, target, &env);
            let wall_ms = ms_since(tt);
            match out {
                Ok(obs) => {
                    if tool == ToolName::Crop {
                        focus = obs.raster().cloned();
                    }
                    rec.tool_calls.push(ToolInvocation { call, observation: Some(obs), success: true, error: None, wall_ms });
                }
                Err(e) => {
                    rec.tool_calls.push(ToolInvocation {
                        call,
                        observation: None,
                        success: false,
                        error: Some(e.to_string()),
                        wall_ms,
                    });
                }
            }
        }
        rec.timing.tools_ms = ms_since(t);

        let outcomes: Vec<ToolOutcome<'_>> = rec
            .tool_calls
            .iter()
            .map(|inv| match (&inv.observation, &inv.error) {
                (Some(o), _) => ToolOutcome::Ok(o),
                (None, e) => ToolOutcome::Failed { tool: inv.call.tool.as_str(), error: e.as_deref().unwrap_or("failed") },
            })
            .collect();
        let fused = fuse_context(&outcomes);
        let mut images = vec![query_png.clone()];
        for a in &fused.attachments {
            images.push(b64_png(a)?);
        }

        let want = self.config.want_logprobs;
        let probe = if want {
            let t = Instant::now();
            let r = self.policy.complete(&self.request(&sample.id, prompts::round2_prompt(""), vec![query_png], true))?;
            rec.timing.probe_ms = ms_since(t);
            Some(answer_logprobs(&r))
        } else {
            None
        };

        let t = Instant::now();
        let prompt2 = prompts::round2_prompt(&fused.text);
        let resp2 = self.policy.complete(&self.request(&sample.id, prompt2.clone(), images, want))?;
        rec.timing.round2_ms = ms_since(t);
        let (parsed, fin) = parse_decision(&resp2.text);
        if let ParsedRound::Unparseable { .. } = parsed {
            rec.notes.push("round-two output unparseable".into());
        }
        rec.rounds.push(Round { prompt: prompt2, raw_response: resp2.text.clone(), parsed, wall_ms: rec.timing.round2_ms });
        rec.final_answer = fin;

        if let (Some(before), Some(label)) = (probe, rec.final_answer.answer) {
            let after = answer_logprobs(&resp2);
            match (before.margin_for(label), after.margin_for(label)) {
                (Some(b), Some(a)) => rec.margins = Some(MarginPair::new(b, a)),
                _ => rec.notes.push("answer logprobs unavailable; confidence change treated as 0".into()),
            }
        }
        rec.timing.total_ms = ms_since(started);
        Ok(rec)
    }

    fn decide_directly(&self, rec: &mut DiagnosisRecord, session: &str, query_png: &str) -> Result<(), OrchestratorError> {
        let t = Instant::now();
        let prompt = prompts::BASELINE_ZERO_SHOT.to_string();
        let resp = self.policy.complete(&self.request(session, prompt.clone(), vec![query_png.to_string()], false))?;
        let wall_ms = ms_since(t);
        rec.timing.round2_ms = wall_ms;
        let (parsed, fin) = parse_decision(&resp.text);
        if let ParsedRound::Unparseable { .. } = parsed {
            rec.notes.push("decision output unparseable".into());
        }
        rec.rounds.push(Round { prompt, raw_response: resp.text, parsed, wall_ms });
        rec.final_answer = fin;
        Ok(())
    }

    /// Runs every sample on a pool of `jobs` workers. Output order follows
    /// input order.
    pub fn run_batch(
        &self,
        samples: &[SampleRef],
        jobs: usize,
    ) -> Result<Vec<Result<DiagnosisRecord, OrchestratorError>>, OrchestratorError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
            .map_err(|e| OrchestratorError::Pool(e.to_string()))?;
        Ok(pool.install(|| {
            samples
                .par_iter()
                .map(|s| {
                    let img = RasterImage::load_png(&s.path)
                        .map_err(|source| OrchestratorError::Image { path: s.path.clone(), source })?;
                    self.run_inference(&img, s)
                })
                .collect()
        }))
    }
}

/// Drops every `*_ms` field, for comparing records across runs.
pub fn strip_timing(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(m) => {
            m.retain(|k, _| !k.ends_with("_ms"));
            m.values_mut().for_each(strip_timing);
        }
        serde_json::Value::Array(a) => a.iter_mut().for_each(strip_timing),
        _ => {}
    }
}
