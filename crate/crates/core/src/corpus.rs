//! Teacher-driven trajectory construction, judge-based selection and SFT
//! export with loss-mask spans.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::evaluation::Sample;
use crate::gateway::{GatewayError, Policy, PolicyRequest};
use crate::imaging::{BBox, ImagingError, RasterImage};
use crate::orchestrator::prompts::{fill, training_prompt, JUDGE_RUBRIC, STAGE1_DESCRIPTION, STAGE2_FORMATTING};
use crate::rewards::iou;
use crate::trajectory::{parse_trajectory, render_trajectory, BinaryLabel, Segment, Trajectory};

/// Substring that marks a supervision block from the construction prompts.
pub const SUPERVISION_MARKER: &str = "Ground-truth supervision";

/// Words a training target must not contain.
const LEAK_WORDS: &[&str] = &["ground-truth", "ground truth", "annotation", "annotated", "supervision"];

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("teacher: {0}")]
    Teacher(#[from] GatewayError),
    #[error("loading {path}: {source}")]
    Image { path: PathBuf, source: ImagingError },
    #[error(transparent)]
    Encode(#[from] ImagingError),
    #[error("record {0} is rejected and cannot be exported")]
    RejectedInExport(String),
    #[error("record {id}: {msg}")]
    BadRecord { id: String, msg: String },
    #[error("export line {0} contains supervision text")]
    Leakage(String),
    #[error("building worker pool: {0}")]
    Pool(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Teacher attempts per sample, repairs included.
    pub max_attempts: u32,
    /// Valid candidates to collect before judging.
    pub candidates: u32,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Target corpus size; `corpus build` stops after this many samples.
    pub target_size: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            max_attempts: 3,
            candidates: 1,
            temperature: 0.7,
            max_tokens: 2048,
            target_size: 3000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CotStatus {
    Valid,
    Repaired,
    Rejected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    /// Empty when the candidate passed every check.
    pub problems: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub judge_score: Option<f64>,
}

impl Candidate {
    pub fn is_valid(&self) -> bool {
        self.problems.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CotRecord {
    pub sample: Sample,
    pub stage1_description: String,
    /// Canonical rendering of the retained trajectory; the last candidate's
    /// raw text when rejected.
    pub trajectory: String,
    pub judge_score: Option<f64>,
    pub attempts: u32,
    pub status: CotStatus,
    /// Problems of the final candidate when rejected.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub problems: Vec<String>,
    #[serde(default)]
    pub candidates: Vec<Candidate>,
}

fn location_text(b: Option<BBox>) -> String {
    b.map_or_else(|| "N/A".to_string(), |b| b.to_string())
}

pub fn stage1_prompt(sample: &Sample) -> String {
    let label = if sample.label.is_anomalous() { "abnormal" } else { "normal" };
    fill(
        STAGE1_DESCRIPTION,
        &[
            ("{CATEGORY}", &sample.category),
            ("{VIEW_ID}", &sample.view),
            ("{normal or abnormal}", label),
            ("{LOCATION or N/A}", &location_text(sample.gt_box)),
            ("{ANOMALY_TYPE or N/A}", sample.gt_type.as_deref().unwrap_or("N/A")),
        ],
    )
}

pub fn stage2_prompt(sample: &Sample, description: &str) -> String {
    let body = fill(
        STAGE2_FORMATTING,
        &[
            ("{Yes or No}", sample.label.as_str()),
            ("{LOCATION or N/A}", &location_text(sample.gt_box)),
            ("{ANOMALY_TYPE or N/A}", sample.gt_type.as_deref().unwrap_or("N/A")),
        ],
    );
    format!("{body}\n\nDetailed description:\n{description}")
}

fn repair_prompt(base: &str, problems: &[String]) -> String {
    let list: Vec<String> = problems.iter().map(|p| format!("- {p}")).collect();
    format!(
        "{base}\n\nYour previous output was rejected for these reasons:\n{}\nRewrite the trajectory so that it satisfies every output rule.",
        list.join("\n")
    )
}

pub fn judge_prompt(sample: &Sample, trajectory: &str) -> String {
    fill(
        JUDGE_RUBRIC,
        &[("{CATEGORY}", &sample.category), ("{LABEL}", sample.label.as_str()), ("{TRAJECTORY}", trajectory)],
    )
}

/// First number in the reply, if it lies in [0, 1].
pub fn parse_judge_score(text: &str) -> Option<f64> {
    let re = Regex::new(r"\d+(?:\.\d+)?|\.\d+").expect("static regex");
    let v: f64 = re.find(text)?.as_str().parse().ok()?;
    (0.0..=1.0).contains(&v).then_some(v)
}

fn leak_word(text: &str) -> Option<&'static str> {
    let lower = text.to_lowercase();
    LEAK_WORDS.iter().copied().find(|w| lower.contains(w))
}

/// Grammar, label and annotation consistency checks on one teacher reply.
/// Returns the canonical text when the candidate passes.
pub fn check_candidate(sample: &Sample, text: &str) -> Result<(Trajectory, String), Vec<String>> {
    let traj = parse_trajectory(text).map_err(|r| r.violations.iter().map(|v| format!("format: {}", v.code())).collect::<Vec<_>>())?;
    let mut problems = Vec::new();
    if traj.answer() != sample.label {
        problems.push(format!(
            "label: the final answer is {} but must be {}",
            traj.answer(),
            sample.label
        ));
    }
    if let (Some(gt), Some(loc)) = (sample.gt_box, traj.location()) {
        if let Some(pred) = BBox::find_in_text(loc) {
            if iou(&pred, &gt) == 0.0 {
                problems.push(format!("location: {pred} does not overlap the anomalous region"));
            }
        }
    }
    if let Some(w) = leak_word(text) {
        problems.push(format!("leakage: the trajectory mentions {w:?}"));
    }
    if !problems.is_empty() {
        return Err(problems);
    }
    let canonical = render_trajectory(&traj).map_err(|e| vec![format!("render: {e}")])?;
    Ok((traj, canonical))
}

pub struct CorpusBuilder<'a> {
    pub teacher: &'a dyn Policy,
    pub judge: Option<&'a dyn Policy>,
    pub config: &'a CorpusConfig,
}

impl<'a> CorpusBuilder<'a> {
    fn request(&self, session: &str, prompt: String, image_b64: &str) -> PolicyRequest {
        let mut r = PolicyRequest::new(session, prompt).with_images(vec![image_b64.to_string()]);
        r.temperature = self.config.temperature;
        r.max_tokens = self.config.max_tokens;
        r
    }

    /// Stage one then stage two, followed by [`Self::judge_and_repair`].
    pub fn build_trajectory(&self, sample: &Sample, image_b64: &str) -> Result<CotRecord, CorpusError> {
        let description = self
            .teacher
            .complete(&self.request(&sample.id, stage1_prompt(sample), image_b64))?
            .text;
        let record = CotRecord {
            sample: sample.clone(),
            stage1_description: description,
            trajectory: String::new(),
            judge_score: None,
            attempts: 0,
            status: CotStatus::Rejected,
            problems: Vec::new(),
            candidates: Vec::new(),
        };
        self.judge_and_repair(record, image_b64)
    }

    /// Collects up to `candidates` valid replies within `max_attempts`,
    /// re-prompting with the problem list after each invalid one, then keeps
    /// the best judged candidate (first on ties, first valid if the judge is
    /// unavailable).
    pub fn judge_and_repair(&self, mut record: CotRecord, image_b64: &str) -> Result<CotRecord, CorpusError> {
        let sample = record.sample.clone();
        let base = stage2_prompt(&sample, &record.stage1_description);
        let want = self.config.candidates.max(1) as usize;
        let mut valid: Vec<(usize, String)> = Vec::new();
        let mut repaired = false;
        let mut last_problems: Vec<String> = Vec::new();
        while record.attempts < self.config.max_attempts.max(1) && valid.len() < want {
            let prompt = if last_problems.is_empty() { base.clone() } else { repair_prompt(&base, &last_problems) };
            if !last_problems.is_empty() {
                repaired = true;
            }
            let text = self.teacher.complete(&self.request(&sample.id, prompt, image_b64))?.text;
            record.attempts += 1;
            match check_candidate(&sample, &text) {
                Ok((_, canonical)) => {
                    valid.push((record.candidates.len(), canonical));
                    record.candidates.push(Candidate { text, problems: Vec::new(), judge_score: None });
                    last_problems.clear();
                }
                Err(problems) => {
                    last_problems = problems.clone();
                    record.candidates.push(Candidate { text, problems, judge_score: None });
                }
            }
        }

        if valid.is_empty() {
            record.status = CotStatus::Rejected;
            record.problems = last_problems;
            record.trajectory = record.candidates.last().map(|c| c.text.clone()).unwrap_or_default();
            return Ok(record);
        }

        let mut best: Option<(usize, f64)> = None;
        if let Some(judge) = self.judge {
            for (slot, (ci, canonical)) in valid.iter().enumerate() {
                let session = format!("{}#judge", sample.id);
                let score = match judge.complete(&PolicyRequest::new(session, judge_prompt(&sample, canonical))) {
                    Ok(r) => parse_judge_score(&r.text),
                    Err(e) => {
                        log::warn!("judge unavailable for {}: {e}", sample.id);
                        None
                    }
                };
                record.candidates[*ci].judge_score = score;
                if let Some(s) = score {
                    if best.is_none_or(|(_, b)| s > b) {
                        best = Some((slot, s));
                    }
                }
            }
        }
        let (slot, score) = best.map_or((0, None), |(i, s)| (i, Some(s)));
        record.trajectory = valid[slot].1.clone();
        record.judge_score = score;
        record.status = if repaired { CotStatus::Repaired } else { CotStatus::Valid };
        Ok(record)
    }

    /// Builds records for every sample on `jobs` workers, in input order.
    pub fn build_all(&self, samples: &[Sample], jobs: usize) -> Result<Vec<Result<CotRecord, CorpusError>>, CorpusError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
            .map_err(|e| CorpusError::Pool(e.to_string()))?;
        Ok(pool.install(|| {
            samples
                .par_iter()
                .map(|s| {
                    let img = RasterImage::load_png(&s.path)
                        .map_err(|source| CorpusError::Image { path: s.path.clone(), source })?;
                    let b64 = base64::Engine::encode(&base64::engine::general_purpose::STANDARD, img.to_png_bytes()?);
                    self.build_trajectory(s, &b64)
                })
                .collect()
        }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanKind {
    /// Model-generated text; contributes to the loss.
    Supervised,
    /// Tool-returned text; excluded from the loss.
    Masked,
}

/// Half-open range of character (not byte) offsets into `target_text`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossSpan {
    pub start: usize,
    pub end: usize,
    pub kind: SpanKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftLine {
    pub id: String,
    pub images: Vec<String>,
    pub instruction: String,
    pub target_text: String,
    pub loss_spans: Vec<LossSpan>,
}

/// Spans covering `target` exactly: observation contents are masked,
/// everything else (tags included) is supervised.
pub fn loss_spans(traj: &Trajectory) -> Vec<LossSpan> {
    let mut spans: Vec<LossSpan> = Vec::new();
    let mut pos = 0usize;
    let mut push = |spans: &mut Vec<LossSpan>, len: usize, kind: SpanKind| {
        if len == 0 {
            return;
        }
        match spans.last_mut() {
            Some(last) if last.kind == kind => last.end += len,
            _ => spans.push(LossSpan { start: pos, end: pos + len, kind }),
        }
        pos += len;
    };
    for seg in traj.segments() {
        let tag = seg.tag();
        let content = segment_content(seg);
        let open = tag.len() + 2;
        let close = tag.len() + 3;
        if let Segment::Observation(_) = seg {
            push(&mut spans, open, SpanKind::Supervised);
            push(&mut spans, content.chars().count(), SpanKind::Masked);
            push(&mut spans, close, SpanKind::Supervised);
        } else {
            push(&mut spans, open + content.chars().count() + close, SpanKind::Supervised);
        }
    }
    spans
}

fn segment_content(seg: &Segment) -> String {
    match seg {
        Segment::Think(s) | Segment::Observation(s) | Segment::Location(s) | Segment::DefectType(s) => s.clone(),
        Segment::CallTool(c) => c.render().unwrap_or_default(),
        Segment::Answer(a) => a.as_str().to_string(),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportOptions {
    /// Downsample the majority label to the minority count.
    pub balance: bool,
    pub seed: u64,
}

pub fn question_for(sample: &Sample) -> String {
    format!("Product category: {}. Is there any anomaly in the query image?", sample.category)
}

/// Converts valid or repaired records to SFT lines. Deterministic for a
/// given `(records, seed)`.
pub fn export_sft(records: &[CotRecord], opts: ExportOptions) -> Result<Vec<SftLine>, CorpusError> {
    let mut lines = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    for r in records {
        if r.status == CotStatus::Rejected {
            return Err(CorpusError::RejectedInExport(r.sample.id.clone()));
        }
        let bad = |msg: String| CorpusError::BadRecord { id: r.sample.id.clone(), msg };
        let traj = parse_trajectory(&r.trajectory).map_err(|e| bad(e.summary()))?;
        if traj.answer() != r.sample.label {
            return Err(bad(format!("answer {} disagrees with label {}", traj.answer(), r.sample.label)));
        }
        let target_text = render_trajectory(&traj).map_err(|e| bad(e.to_string()))?;
        let line = SftLine {
            id: r.sample.id.clone(),
            images: vec![r.sample.path.display().to_string()],
            instruction: training_prompt(&question_for(&r.sample)),
            loss_spans: loss_spans(&traj),
            target_text,
        };
        if line.target_text.contains(SUPERVISION_MARKER) || line.instruction.contains(SUPERVISION_MARKER) {
            return Err(CorpusError::Leakage(line.id));
        }
        labels.push(r.sample.label);
        lines.push(line);
    }
    if !opts.balance {
        return Ok(lines);
    }
    let (yes, no): (Vec<usize>, Vec<usize>) = (0..lines.len()).partition(|&i| labels[i] == BinaryLabel::Yes);
    let keep_n = yes.len().min(no.len());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut keep: Vec<usize> = Vec::with_capacity(2 * keep_n);
    for mut group in [yes, no] {
        group.shuffle(&mut rng);
        group.truncate(keep_n);
        keep.extend(group);
    }
    keep.sort_unstable();
    let mut lines: Vec<Option<SftLine>> = lines.into_iter().map(Some).collect();
    Ok(keep.into_iter().filter_map(|i| lines[i].take()).collect())
}
