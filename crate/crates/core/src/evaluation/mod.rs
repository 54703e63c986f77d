//! Image-level metrics, tool-usage statistics, dataset loading and the
//! category-disjoint training filter.

mod category;
mod dataset;
mod metrics;

pub use category::{
    category_disjoint_filter, normalize_category, CategoryNormalizer, DisjointSplit, Removal,
    DEFAULT_VARIANT_STEMS,
};
pub use dataset::{load_dataset, mask_to_bbox, LoadedDataset, Sample};
pub use metrics::{anomaly_recall, balanced_accuracy, f1, ConfusionCounts};

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::orchestrator::DiagnosisRecord;
use crate::trajectory::{BinaryLabel, ToolName};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("category name is empty")]
    EmptyCategory,
    #[error("test category set is empty")]
    EmptyTestSet,
    #[error("balanced accuracy needs at least one sample of each class")]
    EmptyClass,
    #[error("no usable images under {0}")]
    EmptyDataset(PathBuf),
    #[error("dataset root {0} does not exist")]
    MissingRoot(PathBuf),
    #[error("no records to summarize")]
    NoRecords,
    #[error("predictions line {line}: {msg}")]
    BadPrediction { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ToolStat {
    /// Fraction of records that invoke the tool at least once.
    pub frequency: f64,
    pub calls: u64,
    pub successes: u64,
    pub success_rate: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ToolUsageStats {
    pub records: u64,
    pub total_calls: u64,
    pub avg_calls: f64,
    /// Successful calls over all calls; `None` without calls.
    pub success_rate: Option<f64>,
    pub per_tool: BTreeMap<String, ToolStat>,
}

pub fn tool_usage_stats(records: &[DiagnosisRecord]) -> Result<ToolUsageStats, EvalError> {
    if records.is_empty() {
        return Err(EvalError::NoRecords);
    }
    let n = records.len() as f64;
    let mut stats = ToolUsageStats { records: records.len() as u64, ..Default::default() };
    let mut invoking: BTreeMap<ToolName, u64> = ToolName::ALL.iter().map(|t| (*t, 0)).collect();
    let mut per: BTreeMap<ToolName, ToolStat> = ToolName::ALL.iter().map(|t| (*t, ToolStat::default())).collect();
    let mut ok = 0u64;
    for r in records {
        let mut seen = Vec::new();
        for c in &r.tool_calls {
            let s = per.get_mut(&c.call.tool).expect("every tool has an entry");
            s.calls += 1;
            if c.success {
                s.successes += 1;
                ok += 1;
            }
            if !seen.contains(&c.call.tool) {
                seen.push(c.call.tool);
            }
            stats.total_calls += 1;
        }
        for t in seen {
            *invoking.get_mut(&t).unwrap() += 1;
        }
    }
    stats.avg_calls = stats.total_calls as f64 / n;
    stats.success_rate = (stats.total_calls > 0).then(|| ok as f64 / stats.total_calls as f64);
    for (tool, mut s) in per {
        s.frequency = invoking[&tool] as f64 / n;
        s.success_rate = (s.calls > 0).then(|| s.successes as f64 / s.calls as f64);
        stats.per_tool.insert(tool.as_str().to_string(), s);
    }
    Ok(stats)
}

/// One model verdict keyed by sample id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub answer: Option<BinaryLabel>,
}

/// Reads predictions from JSONL. Each line is either a diagnosis record
/// (`final.answer`) or a flat `{sample_id, answer}` object; `answer` may be
/// `null` or any loosely spelled Yes/No.
pub fn read_predictions(text: &str) -> Result<(Vec<Prediction>, Vec<DiagnosisRecord>), EvalError> {
    let mut preds = Vec::new();
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| EvalError::BadPrediction { line: i + 1, msg };
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let id = v
            .get("sample_id")
            .and_then(|s| s.as_str())
            .ok_or_else(|| bad("missing sample_id".into()))?
            .to_string();
        let raw = v.pointer("/final/answer").or_else(|| v.get("answer"));
        let answer = match raw {
            None | Some(serde_json::Value::Null) => None,
            Some(serde_json::Value::String(s)) => BinaryLabel::parse_loose(s),
            Some(other) => return Err(bad(format!("answer must be a string, got {other}"))),
        };
        if v.get("rounds").is_some() {
            let rec: DiagnosisRecord = serde_json::from_value(v).map_err(|e| bad(e.to_string()))?;
            records.push(rec);
        }
        preds.push(Prediction { sample_id: id, answer });
    }
    Ok((preds, records))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnparseablePolicy {
    /// Leave the sample out and count it.
    #[default]
    Exclude,
    /// Score it as a "No".
    AsNormal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub dataset: String,
    pub samples: u64,
    pub scored: u64,
    pub unparseable: u64,
    pub missing: u64,
    pub counts: ConfusionCounts,
    pub balanced_accuracy: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MacroAverage {
    pub balanced_accuracy: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub unparseable_policy: UnparseablePolicy,
    pub datasets: Vec<DatasetReport>,
    pub macro_average: MacroAverage,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tool_usage: Option<ToolUsageStats>,
}

fn mean_defined(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Scores predictions against one or more datasets. Samples without a
/// prediction count as `missing`.
pub fn evaluate(
    datasets: &[LoadedDataset],
    predictions: &[Prediction],
    policy: UnparseablePolicy,
) -> EvalReport {
    let by_id: HashMap<&str, Option<BinaryLabel>> =
        predictions.iter().map(|p| (p.sample_id.as_str(), p.answer)).collect();
    let mut reports = Vec::with_capacity(datasets.len());
    for ds in datasets {
        let mut r = DatasetReport {
            dataset: ds.name.clone(),
            samples: ds.samples.len() as u64,
            scored: 0,
            unparseable: 0,
            missing: 0,
            counts: ConfusionCounts::default(),
            balanced_accuracy: None,
            recall: None,
            f1: None,
        };
        for s in &ds.samples {
            let answer = match by_id.get(s.id.as_str()) {
                None => {
                    r.missing += 1;
                    continue;
                }
                Some(Some(a)) => *a,
                Some(None) => {
                    r.unparseable += 1;
                    match policy {
                        UnparseablePolicy::Exclude => continue,
                        UnparseablePolicy::AsNormal => BinaryLabel::No,
                    }
                }
            };
            r.counts.record(s.label, answer);
            r.scored += 1;
        }
        r.balanced_accuracy = balanced_accuracy(&r.counts).ok();
        r.recall = anomaly_recall(&r.counts);
        r.f1 = f1(&r.counts);
        reports.push(r);
    }
    let macro_average = MacroAverage {
        balanced_accuracy: mean_defined(reports.iter().map(|r| r.balanced_accuracy)),
        recall: mean_defined(reports.iter().map(|r| r.recall)),
        f1: mean_defined(reports.iter().map(|r| r.f1)),
    };
    EvalReport { unparseable_policy: policy, datasets: reports, macro_average, tool_usage: None }
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{:.1}", 100.0 * x))
}

/// Aligned plain-text rendering of a report.
pub fn render_table(report: &EvalReport) -> String {
    let header = ["dataset", "n", "scored", "unparsed", "missing", "bal.acc", "recall", "f1"];
    let mut rows: Vec<[String; 8]> = report
        .datasets
        .iter()
        .map(|r| {
            [
                r.dataset.clone(),
                r.samples.to_string(),
                r.scored.to_string(),
                r.unparseable.to_string(),
                r.missing.to_string(),
                pct(r.balanced_accuracy),
                pct(r.recall),
                pct(r.f1),
            ]
        })
        .collect();
    let m = &report.macro_average;
    rows.push([
        "macro-avg".into(),
        String::new(),
        String::new(),
        String::new(),
        String::new(),
        pct(m.balanced_accuracy),
        pct(m.recall),
        pct(m.f1),
    ]);
    let mut widths = header.map(str::len);
    for row in &rows {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &[&str]| {
        for (i, (c, w)) in cells.iter().zip(widths).enumerate() {
            if i == 0 {
                let _ = write!(out, "{c:<w$}");
            } else {
                let _ = write!(out, "  {c:>w$}");
            }
        }
        out.push('\n');
    };
    line(&mut out, &header);
    for row in &rows {
        line(&mut out, &row.iter().map(String::as_str).collect::<Vec<_>>());
    }
    if let Some(t) = &report.tool_usage {
        let _ = writeln!(
            out,
            "\ntool usage over {} records: {:.2} calls/query, success {}%",
            t.records,
            t.avg_calls,
            pct(t.success_rate)
        );
        for (name, s) in &t.per_tool {
            let _ = writeln!(out, "  {name:<8} used in {:>5.1}% of queries, {} calls", 100.0 * s.frequency, s.calls);
        }
    }
    out
}
