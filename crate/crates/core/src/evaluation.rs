//! Scoring of predictions against gold labels.
//!
//! Per-label F1 is undefined when a label has no gold positives or no
//! predicted positives among the scored pairs. Undefined labels are left
//! out of the macro average and rendered as `-` in reports.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::corpus::{Corpus, Partition};
use crate::orchestrator::PredictionRow;
use crate::prompting::Strategy;
use crate::taxonomy::{LabelId, Taxonomy};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0}")]
    Validation(String),
    #[error("corpus has no gold labels")]
    MissingGold,
    #[error("invalid summary CSV: {0}")]
    Summary(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn record(&mut self, predicted: bool, gold: bool) {
        match (predicted, gold) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn precision(&self) -> Option<f64> {
        let denom = self.tp + self.fp;
        (denom > 0).then(|| self.tp as f64 / denom as f64)
    }

    pub fn recall(&self) -> Option<f64> {
        let denom = self.tp + self.fn_;
        (denom > 0).then(|| self.tp as f64 / denom as f64)
    }
}

/// F1 of one label, `None` when precision or recall is undefined.
pub fn label_f1(c: &ConfusionCounts) -> Option<f64> {
    let p = c.precision()?;
    let r = c.recall()?;
    if p + r == 0.0 {
        Some(0.0)
    } else {
        Some(2.0 * p * r / (p + r))
    }
}

fn macro_mean(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.into_iter().flatten().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelScore {
    pub label: LabelId,
    pub f1: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub counts: ConfusionCounts,
}

impl LabelScore {
    fn from_counts(label: LabelId, counts: ConfusionCounts) -> Self {
        LabelScore {
            label,
            f1: label_f1(&counts),
            precision: counts.precision(),
            recall: counts.recall(),
            counts,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum FailedPolicy {
    /// Failed passages contribute no pairs.
    #[default]
    Exclude,
    /// Failed passages are scored as if every label were predicted absent.
    AllNegative,
}

impl std::str::FromStr for FailedPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exclude" => Ok(FailedPolicy::Exclude),
            "all-negative" => Ok(FailedPolicy::AllNegative),
            other => Err(format!("unknown failed policy {other:?}; expected exclude or all-negative")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub strategy: Option<Strategy>,
    pub model: Option<String>,
    pub temperature: Option<f64>,
    pub failed_policy: FailedPolicy,
    pub per_label: Vec<LabelScore>,
    pub macro_f1: Option<f64>,
    pub easy_f1: Option<f64>,
    pub noneasy_f1: Option<f64>,
    pub passages: usize,
    pub scored_passages: usize,
    pub failure_rate: f64,
    pub mean_cost_per_passage: f64,
    pub warnings: Vec<String>,
}

/// Scores `predictions` against the gold labels of `gold`.
pub fn score(
    predictions: &[PredictionRow],
    gold: &Corpus,
    taxonomy: &Taxonomy,
    policy: FailedPolicy,
) -> Result<EvaluationReport, EvalError> {
    if gold.gold.is_none() {
        return Err(EvalError::MissingGold);
    }
    let labels = taxonomy.label_ids();
    let mut seen = HashSet::new();
    let mut overall: BTreeMap<&LabelId, ConfusionCounts> = BTreeMap::new();
    let mut easy: BTreeMap<&LabelId, ConfusionCounts> = BTreeMap::new();
    let mut noneasy: BTreeMap<&LabelId, ConfusionCounts> = BTreeMap::new();
    let mut scored_passages = 0;
    let mut warnings = Vec::new();

    for row in predictions {
        let g = gold.gold_for(&row.passage_id).ok_or_else(|| {
            EvalError::Validation(format!("prediction for unknown passage {}", row.passage_id))
        })?;
        if !seen.insert(row.passage_id.as_str()) {
            return Err(EvalError::Validation(format!(
                "duplicate prediction for passage {}",
                row.passage_id
            )));
        }
        let predicted = match (&row.labels, row.failed, policy) {
            (_, true, FailedPolicy::Exclude) => continue,
            (_, true, FailedPolicy::AllNegative) => None,
            (Some(map), false, _) => Some(map),
            (None, false, _) => {
                return Err(EvalError::Validation(format!(
                    "passage {} is not failed but has no labels",
                    row.passage_id
                )))
            }
        };
        scored_passages += 1;
        for label in &labels {
            let p = match predicted {
                Some(map) => *map.get(label).ok_or_else(|| {
                    EvalError::Validation(format!(
                        "prediction for {} lacks label {label}",
                        row.passage_id
                    ))
                })?,
                None => false,
            };
            let truth = g.labels[label];
            overall.entry(label).or_default().record(p, truth);
            let bucket = match g.partition_of(label).expect("gold covers taxonomy") {
                Partition::Easy => &mut easy,
                Partition::NonEasy => &mut noneasy,
            };
            bucket.entry(label).or_default().record(p, truth);
        }
    }

    let per_label: Vec<LabelScore> = labels
        .iter()
        .map(|l| LabelScore::from_counts(l.clone(), overall.get(l).copied().unwrap_or_default()))
        .collect();
    let partition_macro = |m: &BTreeMap<&LabelId, ConfusionCounts>| {
        macro_mean(labels.iter().map(|l| m.get(l).and_then(label_f1)))
    };
    let macro_f1 = macro_mean(per_label.iter().map(|s| s.f1));
    if macro_f1.is_none() {
        let msg = "no label has a defined F1; macro F1 is undefined".to_string();
        warn!("{msg}");
        warnings.push(msg);
    }

    let n = predictions.len();
    let failed = predictions.iter().filter(|r| r.failed).count();
    let total_cost: f64 = predictions.iter().map(|r| r.cost_usd).sum();
    let first = predictions.first();
    Ok(EvaluationReport {
        strategy: first.map(|r| r.strategy),
        model: first.map(|r| r.model.clone()),
        temperature: first.map(|r| r.temperature),
        failed_policy: policy,
        per_label,
        macro_f1,
        easy_f1: partition_macro(&easy),
        noneasy_f1: partition_macro(&noneasy),
        passages: n,
        scored_passages,
        failure_rate: if n == 0 { 0.0 } else { failed as f64 / n as f64 },
        mean_cost_per_passage: if n == 0 { 0.0 } else { total_cost / n as f64 },
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub system_id: String,
    pub cost: f64,
    pub f1: f64,
}

/// Points not dominated by any other point, sorted by cost. A point is
/// dominated when another is no more expensive and no less accurate, and
/// strictly better on at least one of the two. Exact ties all survive.
pub fn pareto_frontier(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    let mut sorted: Vec<&ParetoPoint> = points.iter().collect();
    sorted.sort_by(|a, b| {
        a.cost
            .total_cmp(&b.cost)
            .then(b.f1.total_cmp(&a.f1))
            .then_with(|| a.system_id.cmp(&b.system_id))
    });
    let mut frontier = Vec::new();
    let mut best_cheaper = f64::NEG_INFINITY;
    let mut i = 0;
    while i < sorted.len() {
        let cost = sorted[i].cost;
        let group_best = sorted[i].f1;
        let mut j = i;
        while j < sorted.len() && sorted[j].cost == cost {
            let p = sorted[j];
            if p.f1 == group_best && group_best > best_cheaper {
                frontier.push(p.clone());
            }
            j += 1;
        }
        best_cheaper = best_cheaper.max(group_best);
        i = j;
    }
    frontier
}

/// One row of the cross-run summary CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: String,
    pub model: String,
    pub macro_f1: Option<f64>,
    pub easy_f1: Option<f64>,
    pub noneasy_f1: Option<f64>,
    pub failure_rate: f64,
    pub mean_cost: f64,
}

impl SummaryRow {
    pub fn from_report(r: &EvaluationReport) -> Self {
        SummaryRow {
            strategy: r.strategy.map(|s| s.to_string()).unwrap_or_default(),
            model: r.model.clone().unwrap_or_default(),
            macro_f1: r.macro_f1,
            easy_f1: r.easy_f1,
            noneasy_f1: r.noneasy_f1,
            failure_rate: r.failure_rate,
            mean_cost: r.mean_cost_per_passage,
        }
    }

    pub fn system_id(&self) -> String {
        format!("{}/{}", self.model, self.strategy)
    }

    /// `None` when macro F1 is undefined; such rows cannot be placed.
    pub fn pareto_point(&self) -> Option<ParetoPoint> {
        Some(ParetoPoint {
            system_id: self.system_id(),
            cost: self.mean_cost,
            f1: self.macro_f1?,
        })
    }
}

pub fn fmt_score(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".to_string())
}

pub const SUMMARY_HEADER: &str = "strategy,model,macro_f1,easy_f1,noneasy_f1,failure_rate,mean_cost";

/// Per-label F1 in taxonomy order followed by the macro mean.
pub fn per_label_csv(report: &EvaluationReport) -> String {
    let mut out = String::from("label,f1\n");
    for s in &report.per_label {
        writeln!(out, "{},{}", s.label, fmt_score(s.f1)).unwrap();
    }
    writeln!(out, "mean,{}", fmt_score(report.macro_f1)).unwrap();
    out
}

/// Summary CSV. With a frontier, an extra `pareto` column marks members.
pub fn summary_csv(rows: &[SummaryRow], frontier: Option<&[ParetoPoint]>) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    if frontier.is_some() {
        out.push_str(",pareto");
    }
    out.push('\n');
    for row in rows {
        write!(
            out,
            "{},{},{},{},{},{:.4},{:.4}",
            row.strategy,
            row.model,
            fmt_score(row.macro_f1),
            fmt_score(row.easy_f1),
            fmt_score(row.noneasy_f1),
            row.failure_rate,
            row.mean_cost
        )
        .unwrap();
        if let Some(front) = frontier {
            let id = row.system_id();
            let member = front.iter().any(|p| {
                p.system_id == id && Some(p.f1) == row.macro_f1 && p.cost == row.mean_cost
            });
            write!(out, ",{member}").unwrap();
        }
        out.push('\n');
    }
    out
}

fn parse_score(field: &str, name: &str) -> Result<Option<f64>, EvalError> {
    match field.trim() {
        "-" | "" => Ok(None),
        s => s
            .parse()
            .map(Some)
            .map_err(|_| EvalError::Summary(format!("bad {name} value {s:?}"))),
    }
}

/// Reads rows written by [`summary_csv`]; an optional `pareto` column is ignored.
pub fn read_summary_csv(text: &str) -> Result<Vec<SummaryRow>, EvalError> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| EvalError::Summary(e.to_string()))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| EvalError::Summary(format!("missing column {name}")))
    };
    let idx = [
        col("strategy")?,
        col("model")?,
        col("macro_f1")?,
        col("easy_f1")?,
        col("noneasy_f1")?,
        col("failure_rate")?,
        col("mean_cost")?,
    ];
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| EvalError::Summary(e.to_string()))?;
        let get = |i: usize| record.get(idx[i]).unwrap_or("");
        let number = |i: usize, name: &str| {
            parse_score(get(i), name)?.ok_or_else(|| EvalError::Summary(format!("{name} is required")))
        };
        rows.push(SummaryRow {
            strategy: get(0).to_string(),
            model: get(1).to_string(),
            macro_f1: parse_score(get(2), "macro_f1")?,
            easy_f1: parse_score(get(3), "easy_f1")?,
            noneasy_f1: parse_score(get(4), "noneasy_f1")?,
            failure_rate: number(5, "failure_rate")?,
            mean_cost: number(6, "mean_cost")?,
        });
    }
    Ok(rows)
}

pub fn markdown_summary(report: &EvaluationReport, taxonomy: &Taxonomy) -> String {
    let mut out = String::new();
    let strategy = report.strategy.map(|s| s.to_string()).unwrap_or_else(|| "-".into());
    let model = report.model.clone().unwrap_or_else(|| "-".into());
    writeln!(out, "# Evaluation: {model} / {strategy}\n").unwrap();
    writeln!(out, "| Metric | Value |\n|---|---|").unwrap();
    writeln!(out, "| Macro F1 | {} |", fmt_score(report.macro_f1)).unwrap();
    writeln!(out, "| Easy F1 | {} |", fmt_score(report.easy_f1)).unwrap();
    writeln!(out, "| Non-Easy F1 | {} |", fmt_score(report.noneasy_f1)).unwrap();
    writeln!(out, "| Failure rate | {:.4} |", report.failure_rate).unwrap();
    writeln!(out, "| Mean cost per passage (USD) | {:.4} |", report.mean_cost_per_passage).unwrap();
    writeln!(out, "| Passages (scored / total) | {} / {} |", report.scored_passages, report.passages).unwrap();
    writeln!(out, "\n| Label | Concern | F1 |\n|---|---|---|").unwrap();
    for s in &report.per_label {
        let name = taxonomy.node(&s.label).map(|n| n.name.as_str()).unwrap_or("");
        let indent = if s.label.is_parent() { "" } else { "&nbsp;&nbsp;" };
        writeln!(out, "| {} | {indent}{name} | {} |", s.label, fmt_score(s.f1)).unwrap();
    }
    writeln!(out, "| **Mean** | | **{}** |", fmt_score(report.macro_f1)).unwrap();
    out
}

#[derive(Debug, Clone)]
pub struct ReportPaths {
    pub per_label: PathBuf,
    pub summary: PathBuf,
    pub markdown: PathBuf,
}

/// Writes `per_label.csv`, `summary.csv` and `summary.md` into `dir`.
pub fn emit_report(
    report: &EvaluationReport,
    taxonomy: &Taxonomy,
    frontier: Option<&[ParetoPoint]>,
    dir: &Path,
) -> Result<ReportPaths, EvalError> {
    fs::create_dir_all(dir)?;
    let paths = ReportPaths {
        per_label: dir.join("per_label.csv"),
        summary: dir.join("summary.csv"),
        markdown: dir.join("summary.md"),
    };
    fs::write(&paths.per_label, per_label_csv(report))?;
    fs::write(
        &paths.summary,
        summary_csv(&[SummaryRow::from_report(report)], frontier),
    )?;
    fs::write(&paths.markdown, markdown_summary(report, taxonomy))?;
    Ok(paths)
}
