//! Executes request plans against a backend and assembles fully labeled,
//! cost-accounted predictions.
//!
//! Requests inside a stage and passages inside a corpus run concurrently,
//! bounded by one semaphore shared across the whole run. Results are always
//! merged in plan and corpus order, so output never depends on completion
//! order.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::sync::Arc;

use futures::future::join_all;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;
use tracing::warn;

use crate::corpus::{Corpus, Passage};
use crate::llm_backend::{cost_of, BackendError, ChatBackend, ChatExchange, ConfigError, PriceSheet, TokenUsage};
use crate::prompting::{expand_stage, plan_requests, PromptError, PromptRequest, Strategy};
use crate::response_parsing::{parse_prediction, ParseFailureKind, ParsedPrediction};
use crate::taxonomy::{canonical_key, LabelId, Taxonomy};

pub const DEFAULT_MAX_RETRIES: u32 = 10;
pub const DEFAULT_CONCURRENCY: usize = 8;

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{0}")]
    Domain(String),
    #[error("predictions line {line}: {message}")]
    Predictions { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub strategy: Strategy,
    pub model: String,
    pub temperature: f64,
    pub max_retries: u32,
    pub with_demo: bool,
    pub concurrency_limit: usize,
    pub prices: PriceSheet,
}

impl RunConfig {
    pub fn new(strategy: Strategy, model: impl Into<String>, prices: PriceSheet) -> Self {
        RunConfig {
            strategy,
            model: model.into(),
            temperature: 0.0,
            max_retries: DEFAULT_MAX_RETRIES,
            with_demo: strategy.default_with_demo(),
            concurrency_limit: DEFAULT_CONCURRENCY,
            prices,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(ConfigError::Invalid(format!(
                "temperature must be a non-negative number, got {}",
                self.temperature
            )));
        }
        if self.concurrency_limit == 0 {
            return Err(ConfigError::Invalid("concurrency limit must be at least 1".into()));
        }
        if self.model.is_empty() {
            return Err(ConfigError::Invalid("model name is empty".into()));
        }
        if self.prices.get(&self.model).is_none() {
            return Err(ConfigError::UnknownModel(self.model.clone()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FailureKind {
    FormatError,
    IncompletePrediction,
    Backend,
}

impl From<ParseFailureKind> for FailureKind {
    fn from(kind: ParseFailureKind) -> Self {
        match kind {
            ParseFailureKind::FormatError => FailureKind::FormatError,
            ParseFailureKind::IncompletePrediction => FailureKind::IncompletePrediction,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PassOutcome {
    Parsed(ParsedPrediction),
    Failed,
}

/// One request of a plan, after all of its attempts.
#[derive(Debug, Clone, PartialEq)]
pub struct PassRecord {
    pub target_labels: Vec<LabelId>,
    pub attempts: u32,
    pub outcome: PassOutcome,
    /// Summed over every attempt, failed ones included.
    pub usage: TokenUsage,
    pub failure_kinds: Vec<FailureKind>,
}

impl PassRecord {
    pub fn failed(&self) -> bool {
        matches!(self.outcome, PassOutcome::Failed)
    }

    fn verdicts(&self) -> impl Iterator<Item = (LabelId, bool)> + '_ {
        let parsed = match &self.outcome {
            PassOutcome::Parsed(p) => Some(p),
            PassOutcome::Failed => None,
        };
        self.target_labels.iter().filter_map(move |id| {
            parsed.map(|p| (id.clone(), p.verdicts[&canonical_key(id)]))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PassageResult {
    pub passage_id: String,
    /// Every taxonomy label; `None` when the passage failed.
    pub labels: Option<BTreeMap<LabelId, bool>>,
    pub failed: bool,
    pub passes: usize,
    pub usage: TokenUsage,
    pub cost_usd: f64,
    pub records: Vec<PassRecord>,
}

impl PassageResult {
    pub fn attempts_total(&self) -> u64 {
        self.records.iter().map(|r| u64::from(r.attempts)).sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunTotals {
    pub passes: usize,
    pub attempts: u64,
    pub usage: TokenUsage,
    pub cost_usd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub config: RunConfig,
    pub results: Vec<PassageResult>,
    pub totals: RunTotals,
    pub failure_rate: f64,
}

impl RunResult {
    pub fn mean_passes(&self) -> f64 {
        if self.results.is_empty() {
            0.0
        } else {
            self.totals.passes as f64 / self.results.len() as f64
        }
    }

    pub fn mean_cost(&self) -> f64 {
        if self.results.is_empty() {
            0.0
        } else {
            self.totals.cost_usd / self.results.len() as f64
        }
    }

    pub fn rows(&self) -> Vec<PredictionRow> {
        self.results
            .iter()
            .map(|r| PredictionRow {
                passage_id: r.passage_id.clone(),
                strategy: self.config.strategy,
                model: self.config.model.clone(),
                temperature: self.config.temperature,
                failed: r.failed,
                passes: r.passes,
                input_tokens: r.usage.input_tokens,
                output_tokens: r.usage.output_tokens,
                cost_usd: r.cost_usd,
                labels: r.labels.clone(),
                attempts_total: r.attempts_total(),
            })
            .collect()
    }
}

/// One line of the predictions JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub passage_id: String,
    pub strategy: Strategy,
    pub model: String,
    pub temperature: f64,
    pub failed: bool,
    pub passes: usize,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub cost_usd: f64,
    #[serde(default)]
    pub labels: Option<BTreeMap<LabelId, bool>>,
    pub attempts_total: u64,
}

pub fn write_predictions<W: Write>(rows: &[PredictionRow], mut out: W) -> std::io::Result<()> {
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_predictions<R: BufRead>(source: R) -> Result<Vec<PredictionRow>, OrchestratorError> {
    let mut rows = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: PredictionRow =
            serde_json::from_str(&line).map_err(|e| OrchestratorError::Predictions {
                line: i + 1,
                message: e.to_string(),
            })?;
        if row.failed == row.labels.is_some() {
            return Err(OrchestratorError::Predictions {
                line: i + 1,
                message: "labels must be present exactly when the passage did not fail".into(),
            });
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Parent verdicts as the OR of their children. Childless parents are false.
pub fn infer_parent_labels(
    t: &Taxonomy,
    child_verdicts: &BTreeMap<LabelId, bool>,
) -> Result<BTreeMap<LabelId, bool>, OrchestratorError> {
    t.parents()
        .into_iter()
        .map(|parent| {
            let mut any = false;
            for child in t.children_of(&parent).expect("parent from taxonomy") {
                let v = child_verdicts.get(&child).ok_or_else(|| {
                    OrchestratorError::Domain(format!("missing verdict for child {child}"))
                })?;
                any |= *v;
            }
            Ok((parent, any))
        })
        .collect()
}

/// Completes the child map of a hierarchical-pass run: children of negative
/// parents are false, queried children keep their verdicts.
pub fn fill_unqueried_children(
    t: &Taxonomy,
    parent_verdicts: &BTreeMap<LabelId, bool>,
    queried: &BTreeMap<LabelId, bool>,
) -> Result<BTreeMap<LabelId, bool>, OrchestratorError> {
    for (child, _) in queried.iter() {
        let parent = t
            .node(child)
            .and_then(|n| n.parent.clone())
            .ok_or_else(|| OrchestratorError::Domain(format!("{child} is not a Level-2 label")))?;
        if !parent_verdicts.get(&parent).copied().unwrap_or(false) {
            return Err(OrchestratorError::Domain(format!(
                "child {child} was queried although parent {parent} is not positive"
            )));
        }
    }
    let mut out = BTreeMap::new();
    for parent in t.parents() {
        let positive = *parent_verdicts.get(&parent).ok_or_else(|| {
            OrchestratorError::Domain(format!("missing verdict for parent {parent}"))
        })?;
        for child in t.children_of(&parent).expect("parent from taxonomy") {
            let v = positive && queried.get(&child).copied().unwrap_or(false);
            out.insert(child, v);
        }
    }
    Ok(out)
}

/// Runs plans for one configuration against one backend.
pub struct Orchestrator<B> {
    backend: B,
    taxonomy: Arc<Taxonomy>,
    config: RunConfig,
    limiter: Arc<Semaphore>,
}

impl<B: ChatBackend> Orchestrator<B> {
    pub fn new(backend: B, taxonomy: Taxonomy, config: RunConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        Ok(Orchestrator {
            backend,
            taxonomy: Arc::new(taxonomy),
            limiter: Arc::new(Semaphore::new(config.concurrency_limit)),
            config,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn taxonomy(&self) -> &Taxonomy {
        &self.taxonomy
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    async fn call(&self, exchange: &ChatExchange) -> Result<crate::llm_backend::ChatOutcome, BackendError> {
        let _permit = self.limiter.acquire().await.expect("semaphore is never closed");
        self.backend.complete(exchange).await
    }

    /// Sends `req`, retrying parse and backend failures while the budget
    /// lasts. At temperature 0 the first failure is final, since resampling
    /// would return the same output.
    pub async fn execute_with_retries(&self, req: &PromptRequest) -> PassRecord {
        let exchange = ChatExchange {
            system_text: req.system_text.clone(),
            user_text: req.user_text.clone(),
            model: self.config.model.clone(),
            temperature: self.config.temperature,
        };
        let max_attempts = if self.config.temperature > 0.0 {
            1 + self.config.max_retries
        } else {
            1
        };
        let mut usage = TokenUsage::default();
        let mut failure_kinds = Vec::new();
        let mut attempts = 0;
        while attempts < max_attempts {
            attempts += 1;
            match self.call(&exchange).await {
                Ok(outcome) => {
                    usage += outcome.usage;
                    match parse_prediction(&outcome.content, &req.expected_keys)
                        .expect("planned requests always expect keys")
                    {
                        Ok(parsed) => {
                            return PassRecord {
                                target_labels: req.target_labels.clone(),
                                attempts,
                                outcome: PassOutcome::Parsed(parsed),
                                usage,
                                failure_kinds,
                            }
                        }
                        Err(failure) => failure_kinds.push(failure.kind.into()),
                    }
                }
                Err(err) => {
                    warn!(error = %err, "backend call failed");
                    failure_kinds.push(FailureKind::Backend);
                }
            }
        }
        PassRecord {
            target_labels: req.target_labels.clone(),
            attempts,
            outcome: PassOutcome::Failed,
            usage,
            failure_kinds,
        }
    }

    async fn run_stage(&self, requests: &[PromptRequest]) -> Vec<PassRecord> {
        join_all(requests.iter().map(|r| self.execute_with_retries(r))).await
    }

    pub async fn classify_passage(&self, passage: &Passage) -> Result<PassageResult, OrchestratorError> {
        let t = &*self.taxonomy;
        let cfg = &self.config;
        let plan = plan_requests(cfg.strategy, t, passage, cfg.with_demo)?;
        let mut records = self.run_stage(&plan.initial.requests).await;

        let initial_ok = records.iter().all(|r| !r.failed());
        let mut verdicts: BTreeMap<LabelId, bool> =
            records.iter().flat_map(PassRecord::verdicts).collect();

        // A failed parent stage fails the passage, so there is nothing to expand.
        if cfg.strategy.is_hierarchical_pass() && initial_ok {
            let stage = expand_stage(cfg.strategy, t, &verdicts, passage, cfg.with_demo)?;
            let expansion = self.run_stage(&stage.requests).await;
            verdicts.extend(expansion.iter().flat_map(PassRecord::verdicts));
            records.extend(expansion);
        }

        let failed = records.iter().any(PassRecord::failed);
        let labels = if failed {
            None
        } else {
            Some(self.assemble(verdicts)?)
        };
        let usage: TokenUsage = records.iter().map(|r| r.usage).sum();
        Ok(PassageResult {
            passage_id: passage.passage_id.clone(),
            labels,
            failed,
            passes: records.len(),
            usage,
            cost_usd: cost_of(usage, &cfg.model, &cfg.prices)?,
            records,
        })
    }

    fn assemble(&self, mut verdicts: BTreeMap<LabelId, bool>) -> Result<BTreeMap<LabelId, bool>, OrchestratorError> {
        let t = &*self.taxonomy;
        match self.config.strategy {
            Strategy::SinglePassMulti | Strategy::MultiPassMulti => {
                let parents = infer_parent_labels(t, &verdicts)?;
                verdicts.extend(parents);
            }
            Strategy::HrchlPassMulti | Strategy::HrchlPassBinary => {
                let (parents, queried): (BTreeMap<_, _>, BTreeMap<_, _>) =
                    verdicts.into_iter().partition(|(id, _)| id.is_parent());
                let children = fill_unqueried_children(t, &parents, &queried)?;
                verdicts = parents;
                verdicts.extend(children);
            }
            Strategy::SinglePassHrchl | Strategy::MultiPassHrchl | Strategy::MultiPassBinary => {}
        }
        if verdicts.len() != t.len() {
            return Err(OrchestratorError::Domain(format!(
                "assembled {} labels, taxonomy has {}",
                verdicts.len(),
                t.len()
            )));
        }
        Ok(verdicts)
    }

    pub async fn run_corpus(&self, corpus: &Corpus) -> Result<RunResult, OrchestratorError> {
        let outcomes = join_all(corpus.passages.iter().map(|p| self.classify_passage(p))).await;
        let results = outcomes.into_iter().collect::<Result<Vec<_>, _>>()?;

        let mut totals = RunTotals::default();
        for r in &results {
            totals.passes += r.passes;
            totals.attempts += r.attempts_total();
            totals.usage += r.usage;
            totals.cost_usd += r.cost_usd;
        }
        let failure_rate = if results.is_empty() {
            warn!("empty corpus; failure rate reported as 0");
            0.0
        } else {
            results.iter().filter(|r| r.failed).count() as f64 / results.len() as f64
        };
        Ok(RunResult {
            config: self.config.clone(),
            results,
            totals,
            failure_rate,
        })
    }
}

/// A single-threaded runtime for driving the async API from sync code.
pub fn runtime() -> std::io::Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_current_thread().enable_all().build()
}
