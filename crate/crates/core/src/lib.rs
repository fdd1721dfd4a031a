//! Zero-shot classification of text passages into a two-level concern
//! taxonomy using chat language models, with seven prompting strategies,
//! robust output parsing, retry and cost accounting, and F1 / Pareto
//! evaluation.
//!
//! The usual flow is [`Taxonomy`] + [`Corpus`] → [`Orchestrator::run_corpus`]
//! → predictions JSONL → [`evaluation::score`] → reports.

pub mod corpus;
pub mod evaluation;
pub mod fixtures;
pub mod llm_backend;
pub mod orchestrator;
pub mod prompting;
pub mod response_parsing;
pub mod taxonomy;

pub use corpus::{Corpus, GoldLabels, Partition, Passage};
pub use evaluation::{label_f1, pareto_frontier, score, ConfusionCounts, EvaluationReport, FailedPolicy, ParetoPoint};
pub use llm_backend::{
    cost_of, mock_usage, ChatBackend, ChatExchange, ChatOutcome, OpenAiBackend, PriceSheet, ScriptedBackend,
    SyntheticBackend, TokenUsage,
};
pub use orchestrator::{
    fill_unqueried_children, infer_parent_labels, Orchestrator, PassRecord, PassageResult, PredictionRow, RunConfig,
    RunResult,
};
pub use prompting::{build_concern_map, expand_stage, plan_requests, render_format_demonstration, render_request, Strategy};
pub use response_parsing::{parse_prediction, ParseFailure, ParseFailureKind, ParsedPrediction};
pub use taxonomy::{canonical_key, LabelId, Taxonomy};
