//! Python bindings. Structured results cross the boundary as plain dicts and
//! lists (serialized through `json`), so Python callers never see Rust types
//! other than `Taxonomy` and `Corpus`.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyAny;
use serde::Serialize;

use vaxllm_core::evaluation::{self, ConfusionCounts, FailedPolicy, ParetoPoint};
use vaxllm_core::fixtures::{synthetic_corpus, FixtureSpec};
use vaxllm_core::llm_backend::{self, ChatBackend, PriceSheet, ScriptEntry, ScriptedBackend, SyntheticBackend, TokenUsage};
use vaxllm_core::orchestrator::{read_predictions, runtime, write_predictions, Orchestrator, RunConfig};
use vaxllm_core::prompting::{self, Strategy};
use vaxllm_core::{response_parsing, LabelId, Passage};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn strategy(name: &str) -> PyResult<Strategy> {
    name.parse().map_err(value_err)
}

fn label(id: &str) -> PyResult<LabelId> {
    LabelId::parse(id).map_err(value_err)
}

fn taxonomy_or_default(t: Option<PyRef<'_, Taxonomy>>) -> vaxllm_core::Taxonomy {
    t.map(|t| t.inner.clone()).unwrap_or_else(vaxllm_core::Taxonomy::vaxconcerns)
}

fn prices(json: Option<&str>) -> PyResult<PriceSheet> {
    match json {
        None => Ok(PriceSheet::bundled()),
        Some(text) => PriceSheet::from_json_str(text).map_err(value_err),
    }
}

/// A two-level label taxonomy. `Taxonomy()` is the bundled 24-label one.
#[pyclass(module = "vaxllm", frozen)]
struct Taxonomy {
    inner: vaxllm_core::Taxonomy,
}

#[pymethods]
impl Taxonomy {
    #[new]
    fn new() -> Self {
        Taxonomy {
            inner: vaxllm_core::Taxonomy::vaxconcerns(),
        }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        vaxllm_core::Taxonomy::from_json_str(text)
            .map(|inner| Taxonomy { inner })
            .map_err(value_err)
    }

    fn to_json(&self) -> String {
        self.inner.to_json_string()
    }

    fn label_ids(&self) -> Vec<String> {
        self.inner.label_ids().iter().map(|l| l.to_string()).collect()
    }

    fn parents(&self) -> Vec<String> {
        self.inner.parents().iter().map(|l| l.to_string()).collect()
    }

    fn children_of(&self, parent: &str) -> PyResult<Vec<String>> {
        let children = self.inner.children_of(&label(parent)?).map_err(value_err)?;
        Ok(children.iter().map(|l| l.to_string()).collect())
    }

    /// `(name, description)` of one label.
    fn describe(&self, id: &str) -> PyResult<(String, String)> {
        let node = self
            .inner
            .node(&label(id)?)
            .ok_or_else(|| value_err(format!("unknown label {id:?}")))?;
        Ok((node.name.clone(), node.description.clone()))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Taxonomy({} labels)", self.inner.len())
    }
}

/// Passages with optional gold labels.
#[pyclass(module = "vaxllm", frozen)]
struct Corpus {
    inner: vaxllm_core::Corpus,
}

#[pymethods]
impl Corpus {
    #[staticmethod]
    #[pyo3(signature = (text, taxonomy=None))]
    fn from_jsonl(text: &str, taxonomy: Option<PyRef<'_, Taxonomy>>) -> PyResult<Self> {
        let t = taxonomy_or_default(taxonomy);
        vaxllm_core::Corpus::from_jsonl_str(text, &t)
            .map(|inner| Corpus { inner })
            .map_err(value_err)
    }

    /// A reproducible labeled corpus for experiments without real data.
    #[staticmethod]
    #[pyo3(signature = (passages=20, seed=7, taxonomy=None))]
    fn synthetic(passages: usize, seed: u64, taxonomy: Option<PyRef<'_, Taxonomy>>) -> Self {
        let t = taxonomy_or_default(taxonomy);
        let spec = FixtureSpec {
            passages,
            seed,
            ..Default::default()
        };
        Corpus {
            inner: synthetic_corpus(&t, spec),
        }
    }

    fn to_jsonl(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        self.inner.write_jsonl(&mut buf).map_err(value_err)?;
        String::from_utf8(buf).map_err(value_err)
    }

    fn passage_ids(&self) -> Vec<String> {
        self.inner.passages.iter().map(|p| p.passage_id.clone()).collect()
    }

    fn has_gold(&self) -> bool {
        self.inner.gold.is_some()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Names of the seven prompting strategies.
#[pyfunction]
fn strategies() -> Vec<&'static str> {
    Strategy::ALL.iter().map(|s| s.name()).collect()
}

/// Initial-stage prompts for one passage, as a list of dicts with
/// `system`, `user`, `expected_keys` and `targets`.
#[pyfunction]
#[pyo3(signature = (strategy_name, text, taxonomy=None, with_demo=None))]
fn plan<'py>(
    py: Python<'py>,
    strategy_name: &str,
    text: &str,
    taxonomy: Option<PyRef<'_, Taxonomy>>,
    with_demo: Option<bool>,
) -> PyResult<Bound<'py, PyAny>> {
    let s = strategy(strategy_name)?;
    let t = taxonomy_or_default(taxonomy);
    let passage = Passage {
        passage_id: "plan".into(),
        text: text.into(),
    };
    let plan = prompting::plan_requests(s, &t, &passage, with_demo.unwrap_or(s.default_with_demo())).map_err(value_err)?;
    let requests: Vec<_> = plan
        .initial
        .requests
        .iter()
        .map(|r| {
            serde_json::json!({
                "system": r.system_text,
                "user": r.user_text,
                "expected_keys": r.expected_keys,
                "targets": r.target_labels,
            })
        })
        .collect();
    to_py(py, &requests)
}

/// Parses a model response. Returns `{"verdicts", "extra_keys",
/// "duplicate_keys"}` or raises `ValueError` starting with the failure kind.
#[pyfunction]
fn parse_prediction<'py>(py: Python<'py>, content: &str, expected_keys: Vec<String>) -> PyResult<Bound<'py, PyAny>> {
    match response_parsing::parse_prediction(content, &expected_keys).map_err(value_err)? {
        Ok(p) => to_py(
            py,
            &serde_json::json!({
                "verdicts": p.verdicts,
                "extra_keys": p.extra_keys,
                "duplicate_keys": p.duplicate_keys,
            }),
        ),
        Err(f) => Err(value_err(format!("{:?}: {}", f.kind, f.detail))),
    }
}

/// Dollar cost of a token count under the bundled or given price table.
#[pyfunction]
#[pyo3(signature = (input_tokens, output_tokens, model, prices_json=None))]
fn cost_of(input_tokens: u64, output_tokens: u64, model: &str, prices_json: Option<&str>) -> PyResult<f64> {
    let usage = TokenUsage {
        input_tokens,
        output_tokens,
    };
    llm_backend::cost_of(usage, model, &prices(prices_json)?).map_err(value_err)
}

/// F1 from confusion counts, `None` when undefined.
#[pyfunction]
#[pyo3(signature = (tp, fp, fn_, tn=0))]
fn label_f1(tp: u64, fp: u64, fn_: u64, tn: u64) -> Option<f64> {
    evaluation::label_f1(&ConfusionCounts { tp, fp, fn_, tn })
}

/// Non-dominated `(system_id, cost, f1)` points, sorted by cost.
#[pyfunction]
fn pareto_frontier(points: Vec<(String, f64, f64)>) -> Vec<(String, f64, f64)> {
    let pts: Vec<ParetoPoint> = points
        .into_iter()
        .map(|(system_id, cost, f1)| ParetoPoint { system_id, cost, f1 })
        .collect();
    evaluation::pareto_frontier(&pts)
        .into_iter()
        .map(|p| (p.system_id, p.cost, p.f1))
        .collect()
}

/// Runs a strategy over `corpus` against an offline backend and returns the
/// predictions as JSONL text.
///
/// With `script` (a list of response strings, replayed per prompt) the
/// scripted backend is used. Otherwise answers come from a seeded synthetic
/// backend that says Yes with probability `positive_rate`.
#[pyfunction]
#[pyo3(signature = (
    corpus, strategy_name, *, taxonomy=None, script=None, seed=0, positive_rate=0.3,
    model="gpt-4-0613", temperature=0.0, max_retries=10, with_demo=None, concurrency=8
))]
#[allow(clippy::too_many_arguments)]
fn run_mock(
    py: Python<'_>,
    corpus: PyRef<'_, Corpus>,
    strategy_name: &str,
    taxonomy: Option<PyRef<'_, Taxonomy>>,
    script: Option<Vec<String>>,
    seed: u64,
    positive_rate: f64,
    model: &str,
    temperature: f64,
    max_retries: u32,
    with_demo: Option<bool>,
    concurrency: usize,
) -> PyResult<String> {
    let s = strategy(strategy_name)?;
    let t = taxonomy_or_default(taxonomy);
    let mut config = RunConfig::new(s, model, PriceSheet::bundled());
    config.temperature = temperature;
    config.max_retries = max_retries;
    config.concurrency_limit = concurrency;
    if let Some(d) = with_demo {
        config.with_demo = d;
    }
    let corpus = &corpus.inner;
    py.detach(|| match script {
        Some(lines) => {
            let entries = lines.into_iter().map(ScriptEntry::any).collect();
            run_to_jsonl(ScriptedBackend::new(entries), t, config, corpus)
        }
        None => run_to_jsonl(SyntheticBackend::seeded(seed, positive_rate), t, config, corpus),
    })
}

fn run_to_jsonl<B: ChatBackend>(
    backend: B,
    t: vaxllm_core::Taxonomy,
    config: RunConfig,
    corpus: &vaxllm_core::Corpus,
) -> PyResult<String> {
    let orch = Orchestrator::new(backend, t, config).map_err(value_err)?;
    let rt = runtime().map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let run = rt.block_on(orch.run_corpus(corpus)).map_err(value_err)?;
    let mut buf = Vec::new();
    write_predictions(&run.rows(), &mut buf).map_err(value_err)?;
    String::from_utf8(buf).map_err(value_err)
}

/// Scores predictions JSONL against a gold corpus and returns the report.
#[pyfunction]
#[pyo3(signature = (predictions_jsonl, corpus, taxonomy=None, failed_policy="exclude"))]
fn score<'py>(
    py: Python<'py>,
    predictions_jsonl: &str,
    corpus: PyRef<'_, Corpus>,
    taxonomy: Option<PyRef<'_, Taxonomy>>,
    failed_policy: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let t = taxonomy_or_default(taxonomy);
    let policy: FailedPolicy = failed_policy.parse().map_err(value_err)?;
    let rows = read_predictions(predictions_jsonl.as_bytes()).map_err(value_err)?;
    let report = evaluation::score(&rows, &corpus.inner, &t, policy).map_err(value_err)?;
    to_py(py, &report)
}

#[pymodule]
fn vaxllm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Taxonomy>()?;
    m.add_class::<Corpus>()?;
    m.add_function(wrap_pyfunction!(strategies, m)?)?;
    m.add_function(wrap_pyfunction!(plan, m)?)?;
    m.add_function(wrap_pyfunction!(parse_prediction, m)?)?;
    m.add_function(wrap_pyfunction!(cost_of, m)?)?;
    m.add_function(wrap_pyfunction!(label_f1, m)?)?;
    m.add_function(wrap_pyfunction!(pareto_frontier, m)?)?;
    m.add_function(wrap_pyfunction!(run_mock, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    Ok(())
}
