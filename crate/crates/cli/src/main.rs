//! `vaxllm` command-line driver.
//!
//! Settings resolve as command-line flag, then the `--config` JSON file, then
//! the built-in default. Every `classify` run writes the resolved settings
//! next to its predictions so a run can be reproduced from its outputs.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::builder::PossibleValuesParser;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use vaxllm_core::evaluation::{
    self, emit_report, pareto_frontier, read_summary_csv, summary_csv, FailedPolicy, SummaryRow,
};
use vaxllm_core::llm_backend::{ChatBackend, OpenAiBackend, PriceSheet, ScriptedBackend};
use vaxllm_core::orchestrator::{
    read_predictions, runtime, write_predictions, Orchestrator, RunConfig, DEFAULT_CONCURRENCY,
    DEFAULT_MAX_RETRIES,
};
use vaxllm_core::prompting::{plan_requests, ExpansionRule};
use vaxllm_core::{Corpus, Passage, Strategy, Taxonomy};

const DEFAULT_MODEL: &str = "gpt-4-0613";
const DEFAULT_TIMEOUT_SECS: u64 = 60;
const PLACEHOLDER_TEXT: &str = "<passage text>";

#[derive(Parser, Debug)]
#[command(name = "vaxllm", version, about = "Classify passages into vaccine concern labels with chat LLMs")]
struct Cli {
    /// JSON file with default settings; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a strategy over a corpus and write predictions JSONL.
    Classify(ClassifyArgs),
    /// Score predictions against gold labels and write report files.
    Evaluate(EvaluateArgs),
    /// Print the prompts a strategy would send for one passage.
    Plan(PlanArgs),
    /// Merge summary CSVs and mark the cost/F1 Pareto frontier.
    Report(ReportArgs),
    /// Check that a taxonomy and optionally a corpus load cleanly.
    Validate(ValidateArgs),
}

#[derive(Args, Debug, Default)]
struct DemoFlags {
    /// Append the output-format demonstration to the system prompt.
    #[arg(long, overrides_with = "no_demo")]
    with_demo: bool,
    /// Leave the demonstration out.
    #[arg(long, overrides_with = "with_demo")]
    no_demo: bool,
}

impl DemoFlags {
    fn value(&self) -> Option<bool> {
        match (self.with_demo, self.no_demo) {
            (true, _) => Some(true),
            (_, true) => Some(false),
            _ => None,
        }
    }
}

#[derive(Args, Debug)]
struct ClassifyArgs {
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, value_parser = PossibleValuesParser::new(Strategy::ALL.map(Strategy::name)))]
    strategy: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_retries: Option<u32>,
    #[command(flatten)]
    demo: DemoFlags,
    #[arg(long)]
    concurrency: Option<usize>,
    /// Price table JSON; the bundled table is used when omitted.
    #[arg(long)]
    prices: Option<PathBuf>,
    /// Base URL of an OpenAI-compatible endpoint. Needs LLM_API_KEY.
    #[arg(long)]
    backend_url: Option<String>,
    /// JSONL file of canned responses for offline runs.
    #[arg(long)]
    mock_script: Option<PathBuf>,
    #[arg(long)]
    timeout_secs: Option<u64>,
    /// Predictions JSONL to write.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    /// Corpus with gold labels.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long, value_parser = PossibleValuesParser::new(["exclude", "all-negative"]))]
    failed_policy: Option<String>,
    /// Directory for per_label.csv, summary.csv and summary.md.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PlanArgs {
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, value_parser = PossibleValuesParser::new(Strategy::ALL.map(Strategy::name)))]
    strategy: Option<String>,
    #[command(flatten)]
    demo: DemoFlags,
    /// Passage to render, looked up in --corpus.
    #[arg(long, conflicts_with = "text")]
    passage_id: Option<String>,
    /// Literal passage text to render.
    #[arg(long)]
    text: Option<String>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Summary CSVs written by `evaluate`.
    #[arg(long = "summary", num_args = 1.., required = true)]
    summaries: Vec<PathBuf>,
    /// Frontier CSV to write.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
}

/// Contents of the `--config` file. Every field is optional.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    taxonomy: Option<PathBuf>,
    corpus: Option<PathBuf>,
    strategy: Option<String>,
    model: Option<String>,
    temperature: Option<f64>,
    max_retries: Option<u32>,
    with_demo: Option<bool>,
    concurrency: Option<usize>,
    prices: Option<PathBuf>,
    backend_url: Option<String>,
    mock_script: Option<PathBuf>,
    timeout_secs: Option<u64>,
    predictions: Option<PathBuf>,
    out: Option<PathBuf>,
    failed_policy: Option<String>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Settings echoed next to the predictions file.
#[derive(Debug, Serialize)]
struct ResolvedClassify {
    taxonomy: Option<PathBuf>,
    corpus: PathBuf,
    strategy: Strategy,
    model: String,
    temperature: f64,
    max_retries: u32,
    with_demo: bool,
    concurrency: usize,
    prices: Option<PathBuf>,
    backend_url: Option<String>,
    mock_script: Option<PathBuf>,
    timeout_secs: u64,
    out: PathBuf,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Classify(a) => cmd_classify(a, file),
        Command::Evaluate(a) => cmd_evaluate(a, file),
        Command::Plan(a) => cmd_plan(a, file),
        Command::Report(a) => cmd_report(a, file),
        Command::Validate(a) => cmd_validate(a, file),
    }
}

fn load_taxonomy(path: Option<&Path>) -> Result<Taxonomy> {
    match path {
        None => Ok(Taxonomy::vaxconcerns()),
        Some(p) => {
            let f = File::open(p).with_context(|| format!("opening taxonomy {}", p.display()))?;
            Taxonomy::load(f).with_context(|| format!("loading taxonomy {}", p.display()))
        }
    }
}

fn load_corpus(path: &Path, taxonomy: &Taxonomy) -> Result<Corpus> {
    let f = File::open(path).with_context(|| format!("opening corpus {}", path.display()))?;
    Corpus::load(BufReader::new(f), taxonomy).with_context(|| format!("loading corpus {}", path.display()))
}

fn load_prices(path: Option<&Path>) -> Result<PriceSheet> {
    match path {
        None => Ok(PriceSheet::bundled()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading prices {}", p.display()))?;
            PriceSheet::from_json_str(&text).with_context(|| format!("loading prices {}", p.display()))
        }
    }
}

fn parse_strategy(name: Option<String>) -> Result<Strategy> {
    let name = name.ok_or_else(|| anyhow!("--strategy is required"))?;
    name.parse::<Strategy>().map_err(|e| anyhow!("{e}"))
}

fn cmd_classify(a: ClassifyArgs, file: FileConfig) -> Result<()> {
    let strategy = parse_strategy(a.strategy.or(file.strategy))?;
    let backend_url = a.backend_url.or(file.backend_url);
    let mock_script = a.mock_script.or(file.mock_script);
    if backend_url.is_some() == mock_script.is_some() {
        bail!("exactly one of --backend-url or --mock-script must be given");
    }
    let resolved = ResolvedClassify {
        taxonomy: a.taxonomy.or(file.taxonomy),
        corpus: a.corpus.or(file.corpus).ok_or_else(|| anyhow!("--corpus is required"))?,
        strategy,
        model: a.model.or(file.model).unwrap_or_else(|| DEFAULT_MODEL.to_string()),
        temperature: a.temperature.or(file.temperature).unwrap_or(0.0),
        max_retries: a.max_retries.or(file.max_retries).unwrap_or(DEFAULT_MAX_RETRIES),
        with_demo: a
            .demo
            .value()
            .or(file.with_demo)
            .unwrap_or_else(|| strategy.default_with_demo()),
        concurrency: a.concurrency.or(file.concurrency).unwrap_or(DEFAULT_CONCURRENCY),
        prices: a.prices.or(file.prices),
        backend_url,
        mock_script,
        timeout_secs: a.timeout_secs.or(file.timeout_secs).unwrap_or(DEFAULT_TIMEOUT_SECS),
        out: a.out.or(file.out).ok_or_else(|| anyhow!("--out is required"))?,
    };

    let taxonomy = load_taxonomy(resolved.taxonomy.as_deref())?;
    let corpus = load_corpus(&resolved.corpus, &taxonomy)?;
    let config = RunConfig {
        strategy,
        model: resolved.model.clone(),
        temperature: resolved.temperature,
        max_retries: resolved.max_retries,
        with_demo: resolved.with_demo,
        concurrency_limit: resolved.concurrency,
        prices: load_prices(resolved.prices.as_deref())?,
    };

    if let Some(url) = &resolved.backend_url {
        let backend = OpenAiBackend::from_env(url, Duration::from_secs(resolved.timeout_secs))?;
        classify_with(backend, taxonomy, config, &corpus, &resolved)
    } else {
        let path = resolved.mock_script.as_deref().expect("checked above");
        let f = File::open(path).with_context(|| format!("opening mock script {}", path.display()))?;
        let backend = ScriptedBackend::load(BufReader::new(f))
            .with_context(|| format!("loading mock script {}", path.display()))?;
        classify_with(backend, taxonomy, config, &corpus, &resolved)
    }
}

fn classify_with<B: ChatBackend>(
    backend: B,
    taxonomy: Taxonomy,
    config: RunConfig,
    corpus: &Corpus,
    resolved: &ResolvedClassify,
) -> Result<()> {
    let orch = Orchestrator::new(backend, taxonomy, config)?;
    let run = runtime()?.block_on(orch.run_corpus(corpus))?;

    if let Some(dir) = resolved.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut out = BufWriter::new(
        File::create(&resolved.out).with_context(|| format!("creating {}", resolved.out.display()))?,
    );
    write_predictions(&run.rows(), &mut out)?;
    out.flush()?;
    fs::write(sidecar_path(&resolved.out), serde_json::to_string_pretty(resolved)? + "\n")?;

    let failed = run.results.iter().filter(|r| r.failed).count();
    let failure_rate = if run.results.is_empty() {
        0.0
    } else {
        failed as f64 / run.results.len() as f64
    };
    println!(
        "passages={} passes={} failed={} failure_rate={:.4} input_tokens={} output_tokens={} total_cost_usd={:.6}",
        run.results.len(),
        run.totals.passes,
        failed,
        failure_rate,
        run.totals.usage.input_tokens,
        run.totals.usage.output_tokens,
        run.totals.cost_usd,
    );
    Ok(())
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".config.json");
    out.with_file_name(name)
}

fn cmd_evaluate(a: EvaluateArgs, file: FileConfig) -> Result<()> {
    let taxonomy = load_taxonomy(a.taxonomy.or(file.taxonomy).as_deref())?;
    let corpus_path = a.corpus.or(file.corpus).ok_or_else(|| anyhow!("--corpus is required"))?;
    let corpus = load_corpus(&corpus_path, &taxonomy)?;
    let pred_path = a
        .predictions
        .or(file.predictions)
        .ok_or_else(|| anyhow!("--predictions is required"))?;
    let f = File::open(&pred_path).with_context(|| format!("opening predictions {}", pred_path.display()))?;
    let rows = read_predictions(BufReader::new(f))?;
    let policy: FailedPolicy = match a.failed_policy.or(file.failed_policy) {
        Some(p) => p.parse().map_err(|e| anyhow!("{e}"))?,
        None => FailedPolicy::default(),
    };
    let out_dir = a.out.or(file.out).ok_or_else(|| anyhow!("--out is required"))?;

    let report = evaluation::score(&rows, &corpus, &taxonomy, policy)?;
    let paths = emit_report(&report, &taxonomy, None, &out_dir)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "macro_f1={} easy_f1={} noneasy_f1={} scored={}/{} failure_rate={:.4} mean_cost={:.6}",
        evaluation::fmt_score(report.macro_f1),
        evaluation::fmt_score(report.easy_f1),
        evaluation::fmt_score(report.noneasy_f1),
        report.scored_passages,
        report.passages,
        report.failure_rate,
        report.mean_cost_per_passage,
    );
    println!("wrote {}", paths.summary.display());
    Ok(())
}

fn cmd_plan(a: PlanArgs, file: FileConfig) -> Result<()> {
    let strategy = parse_strategy(a.strategy.or(file.strategy))?;
    let taxonomy = load_taxonomy(a.taxonomy.or(file.taxonomy).as_deref())?;
    let with_demo = a
        .demo
        .value()
        .or(file.with_demo)
        .unwrap_or_else(|| strategy.default_with_demo());
    let passage = match (a.passage_id, a.text) {
        (Some(id), _) => {
            let path = a
                .corpus
                .or(file.corpus)
                .ok_or_else(|| anyhow!("--passage-id needs --corpus"))?;
            let corpus = load_corpus(&path, &taxonomy)?;
            corpus
                .passage(&id)
                .cloned()
                .ok_or_else(|| anyhow!("passage {id:?} not found in {}", path.display()))?
        }
        (None, text) => Passage {
            passage_id: "plan".into(),
            text: text.unwrap_or_else(|| PLACEHOLDER_TEXT.into()),
        },
    };

    let plan = plan_requests(strategy, &taxonomy, &passage, with_demo)?;
    let total = plan.initial.len();
    println!("strategy: {strategy}");
    println!("with_demo: {with_demo}");
    println!("initial requests: {total}");
    for (i, req) in plan.initial.requests.iter().enumerate() {
        println!();
        println!("=== request {}/{} ===", i + 1, total);
        println!("expected keys: {}", req.expected_keys.join(", "));
        println!("--- system ---");
        println!("{}", req.system_text);
        println!("--- user ---");
        println!("{}", req.user_text);
    }
    println!();
    match plan.expansion {
        ExpansionRule::None => println!("expansion: none"),
        ExpansionRule::ChildrenOfPositiveParents => {
            let unit = if strategy == Strategy::HrchlPassBinary {
                "one binary request per child"
            } else {
                "one multi-label request per parent"
            };
            println!("expansion: for each parent answered Yes, query its children ({unit})");
        }
    }
    Ok(())
}

fn cmd_report(a: ReportArgs, file: FileConfig) -> Result<()> {
    let out = a.out.or(file.out).ok_or_else(|| anyhow!("--out is required"))?;
    let mut rows: Vec<SummaryRow> = Vec::new();
    for path in &a.summaries {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        rows.extend(read_summary_csv(&text).with_context(|| format!("parsing {}", path.display()))?);
    }
    if rows.is_empty() {
        bail!("no summary rows to report on");
    }
    let points: Vec<_> = rows.iter().filter_map(SummaryRow::pareto_point).collect();
    let frontier = pareto_frontier(&points);
    fs::write(&out, summary_csv(&rows, Some(&frontier))).with_context(|| format!("writing {}", out.display()))?;
    println!("systems={} frontier={}", rows.len(), frontier.len());
    for p in &frontier {
        println!("  {} cost={:.6} macro_f1={:.4}", p.system_id, p.cost, p.f1);
    }
    Ok(())
}

fn cmd_validate(a: ValidateArgs, file: FileConfig) -> Result<()> {
    let taxonomy = load_taxonomy(a.taxonomy.or(file.taxonomy).as_deref())?;
    println!(
        "taxonomy ok: {} labels ({} parents, {} children)",
        taxonomy.len(),
        taxonomy.parents().len(),
        taxonomy.len() - taxonomy.parents().len()
    );
    if let Some(path) = a.corpus.or(file.corpus) {
        let corpus = load_corpus(&path, &taxonomy)?;
        let gold = if corpus.gold.is_some() { "with gold labels" } else { "unlabeled" };
        println!("corpus ok: {} passages, {gold}", corpus.len());
    }
    Ok(())
}
