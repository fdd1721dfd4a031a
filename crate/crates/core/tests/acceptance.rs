//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use vaxllm_core::corpus::{Corpus, GoldLabels, Passage};
use vaxllm_core::evaluation::{self, fmt_score, per_label_csv, FailedPolicy, ParetoPoint};
use vaxllm_core::fixtures::{synthetic_corpus, FixtureSpec};
use vaxllm_core::llm_backend::{mock_usage, ModelPrice, PriceSheet, ScriptEntry, ScriptedBackend, SyntheticBackend, TokenUsage};
use vaxllm_core::orchestrator::{
    fill_unqueried_children, infer_parent_labels, runtime, write_predictions, Orchestrator, PredictionRow, RunConfig,
};
use vaxllm_core::prompting::{expand_stage, plan_requests, render_request, Strategy, SYSTEM_TEMPLATE};
use vaxllm_core::response_parsing::{parse_prediction, ParseFailureKind};
use vaxllm_core::taxonomy::{canonical_key, LabelId, Taxonomy};

const MODEL: &str = "gpt-4-0613";
const IN_PRICE: f64 = 0.03;
const OUT_PRICE: f64 = 0.06;

fn prices() -> PriceSheet {
    PriceSheet::default().with_model(
        MODEL,
        ModelPrice {
            input_per_1k: IN_PRICE,
            output_per_1k: OUT_PRICE,
        },
    )
}

fn config(strategy: Strategy, temperature: f64, concurrency: usize) -> RunConfig {
    RunConfig {
        temperature,
        concurrency_limit: concurrency,
        ..RunConfig::new(strategy, MODEL, prices())
    }
}

fn id(s: &str) -> LabelId {
    LabelId::parse(s).unwrap()
}

// 1. Pass-count conformance

fn pass_counts() {
    let started = Instant::now();
    let t = Taxonomy::vaxconcerns();
    let corpus = synthetic_corpus(&t, FixtureSpec::default());
    let rt = runtime().unwrap();
    let parents = t.parents();

    for strategy in Strategy::ALL {
        let orch = Orchestrator::new(SyntheticBackend::seeded(11, 0.3), t.clone(), config(strategy, 0.0, 8)).unwrap();
        let run = rt.block_on(orch.run_corpus(&corpus)).unwrap();
        assert_eq!(run.results.len(), 200);
        assert_eq!(run.failure_rate, 0.0, "{strategy}: all-valid mock must not fail");
        let expected_mean = match strategy {
            Strategy::SinglePassHrchl | Strategy::SinglePassMulti => Some(1.0),
            Strategy::MultiPassMulti | Strategy::MultiPassHrchl => Some(5.0),
            Strategy::MultiPassBinary => Some(24.0),
            _ => None,
        };
        if let Some(mean) = expected_mean {
            assert_eq!(run.mean_passes(), mean, "{strategy}");
            assert!(run.results.iter().all(|r| r.passes as f64 == mean));
        }
        for r in &run.results {
            let labels = r.labels.as_ref().unwrap();
            let positive: Vec<&LabelId> = parents.iter().filter(|p| labels[*p]).collect();
            match strategy {
                Strategy::HrchlPassMulti => {
                    assert_eq!(r.passes, 1 + positive.len(), "{}", r.passage_id);
                    assert!((1..=6).contains(&r.passes));
                }
                Strategy::HrchlPassBinary => {
                    let children: usize = positive.iter().map(|p| t.children_of(p).unwrap().len()).sum();
                    assert_eq!(r.passes, 5 + children, "{}", r.passage_id);
                    assert!((5..=24).contains(&r.passes));
                }
                _ => {}
            }
        }
    }
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
}

// 2. Parser failure taxonomy

#[derive(Clone, Copy, Debug, PartialEq)]
enum Bucket {
    Success,
    Format,
    Incomplete,
}

fn parser_taxonomy() {
    use Bucket::*;
    let k1 = vec!["VaxConcerns 1".to_string()];
    let k5: Vec<String> = (1..=5).map(|i| format!("VaxConcerns {i}")).collect();
    let k3: Vec<String> = ["1.1", "1.2", "1.3"].iter().map(|i| format!("VaxConcerns {i}")).collect();
    let full5 = r#"{"VaxConcerns 1": "Yes", "VaxConcerns 2": "No", "VaxConcerns 3": "No", "VaxConcerns 4": "Yes", "VaxConcerns 5": "No"}"#;

    let cases: Vec<(&str, &[String], Bucket)> = vec![
        // well-formed
        (full5, &k5, Success),
        (r#"{"VaxConcerns 1": "Yes"}"#, &k1, Success),
        (r#"{"VaxConcerns 1": "No",}"#, &k1, Success),
        ("{\n  \"VaxConcerns 1\": \"no\"\n}", &k1, Success),
        // prose around the dict
        (r#"Sure! Here you go: {'VaxConcerns_1': 'yes'}"#, &k1, Success),
        (r#"Answer: {"VaxConcerns 1": "YES"} Let me know if you need more."#, &k1, Success),
        // underscore and spacing variants
        (r#"{"VaxConcerns_1.1": "Yes", "VaxConcerns_1.2": "No", "VaxConcerns_1.3": "No"}"#, &k3, Success),
        (r#"{" VaxConcerns   1 ": "Yes"}"#, &k1, Success),
        // code fences
        ("```json\n{\"VaxConcerns 1\": \"Yes\"}\n```", &k1, Success),
        ("```\n{'VaxConcerns 1': 'No'}\n```", &k1, Success),
        ("Here:\n```json\n{\"VaxConcerns 1\": \"Yes\"}\n```\nThanks {not json}", &k1, Success),
        // single quotes
        (r#"{'VaxConcerns 1': 'Yes', 'VaxConcerns 2': 'No', 'VaxConcerns 3': 'No', 'VaxConcerns 4': 'No', 'VaxConcerns 5': 'No'}"#, &k5, Success),
        // duplicates: last occurrence wins
        (r#"{"VaxConcerns 1": "No", "VaxConcerns 1": "Yes"}"#, &k1, Success),
        (r#"{"VaxConcerns 1": "Maybe", "VaxConcerns 1": "Yes"}"#, &k1, Success),
        // extra keys tolerated
        (r#"{"VaxConcerns 1": "Yes", "VaxConcerns 9": "No"}"#, &k1, Success),
        (r#"{"VaxConcerns 1": "Yes", "note": "uncertain"}"#, &k1, Success),
        // prose only
        ("The passage mentions safety concerns.", &k1, Format),
        ("", &k1, Format),
        ("VaxConcerns 1: Yes", &k1, Format),
        ("I cannot help with that request.", &k5, Format),
        // truncated dicts
        (r#"{"VaxConcerns 1": "Yes", "VaxConcerns 2": "No""#, &k5, Format),
        (r#"{"VaxConcerns 1": "Ye"#, &k1, Format),
        ("```json\n{\"VaxConcerns 1\": \"Yes\",", &k1, Format),
        // bad values
        (r#"{"VaxConcerns 1": "Maybe"}"#, &k1, Format),
        (r#"{"VaxConcerns 1": "Unsure"}"#, &k1, Format),
        (r#"{"VaxConcerns 1": true}"#, &k1, Format),
        (r#"{"VaxConcerns 1": Yes}"#, &k1, Format),
        (r#"{"VaxConcerns 1": "Yes."}"#, &k1, Format),
        (r#"{"VaxConcerns 1": ["Yes"]}"#, &k1, Format),
        // bad value wins over missing keys
        (r#"{"VaxConcerns 1": "Perhaps"}"#, &k5, Format),
        // malformed syntax
        (r#"{"VaxConcerns 1" "Yes"}"#, &k1, Format),
        (r#"{VaxConcerns 1: "Yes"}"#, &k1, Format),
        // missing keys
        (r#"{"VaxConcerns 1": "Yes"}"#, &k5, Incomplete),
        ("{}", &k1, Incomplete),
        (r#"{"VaxConcerns 1.1": "Yes", "VaxConcerns 1.2": "No"}"#, &k3, Incomplete),
        (r#"{"VaxConcerns 2": "Yes"}"#, &k1, Incomplete),
        (r#"Sure: {'VaxConcerns_1': 'No', 'VaxConcerns_2': 'No'}"#, &k5, Incomplete),
        ("```json\n{\"VaxConcerns 1\": \"Yes\"}\n```", &k5, Incomplete),
        (r#"{"VaxConcerns 1": "Yes", "VaxConcerns 1": "No"}"#, &k5, Incomplete),
    ];
    assert!(cases.len() >= 30);
    let mut wrong = Vec::new();
    for (content, keys, want) in &cases {
        let got = match parse_prediction(content, keys).unwrap() {
            Ok(_) => Success,
            Err(f) if f.kind == ParseFailureKind::FormatError => Format,
            Err(_) => Incomplete,
        };
        if got != *want {
            wrong.push(format!("{content:?}: want {want:?}, got {got:?}"));
        }
    }
    assert!(wrong.is_empty(), "{} of {} misclassified:\n{}", wrong.len(), cases.len(), wrong.join("\n"));
}

// 3. Retry policy

fn retry_policy() {
    let t = Taxonomy::vaxconcerns();
    let rt = runtime().unwrap();
    let passage = Passage {
        passage_id: "p".into(),
        text: "Vaccines are full of toxins.".into(),
    };
    let req = render_request(&t, &[id("3.2")], false, &passage, false).unwrap();
    let valid = r#"{"VaxConcerns 3.2": "Yes"}"#;
    let garbage = "I think so.";

    let orch = Orchestrator::new(ScriptedBackend::sequence([garbage, valid]), t.clone(), config(Strategy::MultiPassBinary, 0.0, 1)).unwrap();
    let rec = rt.block_on(orch.execute_with_retries(&req));
    assert_eq!(rec.attempts, 1);
    assert!(rec.failed());

    for k in 0..=10usize {
        let mut script = vec![garbage; k];
        script.push(valid);
        let orch = Orchestrator::new(ScriptedBackend::sequence(script.clone()), t.clone(), config(Strategy::MultiPassBinary, 1.0, 1)).unwrap();
        let rec = rt.block_on(orch.execute_with_retries(&req));
        assert_eq!(rec.attempts as usize, k + 1);
        assert!(!rec.failed());
        let expected: TokenUsage = script.iter().map(|c| mock_usage(&req.system_text, &req.user_text, c)).sum();
        assert_eq!(rec.usage, expected);
    }

    let orch = Orchestrator::new(ScriptedBackend::sequence(vec![garbage; 11]), t.clone(), config(Strategy::MultiPassBinary, 0.7, 1)).unwrap();
    let rec = rt.block_on(orch.execute_with_retries(&req));
    assert_eq!(rec.attempts, 11);
    assert!(rec.failed());
    let per_call = mock_usage(&req.system_text, &req.user_text, garbage);
    assert_eq!(rec.usage.input_tokens, 11 * per_call.input_tokens);
    assert_eq!(rec.usage.output_tokens, 11 * per_call.output_tokens);
}

// 4. Inference oracles

fn inference_oracles() {
    let t = Taxonomy::vaxconcerns();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let leaves = t.leaf_labels();
    let parents = t.parents();

    for _ in 0..1000 {
        let children: BTreeMap<LabelId, bool> = leaves.iter().map(|c| (c.clone(), rng.random_bool(0.2))).collect();
        let got = infer_parent_labels(&t, &children).unwrap();
        // brute force: a parent is on iff some label whose id starts with "<parent>." is on
        for p in &parents {
            let prefix = format!("{p}.");
            let want = children.iter().any(|(c, v)| *v && c.as_str().starts_with(&prefix));
            assert_eq!(got[p], want);
        }
        assert_eq!(got.len(), parents.len());
    }

    for _ in 0..1000 {
        let parent_verdicts: BTreeMap<LabelId, bool> = parents.iter().map(|p| (p.clone(), rng.random_bool(0.4))).collect();
        let mut queried = BTreeMap::new();
        for c in &leaves {
            let parent_on = parent_verdicts[&c.implied_parent().unwrap()];
            if parent_on && rng.random_bool(0.8) {
                queried.insert(c.clone(), rng.random_bool(0.5));
            }
        }
        let got = fill_unqueried_children(&t, &parent_verdicts, &queried).unwrap();
        assert_eq!(got.len(), leaves.len());
        for c in &leaves {
            let want = if !parent_verdicts[&c.implied_parent().unwrap()] {
                false
            } else {
                queried.get(c).copied().unwrap_or(false)
            };
            assert_eq!(got[c], want, "{c}");
        }
    }
}

// 5. Metric oracle

struct OracleScores {
    per_label: Vec<Option<f64>>,
    macro_all: Option<f64>,
    macro_easy: Option<f64>,
    macro_noneasy: Option<f64>,
}

/// Recomputes everything pair by pair with F1 = 2TP / (2TP + FP + FN).
fn brute_force_scores(
    labels: &[LabelId],
    gold: &HashMap<String, GoldLabels>,
    rows: &[PredictionRow],
    policy: FailedPolicy,
) -> OracleScores {
    let f1_of = |filter: &dyn Fn(&GoldLabels, &LabelId) -> bool, label: &LabelId| -> Option<f64> {
        let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
        for row in rows {
            if row.failed && policy == FailedPolicy::Exclude {
                continue;
            }
            let g = &gold[&row.passage_id];
            if !filter(g, label) {
                continue;
            }
            let predicted = row.labels.as_ref().map(|m| m[label]).unwrap_or(false);
            let truth = g.labels[label];
            if predicted && truth {
                tp += 1.0;
            } else if predicted {
                fp += 1.0;
            } else if truth {
                fneg += 1.0;
            }
        }
        if tp + fneg == 0.0 || tp + fp == 0.0 {
            None
        } else {
            Some(2.0 * tp / (2.0 * tp + fp + fneg))
        }
    };
    let mean = |xs: Vec<Option<f64>>| {
        let d: Vec<f64> = xs.into_iter().flatten().collect();
        if d.is_empty() {
            None
        } else {
            Some(d.iter().sum::<f64>() / d.len() as f64)
        }
    };
    let all = |_: &GoldLabels, _: &LabelId| true;
    let easy = |g: &GoldLabels, l: &LabelId| g.easy.get(l).copied().unwrap_or(false);
    let noneasy = |g: &GoldLabels, l: &LabelId| !g.easy.get(l).copied().unwrap_or(false);
    let per_label: Vec<Option<f64>> = labels.iter().map(|l| f1_of(&all, l)).collect();
    OracleScores {
        macro_all: mean(per_label.clone()),
        per_label,
        macro_easy: mean(labels.iter().map(|l| f1_of(&easy, l)).collect()),
        macro_noneasy: mean(labels.iter().map(|l| f1_of(&noneasy, l)).collect()),
    }
}

fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(x), Some(y)) => (x - y).abs() <= 1e-9,
        _ => false,
    }
}

fn random_rows(t: &Taxonomy, corpus: &Corpus, rng: &mut ChaCha8Rng) -> Vec<PredictionRow> {
    let flip = rng.random_range(0.0..0.3);
    let fail = rng.random_range(0.0..0.2);
    corpus
        .passages
        .iter()
        .map(|p| {
            let g = corpus.gold_for(&p.passage_id).unwrap();
            let failed = rng.random_bool(fail);
            let labels = (!failed).then(|| {
                t.label_ids()
                    .into_iter()
                    .map(|l| {
                        let v = g.labels[&l] ^ rng.random_bool(flip);
                        (l, v)
                    })
                    .collect()
            });
            PredictionRow {
                passage_id: p.passage_id.clone(),
                strategy: Strategy::MultiPassBinary,
                model: MODEL.into(),
                temperature: 0.0,
                failed,
                passes: 24,
                input_tokens: 0,
                output_tokens: 0,
                cost_usd: 0.0,
                labels,
                attempts_total: 24,
            }
        })
        .collect()
}

fn metric_oracle() {
    let started = Instant::now();
    let t = Taxonomy::vaxconcerns();
    let labels = t.label_ids();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut undefined_seen = 0;
    for round in 0..100u64 {
        let spec = FixtureSpec {
            passages: 20,
            seed: 1000 + round,
            positive_rate: rng.random_range(0.2..0.9),
            easy_rate: rng.random_range(0.3..0.95),
            parent_only_rate: 0.2,
        };
        let corpus = synthetic_corpus(&t, spec);
        let gold = corpus.gold.as_ref().unwrap();
        let rows = random_rows(&t, &corpus, &mut rng);
        for policy in [FailedPolicy::Exclude, FailedPolicy::AllNegative] {
            let report = evaluation::score(&rows, &corpus, &t, policy).unwrap();
            let oracle = brute_force_scores(&labels, gold, &rows, policy);
            for (s, want) in report.per_label.iter().zip(&oracle.per_label) {
                assert!(close(s.f1, *want), "round {round} {policy:?} label {}: {:?} vs {want:?}", s.label, s.f1);
                if s.f1.is_none() {
                    undefined_seen += 1;
                }
            }
            assert!(close(report.macro_f1, oracle.macro_all), "round {round} macro");
            assert!(close(report.easy_f1, oracle.macro_easy), "round {round} easy");
            assert!(close(report.noneasy_f1, oracle.macro_noneasy), "round {round} noneasy");
            // the CSV renders undefined labels exactly as "-"
            let csv = per_label_csv(&report);
            for s in &report.per_label {
                assert!(csv.contains(&format!("\n{},{}\n", s.label, fmt_score(s.f1))));
            }
        }
    }
    assert!(undefined_seen > 0, "fixtures never produced an undefined label");

    // zero gold positives and zero predicted positives are both undefined
    let corpus = synthetic_corpus(&t, FixtureSpec { passages: 20, positive_rate: 0.0, ..Default::default() });
    let mut rows = random_rows(&t, &corpus, &mut ChaCha8Rng::seed_from_u64(0));
    for r in rows.iter_mut() {
        r.failed = false;
        r.labels = Some(t.label_ids().into_iter().map(|l| (l, false)).collect());
    }
    let report = evaluation::score(&rows, &corpus, &t, FailedPolicy::Exclude).unwrap();
    assert!(report.per_label.iter().all(|s| s.f1.is_none()));
    assert!(report.macro_f1.is_none());
    assert!(per_label_csv(&report).contains("\n1.3,-\n"));

    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
}

// 6. Cost accounting

fn cost_accounting() {
    let t = Taxonomy::vaxconcerns();
    let corpus = synthetic_corpus(&t, FixtureSpec::default());
    let rt = runtime().unwrap();
    for strategy in [Strategy::MultiPassBinary, Strategy::HrchlPassMulti, Strategy::SinglePassHrchl] {
        let orch = Orchestrator::new(SyntheticBackend::seeded(3, 0.25), t.clone(), config(strategy, 0.0, 8)).unwrap();
        let run = rt.block_on(orch.run_corpus(&corpus)).unwrap();
        let mut buf = Vec::new();
        write_predictions(&run.rows(), &mut buf).unwrap();

        let mut total = 0.0;
        let mut lines = 0;
        for line in String::from_utf8(buf).unwrap().lines() {
            let v: Value = serde_json::from_str(line).unwrap();
            let input = v["input_tokens"].as_f64().unwrap();
            let output = v["output_tokens"].as_f64().unwrap();
            let line_cost = (input * IN_PRICE + output * OUT_PRICE) / 1000.0;
            assert!((v["cost_usd"].as_f64().unwrap() - line_cost).abs() <= 1e-12);
            total += line_cost;
            lines += 1;
        }
        assert_eq!(lines, 200);
        assert!(total > 0.0);
        assert!((run.totals.cost_usd - total).abs() <= 1e-12, "{strategy}: {} vs {total}", run.totals.cost_usd);
        assert!((run.mean_cost() - total / 200.0).abs() <= 1e-12);
        let report = evaluation::score(&run.rows(), &corpus, &t, FailedPolicy::Exclude).unwrap();
        assert!((report.mean_cost_per_passage - total / 200.0).abs() <= 1e-12);
    }
}

// 7. Pareto frontier

fn dominance_oracle(points: &[ParetoPoint]) -> BTreeSet<usize> {
    (0..points.len())
        .filter(|&i| {
            !points.iter().enumerate().any(|(j, q)| {
                let p = &points[i];
                j != i && q.cost <= p.cost && q.f1 >= p.f1 && (q.cost < p.cost || q.f1 > p.f1)
            })
        })
        .collect()
}

fn pareto() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for round in 0..200 {
        let n = rng.random_range(1..=50);
        // a coarse grid makes ties common
        let grid = rng.random_bool(0.5);
        let points: Vec<ParetoPoint> = (0..n)
            .map(|i| {
                let (cost, f1) = if grid {
                    (rng.random_range(0..8) as f64 * 0.5, rng.random_range(0..8) as f64 / 8.0)
                } else {
                    (rng.random_range(0.0..20.0), rng.random_range(0.0..1.0))
                };
                ParetoPoint {
                    system_id: format!("s{i}"),
                    cost,
                    f1,
                }
            })
            .collect();
        let got: BTreeSet<String> = evaluation::pareto_frontier(&points).into_iter().map(|p| p.system_id).collect();
        let want: BTreeSet<String> = dominance_oracle(&points).into_iter().map(|i| points[i].system_id.clone()).collect();
        assert_eq!(got, want, "round {round}");
        let front = evaluation::pareto_frontier(&points);
        assert!(front.windows(2).all(|w| w[0].cost <= w[1].cost));
    }

    let pt = |id: &str, cost: f64, f1: f64| ParetoPoint {
        system_id: id.into(),
        cost,
        f1,
    };
    let seven = vec![
        pt("gpt-3.5/hrchl-pass-multi", 0.5, 0.597),
        pt("gpt-4/hrchl-pass-multi", 4.0, 0.786),
        pt("gpt-4-turbo/single-pass-hrchl", 2.0, 0.783),
        pt("gpt-4/multi-pass-binary", 20.0, 0.7865),
        pt("gpt-3.5/multi-pass-binary", 3.0, 0.618),
        pt("gpt-4/single-pass-hrchl", 9.0, 0.770),
        pt("gpt-4-turbo/multi-pass-hrchl", 5.0, 0.729),
    ];
    let front: Vec<String> = evaluation::pareto_frontier(&seven).into_iter().map(|p| p.system_id).collect();
    assert_eq!(
        front,
        vec![
            "gpt-3.5/hrchl-pass-multi",
            "gpt-4-turbo/single-pass-hrchl",
            "gpt-4/hrchl-pass-multi",
            "gpt-4/multi-pass-binary"
        ]
    );
}

// 8. Determinism

fn determinism_script(t: &Taxonomy) -> Vec<ScriptEntry> {
    let all: Vec<String> = t
        .label_ids()
        .iter()
        .enumerate()
        .map(|(i, l)| format!("\"{}\": \"{}\"", canonical_key(l), if i % 3 == 0 { "Yes" } else { "No" }))
        .collect();
    let mut entries = vec![
        ScriptEntry {
            selector: Some("toxic".into()),
            content: "not sure".into(),
        },
        ScriptEntry {
            selector: Some("Harmful Ingredients".into()),
            content: r#"{"VaxConcerns 3.2": "Yes", "VaxConcerns 3": "Yes"}"#.into(),
        },
        ScriptEntry::any("Let me think about this."),
    ];
    entries.push(ScriptEntry::any(format!("{{{}}}", all.join(", "))));
    entries
}

fn determinism() {
    let t = Taxonomy::vaxconcerns();
    let corpus = synthetic_corpus(&t, FixtureSpec { passages: 40, ..Default::default() });
    let rt = runtime().unwrap();
    for strategy in Strategy::ALL {
        let mut outputs = Vec::new();
        for concurrency in [1, 8, 1, 8] {
            let backend = ScriptedBackend::new(determinism_script(&t));
            let orch = Orchestrator::new(backend, t.clone(), config(strategy, 1.0, concurrency)).unwrap();
            let run = rt.block_on(orch.run_corpus(&corpus)).unwrap();
            let mut buf = Vec::new();
            write_predictions(&run.rows(), &mut buf).unwrap();
            outputs.push(buf);
        }
        assert!(outputs.windows(2).all(|w| w[0] == w[1]), "{strategy}: outputs differ");
    }
}

// 9. Prompt fidelity

fn prompt_fidelity() {
    let t = Taxonomy::vaxconcerns();
    let passage = Passage {
        passage_id: "p".into(),
        text: "Doctors are paid to push shots. Natural immunity is better.".into(),
    };
    let (head, tail) = SYSTEM_TEMPLATE.split_once("{concerns}").unwrap();
    assert!(head.starts_with("You are a healthcare expert."));
    assert!(head.ends_with("Here\u{2019}s the CONCERN MAP: "));
    let all_positive: BTreeMap<LabelId, bool> = t.parents().into_iter().map(|p| (p, true)).collect();

    for strategy in Strategy::ALL {
        for with_demo in [false, true] {
            let plan = plan_requests(strategy, &t, &passage, with_demo).unwrap();
            let mut requests = plan.initial.requests.clone();
            if strategy.is_hierarchical_pass() {
                requests.extend(expand_stage(strategy, &t, &all_positive, &passage, with_demo).unwrap().requests);
            }
            assert!(!requests.is_empty());
            for req in &requests {
                assert!(req.system_text.starts_with(head), "{strategy}");
                assert!(req.system_text.contains("You are a healthcare expert."));
                assert!(req.system_text.contains("Here\u{2019}s the CONCERN MAP:"));
                assert_eq!(req.user_text, format!("PASSAGE: {}", passage.text));
                let demo_at = req.system_text.find("\nHere is an example output: ");
                let body = match demo_at {
                    Some(i) => &req.system_text[..i],
                    None => req.system_text.as_str(),
                };
                assert!(body.ends_with(tail), "{strategy}: template tail altered");
                assert_eq!(demo_at.is_some(), with_demo);
                if let Some(i) = demo_at {
                    let demo = &req.system_text[i + 1..];
                    let parsed = parse_prediction(demo, &req.expected_keys).unwrap().expect("demo parses");
                    let got: BTreeSet<&String> = parsed.verdicts.keys().collect();
                    let want: BTreeSet<&String> = req.expected_keys.iter().collect();
                    assert_eq!(got, want);
                }
            }
        }
    }
}

fn main() {
    let criteria: Vec<(&str, fn())> = vec![
        ("AC1 pass-count conformance", pass_counts),
        ("AC2 parser failure taxonomy", parser_taxonomy),
        ("AC3 retry policy", retry_policy),
        ("AC4 inference oracles", inference_oracles),
        ("AC5 metric oracle", metric_oracle),
        ("AC6 cost accounting", cost_accounting),
        ("AC7 pareto frontier", pareto),
        ("AC8 determinism", determinism),
        ("AC9 prompt fidelity", prompt_fidelity),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check));
        let ms = started.elapsed().as_millis();
        match outcome {
            Ok(()) => println!("PASS  {name} ({ms} ms)"),
            Err(e) => {
                failed += 1;
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                println!("FAIL  {name} ({ms} ms): {msg}");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
