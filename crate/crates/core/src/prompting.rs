//! Prompt rendering and per-strategy request planning.
//!
//! Every request is zero-shot and self-contained: a system prompt carrying
//! the concern map for the targeted labels (optionally followed by a format
//! demonstration) and a user prompt carrying the passage. Nothing from one
//! request is ever replayed into another.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Passage;
use crate::taxonomy::{canonical_key, LabelId, Taxonomy};

pub const SYSTEM_TEMPLATE: &str = "You are a healthcare expert. Your job is to find out vaccine related concerns from a given PARAGRAPH. You will be given a map of all concerns, where the key is as VaxConcerns_1.1 and values are the actual concerns. Here\u{2019}s the CONCERN MAP: {concerns} Please read the PARAGRAPH and tell me whether the concern is mentioned in the PARAGRAPH one by one. In your response, only return a map, same length as the CONCERN MAP, with the key exactly the one in the map, values as Yes or No.";

pub const USER_PREFIX: &str = "PASSAGE: ";

const DEMO_PREFIX: &str = "Here is an example output: ";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("unknown label {0}")]
    UnknownLabel(LabelId),
    #[error("no labels to render")]
    EmptyLabels,
    #[error("{0}")]
    Domain(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    SinglePassHrchl,
    SinglePassMulti,
    MultiPassHrchl,
    MultiPassMulti,
    MultiPassBinary,
    HrchlPassMulti,
    HrchlPassBinary,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::SinglePassHrchl,
        Strategy::SinglePassMulti,
        Strategy::MultiPassHrchl,
        Strategy::MultiPassMulti,
        Strategy::MultiPassBinary,
        Strategy::HrchlPassMulti,
        Strategy::HrchlPassBinary,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::SinglePassHrchl => "single-pass-hrchl",
            Strategy::SinglePassMulti => "single-pass-multi",
            Strategy::MultiPassHrchl => "multi-pass-hrchl",
            Strategy::MultiPassMulti => "multi-pass-multi",
            Strategy::MultiPassBinary => "multi-pass-binary",
            Strategy::HrchlPassMulti => "hrchl-pass-multi",
            Strategy::HrchlPassBinary => "hrchl-pass-binary",
        }
    }

    /// Strategies that condition child requests on parent verdicts.
    pub fn is_hierarchical_pass(self) -> bool {
        matches!(self, Strategy::HrchlPassMulti | Strategy::HrchlPassBinary)
    }

    /// Strategies that never ask for parents and infer them from children.
    pub fn infers_parents(self) -> bool {
        matches!(self, Strategy::SinglePassMulti | Strategy::MultiPassMulti)
    }

    /// Whether the concern map nests children under their parent.
    pub fn structured_labels(self) -> bool {
        matches!(self, Strategy::SinglePassHrchl | Strategy::MultiPassHrchl)
    }

    /// Format demonstrations are on by default only for single-pass runs.
    pub fn default_with_demo(self) -> bool {
        matches!(self, Strategy::SinglePassHrchl | Strategy::SinglePassMulti)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = PromptError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Strategy::ALL.iter().map(|s| s.name()).collect();
                PromptError::Domain(format!(
                    "unknown strategy {s:?}; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptRequest {
    pub system_text: String,
    pub user_text: String,
    pub expected_keys: Vec<String>,
    pub target_labels: Vec<LabelId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum StageKind {
    Initial,
    Expansion,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Stage {
    pub kind: StageKind,
    pub requests: Vec<PromptRequest>,
}

impl Stage {
    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }

    pub fn len(&self) -> usize {
        self.requests.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ExpansionRule {
    None,
    /// After the initial stage, query the children of every parent that came
    /// back positive: one multi-label request per parent for
    /// `HrchlPassMulti`, one binary request per child for `HrchlPassBinary`.
    ChildrenOfPositiveParents,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RequestPlan {
    pub strategy: Strategy,
    pub initial: Stage,
    pub expansion: ExpansionRule,
}

fn ordered_labels(t: &Taxonomy, labels: &[LabelId]) -> Result<Vec<LabelId>, PromptError> {
    if labels.is_empty() {
        return Err(PromptError::EmptyLabels);
    }
    let mut seen = HashSet::new();
    let mut positioned = Vec::with_capacity(labels.len());
    for id in labels {
        let pos = t
            .position(id)
            .ok_or_else(|| PromptError::UnknownLabel(id.clone()))?;
        if seen.insert(id) {
            positioned.push((pos, id.clone()));
        }
    }
    positioned.sort_by_key(|(pos, _)| *pos);
    Ok(positioned.into_iter().map(|(_, id)| id).collect())
}

/// Renders the concern map for `labels`, one label per line in taxonomy
/// order. With `structured`, Level-2 lines are indented under their parent.
pub fn build_concern_map(
    t: &Taxonomy,
    labels: &[LabelId],
    structured: bool,
) -> Result<String, PromptError> {
    let ordered = ordered_labels(t, labels)?;
    let lines: Vec<String> = ordered
        .iter()
        .map(|id| {
            let node = t.node(id).expect("label checked above");
            let indent = if structured && !id.is_parent() { "    " } else { "" };
            format!(
                "{indent}{}: {} \u{2014} {}",
                canonical_key(id),
                node.name,
                node.description
            )
        })
        .collect();
    Ok(lines.join("\n"))
}

/// `Here is an example output: {...}` with "Yes" in the first and fourth
/// positions and "No" everywhere else.
pub fn render_format_demonstration(keys: &[String]) -> String {
    let entries: Vec<String> = keys
        .iter()
        .enumerate()
        .map(|(i, key)| {
            let value = if i == 0 || i == 3 { "Yes" } else { "No" };
            format!("\"{key}\": \"{value}\"")
        })
        .collect();
    format!("{DEMO_PREFIX}{{{}}}", entries.join(", "))
}

pub fn render_request(
    t: &Taxonomy,
    labels: &[LabelId],
    structured: bool,
    passage: &Passage,
    with_demo: bool,
) -> Result<PromptRequest, PromptError> {
    let target_labels = ordered_labels(t, labels)?;
    let concern_map = build_concern_map(t, &target_labels, structured)?;
    let expected_keys: Vec<String> = target_labels.iter().map(canonical_key).collect();
    let mut system_text = SYSTEM_TEMPLATE.replace("{concerns}", &concern_map);
    if with_demo {
        system_text.push('\n');
        system_text.push_str(&render_format_demonstration(&expected_keys));
    }
    Ok(PromptRequest {
        system_text,
        user_text: format!("{USER_PREFIX}{}", passage.text),
        expected_keys,
        target_labels,
    })
}

fn with_children(t: &Taxonomy, parent: &LabelId) -> Vec<LabelId> {
    let mut group = vec![parent.clone()];
    group.extend(t.children_of(parent).expect("parent from taxonomy"));
    group
}

pub fn plan_requests(
    strategy: Strategy,
    t: &Taxonomy,
    passage: &Passage,
    with_demo: bool,
) -> Result<RequestPlan, PromptError> {
    let structured = strategy.structured_labels();
    let parents = t.parents();
    let groups: Vec<Vec<LabelId>> = match strategy {
        Strategy::SinglePassHrchl => vec![t.label_ids()],
        Strategy::SinglePassMulti => {
            let leaves = t.leaf_labels();
            if leaves.is_empty() {
                vec![]
            } else {
                vec![leaves]
            }
        }
        Strategy::MultiPassHrchl => parents.iter().map(|p| with_children(t, p)).collect(),
        // Childless parents have nothing to ask about and are inferred false.
        Strategy::MultiPassMulti => parents
            .iter()
            .map(|p| t.children_of(p).expect("parent from taxonomy"))
            .filter(|children| !children.is_empty())
            .collect(),
        Strategy::MultiPassBinary => t.label_ids().into_iter().map(|id| vec![id]).collect(),
        Strategy::HrchlPassMulti => {
            if parents.is_empty() {
                vec![]
            } else {
                vec![parents]
            }
        }
        Strategy::HrchlPassBinary => parents.into_iter().map(|p| vec![p]).collect(),
    };
    let requests = groups
        .iter()
        .map(|labels| render_request(t, labels, structured, passage, with_demo))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RequestPlan {
        strategy,
        initial: Stage {
            kind: StageKind::Initial,
            requests,
        },
        expansion: if strategy.is_hierarchical_pass() {
            ExpansionRule::ChildrenOfPositiveParents
        } else {
            ExpansionRule::None
        },
    })
}

/// Builds the conditional child stage of a hierarchical-pass strategy.
pub fn expand_stage(
    strategy: Strategy,
    t: &Taxonomy,
    parent_verdicts: &BTreeMap<LabelId, bool>,
    passage: &Passage,
    with_demo: bool,
) -> Result<Stage, PromptError> {
    if !strategy.is_hierarchical_pass() {
        return Err(PromptError::Domain(format!(
            "{strategy} has no expansion stage"
        )));
    }
    let mut requests = Vec::new();
    for parent in t.parents() {
        let positive = parent_verdicts.get(&parent).copied().ok_or_else(|| {
            PromptError::Domain(format!("missing verdict for parent {parent}"))
        })?;
        if !positive {
            continue;
        }
        let children = t.children_of(&parent).expect("parent from taxonomy");
        if children.is_empty() {
            continue;
        }
        match strategy {
            Strategy::HrchlPassMulti => {
                requests.push(render_request(t, &children, false, passage, with_demo)?)
            }
            _ => {
                for child in children {
                    requests.push(render_request(t, &[child], false, passage, with_demo)?);
                }
            }
        }
    }
    Ok(Stage {
        kind: StageKind::Expansion,
        requests,
    })
}
