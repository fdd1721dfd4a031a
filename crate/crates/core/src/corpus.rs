//! Passage corpora with optional expert gold labels.
//!
//! Corpora are JSONL, one passage per line. Gold labels are all-or-none
//! across a file: a corpus is either fully labeled (usable for evaluation)
//! or prediction-only.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::{LabelId, Taxonomy};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("corpus line {line}: {message}")]
    Validation { line: usize, message: String },
    #[error("{0}")]
    Domain(String),
    #[error("failed to read corpus: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub passage_id: String,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Partition {
    Easy,
    NonEasy,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoldLabels {
    pub passage_id: String,
    pub labels: BTreeMap<LabelId, bool>,
    /// Pairs whose annotation was unanimous in the first round. Absent keys
    /// are NonEasy.
    pub easy: BTreeMap<LabelId, bool>,
}

impl GoldLabels {
    pub fn partition_of(&self, id: &LabelId) -> Result<Partition, CorpusError> {
        if !self.labels.contains_key(id) {
            return Err(CorpusError::Domain(format!(
                "label {id} has no gold value for passage {}",
                self.passage_id
            )));
        }
        Ok(if self.easy.get(id).copied().unwrap_or(false) {
            Partition::Easy
        } else {
            Partition::NonEasy
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    pub passages: Vec<Passage>,
    pub gold: Option<HashMap<String, GoldLabels>>,
}

#[derive(Serialize, Deserialize)]
struct CorpusLine {
    passage_id: String,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gold: Option<BTreeMap<String, bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    easy: Option<BTreeMap<String, bool>>,
}

fn label_map(
    raw: BTreeMap<String, bool>,
    taxonomy: &Taxonomy,
    line: usize,
    field: &str,
) -> Result<BTreeMap<LabelId, bool>, CorpusError> {
    raw.into_iter()
        .map(|(key, value)| {
            let id = LabelId::parse(&key)
                .ok()
                .filter(|id| taxonomy.contains(id))
                .ok_or_else(|| CorpusError::Validation {
                    line,
                    message: format!("{field} references unknown label {key:?}"),
                })?;
            Ok((id, value))
        })
        .collect()
}

impl Corpus {
    pub fn load<R: BufRead>(source: R, taxonomy: &Taxonomy) -> Result<Self, CorpusError> {
        let mut passages = Vec::new();
        let mut gold = HashMap::new();
        let mut seen = HashSet::new();
        let mut has_gold: Option<bool> = None;

        for (i, line) in source.lines().enumerate() {
            let line_no = i + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: CorpusLine =
                serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
                    line: line_no,
                    message: e.to_string(),
                })?;
            let invalid = |message: String| CorpusError::Validation {
                line: line_no,
                message,
            };
            if record.text.trim().is_empty() {
                return Err(invalid(format!("passage {} has empty text", record.passage_id)));
            }
            if !seen.insert(record.passage_id.clone()) {
                return Err(invalid(format!("duplicate passage_id {}", record.passage_id)));
            }
            match (has_gold, record.gold.is_some()) {
                (None, present) => has_gold = Some(present),
                (Some(expected), present) if expected != present => {
                    return Err(invalid(
                        "gold labels must be present on every line or on none".into(),
                    ))
                }
                _ => {}
            }
            match record.gold {
                Some(raw_gold) => {
                    let labels = label_map(raw_gold, taxonomy, line_no, "gold")?;
                    if let Some(missing) = taxonomy.label_ids().into_iter().find(|id| !labels.contains_key(id)) {
                        return Err(invalid(format!(
                            "gold labels for {} are missing label {missing}",
                            record.passage_id
                        )));
                    }
                    let easy = label_map(record.easy.unwrap_or_default(), taxonomy, line_no, "easy")?;
                    gold.insert(
                        record.passage_id.clone(),
                        GoldLabels {
                            passage_id: record.passage_id.clone(),
                            labels,
                            easy,
                        },
                    );
                }
                None if record.easy.is_some() => {
                    return Err(invalid("easy flags require gold labels".into()));
                }
                None => {}
            }
            passages.push(Passage {
                passage_id: record.passage_id,
                text: record.text,
            });
        }

        Ok(Corpus {
            passages,
            gold: has_gold.unwrap_or(false).then_some(gold),
        })
    }

    pub fn from_jsonl_str(text: &str, taxonomy: &Taxonomy) -> Result<Self, CorpusError> {
        Self::load(text.as_bytes(), taxonomy)
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for passage in &self.passages {
            let gold = self
                .gold
                .as_ref()
                .and_then(|g| g.get(&passage.passage_id));
            let line = CorpusLine {
                passage_id: passage.passage_id.clone(),
                text: passage.text.clone(),
                gold: gold.map(|g| {
                    g.labels
                        .iter()
                        .map(|(k, v)| (k.to_string(), *v))
                        .collect()
                }),
                easy: gold.map(|g| g.easy.iter().map(|(k, v)| (k.to_string(), *v)).collect()),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn passage(&self, passage_id: &str) -> Option<&Passage> {
        self.passages.iter().find(|p| p.passage_id == passage_id)
    }

    pub fn gold_for(&self, passage_id: &str) -> Option<&GoldLabels> {
        self.gold.as_ref()?.get(passage_id)
    }

    /// Number of (passage, label) pairs with gold values.
    pub fn pair_count(&self) -> usize {
        self.gold
            .as_ref()
            .map(|g| g.values().map(|labels| labels.labels.len()).sum())
            .unwrap_or(0)
    }
}
