//! The two-level concern taxonomy.
//!
//! Every other module keys on [`LabelId`]. A taxonomy is loaded from a JSON
//! file whose node order is significant: prompts enumerate labels in file
//! order, so the order must survive a load/emit round trip unchanged.

use std::collections::HashMap;
use std::fmt;
use std::io::Read;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Prefix used for every label key in prompts and model outputs.
pub const KEY_PREFIX: &str = "VaxConcerns";

const DEFAULT_TAXONOMY: &str = include_str!("../data/vaxconcerns.json");

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("taxonomy parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid taxonomy label {id:?}: {message}")]
    Validation { id: String, message: String },
    #[error("{0}")]
    Domain(String),
    #[error("failed to read taxonomy: {0}")]
    Io(#[from] std::io::Error),
}

/// A dotted label id: `"N"` for parents, `"N.M"` for children.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LabelId(String);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Parent,
    Child,
}

impl LabelId {
    pub fn parse(s: &str) -> Result<Self, TaxonomyError> {
        let segments: Vec<&str> = s.split('.').collect();
        let valid_segment = |seg: &&str| !seg.is_empty() && seg.bytes().all(|b| b.is_ascii_digit());
        if segments.len() > 2 {
            return Err(TaxonomyError::Validation {
                id: s.to_string(),
                message: "taxonomy depth is limited to two levels".into(),
            });
        }
        if !segments.iter().all(valid_segment) {
            return Err(TaxonomyError::Validation {
                id: s.to_string(),
                message: "expected dotted decimal id like \"3\" or \"3.2\"".into(),
            });
        }
        Ok(LabelId(s.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn level(&self) -> Level {
        if self.0.contains('.') {
            Level::Child
        } else {
            Level::Parent
        }
    }

    pub fn is_parent(&self) -> bool {
        self.level() == Level::Parent
    }

    /// The parent id implied by the prefix; `None` for Level-1 ids.
    pub fn implied_parent(&self) -> Option<LabelId> {
        self.0
            .split_once('.')
            .map(|(head, _)| LabelId(head.to_string()))
    }
}

impl FromStr for LabelId {
    type Err = TaxonomyError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LabelId::parse(s)
    }
}

impl fmt::Display for LabelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for LabelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl Serialize for LabelId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for LabelId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        LabelId::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// The exact key used for `id` in prompts and expected in model output.
pub fn canonical_key(id: &LabelId) -> String {
    format!("{KEY_PREFIX} {}", id.as_str())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelNode {
    pub id: LabelId,
    pub name: String,
    pub description: String,
    pub parent: Option<LabelId>,
}

#[derive(Serialize)]
struct TaxonomyFile<'a> {
    labels: &'a [LabelNode],
}

#[derive(Deserialize)]
struct RawTaxonomyFile {
    labels: Vec<RawNode>,
}

#[derive(Deserialize)]
struct RawNode {
    id: String,
    name: String,
    description: String,
    parent: Option<String>,
}

impl RawNode {
    fn into_node(self) -> Result<LabelNode, TaxonomyError> {
        let id = LabelId::parse(&self.id)?;
        let parent = match self.parent {
            Some(p) => Some(LabelId::parse(&p).map_err(|_| TaxonomyError::Validation {
                id: self.id.clone(),
                message: format!("invalid parent id {p:?}"),
            })?),
            None => None,
        };
        Ok(LabelNode {
            id,
            name: self.name,
            description: self.description,
            parent,
        })
    }
}

/// An immutable, validated two-level label tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Taxonomy {
    nodes: Vec<LabelNode>,
    index: HashMap<LabelId, usize>,
}

impl Taxonomy {
    /// The bundled VaxConcerns taxonomy (5 parents, 19 children).
    ///
    /// Label names follow the published taxonomy; the descriptions are
    /// paraphrases of those names written for this crate.
    pub fn vaxconcerns() -> Self {
        Self::from_json_str(DEFAULT_TAXONOMY).expect("bundled taxonomy is valid")
    }

    pub fn load<R: Read>(mut source: R) -> Result<Self, TaxonomyError> {
        let mut text = String::new();
        source.read_to_string(&mut text)?;
        Self::from_json_str(&text)
    }

    pub fn from_json_str(text: &str) -> Result<Self, TaxonomyError> {
        let file: RawTaxonomyFile =
            serde_json::from_str(text).map_err(|e| TaxonomyError::Parse {
                line: e.line(),
                message: e.to_string(),
            })?;
        let nodes = file
            .labels
            .into_iter()
            .map(RawNode::into_node)
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_nodes(nodes)
    }

    pub fn from_nodes(nodes: Vec<LabelNode>) -> Result<Self, TaxonomyError> {
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, node) in nodes.iter().enumerate() {
            let invalid = |message: &str| TaxonomyError::Validation {
                id: node.id.to_string(),
                message: message.to_string(),
            };
            if index.insert(node.id.clone(), i).is_some() {
                return Err(invalid("duplicate id"));
            }
            if node.name.trim().is_empty() {
                return Err(invalid("name is empty"));
            }
            if node.description.trim().is_empty() {
                return Err(invalid("description is empty"));
            }
            match (node.id.implied_parent(), &node.parent) {
                (None, None) => {}
                (None, Some(_)) => return Err(invalid("Level-1 label must not have a parent")),
                (Some(_), None) => return Err(invalid("Level-2 label requires a parent")),
                (Some(implied), Some(parent)) if implied != *parent => {
                    return Err(invalid("parent does not match the id prefix"))
                }
                (Some(_), Some(_)) => {}
            }
        }
        for node in &nodes {
            if let Some(parent) = &node.parent {
                if !index.contains_key(parent) {
                    return Err(TaxonomyError::Validation {
                        id: node.id.to_string(),
                        message: format!("parent {parent} does not exist"),
                    });
                }
            }
        }
        Ok(Taxonomy { nodes, index })
    }

    pub fn to_json_string(&self) -> String {
        let file = TaxonomyFile {
            labels: &self.nodes,
        };
        serde_json::to_string_pretty(&file).expect("taxonomy serializes")
    }

    pub fn nodes(&self) -> &[LabelNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, id: &LabelId) -> bool {
        self.index.contains_key(id)
    }

    pub fn node(&self, id: &LabelId) -> Option<&LabelNode> {
        self.index.get(id).map(|&i| &self.nodes[i])
    }

    /// Position of `id` in file order.
    pub fn position(&self, id: &LabelId) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// All label ids in file order.
    pub fn label_ids(&self) -> Vec<LabelId> {
        self.nodes.iter().map(|n| n.id.clone()).collect()
    }

    pub fn parents(&self) -> Vec<LabelId> {
        self.nodes
            .iter()
            .filter(|n| n.parent.is_none())
            .map(|n| n.id.clone())
            .collect()
    }

    pub fn leaf_labels(&self) -> Vec<LabelId> {
        self.nodes
            .iter()
            .filter(|n| n.parent.is_some())
            .map(|n| n.id.clone())
            .collect()
    }

    pub fn children_of(&self, parent: &LabelId) -> Result<Vec<LabelId>, TaxonomyError> {
        match self.node(parent) {
            Some(node) if node.parent.is_none() => Ok(self
                .nodes
                .iter()
                .filter(|n| n.parent.as_ref() == Some(parent))
                .map(|n| n.id.clone())
                .collect()),
            Some(_) => Err(TaxonomyError::Domain(format!(
                "{parent} is not a Level-1 label"
            ))),
            None => Err(TaxonomyError::Domain(format!("unknown label {parent}"))),
        }
    }

    /// Looks up a label by its canonical key (`"VaxConcerns 2.3"`).
    pub fn id_for_key(&self, key: &str) -> Option<LabelId> {
        let rest = key.strip_prefix(KEY_PREFIX)?.strip_prefix(' ')?;
        let id = LabelId::parse(rest).ok()?;
        self.contains(&id).then_some(id)
    }
}
