//! Extraction of Yes/No verdict maps from raw model text.
//!
//! Model output is noisy: dictionaries arrive wrapped in prose or code
//! fences, with single quotes, with underscores in keys, or cut short.
//! [`parse_prediction`] accepts the benign variations and sorts everything
//! else into one of two failure kinds.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::debug;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParseFailureKind {
    /// No dictionary could be recovered, or a verdict was not Yes/No.
    FormatError,
    /// A valid dictionary that lacks one or more requested keys.
    IncompletePrediction,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind:?}: {detail}")]
pub struct ParseFailure {
    pub kind: ParseFailureKind,
    pub detail: String,
}

impl ParseFailure {
    fn format(detail: impl Into<String>) -> Self {
        ParseFailure {
            kind: ParseFailureKind::FormatError,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("parse_prediction requires at least one expected key")]
pub struct EmptyExpectedKeys;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParsedPrediction {
    /// Exactly the expected keys, `true` for "Yes".
    pub verdicts: BTreeMap<String, bool>,
    /// Keys the model returned that were not asked for.
    pub extra_keys: Vec<String>,
    /// Keys that appeared more than once (the last occurrence was kept).
    pub duplicate_keys: Vec<String>,
}

/// Parses `content` against `expected_keys`.
///
/// The outer `Result` is only an error for an empty key set; the inner one
/// carries the classification of the model output.
pub fn parse_prediction(
    content: &str,
    expected_keys: &[String],
) -> Result<Result<ParsedPrediction, ParseFailure>, EmptyExpectedKeys> {
    if expected_keys.is_empty() {
        return Err(EmptyExpectedKeys);
    }
    Ok(classify(content, expected_keys))
}

fn classify(content: &str, expected_keys: &[String]) -> Result<ParsedPrediction, ParseFailure> {
    let body = strip_code_fences(content);
    let block = first_balanced_block(body)
        .ok_or_else(|| ParseFailure::format("no balanced {...} block in output"))?;
    let pairs = parse_object(block).map_err(ParseFailure::format)?;

    let mut values: HashMap<String, String> = HashMap::new();
    let mut order: Vec<String> = Vec::new();
    let mut duplicate_keys = Vec::new();
    for (raw_key, value) in pairs {
        let key = normalize_key(&raw_key);
        if values.insert(key.clone(), value).is_some() {
            if !duplicate_keys.contains(&key) {
                duplicate_keys.push(key);
            }
        } else {
            order.push(key);
        }
    }

    let mut verdicts = BTreeMap::new();
    let mut missing = Vec::new();
    for expected in expected_keys {
        let wanted = normalize_key(expected);
        match values.get(&wanted) {
            Some(value) => match value.trim().to_ascii_lowercase().as_str() {
                "yes" => {
                    verdicts.insert(expected.clone(), true);
                }
                "no" => {
                    verdicts.insert(expected.clone(), false);
                }
                _ => {
                    return Err(ParseFailure::format(format!(
                        "value {value:?} for {expected:?} is not Yes or No"
                    )))
                }
            },
            None => missing.push(expected.clone()),
        }
    }

    let normalized_expected: Vec<String> = expected_keys.iter().map(|k| normalize_key(k)).collect();
    let extra_keys: Vec<String> = order
        .into_iter()
        .filter(|k| !normalized_expected.contains(k))
        .collect();

    if !missing.is_empty() {
        return Err(ParseFailure {
            kind: ParseFailureKind::IncompletePrediction,
            detail: format!(
                "missing {} of {} keys: {}",
                missing.len(),
                expected_keys.len(),
                missing.join(", ")
            ),
        });
    }
    if !extra_keys.is_empty() {
        debug!(extra = extra_keys.len(), "ignoring unrequested keys");
    }
    if !duplicate_keys.is_empty() {
        debug!(duplicates = ?duplicate_keys, "duplicate keys, last occurrence kept");
    }
    Ok(ParsedPrediction {
        verdicts,
        extra_keys,
        duplicate_keys,
    })
}

/// Trims, maps `_` to a space, and collapses runs of whitespace.
pub fn normalize_key(key: &str) -> String {
    key.replace('_', " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Returns the inside of the first fenced block that contains a `{`, or the
/// whole text when there is none.
fn strip_code_fences(text: &str) -> &str {
    let mut rest = text;
    while let Some(open) = rest.find("```") {
        let after = &rest[open + 3..];
        // skip an info string such as `json`
        let body_start = after
            .find(|c: char| !c.is_ascii_alphanumeric())
            .unwrap_or(after.len());
        let body = &after[body_start..];
        match body.find("```") {
            Some(close) => {
                let inner = &body[..close];
                if inner.contains('{') {
                    return inner;
                }
                rest = &body[close + 3..];
            }
            None => {
                // unterminated fence: everything after it is the body
                return if body.contains('{') { body } else { text };
            }
        }
    }
    text
}

/// The first `{...}` span with balanced braces, ignoring braces inside
/// quoted strings.
fn first_balanced_block(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut quote: Option<char> = None;
    let mut escaped = false;
    for (offset, c) in text[start..].char_indices() {
        if let Some(q) = quote {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == q {
                quote = None;
            }
            continue;
        }
        match c {
            '"' | '\'' => quote = Some(c),
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + offset + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

struct Cursor<'a> {
    chars: std::iter::Peekable<std::str::Chars<'a>>,
}

impl Cursor<'_> {
    fn skip_ws(&mut self) {
        while self.chars.next_if(|c| c.is_whitespace()).is_some() {}
    }

    fn expect(&mut self, want: char) -> Result<(), String> {
        self.skip_ws();
        match self.chars.next() {
            Some(c) if c == want => Ok(()),
            Some(c) => Err(format!("expected {want:?}, found {c:?}")),
            None => Err(format!("expected {want:?}, found end of block")),
        }
    }

    fn string(&mut self) -> Result<String, String> {
        self.skip_ws();
        let quote = match self.chars.next() {
            Some(q @ ('"' | '\'')) => q,
            Some(c) => return Err(format!("expected a quoted string, found {c:?}")),
            None => return Err("expected a quoted string, found end of block".into()),
        };
        let mut out = String::new();
        loop {
            match self.chars.next() {
                Some('\\') => match self.chars.next() {
                    Some('n') => out.push('\n'),
                    Some('t') => out.push('\t'),
                    Some(c) => out.push(c),
                    None => return Err("unterminated string".into()),
                },
                Some(c) if c == quote => return Ok(out),
                Some(c) => out.push(c),
                None => return Err("unterminated string".into()),
            }
        }
    }
}

/// Parses a flat object of quoted keys to quoted values, in source order.
/// A trailing comma is accepted.
fn parse_object(block: &str) -> Result<Vec<(String, String)>, String> {
    let mut cur = Cursor {
        chars: block.chars().peekable(),
    };
    cur.expect('{')?;
    let mut pairs = Vec::new();
    loop {
        cur.skip_ws();
        if cur.chars.next_if_eq(&'}').is_some() {
            break;
        }
        let key = cur.string()?;
        cur.expect(':')?;
        let value = cur.string()?;
        pairs.push((key, value));
        cur.skip_ws();
        match cur.chars.next() {
            Some(',') => continue,
            Some('}') => break,
            Some(c) => return Err(format!("expected ',' or '}}', found {c:?}")),
            None => return Err("unterminated object".into()),
        }
    }
    Ok(pairs)
}
