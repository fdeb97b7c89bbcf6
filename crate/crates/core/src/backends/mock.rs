//! Table-driven mock backend for deterministic runs.
//!
//! A table file is JSON:
//!
//! ```json
//! {
//!   "fallback": { "kind": "hash" },
//!   "self_entailment": true,
//!   "cooperative": true,
//!   "entries": [
//!     { "role": "vlm", "image": "img_A", "text": "a bird", "probability": 0.9 },
//!     { "role": "llm", "premise": "bird eats snake", "hypothesis": "snake in bird's mouth", "logits": [4.6, 0.0] },
//!     { "role": "judge", "statement": "...", "conclusion": "...", "with_image": true, "probability": 0.98 },
//!     { "role": "llm", "caption": "bird eats snake", "completion": "1. bird eats 2. snake gets eaten" },
//!     { "role": "llm", "caption": "bird eats snake", "node": "bird eats", "completion": "1. ..." },
//!     { "role": "llm", "prompt": "exact rendered prompt", "completion": "..." }
//!   ]
//! }
//! ```
//!
//! Lookup tries the structured key first and then the exact rendered
//! prompt. Misses fall through to `self_entailment` (equal texts answer
//! with near-certain yes), then `fallback` for yes/no questions, or
//! `cooperative` list generation for decomposition and expansion. A table
//! with fallback `none` and `cooperative: false` is strict.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelBackend, Query, Request, Role, YesNoLogits};
use crate::error::{Error, Result};

/// Logits returned for self-entailment: p(yes) = 1 / (1 + e^-20).
pub const SELF_ENTAILMENT_LOGITS: YesNoLogits = YesNoLogits {
    logit_yes: 10.0,
    logit_no: -10.0,
};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Fallback {
    #[default]
    None,
    Constant {
        probability: f64,
    },
    /// Probability in [0.02, 0.98] derived from a digest of the query.
    Hash,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockEntry {
    pub role: Option<Role>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub premise: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hypothesis: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub statement: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conclusion: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub with_image: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probability: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion: Option<String>,
}

impl MockEntry {
    pub fn visual(image: &str, text: &str, probability: f64) -> Self {
        Self {
            role: Some(Role::Vlm),
            image: Some(image.into()),
            text: Some(text.into()),
            probability: Some(probability),
            ..Default::default()
        }
    }

    pub fn entail(premise: &str, hypothesis: &str, probability: f64) -> Self {
        Self {
            role: Some(Role::Llm),
            premise: Some(premise.into()),
            hypothesis: Some(hypothesis.into()),
            probability: Some(probability),
            ..Default::default()
        }
    }

    pub fn judge(statement: &str, conclusion: &str, with_image: Option<bool>, probability: f64) -> Self {
        Self {
            role: Some(Role::Judge),
            statement: Some(statement.into()),
            conclusion: Some(conclusion.into()),
            with_image,
            probability: Some(probability),
            ..Default::default()
        }
    }

    pub fn decomposition(caption: &str, completion: &str) -> Self {
        Self {
            role: Some(Role::Llm),
            caption: Some(caption.into()),
            completion: Some(completion.into()),
            ..Default::default()
        }
    }

    pub fn expansion(caption: &str, node: &str, completion: &str) -> Self {
        Self {
            node: Some(node.into()),
            ..Self::decomposition(caption, completion)
        }
    }

    pub fn prompt(role: Role, prompt: &str, completion: &str) -> Self {
        Self {
            role: Some(role),
            prompt: Some(prompt.into()),
            completion: Some(completion.into()),
            ..Default::default()
        }
    }

    pub fn with_logits(mut self, yes: f64, no: f64) -> Self {
        self.probability = None;
        self.logits = Some([yes, no]);
        self
    }

    fn key(&self) -> Result<String> {
        let k = if let Some(p) = &self.prompt {
            prompt_key(p)
        } else if let (Some(i), Some(t)) = (&self.image, &self.text) {
            visual_key(i, t)
        } else if let (Some(p), Some(h)) = (&self.premise, &self.hypothesis) {
            entail_key(p, h)
        } else if let (Some(s), Some(c)) = (&self.statement, &self.conclusion) {
            judge_key(s, c, self.with_image)
        } else if let Some(c) = &self.caption {
            match &self.node {
                Some(n) => expand_key(n, c),
                None => decompose_key(c),
            }
        } else {
            return Err(Error::Schema(format!("mock entry has no usable key: {self:?}")));
        };
        Ok(k)
    }

    fn value(&self) -> Result<MockValue> {
        match (self.logits, self.probability, &self.completion) {
            (Some([y, n]), None, None) => Ok(MockValue::Logits(YesNoLogits::new(y, n)?)),
            (None, Some(p), None) => Ok(MockValue::Logits(YesNoLogits::from_probability(p)?)),
            (None, None, Some(c)) => Ok(MockValue::Completion(c.clone())),
            _ => Err(Error::Schema(
                "mock entry needs exactly one of logits, probability, completion".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum MockValue {
    Logits(YesNoLogits),
    Completion(String),
}

fn prompt_key(p: &str) -> String {
    serde_json::json!(["prompt", p]).to_string()
}
fn visual_key(image: &str, text: &str) -> String {
    serde_json::json!(["visual", image, text]).to_string()
}
fn entail_key(p: &str, h: &str) -> String {
    serde_json::json!(["entail", p, h]).to_string()
}
fn judge_key(s: &str, c: &str, with_image: Option<bool>) -> String {
    serde_json::json!(["judge", s, c, with_image]).to_string()
}
fn decompose_key(c: &str) -> String {
    serde_json::json!(["decompose", c]).to_string()
}
fn expand_key(n: &str, c: &str) -> String {
    serde_json::json!(["expand", n, c]).to_string()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockTable {
    #[serde(default)]
    pub fallback: Fallback,
    #[serde(default)]
    pub self_entailment: bool,
    #[serde(default)]
    pub cooperative: bool,
    #[serde(default)]
    pub entries: Vec<MockEntry>,
}

impl MockTable {
    /// A strict table: only scripted entries answer.
    pub fn strict() -> Self {
        Self::default()
    }

    /// Answers everything: hashed probabilities, self-entailment and
    /// cooperative list generation.
    pub fn cooperative() -> Self {
        Self {
            fallback: Fallback::Hash,
            self_entailment: true,
            cooperative: true,
            entries: Vec::new(),
        }
    }

    pub fn with_entry(mut self, entry: MockEntry) -> Self {
        self.entries.push(entry);
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let table: Self = serde_json::from_str(text)
            .map_err(|e| Error::Schema(format!("mock table: {e}")))?;
        table.compile()?;
        Ok(table)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::InvalidInput(format!("cannot read mock table {}: {e}", path.display()))
        })?;
        Self::from_json(&text)
    }

    fn compile(&self) -> Result<Compiled> {
        if let Fallback::Constant { probability } = self.fallback {
            YesNoLogits::from_probability(probability)?;
        }
        let mut map = HashMap::new();
        for entry in &self.entries {
            let role = entry
                .role
                .ok_or_else(|| Error::Schema(format!("mock entry missing role: {entry:?}")))?;
            map.insert((role, entry.key()?), entry.value()?);
        }
        let canonical = serde_json::to_vec(self)?;
        Ok(Compiled {
            map,
            digest: hex::encode(Sha256::digest(&canonical))[..16].to_owned(),
        })
    }
}

#[derive(Debug)]
struct Compiled {
    map: HashMap<(Role, String), MockValue>,
    digest: String,
}

/// One role's view of a [`MockTable`]. Counts the calls it answers.
#[derive(Debug)]
pub struct MockBackend {
    role: Role,
    table: Arc<MockTable>,
    compiled: Arc<Compiled>,
    calls: AtomicUsize,
}

impl MockBackend {
    pub fn new(table: MockTable, role: Role) -> Result<Self> {
        Self::shared(Arc::new(table), role)
    }

    pub fn shared(table: Arc<MockTable>, role: Role) -> Result<Self> {
        let compiled = Arc::new(table.compile()?);
        Ok(Self {
            role,
            table,
            compiled,
            calls: AtomicUsize::new(0),
        })
    }

    /// One backend per role sharing a single compiled table.
    pub fn trio(table: MockTable) -> Result<[Arc<MockBackend>; 3]> {
        let table = Arc::new(table);
        let compiled = Arc::new(table.compile()?);
        let make = |role| {
            Arc::new(MockBackend {
                role,
                table: table.clone(),
                compiled: compiled.clone(),
                calls: AtomicUsize::new(0),
            })
        };
        Ok([make(Role::Llm), make(Role::Vlm), make(Role::Judge)])
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn structured_keys(query: &Query) -> Vec<String> {
        match query {
            Query::Visual { image, statement } => vec![visual_key(image.reference(), statement)],
            Query::Entail {
                premise,
                hypothesis,
            } => vec![entail_key(premise, hypothesis)],
            Query::Judge {
                statement,
                conclusion,
                image,
            } => vec![
                judge_key(statement, conclusion, Some(image.is_some())),
                judge_key(statement, conclusion, None),
            ],
            Query::Decompose { caption, .. } => vec![decompose_key(caption)],
            Query::Expand { node, caption, .. } => vec![expand_key(node, caption)],
            Query::Free => Vec::new(),
        }
    }

    fn lookup(&self, request: &Request) -> Option<&MockValue> {
        Self::structured_keys(&request.query)
            .into_iter()
            .chain(std::iter::once(prompt_key(&request.prompt.text)))
            .find_map(|k| self.compiled.map.get(&(self.role, k)))
    }

    fn is_self_entailment(query: &Query) -> bool {
        match query {
            Query::Entail {
                premise,
                hypothesis,
            } => premise == hypothesis,
            Query::Judge {
                statement,
                conclusion,
                ..
            } => statement == conclusion,
            _ => false,
        }
    }

    fn hashed_probability(&self, request: &Request) -> f64 {
        let mut h = Sha256::new();
        h.update(self.role.to_string().as_bytes());
        h.update([0]);
        h.update(request.prompt.text.as_bytes());
        let d = h.finalize();
        let mut word = [0u8; 8];
        word.copy_from_slice(&d[..8]);
        let x = u64::from_le_bytes(word) % 9601;
        0.02 + x as f64 / 10_000.0
    }
}

/// Items a cooperative mock lists for an expansion: `"{node} / {i}"`.
pub fn cooperative_expansion(node: &str, s: usize) -> Vec<String> {
    (1..=s).map(|i| format!("{node} / {i}")).collect()
}

/// Entities a cooperative mock lists for a decomposition.
pub fn cooperative_decomposition(caption: &str, m: usize) -> Vec<String> {
    (1..=m).map(|i| format!("{caption} (part {i})")).collect()
}

fn numbered(items: &[String]) -> String {
    items
        .iter()
        .enumerate()
        .map(|(i, t)| format!("{}. {t}", i + 1))
        .collect::<Vec<_>>()
        .join("\n")
}

impl ModelBackend for MockBackend {
    fn identity(&self) -> String {
        format!("mock:{}:{}", self.role, self.compiled.digest)
    }

    fn yes_no(&self, request: &Request) -> Result<YesNoLogits> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        match self.lookup(request) {
            Some(MockValue::Logits(l)) => return Ok(*l),
            Some(MockValue::Completion(_)) => {
                return Err(Error::Protocol {
                    backend: self.identity(),
                    message: "scripted completion where logits were expected".into(),
                })
            }
            None => {}
        }
        if self.table.self_entailment && Self::is_self_entailment(&request.query) {
            return Ok(SELF_ENTAILMENT_LOGITS);
        }
        match &self.table.fallback {
            Fallback::None => Err(Error::Protocol {
                backend: self.identity(),
                message: format!("no scripted logits for prompt {:?}", request.prompt.text),
            }),
            Fallback::Constant { probability } => YesNoLogits::from_probability(*probability),
            Fallback::Hash => YesNoLogits::from_probability(self.hashed_probability(request)),
        }
    }

    fn generate(&self, request: &Request) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        match self.lookup(request) {
            Some(MockValue::Completion(c)) => return Ok(c.clone()),
            Some(MockValue::Logits(_)) => {
                return Err(Error::Protocol {
                    backend: self.identity(),
                    message: "scripted logits where a completion was expected".into(),
                })
            }
            None => {}
        }
        if self.table.cooperative {
            match &request.query {
                Query::Decompose { caption, m } => {
                    return Ok(numbered(&cooperative_decomposition(caption, *m)))
                }
                Query::Expand { node, s, .. } => {
                    return Ok(numbered(&cooperative_expansion(node, *s)))
                }
                _ => {}
            }
        }
        Err(Error::EmptyGeneration {
            backend: self.identity(),
        })
    }
}
