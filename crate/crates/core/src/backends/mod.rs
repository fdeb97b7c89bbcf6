//! Model endpoints: the VLM scorer, the LLM reasoner and the judge.
//!
//! Every backend answers two kinds of request: a yes/no question, answered
//! with the pair of logits for the "yes" and "no" tokens, and a free-form
//! greedy generation. Higher-level scores are built on those two calls.

pub mod cache;
pub mod mock;
pub mod openai;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageRef;
use crate::prompts::{self, RenderedPrompt};

pub use cache::{CacheStats, CachedBackend, ResponseCache};
pub use mock::{MockBackend, MockTable};
pub use openai::{EndpointConfig, OpenAiBackend};

/// Which model a backend plays in the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Llm,
    Vlm,
    Judge,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Llm => "llm",
            Role::Vlm => "vlm",
            Role::Judge => "judge",
        })
    }
}

/// The structured question behind a rendered prompt. Remote backends only
/// look at the prompt; the mock keys its table on these fields.
#[derive(Debug, Clone, PartialEq)]
pub enum Query {
    Visual { image: ImageRef, statement: String },
    Entail { premise: String, hypothesis: String },
    Judge {
        statement: String,
        conclusion: String,
        image: Option<ImageRef>,
    },
    Decompose { caption: String, m: usize },
    Expand { node: String, caption: String, s: usize },
    Free,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub query: Query,
    pub prompt: RenderedPrompt,
    pub system: Option<String>,
}

impl Request {
    pub fn new(query: Query, prompt: RenderedPrompt) -> Self {
        Self {
            query,
            prompt,
            system: None,
        }
    }

    pub fn with_system(mut self, system: impl Into<String>) -> Self {
        self.system = Some(system.into());
        self
    }
}

/// Logits for the "yes" and "no" tokens at the first generated position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct YesNoLogits {
    pub logit_yes: f64,
    pub logit_no: f64,
}

impl YesNoLogits {
    pub fn new(logit_yes: f64, logit_no: f64) -> Result<Self> {
        if !logit_yes.is_finite() || !logit_no.is_finite() {
            return Err(Error::InvalidInput(format!(
                "non-finite logits ({logit_yes}, {logit_no})"
            )));
        }
        Ok(Self {
            logit_yes,
            logit_no,
        })
    }

    /// Logits whose two-way softmax is `p`. Endpoints 0 and 1 map to a
    /// finite gap large enough to saturate in double precision.
    pub fn from_probability(p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidInput(format!("probability {p} outside [0,1]")));
        }
        let floor = -SATURATED_GAP;
        let ly = if p == 0.0 { floor } else { p.ln().max(floor) };
        let ln = if p == 1.0 { floor } else { (1.0 - p).ln().max(floor) };
        Self::new(ly, ln)
    }
}

/// Gap used when one class must receive all the probability mass.
pub const SATURATED_GAP: f64 = 1.0e4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Visual,
    Linguistic,
    Judge,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelevanceScore {
    pub value: f64,
    pub kind: ScoreKind,
}

impl RelevanceScore {
    pub fn new(value: f64, kind: ScoreKind) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Invariant(format!("{kind:?} score {value} outside [0,1]")));
        }
        Ok(Self { value, kind })
    }
}

/// A model endpoint. Implementations must tolerate concurrent calls.
pub trait ModelBackend: Send + Sync {
    /// Stable identity string; part of every cache key.
    fn identity(&self) -> String;

    fn yes_no(&self, request: &Request) -> Result<YesNoLogits>;

    fn generate(&self, request: &Request) -> Result<String>;
}

impl<B: ModelBackend + ?Sized> ModelBackend for Arc<B> {
    fn identity(&self) -> String {
        (**self).identity()
    }
    fn yes_no(&self, request: &Request) -> Result<YesNoLogits> {
        (**self).yes_no(request)
    }
    fn generate(&self, request: &Request) -> Result<String> {
        (**self).generate(request)
    }
}

impl<B: ModelBackend + ?Sized> ModelBackend for &B {
    fn identity(&self) -> String {
        (**self).identity()
    }
    fn yes_no(&self, request: &Request) -> Result<YesNoLogits> {
        (**self).yes_no(request)
    }
    fn generate(&self, request: &Request) -> Result<String> {
        (**self).generate(request)
    }
}

/// Two-way softmax of the yes/no logits, computed after subtracting the max.
pub fn yes_no_probability(logits: YesNoLogits) -> Result<f64> {
    let YesNoLogits {
        logit_yes,
        logit_no,
    } = logits;
    if !logit_yes.is_finite() || !logit_no.is_finite() {
        return Err(Error::InvalidInput(format!(
            "non-finite logits ({logit_yes}, {logit_no})"
        )));
    }
    let m = logit_yes.max(logit_no);
    let ey = (logit_yes - m).exp();
    let en = (logit_no - m).exp();
    Ok(ey / (ey + en))
}

fn require_text(what: &str, text: &str) -> Result<()> {
    if text.trim().is_empty() {
        return Err(Error::InvalidInput(format!("{what} must be non-empty")));
    }
    Ok(())
}

fn score(backend: &dyn ModelBackend, request: &Request, kind: ScoreKind) -> Result<RelevanceScore> {
    let logits = backend.yes_no(request)?;
    RelevanceScore::new(yes_no_probability(logits)?, kind)
}

/// Probability that `image` shows `statement`, asked with the visual template.
pub fn vlm_relevance(
    backend: &dyn ModelBackend,
    image: &ImageRef,
    statement: &str,
) -> Result<RelevanceScore> {
    require_text("statement", statement)?;
    let request = Request::new(
        Query::Visual {
            image: image.clone(),
            statement: statement.to_owned(),
        },
        prompts::visual_prompt(image, statement),
    );
    score(backend, &request, ScoreKind::Visual)
}

/// Probability that `hypothesis` is possible given `premise`.
pub fn llm_entailment(
    backend: &dyn ModelBackend,
    premise: &str,
    hypothesis: &str,
) -> Result<RelevanceScore> {
    require_text("premise", premise)?;
    require_text("hypothesis", hypothesis)?;
    let request = Request::new(
        Query::Entail {
            premise: premise.to_owned(),
            hypothesis: hypothesis.to_owned(),
        },
        prompts::entail_prompt(premise, hypothesis),
    );
    score(backend, &request, ScoreKind::Linguistic)
}

/// Free-form greedy completion of `prompt`.
pub fn llm_generate(backend: &dyn ModelBackend, prompt: &str) -> Result<String> {
    require_text("prompt", prompt)?;
    generate_checked(
        backend,
        &Request::new(Query::Free, RenderedPrompt::text(prompt.to_owned())),
    )
}

pub(crate) fn generate_checked(backend: &dyn ModelBackend, request: &Request) -> Result<String> {
    let out = backend.generate(request)?;
    if out.trim().is_empty() {
        return Err(Error::EmptyGeneration {
            backend: backend.identity(),
        });
    }
    Ok(out)
}

/// Whether a judge query must, may not, or may optionally carry an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageRequirement {
    Required,
    Forbidden,
    Optional,
}

/// Judge confidence that `statement` entails `conclusion`.
pub fn judge_entailment(
    backend: &dyn ModelBackend,
    statement: &str,
    conclusion: &str,
    image: Option<&ImageRef>,
    requirement: ImageRequirement,
) -> Result<RelevanceScore> {
    require_text("statement", statement)?;
    require_text("conclusion", conclusion)?;
    match (requirement, image) {
        (ImageRequirement::Required, None) => {
            return Err(Error::Precondition("judge mode requires an image".into()))
        }
        (ImageRequirement::Forbidden, Some(_)) => {
            return Err(Error::Precondition("judge mode does not take an image".into()))
        }
        _ => {}
    }
    let request = Request::new(
        Query::Judge {
            statement: statement.to_owned(),
            conclusion: conclusion.to_owned(),
            image: image.cloned(),
        },
        prompts::judge_prompt(statement, conclusion, image),
    );
    score(backend, &request, ScoreKind::Judge)
}
