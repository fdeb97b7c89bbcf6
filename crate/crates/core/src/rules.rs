//! Neurosymbolic rules built from reasoning paths and scored by a judge.
//!
//! A rule renders as `A AND B AND C => caption` (or with `OR`). Antecedents
//! that could be confused with the syntax, because they contain `AND`,
//! `OR`, `=>` or a double quote, or have surrounding whitespace, are
//! written as JSON strings, which keeps rendering injective.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backends::{judge_entailment, ImageRequirement, ModelBackend};
use crate::error::{Error, Result};
use crate::image::ImageRef;
use crate::search::ReasoningPath;
use crate::tree::ConceptTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Connective {
    And,
    Or,
}

impl Connective {
    pub fn keyword(self) -> &'static str {
        match self {
            Connective::And => "AND",
            Connective::Or => "OR",
        }
    }
}

impl fmt::Display for Connective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword())
    }
}

impl FromStr for Connective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "and" => Ok(Connective::And),
            "or" => Ok(Connective::Or),
            other => Err(Error::InvalidInput(format!("unknown connective `{other}`"))),
        }
    }
}

const IMPLIES: &str = " => ";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeurosymbolicRule {
    pub antecedents: Vec<String>,
    pub connective: Connective,
    pub conclusion: String,
    pub rendered: String,
}

impl NeurosymbolicRule {
    pub fn new(antecedents: Vec<String>, connective: Connective, conclusion: impl Into<String>) -> Result<Self> {
        if antecedents.is_empty() {
            return Err(Error::InvalidInput("a rule needs at least one antecedent".into()));
        }
        let conclusion = conclusion.into();
        let rendered = format!(
            "{}{IMPLIES}{conclusion}",
            render_antecedents(&antecedents, connective)
        );
        Ok(Self {
            antecedents,
            connective,
            conclusion,
            rendered,
        })
    }

    /// The left-hand side alone, e.g. `A AND B`.
    pub fn premise(&self) -> String {
        render_antecedents(&self.antecedents, self.connective)
    }
}

fn needs_quoting(text: &str) -> bool {
    text.is_empty()
        || text.trim() != text
        || text.contains('"')
        || text.contains("AND")
        || text.contains("OR")
        || text.contains("=>")
}

fn render_antecedent(text: &str) -> String {
    if needs_quoting(text) {
        serde_json::to_string(text).expect("strings serialize")
    } else {
        text.to_owned()
    }
}

fn render_antecedents(antecedents: &[String], connective: Connective) -> String {
    let sep = format!(" {} ", connective.keyword());
    antecedents
        .iter()
        .map(|a| render_antecedent(a))
        .collect::<Vec<_>>()
        .join(&sep)
}

/// Inverse of rendering. The connective of a single-antecedent rule is not
/// recoverable and comes back as `AND`.
pub fn parse_rule(rendered: &str) -> Result<NeurosymbolicRule> {
    let bad = |m: &str| Error::InvalidInput(format!("malformed rule `{rendered}`: {m}"));
    let mut antecedents = Vec::new();
    let mut connective = None;
    let mut rest = rendered;
    loop {
        let (item, after) = if rest.starts_with('"') {
            let mut de = serde_json::Deserializer::from_str(rest).into_iter::<String>();
            let item = de
                .next()
                .ok_or_else(|| bad("unterminated quote"))?
                .map_err(|_| bad("bad quoted antecedent"))?;
            (item, &rest[de.byte_offset()..])
        } else {
            let end = [" AND ", " OR ", IMPLIES]
                .iter()
                .filter_map(|sep| rest.find(sep))
                .min()
                .ok_or_else(|| bad("missing =>"))?;
            (rest[..end].to_owned(), &rest[end..])
        };
        antecedents.push(item);
        if let Some(c) = after.strip_prefix(IMPLIES) {
            let connective = connective.unwrap_or(Connective::And);
            return NeurosymbolicRule::new(antecedents, connective, c);
        }
        let (c, tail) = if let Some(t) = after.strip_prefix(" AND ") {
            (Connective::And, t)
        } else if let Some(t) = after.strip_prefix(" OR ") {
            (Connective::Or, t)
        } else {
            return Err(bad("expected connective"));
        };
        if connective.is_some_and(|prev| prev != c) {
            return Err(bad("mixed connectives"));
        }
        connective = Some(c);
        rest = tail;
    }
}

/// Chains the path's concepts into a rule implying `caption`.
pub fn build_rule(
    path: &ReasoningPath,
    tree: &ConceptTree,
    connective: Connective,
    caption: &str,
) -> Result<NeurosymbolicRule> {
    if path.is_empty() {
        return Err(Error::InvalidInput("empty path".into()));
    }
    let mut antecedents = Vec::with_capacity(path.len());
    for (i, &id) in path.node_ids.iter().enumerate() {
        let node = tree
            .node(id)
            .ok_or_else(|| Error::InvalidInput(format!("{id} is not in the tree")))?;
        if i > 0 && node.parent != Some(path.node_ids[i - 1]) {
            return Err(Error::InvalidInput(format!("{id} does not follow its predecessor")));
        }
        antecedents.push(node.text.clone());
    }
    NeurosymbolicRule::new(antecedents, connective, caption)
}

/// What the judge is shown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeMode {
    RuleOnly,
    CaptionOnly,
    RulePlusCaption,
}

/// The (statement, conclusion) pair the judge is asked about.
pub fn judge_query(rule: &NeurosymbolicRule, mode: JudgeMode) -> (String, String) {
    let statement = match mode {
        JudgeMode::RuleOnly => rule.rendered.clone(),
        JudgeMode::CaptionOnly => rule.conclusion.clone(),
        JudgeMode::RulePlusCaption => format!("{}\n{}", rule.rendered, rule.conclusion),
    };
    (statement, rule.conclusion.clone())
}

/// Judge confidence in the rule under `mode`, with or without the image.
pub fn evaluate_rule(
    judge: &dyn ModelBackend,
    rule: &NeurosymbolicRule,
    mode: JudgeMode,
    image: Option<&ImageRef>,
) -> Result<f64> {
    let (statement, conclusion) = judge_query(rule, mode);
    Ok(judge_entailment(judge, &statement, &conclusion, image, ImageRequirement::Optional)?.value)
}

/// Evidence for one caption: the concepts of its selected path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleEvidence {
    pub sample_id: String,
    pub caption: String,
    pub antecedents: Vec<String>,
    pub image: ImageRef,
}

/// Rows of the entailment table in display order.
pub const REPORT_ROWS: [(JudgeMode, Option<Connective>, &str); 5] = [
    (JudgeMode::RuleOnly, Some(Connective::And), "Only AND Rule"),
    (JudgeMode::RuleOnly, Some(Connective::Or), "Only OR Rule"),
    (JudgeMode::CaptionOnly, None, "Only Caption"),
    (JudgeMode::RulePlusCaption, Some(Connective::And), "AND Rule + Caption"),
    (JudgeMode::RulePlusCaption, Some(Connective::Or), "OR Rule + Caption"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntailmentRow {
    pub label: String,
    pub mode: JudgeMode,
    pub connective: Option<Connective>,
    pub without_image: f64,
    pub with_image: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntailmentReport {
    pub dataset: String,
    pub samples: usize,
    pub rows: Vec<EntailmentRow>,
}

impl EntailmentReport {
    /// Plain-text grid: one row per setting, columns without/with image.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<22} | {:>9} | {:>9}\n",
            self.dataset, "w/o Image", "w/ Image"
        );
        out.push_str(&format!("{}\n", "-".repeat(46)));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<22} | {:>9.4} | {:>9.4}\n",
                r.label, r.without_image, r.with_image
            ));
        }
        out
    }
}

/// Averages judge scores over `evidence` for every row of the table.
pub fn entailment_report(
    judge: &dyn ModelBackend,
    dataset: &str,
    evidence: &[RuleEvidence],
) -> Result<EntailmentReport> {
    if evidence.is_empty() {
        return Err(Error::InvalidInput("entailment report over an empty dataset".into()));
    }
    if let Some(e) = evidence.iter().find(|e| e.antecedents.is_empty()) {
        return Err(Error::IncompleteInput(format!(
            "sample `{}` has no selected path",
            e.sample_id
        )));
    }
    let n = evidence.len() as f64;
    let mut rows = Vec::with_capacity(REPORT_ROWS.len());
    for (mode, connective, label) in REPORT_ROWS {
        let mut sums = [0.0f64; 2];
        for e in evidence {
            let rule = NeurosymbolicRule::new(
                e.antecedents.clone(),
                connective.unwrap_or(Connective::And),
                &e.caption,
            )?;
            sums[0] += evaluate_rule(judge, &rule, mode, None)?;
            sums[1] += evaluate_rule(judge, &rule, mode, Some(&e.image))?;
        }
        rows.push(EntailmentRow {
            label: label.to_owned(),
            mode,
            connective,
            without_image: sums[0] / n,
            with_image: sums[1] / n,
        });
    }
    Ok(EntailmentReport {
        dataset: dataset.to_owned(),
        samples: evidence.len(),
        rows,
    })
}
