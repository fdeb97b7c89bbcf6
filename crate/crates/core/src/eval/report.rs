//! Task scores, per-sample records and the rendered report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::dataset::DatasetKind;
use crate::error::{Error, Result};

pub const REPORT_FORMAT: &str = "cocotree.report/v1";

/// Scores of one sample. For quadruplets `matrix[i][j]` is the score of
/// image `i` with caption `j`; for pairs only the single image is scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SampleScores {
    Quadruplet { matrix: [[f64; 2]; 2] },
    Pair { positive: f64, negative: f64 },
}

/// Text task: for each image, the matching caption must outscore the other.
/// Ties count as failures.
pub fn text_indicators(matrix: &[[f64; 2]; 2]) -> [bool; 2] {
    [matrix[0][0] > matrix[0][1], matrix[1][1] > matrix[1][0]]
}

/// Image task: for each caption, the matching image must outscore the other.
pub fn image_indicators(matrix: &[[f64; 2]; 2]) -> [bool; 2] {
    [matrix[0][0] > matrix[1][0], matrix[1][1] > matrix[0][1]]
}

/// Group task: both text and image tasks succeed.
pub fn group_task(text: bool, image: bool) -> bool {
    text && image
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub tags: Vec<String>,
    pub scores: SampleScores,
    pub text: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<bool>,
}

impl SampleRecord {
    pub fn from_scores(id: impl Into<String>, tags: Vec<String>, scores: SampleScores) -> Self {
        let (text, image, group) = match &scores {
            SampleScores::Quadruplet { matrix } => {
                let t = text_indicators(matrix).iter().all(|&b| b);
                let i = image_indicators(matrix).iter().all(|&b| b);
                (t, Some(i), Some(group_task(t, i)))
            }
            SampleScores::Pair { positive, negative } => (positive > negative, None, None),
        };
        Self {
            id: id.into(),
            tags,
            scores,
            text,
            image,
            group,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScores {
    pub samples: usize,
    pub text_correct: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_correct: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_correct: Option<usize>,
    /// Percentages in [0, 100].
    pub text: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<f64>,
}

impl TaskScores {
    pub fn aggregate<'a>(kind: DatasetKind, records: impl IntoIterator<Item = &'a SampleRecord>) -> Self {
        let mut n = 0;
        let (mut t, mut i, mut g) = (0, 0, 0);
        for r in records {
            n += 1;
            t += usize::from(r.text);
            i += usize::from(r.image == Some(true));
            g += usize::from(r.group == Some(true));
        }
        let pct = |c: usize| if n == 0 { 0.0 } else { 100.0 * c as f64 / n as f64 };
        let quad = kind == DatasetKind::Quadruplet;
        Self {
            samples: n,
            text_correct: t,
            image_correct: quad.then_some(i),
            group_correct: quad.then_some(g),
            text: pct(t),
            image: quad.then(|| pct(i)),
            group: quad.then(|| pct(g)),
        }
    }

    /// The score compared by win rates: group for quadruplets, text otherwise.
    pub fn headline(&self) -> f64 {
        self.group.unwrap_or(self.text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleFailure {
    pub id: String,
    pub error: String,
}

/// Outcome of one evaluation run. Carries no scorer identity, so two
/// scorers that produce equal numbers produce byte-identical reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub dataset: String,
    pub kind: DatasetKind,
    pub overall: TaskScores,
    pub per_tag: BTreeMap<String, TaskScores>,
    pub samples: Vec<SampleRecord>,
    pub failures: Vec<SampleFailure>,
}

impl EvalReport {
    pub fn new(
        dataset: impl Into<String>,
        kind: DatasetKind,
        samples: Vec<SampleRecord>,
        failures: Vec<SampleFailure>,
    ) -> Self {
        let overall = TaskScores::aggregate(kind, &samples);
        let mut by_tag: BTreeMap<&str, Vec<&SampleRecord>> = BTreeMap::new();
        for r in &samples {
            for tag in &r.tags {
                by_tag.entry(tag).or_default().push(r);
            }
        }
        let per_tag = by_tag
            .into_iter()
            .map(|(tag, rs)| (tag.to_owned(), TaskScores::aggregate(kind, rs)))
            .collect();
        Self {
            format: REPORT_FORMAT.to_owned(),
            dataset: dataset.into(),
            kind,
            overall,
            per_tag,
            samples,
            failures,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        if r.format != REPORT_FORMAT {
            return Err(Error::Schema(format!("unsupported report format `{}`", r.format)));
        }
        Ok(r)
    }

    /// SHA-256 of the canonical JSON rendering.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_json()?.as_bytes())))
    }

    /// Percentages per task, overall then per tag.
    pub fn table(&self) -> String {
        let quad = self.kind == DatasetKind::Quadruplet;
        let mut out = String::new();
        if quad {
            out.push_str(&format!(
                "{:<24} {:>6} {:>8} {:>8} {:>8}\n",
                self.dataset, "n", "Text", "Image", "Group"
            ));
        } else {
            out.push_str(&format!("{:<24} {:>6} {:>8}\n", self.dataset, "n", "Acc"));
        }
        let row = |label: &str, s: &TaskScores| {
            if quad {
                format!(
                    "{:<24} {:>6} {:>8.2} {:>8.2} {:>8.2}\n",
                    label,
                    s.samples,
                    s.text,
                    s.image.unwrap_or(0.0),
                    s.group.unwrap_or(0.0)
                )
            } else {
                format!("{:<24} {:>6} {:>8.2}\n", label, s.samples, s.text)
            }
        };
        out.push_str(&row("overall", &self.overall));
        for (tag, s) in &self.per_tag {
            out.push_str(&row(tag, s));
        }
        if !self.failures.is_empty() {
            out.push_str(&format!("{} sample(s) failed\n", self.failures.len()));
        }
        out
    }
}

/// Head-to-head comparison of two reports over their shared tags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinRate {
    pub subsets: usize,
    pub wins: usize,
    pub rate: f64,
}

/// Fraction of shared tags on which `a` strictly beats `b`. Ties are not
/// wins. Reports without a shared tag cannot be compared.
pub fn subset_winrate(a: &EvalReport, b: &EvalReport) -> Result<WinRate> {
    let shared: Vec<&String> = a.per_tag.keys().filter(|t| b.per_tag.contains_key(*t)).collect();
    if shared.is_empty() {
        return Err(Error::InvalidInput("reports share no tagged subset".into()));
    }
    let wins = shared
        .iter()
        .filter(|t| a.per_tag[**t].headline() > b.per_tag[**t].headline())
        .count();
    Ok(WinRate {
        subsets: shared.len(),
        wins,
        rate: wins as f64 / shared.len() as f64,
    })
}
