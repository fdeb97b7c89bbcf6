//! Benchmark evaluation: scoring image-caption pairs with either the plain
//! VLM score or the tree-augmented score, and aggregating task accuracies.

pub mod dataset;
pub mod report;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{self, ModelBackend};
use crate::error::{Error, Result};
use crate::image::ImageRef;
use crate::rules::RuleEvidence;
use crate::search::{fuse, SearchConfig};
use crate::tree::{self, ConceptTree, NodeId, TreeParams, TreeScores};

pub use dataset::{Dataset, DatasetKind, Manifest, PairSample, QuadrupletSample, Samples, Subsample};
pub use report::{
    group_task, image_indicators, subset_winrate, text_indicators, EvalReport, SampleFailure,
    SampleRecord, SampleScores, TaskScores, WinRate,
};

pub const ARTIFACTS_FORMAT: &str = "cocotree.artifacts/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    /// The VLM's yes-probability for the caption alone.
    VqascoreBaseline,
    /// Base score fused with the weight of the best reasoning path.
    CocoTree,
}

impl fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScorerKind::VqascoreBaseline => "vqascore",
            ScorerKind::CocoTree => "coco-tree",
        })
    }
}

impl FromStr for ScorerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "vqascore" | "vqascore-baseline" | "baseline" => Ok(ScorerKind::VqascoreBaseline),
            "coco-tree" | "cocotree" => Ok(ScorerKind::CocoTree),
            other => Err(Error::InvalidInput(format!("unknown scorer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScorerConfig {
    pub alpha: f64,
    pub tree: TreeParams,
    pub search: SearchConfig,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            alpha: 0.6,
            tree: TreeParams::default(),
            search: SearchConfig::default(),
        }
    }
}

impl ScorerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidInput(format!("alpha = {} outside [0,1]", self.alpha)));
        }
        self.tree.validate()?;
        self.search.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scorer {
    pub kind: ScorerKind,
    pub config: ScorerConfig,
}

impl Scorer {
    pub fn baseline() -> Self {
        Self {
            kind: ScorerKind::VqascoreBaseline,
            config: ScorerConfig::default(),
        }
    }

    pub fn coco_tree(config: ScorerConfig) -> Self {
        Self {
            kind: ScorerKind::CocoTree,
            config,
        }
    }
}

/// The three model roles. They may all point at the same backend.
#[derive(Clone)]
pub struct Backends {
    pub llm: Arc<dyn ModelBackend>,
    pub vlm: Arc<dyn ModelBackend>,
    pub judge: Arc<dyn ModelBackend>,
}

/// Everything computed for one (image, caption) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairArtifact {
    pub image: String,
    pub caption: String,
    pub base: f64,
    pub fused: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path_weight: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<Vec<NodeId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<TreeScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleArtifact {
    pub id: String,
    /// Quadruplets: (image 0, caption 0), (0, 1), (1, 0), (1, 1).
    /// Pairs: positive then negative caption.
    pub pairs: Vec<PairArtifact>,
}

/// Intermediate results of a run, kept apart from the report so the report
/// stays small and scorer-agnostic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalArtifacts {
    pub format: String,
    pub scorer: Scorer,
    /// Serialized (unscored) tree documents keyed by caption.
    pub trees: BTreeMap<String, serde_json::Value>,
    pub samples: Vec<SampleArtifact>,
}

impl EvalArtifacts {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let a: Self = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        if a.format != ARTIFACTS_FORMAT {
            return Err(Error::Schema(format!("unsupported artifacts format `{}`", a.format)));
        }
        Ok(a)
    }

    pub fn sample(&self, id: &str) -> Option<&SampleArtifact> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn tree(&self, caption: &str) -> Result<ConceptTree> {
        let doc = self
            .trees
            .get(caption)
            .ok_or_else(|| Error::IncompleteInput(format!("no tree stored for `{caption}`")))?;
        Ok(tree::deserialize_tree(&doc.to_string())?.0)
    }

    /// Selected-path concepts of every matching (image, caption) pair.
    pub fn rule_evidence(&self, base_dir: Option<&std::path::Path>) -> Result<Vec<RuleEvidence>> {
        let mut out = Vec::new();
        for s in &self.samples {
            let matching: Vec<&PairArtifact> = match s.pairs.len() {
                4 => vec![&s.pairs[0], &s.pairs[3]],
                _ => s.pairs.iter().take(1).collect(),
            };
            for p in matching {
                let path = p.path.as_ref().ok_or_else(|| {
                    Error::IncompleteInput(format!("sample `{}` has no selected path", s.id))
                })?;
                let tree = self.tree(&p.caption)?;
                let antecedents = path
                    .iter()
                    .map(|&id| {
                        tree.node(id)
                            .map(|n| n.text.clone())
                            .ok_or_else(|| Error::Schema(format!("{id} missing from tree")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                out.push(RuleEvidence {
                    sample_id: s.id.clone(),
                    caption: p.caption.clone(),
                    antecedents,
                    image: ImageRef::resolve(&p.image, base_dir)?,
                });
            }
        }
        Ok(out)
    }
}

pub struct EvalOutcome {
    pub report: EvalReport,
    pub artifacts: EvalArtifacts,
}

/// Scores pairs under one scorer. Trees are built once per caption.
pub struct Evaluator {
    scorer: Scorer,
    backends: Backends,
    trees: Mutex<HashMap<String, Arc<ConceptTree>>>,
}

impl Evaluator {
    pub fn new(scorer: Scorer, backends: Backends) -> Result<Self> {
        scorer.config.validate()?;
        Ok(Self {
            scorer,
            backends,
            trees: Mutex::new(HashMap::new()),
        })
    }

    pub fn scorer(&self) -> &Scorer {
        &self.scorer
    }

    pub fn backends(&self) -> &Backends {
        &self.backends
    }

    /// The concept tree for `caption`, built on first use.
    pub fn tree_for(&self, caption: &str) -> Result<Arc<ConceptTree>> {
        if let Some(t) = self.trees.lock().expect("tree memo poisoned").get(caption) {
            return Ok(t.clone());
        }
        let built = Arc::new(tree::build_tree(
            self.backends.llm.as_ref(),
            caption,
            self.scorer.config.tree,
        )?);
        Ok(self
            .trees
            .lock()
            .expect("tree memo poisoned")
            .entry(caption.to_owned())
            .or_insert(built)
            .clone())
    }

    pub fn score_pair(&self, image: &ImageRef, caption: &str) -> Result<PairArtifact> {
        let base = backends::vlm_relevance(self.backends.vlm.as_ref(), image, caption)?.value;
        let mut artifact = PairArtifact {
            image: image.reference().to_owned(),
            caption: caption.to_owned(),
            base,
            fused: base,
            path_weight: None,
            path: None,
            scores: None,
        };
        if self.scorer.kind == ScorerKind::CocoTree {
            let cfg = &self.scorer.config;
            let tree = self.tree_for(caption)?;
            let scores = tree::score_tree(
                self.backends.vlm.as_ref(),
                self.backends.llm.as_ref(),
                &tree,
                image,
                cfg.alpha,
            )?;
            let path = cfg.search.select(&tree, &scores)?;
            artifact.fused = fuse(base, path.weight, cfg.search.beta)?;
            artifact.path_weight = Some(path.weight);
            artifact.path = Some(path.node_ids);
            artifact.scores = Some(scores);
        }
        Ok(artifact)
    }

    /// Per-image text-task indicators.
    pub fn text_task(&self, sample: &QuadrupletSample) -> Result<[bool; 2]> {
        Ok(text_indicators(&self.score_quadruplet(sample)?.0))
    }

    /// Per-caption image-task indicators.
    pub fn image_task(&self, sample: &QuadrupletSample) -> Result<[bool; 2]> {
        Ok(image_indicators(&self.score_quadruplet(sample)?.0))
    }

    fn score_quadruplet(&self, s: &QuadrupletSample) -> Result<([[f64; 2]; 2], Vec<PairArtifact>)> {
        let mut matrix = [[0.0; 2]; 2];
        let mut pairs = Vec::with_capacity(4);
        for (i, image) in s.images().into_iter().enumerate() {
            for (j, caption) in s.captions().into_iter().enumerate() {
                let p = self.score_pair(image, caption)?;
                matrix[i][j] = p.fused;
                pairs.push(p);
            }
        }
        Ok((matrix, pairs))
    }

    fn score_sample(&self, sample: SampleView<'_>) -> Result<(SampleRecord, SampleArtifact)> {
        let (record, pairs) = match sample {
            SampleView::Quadruplet(s) => {
                let (matrix, pairs) = self.score_quadruplet(s)?;
                let r = SampleRecord::from_scores(&s.id, s.tags.clone(), SampleScores::Quadruplet { matrix });
                (r, pairs)
            }
            SampleView::Pair(s) => {
                let pos = self.score_pair(&s.image, &s.caption_pos)?;
                let neg = self.score_pair(&s.image, &s.caption_neg)?;
                let scores = SampleScores::Pair {
                    positive: pos.fused,
                    negative: neg.fused,
                };
                (SampleRecord::from_scores(&s.id, s.tags(), scores), vec![pos, neg])
            }
        };
        let id = record.id.clone();
        Ok((record, SampleArtifact { id, pairs }))
    }

    /// Scores every sample with up to `parallelism` worker threads.
    ///
    /// Failed samples are excluded from the accuracies and listed in the
    /// report; the run fails when more than half of the samples fail, or as
    /// soon as an endpoint is unreachable.
    pub fn evaluate(&self, dataset: &Dataset, parallelism: usize) -> Result<EvalOutcome> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism.max(1))
            .build()
            .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
        let views: Vec<SampleView<'_>> = match &dataset.samples {
            Samples::Quadruplet(v) => v.iter().map(SampleView::Quadruplet).collect(),
            Samples::Pair(v) => v.iter().map(SampleView::Pair).collect(),
        };
        let results: Vec<Result<(SampleRecord, SampleArtifact)>> = pool.install(|| {
            if self.scorer.kind == ScorerKind::CocoTree {
                let mut captions: Vec<&str> = views.iter().flat_map(SampleView::captions).collect();
                captions.sort_unstable();
                captions.dedup();
                // Failures surface again when the owning sample is scored.
                captions.par_iter().for_each(|c| {
                    let _ = self.tree_for(c);
                });
            }
            views.par_iter().map(|v| self.score_sample(*v)).collect()
        });

        let total = views.len();
        let mut records = Vec::with_capacity(total);
        let mut samples = Vec::with_capacity(total);
        let mut failures = Vec::new();
        for (view, r) in views.iter().zip(results) {
            match r {
                Ok((rec, art)) => {
                    records.push(rec);
                    samples.push(art);
                }
                Err(e @ Error::BackendUnavailable { .. }) => {
                    return Err(Error::Sample {
                        id: view.id().to_owned(),
                        source: Box::new(e),
                    })
                }
                Err(e) => {
                    log::warn!("sample `{}` failed: {e}", view.id());
                    failures.push(SampleFailure {
                        id: view.id().to_owned(),
                        error: e.to_string(),
                    });
                }
            }
        }
        if failures.len() * 2 > total {
            return Err(Error::RunFailed {
                failed: failures.len(),
                total,
            });
        }
        records.sort_by(|a, b| a.id.cmp(&b.id));
        samples.sort_by(|a, b| a.id.cmp(&b.id));
        failures.sort_by(|a, b| a.id.cmp(&b.id));

        let mut trees = BTreeMap::new();
        for (caption, t) in self.trees.lock().expect("tree memo poisoned").iter() {
            let doc: serde_json::Value = serde_json::from_str(&tree::serialize_tree(t, None)?)?;
            trees.insert(caption.clone(), doc);
        }
        Ok(EvalOutcome {
            report: EvalReport::new(&dataset.name, dataset.kind(), records, failures),
            artifacts: EvalArtifacts {
                format: ARTIFACTS_FORMAT.to_owned(),
                scorer: self.scorer,
                trees,
                samples,
            },
        })
    }
}

#[derive(Clone, Copy)]
enum SampleView<'a> {
    Quadruplet(&'a QuadrupletSample),
    Pair(&'a PairSample),
}

impl<'a> SampleView<'a> {
    fn id(&self) -> &'a str {
        match self {
            SampleView::Quadruplet(s) => &s.id,
            SampleView::Pair(s) => &s.id,
        }
    }

    fn captions(&self) -> [&'a str; 2] {
        match self {
            SampleView::Quadruplet(s) => [&s.caption_0, &s.caption_1],
            SampleView::Pair(s) => [&s.caption_pos, &s.caption_neg],
        }
    }
}

/// Convenience wrapper: one evaluator, one dataset.
pub fn evaluate_dataset(
    scorer: Scorer,
    backends: Backends,
    dataset: &Dataset,
    parallelism: usize,
) -> Result<EvalOutcome> {
    Evaluator::new(scorer, backends)?.evaluate(dataset, parallelism)
}
