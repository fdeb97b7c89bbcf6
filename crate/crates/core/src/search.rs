//! Reasoning-path selection over a scored concept tree, and fusion of the
//! selected path weight with the base VLM score.
//!
//! Paths start at a level-1 entity and end at a leaf; the root caption is
//! never part of a path. A path's weight is the arithmetic mean of its
//! composite scores. Ties between equal weights go to the path whose node
//! texts compare lexicographically smaller.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tree::{ConceptTree, NodeId, TreeScores};

pub const DEFAULT_BEAM_WIDTH: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningPath {
    pub node_ids: Vec<NodeId>,
    pub node_scores: Vec<f64>,
    pub weight: f64,
}

impl ReasoningPath {
    fn from_ids(tree: &ConceptTree, scores: &TreeScores, node_ids: Vec<NodeId>) -> Result<Self> {
        let node_scores = node_ids
            .iter()
            .map(|&id| {
                if id == NodeId::ROOT || tree.node(id).is_none() {
                    return Err(Error::InvalidInput(format!("{id} cannot be on a path")));
                }
                scores.composite(id)
            })
            .collect::<Result<Vec<_>>>()?;
        let weight = path_weight(&node_scores)?;
        Ok(Self {
            node_ids,
            node_scores,
            weight,
        })
    }

    pub fn texts<'t>(&self, tree: &'t ConceptTree) -> Vec<&'t str> {
        self.node_ids.iter().map(|&id| tree.text(id)).collect()
    }

    pub fn len(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }
}

/// Mean of the composite scores along a path.
pub fn path_weight(node_scores: &[f64]) -> Result<f64> {
    if node_scores.is_empty() {
        return Err(Error::InvalidInput("path weight of an empty path".into()));
    }
    let mean = node_scores.iter().sum::<f64>() / node_scores.len() as f64;
    let (lo, hi) = node_scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    Ok(mean.clamp(lo, hi))
}

/// `Greater` when `a` ranks ahead of `b`.
fn rank(tree: &ConceptTree, a: &ReasoningPath, b: &ReasoningPath) -> Ordering {
    a.weight
        .total_cmp(&b.weight)
        .then_with(|| b.texts(tree).cmp(&a.texts(tree)))
}

fn best_of(tree: &ConceptTree, paths: impl IntoIterator<Item = ReasoningPath>) -> Option<ReasoningPath> {
    paths.into_iter().max_by(|a, b| rank(tree, a, b))
}

fn require_entities(tree: &ConceptTree) -> Result<()> {
    if tree.entities().is_empty() {
        return Err(Error::InvalidInput("tree has no entities".into()));
    }
    Ok(())
}

/// Every entity-to-leaf path, entities and children in tree order.
pub fn enumerate_paths(tree: &ConceptTree, scores: &TreeScores) -> Result<Vec<ReasoningPath>> {
    let mut out = Vec::new();
    for &entity in tree.entities() {
        let mut stack = vec![vec![entity]];
        while let Some(ids) = stack.pop() {
            let last = *ids.last().expect("non-empty partial path");
            let children = tree.children(last);
            if children.is_empty() {
                out.push(ReasoningPath::from_ids(tree, scores, ids)?);
            } else {
                for &c in children.iter().rev() {
                    let mut next = ids.clone();
                    next.push(c);
                    stack.push(next);
                }
            }
        }
    }
    Ok(out)
}

fn best_node(tree: &ConceptTree, scores: &TreeScores, ids: &[NodeId]) -> Result<NodeId> {
    let mut best: Option<(NodeId, f64)> = None;
    for &id in ids {
        let c = scores.composite(id)?;
        best = match best {
            Some((b, bc))
                if bc > c || (bc == c && tree.text(b) <= tree.text(id)) =>
            {
                Some((b, bc))
            }
            _ => Some((id, c)),
        };
    }
    best.map(|(id, _)| id)
        .ok_or_else(|| Error::InvalidInput("no candidates".into()))
}

/// Starts at the best entity and repeatedly steps to the best child.
pub fn greedy_search(tree: &ConceptTree, scores: &TreeScores) -> Result<ReasoningPath> {
    require_entities(tree)?;
    let mut ids = vec![best_node(tree, scores, tree.entities())?];
    loop {
        let last = *ids.last().expect("non-empty");
        if tree.is_leaf(last) {
            break;
        }
        ids.push(best_node(tree, scores, tree.children(last))?);
    }
    ReasoningPath::from_ids(tree, scores, ids)
}

/// One frontier snapshot for the search trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub width: usize,
    pub depth: usize,
    pub kept: Vec<TracedPath>,
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracedPath {
    pub texts: Vec<String>,
    pub weight: f64,
    pub complete: bool,
}

/// A single beam pass of width `k`.
///
/// The frontier starts as every entity. At each depth it is cut to the `k`
/// best partial paths by current weight; kept paths ending in a leaf are
/// complete, the rest are extended by all of their children.
fn beam_pass(
    tree: &ConceptTree,
    scores: &TreeScores,
    k: usize,
    mut trace: Option<&mut Vec<TraceStep>>,
) -> Result<ReasoningPath> {
    let mut frontier = tree
        .entities()
        .iter()
        .map(|&e| ReasoningPath::from_ids(tree, scores, vec![e]))
        .collect::<Result<Vec<_>>>()?;
    let mut complete = Vec::new();
    let mut depth = 0;
    while !frontier.is_empty() {
        frontier.sort_by(|a, b| rank(tree, b, a));
        let dropped = frontier.len().saturating_sub(k);
        frontier.truncate(k);
        if let Some(t) = trace.as_deref_mut() {
            t.push(TraceStep {
                width: k,
                depth,
                kept: frontier
                    .iter()
                    .map(|p| TracedPath {
                        texts: p.texts(tree).into_iter().map(str::to_owned).collect(),
                        weight: p.weight,
                        complete: tree.is_leaf(*p.node_ids.last().expect("non-empty")),
                    })
                    .collect(),
                dropped,
            });
        }
        let mut next = Vec::new();
        for path in frontier {
            let last = *path.node_ids.last().expect("non-empty");
            if tree.is_leaf(last) {
                complete.push(path);
                continue;
            }
            for &c in tree.children(last) {
                let mut ids = path.node_ids.clone();
                ids.push(c);
                next.push(ReasoningPath::from_ids(tree, scores, ids)?);
            }
        }
        frontier = next;
        depth += 1;
    }
    best_of(tree, complete).ok_or_else(|| Error::Invariant("beam produced no complete path".into()))
}

/// Beam search of width `k`.
///
/// Returns the best complete path found by the passes of width `1..=k`.
/// A single pass is not monotone in its width (a wider frontier can crowd
/// out a branch a narrow one keeps); taking the best over all widths up to
/// `k` makes the result non-decreasing in `k`, keeps `k = 1` equal to the
/// greedy path, and still reaches the exhaustive optimum once `k` covers
/// every leaf.
pub fn beam_search(tree: &ConceptTree, scores: &TreeScores, k: usize) -> Result<ReasoningPath> {
    beam_search_inner(tree, scores, k, None)
}

/// [`beam_search`] plus the per-depth frontier of every pass.
pub fn beam_search_traced(
    tree: &ConceptTree,
    scores: &TreeScores,
    k: usize,
) -> Result<(ReasoningPath, Vec<TraceStep>)> {
    let mut trace = Vec::new();
    let path = beam_search_inner(tree, scores, k, Some(&mut trace))?;
    Ok((path, trace))
}

fn beam_search_inner(
    tree: &ConceptTree,
    scores: &TreeScores,
    k: usize,
    mut trace: Option<&mut Vec<TraceStep>>,
) -> Result<ReasoningPath> {
    if k == 0 {
        return Err(Error::InvalidInput("beam width must be at least 1".into()));
    }
    require_entities(tree)?;
    // Widths past the leaf count all behave like the exhaustive pass.
    let leaves = tree.nodes()[1..].iter().filter(|n| n.children.is_empty()).count();
    let mut best: Option<ReasoningPath> = None;
    for width in 1..=k.min(leaves.max(1)) {
        let p = beam_pass(tree, scores, width, trace.as_deref_mut())?;
        best = best_of(tree, best.into_iter().chain(std::iter::once(p)));
    }
    best.ok_or_else(|| Error::Invariant("beam produced no path".into()))
}

/// A single width-`k` beam pass, without the best-over-widths wrapper.
pub fn beam_pass_only(tree: &ConceptTree, scores: &TreeScores, k: usize) -> Result<ReasoningPath> {
    if k == 0 {
        return Err(Error::InvalidInput("beam width must be at least 1".into()));
    }
    require_entities(tree)?;
    beam_pass(tree, scores, k, None)
}

/// `beta * base + (1 - beta) * path_weight`.
pub fn fuse(base_score: f64, path_weight: f64, beta: f64) -> Result<f64> {
    for (name, x) in [("base_score", base_score), ("path_weight", path_weight), ("beta", beta)] {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::InvalidInput(format!("{name} = {x} outside [0,1]")));
        }
    }
    let f = beta * base_score + (1.0 - beta) * path_weight;
    Ok(f.clamp(base_score.min(path_weight), base_score.max(path_weight)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Greedy descent, one child per step.
    #[serde(alias = "greedy")]
    Max,
    Beam,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Max => "max",
            Strategy::Beam => "beam",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "max" | "greedy" => Ok(Strategy::Max),
            "beam" => Ok(Strategy::Beam),
            other => Err(Error::InvalidInput(format!("unknown strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub strategy: Strategy,
    pub beam_width: usize,
    pub beta: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Beam,
            beam_width: DEFAULT_BEAM_WIDTH,
            beta: 0.8,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::InvalidInput("beam width must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::InvalidInput(format!("beta = {} outside [0,1]", self.beta)));
        }
        Ok(())
    }

    pub fn select(&self, tree: &ConceptTree, scores: &TreeScores) -> Result<ReasoningPath> {
        match self.strategy {
            Strategy::Max => greedy_search(tree, scores),
            Strategy::Beam => beam_search(tree, scores, self.beam_width),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::{NodeScore, TreeParams};
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    /// Builds a tree from (parent index, text, c_s) rows; index 0 is the root.
    fn scored(rows: &[(usize, &str, f64)], params: TreeParams) -> (ConceptTree, TreeScores) {
        let mut tree = ConceptTree::new("root", params).unwrap();
        let mut ids = vec![NodeId::ROOT];
        let mut nodes = BTreeMap::new();
        for &(p, text, c) in rows {
            let id = tree.add_child(ids[p], text).unwrap();
            ids.push(id);
            nodes.insert(
                id,
                NodeScore {
                    node_id: id,
                    l_s: c,
                    v_s: c,
                    c_s: c,
                    image_digest: "img".into(),
                },
            );
        }
        (
            tree,
            TreeScores {
                alpha: 0.5,
                image_digest: "img".into(),
                nodes,
            },
        )
    }

    /// The greedy trap: e1 looks best but its children are poor.
    fn trap() -> (ConceptTree, TreeScores) {
        scored(
            &[
                (0, "e1", 0.9),
                (0, "e2", 0.6),
                (1, "a", 0.2),
                (1, "b", 0.3),
                (2, "c", 1.0),
                (2, "d", 0.9),
            ],
            TreeParams::new(2, 2, 1),
        )
    }

    #[test]
    fn mean_weights() {
        assert!((path_weight(&[0.6, 0.8, 1.0]).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(path_weight(&[0.37]).unwrap(), 0.37);
        assert_eq!(path_weight(&[0.3; 7]).unwrap(), 0.3);
        assert!(path_weight(&[]).is_err());
    }

    #[test]
    fn chains_give_one_path_per_entity() {
        let (t, s) = scored(
            &[(0, "a", 0.1), (0, "b", 0.2), (1, "a2", 0.3), (2, "b2", 0.4)],
            TreeParams::new(2, 1, 1),
        );
        let paths = enumerate_paths(&t, &s).unwrap();
        assert_eq!(paths.len(), 2);
        assert_eq!(greedy_search(&t, &s).unwrap().node_ids, paths[1].node_ids);
    }

    #[test]
    fn full_binary_tree_has_four_paths() {
        let (t, s) = scored(
            &[
                (0, "e", 0.5),
                (1, "a", 0.5),
                (1, "b", 0.5),
                (2, "a1", 0.5),
                (2, "a2", 0.5),
                (3, "b1", 0.5),
                (3, "b2", 0.5),
            ],
            TreeParams::new(1, 2, 2),
        );
        assert_eq!(enumerate_paths(&t, &s).unwrap().len(), 4);
    }

    #[test]
    fn degraded_tree_gives_entity_paths() {
        let (t, s) = scored(&[(0, "a", 0.1), (0, "b", 0.2), (0, "c", 0.3)], TreeParams::new(3, 3, 3));
        let paths = enumerate_paths(&t, &s).unwrap();
        assert_eq!(paths.len(), 3);
        assert!(paths.iter().all(|p| p.len() == 1));
    }

    #[test]
    fn unscored_node_is_reported() {
        let (t, mut s) = trap();
        s.nodes.remove(&NodeId(4));
        assert!(matches!(enumerate_paths(&t, &s), Err(Error::IncompleteScores(4))));
        assert!(matches!(beam_search(&t, &s, 5), Err(Error::IncompleteScores(4))));
    }

    #[test]
    fn greedy_falls_into_trap_beam_does_not() {
        let (t, s) = trap();
        let g = greedy_search(&t, &s).unwrap();
        assert_eq!(g.texts(&t), ["e1", "b"]);
        // exhaustive: e2->c = 0.8 is the optimum
        let best = enumerate_paths(&t, &s)
            .unwrap()
            .into_iter()
            .map(|p| p.weight)
            .fold(f64::MIN, f64::max);
        assert!((best - 0.8).abs() < 1e-12);
        assert!(g.weight < best);
        let b = beam_search(&t, &s, 2).unwrap();
        assert_eq!(b.texts(&t), ["e2", "c"]);
        assert_eq!(beam_search(&t, &s, 1).unwrap(), g);
    }

    #[test]
    fn ties_break_lexicographically() {
        let (t, s) = scored(
            &[(0, "zeta", 0.5), (0, "alpha", 0.5), (2, "y", 0.5), (2, "x", 0.5)],
            TreeParams::new(2, 2, 1),
        );
        assert_eq!(greedy_search(&t, &s).unwrap().texts(&t), ["alpha", "x"]);
        assert_eq!(beam_search(&t, &s, 4).unwrap().texts(&t), ["alpha", "x"]);
    }

    #[test]
    fn trace_records_each_depth() {
        let (t, s) = trap();
        let (p, trace) = beam_search_traced(&t, &s, 1).unwrap();
        assert_eq!(p.texts(&t), ["e1", "b"]);
        assert_eq!(trace.len(), 2);
        assert_eq!(trace[0].dropped, 1);
        assert!(trace[1].kept[0].complete);
    }

    #[test]
    fn fuse_examples() {
        assert!((fuse(0.5, 0.75, 0.8).unwrap() - 0.55).abs() < 1e-12);
        assert_eq!(fuse(0.31, 0.9, 1.0).unwrap(), 0.31);
        assert_eq!(fuse(0.31, 0.9, 0.0).unwrap(), 0.9);
        assert!(fuse(1.2, 0.5, 0.5).is_err());
        assert!(fuse(0.2, 0.5, -0.1).is_err());
    }

    #[test]
    fn strategy_names() {
        assert_eq!("max".parse::<super::Strategy>().unwrap(), super::Strategy::Max);
        assert_eq!("Beam".parse::<super::Strategy>().unwrap(), super::Strategy::Beam);
        assert!("dfs".parse::<super::Strategy>().is_err());
    }

    proptest! {
        #[test]
        fn fuse_fixed_point_and_monotone(x in 0f64..=1.0, y in 0f64..=1.0, d in 0f64..=1.0, b in 0f64..=1.0) {
            prop_assert_eq!(fuse(x, x, b).unwrap(), x);
            let y2 = (y + d).min(1.0);
            prop_assert!(fuse(x, y2, b).unwrap() >= fuse(x, y, b).unwrap());
            prop_assert!(fuse(y2, x, b).unwrap() >= fuse(y, x, b).unwrap());
        }

        #[test]
        fn fused_ranking_preserves_path_order(base in 0f64..=1.0, w1 in 0f64..0.99, gap in 1e-6f64..0.01, beta in 0f64..0.999) {
            let w0 = w1 + gap;
            prop_assert!(fuse(base, w0, beta).unwrap() > fuse(base, w1, beta).unwrap());
        }
    }
}
