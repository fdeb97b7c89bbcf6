//! Concept trees: breadth-first construction from a caption, composite
//! scoring against an image, and the on-disk tree document.
//!
//! Level 0 holds the caption, level 1 its morphological entities, and each
//! further level the concepts discovered from every node of the level
//! above. Node ids are assigned in breadth-first order, so a tree built
//! from the same replies always has the same ids.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{self, generate_checked, ModelBackend, Query, Request};
use crate::decompose::{decompose_caption, parse_numbered_list};
use crate::error::{Error, Result};
use crate::image::ImageRef;
use crate::prompts;

pub const TREE_FORMAT: &str = "cocotree.tree/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    pub const ROOT: NodeId = NodeId(0);

    fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptNode {
    pub id: NodeId,
    pub text: String,
    pub level: u32,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
}

/// Shape parameters: `m` entities, split factor `s`, `l` expansion rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeParams {
    pub m: usize,
    pub s: usize,
    pub l: usize,
    /// Expand only this many frontier nodes per level, ranked by their
    /// linguistic score against the caption.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prune_frontier: Option<usize>,
}

impl TreeParams {
    pub fn new(m: usize, s: usize, l: usize) -> Self {
        Self {
            m,
            s,
            l,
            prune_frontier: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.s == 0 || self.l == 0 {
            return Err(Error::InvalidInput(format!(
                "m, s and l must be positive (got m={}, s={}, l={})",
                self.m, self.s, self.l
            )));
        }
        if self.prune_frontier == Some(0) {
            return Err(Error::InvalidInput("prune_frontier must be positive".into()));
        }
        Ok(())
    }

    /// Upper bound on the node count including the root:
    /// `m * (s^(l+1) - 1) / (s - 1) + 1`, or `m * (l + 1) + 1` when `s = 1`.
    pub fn node_bound(&self) -> usize {
        let per_entity = if self.s == 1 {
            self.l + 1
        } else {
            (self.s.pow(self.l as u32 + 1) - 1) / (self.s - 1)
        };
        self.m * per_entity + 1
    }
}

impl Default for TreeParams {
    fn default() -> Self {
        Self::new(2, 3, 3)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Degradation {
    pub node: NodeId,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptTree {
    root_caption: String,
    params: TreeParams,
    nodes: Vec<ConceptNode>,
    degradations: Vec<Degradation>,
}

impl ConceptTree {
    /// A tree holding only the root caption.
    pub fn new(root_caption: impl Into<String>, params: TreeParams) -> Result<Self> {
        let root_caption = root_caption.into();
        if root_caption.trim().is_empty() {
            return Err(Error::InvalidInput("caption must be non-empty".into()));
        }
        params.validate()?;
        Ok(Self {
            nodes: vec![ConceptNode {
                id: NodeId::ROOT,
                text: root_caption.clone(),
                level: 0,
                parent: None,
                children: Vec::new(),
            }],
            root_caption,
            params,
            degradations: Vec::new(),
        })
    }

    pub fn root_caption(&self) -> &str {
        &self.root_caption
    }

    pub fn params(&self) -> TreeParams {
        self.params
    }

    pub fn root(&self) -> &ConceptNode {
        &self.nodes[0]
    }

    pub fn entities(&self) -> &[NodeId] {
        &self.nodes[0].children
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[ConceptNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> Option<&ConceptNode> {
        self.nodes.get(id.index())
    }

    fn get(&self, id: NodeId) -> Result<&ConceptNode> {
        self.node(id)
            .ok_or_else(|| Error::InvalidInput(format!("unknown node {id}")))
    }

    pub fn text(&self, id: NodeId) -> &str {
        &self.nodes[id.index()].text
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.index()].children
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        self.children(id).is_empty()
    }

    pub fn degradations(&self) -> &[Degradation] {
        &self.degradations
    }

    pub fn record_degradation(&mut self, node: NodeId, reason: impl Into<String>) {
        self.degradations.push(Degradation {
            node,
            reason: reason.into(),
        });
    }

    /// Texts from the root down to `id`, inclusive.
    pub fn lineage(&self, id: NodeId) -> Vec<&str> {
        let mut out = Vec::new();
        let mut cur = Some(id);
        while let Some(c) = cur {
            let node = &self.nodes[c.index()];
            out.push(node.text.as_str());
            cur = node.parent;
        }
        out.reverse();
        out
    }

    /// Appends a child under `parent`. Sibling texts must be distinct.
    pub fn add_child(&mut self, parent: NodeId, text: impl Into<String>) -> Result<NodeId> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::InvalidInput("node text must be non-empty".into()));
        }
        let parent_node = self.get(parent)?;
        if parent_node
            .children
            .iter()
            .any(|c| self.nodes[c.index()].text == text)
        {
            return Err(Error::InvalidInput(format!(
                "duplicate child `{text}` under {parent}"
            )));
        }
        let id = NodeId(self.nodes.len() as u32);
        let level = parent_node.level + 1;
        self.nodes.push(ConceptNode {
            id,
            text,
            level,
            parent: Some(parent),
            children: Vec::new(),
        });
        self.nodes[parent.index()].children.push(id);
        Ok(id)
    }

    /// Checks the structural invariants: a single root, parent/child
    /// agreement, level monotonicity, reachability, acyclicity, distinct
    /// sibling texts, and the configured depth and split bounds.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Schema(m));
        let Some(root) = self.nodes.first() else {
            return bad("tree has no nodes".into());
        };
        if root.parent.is_some() || root.level != 0 || root.text != self.root_caption {
            return bad("node 0 must be the parentless level-0 caption".into());
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.id.index() != i {
                return bad(format!("node at position {i} has id {}", node.id));
            }
            if i > 0 {
                let Some(p) = node.parent else {
                    return bad(format!("{} has no parent", node.id));
                };
                let Some(parent) = self.node(p) else {
                    return bad(format!("{} has unknown parent {p}", node.id));
                };
                if !parent.children.contains(&node.id) {
                    return bad(format!("{p} does not list child {}", node.id));
                }
                if node.level != parent.level + 1 {
                    return bad(format!("{} level {} under level {}", node.id, node.level, parent.level));
                }
            }
            let mut seen = HashSet::new();
            for c in &node.children {
                let Some(child) = self.node(*c) else {
                    return bad(format!("{} lists unknown child {c}", node.id));
                };
                if child.parent != Some(node.id) {
                    return bad(format!("{c} listed under {} but parented elsewhere", node.id));
                }
                if !seen.insert(child.text.as_str()) {
                    return bad(format!("duplicate sibling text `{}`", child.text));
                }
            }
            if i > 0 && node.children.len() > self.params.s {
                return bad(format!("{} has more than s={} children", node.id, self.params.s));
            }
            if node.level as usize > self.params.l + 1 {
                return bad(format!("{} deeper than l+1={}", node.id, self.params.l + 1));
            }
        }
        if root.children.len() > self.params.m {
            return bad(format!("more than m={} entities", self.params.m));
        }
        let mut visited = vec![false; self.nodes.len()];
        let mut stack = vec![NodeId::ROOT];
        while let Some(id) = stack.pop() {
            if std::mem::replace(&mut visited[id.index()], true) {
                return bad(format!("cycle through {id}"));
            }
            stack.extend(self.children(id).iter().copied());
        }
        if let Some(i) = visited.iter().position(|v| !v) {
            return bad(format!("n{i} unreachable from root"));
        }
        Ok(())
    }
}

/// Asks the reasoner for up to `s` concepts verifying `node_text`.
///
/// `lineage` holds the texts from the root down to the node itself; replies
/// repeating any of them, or each other, are dropped case-insensitively.
pub fn expand_node(
    backend: &dyn ModelBackend,
    node_text: &str,
    lineage: &[&str],
    caption: &str,
    s: usize,
) -> Result<Vec<String>> {
    if s == 0 {
        return Err(Error::InvalidInput("s must be at least 1".into()));
    }
    if node_text.trim().is_empty() {
        return Err(Error::InvalidInput("node text must be non-empty".into()));
    }
    let base = Request::new(
        Query::Expand {
            node: node_text.to_owned(),
            caption: caption.to_owned(),
            s,
        },
        prompts::expand_prompt(node_text, caption, s),
    );
    let mut last = String::new();
    for attempt in 0..2 {
        let request = if attempt == 0 {
            base.clone()
        } else {
            base.clone().with_system(prompts::corrective_line(s))
        };
        let reply = match generate_checked(backend, &request) {
            Ok(r) => r,
            Err(e @ Error::EmptyGeneration { .. }) => {
                last = e.to_string();
                continue;
            }
            Err(e) => return Err(e),
        };
        match parse_numbered_list(&reply, usize::MAX) {
            Ok(items) => {
                let mut seen: HashSet<String> = lineage.iter().map(|t| t.to_lowercase()).collect();
                seen.insert(node_text.to_lowercase());
                let mut out = Vec::with_capacity(s);
                for item in items {
                    if seen.insert(item.to_lowercase()) {
                        out.push(item);
                        if out.len() == s {
                            break;
                        }
                    }
                }
                return Ok(out);
            }
            Err(e) => last = e.to_string(),
        }
    }
    Err(Error::ExpansionFailed {
        node: node_text.to_owned(),
        reason: last,
    })
}

/// Builds the concept tree for `caption`.
///
/// Level 1 comes from decomposition; each of the `l` following rounds
/// expands every node of the previous level (or the `prune_frontier` best
/// by linguistic score). A failed expansion turns that node into a leaf and
/// is recorded; an unreachable backend aborts the build.
pub fn build_tree(backend: &dyn ModelBackend, caption: &str, params: TreeParams) -> Result<ConceptTree> {
    let mut tree = ConceptTree::new(caption, params)?;
    let entities = decompose_caption(backend, caption, params.m)?;
    let mut frontier = Vec::with_capacity(entities.len());
    for e in entities {
        frontier.push(tree.add_child(NodeId::ROOT, e.text)?);
    }
    for _ in 0..params.l {
        if frontier.is_empty() {
            break;
        }
        if let Some(keep) = params.prune_frontier {
            frontier = prune_by_entailment(backend, &tree, frontier, keep)?;
        }
        let replies: Vec<Result<Vec<String>>> = frontier
            .par_iter()
            .map(|&id| expand_node(backend, tree.text(id), &tree.lineage(id), caption, params.s))
            .collect();
        let mut next = Vec::new();
        for (&id, reply) in frontier.iter().zip(replies) {
            match reply {
                Ok(children) => {
                    for text in children {
                        next.push(tree.add_child(id, text)?);
                    }
                }
                Err(e @ Error::BackendUnavailable { .. }) => return Err(e),
                Err(e) => {
                    log::warn!("treating {id} ({:?}) as a leaf: {e}", tree.text(id));
                    tree.record_degradation(id, e.to_string());
                }
            }
        }
        frontier = next;
    }
    debug_assert!(tree.validate().is_ok());
    Ok(tree)
}

fn prune_by_entailment(
    backend: &dyn ModelBackend,
    tree: &ConceptTree,
    frontier: Vec<NodeId>,
    keep: usize,
) -> Result<Vec<NodeId>> {
    if frontier.len() <= keep {
        return Ok(frontier);
    }
    let scores: Vec<f64> = frontier
        .par_iter()
        .map(|&id| backends::llm_entailment(backend, tree.root_caption(), tree.text(id)).map(|s| s.value))
        .collect::<Result<_>>()?;
    let mut ranked: Vec<(NodeId, f64)> = frontier.into_iter().zip(scores).collect();
    ranked.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| tree.text(a.0).cmp(tree.text(b.0)))
    });
    ranked.truncate(keep);
    let mut kept: Vec<NodeId> = ranked.into_iter().map(|(id, _)| id).collect();
    kept.sort();
    Ok(kept)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeScore {
    pub node_id: NodeId,
    pub l_s: f64,
    pub v_s: f64,
    pub c_s: f64,
    pub image_digest: String,
}

/// Scores of one tree against one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeScores {
    pub alpha: f64,
    pub image_digest: String,
    pub nodes: BTreeMap<NodeId, NodeScore>,
}

impl TreeScores {
    pub fn get(&self, id: NodeId) -> Result<&NodeScore> {
        self.nodes.get(&id).ok_or(Error::IncompleteScores(id.0))
    }

    pub fn composite(&self, id: NodeId) -> Result<f64> {
        self.get(id).map(|s| s.c_s)
    }
}

/// `alpha * l_s + (1 - alpha) * v_s`, clamped to the closed interval
/// between the two inputs so the result never leaves it by rounding.
pub fn composite_score(l_s: f64, v_s: f64, alpha: f64) -> f64 {
    let c = alpha * l_s + (1.0 - alpha) * v_s;
    c.clamp(l_s.min(v_s), l_s.max(v_s))
}

fn check_unit(name: &str, x: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::InvalidInput(format!("{name} = {x} outside [0,1]")));
    }
    Ok(())
}

/// Scores every non-root node: linguistic relevance of the node given the
/// caption, visual relevance of the node in `image`, and their composite.
pub fn score_tree(
    vlm: &dyn ModelBackend,
    llm: &dyn ModelBackend,
    tree: &ConceptTree,
    image: &ImageRef,
    alpha: f64,
) -> Result<TreeScores> {
    check_unit("alpha", alpha)?;
    let image_digest = image.digest()?;
    let results: Vec<Result<NodeScore>> = tree.nodes()[1..]
        .par_iter()
        .map(|node| {
            let l_s = backends::llm_entailment(llm, tree.root_caption(), &node.text)?.value;
            let v_s = backends::vlm_relevance(vlm, image, &node.text)?.value;
            Ok(NodeScore {
                node_id: node.id,
                l_s,
                v_s,
                c_s: composite_score(l_s, v_s, alpha),
                image_digest: image_digest.clone(),
            })
        })
        .collect();
    let mut scores = TreeScores {
        alpha,
        image_digest,
        nodes: BTreeMap::new(),
    };
    let mut first_error = None;
    for r in results {
        match r {
            Ok(s) => {
                scores.nodes.insert(s.node_id, s);
            }
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    match first_error {
        None => Ok(scores),
        Some(source) => Err(Error::Scoring {
            scored: scores.nodes.len(),
            partial: Box::new(scores),
            source: Box::new(source),
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamsRecord {
    m: usize,
    s: usize,
    l: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prune_frontier: Option<usize>,
    alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NodeRecord {
    id: NodeId,
    text: String,
    level: u32,
    parent: Option<NodeId>,
    children: Vec<NodeId>,
    l_s: Option<f64>,
    v_s: Option<f64>,
    c_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TreeDocument {
    format: String,
    root: String,
    params: Option<ParamsRecord>,
    image_digest: Option<String>,
    nodes: Vec<NodeRecord>,
    #[serde(default)]
    degradations: Vec<Degradation>,
}

/// Renders a tree, optionally with its scores, as a pretty JSON document.
pub fn serialize_tree(tree: &ConceptTree, scores: Option<&TreeScores>) -> Result<String> {
    let nodes = tree
        .nodes()
        .iter()
        .map(|n| {
            let s = scores.and_then(|s| s.nodes.get(&n.id));
            NodeRecord {
                id: n.id,
                text: n.text.clone(),
                level: n.level,
                parent: n.parent,
                children: n.children.clone(),
                l_s: s.map(|s| s.l_s),
                v_s: s.map(|s| s.v_s),
                c_s: s.map(|s| s.c_s),
            }
        })
        .collect();
    let p = tree.params();
    let doc = TreeDocument {
        format: TREE_FORMAT.into(),
        root: tree.root_caption().to_owned(),
        params: Some(ParamsRecord {
            m: p.m,
            s: p.s,
            l: p.l,
            prune_frontier: p.prune_frontier,
            alpha: scores.map(|s| s.alpha),
        }),
        image_digest: scores.map(|s| s.image_digest.clone()),
        nodes,
        degradations: tree.degradations().to_vec(),
    };
    let mut out = serde_json::to_string_pretty(&doc)?;
    out.push('\n');
    Ok(out)
}

/// Parses and validates a tree document.
pub fn deserialize_tree(document: &str) -> Result<(ConceptTree, Option<TreeScores>)> {
    let doc: TreeDocument =
        serde_json::from_str(document).map_err(|e| Error::Schema(format!("tree document: {e}")))?;
    if doc.format != TREE_FORMAT {
        return Err(Error::Schema(format!("unsupported format `{}`", doc.format)));
    }
    let params = doc
        .params
        .ok_or_else(|| Error::Schema("tree document has no params block".into()))?;
    let tree_params = TreeParams {
        m: params.m,
        s: params.s,
        l: params.l,
        prune_frontier: params.prune_frontier,
    };
    tree_params
        .validate()
        .map_err(|e| Error::Schema(e.to_string()))?;
    let mut records = doc.nodes;
    records.sort_by_key(|r| r.id);
    let tree = ConceptTree {
        root_caption: doc.root,
        params: tree_params,
        nodes: records
            .iter()
            .map(|r| ConceptNode {
                id: r.id,
                text: r.text.clone(),
                level: r.level,
                parent: r.parent,
                children: r.children.clone(),
            })
            .collect(),
        degradations: doc.degradations,
    };
    tree.validate()?;
    for d in tree.degradations() {
        if tree.node(d.node).is_none() {
            return Err(Error::Schema(format!("degradation names unknown node {}", d.node)));
        }
    }

    let scored: Vec<&NodeRecord> = records[1..].iter().filter(|r| r.c_s.is_some()).collect();
    if records[0].c_s.is_some() {
        return Err(Error::Schema("root caption cannot carry a score".into()));
    }
    let scores = match (params.alpha, doc.image_digest) {
        (None, None) if scored.is_empty() => None,
        (Some(alpha), Some(image_digest)) if scored.len() == records.len() - 1 => {
            check_unit("alpha", alpha).map_err(|e| Error::Schema(e.to_string()))?;
            let mut nodes = BTreeMap::new();
            for r in scored {
                let (Some(l_s), Some(v_s), Some(c_s)) = (r.l_s, r.v_s, r.c_s) else {
                    return Err(Error::Schema(format!("{} has a partial score", r.id)));
                };
                for (name, x) in [("l_s", l_s), ("v_s", v_s), ("c_s", c_s)] {
                    check_unit(name, x).map_err(|e| Error::Schema(format!("{}: {e}", r.id)))?;
                }
                if (c_s - composite_score(l_s, v_s, alpha)).abs() > 1e-12 {
                    return Err(Error::Schema(format!("{} c_s disagrees with alpha", r.id)));
                }
                nodes.insert(
                    r.id,
                    NodeScore {
                        node_id: r.id,
                        l_s,
                        v_s,
                        c_s,
                        image_digest: image_digest.clone(),
                    },
                );
            }
            Some(TreeScores {
                alpha,
                image_digest,
                nodes,
            })
        }
        _ => {
            return Err(Error::Schema(
                "scores must cover every non-root node and come with alpha and image_digest".into(),
            ))
        }
    };
    Ok((tree, scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::{MockBackend, MockEntry, MockTable};
    use crate::backends::{Role, YesNoLogits};
    use proptest::prelude::*;

    fn coop() -> MockBackend {
        MockBackend::new(MockTable::cooperative(), Role::Llm).unwrap()
    }

    #[test]
    fn node_bound_matches_geometric_series() {
        // 2 * (1 + 3 + 9 + 27) + 1
        assert_eq!(TreeParams::new(2, 3, 3).node_bound(), 81);
        assert_eq!(TreeParams::new(3, 1, 4).node_bound(), 16);
        assert_eq!(TreeParams::new(1, 2, 2).node_bound(), 8);
    }

    #[test]
    fn cooperative_default_tree_hits_bound() {
        let tree = build_tree(&coop(), "bird eats snake", TreeParams::default()).unwrap();
        assert_eq!(tree.len(), 81);
        tree.validate().unwrap();
        assert!(tree.nodes().iter().all(|n| n.level <= 4));
    }

    #[test]
    fn depth_one_tree_is_root_entities_children() {
        let tree = build_tree(&coop(), "a dog chases a cat", TreeParams::new(2, 3, 1)).unwrap();
        assert_eq!(tree.len(), 1 + 2 + 6);
        assert!(tree.entities().iter().all(|&e| tree.children(e).len() == 3));
    }

    #[test]
    fn failed_expansions_degrade_to_leaves() {
        let table = MockTable::strict()
            .with_entry(MockEntry::decomposition("a b", "1. a 2. b"));
        let llm = MockBackend::new(table, Role::Llm).unwrap();
        let tree = build_tree(&llm, "a b", TreeParams::default()).unwrap();
        assert_eq!(tree.len(), 3);
        assert_eq!(tree.degradations().len(), 2);
        assert!(tree.entities().iter().all(|&e| tree.is_leaf(e)));
    }

    #[test]
    fn expansion_dedups_against_lineage_and_siblings() {
        let table = MockTable::strict().with_entry(MockEntry::expansion(
            "bird eats snake",
            "bird eats",
            "1. Bird Eats 2. snake in bird's mouth 3. SNAKE IN BIRD'S MOUTH 4. bird eats snake 5. a beak",
        ));
        let llm = MockBackend::new(table, Role::Llm).unwrap();
        let out = expand_node(&llm, "bird eats", &["bird eats snake", "bird eats"], "bird eats snake", 3).unwrap();
        assert_eq!(out, ["snake in bird's mouth", "a beak"]);
    }

    #[test]
    fn expansion_parse_failure_is_reported() {
        let table = MockTable::strict().with_entry(MockEntry::expansion("c", "n", "nothing useful"));
        let llm = MockBackend::new(table, Role::Llm).unwrap();
        assert!(matches!(
            expand_node(&llm, "n", &["c", "n"], "c", 3),
            Err(Error::ExpansionFailed { .. })
        ));
    }

    #[test]
    fn pruning_limits_frontier() {
        let mut p = TreeParams::new(2, 3, 3);
        p.prune_frontier = Some(2);
        let tree = build_tree(&coop(), "x y", p).unwrap();
        // 2 entities, then 2 expanded nodes per level, 3 children each
        assert_eq!(tree.len(), 1 + 2 + 6 + 6 + 6);
        tree.validate().unwrap();
    }

    #[test]
    fn composite_worked_value() {
        // 0.99 * 0.6 + 0.01 * 0.4 = 0.594 + 0.004
        assert!((composite_score(0.99, 0.01, 0.6) - 0.598).abs() < 1e-12);
        assert_eq!(composite_score(0.3, 0.7, 1.0), 0.3);
        assert_eq!(composite_score(0.3, 0.7, 0.0), 0.7);
    }

    #[test]
    fn score_tree_covers_every_non_root_node() {
        let [llm, vlm, _] = MockBackend::trio(MockTable::cooperative()).unwrap();
        let tree = build_tree(&*llm, "cat on mat", TreeParams::new(2, 2, 1)).unwrap();
        let img = ImageRef::new("https://x.test/i.png").unwrap();
        let scores = score_tree(&*vlm, &*llm, &tree, &img, 0.6).unwrap();
        assert_eq!(scores.nodes.len(), tree.len() - 1);
        assert!(scores.get(NodeId::ROOT).is_err());
        for s in scores.nodes.values() {
            assert!((s.c_s - (0.6 * s.l_s + 0.4 * s.v_s)).abs() < 1e-12);
        }
    }

    #[test]
    fn alpha_one_gives_linguistic_scores() {
        let [llm, vlm, _] = MockBackend::trio(MockTable::cooperative()).unwrap();
        let tree = build_tree(&*llm, "cat on mat", TreeParams::new(1, 2, 2)).unwrap();
        let img = ImageRef::new("https://x.test/i.png").unwrap();
        let scores = score_tree(&*vlm, &*llm, &tree, &img, 1.0).unwrap();
        assert!(scores.nodes.values().all(|s| s.c_s == s.l_s));
    }

    #[test]
    fn scoring_is_image_local() {
        let [llm, vlm, _] = MockBackend::trio(MockTable::cooperative()).unwrap();
        let tree = build_tree(&*llm, "cat on mat", TreeParams::new(2, 2, 2)).unwrap();
        let a = score_tree(&*vlm, &*llm, &tree, &ImageRef::new("https://x.test/a.png").unwrap(), 0.6).unwrap();
        let b = score_tree(&*vlm, &*llm, &tree, &ImageRef::new("https://x.test/b.png").unwrap(), 0.6).unwrap();
        for (id, sa) in &a.nodes {
            assert_eq!(sa.l_s, b.nodes[id].l_s);
        }
        assert_ne!(a.image_digest, b.image_digest);
    }

    #[test]
    fn scoring_failure_carries_partial_map() {
        struct HalfBroken;
        impl ModelBackend for HalfBroken {
            fn identity(&self) -> String {
                "half".into()
            }
            fn yes_no(&self, r: &Request) -> Result<YesNoLogits> {
                match &r.query {
                    Query::Visual { statement, .. } if statement.ends_with('2') => {
                        Err(Error::BackendUnavailable {
                            backend: "half".into(),
                            attempts: 1,
                            message: "down".into(),
                        })
                    }
                    _ => YesNoLogits::new(0.0, 0.0),
                }
            }
            fn generate(&self, _: &Request) -> Result<String> {
                unreachable!()
            }
        }
        let tree = build_tree(&coop(), "p q", TreeParams::new(1, 2, 1)).unwrap();
        let img = ImageRef::new("https://x.test/i.png").unwrap();
        match score_tree(&HalfBroken, &HalfBroken, &tree, &img, 0.5) {
            Err(Error::Scoring { scored, partial, .. }) => {
                assert_eq!(scored, 2);
                assert_eq!(partial.nodes.len(), 2);
            }
            other => panic!("expected scoring error, got {other:?}"),
        }
    }

    #[test]
    fn round_trip_unscored_and_scored() {
        let [llm, vlm, _] = MockBackend::trio(MockTable::cooperative()).unwrap();
        let tree = build_tree(&*llm, "cat on mat", TreeParams::new(2, 2, 2)).unwrap();
        let doc = serialize_tree(&tree, None).unwrap();
        assert_eq!(deserialize_tree(&doc).unwrap(), (tree.clone(), None));
        let img = ImageRef::new("https://x.test/i.png").unwrap();
        let scores = score_tree(&*vlm, &*llm, &tree, &img, 0.6).unwrap();
        let doc = serialize_tree(&tree, Some(&scores)).unwrap();
        assert_eq!(deserialize_tree(&doc).unwrap(), (tree, Some(scores)));
    }

    fn tiny_doc() -> serde_json::Value {
        let mut t = ConceptTree::new("c", TreeParams::new(1, 1, 1)).unwrap();
        let e = t.add_child(NodeId::ROOT, "e").unwrap();
        t.add_child(e, "f").unwrap();
        serde_json::from_str(&serialize_tree(&t, None).unwrap()).unwrap()
    }

    #[test]
    fn cycle_is_a_schema_error() {
        let mut doc = tiny_doc();
        // make f the parent of e and e a child of f
        doc["nodes"][2]["children"] = serde_json::json!([1]);
        doc["nodes"][1]["parent"] = serde_json::json!(2);
        assert!(matches!(deserialize_tree(&doc.to_string()), Err(Error::Schema(_))));
    }

    #[test]
    fn missing_params_is_a_schema_error() {
        let mut doc = tiny_doc();
        doc.as_object_mut().unwrap().remove("params");
        let err = deserialize_tree(&doc.to_string()).unwrap_err();
        assert!(err.to_string().contains("params"), "{err}");
    }

    #[test]
    fn partial_scores_rejected() {
        let mut doc = tiny_doc();
        doc["params"]["alpha"] = serde_json::json!(0.5);
        doc["image_digest"] = serde_json::json!("d");
        doc["nodes"][1]["l_s"] = serde_json::json!(0.5);
        doc["nodes"][1]["v_s"] = serde_json::json!(0.5);
        doc["nodes"][1]["c_s"] = serde_json::json!(0.5);
        assert!(deserialize_tree(&doc.to_string()).is_err());
    }

    proptest! {
        #[test]
        fn composite_is_convex(l in 0f64..=1.0, v in 0f64..=1.0, a in 0f64..=1.0) {
            let c = composite_score(l, v, a);
            prop_assert!(l.min(v) <= c && c <= l.max(v));
            prop_assert!((c - (a * l + (1.0 - a) * v)).abs() <= 1e-12);
            prop_assert_eq!(composite_score(l, l, a), l);
        }

        #[test]
        fn composite_is_monotone(l in 0f64..=1.0, v in 0f64..=1.0, d in 0f64..=1.0, a in 0f64..=1.0) {
            let l2 = (l + d).min(1.0);
            let v2 = (v + d).min(1.0);
            prop_assert!(composite_score(l2, v, a) >= composite_score(l, v, a));
            prop_assert!(composite_score(l, v2, a) >= composite_score(l, v, a));
        }

        #[test]
        fn cooperative_builds_respect_bound(m in 1usize..=3, s in 1usize..=3, l in 1usize..=3) {
            let p = TreeParams::new(m, s, l);
            let tree = build_tree(&coop(), "a small caption", p).unwrap();
            prop_assert_eq!(tree.len(), p.node_bound());
            prop_assert!(tree.validate().is_ok());
        }
    }
}
