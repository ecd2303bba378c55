//! Root generation, greedy tree spanning, and pseudo-sentence linearization.
//!
//! A root is a subject-predicate phrase: an active object paired with an
//! active action whose attention distributions agree spatially, a pair pulled
//! from a previously generated caption, or — when neither produces a pair —
//! the video's weak annotation alone. Starting from a root, a dependency tree
//! grows greedily: the best link proposed by the knowledge graph attaches one
//! active concept at a time until no link clears the score ceiling or the
//! node budget is reached. Linearizing a tree depth-first yields the pseudo
//! sentence its video trains the captioner on.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpusio::{ConceptVocabulary, Phrase};
use crate::grounding::{spatial_distance, GroundedConcepts, VideoRecord};
use crate::kglink::{predict_links, KgModel};
use crate::{Error, Result};

/// A dependency tree over concept phrases. Node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependencyTree {
    pub nodes: Vec<Phrase>,
    /// `(parent index, relation label, child index)` per edge.
    pub edges: Vec<(usize, String, usize)>,
    pub video_id: String,
    pub iteration: u32,
}

impl DependencyTree {
    /// A single-node tree.
    pub fn root_only(root: Phrase, video_id: &str) -> Self {
        DependencyTree {
            nodes: vec![root],
            edges: Vec::new(),
            video_id: video_id.to_string(),
            iteration: 0,
        }
    }

    pub fn root(&self) -> &Phrase {
        &self.nodes[0]
    }

    /// Checks the tree invariants: a root exists, every other node has
    /// exactly one parent, indices are in range, the edge set is acyclic and
    /// connected, and no phrase repeats.
    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Argument("tree has no nodes".into()));
        }
        if self.edges.len() != self.nodes.len() - 1 {
            return Err(Error::Argument(format!(
                "{} edges cannot span {} nodes",
                self.edges.len(),
                self.nodes.len()
            )));
        }
        let mut parent = vec![usize::MAX; self.nodes.len()];
        for &(p, _, c) in &self.edges {
            if p >= self.nodes.len() || c >= self.nodes.len() {
                return Err(Error::Argument(format!("edge ({p}, {c}) out of range")));
            }
            if c == 0 {
                return Err(Error::Argument("root cannot be a child".into()));
            }
            if parent[c] != usize::MAX {
                return Err(Error::Argument(format!("node {c} has two parents")));
            }
            parent[c] = p;
        }
        for start in 1..self.nodes.len() {
            if parent[start] == usize::MAX {
                return Err(Error::Argument(format!("node {start} is disconnected")));
            }
            // Walk to the root; more steps than nodes means a cycle.
            let mut node = start;
            for _ in 0..self.nodes.len() {
                if node == 0 {
                    break;
                }
                node = parent[node];
            }
            if node != 0 {
                return Err(Error::Argument(format!("node {start} does not reach the root")));
            }
        }
        let mut seen = BTreeSet::new();
        for n in &self.nodes {
            if !seen.insert(n.clone()) {
                return Err(Error::Argument(format!("duplicate node phrase '{n}'")));
            }
        }
        Ok(())
    }
}

/// Spanning limits: the link-score ceiling and the node budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpanConfig {
    pub s_max: f64,
    pub max_nodes: usize,
}

impl Default for SpanConfig {
    fn default() -> Self {
        SpanConfig { s_max: f64::INFINITY, max_nodes: 6 }
    }
}

/// Generates the root phrases for one video, deduplicated and ordered by
/// `(object lemma, action lemma)`:
///
/// 1. every active object/action pair whose attention distributions sit
///    within the consistency threshold,
/// 2. per prior caption, the first object-vocabulary token paired with the
///    first action-vocabulary token (when both occur), and
/// 3. when neither rule yields a pair, the weak annotation alone.
pub fn generate_roots(
    video: &VideoRecord,
    grounded: &GroundedConcepts,
    vocab: &ConceptVocabulary,
    consistency: f64,
    prior_captions: &[Vec<String>],
) -> Vec<Phrase> {
    let mut roots: BTreeSet<Phrase> = BTreeSet::new();
    for (&i, alpha_obj) in &grounded.alpha_obj {
        for (&j, alpha_act) in &grounded.alpha_act {
            match spatial_distance(alpha_obj, alpha_act) {
                Ok(d) if d <= consistency => {
                    roots.insert(Phrase::NounVerb(
                        vocab.objects[i].clone(),
                        vocab.actions[j].clone(),
                    ));
                }
                Ok(_) => {}
                Err(e) => {
                    log::warn!("video {}: skipping pair ({i}, {j}): {e}", video.video_id)
                }
            }
        }
    }
    for caption in prior_captions {
        let first_obj = caption.iter().find(|t| vocab.object_index(t).is_some());
        let first_act = caption.iter().find(|t| vocab.action_index(t).is_some());
        if let (Some(o), Some(a)) = (first_obj, first_act) {
            roots.insert(Phrase::NounVerb(o.clone(), a.clone()));
        }
    }
    if roots.is_empty() {
        return vec![video.annotation.clone()];
    }
    let mut out: Vec<Phrase> = roots.into_iter().collect();
    out.sort_by_key(Phrase::sort_key);
    out
}

/// Grows a dependency tree from `root` by greedy best-first link attachment.
///
/// Candidates are the video's indicated concepts minus any lemma already in
/// the root. Each round scores every (tree node, relation, candidate)
/// combination and attaches the best link at or below the ceiling; ties are
/// already resolved by the total order of `predict_links`. The loop stops
/// when no link qualifies, the candidates run out, or the node budget is hit.
pub fn span_tree(
    root: &Phrase,
    video: &VideoRecord,
    vocab: &ConceptVocabulary,
    kg: &KgModel,
    cfg: &SpanConfig,
) -> DependencyTree {
    let mut tree = DependencyTree::root_only(root.clone(), &video.video_id);
    let root_lemmas: Vec<&str> = root_lemma_list(root);

    let mut candidates: Vec<Phrase> = Vec::new();
    for (i, &g) in video.ind_obj.iter().enumerate() {
        if g == 1 && !root_lemmas.contains(&vocab.objects[i].as_str()) {
            candidates.push(Phrase::Noun(vocab.objects[i].clone()));
        }
    }
    for (j, &g) in video.ind_act.iter().enumerate() {
        if g == 1 && !root_lemmas.contains(&vocab.actions[j].as_str()) {
            candidates.push(Phrase::Verb(vocab.actions[j].clone()));
        }
    }

    while tree.nodes.len() < cfg.max_nodes && !candidates.is_empty() {
        let links = predict_links(kg, &tree.nodes, &candidates, cfg.s_max);
        let Some(best) = links.first() else { break };
        let parent = tree
            .nodes
            .iter()
            .position(|n| *n == best.head)
            .expect("predicted head comes from the tree");
        tree.nodes.push(best.tail.clone());
        tree.edges.push((parent, best.relation.clone(), tree.nodes.len() - 1));
        candidates.retain(|c| c != &best.tail);
    }
    tree
}

fn root_lemma_list(root: &Phrase) -> Vec<&str> {
    match root {
        Phrase::Noun(n) => vec![n.as_str()],
        Phrase::Verb(v) => vec![v.as_str()],
        Phrase::NounVerb(n, v) => vec![n.as_str(), v.as_str()],
    }
}

/// Linearizes a tree into a pseudo sentence, depth-first from the root.
///
/// Each node contributes its lemmas (noun before verb). Children attach in a
/// fixed order: `obj` children first with no connective token, then the
/// remaining children sorted by relation label (the label itself is emitted
/// before the child subtree). Children tied on relation order by their own
/// token string.
pub fn linearize(tree: &DependencyTree) -> Vec<String> {
    let mut tokens = Vec::new();
    emit(tree, 0, &mut tokens);
    tokens
}

fn emit(tree: &DependencyTree, node: usize, tokens: &mut Vec<String>) {
    tokens.extend(tree.nodes[node].tokens().into_iter().map(String::from));
    let mut children: Vec<&(usize, String, usize)> =
        tree.edges.iter().filter(|(p, _, _)| *p == node).collect();
    children.sort_by_key(|(_, rel, c)| {
        (rel != "obj", rel.clone(), tree.nodes[*c].to_string())
    });
    for (_, rel, child) in children {
        if rel != "obj" {
            tokens.push(rel.clone());
        }
        emit(tree, *child, tokens);
    }
}
