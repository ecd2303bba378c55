//! Link prediction between tree nodes and candidate concepts.
//!
//! Every `(head ∈ in_tree, relation, tail ∈ candidates)` combination is
//! scored; combinations at or below the plausibility ceiling are returned in
//! a deterministic total order: ascending score, then relation label, then
//! tail tokens, then the head's position in `in_tree`.

use crate::corpusio::Phrase;

use super::{gate_blend, score_slices, ComplexVec, EntityKind, KgModel};

/// One plausible link proposed by [`predict_links`].
#[derive(Debug, Clone, PartialEq)]
pub struct LinkCandidate {
    pub head: Phrase,
    pub relation: String,
    pub tail: Phrase,
    pub score: f64,
}

/// Entity slots a head phrase resolved to; unresolved slots stay `None`.
enum HeadSlots {
    Single(Option<usize>),
    Pair(Option<usize>, Option<usize>),
}

/// Scores all `(u ∈ in_tree, r, v ∈ candidates)` triplets and returns those
/// with score ≤ `s_max`, sorted ascending with deterministic tie-breaks.
/// Unknown lemmas contribute zero embeddings and a warning, never an error.
pub fn predict_links(
    model: &KgModel,
    in_tree: &[Phrase],
    candidates: &[Phrase],
    s_max: f64,
) -> Vec<LinkCandidate> {
    let dim = model.dim;
    let heads: Vec<HeadSlots> = in_tree.iter().map(|p| resolve_head(model, p)).collect();
    let tails: Vec<ComplexVec> = candidates.iter().map(|p| tail_embedding(model, p)).collect();

    let mut out = Vec::new();
    for (t_idx, tail_phrase) in candidates.iter().enumerate() {
        let tail = &tails[t_idx];
        for (h_idx, head_phrase) in in_tree.iter().enumerate() {
            let head = head_embedding(model, &heads[h_idx], tail, dim);
            for (r_idx, relation) in model.relations.iter().enumerate() {
                let score = score_slices(
                    &head.re,
                    &head.im,
                    model.params.phases.row(r_idx),
                    &tail.re,
                    &tail.im,
                );
                if score <= s_max {
                    out.push((score, relation.clone(), tail_phrase.clone(), h_idx, head_phrase));
                }
            }
        }
    }
    out.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .expect("finite scores")
            .then_with(|| a.1.cmp(&b.1))
            .then_with(|| a.2.to_string().cmp(&b.2.to_string()))
            .then_with(|| a.3.cmp(&b.3))
    });
    out.into_iter()
        .map(|(score, relation, tail, _, head)| LinkCandidate {
            head: head.clone(),
            relation,
            tail,
            score,
        })
        .collect()
}

fn lookup(model: &KgModel, kind: EntityKind, lemma: &str, phrase: &Phrase) -> Option<usize> {
    let idx = model.entity_index(kind, lemma);
    if idx.is_none() {
        log::warn!("phrase '{phrase}' has no entity for lemma '{lemma}'; using a zero embedding");
    }
    idx
}

fn resolve_head(model: &KgModel, phrase: &Phrase) -> HeadSlots {
    match phrase {
        Phrase::Noun(n) => HeadSlots::Single(lookup(model, EntityKind::Object, n, phrase)),
        Phrase::Verb(v) => HeadSlots::Single(lookup(model, EntityKind::Action, v, phrase)),
        Phrase::NounVerb(n, v) => HeadSlots::Pair(
            lookup(model, EntityKind::Object, n, phrase),
            lookup(model, EntityKind::Action, v, phrase),
        ),
    }
}

/// Composite heads blend through the gate; a pair with one unresolved
/// component degenerates to the resolved component alone.
fn head_embedding(
    model: &KgModel,
    slots: &HeadSlots,
    tail: &ComplexVec,
    dim: usize,
) -> ComplexVec {
    match slots {
        HeadSlots::Single(None) | HeadSlots::Pair(None, None) => ComplexVec::zeros(dim),
        HeadSlots::Single(Some(i))
        | HeadSlots::Pair(Some(i), None)
        | HeadSlots::Pair(None, Some(i)) => model.entity_embedding(*i),
        HeadSlots::Pair(Some(o), Some(a)) => gate_blend(
            &model.entity_embedding(*o),
            &model.entity_embedding(*a),
            tail,
            &model.params.gate_w,
            &model.params.gate_b,
        ),
    }
}

/// Tails must be single entities; composite or unknown tail phrases fall back
/// to a zero embedding with a warning.
fn tail_embedding(model: &KgModel, phrase: &Phrase) -> ComplexVec {
    let idx = match phrase {
        Phrase::Noun(n) => lookup(model, EntityKind::Object, n, phrase),
        Phrase::Verb(v) => lookup(model, EntityKind::Action, v, phrase),
        Phrase::NounVerb(..) => {
            log::warn!("composite phrase '{phrase}' cannot be a link tail; using a zero embedding");
            None
        }
    };
    match idx {
        Some(i) => model.entity_embedding(i),
        None => ComplexVec::zeros(model.dim),
    }
}
