//! Knowledge-graph embeddings with rotation-based triplet scoring.
//!
//! Entities are complex vectors; each relation is a per-coordinate phase
//! vector, i.e. a unit-modulus complex rotation. A triplet `(h, r, t)` scores
//! `sum_k |h(k) * e^{i theta(k)} - t(k)|` — low scores mean plausible links.
//! Noun-verb heads are not stored: they are composed on the fly from the noun
//! and verb entity embeddings through a sigmoid gate conditioned on both
//! components and the tail.

mod checkpoint;
mod eval;
mod predict;
mod train;

pub use checkpoint::{read_kg_checkpoint, write_kg_checkpoint};
pub use eval::{filtered_link_metrics, LinkMetrics};
pub use predict::{predict_links, LinkCandidate};
pub use train::{kg_step_gradient, kg_step_loss, train_kg, KgTrainConfig};

use std::collections::HashMap;

use crate::corpusio::Phrase;
use crate::num::{sigmoid, Scalar, Tensor};
use crate::{Error, Real, Result};

/// A complex vector stored as separate real and imaginary parts.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexVec<F: Scalar = Real> {
    pub re: Vec<F>,
    pub im: Vec<F>,
}

impl<F: Scalar> ComplexVec<F> {
    pub fn zeros(dim: usize) -> Self {
        ComplexVec { re: vec![F::zero(); dim], im: vec![F::zero(); dim] }
    }

    pub fn from_parts(re: Vec<F>, im: Vec<F>) -> Result<Self> {
        if re.len() != im.len() {
            return Err(Error::Shape(format!(
                "real part has {} coordinates, imaginary {}",
                re.len(),
                im.len()
            )));
        }
        Ok(ComplexVec { re, im })
    }

    pub fn dim(&self) -> usize {
        self.re.len()
    }
}

/// Per-coordinate rotation angles of one relation.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationPhases<F: Scalar = Real>(pub Vec<F>);

impl<F: Scalar> RelationPhases<F> {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Gate that blends a noun and a verb entity into one composite head.
///
/// `w` maps the interleaved `(re, im)` concatenation `[h_obj; h_act; t]`
/// (6E reals) to E pre-activations; `b` is the bias. The blend weight is
/// `k = sigmoid(w^T c + b)`, applied per coordinate to both parts.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams<F: Scalar = Real> {
    pub w: Tensor<F>,
    pub b: Tensor<F>,
}

impl<F: Scalar> GateParams<F> {
    /// All-zero gate for dimension `dim`: every blend weight is 1/2.
    pub fn zeros(dim: usize) -> Self {
        GateParams { w: Tensor::zeros(6 * dim, dim), b: Tensor::zeros(dim, 1) }
    }

    pub fn dim(&self) -> usize {
        self.b.rows()
    }
}

/// Rotation score `sum_k |h(k) e^{i theta(k)} - t(k)|` (sum of complex moduli).
pub fn score_triplet<F: Scalar>(
    h: &ComplexVec<F>,
    r: &RelationPhases<F>,
    t: &ComplexVec<F>,
) -> Result<F> {
    if h.dim() != r.dim() || h.dim() != t.dim() {
        return Err(Error::Shape(format!(
            "score dimensions differ: head {}, relation {}, tail {}",
            h.dim(),
            r.dim(),
            t.dim()
        )));
    }
    Ok(score_slices(&h.re, &h.im, &r.0, &t.re, &t.im))
}

pub(crate) fn score_slices<F: Scalar>(
    h_re: &[F],
    h_im: &[F],
    theta: &[F],
    t_re: &[F],
    t_im: &[F],
) -> F {
    let mut score = F::zero();
    for k in 0..h_re.len() {
        let (sin, cos) = theta[k].sin_cos();
        let rot_re = h_re[k] * cos - h_im[k] * sin;
        let rot_im = h_re[k] * sin + h_im[k] * cos;
        let dx = rot_re - t_re[k];
        let dy = rot_im - t_im[k];
        score = score + (dx * dx + dy * dy).sqrt();
    }
    score
}

/// Interleaves `(re, im)` pairs of the gate inputs into one real vector.
pub(crate) fn gate_input<F: Scalar>(
    h_obj: &ComplexVec<F>,
    h_act: &ComplexVec<F>,
    tail: &ComplexVec<F>,
) -> Vec<F> {
    let dim = h_obj.dim();
    let mut c = Vec::with_capacity(6 * dim);
    for part in [h_obj, h_act, tail] {
        for k in 0..dim {
            c.push(part.re[k]);
            c.push(part.im[k]);
        }
    }
    c
}

/// Composes a head embedding from its components.
///
/// With only one component present that component is returned unchanged. With
/// both, the gate computes `k = sigmoid(w^T [h_obj; h_act; t] + b)` and blends
/// `k .* h_obj + (1 - k) .* h_act` coordinate-wise.
pub fn compose_head<F: Scalar>(
    h_obj: Option<&ComplexVec<F>>,
    h_act: Option<&ComplexVec<F>>,
    tail: &ComplexVec<F>,
    gate: &GateParams<F>,
) -> Result<ComplexVec<F>> {
    match (h_obj, h_act) {
        (None, None) => Err(Error::Argument("compose_head needs at least one component".into())),
        (Some(o), None) => Ok(o.clone()),
        (None, Some(a)) => Ok(a.clone()),
        (Some(o), Some(a)) => {
            let dim = o.dim();
            if a.dim() != dim || tail.dim() != dim {
                return Err(Error::Shape(format!(
                    "compose dimensions differ: obj {}, act {}, tail {}",
                    dim,
                    a.dim(),
                    tail.dim()
                )));
            }
            if gate.dim() != dim || gate.w.rows() != 6 * dim {
                return Err(Error::Shape(format!(
                    "gate shaped {}x{} does not fit dimension {dim}",
                    gate.w.rows(),
                    gate.w.cols()
                )));
            }
            Ok(gate_blend(o, a, tail, &gate.w, &gate.b))
        }
    }
}

/// Core of the gated blend, shared with the hot scoring paths.
pub(crate) fn gate_blend<F: Scalar>(
    o: &ComplexVec<F>,
    a: &ComplexVec<F>,
    tail: &ComplexVec<F>,
    gate_w: &Tensor<F>,
    gate_b: &Tensor<F>,
) -> ComplexVec<F> {
    let dim = o.dim();
    let c = gate_input(o, a, tail);
    let pre = gate_w.matvec_transpose(&c);
    let mut out = ComplexVec::zeros(dim);
    for k in 0..dim {
        let kh = sigmoid(pre[k] + gate_b.data[k]);
        out.re[k] = kh * o.re[k] + (F::one() - kh) * a.re[k];
        out.im[k] = kh * o.im[k] + (F::one() - kh) * a.im[k];
    }
    out
}

/// Entity namespace: nouns and verbs are distinct entities even when their
/// lemmas collide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EntityKind {
    Object,
    Action,
}

/// A stored triplet with phrases resolved to entity indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StoredTriplet {
    pub head: NodeRef,
    pub relation: usize,
    pub tail: usize,
}

/// Head reference: a single entity or a composite noun-verb pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeRef {
    Single(usize),
    Pair { obj: usize, act: usize },
}

/// Trainable knowledge-graph parameters as one [`crate::num::ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct KgParams {
    /// Entity real parts, one row per entity.
    pub ent_re: Tensor,
    /// Entity imaginary parts.
    pub ent_im: Tensor,
    /// Relation phase angles, one row per relation.
    pub phases: Tensor,
    pub gate_w: Tensor,
    pub gate_b: Tensor,
}

impl crate::num::ParamSet for KgParams {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.ent_re, &self.ent_im, &self.phases, &self.gate_w, &self.gate_b]
    }
    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.ent_re,
            &mut self.ent_im,
            &mut self.phases,
            &mut self.gate_w,
            &mut self.gate_b,
        ]
    }
}

/// Score of a resolved triplet directly from a parameter set. Composite heads
/// are blended through the gate, which conditions on the tail embedding.
pub fn stored_score(params: &KgParams, t: &StoredTriplet) -> f64 {
    let tail = ComplexVec {
        re: params.ent_re.row(t.tail).to_vec(),
        im: params.ent_im.row(t.tail).to_vec(),
    };
    let head = match t.head {
        NodeRef::Single(i) => ComplexVec {
            re: params.ent_re.row(i).to_vec(),
            im: params.ent_im.row(i).to_vec(),
        },
        NodeRef::Pair { obj, act } => {
            let o = ComplexVec {
                re: params.ent_re.row(obj).to_vec(),
                im: params.ent_im.row(obj).to_vec(),
            };
            let a = ComplexVec {
                re: params.ent_re.row(act).to_vec(),
                im: params.ent_im.row(act).to_vec(),
            };
            gate_blend(&o, &a, &tail, &params.gate_w, &params.gate_b)
        }
    };
    score_slices(&head.re, &head.im, params.phases.row(t.relation), &tail.re, &tail.im)
}

/// A trained knowledge graph: entity/relation inventories, parameters, the
/// margin used during training, and the training triplet store.
#[derive(Debug, Clone)]
pub struct KgModel {
    pub dim: usize,
    pub margin: f64,
    /// `(kind, lemma)` per entity, sorted.
    pub entities: Vec<(EntityKind, String)>,
    /// Relation labels, sorted.
    pub relations: Vec<String>,
    pub params: KgParams,
    pub triplets: Vec<StoredTriplet>,
    index: HashMap<(EntityKind, String), usize>,
    rel_index: HashMap<String, usize>,
}

impl KgModel {
    /// Builds an untrained model over the given inventories with zeroed
    /// parameters; the trainer fills them in.
    pub fn new(
        dim: usize,
        margin: f64,
        entities: Vec<(EntityKind, String)>,
        relations: Vec<String>,
    ) -> Self {
        let index = entities.iter().cloned().enumerate().map(|(i, e)| (e, i)).collect();
        let rel_index = relations.iter().cloned().enumerate().map(|(i, r)| (r, i)).collect();
        let params = KgParams {
            ent_re: Tensor::zeros(entities.len(), dim),
            ent_im: Tensor::zeros(entities.len(), dim),
            phases: Tensor::zeros(relations.len(), dim),
            gate_w: Tensor::zeros(6 * dim, dim),
            gate_b: Tensor::zeros(dim, 1),
        };
        KgModel { dim, margin, entities, relations, params, triplets: Vec::new(), index, rel_index }
    }

    pub fn entity_index(&self, kind: EntityKind, lemma: &str) -> Option<usize> {
        self.index.get(&(kind, lemma.to_string())).copied()
    }

    pub fn relation_id(&self, label: &str) -> Option<usize> {
        self.rel_index.get(label).copied()
    }

    /// Entity embedding as an owned complex vector.
    pub fn entity_embedding(&self, idx: usize) -> ComplexVec {
        ComplexVec {
            re: self.params.ent_re.row(idx).to_vec(),
            im: self.params.ent_im.row(idx).to_vec(),
        }
    }

    /// Resolves a phrase to a node reference; `None` when any lemma is
    /// missing from the entity inventory.
    pub fn resolve(&self, phrase: &Phrase) -> Option<NodeRef> {
        match phrase {
            Phrase::Noun(n) => self.entity_index(EntityKind::Object, n).map(NodeRef::Single),
            Phrase::Verb(v) => self.entity_index(EntityKind::Action, v).map(NodeRef::Single),
            Phrase::NounVerb(n, v) => {
                let obj = self.entity_index(EntityKind::Object, n)?;
                let act = self.entity_index(EntityKind::Action, v)?;
                Some(NodeRef::Pair { obj, act })
            }
        }
    }

    /// Phrase for a stored entity index.
    pub fn entity_phrase(&self, idx: usize) -> Phrase {
        let (kind, lemma) = &self.entities[idx];
        match kind {
            EntityKind::Object => Phrase::Noun(lemma.clone()),
            EntityKind::Action => Phrase::Verb(lemma.clone()),
        }
    }

    /// Head embedding for scoring against tail `tail_idx`: composite heads are
    /// blended through the gate, which conditions on the tail.
    pub fn head_embedding(&self, head: NodeRef, tail: &ComplexVec) -> ComplexVec {
        match head {
            NodeRef::Single(i) => self.entity_embedding(i),
            NodeRef::Pair { obj, act } => gate_blend(
                &self.entity_embedding(obj),
                &self.entity_embedding(act),
                tail,
                &self.params.gate_w,
                &self.params.gate_b,
            ),
        }
    }

    /// Score of a stored triplet under the current parameters.
    pub fn score_stored(&self, t: &StoredTriplet) -> f64 {
        stored_score(&self.params, t)
    }

    /// Link-plausibility ceiling calibrated as the 25th percentile
    /// (nearest-rank) of the training-triplet scores.
    pub fn calibrate_score_ceiling(&self) -> Result<f64> {
        if self.triplets.is_empty() {
            return Err(Error::Train("cannot calibrate ceiling without triplets".into()));
        }
        let mut scores: Vec<f64> = self.triplets.iter().map(|t| self.score_stored(t)).collect();
        scores.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
        let rank = ((scores.len() as f64) * 0.25).ceil().max(1.0) as usize;
        Ok(scores[rank - 1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cv(re: Vec<f64>, im: Vec<f64>) -> ComplexVec {
        ComplexVec::from_parts(re, im).unwrap()
    }

    #[test]
    fn identity_rotation_onto_itself_scores_zero() {
        let h = cv(vec![0.3, -1.2], vec![0.7, 0.1]);
        let r = RelationPhases(vec![0.0, 0.0]);
        let s = score_triplet(&h, &r, &h.clone()).unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn quarter_turn_of_unit_real_against_zero_tail_scores_one() {
        // h = 1 + 0i, theta = pi/2, t = 0: |i| = 1.
        let h = cv(vec![1.0], vec![0.0]);
        let r = RelationPhases(vec![std::f64::consts::FRAC_PI_2]);
        let t = cv(vec![0.0], vec![0.0]);
        let s = score_triplet(&h, &r, &t).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn half_turn_doubles_the_unit_vector_distance() {
        // h = 1 + 0i rotated by pi gives -1; against t = 1 the modulus is 2.
        let h = cv(vec![1.0], vec![0.0]);
        let r = RelationPhases(vec![std::f64::consts::PI]);
        let t = cv(vec![1.0], vec![0.0]);
        let s = score_triplet(&h, &r, &t).unwrap();
        assert!((s - 2.0).abs() < 1e-12);
    }

    #[test]
    fn score_is_invariant_under_global_unit_rotation() {
        // Multiplying head and tail by one unit-modulus factor preserves the
        // score: |u| = 1 factors out of every modulus.
        let mut rng = crate::num::stream_rng(13, 0);
        for _ in 0..20 {
            let dim = 4;
            let mut rnd = |_: usize| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
            let h = cv(rnd(0), rnd(0));
            let t = cv(rnd(0), rnd(0));
            let r = RelationPhases((0..dim).map(|_| rng.gen_range(0.0..6.0)).collect());
            let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let (sin, cos) = phi.sin_cos();
            let rotate = |v: &ComplexVec| {
                let re = v.re.iter().zip(&v.im).map(|(a, b)| a * cos - b * sin).collect();
                let im = v.re.iter().zip(&v.im).map(|(a, b)| a * sin + b * cos).collect();
                cv(re, im)
            };
            let s0 = score_triplet(&h, &r, &t).unwrap();
            let s1 = score_triplet(&rotate(&h), &r, &rotate(&t)).unwrap();
            assert!((s0 - s1).abs() < 1e-9, "{s0} vs {s1}");
        }
    }

    #[test]
    fn score_kernel_also_runs_at_f32() {
        let h = ComplexVec::<f32> { re: vec![1.0], im: vec![0.0] };
        let t = ComplexVec::<f32> { re: vec![0.0], im: vec![0.0] };
        let r = RelationPhases::<f32>(vec![std::f32::consts::FRAC_PI_2]);
        let s = score_triplet(&h, &r, &t).unwrap();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn compose_degenerate_branches_return_the_sole_component() {
        let gate = GateParams::<f64>::zeros(2);
        let o = cv(vec![1.0, 2.0], vec![0.0, -1.0]);
        let t = cv(vec![0.0, 0.0], vec![0.0, 0.0]);
        assert_eq!(compose_head(Some(&o), None, &t, &gate).unwrap(), o);
        assert_eq!(compose_head(None, Some(&o), &t, &gate).unwrap(), o);
        assert!(compose_head::<f64>(None, None, &t, &gate).is_err());
    }

    #[test]
    fn zero_gate_blends_to_the_midpoint() {
        let gate = GateParams::<f64>::zeros(2);
        let o = cv(vec![2.0, 0.0], vec![0.0, 4.0]);
        let a = cv(vec![0.0, 2.0], vec![2.0, 0.0]);
        let t = cv(vec![0.5, 0.5], vec![0.5, 0.5]);
        let h = compose_head(Some(&o), Some(&a), &t, &gate).unwrap();
        assert_eq!(h.re, vec![1.0, 1.0]);
        assert_eq!(h.im, vec![1.0, 2.0]);
    }

    #[test]
    fn gate_output_stays_strictly_inside_unit_interval() {
        // Even extreme inputs keep the blend a proper convex combination.
        let mut rng = crate::num::stream_rng(14, 0);
        for _ in 0..50 {
            let dim = 3;
            let mut gate = GateParams::<f64>::zeros(dim);
            for v in &mut gate.w.data {
                *v = rng.gen_range(-20.0..20.0);
            }
            for v in &mut gate.b.data {
                *v = rng.gen_range(-20.0..20.0);
            }
            let mut rnd = || {
                cv(
                    (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                    (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                )
            };
            let (o, a, t) = (rnd(), rnd(), rnd());
            let h = compose_head(Some(&o), Some(&a), &t, &gate).unwrap();
            for k in 0..dim {
                let lo = o.re[k].min(a.re[k]);
                let hi = o.re[k].max(a.re[k]);
                assert!(h.re[k] > lo - 1e-12 && h.re[k] < hi + 1e-12);
            }
        }
    }

    #[test]
    fn ceiling_is_the_25th_percentile_nearest_rank() {
        let mut model = KgModel::new(
            1,
            6.0,
            vec![
                (EntityKind::Object, "a".into()),
                (EntityKind::Object, "b".into()),
                (EntityKind::Object, "c".into()),
                (EntityKind::Object, "d".into()),
            ],
            vec!["r".into()],
        );
        // Entities at 0, 1, 2, 3 on the real line; identity relation. Scores
        // of (e_k, r, e_0) are 0, 1, 2, 3; the 25th percentile of 4 values by
        // nearest rank is the 1st smallest = 0.
        for (i, v) in [0.0, 1.0, 2.0, 3.0].into_iter().enumerate() {
            model.params.ent_re.set(i, 0, v);
        }
        model.triplets = (0..4)
            .map(|i| StoredTriplet { head: NodeRef::Single(i), relation: 0, tail: 0 })
            .collect();
        assert_eq!(model.calibrate_score_ceiling().unwrap(), 0.0);
    }
}
