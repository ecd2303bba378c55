//! Visual concept grounding: region attention and per-concept classifiers.
//!
//! Each video carries two precomputed feature maps (object and action
//! streams) of `q` region rows. A concept is grounded by attending the map
//! with the concept's word embedding — `alpha = softmax(f · (T e))`,
//! `attended = alpha^T f` — and classifying the attended feature with a
//! softmax head. Concept `i` is active when its own class probability
//! reaches the confidence threshold, and a noun-verb pair is spatially
//! consistent when the total-variation distance between their attention
//! distributions stays within the consistency threshold.

mod features;

pub use features::{
    load_video_features, parse_annotations, read_feature_map, read_global_feature,
    write_feature_map, write_global_feature, StreamTag,
};

use std::collections::BTreeMap;

use rand::Rng;

use crate::corpusio::{ConceptVocabulary, Phrase};
use crate::num::{softmax_backward, softmax_inplace, total_variation, ParamSet};
use crate::{Error, Real, Result, Tensor};

/// Trainable grounding parameters: one feature transform and one classifier
/// per stream. Word embeddings and feature maps stay fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundingParams {
    /// Object-stream transform, `d x h` (feature dim by embedding dim).
    pub t_obj: Tensor,
    /// Action-stream transform, `d x h`.
    pub t_act: Tensor,
    /// Object classifier weights, one row per object concept (`N_o x d`).
    pub w_obj: Tensor,
    /// Object classifier bias, `N_o x 1`.
    pub b_obj: Tensor,
    pub w_act: Tensor,
    pub b_act: Tensor,
}

impl ParamSet for GroundingParams {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.t_obj, &self.t_act, &self.w_obj, &self.b_obj, &self.w_act, &self.b_act]
    }
    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.t_obj,
            &mut self.t_act,
            &mut self.w_obj,
            &mut self.b_obj,
            &mut self.w_act,
            &mut self.b_act,
        ]
    }
}

impl GroundingParams {
    pub fn zeros(d: usize, h: usize, n_obj: usize, n_act: usize) -> Self {
        GroundingParams {
            t_obj: Tensor::zeros(d, h),
            t_act: Tensor::zeros(d, h),
            w_obj: Tensor::zeros(n_obj, d),
            b_obj: Tensor::zeros(n_obj, 1),
            w_act: Tensor::zeros(n_act, d),
            b_act: Tensor::zeros(n_act, 1),
        }
    }

    /// Uniform random initialization in `[-scale, scale)` (biases zero).
    pub fn init_uniform(
        d: usize,
        h: usize,
        n_obj: usize,
        n_act: usize,
        scale: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let mut params = Self::zeros(d, h, n_obj, n_act);
        for t in [&mut params.t_obj, &mut params.t_act, &mut params.w_obj, &mut params.w_act] {
            for v in t.data.iter_mut() {
                *v = rng.gen_range(-scale..scale);
            }
        }
        params
    }
}

/// Confidence and consistency thresholds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConceptThresholds {
    /// Minimum own-class probability for a concept to count as present.
    pub confidence: f64,
    /// Maximum attention total-variation distance for a subject-predicate
    /// pair to count as spatially consistent.
    pub consistency: f64,
}

impl Default for ConceptThresholds {
    fn default() -> Self {
        ConceptThresholds { confidence: 0.99, consistency: 0.1 }
    }
}

/// One video's precomputed features, weak annotation, and the persistent
/// indicator vectors the refinement loop updates.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    /// Object-stream feature map, `q x d`.
    pub fmap_obj: Tensor,
    /// Action-stream feature map, `q x d` (may equal the object map).
    pub fmap_act: Tensor,
    /// Global video feature.
    pub global: Vec<Real>,
    /// The single weak concept label.
    pub annotation: Phrase,
    /// Object indicator vector, one entry per vocabulary object.
    pub ind_obj: Vec<u8>,
    /// Action indicator vector, one entry per vocabulary action.
    pub ind_act: Vec<u8>,
}

impl VideoRecord {
    /// Checks indicator lengths and that the annotation lemma is known.
    pub fn validate(&self, vocab: &ConceptVocabulary) -> Result<()> {
        if self.ind_obj.len() != vocab.objects.len()
            || self.ind_act.len() != vocab.actions.len()
        {
            return Err(Error::Shape(format!(
                "video {}: indicator lengths {}x{} do not match vocabulary {}x{}",
                self.video_id,
                self.ind_obj.len(),
                self.ind_act.len(),
                vocab.objects.len(),
                vocab.actions.len()
            )));
        }
        let known = match &self.annotation {
            Phrase::Noun(n) => vocab.object_index(n).is_some(),
            Phrase::Verb(v) => vocab.action_index(v).is_some(),
            Phrase::NounVerb(n, v) => {
                vocab.object_index(n).is_some() && vocab.action_index(v).is_some()
            }
        };
        if !known {
            return Err(Error::Vocab(format!(
                "video {}: annotation '{}' is not in the vocabulary",
                self.video_id, self.annotation
            )));
        }
        Ok(())
    }
}

/// Attention over region rows: `alpha = softmax(fmap · (t · e))` and the
/// attended feature `alpha^T fmap`. Returns `(attended, alpha)`.
pub fn attend(fmap: &Tensor, e: &[Real], t: &Tensor) -> Result<(Vec<Real>, Vec<Real>)> {
    if t.cols() != e.len() || fmap.cols() != t.rows() {
        return Err(Error::Shape(format!(
            "attend: fmap {}x{}, transform {}x{}, embedding {}",
            fmap.rows(),
            fmap.cols(),
            t.rows(),
            t.cols(),
            e.len()
        )));
    }
    let projected = t.matvec(e);
    let mut alpha = fmap.matvec(&projected);
    softmax_inplace(&mut alpha);
    let attended = fmap.matvec_transpose(&alpha);
    Ok((attended, alpha))
}

/// Class distribution of an attended feature under one stream's classifier.
pub fn concept_probabilities(attended: &[Real], w: &Tensor, b: &Tensor) -> Result<Vec<Real>> {
    if w.cols() != attended.len() || b.rows() != w.rows() {
        return Err(Error::Shape(format!(
            "classifier {}x{} with bias {} cannot score a {}-feature",
            w.rows(),
            w.cols(),
            b.rows(),
            attended.len()
        )));
    }
    let mut logits = w.matvec(attended);
    for (l, bv) in logits.iter_mut().zip(&b.data) {
        *l += *bv;
    }
    softmax_inplace(&mut logits);
    Ok(logits)
}

/// Total-variation distance between two attention distributions, in [0, 1].
/// A pair is spatially consistent when this is at most the consistency
/// threshold.
pub fn spatial_distance(alpha_obj: &[Real], alpha_act: &[Real]) -> Result<Real> {
    if alpha_obj.len() != alpha_act.len() {
        return Err(Error::Shape(format!(
            "attention lengths differ: {} vs {}",
            alpha_obj.len(),
            alpha_act.len()
        )));
    }
    Ok(total_variation(alpha_obj, alpha_act))
}

/// Output of [`generate_concepts`]: indicator vectors plus the attention
/// distribution of every active concept.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundedConcepts {
    pub g_obj: Vec<u8>,
    pub g_act: Vec<u8>,
    pub alpha_obj: BTreeMap<usize, Vec<Real>>,
    pub alpha_act: BTreeMap<usize, Vec<Real>>,
}

/// Grounds every vocabulary concept in the video: concept `i` is active when
/// the classifier's probability for class `i`, after attending with concept
/// `i`'s embedding, reaches the confidence threshold. Attention distributions
/// are cached for active concepts.
pub fn generate_concepts(
    video: &VideoRecord,
    vocab: &ConceptVocabulary,
    params: &GroundingParams,
    thresholds: &ConceptThresholds,
) -> Result<GroundedConcepts> {
    if !vocab.has_embeddings() {
        return Err(Error::Vocab("concept grounding requires attached embeddings".into()));
    }
    let mut out = GroundedConcepts {
        g_obj: vec![0; vocab.objects.len()],
        g_act: vec![0; vocab.actions.len()],
        ..GroundedConcepts::default()
    };
    for (i, e) in vocab.embeddings.objects.iter().enumerate() {
        let (attended, alpha) = attend(&video.fmap_obj, e, &params.t_obj)?;
        let p = concept_probabilities(&attended, &params.w_obj, &params.b_obj)?;
        if p[i] >= thresholds.confidence {
            out.g_obj[i] = 1;
            out.alpha_obj.insert(i, alpha);
        }
    }
    for (i, e) in vocab.embeddings.actions.iter().enumerate() {
        let (attended, alpha) = attend(&video.fmap_act, e, &params.t_act)?;
        let p = concept_probabilities(&attended, &params.w_act, &params.b_act)?;
        if p[i] >= thresholds.confidence {
            out.g_act[i] = 1;
            out.alpha_act.insert(i, alpha);
        }
    }
    Ok(out)
}

/// [`concept_loss_gradient`] without the gradient bookkeeping.
pub fn concept_loss(
    videos: &[&VideoRecord],
    vocab: &ConceptVocabulary,
    params: &GroundingParams,
) -> Result<Real> {
    let mut scratch = params.zeros_like();
    Ok(concept_loss_gradient(videos, vocab, params, &mut scratch)?.loss)
}

/// Loss value and count of probability clamps from one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConceptLossOutcome {
    pub loss: Real,
    /// Indicated concepts whose probability fell below the clamp floor;
    /// their terms use the floor and contribute no gradient.
    pub clamped: usize,
}

const PROB_FLOOR: Real = 1e-12;

/// Mean negative log-likelihood of the indicated concepts,
/// `-(1/(N_v (N_o + N_a))) * sum_videos sum_streams sum_i ind[i] * log p_i[i]`,
/// where `p_i` attends with concept `i`'s own embedding. Gradients flow into
/// the transforms and classifiers only and are added into `grads`.
pub fn concept_loss_gradient(
    videos: &[&VideoRecord],
    vocab: &ConceptVocabulary,
    params: &GroundingParams,
    grads: &mut GroundingParams,
) -> Result<ConceptLossOutcome> {
    if videos.is_empty() {
        return Ok(ConceptLossOutcome { loss: 0.0, clamped: 0 });
    }
    if !vocab.has_embeddings() {
        return Err(Error::Vocab("concept loss requires attached embeddings".into()));
    }
    let scale = 1.0 / (videos.len() as Real * vocab.concept_count() as Real);
    let mut loss = 0.0;
    let mut clamped = 0usize;
    for video in videos {
        video.validate(vocab)?;
        for (indicators, embeddings, fmap, t, w, b, t_grad, w_grad, b_grad) in [
            (
                &video.ind_obj,
                &vocab.embeddings.objects,
                &video.fmap_obj,
                &params.t_obj,
                &params.w_obj,
                &params.b_obj,
                &mut grads.t_obj,
                &mut grads.w_obj,
                &mut grads.b_obj,
            ),
            (
                &video.ind_act,
                &vocab.embeddings.actions,
                &video.fmap_act,
                &params.t_act,
                &params.w_act,
                &params.b_act,
                &mut grads.t_act,
                &mut grads.w_act,
                &mut grads.b_act,
            ),
        ] {
            for (i, e) in embeddings.iter().enumerate() {
                if indicators[i] == 0 {
                    continue;
                }
                let (attended, alpha) = attend(fmap, e, t)?;
                let p = concept_probabilities(&attended, w, b)?;
                if p[i] < PROB_FLOOR {
                    loss += -scale * PROB_FLOOR.ln();
                    clamped += 1;
                    continue;
                }
                loss += -scale * p[i].ln();

                // d(-scale * log softmax(z)[i])/dz = scale * (p - onehot_i).
                let mut dz = p;
                dz[i] -= 1.0;
                for v in dz.iter_mut() {
                    *v *= scale;
                }
                w_grad.add_outer(&dz, &attended);
                for (g, d) in b_grad.data.iter_mut().zip(&dz) {
                    *g += *d;
                }
                let d_attended = w.matvec_transpose(&dz);
                let d_alpha = fmap.matvec(&d_attended);
                let d_logits = softmax_backward(&alpha, &d_alpha);
                let d_projected = fmap.matvec_transpose(&d_logits);
                t_grad.add_outer(&d_projected, e);
            }
        }
    }
    Ok(ConceptLossOutcome { loss, clamped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpusio::EmbeddingTable;
    use crate::num::{central_difference, gradient_rel_error, stream_rng};

    fn simplex(rng: &mut impl Rng, q: usize) -> Vec<f64> {
        let mut v: Vec<f64> = (0..q).map(|_| rng.gen_range(0.01..1.0)).collect();
        let sum: f64 = v.iter().sum();
        for x in v.iter_mut() {
            *x /= sum;
        }
        v
    }

    /// Vocabulary with `n_obj` objects, `n_act` actions, and random `h`-dim
    /// embeddings.
    fn fixture_vocab(n_obj: usize, n_act: usize, h: usize, rng: &mut impl Rng) -> ConceptVocabulary {
        let mut vocab = ConceptVocabulary::from_parts(
            (0..n_obj).map(|i| format!("obj{i}")).collect(),
            (0..n_act).map(|i| format!("act{i}")).collect(),
            vec!["obj".into()],
        );
        vocab.embeddings = EmbeddingTable {
            dim: h,
            objects: (0..n_obj)
                .map(|_| (0..h).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect(),
            actions: (0..n_act)
                .map(|_| (0..h).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect(),
            relations: vec![(0..h).map(|_| 0.0).collect()],
        };
        vocab
    }

    fn fixture_video(
        id: &str,
        q: usize,
        d: usize,
        vocab: &ConceptVocabulary,
        rng: &mut impl Rng,
    ) -> VideoRecord {
        VideoRecord {
            video_id: id.into(),
            fmap_obj: Tensor::from_fn(q, d, |_, _| rng.gen_range(-1.0..1.0)),
            fmap_act: Tensor::from_fn(q, d, |_, _| rng.gen_range(-1.0..1.0)),
            global: vec![0.0; 4],
            annotation: Phrase::Noun(vocab.objects[0].clone()),
            ind_obj: vec![0; vocab.objects.len()],
            ind_act: vec![0; vocab.actions.len()],
        }
    }

    #[test]
    fn uniform_attention_for_equal_logits_and_single_region() {
        let fmap = Tensor::from_vec(2, 2, vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let t = Tensor::zeros(2, 2);
        let (attended, alpha) = attend(&fmap, &[0.4, 0.6], &t).unwrap();
        assert_eq!(alpha, vec![0.5, 0.5]);
        assert_eq!(attended, vec![3.0, 5.0]);

        let single = Tensor::from_vec(1, 2, vec![2.0, -1.0]).unwrap();
        let (attended, alpha) = attend(&single, &[0.4, 0.6], &t).unwrap();
        assert_eq!(alpha, vec![1.0]);
        assert_eq!(attended, vec![2.0, -1.0]);
    }

    #[test]
    fn saturated_attention_selects_one_row() {
        // fmap rows [1, 0] and [0, 1]; transform identity; embedding [50, 0]
        // puts row 0's logit 50 above row 1's.
        let fmap = Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let t = Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let (attended, _) = attend(&fmap, &[50.0, 0.0], &t).unwrap();
        assert!((attended[0] - 1.0).abs() < 1e-15);
        assert!(attended[1].abs() < 1e-15);
    }

    #[test]
    fn attend_rejects_mismatched_shapes() {
        let fmap = Tensor::zeros(2, 3);
        let t = Tensor::zeros(3, 2);
        assert!(attend(&fmap, &[1.0, 2.0, 3.0], &t).is_err());
        let t_bad = Tensor::zeros(4, 2);
        assert!(attend(&fmap, &[1.0, 2.0], &t_bad).is_err());
    }

    #[test]
    fn zero_classifier_is_uniform_and_bias_saturates() {
        let w = Tensor::zeros(4, 3);
        let b = Tensor::zeros(4, 1);
        let p = concept_probabilities(&[0.3, -0.2, 0.9], &w, &b).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let mut b = Tensor::zeros(4, 1);
        b.data[2] = 100.0;
        let p = concept_probabilities(&[0.3, -0.2, 0.9], &w, &b).unwrap();
        assert!(p[2] > 0.999);
    }

    #[test]
    fn permuting_classes_permutes_probabilities() {
        let mut rng = stream_rng(31, 0);
        let w = Tensor::from_fn(3, 4, |_, _| rng.gen_range(-1.0..1.0));
        let b = Tensor::from_fn(3, 1, |_, _| rng.gen_range(-1.0..1.0));
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = concept_probabilities(&x, &w, &b).unwrap();

        // Swap classes 0 and 2.
        let perm = [2usize, 1, 0];
        let w2 = Tensor::from_fn(3, 4, |r, c| w.get(perm[r], c));
        let b2 = Tensor::from_fn(3, 1, |r, _| b.get(perm[r], 0));
        let p2 = concept_probabilities(&x, &w2, &b2).unwrap();
        for r in 0..3 {
            assert!((p2[r] - p[perm[r]]).abs() < 1e-15);
        }
    }

    #[test]
    fn spatial_distance_matches_hand_values() {
        assert_eq!(spatial_distance(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        assert!((spatial_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        let d = spatial_distance(&[0.9, 0.1], &[0.8, 0.2]).unwrap();
        assert!((d - 0.1).abs() < 1e-12);
        assert!(spatial_distance(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn spatial_distance_is_a_metric_on_random_simplices() {
        let mut rng = stream_rng(47, 0);
        for _ in 0..50 {
            let q = rng.gen_range(2..6);
            let a = simplex(&mut rng, q);
            let b = simplex(&mut rng, q);
            let c = simplex(&mut rng, q);
            let ab = spatial_distance(&a, &b).unwrap();
            let ba = spatial_distance(&b, &a).unwrap();
            let ac = spatial_distance(&a, &c).unwrap();
            let cb = spatial_distance(&c, &b).unwrap();
            assert_eq!(ab, ba);
            assert!((0.0..=1.0).contains(&ab));
            assert!(ab <= ac + cb + 1e-12);
            assert_eq!(spatial_distance(&a, &a).unwrap(), 0.0);
        }
    }

    #[test]
    fn confident_classes_become_active_concepts() {
        // Single region, identity-ish setup: attended feature equals the one
        // fmap row [1, 0]; object class 0 weights [100, 0] saturate class 0.
        // Both action classes stay at 1/2 under the zero classifier.
        let mut rng = stream_rng(53, 0);
        let vocab = fixture_vocab(2, 2, 2, &mut rng);
        let mut video = fixture_video("v0", 1, 2, &vocab, &mut rng);
        video.fmap_obj = Tensor::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let mut params = GroundingParams::zeros(2, 2, 2, 2);
        params.w_obj.row_mut(0)[0] = 100.0;

        let grounded =
            generate_concepts(&video, &vocab, &params, &ConceptThresholds::default()).unwrap();
        assert_eq!(grounded.g_obj, vec![1, 0]);
        assert_eq!(grounded.g_act, vec![0, 0]);
        assert!(grounded.alpha_obj.contains_key(&0));
        assert!(!grounded.alpha_obj.contains_key(&1));
        assert_eq!(grounded.alpha_obj[&0], vec![1.0]);
    }

    #[test]
    fn raising_the_confidence_threshold_never_adds_concepts() {
        let mut rng = stream_rng(59, 0);
        for round in 0..10 {
            let vocab = fixture_vocab(3, 2, 4, &mut rng);
            let video = fixture_video(&format!("v{round}"), 3, 5, &vocab, &mut rng);
            let params = GroundingParams::init_uniform(5, 4, 3, 2, 2.0, &mut rng);
            let low = ConceptThresholds { confidence: 0.2, consistency: 0.1 };
            let high = ConceptThresholds { confidence: 0.6, consistency: 0.1 };
            let g_low = generate_concepts(&video, &vocab, &params, &low).unwrap();
            let g_high = generate_concepts(&video, &vocab, &params, &high).unwrap();
            for i in 0..3 {
                assert!(g_high.g_obj[i] <= g_low.g_obj[i]);
            }
            for i in 0..2 {
                assert!(g_high.g_act[i] <= g_low.g_act[i]);
            }
        }
    }

    #[test]
    fn unreachable_threshold_grounds_nothing() {
        let mut rng = stream_rng(61, 0);
        let vocab = fixture_vocab(3, 2, 4, &mut rng);
        let video = fixture_video("v0", 3, 5, &vocab, &mut rng);
        let params = GroundingParams::init_uniform(5, 4, 3, 2, 0.5, &mut rng);
        let thresholds = ConceptThresholds { confidence: 1.0, consistency: 0.1 };
        let grounded = generate_concepts(&video, &vocab, &params, &thresholds).unwrap();
        assert!(grounded.g_obj.iter().all(|&g| g == 0));
        assert!(grounded.g_act.iter().all(|&g| g == 0));
    }

    #[test]
    fn indicator_free_batches_and_perfect_confidence_cost_nothing() {
        let mut rng = stream_rng(67, 0);
        let vocab = fixture_vocab(2, 2, 3, &mut rng);
        let mut video = fixture_video("v0", 2, 3, &vocab, &mut rng);
        let params = GroundingParams::init_uniform(3, 3, 2, 2, 1.0, &mut rng);
        let mut grads = params.zeros_like();
        let out = concept_loss_gradient(&[&video], &vocab, &params, &mut grads).unwrap();
        assert_eq!(out.loss, 0.0);
        assert_eq!(out.clamped, 0);
        assert!(grads.tensors().iter().all(|t| t.data.iter().all(|&v| v == 0.0)));

        // One indicated object whose probability saturates to exactly 1.
        video.ind_obj[0] = 1;
        let mut params = GroundingParams::zeros(3, 3, 2, 2);
        params.b_obj.data[0] = 1000.0;
        let loss = concept_loss(&[&video], &vocab, &params).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn hand_computed_loss_value_for_one_tenth() {
        // One video, one indicated object among 10 concepts, probability
        // e^{-1}: loss = (1 / (1 * 10)) * 1 = 0.1. Class probabilities are
        // pinned through the bias: softmax(ln p) = p for a distribution p.
        let mut rng = stream_rng(71, 0);
        let vocab = fixture_vocab(5, 5, 2, &mut rng);
        let mut video = fixture_video("v0", 1, 2, &vocab, &mut rng);
        video.ind_obj[0] = 1;
        let mut params = GroundingParams::zeros(2, 2, 5, 5);
        let p0 = (-1.0f64).exp();
        let rest = (1.0 - p0) / 4.0;
        params.b_obj.data[0] = p0.ln();
        for i in 1..5 {
            params.b_obj.data[i] = rest.ln();
        }
        let loss = concept_loss(&[&video], &vocab, &params).unwrap();
        assert!((loss - 0.1).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn collapsed_probabilities_are_clamped_without_gradient() {
        let mut rng = stream_rng(73, 0);
        let vocab = fixture_vocab(2, 1, 2, &mut rng);
        let mut video = fixture_video("v0", 1, 2, &vocab, &mut rng);
        video.ind_obj[0] = 1;
        // Class 1's bias dwarfs class 0: p[0] underflows to exactly 0.
        let mut params = GroundingParams::zeros(2, 2, 2, 1);
        params.b_obj.data[1] = 1e4;
        let mut grads = params.zeros_like();
        let out = concept_loss_gradient(&[&video], &vocab, &params, &mut grads).unwrap();
        assert_eq!(out.clamped, 1);
        assert!(out.loss.is_finite());
        assert!(grads.tensors().iter().all(|t| t.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn concept_loss_gradient_matches_central_differences() {
        let mut rng = stream_rng(79, 0);
        let (q, d, h, n_obj, n_act) = (4, 6, 5, 4, 3);
        let vocab = fixture_vocab(n_obj, n_act, h, &mut rng);
        let mut videos = Vec::new();
        for i in 0..2 {
            let mut v = fixture_video(&format!("v{i}"), q, d, &vocab, &mut rng);
            for g in v.ind_obj.iter_mut() {
                *g = rng.gen_bool(0.5) as u8;
            }
            for g in v.ind_act.iter_mut() {
                *g = rng.gen_bool(0.5) as u8;
            }
            v.ind_obj[0] = 1;
            v.ind_act[0] = 1;
            videos.push(v);
        }
        let refs: Vec<&VideoRecord> = videos.iter().collect();
        let params = GroundingParams::init_uniform(d, h, n_obj, n_act, 0.8, &mut rng);
        let mut grads = params.zeros_like();
        concept_loss_gradient(&refs, &vocab, &params, &mut grads).unwrap();

        let mut probe = params.clone();
        for idx in 0..probe.param_count() {
            let fd = central_difference(&mut probe, idx, 1e-5, |p| {
                concept_loss(&refs, &vocab, p).unwrap()
            });
            let err = gradient_rel_error(grads.get_flat(idx), fd);
            assert!(
                err < 1e-4,
                "parameter {idx}: analytic {} vs fd {fd} (rel err {err})",
                grads.get_flat(idx)
            );
        }
    }
}
