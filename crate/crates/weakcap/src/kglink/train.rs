//! Negative-sampling trainer for the rotation knowledge graph.
//!
//! Each step draws one positive triplet and `n` corruptions (head or tail
//! replaced by a uniformly random entity, probability 1/2 each) and descends
//! the logistic margin loss
//! `softplus(s_pos - margin) + (1/n) * sum_j softplus(margin - s_neg_j)`,
//! which equals `-log sigmoid(margin - s_pos) - (1/n) sum_j log
//! sigmoid(s_neg_j - margin)`. All randomness comes from per-step generator
//! streams keyed by `(seed, step)`, so results do not depend on scheduling.

use rand::Rng;

use crate::corpusio::{ConceptVocabulary, Triplet};
use crate::num::{sigmoid, softplus, stream_rng, ParamSet};
use crate::{Error, Result};

use super::{stored_score, EntityKind, KgModel, KgParams, NodeRef, StoredTriplet};

/// Hyperparameters for [`train_kg`].
#[derive(Debug, Clone)]
pub struct KgTrainConfig {
    /// Embedding dimension (complex coordinates per entity).
    pub dim: usize,
    /// Margin separating plausible from corrupted scores.
    pub margin: f64,
    /// Corrupted samples per positive triplet.
    pub negatives: usize,
    /// Gradient steps; each consumes one positive triplet.
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for KgTrainConfig {
    fn default() -> Self {
        KgTrainConfig {
            dim: 64,
            margin: 6.0,
            negatives: 4,
            steps: 2000,
            learning_rate: 0.05,
            seed: 7,
        }
    }
}

/// Trains a knowledge graph over the vocabulary's objects, actions, and
/// relations. Triplets whose lemmas or relation fall outside the vocabulary
/// are skipped with a warning; composite (noun-verb) tails cannot be stored
/// and are skipped likewise.
pub fn train_kg(
    triplets: &[Triplet],
    vocab: &ConceptVocabulary,
    config: &KgTrainConfig,
) -> Result<KgModel> {
    if triplets.is_empty() {
        return Err(Error::Train("cannot train a knowledge graph without triplets".into()));
    }
    if config.dim == 0 {
        return Err(Error::Train("knowledge-graph dimension must be at least 1".into()));
    }
    let mut entities: Vec<(EntityKind, String)> =
        vocab.objects.iter().map(|o| (EntityKind::Object, o.clone())).collect();
    entities.extend(vocab.actions.iter().map(|a| (EntityKind::Action, a.clone())));
    let mut model =
        KgModel::new(config.dim, config.margin, entities, vocab.relations.clone());

    let mut skipped = 0usize;
    for t in triplets {
        match resolve_triplet(&model, t) {
            Some(stored) => model.triplets.push(stored),
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!(
            "skipped {skipped} of {} triplets that do not resolve against the vocabulary",
            triplets.len()
        );
    }
    if model.triplets.is_empty() {
        return Err(Error::Train("no triplet resolves against the vocabulary".into()));
    }

    // Seeded initialization on its own stream: entity components uniform in
    // [-0.5, 0.5), phases uniform in [0, 2*pi), gate zero (an even blend).
    let mut init = stream_rng(config.seed, 0);
    for v in model.params.ent_re.data.iter_mut() {
        *v = init.gen_range(-0.5..0.5);
    }
    for v in model.params.ent_im.data.iter_mut() {
        *v = init.gen_range(-0.5..0.5);
    }
    for v in model.params.phases.data.iter_mut() {
        *v = init.gen_range(0.0..std::f64::consts::TAU);
    }

    let n_entities = model.entities.len();
    let mut grads = model.params.zeros_like();
    for step in 0..config.steps {
        let mut rng = stream_rng(config.seed, step as u64 + 1);
        let positive = model.triplets[rng.gen_range(0..model.triplets.len())];
        let mut negatives = Vec::with_capacity(config.negatives);
        for _ in 0..config.negatives {
            let mut neg = positive;
            if rng.gen_bool(0.5) {
                neg.head = NodeRef::Single(rng.gen_range(0..n_entities));
            } else {
                neg.tail = rng.gen_range(0..n_entities);
            }
            negatives.push(neg);
        }

        for t in grads.tensors_mut() {
            t.fill(0.0);
        }
        let loss =
            kg_step_gradient(&model.params, model.margin, &positive, &negatives, &mut grads);
        if !loss.is_finite() {
            return Err(Error::Divergence {
                context: format!("knowledge-graph training step {step}"),
                loss,
            });
        }
        if step % 500 == 0 {
            log::debug!("kg step {step}: loss {loss:.6}");
        }
        model.params.accumulate(&grads, -config.learning_rate);
    }
    Ok(model)
}

fn resolve_triplet(model: &KgModel, t: &Triplet) -> Option<StoredTriplet> {
    let head = model.resolve(&t.head)?;
    let relation = model.relation_id(&t.relation)?;
    let tail = match model.resolve(&t.tail)? {
        NodeRef::Single(i) => i,
        NodeRef::Pair { .. } => return None,
    };
    Some(StoredTriplet { head, relation, tail })
}

/// Loss of one training step: `softplus(s_pos - margin) + (1/n) * sum_j
/// softplus(margin - s_neg_j)`.
pub fn kg_step_loss(
    params: &KgParams,
    margin: f64,
    positive: &StoredTriplet,
    negatives: &[StoredTriplet],
) -> f64 {
    let mut loss = softplus(stored_score(params, positive) - margin);
    if !negatives.is_empty() {
        let inv = 1.0 / negatives.len() as f64;
        for neg in negatives {
            loss += inv * softplus(margin - stored_score(params, neg));
        }
    }
    loss
}

/// Computes [`kg_step_loss`] and accumulates its parameter gradient into
/// `grads` (callers zero `grads` beforehand when they want a fresh gradient).
pub fn kg_step_gradient(
    params: &KgParams,
    margin: f64,
    positive: &StoredTriplet,
    negatives: &[StoredTriplet],
    grads: &mut KgParams,
) -> f64 {
    let s_pos = stored_score(params, positive);
    let mut loss = softplus(s_pos - margin);
    stored_score_gradient(params, positive, sigmoid(s_pos - margin), grads);
    if !negatives.is_empty() {
        let inv = 1.0 / negatives.len() as f64;
        for neg in negatives {
            let s = stored_score(params, neg);
            loss += inv * softplus(margin - s);
            stored_score_gradient(params, neg, -inv * sigmoid(margin - s), grads);
        }
    }
    loss
}

/// Accumulates `ds * d(score)/d(params)` for one triplet into `grads`.
///
/// The score is a sum of per-coordinate complex moduli; coordinates with a
/// modulus below 1e-12 take subgradient zero. Composite heads route gradients
/// through the blend weights into both components, the gate parameters, and —
/// because the gate conditions on the tail — a second path into the tail.
fn stored_score_gradient(params: &KgParams, t: &StoredTriplet, ds: f64, grads: &mut KgParams) {
    let dim = params.phases.cols();
    let t_re = params.ent_re.row(t.tail);
    let t_im = params.ent_im.row(t.tail);

    // Forward pass caching what the composite-head backward needs.
    struct PairCache {
        obj: usize,
        act: usize,
        input: Vec<f64>,
        blend: Vec<f64>,
    }
    let (h_re, h_im, pair): (Vec<f64>, Vec<f64>, Option<PairCache>) = match t.head {
        NodeRef::Single(i) => {
            (params.ent_re.row(i).to_vec(), params.ent_im.row(i).to_vec(), None)
        }
        NodeRef::Pair { obj, act } => {
            let o_re = params.ent_re.row(obj);
            let o_im = params.ent_im.row(obj);
            let a_re = params.ent_re.row(act);
            let a_im = params.ent_im.row(act);
            let mut input = Vec::with_capacity(6 * dim);
            for (re, im) in [(o_re, o_im), (a_re, a_im), (t_re, t_im)] {
                for k in 0..dim {
                    input.push(re[k]);
                    input.push(im[k]);
                }
            }
            let pre = params.gate_w.matvec_transpose(&input);
            let mut blend = vec![0.0; dim];
            let mut h_re = vec![0.0; dim];
            let mut h_im = vec![0.0; dim];
            for k in 0..dim {
                let g = sigmoid(pre[k] + params.gate_b.data[k]);
                blend[k] = g;
                h_re[k] = g * o_re[k] + (1.0 - g) * a_re[k];
                h_im[k] = g * o_im[k] + (1.0 - g) * a_im[k];
            }
            (h_re, h_im, Some(PairCache { obj, act, input, blend }))
        }
    };

    // Score backward: per-coordinate gradients of |h e^{i theta} - t|.
    let theta = params.phases.row(t.relation);
    let mut dh_re = vec![0.0; dim];
    let mut dh_im = vec![0.0; dim];
    let mut dt_re = vec![0.0; dim];
    let mut dt_im = vec![0.0; dim];
    let mut dtheta = vec![0.0; dim];
    for k in 0..dim {
        let (sin, cos) = theta[k].sin_cos();
        let rot_re = h_re[k] * cos - h_im[k] * sin;
        let rot_im = h_re[k] * sin + h_im[k] * cos;
        let dx = rot_re - t_re[k];
        let dy = rot_im - t_im[k];
        let m = (dx * dx + dy * dy).sqrt();
        if m < 1e-12 {
            continue;
        }
        let gx = ds * dx / m;
        let gy = ds * dy / m;
        dtheta[k] = gx * (-rot_im) + gy * rot_re;
        dh_re[k] = gx * cos + gy * sin;
        dh_im[k] = -gx * sin + gy * cos;
        dt_re[k] = -gx;
        dt_im[k] = -gy;
    }

    for k in 0..dim {
        grads.phases.row_mut(t.relation)[k] += dtheta[k];
    }
    match pair {
        None => {
            if let NodeRef::Single(i) = t.head {
                for k in 0..dim {
                    grads.ent_re.row_mut(i)[k] += dh_re[k];
                    grads.ent_im.row_mut(i)[k] += dh_im[k];
                }
            }
        }
        Some(cache) => {
            let o_re = params.ent_re.row(cache.obj);
            let o_im = params.ent_im.row(cache.obj);
            let a_re = params.ent_re.row(cache.act);
            let a_im = params.ent_im.row(cache.act);
            let mut dpre = vec![0.0; dim];
            for k in 0..dim {
                let dblend = dh_re[k] * (o_re[k] - a_re[k]) + dh_im[k] * (o_im[k] - a_im[k]);
                dpre[k] = dblend * cache.blend[k] * (1.0 - cache.blend[k]);
            }
            grads.gate_w.add_outer(&cache.input, &dpre);
            for k in 0..dim {
                grads.gate_b.data[k] += dpre[k];
            }
            // Back through the interleaved gate input: parts are the object
            // and action components and the tail, in that order.
            let dinput = params.gate_w.matvec(&dpre);
            for k in 0..dim {
                grads.ent_re.row_mut(cache.obj)[k] +=
                    dh_re[k] * cache.blend[k] + dinput[2 * k];
                grads.ent_im.row_mut(cache.obj)[k] +=
                    dh_im[k] * cache.blend[k] + dinput[2 * k + 1];
                grads.ent_re.row_mut(cache.act)[k] +=
                    dh_re[k] * (1.0 - cache.blend[k]) + dinput[2 * dim + 2 * k];
                grads.ent_im.row_mut(cache.act)[k] +=
                    dh_im[k] * (1.0 - cache.blend[k]) + dinput[2 * dim + 2 * k + 1];
                dt_re[k] += dinput[4 * dim + 2 * k];
                dt_im[k] += dinput[4 * dim + 2 * k + 1];
            }
        }
    }
    for k in 0..dim {
        grads.ent_re.row_mut(t.tail)[k] += dt_re[k];
        grads.ent_im.row_mut(t.tail)[k] += dt_im[k];
    }
}
