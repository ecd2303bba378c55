//! Two-layer recurrent decoding over relation-aware features: a bottom
//! attention layer watches the global video feature and the word history, an
//! additive-attention block weighs the tree features, and a top language
//! layer emits the word distribution. Includes beam search and the
//! teacher-forced caption loss with backpropagation through time.

use super::{
    encode_tree, encode_tree_backward, CaptionerParams, DecoderParams, Dictionary, BEGIN_TOKEN,
    END_TOKEN, UNK_TOKEN,
};
use crate::corpusio::ConceptVocabulary;
use crate::num::{argmax, axpy, dot, sigmoid, softmax_backward, softmax_inplace};
use crate::treespan::DependencyTree;
use crate::{Error, Real, Result, Tensor};

/// Recurrent state carried between decoding steps.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub h1: Vec<Real>,
    pub c1: Vec<Real>,
    pub h2: Vec<Real>,
    pub c2: Vec<Real>,
}

impl DecoderState {
    /// The all-zero state used at the first step.
    pub fn zeros(hidden: usize) -> Self {
        DecoderState {
            h1: vec![0.0; hidden],
            c1: vec![0.0; hidden],
            h2: vec![0.0; hidden],
            c2: vec![0.0; hidden],
        }
    }
}

/// Result of one decoding step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub state: DecoderState,
    /// Distribution over the dictionary; sums to one.
    pub probs: Vec<Real>,
    /// Attention weights over the relation-aware features; sums to one.
    pub attention: Vec<Real>,
}

/// Decoding controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeConfig {
    /// Beam width; `1` reduces to greedy decoding.
    pub beam: usize,
    /// Maximum caption length in tokens.
    pub max_len: usize,
    /// Carried for provenance; decoding itself is deterministic.
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { beam: 5, max_len: 20, seed: 0 }
    }
}

/// A finished hypothesis: interior token ids (begin/end markers stripped) and
/// the total log-probability including the end transition when one was taken.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    pub logprob: f64,
}

struct LstmCache {
    z: Vec<Real>,
    h_prev: Vec<Real>,
    c_prev: Vec<Real>,
    gate_i: Vec<Real>,
    gate_f: Vec<Real>,
    gate_o: Vec<Real>,
    gate_g: Vec<Real>,
    tanh_c: Vec<Real>,
    c: Vec<Real>,
    h: Vec<Real>,
}

fn lstm_forward(
    w: &Tensor,
    u: &Tensor,
    b: &Tensor,
    z: Vec<Real>,
    h_prev: Vec<Real>,
    c_prev: Vec<Real>,
) -> LstmCache {
    let hidden = h_prev.len();
    let mut pre = w.matvec(&z);
    axpy(&mut pre, 1.0, &u.matvec(&h_prev));
    axpy(&mut pre, 1.0, &b.data);
    let gate_i: Vec<Real> = pre[..hidden].iter().map(|&x| sigmoid(x)).collect();
    let gate_f: Vec<Real> = pre[hidden..2 * hidden].iter().map(|&x| sigmoid(x)).collect();
    let gate_o: Vec<Real> = pre[2 * hidden..3 * hidden].iter().map(|&x| sigmoid(x)).collect();
    let gate_g: Vec<Real> = pre[3 * hidden..].iter().map(|&x| x.tanh()).collect();
    let c: Vec<Real> =
        (0..hidden).map(|k| gate_f[k] * c_prev[k] + gate_i[k] * gate_g[k]).collect();
    let tanh_c: Vec<Real> = c.iter().map(|&x| x.tanh()).collect();
    let h: Vec<Real> = (0..hidden).map(|k| gate_o[k] * tanh_c[k]).collect();
    LstmCache { z, h_prev, c_prev, gate_i, gate_f, gate_o, gate_g, tanh_c, c, h }
}

/// Backward through one gated cell. Returns gradients w.r.t. the layer input,
/// the previous hidden, and the previous cell.
#[allow(clippy::too_many_arguments)]
fn lstm_backward(
    cache: &LstmCache,
    w: &Tensor,
    u: &Tensor,
    dh: &[Real],
    dc_in: &[Real],
    dw: &mut Tensor,
    du: &mut Tensor,
    db: &mut Tensor,
) -> (Vec<Real>, Vec<Real>, Vec<Real>) {
    let hidden = dh.len();
    let dc: Vec<Real> = (0..hidden)
        .map(|k| {
            dh[k] * cache.gate_o[k] * (1.0 - cache.tanh_c[k] * cache.tanh_c[k]) + dc_in[k]
        })
        .collect();
    let mut dpre = vec![0.0; 4 * hidden];
    for k in 0..hidden {
        let di = dc[k] * cache.gate_g[k];
        let df = dc[k] * cache.c_prev[k];
        let d_o = dh[k] * cache.tanh_c[k];
        let dg = dc[k] * cache.gate_i[k];
        dpre[k] = di * cache.gate_i[k] * (1.0 - cache.gate_i[k]);
        dpre[hidden + k] = df * cache.gate_f[k] * (1.0 - cache.gate_f[k]);
        dpre[2 * hidden + k] = d_o * cache.gate_o[k] * (1.0 - cache.gate_o[k]);
        dpre[3 * hidden + k] = dg * (1.0 - cache.gate_g[k] * cache.gate_g[k]);
    }
    dw.add_outer(&dpre, &cache.z);
    du.add_outer(&dpre, &cache.h_prev);
    axpy(&mut db.data, 1.0, &dpre);
    let dz = w.matvec_transpose(&dpre);
    let dh_prev = u.matvec_transpose(&dpre);
    let dc_prev: Vec<Real> = (0..hidden).map(|k| dc[k] * cache.gate_f[k]).collect();
    (dz, dh_prev, dc_prev)
}

struct StepCache {
    prev_word: usize,
    lstm1: LstmCache,
    /// Pre-scoring tanh projections, one per feature.
    q: Vec<Vec<Real>>,
    beta: Vec<Real>,
    lstm2: LstmCache,
    probs: Vec<Real>,
}

impl StepCache {
    fn state(&self) -> DecoderState {
        DecoderState {
            h1: self.lstm1.h.clone(),
            c1: self.lstm1.c.clone(),
            h2: self.lstm2.h.clone(),
            c2: self.lstm2.c.clone(),
        }
    }
}

fn validate_inputs(
    params: &DecoderParams,
    x: &[Real],
    features: &[Vec<Real>],
    prev_word: usize,
) -> Result<()> {
    let dims = params.dims;
    if x.len() != dims.global {
        return Err(Error::Shape(format!(
            "global feature width {} does not match {}",
            x.len(),
            dims.global
        )));
    }
    if features.is_empty() {
        return Err(Error::Shape("no relation-aware features to attend over".into()));
    }
    for f in features {
        if f.len() != dims.feature {
            return Err(Error::Shape(format!(
                "relation-aware feature width {} does not match {}",
                f.len(),
                dims.feature
            )));
        }
    }
    if prev_word >= dims.vocab {
        return Err(Error::Argument(format!(
            "word id {prev_word} outside the dictionary of {} entries",
            dims.vocab
        )));
    }
    Ok(())
}

fn step_full(
    p: &DecoderParams,
    state: &DecoderState,
    prev_word: usize,
    x: &[Real],
    features: &[Vec<Real>],
) -> StepCache {
    let dims = p.dims;
    let mut z1 = Vec::with_capacity(dims.input1());
    z1.extend_from_slice(x);
    z1.extend_from_slice(p.embed.row(prev_word));
    z1.extend_from_slice(&state.h2);
    let lstm1 = lstm_forward(&p.w1, &p.u1, &p.b1, z1, state.h1.clone(), state.c1.clone());

    let hidden_proj = p.att_hidden.matvec(&lstm1.h);
    let mut q = Vec::with_capacity(features.len());
    let mut beta = Vec::with_capacity(features.len());
    for a in features {
        let mut proj = p.att_feature.matvec(a);
        axpy(&mut proj, 1.0, &hidden_proj);
        axpy(&mut proj, 1.0, &p.att_bias.data);
        let qa: Vec<Real> = proj.iter().map(|v| v.tanh()).collect();
        beta.push(dot(&p.att_score.data, &qa));
        q.push(qa);
    }
    softmax_inplace(&mut beta);
    let mut attended = vec![0.0; dims.feature];
    for (b, a) in beta.iter().zip(features) {
        axpy(&mut attended, *b, a);
    }

    let mut z2 = Vec::with_capacity(dims.input2());
    z2.extend_from_slice(&attended);
    z2.extend_from_slice(&lstm1.h);
    let lstm2 = lstm_forward(&p.w2, &p.u2, &p.b2, z2, state.h2.clone(), state.c2.clone());

    let mut probs = p.w_out.matvec(&lstm2.h);
    axpy(&mut probs, 1.0, &p.b_out.data);
    softmax_inplace(&mut probs);
    StepCache { prev_word, lstm1, q, beta, lstm2, probs }
}

/// One decoding step: consumes the previous word and state, returns the next
/// state, the word distribution, and the feature attention weights.
pub fn decoder_step(
    params: &DecoderParams,
    state: &DecoderState,
    prev_word: usize,
    x: &[Real],
    features: &[Vec<Real>],
) -> Result<StepOutput> {
    validate_inputs(params, x, features, prev_word)?;
    let cache = step_full(params, state, prev_word, x, features);
    Ok(StepOutput { state: cache.state(), probs: cache.probs, attention: cache.beta })
}

/// Greedy argmax decoding: at every step the most probable word is taken
/// (lowest id on ties) until the end token or `max_len`.
pub fn greedy_decode(
    params: &DecoderParams,
    x: &[Real],
    features: &[Vec<Real>],
    max_len: usize,
) -> Result<Decoded> {
    validate_inputs(params, x, features, BEGIN_TOKEN)?;
    let mut state = DecoderState::zeros(params.dims.hidden);
    let mut prev = BEGIN_TOKEN;
    let mut tokens = Vec::new();
    let mut logprob = 0.0;
    for _ in 0..max_len {
        let cache = step_full(params, &state, prev, x, features);
        let best = argmax(&cache.probs);
        logprob += cache.probs[best].ln();
        if best == END_TOKEN {
            break;
        }
        tokens.push(best);
        state = cache.state();
        prev = best;
    }
    Ok(Decoded { tokens, logprob })
}

struct Hypothesis {
    tokens: Vec<usize>,
    logprob: f64,
    state: DecoderState,
    prev: usize,
}

/// Beam search ranked by total log-probability (no length normalization);
/// ties break toward the lexicographically smaller token-id sequence. Each
/// hypothesis stops at the end token or at `max_len`.
pub fn beam_decode(
    params: &DecoderParams,
    x: &[Real],
    features: &[Vec<Real>],
    cfg: &DecodeConfig,
) -> Result<Decoded> {
    if cfg.beam == 0 || cfg.max_len == 0 {
        return Err(Error::Argument("beam width and maximum length must be positive".into()));
    }
    validate_inputs(params, x, features, BEGIN_TOKEN)?;

    let mut active = vec![Hypothesis {
        tokens: Vec::new(),
        logprob: 0.0,
        state: DecoderState::zeros(params.dims.hidden),
        prev: BEGIN_TOKEN,
    }];
    let mut finished: Vec<Decoded> = Vec::new();
    for _ in 0..cfg.max_len {
        if active.is_empty() {
            break;
        }
        let outs: Vec<StepCache> =
            active.iter().map(|h| step_full(params, &h.state, h.prev, x, features)).collect();
        let mut candidates: Vec<(f64, Vec<usize>, usize)> = Vec::new();
        for (hi, out) in outs.iter().enumerate() {
            for (tok, &p) in out.probs.iter().enumerate() {
                let mut seq = active[hi].tokens.clone();
                seq.push(tok);
                candidates.push((active[hi].logprob + p.ln(), seq, hi));
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        candidates.truncate(cfg.beam);

        let mut next = Vec::with_capacity(cfg.beam);
        for (logprob, mut seq, hi) in candidates {
            let tok = *seq.last().expect("candidate sequences are never empty");
            if tok == END_TOKEN {
                seq.pop();
                finished.push(Decoded { tokens: seq, logprob });
            } else {
                next.push(Hypothesis { tokens: seq, logprob, state: outs[hi].state(), prev: tok });
            }
        }
        active = next;
    }
    finished.extend(
        active.into_iter().map(|h| Decoded { tokens: h.tokens, logprob: h.logprob }),
    );
    finished.sort_by(|a, b| b.logprob.total_cmp(&a.logprob).then_with(|| a.tokens.cmp(&b.tokens)));
    Ok(finished.into_iter().next().expect("at least one hypothesis always finishes"))
}

/// One training pair: the video's global feature, its (already spanned)
/// dependency tree, and the target sentence tokens.
#[derive(Debug, Clone, Copy)]
pub struct CaptionExample<'a> {
    pub global: &'a [Real],
    pub tree: &'a DependencyTree,
    pub tokens: &'a [String],
}

/// A batch of training pairs.
pub type CaptionBatch<'a> = [CaptionExample<'a>];

/// Forward + backward result of the caption loss.
#[derive(Debug, Clone, Copy)]
pub struct CaptionLossOutcome {
    pub loss: Real,
    /// Target tokens that fell outside the dictionary and were trained as the
    /// unknown marker.
    pub unknown_tokens: usize,
}

fn check_dictionary(dict: &Dictionary, params: &CaptionerParams) -> Result<()> {
    if dict.len() != params.decoder.dims.vocab {
        return Err(Error::Shape(format!(
            "dictionary of {} entries does not match output layer of {}",
            dict.len(),
            params.decoder.dims.vocab
        )));
    }
    Ok(())
}

fn example_targets(dict: &Dictionary, tokens: &[String]) -> (Vec<usize>, usize) {
    let mut unknown = 0usize;
    let mut ids: Vec<usize> = tokens
        .iter()
        .map(|t| match dict.id(t) {
            Some(i) => i,
            None => {
                unknown += 1;
                UNK_TOKEN
            }
        })
        .collect();
    ids.push(END_TOKEN);
    (ids, unknown)
}

/// Mean negative log-likelihood of the target sentences under teacher
/// forcing, normalized by the number of pairs. The end token is always the
/// final prediction target.
pub fn caption_loss(
    examples: &CaptionBatch,
    vocab: &ConceptVocabulary,
    dict: &Dictionary,
    params: &CaptionerParams,
) -> Result<Real> {
    if examples.is_empty() {
        return Err(Error::Train("caption loss over an empty batch".into()));
    }
    check_dictionary(dict, params)?;
    let mut total = 0.0;
    for ex in examples {
        let encoding = encode_tree(ex.tree, vocab, &params.gcn)?;
        validate_inputs(&params.decoder, ex.global, &encoding.features, BEGIN_TOKEN)?;
        let (targets, _) = example_targets(dict, ex.tokens);
        let mut state = DecoderState::zeros(params.decoder.dims.hidden);
        let mut prev = BEGIN_TOKEN;
        for &target in &targets {
            let cache = step_full(&params.decoder, &state, prev, ex.global, &encoding.features);
            total -= cache.probs[target].ln();
            state = cache.state();
            prev = target;
        }
    }
    Ok(total / examples.len() as Real)
}

/// [`caption_loss`] plus gradients for both the tree encoder and the decoder,
/// accumulated into `grads` (which must arrive zeroed or hold gradients to be
/// summed with).
pub fn caption_loss_gradient(
    examples: &CaptionBatch,
    vocab: &ConceptVocabulary,
    dict: &Dictionary,
    params: &CaptionerParams,
    grads: &mut CaptionerParams,
) -> Result<CaptionLossOutcome> {
    if examples.is_empty() {
        return Err(Error::Train("caption loss over an empty batch".into()));
    }
    check_dictionary(dict, params)?;
    let dims = params.decoder.dims;
    let scale = 1.0 / examples.len() as Real;
    let mut total = 0.0;
    let mut unknown_total = 0usize;

    for ex in examples {
        let encoding = encode_tree(ex.tree, vocab, &params.gcn)?;
        validate_inputs(&params.decoder, ex.global, &encoding.features, BEGIN_TOKEN)?;
        let (targets, unknown) = example_targets(dict, ex.tokens);
        unknown_total += unknown;

        // Teacher-forced forward pass, keeping every step cache.
        let mut states = vec![DecoderState::zeros(dims.hidden)];
        let mut caches: Vec<StepCache> = Vec::with_capacity(targets.len());
        for (t, &target) in targets.iter().enumerate() {
            let prev = if t == 0 { BEGIN_TOKEN } else { targets[t - 1] };
            let cache =
                step_full(&params.decoder, &states[t], prev, ex.global, &encoding.features);
            total -= cache.probs[target].ln();
            states.push(cache.state());
            caches.push(cache);
        }

        // Backward through time.
        let feature_count = encoding.features.len();
        let mut d_features = vec![vec![0.0; dims.feature]; feature_count];
        let mut dh1 = vec![0.0; dims.hidden];
        let mut dc1 = vec![0.0; dims.hidden];
        let mut dh2 = vec![0.0; dims.hidden];
        let mut dc2 = vec![0.0; dims.hidden];
        for t in (0..targets.len()).rev() {
            let cache = &caches[t];
            let dec = &params.decoder;
            let g = &mut grads.decoder;

            let mut dlogits = cache.probs.clone();
            dlogits[targets[t]] -= 1.0;
            for v in &mut dlogits {
                *v *= scale;
            }
            g.w_out.add_outer(&dlogits, &cache.lstm2.h);
            axpy(&mut g.b_out.data, 1.0, &dlogits);
            axpy(&mut dh2, 1.0, &dec.w_out.matvec_transpose(&dlogits));

            let (dz2, dh2_rec, dc2_prev) = lstm_backward(
                &cache.lstm2,
                &dec.w2,
                &dec.u2,
                &dh2,
                &dc2,
                &mut g.w2,
                &mut g.u2,
                &mut g.b2,
            );
            let d_attended = &dz2[..dims.feature];
            axpy(&mut dh1, 1.0, &dz2[dims.feature..]);

            // Attention block: attended feature and score paths.
            let mut dbeta = vec![0.0; feature_count];
            for j in 0..feature_count {
                dbeta[j] = dot(d_attended, &encoding.features[j]);
                axpy(&mut d_features[j], cache.beta[j], d_attended);
            }
            let dscore = softmax_backward(&cache.beta, &dbeta);
            let mut dproj_sum = vec![0.0; dims.attention];
            for j in 0..feature_count {
                axpy(&mut g.att_score.data, dscore[j], &cache.q[j]);
                let dproj: Vec<Real> = cache.q[j]
                    .iter()
                    .zip(&dec.att_score.data)
                    .map(|(&qv, &sv)| dscore[j] * sv * (1.0 - qv * qv))
                    .collect();
                g.att_feature.add_outer(&dproj, &encoding.features[j]);
                axpy(&mut d_features[j], 1.0, &dec.att_feature.matvec_transpose(&dproj));
                axpy(&mut dproj_sum, 1.0, &dproj);
            }
            g.att_hidden.add_outer(&dproj_sum, &cache.lstm1.h);
            axpy(&mut dh1, 1.0, &dec.att_hidden.matvec_transpose(&dproj_sum));
            axpy(&mut g.att_bias.data, 1.0, &dproj_sum);

            let (dz1, dh1_rec, dc1_prev) = lstm_backward(
                &cache.lstm1,
                &dec.w1,
                &dec.u1,
                &dh1,
                &dc1,
                &mut g.w1,
                &mut g.u1,
                &mut g.b1,
            );
            // z1 = [x; prev word embedding; previous language hidden]; the
            // global-feature slice is input data and carries no parameter.
            axpy(
                g.embed.row_mut(cache.prev_word),
                1.0,
                &dz1[dims.global..dims.global + dims.embed],
            );
            dh1 = dh1_rec;
            dc1 = dc1_prev;
            dh2 = dh2_rec;
            axpy(&mut dh2, 1.0, &dz1[dims.global + dims.embed..]);
            dc2 = dc2_prev;
        }
        encode_tree_backward(ex.tree, &encoding, &d_features, &params.gcn, &mut grads.gcn)?;
    }
    Ok(CaptionLossOutcome { loss: total * scale, unknown_tokens: unknown_total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::captioner::{DecoderDims, GcnParams};
    use crate::corpusio::{EmbeddingTable, Phrase};
    use crate::num::{central_difference, gradient_rel_error, stream_rng, ParamSet};
    use rand::Rng;

    const DIMS: DecoderDims =
        DecoderDims { global: 3, feature: 12, embed: 4, hidden: 8, attention: 6, vocab: 11 };

    fn test_vocab(dim: usize, seed: u64) -> ConceptVocabulary {
        let mut rng = stream_rng(seed, 80);
        let mut vecs = |n: usize| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
        };
        let mut v = ConceptVocabulary::from_parts(
            vec!["bike".into(), "man".into(), "street".into()],
            vec!["ride".into(), "walk".into()],
            vec!["obj".into(), "on".into()],
        );
        let table =
            EmbeddingTable { dim, objects: vecs(3), actions: vecs(2), relations: vecs(2) };
        v.attach_embeddings(table).unwrap();
        v
    }

    fn test_tree() -> DependencyTree {
        let mut t = DependencyTree::root_only(
            Phrase::NounVerb("man".into(), "ride".into()),
            "v0".into(),
        );
        t.nodes.push(Phrase::Noun("bike".into()));
        t.nodes.push(Phrase::Noun("street".into()));
        t.edges.push((0, "obj".into(), 1));
        t.edges.push((0, "on".into(), 2));
        t
    }

    fn test_dict() -> Dictionary {
        Dictionary::new(
            ["man", "ride", "bike", "street", "on", "walk", "dog", "cat"].map(String::from),
        )
    }

    fn random_params(seed: u64) -> DecoderParams {
        let mut rng = stream_rng(seed, 81);
        DecoderParams::init_uniform(DIMS, 0.5, &mut rng)
    }

    fn random_inputs(seed: u64, count: usize) -> (Vec<Real>, Vec<Vec<Real>>) {
        let mut rng = stream_rng(seed, 82);
        let x = (0..DIMS.global).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let features = (0..count)
            .map(|_| (0..DIMS.feature).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        (x, features)
    }

    #[test]
    fn step_outputs_are_distributions() {
        let params = random_params(1);
        let (x, features) = random_inputs(1, 3);
        let state = DecoderState::zeros(DIMS.hidden);
        let out = decoder_step(&params, &state, BEGIN_TOKEN, &x, &features).unwrap();
        assert_eq!(out.probs.len(), DIMS.vocab);
        assert!((out.probs.iter().sum::<Real>() - 1.0).abs() < 1e-12);
        assert!(out.probs.iter().all(|&p| p >= 0.0));
        assert!((out.attention.iter().sum::<Real>() - 1.0).abs() < 1e-12);
        assert!(out.attention.iter().all(|&b| b >= 0.0));
    }

    #[test]
    fn single_feature_gets_full_attention() {
        let params = random_params(2);
        let (x, features) = random_inputs(2, 1);
        let state = DecoderState::zeros(DIMS.hidden);
        let out = decoder_step(&params, &state, BEGIN_TOKEN, &x, &features).unwrap();
        assert_eq!(out.attention, vec![1.0]);

        // Duplicating the sole feature splits the weights but leaves the
        // attended vector — and hence the word distribution — unchanged.
        let doubled = vec![features[0].clone(), features[0].clone()];
        let out2 = decoder_step(&params, &state, BEGIN_TOKEN, &x, &doubled).unwrap();
        assert_eq!(out2.attention, vec![0.5, 0.5]);
        assert_eq!(out.probs, out2.probs);
    }

    #[test]
    fn step_is_pure() {
        let params = random_params(3);
        let (x, features) = random_inputs(3, 2);
        let mut state = DecoderState::zeros(DIMS.hidden);
        state.h2[0] = 0.3;
        let a = decoder_step(&params, &state, 4, &x, &features).unwrap();
        let b = decoder_step(&params, &state, 4, &x, &features).unwrap();
        assert_eq!(a.probs, b.probs);
        assert_eq!(a.attention, b.attention);
        assert_eq!(a.state, b.state);
    }

    #[test]
    fn step_rejects_bad_shapes() {
        let params = random_params(4);
        let (x, features) = random_inputs(4, 2);
        let state = DecoderState::zeros(DIMS.hidden);
        assert!(decoder_step(&params, &state, BEGIN_TOKEN, &x[..2], &features).is_err());
        assert!(decoder_step(&params, &state, BEGIN_TOKEN, &x, &[]).is_err());
        assert!(decoder_step(&params, &state, DIMS.vocab, &x, &features).is_err());
        let skewed = vec![vec![0.0; DIMS.feature - 1]];
        assert!(decoder_step(&params, &state, BEGIN_TOKEN, &x, &skewed).is_err());
    }

    #[test]
    fn forced_end_token_yields_empty_caption() {
        let mut params = DecoderParams::zeros(DIMS);
        params.b_out.data[END_TOKEN] = 50.0;
        let (x, features) = random_inputs(5, 2);
        let greedy = greedy_decode(&params, &x, &features, 20).unwrap();
        assert!(greedy.tokens.is_empty());
        let beam =
            beam_decode(&params, &x, &features, &DecodeConfig::default()).unwrap();
        assert!(beam.tokens.is_empty());
        assert!(beam.logprob.abs() < 1e-9);
    }

    #[test]
    fn beam_width_one_matches_greedy_exactly() {
        for seed in 0..8u64 {
            let params = random_params(100 + seed);
            let (x, features) = random_inputs(100 + seed, 3);
            let greedy = greedy_decode(&params, &x, &features, 12).unwrap();
            let cfg = DecodeConfig { beam: 1, max_len: 12, seed: 0 };
            let beam = beam_decode(&params, &x, &features, &cfg).unwrap();
            assert_eq!(beam.tokens, greedy.tokens, "seed {seed}");
            assert_eq!(beam.logprob, greedy.logprob, "seed {seed}");
        }
    }

    #[test]
    fn wider_beams_never_lose_log_probability() {
        for seed in 0..8u64 {
            let params = random_params(200 + seed);
            let (x, features) = random_inputs(200 + seed, 3);
            let greedy = greedy_decode(&params, &x, &features, 10).unwrap();
            let mut last = greedy.logprob;
            for beam in [2usize, 5, 8] {
                let cfg = DecodeConfig { beam, max_len: 10, seed: 0 };
                let got = beam_decode(&params, &x, &features, &cfg).unwrap();
                assert!(
                    got.logprob >= last - 1e-12,
                    "seed {seed} beam {beam}: {} < {last}",
                    got.logprob
                );
                last = got.logprob;
            }
        }
    }

    #[test]
    fn beam_decode_is_deterministic() {
        let params = random_params(6);
        let (x, features) = random_inputs(6, 3);
        let cfg = DecodeConfig::default();
        let a = beam_decode(&params, &x, &features, &cfg).unwrap();
        let b = beam_decode(&params, &x, &features, &cfg).unwrap();
        assert_eq!(a, b);
    }

    fn loss_fixture(seed: u64) -> (ConceptVocabulary, DependencyTree, Dictionary, CaptionerParams)
    {
        let vocab = test_vocab(4, seed);
        let tree = test_tree();
        let dict = test_dict();
        let mut rng = stream_rng(seed, 83);
        let gcn = GcnParams::init_uniform(4, 0.6, &mut rng);
        let decoder = DecoderParams::init_uniform(DIMS, 0.5, &mut rng);
        (vocab, tree, dict, CaptionerParams { gcn, decoder })
    }

    #[test]
    fn empty_batch_is_an_error() {
        let (vocab, _, dict, params) = loss_fixture(7);
        assert!(caption_loss(&[], &vocab, &dict, &params).is_err());
        let mut grads = params.zeros_like();
        assert!(caption_loss_gradient(&[], &vocab, &dict, &params, &mut grads).is_err());
    }

    #[test]
    fn certain_end_prediction_gives_zero_loss() {
        let (vocab, tree, dict, mut params) = loss_fixture(8);
        params.decoder = DecoderParams::zeros(DIMS);
        params.decoder.b_out.data[END_TOKEN] = 1e3;
        let x = vec![0.1, -0.2, 0.3];
        // An empty sentence trains only the end transition, which this model
        // predicts with probability one.
        let ex = CaptionExample { global: &x, tree: &tree, tokens: &[] };
        let loss = caption_loss(&[ex], &vocab, &dict, &params).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn uniform_model_charges_log_vocab_per_step() {
        let (vocab, tree, dict, mut params) = loss_fixture(9);
        params.decoder = DecoderParams::zeros(DIMS);
        let x = vec![0.0; DIMS.global];
        let tokens: Vec<String> = ["man", "ride", "bike"].map(String::from).to_vec();
        let ex = CaptionExample { global: &x, tree: &tree, tokens: &tokens };
        let loss = caption_loss(&[ex], &vocab, &dict, &params).unwrap();
        // Four predicted tokens (three words plus the terminator), each
        // uniform over the 11-entry dictionary, one pair in the batch.
        let expect = 4.0 * (11f64).ln();
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
    }

    #[test]
    fn out_of_dictionary_targets_are_counted_and_trained_as_unk() {
        let (vocab, tree, dict, params) = loss_fixture(10);
        let x = vec![0.1, 0.2, -0.1];
        let tokens: Vec<String> = ["man", "zeppelin", "bike"].map(String::from).to_vec();
        let ex = CaptionExample { global: &x, tree: &tree, tokens: &tokens };
        let mut grads = params.zeros_like();
        let out = caption_loss_gradient(&[ex], &vocab, &dict, &params, &mut grads).unwrap();
        assert_eq!(out.unknown_tokens, 1);
        assert!(out.loss.is_finite());
        // The unknown marker's embedding row receives gradient because the
        // mapped token is teacher-forced as input on the following step.
        let row = grads.decoder.embed.row(UNK_TOKEN);
        assert!(row.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn caption_gradients_match_central_differences() {
        let (vocab, tree, dict, params) = loss_fixture(11);
        let single = DependencyTree::root_only(Phrase::Verb("walk".into()), "v1".into());
        let x0 = vec![0.4, -0.3, 0.2];
        let x1 = vec![-0.5, 0.1, 0.7];
        let t0: Vec<String> = ["man", "ride", "bike"].map(String::from).to_vec();
        let t1: Vec<String> = ["man", "walk"].map(String::from).to_vec();
        let examples = [
            CaptionExample { global: &x0, tree: &tree, tokens: &t0 },
            CaptionExample { global: &x1, tree: &single, tokens: &t1 },
        ];

        let mut grads = params.zeros_like();
        let out =
            caption_loss_gradient(&examples, &vocab, &dict, &params, &mut grads).unwrap();

        let mut probe = params.clone();
        let count = params.param_count();
        let mut worst = (0.0f64, 0usize);
        for idx in 0..count {
            let numeric = central_difference(&mut probe, idx, 1e-5, |p| {
                caption_loss(&examples, &vocab, &dict, p).unwrap()
            });
            let err = gradient_rel_error(grads.get_flat(idx), numeric);
            if err > worst.0 {
                worst = (err, idx);
            }
        }
        assert!(
            worst.0 < 1e-4,
            "worst relative error {} at parameter {} (analytic {}, loss {})",
            worst.0,
            worst.1,
            grads.get_flat(worst.1),
            out.loss
        );
    }

    #[test]
    fn one_gradient_step_decreases_the_loss() {
        let (vocab, tree, dict, mut params) = loss_fixture(12);
        let x = vec![0.2, 0.5, -0.4];
        let tokens: Vec<String> = ["man", "ride", "bike", "on", "street"]
            .map(String::from)
            .to_vec();
        let ex = CaptionExample { global: &x, tree: &tree, tokens: &tokens };
        let before = caption_loss(&[ex], &vocab, &dict, &params).unwrap();
        let mut grads = params.zeros_like();
        caption_loss_gradient(&[ex], &vocab, &dict, &params, &mut grads).unwrap();
        params.accumulate(&grads, -1e-2);
        let after = caption_loss(&[ex], &vocab, &dict, &params).unwrap();
        assert!(after < before, "{after} !< {before}");
    }
}
