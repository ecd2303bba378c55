//! Iterative refinement: alternate pseudo-sentence generation with model
//! fine-tuning, tracking validation CIDEr across iterations.
//!
//! One round first grounds concepts and spans dependency trees for every
//! training video, linearizes them into pseudo sentences, and merges those
//! (together with the captions decoded last round) into a deduplicated
//! training pool. The combined model — grounding, tree encoder, and decoder —
//! is then fine-tuned on the pool by RMS-propagation against the objective
//! `lambda * L_m + L_c + ||M||_2`, captions are re-decoded, and the indicator
//! vectors are refreshed so every concept that ever appeared in an annotation
//! or caption stays switched on. The loop stops when generation goes quiet,
//! validation CIDEr stops improving, or the iteration budget runs out.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::captioner::{
    beam_decode, caption_loss_gradient, encode_tree, write_model_checkpoint, CaptionExample,
    CaptionerParams, DecodeConfig, DecoderDims, DecoderParams, Dictionary, GcnParams,
    ModelCheckpoint,
};
use crate::corpusio::{ConceptVocabulary, Phrase};
use crate::grounding::{
    concept_loss_gradient, generate_concepts, ConceptThresholds, GroundingParams, VideoRecord,
};
use crate::kglink::KgModel;
use crate::metrics::{cider, EvalSet};
use crate::num::{stream_rng, ParamSet};
use crate::opt::RmsProp;
use crate::treespan::{generate_roots, linearize, span_tree, DependencyTree, SpanConfig};
use crate::{Error, Real, Result};

/// Pairs per gradient step during fine-tuning.
const BATCH_SIZE: usize = 8;
/// Uniform init half-width for all trainable weights. Sized so hidden-state
/// and logit magnitudes start large enough that data gradients outweigh the
/// objective's norm regularizer; much smaller inits leave whole tensors
/// pinned at zero by the norm term's constant pull.
const INIT_SCALE: Real = 0.25;
/// RNG stream for model initialization.
const STREAM_MODEL_INIT: u64 = 9_999;
/// RNG stream base for epoch shuffles; iteration and epoch are folded in.
const STREAM_SHUFFLE_BASE: u64 = 10_000;
const STREAM_EPOCH_STRIDE: u64 = 1_000;

/// How a training pair entered the pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum PairOrigin {
    /// Linearized from a spanned dependency tree (or the seed annotation).
    Pseudo,
    /// A caption the model decoded in an earlier iteration.
    Caption,
}

impl PairOrigin {
    fn label(self) -> &'static str {
        match self {
            PairOrigin::Pseudo => "pseudo",
            PairOrigin::Caption => "caption",
        }
    }
}

/// One pool entry: a video, the indicator snapshot it was generated under,
/// the sentence, and the tree the sentence came from (captions and seed
/// annotations carry a root-only tree).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub video_id: String,
    /// Object indicator snapshot at creation time.
    pub ind_obj: Vec<u8>,
    /// Action indicator snapshot at creation time.
    pub ind_act: Vec<u8>,
    /// The sentence tokens; never empty.
    pub tokens: Vec<String>,
    /// Tree encoded by the captioner when training on this pair.
    pub tree: DependencyTree,
    pub origin: PairOrigin,
}

/// Overlays an index set onto a binary indicator vector: `out[i] = 1` for
/// every `i` in `indices`, all other entries keep their value.
pub fn update_indicators(g: &[u8], indices: &[usize]) -> Result<Vec<u8>> {
    let mut out = g.to_vec();
    for &i in indices {
        if i >= out.len() {
            return Err(Error::Argument(format!(
                "concept index {i} out of range for indicator length {}",
                out.len()
            )));
        }
        out[i] = 1;
    }
    Ok(out)
}

/// Widths needed to size a fresh [`CaptionModel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    /// Feature-map column width (visual feature dimension).
    pub visual: usize,
    /// Word-embedding width; also the tree-encoder width.
    pub embed: usize,
    pub objects: usize,
    pub actions: usize,
    /// Global video-feature width.
    pub global: usize,
    /// Decoder hidden width.
    pub hidden: usize,
    /// Dictionary size including the reserved markers.
    pub vocab: usize,
}

impl ModelDims {
    /// Decoder shape: word embeddings and the attention projection take half
    /// the hidden width, relation-aware features are `[parent; rel; child]`.
    pub fn decoder(&self) -> DecoderDims {
        let half = (self.hidden / 2).max(1);
        DecoderDims {
            global: self.global,
            feature: 3 * self.embed,
            embed: half,
            hidden: self.hidden,
            attention: half,
            vocab: self.vocab,
        }
    }
}

/// Every trainable tensor of the pipeline: grounding attention/classifiers,
/// the tree encoder, and the caption decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionModel {
    pub grounding: GroundingParams,
    pub captioner: CaptionerParams,
}

impl ParamSet for CaptionModel {
    fn tensors(&self) -> Vec<&crate::Tensor> {
        let mut v = self.grounding.tensors();
        v.extend(self.captioner.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut crate::Tensor> {
        let mut v = self.grounding.tensors_mut();
        v.extend(self.captioner.tensors_mut());
        v
    }
}

impl CaptionModel {
    /// Seeded uniform initialization of all components.
    pub fn init(dims: &ModelDims, seed: u64) -> Self {
        let mut rng = stream_rng(seed, STREAM_MODEL_INIT);
        CaptionModel {
            grounding: GroundingParams::init_uniform(
                dims.visual,
                dims.embed,
                dims.objects,
                dims.actions,
                INIT_SCALE,
                &mut rng,
            ),
            captioner: CaptionerParams {
                gcn: GcnParams::init_uniform(dims.embed, INIT_SCALE, &mut rng),
                decoder: DecoderParams::init_uniform(dims.decoder(), INIT_SCALE, &mut rng),
            },
        }
    }

    fn sections(&self) -> Vec<(&'static str, &crate::Tensor)> {
        vec![
            ("grounding.t_obj", &self.grounding.t_obj),
            ("grounding.t_act", &self.grounding.t_act),
            ("grounding.w_obj", &self.grounding.w_obj),
            ("grounding.b_obj", &self.grounding.b_obj),
            ("grounding.w_act", &self.grounding.w_act),
            ("grounding.b_act", &self.grounding.b_act),
            ("gcn.w_self", &self.captioner.gcn.w_self),
            ("gcn.w_parent", &self.captioner.gcn.w_parent),
            ("gcn.w_child", &self.captioner.gcn.w_child),
            ("gcn.w_rel", &self.captioner.gcn.w_rel),
            ("gcn.bias", &self.captioner.gcn.bias),
            ("decoder.w1", &self.captioner.decoder.w1),
            ("decoder.u1", &self.captioner.decoder.u1),
            ("decoder.b1", &self.captioner.decoder.b1),
            ("decoder.w2", &self.captioner.decoder.w2),
            ("decoder.u2", &self.captioner.decoder.u2),
            ("decoder.b2", &self.captioner.decoder.b2),
            ("decoder.att_feature", &self.captioner.decoder.att_feature),
            ("decoder.att_hidden", &self.captioner.decoder.att_hidden),
            ("decoder.att_bias", &self.captioner.decoder.att_bias),
            ("decoder.att_score", &self.captioner.decoder.att_score),
            ("decoder.embed", &self.captioner.decoder.embed),
            ("decoder.w_out", &self.captioner.decoder.w_out),
            ("decoder.b_out", &self.captioner.decoder.b_out),
        ]
    }

    /// Snapshot as a named-section checkpoint.
    pub fn to_checkpoint(&self, dictionary: &Dictionary, iteration: u32) -> ModelCheckpoint {
        ModelCheckpoint {
            iteration,
            dictionary: dictionary.tokens().to_vec(),
            sections: self
                .sections()
                .into_iter()
                .map(|(name, t)| (name.to_string(), t.clone()))
                .collect(),
        }
    }

    /// Rebuilds a model (plus its dictionary and iteration stamp) from a
    /// checkpoint, deriving every width from the stored tensor shapes.
    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<(Self, Dictionary, u32)> {
        let mut map: BTreeMap<&str, &crate::Tensor> = BTreeMap::new();
        for (name, tensor) in &ckpt.sections {
            if map.insert(name.as_str(), tensor).is_some() {
                return Err(Error::Format(format!("checkpoint repeats section '{name}'")));
            }
        }
        let mut take = |name: &str| -> Result<crate::Tensor> {
            map.remove(name)
                .cloned()
                .ok_or_else(|| Error::Format(format!("checkpoint is missing section '{name}'")))
        };

        let grounding = GroundingParams {
            t_obj: take("grounding.t_obj")?,
            t_act: take("grounding.t_act")?,
            w_obj: take("grounding.w_obj")?,
            b_obj: take("grounding.b_obj")?,
            w_act: take("grounding.w_act")?,
            b_act: take("grounding.b_act")?,
        };
        let gcn = GcnParams {
            w_self: take("gcn.w_self")?,
            w_parent: take("gcn.w_parent")?,
            w_child: take("gcn.w_child")?,
            w_rel: take("gcn.w_rel")?,
            bias: take("gcn.bias")?,
        };
        let w1 = take("decoder.w1")?;
        let u1 = take("decoder.u1")?;
        let embed = take("decoder.embed")?;
        let att_feature = take("decoder.att_feature")?;
        let hidden = u1.cols();
        let embed_width = embed.cols();
        if w1.cols() < embed_width + hidden {
            return Err(Error::Format(
                "checkpoint decoder input is narrower than its embedding and hidden widths"
                    .into(),
            ));
        }
        let dims = DecoderDims {
            global: w1.cols() - embed_width - hidden,
            feature: att_feature.cols(),
            embed: embed_width,
            hidden,
            attention: att_feature.rows(),
            vocab: embed.rows(),
        };
        let decoder = DecoderParams {
            dims,
            w1,
            u1,
            b1: take("decoder.b1")?,
            w2: take("decoder.w2")?,
            u2: take("decoder.u2")?,
            b2: take("decoder.b2")?,
            att_feature,
            att_hidden: take("decoder.att_hidden")?,
            att_bias: take("decoder.att_bias")?,
            att_score: take("decoder.att_score")?,
            embed,
            w_out: take("decoder.w_out")?,
            b_out: take("decoder.b_out")?,
        };
        if let Some((name, _)) = map.into_iter().next() {
            return Err(Error::Format(format!("checkpoint has unexpected section '{name}'")));
        }

        let model = CaptionModel { grounding, captioner: CaptionerParams { gcn, decoder } };
        let reference = DecoderParams::zeros(dims);
        for ((name, t), expect) in model.sections().iter().skip(11).zip(reference.tensors()) {
            if t.rows() != expect.rows() || t.cols() != expect.cols() {
                return Err(Error::Format(format!(
                    "checkpoint section '{name}' has shape {}x{}, expected {}x{}",
                    t.rows(),
                    t.cols(),
                    expect.rows(),
                    expect.cols()
                )));
            }
        }
        if model.captioner.gcn.w_self.rows() != model.captioner.gcn.w_self.cols() {
            return Err(Error::Format("checkpoint tree-encoder weights are not square".into()));
        }

        if ckpt.dictionary.len() != dims.vocab {
            return Err(Error::Format(format!(
                "checkpoint dictionary holds {} entries but the decoder expects {}",
                ckpt.dictionary.len(),
                dims.vocab
            )));
        }
        let words: Vec<String> = ckpt.dictionary.iter().skip(3).cloned().collect();
        let dictionary = Dictionary::new(words);
        if dictionary.tokens() != ckpt.dictionary.as_slice() {
            return Err(Error::Format("checkpoint dictionary is not in canonical order".into()));
        }
        Ok((model, dictionary, ckpt.iteration))
    }
}

/// The complete fine-tuning objective over one batch of pool pairs:
/// `lambda * L_m + L_c + ||M||_2`, where the concept loss runs over the
/// batch's distinct videos, the caption loss over the pairs, and the
/// regularizer sums the L2 norms of every trainable tensor. Returns the loss
/// and the matching gradient combination.
pub fn total_loss(
    batch: &[&TrainingPair],
    videos: &BTreeMap<String, VideoRecord>,
    vocab: &ConceptVocabulary,
    dictionary: &Dictionary,
    model: &CaptionModel,
    lambda: Real,
) -> Result<(Real, CaptionModel)> {
    if batch.is_empty() {
        return Err(Error::Train("total loss over an empty batch".into()));
    }
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::Argument(format!("lambda must be finite and non-negative, got {lambda}")));
    }
    let mut grads = model.zeros_like();
    let mut examples = Vec::with_capacity(batch.len());
    for pair in batch {
        let video = videos.get(&pair.video_id).ok_or_else(|| {
            Error::Argument(format!("training pair references unknown video '{}'", pair.video_id))
        })?;
        examples.push(CaptionExample {
            global: &video.global,
            tree: &pair.tree,
            tokens: &pair.tokens,
        });
    }
    let mut loss =
        caption_loss_gradient(&examples, vocab, dictionary, &model.captioner, &mut grads.captioner)?
            .loss;

    if lambda > 0.0 {
        let mut ids: Vec<&str> = batch.iter().map(|p| p.video_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        let batch_videos: Vec<&VideoRecord> = ids.iter().map(|id| &videos[*id]).collect();
        let mut scratch = model.grounding.zeros_like();
        let concept =
            concept_loss_gradient(&batch_videos, vocab, &model.grounding, &mut scratch)?;
        loss += lambda * concept.loss;
        grads.grounding.accumulate(&scratch, lambda);
    }

    loss += model.norm_sum();
    model.add_norm_gradient(&mut grads, 1.0);
    Ok((loss, grads))
}

/// Refinement controls, distilled from the run configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineConfig {
    pub thresholds: ConceptThresholds,
    /// Weight of the concept loss in the combined objective.
    pub lambda: Real,
    pub span: SpanConfig,
    /// Decoder hidden width.
    pub hidden: usize,
    pub beam: usize,
    /// Maximum caption length in tokens.
    pub t_max: usize,
    /// Fine-tuning epochs per iteration.
    pub epochs: usize,
    pub learning_rate: Real,
    pub max_iterations: usize,
    /// Iterations without a CIDEr improvement tolerated before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            thresholds: ConceptThresholds::default(),
            lambda: 0.1,
            span: SpanConfig::default(),
            hidden: 512,
            beam: 5,
            t_max: 20,
            epochs: 3,
            learning_rate: 1e-4,
            max_iterations: 20,
            patience: 1,
            seed: 7,
        }
    }
}

/// Mutable loop state: the pool, the parameters, and the bookkeeping flags.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineState {
    /// Deduplicated training pairs; only ever grows.
    pub pool: Vec<TrainingPair>,
    pub model: CaptionModel,
    /// Completed iterations (1-based after the first call).
    pub iteration: u32,
    /// `1` until the first fine-tuning pass has run; generation is skipped
    /// while it is set.
    pub flag: u8,
    /// Best validation CIDEr seen so far; meaningful once a run evaluates.
    pub best_cider: f64,
    /// Captions decoded for the training videos last iteration.
    pub captions: BTreeMap<String, Vec<String>>,
    /// The weak annotation each video started from.
    pub initial: BTreeMap<String, Phrase>,
}

/// One line of the run history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: u32,
    pub cider: f64,
    pub new_pseudo: usize,
    pub pool_size: usize,
    pub loss: f64,
}

/// What one iteration did, for the caller's bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationStats {
    pub iteration: u32,
    /// Whether the generation phase ran (false on the seeding call).
    pub generated: bool,
    /// Pseudo-origin pairs newly added to the pool.
    pub new_pseudo: usize,
    pub pool_size: usize,
    /// Mean per-step training loss across the fine-tuning epochs.
    pub loss: Real,
    /// Pool indices of every pair added this iteration.
    pub added: Vec<usize>,
}

/// Result of a full refinement run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    /// Parameter snapshot from the best-CIDEr iteration.
    pub model: CaptionModel,
    pub best_iteration: u32,
    pub best_cider: f64,
    pub history: Vec<IterationRecord>,
}

/// Decodes one caption for a video: ground, pick the first root, span, encode,
/// beam-search. Returns the caption tokens and their total log-probability.
pub fn caption_video(
    model: &CaptionModel,
    dictionary: &Dictionary,
    vocab: &ConceptVocabulary,
    kg: &KgModel,
    video: &VideoRecord,
    thresholds: &ConceptThresholds,
    span: &SpanConfig,
    decode: &DecodeConfig,
    prior_captions: &[Vec<String>],
) -> Result<(Vec<String>, f64)> {
    let grounded = generate_concepts(video, vocab, &model.grounding, thresholds)?;
    let roots = generate_roots(video, &grounded, vocab, thresholds.consistency, prior_captions);
    let tree = span_tree(&roots[0], video, vocab, kg, span);
    let encoding = encode_tree(&tree, vocab, &model.captioner.gcn)?;
    let decoded = beam_decode(&model.captioner.decoder, &video.global, &encoding.features, decode)?;
    let tokens = decoded.tokens.iter().map(|&t| dictionary.token(t).to_string()).collect();
    Ok((tokens, decoded.logprob))
}

/// Worker cap for the per-video fan-out, from `WEAKCAP_THREADS` when set.
fn thread_cap() -> usize {
    if let Ok(v) = std::env::var("WEAKCAP_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            return n.max(1);
        }
        log::warn!("ignoring invalid WEAKCAP_THREADS value '{v}'");
    }
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(8)
}

/// Runs `job` over every video, fanning out across up to [`thread_cap`]
/// workers. Results come back in input order regardless of thread count.
fn fan_out<'v, T, F>(videos: &[&'v VideoRecord], job: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&'v VideoRecord) -> Result<T> + Sync,
{
    let threads = thread_cap().min(videos.len().max(1));
    if threads <= 1 {
        return videos.iter().map(|v| job(v)).collect();
    }
    let chunk = videos.len().div_ceil(threads);
    let job = &job;
    let gathered: Vec<Result<T>> = std::thread::scope(|scope| {
        let handles: Vec<_> = videos
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|v| job(v)).collect::<Vec<_>>()))
            .collect();
        let mut out = Vec::with_capacity(videos.len());
        for handle in handles {
            out.extend(handle.join().unwrap_or_else(|e| std::panic::resume_unwind(e)));
        }
        out
    });
    gathered.into_iter().collect()
}

/// Locks every vocabulary concept mentioned in `captions` into the per-video
/// index sets, then refreshes each video's indicators as fresh grounding
/// output overlaid with its locked set.
fn lock_and_refresh(
    videos: &mut BTreeMap<String, VideoRecord>,
    captions: &BTreeMap<String, Vec<String>>,
    locked_obj: &mut BTreeMap<String, BTreeSet<usize>>,
    locked_act: &mut BTreeMap<String, BTreeSet<usize>>,
    vocab: &ConceptVocabulary,
    grounding: &GroundingParams,
    thresholds: &ConceptThresholds,
) -> Result<()> {
    for (video_id, caption) in captions {
        if !videos.contains_key(video_id) {
            continue;
        }
        let obj = locked_obj.entry(video_id.clone()).or_default();
        let act = locked_act.entry(video_id.clone()).or_default();
        for token in caption {
            if let Some(i) = vocab.object_index(token) {
                obj.insert(i);
            }
            if let Some(j) = vocab.action_index(token) {
                act.insert(j);
            }
        }
    }
    let jobs: Vec<&VideoRecord> = videos.values().collect();
    let grounded = fan_out(&jobs, |v| {
        Ok((v.video_id.clone(), generate_concepts(v, vocab, grounding, thresholds)?))
    })?;
    for (video_id, g) in grounded {
        let obj: Vec<usize> =
            locked_obj.get(&video_id).map(|s| s.iter().copied().collect()).unwrap_or_default();
        let act: Vec<usize> =
            locked_act.get(&video_id).map(|s| s.iter().copied().collect()).unwrap_or_default();
        let video = videos.get_mut(&video_id).expect("id comes from the same map");
        video.ind_obj = update_indicators(&g.g_obj, &obj)?;
        video.ind_act = update_indicators(&g.g_act, &act)?;
    }
    Ok(())
}

/// The refinement loop bound to its immutable inputs (vocabulary and
/// knowledge graph) and its owned video records.
pub struct RefineSession<'a> {
    vocab: &'a ConceptVocabulary,
    kg: &'a KgModel,
    cfg: RefineConfig,
    dictionary: Dictionary,
    train: BTreeMap<String, VideoRecord>,
    validation: BTreeMap<String, VideoRecord>,
    /// Tokenized ground-truth references per validation video, when provided.
    references: Option<BTreeMap<String, Vec<Vec<String>>>>,
    state: RefineState,
    seen: BTreeSet<(String, Vec<String>)>,
    locked_obj: BTreeMap<String, BTreeSet<usize>>,
    locked_act: BTreeMap<String, BTreeSet<usize>>,
    val_captions: BTreeMap<String, Vec<String>>,
}

impl<'a> RefineSession<'a> {
    /// Builds the session: derives model widths from the data, initializes
    /// the parameters from the seed, and seeds every video's indicators from
    /// its weak annotation.
    pub fn new(
        vocab: &'a ConceptVocabulary,
        kg: &'a KgModel,
        mut train: BTreeMap<String, VideoRecord>,
        mut validation: BTreeMap<String, VideoRecord>,
        references: Option<BTreeMap<String, Vec<Vec<String>>>>,
        cfg: RefineConfig,
    ) -> Result<Self> {
        if !vocab.has_embeddings() {
            return Err(Error::Vocab("refinement requires attached word embeddings".into()));
        }
        let dictionary = Dictionary::new(
            vocab
                .objects
                .iter()
                .chain(&vocab.actions)
                .chain(&vocab.relations)
                .cloned(),
        );

        let mut visual = 1usize;
        let mut global = 1usize;
        let mut initial = BTreeMap::new();
        let mut locked_obj: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
        let mut locked_act: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
        {
            let mut all: Vec<&VideoRecord> = train.values().collect();
            all.extend(validation.values());
            if let Some(first) = all.first() {
                visual = first.fmap_obj.cols();
                global = first.global.len();
            }
            for video in all {
                video.validate(vocab)?;
                if video.fmap_obj.cols() != visual
                    || video.fmap_act.cols() != visual
                    || video.global.len() != global
                {
                    return Err(Error::Shape(format!(
                        "video {} has feature widths {}x{} (global {}), expected {}x{} (global {})",
                        video.video_id,
                        video.fmap_obj.cols(),
                        video.fmap_act.cols(),
                        video.global.len(),
                        visual,
                        visual,
                        global
                    )));
                }
                initial.insert(video.video_id.clone(), video.annotation.clone());
                let obj = locked_obj.entry(video.video_id.clone()).or_default();
                let act = locked_act.entry(video.video_id.clone()).or_default();
                if let Some(n) = video.annotation.noun() {
                    obj.insert(vocab.object_index(n).expect("validate checked the lemma"));
                }
                if let Some(v) = video.annotation.verb() {
                    act.insert(vocab.action_index(v).expect("validate checked the lemma"));
                }
            }
        }
        for videos in [&mut train, &mut validation] {
            for video in videos.values_mut() {
                let obj: Vec<usize> = locked_obj[&video.video_id].iter().copied().collect();
                let act: Vec<usize> = locked_act[&video.video_id].iter().copied().collect();
                video.ind_obj = update_indicators(&vec![0; vocab.objects.len()], &obj)?;
                video.ind_act = update_indicators(&vec![0; vocab.actions.len()], &act)?;
            }
        }

        let dims = ModelDims {
            visual,
            embed: vocab.embeddings.dim,
            objects: vocab.objects.len(),
            actions: vocab.actions.len(),
            global,
            hidden: cfg.hidden,
            vocab: dictionary.len(),
        };
        let model = CaptionModel::init(&dims, cfg.seed);
        Ok(RefineSession {
            vocab,
            kg,
            cfg,
            dictionary,
            train,
            validation,
            references,
            state: RefineState {
                pool: Vec::new(),
                model,
                iteration: 0,
                flag: 1,
                best_cider: f64::NEG_INFINITY,
                captions: BTreeMap::new(),
                initial,
            },
            seen: BTreeSet::new(),
            locked_obj,
            locked_act,
            val_captions: BTreeMap::new(),
        })
    }

    pub fn state(&self) -> &RefineState {
        &self.state
    }

    pub fn dictionary(&self) -> &Dictionary {
        &self.dictionary
    }

    pub fn training_videos(&self) -> &BTreeMap<String, VideoRecord> {
        &self.train
    }

    pub fn validation_videos(&self) -> &BTreeMap<String, VideoRecord> {
        &self.validation
    }

    /// Captions decoded for the validation split at the last evaluation.
    pub fn validation_captions(&self) -> &BTreeMap<String, Vec<String>> {
        &self.val_captions
    }

    /// Adds a pair unless its `(video, sentence)` key is already pooled.
    /// Returns the pool index on insertion.
    fn add_pair(&mut self, pair: TrainingPair) -> Option<usize> {
        if pair.tokens.is_empty() {
            return None;
        }
        let key = (pair.video_id.clone(), pair.tokens.clone());
        if !self.seen.insert(key) {
            return None;
        }
        self.state.pool.push(pair);
        Some(self.state.pool.len() - 1)
    }

    /// Root-only tree standing in for a decoded caption: the caption's first
    /// object and action tokens when both occur, otherwise the annotation.
    fn caption_tree(&self, video_id: &str, tokens: &[String]) -> DependencyTree {
        let obj = tokens.iter().find(|t| self.vocab.object_index(t).is_some());
        let act = tokens.iter().find(|t| self.vocab.action_index(t).is_some());
        let root = match (obj, act) {
            (Some(o), Some(a)) => Phrase::NounVerb(o.clone(), a.clone()),
            _ => self.state.initial[video_id].clone(),
        };
        DependencyTree::root_only(root, video_id)
    }

    /// One refinement round. The first call (while the flag is set) skips
    /// generation and seeds the pool from the weak annotations; later calls
    /// span trees into pseudo sentences and merge them, together with the
    /// previous captions, into the pool. Every call then fine-tunes on the
    /// full pool, re-decodes the training captions (generation rounds only),
    /// and refreshes the indicator vectors.
    pub fn run_iteration(&mut self) -> Result<IterationStats> {
        if self.train.is_empty() {
            self.state.flag = 0;
            return Ok(IterationStats {
                iteration: self.state.iteration,
                generated: false,
                new_pseudo: 0,
                pool_size: self.state.pool.len(),
                loss: 0.0,
                added: Vec::new(),
            });
        }
        let generate = self.state.flag != 1;
        self.state.iteration += 1;
        let iteration = self.state.iteration;
        let mut added = Vec::new();
        let mut new_pseudo = 0usize;

        if generate {
            let jobs: Vec<&VideoRecord> = self.train.values().collect();
            let model = &self.state.model;
            let vocab = self.vocab;
            let kg = self.kg;
            let cfg = &self.cfg;
            let captions = &self.state.captions;
            let generated: Vec<(String, Vec<(DependencyTree, Vec<String>)>)> =
                fan_out(&jobs, |video| {
                    let grounded =
                        generate_concepts(video, vocab, &model.grounding, &cfg.thresholds)?;
                    let prior: Vec<Vec<String>> = captions
                        .get(&video.video_id)
                        .filter(|c| !c.is_empty())
                        .cloned()
                        .into_iter()
                        .collect();
                    let roots =
                        generate_roots(video, &grounded, vocab, cfg.thresholds.consistency, &prior);
                    let mut out = Vec::new();
                    for root in &roots {
                        let mut tree = span_tree(root, video, vocab, kg, &cfg.span);
                        tree.iteration = iteration;
                        let tokens = linearize(&tree);
                        out.push((tree, tokens));
                    }
                    Ok((video.video_id.clone(), out))
                })?;
            for (video_id, trees) in generated {
                let (ind_obj, ind_act) = {
                    let v = &self.train[&video_id];
                    (v.ind_obj.clone(), v.ind_act.clone())
                };
                for (tree, tokens) in trees {
                    let pair = TrainingPair {
                        video_id: video_id.clone(),
                        ind_obj: ind_obj.clone(),
                        ind_act: ind_act.clone(),
                        tokens,
                        tree,
                        origin: PairOrigin::Pseudo,
                    };
                    if let Some(idx) = self.add_pair(pair) {
                        new_pseudo += 1;
                        added.push(idx);
                    }
                }
                let caption = self.state.captions.get(&video_id).filter(|c| !c.is_empty());
                if let Some(caption) = caption.cloned() {
                    let tree = self.caption_tree(&video_id, &caption);
                    let pair = TrainingPair {
                        video_id: video_id.clone(),
                        ind_obj,
                        ind_act,
                        tokens: caption,
                        tree,
                        origin: PairOrigin::Caption,
                    };
                    if let Some(idx) = self.add_pair(pair) {
                        added.push(idx);
                    }
                }
            }
        } else {
            let seeds: Vec<(String, Phrase, Vec<u8>, Vec<u8>)> = self
                .train
                .values()
                .map(|v| {
                    (v.video_id.clone(), v.annotation.clone(), v.ind_obj.clone(), v.ind_act.clone())
                })
                .collect();
            for (video_id, annotation, ind_obj, ind_act) in seeds {
                let tokens: Vec<String> =
                    annotation.tokens().into_iter().map(String::from).collect();
                let tree = DependencyTree::root_only(annotation, &video_id);
                let pair =
                    TrainingPair { video_id, ind_obj, ind_act, tokens, tree, origin: PairOrigin::Pseudo };
                if let Some(idx) = self.add_pair(pair) {
                    new_pseudo += 1;
                    added.push(idx);
                }
            }
        }

        let loss = self.fine_tune(iteration)?;

        if generate {
            self.state.captions = self.decode_videos(Split::Train)?;
        }
        lock_and_refresh(
            &mut self.train,
            &self.state.captions,
            &mut self.locked_obj,
            &mut self.locked_act,
            self.vocab,
            &self.state.model.grounding,
            &self.cfg.thresholds,
        )?;
        self.state.flag = 0;

        Ok(IterationStats {
            iteration,
            generated: generate,
            new_pseudo,
            pool_size: self.state.pool.len(),
            loss,
            added,
        })
    }

    /// Fine-tunes the model on the whole pool for the configured epochs and
    /// returns the mean per-step loss.
    fn fine_tune(&mut self, iteration: u32) -> Result<Real> {
        if self.state.pool.is_empty() {
            return Ok(0.0);
        }
        let mut opt = RmsProp::new(&self.state.model, self.cfg.learning_rate);
        let mut indices: Vec<usize> = (0..self.state.pool.len()).collect();
        let mut total = 0.0;
        let mut steps = 0usize;
        for epoch in 0..self.cfg.epochs.max(1) {
            let stream = STREAM_SHUFFLE_BASE
                + u64::from(iteration) * STREAM_EPOCH_STRIDE
                + epoch as u64;
            indices.shuffle(&mut stream_rng(self.cfg.seed, stream));
            for chunk in indices.chunks(BATCH_SIZE) {
                let state = &mut self.state;
                let batch: Vec<&TrainingPair> = chunk.iter().map(|&i| &state.pool[i]).collect();
                let (loss, grads) = total_loss(
                    &batch,
                    &self.train,
                    self.vocab,
                    &self.dictionary,
                    &state.model,
                    self.cfg.lambda,
                )?;
                if !loss.is_finite() {
                    return Err(Error::Divergence {
                        context: format!("iteration {iteration} epoch {}", epoch + 1),
                        loss,
                    });
                }
                drop(batch);
                opt.step(&mut state.model, &grads);
                total += loss;
                steps += 1;
            }
        }
        Ok(total / steps as Real)
    }

    /// Beam-decodes one caption per video of the chosen split.
    fn decode_videos(&self, split: Split) -> Result<BTreeMap<String, Vec<String>>> {
        let (videos, prior) = match split {
            Split::Train => (&self.train, &self.state.captions),
            Split::Validation => (&self.validation, &self.val_captions),
        };
        let jobs: Vec<&VideoRecord> = videos.values().collect();
        let decode = DecodeConfig {
            beam: self.cfg.beam,
            max_len: self.cfg.t_max,
            seed: self.cfg.seed,
        };
        let rows = fan_out(&jobs, |video| {
            let hint: Vec<Vec<String>> = prior
                .get(&video.video_id)
                .filter(|c| !c.is_empty())
                .cloned()
                .into_iter()
                .collect();
            let (tokens, _) = caption_video(
                &self.state.model,
                &self.dictionary,
                self.vocab,
                self.kg,
                video,
                &self.cfg.thresholds,
                &self.cfg.span,
                &decode,
                &hint,
            )?;
            Ok((video.video_id.clone(), tokens))
        })?;
        Ok(rows.into_iter().collect())
    }

    /// Pseudo sentences for one validation video under the current model,
    /// used as fallback references when no ground truth is configured.
    fn pseudo_references(&self) -> Result<BTreeMap<String, Vec<Vec<String>>>> {
        let jobs: Vec<&VideoRecord> = self.validation.values().collect();
        let rows = fan_out(&jobs, |video| {
            let grounded = generate_concepts(
                video,
                self.vocab,
                &self.state.model.grounding,
                &self.cfg.thresholds,
            )?;
            let roots =
                generate_roots(video, &grounded, self.vocab, self.cfg.thresholds.consistency, &[]);
            let mut refs: Vec<Vec<String>> = Vec::new();
            for root in &roots {
                let tree = span_tree(root, video, self.vocab, self.kg, &self.cfg.span);
                let tokens = linearize(&tree);
                if !refs.contains(&tokens) {
                    refs.push(tokens);
                }
            }
            Ok((video.video_id.clone(), refs))
        })?;
        Ok(rows.into_iter().collect())
    }

    /// Decodes the validation split, scores it with CIDEr against the
    /// configured references (or pseudo-sentence references in pure
    /// weak-annotation mode), and refreshes the validation indicators.
    pub fn evaluate_validation(&mut self) -> Result<f64> {
        if self.validation.is_empty() {
            return Err(Error::Eval("validation split is empty".into()));
        }
        let candidates = self.decode_videos(Split::Validation)?;
        let refs = match &self.references {
            Some(table) => {
                let mut out = BTreeMap::new();
                for id in self.validation.keys() {
                    let entry = table.get(id).filter(|r| !r.is_empty()).ok_or_else(|| {
                        Error::Eval(format!("no references for validation video '{id}'"))
                    })?;
                    out.insert(id.clone(), entry.clone());
                }
                out
            }
            None => self.pseudo_references()?,
        };
        let score = cider(&EvalSet::new(candidates.clone(), refs)?);
        self.val_captions = candidates;
        lock_and_refresh(
            &mut self.validation,
            &self.val_captions,
            &mut self.locked_obj,
            &mut self.locked_act,
            self.vocab,
            &self.state.model.grounding,
            &self.cfg.thresholds,
        )?;
        Ok(score)
    }

    /// The full loop: iterate, evaluate, and stop when (a) a generation round
    /// adds zero new pseudo sentences, (b) validation CIDEr has not beaten the
    /// best for more than `patience` consecutive iterations, or (c) the
    /// iteration budget is spent. Returns the best-CIDEr snapshot (ties keep
    /// the earliest) and the per-iteration history. With `run_dir` set, the
    /// history, pools, captions, per-iteration checkpoints, and a manifest
    /// naming the best checkpoint are written there.
    pub fn run(&mut self, run_dir: Option<&Path>) -> Result<RunOutcome> {
        if self.train.is_empty() {
            return Err(Error::Argument("refinement requires at least one training video".into()));
        }
        if self.validation.is_empty() {
            return Err(Error::Argument("refinement requires a validation split".into()));
        }
        let mut writer = match run_dir {
            Some(dir) => Some(RunWriter::create(dir)?),
            None => None,
        };
        let mut history: Vec<IterationRecord> = Vec::new();
        let mut best: Option<(f64, u32, CaptionModel)> = None;
        let mut streak = 0usize;
        loop {
            let stats = self.run_iteration()?;
            let cider_score = self.evaluate_validation()?;
            let iteration = self.state.iteration;
            let record = IterationRecord {
                iter: iteration,
                cider: cider_score,
                new_pseudo: stats.new_pseudo,
                pool_size: stats.pool_size,
                loss: stats.loss,
            };
            if let Some(w) = writer.as_mut() {
                w.history_row(&record)?;
                w.pseudo_rows(iteration, &self.state.pool, &stats.added)?;
                w.caption_rows(iteration, &self.state.captions, &self.val_captions)?;
                w.checkpoint(iteration, &self.state.model, &self.dictionary)?;
            }
            history.push(record);

            let improved = best.as_ref().map_or(true, |(b, _, _)| cider_score > *b);
            if improved {
                best = Some((cider_score, iteration, self.state.model.clone()));
                streak = 0;
            } else {
                streak += 1;
            }
            self.state.best_cider = best.as_ref().expect("just set").0;

            if stats.generated && stats.new_pseudo == 0 {
                log::info!("stopping at iteration {iteration}: no new pseudo sentences");
                break;
            }
            if streak > self.cfg.patience {
                log::info!("stopping at iteration {iteration}: CIDEr has stopped improving");
                break;
            }
            if iteration as usize >= self.cfg.max_iterations {
                log::info!("stopping at iteration {iteration}: iteration budget spent");
                break;
            }
        }
        let (best_cider, best_iteration, model) =
            best.expect("the loop always evaluates at least once");
        if let Some(w) = writer.as_mut() {
            w.manifest(best_iteration, best_cider, history.len())?;
        }
        Ok(RunOutcome { model, best_iteration, best_cider, history })
    }
}

/// Which owned video map an operation targets.
#[derive(Clone, Copy)]
enum Split {
    Train,
    Validation,
}

#[derive(Serialize)]
struct PseudoRow<'a> {
    iter: u32,
    video_id: &'a str,
    origin: &'static str,
    root: String,
    tokens: &'a [String],
}

#[derive(Serialize)]
struct CaptionRow<'a> {
    iter: u32,
    split: &'static str,
    video_id: &'a str,
    caption: String,
}

#[derive(Serialize)]
struct Manifest {
    best_iteration: u32,
    best_checkpoint: String,
    best_cider: f64,
    iterations: usize,
    checkpoints: Vec<String>,
}

/// Incremental writer for the run-directory artifacts.
struct RunWriter {
    dir: PathBuf,
    history: BufWriter<File>,
    pseudo: BufWriter<File>,
    captions: BufWriter<File>,
    checkpoints: Vec<String>,
}

impl RunWriter {
    fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(RunWriter {
            dir: dir.to_path_buf(),
            history: BufWriter::new(File::create(dir.join("history.jsonl"))?),
            pseudo: BufWriter::new(File::create(dir.join("pseudo.jsonl"))?),
            captions: BufWriter::new(File::create(dir.join("captions.jsonl"))?),
            checkpoints: Vec::new(),
        })
    }

    fn history_row(&mut self, record: &IterationRecord) -> Result<()> {
        serde_json::to_writer(&mut self.history, record)
            .map_err(|e| Error::Format(format!("history row: {e}")))?;
        self.history.write_all(b"\n")?;
        self.history.flush()?;
        Ok(())
    }

    fn pseudo_rows(&mut self, iter: u32, pool: &[TrainingPair], added: &[usize]) -> Result<()> {
        for &idx in added {
            let pair = &pool[idx];
            let row = PseudoRow {
                iter,
                video_id: &pair.video_id,
                origin: pair.origin.label(),
                root: pair.tree.root().to_string(),
                tokens: &pair.tokens,
            };
            serde_json::to_writer(&mut self.pseudo, &row)
                .map_err(|e| Error::Format(format!("pseudo row: {e}")))?;
            self.pseudo.write_all(b"\n")?;
        }
        self.pseudo.flush()?;
        Ok(())
    }

    fn caption_rows(
        &mut self,
        iter: u32,
        train: &BTreeMap<String, Vec<String>>,
        validation: &BTreeMap<String, Vec<String>>,
    ) -> Result<()> {
        for (split, map) in [("train", train), ("validation", validation)] {
            for (video_id, tokens) in map {
                let row = CaptionRow { iter, split, video_id, caption: tokens.join(" ") };
                serde_json::to_writer(&mut self.captions, &row)
                    .map_err(|e| Error::Format(format!("caption row: {e}")))?;
                self.captions.write_all(b"\n")?;
            }
        }
        self.captions.flush()?;
        Ok(())
    }

    fn checkpoint(&mut self, iter: u32, model: &CaptionModel, dict: &Dictionary) -> Result<()> {
        let name = format!("checkpoint_iter{iter:02}.wclm");
        write_model_checkpoint(&self.dir.join(&name), &model.to_checkpoint(dict, iter))?;
        self.checkpoints.push(name);
        Ok(())
    }

    fn manifest(&mut self, best_iteration: u32, best_cider: f64, iterations: usize) -> Result<()> {
        let manifest = Manifest {
            best_iteration,
            best_checkpoint: format!("checkpoint_iter{best_iteration:02}.wclm"),
            best_cider,
            iterations,
            checkpoints: self.checkpoints.clone(),
        };
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Format(format!("manifest: {e}")))?;
        std::fs::write(self.dir.join("manifest.json"), text + "\n")?;
        Ok(())
    }
}
