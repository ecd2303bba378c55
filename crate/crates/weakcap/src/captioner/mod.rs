//! Tree-conditioned caption generation: a one-round graph encoder turns a
//! dependency tree into relation-aware edge features, and a two-layer
//! recurrent decoder with additive attention over those features emits words.

mod checkpoint;
mod decoder;
mod gcn;

use std::collections::HashMap;

use rand::Rng;

use crate::num::ParamSet;
use crate::{Real, Tensor};

pub use checkpoint::{read_model_checkpoint, write_model_checkpoint, ModelCheckpoint};
pub use decoder::{
    beam_decode, caption_loss, caption_loss_gradient, decoder_step, greedy_decode, CaptionBatch,
    CaptionExample, CaptionLossOutcome, DecodeConfig, Decoded, DecoderState, StepOutput,
};
pub use gcn::{encode_tree, encode_tree_backward, relation_features, TreeEncoding};

/// Reserved id of the sentence-start token.
pub const BEGIN_TOKEN: usize = 0;
/// Reserved id of the sentence-end token.
pub const END_TOKEN: usize = 1;
/// Reserved id standing in for any out-of-dictionary word.
pub const UNK_TOKEN: usize = 2;

const BEGIN_TEXT: &str = "<begin>";
const END_TEXT: &str = "<end>";
const UNK_TEXT: &str = "<unk>";

/// The caption dictionary: begin/end/unknown markers at fixed ids, followed by
/// the sorted word list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dictionary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Dictionary {
    /// Builds a dictionary over `words` (sorted and deduplicated; entries
    /// colliding with the reserved markers are dropped).
    pub fn new(words: impl IntoIterator<Item = String>) -> Self {
        let mut list: Vec<String> = words
            .into_iter()
            .filter(|w| w != BEGIN_TEXT && w != END_TEXT && w != UNK_TEXT)
            .collect();
        list.sort();
        list.dedup();
        let mut tokens = vec![BEGIN_TEXT.to_string(), END_TEXT.to_string(), UNK_TEXT.to_string()];
        tokens.extend(list);
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Dictionary { tokens, index }
    }

    /// Number of entries including the three reserved markers.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the three markers are always present
    }

    /// Id of `token`, if present.
    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, falling back to the unknown marker.
    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK_TOKEN)
    }

    /// Surface form of `id`.
    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// All entries in id order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Renders decoded ids as a space-joined sentence.
    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }
}

/// Trainable weights of the one-round tree encoder: a role matrix per message
/// direction plus a shared bias. All matrices are square over the concept
/// embedding width.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnParams {
    /// Self-loop map applied to every node's own embedding.
    pub w_self: Tensor,
    /// Map applied to the parent's embedding when messaging the child.
    pub w_parent: Tensor,
    /// Map applied to the child's embedding when messaging the parent.
    pub w_child: Tensor,
    /// Map applied to the edge relation's embedding (sent to both endpoints).
    pub w_rel: Tensor,
    /// Per-node additive bias.
    pub bias: Tensor,
}

impl GcnParams {
    /// All-zero parameters over embedding width `dim`.
    pub fn zeros(dim: usize) -> Self {
        GcnParams {
            w_self: Tensor::zeros(dim, dim),
            w_parent: Tensor::zeros(dim, dim),
            w_child: Tensor::zeros(dim, dim),
            w_rel: Tensor::zeros(dim, dim),
            bias: Tensor::zeros(dim, 1),
        }
    }

    /// Uniform init of the role matrices in `[-scale, scale]`; bias zero.
    pub fn init_uniform(dim: usize, scale: Real, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(dim);
        for t in [&mut p.w_self, &mut p.w_parent, &mut p.w_child, &mut p.w_rel] {
            for v in &mut t.data {
                *v = rng.gen_range(-scale..scale);
            }
        }
        p
    }

    /// Embedding width the parameters operate on.
    pub fn dim(&self) -> usize {
        self.bias.rows()
    }

    /// Width of one relation-aware feature: updated head, raw relation
    /// embedding, updated tail.
    pub fn feature_dim(&self) -> usize {
        3 * self.dim()
    }
}

impl ParamSet for GcnParams {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.w_self, &self.w_parent, &self.w_child, &self.w_rel, &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w_self,
            &mut self.w_parent,
            &mut self.w_child,
            &mut self.w_rel,
            &mut self.bias,
        ]
    }
}

/// Shape descriptor for the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderDims {
    /// Width of the global video feature `x`.
    pub global: usize,
    /// Width of one relation-aware feature.
    pub feature: usize,
    /// Width of a word embedding.
    pub embed: usize,
    /// Hidden width of both recurrent layers.
    pub hidden: usize,
    /// Width of the additive-attention projection.
    pub attention: usize,
    /// Dictionary size.
    pub vocab: usize,
}

impl DecoderDims {
    /// Input width of the first (attention) recurrent layer:
    /// `[x; prev word embedding; previous language-layer hidden]`.
    pub fn input1(&self) -> usize {
        self.global + self.embed + self.hidden
    }

    /// Input width of the second (language) recurrent layer:
    /// `[attended feature; attention-layer hidden]`.
    pub fn input2(&self) -> usize {
        self.feature + self.hidden
    }
}

/// Trainable weights of the two-layer recurrent decoder. Each layer is a
/// gated memory cell with input/forget/output gates; gate pre-activations are
/// stored stacked as rows `[input; forget; output; candidate]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub dims: DecoderDims,
    /// Attention-layer input weights, `4*hidden x input1`.
    pub w1: Tensor,
    /// Attention-layer recurrent weights, `4*hidden x hidden`.
    pub u1: Tensor,
    /// Attention-layer gate bias, `4*hidden x 1`.
    pub b1: Tensor,
    /// Language-layer input weights, `4*hidden x input2`.
    pub w2: Tensor,
    /// Language-layer recurrent weights, `4*hidden x hidden`.
    pub u2: Tensor,
    /// Language-layer gate bias, `4*hidden x 1`.
    pub b2: Tensor,
    /// Attention projection of a relation-aware feature, `attention x feature`.
    pub att_feature: Tensor,
    /// Attention projection of the attention-layer hidden, `attention x hidden`.
    pub att_hidden: Tensor,
    /// Attention projection bias, `attention x 1`.
    pub att_bias: Tensor,
    /// Attention scoring vector, `attention x 1`.
    pub att_score: Tensor,
    /// Word embedding table, `vocab x embed`.
    pub embed: Tensor,
    /// Output projection onto the dictionary, `vocab x hidden`.
    pub w_out: Tensor,
    /// Output bias, `vocab x 1`.
    pub b_out: Tensor,
}

impl DecoderParams {
    /// All-zero parameters of the given shape.
    pub fn zeros(dims: DecoderDims) -> Self {
        let h4 = 4 * dims.hidden;
        DecoderParams {
            dims,
            w1: Tensor::zeros(h4, dims.input1()),
            u1: Tensor::zeros(h4, dims.hidden),
            b1: Tensor::zeros(h4, 1),
            w2: Tensor::zeros(h4, dims.input2()),
            u2: Tensor::zeros(h4, dims.hidden),
            b2: Tensor::zeros(h4, 1),
            att_feature: Tensor::zeros(dims.attention, dims.feature),
            att_hidden: Tensor::zeros(dims.attention, dims.hidden),
            att_bias: Tensor::zeros(dims.attention, 1),
            att_score: Tensor::zeros(dims.attention, 1),
            embed: Tensor::zeros(dims.vocab, dims.embed),
            w_out: Tensor::zeros(dims.vocab, dims.hidden),
            b_out: Tensor::zeros(dims.vocab, 1),
        }
    }

    /// Uniform init of all weight matrices (and the scoring vector and word
    /// embeddings) in `[-scale, scale]`; gate and output biases zero.
    pub fn init_uniform(dims: DecoderDims, scale: Real, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(dims);
        for t in [
            &mut p.w1,
            &mut p.u1,
            &mut p.w2,
            &mut p.u2,
            &mut p.att_feature,
            &mut p.att_hidden,
            &mut p.att_score,
            &mut p.embed,
            &mut p.w_out,
        ] {
            for v in &mut t.data {
                *v = rng.gen_range(-scale..scale);
            }
        }
        p
    }
}

impl ParamSet for DecoderParams {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.w1,
            &self.u1,
            &self.b1,
            &self.w2,
            &self.u2,
            &self.b2,
            &self.att_feature,
            &self.att_hidden,
            &self.att_bias,
            &self.att_score,
            &self.embed,
            &self.w_out,
            &self.b_out,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w1,
            &mut self.u1,
            &mut self.b1,
            &mut self.w2,
            &mut self.u2,
            &mut self.b2,
            &mut self.att_feature,
            &mut self.att_hidden,
            &mut self.att_bias,
            &mut self.att_score,
            &mut self.embed,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }
}

/// Encoder and decoder weights trained jointly by the caption loss.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionerParams {
    pub gcn: GcnParams,
    pub decoder: DecoderParams,
}

impl ParamSet for CaptionerParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.gcn.tensors();
        v.extend(self.decoder.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.gcn.tensors_mut();
        v.extend(self.decoder.tensors_mut());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dictionary_reserves_marker_ids_and_sorts_words() {
        let d = Dictionary::new(["ride", "bike", "man", "bike"].map(String::from));
        assert_eq!(d.len(), 6);
        assert_eq!(d.token(BEGIN_TOKEN), "<begin>");
        assert_eq!(d.token(END_TOKEN), "<end>");
        assert_eq!(d.token(UNK_TOKEN), "<unk>");
        assert_eq!(d.id("bike"), Some(3));
        assert_eq!(d.id("man"), Some(4));
        assert_eq!(d.id("ride"), Some(5));
        assert_eq!(d.id("sofa"), None);
        assert_eq!(d.id_or_unk("sofa"), UNK_TOKEN);
        assert_eq!(d.render(&[4, 5, 3]), "man ride bike");
    }

    #[test]
    fn dictionary_drops_colliding_markers() {
        let d = Dictionary::new(["<end>", "cat"].map(String::from));
        assert_eq!(d.len(), 4);
        assert_eq!(d.id("<end>"), Some(END_TOKEN));
        assert_eq!(d.id("cat"), Some(3));
    }

    #[test]
    fn param_sets_expose_every_tensor() {
        let g = GcnParams::zeros(3);
        assert_eq!(g.param_count(), 4 * 9 + 3);
        let dims = DecoderDims {
            global: 2,
            feature: 9,
            embed: 4,
            hidden: 5,
            attention: 6,
            vocab: 7,
        };
        let d = DecoderParams::zeros(dims);
        let expected = 20 * dims.input1()
            + 20 * 5
            + 20
            + 20 * dims.input2()
            + 20 * 5
            + 20
            + 6 * 9
            + 6 * 5
            + 6
            + 6
            + 7 * 4
            + 7 * 5
            + 7;
        assert_eq!(d.param_count(), expected);
        let joint = CaptionerParams { gcn: g, decoder: d };
        assert_eq!(joint.tensors().len(), 5 + 13);
    }
}
