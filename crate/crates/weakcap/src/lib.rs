//! Weakly supervised video captioning.
//!
//! The crate trains a captioning model from videos that carry a single weak
//! concept label each (one noun or one verb). It grounds concepts in video
//! regions with an attention model, composes grounded concepts into dependency
//! trees using link prediction over a knowledge graph of rotation embeddings,
//! linearizes the trees into pseudo sentences, and fine-tunes a graph-encoder +
//! two-layer recurrent decoder on the growing pseudo-sentence pool until the
//! refinement loop converges.
//!
//! Modules mirror the pipeline stages:
//!
//! * [`corpusio`] — CoNLL-U corpora, phrase/triplet extraction, vocabulary,
//!   word embeddings.
//! * [`kglink`] — rotation knowledge-graph embeddings, gated head composition,
//!   training and link prediction.
//! * [`grounding`] — region attention, concept classifiers, indicator vectors.
//! * [`treespan`] — root generation, greedy tree spanning, linearization.
//! * [`captioner`] — graph encoder, recurrent decoder, beam search, losses.
//! * [`refine`] — the iterative self-training loop over the pseudo pool.
//! * [`metrics`] — BLEU-4 / ROUGE-L / CIDEr and the evaluation report.
//! * [`cli`] — the `weakcap` command-line front end.

pub(crate) mod binio;
pub mod captioner;
pub mod cli;
pub mod config;
pub mod corpusio;
pub mod error;
pub mod grounding;
pub mod kglink;
pub mod metrics;
pub mod num;
pub mod opt;
pub mod refine;
pub mod synth;
pub mod treespan;

/// Scalar type every trained model is instantiated at. The numeric kernels in
/// [`num`] are generic over [`num::Scalar`]; training, checkpoints, and the
/// acceptance gradient checks all run in `f64`.
pub type Real = f64;

/// Dense matrix/vector of [`Real`] (the default scalar of [`num::Tensor`]).
pub type Tensor = num::Tensor<Real>;

/// Complex vector of [`Real`] parts (the default scalar of
/// [`kglink::ComplexVec`]).
pub type ComplexVec = kglink::ComplexVec<Real>;

pub use error::{Error, Result};
