//! Sentence corpora and the concept vocabulary.
//!
//! The corpus arrives as parsed CoNLL-U; this module reads it, extracts noun /
//! verb / noun-verb phrases and dependency triplets, builds the concept
//! vocabulary (with hypernym pruning), and loads word embeddings for every
//! concept and relation.

mod conllu;
mod extract;
mod vocab;

pub use conllu::{parse_conllu, read_conllu_file, serialize_conllu, ParseReport, ParsedSentence, TokenRow};
pub use extract::{extract_phrases, extract_triplets, CLAUSE_DEPRELS};
pub use vocab::{
    build_vocabulary, load_embeddings, read_hypernym_pairs, read_triplets_jsonl,
    write_triplets_jsonl, ConceptVocabulary, EmbeddingReport, EmbeddingTable,
};

use serde::{Deserialize, Serialize};

/// A concept phrase: a noun, a verb, or a noun-verb pair (subject + action).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phrase {
    Noun(String),
    Verb(String),
    NounVerb(String, String),
}

impl Phrase {
    /// Noun lemma, if the phrase has one.
    pub fn noun(&self) -> Option<&str> {
        match self {
            Phrase::Noun(n) | Phrase::NounVerb(n, _) => Some(n),
            Phrase::Verb(_) => None,
        }
    }

    /// Verb lemma, if the phrase has one.
    pub fn verb(&self) -> Option<&str> {
        match self {
            Phrase::Verb(v) | Phrase::NounVerb(_, v) => Some(v),
            Phrase::Noun(_) => None,
        }
    }

    /// Surface tokens in canonical order (noun before verb).
    pub fn tokens(&self) -> Vec<&str> {
        match self {
            Phrase::Noun(n) => vec![n.as_str()],
            Phrase::Verb(v) => vec![v.as_str()],
            Phrase::NounVerb(n, v) => vec![n.as_str(), v.as_str()],
        }
    }

    /// Sort key `(noun lemma, verb lemma)` with absent lemmas as "".
    pub fn sort_key(&self) -> (String, String) {
        (self.noun().unwrap_or("").to_string(), self.verb().unwrap_or("").to_string())
    }

    /// True when `lemma` occurs in this phrase.
    pub fn contains_lemma(&self, lemma: &str) -> bool {
        self.noun() == Some(lemma) || self.verb() == Some(lemma)
    }
}

impl std::fmt::Display for Phrase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.tokens().join(" "))
    }
}

/// A directed labelled link between two phrases.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub head: Phrase,
    pub relation: String,
    pub tail: Phrase,
}

impl Triplet {
    pub fn new(head: Phrase, relation: impl Into<String>, tail: Phrase) -> Self {
        Triplet { head, relation: relation.into(), tail }
    }
}
