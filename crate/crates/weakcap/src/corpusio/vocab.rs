//! Concept vocabulary, hypernym pruning, and word embeddings.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{extract_phrases, extract_triplets, ParsedSentence, Phrase, Triplet};
use crate::{Error, Result};

/// Per-concept embedding vectors, aligned with the vocabulary lists.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub objects: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub relations: Vec<Vec<f64>>,
}

/// The concept inventory: object (noun) and action (verb) lemmas, relation
/// labels, and one embedding per entry once [`load_embeddings`] has run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConceptVocabulary {
    /// Sorted, deduplicated noun lemmas.
    pub objects: Vec<String>,
    /// Sorted, deduplicated verb lemmas.
    pub actions: Vec<String>,
    /// Sorted, deduplicated relation labels.
    pub relations: Vec<String>,
    pub embeddings: EmbeddingTable,
}

impl ConceptVocabulary {
    /// Vocabulary over explicit inventories; entries are sorted and
    /// deduplicated to uphold the lookup invariants. No embeddings attached.
    pub fn from_parts(
        objects: Vec<String>,
        actions: Vec<String>,
        relations: Vec<String>,
    ) -> Self {
        let normalize = |mut v: Vec<String>| {
            v.sort();
            v.dedup();
            v
        };
        ConceptVocabulary {
            objects: normalize(objects),
            actions: normalize(actions),
            relations: normalize(relations),
            embeddings: EmbeddingTable::default(),
        }
    }

    pub fn object_index(&self, lemma: &str) -> Option<usize> {
        self.objects.binary_search_by(|l| l.as_str().cmp(lemma)).ok()
    }

    pub fn action_index(&self, lemma: &str) -> Option<usize> {
        self.actions.binary_search_by(|l| l.as_str().cmp(lemma)).ok()
    }

    pub fn relation_index(&self, label: &str) -> Option<usize> {
        self.relations.binary_search_by(|l| l.as_str().cmp(label)).ok()
    }

    /// Total number of concepts (objects + actions).
    pub fn concept_count(&self) -> usize {
        self.objects.len() + self.actions.len()
    }

    /// True once every concept and relation has an embedding of equal width.
    pub fn has_embeddings(&self) -> bool {
        self.embeddings.dim > 0
            && self.embeddings.objects.len() == self.objects.len()
            && self.embeddings.actions.len() == self.actions.len()
            && self.embeddings.relations.len() == self.relations.len()
    }

    /// Validates and attaches a loaded embedding table.
    pub fn attach_embeddings(&mut self, table: EmbeddingTable) -> Result<()> {
        if table.objects.len() != self.objects.len()
            || table.actions.len() != self.actions.len()
            || table.relations.len() != self.relations.len()
        {
            return Err(Error::Shape("embedding table does not cover the vocabulary".into()));
        }
        for v in table.objects.iter().chain(&table.actions).chain(&table.relations) {
            if v.len() != table.dim {
                return Err(Error::Shape(format!(
                    "embedding width {} differs from declared {}",
                    v.len(),
                    table.dim
                )));
            }
        }
        self.embeddings = table;
        Ok(())
    }

    /// Embedding of a phrase: the concept vector for single lemmas, the mean
    /// of the noun and verb vectors for noun-verb pairs. Unknown lemmas map to
    /// the all-zero vector with a warning.
    pub fn phrase_embedding(&self, phrase: &Phrase) -> Vec<f64> {
        let dim = self.embeddings.dim;
        let lookup = |lemma: &str, list: &[String], vecs: &[Vec<f64>]| -> Vec<f64> {
            match list.binary_search_by(|l| l.as_str().cmp(lemma)) {
                Ok(i) => vecs[i].clone(),
                Err(_) => {
                    log::warn!("no embedding for lemma {lemma:?}; using zeros");
                    vec![0.0; dim]
                }
            }
        };
        match phrase {
            Phrase::Noun(n) => lookup(n, &self.objects, &self.embeddings.objects),
            Phrase::Verb(v) => lookup(v, &self.actions, &self.embeddings.actions),
            Phrase::NounVerb(n, v) => {
                let a = lookup(n, &self.objects, &self.embeddings.objects);
                let b = lookup(v, &self.actions, &self.embeddings.actions);
                a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect()
            }
        }
    }

    /// Embedding of a relation label; unknown labels map to zeros.
    pub fn relation_embedding(&self, label: &str) -> Vec<f64> {
        match self.relation_index(label) {
            Some(i) => self.embeddings.relations[i].clone(),
            None => {
                log::warn!("no embedding for relation {label:?}; using zeros");
                vec![0.0; self.embeddings.dim]
            }
        }
    }
}

/// Builds the vocabulary from parsed sentences, pruning every lemma that the
/// hypernym list marks as a generalization of another lemma present in the
/// raw vocabulary. Pairs are `(hypernym, hyponym)`.
pub fn build_vocabulary(
    sentences: &[ParsedSentence],
    hypernyms: &[(String, String)],
) -> Result<ConceptVocabulary> {
    if sentences.is_empty() {
        return Err(Error::Vocab("empty corpus".into()));
    }
    let mut objects: HashSet<String> = HashSet::new();
    let mut actions: HashSet<String> = HashSet::new();
    let mut relations: HashSet<String> = HashSet::new();
    for s in sentences {
        for p in extract_phrases(s) {
            match p {
                Phrase::Noun(n) => {
                    objects.insert(n);
                }
                Phrase::Verb(v) => {
                    actions.insert(v);
                }
                Phrase::NounVerb(..) => unreachable!("extract_phrases yields single lemmas"),
            }
        }
        for t in extract_triplets(s) {
            relations.insert(t.relation);
        }
    }

    let prune = |raw: &HashSet<String>| -> Vec<String> {
        let removed: HashSet<&String> = hypernyms
            .iter()
            .filter(|(hyper, hypo)| raw.contains(hyper) && raw.contains(hypo))
            .map(|(hyper, _)| hyper)
            .collect();
        let mut kept: Vec<String> =
            raw.iter().filter(|l| !removed.contains(l)).cloned().collect();
        kept.sort();
        kept
    };

    let mut relations: Vec<String> = relations.into_iter().collect();
    relations.sort();
    Ok(ConceptVocabulary {
        objects: prune(&objects),
        actions: prune(&actions),
        relations,
        embeddings: EmbeddingTable::default(),
    })
}

/// Words that were looked up but absent from the embedding file.
#[derive(Debug, Default)]
pub struct EmbeddingReport {
    pub missing: Vec<String>,
}

/// Loads whitespace-separated word vectors (`word v1 .. vh` per line) and
/// assembles the table for `vocab`. Multiword lemmas average their word
/// vectors; missing words contribute the all-zero vector and are reported.
pub fn load_embeddings(
    path: &Path,
    vocab: &ConceptVocabulary,
) -> Result<(EmbeddingTable, EmbeddingReport)> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Ingest(format!("cannot open {}: {e}", path.display())))?;
    let reader = std::io::BufReader::new(file);
    let mut vectors: HashMap<String, Vec<f64>> = HashMap::new();
    let mut dim = 0usize;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Ingest(format!("read error: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let word = parts
            .next()
            .ok_or_else(|| Error::Ingest(format!("line {}: empty", lineno + 1)))?
            .to_string();
        let vec: Vec<f64> = parts
            .map(|p| {
                p.parse::<f64>()
                    .map_err(|_| Error::Ingest(format!("line {}: bad float {p:?}", lineno + 1)))
            })
            .collect::<Result<_>>()?;
        if dim == 0 {
            dim = vec.len();
            if dim == 0 {
                return Err(Error::Ingest(format!("line {}: vector has no values", lineno + 1)));
            }
        } else if vec.len() != dim {
            return Err(Error::Ingest(format!(
                "line {}: width {} differs from {}",
                lineno + 1,
                vec.len(),
                dim
            )));
        }
        vectors.insert(word, vec);
    }
    if dim == 0 {
        return Err(Error::Ingest(format!("{} contains no vectors", path.display())));
    }

    let mut report = EmbeddingReport::default();
    let mut missing_seen = HashSet::new();
    let mut lemma_vec = |lemma: &str, report: &mut EmbeddingReport| -> Vec<f64> {
        let mut acc = vec![0.0; dim];
        let mut words = 0usize;
        for word in lemma.split_whitespace() {
            words += 1;
            match vectors.get(word) {
                Some(v) => {
                    for (a, b) in acc.iter_mut().zip(v) {
                        *a += b;
                    }
                }
                None => {
                    if missing_seen.insert(word.to_string()) {
                        report.missing.push(word.to_string());
                    }
                }
            }
        }
        if words > 1 {
            for a in &mut acc {
                *a /= words as f64;
            }
        }
        acc
    };

    let table = EmbeddingTable {
        dim,
        objects: vocab.objects.iter().map(|l| lemma_vec(l, &mut report)).collect(),
        actions: vocab.actions.iter().map(|l| lemma_vec(l, &mut report)).collect(),
        relations: vocab.relations.iter().map(|l| lemma_vec(l, &mut report)).collect(),
    };
    report.missing.sort();
    Ok((table, report))
}

/// Reads a hypernym list: one `hypernym<TAB>hyponym` pair per line (any
/// whitespace separates the two lemmas). Blank lines and lines starting with
/// `#` are skipped.
pub fn read_hypernym_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Ingest(format!("cannot open {}: {e}", path.display())))?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| {
            Error::Ingest(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(Error::Ingest(format!(
                "{}:{}: expected 'hypernym<TAB>hyponym', got {} fields",
                path.display(),
                lineno + 1,
                fields.len()
            )));
        }
        out.push((fields[0].to_string(), fields[1].to_string()));
    }
    Ok(out)
}

/// Writes triplets as one JSON object per line.
pub fn write_triplets_jsonl(path: &Path, triplets: &[Triplet]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for t in triplets {
        serde_json::to_writer(&mut w, t).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads triplets written by [`write_triplets_jsonl`].
pub fn read_triplets_jsonl(path: &Path) -> Result<Vec<Triplet>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Ingest(format!("cannot open {}: {e}", path.display())))?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Ingest(format!("read error: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Triplet = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
        out.push(t);
    }
    Ok(out)
}
