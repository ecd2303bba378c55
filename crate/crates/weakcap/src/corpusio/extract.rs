//! Phrase and triplet extraction from dependency parses.
//!
//! Phrases: every NOUN/PROPN lemma becomes a noun phrase, every VERB lemma a
//! verb phrase. Triplets: within each clause, a verb with a subject forms a
//! noun-verb head; its direct objects attach under the `obj` relation and its
//! case-marked obliques under the preposition's lemma. Clauses are split at
//! `ccomp`/`advcl`/`conj`/`parataxis` boundaries and processed independently.

use super::{ParsedSentence, Phrase, TokenRow, Triplet};

/// Dependency relations that open a new clause.
pub const CLAUSE_DEPRELS: &[&str] = &["ccomp", "advcl", "conj", "parataxis"];

fn is_nounish(tok: &TokenRow) -> bool {
    tok.upos == "NOUN" || tok.upos == "PROPN"
}

fn is_verb(tok: &TokenRow) -> bool {
    tok.upos == "VERB"
}

fn deprel_base(deprel: &str) -> &str {
    deprel.split(':').next().unwrap_or(deprel)
}

/// All noun and verb phrases of a sentence, first occurrence order, deduplicated.
pub fn extract_phrases(sentence: &ParsedSentence) -> Vec<Phrase> {
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for tok in &sentence.tokens {
        if tok.lemma.is_empty() {
            continue;
        }
        let phrase = if is_nounish(tok) {
            Phrase::Noun(tok.lemma.clone())
        } else if is_verb(tok) {
            Phrase::Verb(tok.lemma.clone())
        } else {
            continue;
        };
        if seen.insert(phrase.clone()) {
            out.push(phrase);
        }
    }
    out
}

/// Assigns each token the index of the clause it belongs to. A token whose
/// deprel opens a clause roots a new segment; every other token inherits the
/// segment of its nearest segment-rooting ancestor.
fn clause_of(sentence: &ParsedSentence) -> Vec<usize> {
    let n = sentence.tokens.len();
    let mut clause = vec![usize::MAX; n + 1];
    let mut segments = 0usize;
    for tok in &sentence.tokens {
        if tok.head == 0 || CLAUSE_DEPRELS.contains(&deprel_base(&tok.deprel)) {
            clause[tok.index] = segments;
            segments += 1;
        }
    }
    // Every other token inherits from its nearest resolved ancestor; the walk
    // terminates because the sentence root always opens a segment.
    for tok in &sentence.tokens {
        let mut chain = Vec::new();
        let mut cur = tok.index;
        while clause[cur] == usize::MAX {
            chain.push(cur);
            cur = sentence.tokens[cur - 1].head;
        }
        for &i in &chain {
            clause[i] = clause[cur];
        }
    }
    clause
}

/// Dependency triplets of a sentence, clause by clause, deduplicated.
pub fn extract_triplets(sentence: &ParsedSentence) -> Vec<Triplet> {
    let clause = clause_of(sentence);
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut push = |t: Triplet, out: &mut Vec<Triplet>| {
        if t.head.contains_lemma(match &t.tail {
            Phrase::Noun(l) | Phrase::Verb(l) => l,
            Phrase::NounVerb(n, _) => n,
        }) {
            return; // degenerate self-link
        }
        if seen.insert(t.clone()) {
            out.push(t);
        }
    };

    for tok in &sentence.tokens {
        if !is_verb(tok) {
            continue;
        }
        let verb_clause = clause[tok.index];

        // Subject, if any, upgrades the head to a noun-verb phrase.
        let subject = sentence
            .children(tok.index)
            .filter(|c| clause[c.index] == verb_clause)
            .find(|c| {
                let base = deprel_base(&c.deprel);
                (base == "nsubj" || base == "csubj") && is_nounish(c)
            })
            .map(|c| c.lemma.clone());
        let head = match &subject {
            Some(s) => Phrase::NounVerb(s.clone(), tok.lemma.clone()),
            None => Phrase::Verb(tok.lemma.clone()),
        };

        for child in sentence.children(tok.index) {
            if clause[child.index] != verb_clause {
                continue;
            }
            let base = deprel_base(&child.deprel);
            if (base == "obj" || base == "dobj") && is_nounish(child) {
                push(Triplet::new(head.clone(), "obj", Phrase::Noun(child.lemma.clone())), &mut out);
            } else if (base == "obl" || base == "nmod") && is_nounish(child) {
                if let Some(prep) = case_marker(sentence, child) {
                    push(Triplet::new(head.clone(), prep, Phrase::Noun(child.lemma.clone())), &mut out);
                }
            } else if child.upos == "ADP" && base == "prep" {
                // Pre-UD style: preposition node with a pobj child.
                for grand in sentence.children(child.index) {
                    if deprel_base(&grand.deprel) == "pobj" && is_nounish(grand) {
                        push(
                            Triplet::new(
                                head.clone(),
                                child.lemma.clone(),
                                Phrase::Noun(grand.lemma.clone()),
                            ),
                            &mut out,
                        );
                    }
                }
            }
        }
    }

    // Noun-attached prepositional modifiers: (bike, on, street).
    for tok in &sentence.tokens {
        if !is_nounish(tok) {
            continue;
        }
        for child in sentence.children(tok.index) {
            if clause[child.index] != clause[tok.index] {
                continue;
            }
            if deprel_base(&child.deprel) == "nmod" && is_nounish(child) {
                if let Some(prep) = case_marker(sentence, child) {
                    push(
                        Triplet::new(
                            Phrase::Noun(tok.lemma.clone()),
                            prep,
                            Phrase::Noun(child.lemma.clone()),
                        ),
                        &mut out,
                    );
                }
            }
        }
    }
    out
}

fn case_marker(sentence: &ParsedSentence, tok: &TokenRow) -> Option<String> {
    sentence
        .children(tok.index)
        .find(|c| deprel_base(&c.deprel) == "case" && c.upos == "ADP")
        .map(|c| c.lemma.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpusio::parse_conllu;

    fn sentence(text: &str) -> ParsedSentence {
        let report = parse_conllu(text);
        assert_eq!(report.skipped, 0, "{:?}", report.skip_reasons);
        report.sentences.into_iter().next().unwrap()
    }

    #[test]
    fn subject_only_sentence_yields_phrases_but_no_triplets() {
        // "The cat jumps": a subject link alone gives no consumable tail.
        let s = sentence(
            "1\tThe\tthe\tDET\t_\t_\t2\tdet\t_\t_\n\
             2\tcat\tcat\tNOUN\t_\t_\t3\tnsubj\t_\t_\n\
             3\tjumps\tjump\tVERB\t_\t_\t0\troot\t_\t_\n",
        );
        assert_eq!(
            extract_phrases(&s),
            vec![Phrase::Noun("cat".into()), Phrase::Verb("jump".into())]
        );
        assert!(extract_triplets(&s).is_empty());
    }

    #[test]
    fn object_and_oblique_triplets() {
        // "A man rides a bike on the street."
        let s = sentence(
            "1\tA\ta\tDET\t_\t_\t2\tdet\t_\t_\n\
             2\tman\tman\tNOUN\t_\t_\t3\tnsubj\t_\t_\n\
             3\trides\tride\tVERB\t_\t_\t0\troot\t_\t_\n\
             4\ta\ta\tDET\t_\t_\t5\tdet\t_\t_\n\
             5\tbike\tbike\tNOUN\t_\t_\t3\tobj\t_\t_\n\
             6\ton\ton\tADP\t_\t_\t8\tcase\t_\t_\n\
             7\tthe\tthe\tDET\t_\t_\t8\tdet\t_\t_\n\
             8\tstreet\tstreet\tNOUN\t_\t_\t3\tobl\t_\t_\n",
        );
        let head = Phrase::NounVerb("man".into(), "ride".into());
        assert_eq!(
            extract_triplets(&s),
            vec![
                Triplet::new(head.clone(), "obj", Phrase::Noun("bike".into())),
                Triplet::new(head, "on", Phrase::Noun("street".into())),
            ]
        );
    }

    #[test]
    fn clauses_are_split_before_extraction() {
        // "A man rides and a girl sings a song": the conj clause keeps its own
        // subject; the first verb must not swallow the second clause's object.
        let s = sentence(
            "1\tman\tman\tNOUN\t_\t_\t2\tnsubj\t_\t_\n\
             2\trides\tride\tVERB\t_\t_\t0\troot\t_\t_\n\
             3\tand\tand\tCCONJ\t_\t_\t5\tcc\t_\t_\n\
             4\tgirl\tgirl\tNOUN\t_\t_\t5\tnsubj\t_\t_\n\
             5\tsings\tsing\tVERB\t_\t_\t2\tconj\t_\t_\n\
             6\tsong\tsong\tNOUN\t_\t_\t5\tobj\t_\t_\n",
        );
        assert_eq!(
            extract_triplets(&s),
            vec![Triplet::new(
                Phrase::NounVerb("girl".into(), "sing".into()),
                "obj",
                Phrase::Noun("song".into())
            )]
        );
    }

    #[test]
    fn triplet_lemmas_are_a_subset_of_phrase_lemmas() {
        let s = sentence(
            "1\tman\tman\tNOUN\t_\t_\t2\tnsubj\t_\t_\n\
             2\trides\tride\tVERB\t_\t_\t0\troot\t_\t_\n\
             3\tbike\tbike\tNOUN\t_\t_\t2\tobj\t_\t_\n",
        );
        let phrase_lemmas: Vec<String> = extract_phrases(&s)
            .iter()
            .flat_map(|p| p.tokens().into_iter().map(str::to_owned))
            .collect();
        for t in extract_triplets(&s) {
            for lemma in t.head.tokens().into_iter().chain(t.tail.tokens()) {
                assert!(phrase_lemmas.iter().any(|l| l == lemma));
            }
        }
    }
}
