//! CoNLL-U reading, validation, and serialization.
//!
//! Sentences are blocks of 10-column tab-separated token lines separated by
//! blank lines; `#` lines are comments (`# sent_id = ...` names the sentence).
//! Multiword-token ranges (`1-2`) and empty nodes (`1.1`) are not tree nodes
//! and are dropped. A sentence that fails structural validation is skipped and
//! counted, never fatal.

use std::path::Path;

use crate::{Error, Result};

/// One syntactic token: the subset of CoNLL-U columns the pipeline consumes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenRow {
    /// 1-based position in the sentence.
    pub index: usize,
    pub surface: String,
    pub lemma: String,
    /// Universal POS tag (NOUN, VERB, ADP, ...).
    pub upos: String,
    /// Index of the syntactic head; 0 marks the root.
    pub head: usize,
    pub deprel: String,
}

/// A validated dependency parse.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedSentence {
    pub source_id: String,
    pub tokens: Vec<TokenRow>,
}

impl ParsedSentence {
    /// Checks the single-root / in-range / acyclic tree invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        if n == 0 {
            return Err(Error::Ingest("empty sentence".into()));
        }
        let mut roots = 0;
        for (pos, tok) in self.tokens.iter().enumerate() {
            if tok.index != pos + 1 {
                return Err(Error::Ingest(format!(
                    "token index {} out of sequence (expected {})",
                    tok.index,
                    pos + 1
                )));
            }
            if tok.head > n {
                return Err(Error::Ingest(format!("head {} out of range", tok.head)));
            }
            if tok.head == tok.index {
                return Err(Error::Ingest(format!("token {} is its own head", tok.index)));
            }
            if tok.head == 0 {
                roots += 1;
            }
        }
        if roots != 1 {
            return Err(Error::Ingest(format!("expected exactly one root, found {roots}")));
        }
        // Every token must reach the root without revisiting a node.
        for tok in &self.tokens {
            let mut cur = tok.head;
            let mut steps = 0;
            while cur != 0 {
                cur = self.tokens[cur - 1].head;
                steps += 1;
                if steps > n {
                    return Err(Error::Ingest(format!("cycle through token {}", tok.index)));
                }
            }
        }
        Ok(())
    }

    /// Children of token `index` (1-based), in sentence order.
    pub fn children(&self, index: usize) -> impl Iterator<Item = &TokenRow> {
        self.tokens.iter().filter(move |t| t.head == index)
    }
}

/// Outcome of parsing a document: valid sentences plus a skip report.
#[derive(Debug, Default)]
pub struct ParseReport {
    pub sentences: Vec<ParsedSentence>,
    pub skipped: usize,
    /// One human-readable reason per skipped sentence.
    pub skip_reasons: Vec<String>,
}

/// Parses a whole CoNLL-U document. Malformed sentences are skipped and
/// recorded in the report.
pub fn parse_conllu(text: &str) -> ParseReport {
    let mut report = ParseReport::default();
    let mut block: Vec<&str> = Vec::new();
    let mut comments: Vec<&str> = Vec::new();
    let mut ordinal = 0usize;

    let mut flush = |block: &mut Vec<&str>, comments: &mut Vec<&str>, report: &mut ParseReport| {
        if block.is_empty() {
            comments.clear();
            return;
        }
        ordinal += 1;
        let source_id = comments
            .iter()
            .find_map(|c| {
                let body = c.trim_start_matches('#').trim();
                body.strip_prefix("sent_id").map(|rest| rest.trim_start_matches([' ', '=']).trim().to_string())
            })
            .unwrap_or_else(|| format!("s{ordinal:05}"));
        match parse_sentence(block, source_id) {
            Ok(sentence) => report.sentences.push(sentence),
            Err(e) => {
                report.skipped += 1;
                report.skip_reasons.push(format!("sentence {ordinal}: {e}"));
            }
        }
        block.clear();
        comments.clear();
    };

    for line in text.lines() {
        let trimmed = line.trim_end_matches('\r');
        if trimmed.is_empty() {
            flush(&mut block, &mut comments, &mut report);
        } else if trimmed.starts_with('#') {
            comments.push(trimmed);
        } else {
            block.push(trimmed);
        }
    }
    flush(&mut block, &mut comments, &mut report);
    report
}

fn parse_sentence(lines: &[&str], source_id: String) -> Result<ParsedSentence> {
    let mut tokens = Vec::new();
    for line in lines {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 10 {
            return Err(Error::Ingest(format!("expected 10 columns, found {}", cols.len())));
        }
        // Multiword ranges and empty nodes are not part of the tree.
        if cols[0].contains('-') || cols[0].contains('.') {
            continue;
        }
        let index: usize =
            cols[0].parse().map_err(|_| Error::Ingest(format!("bad token id {:?}", cols[0])))?;
        let head: usize =
            cols[6].parse().map_err(|_| Error::Ingest(format!("bad head {:?}", cols[6])))?;
        let lemma = if cols[2] == "_" || cols[2].is_empty() { cols[1] } else { cols[2] };
        tokens.push(TokenRow {
            index,
            surface: cols[1].to_string(),
            lemma: lemma.to_lowercase(),
            upos: cols[3].to_string(),
            head,
            deprel: cols[7].to_string(),
        });
    }
    let sentence = ParsedSentence { source_id, tokens };
    sentence.validate()?;
    Ok(sentence)
}

/// Reads a CoNLL-U file, requiring valid UTF-8.
pub fn read_conllu_file(path: &Path) -> Result<ParseReport> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Ingest(format!("cannot read {}: {e}", path.display())))?;
    let text = String::from_utf8(bytes)
        .map_err(|e| Error::Ingest(format!("{} is not UTF-8: {e}", path.display())))?;
    Ok(parse_conllu(&text))
}

/// Serializes sentences back to CoNLL-U. Columns the pipeline does not model
/// are written as `_`; `parse_conllu(serialize_conllu(s))` reproduces `s`.
pub fn serialize_conllu(sentences: &[ParsedSentence]) -> String {
    let mut out = String::new();
    for s in sentences {
        out.push_str(&format!("# sent_id = {}\n", s.source_id));
        for t in &s.tokens {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t_\t_\t{}\t{}\t_\t_\n",
                t.index, t.surface, t.lemma, t.upos, t.head, t.deprel
            ));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# sent_id = demo-1
1\tA\ta\tDET\t_\t_\t2\tdet\t_\t_
2\tman\tman\tNOUN\t_\t_\t3\tnsubj\t_\t_
3\trides\tride\tVERB\t_\t_\t0\troot\t_\t_
4\ta\ta\tDET\t_\t_\t5\tdet\t_\t_
5\tbike\tbike\tNOUN\t_\t_\t3\tobj\t_\t_

1\tbroken\tbroken\tADJ\t_\t_\t9\tamod\t_\t_
";

    #[test]
    fn parses_valid_and_skips_invalid() {
        let report = parse_conllu(SAMPLE);
        assert_eq!(report.sentences.len(), 1);
        assert_eq!(report.skipped, 1);
        let s = &report.sentences[0];
        assert_eq!(s.source_id, "demo-1");
        assert_eq!(s.tokens.len(), 5);
        assert_eq!(s.tokens[2].lemma, "ride");
        assert_eq!(s.tokens[2].head, 0);
    }

    #[test]
    fn rejects_cycles_and_multi_roots() {
        // Head cycle of length 2 around tokens 1 and 2.
        let cyc = "1\ta\ta\tNOUN\t_\t_\t2\tdep\t_\t_\n2\tb\tb\tNOUN\t_\t_\t1\tdep\t_\t_\n";
        let report = parse_conllu(cyc);
        assert_eq!(report.sentences.len(), 0);
        assert_eq!(report.skipped, 1);

        let two_roots =
            "1\ta\ta\tNOUN\t_\t_\t0\troot\t_\t_\n2\tb\tb\tNOUN\t_\t_\t0\troot\t_\t_\n";
        assert_eq!(parse_conllu(two_roots).skipped, 1);
    }

    #[test]
    fn drops_multiword_ranges_and_empty_nodes() {
        let text = "\
1-2\tdel\t_\t_\t_\t_\t_\t_\t_\t_
1\tde\tde\tADP\t_\t_\t2\tcase\t_\t_
2\tel\tel\tNOUN\t_\t_\t0\troot\t_\t_
2.1\tghost\tghost\tNOUN\t_\t_\t_\t_\t_\t_
";
        // The empty-node line has a non-numeric head but is dropped before head
        // parsing, so the sentence stays valid.
        let report = parse_conllu(text);
        assert_eq!(report.skipped, 0);
        assert_eq!(report.sentences[0].tokens.len(), 2);
    }

    #[test]
    fn serialize_round_trips() {
        let report = parse_conllu(SAMPLE);
        let text = serialize_conllu(&report.sentences);
        let again = parse_conllu(&text);
        assert_eq!(again.sentences, report.sentences);
        assert_eq!(again.skipped, 0);
    }
}
