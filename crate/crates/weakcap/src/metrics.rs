//! Self-contained caption evaluation: corpus BLEU-4 (clipped counts, brevity
//! penalty, unsmoothed), ROUGE-L (longest-common-subsequence F-measure,
//! best reference per video), and base CIDEr (tf-idf n-gram cosine, video
//! -level document frequency, scaled by ten).

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Real, Result};

/// Lowercases, splits on whitespace, and strips terminal punctuation
/// (`.,!?;:`) from every token; tokens that were pure punctuation vanish.
pub fn tokenize(line: &str) -> Vec<String> {
    line.to_lowercase()
        .split_whitespace()
        .map(|t| t.trim_end_matches(['.', ',', '!', '?', ';', ':']))
        .filter(|t| !t.is_empty())
        .map(String::from)
        .collect()
}

/// Candidate captions and their references, keyed by video id. Construction
/// guarantees every candidate has at least one reference sentence.
#[derive(Debug, Clone, Default)]
pub struct EvalSet {
    pub candidates: BTreeMap<String, Vec<String>>,
    pub references: BTreeMap<String, Vec<Vec<String>>>,
}

impl EvalSet {
    /// Pairs candidates with references. Reference entries for ids without a
    /// candidate are dropped; candidates without references are an error.
    pub fn new(
        candidates: BTreeMap<String, Vec<String>>,
        mut references: BTreeMap<String, Vec<Vec<String>>>,
    ) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::Eval("no candidate captions to evaluate".into()));
        }
        let missing: Vec<&String> = candidates
            .keys()
            .filter(|id| references.get(*id).map_or(true, |r| r.is_empty()))
            .collect();
        if !missing.is_empty() {
            let list: Vec<&str> = missing.iter().map(|s| s.as_str()).collect();
            return Err(Error::Eval(format!(
                "candidates without references: {}",
                list.join(", ")
            )));
        }
        references.retain(|id, _| candidates.contains_key(id));
        Ok(EvalSet { candidates, references })
    }

    fn refs(&self, id: &str) -> &[Vec<String>] {
        &self.references[id]
    }
}

/// N-gram counts keyed by the `\x1f`-joined token window.
fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<String, f64> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window.join("\u{1f}")).or_insert(0.0) += 1.0;
        }
    }
    counts
}

/// Corpus BLEU-4: geometric mean of the clipped 1..4-gram precisions times
/// the brevity penalty against the closest reference length (ties favor the
/// shorter reference). Any empty precision bucket makes the score zero.
pub fn bleu4(set: &EvalSet) -> Real {
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let mut matched = 0.0;
        let mut total = 0.0;
        for (id, cand) in &set.candidates {
            let cgrams = ngram_counts(cand, n);
            let mut clip: BTreeMap<String, f64> = BTreeMap::new();
            for r in set.refs(id) {
                for (g, c) in ngram_counts(r, n) {
                    let e = clip.entry(g).or_insert(0.0);
                    if c > *e {
                        *e = c;
                    }
                }
            }
            for (g, c) in &cgrams {
                total += c;
                matched += c.min(clip.get(g).copied().unwrap_or(0.0));
            }
        }
        if matched == 0.0 || total == 0.0 {
            return 0.0;
        }
        log_sum += 0.25 * (matched / total).ln();
    }

    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (id, cand) in &set.candidates {
        cand_len += cand.len();
        let closest = set
            .refs(id)
            .iter()
            .map(Vec::len)
            .min_by_key(|&rl| (rl.abs_diff(cand.len()), rl))
            .expect("every candidate has a reference");
        ref_len += closest;
    }
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as Real / cand_len as Real).exp()
    };
    bp * log_sum.exp()
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut dp = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            dp[i][j] = if a[i - 1] == b[j - 1] {
                dp[i - 1][j - 1] + 1
            } else {
                dp[i - 1][j].max(dp[i][j - 1])
            };
        }
    }
    dp[a.len()][b.len()]
}

const ROUGE_BETA: Real = 1.2;

fn rouge_video(cand: &[String], refs: &[Vec<String>]) -> Real {
    let mut best = 0.0;
    for r in refs {
        if cand.is_empty() || r.is_empty() {
            continue;
        }
        let l = lcs_len(cand, r) as Real;
        if l == 0.0 {
            continue;
        }
        let precision = l / cand.len() as Real;
        let recall = l / r.len() as Real;
        let b2 = ROUGE_BETA * ROUGE_BETA;
        let f = (1.0 + b2) * recall * precision / (recall + b2 * precision);
        if f > best {
            best = f;
        }
    }
    best
}

/// Mean over videos of the best-reference LCS F-measure (beta = 1.2).
pub fn rouge_l(set: &EvalSet) -> Real {
    let total: Real = set.candidates.iter().map(|(id, c)| rouge_video(c, set.refs(id))).sum();
    total / set.candidates.len() as Real
}

/// Per-video base CIDEr: for each n in 1..4, cosine similarity between the
/// tf-idf n-gram vectors of the candidate and each reference (document
/// frequency counts videos whose reference set contains the n-gram), averaged
/// over references, then averaged over n and scaled by ten.
fn cider_scores(set: &EvalSet) -> BTreeMap<String, Real> {
    let n_videos = set.candidates.len();
    if n_videos < 2 {
        log::warn!(
            "CIDEr over {n_videos} video(s): inverse document frequency is degenerate"
        );
    }
    let mut sums: BTreeMap<String, Real> =
        set.candidates.keys().map(|id| (id.clone(), 0.0)).collect();
    for n in 1..=4 {
        let mut df: BTreeMap<String, f64> = BTreeMap::new();
        for id in set.candidates.keys() {
            let mut seen: BTreeMap<String, ()> = BTreeMap::new();
            for r in set.refs(id) {
                for g in ngram_counts(r, n).into_keys() {
                    seen.insert(g, ());
                }
            }
            for g in seen.into_keys() {
                *df.entry(g).or_insert(0.0) += 1.0;
            }
        }
        let idf = |g: &str| (n_videos as Real).ln() - df.get(g).copied().unwrap_or(0.0).max(1.0).ln();
        let vector = |tokens: &[String]| -> BTreeMap<String, Real> {
            let counts = ngram_counts(tokens, n);
            let total: f64 = counts.values().sum();
            if total == 0.0 {
                return BTreeMap::new();
            }
            counts.into_iter().map(|(g, c)| { let w = (c / total) * idf(&g); (g, w) }).collect()
        };
        let cosine = |u: &BTreeMap<String, Real>, v: &BTreeMap<String, Real>| -> Real {
            let nu: Real = u.values().map(|x| x * x).sum::<Real>().sqrt();
            let nv: Real = v.values().map(|x| x * x).sum::<Real>().sqrt();
            if nu == 0.0 || nv == 0.0 {
                return 0.0;
            }
            let d: Real = u.iter().map(|(g, x)| x * v.get(g).copied().unwrap_or(0.0)).sum();
            d / (nu * nv)
        };
        for (id, cand) in &set.candidates {
            let cv = vector(cand);
            let refs = set.refs(id);
            let mean: Real =
                refs.iter().map(|r| cosine(&cv, &vector(r))).sum::<Real>() / refs.len() as Real;
            *sums.get_mut(id).expect("initialized above") += mean;
        }
    }
    sums.into_iter().map(|(id, s)| (id, 10.0 * s / 4.0)).collect()
}

/// Corpus CIDEr: mean of the per-video scores.
pub fn cider(set: &EvalSet) -> Real {
    let scores = cider_scores(set);
    scores.values().sum::<Real>() / scores.len() as Real
}

/// Scores for one video in the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoScores {
    pub video_id: String,
    pub bleu4: Real,
    pub rouge_l: Real,
    pub cider: Real,
}

/// Corpus-level scores plus the per-video table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu4: Real,
    pub rouge_l: Real,
    pub cider: Real,
    pub videos: Vec<VideoScores>,
}

/// Evaluates all three metrics, corpus-level and per video. Per-video BLEU
/// treats the video as a one-sentence corpus; per-video CIDEr keeps the
/// corpus-wide document frequencies.
pub fn evaluate(set: &EvalSet) -> EvalReport {
    let ciders = cider_scores(set);
    let videos: Vec<VideoScores> = set
        .candidates
        .iter()
        .map(|(id, cand)| {
            let single = EvalSet {
                candidates: BTreeMap::from([(id.clone(), cand.clone())]),
                references: BTreeMap::from([(id.clone(), set.refs(id).to_vec())]),
            };
            VideoScores {
                video_id: id.clone(),
                bleu4: bleu4(&single),
                rouge_l: rouge_video(cand, set.refs(id)),
                cider: ciders[id],
            }
        })
        .collect();
    EvalReport {
        bleu4: bleu4(set),
        rouge_l: rouge_l(set),
        cider: ciders.values().sum::<Real>() / ciders.len() as Real,
        videos,
    }
}

#[derive(Deserialize)]
struct CandidateRow {
    video_id: String,
    caption: String,
}

#[derive(Deserialize)]
struct ReferenceRow {
    video_id: String,
    refs: Vec<String>,
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Ingest(format!("cannot open {}: {e}", path.display())))?;
    let reader = std::io::BufReader::new(file);
    let mut rows = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Ingest(format!("read error: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), lineno + 1)))?,
        );
    }
    Ok(rows)
}

/// Loads candidate and reference JSON-lines files, tokenizes them, and
/// evaluates. Candidate rows are `{"video_id", "caption"}`; reference rows
/// are `{"video_id", "refs": [...]}`.
pub fn evaluate_files(candidates: &Path, references: &Path) -> Result<EvalReport> {
    let mut cands: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for row in read_jsonl::<CandidateRow>(candidates)? {
        if cands.insert(row.video_id.clone(), tokenize(&row.caption)).is_some() {
            return Err(Error::Eval(format!("duplicate candidate for video {}", row.video_id)));
        }
    }
    let mut refs: BTreeMap<String, Vec<Vec<String>>> = BTreeMap::new();
    for row in read_jsonl::<ReferenceRow>(references)? {
        if refs
            .insert(row.video_id.clone(), row.refs.iter().map(|r| tokenize(r)).collect())
            .is_some()
        {
            return Err(Error::Eval(format!("duplicate references for video {}", row.video_id)));
        }
    }
    Ok(evaluate(&EvalSet::new(cands, refs)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sentence(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    /// The committed five-pair fixture; oracle values below were computed
    /// once with an independent implementation of the formulas.
    fn fixture() -> EvalSet {
        let pairs: [(&str, &str, &[&str]); 5] = [
            ("v1", "a man is riding a bike", &["a man is riding a bike", "a man rides a bicycle"]),
            ("v2", "the cat sat on mat", &["the cat sat on the mat"]),
            (
                "v3",
                "a dog runs in the park",
                &["a dog is running in a park", "the dog runs through the park"],
            ),
            ("v4", "children play football", &["children are playing football on the field"]),
            (
                "v5",
                "a woman slices an onion",
                &["a woman is slicing an onion", "someone cuts an onion"],
            ),
        ];
        let mut cands = BTreeMap::new();
        let mut refs = BTreeMap::new();
        for (id, c, rs) in pairs {
            cands.insert(id.to_string(), sentence(c));
            refs.insert(id.to_string(), rs.iter().map(|r| sentence(r)).collect());
        }
        EvalSet::new(cands, refs).unwrap()
    }

    #[test]
    fn tokenizer_lowercases_splits_and_strips_terminal_punctuation() {
        assert_eq!(tokenize("The Cat sat."), sentence("the cat sat"));
        assert_eq!(tokenize("A dog!!  Runs,"), sentence("a dog runs"));
        assert_eq!(tokenize("wait ... what?"), sentence("wait what"));
        assert_eq!(tokenize("semi;colon: ok"), vec!["semi;colon", "ok"]);
        assert_eq!(tokenize("  \t "), Vec::<String>::new());
    }

    #[test]
    fn identical_corpora_are_maximal() {
        let mut cands = BTreeMap::new();
        let mut refs = BTreeMap::new();
        cands.insert("a".to_string(), sentence("a red balloon floats away"));
        refs.insert("a".to_string(), vec![sentence("a red balloon floats away")]);
        cands.insert("b".to_string(), sentence("the cat sat on mat"));
        refs.insert("b".to_string(), vec![sentence("the cat sat on mat")]);
        let set = EvalSet::new(cands, refs).unwrap();
        assert_eq!(bleu4(&set), 1.0);
        assert_eq!(rouge_l(&set), 1.0);
        assert!((cider(&set) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_corpora_score_zero() {
        let mut cands = BTreeMap::new();
        let mut refs = BTreeMap::new();
        cands.insert("a".to_string(), sentence("one two three four"));
        refs.insert("a".to_string(), vec![sentence("five six seven eight")]);
        cands.insert("b".to_string(), sentence("nine ten eleven twelve"));
        refs.insert("b".to_string(), vec![sentence("alpha beta gamma delta")]);
        let set = EvalSet::new(cands, refs).unwrap();
        assert_eq!(bleu4(&set), 0.0);
        assert_eq!(rouge_l(&set), 0.0);
        assert_eq!(cider(&set), 0.0);
    }

    #[test]
    fn corpus_scores_match_the_committed_oracle() {
        let set = fixture();
        assert!((bleu4(&set) - 0.47393433663226214).abs() < 1e-6);
        assert!((rouge_l(&set) - 0.7299452052337521).abs() < 1e-6);
        assert!((cider(&set) - 3.762137064272916).abs() < 1e-6);
    }

    #[test]
    fn per_video_report_matches_the_committed_oracle() {
        let report = evaluate(&fixture());
        let oracle: [(&str, Real, Real, Real); 5] = [
            ("v1", 1.0, 1.0, 5.787390278654714),
            ("v2", 0.5789300674674098, 0.8944281524926685, 6.7343441221062905),
            ("v3", 0.0, 0.6666666666666666, 2.5786283360247224),
            ("v4", 0.0, 0.3730886850152905, 1.2394094095975052),
            ("v5", 0.0, 0.7155425219941348, 2.4709131749813493),
        ];
        assert_eq!(report.videos.len(), oracle.len());
        for (row, (id, b, r, c)) in report.videos.iter().zip(oracle) {
            assert_eq!(row.video_id, id);
            assert!((row.bleu4 - b).abs() < 1e-6, "{id} bleu {} vs {b}", row.bleu4);
            assert!((row.rouge_l - r).abs() < 1e-6, "{id} rouge {} vs {r}", row.rouge_l);
            assert!((row.cider - c).abs() < 1e-6, "{id} cider {} vs {c}", row.cider);
        }
        assert!((report.bleu4 - 0.47393433663226214).abs() < 1e-6);
        assert!((report.rouge_l - 0.7299452052337521).abs() < 1e-6);
        assert!((report.cider - 3.762137064272916).abs() < 1e-6);
    }

    #[test]
    fn single_pair_bleu_matches_the_hand_derivation() {
        // Precisions 5/5, 3/4, 2/3, 1/2 and brevity penalty exp(1 - 6/5):
        // exp(-0.2) * 0.25^(1/4) = 0.5789300674674098.
        let mut cands = BTreeMap::new();
        let mut refs = BTreeMap::new();
        cands.insert("x".to_string(), sentence("the cat sat on mat"));
        refs.insert("x".to_string(), vec![sentence("the cat sat on the mat")]);
        let set = EvalSet::new(cands, refs).unwrap();
        assert!((bleu4(&set) - 0.5789300674674098).abs() < 1e-12);
    }

    #[test]
    fn rouge_f_measure_matches_the_hand_derivation() {
        // LCS("a b c d", "a c d e") = 3; precision = recall = 3/4; the
        // beta-weighted F-measure collapses to 0.75.
        let f = rouge_video(&sentence("a b c d"), &[sentence("a c d e")]);
        assert!((f - 0.75).abs() < 1e-12);
    }

    #[test]
    fn candidate_equal_to_sole_reference_scores_ten() {
        let mut cands = BTreeMap::new();
        let mut refs = BTreeMap::new();
        cands.insert("v1".to_string(), sentence("a red balloon floats"));
        refs.insert("v1".to_string(), vec![sentence("a red balloon floats")]);
        cands.insert("v2".to_string(), sentence("the cat sat on mat"));
        refs.insert("v2".to_string(), vec![sentence("the cat sat on the mat")]);
        let set = EvalSet::new(cands, refs).unwrap();
        let scores = cider_scores(&set);
        assert_eq!(scores["v1"], 10.0);
    }

    #[test]
    fn duplicated_references_leave_scores_unchanged() {
        let set = fixture();
        let doubled = EvalSet::new(
            set.candidates.clone(),
            set.references
                .iter()
                .map(|(id, rs)| {
                    let mut twice = rs.clone();
                    twice.extend(rs.clone());
                    (id.clone(), twice)
                })
                .collect(),
        )
        .unwrap();
        assert_eq!(cider(&set), cider(&doubled));
        assert_eq!(bleu4(&set), bleu4(&doubled));
        assert_eq!(rouge_l(&set), rouge_l(&doubled));
    }

    #[test]
    fn reference_order_never_matters() {
        let set = fixture();
        let flipped = EvalSet::new(
            set.candidates.clone(),
            set.references
                .iter()
                .map(|(id, rs)| {
                    let mut rev = rs.clone();
                    rev.reverse();
                    (id.clone(), rev)
                })
                .collect(),
        )
        .unwrap();
        assert!((bleu4(&set) - bleu4(&flipped)).abs() < 1e-12);
        assert!((rouge_l(&set) - rouge_l(&flipped)).abs() < 1e-12);
        assert!((cider(&set) - cider(&flipped)).abs() < 1e-12);
    }

    #[test]
    fn empty_candidate_contributes_nothing_but_is_legal() {
        let mut cands = BTreeMap::new();
        let mut refs = BTreeMap::new();
        cands.insert("a".to_string(), Vec::new());
        refs.insert("a".to_string(), vec![sentence("five six seven eight")]);
        cands.insert("b".to_string(), sentence("nine ten eleven twelve"));
        refs.insert("b".to_string(), vec![sentence("nine ten eleven twelve")]);
        let set = EvalSet::new(cands, refs).unwrap();
        // The empty candidate adds no n-grams, so the perfect second video
        // keeps all precisions at one and only the brevity penalty bites:
        // exp(1 - 8/4) = exp(-1).
        assert!((bleu4(&set) - (-1.0 as Real).exp()).abs() < 1e-12);
        assert_eq!(rouge_l(&set), 0.5);
        assert_eq!(cider(&set), 5.0);
    }

    #[test]
    fn single_video_cider_is_degenerate_zero() {
        let mut cands = BTreeMap::new();
        let mut refs = BTreeMap::new();
        cands.insert("a".to_string(), sentence("the cat sat on mat"));
        refs.insert("a".to_string(), vec![sentence("the cat sat on mat")]);
        let set = EvalSet::new(cands, refs).unwrap();
        // ln(1/1) zeroes every idf weight.
        assert_eq!(cider(&set), 0.0);
    }

    #[test]
    fn missing_references_are_reported_by_id() {
        let mut cands = BTreeMap::new();
        cands.insert("a".to_string(), sentence("x"));
        cands.insert("b".to_string(), sentence("y"));
        let mut refs = BTreeMap::new();
        refs.insert("a".to_string(), vec![sentence("x")]);
        match EvalSet::new(cands, refs) {
            Err(Error::Eval(msg)) => assert!(msg.contains('b'), "{msg}"),
            other => panic!("expected an evaluation error, got {other:?}"),
        }
    }

    #[test]
    fn empty_candidate_set_is_an_error() {
        assert!(EvalSet::new(BTreeMap::new(), BTreeMap::new()).is_err());
    }

    #[test]
    fn evaluate_files_round_trips_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let cand_path = dir.path().join("cand.jsonl");
        let refs_path = dir.path().join("refs.jsonl");
        std::fs::write(
            &cand_path,
            concat!(
                "{\"video_id\":\"v1\",\"caption\":\"The cat sat on mat.\"}\n",
                "{\"video_id\":\"v2\",\"caption\":\"a dog runs\"}\n",
            ),
        )
        .unwrap();
        std::fs::write(
            &refs_path,
            concat!(
                "{\"video_id\":\"v1\",\"refs\":[\"the cat sat on the mat\"]}\n",
                "{\"video_id\":\"v2\",\"refs\":[\"a dog runs\",\"the dog is running\"]}\n",
                "{\"video_id\":\"v9\",\"refs\":[\"unused extra entry\"]}\n",
            ),
        )
        .unwrap();
        let report = evaluate_files(&cand_path, &refs_path).unwrap();
        assert_eq!(report.videos.len(), 2);
        assert_eq!(report.videos[1].rouge_l, 1.0);
        assert!(report.videos[0].rouge_l > 0.8);

        // Identical files in both roles give the maximal trivial bounds.
        let self_refs = dir.path().join("self.jsonl");
        std::fs::write(
            &self_refs,
            concat!(
                "{\"video_id\":\"v1\",\"refs\":[\"The cat sat on mat.\"]}\n",
                "{\"video_id\":\"v2\",\"refs\":[\"a dog runs\"]}\n",
            ),
        )
        .unwrap();
        let perfect = evaluate_files(&cand_path, &self_refs).unwrap();
        assert_eq!(perfect.bleu4, 1.0);
        assert_eq!(perfect.rouge_l, 1.0);

        assert!(evaluate_files(&refs_path, &cand_path).is_err());
        assert!(evaluate_files(&dir.path().join("nope.jsonl"), &refs_path).is_err());
    }
}
