//! Deterministic toy-scale data generation.
//!
//! [`write_toy_dataset`] lays down a complete, self-contained training setup:
//! a template corpus of 60 dependency-parsed sentences over 12 objects and
//! 8 actions, 40 videos with separable region features (each concept owns a
//! signature vector, and the regions of a video carry the signatures of the
//! concepts it depicts), weak annotations, validation references, and a ready
//! config file. Everything derives from one seed; two runs with the same seed
//! produce byte-identical trees.
//!
//! [`planted_kg`] builds a link-prediction problem with a known ground truth:
//! entities sit on six-point orbits and each relation rotates an orbit by a
//! fixed number of steps, which is exactly the structure the rotation-based
//! scorer can represent.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::RunConfig;
use crate::corpusio::{ConceptVocabulary, Phrase, Triplet};
use crate::grounding::{write_feature_map, write_global_feature, StreamTag};
use crate::num::stream_rng;
use crate::{Result, Tensor};

/// Videos in the toy dataset.
pub const TOY_VIDEOS: usize = 40;
/// Training split size; the remaining videos are the validation split.
pub const TOY_TRAIN: usize = 32;
/// Regions per feature map.
pub const TOY_REGIONS: usize = 4;
/// Visual feature width: one coordinate per concept (12 objects + 8 actions)
/// plus slack, so concept signatures can be exactly orthogonal.
pub const TOY_VISUAL_DIM: usize = 24;
/// Word-embedding width: one coordinate per vocabulary word (20 concepts +
/// 3 relation labels).
pub const TOY_EMBED_DIM: usize = 23;
/// Noise amplitude added to every feature entry.
pub const TOY_JITTER: f64 = 0.05;
/// Magnitude of a concept signature's single active coordinate. Kept large
/// so visual features carry gradients comparable to the loss's norm
/// regularizer at toy scale.
const SIG_SCALE: f64 = 6.0;
/// Magnitude of a word embedding's single active coordinate, for the same
/// reason.
const EMB_SCALE: f64 = 3.0;

const AGENTS: [&str; 6] = ["man", "woman", "boy", "girl", "dog", "cat"];

/// `(action, patient, relation, scene)` — ten scene templates whose product
/// with the six agents yields the 60 corpus sentences.
const TEMPLATES: [(&str, Option<&str>, &str, &str); 10] = [
    ("ride", Some("bike"), "on", "street"),
    ("ride", Some("horse"), "in", "park"),
    ("chase", Some("ball"), "in", "field"),
    ("play", Some("ball"), "in", "park"),
    ("walk", None, "on", "street"),
    ("run", None, "in", "park"),
    ("jump", None, "in", "field"),
    ("sit", None, "on", "street"),
    ("eat", None, "in", "park"),
    ("chase", Some("ball"), "in", "park"),
];

// Distinct random streams per artifact, so adding one artifact never shifts
// the bytes of another.
const STREAM_VIDEO_BASE: u64 = 100;

/// One video's story: who does what (to what) where.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub agent: &'static str,
    pub action: &'static str,
    pub patient: Option<&'static str>,
    pub relation: &'static str,
    pub scene: &'static str,
}

/// The scenario video `v` depicts.
pub fn toy_scenario(v: usize) -> Scenario {
    let (action, patient, relation, scene) = TEMPLATES[v % TEMPLATES.len()];
    Scenario { agent: AGENTS[v % AGENTS.len()], action, patient, relation, scene }
}

/// The id of video `v`, zero-padded so lexicographic order is numeric order.
pub fn toy_video_id(v: usize) -> String {
    format!("v{v:02}")
}

fn third_person(verb: &str) -> String {
    format!("{verb}s")
}

/// All distinct lemmas of one kind, sorted.
fn sorted_lemmas() -> (Vec<String>, Vec<String>, Vec<String>) {
    let mut objects: Vec<String> = AGENTS.iter().map(|s| s.to_string()).collect();
    let mut actions: Vec<String> = Vec::new();
    let mut relations: Vec<String> = vec!["obj".into()];
    for (action, patient, relation, scene) in TEMPLATES {
        actions.push(action.to_string());
        if let Some(p) = patient {
            objects.push(p.to_string());
        }
        objects.push(scene.to_string());
        relations.push(relation.to_string());
    }
    for list in [&mut objects, &mut actions, &mut relations] {
        list.sort();
        list.dedup();
    }
    (objects, actions, relations)
}

fn render_sentence(out: &mut String, sent_id: usize, s: &Scenario) {
    let _ = writeln!(out, "# sent_id = s{sent_id:03}");
    let verb = third_person(s.action);
    let mut rows: Vec<(String, String, &str, usize, &str)> = Vec::new();
    rows.push(("a".into(), "a".into(), "DET", 0, "det")); // head patched below
    rows.push((s.agent.into(), s.agent.into(), "NOUN", 0, "nsubj"));
    rows.push((verb, s.action.into(), "VERB", 0, "root"));
    let verb_idx = rows.len(); // 1-based id of the verb
    rows[0].3 = 2;
    rows[1].3 = verb_idx;
    if let Some(p) = s.patient {
        rows.push(("a".into(), "a".into(), "DET", rows.len() + 2, "det"));
        rows.push((p.into(), p.into(), "NOUN", verb_idx, "obj"));
    }
    let scene_id = rows.len() + 3;
    rows.push((s.relation.into(), s.relation.into(), "ADP", scene_id, "case"));
    rows.push(("the".into(), "the".into(), "DET", scene_id, "det"));
    rows.push((s.scene.into(), s.scene.into(), "NOUN", verb_idx, "obl"));
    for (i, (form, lemma, upos, head, deprel)) in rows.iter().enumerate() {
        let _ = writeln!(out, "{}\t{form}\t{lemma}\t{upos}\t_\t_\t{head}\t{deprel}\t_\t_", i + 1);
    }
    out.push('\n');
}

/// The 60-sentence template corpus in CoNLL-U form.
pub fn toy_corpus() -> String {
    let mut out = String::new();
    let mut sent_id = 0;
    for agent in AGENTS {
        for (action, patient, relation, scene) in TEMPLATES {
            let s = Scenario { agent, action, patient, relation, scene };
            render_sentence(&mut out, sent_id, &s);
            sent_id += 1;
        }
    }
    out
}

/// The lemma-form reference sentences for video `v`: the full scenario
/// rendering plus the scene-free short form.
pub fn toy_references(v: usize) -> Vec<String> {
    let s = toy_scenario(v);
    let mut full: Vec<&str> = vec![s.agent, s.action];
    let mut short: Vec<&str> = vec![s.agent, s.action];
    if let Some(p) = s.patient {
        full.push(p);
        short.push(p);
    }
    full.push(s.relation);
    full.push(s.scene);
    vec![full.join(" "), short.join(" ")]
}

/// The weak annotation of video `v`: one concept of its scenario, cycling
/// through agent, action, patient (scene when absent), and scene so that
/// every concept class receives direct supervision somewhere in the corpus.
pub fn toy_annotation(v: usize) -> (String, char) {
    let s = toy_scenario(v);
    match v % 4 {
        0 => (s.agent.to_string(), 'o'),
        1 => (s.action.to_string(), 'a'),
        2 => (s.patient.unwrap_or(s.scene).to_string(), 'o'),
        _ => (s.scene.to_string(), 'o'),
    }
}

/// Concept signature vectors: each of the 20 concept lemmas owns one visual
/// coordinate, so signatures are mutually orthogonal and a video's regions
/// decompose exactly into the concepts they carry.
fn signatures() -> BTreeMap<String, Vec<f64>> {
    let (objects, actions, _) = sorted_lemmas();
    let mut sigs = BTreeMap::new();
    for (k, lemma) in objects.into_iter().chain(actions).enumerate() {
        let mut sig = vec![0.0; TOY_VISUAL_DIM];
        sig[k] = SIG_SCALE;
        sigs.insert(lemma, sig);
    }
    sigs
}

/// Builds video `v`'s feature map and global feature. Region 0 carries the
/// agent and action signatures together (the pair is spatially aligned),
/// region 1 the patient, region 2 the scene, region 3 only noise; the global
/// feature is the region mean.
fn toy_features(v: usize, sigs: &BTreeMap<String, Vec<f64>>, seed: u64) -> (Tensor, Vec<f64>) {
    let s = toy_scenario(v);
    let mut rng = stream_rng(seed, STREAM_VIDEO_BASE + v as u64);
    let mut fmap = Tensor::zeros(TOY_REGIONS, TOY_VISUAL_DIM);
    let add_sig = |fmap: &mut Tensor, region: usize, lemma: &str| {
        for (cell, sv) in fmap.row_mut(region).iter_mut().zip(&sigs[lemma]) {
            *cell += sv;
        }
    };
    add_sig(&mut fmap, 0, s.agent);
    add_sig(&mut fmap, 0, s.action);
    if let Some(p) = s.patient {
        add_sig(&mut fmap, 1, p);
    }
    add_sig(&mut fmap, 2, s.scene);
    for cell in fmap.data.iter_mut() {
        *cell += TOY_JITTER * rng.gen_range(-1.0..1.0);
    }
    let mut global = vec![0.0; TOY_VISUAL_DIM];
    for r in 0..TOY_REGIONS {
        for (g, x) in global.iter_mut().zip(fmap.row(r)) {
            *g += x / TOY_REGIONS as f64;
        }
    }
    (fmap, global)
}

/// The ready-to-run config for a toy dataset rooted at its own directory
/// (all paths relative, so the tree is relocatable and reproducible).
pub fn toy_config(seed: u64) -> RunConfig {
    RunConfig {
        corpus: "corpus.conllu".into(),
        embeddings: "embeddings.txt".into(),
        features: "features".into(),
        annotations: "annotations.tsv".into(),
        hypernyms: Some("hypernyms.txt".into()),
        validation: Some("validation.txt".into()),
        references: Some("refs.jsonl".into()),
        output: "run".into(),
        shared_features: true,
        confidence: 0.4,
        consistency: 0.2,
        lambda: 200.0,
        s_max: None,
        max_nodes: 6,
        kg_dim: 16,
        kg_margin: 6.0,
        kg_negatives: 4,
        kg_steps: 2000,
        kg_learning_rate: 0.1,
        hidden: 256,
        beam: 5,
        t_max: 8,
        epochs: 20,
        learning_rate: 0.045,
        max_iterations: 6,
        patience: 2,
        seed,
    }
}

/// Writes the complete toy dataset into `dir` (created if needed): corpus,
/// embeddings, per-video features, annotations, references, validation list,
/// hypernym list, and `toy.cfg`.
pub fn write_toy_dataset(dir: &Path, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir.join("features"))?;

    std::fs::write(dir.join("corpus.conllu"), toy_corpus())?;

    // Word embeddings: one coordinate per word in sorted order, so every
    // lemma and relation label gets an exactly distinguishable vector.
    let (objects, actions, relations) = sorted_lemmas();
    let mut emb = String::new();
    for (k, word) in objects.iter().chain(&actions).chain(&relations).enumerate() {
        let _ = write!(emb, "{word}");
        for c in 0..TOY_EMBED_DIM {
            let _ = write!(emb, " {}", if c == k { EMB_SCALE } else { 0.0 });
        }
        emb.push('\n');
    }
    std::fs::write(dir.join("embeddings.txt"), emb)?;

    let sigs = signatures();
    let mut annotations = String::new();
    let mut refs = String::new();
    let mut validation = String::new();
    for v in 0..TOY_VIDEOS {
        let id = toy_video_id(v);
        let (fmap, global) = toy_features(v, &sigs, seed);
        write_feature_map(&dir.join("features").join(format!("{id}.wcfm")), StreamTag::Shared, &fmap)?;
        write_global_feature(&dir.join("features").join(format!("{id}.wcgf")), &global)?;
        let (lemma, kind) = toy_annotation(v);
        let _ = writeln!(annotations, "{id}\t{lemma}\t{kind}");
        let row = serde_json::json!({ "video_id": id, "refs": toy_references(v) });
        let _ = writeln!(refs, "{row}");
        if v >= TOY_TRAIN {
            let _ = writeln!(validation, "{id}");
        }
    }
    std::fs::write(dir.join("annotations.tsv"), annotations)?;
    std::fs::write(dir.join("refs.jsonl"), refs)?;
    std::fs::write(dir.join("validation.txt"), validation)?;

    // Hypernym pairs whose general terms never occur in the corpus; they
    // exercise the pruning path without changing the vocabulary.
    std::fs::write(
        dir.join("hypernyms.txt"),
        "animal\tdog\nanimal\tcat\nanimal\thorse\nvehicle\tbike\n",
    )?;

    std::fs::write(dir.join("toy.cfg"), toy_config(seed).render())?;
    Ok(())
}

/// A link-prediction problem with known ground truth.
#[derive(Debug, Clone)]
pub struct PlantedKg {
    /// Entity and relation inventories (30 objects, 5 relations).
    pub vocab: ConceptVocabulary,
    /// Every true triplet of the hidden model (750).
    pub truth: Vec<Triplet>,
    /// Sampled training split (160).
    pub train: Vec<Triplet>,
    /// Held-out split (40), disjoint from `train`.
    pub test: Vec<Triplet>,
}

/// Entities `e00..e29` occupy positions `i mod 6` on a six-point orbit;
/// relation `rp` (p in 1..=5) rotates the orbit by `p` steps. A triplet
/// `(h, rp, t)` is true exactly when `pos(t) = pos(h) + p (mod 6)`, giving
/// 750 true triplets; 200 are sampled without replacement (seeded) and split
/// 160/40 into train and test.
pub fn planted_kg(seed: u64) -> PlantedKg {
    let entities: Vec<String> = (0..30).map(|i| format!("e{i:02}")).collect();
    let relations: Vec<String> = (1..=5).map(|p| format!("r{p}")).collect();
    let vocab =
        ConceptVocabulary::from_parts(entities.clone(), Vec::new(), relations.clone());

    let mut truth = Vec::new();
    for h in 0..30usize {
        for p in 1..=5usize {
            for t in 0..30usize {
                if (h % 6 + p) % 6 == t % 6 {
                    truth.push(Triplet::new(
                        Phrase::Noun(entities[h].clone()),
                        &relations[p - 1],
                        Phrase::Noun(entities[t].clone()),
                    ));
                }
            }
        }
    }

    let mut sampled: Vec<usize> = (0..truth.len()).collect();
    let mut rng = stream_rng(seed, 0);
    sampled.shuffle(&mut rng);
    sampled.truncate(200);
    let train = sampled[..160].iter().map(|&i| truth[i].clone()).collect();
    let test = sampled[160..].iter().map(|&i| truth[i].clone()).collect();
    PlantedKg { vocab, truth, train, test }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::load_config;
    use crate::corpusio::{build_vocabulary, load_embeddings, read_conllu_file};
    use crate::grounding::{load_video_features, parse_annotations};

    fn tree_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
        let mut files = BTreeMap::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in std::fs::read_dir(&d).unwrap() {
                let path = entry.unwrap().path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    let rel = path.strip_prefix(dir).unwrap().display().to_string();
                    files.insert(rel, std::fs::read(&path).unwrap());
                }
            }
        }
        files
    }

    #[test]
    fn same_seed_writes_byte_identical_trees() {
        let root = tempfile::tempdir().unwrap();
        let (a, b) = (root.path().join("a"), root.path().join("b"));
        write_toy_dataset(&a, 7).unwrap();
        write_toy_dataset(&b, 7).unwrap();
        let (fa, fb) = (tree_bytes(&a), tree_bytes(&b));
        assert_eq!(
            fa.keys().collect::<Vec<_>>(),
            fb.keys().collect::<Vec<_>>(),
            "file inventories differ"
        );
        for (name, bytes) in &fa {
            assert_eq!(bytes, &fb[name], "{name} differs between runs");
        }
        // A different seed must actually change the data (the feature noise
        // and the config's seed line both depend on it).
        let c = root.path().join("c");
        write_toy_dataset(&c, 8).unwrap();
        let fc = tree_bytes(&c);
        assert_ne!(fa["features/v00.wcfm"], fc["features/v00.wcfm"]);
        assert_ne!(fa["toy.cfg"], fc["toy.cfg"]);
    }

    #[test]
    fn generated_config_loads_and_points_at_real_inputs() {
        let dir = tempfile::tempdir().unwrap();
        write_toy_dataset(dir.path(), 7).unwrap();
        let cfg = load_config(&dir.path().join("toy.cfg")).unwrap();
        cfg.check_inputs().unwrap();
        assert!(cfg.shared_features);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.hidden, 32);
        assert_eq!(cfg.corpus, dir.path().join("corpus.conllu"));
    }

    #[test]
    fn corpus_yields_the_stated_vocabulary() {
        let dir = tempfile::tempdir().unwrap();
        write_toy_dataset(dir.path(), 7).unwrap();
        let report = read_conllu_file(&dir.path().join("corpus.conllu")).unwrap();
        assert_eq!(report.sentences.len(), 60);
        let vocab = build_vocabulary(&report.sentences, &[]).unwrap();
        assert_eq!(vocab.objects.len(), 12, "objects: {:?}", vocab.objects);
        assert_eq!(vocab.actions.len(), 8, "actions: {:?}", vocab.actions);
        assert_eq!(vocab.relations, vec!["in", "obj", "on"]);

        let (table, missing) = load_embeddings(&dir.path().join("embeddings.txt"), &vocab).unwrap();
        assert!(missing.missing.is_empty(), "missing embeddings: {:?}", missing.missing);
        assert_eq!(table.dim, TOY_EMBED_DIM);
    }

    #[test]
    fn features_load_for_every_video_and_global_is_the_region_mean() {
        let dir = tempfile::tempdir().unwrap();
        write_toy_dataset(dir.path(), 7).unwrap();
        for v in 0..TOY_VIDEOS {
            let (obj, act, global) =
                load_video_features(&dir.path().join("features"), &toy_video_id(v), true)
                    .unwrap();
            assert_eq!(obj, act);
            assert_eq!((obj.rows(), obj.cols()), (TOY_REGIONS, TOY_VISUAL_DIM));
            assert_eq!(global.len(), TOY_VISUAL_DIM);
            for (c, &g) in global.iter().enumerate() {
                let mean: f64 =
                    (0..TOY_REGIONS).map(|r| obj.get(r, c)).sum::<f64>() / TOY_REGIONS as f64;
                // Written through f32, so equality holds only loosely.
                assert!((mean - g).abs() < 1e-6, "video {v} column {c}: {mean} vs {g}");
            }
        }
    }

    #[test]
    fn annotations_references_and_split_are_consistent() {
        let dir = tempfile::tempdir().unwrap();
        write_toy_dataset(dir.path(), 7).unwrap();
        let report = read_conllu_file(&dir.path().join("corpus.conllu")).unwrap();
        let vocab = build_vocabulary(&report.sentences, &[]).unwrap();

        let anns = parse_annotations(&dir.path().join("annotations.tsv")).unwrap();
        assert_eq!(anns.len(), TOY_VIDEOS);
        let mut annotated_objects = 0;
        for (id, phrase) in &anns {
            assert!(id.starts_with('v'));
            match phrase {
                Phrase::Noun(n) => {
                    assert!(vocab.object_index(n).is_some(), "{id}: unknown object {n}");
                    annotated_objects += 1;
                }
                Phrase::Verb(v) => {
                    assert!(vocab.action_index(v).is_some(), "{id}: unknown action {v}")
                }
                Phrase::NounVerb(..) => panic!("{id}: weak annotations are single concepts"),
            }
        }
        assert!(annotated_objects > TOY_VIDEOS / 2, "object labels should dominate");

        let val: Vec<String> = std::fs::read_to_string(dir.path().join("validation.txt"))
            .unwrap()
            .lines()
            .map(String::from)
            .collect();
        assert_eq!(val.len(), TOY_VIDEOS - TOY_TRAIN);
        for id in &val {
            assert!(anns.iter().any(|(a, _)| a == id), "validation id {id} not annotated");
        }

        // Every reference sentence stays within the lemma and relation
        // vocabulary, so a perfect captioner can reproduce it.
        let text = std::fs::read_to_string(dir.path().join("refs.jsonl")).unwrap();
        let mut rows = 0;
        for line in text.lines() {
            let row: serde_json::Value = serde_json::from_str(line).unwrap();
            rows += 1;
            for r in row["refs"].as_array().unwrap() {
                for token in r.as_str().unwrap().split(' ') {
                    let known = vocab.object_index(token).is_some()
                        || vocab.action_index(token).is_some()
                        || vocab.relation_index(token).is_some();
                    assert!(known, "reference token {token:?} is out of vocabulary");
                }
            }
        }
        assert_eq!(rows, TOY_VIDEOS);
    }

    #[test]
    fn scenario_features_separate_aligned_from_unaligned_regions() {
        // The agent and action signatures share region 0 by construction;
        // orthogonal signatures keep every cross-correlation at jitter level.
        let sigs = signatures();
        for v in 0..TOY_VIDEOS {
            let s = toy_scenario(v);
            let (fmap, _) = toy_features(v, &sigs, 7);
            let dot = |r: usize, lemma: &str| -> f64 {
                fmap.row(r).iter().zip(&sigs[lemma]).map(|(a, b)| a * b).sum()
            };
            assert!(dot(0, s.agent) > dot(3, s.agent) + 1.0, "video {v}");
            assert!(dot(0, s.action) > dot(3, s.action) + 1.0, "video {v}");
            assert!(dot(2, s.scene) > dot(0, s.scene) + 1.0, "video {v}");
            if let Some(p) = s.patient {
                assert!(dot(1, p) > dot(0, p) + 1.0, "video {v}");
            }
        }
    }

    #[test]
    fn planted_graph_has_the_advertised_shape() {
        let kg = planted_kg(7);
        assert_eq!(kg.vocab.objects.len(), 30);
        assert_eq!(kg.vocab.relations.len(), 5);
        assert_eq!(kg.truth.len(), 750);
        assert_eq!(kg.train.len(), 160);
        assert_eq!(kg.test.len(), 40);
        for t in kg.train.iter().chain(&kg.test) {
            assert!(kg.truth.contains(t));
        }
        for t in &kg.test {
            assert!(!kg.train.contains(t), "{t:?} leaked into training");
        }
        // The hidden rule: position(tail) = position(head) + p (mod 6).
        for t in &kg.truth {
            let pos = |p: &Phrase| match p {
                Phrase::Noun(n) => n[1..].parse::<usize>().unwrap() % 6,
                other => panic!("unexpected phrase {other:?}"),
            };
            let p: usize = t.relation[1..].parse().unwrap();
            assert_eq!((pos(&t.head) + p) % 6, pos(&t.tail));
        }

        let again = planted_kg(7);
        assert_eq!(again.train, kg.train);
        assert_eq!(again.test, kg.test);
        let other = planted_kg(8);
        assert_ne!(other.train, kg.train);
    }
}
