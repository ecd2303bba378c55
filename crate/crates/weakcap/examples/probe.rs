//! Scratch instrumentation for tuning the toy configuration. Not shipped.

use std::collections::BTreeMap;

use weakcap::config::load_config;
use weakcap::corpusio::{
    build_vocabulary, extract_triplets, load_embeddings, read_conllu_file, read_hypernym_pairs,
};
use weakcap::grounding::{
    concept_loss, generate_concepts, load_video_features, parse_annotations, ConceptThresholds,
    VideoRecord,
};
use weakcap::kglink::{train_kg, KgTrainConfig};
use weakcap::refine::{RefineConfig, RefineSession};
use weakcap::synth::write_toy_dataset;
use weakcap::treespan::SpanConfig;

fn main() {
    let dir = std::path::PathBuf::from("/tmp/probe_toy");
    let _ = std::fs::remove_dir_all(&dir);
    write_toy_dataset(&dir, 7).unwrap();
    let cfg = load_config(&dir.join("toy.cfg")).unwrap();

    let report = read_conllu_file(&cfg.corpus).unwrap();
    let hyp = read_hypernym_pairs(cfg.hypernyms.as_ref().unwrap()).unwrap();
    let mut vocab = build_vocabulary(&report.sentences, &hyp).unwrap();
    let (table, _) = load_embeddings(&cfg.embeddings, &vocab).unwrap();
    vocab.attach_embeddings(table).unwrap();
    let mut triplets = Vec::new();
    for s in &report.sentences {
        triplets.extend(extract_triplets(s));
    }
    let kg = train_kg(
        &triplets,
        &vocab,
        &KgTrainConfig {
            dim: cfg.kg_dim,
            margin: cfg.kg_margin,
            negatives: cfg.kg_negatives,
            steps: cfg.kg_steps,
            learning_rate: cfg.kg_learning_rate,
            seed: cfg.seed,
        },
    )
    .unwrap();

    let annotations = parse_annotations(&cfg.annotations).unwrap();
    let mut videos = BTreeMap::new();
    for (id, annotation) in annotations {
        let (fmap_obj, fmap_act, global) =
            load_video_features(&cfg.features, &id, cfg.shared_features).unwrap();
        videos.insert(
            id.clone(),
            VideoRecord {
                video_id: id,
                fmap_obj,
                fmap_act,
                global,
                annotation,
                ind_obj: vec![0; vocab.objects.len()],
                ind_act: vec![0; vocab.actions.len()],
            },
        );
    }
    let val_ids: Vec<String> = std::fs::read_to_string(cfg.validation.as_ref().unwrap())
        .unwrap()
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect();
    let mut validation = BTreeMap::new();
    for id in val_ids {
        let v = videos.remove(&id).unwrap();
        validation.insert(id, v);
    }

    let epochs: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(12);
    let lr: f64 = std::env::args().nth(2).and_then(|a| a.parse().ok()).unwrap_or(0.05);
    let iters: usize = std::env::args().nth(3).and_then(|a| a.parse().ok()).unwrap_or(4);
    let confidence: f64 = std::env::args().nth(4).and_then(|a| a.parse().ok()).unwrap_or(0.4);
    let lambda: f64 = std::env::args().nth(5).and_then(|a| a.parse().ok()).unwrap_or(0.1);
    let hidden: usize = std::env::args().nth(6).and_then(|a| a.parse().ok()).unwrap_or(cfg.hidden);
    eprintln!(
        "epochs={epochs} lr={lr} iters={iters} confidence={confidence} lambda={lambda} hidden={hidden}"
    );

    let rcfg = RefineConfig {
        thresholds: ConceptThresholds { confidence, consistency: cfg.consistency },
        lambda,
        span: SpanConfig { s_max: kg.calibrate_score_ceiling().unwrap(), max_nodes: cfg.max_nodes },
        hidden,
        beam: cfg.beam,
        t_max: cfg.t_max,
        epochs,
        learning_rate: lr,
        max_iterations: iters,
        patience: 99,
        seed: cfg.seed,
    };
    let train_videos = videos.clone();
    let mut session =
        RefineSession::new(&vocab, &kg, videos, validation, None, rcfg).unwrap();

    // One direct gradient probe before any training.
    {
        use weakcap::num::ParamSet;
        use weakcap::refine::{total_loss, TrainingPair, PairOrigin};
        use weakcap::treespan::DependencyTree;
        use weakcap::corpusio::Phrase;
        let videos = session.training_videos().clone();
        let first: Vec<&weakcap::grounding::VideoRecord> = videos.values().take(4).collect();
        let pairs: Vec<TrainingPair> = first
            .iter()
            .map(|v| {
                let root = v.annotation.clone();
                let tree = DependencyTree::root_only(root.clone(), &v.video_id);
                TrainingPair {
                    video_id: v.video_id.clone(),
                    ind_obj: v.ind_obj.clone(),
                    ind_act: v.ind_act.clone(),
                    tokens: match &root {
                        Phrase::Noun(n) => vec![n.clone()],
                        Phrase::Verb(vb) => vec![vb.clone()],
                        Phrase::NounVerb(n, vb) => vec![n.clone(), vb.clone()],
                    },
                    tree,
                    origin: PairOrigin::Pseudo,
                }
            })
            .collect();
        let batch: Vec<&TrainingPair> = pairs.iter().collect();
        let model = &session.state().model;
        let (loss, grads) = total_loss(
            &batch,
            &videos,
            &vocab,
            session.dictionary(),
            model,
            lambda,
        )
        .unwrap();
        eprintln!("probe total_loss={loss:.4}");
        for (k, t) in grads.tensors().iter().enumerate() {
            eprintln!("  grad[{k}] {}x{}: l2={:.6}", t.rows(), t.cols(), t.l2_norm());
        }
        let flat = |m: &weakcap::refine::CaptionModel| -> Vec<f64> {
            m.tensors().iter().flat_map(|t| t.data.clone()).collect()
        };
        let before = flat(model);
        let mut m2 = model.clone();
        let mut opt = weakcap::opt::RmsProp::new(&m2, lr);
        opt.step(&mut m2, &grads);
        let after = flat(&m2);
        let moved: f64 = before
            .iter()
            .zip(&after)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        eprintln!("  one-step parameter movement: {moved:.6}");
    }

    for step in 0..iters {
        let stats = session.run_iteration().unwrap();
        let cider = session.evaluate_validation().unwrap();
        eprintln!(
            "iter {}: new_pseudo={} pool={} loss={:.4} cider={:.4}",
            stats.iteration, stats.new_pseudo, stats.pool_size, stats.loss, cider
        );

        // Loss decomposition on the current model, using the session's own
        // video copies (their indicators carry the annotation bits).
        let refs: Vec<&VideoRecord> = session.training_videos().values().collect();
        let model = &session.state().model;
        let lm = concept_loss(&refs, &vocab, &model.grounding).unwrap();
        let norm = {
            use weakcap::num::ParamSet;
            model.norm_sum()
        };
        eprintln!("  L_m={lm:.6} norm={norm:.4}");

        // Own-class probability of each video's annotated concept.
        let mut probs: Vec<f64> = Vec::new();
        for v in session.training_videos().values() {
            use weakcap::grounding::{attend, concept_probabilities};
            if let Some(n) = v.annotation.noun() {
                let i = vocab.object_index(n).unwrap();
                let (att, _) =
                    attend(&v.fmap_obj, &vocab.embeddings.objects[i], &model.grounding.t_obj)
                        .unwrap();
                let p = concept_probabilities(&att, &model.grounding.w_obj, &model.grounding.b_obj)
                    .unwrap();
                probs.push(p[i]);
            }
            if let Some(vb) = v.annotation.verb() {
                let i = vocab.action_index(vb).unwrap();
                let (att, _) =
                    attend(&v.fmap_act, &vocab.embeddings.actions[i], &model.grounding.t_act)
                        .unwrap();
                let p = concept_probabilities(&att, &model.grounding.w_act, &model.grounding.b_act)
                    .unwrap();
                probs.push(p[i]);
            }
        }
        probs.sort_by(f64::total_cmp);
        eprintln!(
            "  annotated p_i[i]: min={:.4} median={:.4} max={:.4}",
            probs[0],
            probs[probs.len() / 2],
            probs[probs.len() - 1]
        );

        // Grounding activation profile at a few thresholds.
        for theta in [0.2, 0.4, 0.6, 0.9] {
            let th = ConceptThresholds { confidence: theta, consistency: cfg.consistency };
            let mut active = 0usize;
            let mut hit = 0usize;
            for v in train_videos.values() {
                let g = generate_concepts(v, &vocab, &model.grounding, &th).unwrap();
                let n: usize = g.g_obj.iter().chain(g.g_act.iter()).map(|&b| b as usize).sum();
                active += n;
                let want = match v.annotation.noun() {
                    Some(n) => g.g_obj[vocab.object_index(n).unwrap()] == 1,
                    None => true,
                } && match v.annotation.verb() {
                    Some(vb) => g.g_act[vocab.action_index(vb).unwrap()] == 1,
                    None => true,
                };
                hit += want as usize;
            }
            eprintln!(
                "  theta={theta}: mean active {:.2}, annotation grounded in {}/32",
                active as f64 / 32.0,
                hit
            );
        }
        if step == iters - 1 {
            // Show a few grounded summaries and captions.
            for (id, caption) in session.state().captions.iter().take(6) {
                eprintln!("  caption {id}: {:?}", caption);
            }
            for pair in session.state().pool.iter().rev().take(12) {
                eprintln!("  pool[{:?}]: {:?}", pair.origin, pair.tokens);
            }

            // Decoder step-probability autopsy on one training video's tree.
            use weakcap::captioner::{decoder_step, encode_tree, DecoderState};
            let model = &session.state().model;
            let pair = session.state().pool.last().unwrap();
            let video = &session.training_videos()[&pair.video_id];
            let enc = encode_tree(&pair.tree, &vocab, &model.captioner.gcn).unwrap();
            let dict = session.dictionary();
            let begin = 0usize; // BEGIN token id
            let state = DecoderState::zeros(model.captioner.decoder.dims.hidden);
            let out =
                decoder_step(&model.captioner.decoder, &state, begin, &video.global, &enc.features)
                    .unwrap();
            let mut ranked: Vec<(f64, usize)> =
                out.probs.iter().cloned().zip(0..).map(|(p, i)| (p, i)).collect();
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
            eprintln!("  step-1 top5 for {:?}:", pair.tokens);
            for (p, i) in ranked.iter().take(5) {
                eprintln!("    {:.4} {}", p, dict.token(*i));
            }
            let first_tok = dict.id_or_unk(&pair.tokens[0]);
            eprintln!(
                "    p1[target={}]={:.4}",
                pair.tokens[0],
                out.probs[first_tok]
            );
            let out2 = decoder_step(
                &model.captioner.decoder,
                &out.state,
                first_tok,
                &video.global,
                &enc.features,
            )
            .unwrap();
            let mut ranked2: Vec<(f64, usize)> =
                out2.probs.iter().cloned().zip(0..).map(|(p, i)| (p, i)).collect();
            ranked2.sort_by(|a, b| b.0.total_cmp(&a.0));
            eprintln!("  step-2 top3 after '{}':", pair.tokens[0]);
            for (p, i) in ranked2.iter().take(3) {
                eprintln!("    {:.4} {}", p, dict.token(*i));
            }

            let l2 = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            eprintln!(
                "  |h2 step1|={:.4} |h2 step2 - h2 step1|={:.4}",
                l2(&out.state.h2),
                l2(&out
                    .state
                    .h2
                    .iter()
                    .zip(&out2.state.h2)
                    .map(|(a, b)| a - b)
                    .collect::<Vec<f64>>())
            );
            {
                use weakcap::num::ParamSet;
                for (k, t) in model.tensors().iter().enumerate() {
                    eprintln!("  |tensor[{k}]| {}x{}: {:.4}", t.rows(), t.cols(), t.l2_norm());
                }
            }
        }
    }
}
