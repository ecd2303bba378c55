//! The `weakcap` command line: toy-data synthesis, corpus ingestion,
//! knowledge-graph training, the refinement loop, captioning, and metric
//! evaluation.
//!
//! Subcommands write their artifacts into the configured output directory. A
//! `run.lock` file guards it against concurrent writers, finished artifacts
//! are only overwritten with `--force`, and every command is deterministic
//! given the same inputs and seed. `WEAKCAP_THREADS` caps the per-video
//! worker count; `--seed` overrides the configured seed.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::captioner::{read_model_checkpoint, DecodeConfig};
use crate::config::{load_config, RunConfig};
use crate::corpusio::{
    build_vocabulary, extract_triplets, load_embeddings, read_conllu_file, read_hypernym_pairs,
    read_triplets_jsonl, write_triplets_jsonl, ConceptVocabulary, Triplet,
};
use crate::grounding::{load_video_features, parse_annotations, ConceptThresholds, VideoRecord};
use crate::kglink::{read_kg_checkpoint, train_kg, write_kg_checkpoint, KgModel, KgTrainConfig};
use crate::metrics::{evaluate_files, tokenize};
use crate::refine::{caption_video, CaptionModel, RefineConfig, RefineSession};
use crate::synth::write_toy_dataset;
use crate::treespan::SpanConfig;
use crate::{Error, Result};

/// Command-line entry point: parses argv, runs the subcommand, and maps the
/// outcome to an exit status (0 success, 1 usage, 2 data/config error, 3
/// divergence).
pub fn main_entry() -> i32 {
    let mut builder =
        env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"));
    builder.format_timestamp(None);
    let _ = builder.try_init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Train a video captioner from weakly annotated videos.
#[derive(Debug, Parser)]
#[command(
    name = "weakcap",
    version,
    about = "Weakly supervised video captioning",
    after_help = "The WEAKCAP_THREADS environment variable caps the per-video worker count."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse the corpus and store the vocabulary and dependency triplets.
    Ingest(IngestArgs),
    /// Ingest and train the knowledge graph in one step.
    BuildKg(BuildKgArgs),
    /// Train the knowledge graph from previously ingested artifacts.
    TrainKg(TrainKgArgs),
    /// Run the full iterative refinement loop.
    Train(TrainArgs),
    /// Caption videos with a trained checkpoint.
    Caption(CaptionArgs),
    /// Score candidate captions against references.
    Evaluate(EvaluateArgs),
    /// Generate the deterministic toy dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Run configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Overwrite existing artifacts in the output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct BuildKgArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub force: bool,
    /// Override the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainKgArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub force: bool,
    /// Override the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CaptionArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Model checkpoint; defaults to the best checkpoint named by the run
    /// directory's manifest.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Comma-separated video ids; defaults to every annotated video.
    #[arg(long)]
    pub videos: Option<String>,
    /// Write the caption rows here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Candidate captions, one {"video_id", "caption"} JSON object per line.
    #[arg(long)]
    pub cand: PathBuf,
    /// References, one {"video_id", "refs": [...]} JSON object per line.
    #[arg(long)]
    pub refs: PathBuf,
    /// Write the report here as well as printing it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Seed for the generated features and configuration.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Directory to write the dataset into.
    #[arg(long)]
    pub out: PathBuf,
}

/// Runs one parsed subcommand.
pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Ingest(args) => cmd_ingest(args),
        Command::BuildKg(args) => cmd_build_kg(args),
        Command::TrainKg(args) => cmd_train_kg(args),
        Command::Train(args) => cmd_train(args),
        Command::Caption(args) => cmd_caption(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Synth(args) => cmd_synth(args),
    }
}

/// Exclusive-creation lock file in the run directory; removed on drop.
struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("run.lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut file) => {
                let _ = writeln!(file, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Argument(format!(
                    "run directory {} is locked by another process; remove {} if it is stale",
                    dir.display(),
                    path.display()
                )))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Refuses to overwrite a finished artifact unless `--force` was given.
fn refuse_existing(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Argument(format!(
            "{} already exists; pass --force to overwrite it",
            path.display()
        )));
    }
    Ok(())
}

/// Everything the corpus side of the pipeline produces in one pass.
struct PipelineInputs {
    vocab: ConceptVocabulary,
    triplets: Vec<Triplet>,
    sentences: usize,
    skipped: usize,
}

/// Parses the corpus, builds the pruned vocabulary, attaches embeddings, and
/// extracts the dependency triplets.
fn ingest_inputs(cfg: &RunConfig) -> Result<PipelineInputs> {
    let report = read_conllu_file(&cfg.corpus)?;
    for reason in &report.skip_reasons {
        log::warn!("corpus: {reason}");
    }
    let hypernyms = match &cfg.hypernyms {
        Some(path) => read_hypernym_pairs(path)?,
        None => Vec::new(),
    };
    let mut vocab = build_vocabulary(&report.sentences, &hypernyms)?;
    let (table, embed_report) = load_embeddings(&cfg.embeddings, &vocab)?;
    if !embed_report.missing.is_empty() {
        log::warn!(
            "no embedding for {} lemmas (zero vectors used): {}",
            embed_report.missing.len(),
            embed_report.missing.join(", ")
        );
    }
    vocab.attach_embeddings(table)?;

    let mut triplets = Vec::new();
    for sentence in &report.sentences {
        triplets.extend(extract_triplets(sentence));
    }
    if triplets.is_empty() {
        return Err(Error::Ingest(format!(
            "{} yields no dependency triplets",
            cfg.corpus.display()
        )));
    }
    Ok(PipelineInputs {
        vocab,
        triplets,
        sentences: report.sentences.len(),
        skipped: report.skipped,
    })
}

fn write_vocabulary(path: &Path, vocab: &ConceptVocabulary) -> Result<()> {
    let text =
        serde_json::to_string_pretty(vocab).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn read_vocabulary(path: &Path) -> Result<ConceptVocabulary> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Ingest(format!("cannot read {}: {e}", path.display())))?;
    let vocab: ConceptVocabulary = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if !vocab.has_embeddings() {
        return Err(Error::Vocab(format!(
            "{} carries no attached embeddings",
            path.display()
        )));
    }
    Ok(vocab)
}

/// Loads one video record per annotation row, with zeroed indicators.
fn load_videos(
    cfg: &RunConfig,
    vocab: &ConceptVocabulary,
) -> Result<BTreeMap<String, VideoRecord>> {
    let annotations = parse_annotations(&cfg.annotations)?;
    let mut out = BTreeMap::new();
    for (video_id, annotation) in annotations {
        let (fmap_obj, fmap_act, global) =
            load_video_features(&cfg.features, &video_id, cfg.shared_features)?;
        let record = VideoRecord {
            video_id: video_id.clone(),
            fmap_obj,
            fmap_act,
            global,
            annotation,
            ind_obj: vec![0; vocab.objects.len()],
            ind_act: vec![0; vocab.actions.len()],
        };
        record.validate(vocab)?;
        out.insert(video_id, record);
    }
    Ok(out)
}

/// One id per line; blank lines and `#` comments are skipped.
fn read_id_list(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Ingest(format!("cannot read {}: {e}", path.display())))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

/// Moves the listed ids out of `videos` into the returned validation map.
fn split_validation(
    videos: &mut BTreeMap<String, VideoRecord>,
    path: &Path,
) -> Result<BTreeMap<String, VideoRecord>> {
    let mut validation = BTreeMap::new();
    for id in read_id_list(path)? {
        let video = videos.remove(&id).ok_or_else(|| {
            Error::Config(format!(
                "key 'validation': video '{id}' is not an annotated video (or is listed twice)"
            ))
        })?;
        validation.insert(id, video);
    }
    if validation.is_empty() {
        return Err(Error::Config(format!(
            "key 'validation': {} lists no video ids",
            path.display()
        )));
    }
    if videos.is_empty() {
        return Err(Error::Config(
            "key 'validation': every annotated video is listed; none are left to train on"
                .into(),
        ));
    }
    Ok(validation)
}

#[derive(Deserialize)]
struct ReferenceRow {
    video_id: String,
    refs: Vec<String>,
}

/// Reads ground-truth references and tokenizes them for metric use.
fn read_references(path: &Path) -> Result<BTreeMap<String, Vec<Vec<String>>>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Ingest(format!("cannot read {}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: ReferenceRow = serde_json::from_str(line).map_err(|e| {
            Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        let refs: Vec<Vec<String>> =
            row.refs.iter().map(|r| tokenize(r)).filter(|t| !t.is_empty()).collect();
        if out.insert(row.video_id.clone(), refs).is_some() {
            return Err(Error::Format(format!(
                "{}:{}: duplicate references for video '{}'",
                path.display(),
                lineno + 1,
                row.video_id
            )));
        }
    }
    Ok(out)
}

fn kg_train_config(cfg: &RunConfig) -> KgTrainConfig {
    KgTrainConfig {
        dim: cfg.kg_dim,
        margin: cfg.kg_margin,
        negatives: cfg.kg_negatives,
        steps: cfg.kg_steps,
        learning_rate: cfg.kg_learning_rate,
        seed: cfg.seed,
    }
}

/// The configured link-score ceiling, calibrated from the trained graph when
/// the configuration says `auto`.
fn resolve_ceiling(cfg: &RunConfig, kg: &KgModel) -> Result<f64> {
    match cfg.s_max {
        Some(s) => Ok(s),
        None => {
            let ceiling = kg.calibrate_score_ceiling()?;
            log::info!("calibrated link-score ceiling: {ceiling:.6}");
            Ok(ceiling)
        }
    }
}

fn refine_config(cfg: &RunConfig, s_max: f64) -> RefineConfig {
    RefineConfig {
        thresholds: ConceptThresholds {
            confidence: cfg.confidence,
            consistency: cfg.consistency,
        },
        lambda: cfg.lambda,
        span: SpanConfig { s_max, max_nodes: cfg.max_nodes },
        hidden: cfg.hidden,
        beam: cfg.beam,
        t_max: cfg.t_max,
        epochs: cfg.epochs,
        learning_rate: cfg.learning_rate,
        max_iterations: cfg.max_iterations,
        patience: cfg.patience,
        seed: cfg.seed,
    }
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    write_toy_dataset(&args.out, args.seed)?;
    println!("wrote toy dataset (seed {}) to {}", args.seed, args.out.display());
    Ok(())
}

fn cmd_ingest(args: IngestArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    cfg.check_inputs()?;
    let vocab_path = cfg.output.join("vocabulary.json");
    let triplet_path = cfg.output.join("triplets.jsonl");
    refuse_existing(&vocab_path, args.force)?;
    refuse_existing(&triplet_path, args.force)?;
    let _lock = RunLock::acquire(&cfg.output)?;

    let inputs = ingest_inputs(&cfg)?;
    write_vocabulary(&vocab_path, &inputs.vocab)?;
    write_triplets_jsonl(&triplet_path, &inputs.triplets)?;
    println!(
        "ingested {} sentences ({} skipped): {} objects, {} actions, {} relations, {} triplets",
        inputs.sentences,
        inputs.skipped,
        inputs.vocab.objects.len(),
        inputs.vocab.actions.len(),
        inputs.vocab.relations.len(),
        inputs.triplets.len()
    );
    Ok(())
}

fn cmd_build_kg(args: BuildKgArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.check_inputs()?;
    let kg_path = cfg.output.join("kg.wckg");
    refuse_existing(&kg_path, args.force)?;
    let _lock = RunLock::acquire(&cfg.output)?;

    let inputs = ingest_inputs(&cfg)?;
    write_vocabulary(&cfg.output.join("vocabulary.json"), &inputs.vocab)?;
    write_triplets_jsonl(&cfg.output.join("triplets.jsonl"), &inputs.triplets)?;
    let kg = train_kg(&inputs.triplets, &inputs.vocab, &kg_train_config(&cfg))?;
    write_kg_checkpoint(&kg_path, &kg)?;
    println!(
        "trained knowledge graph over {} entities and {} relations; checkpoint at {}",
        kg.entities.len(),
        kg.relations.len(),
        kg_path.display()
    );
    Ok(())
}

fn cmd_train_kg(args: TrainKgArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let vocab_path = cfg.output.join("vocabulary.json");
    let triplet_path = cfg.output.join("triplets.jsonl");
    if !vocab_path.exists() || !triplet_path.exists() {
        return Err(Error::Argument(format!(
            "{} holds no ingested artifacts; run ingest (or build-kg) first",
            cfg.output.display()
        )));
    }
    let kg_path = cfg.output.join("kg.wckg");
    refuse_existing(&kg_path, args.force)?;
    let _lock = RunLock::acquire(&cfg.output)?;

    let vocab = read_vocabulary(&vocab_path)?;
    let triplets = read_triplets_jsonl(&triplet_path)?;
    let kg = train_kg(&triplets, &vocab, &kg_train_config(&cfg))?;
    write_kg_checkpoint(&kg_path, &kg)?;
    println!(
        "trained knowledge graph over {} entities and {} relations; checkpoint at {}",
        kg.entities.len(),
        kg.relations.len(),
        kg_path.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.check_inputs()?;
    let run_dir = cfg.output.clone();
    refuse_existing(&run_dir.join("manifest.json"), args.force)?;
    let _lock = RunLock::acquire(&run_dir)?;
    std::fs::write(run_dir.join("effective.cfg"), cfg.render())?;

    let inputs = ingest_inputs(&cfg)?;
    write_vocabulary(&run_dir.join("vocabulary.json"), &inputs.vocab)?;
    write_triplets_jsonl(&run_dir.join("triplets.jsonl"), &inputs.triplets)?;
    log::info!(
        "ingested {} sentences: {} objects, {} actions, {} relations, {} triplets",
        inputs.sentences,
        inputs.vocab.objects.len(),
        inputs.vocab.actions.len(),
        inputs.vocab.relations.len(),
        inputs.triplets.len()
    );

    let kg = train_kg(&inputs.triplets, &inputs.vocab, &kg_train_config(&cfg))?;
    write_kg_checkpoint(&run_dir.join("kg.wckg"), &kg)?;

    let mut videos = load_videos(&cfg, &inputs.vocab)?;
    let validation = match &cfg.validation {
        Some(path) => split_validation(&mut videos, path)?,
        None => {
            return Err(Error::Config(
                "key 'validation': training requires a validation id list".into(),
            ))
        }
    };
    let references = match &cfg.references {
        Some(path) => Some(read_references(path)?),
        None => None,
    };
    log::info!(
        "training on {} videos, validating on {}",
        videos.len(),
        validation.len()
    );

    let s_max = resolve_ceiling(&cfg, &kg)?;
    let refine_cfg = refine_config(&cfg, s_max);
    let mut session =
        RefineSession::new(&inputs.vocab, &kg, videos, validation, references, refine_cfg)?;
    let outcome = session.run(Some(&run_dir))?;
    println!(
        "finished after {} iterations; best iteration {} with validation CIDEr {:.4}",
        outcome.history.len(),
        outcome.best_iteration,
        outcome.best_cider
    );
    println!("artifacts in {}", run_dir.display());
    Ok(())
}

#[derive(Deserialize)]
struct ManifestIn {
    best_checkpoint: String,
}

fn cmd_caption(args: CaptionArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let run_dir = cfg.output.clone();

    let vocab_path = run_dir.join("vocabulary.json");
    let vocab = if vocab_path.exists() {
        read_vocabulary(&vocab_path)?
    } else {
        ingest_inputs(&cfg)?.vocab
    };

    let kg_path = run_dir.join("kg.wckg");
    if !kg_path.exists() {
        return Err(Error::Argument(format!(
            "no knowledge-graph checkpoint at {}; run train or build-kg first",
            kg_path.display()
        )));
    }
    let kg = read_kg_checkpoint(&kg_path)?;

    let model_path = match args.model {
        Some(path) => path,
        None => {
            let manifest_path = run_dir.join("manifest.json");
            let text = std::fs::read_to_string(&manifest_path).map_err(|e| {
                Error::Ingest(format!(
                    "cannot read {} (pass --model to name a checkpoint): {e}",
                    manifest_path.display()
                ))
            })?;
            let manifest: ManifestIn = serde_json::from_str(&text)
                .map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;
            run_dir.join(manifest.best_checkpoint)
        }
    };
    let checkpoint = read_model_checkpoint(&model_path)?;
    let (model, dictionary, _) = CaptionModel::from_checkpoint(&checkpoint)?;

    let mut videos = load_videos(&cfg, &vocab)?;
    let selected: Vec<String> = match &args.videos {
        Some(list) => list.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
        None => videos.keys().cloned().collect(),
    };
    if selected.is_empty() {
        return Err(Error::Argument("no videos selected to caption".into()));
    }

    let thresholds = ConceptThresholds {
        confidence: cfg.confidence,
        consistency: cfg.consistency,
    };
    let span = SpanConfig { s_max: resolve_ceiling(&cfg, &kg)?, max_nodes: cfg.max_nodes };
    let decode = DecodeConfig { beam: cfg.beam, max_len: cfg.t_max, seed: cfg.seed };

    let mut lines = String::new();
    for id in &selected {
        let video = videos.get_mut(id).ok_or_else(|| {
            Error::Argument(format!("video '{id}' carries no annotation row"))
        })?;
        if let Some(n) = video.annotation.noun() {
            video.ind_obj[vocab.object_index(n).expect("validated lemma")] = 1;
        }
        if let Some(v) = video.annotation.verb() {
            video.ind_act[vocab.action_index(v).expect("validated lemma")] = 1;
        }
        let (tokens, logprob) =
            caption_video(&model, &dictionary, &vocab, &kg, video, &thresholds, &span, &decode, &[])?;
        let row = serde_json::json!({
            "video_id": id,
            "caption": tokens.join(" "),
            "logprob": logprob,
        });
        lines.push_str(&row.to_string());
        lines.push('\n');
    }
    match &args.out {
        Some(path) => {
            std::fs::write(path, &lines)?;
            println!("wrote {} captions to {}", selected.len(), path.display());
        }
        None => print!("{lines}"),
    }
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let report = evaluate_files(&args.cand, &args.refs)?;
    let text =
        serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
    if let Some(path) = &args.out {
        std::fs::write(path, text.clone() + "\n")?;
    }
    println!("{text}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::EvalReport;

    fn parse(argv: &[&str]) -> std::result::Result<Cli, clap::Error> {
        Cli::try_parse_from(argv)
    }

    #[test]
    fn unknown_subcommand_is_a_usage_error() {
        let err = parse(&["weakcap", "frobnicate"]).unwrap_err();
        assert!(!matches!(
            err.kind(),
            clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
        ));

        let err = parse(&["weakcap", "train"]).unwrap_err();
        assert_eq!(err.kind(), clap::error::ErrorKind::MissingRequiredArgument);
    }

    #[test]
    fn evaluate_parses_without_a_config() {
        let cli = parse(&["weakcap", "evaluate", "--cand", "c.jsonl", "--refs", "r.jsonl"])
            .unwrap();
        match cli.command {
            Command::Evaluate(args) => {
                assert_eq!(args.cand, PathBuf::from("c.jsonl"));
                assert_eq!(args.refs, PathBuf::from("r.jsonl"));
                assert!(args.out.is_none());
            }
            other => panic!("parsed {other:?}"),
        }
    }

    #[test]
    fn lock_file_guards_the_run_directory() {
        let dir = tempfile::tempdir().unwrap();
        let lock = RunLock::acquire(dir.path()).unwrap();
        assert!(dir.path().join("run.lock").exists());

        let second = RunLock::acquire(dir.path());
        assert!(second.is_err());
        let err = second.err().unwrap();
        assert!(err.to_string().contains("locked"), "got: {err}");

        drop(lock);
        assert!(!dir.path().join("run.lock").exists());
        let third = RunLock::acquire(dir.path());
        assert!(third.is_ok());
    }

    #[test]
    fn existing_artifacts_require_force() {
        let dir = tempfile::tempdir().unwrap();
        let artifact = dir.path().join("kg.wckg");
        assert!(refuse_existing(&artifact, false).is_ok());
        std::fs::write(&artifact, b"x").unwrap();
        let err = refuse_existing(&artifact, false).unwrap_err();
        assert!(err.to_string().contains("--force"), "got: {err}");
        assert!(refuse_existing(&artifact, true).is_ok());
    }

    #[test]
    fn id_lists_skip_blanks_and_comments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ids.txt");
        std::fs::write(&path, "# validation split\nv01\n\n  v02  \n").unwrap();
        assert_eq!(read_id_list(&path).unwrap(), vec!["v01", "v02"]);
    }

    #[test]
    fn reference_rows_tokenize_and_reject_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("refs.jsonl");
        std::fs::write(
            &path,
            "{\"video_id\":\"v1\",\"refs\":[\"A man rides.\",\"a man rides a bike\"]}\n",
        )
        .unwrap();
        let refs = read_references(&path).unwrap();
        assert_eq!(refs["v1"][0], vec!["a", "man", "rides"]);
        assert_eq!(refs["v1"][1].len(), 5);

        std::fs::write(
            &path,
            "{\"video_id\":\"v1\",\"refs\":[\"a\"]}\n{\"video_id\":\"v1\",\"refs\":[\"b\"]}\n",
        )
        .unwrap();
        let err = read_references(&path).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "got: {err}");
    }

    #[test]
    fn evaluate_command_scores_identical_files_at_the_maximum() {
        let dir = tempfile::tempdir().unwrap();
        let cand = dir.path().join("cand.jsonl");
        let refs = dir.path().join("refs.jsonl");
        std::fs::write(
            &cand,
            "{\"video_id\":\"v1\",\"caption\":\"a man rides a bike\"}\n{\"video_id\":\"v2\",\"caption\":\"a dog runs\"}\n",
        )
        .unwrap();
        std::fs::write(
            &refs,
            "{\"video_id\":\"v1\",\"refs\":[\"a man rides a bike\"]}\n{\"video_id\":\"v2\",\"refs\":[\"a dog runs\"]}\n",
        )
        .unwrap();
        let out = dir.path().join("report.json");
        dispatch(Command::Evaluate(EvaluateArgs {
            cand,
            refs,
            out: Some(out.clone()),
        }))
        .unwrap();
        let report: EvalReport =
            serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
        assert_eq!(report.bleu4, 1.0);
        assert_eq!(report.rouge_l, 1.0);
    }

    #[test]
    fn synth_command_writes_the_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("toy");
        dispatch(Command::Synth(SynthArgs { seed: 7, out: out.clone() })).unwrap();
        assert!(out.join("toy.cfg").exists());
        assert!(out.join("corpus.conllu").exists());
        assert!(out.join("features").join("v00.wcfm").exists());
    }

    #[test]
    fn train_with_a_missing_config_is_a_data_error() {
        let err = dispatch(Command::Train(TrainArgs {
            config: PathBuf::from("/nonexistent/missing.cfg"),
            force: false,
            seed: None,
        }))
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
