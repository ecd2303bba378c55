//! Run configuration: a UTF-8 `key = value` file with `#` comments.
//!
//! Unknown or duplicate keys are hard errors — a silently ignored typo in a
//! hyperparameter would invalidate an experiment. Relative paths are resolved
//! against the directory containing the config file, so a dataset directory
//! with its config travels as a unit. [`RunConfig::render`] writes the
//! defaults-resolved form back out; reloading that file reproduces the run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::{Error, Result};

/// Everything a pipeline run needs: input locations plus hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Dependency-parsed corpus (CoNLL-U).
    pub corpus: PathBuf,
    /// Word-embedding text file (`word v1 .. vh` lines).
    pub embeddings: PathBuf,
    /// Directory of per-video feature files.
    pub features: PathBuf,
    /// Weak-annotation TSV (`video_id<TAB>lemma<TAB>o|a`).
    pub annotations: PathBuf,
    /// Optional `(hypernym, hyponym)` pairs for vocabulary pruning.
    pub hypernyms: Option<PathBuf>,
    /// Optional list of validation video ids, one per line.
    pub validation: Option<PathBuf>,
    /// Optional ground-truth references (JSON-lines) for validation scoring.
    pub references: Option<PathBuf>,
    /// Run directory for checkpoints, history, and caption dumps.
    pub output: PathBuf,
    /// One feature map serves both streams (tag `s`) instead of `o`/`a` pairs.
    pub shared_features: bool,

    /// Confidence threshold a concept probability must reach to count as
    /// grounded.
    pub confidence: f64,
    /// Spatial-consistency ceiling on the total-variation distance between
    /// object and action attention.
    pub consistency: f64,
    /// Weight of the concept loss inside the total objective.
    pub lambda: f64,

    /// Link-score ceiling for tree spanning; `None` (key value `auto`)
    /// calibrates it from the trained graph's own triplet scores.
    pub s_max: Option<f64>,
    /// Node budget per spanned tree.
    pub max_nodes: usize,

    /// Knowledge-graph embedding dimension.
    pub kg_dim: usize,
    /// Margin separating plausible from corrupted link scores.
    pub kg_margin: f64,
    /// Corrupted samples per positive triplet.
    pub kg_negatives: usize,
    /// Knowledge-graph training steps.
    pub kg_steps: usize,
    pub kg_learning_rate: f64,

    /// Decoder hidden width.
    pub hidden: usize,
    pub beam: usize,
    /// Caption length ceiling.
    pub t_max: usize,
    /// Fine-tuning epochs per refinement iteration.
    pub epochs: usize,
    /// Fine-tuning learning rate.
    pub learning_rate: f64,
    pub max_iterations: usize,
    /// Consecutive non-improving iterations tolerated before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: PathBuf::new(),
            embeddings: PathBuf::new(),
            features: PathBuf::new(),
            annotations: PathBuf::new(),
            hypernyms: None,
            validation: None,
            references: None,
            output: PathBuf::from("run"),
            shared_features: false,
            confidence: 0.99,
            consistency: 0.1,
            lambda: 0.1,
            s_max: None,
            max_nodes: 6,
            kg_dim: 64,
            kg_margin: 6.0,
            kg_negatives: 4,
            kg_steps: 2000,
            kg_learning_rate: 0.05,
            hidden: 512,
            beam: 5,
            t_max: 20,
            epochs: 3,
            learning_rate: 1e-4,
            max_iterations: 20,
            patience: 1,
            seed: 7,
        }
    }
}

/// Key order used when rendering; also the closed set of legal keys.
const KEYS: &[&str] = &[
    "corpus",
    "embeddings",
    "features",
    "annotations",
    "hypernyms",
    "validation",
    "references",
    "output",
    "shared_features",
    "confidence",
    "consistency",
    "lambda",
    "s_max",
    "max_nodes",
    "kg_dim",
    "kg_margin",
    "kg_negatives",
    "kg_steps",
    "kg_learning_rate",
    "hidden",
    "beam",
    "t_max",
    "epochs",
    "learning_rate",
    "max_iterations",
    "patience",
    "seed",
];

fn bad(key: &str, detail: impl std::fmt::Display) -> Error {
    Error::Config(format!("key '{key}': {detail}"))
}

impl RunConfig {
    /// Parses config text. Paths are kept verbatim; see [`load_config`] for
    /// resolution against the file's directory.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<&str> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected 'key = value', found {raw:?}",
                    lineno + 1
                )));
            };
            let (key, value) = (key.trim(), value.trim());
            let Some(&canonical) = KEYS.iter().find(|k| **k == key) else {
                return Err(Error::Config(format!("unknown key '{key}'")));
            };
            if seen.contains(&canonical) {
                return Err(Error::Config(format!("duplicate key '{key}'")));
            }
            seen.push(canonical);
            if value.is_empty() {
                return Err(bad(key, "empty value"));
            }
            cfg.assign(key, value)?;
        }
        for required in ["corpus", "embeddings", "features", "annotations"] {
            if !seen.contains(&required) {
                return Err(Error::Config(format!("missing required key '{required}'")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn assign(&mut self, key: &str, value: &str) -> Result<()> {
        let float = |v: &str| {
            v.parse::<f64>().map_err(|_| bad(key, format_args!("not a number: {v:?}")))
        };
        let count = |v: &str| {
            v.parse::<usize>().map_err(|_| bad(key, format_args!("not a count: {v:?}")))
        };
        match key {
            "corpus" => self.corpus = PathBuf::from(value),
            "embeddings" => self.embeddings = PathBuf::from(value),
            "features" => self.features = PathBuf::from(value),
            "annotations" => self.annotations = PathBuf::from(value),
            "hypernyms" => self.hypernyms = Some(PathBuf::from(value)),
            "validation" => self.validation = Some(PathBuf::from(value)),
            "references" => self.references = Some(PathBuf::from(value)),
            "output" => self.output = PathBuf::from(value),
            "shared_features" => {
                self.shared_features = match value {
                    "true" => true,
                    "false" => false,
                    other => return Err(bad(key, format_args!("expected true/false: {other:?}"))),
                }
            }
            "confidence" => self.confidence = float(value)?,
            "consistency" => self.consistency = float(value)?,
            "lambda" => self.lambda = float(value)?,
            "s_max" => {
                self.s_max = if value == "auto" { None } else { Some(float(value)?) }
            }
            "max_nodes" => self.max_nodes = count(value)?,
            "kg_dim" => self.kg_dim = count(value)?,
            "kg_margin" => self.kg_margin = float(value)?,
            "kg_negatives" => self.kg_negatives = count(value)?,
            "kg_steps" => self.kg_steps = count(value)?,
            "kg_learning_rate" => self.kg_learning_rate = float(value)?,
            "hidden" => self.hidden = count(value)?,
            "beam" => self.beam = count(value)?,
            "t_max" => self.t_max = count(value)?,
            "epochs" => self.epochs = count(value)?,
            "learning_rate" => self.learning_rate = float(value)?,
            "max_iterations" => self.max_iterations = count(value)?,
            "patience" => self.patience = count(value)?,
            "seed" => {
                self.seed = value
                    .parse::<u64>()
                    .map_err(|_| bad(key, format_args!("not a seed: {value:?}")))?
            }
            other => unreachable!("key '{other}' passed the known-key filter"),
        }
        Ok(())
    }

    /// Range checks; every violation names its key.
    pub fn validate(&self) -> Result<()> {
        let within = |key, v: f64, lo: f64, hi: f64| {
            if !(v >= lo && v <= hi) {
                return Err(bad(key, format_args!("{v} outside [{lo}, {hi}]")));
            }
            Ok(())
        };
        let positive_count = |key, v: usize| {
            if v == 0 {
                return Err(bad(key, "must be at least 1"));
            }
            Ok(())
        };
        let positive = |key, v: f64| {
            if !(v > 0.0 && v.is_finite()) {
                return Err(bad(key, format_args!("{v} is not a positive number")));
            }
            Ok(())
        };
        within("confidence", self.confidence, 0.0, 1.0)?;
        within("consistency", self.consistency, 0.0, 1.0)?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(bad("lambda", "must be a finite non-negative number"));
        }
        if let Some(s) = self.s_max {
            if !s.is_finite() {
                return Err(bad("s_max", "must be finite or 'auto'"));
            }
        }
        positive_count("max_nodes", self.max_nodes)?;
        positive_count("kg_dim", self.kg_dim)?;
        positive("kg_margin", self.kg_margin)?;
        positive_count("kg_negatives", self.kg_negatives)?;
        positive_count("kg_steps", self.kg_steps)?;
        positive("kg_learning_rate", self.kg_learning_rate)?;
        positive_count("hidden", self.hidden)?;
        positive_count("beam", self.beam)?;
        positive_count("t_max", self.t_max)?;
        positive_count("epochs", self.epochs)?;
        positive("learning_rate", self.learning_rate)?;
        positive_count("max_iterations", self.max_iterations)?;
        Ok(())
    }

    /// Resolves every relative path against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&p);
            }
        };
        resolve(&mut self.corpus);
        resolve(&mut self.embeddings);
        resolve(&mut self.features);
        resolve(&mut self.annotations);
        if let Some(p) = self.hypernyms.as_mut() {
            resolve(p);
        }
        if let Some(p) = self.validation.as_mut() {
            resolve(p);
        }
        if let Some(p) = self.references.as_mut() {
            resolve(p);
        }
        resolve(&mut self.output);
    }

    /// Errors (naming the key) for any input path that does not exist.
    /// The output directory is exempt — runs create it.
    pub fn check_inputs(&self) -> Result<()> {
        let mut probes: Vec<(&str, &PathBuf)> = vec![
            ("corpus", &self.corpus),
            ("embeddings", &self.embeddings),
            ("features", &self.features),
            ("annotations", &self.annotations),
        ];
        if let Some(p) = &self.hypernyms {
            probes.push(("hypernyms", p));
        }
        if let Some(p) = &self.validation {
            probes.push(("validation", p));
        }
        if let Some(p) = &self.references {
            probes.push(("references", p));
        }
        for (key, path) in probes {
            if !path.exists() {
                return Err(bad(key, format_args!("path does not exist: {}", path.display())));
            }
        }
        Ok(())
    }

    /// The full `key = value` form, defaults resolved, in fixed key order.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let path = |p: &PathBuf| p.display().to_string();
        for &key in KEYS {
            let value = match key {
                "corpus" => Some(path(&self.corpus)),
                "embeddings" => Some(path(&self.embeddings)),
                "features" => Some(path(&self.features)),
                "annotations" => Some(path(&self.annotations)),
                "hypernyms" => self.hypernyms.as_ref().map(path),
                "validation" => self.validation.as_ref().map(path),
                "references" => self.references.as_ref().map(path),
                "output" => Some(path(&self.output)),
                "shared_features" => Some(self.shared_features.to_string()),
                "confidence" => Some(self.confidence.to_string()),
                "consistency" => Some(self.consistency.to_string()),
                "lambda" => Some(self.lambda.to_string()),
                "s_max" => Some(self.s_max.map_or_else(|| "auto".into(), |s| s.to_string())),
                "max_nodes" => Some(self.max_nodes.to_string()),
                "kg_dim" => Some(self.kg_dim.to_string()),
                "kg_margin" => Some(self.kg_margin.to_string()),
                "kg_negatives" => Some(self.kg_negatives.to_string()),
                "kg_steps" => Some(self.kg_steps.to_string()),
                "kg_learning_rate" => Some(self.kg_learning_rate.to_string()),
                "hidden" => Some(self.hidden.to_string()),
                "beam" => Some(self.beam.to_string()),
                "t_max" => Some(self.t_max.to_string()),
                "epochs" => Some(self.epochs.to_string()),
                "learning_rate" => Some(self.learning_rate.to_string()),
                "max_iterations" => Some(self.max_iterations.to_string()),
                "patience" => Some(self.patience.to_string()),
                "seed" => Some(self.seed.to_string()),
                other => unreachable!("unrendered key '{other}'"),
            };
            if let Some(v) = value {
                writeln!(out, "{key} = {v}").expect("writing to a String cannot fail");
            }
        }
        out
    }
}

/// Reads, parses, and path-resolves a config file. Input existence is NOT
/// checked here; commands that consume the inputs call
/// [`RunConfig::check_inputs`].
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = RunConfig::parse(&text)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    cfg.resolve_paths(base);
    Ok(cfg)
}
