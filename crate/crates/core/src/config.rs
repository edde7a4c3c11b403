//! Run configuration: model, training and path settings read from a flat
//! `key = value` file, then overridden key by key.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::diff::{Precision, SquashKind};
use crate::error::{Error, Result};
use crate::model::{Architecture, LossKind, ModelConfig};
use crate::train::TrainConfig;

pub const SEED_ENV: &str = "CAPSTEXT_SEED";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: PathBuf,
    pub min_count: usize,
    /// Train on single-label documents only, evaluate multi-label.
    pub transfer: bool,
    /// Sequence length; derived from the training split when unset.
    pub max_len: Option<usize>,
    seed_set: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: None,
            embeddings: None,
            checkpoint: None,
            out: PathBuf::from("out"),
            min_count: 1,
            transfer: false,
            max_len: None,
            seed_set: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Recognized keys, in the order they are echoed.
    pub const KEYS: &'static [&'static str] = &[
        "arch",
        "embed_dim",
        "ngram_sizes",
        "filters",
        "channels",
        "capsule_dim",
        "conv_window",
        "conv_parents",
        "orphan",
        "shared_weights",
        "routing_iters",
        "leaky",
        "amend",
        "baseline_routing",
        "loss",
        "squash",
        "max_len",
        "threshold",
        "seed",
        "trainable_embeddings",
        "learning_rate",
        "batch_size",
        "epochs",
        "shuffle",
        "precision",
        "data",
        "embeddings",
        "checkpoint",
        "out",
        "min_count",
        "transfer",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let m = &mut self.model;
        match key {
            "arch" => m.arch = Architecture::from_str(value)?,
            "embed_dim" => m.embed_dim = parse(key, value)?,
            "ngram_sizes" => m.ngram_sizes = parse_list(key, value)?,
            "filters" => m.filters = parse(key, value)?,
            "channels" => m.channels = parse(key, value)?,
            "capsule_dim" => m.capsule_dim = parse(key, value)?,
            "conv_window" => m.conv_window = parse(key, value)?,
            "conv_parents" => m.conv_parents = parse(key, value)?,
            "orphan" => m.orphan = parse_bool(key, value)?,
            "shared_weights" => m.shared_weights = parse_bool(key, value)?,
            "routing_iters" => m.routing.iterations = parse(key, value)?,
            "leaky" => m.routing.leaky = parse_bool(key, value)?,
            "amend" => m.routing.amend = parse_bool(key, value)?,
            "baseline_routing" => m.routing.baseline = parse_bool(key, value)?,
            "loss" => m.loss = LossKind::from_str(value)?,
            "squash" => m.squash = SquashKind::from_str(value)?,
            "max_len" => {
                self.max_len = if value == "auto" { None } else { Some(parse(key, value)?) };
            }
            "threshold" => m.threshold = parse(key, value)?,
            "seed" => {
                let seed = parse(key, value)?;
                m.seed = seed;
                self.train.seed = seed;
                self.seed_set = true;
            }
            "trainable_embeddings" => m.trainable_embeddings = parse_bool(key, value)?,
            "learning_rate" => self.train.learning_rate = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "epochs" => self.train.epochs = parse(key, value)?,
            "shuffle" => self.train.shuffle = parse_bool(key, value)?,
            "precision" => self.train.precision = Precision::from_str(value)?,
            "data" => self.data = optional_path(value),
            "embeddings" => self.embeddings = optional_path(value),
            "checkpoint" => self.checkpoint = optional_path(value),
            "out" => self.out = PathBuf::from(value),
            "min_count" => self.min_count = parse(key, value)?,
            "transfer" => self.transfer = parse_bool(key, value)?,
            _ => return Err(Error::Config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        let path = |p: &Option<PathBuf>| p.as_ref().map_or(String::new(), |p| p.display().to_string());
        Some(match key {
            "arch" => m.arch.to_string(),
            "embed_dim" => m.embed_dim.to_string(),
            "ngram_sizes" => join(&m.ngrams()),
            "filters" => m.filters.to_string(),
            "channels" => m.channels.to_string(),
            "capsule_dim" => m.capsule_dim.to_string(),
            "conv_window" => m.conv_window.to_string(),
            "conv_parents" => m.conv_parents.to_string(),
            "orphan" => m.orphan.to_string(),
            "shared_weights" => m.shared_weights.to_string(),
            "routing_iters" => m.routing.iterations.to_string(),
            "leaky" => m.routing.leaky.to_string(),
            "amend" => m.routing.amend.to_string(),
            "baseline_routing" => m.routing.baseline.to_string(),
            "loss" => m.loss.to_string(),
            "squash" => m.squash.to_string(),
            "max_len" => self.max_len.map_or("auto".into(), |l| l.to_string()),
            "threshold" => m.threshold.to_string(),
            "seed" => m.seed.to_string(),
            "trainable_embeddings" => m.trainable_embeddings.to_string(),
            "learning_rate" => self.train.learning_rate.to_string(),
            "batch_size" => self.train.batch_size.to_string(),
            "epochs" => self.train.epochs.to_string(),
            "shuffle" => self.train.shuffle.to_string(),
            "precision" => match self.train.precision {
                Precision::F32 => "f32".into(),
                Precision::F64 => "f64".into(),
            },
            "data" => path(&self.data),
            "embeddings" => path(&self.embeddings),
            "checkpoint" => path(&self.checkpoint),
            "out" => self.out.display().to_string(),
            "min_count" => self.min_count.to_string(),
            "transfer" => self.transfer.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fmt_err = |msg: String| Error::Format { path: origin.to_path_buf(), line: i + 1, msg };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| fmt_err(format!("expected \"key = value\", got {line:?}")))?;
            self.set(key.trim(), value).map_err(|e| fmt_err(e.to_string()))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text, path)?;
        Ok(cfg)
    }

    pub fn seed_is_set(&self) -> bool {
        self.seed_set
    }

    /// Takes the seed from `env_value` unless one was given explicitly.
    pub fn seed_fallback(&mut self, env_value: Option<&str>) -> Result<()> {
        if self.seed_set {
            return Ok(());
        }
        if let Some(v) = env_value {
            self.set("seed", v).map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not a valid seed")))?;
        }
        Ok(())
    }

    /// Every key with its resolved value, in the file format.
    pub fn render(&self) -> String {
        let mut out = String::new();
        if !self.model.categories.is_empty() {
            let _ = writeln!(out, "# categories: {}", self.model.categories.join(","));
        }
        for key in Self::KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).unwrap_or_default());
        }
        out
    }
}
