//! Run configuration as a flat `key = value` text file.
//!
//! Blank lines and `#` comments are ignored, every other line is one
//! assignment. `version` must be present; unknown and repeated keys are
//! rejected. Keys not mentioned keep their defaults. Any key can be
//! overridden from the environment as `U2U_` followed by the key in upper
//! case with dots replaced by underscores (`train.lr` -> `U2U_TRAIN_LR`).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::aggregator::ResponseAggregation;
use crate::corpus::LineFormat;
use crate::error::{Error, Result};
use crate::matcher::MatchMode;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;
pub const ENV_PREFIX: &str = "U2U_";

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub format: LineFormat,
    /// Built from the training data when absent.
    pub vocab: Option<PathBuf>,
    /// Pretrained vectors; synthesized when absent.
    pub embeddings: Option<PathBuf>,
    /// Candidates per context in validation and test files.
    pub candidates: usize,
    pub min_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: None,
            valid: None,
            test: None,
            format: LineFormat::V2,
            vocab: None,
            embeddings: None,
            candidates: 10,
            min_count: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            output_dir: PathBuf::from("run"),
        }
    }
}

const KEYS: &[&str] = &[
    "version",
    "seed",
    "data.train",
    "data.valid",
    "data.test",
    "data.format",
    "data.vocab",
    "data.embeddings",
    "data.candidates",
    "data.min_count",
    "limits.max_word_len",
    "limits.max_utt_len",
    "limits.max_ctx_utts",
    "limits.max_resp_utts",
    "embed.pretrained_dim",
    "embed.task_dim",
    "embed.char_dim",
    "embed.char_windows",
    "embed.char_filters",
    "embed.use_chars",
    "model.hidden",
    "model.mlp_hidden",
    "model.join_response",
    "match.mode",
    "match.c2r",
    "match.r2c",
    "match.prior",
    "agg.response",
    "train.batch_size",
    "train.lr",
    "train.decay_rate",
    "train.decay_steps",
    "train.dropout",
    "train.epochs",
    "train.eval_every",
    "output.dir",
];

fn err(key: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        msg: msg.into(),
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| err(key, format!("invalid number `{v}`")))
}

fn real(key: &str, v: &str) -> Result<f64> {
    let x: f64 = num(key, v)?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(err(key, format!("must be finite, got `{v}`")))
    }
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(err(key, format!("expected true or false, got `{v}`"))),
    }
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or(String::new(), |p| p.display().to_string())
}

impl RunConfig {
    /// Small model and schedule for synthetic data on a CPU.
    pub fn desk() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            train: TrainConfig {
                batch_size: 32,
                lr0: 0.002,
                dropout: 0.1,
                epochs: 25,
                ..TrainConfig::default()
            },
            ..RunConfig::default()
        }
    }

    pub fn keys() -> &'static [&'static str] {
        KEYS
    }

    pub fn env_name(key: &str) -> String {
        format!("{ENV_PREFIX}{}", key.to_uppercase().replace('.', "_"))
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "version" => {
                let ver: u32 = num(key, v)?;
                if ver != CONFIG_VERSION {
                    return Err(err(key, format!("unsupported version {ver} (expected {CONFIG_VERSION})")));
                }
            }
            "seed" => {
                self.seed = num(key, v)?;
                t.seed = self.seed;
            }
            "data.train" => d.train = path(v),
            "data.valid" => d.valid = path(v),
            "data.test" => d.test = path(v),
            "data.format" => {
                d.format = match v {
                    "v2" => LineFormat::V2,
                    "tsv" => LineFormat::Tsv,
                    _ => return Err(err(key, format!("expected v2 or tsv, got `{v}`"))),
                }
            }
            "data.vocab" => d.vocab = path(v),
            "data.embeddings" => d.embeddings = path(v),
            "data.candidates" => d.candidates = num(key, v)?,
            "data.min_count" => d.min_count = num(key, v)?,
            "limits.max_word_len" => m.limits.max_word_len = num(key, v)?,
            "limits.max_utt_len" => m.limits.max_utt_len = num(key, v)?,
            "limits.max_ctx_utts" => m.limits.max_ctx_utts = num(key, v)?,
            "limits.max_resp_utts" => m.limits.max_resp_utts = num(key, v)?,
            "embed.pretrained_dim" => m.embedding.pretrained_dim = num(key, v)?,
            "embed.task_dim" => m.embedding.task_dim = num(key, v)?,
            "embed.char_dim" => m.embedding.char_embed_dim = num(key, v)?,
            "embed.char_windows" => {
                m.embedding.char_windows = v
                    .split(',')
                    .map(|w| num(key, w.trim()))
                    .collect::<Result<Vec<usize>>>()?
            }
            "embed.char_filters" => m.embedding.char_filters = num(key, v)?,
            "embed.use_chars" => m.embedding.use_chars = flag(key, v)?,
            "model.hidden" => m.hidden = num(key, v)?,
            "model.mlp_hidden" => m.mlp_hidden = num(key, v)?,
            "model.join_response" => m.join_response = flag(key, v)?,
            "match.mode" => {
                m.matching.mode = match v {
                    "global" => MatchMode::Global,
                    "local" => MatchMode::Local,
                    _ => return Err(err(key, format!("expected global or local, got `{v}`"))),
                }
            }
            "match.c2r" => m.matching.c2r = flag(key, v)?,
            "match.r2c" => m.matching.r2c = flag(key, v)?,
            "match.prior" => m.matching.use_distance_prior = flag(key, v)?,
            "agg.response" => {
                m.response_aggregation = match v {
                    "attention" => ResponseAggregation::Attention,
                    "rnn" => ResponseAggregation::Rnn,
                    _ => return Err(err(key, format!("expected attention or rnn, got `{v}`"))),
                }
            }
            "train.batch_size" => t.batch_size = num(key, v)?,
            "train.lr" => t.lr0 = real(key, v)?,
            "train.decay_rate" => t.decay_rate = real(key, v)?,
            "train.decay_steps" => t.decay_steps = real(key, v)?,
            "train.dropout" => t.dropout = real(key, v)?,
            "train.epochs" => t.epochs = num(key, v)?,
            "train.eval_every" => t.eval_every = num(key, v)?,
            "output.dir" => {
                self.output_dir = path(v).ok_or_else(|| err(key, "must not be empty"))?;
            }
            _ => return Err(err(key, "unknown key")),
        }
        Ok(())
    }

    /// Parses config text on top of [`RunConfig::default`].
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_over(RunConfig::default(), text)
    }

    /// Parses config text on top of `base`.
    pub fn parse_over(base: RunConfig, text: &str) -> Result<Self> {
        let mut cfg = base;
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(i + 1, format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.iter().any(|k| k == key) {
                return Err(Error::parse(i + 1, format!("key `{key}` set twice")));
            }
            cfg.set(key, value).map_err(|e| match e {
                Error::Config { key, msg } => Error::Config {
                    key,
                    msg: format!("{msg} (line {})", i + 1),
                },
                other => other,
            })?;
            seen.push(key.to_string());
        }
        if !seen.iter().any(|k| k == "version") {
            return Err(err("version", "missing"));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths in it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let dir = match path.parent().filter(|d| !d.as_os_str().is_empty()) {
            Some(d) => std::path::absolute(d),
            None => std::env::current_dir(),
        }
        .map_err(|e| Error::io(path, e))?;
        cfg.resolve_paths(&dir);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, dir: &Path) {
        let d = &mut self.data;
        for p in [&mut d.train, &mut d.valid, &mut d.test, &mut d.vocab, &mut d.embeddings].into_iter().flatten() {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        if self.output_dir.is_relative() {
            self.output_dir = dir.join(&self.output_dir);
        }
    }

    /// Applies `U2U_*` overrides; unknown names with the prefix are rejected.
    pub fn apply_env<I>(&mut self, vars: I) -> Result<()>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        for (name, value) in vars {
            if !name.starts_with(ENV_PREFIX) {
                continue;
            }
            let key = KEYS
                .iter()
                .find(|k| Self::env_name(k) == name)
                .ok_or_else(|| err(&name, "environment override does not name a config key"))?;
            self.set(key, value.trim())?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.candidates < 2 {
            return Err(err("data.candidates", "need at least 2 candidates per context"));
        }
        Ok(())
    }

    /// Canonical text with every key, parseable by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let d = &self.data;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("version", CONFIG_VERSION.to_string());
        put("seed", self.seed.to_string());
        put("data.train", show_path(&d.train));
        put("data.valid", show_path(&d.valid));
        put("data.test", show_path(&d.test));
        put("data.format", match d.format {
            LineFormat::V2 => "v2".into(),
            LineFormat::Tsv => "tsv".into(),
        });
        put("data.vocab", show_path(&d.vocab));
        put("data.embeddings", show_path(&d.embeddings));
        put("data.candidates", d.candidates.to_string());
        put("data.min_count", d.min_count.to_string());
        put("limits.max_word_len", m.limits.max_word_len.to_string());
        put("limits.max_utt_len", m.limits.max_utt_len.to_string());
        put("limits.max_ctx_utts", m.limits.max_ctx_utts.to_string());
        put("limits.max_resp_utts", m.limits.max_resp_utts.to_string());
        put("embed.pretrained_dim", m.embedding.pretrained_dim.to_string());
        put("embed.task_dim", m.embedding.task_dim.to_string());
        put("embed.char_dim", m.embedding.char_embed_dim.to_string());
        put(
            "embed.char_windows",
            m.embedding.char_windows.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
        );
        put("embed.char_filters", m.embedding.char_filters.to_string());
        put("embed.use_chars", m.embedding.use_chars.to_string());
        put("model.hidden", m.hidden.to_string());
        put("model.mlp_hidden", m.mlp_hidden.to_string());
        put("model.join_response", m.join_response.to_string());
        put("match.mode", match m.matching.mode {
            MatchMode::Global => "global".into(),
            MatchMode::Local => "local".into(),
        });
        put("match.c2r", m.matching.c2r.to_string());
        put("match.r2c", m.matching.r2c.to_string());
        put("match.prior", m.matching.use_distance_prior.to_string());
        put("agg.response", match m.response_aggregation {
            ResponseAggregation::Attention => "attention".into(),
            ResponseAggregation::Rnn => "rnn".into(),
        });
        put("train.batch_size", t.batch_size.to_string());
        put("train.lr", t.lr0.to_string());
        put("train.decay_rate", t.decay_rate.to_string());
        put("train.decay_steps", t.decay_steps.to_string());
        put("train.dropout", t.dropout.to_string());
        put("train.epochs", t.epochs.to_string());
        put("train.eval_every", t.eval_every.to_string());
        put("output.dir", self.output_dir.display().to_string());
        s
    }
}
