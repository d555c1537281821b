//! Training, evaluation and ablation runs driven by a [`RunConfig`].

use std::fmt::Write as _;
use std::path::Path;

use u2u_autodiff::Tensor;

use crate::config::RunConfig;
use crate::corpus::{read_dataset, DialogueExample, Vocabulary};
use crate::error::{Error, Result};
use crate::metrics::RankedRun;
use crate::model::{Model, Variant};
use crate::params::{Checkpoint, Params};
use crate::train::{score_examples, shape_all, train, EvalSet, LogRecord, TrainOutcome};
use crate::wordrep::load_pretrained;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    fn key(self) -> &'static str {
        match self {
            Split::Train => "data.train",
            Split::Valid => "data.valid",
            Split::Test => "data.test",
        }
    }
}

/// Reads a configured split; an unset path is a config error.
pub fn load_split(cfg: &RunConfig, split: Split) -> Result<Vec<DialogueExample>> {
    let path = match split {
        Split::Train => &cfg.data.train,
        Split::Valid => &cfg.data.valid,
        Split::Test => &cfg.data.test,
    };
    let path = path.as_ref().ok_or_else(|| Error::Config {
        key: split.key().into(),
        msg: "no path configured".into(),
    })?;
    if !path.exists() {
        return Err(Error::Config {
            key: split.key().into(),
            msg: format!("{} does not exist", path.display()),
        });
    }
    read_dataset(path, cfg.data.format)
}

/// The configured vocabulary file, or one built from `train`.
pub fn vocabulary(cfg: &RunConfig, train: &[DialogueExample]) -> Result<Vocabulary> {
    match &cfg.data.vocab {
        Some(p) => Vocabulary::load(p),
        None => Ok(Vocabulary::build(train, cfg.data.min_count)),
    }
}

pub fn pretrained(cfg: &RunConfig, vocab: &Vocabulary) -> Result<Option<Tensor<f32>>> {
    cfg.data
        .embeddings
        .as_ref()
        .map(|p| load_pretrained(p, vocab, Some(cfg.model.embedding.pretrained_dim), cfg.seed))
        .transpose()
}

/// `cfg` with the model settings of `variant` applied.
pub fn variant_config(cfg: &RunConfig, variant: Variant) -> RunConfig {
    RunConfig {
        model: variant.apply(&cfg.model),
        ..cfg.clone()
    }
}

/// Trains one model. The run configuration is stored in every
/// checkpoint so evaluation can rebuild the same model.
#[allow(clippy::too_many_arguments)]
pub fn train_model(
    cfg: &RunConfig,
    variant: Variant,
    vocab: &Vocabulary,
    pretrained: Option<Tensor<f32>>,
    data: &[DialogueExample],
    valid: Option<&[DialogueExample]>,
    resume: Option<Checkpoint>,
    sink: &mut dyn FnMut(&LogRecord) -> Result<()>,
) -> Result<(Model, TrainOutcome)> {
    let run_cfg = variant_config(cfg, variant);
    run_cfg.validate()?;
    let model = Model::new(run_cfg.model.clone())?;
    let fresh = model.init_params(vocab, pretrained, cfg.seed)?;
    let mut start = match resume {
        Some(ck) => {
            fresh.check_compatible(&ck.params)?;
            ck
        }
        None => Checkpoint {
            params: fresh,
            ..Default::default()
        },
    };
    start.config_text = run_cfg.to_text();
    start.meta.insert("variant".into(), variant.to_string());
    let valid = valid.map(|examples| EvalSet {
        examples,
        candidates: cfg.data.candidates,
    });
    let mut train_cfg = run_cfg.train.clone();
    train_cfg.seed = cfg.seed;
    let outcome = train(&model, &train_cfg, vocab, data, valid, start, sink)?;
    Ok((model, outcome))
}

/// Rebuilds the model stored in a checkpoint.
pub fn checkpoint_model(ck: &Checkpoint) -> Result<Model> {
    let cfg = RunConfig::parse(&ck.config_text)?;
    Model::new(cfg.model)
}

/// Checks that `params` fit `model` for `vocab`, naming the first
/// mismatching tensor.
pub fn check_params(model: &Model, vocab: &Vocabulary, params: &Params<f32>) -> Result<()> {
    model.init_params(vocab, None, 0)?.check_compatible(params)
}

/// Scores groups of `candidates` consecutive examples and ranks them.
pub fn evaluate(
    model: &Model,
    params: &Params<f32>,
    vocab: &Vocabulary,
    examples: &[DialogueExample],
    candidates: usize,
) -> Result<RankedRun> {
    let shaped = shape_all(model, examples);
    let scores = score_examples(model, params, vocab, &shaped, 256)?;
    let labels: Vec<u8> = examples.iter().map(|e| e.label).collect();
    RankedRun::from_groups(&scores, &labels, candidates)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    /// `(seed, R_n@1)` per run.
    pub recall: Vec<(u64, f64)>,
}

impl AblationRow {
    pub fn mean(&self) -> f64 {
        self.recall.iter().map(|r| r.1).sum::<f64>() / self.recall.len().max(1) as f64
    }
}

/// Trains and tests every variant once per seed. Uses the best
/// validation checkpoint when `valid` is given, the last one otherwise.
/// `on_run` sees each finished run and may persist it.
#[allow(clippy::too_many_arguments)]
pub fn ablate(
    cfg: &RunConfig,
    variants: &[Variant],
    seeds: &[u64],
    vocab: &Vocabulary,
    pretrained: Option<&Tensor<f32>>,
    data: &[DialogueExample],
    valid: Option<&[DialogueExample]>,
    test: &[DialogueExample],
    on_run: &mut dyn FnMut(Variant, u64, &Checkpoint, f64) -> Result<()>,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut row = AblationRow {
            variant,
            recall: Vec::new(),
        };
        for &seed in seeds {
            let run_cfg = RunConfig { seed, ..cfg.clone() };
            let (model, out) = train_model(
                &run_cfg,
                variant,
                vocab,
                pretrained.cloned(),
                data,
                valid,
                None,
                &mut |_| Ok(()),
            )?;
            let ck = if valid.is_some() { out.best } else { out.last };
            let run = evaluate(&model, &ck.params, vocab, test, cfg.data.candidates)?;
            let r1 = run.recall_at_k(cfg.data.candidates, 1)?.value;
            on_run(variant, seed, &ck, r1)?;
            row.recall.push((seed, r1));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// One line per variant: mean and per-seed `R_n@1`.
pub fn ablation_table(rows: &[AblationRow], n: usize) -> String {
    let mut s = String::new();
    let _ = write!(s, "{:<10} {:>8}", "variant", format!("R{n}@1"));
    if let Some(r) = rows.first() {
        for (seed, _) in &r.recall {
            let _ = write!(s, " {:>8}", format!("seed {seed}"));
        }
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{:<10} {:>8.3}", r.variant.to_string(), r.mean());
        for (_, v) in &r.recall {
            let _ = write!(s, " {v:>8.3}");
        }
        s.push('\n');
    }
    s
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
