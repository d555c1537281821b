//! Minibatch training with Adam, an exponentially decayed learning rate
//! and best-on-validation checkpoint selection.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use u2u_autodiff::{Graph, Tensor};

use crate::corpus::{make_batch, truncate_and_pad, DialogueExample, ShapedExample, Vocabulary};
use crate::error::{Error, Result};
use crate::metrics::RankedRun;
use crate::model::{loss, Model};
use crate::nn::{splitmix, Dropout};
use crate::params::{Checkpoint, Params};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    pub decay_rate: f64,
    pub decay_steps: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Validate every this many steps; 0 validates once per epoch.
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            lr0: 0.001,
            decay_rate: 0.96,
            decay_steps: 5000.0,
            dropout: 0.2,
            epochs: 10,
            seed: 1,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::Config { key: key.into(), msg: msg.into() });
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr", "must be positive");
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return bad("decay_rate", "must be in (0, 1]");
        }
        if !(self.decay_steps > 0.0) {
            return bad("decay_steps", "must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", "must be in [0, 1)");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be positive");
        }
        Ok(())
    }
}

/// `lr0 * decay_rate ^ (step / decay_steps)` with a continuous exponent.
pub fn learning_rate(cfg: &TrainConfig, step: u64) -> f64 {
    cfg.lr0 * cfg.decay_rate.powf(step as f64 / cfg.decay_steps)
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// One Adam update of every parameter that has a gradient. `step` is the
/// 1-based update count used for bias correction.
pub fn adam_step(
    params: &mut Params<f32>,
    grads: &BTreeMap<String, Tensor<f32>>,
    m: &mut BTreeMap<String, Tensor<f32>>,
    v: &mut BTreeMap<String, Tensor<f32>>,
    step: u64,
    lr: f64,
) -> Result<()> {
    let c1 = 1.0 - BETA1.powf(step as f64);
    let c2 = 1.0 - BETA2.powf(step as f64);
    for (name, grad) in grads {
        let p = params
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("gradient for unknown parameter `{name}`")))?;
        if !p.trainable {
            continue;
        }
        let shape = p.value.shape().to_vec();
        let mm = m.entry(name.clone()).or_insert_with(|| Tensor::zeros(&shape));
        let vv = v.entry(name.clone()).or_insert_with(|| Tensor::zeros(&shape));
        for (((w, &g), mi), vi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(mm.data_mut())
            .zip(vv.data_mut())
        {
            let g = g as f64;
            let m1 = BETA1 * *mi as f64 + (1.0 - BETA1) * g;
            let v1 = BETA2 * *vi as f64 + (1.0 - BETA2) * g * g;
            *mi = m1 as f32;
            *vi = v1 as f32;
            let update = lr * (m1 / c1) / ((v1 / c2).sqrt() + EPSILON);
            *w = (*w as f64 - update) as f32;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    /// The run configuration, written ahead of training records.
    Config {
        text: String,
    },
    Step {
        epoch: usize,
        step: u64,
        lr: f64,
        loss: f64,
    },
    Epoch {
        epoch: usize,
        step: u64,
        mean_loss: f64,
    },
    Eval {
        epoch: usize,
        step: u64,
        recall_at_1: f64,
        map: f64,
        mrr: f64,
        best: bool,
    },
}

impl LogRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("log records serialize")
    }
}

/// Validation data: consecutive groups of `candidates` examples.
pub struct EvalSet<'a> {
    pub examples: &'a [DialogueExample],
    pub candidates: usize,
}

pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub best_recall: Option<f64>,
    pub log: Vec<LogRecord>,
}

pub fn shape_all(model: &Model, examples: &[DialogueExample]) -> Vec<ShapedExample> {
    examples.iter().map(|e| truncate_and_pad(e, model.config.limits)).collect()
}

/// Scores in (0, 1) for `examples`, in order.
pub fn score_examples(
    model: &Model,
    params: &Params<f32>,
    vocab: &Vocabulary,
    examples: &[ShapedExample],
    batch_size: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size.max(1)) {
        let batch = make_batch(chunk, vocab)?;
        out.extend(model.score(params, &batch)?);
    }
    Ok(out)
}

/// Fraction of examples whose score falls on the side of 0.5 given by
/// the label.
pub fn accuracy(scores: &[f64], labels: &[u8]) -> f64 {
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|&(&s, &l)| (s > 0.5) == (l == 1))
        .count();
    hits as f64 / scores.len().max(1) as f64
}

/// Trains from `start` (fresh parameters or a resumed checkpoint).
/// `sink` receives every log record as it is produced.
pub fn train(
    model: &Model,
    cfg: &TrainConfig,
    vocab: &Vocabulary,
    data: &[DialogueExample],
    valid: Option<EvalSet<'_>>,
    start: Checkpoint,
    sink: &mut dyn FnMut(&LogRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let shaped = shape_all(model, data);
    let valid_shaped = valid.as_ref().map(|v| (shape_all(model, v.examples), v.candidates));
    let labels_valid: Vec<u8> = valid.as_ref().map_or(Vec::new(), |v| v.examples.iter().map(|e| e.label).collect());

    let mut state = start;
    let mut log = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut emit = |rec: LogRecord, log: &mut Vec<LogRecord>| -> Result<()> {
        sink(&rec)?;
        log.push(rec);
        Ok(())
    };

    let evaluate = |state: &Checkpoint, epoch: usize, best: &mut Option<(f64, Checkpoint)>| -> Result<Option<LogRecord>> {
        let Some((examples, n)) = &valid_shaped else { return Ok(None) };
        let scores = score_examples(model, &state.params, vocab, examples, cfg.batch_size)?;
        let run = RankedRun::from_groups(&scores, &labels_valid, *n)?;
        let r1 = run.recall_at_k(*n, 1)?.value;
        let improved = best.as_ref().is_none_or(|(b, _)| r1 > *b);
        if improved {
            *best = Some((r1, state.clone()));
        }
        Ok(Some(LogRecord::Eval {
            epoch,
            step: state.step,
            recall_at_1: r1,
            map: run.mean_average_precision().value,
            mrr: run.mean_reciprocal_rank().value,
            best: improved,
        }))
    };

    let mut order: Vec<usize> = (0..shaped.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed ^ splitmix(epoch as u64)));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let items: Vec<ShapedExample> = idx.iter().map(|&i| shaped[i].clone()).collect();
            let batch = make_batch(&items, vocab)?;
            let step = state.step + 1;
            let mut g = Graph::<f32>::new();
            let p = state.params.bind(&mut g);
            let mut dropout = Dropout::new(cfg.dropout, splitmix(cfg.seed ^ step.rotate_left(17)));
            let f = model.forward(&mut g, &p, &batch, &mut dropout)?;
            let l = loss(&mut g, f.logits, &batch.labels)?;
            let value = g.value(l).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite { step });
            }
            let grads = g.backprop(l)?;
            drop(g);
            let lr = learning_rate(cfg, state.step);
            adam_step(&mut state.params, &grads, &mut state.adam_m, &mut state.adam_v, step, lr)?;
            state.step = step;
            total += value;
            emit(LogRecord::Step { epoch, step, lr, loss: value }, &mut log)?;
            if cfg.eval_every > 0 && step.is_multiple_of(cfg.eval_every) {
                if let Some(rec) = evaluate(&state, epoch, &mut best)? {
                    emit(rec, &mut log)?;
                }
            }
        }
        emit(
            LogRecord::Epoch {
                epoch,
                step: state.step,
                mean_loss: total / shaped.len() as f64,
            },
            &mut log,
        )?;
        if cfg.eval_every == 0 {
            if let Some(rec) = evaluate(&state, epoch, &mut best)? {
                emit(rec, &mut log)?;
            }
        }
    }
    let (best_recall, best) = match best {
        Some((r, ck)) => (Some(r), ck),
        None => (None, state.clone()),
    };
    Ok(TrainOutcome {
        best,
        last: state,
        best_recall,
        log,
    })
}
