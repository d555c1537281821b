//! Shared fixtures for the integration tests.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use u2u_autodiff::{grad_check, GradCheckReport, Graph, Tensor, TensorError, Var};
use u2u_imn::aggregator::{self, ResponseAggregation};
use u2u_imn::corpus::{make_batch, truncate_and_pad, DialogueExample, Limits, Vocabulary};
use u2u_imn::layout::UttLayout;
use u2u_imn::matcher::{self, MatchConfig};
use u2u_imn::model::{init_mlp, mlp};
use u2u_imn::nn::{bilstm, glorot, init_bilstm, uniform, Dropout};
use u2u_imn::params::{Bound, Params};
use u2u_imn::wordrep::{char_cnn, EmbeddingConfig, CHAR_TABLE};
use u2u_imn::{encoder, Error};

pub const H: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;
pub const SEEDS: u64 = 10;

fn tensor_err(e: Error) -> TensorError {
    match e {
        Error::Tensor(t) => t,
        other => panic!("block failed: {other}"),
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// `sum(out * R)` for a fixed random `R`, so every output entry carries a
/// distinct weight.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var, TensorError> {
    let shape = g.shape(out).to_vec();
    let r = random(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xfeed), &shape);
    let r = g.constant(r);
    let p = g.mul(out, r)?;
    g.sum_all(p)
}

/// Splits model parameters into checked (trainable) and constant tensors
/// and adds `extra` inputs to the checked set.
fn split(params: &Params<f32>, extra: Vec<(&str, Tensor<f64>)>) -> (BTreeMap<String, Tensor<f64>>, BTreeMap<String, Tensor<f64>>) {
    let p64: Params<f64> = params.cast();
    let mut checked = BTreeMap::new();
    let mut fixed = BTreeMap::new();
    for (k, p) in p64.iter() {
        if p.trainable {
            checked.insert(k.clone(), p.value.clone());
        } else {
            fixed.insert(k.clone(), p.value.clone());
        }
    }
    for (k, t) in extra {
        checked.insert(k.to_string(), t);
    }
    (checked, fixed)
}

fn bind(g: &mut Graph<f64>, vars: &BTreeMap<String, Var>, fixed: &BTreeMap<String, Tensor<f64>>) -> Bound {
    let mut all = vars.clone();
    for (k, t) in fixed {
        all.insert(k.clone(), g.constant(t.clone()));
    }
    Bound::from_vars(all)
}

fn check<F>(params: &Params<f32>, extra: Vec<(&str, Tensor<f64>)>, seed: u64, build: F) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>, &Bound, &BTreeMap<String, Var>) -> u2u_imn::Result<Var>,
{
    let (checked, fixed) = split(params, extra);
    grad_check(&checked, H, TOLERANCE, |g, vars| {
        let p = bind(g, vars, &fixed);
        let out = build(g, &p, vars).map_err(tensor_err)?;
        project(g, out, seed)
    })
    .unwrap()
}

fn set(params: &mut Params<f32>, name: &str, v: f32) {
    params.get_mut(name).unwrap().value.data_mut()[0] = v;
}

fn lengths(rng: &mut ChaCha8Rng, n: usize, t: usize) -> Vec<usize> {
    let mut l: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=t)).collect();
    l[0] = t;
    l
}

pub fn char_cnn_block(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = EmbeddingConfig {
        char_embed_dim: 3,
        char_windows: vec![2, 3],
        char_filters: 2,
        ..EmbeddingConfig::default()
    };
    let mut params = Params::new();
    params.insert(CHAR_TABLE, uniform(&mut rng, &[7, 3], 0.5), true);
    for &k in &cfg.char_windows {
        params.insert(format!("char.conv{k}.w"), glorot(&mut rng, &[k * 3, 2]), true);
        params.insert(format!("char.conv{k}.b"), uniform(&mut rng, &[2], 0.3), true);
    }
    let width = 5;
    let words: Vec<Vec<u32>> = (0..rng.gen_range(1..=3))
        .map(|_| {
            let len = rng.gen_range(3..=width);
            (0..width).map(|i| if i < len { rng.gen_range(1..7) } else { 0 }).collect()
        })
        .collect();
    check(&params, vec![], seed, |g, p, _| {
        let refs: Vec<&[u32]> = words.iter().map(Vec::as_slice).collect();
        char_cnn(g, p, &cfg, &refs)
    })
}

pub fn bilstm_block(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Params::new();
    init_bilstm(&mut params, &mut rng, "enc", 3, 2);
    let (n, t) = (rng.gen_range(1..=3), rng.gen_range(2..=4));
    let lens = lengths(&mut rng, n, t);
    let x = random(&mut rng, &[n, t, 3]);
    check(&params, vec![("x", x)], seed, |g, p, v| Ok(bilstm(g, p, "enc", v["x"], &lens)?.out))
}

pub fn self_attention_block(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Params::new();
    params.insert(encoder::PRIOR_W, Tensor::vector(vec![rng.gen_range(0.1..0.5)]), true);
    params.insert(encoder::PRIOR_B, Tensor::vector(vec![rng.gen_range(0.1..0.5)]), true);
    let (n, t) = (rng.gen_range(1..=3), rng.gen_range(2..=4));
    let lens = lengths(&mut rng, n, t);
    let u = random(&mut rng, &[n, t, 4]);
    check(&params, vec![("u", u)], seed, |g, p, v| {
        Ok(encoder::gaussian_self_attention(g, p, v["u"], &lens)?.0)
    })
}

pub fn prior_alignment_block(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Params::new();
    matcher::init_params(&mut params);
    set(&mut params, matcher::PRIOR_W, rng.gen_range(0.1..0.6));
    set(&mut params, matcher::PRIOR_B, rng.gen_range(-0.2..0.2));
    let (lc, lr) = (rng.gen_range(1..=5), rng.gen_range(1..=4));
    let d: Vec<f64> = (0..lc * lr).map(|_| rng.gen_range(1..=4) as f64).collect();
    let c = random(&mut rng, &[lc, 3]);
    let r = random(&mut rng, &[lr, 3]);
    let cfg = MatchConfig::default();
    check(&params, vec![("c", c), ("r", r)], seed, |g, p, v| {
        let a = matcher::align_bidirectional(g, p, v["c"], v["r"], &d, &cfg)?;
        let ch = g.sum_reduce(a.c_hat.unwrap(), 0)?;
        let rh = g.sum_reduce(a.r_hat.unwrap(), 0)?;
        Ok(g.concat(&[ch, rh], 0)?)
    })
}

pub fn enhancement_block(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = rng.gen_range(1..=4);
    let x = random(&mut rng, &[l, 3]);
    let xh = random(&mut rng, &[l, 3]);
    check(&Params::new(), vec![("x", x), ("x_hat", xh)], seed, |g, _, v| {
        matcher::enhance(g, v["x"], v["x_hat"])
    })
}

/// A padded batch of random multi-utterance examples and its layout.
pub fn random_layout(rng: &mut ChaCha8Rng, limits: Limits) -> UttLayout {
    let word = |rng: &mut ChaCha8Rng| format!("w{}", rng.gen_range(0..6));
    let utts = |rng: &mut ChaCha8Rng, max: usize| -> Vec<Vec<String>> {
        (0..rng.gen_range(1..=max))
            .map(|_| (0..rng.gen_range(1..=limits.max_utt_len)).map(|_| word(rng)).collect())
            .collect()
    };
    let examples: Vec<DialogueExample> = (0..rng.gen_range(1..=2))
        .map(|_| DialogueExample {
            context: utts(rng, limits.max_ctx_utts),
            response: utts(rng, limits.max_resp_utts),
            label: 1,
        })
        .collect();
    let vocab = Vocabulary::build(&examples, 1);
    let shaped: Vec<_> = examples.iter().map(|e| truncate_and_pad(e, limits)).collect();
    UttLayout::new(&make_batch(&shaped, &vocab).unwrap(), false)
}

pub fn aggregation_block(seed: u64, strategy: ResponseAggregation) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let limits = Limits {
        max_word_len: 4,
        max_utt_len: 3,
        max_ctx_utts: 3,
        max_resp_utts: 3,
    };
    let layout = random_layout(&mut rng, limits);
    let w = 4;
    let mut params = Params::new();
    aggregator::init_params(&mut params, &mut rng, w, w, 2, strategy, limits.max_resp_utts);
    if let Some(p) = params.get_mut(aggregator::RESP_WEIGHTS) {
        p.value = uniform(&mut rng, p.value.shape(), 1.0);
    }
    let emb = random(&mut rng, &[layout.rows(), layout.t, w]);
    check(&params, vec![("emb", emb)], seed, |g, p, v| {
        let utt = aggregator::aggregate_utterances(g, p, aggregator::UTT, v["emb"], &layout.lengths())?;
        let c = aggregator::aggregate_context(g, p, utt, &layout)?;
        let r = match strategy {
            ResponseAggregation::Attention => aggregator::aggregate_response_attention(g, p, utt, &layout)?.0,
            ResponseAggregation::Rnn => aggregator::aggregate_response_rnn(g, p, utt, &layout)?.r_agr,
        };
        Ok(g.concat(&[c, r], 1)?)
    })
}

pub fn mlp_block(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Params::new();
    init_mlp(&mut params, &mut rng, 6, 4);
    for name in ["mlp.b1", "mlp.b2"] {
        let p = params.get_mut(name).unwrap();
        p.value = uniform(&mut rng, p.value.shape(), 0.2);
    }
    let b = rng.gen_range(1..=3);
    let m = random(&mut rng, &[b, 6]);
    check(&params, vec![("m", m)], seed, |g, p, v| mlp(g, p, v["m"], &mut Dropout::off()))
}

pub type Block = (&'static str, fn(u64) -> GradCheckReport);

pub fn gradient_blocks() -> Vec<Block> {
    vec![
        ("char-cnn", char_cnn_block),
        ("bilstm", bilstm_block),
        ("self-attention", self_attention_block),
        ("prior-alignment", prior_alignment_block),
        ("enhancement", enhancement_block),
        ("aggregation-attention", |s| aggregation_block(s, ResponseAggregation::Attention)),
        ("aggregation-rnn", |s| aggregation_block(s, ResponseAggregation::Rnn)),
        ("mlp", mlp_block),
    ]
}

/// Runs `block` over all seeds; returns the worst relative error and the
/// failing seeds.
pub fn run_block(block: fn(u64) -> GradCheckReport) -> (f64, Vec<u64>) {
    let mut worst = 0.0f64;
    let mut failed = Vec::new();
    for seed in 0..SEEDS {
        let r = block(seed);
        assert!(!r.is_empty(), "no parameters checked");
        worst = worst.max(r.max_rel_error());
        if !r.passed() {
            failed.push(seed);
        }
    }
    (worst, failed)
}
