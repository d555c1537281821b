//! Two-level aggregation of the matching matrices into one vector per
//! example: utterance-level BiLSTM with max and last-state pooling, then a
//! context-level BiLSTM and a response-level RNN or position attention.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use u2u_autodiff::{Graph, Real, Tensor, Var};

use crate::error::{Error, Result};
use crate::layout::UttLayout;
use crate::matcher::MatchOutput;
use crate::nn::{bilstm, init_bilstm, max_last_pool, Dropout};
use crate::params::{Bound, Params};

pub const UTT: &str = "agg.utt";
/// Utterance-level BiLSTM for a side that skipped alignment while the
/// other side did not (its input is narrower).
pub const UTT_PLAIN: &str = "agg.utt_plain";
pub const CTX: &str = "agg.ctx";
pub const RESP: &str = "agg.resp";
pub const RESP_WEIGHTS: &str = "agg.resp_weights";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResponseAggregation {
    Attention,
    Rnn,
}

/// Parameter prefixes of the utterance-level BiLSTMs for each side.
pub fn utterance_prefixes(ctx_width: usize, resp_width: usize) -> (&'static str, &'static str) {
    match ctx_width.cmp(&resp_width) {
        std::cmp::Ordering::Equal => (UTT, UTT),
        std::cmp::Ordering::Greater => (UTT, UTT_PLAIN),
        std::cmp::Ordering::Less => (UTT_PLAIN, UTT),
    }
}

pub fn init_params(
    params: &mut Params<f32>,
    rng: &mut ChaCha8Rng,
    ctx_width: usize,
    resp_width: usize,
    hidden: usize,
    strategy: ResponseAggregation,
    max_resp_utts: usize,
) {
    init_bilstm(params, rng, UTT, ctx_width.max(resp_width), hidden);
    if ctx_width != resp_width {
        init_bilstm(params, rng, UTT_PLAIN, ctx_width.min(resp_width), hidden);
    }
    init_bilstm(params, rng, CTX, 4 * hidden, hidden);
    match strategy {
        ResponseAggregation::Rnn => init_bilstm(params, rng, RESP, 4 * hidden, hidden),
        ResponseAggregation::Attention => {
            params.insert(RESP_WEIGHTS, Tensor::zeros(&[max_resp_utts, max_resp_utts]), true)
        }
    }
}

/// `[N, T, W] -> [N, 4H]`: BiLSTM, then max over valid steps joined with
/// the last valid state.
pub fn aggregate_utterances<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    prefix: &str,
    x: Var,
    lengths: &[usize],
) -> Result<Var> {
    let out = bilstm(g, p, prefix, x, lengths)?.out;
    max_last_pool(g, out, lengths)
}

/// Arranges per-utterance rows `[rows, F]` (row `k` is layout row
/// `first + k`) as padded sequences `[B, max_count, F]`.
fn sequences<T: Real>(g: &mut Graph<T>, emb: Var, groups: &[Vec<usize>], first: usize) -> Result<(Var, Vec<usize>)> {
    let f = g.shape(emb)[1];
    let lengths: Vec<usize> = groups.iter().map(Vec::len).collect();
    let width = lengths.iter().copied().max().unwrap_or(0);
    let index = groups
        .iter()
        .flat_map(|rows| (0..width).map(move |k| rows.get(k).map(|r| r - first)))
        .collect();
    let seq = g.gather(emb, index)?;
    Ok((g.reshape(seq, &[groups.len(), width, f])?, lengths))
}

/// Context-level BiLSTM over utterance embeddings in chronological order.
pub fn aggregate_context<T: Real>(g: &mut Graph<T>, p: &Bound, emb: Var, layout: &UttLayout) -> Result<Var> {
    let (seq, lengths) = sequences(g, emb, &layout.ctx, 0)?;
    let out = bilstm(g, p, CTX, seq, &lengths)?.out;
    max_last_pool(g, out, &lengths)
}

pub struct RnnResponse {
    pub r_agr: Var,
    /// Input-gate activations of the forward and backward passes, one
    /// `[B, H]` tensor per response position.
    pub fwd_gates: Vec<Var>,
    pub bwd_gates: Vec<Var>,
}

pub fn aggregate_response_rnn<T: Real>(g: &mut Graph<T>, p: &Bound, emb: Var, layout: &UttLayout) -> Result<RnnResponse> {
    let (seq, lengths) = sequences(g, emb, &layout.resp, layout.n_ctx_rows)?;
    let bi = bilstm(g, p, RESP, seq, &lengths)?;
    Ok(RnnResponse {
        r_agr: max_last_pool(g, bi.out, &lengths)?,
        fwd_gates: bi.fwd_gates,
        bwd_gates: bi.bwd_gates,
    })
}

/// Weighted sum of response utterance embeddings with the learned
/// position weights for the example's utterance count. Returns
/// `r_agr: [B, F]` and the weights `[B, max n_r in batch]`.
pub fn aggregate_response_attention<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    emb: Var,
    layout: &UttLayout,
) -> Result<(Var, Var)> {
    let table = p.var(RESP_WEIGHTS)?;
    let n_max = g.shape(table)[0];
    let (seq, lengths) = sequences(g, emb, &layout.resp, layout.n_ctx_rows)?;
    if let Some(&n) = lengths.iter().find(|&&n| n == 0 || n > n_max) {
        return Err(Error::Data(format!("{n} response utterances, supported 1..={n_max}")));
    }
    let width = g.shape(seq)[1];
    let rows = g.gather(table, lengths.iter().map(|&n| Some(n - 1)).collect())?;
    let rows = g.slice(rows, 1, 0, width)?;
    let mask: Vec<bool> = lengths.iter().flat_map(|&n| (0..width).map(move |j| j < n)).collect();
    let weights = g.softmax(rows, 1, Some(&mask))?;
    let b = lengths.len();
    let w3 = g.reshape(weights, &[b, 1, width])?;
    let r = g.matmul(w3, seq)?;
    let f = g.shape(r)[2];
    Ok((g.reshape(r, &[b, f])?, weights))
}

/// Softmax-normalized position weights for every response length:
/// row `n - 1` holds the `n` weights used for `n` utterances.
pub fn position_weights(table: &Tensor<f32>) -> Vec<Vec<f64>> {
    let n_max = table.shape()[0];
    (1..=n_max)
        .map(|n| {
            let row = &table.data()[(n - 1) * n_max..(n - 1) * n_max + n];
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let e: Vec<f64> = row.iter().map(|&v| (v as f64 - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        })
        .collect()
}

pub struct AggOutput {
    /// Matching vector `[B, 8H]`: context embedding then response embedding.
    pub m: Var,
    pub resp_weights: Option<Var>,
    pub rnn: Option<RnnResponse>,
}

pub fn aggregate<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    matched: &MatchOutput,
    layout: &UttLayout,
    strategy: ResponseAggregation,
    dropout: &mut Dropout,
) -> Result<AggOutput> {
    let lengths = layout.lengths();
    let nc = layout.n_ctx_rows;
    let (wc, wr) = (g.shape(matched.ctx)[2], g.shape(matched.resp)[2]);
    let (pc, pr) = utterance_prefixes(wc, wr);
    let (ctx_emb, resp_emb) = if pc == pr {
        let all = g.concat(&[matched.ctx, matched.resp], 0)?;
        let emb = aggregate_utterances(g, p, pc, all, &lengths)?;
        let emb = dropout.apply(g, emb)?;
        let rows = g.shape(emb)[0];
        (g.slice(emb, 0, 0, nc)?, g.slice(emb, 0, nc, rows - nc)?)
    } else {
        let c = aggregate_utterances(g, p, pc, matched.ctx, &lengths[..nc])?;
        let r = aggregate_utterances(g, p, pr, matched.resp, &lengths[nc..])?;
        (dropout.apply(g, c)?, dropout.apply(g, r)?)
    };
    let c_agr = aggregate_context(g, p, ctx_emb, layout)?;
    let (r_agr, resp_weights, rnn) = match strategy {
        ResponseAggregation::Attention => {
            let (r, w) = aggregate_response_attention(g, p, resp_emb, layout)?;
            (r, Some(w), None)
        }
        ResponseAggregation::Rnn => {
            let rnn = aggregate_response_rnn(g, p, resp_emb, layout)?;
            (rnn.r_agr, None, Some(rnn))
        }
    };
    let m = g.concat(&[c_agr, r_agr], 1)?;
    Ok(AggOutput { m, resp_weights, rnn })
}
