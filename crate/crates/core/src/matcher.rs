//! Interactive matching between the whole context and the whole response.
//!
//! Encoded utterances are concatenated per side, aligned in both
//! directions with an exponential sentence-distance prior on the logits,
//! enhanced with difference and product features, and split back into
//! utterances.

use serde::{Deserialize, Serialize};
use u2u_autodiff::{Graph, Real, Tensor, Var};

use crate::corpus::sentence_distance;
use crate::error::{Error, Result};
use crate::layout::UttLayout;
use crate::params::{Bound, Params};

pub const PRIOR_W: &str = "match.prior.w";
pub const PRIOR_B: &str = "match.prior.b";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    Global,
    /// Utterance pairs aligned separately, then max-pooled per utterance.
    Local,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub mode: MatchMode,
    pub c2r: bool,
    pub r2c: bool,
    pub use_distance_prior: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            mode: MatchMode::Global,
            c2r: true,
            r2c: true,
            use_distance_prior: true,
        }
    }
}

impl MatchConfig {
    /// Width of the context-side matching matrix for encoder width `w`.
    pub fn ctx_width(&self, w: usize) -> usize {
        if self.c2r {
            4 * w
        } else {
            w
        }
    }

    pub fn resp_width(&self, w: usize) -> usize {
        if self.r2c {
            4 * w
        } else {
            w
        }
    }

    fn aligns(&self) -> bool {
        self.c2r || self.r2c
    }
}

pub fn init_params(params: &mut Params<f32>) {
    params.insert(PRIOR_W, Tensor::zeros(&[1]), true);
    params.insert(PRIOR_B, Tensor::zeros(&[1]), true);
}

/// `phi(D) = exp(-W D + B)`.
pub fn prior_factor(w: f64, b: f64, d: f64) -> f64 {
    (-w * d + b).exp()
}

/// Flat `[N * T]` row indices of the real tokens of `rows`, in order.
fn real_positions(layout: &UttLayout, rows: &[usize]) -> Vec<Option<usize>> {
    rows.iter().flat_map(|&r| layout.positions(r).map(Some)).collect()
}

/// Gathers the context and response token sequences of example `b` from
/// the flattened encoder output `[N * T, W]`.
pub fn concat_sequences<T: Real>(g: &mut Graph<T>, flat: Var, layout: &UttLayout, b: usize) -> Result<(Var, Var)> {
    let c = g.gather(flat, real_positions(layout, &layout.ctx[b]))?;
    let r = g.gather(flat, real_positions(layout, &layout.resp[b]))?;
    Ok((c, r))
}

/// Sentence distances `[l_c, l_r]` for example `b` under `layout`.
pub fn distances(layout: &UttLayout, b: usize) -> Result<Vec<f64>> {
    let (n_c, n_r) = (layout.ctx[b].len(), layout.resp[b].len());
    let mut ctx_utt = Vec::new();
    for (m, &row) in layout.ctx[b].iter().enumerate() {
        ctx_utt.extend(std::iter::repeat_n(m, layout.utts[row].len()));
    }
    let mut resp_utt = Vec::new();
    for (n, &row) in layout.resp[b].iter().enumerate() {
        resp_utt.extend(std::iter::repeat_n(n, layout.utts[row].len()));
    }
    let mut d = Vec::with_capacity(ctx_utt.len() * resp_utt.len());
    for &m in &ctx_utt {
        for &n in &resp_utt {
            d.push(sentence_distance(m + 1, n + 1, n_c, n_r)? as f64);
        }
    }
    Ok(d)
}

pub struct Alignment {
    /// Context tokens re-expressed over the response, `[l_c, W]`.
    pub c_hat: Option<Var>,
    /// Response tokens re-expressed over the context, `[l_r, W]`.
    pub r_hat: Option<Var>,
    /// Row-normalized weights `[l_c, l_r]`.
    pub c2r: Option<Var>,
    /// Column-normalized weights `[l_c, l_r]`.
    pub r2c: Option<Var>,
}

/// Cross-attention between `c: [l_c, W]` and `r: [l_r, W]` with logits
/// `c_i . r_j - W D_ij + B`. Only the enabled directions are computed.
pub fn align_bidirectional<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    c: Var,
    r: Var,
    distance: &[f64],
    cfg: &MatchConfig,
) -> Result<Alignment> {
    let (lc, lr) = (g.shape(c)[0], g.shape(r)[0]);
    if distance.len() != lc * lr {
        return Err(Error::Data(format!(
            "distance matrix has {} entries, expected {lc}x{lr}",
            distance.len()
        )));
    }
    let rt = g.transpose(r)?;
    let mut logits = g.matmul(c, rt)?;
    if cfg.use_distance_prior {
        let d = g.constant(Tensor::from_f64(&[lc, lr], distance)?);
        let wd = g.mul(d, p.var(PRIOR_W)?)?;
        let prior = g.sub(p.var(PRIOR_B)?, wd)?;
        logits = g.add(logits, prior)?;
    }
    let mut out = Alignment {
        c_hat: None,
        r_hat: None,
        c2r: None,
        r2c: None,
    };
    if cfg.c2r {
        let a = g.softmax(logits, 1, None)?;
        out.c_hat = Some(g.matmul(a, r)?);
        out.c2r = Some(a);
    }
    if cfg.r2c {
        let a = g.softmax(logits, 0, None)?;
        let at = g.transpose(a)?;
        out.r_hat = Some(g.matmul(at, c)?);
        out.r2c = Some(a);
    }
    Ok(out)
}

/// `[x, x_hat, x - x_hat, x * x_hat]` along the feature axis.
pub fn enhance<T: Real>(g: &mut Graph<T>, x: Var, x_hat: Var) -> Result<Var> {
    let diff = g.sub(x, x_hat)?;
    let prod = g.mul(x, x_hat)?;
    Ok(g.concat(&[x, x_hat, diff, prod], 1)?)
}

/// Inverse of [`concat_sequences`] over a block of consecutive layout
/// rows: `seq` holds the real tokens of `rows` in order; the result is
/// `[rows.len(), T, W]` with zero padding.
pub fn separate<T: Real>(g: &mut Graph<T>, seq: Var, layout: &UttLayout, rows: std::ops::Range<usize>) -> Result<Var> {
    let w = g.shape(seq)[1];
    let t = layout.t;
    let n = rows.len();
    let mut index = Vec::with_capacity(n * t);
    let mut offset = 0;
    for row in rows {
        let l = layout.utts[row].len();
        index.extend((0..t).map(|i| (i < l).then_some(offset + i)));
        offset += l;
    }
    if offset != g.shape(seq)[0] {
        return Err(Error::Data(format!(
            "separate: {offset} positions in layout, {} in sequence",
            g.shape(seq)[0]
        )));
    }
    let out = g.gather(seq, index)?;
    Ok(g.reshape(out, &[n, t, w])?)
}

fn stack_max<T: Real>(g: &mut Graph<T>, parts: &[Var]) -> Result<Var> {
    if let [only] = parts {
        return Ok(*only);
    }
    let (l, w) = (g.shape(parts[0])[0], g.shape(parts[0])[1]);
    let stacked = g.concat(parts, 0)?;
    let stacked = g.reshape(stacked, &[parts.len(), l, w])?;
    Ok(g.max_reduce(stacked, 0)?)
}

/// Pairwise alignment of every (context utterance, response utterance)
/// of example `b`, max-pooled over the set belonging to each utterance.
/// Returns the aligned sequences in concatenated order.
pub fn align_local<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    c: Var,
    r: Var,
    layout: &UttLayout,
    b: usize,
    cfg: &MatchConfig,
) -> Result<(Option<Var>, Option<Var>)> {
    let spans = |rows: &[usize]| {
        let mut start = 0;
        rows.iter()
            .map(|&row| {
                let l = layout.utts[row].len();
                start += l;
                (start - l, l)
            })
            .collect::<Vec<_>>()
    };
    let (cs, rs) = (spans(&layout.ctx[b]), spans(&layout.resp[b]));
    let (n_c, n_r) = (cs.len(), rs.len());
    let c_parts = cs
        .iter()
        .map(|&(s, l)| g.slice(c, 0, s, l))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let r_parts = rs
        .iter()
        .map(|&(s, l)| g.slice(r, 0, s, l))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mut c_sets: Vec<Vec<Var>> = vec![Vec::new(); n_c];
    let mut r_sets: Vec<Vec<Var>> = vec![Vec::new(); n_r];
    for m in 0..n_c {
        for n in 0..n_r {
            let d = sentence_distance(m + 1, n + 1, n_c, n_r)? as f64;
            let dist = vec![d; cs[m].1 * rs[n].1];
            let a = align_bidirectional(g, p, c_parts[m], r_parts[n], &dist, cfg)?;
            if let Some(v) = a.c_hat {
                c_sets[m].push(v);
            }
            if let Some(v) = a.r_hat {
                r_sets[n].push(v);
            }
        }
    }
    let pool = |g: &mut Graph<T>, sets: Vec<Vec<Var>>, on: bool| -> Result<Option<Var>> {
        if !on {
            return Ok(None);
        }
        let pooled = sets.iter().map(|s| stack_max(g, s)).collect::<Result<Vec<_>>>()?;
        Ok(Some(if pooled.len() == 1 { pooled[0] } else { g.concat(&pooled, 0)? }))
    };
    let c_hat = pool(g, c_sets, cfg.c2r)?;
    let r_hat = pool(g, r_sets, cfg.r2c)?;
    Ok((c_hat, r_hat))
}

pub struct MatchOutput {
    /// `[context rows, T, ctx_width]`.
    pub ctx: Var,
    /// `[response rows, T, resp_width]`.
    pub resp: Var,
    /// Per example, the global-mode alignment weights (C2R, R2C).
    pub attention: Vec<(Option<Var>, Option<Var>)>,
}

/// Matches every example of the batch. `enc` is `[N, T, W]` in layout
/// row order.
pub fn match_batch<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    enc: Var,
    layout: &UttLayout,
    cfg: &MatchConfig,
) -> Result<MatchOutput> {
    let (n, t, w) = {
        let s = g.shape(enc);
        (s[0], s[1], s[2])
    };
    let nc = layout.n_ctx_rows;
    if !cfg.aligns() {
        return Ok(MatchOutput {
            ctx: g.slice(enc, 0, 0, nc)?,
            resp: g.slice(enc, 0, nc, n - nc)?,
            attention: vec![(None, None); layout.batch_size()],
        });
    }
    let flat = g.reshape(enc, &[n * t, w])?;
    let mut ctx_parts = Vec::new();
    let mut resp_parts = Vec::new();
    let mut attention = Vec::new();
    for b in 0..layout.batch_size() {
        let (c, r) = concat_sequences(g, flat, layout, b)?;
        let (c_hat, r_hat) = match cfg.mode {
            MatchMode::Global => {
                let d = distances(layout, b)?;
                let a = align_bidirectional(g, p, c, r, &d, cfg)?;
                attention.push((a.c2r, a.r2c));
                (a.c_hat, a.r_hat)
            }
            MatchMode::Local => {
                attention.push((None, None));
                align_local(g, p, c, r, layout, b, cfg)?
            }
        };
        ctx_parts.push(match c_hat {
            Some(h) => enhance(g, c, h)?,
            None => c,
        });
        resp_parts.push(match r_hat {
            Some(h) => enhance(g, r, h)?,
            None => r,
        });
    }
    let all_c = g.concat(&ctx_parts, 0)?;
    let all_r = g.concat(&resp_parts, 0)?;
    Ok(MatchOutput {
        ctx: separate(g, all_c, layout, 0..nc)?,
        resp: separate(g, all_r, layout, nc..n)?,
        attention,
    })
}
