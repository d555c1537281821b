//! Sentence encoder: a BiLSTM shared by context and response utterances,
//! followed by self-attention with a learned Gaussian distance prior.

use rand_chacha::ChaCha8Rng;
use u2u_autodiff::{Graph, Real, Tensor, Var};

use crate::error::Result;
use crate::nn::{bilstm, init_bilstm, step_mask, Dropout};
use crate::params::{Bound, Params};

pub const BILSTM: &str = "enc";
pub const PRIOR_W: &str = "enc.prior.w";
pub const PRIOR_B: &str = "enc.prior.b";

pub fn init_params(params: &mut Params<f32>, rng: &mut ChaCha8Rng, input: usize, hidden: usize) {
    init_bilstm(params, rng, BILSTM, input, hidden);
    params.insert(PRIOR_W, Tensor::zeros(&[1]), true);
    params.insert(PRIOR_B, Tensor::zeros(&[1]), true);
}

/// Key-validity mask for `[N, T, T]` attention logits.
pub fn key_mask(lengths: &[usize], t: usize) -> Vec<bool> {
    lengths
        .iter()
        .flat_map(|&l| (0..t * t).map(move |k| k % t < l))
        .collect()
}

/// Squared token offsets `(j - i)^2` as a `[T, T]` tensor.
pub fn squared_offsets<T: Real>(t: usize) -> Tensor<T> {
    let data = (0..t * t)
        .map(|k| {
            let d = (k % t) as f64 - (k / t) as f64;
            T::lit(d * d)
        })
        .collect();
    Tensor::new(vec![t, t], data).expect("square shape")
}

/// Self-attention over `u: [N, T, W]` with logits
/// `u_i . u_j - |w d_ij^2 + b|`. Returns the attended sequence (padded
/// query rows zeroed) and the post-softmax weights `[N, T, T]`.
pub fn gaussian_self_attention<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    u: Var,
    lengths: &[usize],
) -> Result<(Var, Var)> {
    let t = g.shape(u)[1];
    let ut = g.transpose(u)?;
    let content = g.matmul(u, ut)?;
    let d2 = g.constant(squared_offsets(t));
    let wd = g.mul(d2, p.var(PRIOR_W)?)?;
    let shifted = g.add(wd, p.var(PRIOR_B)?)?;
    let penalty = g.abs(shifted);
    let logits = g.sub(content, penalty)?;
    let weights = g.softmax(logits, 2, Some(&key_mask(lengths, t)))?;
    let attended = g.matmul(weights, u)?;
    let qmask = g.constant(step_mask(lengths, t));
    Ok((g.mul(attended, qmask)?, weights))
}

/// `[N, T, d] -> [N, T, 2H]` for every utterance row.
pub fn encode<T: Real>(g: &mut Graph<T>, p: &Bound, x: Var, lengths: &[usize], dropout: &mut Dropout) -> Result<Var> {
    let enc = bilstm(g, p, BILSTM, x, lengths)?.out;
    let enc = dropout.apply(g, enc)?;
    Ok(gaussian_self_attention(g, p, enc, lengths)?.0)
}
