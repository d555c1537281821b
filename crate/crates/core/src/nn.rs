//! Shared layers: initialization, dropout streams, (Bi)LSTM and pooling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use u2u_autodiff::{Graph, Real, Tensor, Var, MASK_FILL};

use crate::error::{Error, Result};
use crate::params::{Bound, Params};

/// Uniform in ±sqrt(6 / (fan_in + fan_out)).
pub fn glorot(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    let (fan_in, fan_out) = match shape {
        [n] => (*n, *n),
        [.., a, b] => (*a, *b),
        [] => (1, 1),
    };
    let r = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, shape, r)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], r: f64) -> Tensor<f32> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-r..=r) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Stream of dropout masks. Each call draws a fresh sub-seed so masks
/// differ between layers and steps but replay exactly for equal seeds.
#[derive(Clone, Debug)]
pub struct Dropout {
    rate: f64,
    seed: u64,
    counter: u64,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Dropout { rate, seed, counter: 0 }
    }

    pub fn off() -> Self {
        Dropout::new(0.0, 0)
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn apply<T: Real>(&mut self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        if self.rate == 0.0 {
            return Ok(x);
        }
        self.counter += 1;
        let sub = splitmix(self.seed ^ splitmix(self.counter));
        Ok(g.dropout(x, self.rate, sub)?)
    }
}

pub(crate) fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------

/// Adds `{prefix}.w_ih [input, 4H]`, `{prefix}.w_hh [H, 4H]` and
/// `{prefix}.b [4H]` (forget-gate slice set to 1). Gate order is i, f, g, o.
pub fn init_lstm(params: &mut Params<f32>, rng: &mut ChaCha8Rng, prefix: &str, input: usize, hidden: usize) {
    params.insert(format!("{prefix}.w_ih"), glorot(rng, &[input, 4 * hidden]), true);
    params.insert(format!("{prefix}.w_hh"), glorot(rng, &[hidden, 4 * hidden]), true);
    let mut b = Tensor::zeros(&[4 * hidden]);
    for v in &mut b.data_mut()[hidden..2 * hidden] {
        *v = 1.0;
    }
    params.insert(format!("{prefix}.b"), b, true);
}

pub fn init_bilstm(params: &mut Params<f32>, rng: &mut ChaCha8Rng, prefix: &str, input: usize, hidden: usize) {
    init_lstm(params, rng, &format!("{prefix}.fwd"), input, hidden);
    init_lstm(params, rng, &format!("{prefix}.bwd"), input, hidden);
}

pub struct LstmOut {
    /// `[N, T, H]`, zero at padded steps.
    pub out: Var,
    /// Input-gate activations per step, each `[N, H]`.
    pub input_gates: Vec<Var>,
}

/// `[N, T, 1]` mask with ones at valid steps.
pub fn step_mask<T: Real>(lengths: &[usize], t: usize) -> Tensor<T> {
    let data = lengths
        .iter()
        .flat_map(|&l| (0..t).map(move |i| if i < l { T::one() } else { T::zero() }))
        .collect();
    Tensor::new(vec![lengths.len(), t, 1], data).expect("mask shape")
}

/// Unidirectional LSTM over `x: [N, T, in]`. Sequence `n` is valid for its
/// first `lengths[n]` steps; outputs after that are zeroed.
pub fn lstm<T: Real>(g: &mut Graph<T>, p: &Bound, prefix: &str, x: Var, lengths: &[usize]) -> Result<LstmOut> {
    let shape = g.shape(x).to_vec();
    let [n, t, _] = shape[..] else {
        return Err(Error::Data(format!("lstm input must be rank 3, got {shape:?}")));
    };
    let w_ih = p.var(&format!("{prefix}.w_ih"))?;
    let w_hh = p.var(&format!("{prefix}.w_hh"))?;
    let bias = p.var(&format!("{prefix}.b"))?;
    let h4 = g.shape(w_hh)[1];
    let hid = h4 / 4;

    let xw = g.matmul(x, w_ih)?;
    let xw = g.add(xw, bias)?;
    let mut h: Option<Var> = None;
    let mut c: Option<Var> = None;
    let mut outs = Vec::with_capacity(t);
    let mut gates_in = Vec::with_capacity(t);
    for step in 0..t {
        let xt = g.slice(xw, 1, step, 1)?;
        let mut z = g.reshape(xt, &[n, h4])?;
        if let Some(h) = h {
            let hw = g.matmul(h, w_hh)?;
            z = g.add(z, hw)?;
        }
        let i = g.slice(z, 1, 0, hid)?;
        let i = g.sigmoid(i);
        let f = g.slice(z, 1, hid, hid)?;
        let f = g.sigmoid(f);
        let cand = g.slice(z, 1, 2 * hid, hid)?;
        let cand = g.tanh(cand);
        let o = g.slice(z, 1, 3 * hid, hid)?;
        let o = g.sigmoid(o);
        let ic = g.mul(i, cand)?;
        let c_new = match c {
            Some(c) => {
                let fc = g.mul(f, c)?;
                g.add(fc, ic)?
            }
            None => ic,
        };
        let tc = g.tanh(c_new);
        let h_new = g.mul(o, tc)?;
        outs.push(g.reshape(h_new, &[n, 1, hid])?);
        gates_in.push(i);
        h = Some(h_new);
        c = Some(c_new);
    }
    let out = if outs.is_empty() {
        g.constant(Tensor::zeros(&[n, 0, hid]))
    } else {
        g.concat(&outs, 1)?
    };
    let mask = g.constant(step_mask(lengths, t));
    let out = g.mul(out, mask)?;
    Ok(LstmOut { out, input_gates: gates_in })
}

/// Row index that reverses the valid prefix of every sequence in a
/// flattened `[N * T, ·]` layout; padded slots map to `None`.
pub fn reversal_index(lengths: &[usize], t: usize) -> Vec<Option<usize>> {
    lengths
        .iter()
        .enumerate()
        .flat_map(|(n, &l)| (0..t).map(move |i| (i < l).then(|| n * t + l - 1 - i)))
        .collect()
}

pub struct BiLstmOut {
    /// `[N, T, 2H]`: forward states then backward states.
    pub out: Var,
    pub fwd_gates: Vec<Var>,
    pub bwd_gates: Vec<Var>,
}

pub fn bilstm<T: Real>(g: &mut Graph<T>, p: &Bound, prefix: &str, x: Var, lengths: &[usize]) -> Result<BiLstmOut> {
    let shape = g.shape(x).to_vec();
    let [n, t, d] = shape[..] else {
        return Err(Error::Data(format!("bilstm input must be rank 3, got {shape:?}")));
    };
    let fwd = lstm(g, p, &format!("{prefix}.fwd"), x, lengths)?;
    let rev = reversal_index(lengths, t);
    let flat = g.reshape(x, &[n * t, d])?;
    let xr = g.gather(flat, rev.clone())?;
    let xr = g.reshape(xr, &[n, t, d])?;
    let bwd = lstm(g, p, &format!("{prefix}.bwd"), xr, lengths)?;
    let hid = g.shape(bwd.out)[2];
    let flat = g.reshape(bwd.out, &[n * t, hid])?;
    let back = g.gather(flat, rev)?;
    let back = g.reshape(back, &[n, t, hid])?;
    let out = g.concat(&[fwd.out, back], 2)?;
    Ok(BiLstmOut {
        out,
        fwd_gates: fwd.input_gates,
        bwd_gates: bwd.input_gates,
    })
}

/// Max over valid steps concatenated with the state at the last valid
/// step: `[N, T, W] -> [N, 2W]`. Every length must be positive.
pub fn max_last_pool<T: Real>(g: &mut Graph<T>, x: Var, lengths: &[usize]) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let [n, t, w] = shape[..] else {
        return Err(Error::Data(format!("pool input must be rank 3, got {shape:?}")));
    };
    if let Some(i) = lengths.iter().position(|&l| l == 0 || l > t) {
        return Err(Error::Data(format!("sequence {i} has invalid length {}", lengths[i])));
    }
    let pen: Vec<T> = lengths
        .iter()
        .flat_map(|&l| (0..t).map(move |i| if i < l { T::zero() } else { T::lit(MASK_FILL) }))
        .collect();
    let pen = g.constant(Tensor::new(vec![n, t, 1], pen)?);
    let shifted = g.add(x, pen)?;
    let max = g.max_reduce(shifted, 1)?;
    let flat = g.reshape(x, &[n * t, w])?;
    let last = g.gather(flat, lengths.iter().enumerate().map(|(i, &l)| Some(i * t + l - 1)).collect())?;
    Ok(g.concat(&[max, last], 1)?)
}
