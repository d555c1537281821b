use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kernels::{gemm_nn, gemm_nt, gemm_tn, transpose_last};
use crate::tensor::{broadcast_shape, expand, layout, reduce_to, source_indices, split_axis, Layout};
use crate::{Real, Tensor, TensorError};

/// Additive logit applied to masked positions before normalization.
pub const MASK_FILL: f64 = -1e9;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, T),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Abs(Var),
    Softmax { x: Var, axis: usize },
    MaxReduce { x: Var, argmax: Vec<usize> },
    SumReduce { x: Var, axis: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Gather { table: Var, index: Vec<Option<usize>> },
    Dropout { x: Var, mask: Vec<T> },
    Transpose(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    name: Option<String>,
}

/// A tape of eagerly evaluated operations.
///
/// Nodes are appended in evaluation order, so the tape is always a valid
/// topological order of the (acyclic) computation graph.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of every leaf reached by a backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant input; no gradient is tracked.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A named trainable leaf.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].name = Some(name.to_string());
        v
    }

    /// A named leaf that never receives gradients.
    pub fn frozen(&mut self, name: &str, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf, false);
        self.nodes[v.0].name = Some(name.to_string());
        v
    }

    // ---- linear algebra ------------------------------------------------

    /// Matrix product. Accepts `[m,k]x[k,n]`, `[b,m,k]x[b,k,n]` and
    /// `[b,m,k]x[k,n]` (shared right operand).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => vec![sa[0], sb[1]],
            (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => vec![sa[0], sa[1], sb[2]],
            (3, 2) if sa[2] == sb[0] => vec![sa[0], sa[1], sb[1]],
            _ => return Err(mismatch("matmul", &sa, &sb)),
        };
        let mut out = vec![T::zero(); out_shape.iter().product()];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            if sb.len() == 2 {
                let m: usize = sa[..sa.len() - 1].iter().product();
                gemm_nn(av, bv, &mut out, m, sb[0], sb[1]);
            } else {
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                for i in 0..bs {
                    gemm_nn(
                        &av[i * m * k..(i + 1) * m * k],
                        &bv[i * k * n..(i + 1) * k * n],
                        &mut out[i * m * n..(i + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MatMul(a, b), rg))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        let (batch, r, c) = match s.len() {
            2 => (1, s[0], s[1]),
            3 => (s[0], s[1], s[2]),
            _ => {
                return Err(TensorError::Invalid {
                    op: "transpose",
                    msg: format!("expected rank 2 or 3, got {s:?}"),
                })
            }
        };
        let data = transpose_last(self.value(x).data(), batch, r, c);
        let mut shape = s.clone();
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(x).clone().reshape(shape).map_err(|_| {
            mismatch("reshape", self.shape(x), shape)
        })?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    // ---- elementwise ---------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| mismatch(name, sa, sb))?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let data: Vec<T> = if sa == sb {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let la = layout(sa, &out_shape);
            let lb = layout(sb, &out_shape);
            match (&la, &lb) {
                (Layout::Same, Layout::Scalar) => av.iter().map(|&x| f(x, bv[0])).collect(),
                (Layout::Same, Layout::Suffix(n)) => av
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, bv[i % n]))
                    .collect(),
                _ => {
                    let ia = source_indices(&la, &out_shape);
                    let ib = source_indices(&lb, &out_shape);
                    ia.iter().zip(&ib).map(|(&i, &j)| f(av[i], bv[j])).collect()
                }
            }
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(out_shape, data)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `x * scale + shift` with constant scalars.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, c) = (T::lit(scale), T::lit(shift));
        let t = self.value(x).map(|v| v * s + c);
        let rg = self.rg(&[x]);
        self.push(t, Op::Affine(x, s), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(t, op, rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Log(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    /// Inverted dropout: kept activations are divided by the keep
    /// probability. The mask is a pure function of `seed`.
    pub fn dropout(&mut self, x: Var, rate: f64, seed: u64) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Invalid {
                op: "dropout",
                msg: format!("rate {rate} outside [0, 1)"),
            });
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let t = {
            let xv = self.value(x);
            let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
            Tensor::new(xv.shape().to_vec(), data)?
        };
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Dropout { x, mask }, rg))
    }

    // ---- reductions and normalization ----------------------------------

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<(), TensorError> {
        if axis >= self.shape(x).len() {
            return Err(TensorError::Axis {
                op,
                axis,
                shape: self.shape(x).to_vec(),
            });
        }
        Ok(())
    }

    /// Softmax along `axis`. `mask` (same length as `x`, `true` = valid)
    /// excludes positions: they receive [`MASK_FILL`] before normalization
    /// and exactly zero probability after.
    pub fn softmax(&mut self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var, TensorError> {
        self.check_axis("softmax", x, axis)?;
        let xv = self.value(x);
        if let Some(m) = mask {
            if m.len() != xv.len() {
                return Err(mismatch("softmax mask", xv.shape(), &[m.len()]));
            }
        }
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        let fill = T::lit(MASK_FILL);
        let data = xv.data();
        let mut out = vec![T::zero(); data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let valid = |k: usize| mask.is_none_or(|m| m[base + k * inner]);
                if !(0..n).any(valid) {
                    return Err(TensorError::FullyMasked {
                        shape: xv.shape().to_vec(),
                        axis,
                    });
                }
                let logit = |k: usize| {
                    let v = data[base + k * inner];
                    if valid(k) {
                        v
                    } else {
                        v + fill
                    }
                };
                let mut mx = T::neg_infinity();
                for k in 0..n {
                    mx = mx.max(logit(k));
                }
                let mut total = T::zero();
                for k in 0..n {
                    let e = (logit(k) - mx).exp();
                    out[base + k * inner] = e;
                    total = total + e;
                }
                for k in 0..n {
                    let p = &mut out[base + k * inner];
                    *p = if valid(k) { *p / total } else { T::zero() };
                }
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax { x, axis }, rg))
    }

    fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
        let mut s = shape.to_vec();
        s.remove(axis);
        if s.is_empty() {
            s.push(1);
        }
        s
    }

    /// Maximum along `axis` (the axis is removed).
    pub fn max_reduce(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_axis("max_reduce", x, axis)?;
        let xv = self.value(x);
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        if n == 0 {
            return Err(TensorError::Invalid {
                op: "max_reduce",
                msg: "empty axis".into(),
            });
        }
        let data = xv.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut best = base;
                for k in 1..n {
                    let idx = base + k * inner;
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
        let shape = Self::reduced_shape(xv.shape(), axis);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MaxReduce { x, argmax }, rg))
    }

    /// Sum along `axis` (the axis is removed).
    pub fn sum_reduce(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_axis("sum_reduce", x, axis)?;
        let xv = self.value(x);
        let (outer, n, inner) = split_axis(xv.shape(), axis);
        let data = xv.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &data[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        let shape = Self::reduced_shape(xv.shape(), axis);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::SumReduce { x, axis }, rg))
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var, TensorError> {
        let n = self.value(x).len();
        let flat = self.reshape(x, &[n])?;
        self.sum_reduce(flat, 0)
    }

    // ---- structural ----------------------------------------------------

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = *inputs.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let w = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
            }
        }
        let rg = self.rg(inputs);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        self.check_axis("slice", x, axis)?;
        let s = self.shape(x).to_vec();
        if start + len > s[axis] {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!("range {start}..{} exceeds axis {axis} of {s:?}", start + len),
            });
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            out.extend_from_slice(&data[from..from + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { x, axis, start }, rg))
    }

    /// Row gather (embedding lookup) from a rank-2 `table`. `None` yields
    /// an all-zero row that never propagates gradient.
    pub fn gather(&mut self, table: Var, index: Vec<Option<usize>>) -> Result<Var, TensorError> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(TensorError::Invalid {
                op: "gather",
                msg: format!("table must be rank 2, got {s:?}"),
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let data = self.value(table).data();
        let mut out = Vec::with_capacity(index.len() * cols);
        for ix in &index {
            match *ix {
                Some(r) if r < rows => out.extend_from_slice(&data[r * cols..(r + 1) * cols]),
                Some(r) => {
                    return Err(TensorError::Index {
                        op: "gather",
                        index: r,
                        len: rows,
                    })
                }
                None => out.extend(std::iter::repeat_n(T::zero(), cols)),
            }
        }
        let t = Tensor::new(vec![index.len(), cols], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(t, Op::Gather { table, index }, rg))
    }

    // ---- backward ------------------------------------------------------

    /// Reverse pass from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients<T>, TensorError> {
        let out_val = self.value(out);
        if out_val.len() != 1 {
            return Err(TensorError::NonScalar {
                shape: out_val.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::full(out_val.shape(), T::one()));
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    /// Reverse pass returning gradients of every named trainable leaf.
    /// Leaves the output does not depend on get zero gradients.
    pub fn backprop(&self, out: Var) -> Result<BTreeMap<String, Tensor<T>>, TensorError> {
        let grads = self.backward(out)?;
        let mut map = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(name), true) = (&node.name, node.requires_grad) {
                let g = grads
                    .get(Var(i))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                match map.get_mut(name) {
                    None => {
                        map.insert(name.clone(), g);
                    }
                    Some(existing) => Tensor::add_assign(existing, &g),
                }
            }
        }
        Ok(map)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (sa, sb) = (av.shape(), bv.shape());
                if sb.len() == 2 {
                    let m: usize = sa[..sa.len() - 1].iter().product();
                    let (k, n) = (sb[0], sb[1]);
                    if self.requires_grad(*a) {
                        let mut da = vec![T::zero(); av.len()];
                        gemm_nt(g.data(), bv.data(), &mut da, m, n, k);
                        self.accumulate(grads, *a, Tensor::new(sa.to_vec(), da).unwrap());
                    }
                    if self.requires_grad(*b) {
                        let mut db = vec![T::zero(); bv.len()];
                        gemm_tn(av.data(), g.data(), &mut db, m, k, n);
                        self.accumulate(grads, *b, Tensor::new(sb.to_vec(), db).unwrap());
                    }
                } else {
                    let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                    if self.requires_grad(*a) {
                        let mut da = vec![T::zero(); av.len()];
                        for i in 0..bs {
                            gemm_nt(
                                &g.data()[i * m * n..(i + 1) * m * n],
                                &bv.data()[i * k * n..(i + 1) * k * n],
                                &mut da[i * m * k..(i + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                        self.accumulate(grads, *a, Tensor::new(sa.to_vec(), da).unwrap());
                    }
                    if self.requires_grad(*b) {
                        let mut db = vec![T::zero(); bv.len()];
                        for i in 0..bs {
                            gemm_tn(
                                &av.data()[i * m * k..(i + 1) * m * k],
                                &g.data()[i * m * n..(i + 1) * m * n],
                                &mut db[i * k * n..(i + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                        self.accumulate(grads, *b, Tensor::new(sb.to_vec(), db).unwrap());
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let neg = matches!(node.op, Op::Sub(..));
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, reduce_to(g, self.shape(*a)));
                }
                if self.requires_grad(*b) {
                    let mut gb = reduce_to(g, self.shape(*b));
                    if neg {
                        gb = gb.map(|v| -v);
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                for (this, other) in [(*a, *b), (*b, *a)] {
                    if !self.requires_grad(this) {
                        continue;
                    }
                    let ov = expand(self.value(other), g.shape());
                    let prod: Vec<T> = g.data().iter().zip(ov.data()).map(|(&x, &y)| x * y).collect();
                    let full = Tensor::new(g.shape().to_vec(), prod).unwrap();
                    self.accumulate(grads, this, reduce_to(&full, self.shape(this)));
                }
            }
            Op::Affine(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::Exp(x) => self.accumulate(grads, *x, zip(g, y, |d, yv| d * yv)),
            Op::Log(x) => self.accumulate(grads, *x, zip(g, self.value(*x), |d, xv| d / xv)),
            Op::Tanh(x) => self.accumulate(grads, *x, zip(g, y, |d, yv| d * (T::one() - yv * yv))),
            Op::Sigmoid(x) => self.accumulate(grads, *x, zip(g, y, |d, yv| d * yv * (T::one() - yv))),
            Op::Relu(x) => self.accumulate(
                grads,
                *x,
                zip(g, self.value(*x), |d, xv| if xv > T::zero() { d } else { T::zero() }),
            ),
            Op::Abs(x) => self.accumulate(
                grads,
                *x,
                zip(g, self.value(*x), |d, xv| {
                    if xv > T::zero() {
                        d
                    } else if xv < T::zero() {
                        -d
                    } else {
                        T::zero()
                    }
                }),
            ),
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(y.shape(), *axis);
                let (yd, gd) = (y.data(), g.data());
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let mut dot = T::zero();
                        for k in 0..n {
                            dot = dot + yd[base + k * inner] * gd[base + k * inner];
                        }
                        for k in 0..n {
                            let p = base + k * inner;
                            dx[p] = yd[p] * (gd[p] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx).unwrap());
            }
            Op::MaxReduce { x, argmax } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                let d = dx.data_mut();
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    d[src] = d[src] + gv;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SumReduce { x, axis } => {
                let s = self.shape(*x);
                let (outer, n, inner) = split_axis(s, *axis);
                let mut dx = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    let row = &g.data()[o * inner..(o + 1) * inner];
                    for _ in 0..n {
                        dx.extend_from_slice(row);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(s.to_vec(), dx).unwrap());
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(y.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let s = self.shape(v);
                    let w = s[*axis];
                    if self.requires_grad(v) {
                        let mut part = Vec::with_capacity(outer * w * inner);
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            part.extend_from_slice(&g.data()[from..from + w * inner]);
                        }
                        self.accumulate(grads, v, Tensor::new(s.to_vec(), part).unwrap());
                    }
                    offset += w;
                }
            }
            Op::Slice { x, axis, start } => {
                let s = self.shape(*x);
                let (outer, n, inner) = split_axis(s, *axis);
                let len = y.shape()[*axis];
                let mut dx = Tensor::zeros(s);
                let d = dx.data_mut();
                for o in 0..outer {
                    let to = (o * n + start) * inner;
                    let from = o * len * inner;
                    d[to..to + len * inner].copy_from_slice(&g.data()[from..from + len * inner]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Gather { table, index } => {
                let s = self.shape(*table);
                let cols = s[1];
                let mut dt = Tensor::zeros(s);
                let d = dt.data_mut();
                for (row, ix) in index.iter().enumerate() {
                    if let Some(r) = *ix {
                        let src = &g.data()[row * cols..(row + 1) * cols];
                        for (o, &gv) in d[r * cols..(r + 1) * cols].iter_mut().zip(src) {
                            *o = *o + gv;
                        }
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::Dropout { x, mask } => {
                let data = g.data().iter().zip(mask).map(|(&d, &m)| d * m).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), data).unwrap());
            }
            Op::Transpose(x) => {
                let s = g.shape();
                let (batch, r, c) = if s.len() == 2 { (1, s[0], s[1]) } else { (s[0], s[1], s[2]) };
                let data = transpose_last(g.data(), batch, r, c);
                self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), data).unwrap());
            }
            Op::Reshape(x) => {
                let t = g.clone().reshape(self.shape(*x)).unwrap();
                self.accumulate(grads, *x, t);
            }
        }
    }
}

fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn zip<T: Real>(g: &Tensor<T>, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = g.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::new(g.shape().to_vec(), data).unwrap()
}
