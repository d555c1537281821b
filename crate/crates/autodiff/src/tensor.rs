use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::TensorError;

/// Scalar element type. Implemented for `f32` (training) and `f64`
/// (gradient checks).
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + Sum + 'static
{
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Row-major dense tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// A one-element tensor of shape `[1]`.
    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self, TensorError> {
        Self::new(shape.to_vec(), data.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self, TensorError> {
        Self::new(shape.to_vec(), self.data)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or_else(U::nan))
                .collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of range on axis {i}");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub(crate) fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Splits `shape` around `axis` into `(outer, axis_len, inner)`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// How an operand of a broadcast maps onto the output index space.
#[derive(Clone, Debug)]
pub(crate) enum Layout {
    /// Same shape as the output.
    Same,
    /// A single element repeated everywhere.
    Scalar,
    /// The operand equals a trailing block of the output, repeated.
    Suffix(usize),
    /// General strides over the output's rank (0 on broadcast axes).
    Strided(Vec<usize>),
}

pub(crate) fn layout(shape: &[usize], out: &[usize]) -> Layout {
    let n: usize = shape.iter().product();
    let total: usize = out.iter().product();
    if n == total {
        return Layout::Same;
    }
    if n == 1 {
        return Layout::Scalar;
    }
    let trimmed: Vec<usize> = shape.iter().copied().skip_while(|&d| d == 1).collect();
    if out.ends_with(&trimmed) {
        return Layout::Suffix(n);
    }
    let rank = out.len();
    let offset = rank - shape.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    Layout::Strided(strides)
}

/// Source index of each output element for the given layout.
pub(crate) fn source_indices(lay: &Layout, out: &[usize]) -> Vec<usize> {
    let total: usize = out.iter().product();
    match lay {
        Layout::Same => (0..total).collect(),
        Layout::Scalar => vec![0; total],
        Layout::Suffix(n) => (0..total).map(|i| i % n).collect(),
        Layout::Strided(strides) => {
            let mut idx = vec![0usize; out.len()];
            let mut res = Vec::with_capacity(total);
            let mut cur = 0usize;
            for _ in 0..total {
                res.push(cur);
                for ax in (0..out.len()).rev() {
                    idx[ax] += 1;
                    cur += strides[ax];
                    if idx[ax] < out[ax] {
                        break;
                    }
                    cur -= strides[ax] * idx[ax];
                    idx[ax] = 0;
                }
            }
            res
        }
    }
}

/// Sums a tensor of the broadcast output shape back down to `shape`.
pub(crate) fn reduce_to<T: Real>(grad: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    let lay = layout(shape, grad.shape());
    match lay {
        Layout::Same => Tensor {
            shape: shape.to_vec(),
            data: grad.data.clone(),
        },
        Layout::Scalar => Tensor {
            shape: shape.to_vec(),
            data: vec![grad.sum()],
        },
        Layout::Suffix(n) => {
            let mut data = vec![T::zero(); n];
            for chunk in grad.data.chunks(n) {
                for (d, &g) in data.iter_mut().zip(chunk) {
                    *d = *d + g;
                }
            }
            Tensor {
                shape: shape.to_vec(),
                data,
            }
        }
        Layout::Strided(_) => {
            let n: usize = shape.iter().product();
            let mut data = vec![T::zero(); n];
            for (&src, &g) in source_indices(&lay, grad.shape()).iter().zip(&grad.data) {
                data[src] = data[src] + g;
            }
            Tensor {
                shape: shape.to_vec(),
                data,
            }
        }
    }
}

/// Materializes `t` at the (larger) broadcast shape `out`.
pub(crate) fn expand<T: Real>(t: &Tensor<T>, out: &[usize]) -> Tensor<T> {
    let lay = layout(t.shape(), out);
    let data = match lay {
        Layout::Same => t.data.clone(),
        Layout::Scalar => vec![t.data[0]; out.iter().product()],
        Layout::Suffix(n) => {
            let total: usize = out.iter().product();
            let mut d = Vec::with_capacity(total);
            while d.len() < total {
                d.extend_from_slice(&t.data[..n]);
            }
            d
        }
        Layout::Strided(_) => source_indices(&lay, out)
            .into_iter()
            .map(|i| t.data[i])
            .collect(),
    };
    Tensor {
        shape: out.to_vec(),
        data,
    }
}
