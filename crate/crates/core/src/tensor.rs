//! Dense row-major tensors.
//!
//! Volumes are stored channel-first as `[C, Z, Y, X]` with `X` varying
//! fastest, so the flat buffer of a single channel is exactly the x-fastest
//! raster order used by volume files and token sequences.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape(format!("shape {shape:?} holds {n} elements, buffer has {}", data.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n] }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor { shape, data: (0..n).map(&mut f).collect() }
    }

    pub fn zeros_like(other: &Tensor<T>) -> Self {
        Self::zeros(other.shape.clone())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Swap the last two axes.
    pub fn transpose_last2(&self) -> Result<Self> {
        let nd = self.ndim();
        if nd < 2 {
            return Err(Error::InvalidShape(format!("transpose needs rank >= 2, got {:?}", self.shape)));
        }
        let (m, n) = (self.shape[nd - 2], self.shape[nd - 1]);
        let batch = self.numel() / (m * n).max(1);
        let mut out = vec![T::zero(); self.numel()];
        for b in 0..batch {
            let src = &self.data[b * m * n..(b + 1) * m * n];
            let dst = &mut out[b * m * n..(b + 1) * m * n];
            for i in 0..m {
                for j in 0..n {
                    dst[j * m + i] = src[i * n + j];
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.swap(nd - 2, nd - 1);
        Ok(Tensor { shape, data: out })
    }

    pub fn sum(&self) -> T {
        let mut acc = T::zero();
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        self.data.iter().zip(&other.data).fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| U::c(v.to_f64_lossy())).collect() }
    }

    /// Spatial extents `[Z, Y, X]` of a `[C, Z, Y, X]` volume.
    pub fn spatial(&self) -> Result<[usize; 3]> {
        match self.shape.as_slice() {
            &[_, z, y, x] => Ok([z, y, x]),
            s => Err(Error::InvalidShape(format!("expected a [C, Z, Y, X] volume, got {s:?}"))),
        }
    }
}

/// Numpy-style broadcast of two shapes (right-aligned, size-1 axes stretch).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides that read `shape` as if broadcast to `out` (zero on stretched axes).
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let off = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + off] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visit every output position of a broadcast together with the flat source
/// offsets into `a` and `b`.
pub(crate) fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = out.iter().product();
    if n == 0 {
        return;
    }
    let nd = out.len();
    let mut idx = vec![0usize; nd];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            ia -= sa[ax] * out[ax];
            ib -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

/// Sum `grad` (shaped like the broadcast output) back down to `shape`.
pub(crate) fn reduce_to_shape<T: Scalar>(grad: &[T], out: &[usize], shape: &[usize]) -> Vec<T> {
    let n: usize = shape.iter().product();
    if out == shape {
        return grad.to_vec();
    }
    let mut acc = vec![T::zero(); n];
    let s = broadcast_strides(shape, out);
    let zero = vec![0; out.len()];
    for_each_broadcast(out, &s, &zero, |o, i, _| acc[i] += grad[o]);
    acc
}
