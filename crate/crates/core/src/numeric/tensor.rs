//! Dense row-major tensors over `f32` / `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

use super::NumericError;

/// Scalar type usable for model state (`f32`) and gradient checking (`f64`).
pub trait Real:
    Float
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
    const NAME: &'static str;
}

impl Real for f32 {
    fn lit(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    const NAME: &'static str = "f32";
}

impl Real for f64 {
    fn lit(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    const NAME: &'static str = "f64";
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self, NumericError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumericError::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a tensor by evaluating `f` at each flat index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
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

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all axes but the last.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.len() / self.cols().max(1)
        }
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &s)| acc * s + i)
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, NumericError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(NumericError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", self.shape),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Copies `len` entries along `axis` starting at `start`.
    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Self, NumericError> {
        if axis >= self.rank() || start + len > self.shape[axis] {
            return Err(NumericError::ShapeMismatch {
                op: "slice",
                detail: format!("axis {axis} [{start}, {}) of {:?}", start + len, self.shape),
            });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let extent = self.shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Self { shape, data })
    }

    /// Concatenates tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self, NumericError> {
        let first = parts.first().ok_or_else(|| NumericError::ShapeMismatch {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        if axis >= first.rank() {
            return Err(NumericError::ShapeMismatch {
                op: "concat",
                detail: format!("axis {axis} out of range for {:?}", first.shape),
            });
        }
        for p in parts {
            let same_rank = p.rank() == first.rank();
            let same_other = same_rank
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !same_other {
                return Err(NumericError::ShapeMismatch {
                    op: "concat",
                    detail: format!("{:?} vs {:?} on axis {axis}", p.shape, first.shape),
                });
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Self { shape, data })
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self, NumericError> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(NumericError::ShapeMismatch {
                op: "permute",
                detail: format!("{perm:?} for {:?}", self.shape),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let in_strides = strides(&self.shape);
        let mut data = Vec::with_capacity(self.len());
        let mut idx = vec![0usize; rank];
        for _ in 0..self.len() {
            let off: usize = idx.iter().zip(perm).map(|(&i, &p)| i * in_strides[p]).sum();
            data.push(self.data[off]);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Ok(Self {
            shape: out_shape,
            data,
        })
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Self, NumericError> {
        if self.rank() != 2 {
            return Err(NumericError::ShapeMismatch {
                op: "transpose",
                detail: format!("needs rank 2, got {:?}", self.shape),
            });
        }
        self.permute(&[1, 0])
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&self, axis: usize) -> Result<Self, NumericError> {
        if axis >= self.rank() || self.shape[axis] == 0 {
            return Err(NumericError::ShapeMismatch {
                op: "mean",
                detail: format!("axis {axis} of {:?}", self.shape),
            });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let extent = self.shape[axis];
        let inv = T::one() / T::lit(extent as f64);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let src = &self.data[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        for v in &mut data {
            *v *= inv;
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(Self { shape, data })
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `out[rows, n] += a[rows, k] * b[k, n]`, cache-friendly i-k-j order.
pub(crate) fn gemm_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], rows: usize, k: usize, n: usize) {
    for i in 0..rows {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[rows, k] += g[rows, n] * b[k, n]^T`.
pub(crate) fn gemm_nt_acc<T: Real>(g: &[T], b: &[T], out: &mut [T], rows: usize, k: usize, n: usize) {
    for i in 0..rows {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&x, &y) in grow.iter().zip(brow) {
                acc += x * y;
            }
            *o += acc;
        }
    }
}

/// `out[k, n] += a[rows, k]^T * g[rows, n]`.
pub(crate) fn gemm_tn_acc<T: Real>(a: &[T], g: &[T], out: &mut [T], rows: usize, k: usize, n: usize) {
    for i in 0..rows {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// Plain matrix product of `a[.., k]` (leading axes flattened) with `b[k, n]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NumericError> {
    if b.rank() != 2 || a.rank() == 0 || a.cols() != b.shape()[0] {
        return Err(NumericError::ShapeMismatch {
            op: "matmul",
            detail: format!("{:?} x {:?}", a.shape(), b.shape()),
        });
    }
    let (rows, k, n) = (a.rows(), a.cols(), b.shape()[1]);
    let mut out = vec![T::zero(); rows * n];
    gemm_acc(a.data(), b.data(), &mut out, rows, k, n);
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    Tensor::new(&shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul_is_noop() {
        let a = Tensor::<f64>::from_fn(&[3, 5], |i| i as f64 * 0.5 - 2.0);
        let out = matmul(&Tensor::eye(3), &a).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn mean_of_ones_over_axis() {
        let m = Tensor::<f32>::ones(&[4, 5]).mean_axis(0).unwrap();
        assert_eq!(m.shape(), &[5]);
        assert!(m.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn concat_shape_algebra() {
        let a = Tensor::<f32>::zeros(&[2, 3, 8]);
        let b = Tensor::<f32>::ones(&[5, 3, 8]);
        let c = Tensor::concat(&[&a, &b], 0).unwrap();
        assert_eq!(c.shape(), &[7, 3, 8]);
        assert_eq!(c.data()[2 * 24], 1.0);
        assert!(Tensor::concat(&[&a, &Tensor::zeros(&[2, 4, 8])], 0).is_err());
    }

    #[test]
    fn permute_round_trip() {
        let a = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64);
        let p = a.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.get(&[3, 1, 2]), a.get(&[1, 2, 3]));
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn slice_middle_axis() {
        let a = Tensor::<f64>::from_fn(&[2, 4, 3], |i| i as f64);
        let s = a.slice_axis(1, 1, 2).unwrap();
        assert_eq!(s.shape(), &[2, 2, 3]);
        assert_eq!(s.get(&[1, 0, 2]), a.get(&[1, 1, 2]));
        assert!(a.slice_axis(1, 3, 2).is_err());
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matmul(&a, &Tensor::zeros(&[4, 2])).is_err());
    }
}
