//! Dense row-major tensors.
//!
//! Tensors are immutable values: every operation allocates its result. Binary
//! elementwise operations broadcast over trailing dimensions (shapes are
//! right-aligned; each pair of dims must match or one of them must be 1).
//! Non-finite elements are rejected everywhere — NaN/Inf is an error
//! condition, never a silent value.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

fn numel(dims: &[usize]) -> usize {
    dims.iter().product()
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor, checking length and finiteness.
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&dims) != data.len() {
            return Err(Error::dim(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        let t = Tensor { dims, data };
        t.check_finite("Tensor::new")?;
        Ok(t)
    }

    /// Like [`Tensor::new`] but skips the finiteness scan. For internal use
    /// where the caller checks (or intentionally defers checking).
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(numel(&dims), data.len());
        Tensor { dims, data }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Tensor {
            dims: dims.to_vec(),
            data: vec![T::zero(); numel(dims)],
        }
    }

    pub fn ones(dims: &[usize]) -> Self {
        Tensor {
            dims: dims.to_vec(),
            data: vec![T::one(); numel(dims)],
        }
    }

    pub fn full(dims: &[usize], v: T) -> Self {
        Tensor {
            dims: dims.to_vec(),
            data: vec![v; numel(dims)],
        }
    }

    /// 0-rank tensor holding a single value.
    pub fn scalar(v: T) -> Self {
        Tensor {
            dims: vec![],
            data: vec![v],
        }
    }

    /// Identity matrix of side `n`.
    pub fn eye(n: usize) -> Self {
        let mut data = vec![T::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = T::one();
        }
        Tensor {
            dims: vec![n, n],
            data,
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = numel(dims);
        Tensor {
            dims: dims.to_vec(),
            data: (0..n).map(|i| f(i)).collect(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a scalar-like tensor (exactly one element).
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::contract(format!(
                "item() on tensor with {} elements",
                self.data.len()
            )));
        }
        Ok(self.data[0])
    }

    pub fn check_finite(&self, ctx: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::numeric(format!("non-finite value in {ctx}")))
        }
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor<T>> {
        if numel(dims) != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} ({} elems) to {:?}",
                self.dims,
                self.data.len(),
                dims
            )));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose2(&self) -> Result<Tensor<T>> {
        let (r, c) = self.dims2("transpose2")?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            dims: vec![c, r],
            data: out,
        })
    }

    pub(crate) fn dims2(&self, ctx: &str) -> Result<(usize, usize)> {
        match self.dims.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::dim(format!("{ctx}: expected rank-2, got {other:?}"))),
        }
    }

    /// Gathers rows of a 2-D tensor by index.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Tensor<T>> {
        let (r, c) = self.dims2("select_rows")?;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::dim(format!("row {i} out of {r}")));
            }
            data.extend_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        Ok(Tensor {
            dims: vec![idx.len(), c],
            data,
        })
    }

    /// Row `i` of a 2-D tensor as a slice.
    pub fn row(&self, i: usize) -> Result<&[T]> {
        let (r, c) = self.dims2("row")?;
        if i >= r {
            return Err(Error::dim(format!("row {i} out of {r}")));
        }
        Ok(&self.data[i * c..(i + 1) * c])
    }

    /// Copy of this tensor with flat element `i` replaced by `v`.
    pub fn with_flat(&self, i: usize, v: T) -> Result<Tensor<T>> {
        if i >= self.data.len() {
            return Err(Error::dim(format!("index {i} out of {}", self.data.len())));
        }
        if !v.is_finite() {
            return Err(Error::numeric("with_flat: non-finite value".to_string()));
        }
        let mut out = self.clone();
        out.data[i] = v;
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::of(v.to64())).collect(),
        }
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = self.dims2("matmul lhs")?;
        let (k2, n) = other.dims2("matmul rhs")?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner dims disagree: {m}x{k} vs {k2}x{n}"
            )));
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (l, &a_il) in a_row.iter().enumerate() {
                let b_row = &other.data[l * n..(l + 1) * n];
                for j in 0..n {
                    o_row[j] += a_il * b_row[j];
                }
            }
        }
        Ok(Tensor {
            dims: vec![m, n],
            data: out,
        })
    }

    /// Broadcast shape of `self` against `other` (trailing-dims rule).
    pub fn broadcast_dims(&self, other: &Tensor<T>) -> Result<Vec<usize>> {
        broadcast_shape(&self.dims, &other.dims)
    }

    /// Elementwise combination with trailing-dims broadcasting.
    pub fn zip_broadcast(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let out_dims = broadcast_shape(&self.dims, &other.dims)?;
        if self.dims == other.dims {
            let data = self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect();
            return Ok(Tensor {
                dims: out_dims,
                data,
            });
        }
        let n = numel(&out_dims);
        let sa = broadcast_strides(&self.dims, &out_dims);
        let sb = broadcast_strides(&other.dims, &out_dims);
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; out_dims.len()];
        let mut off_a = 0usize;
        let mut off_b = 0usize;
        for _ in 0..n {
            data.push(f(self.data[off_a], other.data[off_b]));
            // odometer increment over out_dims, updating offsets incrementally
            for ax in (0..out_dims.len()).rev() {
                idx[ax] += 1;
                off_a += sa[ax];
                off_b += sb[ax];
                if idx[ax] < out_dims[ax] {
                    break;
                }
                off_a -= sa[ax] * idx[ax];
                off_b -= sb[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        Ok(Tensor {
            dims: out_dims,
            data,
        })
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_broadcast(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_broadcast(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_broadcast(other, |a, b| a * b)
    }

    pub fn scale(&self, k: T) -> Tensor<T> {
        self.map(|v| v * k)
    }

    /// Sum over the given axes. `keepdims` keeps reduced axes with size 1.
    pub fn sum_axes(&self, axes: &[usize], keepdims: bool) -> Result<Tensor<T>> {
        self.reduce_axes(axes, keepdims, false)
    }

    /// Mean over the given axes.
    pub fn mean_axes(&self, axes: &[usize], keepdims: bool) -> Result<Tensor<T>> {
        self.reduce_axes(axes, keepdims, true)
    }

    fn reduce_axes(&self, axes: &[usize], keepdims: bool, mean: bool) -> Result<Tensor<T>> {
        validate_axes(axes, self.rank())?;
        let mut reduced = vec![false; self.rank()];
        for &ax in axes {
            reduced[ax] = true;
        }
        let kept_dims: Vec<usize> = self
            .dims
            .iter()
            .enumerate()
            .map(|(i, &d)| if reduced[i] { 1 } else { d })
            .collect();
        let mut out = vec![T::zero(); numel(&kept_dims)];
        let out_strides = contiguous_strides(&kept_dims);
        let mut idx = vec![0usize; self.rank()];
        let mut out_off = 0usize;
        for &v in &self.data {
            out[out_off] += v;
            for ax in (0..self.rank()).rev() {
                idx[ax] += 1;
                if !reduced[ax] {
                    out_off += out_strides[ax];
                }
                if idx[ax] < self.dims[ax] {
                    break;
                }
                if !reduced[ax] {
                    out_off -= out_strides[ax] * idx[ax];
                }
                idx[ax] = 0;
            }
        }
        if mean {
            let count: usize = axes.iter().map(|&a| self.dims[a]).product();
            let inv = T::one() / T::of(count as f64);
            for v in &mut out {
                *v = *v * inv;
            }
        }
        let dims = if keepdims {
            kept_dims
        } else {
            self.dims
                .iter()
                .enumerate()
                .filter(|(i, _)| !reduced[*i])
                .map(|(_, &d)| d)
                .collect()
        };
        Ok(Tensor { dims, data: out })
    }

    /// Sum of all elements.
    pub fn sum_all(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Mean of all elements.
    pub fn mean_all(&self) -> T {
        self.sum_all() / T::of(self.data.len() as f64)
    }

    /// Expands this tensor to `target` dims (broadcast semantics, copying).
    pub fn broadcast_to(&self, target: &[usize]) -> Result<Tensor<T>> {
        let merged = broadcast_shape(&self.dims, target)?;
        if merged != target {
            return Err(Error::dim(format!(
                "cannot broadcast {:?} to {:?}",
                self.dims, target
            )));
        }
        let ones = Tensor::<T>::zeros(target);
        self.zip_broadcast(&ones, |a, _| a)
    }

    /// Sums `self` (shaped like a broadcast result) back down to `target`
    /// dims. This is the adjoint of broadcasting.
    pub fn reduce_to(&self, target: &[usize]) -> Result<Tensor<T>> {
        if self.dims == target {
            return Ok(self.clone());
        }
        let rank_diff = self
            .rank()
            .checked_sub(target.len())
            .ok_or_else(|| Error::dim("reduce_to target has higher rank than source".to_string()))?;
        let mut axes: Vec<usize> = (0..rank_diff).collect();
        for (i, &td) in target.iter().enumerate() {
            let ax = i + rank_diff;
            if td == 1 && self.dims[ax] != 1 {
                axes.push(ax);
            } else if td != self.dims[ax] {
                return Err(Error::dim(format!(
                    "reduce_to: {:?} is not a broadcast of {:?}",
                    self.dims, target
                )));
            }
        }
        let summed = self.sum_axes(&axes, true)?;
        summed.reshape(target)
    }
}

pub(crate) fn validate_axes(axes: &[usize], rank: usize) -> Result<()> {
    if axes.is_empty() {
        return Err(Error::domain("empty axis list for reduction".to_string()));
    }
    let mut seen = vec![false; rank];
    for &ax in axes {
        if ax >= rank {
            return Err(Error::dim(format!("axis {ax} out of rank {rank}")));
        }
        if seen[ax] {
            return Err(Error::dim(format!("axis {ax} repeated")));
        }
        seen[ax] = true;
    }
    Ok(())
}

/// Trailing-dims broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::dim(format!(
                "shapes {a:?} and {b:?} are not broadcast-compatible"
            )));
        };
    }
    Ok(out)
}

pub(crate) fn contiguous_strides(dims: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; dims.len()];
    let mut acc = 1usize;
    for i in (0..dims.len()).rev() {
        strides[i] = acc;
        acc *= dims[i];
    }
    strides
}

/// Strides for reading `src_dims` as if broadcast to `out_dims` (0 where the
/// source dimension is 1 or absent).
fn broadcast_strides(src_dims: &[usize], out_dims: &[usize]) -> Vec<usize> {
    let src_strides = contiguous_strides(src_dims);
    let pad = out_dims.len() - src_dims.len();
    let mut out = vec![0usize; out_dims.len()];
    for i in 0..out_dims.len() {
        if i >= pad && src_dims[i - pad] != 1 {
            out[i] = src_strides[i - pad];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::new(vec![2, 2], vec![1.0f64, 2.0, 3.0]).is_err());
    }

    #[test]
    fn new_rejects_nan() {
        assert!(Tensor::new(vec![2], vec![1.0f64, f64::NAN]).is_err());
    }

    #[test]
    fn identity_matmul_returns_rhs() {
        let i3 = Tensor::<f64>::eye(3);
        let b = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(i3.matmul(&b).unwrap(), b);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::new(vec![2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.dims(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::Dim(_))));
    }

    #[test]
    fn broadcast_mul_matches_tiling() {
        let a = Tensor::new(vec![2, 3], vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new(vec![3], vec![10.0, 20.0, 30.0]).unwrap();
        let tiled = Tensor::new(vec![2, 3], vec![10.0, 20.0, 30.0, 10.0, 20.0, 30.0]).unwrap();
        assert_eq!(a.mul(&b).unwrap(), a.mul(&tiled).unwrap());
    }

    #[test]
    fn reduce_mean_axis1() {
        let x = Tensor::new(vec![2, 2], vec![1.0f64, 3.0, 5.0, 7.0]).unwrap();
        let m = x.mean_axes(&[1], false).unwrap();
        assert_eq!(m.dims(), &[2]);
        assert_eq!(m.data(), &[2.0, 6.0]);
    }

    #[test]
    fn reduce_empty_axes_is_domain_error() {
        let x = Tensor::<f64>::zeros(&[2, 2]);
        assert!(matches!(x.sum_axes(&[], false), Err(Error::Domain(_))));
    }

    #[test]
    fn sum_of_zeros_is_zero() {
        let x = Tensor::<f64>::zeros(&[4, 5]);
        assert_eq!(x.sum_axes(&[0, 1], false).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn reduce_to_is_broadcast_adjoint() {
        let g = Tensor::new(vec![2, 3], vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let r = g.reduce_to(&[3]).unwrap();
        assert_eq!(r.data(), &[5.0, 7.0, 9.0]);
        let r2 = g.reduce_to(&[2, 1]).unwrap();
        assert_eq!(r2.data(), &[6.0, 15.0]);
    }

    #[test]
    fn broadcast_shape_rules() {
        assert_eq!(broadcast_shape(&[2, 1, 3], &[4, 3]).unwrap(), vec![2, 4, 3]);
        assert!(broadcast_shape(&[2, 3], &[4, 3]).is_err());
    }
}
