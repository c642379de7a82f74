//! Dense row-major tensors with shape algebra and reverse-mode autodiff.
//!
//! [`Tensor`] is the universal value type of the crate: an immutable dense
//! array of `f64` with explicit shape metadata. Mode arguments on the public
//! API are 1-based, matching the usual tensor-unfolding convention (mode 1 is
//! the leading dimension). The mode-`m` matricization of an
//! `I_1 x ... x I_r` tensor is the `I_m x (prod of the rest)` matrix whose
//! columns traverse the remaining modes in ascending mode order, row-major.
//!
//! Differentiable computation is built separately on [`tape::Tape`]: values
//! stay immutable, the tape records operations, and [`tape::Tape::backward`]
//! walks them in reverse.

pub mod check;
pub mod math;
pub mod tape;

use std::sync::Arc;

use crate::error::{Error, Result};

/// Dense multi-dimensional array, row-major, 64-bit.
///
/// Data is held behind an `Arc` so clones and autodiff bookkeeping are cheap;
/// tensors are immutable values after construction.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    /// Whether gradients should flow into this tensor during backward.
    pub requires_grad: bool,
    /// Node identifier on the tape that produced this tensor, if any.
    pub tape_id: Option<tape::NodeId>,
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && *self.data == *other.data
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} wants {} scalars, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor::from_parts(shape, data))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
            tape_id: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![0.0; numel])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![value; numel])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_parts(vec![], vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..numel {
            data.push(f(&idx));
            for d in (0..shape.len()).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Tensor::from_parts(shape.to_vec(), data)
    }

    /// Identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::from_parts(vec![n, n], data)
    }

    pub fn random_normal(shape: &[usize], scale: f64, rng: &mut crate::rng::Rng) -> Self {
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0; numel];
        rng.fill_normal(&mut data, scale);
        Tensor::from_parts(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> f64 {
        assert!(self.is_scalar(), "tensor is not a scalar");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    fn offset(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.rank(), "index rank mismatch");
        let mut off = 0;
        let mut stride = 1;
        for d in (0..self.rank()).rev() {
            assert!(idx[d] < self.shape[d], "index out of bounds");
            off += idx[d] * stride;
            stride *= self.shape[d];
        }
        off
    }

    /// Same data, new shape. Element count must match.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
            requires_grad: false,
            tape_id: None,
        })
    }

    /// Mode-`m` matricization (1-based). Rows index mode `m`; columns
    /// traverse the remaining modes in ascending order, row-major.
    pub fn matricize(&self, mode: usize) -> Result<Tensor> {
        let r = self.rank();
        if mode == 0 || mode > r {
            return Err(Error::ModeOutOfRange { mode, rank: r });
        }
        let m = mode - 1;
        let rows = self.shape[m];
        let cols = self.len() / rows.max(1);
        let mut out = vec![0.0; self.len()];
        let strides = self.strides();
        // Walk columns as the row-major odometer over the remaining modes.
        let rest: Vec<usize> = (0..r).filter(|&d| d != m).collect();
        let mut idx = vec![0usize; rest.len()];
        for col in 0..cols {
            let base: usize = rest
                .iter()
                .zip(idx.iter())
                .map(|(&d, &i)| i * strides[d])
                .sum();
            for row in 0..rows {
                out[row * cols + col] = self.data[base + row * strides[m]];
            }
            for d in (0..rest.len()).rev() {
                idx[d] += 1;
                if idx[d] < self.shape[rest[d]] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(Tensor::from_parts(vec![rows, cols], out))
    }

    /// Inverse of [`Tensor::matricize`]: refold a matrix into `shape`.
    pub fn dematricize(matrix: &Tensor, mode: usize, shape: &[usize]) -> Result<Tensor> {
        let r = shape.len();
        if mode == 0 || mode > r {
            return Err(Error::ModeOutOfRange { mode, rank: r });
        }
        let m = mode - 1;
        let numel: usize = shape.iter().product();
        if matrix.rank() != 2 || matrix.len() != numel || matrix.shape[0] != shape[m] {
            return Err(Error::ShapeMismatch(format!(
                "matrix {:?} does not refold into {:?} along mode {}",
                matrix.shape, shape, mode
            )));
        }
        let rows = shape[m];
        let cols = numel / rows.max(1);
        let strides = strides_of(shape);
        let rest: Vec<usize> = (0..r).filter(|&d| d != m).collect();
        let mut out = vec![0.0; numel];
        let mut idx = vec![0usize; rest.len()];
        for col in 0..cols {
            let base: usize = rest
                .iter()
                .zip(idx.iter())
                .map(|(&d, &i)| i * strides[d])
                .sum();
            for row in 0..rows {
                out[base + row * strides[m]] = matrix.data[row * cols + col];
            }
            for d in (0..rest.len()).rev() {
                idx[d] += 1;
                if idx[d] < shape[rest[d]] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(Tensor::from_parts(shape.to_vec(), out))
    }

    /// Mode permutation (1-based): the output coefficient at position
    /// `(i_{perm[0]}, ..., i_{perm[r-1]})` equals the input coefficient at
    /// `(i_1, ..., i_r)`. `perm` of `(2, 1)` transposes a matrix.
    pub fn permute_modes(&self, perm: &[usize]) -> Result<Tensor> {
        let r = self.rank();
        if !is_permutation(perm, r) {
            return Err(Error::InvalidPermutation(perm.to_vec()));
        }
        let mut out_shape = vec![0usize; r];
        for (k, &p) in perm.iter().enumerate() {
            out_shape[p - 1] = self.shape[k];
        }
        let out_strides = strides_of(&out_shape);
        let mut out = vec![0.0; self.len()];
        let mut idx = vec![0usize; r];
        for &v in self.data.iter() {
            let mut off = 0;
            for (k, &p) in perm.iter().enumerate() {
                off += idx[k] * out_strides[p - 1];
            }
            out[off] = v;
            for d in (0..r).rev() {
                idx[d] += 1;
                if idx[d] < self.shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(Tensor::from_parts(out_shape, out))
    }

    /// Concatenate along `mode` (1-based). All other extents must agree.
    pub fn concat(mode: usize, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let r = parts[0].rank();
        if mode == 0 || mode > r {
            return Err(Error::ModeOutOfRange { mode, rank: r });
        }
        let m = mode - 1;
        let mut out_shape = parts[0].shape.clone();
        out_shape[m] = 0;
        for p in parts {
            if p.rank() != r {
                return Err(Error::ShapeMismatch("concat rank mismatch".into()));
            }
            for d in 0..r {
                if d != m && p.shape[d] != parts[0].shape[d] {
                    return Err(Error::ShapeMismatch(format!(
                        "concat extent mismatch at mode {}: {:?} vs {:?}",
                        d + 1,
                        p.shape,
                        parts[0].shape
                    )));
                }
            }
            out_shape[m] += p.shape[m];
        }
        let outer: usize = out_shape[..m].iter().product();
        let inner: usize = out_shape[m + 1..].iter().product();
        let mut out = vec![0.0; out_shape.iter().product()];
        let total_mid = out_shape[m];
        for o in 0..outer {
            let mut mid_off = 0;
            for p in parts {
                let mid = p.shape[m];
                let src = &p.data[o * mid * inner..(o + 1) * mid * inner];
                let dst_start = (o * total_mid + mid_off) * inner;
                out[dst_start..dst_start + mid * inner].copy_from_slice(src);
                mid_off += mid;
            }
        }
        Ok(Tensor::from_parts(out_shape, out))
    }

    /// Slice `len` extents starting at `start` along `mode` (1-based).
    pub fn slice_mode(&self, mode: usize, start: usize, len: usize) -> Result<Tensor> {
        let r = self.rank();
        if mode == 0 || mode > r {
            return Err(Error::ModeOutOfRange { mode, rank: r });
        }
        let m = mode - 1;
        if start + len > self.shape[m] {
            return Err(Error::InvalidArgument(format!(
                "slice {}..{} exceeds extent {}",
                start,
                start + len,
                self.shape[m]
            )));
        }
        let mut out_shape = self.shape.clone();
        out_shape[m] = len;
        let outer: usize = self.shape[..m].iter().product();
        let inner: usize = self.shape[m + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * self.shape[m] + start) * inner;
            out.extend_from_slice(&self.data[base..base + len * inner]);
        }
        Ok(Tensor::from_parts(out_shape, out))
    }

    /// Reduce one mode away (1-based).
    pub fn reduce(&self, mode: usize, how: Reduction) -> Result<Tensor> {
        let r = self.rank();
        if mode == 0 || mode > r {
            return Err(Error::ModeOutOfRange { mode, rank: r });
        }
        let m = mode - 1;
        let extent = self.shape[m];
        let outer: usize = self.shape[..m].iter().product();
        let inner: usize = self.shape[m + 1..].iter().product();
        let mut out_shape = self.shape.clone();
        out_shape.remove(m);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..extent {
                let base = (o * extent + k) * inner;
                let dst = &mut out[o * inner..(o + 1) * inner];
                let src = &self.data[base..base + inner];
                match how {
                    Reduction::Sum | Reduction::Mean => {
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    Reduction::Max => {
                        if k == 0 {
                            dst.copy_from_slice(src);
                        } else {
                            for (d, s) in dst.iter_mut().zip(src) {
                                if *s > *d {
                                    *d = *s;
                                }
                            }
                        }
                    }
                }
            }
        }
        if matches!(how, Reduction::Mean) && extent > 0 {
            let inv = 1.0 / extent as f64;
            for v in out.iter_mut() {
                *v *= inv;
            }
        }
        Ok(Tensor::from_parts(out_shape, out))
    }

    /// Convenience transpose for matrices.
    pub fn transposed(&self) -> Tensor {
        assert_eq!(self.rank(), 2, "transpose wants a matrix");
        self.permute_modes(&[2, 1]).expect("permutation is valid")
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    Max,
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

fn is_permutation(perm: &[usize], r: usize) -> bool {
    if perm.len() != r {
        return false;
    }
    let mut seen = vec![false; r];
    for &p in perm {
        if p == 0 || p > r || seen[p - 1] {
            return false;
        }
        seen[p - 1] = true;
    }
    true
}

/// Unrolled dot product (four accumulators; order differs from the naive
/// left-to-right sum, which is fine for f64 work at our tolerances).
#[inline]
pub(crate) fn dot_raw(a: &[f64], b: &[f64]) -> f64 {
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for (x, y) in (&mut ca).zip(&mut cb) {
        s0 += x[0] * y[0];
        s1 += x[1] * y[1];
        s2 += x[2] * y[2];
        s3 += x[3] * y[3];
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        s += x * y;
    }
    s
}

/// `out += av * brow`, the axpy kernel of the matrix products.
#[inline]
fn axpy(out: &mut [f64], av: f64, brow: &[f64]) {
    for (o, &bv) in out.iter_mut().zip(brow) {
        *o += av * bv;
    }
}

/// Raw matrix product `a (m x k) * b (k x n)`, row-major.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    matmul_raw_into(a, b, m, k, n, &mut out);
    out
}

pub(crate) fn matmul_raw_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), m * n);
    if n <= 8 && m >= 4 {
        // Tall-skinny product: four rows share one streaming pass over b,
        // accumulating in registers.
        let blocks = m / 4;
        for blk in 0..blocks {
            let i = blk * 4;
            let a0 = &a[i * k..(i + 1) * k];
            let a1 = &a[(i + 1) * k..(i + 2) * k];
            let a2 = &a[(i + 2) * k..(i + 3) * k];
            let a3 = &a[(i + 3) * k..(i + 4) * k];
            let mut acc = [0.0f64; 32];
            for (p, brow) in b.chunks_exact(n).enumerate().take(k) {
                let (v0, v1, v2, v3) = (a0[p], a1[p], a2[p], a3[p]);
                for (j, &bv) in brow.iter().enumerate() {
                    acc[j] += v0 * bv;
                    acc[8 + j] += v1 * bv;
                    acc[16 + j] += v2 * bv;
                    acc[24 + j] += v3 * bv;
                }
            }
            for r in 0..4 {
                let orow = &mut out[(i + r) * n..(i + r + 1) * n];
                for (o, &v) in orow.iter_mut().zip(&acc[r * 8..r * 8 + n]) {
                    *o += v;
                }
            }
        }
        for i in blocks * 4..m {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (brow, &av) in b.chunks_exact(n).zip(arow) {
                axpy(orow, av, brow);
            }
        }
        return;
    }
    for (arow, orow) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)).take(m) {
        for (brow, &av) in b.chunks_exact(n).zip(arow) {
            axpy(orow, av, brow);
        }
    }
}

/// Raw product `a (m x k) * b^T` where `b` is `n x k`, row-major.
pub(crate) fn matmul_nt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for (arow, orow) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)).take(m) {
        for (brow, o) in b.chunks_exact(k).zip(orow.iter_mut()) {
            *o = dot_raw(arow, brow);
        }
    }
    out
}

/// Raw product `a^T * b` where `a` is `k x m`, `b` is `k x n`, row-major.
pub(crate) fn matmul_tn_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if n <= 8 {
        // Accumulate four output rows at a time from strided a columns.
        let blocks = m / 4;
        for blk in 0..blocks {
            let i = blk * 4;
            let mut acc = [0.0f64; 32];
            for (p, brow) in b.chunks_exact(n).enumerate().take(k) {
                let base = p * m + i;
                let (v0, v1, v2, v3) = (a[base], a[base + 1], a[base + 2], a[base + 3]);
                for (j, &bv) in brow.iter().enumerate() {
                    acc[j] += v0 * bv;
                    acc[8 + j] += v1 * bv;
                    acc[16 + j] += v2 * bv;
                    acc[24 + j] += v3 * bv;
                }
            }
            for r in 0..4 {
                out[(i + r) * n..(i + r + 1) * n].copy_from_slice(&acc[r * 8..r * 8 + n]);
            }
        }
        for i in blocks * 4..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, brow) in b.chunks_exact(n).enumerate().take(k) {
                axpy(orow, a[p * m + i], brow);
            }
        }
        return out;
    }
    for (arow, brow) in a.chunks_exact(m).zip(b.chunks_exact(n)).take(k) {
        for (orow, &av) in out.chunks_exact_mut(n).zip(arow) {
            axpy(orow, av, brow);
        }
    }
    out
}
