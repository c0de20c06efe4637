//! Dense row-major `f64` tensors and the raw kernels behind the autodiff ops.

use std::fmt;

use crate::error::{Error, Result};
use crate::rng::RandomState;

/// A dense multi-axis array of 64-bit floats in row-major order.
///
/// A tensor with an empty shape is a scalar holding one element.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?} [{} elements]", self.shape, self.data.len())
        }
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} holds {} elements but {} were given",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: f64) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self {
            shape,
            data: vec![v; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape)).map(&mut f).collect();
        Self { shape, data }
    }

    /// i.i.d. normal entries with the given standard deviation.
    pub fn randn(shape: impl Into<Vec<usize>>, std: f64, rng: &mut RandomState) -> Self {
        Self::from_fn(shape, |_| std * rng.normal())
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Length of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn into_reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn check_finite(&self, op: &str) -> Result<()> {
        // x - x is NaN exactly for inf and NaN; lane-wise accumulation vectorises.
        let mut acc = [0.0f64; 8];
        let chunks = self.data.chunks_exact(8);
        let tail = chunks.remainder();
        for c in chunks {
            for k in 0..8 {
                acc[k] += c[k] - c[k];
            }
        }
        let clean = acc.iter().all(|a| *a == 0.0) && tail.iter().all(|x| x.is_finite());
        if clean {
            return Ok(());
        }
        if let Some(i) = self.data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "{op} produced a non-finite value ({}) at flat index {i}",
                self.data[i]
            )));
        }
        Ok(())
    }

    /// General axis permutation; `axes[i]` names the source axis of output axis `i`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Dimension(format!(
                "invalid permutation {axes:?} for shape {:?}",
                self.shape
            )));
        }
        let src_strides = strides(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let perm_strides: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
        let mut out = Vec::with_capacity(self.data.len());
        if r == 0 || self.data.is_empty() {
            return Self::new(out_shape, self.data.clone());
        }
        // Innermost axis is copied as a strided run.
        let inner = out_shape[r - 1];
        let inner_stride = perm_strides[r - 1];
        let outer: usize = out_shape[..r - 1].iter().product();
        let mut idx = vec![0usize; r - 1];
        for _ in 0..outer {
            let base: usize = idx.iter().zip(&perm_strides).map(|(i, s)| i * s).sum();
            if inner_stride == 1 {
                out.extend_from_slice(&self.data[base..base + inner]);
            } else {
                out.extend((0..inner).map(|j| self.data[base + j * inner_stride]));
            }
            for ax in (0..r - 1).rev() {
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Self::new(out_shape, out)
    }

    pub fn swap_axes(&self, i: usize, j: usize) -> Result<Self> {
        let mut axes: Vec<usize> = (0..self.rank()).collect();
        if i >= axes.len() || j >= axes.len() {
            return Err(Error::Dimension(format!(
                "swap_axes({i}, {j}) on shape {:?}",
                self.shape
            )));
        }
        axes.swap(i, j);
        self.permute(&axes)
    }

    pub fn transpose_last2(&self) -> Result<Self> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::Dimension(format!(
                "transpose needs rank >= 2, got shape {:?}",
                self.shape
            )));
        }
        self.swap_axes(r - 2, r - 1)
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `c (+)= op(a) · op(b)` for an `m×k` by `k×n` product, row-major storage.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    // SAFETY: slice lengths are checked above and the strides describe
    // exactly those row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Batch layout of a matmul: how many products and whether each side is shared.
#[derive(Clone, Debug)]
pub(crate) struct MatmulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub a_batched: bool,
    pub b_batched: bool,
    pub out_shape: Vec<usize>,
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatmulDims> {
    let err = || {
        Error::Dimension(format!(
            "matmul shape mismatch: {a:?} @ {b:?}"
        ))
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (ab, am) = a.split_at(a.len() - 2);
    let (bb, bm) = b.split_at(b.len() - 2);
    if am[1] != bm[0] {
        return Err(err());
    }
    let batch_shape = if ab == bb || bb.is_empty() {
        ab
    } else if ab.is_empty() {
        bb
    } else {
        return Err(err());
    };
    let mut out_shape = batch_shape.to_vec();
    out_shape.extend([am[0], bm[1]]);
    Ok(MatmulDims {
        batch: numel(batch_shape),
        m: am[0],
        k: am[1],
        n: bm[1],
        a_batched: !ab.is_empty(),
        b_batched: !bb.is_empty(),
        out_shape,
    })
}

/// Batched matrix product `a[.., m, k] @ b[.., k, n]`.
///
/// Leading axes must match, or one side may be a plain matrix that is
/// shared across the other side's batch.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = matmul_dims(&a.shape, &b.shape)?;
    let mut out = vec![0.0; numel(&d.out_shape)];
    let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
    if !d.b_batched && d.a_batched {
        // Shared right operand: fold the batch into rows.
        gemm(d.batch * d.m, d.k, d.n, &a.data, false, &b.data, false, &mut out, false);
    } else {
        for i in 0..d.batch {
            let ao = if d.a_batched { i * sa } else { 0 };
            let bo = if d.b_batched { i * sb } else { 0 };
            gemm(
                d.m,
                d.k,
                d.n,
                &a.data[ao..ao + sa],
                false,
                &b.data[bo..bo + sb],
                false,
                &mut out[i * sc..(i + 1) * sc],
                false,
            );
        }
    }
    Tensor::new(d.out_shape, out)
}

/// Checks that `small` broadcasts onto `big` as a suffix and returns its length.
pub(crate) fn suffix_len(big: &[usize], small: &[usize], op: &str) -> Result<usize> {
    if small.len() > big.len() || big[big.len() - small.len()..] != *small {
        return Err(Error::Dimension(format!(
            "{op}: shape {small:?} does not broadcast onto {big:?}"
        )));
    }
    Ok(numel(small))
}
