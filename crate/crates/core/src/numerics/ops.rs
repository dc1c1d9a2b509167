//! Differentiable forward operations.
//!
//! Broadcasting is limited to a trailing-suffix operand (bias-style); anything
//! else needs an explicit [`Tensor::expand`] or [`Tensor::reshape`].

use rand::Rng;

use super::backward::{bmm_kernel, gelu_parts, Op};
use super::error::{NumericsError, Result};
use super::tensor::{numel_of, Tensor};
use crate::scalar::Scalar;

/// Layer-norm variance epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<S: Scalar> Tensor<S> {
    fn same_shape(&self, other: &Tensor<S>, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(NumericsError::shape(op, format!("{:?} vs {:?}", self.shape(), other.shape())));
        }
        Ok(())
    }

    fn last_dim(&self, op: &'static str) -> Result<usize> {
        self.shape()
            .last()
            .copied()
            .filter(|d| *d > 0)
            .ok_or_else(|| NumericsError::shape(op, "needs a non-empty trailing axis"))
    }

    /// `[..., m, k] x [k, n] -> [..., m, n]`; leading axes act as batch rows.
    pub fn matmul(&self, w: &Tensor<S>) -> Result<Tensor<S>> {
        if self.rank() < 1 || w.rank() != 2 {
            return Err(NumericsError::shape("matmul", format!("{:?} x {:?}", self.shape(), w.shape())));
        }
        let k = self.last_dim("matmul")?;
        let (wk, n) = (w.shape()[0], w.shape()[1]);
        if k != wk {
            return Err(NumericsError::shape("matmul", format!("{:?} x {:?}", self.shape(), w.shape())));
        }
        let rows = self.numel() / k;
        let mut out = vec![S::zero(); rows * n];
        S::gemm(rows, k, n, S::one(), &self.data(), false, &w.data(), false, S::zero(), &mut out);
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        Tensor::from_op(
            "matmul",
            shape,
            out,
            || Op::MatMul {
                a: self.clone(),
                b: w.clone(),
                rows,
                k,
                n,
            },
            &[self, w],
        )
    }

    /// Batched product `[b, m, k] x [b, k, n] -> [b, m, n]`.
    pub fn bmm(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let bad = || NumericsError::shape("bmm", format!("{:?} x {:?}", self.shape(), other.shape()));
        if self.rank() != 3 || other.rank() != 3 {
            return Err(bad());
        }
        let (batch, m, k) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (b2, k2, n) = (other.shape()[0], other.shape()[1], other.shape()[2]);
        if batch != b2 || k != k2 {
            return Err(bad());
        }
        let mut out = vec![S::zero(); batch * m * n];
        bmm_kernel(&self.data(), false, &other.data(), false, &mut out, batch, m, k, n);
        Tensor::from_op(
            "bmm",
            vec![batch, m, n],
            out,
            || Op::Bmm {
                a: self.clone(),
                b: other.clone(),
                batch,
                m,
                k,
                n,
            },
            &[self, other],
        )
    }

    fn zip_with(&self, other: &Tensor<S>, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Vec<S>> {
        self.same_shape(other, op)?;
        Ok(self.data().iter().zip(other.data().iter()).map(|(a, b)| f(*a, *b)).collect())
    }

    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let out = self.zip_with(other, "add", |a, b| a + b)?;
        Tensor::from_op(
            "add",
            self.shape().to_vec(),
            out,
            || Op::Add {
                a: self.clone(),
                b: other.clone(),
            },
            &[self, other],
        )
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let out = self.zip_with(other, "sub", |a, b| a - b)?;
        Tensor::from_op(
            "sub",
            self.shape().to_vec(),
            out,
            || Op::Sub {
                a: self.clone(),
                b: other.clone(),
            },
            &[self, other],
        )
    }

    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let out = self.zip_with(other, "mul", |a, b| a * b)?;
        Tensor::from_op(
            "mul",
            self.shape().to_vec(),
            out,
            || Op::Mul {
                a: self.clone(),
                b: other.clone(),
            },
            &[self, other],
        )
    }

    fn check_suffix(&self, b: &Tensor<S>, op: &'static str) -> Result<usize> {
        let (s, bs) = (self.shape(), b.shape());
        if bs.len() > s.len() || s[s.len() - bs.len()..] != *bs || b.numel() == 0 {
            return Err(NumericsError::shape(op, format!("{:?} is not a suffix of {:?}", bs, s)));
        }
        Ok(b.numel())
    }

    /// `self + b` with `b` repeated over the leading axes (bias add).
    pub fn add_suffix(&self, b: &Tensor<S>) -> Result<Tensor<S>> {
        let bn = self.check_suffix(b, "add_suffix")?;
        let bd = b.data();
        let out = self.data().iter().enumerate().map(|(i, v)| *v + bd[i % bn]).collect();
        drop(bd);
        Tensor::from_op(
            "add_suffix",
            self.shape().to_vec(),
            out,
            || Op::AddSuffix {
                a: self.clone(),
                b: b.clone(),
            },
            &[self, b],
        )
    }

    /// `self * b` with `b` repeated over the leading axes.
    pub fn mul_suffix(&self, b: &Tensor<S>) -> Result<Tensor<S>> {
        let bn = self.check_suffix(b, "mul_suffix")?;
        let bd = b.data();
        let out = self.data().iter().enumerate().map(|(i, v)| *v * bd[i % bn]).collect();
        drop(bd);
        Tensor::from_op(
            "mul_suffix",
            self.shape().to_vec(),
            out,
            || Op::MulSuffix {
                a: self.clone(),
                b: b.clone(),
            },
            &[self, b],
        )
    }

    pub fn scale(&self, factor: S) -> Result<Tensor<S>> {
        let out = self.data().iter().map(|v| *v * factor).collect();
        Tensor::from_op(
            "scale",
            self.shape().to_vec(),
            out,
            || Op::Scale { a: self.clone(), factor },
            &[self],
        )
    }

    /// Elementwise product with a constant (non-differentiable) array.
    pub fn mul_const(&self, mask: &[S]) -> Result<Tensor<S>> {
        if mask.len() != self.numel() {
            return Err(NumericsError::shape(
                "mul_const",
                format!("mask {} vs {}", mask.len(), self.numel()),
            ));
        }
        let out = self.data().iter().zip(mask).map(|(a, m)| *a * *m).collect();
        Tensor::from_op(
            "mul_const",
            self.shape().to_vec(),
            out,
            || Op::MulConst {
                a: self.clone(),
                mask: mask.to_vec(),
            },
            &[self],
        )
    }

    /// Inverted dropout with an explicit keep-mask drawn from `rng`.
    pub fn dropout<R: Rng + ?Sized>(&self, p: f64, rng: &mut R) -> Result<Tensor<S>> {
        if !(0.0..=1.0).contains(&p) {
            return Err(NumericsError::Usage(format!("dropout rate {p} outside [0,1]")));
        }
        let mask = dropout_mask(self.numel(), p, rng);
        self.mul_const(&mask)
    }

    pub fn softmax(&self) -> Result<Tensor<S>> {
        let cols = self.last_dim("softmax")?;
        let mut out = self.to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        Tensor::from_op(
            "softmax",
            self.shape().to_vec(),
            out,
            || Op::Softmax { a: self.clone(), cols },
            &[self],
        )
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    /// Constant rows map to zeros.
    pub fn layer_norm(&self) -> Result<Tensor<S>> {
        let cols = self.last_dim("layer_norm")?;
        let n = S::from_usize_lossy(cols);
        let eps = S::lit(LAYER_NORM_EPS);
        let data = self.data();
        let mut xhat = vec![S::zero(); data.len()];
        let mut inv_std = Vec::with_capacity(data.len() / cols);
        for (row, out) in data.chunks(cols).zip(xhat.chunks_mut(cols)) {
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<S>() / n;
            let inv = S::one() / (var + eps).sqrt();
            for (o, v) in out.iter_mut().zip(row) {
                *o = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        drop(data);
        let out = xhat.clone();
        Tensor::from_op(
            "layer_norm",
            self.shape().to_vec(),
            out,
            || Op::LayerNorm {
                a: self.clone(),
                cols,
                xhat,
                inv_std,
            },
            &[self],
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Result<Tensor<S>> {
        let out = self.data().iter().map(|x| gelu_parts(*x).0).collect();
        Tensor::from_op("gelu", self.shape().to_vec(), out, || Op::Gelu { a: self.clone() }, &[self])
    }

    /// `x ln x` with `0 ln 0 = 0`. Negative inputs are rejected.
    pub fn xlogx(&self) -> Result<Tensor<S>> {
        let data = self.data();
        if data.iter().any(|v| *v < S::zero()) {
            return Err(NumericsError::Usage("xlogx of a negative value".into()));
        }
        let out = data.iter().map(|x| if *x > S::zero() { *x * x.ln() } else { S::zero() }).collect();
        drop(data);
        Tensor::from_op("xlogx", self.shape().to_vec(), out, || Op::XLogX { a: self.clone() }, &[self])
    }

    pub fn sum(&self) -> Result<Tensor<S>> {
        let s = self.data().iter().copied().sum();
        Tensor::from_op(
            "sum",
            Vec::new(),
            vec![s],
            || Op::Sum {
                a: self.clone(),
                scale: S::one(),
            },
            &[self],
        )
    }

    pub fn mean(&self) -> Result<Tensor<S>> {
        if self.numel() == 0 {
            return Err(NumericsError::Usage("mean of an empty tensor".into()));
        }
        let scale = S::one() / S::from_usize_lossy(self.numel());
        let s = self.data().iter().copied().sum::<S>() * scale;
        Tensor::from_op("mean", Vec::new(), vec![s], || Op::Sum { a: self.clone(), scale }, &[self])
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> Result<Tensor<S>> {
        let name = if mean { "mean_axis" } else { "sum_axis" };
        if axis >= self.rank() {
            return Err(NumericsError::shape(name, format!("axis {axis} of {:?}", self.shape())));
        }
        let (outer, dim, inner) = split_axis(self.shape(), axis);
        if mean && dim == 0 {
            return Err(NumericsError::Usage("mean over an empty axis".into()));
        }
        let scale = if mean { S::one() / S::from_usize_lossy(dim) } else { S::one() };
        let data = self.data();
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let src = &data[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc = *acc + *v;
                }
            }
        }
        drop(data);
        out.iter_mut().for_each(|v| *v = *v * scale);
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Tensor::from_op(
            name,
            shape,
            out,
            || Op::SumAxis {
                a: self.clone(),
                outer,
                dim,
                inner,
                scale,
            },
            &[self],
        )
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<S>> {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<S>> {
        self.reduce_axis(axis, true)
    }

    /// Mean over the token axis of `[..., tokens, features]`.
    pub fn mean_pool(&self) -> Result<Tensor<S>> {
        if self.rank() < 2 {
            return Err(NumericsError::shape("mean_pool", format!("{:?}", self.shape())));
        }
        self.mean_axis(self.rank() - 2)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<S>> {
        if numel_of(shape) != self.numel() {
            return Err(NumericsError::shape("reshape", format!("{:?} -> {:?}", self.shape(), shape)));
        }
        Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            || Op::Reshape { a: self.clone() },
            &[self],
        )
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Tensor<S>> {
        if self.rank() < 2 {
            return Err(NumericsError::shape("transpose_last2", format!("{:?}", self.shape())));
        }
        let r = self.rank();
        let (rows, cols) = (self.shape()[r - 2], self.shape()[r - 1]);
        let batch = self.numel() / (rows * cols).max(1);
        let data = self.data();
        let mut out = vec![S::zero(); data.len()];
        for b in 0..batch {
            let base = b * rows * cols;
            for i in 0..rows {
                for j in 0..cols {
                    out[base + j * rows + i] = data[base + i * cols + j];
                }
            }
        }
        drop(data);
        let mut shape = self.shape().to_vec();
        shape.swap(r - 2, r - 1);
        Tensor::from_op(
            "transpose_last2",
            shape,
            out,
            || Op::TransposeLast2 {
                a: self.clone(),
                batch,
                rows,
                cols,
            },
            &[self],
        )
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<S>> {
        if axis >= self.rank() || start + len > self.shape()[axis] {
            return Err(NumericsError::shape(
                "narrow",
                format!("axis {axis} range {start}..{} of {:?}", start + len, self.shape()),
            ));
        }
        let (outer, dim, inner) = split_axis(self.shape(), axis);
        let data = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * dim + start) * inner;
            out.extend_from_slice(&data[from..from + len * inner]);
        }
        drop(data);
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Tensor::from_op(
            "narrow",
            shape,
            out,
            || Op::Narrow {
                a: self.clone(),
                outer,
                dim,
                inner,
                start,
                len,
            },
            &[self],
        )
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor<S>], axis: usize) -> Result<Tensor<S>> {
        let first = parts.first().ok_or_else(|| NumericsError::Usage("concat of nothing".into()))?;
        if axis >= first.rank() {
            return Err(NumericsError::shape("concat", format!("axis {axis} of {:?}", first.shape())));
        }
        let mut dims = Vec::with_capacity(parts.len());
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(NumericsError::shape("concat", format!("{:?} vs {:?}", p.shape(), first.shape())));
            }
            dims.push(p.shape()[axis]);
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let total: usize = dims.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        let datas: Vec<_> = parts.iter().map(|p| p.data()).collect();
        for o in 0..outer {
            for (d, data) in dims.iter().zip(&datas) {
                out.extend_from_slice(&data[o * d * inner..(o + 1) * d * inner]);
            }
        }
        drop(datas);
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let refs: Vec<&Tensor<S>> = parts.iter().collect();
        Tensor::from_op(
            "concat",
            shape,
            out,
            || Op::Concat {
                parts: parts.to_vec(),
                outer,
                dims,
                inner,
            },
            &refs,
        )
    }

    /// Inserts a new axis at `axis` holding `count` copies.
    pub fn expand(&self, axis: usize, count: usize) -> Result<Tensor<S>> {
        if axis > self.rank() {
            return Err(NumericsError::shape("expand", format!("axis {axis} of {:?}", self.shape())));
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis..].iter().product();
        let data = self.data();
        let mut out = Vec::with_capacity(outer * count * inner);
        for o in 0..outer {
            for _ in 0..count {
                out.extend_from_slice(&data[o * inner..(o + 1) * inner]);
            }
        }
        drop(data);
        let mut shape = self.shape().to_vec();
        shape.insert(axis, count);
        Tensor::from_op(
            "expand",
            shape,
            out,
            || Op::Expand {
                a: self.clone(),
                outer,
                count,
                inner,
            },
            &[self],
        )
    }

    /// Rows of axis 0 picked by `idx` (repeats allowed).
    pub fn index_select0(&self, idx: &[usize]) -> Result<Tensor<S>> {
        if self.rank() == 0 {
            return Err(NumericsError::shape("index_select0", "scalar input"));
        }
        let rows = self.shape()[0];
        if let Some(bad) = idx.iter().find(|i| **i >= rows) {
            return Err(NumericsError::shape("index_select0", format!("index {bad} >= {rows}")));
        }
        let row = self.numel() / rows.max(1);
        let data = self.data();
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            out.extend_from_slice(&data[i * row..(i + 1) * row]);
        }
        drop(data);
        let mut shape = self.shape().to_vec();
        shape[0] = idx.len();
        Tensor::from_op(
            "index_select0",
            shape,
            out,
            || Op::IndexSelect0 {
                a: self.clone(),
                idx: idx.to_vec(),
                row,
            },
            &[self],
        )
    }

    /// Embedding lookup: rows of a `[vocab, width]` table.
    pub fn embedding(&self, ids: &[usize]) -> Result<Tensor<S>> {
        if self.rank() != 2 {
            return Err(NumericsError::shape("embedding", format!("table {:?}", self.shape())));
        }
        self.index_select0(ids)
    }

    /// Inverse of [`Tensor::index_select0`]: row `i` is added into output row
    /// `idx[i]` of a zero tensor with `rows` rows.
    pub fn scatter_rows0(&self, idx: &[usize], rows: usize) -> Result<Tensor<S>> {
        if self.rank() == 0 || self.shape()[0] != idx.len() {
            return Err(NumericsError::shape(
                "scatter_rows0",
                format!("{:?} with {} indices", self.shape(), idx.len()),
            ));
        }
        if let Some(bad) = idx.iter().find(|i| **i >= rows) {
            return Err(NumericsError::shape("scatter_rows0", format!("index {bad} >= {rows}")));
        }
        let row = if idx.is_empty() {
            numel_of(&self.shape()[1..])
        } else {
            self.numel() / idx.len()
        };
        let data = self.data();
        let mut out = vec![S::zero(); rows * row];
        for (i, &dst) in idx.iter().enumerate() {
            for (o, v) in out[dst * row..(dst + 1) * row].iter_mut().zip(&data[i * row..(i + 1) * row]) {
                *o = *o + *v;
            }
        }
        drop(data);
        let mut shape = self.shape().to_vec();
        shape[0] = rows;
        Tensor::from_op(
            "scatter_rows0",
            shape,
            out,
            || Op::ScatterRows0 {
                a: self.clone(),
                idx: idx.to_vec(),
                row,
            },
            &[self],
        )
    }

    /// Multiplies each axis-0 slice by the matching entry of the 1-D `w`.
    pub fn scale_rows(&self, w: &Tensor<S>) -> Result<Tensor<S>> {
        if self.rank() == 0 || w.rank() != 1 || w.shape()[0] != self.shape()[0] {
            return Err(NumericsError::shape("scale_rows", format!("{:?} by {:?}", self.shape(), w.shape())));
        }
        let rows = self.shape()[0];
        let row = if rows == 0 { 0 } else { self.numel() / rows };
        let wd = w.data();
        let out = self.data().iter().enumerate().map(|(i, v)| *v * wd[i / row.max(1)]).collect();
        drop(wd);
        Tensor::from_op(
            "scale_rows",
            self.shape().to_vec(),
            out,
            || Op::ScaleRows {
                a: self.clone(),
                w: w.clone(),
                row,
            },
            &[self, w],
        )
    }

    /// Divides each last-axis row by its sum. Rows must have positive sums.
    pub fn normalize_rows(&self) -> Result<Tensor<S>> {
        let cols = self.last_dim("normalize_rows")?;
        let mut out = self.to_vec();
        for row in out.chunks_mut(cols) {
            let s: S = row.iter().copied().sum();
            if s <= S::zero() {
                return Err(NumericsError::Usage("normalize_rows: non-positive row sum".into()));
            }
            row.iter_mut().for_each(|v| *v = *v / s);
        }
        Tensor::from_op(
            "normalize_rows",
            self.shape().to_vec(),
            out,
            || Op::NormalizeRows { a: self.clone(), cols },
            &[self],
        )
    }
}

/// Keep-mask for inverted dropout: each entry is `0` with probability `p`,
/// otherwise `1/(1-p)`. `p = 1` drops everything.
pub fn dropout_mask<S: Scalar, R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Vec<S> {
    if p <= 0.0 {
        return vec![S::one(); len];
    }
    if p >= 1.0 {
        return vec![S::zero(); len];
    }
    let keep = S::lit(1.0 / (1.0 - p));
    (0..len).map(|_| if rng.gen::<f64>() < p { S::zero() } else { keep }).collect()
}
