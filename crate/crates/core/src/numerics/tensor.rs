use std::fmt;
use std::sync::Arc;

use super::instrument::{add_ops, on_alloc, on_free};
use crate::error::{shape_err, Error, Result};

/// Epsilon added to the variance in [`Tensor::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Tracked storage: registers its size with the scratch ledger.
struct Buffer(Vec<f64>);

impl Buffer {
    fn new(v: Vec<f64>) -> Self {
        on_alloc(v.len() * std::mem::size_of::<f64>());
        Buffer(v)
    }
}

impl Clone for Buffer {
    fn clone(&self) -> Self {
        Buffer::new(self.0.clone())
    }
}

impl Drop for Buffer {
    fn drop(&mut self) {
        on_free(self.0.len() * std::mem::size_of::<f64>());
    }
}

/// Dense row-major array of `f64`.
///
/// Tensors are immutable values; cloning shares the underlying buffer.
/// Every public constructor and operation rejects NaN and infinities.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Buffer>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = self.data();
        let preview: Vec<f64> = d.iter().take(8).copied().collect();
        write!(f, "Tensor{:?} {:?}", self.shape, preview)?;
        if d.len() > 8 {
            write!(f, "...")?;
        }
        Ok(())
    }
}

impl PartialEq for Tensor {
    /// Bitwise comparison of shape and contents.
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data()
                .iter()
                .zip(other.data())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Builds a tensor, checking the length and that every value is finite.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if numel(shape) != data.len() {
            return shape_err(
                "Tensor::new",
                format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            );
        }
        Self::raw(shape.to_vec(), data).checked("Tensor::new")
    }

    pub(crate) fn raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            shape,
            data: Arc::new(Buffer::new(data)),
        }
    }

    pub(crate) fn checked(self, op: &'static str) -> Result<Self> {
        if self.data().iter().all(|v| v.is_finite()) {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::raw(shape.to_vec(), vec![0.0; numel(shape)])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(value.is_finite(), "Tensor::full with non-finite value");
        Self::raw(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return shape_err("Tensor::from_rows", "ragged rows");
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(&[rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            d[i * n + i] = 1.0;
        }
        Self::raw(vec![n, n], d)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &[f64] {
        &self.data.0
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data().to_vec()
    }

    /// Row count of a matrix (first extent).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Column count of a matrix (product of trailing extents).
    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data()[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data()[i * self.cols() + j]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data() {
            [v] => Ok(*v),
            _ => shape_err("Tensor::item", format!("expected one element, shape {:?}", self.shape)),
        }
    }

    /// Same data viewed under a new shape; no copy.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.len() {
            return shape_err(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            );
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    fn expect_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => shape_err(op, format!("expected a matrix, got {:?}", self.shape)),
        }
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            shape_err(op, format!("{:?} vs {:?}", self.shape, other.shape))
        }
    }

    // ---- products -------------------------------------------------------

    /// `self[m,k] · other[k,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.expect_matrix("matmul")?;
        let (k2, n) = other.expect_matrix("matmul")?;
        if k != k2 {
            return shape_err("matmul", format!("{:?} x {:?}", self.shape, other.shape));
        }
        let a = self.data();
        let b = other.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
                if aip == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        add_ops((m * k * n) as u64);
        Tensor::raw(vec![m, n], out).checked("matmul")
    }

    /// `self[m,k] · other[n,k]ᵀ`.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.expect_matrix("matmul_nt")?;
        let (n, k2) = other.expect_matrix("matmul_nt")?;
        if k != k2 {
            return shape_err("matmul_nt", format!("{:?} x {:?}T", self.shape, other.shape));
        }
        let a = self.data();
        let b = other.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
            }
        }
        add_ops((m * k * n) as u64);
        Tensor::raw(vec![m, n], out).checked("matmul_nt")
    }

    /// `self[k,m]ᵀ · other[k,n]`.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        let (k, m) = self.expect_matrix("matmul_tn")?;
        let (k2, n) = other.expect_matrix("matmul_tn")?;
        if k != k2 {
            return shape_err("matmul_tn", format!("{:?}T x {:?}", self.shape, other.shape));
        }
        let a = self.data();
        let b = other.data();
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            for (i, &api) in a[p * m..(p + 1) * m].iter().enumerate() {
                if api == 0.0 {
                    continue;
                }
                for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                    *o += api * bv;
                }
            }
        }
        add_ops((m * k * n) as u64);
        Tensor::raw(vec![m, n], out).checked("matmul_tn")
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.expect_matrix("transpose")?;
        let a = self.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a[i * n + j];
            }
        }
        Ok(Tensor::raw(vec![n, m], out))
    }

    // ---- elementwise ----------------------------------------------------

    pub(crate) fn map(&self, op: &'static str, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let out: Vec<f64> = self.data().iter().map(|&v| f(v)).collect();
        add_ops(out.len() as u64);
        Tensor::raw(self.shape.clone(), out).checked(op)
    }

    pub(crate) fn zip(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.same_shape(other, op)?;
        let out: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| f(a, b))
            .collect();
        add_ops(out.len() as u64);
        Tensor::raw(self.shape.clone(), out).checked(op)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Result<Tensor> {
        self.map("scale", |v| v * s)
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.map("relu", |v| v.max(0.0))
    }

    pub fn softplus(&self) -> Result<Tensor> {
        self.map("softplus", softplus)
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.map("sigmoid", sigmoid)
    }

    /// Adds a bias vector `[n]` to every row of a `[m, n]` matrix.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let (m, n) = self.expect_matrix("add_row")?;
        if bias.len() != n {
            return shape_err("add_row", format!("{:?} + bias {:?}", self.shape, bias.shape));
        }
        let b = bias.data();
        let mut out = self.to_vec();
        for row in out.chunks_exact_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        add_ops((m * n) as u64);
        Tensor::raw(vec![m, n], out).checked("add_row")
    }

    /// Column sums of a matrix as a vector `[n]`.
    pub fn col_sums(&self) -> Result<Tensor> {
        let (_, n) = self.expect_matrix("col_sums")?;
        let mut out = vec![0.0; n];
        for row in self.data().chunks_exact(n.max(1)) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        add_ops(self.len() as u64);
        Tensor::raw(vec![n], out).checked("col_sums")
    }

    pub fn sum(&self) -> f64 {
        self.data().iter().sum()
    }

    // ---- row-wise reductions ---------------------------------------------

    /// Softmax of each row, computed with max subtraction.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (m, n) = self.expect_matrix("softmax_rows")?;
        let mut out = self.to_vec();
        for row in out.chunks_exact_mut(n.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        add_ops((m * n) as u64);
        Tensor::raw(vec![m, n], out).checked("softmax_rows")
    }

    /// `log Σ exp` of each row as a vector `[m]`.
    pub fn logsumexp_rows(&self) -> Result<Tensor> {
        let (m, n) = self.expect_matrix("logsumexp_rows")?;
        if n == 0 {
            return Err(Error::Empty("logsumexp over an empty row"));
        }
        let out: Vec<f64> = self
            .data()
            .chunks_exact(n)
            .map(logsumexp_unchecked)
            .collect();
        add_ops((m * n) as u64);
        Tensor::raw(vec![m], out).checked("logsumexp_rows")
    }

    /// Row-wise layer normalisation with learned gain and bias `[n]`.
    ///
    /// The standard deviation is `sqrt(var + 1e-5)`, so constant rows map to
    /// the bias rather than NaN.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        Ok(self.layer_norm_parts(gain, bias)?.0)
    }

    /// Layer norm plus the normalised input and per-row inverse std, which
    /// the backward pass needs.
    pub(crate) fn layer_norm_parts(
        &self,
        gain: &Tensor,
        bias: &Tensor,
    ) -> Result<(Tensor, Tensor, Vec<f64>)> {
        let (m, n) = self.expect_matrix("layer_norm")?;
        if gain.len() != n || bias.len() != n {
            return shape_err(
                "layer_norm",
                format!("{:?} with gain {:?}, bias {:?}", self.shape, gain.shape, bias.shape),
            );
        }
        let (g, b) = (gain.data(), bias.data());
        let mut xhat = vec![0.0; m * n];
        let mut out = vec![0.0; m * n];
        let mut inv_std = Vec::with_capacity(m);
        for (i, row) in self.data().chunks_exact(n.max(1)).enumerate() {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        add_ops((5 * m * n) as u64);
        let out = Tensor::raw(vec![m, n], out).checked("layer_norm")?;
        Ok((out, Tensor::raw(vec![m, n], xhat), inv_std))
    }

    // ---- slicing --------------------------------------------------------

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        let (m, n) = self.expect_matrix("slice_cols")?;
        if start > end || end > n {
            return shape_err("slice_cols", format!("{start}..{end} of {n} columns"));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for row in self.data().chunks_exact(n.max(1)) {
            out.extend_from_slice(&row[start..end]);
        }
        Ok(Tensor::raw(vec![m, w], out))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let (m, n) = self.expect_matrix("slice_rows")?;
        if start > end || end > m {
            return shape_err("slice_rows", format!("{start}..{end} of {m} rows"));
        }
        Ok(Tensor::raw(
            vec![end - start, n],
            self.data()[start * n..end * n].to_vec(),
        ))
    }

    /// Rows picked by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let (m, n) = self.expect_matrix("select_rows")?;
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return shape_err("select_rows", format!("row {i} of {m}"));
            }
            out.extend_from_slice(self.row(i));
        }
        Ok(Tensor::raw(vec![idx.len(), n], out))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            return Err(Error::Empty("concat_cols of nothing"));
        };
        let m = first.expect_matrix("concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = p.expect_matrix("concat_cols")?;
            if r != m {
                return shape_err("concat_cols", format!("row counts {m} vs {r}"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data()[i * w..(i + 1) * w]);
            }
        }
        Ok(Tensor::raw(vec![m, total], out))
    }

    /// Vertical concatenation of matrices with equal column counts.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            return Err(Error::Empty("concat_rows of nothing"));
        };
        let n = first.expect_matrix("concat_rows")?.1;
        let mut out = Vec::new();
        let mut m = 0;
        for p in parts {
            let (r, c) = p.expect_matrix("concat_rows")?;
            if c != n {
                return shape_err("concat_rows", format!("column counts {n} vs {c}"));
            }
            out.extend_from_slice(p.data());
            m += r;
        }
        Ok(Tensor::raw(vec![m, n], out))
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `log(1 + exp(x))` without overflow for large `x`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logsumexp_unchecked(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `log Σ exp(x_i)` with max shifting.
pub fn logsumexp(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::Empty("logsumexp of an empty vector"));
    }
    if !xs.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { op: "logsumexp" });
    }
    add_ops(xs.len() as u64);
    Ok(logsumexp_unchecked(xs))
}
