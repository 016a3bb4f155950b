// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense f32 kernels.
//!
//! Storage is f32; every reduction (inner products, mean of squares, KL sums)
//! accumulates in f64 and runs in a fixed left-to-right order, so the same
//! inputs always produce the same bits regardless of how many rows are
//! processed together.

use crate::error::{Error, Result};

/// Row-major f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, checking that the shape matches the data and that
    /// every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor construction"));
        }
        Ok(Self { shape, data })
    }

    /// 1-D tensor from a vector.
    pub fn vector(data: Vec<f32>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    /// 2-D tensor from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape(format!("expected a matrix, got shape {other:?}"))),
        }
    }

    /// Length of a 1-D tensor.
    pub fn dims1(&self) -> Result<usize> {
        match self.shape.as_slice() {
            [n] => Ok(*n),
            other => Err(Error::Shape(format!("expected a vector, got shape {other:?}"))),
        }
    }

    /// Fails with [`Error::NonFinite`] if any value is NaN or infinite.
    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        check_finite(&self.data, op)
    }
}

pub(crate) fn check_finite(data: &[f32], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

/// Matrix product `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner dimensions differ: {m}x{k} · {k2}x{n}"
        )));
    }
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for (i, out_row) in out.chunks_exact_mut(n).enumerate() {
        row_times_matrix(a.row(i), &b.data, n, &mut acc, out_row);
    }
    let t = Tensor::matrix(m, n, out).map_err(|_| Error::NonFinite("matmul"))?;
    Ok(t)
}

/// `out = x · w` for a row vector `x[k]` and row-major `w[k×n]`.
///
/// Each output column is summed over `k` from left to right in f64. The
/// caller provides the f64 scratch buffer (`acc.len() == n`).
pub fn row_times_matrix(x: &[f32], w: &[f32], n: usize, acc: &mut [f64], out: &mut [f32]) {
    debug_assert_eq!(x.len() * n, w.len());
    debug_assert_eq!(acc.len(), n);
    acc.iter_mut().for_each(|a| *a = 0.0);
    for (&xk, w_row) in x.iter().zip(w.chunks_exact(n)) {
        let xk = f64::from(xk);
        for (a, &wkj) in acc.iter_mut().zip(w_row) {
            *a += xk * f64::from(wkj);
        }
    }
    for (o, &a) in out.iter_mut().zip(acc.iter()) {
        *o = a as f32;
    }
}

/// Inner product in f64, summed left to right.
pub fn dot(x: &[f32], y: &[f32]) -> f64 {
    x.iter()
        .zip(y)
        .fold(0.0f64, |acc, (&a, &b)| acc + f64::from(a) * f64::from(b))
}

/// Euclidean norm in f64.
pub fn l2_norm(x: &[f32]) -> f64 {
    dot(x, x).sqrt()
}

/// Numerically stable softmax over a 1-D tensor.
pub fn softmax(v: &Tensor) -> Result<Tensor> {
    v.dims1()?;
    let out = softmax_slice(v.data())?;
    Tensor::vector(out)
}

/// Softmax of a slice; max-subtracted, evaluated in f64.
pub fn softmax_slice(v: &[f32]) -> Result<Vec<f32>> {
    if v.is_empty() {
        return Err(Error::Shape("softmax of an empty vector".into()));
    }
    let wide: Vec<f64> = v.iter().map(|&x| f64::from(x)).collect();
    let probs = softmax_f64(&wide);
    let out: Vec<f32> = probs.into_iter().map(|p| p as f32).collect();
    check_finite(&out, "softmax")?;
    Ok(out)
}

/// Softmax on f64 scores. `v` must be nonempty.
pub fn softmax_f64(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    out
}

/// RMS normalization: `gain_i · x_i / sqrt(mean(x²) + eps)`.
pub fn rmsnorm(x: &Tensor, gain: &Tensor, eps: f32) -> Result<Tensor> {
    let d = x.dims1()?;
    if gain.dims1()? != d {
        return Err(Error::Shape(format!(
            "rmsnorm gain has {} entries, input has {d}",
            gain.len()
        )));
    }
    if eps.is_nan() || eps < 0.0 {
        return Err(Error::Param(format!("rmsnorm eps must be nonnegative, got {eps}")));
    }
    let mut out = vec![0.0; d];
    rmsnorm_slice(x.data(), gain.data(), eps, &mut out);
    check_finite(&out, "rmsnorm")?;
    Tensor::vector(out)
}

/// Slice form of [`rmsnorm`]. A zero input with `eps == 0` yields zeros.
pub fn rmsnorm_slice(x: &[f32], gain: &[f32], eps: f32, out: &mut [f32]) {
    let mean_sq = x.iter().fold(0.0f64, |acc, &v| acc + f64::from(v) * f64::from(v)) / x.len() as f64;
    let denom = (mean_sq + f64::from(eps)).sqrt();
    if denom == 0.0 {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let inv = 1.0 / denom;
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = (f64::from(g) * f64::from(v) * inv) as f32;
    }
}

/// The `k` largest entries of a 1-D tensor, largest first; ties go to the
/// lower index.
pub fn topk(v: &Tensor, k: usize) -> Result<(Vec<usize>, Vec<f32>)> {
    v.dims1()?;
    let idx = topk_indices(v.data(), k)?;
    let vals = idx.iter().map(|&i| v.data()[i]).collect();
    Ok((idx, vals))
}

/// Index form of [`topk`] over any ordered slice.
pub fn topk_indices<T: Copy + PartialOrd>(v: &[T], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > v.len() {
        return Err(Error::Param(format!("top-k needs 1 <= k <= {}, got k = {k}", v.len())));
    }
    let mut chosen: Vec<usize> = Vec::with_capacity(k + 1);
    for i in 0..v.len() {
        // insertion into a short sorted list; strict comparison keeps the
        // earlier index ahead on ties
        let pos = chosen.iter().position(|&j| v[i] > v[j]).unwrap_or(chosen.len());
        if pos < k {
            chosen.insert(pos, i);
            chosen.truncate(k);
        }
    }
    Ok(chosen)
}

/// Cosine similarity with a degeneracy flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    /// In `[-1, 1]`; 0 when degenerate.
    pub value: f64,
    /// Set when either input has norm below `1e-12`.
    pub degenerate: bool,
}

/// Norm threshold below which a cosine is flagged degenerate.
pub const COSINE_NORM_FLOOR: f64 = 1e-12;

/// `x·y / (‖x‖‖y‖)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(x: &[f32], y: &[f32]) -> Result<Cosine> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "cosine of vectors with {} and {} entries",
            x.len(),
            y.len()
        )));
    }
    let xx = dot(x, x);
    let yy = dot(y, y);
    if xx.sqrt() < COSINE_NORM_FLOOR || yy.sqrt() < COSINE_NORM_FLOOR {
        return Ok(Cosine {
            value: 0.0,
            degenerate: true,
        });
    }
    let value = (dot(x, y) / (xx * yy).sqrt()).clamp(-1.0, 1.0);
    Ok(Cosine {
        value,
        degenerate: false,
    })
}

/// Floor applied to `q` before taking the log in [`kl_divergence`].
pub const KL_FLOOR: f64 = 1e-12;

/// `Σ p_i ln(p_i / q_i)`, skipping terms with `p_i = 0`.
///
/// Both inputs must sum to 1 within `1e-5`.
pub fn kl_divergence(p: &[f32], q: &[f32]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "kl between distributions of size {} and {}",
            p.len(),
            q.len()
        )));
    }
    for (name, d) in [("p", p), ("q", q)] {
        let total: f64 = d.iter().map(|&v| f64::from(v)).sum();
        if (total - 1.0).abs() > 1e-5 || d.iter().any(|&v| v < 0.0) {
            return Err(Error::Param(format!("{name} is not a distribution (sum {total})")));
        }
    }
    let kl = p.iter().zip(q).fold(0.0f64, |acc, (&pi, &qi)| {
        if pi == 0.0 {
            acc
        } else {
            let pi = f64::from(pi);
            acc + pi * (pi / f64::from(qi).max(KL_FLOOR)).ln()
        }
    });
    Ok(kl.max(0.0))
}
