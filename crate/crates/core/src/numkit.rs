//! Dense numeric kernel: row-major matrices, a splittable deterministic RNG,
//! softmax / cross-entropy, and a central-difference gradient checker.
//!
//! Every model in the crate stores its parameters as one flat `Vec<f64>`, so
//! the matrix products are exposed both on [`Matrix`] values and as raw
//! slice kernels that operate on views into that buffer.

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Probability floor applied before taking `-ln p`.
pub const CE_CLAMP: f64 = 1e-12;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dims(
                "Matrix::new",
                format!("{rows}x{cols}"),
                format!("{} values", data.len()),
            ));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Evaluation(format!(
                "matrix entry {} = {}",
                bad, data[bad]
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::dims(
                    "Matrix::from_rows",
                    format!("row 0 has {cols} columns"),
                    format!("row {i} has {}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Internal constructor for kernels that already guarantee the length.
    pub(crate) fn from_parts(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn shape_str(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics; an n×0 matrix yields n empty rows.
        let cols = self.cols.max(1);
        let empty = self.cols == 0;
        (0..self.rows).map(move |r| {
            if empty {
                &self.data[0..0]
            } else {
                &self.data[r * cols..(r + 1) * cols]
            }
        })
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Gathers the given rows into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix::from_parts(indices.len(), self.cols, data)
    }

    /// Copy with a single entry replaced.
    pub fn with_entry(&self, r: usize, c: usize, v: f64) -> Matrix {
        let mut m = self.clone();
        m.data[r * self.cols + c] = v;
        m
    }

    /// Index of the largest entry per row; first index wins ties.
    pub fn argmax_rows(&self) -> Vec<usize> {
        self.iter_rows().map(argmax).collect()
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix::from_parts(
            self.rows,
            self.cols,
            self.data.iter().map(|v| v * s).collect(),
        )
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Deterministic ChaCha8 stream. Client streams are derived as `seed ^ id`
/// on a separate ChaCha stream so they never alias the parent.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream for client `id`.
    pub fn split(&self, id: u64) -> Rng {
        let seed = self.seed ^ id;
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(1);
        Rng { seed, inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    pub fn fill_bytes(&mut self, buf: &mut [u8]) {
        self.inner.fill_bytes(buf);
    }
}

// ---------------------------------------------------------------------------
// Slice kernels. All matrices are row-major.
// ---------------------------------------------------------------------------

/// `out[n×m] = input[n×d] · weights[d×m] + bias[m]`.
///
/// Zero inputs are skipped; image batches are mostly background.
pub(crate) fn affine_into(
    input: &[f64],
    n: usize,
    d: usize,
    weights: &[f64],
    m: usize,
    bias: &[f64],
    out: &mut [f64],
) {
    for i in 0..n {
        let o = &mut out[i * m..(i + 1) * m];
        o.copy_from_slice(bias);
        let x = &input[i * d..(i + 1) * d];
        for (k, &xv) in x.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let w = &weights[k * m..(k + 1) * m];
            for (oj, &wj) in o.iter_mut().zip(w) {
                *oj += xv * wj;
            }
        }
    }
}

/// `grad_w[d×m] += input[n×d]ᵀ · delta[n×m]` and `grad_b[m] += Σ_i delta[i]`.
pub(crate) fn accumulate_affine_grads(
    input: &[f64],
    n: usize,
    d: usize,
    delta: &[f64],
    m: usize,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) {
    for i in 0..n {
        let dy = &delta[i * m..(i + 1) * m];
        for (gb, &v) in grad_b.iter_mut().zip(dy) {
            *gb += v;
        }
        let x = &input[i * d..(i + 1) * d];
        for (k, &xv) in x.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let g = &mut grad_w[k * m..(k + 1) * m];
            for (gj, &dj) in g.iter_mut().zip(dy) {
                *gj += xv * dj;
            }
        }
    }
}

/// `out[n×d] = delta[n×m] · weights[d×m]ᵀ`.
pub(crate) fn backprop_input(
    delta: &[f64],
    n: usize,
    m: usize,
    weights: &[f64],
    d: usize,
    out: &mut [f64],
) {
    for i in 0..n {
        let dy = &delta[i * m..(i + 1) * m];
        let o = &mut out[i * d..(i + 1) * d];
        for (k, ok) in o.iter_mut().enumerate() {
            let w = &weights[k * m..(k + 1) * m];
            *ok = dy.iter().zip(w).map(|(a, b)| a * b).sum();
        }
    }
}

pub(crate) fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Row-wise softmax of a flat `n×k` buffer, in place.
pub(crate) fn softmax_in_place(v: &mut [f64], k: usize) {
    for row in v.chunks_exact_mut(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
}

// ---------------------------------------------------------------------------
// Public operations
// ---------------------------------------------------------------------------

pub fn affine_forward(input: &Matrix, weights: &Matrix, bias: &[f64]) -> Result<Matrix> {
    if input.cols != weights.rows || bias.len() != weights.cols {
        return Err(Error::dims(
            "affine_forward",
            format!("input {}", input.shape_str()),
            format!("weights {} / bias {}", weights.shape_str(), bias.len()),
        ));
    }
    let (n, d, m) = (input.rows, input.cols, weights.cols);
    let mut out = vec![0.0; n * m];
    affine_into(&input.data, n, d, &weights.data, m, bias, &mut out);
    Matrix::new(n, m, out)
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut data = logits.data.clone();
    if logits.cols > 0 {
        softmax_in_place(&mut data, logits.cols);
    }
    Matrix::from_parts(logits.rows, logits.cols, data)
}

/// Mean of `-ln(max(p[i, y_i], 1e-12))`.
pub fn cross_entropy(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    if probs.rows != labels.len() {
        return Err(Error::dims(
            "cross_entropy",
            format!("probs {}", probs.shape_str()),
            format!("{} labels", labels.len()),
        ));
    }
    if probs.rows == 0 {
        return Err(Error::Evaluation("cross-entropy of an empty batch".into()));
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= probs.cols {
            return Err(Error::Index {
                what: "class label",
                index: y,
                bound: probs.cols,
            });
        }
        total -= probs.get(i, y).max(CE_CLAMP).ln();
    }
    Ok(total / labels.len() as f64)
}

/// Relative error used by [`grad_check`]: `|num - ana| / (|ana| + 1e-8)`.
pub fn relative_error(numeric: f64, analytic: f64) -> f64 {
    (numeric - analytic).abs() / (analytic.abs() + 1e-8)
}

/// Central-difference check of `analytic` against `f` at every coordinate of `x`.
pub fn grad_check<F>(f: F, x: &[f64], analytic: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_at(f, x, analytic, h, &coords)
}

/// As [`grad_check`] but restricted to `coords`.
pub fn grad_check_at<F>(mut f: F, x: &[f64], analytic: &[f64], h: f64, coords: &[usize]) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if x.len() != analytic.len() {
        return Err(Error::dims(
            "grad_check",
            format!("x has {}", x.len()),
            format!("gradient has {}", analytic.len()),
        ));
    }
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Config(format!("finite-difference step {h} outside [1e-7, 1e-3]")));
    }
    let mut probe = x.to_vec();
    let mut worst = 0.0_f64;
    for &i in coords {
        if i >= x.len() {
            return Err(Error::Index {
                what: "grad_check coordinate",
                index: i,
                bound: x.len(),
            });
        }
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Evaluation(format!("objective at coordinate {i}")));
        }
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(relative_error(numeric, analytic[i]));
    }
    Ok(worst)
}
