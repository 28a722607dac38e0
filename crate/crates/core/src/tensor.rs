//! Floating-point reference attention.
//!
//! Everything here runs in `f64` and serves as the ground truth that the
//! quantized filtering path and the sparse attention path are measured
//! against.

use crate::error::{Error, Result};

/// Dense row-major matrix of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
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

    /// Builds a matrix from `f(row, col)`. Panics if `f` yields a non-finite value.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                let v = f(i, j);
                assert!(v.is_finite(), "non-finite value at ({i}, {j})");
                data.push(v);
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Copies columns `[start, end)` into a new matrix.
    pub fn column_block(&self, start: usize, end: usize) -> Matrix {
        debug_assert!(start <= end && end <= self.cols);
        let width = end - start;
        let mut data = Vec::with_capacity(self.rows * width);
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[start..end]);
        }
        Matrix {
            rows: self.rows,
            cols: width,
            data,
        }
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn hconcat(blocks: &[Matrix]) -> Result<Matrix> {
        let rows = blocks.first().map_or(0, Matrix::rows);
        if blocks.iter().any(|b| b.rows != rows) {
            return Err(Error::Shape("hconcat blocks differ in row count".into()));
        }
        let cols = blocks.iter().map(Matrix::cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for b in blocks {
                data.extend_from_slice(b.row(i));
            }
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// One attention head's query, key and value slices.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadSet {
    heads: Vec<Head>,
    n: usize,
    head_dim: usize,
}

impl HeadSet {
    pub fn from_heads(heads: Vec<Head>) -> Result<Self> {
        let first = heads.first().ok_or(Error::Empty("head set"))?;
        let (n, head_dim) = first.q.shape();
        for h in &heads {
            for m in [&h.q, &h.k, &h.v] {
                if m.shape() != (n, head_dim) {
                    return Err(Error::Shape(format!(
                        "head tensor {:?} differs from {:?}",
                        m.shape(),
                        (n, head_dim)
                    )));
                }
            }
        }
        Ok(Self { heads, n, head_dim })
    }

    pub fn heads(&self) -> &[Head] {
        &self.heads
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.n
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn model_dim(&self) -> usize {
        self.head_dim * self.heads.len()
    }
}

/// Splits `n x d` projections into `heads` column blocks of width `d / heads`.
pub fn split_heads(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize) -> Result<HeadSet> {
    if heads == 0 {
        return Err(Error::InvalidArgument("head count must be at least 1".into()));
    }
    if q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(Error::Shape(format!(
            "Q {:?}, K {:?}, V {:?} must share a shape",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let d = q.cols();
    if !d.is_multiple_of(heads) {
        return Err(Error::Shape(format!("model dim {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let split = (0..heads)
        .map(|h| {
            let (a, b) = (h * dh, (h + 1) * dh);
            Head {
                q: q.column_block(a, b),
                k: k.column_block(a, b),
                v: v.column_block(a, b),
            }
        })
        .collect();
    HeadSet::from_heads(split)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// Scaled score of one query/key pair. Shared by the dense and sparse paths so
/// that full selection reproduces dense attention bit for bit.
#[inline]
pub(crate) fn scaled_dot(q: &[f64], k: &[f64], head_dim: usize) -> f64 {
    dot(q, k) / (head_dim as f64).sqrt()
}

/// `S = Q_h K_h^T / sqrt(d_h)`.
pub fn scaled_scores(q: &Matrix, k: &Matrix) -> Result<Matrix> {
    if q.cols() != k.cols() {
        return Err(Error::Shape(format!(
            "inner dimensions differ: {} vs {}",
            q.cols(),
            k.cols()
        )));
    }
    let dh = q.cols();
    let mut data = Vec::with_capacity(q.rows() * k.rows());
    for i in 0..q.rows() {
        for j in 0..k.rows() {
            data.push(scaled_dot(q.row(i), k.row(j), dh));
        }
    }
    Ok(Matrix {
        rows: q.rows(),
        cols: k.rows(),
        data,
    })
}

/// Which exponential the softmax uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SoftmaxMode {
    #[default]
    Exact,
    Taylor,
}

impl std::str::FromStr for SoftmaxMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Self::Exact),
            "taylor" => Ok(Self::Taylor),
            other => Err(Error::InvalidArgument(format!("unknown softmax mode {other:?}"))),
        }
    }
}

fn softmax_with(row: &[f64], exp: impl Fn(f64) -> f64) -> Result<Vec<f64>> {
    if row.is_empty() {
        return Err(Error::Empty("softmax row"));
    }
    if let Some(i) = row.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&x| exp(x - max)).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

pub fn softmax_exact(row: &[f64]) -> Result<Vec<f64>> {
    softmax_with(row, f64::exp)
}

/// Softmax whose exponential is a range-reduced fifth-order Taylor polynomial.
pub fn softmax_taylor(row: &[f64]) -> Result<Vec<f64>> {
    softmax_with(row, exp_taylor)
}

pub fn softmax(row: &[f64], mode: SoftmaxMode) -> Result<Vec<f64>> {
    match mode {
        SoftmaxMode::Exact => softmax_exact(row),
        SoftmaxMode::Taylor => softmax_taylor(row),
    }
}

/// Largest reduced argument magnitude; `e^x = (e^{x/2^k})^{2^k}` with
/// `x / 2^k` in `[-TAYLOR_REDUCED_BOUND, 0]`.
pub const TAYLOR_REDUCED_BOUND: f64 = 0.5;

/// `e^x` for `x <= 0` via repeated halving, a degree-5 polynomial and `k`
/// squarings. Positive inputs are handled by the same identity but lose
/// accuracy quickly; softmax only ever passes max-subtracted arguments.
pub fn exp_taylor(x: f64) -> f64 {
    let mut y = x;
    let mut k = 0u32;
    while y.abs() > TAYLOR_REDUCED_BOUND {
        y *= 0.5;
        k += 1;
    }
    // Horner form of 1 + y + y^2/2 + y^3/6 + y^4/24 + y^5/120
    let mut r = 1.0 + y * (1.0 + y * (0.5 + y * (1.0 / 6.0 + y * (1.0 / 24.0 + y / 120.0))));
    for _ in 0..k {
        r *= r;
    }
    r
}

/// `probs . values` accumulated in row order.
pub(crate) fn weighted_sum<'a>(
    probs: &[f64],
    values: impl Iterator<Item = &'a [f64]>,
    width: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; width];
    for (p, v) in probs.iter().zip(values) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += p * x;
        }
    }
    out
}

/// Dense attention for one head with exact softmax.
pub fn attend_dense_head(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    attend_dense_head_with(q, k, v, SoftmaxMode::Exact)
}

pub(crate) fn attend_dense_head_with(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mode: SoftmaxMode,
) -> Result<Matrix> {
    if k.rows() != v.rows() {
        return Err(Error::Shape("K and V row counts differ".into()));
    }
    let scores = scaled_scores(q, k)?;
    let mut data = Vec::with_capacity(q.rows() * v.cols());
    for i in 0..q.rows() {
        let probs = softmax(scores.row(i), mode)?;
        data.extend(weighted_sum(&probs, (0..v.rows()).map(|j| v.row(j)), v.cols()));
    }
    Matrix::new(q.rows(), v.cols(), data)
}

/// Multi-head attention: per-head `softmax(Q_h K_h^T / sqrt(d_h)) V_h`, concatenated.
pub fn dense_mha(heads: &HeadSet) -> Result<Matrix> {
    let outs = heads
        .heads()
        .iter()
        .map(|h| attend_dense_head(&h.q, &h.k, &h.v))
        .collect::<Result<Vec<_>>>()?;
    Matrix::hconcat(&outs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matrix_rejects_bad_input() {
        assert!(matches!(Matrix::new(2, 2, vec![0.0; 3]), Err(Error::Shape(_))));
        assert_eq!(
            Matrix::new(1, 2, vec![0.0, f64::NAN]),
            Err(Error::NonFinite(1))
        );
    }

    #[test]
    fn split_heads_partitions_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random(&mut rng, 4, 8);
        let k = random(&mut rng, 4, 8);
        let v = random(&mut rng, 4, 8);
        let hs = split_heads(&q, &k, &v, 2).unwrap();
        assert_eq!(hs.len(), 2);
        assert_eq!(hs.head_dim(), 4);
        for (h, head) in hs.heads().iter().enumerate() {
            assert_eq!(head.q.shape(), (4, 4));
            for i in 0..4 {
                assert_eq!(head.k.row(i), &k.row(i)[h * 4..h * 4 + 4]);
            }
        }
        let one = split_heads(&q, &k, &v, 1).unwrap();
        assert_eq!(one.heads()[0].q, q);
        assert_eq!(one.heads()[0].v, v);

        assert!(matches!(split_heads(&q, &k, &v, 3), Err(Error::Shape(_))));
        assert!(split_heads(&q, &k, &v, 0).is_err());
        let short = random(&mut rng, 3, 8);
        assert!(split_heads(&q, &short, &v, 2).is_err());
    }

    #[test]
    fn scaled_scores_examples() {
        let ones = Matrix::new(2, 1, vec![1.0, 1.0]).unwrap();
        let s = scaled_scores(&ones, &ones).unwrap();
        assert_eq!(s.data(), &[1.0, 1.0, 1.0, 1.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = random(&mut rng, 8, 4);
        let z = Matrix::zeros(8, 4);
        assert!(scaled_scores(&q, &z).unwrap().data().iter().all(|&x| x == 0.0));

        let k = random(&mut rng, 8, 4);
        let s = scaled_scores(&q, &k).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let mut acc = 0.0;
                for t in 0..4 {
                    acc += q.get(i, t) * k.get(j, t);
                }
                assert!((s.get(i, j) - acc / 2.0).abs() < 1e-6);
            }
        }
        assert!(scaled_scores(&q, &random(&mut rng, 8, 3)).is_err());
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_exact(&[0.0; 4]).unwrap(), vec![0.25; 4]);
        assert_eq!(softmax_exact(&[-3.7]).unwrap(), vec![1.0]);
        let p = softmax_exact(&[1.0, 2.0, 3.0]).unwrap();
        let denom: f64 = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).sum();
        for (i, x) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            assert!((p[i] - x.exp() / denom).abs() < 1e-9);
        }
        assert_eq!(softmax_exact(&[]), Err(Error::Empty("softmax row")));
        assert_eq!(softmax_taylor(&[]), Err(Error::Empty("softmax row")));
    }

    #[test]
    fn taylor_softmax_examples() {
        assert_eq!(softmax_taylor(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        for p in softmax_taylor(&[5.0, 5.0, 5.0]).unwrap() {
            assert!((p - 1.0 / 3.0).abs() < 1e-6);
        }
        let row = [0.0, -1.0, -2.0];
        let a = softmax_taylor(&row).unwrap();
        let e = softmax_exact(&row).unwrap();
        for (x, y) in a.iter().zip(&e) {
            assert!((x - y).abs() < 1e-3);
        }
    }

    #[test]
    fn exp_taylor_relative_error_is_small_on_softmax_domain() {
        let mut worst: f64 = 0.0;
        for i in 0..=20_000 {
            let x = -20.0 * f64::from(i) / 20_000.0;
            worst = worst.max((exp_taylor(x) / x.exp() - 1.0).abs());
        }
        // any two entries differ by at most `worst` in relative terms, and a
        // probability moves by at most a quarter of that spread
        assert!(worst / 4.0 < 1e-3, "worst relative error {worst}");
        assert_eq!(exp_taylor(0.0), 1.0);
    }

    #[test]
    fn dense_mha_single_token_returns_v() {
        let q = Matrix::new(1, 4, vec![0.3, -1.0, 2.0, 0.1]).unwrap();
        let k = Matrix::new(1, 4, vec![1.0, 1.0, -1.0, 0.5]).unwrap();
        let v = Matrix::new(1, 4, vec![9.0, -8.0, 7.0, 6.5]).unwrap();
        let hs = split_heads(&q, &k, &v, 2).unwrap();
        assert_eq!(dense_mha(&hs).unwrap(), v);
    }

    #[test]
    fn dense_mha_uniform_scores_average_values() {
        let q = Matrix::zeros(3, 3);
        let k = Matrix::from_fn(3, 3, |i, j| (i + j) as f64);
        let v = Matrix::from_fn(3, 3, |i, j| if i == j { 1.0 } else { 0.0 });
        let hs = split_heads(&q, &k, &v, 1).unwrap();
        let out = dense_mha(&hs).unwrap();
        for x in out.data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_mha_matches_straight_line_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, d, h) = (8, 8, 2);
        let q = random(&mut rng, n, d);
        let k = random(&mut rng, n, d);
        let v = random(&mut rng, n, d);
        let out = dense_mha(&split_heads(&q, &k, &v, h).unwrap()).unwrap();
        let dh = d / h;
        for head in 0..h {
            let off = head * dh;
            for i in 0..n {
                let mut w = [0.0f64; 8];
                for (j, wj) in w.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for t in 0..dh {
                        s += q.get(i, off + t) * k.get(j, off + t);
                    }
                    *wj = (s / (dh as f64).sqrt()).exp();
                }
                let z: f64 = w.iter().sum();
                for c in 0..dh {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += w[j] / z * v.get(j, off + c);
                    }
                    assert!((out.get(i, off + c) - acc).abs() < 1e-6);
                }
            }
        }
    }
}
