//! Dense linear algebra and sampling primitives sized for small dimension
//! (d up to a few dozen) and moderate row counts.
//!
//! Everything here is deterministic given its inputs; all randomness flows
//! through [`RngStream`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Dense row-major matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row slices; all rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |v| v.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::DimensionError("ragged rows".into()));
            }
            data.extend_from_slice(row);
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::ValueError { line: 0, message: "non-finite matrix entry".into() });
        }
        Ok(Matrix { rows: r, cols: c, data })
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionError(format!(
                "expected {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// X^T X, accumulated in row order.
    pub fn gram(&self) -> Matrix {
        let p = self.cols;
        let mut g = Matrix::zeros(p, p);
        for i in 0..self.rows {
            let r = self.row(i);
            for a in 0..p {
                let ra = r[a];
                if ra == 0.0 {
                    continue;
                }
                let grow = &mut g.data[a * p..(a + 1) * p];
                for b in a..p {
                    grow[b] += ra * r[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                g.data[a * p + b] = g.data[b * p + a];
            }
        }
        g
    }

    /// X v.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// X^T v.
    pub fn tr_matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let r = self.row(i);
            let vi = v[i];
            for j in 0..self.cols {
                out[j] += r[j] * vi;
            }
        }
        out
    }

    /// Column means.
    pub fn col_means(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (o, x) in out.iter_mut().zip(self.row(i)) {
                *o += x;
            }
        }
        let n = self.rows as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * s).collect() }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Deterministic, splittable random stream. Identical (seed, stream) pairs
/// reproduce identical draws; distinct stream ids are independent ChaCha
/// streams, so replications can run in parallel without coordination.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha12Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngStream { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Fresh stream with the same seed and a different stream id.
    pub fn substream(&self, stream: u64) -> Self {
        RngStream::new(self.seed, stream)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.rng.random::<f64>() < p
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }
}

/// Least-squares solve of `design * theta ~ response` by Householder QR.
///
/// Fails with `RankDeficient` when the smallest |R_ii| relative to the
/// largest falls below `rank_tolerance`, which is how Condition 1/2
/// violations surface numerically.
pub fn solve_least_squares(design: &Matrix, response: &[f64], rank_tolerance: f64) -> Result<Vec<f64>> {
    let m = design.rows();
    let p = design.cols();
    if response.len() != m {
        return Err(Error::DimensionError(format!(
            "design has {m} rows but response has {}",
            response.len()
        )));
    }
    if m < p {
        return Err(Error::RankDeficient(format!("{m} rows < {p} columns")));
    }
    // column-major working copy
    let mut a = vec![0.0; m * p];
    for i in 0..m {
        let r = design.row(i);
        for j in 0..p {
            a[j * m + i] = r[j];
        }
    }
    let mut y = response.to_vec();

    for k in 0..p {
        // Householder vector for column k, rows k..m
        let (head, tail) = a.split_at_mut((k + 1) * m);
        let col = &mut head[k * m..];
        let alpha = {
            let norm = norm2(&col[k..]);
            if col[k] >= 0.0 {
                -norm
            } else {
                norm
            }
        };
        if alpha == 0.0 {
            continue; // column already zero below the diagonal; R_kk = 0
        }
        col[k] -= alpha;
        let vnorm2 = dot(&col[k..], &col[k..]);
        if vnorm2 > 0.0 {
            // apply H = I - 2 v v^T / (v^T v) to remaining columns and rhs
            for j in (k + 1)..p {
                let cj = &mut tail[(j - k - 1) * m..(j - k) * m];
                let s = 2.0 * dot(&col[k..], &cj[k..]) / vnorm2;
                for i in k..m {
                    cj[i] -= s * col[i];
                }
            }
            let s = 2.0 * dot(&col[k..], &y[k..]) / vnorm2;
            for i in k..m {
                y[i] -= s * col[i];
            }
        }
        // store R_kk in place of the annihilated column head
        col[k] = alpha;
    }

    let mut rmax = 0.0_f64;
    let mut rmin = f64::INFINITY;
    for k in 0..p {
        let r = a[k * m + k].abs();
        rmax = rmax.max(r);
        rmin = rmin.min(r);
    }
    if rmax == 0.0 || rmin < rank_tolerance * rmax {
        return Err(Error::RankDeficient(format!(
            "pivot ratio {:.3e} below tolerance {rank_tolerance:.3e}",
            if rmax == 0.0 { 0.0 } else { rmin / rmax }
        )));
    }

    // back substitution on the upper triangle stored column-major
    let mut theta = vec![0.0; p];
    for k in (0..p).rev() {
        let mut s = y[k];
        for j in (k + 1)..p {
            s -= a[j * m + k] * theta[j];
        }
        theta[k] = s / a[k * m + k];
    }
    Ok(theta)
}

/// Rank probe: true when the design's R diagonal passes the tolerance test.
pub fn is_full_rank(design: &Matrix, rank_tolerance: f64) -> bool {
    if design.rows() < design.cols() {
        return false;
    }
    let dummy = vec![0.0; design.rows()];
    solve_least_squares(design, &dummy, rank_tolerance).is_ok()
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration from a
/// deterministic ramped start vector (ones plus a small index ramp; a plain
/// all-ones start is numerically orthogonal to the dominant eigenvector for
/// sign-symmetric mean patterns and can stall on the second eigenvalue).
pub fn max_eigenvalue(gram: &Matrix, rel_tol: f64, max_iter: usize) -> Result<f64> {
    let n = gram.rows();
    if gram.cols() != n {
        return Err(Error::DimensionError("eigenvalue of a non-square matrix".into()));
    }
    if n == 0 {
        return Err(Error::DimensionError("empty matrix".into()));
    }
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.5 * (i + 1) as f64 / n as f64).collect();
    let nrm = norm2(&v);
    v.iter_mut().for_each(|x| *x /= nrm);
    let mut lambda_prev = f64::NAN;
    for _ in 0..max_iter {
        let w = gram.matvec(&v);
        let lambda = dot(&w, &v); // Rayleigh quotient, ||v|| = 1
        let wnorm = norm2(&w);
        if wnorm == 0.0 {
            return Ok(0.0); // zero matrix
        }
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / wnorm;
        }
        if !lambda_prev.is_nan() && (lambda - lambda_prev).abs() <= rel_tol * lambda.abs().max(f64::MIN_POSITIVE) {
            return Ok(lambda);
        }
        lambda_prev = lambda;
    }
    Err(Error::NoConvergence(format!("power iteration: {max_iter} iterations")))
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::DimensionError("cholesky of a non-square matrix".into()));
    }
    let mut max_diag = 0.0_f64;
    for i in 0..n {
        max_diag = max_diag.max(a.get(i, i).abs());
    }
    let floor = 1e-12 * max_diag.max(f64::MIN_POSITIVE);
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if !(s > floor) {
                    return Err(Error::NotPositiveDefinite(format!(
                        "pivot {s:.3e} at index {i}"
                    )));
                }
                l.set(i, j, s.sqrt());
            } else {
                l.set(i, j, s / l.get(j, j));
            }
        }
    }
    Ok(l)
}

/// Solves `a x = b` for symmetric positive-definite `a` via Cholesky.
pub fn solve_spd(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let l = cholesky(a).map_err(|_| Error::RankDeficient("aggregate Gram is singular".into()))?;
    let n = a.rows();
    if b.len() != n {
        return Err(Error::DimensionError("rhs length mismatch".into()));
    }
    let mut z = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            z[i] -= l.get(i, k) * z[k];
        }
        z[i] /= l.get(i, i);
    }
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            z[i] -= l.get(k, i) * z[k];
        }
        z[i] /= l.get(i, i);
    }
    Ok(z)
}

/// Draws `n` rows from N(mean, covariance) via the Cholesky factor.
pub fn sample_mvn(mean: &[f64], covariance: &Matrix, n: usize, rng: &mut RngStream) -> Result<Matrix> {
    let d = mean.len();
    if covariance.rows() != d || covariance.cols() != d {
        return Err(Error::DimensionError("covariance shape does not match mean".into()));
    }
    let l = cholesky(covariance)?;
    let mut out = Matrix::zeros(n, d);
    let mut z = vec![0.0; d];
    for i in 0..n {
        for zj in z.iter_mut() {
            *zj = rng.standard_normal();
        }
        for j in 0..d {
            let mut s = mean[j];
            for k in 0..=j {
                s += l.get(j, k) * z[k];
            }
            out.set(i, j, s);
        }
    }
    Ok(out)
}
