//! Dense row-major matrices and the few decompositions the rest of the
//! crate needs: Cholesky, SPD solves and thin QR.

use crate::error::{Error, Result};

/// Row-major 2-D array of `f64`. The universal numeric carrier.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Symmetry tolerance used by [`DenseMatrix::cholesky`].
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Relative diagonal jitter added once by [`solve_spd`] before giving up.
pub const SPD_JITTER: f64 = 1e-8;

impl DenseMatrix {
    /// Builds a matrix from row-major data, rejecting NaN and infinite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "data length {} does not equal {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput { index });
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    /// Builds a matrix from row-major data without the finiteness check.
    /// Intended for values produced by this crate's own numerics.
    pub fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must equal rows*cols");
        DenseMatrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Elementwise map into a new matrix.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self += scale * other`, shapes must match.
    pub fn add_scaled(&mut self, other: &DenseMatrix, scale: f64) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Matrix product `self * rhs`. Panics on inner-dimension mismatch;
    /// shape errors here are programmer errors, not data errors.
    pub fn matmul(&self, rhs: &DenseMatrix) -> DenseMatrix {
        assert_eq!(
            self.cols, rhs.rows,
            "matmul inner dims: {}x{} * {}x{}",
            self.rows, self.cols, rhs.rows, rhs.cols
        );
        let mut out = DenseMatrix::zeros(self.rows, rhs.cols);
        matmul_into(self, rhs, &mut out);
        out
    }

    /// Appends a constant-1 column; used to absorb biases into weight vectors.
    pub fn append_ones_column(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows, self.cols + 1);
        for r in 0..self.rows {
            out.row_mut(r)[..self.cols].copy_from_slice(self.row(r));
            out.set(r, self.cols, 1.0);
        }
        out
    }

    /// Lower-triangular Cholesky factor `L` with `L * L^T = self`.
    ///
    /// The input must be square and symmetric within [`SYMMETRY_TOL`]
    /// (scaled by the largest absolute entry). A non-positive pivot means
    /// the matrix is not positive definite.
    pub fn cholesky(&self) -> Result<DenseMatrix> {
        let n = self.rows;
        if self.cols != n {
            return Err(Error::ShapeMismatch(format!(
                "cholesky needs a square matrix, got {}x{}",
                self.rows, self.cols
            )));
        }
        let scale = self.data.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for i in 0..n {
            for j in (i + 1)..n {
                if (self.get(i, j) - self.get(j, i)).abs() > SYMMETRY_TOL * scale {
                    return Err(Error::NotSymmetric);
                }
            }
        }
        let mut l = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut s = self.get(i, j);
                for k in 0..j {
                    s -= l.get(i, k) * l.get(j, k);
                }
                if i == j {
                    if s <= 0.0 || !s.is_finite() {
                        return Err(Error::NotPositiveDefinite);
                    }
                    l.set(i, j, s.sqrt());
                } else {
                    l.set(i, j, s / l.get(j, j));
                }
            }
        }
        Ok(l)
    }
}

/// `out = a * b` where `out` is pre-zeroed with the right shape.
fn matmul_into(a: &DenseMatrix, b: &DenseMatrix, out: &mut DenseMatrix) {
    let inner = a.cols;
    let n = b.cols;
    let work = a.rows * inner * n;
    // Each output row is an independent accumulation, so splitting by rows
    // keeps results bit-identical to the sequential path.
    if work >= 1 << 18 {
        crate::par::for_each_row_chunk(&mut out.data, n, |chunk_start, chunk| {
            for (local_i, crow) in chunk.chunks_mut(n).enumerate() {
                let i = chunk_start + local_i;
                row_kernel(a.row(i), b, crow);
            }
        });
    } else {
        for i in 0..a.rows {
            let (arow, crow) = (a.row(i), &mut out.data[i * n..(i + 1) * n]);
            row_kernel(arow, b, crow);
        }
    }
}

#[inline]
fn row_kernel(arow: &[f64], b: &DenseMatrix, crow: &mut [f64]) {
    let n = b.cols;
    for (k, &aik) in arow.iter().enumerate() {
        if aik == 0.0 {
            continue;
        }
        let brow = &b.data[k * n..(k + 1) * n];
        for j in 0..n {
            crow[j] += aik * brow[j];
        }
    }
}

/// Solves `a * x = b` for SPD `a` via Cholesky plus two triangular solves.
///
/// If the factorization hits a non-positive pivot, a single retry adds
/// `SPD_JITTER * mean(diag(a))` to the diagonal; mini-batch Gram matrices
/// with fewer rows than columns are singular by construction and need it.
pub fn solve_spd(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.rows() != b.rows() {
        return Err(Error::ShapeMismatch(format!(
            "solve_spd: a is {}x{} but b has {} rows",
            a.rows(),
            a.cols(),
            b.rows()
        )));
    }
    let l = match a.cholesky() {
        Ok(l) => l,
        Err(Error::NotPositiveDefinite) => {
            let n = a.rows();
            let mean_diag = (0..n).map(|i| a.get(i, i)).sum::<f64>() / n as f64;
            let mut jittered = a.clone();
            for i in 0..n {
                let v = jittered.get(i, i) + SPD_JITTER * mean_diag;
                jittered.set(i, i, v);
            }
            jittered.cholesky()?
        }
        Err(e) => return Err(e),
    };
    Ok(solve_with_cholesky(&l, b))
}

/// Solves `L L^T x = b` given the lower factor.
pub fn solve_with_cholesky(l: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    let n = l.rows();
    let m = b.cols();
    let mut x = b.clone();
    // forward: L y = b
    for i in 0..n {
        let lii = l.get(i, i);
        for c in 0..m {
            let mut s = x.get(i, c);
            for k in 0..i {
                s -= l.get(i, k) * x.get(k, c);
            }
            x.set(i, c, s / lii);
        }
    }
    // backward: L^T x = y
    for i in (0..n).rev() {
        let lii = l.get(i, i);
        for c in 0..m {
            let mut s = x.get(i, c);
            for k in (i + 1)..n {
                s -= l.get(k, i) * x.get(k, c);
            }
            x.set(i, c, s / lii);
        }
    }
    x
}

/// Inverse of an SPD matrix, via [`solve_spd`] against the identity.
pub fn inverse_spd(a: &DenseMatrix) -> Result<DenseMatrix> {
    let inv = solve_spd(a, &DenseMatrix::identity(a.rows()))?;
    // symmetrize to keep downstream symmetry checks honest
    let mut out = inv.clone();
    for i in 0..out.rows() {
        for j in 0..out.cols() {
            let v = 0.5 * (inv.get(i, j) + inv.get(j, i));
            out.set(i, j, v);
        }
    }
    Ok(out)
}

/// Thin QR of a tall matrix (`rows >= cols`) by Householder reflections.
///
/// Returns `(q, r_diag_signs)` where `q` has orthonormal columns and
/// `r_diag_signs[j]` is the sign of the j-th diagonal of `R` (zero maps
/// to +1). Multiplying column `j` of `q` by `r_diag_signs[j]` canonicalizes
/// the factorization so the result is Haar-distributed for Gaussian input.
pub fn qr_thin(a: &DenseMatrix) -> (DenseMatrix, Vec<f64>) {
    let m = a.rows();
    let k = a.cols();
    assert!(m >= k, "qr_thin expects rows >= cols, got {m}x{k}");
    let mut r = a.clone();
    // Householder vectors, one per column, stored dense.
    let mut vs: Vec<Vec<f64>> = Vec::with_capacity(k);
    for j in 0..k {
        let mut v = vec![0.0; m];
        let mut norm = 0.0;
        for i in j..m {
            let x = r.get(i, j);
            v[i] = x;
            norm += x * x;
        }
        norm = norm.sqrt();
        let alpha = if v[j] >= 0.0 { -norm } else { norm };
        v[j] -= alpha;
        let vnorm2: f64 = v[j..].iter().map(|x| x * x).sum();
        if vnorm2 > 0.0 {
            for c in j..k {
                let mut dot = 0.0;
                for i in j..m {
                    dot += v[i] * r.get(i, c);
                }
                let coef = 2.0 * dot / vnorm2;
                for i in j..m {
                    let val = r.get(i, c) - coef * v[i];
                    r.set(i, c, val);
                }
            }
        }
        vs.push(v);
    }
    let signs: Vec<f64> = (0..k)
        .map(|j| if r.get(j, j) < 0.0 { -1.0 } else { 1.0 })
        .collect();
    // q = H_0 ... H_{k-1} applied to the first k identity columns
    let mut q = DenseMatrix::zeros(m, k);
    for j in 0..k {
        q.set(j, j, 1.0);
    }
    for j in (0..k).rev() {
        let v = &vs[j];
        let vnorm2: f64 = v[j..].iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        for c in 0..k {
            let mut dot = 0.0;
            for i in j..m {
                dot += v[i] * q.get(i, c);
            }
            let coef = 2.0 * dot / vnorm2;
            for i in j..m {
                let val = q.get(i, c) - coef * v[i];
                q.set(i, c, val);
            }
        }
    }
    (q, signs)
}
