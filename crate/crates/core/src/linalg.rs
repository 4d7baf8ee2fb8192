//! Dense linear-algebra kernels: f32 matrices with f64 accumulation, row softmax,
//! row norms, and a cyclic-Jacobi symmetric eigensolver.
//!
//! Conventions are fixed so every downstream module is bit-reproducible:
//! row-major storage, deterministic sweep order in the eigensolver, descending
//! eigenvalues, and a sign rule that makes eigenvectors unique.

use crate::error::{Error, Result};

/// Maximum number of Jacobi sweeps before the eigensolver reports failure.
const JACOBI_MAX_SWEEPS: usize = 100;
/// Off-diagonal Frobenius target, relative to the input's Frobenius norm.
const JACOBI_TOL: f64 = 1e-10;
/// Allowed relative asymmetry of an eigensolver input.
const SYMMETRY_TOL: f64 = 1e-6;

/// Row-major f32 matrix. Cache data (keys, values, queries) lives in this type.
///
/// Construction rejects non-finite entries; kernels accumulate in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::contract(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::contract("matrix entries must be finite"));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds without the finiteness scan. Callers guarantee finite entries.
    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::contract("ragged rows"));
        }
        Matrix::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copy of the given rows, in the given order.
    pub fn gather_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix::from_vec_unchecked(indices.len(), self.cols, data)
    }

    /// Rows `lo..hi` as a new matrix.
    pub fn row_block(&self, lo: usize, hi: usize) -> Matrix {
        Matrix::from_vec_unchecked(hi - lo, self.cols, self.data[lo * self.cols..hi * self.cols].to_vec())
    }

    /// Horizontal concatenation; all inputs must share the row count.
    pub fn hconcat(parts: &[&Matrix]) -> Result<Matrix> {
        let rows = parts.first().map_or(0, |m| m.rows);
        if parts.iter().any(|m| m.rows != rows) {
            return Err(Error::contract("hconcat: row count mismatch"));
        }
        let cols = parts.iter().map(|m| m.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for m in parts {
                data.extend_from_slice(m.row(r));
            }
        }
        Ok(Matrix::from_vec_unchecked(rows, cols, data))
    }

    /// `self * rhs` with f64 accumulation.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::contract(format!(
                "matmul: {}x{} * {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let (m, k, n) = (self.rows, self.cols, rhs.cols);
        let mut out = vec![0.0f64; m * n];
        for i in 0..m {
            let arow = self.row(i);
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &a) in arow.iter().enumerate() {
                let a = a as f64;
                let brow = rhs.row(p);
                for j in 0..n {
                    orow[j] += a * brow[j] as f64;
                }
            }
        }
        let _ = k;
        Ok(Matrix::from_vec_unchecked(
            m,
            n,
            out.into_iter().map(|x| x as f32).collect(),
        ))
    }

    /// `self * rhs^T` with f64 accumulation. Both operands share the column count.
    pub fn matmul_nt(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.cols {
            return Err(Error::contract(format!(
                "matmul_nt: {}x{} * ({}x{})^T",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let (m, n) = (self.rows, rhs.rows);
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let a = self.row(i);
            for j in 0..n {
                let b = rhs.row(j);
                let mut acc = 0.0f64;
                for p in 0..a.len() {
                    acc += a[p] as f64 * b[p] as f64;
                }
                data.push(acc as f32);
            }
        }
        Ok(Matrix::from_vec_unchecked(m, n, data))
    }

    /// `self * p` where `p` is f64; accumulates in f64 and stores f32.
    pub fn mul_f64(&self, p: &MatrixF64) -> Result<Matrix> {
        if self.cols != p.rows {
            return Err(Error::contract(format!(
                "mul_f64: {}x{} * {}x{}",
                self.rows, self.cols, p.rows, p.cols
            )));
        }
        let (m, n) = (self.rows, p.cols);
        let mut out = vec![0.0f64; m * n];
        for i in 0..m {
            let arow = self.row(i);
            let orow = &mut out[i * n..(i + 1) * n];
            for (k, &a) in arow.iter().enumerate() {
                let a = a as f64;
                let prow = p.row(k);
                for j in 0..n {
                    orow[j] += a * prow[j];
                }
            }
        }
        Ok(Matrix::from_vec_unchecked(
            m,
            n,
            out.into_iter().map(|x| x as f32).collect(),
        ))
    }

    /// `self * p^T` where `p` is f64; used to map projected rows back up.
    pub fn mul_f64_nt(&self, p: &MatrixF64) -> Result<Matrix> {
        if self.cols != p.cols {
            return Err(Error::contract(format!(
                "mul_f64_nt: {}x{} * ({}x{})^T",
                self.rows, self.cols, p.rows, p.cols
            )));
        }
        let (m, n) = (self.rows, p.rows);
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let a = self.row(i);
            for j in 0..n {
                let b = p.row(j);
                let mut acc = 0.0f64;
                for k in 0..a.len() {
                    acc += a[k] as f64 * b[k];
                }
                data.push(acc as f32);
            }
        }
        Ok(Matrix::from_vec_unchecked(m, n, data))
    }

    /// `self^T * self` accumulated in f64.
    pub fn gram(&self) -> MatrixF64 {
        let d = self.cols;
        let mut s = vec![0.0f64; d * d];
        for i in 0..self.rows {
            let row = self.row(i);
            for a in 0..d {
                let xa = row[a] as f64;
                for b in a..d {
                    s[a * d + b] += xa * row[b] as f64;
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                s[a * d + b] = s[b * d + a];
            }
        }
        MatrixF64 {
            rows: d,
            cols: d,
            data: s,
        }
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(Error::contract("sub: shape mismatch"));
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix::from_vec_unchecked(self.rows, self.cols, data))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, rhs: &Matrix) -> Result<f64> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(Error::contract("max_abs_diff: shape mismatch"));
        }
        Ok(self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .fold(0.0, f64::max))
    }

    pub fn to_f64(&self) -> MatrixF64 {
        MatrixF64 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| x as f64).collect(),
        }
    }
}

/// Row-major f64 matrix for eigenvectors and projection bases, where f32
/// storage cannot hold the orthonormality tolerances the rest of the engine
/// relies on.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixF64 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl MatrixF64 {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::contract(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::contract("matrix entries must be finite"));
        }
        Ok(MatrixF64 { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        MatrixF64 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = MatrixF64::zeros(n, n);
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

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copy of the leading `r` columns.
    pub fn leading_cols(&self, r: usize) -> MatrixF64 {
        debug_assert!(r <= self.cols);
        let mut data = Vec::with_capacity(self.rows * r);
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[..r]);
        }
        MatrixF64 {
            rows: self.rows,
            cols: r,
            data,
        }
    }

    pub fn matmul(&self, rhs: &MatrixF64) -> Result<MatrixF64> {
        if self.cols != rhs.rows {
            return Err(Error::contract(format!(
                "matmul: {}x{} * {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let (m, n) = (self.rows, rhs.cols);
        let mut out = vec![0.0f64; m * n];
        for i in 0..m {
            let arow = self.row(i);
            let orow = &mut out[i * n..(i + 1) * n];
            for (k, &a) in arow.iter().enumerate() {
                let brow = rhs.row(k);
                for j in 0..n {
                    orow[j] += a * brow[j];
                }
            }
        }
        Ok(MatrixF64 {
            rows: m,
            cols: n,
            data: out,
        })
    }

    pub fn transpose(&self) -> MatrixF64 {
        let mut out = MatrixF64::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.get(i, j);
            }
        }
        out
    }

    pub fn scaled(&self, s: f64) -> MatrixF64 {
        MatrixF64 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// max |self^T self - I|, the orthonormality defect of the columns.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for a in 0..self.cols {
            for b in a..self.cols {
                let mut acc = 0.0f64;
                for i in 0..self.rows {
                    acc += self.get(i, a) * self.get(i, b);
                }
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((acc - target).abs());
            }
        }
        worst
    }

    /// Narrows to f32 storage (the on-disk representation of bases).
    pub fn to_f32(&self) -> Matrix {
        Matrix::from_vec_unchecked(
            self.rows,
            self.cols,
            self.data.iter().map(|&x| x as f32).collect(),
        )
    }
}

/// Eigendecomposition of a symmetric matrix.
///
/// Eigenvalues are sorted descending; `eigenvectors` columns align with them
/// and carry a fixed sign: the entry of largest magnitude in each column is
/// non-negative (ties broken by lowest index).
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: MatrixF64,
}

/// Eigendecomposition of a symmetric f32 matrix. See [`sym_eig_f64`].
pub fn sym_eig(s: &Matrix) -> Result<EigenDecomposition> {
    sym_eig_f64(&s.to_f64())
}

/// Cyclic-Jacobi eigendecomposition of a symmetric matrix.
///
/// Head dimensions are small (D <= a few hundred), so O(D^3) per sweep is
/// acceptable. Sweeps are capped at 100 with an off-diagonal Frobenius target
/// of 1e-10 x ||S||_F; exceeding the cap is a numerical error with the
/// residual reported.
pub fn sym_eig_f64(s: &MatrixF64) -> Result<EigenDecomposition> {
    let n = s.rows;
    if n != s.cols {
        return Err(Error::contract(format!(
            "sym_eig: input must be square, got {}x{}",
            s.rows, s.cols
        )));
    }
    let scale = s.data.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut asym = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            asym = asym.max((s.get(i, j) - s.get(j, i)).abs());
        }
    }
    if asym > SYMMETRY_TOL * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::contract(format!(
            "sym_eig: input asymmetry {asym:.3e} exceeds tolerance"
        )));
    }
    if n == 0 {
        return Ok(EigenDecomposition {
            eigenvalues: Vec::new(),
            eigenvectors: MatrixF64::zeros(0, 0),
        });
    }

    let mut a = s.data.clone();
    let mut v = MatrixF64::identity(n);
    let thresh = JACOBI_TOL * s.frobenius_norm();
    let mut converged = false;
    let mut residual = 0.0f64;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        residual = (2.0 * off).sqrt();
        if residual <= thresh {
            converged = true;
            break;
        }
        for p in 0..(n - 1) {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = t * c;
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                a[p * n + p] = app - t * apq;
                a[q * n + q] = aqq + t * apq;
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    let np = c * akp - sn * akq;
                    let nq = sn * akp + c * akq;
                    a[k * n + p] = np;
                    a[p * n + k] = np;
                    a[k * n + q] = nq;
                    a[q * n + k] = nq;
                }
                for k in 0..n {
                    let vkp = v.data[k * n + p];
                    let vkq = v.data[k * n + q];
                    v.data[k * n + p] = c * vkp - sn * vkq;
                    v.data[k * n + q] = sn * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "sym_eig: no convergence after {JACOBI_MAX_SWEEPS} sweeps, off-diagonal residual {residual:.3e}"
        )));
    }

    // Sort descending; ties keep the lower original index.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a[j * n + j]
            .partial_cmp(&a[i * n + i])
            .expect("eigenvalues are finite")
            .then(i.cmp(&j))
    });
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = MatrixF64::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        // Sign rule: largest-magnitude entry non-negative, lowest index on ties.
        let mut pivot = 0;
        let mut best = -1.0f64;
        for k in 0..n {
            let mag = v.data[k * n + src].abs();
            if mag > best {
                best = mag;
                pivot = k;
            }
        }
        let flip = if v.data[pivot * n + src] < 0.0 { -1.0 } else { 1.0 };
        for k in 0..n {
            vectors.data[k * n + col] = flip * v.data[k * n + src];
        }
    }
    Ok(EigenDecomposition {
        eigenvalues,
        eigenvectors: vectors,
    })
}

/// Row softmax with per-row max subtraction, accumulated in f64.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut data = Vec::with_capacity(m.rows * m.cols);
    for i in 0..m.rows {
        let row = m.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x as f64));
        let exps: Vec<f64> = row.iter().map(|&x| (x as f64 - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        data.extend(exps.iter().map(|&e| (e / sum) as f32));
    }
    Matrix::from_vec_unchecked(m.rows, m.cols, data)
}

/// Euclidean norm of each row, accumulated in f64.
pub fn row_norms(m: &Matrix) -> Vec<f64> {
    (0..m.rows)
        .map(|i| {
            m.row(i)
                .iter()
                .map(|&x| (x as f64) * (x as f64))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}


#[cfg(test)]
mod tests {
    use super::testutil::{rand_matrix, rand_symmetric};
    use super::*;

    #[test]
    fn eig_identity() {
        let eye = Matrix::from_fn(3, 3, |i, j| if i == j { 1.0 } else { 0.0 });
        let e = sym_eig(&eye).unwrap();
        assert_eq!(e.eigenvalues, vec![1.0, 1.0, 1.0]);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_eq!(e.eigenvectors.get(i, j), want);
            }
        }
    }

    #[test]
    fn eig_diagonal() {
        let d = Matrix::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let e = sym_eig(&d).unwrap();
        assert_eq!(e.eigenvalues, vec![3.0, 1.0]);
        assert_eq!(e.eigenvectors.get(0, 0), 1.0);
        assert_eq!(e.eigenvectors.get(1, 1), 1.0);
        assert_eq!(e.eigenvectors.get(1, 0), 0.0);
    }

    #[test]
    fn eig_reconstructs_input() {
        let s = rand_symmetric(8, 42);
        let e = sym_eig(&s).unwrap();
        // V diag(l) V^T
        let n = 8;
        let mut recon = MatrixF64::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += e.eigenvectors.get(i, k) * e.eigenvalues[k] * e.eigenvectors.get(j, k);
                }
                recon.data[i * n + j] = acc;
            }
        }
        let diff = recon
            .data
            .iter()
            .zip(s.to_f64().data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(diff <= 1e-6 * s.frobenius_norm().max(1.0), "residual {diff}");
        assert!(e.eigenvectors.orthonormality_error() < 1e-12);
    }

    #[test]
    fn eig_eigenvalue_sum_matches_trace() {
        for seed in 0..5 {
            let s = rand_symmetric(6, seed);
            let e = sym_eig(&s).unwrap();
            let trace: f64 = (0..6).map(|i| s.get(i, i) as f64).sum();
            let sum: f64 = e.eigenvalues.iter().sum();
            assert!((trace - sum).abs() <= 1e-6 * trace.abs().max(1.0));
        }
    }

    #[test]
    fn eig_deterministic() {
        let s = rand_symmetric(7, 9);
        let a = sym_eig(&s).unwrap();
        let b = sym_eig(&s).unwrap();
        assert_eq!(a.eigenvalues, b.eigenvalues);
        assert_eq!(a.eigenvectors.data(), b.eigenvectors.data());
    }

    #[test]
    fn eig_rejects_asymmetric() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(sym_eig(&m), Err(Error::Contract(_))));
        let m = Matrix::zeros(2, 3);
        assert!(matches!(sym_eig(&m), Err(Error::Contract(_))));
    }

    #[test]
    fn eig_sign_rule() {
        for seed in 0..10 {
            let s = rand_symmetric(5, 100 + seed);
            let e = sym_eig(&s).unwrap();
            for col in 0..5 {
                let mut pivot = 0;
                let mut best = -1.0f64;
                for k in 0..5 {
                    let mag = e.eigenvectors.get(k, col).abs();
                    if mag > best {
                        best = mag;
                        pivot = k;
                    }
                }
                assert!(e.eigenvectors.get(pivot, col) >= 0.0);
            }
        }
    }

    #[test]
    fn softmax_uniform_logits() {
        let m = Matrix::zeros(1, 3);
        let p = softmax_rows(&m);
        for j in 0..3 {
            assert!((p.get(0, j) - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_large_logits_stable() {
        let m = Matrix::from_rows(&[vec![1000.0, 0.0]]).unwrap();
        let p = softmax_rows(&m);
        assert!((p.get(0, 0) - 1.0).abs() < 1e-7);
        assert!(p.get(0, 1) >= 0.0 && p.get(0, 1) < 1e-30);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_match_reference() {
        let m = rand_matrix(4, 6, 3);
        let p = softmax_rows(&m);
        for i in 0..4 {
            let sum: f64 = (0..6).map(|j| p.get(i, j) as f64).sum();
            assert!((sum - 1.0).abs() < 1e-6);
            // 64-bit reference without max subtraction
            let exps: Vec<f64> = m.row(i).iter().map(|&x| (x as f64).exp()).collect();
            let total: f64 = exps.iter().sum();
            for j in 0..6 {
                assert!((p.get(i, j) as f64 - exps[j] / total).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn softmax_shift_invariant() {
        let m = rand_matrix(3, 5, 11);
        let shifted = Matrix::from_fn(3, 5, |i, j| m.get(i, j) + 7.5);
        let a = softmax_rows(&m);
        let b = softmax_rows(&shifted);
        assert!(a.max_abs_diff(&b).unwrap() < 1e-6);
    }

    #[test]
    fn row_norms_basics() {
        let m = Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        assert_eq!(row_norms(&m), vec![5.0]);
        let z = Matrix::zeros(2, 4);
        assert_eq!(row_norms(&z), vec![0.0, 0.0]);
    }

    #[test]
    fn row_norms_match_reference() {
        let m = rand_matrix(5, 7, 21);
        let norms = row_norms(&m);
        for i in 0..5 {
            let want = m
                .row(i)
                .iter()
                .map(|&x| (x as f64) * (x as f64))
                .sum::<f64>()
                .sqrt();
            assert!((norms[i] - want).abs() <= 1e-6 * want.max(1e-30));
        }
    }

    #[test]
    fn matrix_rejects_bad_input() {
        assert!(Matrix::new(2, 2, vec![0.0; 3]).is_err());
        assert!(Matrix::new(1, 2, vec![f32::NAN, 0.0]).is_err());
        assert!(Matrix::new(1, 2, vec![f32::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn matmul_agrees_with_manual() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
        let d = a.matmul_nt(&b).unwrap();
        assert_eq!(d.data(), &[17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn gram_is_xtx() {
        let x = rand_matrix(10, 4, 5);
        let g = x.gram();
        for a in 0..4 {
            for b in 0..4 {
                let mut want = 0.0f64;
                for i in 0..10 {
                    want += x.get(i, a) as f64 * x.get(i, b) as f64;
                }
                assert!((g.get(a, b) - want).abs() < 1e-12);
            }
        }
    }
}
