//! Per-head (and joint-head) PCA projection bases fitted from cached keys and
//! values, stored once at maximum rank and sliced to any lower candidate rank.
//!
//! The basis for a lower rank is exactly the leading columns of the stored
//! one, so a single matrix per head and side covers the whole candidate set.

use crate::error::{Error, Result};
use crate::linalg::{sym_eig_f64, Matrix, MatrixF64};

/// Orthonormality defect allowed when accepting externally supplied basis
/// columns (for example, ones read back from the f32 on-disk encoding).
const BASIS_ACCEPT_TOL: f64 = 1e-5;

/// Leading eigenvectors of X^T X / N for one head and side (key or value).
///
/// Columns are orthonormal, eigenvalues descending. Slicing to the first `r`
/// columns is exactly the basis fitting at rank `r` would produce; the
/// eigensolver's sign rule makes this nesting bit-exact.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionBasis {
    head_dim: usize,
    max_rank: usize,
    basis: MatrixF64,
    eigenvalues: Vec<f64>,
}

impl ProjectionBasis {
    /// Basis with zero stored rank, for caches whose candidate set needs no
    /// projection (eviction-only ratio sets).
    pub fn empty(head_dim: usize) -> Self {
        ProjectionBasis {
            head_dim,
            max_rank: 0,
            basis: MatrixF64::zeros(head_dim, 0),
            eigenvalues: Vec::new(),
        }
    }

    /// Wraps externally supplied columns (deserialization, tests). Checks
    /// shape and near-orthonormality but not provenance.
    pub fn from_parts(head_dim: usize, basis: MatrixF64, eigenvalues: Vec<f64>) -> Result<Self> {
        if basis.rows() != head_dim {
            return Err(Error::contract(format!(
                "basis rows {} != head dim {head_dim}",
                basis.rows()
            )));
        }
        if basis.cols() != eigenvalues.len() {
            return Err(Error::contract(
                "basis column count does not match eigenvalue count",
            ));
        }
        if basis.cols() > head_dim {
            return Err(Error::contract("basis rank exceeds head dim"));
        }
        let defect = basis.orthonormality_error();
        if defect > BASIS_ACCEPT_TOL {
            return Err(Error::DataIntegrity(format!(
                "basis columns not orthonormal (defect {defect:.3e})"
            )));
        }
        Ok(ProjectionBasis {
            head_dim,
            max_rank: basis.cols(),
            basis,
            eigenvalues,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn max_rank(&self) -> usize {
        self.max_rank
    }

    pub fn basis(&self) -> &MatrixF64 {
        &self.basis
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }
}

/// Fits a basis on `x` (N x D): the leading `max_rank` eigenvectors of
/// X^T X / N together with their eigenvalues.
pub fn fit_basis(x: &Matrix, max_rank: usize) -> Result<ProjectionBasis> {
    if x.rows() == 0 {
        return Err(Error::contract("fit_basis: empty input"));
    }
    let d = x.cols();
    if max_rank == 0 || max_rank > d {
        return Err(Error::contract(format!(
            "fit_basis: max_rank {max_rank} out of range 1..={d}"
        )));
    }
    let s = x.gram().scaled(1.0 / x.rows() as f64);
    let eig = sym_eig_f64(&s)?;
    Ok(ProjectionBasis {
        head_dim: d,
        max_rank,
        basis: eig.eigenvectors.leading_cols(max_rank),
        eigenvalues: eig.eigenvalues[..max_rank].to_vec(),
    })
}

/// Fits one basis over the column-concatenation of all heads (joint-head
/// compression); the result lives in dimension `H_kv * D`.
pub fn fit_joint_basis(heads: &[&Matrix], max_rank: usize) -> Result<ProjectionBasis> {
    if heads.is_empty() {
        return Err(Error::contract("fit_joint_basis: no heads"));
    }
    let (n, d) = (heads[0].rows(), heads[0].cols());
    if heads.iter().any(|h| h.rows() != n || h.cols() != d) {
        return Err(Error::contract("fit_joint_basis: head shape mismatch"));
    }
    let joint = Matrix::hconcat(heads)?;
    fit_basis(&joint, max_rank)
}

/// First `r` columns of the stored basis, with no recomputation.
pub fn slice_basis(basis: &ProjectionBasis, r: usize) -> Result<MatrixF64> {
    if r > basis.max_rank {
        return Err(Error::contract(format!(
            "slice_basis: rank {r} exceeds stored max rank {}",
            basis.max_rank
        )));
    }
    Ok(basis.basis.leading_cols(r))
}

/// Projects rows of `x` into the rank-`r` subspace: X * P_r.
pub fn project(x: &Matrix, basis: &ProjectionBasis, r: usize) -> Result<Matrix> {
    if x.cols() != basis.head_dim {
        return Err(Error::contract(format!(
            "project: input width {} != head dim {}",
            x.cols(),
            basis.head_dim
        )));
    }
    let p = slice_basis(basis, r)?;
    x.mul_f64(&p)
}

/// Maps rank-`r` rows back to the full dimension: X_c * P_r^T.
pub fn reconstruct(x_c: &Matrix, basis: &ProjectionBasis, r: usize) -> Result<Matrix> {
    if x_c.cols() != r {
        return Err(Error::contract(format!(
            "reconstruct: input width {} != rank {r}",
            x_c.cols()
        )));
    }
    let p = slice_basis(basis, r)?;
    if r == 0 {
        return Ok(Matrix::zeros(x_c.rows(), basis.head_dim));
    }
    x_c.mul_f64_nt(&p)
}

/// The set of candidate compression ratios and the head dimensions they map
/// to. Must contain 0 and 1; dims are round-to-nearest(ratio * D), deduplicated
/// and ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioSet {
    ratios: Vec<f64>,
    head_dim: usize,
    dims: Vec<usize>,
}

impl RatioSet {
    pub fn new(ratios: &[f64], head_dim: usize) -> Result<Self> {
        if head_dim == 0 {
            return Err(Error::contract("ratio set: head dim must be positive"));
        }
        if ratios.is_empty() {
            return Err(Error::contract("ratio set: empty"));
        }
        if ratios.iter().any(|r| !r.is_finite() || *r < 0.0 || *r > 1.0) {
            return Err(Error::contract("ratio set: ratios must lie in [0, 1]"));
        }
        let mut sorted = ratios.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite ratios"));
        sorted.dedup();
        if sorted.first() != Some(&0.0) || sorted.last() != Some(&1.0) {
            return Err(Error::contract("ratio set: must contain 0 and 1"));
        }
        let mut dims: Vec<usize> = sorted
            .iter()
            .map(|r| (r * head_dim as f64).round() as usize)
            .collect();
        dims.dedup();
        Ok(RatioSet {
            ratios: sorted,
            head_dim,
            dims,
        })
    }

    /// The default candidate set: {0%, 12.5%, 25%, 100%}.
    pub fn default_for(head_dim: usize) -> Self {
        RatioSet::new(&[0.0, 0.125, 0.25, 1.0], head_dim).expect("default ratios are valid")
    }

    pub fn ratios(&self) -> &[f64] {
        &self.ratios
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// Candidate dimensions, ascending; first is 0, last is D.
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Largest candidate dimension strictly below D. This is the rank bases
    /// are stored at; full-dimension tokens bypass projection entirely.
    pub fn max_stored_rank(&self) -> usize {
        self.dims
            .iter()
            .rev()
            .find(|&&d| d < self.head_dim)
            .copied()
            .unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::testutil::rand_matrix;

    #[test]
    fn ratio_set_derives_dims() {
        let rs = RatioSet::new(&[0.0, 0.125, 0.25, 1.0], 128).unwrap();
        assert_eq!(rs.dims(), &[0, 16, 32, 128]);
        assert_eq!(rs.max_stored_rank(), 32);
        let rs = RatioSet::new(&[1.0, 0.0], 16).unwrap();
        assert_eq!(rs.dims(), &[0, 16]);
        assert_eq!(rs.max_stored_rank(), 0);
    }

    #[test]
    fn ratio_set_dedups_rounded_dims() {
        // 0.01 * 16 rounds to 0 and merges with the eviction entry.
        let rs = RatioSet::new(&[0.0, 0.01, 0.5, 1.0], 16).unwrap();
        assert_eq!(rs.dims(), &[0, 8, 16]);
    }

    #[test]
    fn ratio_set_rejects_bad_input() {
        assert!(RatioSet::new(&[0.0, 0.5], 16).is_err());
        assert!(RatioSet::new(&[0.5, 1.0], 16).is_err());
        assert!(RatioSet::new(&[0.0, 1.5], 16).is_err());
        assert!(RatioSet::new(&[], 16).is_err());
    }

    #[test]
    fn fit_rank_one_input() {
        // All rows equal to a unit vector: first eigenvalue 1, rest ~0.
        let d = 6;
        let mut u = vec![0.0f32; d];
        u[1] = 0.6;
        u[4] = 0.8;
        let x = Matrix::from_fn(8, d, |_, j| u[j]);
        let b = fit_basis(&x, d).unwrap();
        assert!((b.eigenvalues()[0] - 1.0).abs() < 1e-6);
        for &ev in &b.eigenvalues()[1..] {
            assert!(ev.abs() < 1e-8);
        }
        for (j, &uj) in u.iter().enumerate() {
            assert!((b.basis().get(j, 0) - uj as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn fit_isotropic_axes() {
        // Equal numbers of each standard-basis row: covariance I/D.
        let d = 4;
        let x = Matrix::from_fn(4 * d, d, |i, j| if i % d == j { 1.0 } else { 0.0 });
        let b = fit_basis(&x, d).unwrap();
        for &ev in b.eigenvalues() {
            assert!((ev - 1.0 / d as f64).abs() < 1e-9);
        }
        for i in 0..d {
            for j in 0..d {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((b.basis().get(i, j) - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn fit_rejects_empty() {
        let x = Matrix::zeros(0, 4);
        assert!(fit_basis(&x, 2).is_err());
        let x = Matrix::zeros(4, 4);
        assert!(fit_basis(&x, 5).is_err());
        assert!(fit_basis(&x, 0).is_err());
    }

    #[test]
    fn projection_error_equals_tail_eigenvalue_sum() {
        let x = rand_matrix(64, 16, 7);
        let full = fit_basis(&x, 16).unwrap();
        let r = 8;
        let xc = project(&x, &full, r).unwrap();
        let xr = reconstruct(&xc, &full, r).unwrap();
        let err = x.sub(&xr).unwrap().frobenius_norm().powi(2);
        let tail: f64 = full.eigenvalues()[r..].iter().sum();
        let want = 64.0 * tail;
        assert!(
            (err - want).abs() <= 1e-5 * want.max(1e-30),
            "err {err} vs tail {want}"
        );
    }

    #[test]
    fn slicing_matches_independent_refit() {
        let x = rand_matrix(64, 16, 13);
        let b8 = fit_basis(&x, 8).unwrap();
        let b4 = fit_basis(&x, 4).unwrap();
        let sliced = slice_basis(&b8, 4).unwrap();
        for i in 0..16 {
            for j in 0..4 {
                assert!((sliced.get(i, j) - b4.basis().get(i, j)).abs() < 1e-6);
            }
        }
        // The nesting is bit-exact, not just close.
        assert_eq!(sliced.data(), b4.basis().data());
    }

    #[test]
    fn slice_full_rank_is_stored_basis() {
        let x = rand_matrix(32, 8, 3);
        let b = fit_basis(&x, 6).unwrap();
        let s = slice_basis(&b, 6).unwrap();
        assert_eq!(s.data(), b.basis().data());
        assert!(slice_basis(&b, 7).is_err());
    }

    #[test]
    fn slice_zero_gives_empty_projection() {
        let x = rand_matrix(5, 8, 4);
        let b = fit_basis(&x, 4).unwrap();
        let s = slice_basis(&b, 0).unwrap();
        assert_eq!(s.cols(), 0);
        let xc = project(&x, &b, 0).unwrap();
        assert_eq!((xc.rows(), xc.cols()), (5, 0));
        let back = reconstruct(&xc, &b, 0).unwrap();
        assert_eq!(back, Matrix::zeros(5, 8));
    }

    #[test]
    fn full_rank_projection_is_lossless() {
        let x = rand_matrix(20, 8, 9);
        let b = fit_basis(&x, 8).unwrap();
        let xc = project(&x, &b, 8).unwrap();
        let back = reconstruct(&xc, &b, 8).unwrap();
        assert!(x.sub(&back).unwrap().frobenius_norm() < 1e-5);
    }

    #[test]
    fn projecting_basis_column_gives_unit_coordinate() {
        let x = rand_matrix(40, 8, 17);
        let b = fit_basis(&x, 4).unwrap();
        let col0 = Matrix::from_fn(1, 8, |_, j| b.basis().get(j, 0) as f32);
        let proj = project(&col0, &b, 4).unwrap();
        assert!((proj.get(0, 0) - 1.0).abs() < 1e-6);
        for j in 1..4 {
            assert!(proj.get(0, j).abs() < 1e-6);
        }
    }

    #[test]
    fn project_matches_two_step_f64_oracle() {
        let x = rand_matrix(12, 8, 23);
        let b = fit_basis(&x, 8).unwrap();
        let r = 2;
        let got = project(&x, &b, r).unwrap();
        // Oracle: eigendecompose independently, multiply in f64.
        let s = x.gram().scaled(1.0 / 12.0);
        let eig = sym_eig_f64(&s).unwrap();
        for i in 0..12 {
            for j in 0..r {
                let mut acc = 0.0f64;
                for k in 0..8 {
                    acc += x.get(i, k) as f64 * eig.eigenvectors.get(k, j);
                }
                assert!((got.get(i, j) as f64 - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn reconstruction_error_monotone_in_rank() {
        let x = rand_matrix(64, 16, 31);
        let b = fit_basis(&x, 16).unwrap();
        let mut last = f64::INFINITY;
        for r in [2usize, 4, 8, 16] {
            let err = x
                .sub(&reconstruct(&project(&x, &b, r).unwrap(), &b, r).unwrap())
                .unwrap()
                .frobenius_norm();
            assert!(err <= last + 1e-9, "rank {r}: {err} > {last}");
            last = err;
        }
    }

    #[test]
    fn orthonormality_at_every_rank() {
        let x = rand_matrix(50, 12, 41);
        let b = fit_basis(&x, 10).unwrap();
        for r in 1..=10 {
            let p = slice_basis(&b, r).unwrap();
            assert!(p.orthonormality_error() < 1e-8, "rank {r}");
        }
    }

    #[test]
    fn joint_single_head_matches_plain_fit() {
        let x = rand_matrix(30, 8, 51);
        let a = fit_basis(&x, 4).unwrap();
        let b = fit_joint_basis(&[&x], 4).unwrap();
        assert_eq!(a.basis().data(), b.basis().data());
        assert_eq!(a.eigenvalues(), b.eigenvalues());
    }

    #[test]
    fn joint_duplicate_heads_double_eigenvalues() {
        let x = rand_matrix(40, 6, 61);
        let single = fit_basis(&x, 6).unwrap();
        let joint = fit_joint_basis(&[&x, &x], 12).unwrap();
        // Perfect cross-head redundancy: spectrum is {2*lambda_i} then zeros.
        for i in 0..6 {
            assert!(
                (joint.eigenvalues()[i] - 2.0 * single.eigenvalues()[i]).abs() < 1e-9,
                "eigenvalue {i}"
            );
        }
        for i in 6..12 {
            assert!(joint.eigenvalues()[i].abs() < 1e-9);
        }
    }

    #[test]
    fn joint_rank_split_oracle_on_heterogeneous_heads() {
        // Heads with disjoint sample support have exactly zero cross-head
        // covariance, so a joint basis has no cross-head structure to exploit:
        // its error cannot drop below the best per-head rank split of the same
        // total rank.
        let n = 48;
        let raw1 = rand_matrix(n, 8, 71);
        let raw2 = rand_matrix(n, 8, 72);
        let h1 = Matrix::from_fn(n, 8, |i, j| {
            if i < n / 2 {
                raw1.get(i, j) * (2.0 - 0.2 * j as f32)
            } else {
                0.0
            }
        });
        let h2 = Matrix::from_fn(n, 8, |i, j| if i >= n / 2 { raw2.get(i, j) * 0.5 } else { 0.0 });
        let joint = fit_joint_basis(&[&h1, &h2], 16).unwrap();
        let b1 = fit_basis(&h1, 8).unwrap();
        let b2 = fit_basis(&h2, 8).unwrap();
        let r_total = 8;
        let joint_x = Matrix::hconcat(&[&h1, &h2]).unwrap();
        let joint_err = joint_x
            .sub(&reconstruct(&project(&joint_x, &joint, r_total).unwrap(), &joint, r_total).unwrap())
            .unwrap()
            .frobenius_norm()
            .powi(2);
        let mut best_split = f64::INFINITY;
        for r1 in 0..=r_total {
            let r2 = r_total - r1;
            let e1: f64 = b1.eigenvalues()[r1..].iter().sum::<f64>() * n as f64;
            let e2: f64 = b2.eigenvalues()[r2..].iter().sum::<f64>() * n as f64;
            best_split = best_split.min(e1 + e2);
        }
        assert!(
            joint_err >= best_split - 1e-5 * best_split.abs().max(1.0),
            "joint {joint_err} vs best split {best_split}"
        );
    }

    #[test]
    fn from_parts_validates() {
        let x = rand_matrix(20, 6, 81);
        let b = fit_basis(&x, 4).unwrap();
        let rebuilt =
            ProjectionBasis::from_parts(6, b.basis().clone(), b.eigenvalues().to_vec()).unwrap();
        assert_eq!(&rebuilt, &b);
        let skewed = MatrixF64::new(6, 2, vec![1.0; 12]).unwrap();
        assert!(ProjectionBasis::from_parts(6, skewed, vec![0.0, 0.0]).is_err());
    }
}
