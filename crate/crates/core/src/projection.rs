//! Projection of residuals onto the column space of a feature matrix.
//!
//! The projector `P = X (XᵀX + εI)⁻¹ Xᵀ` is never formed. With the thin SVD
//! `X = U Σ Vᵀ` it equals `X V diag(w) Vᵀ Xᵀ` where `w_j = 1 / (σ_j² + ε)`,
//! so `P e` costs three skinny products: `Xᵀ e`, an `N x N` filter, and
//! `X c`. The pseudo-inverse mode uses `w_j = 1 / σ_j²` on the retained
//! singular values and zero elsewhere, which gives the exact orthogonal
//! projector onto `col(X)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric;
use crate::volumes::FeatureMatrix;

pub const DEFAULT_RIDGE_EPSILON: f64 = 1e-3;
pub const DEFAULT_PINV_RCOND: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProjectorSpec {
    Ridge { epsilon: f64 },
    Pinv { rcond: f64 },
}

impl Default for ProjectorSpec {
    fn default() -> Self {
        ProjectorSpec::Ridge {
            epsilon: DEFAULT_RIDGE_EPSILON,
        }
    }
}

impl ProjectorSpec {
    pub fn pinv() -> Self {
        ProjectorSpec::Pinv {
            rcond: DEFAULT_PINV_RCOND,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ProjectorSpec::Ridge { epsilon } if !(epsilon > 0.0 && epsilon.is_finite()) => Err(
                Error::InvalidParameter(format!("ridge epsilon must be > 0, got {epsilon}")),
            ),
            ProjectorSpec::Pinv { rcond } if !(rcond > 0.0 && rcond < 1.0) => Err(
                Error::InvalidParameter(format!("pinv rcond must lie in (0, 1), got {rcond}")),
            ),
            _ => Ok(()),
        }
    }
}

/// Right singular vectors and filter of a feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GramFactorization {
    spec: ProjectorSpec,
    n: usize,
    /// `N x N` row-major; column `j` is the `j`-th right singular vector.
    v: Vec<f64>,
    sigma: Vec<f64>,
    filter: Vec<f64>,
    weight: Vec<f64>,
}

impl GramFactorization {
    pub fn spec(&self) -> ProjectorSpec {
        self.spec
    }

    pub fn n_features(&self) -> usize {
        self.n
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    /// Singular values, descending.
    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    /// Eigenvalues of `P` along each right singular direction, all in [0, 1].
    pub fn filter(&self) -> &[f64] {
        &self.filter
    }
}

pub fn gram_factorize(x: &FeatureMatrix, spec: ProjectorSpec) -> Result<GramFactorization> {
    factorize_rows(x.values(), x.rows(), x.cols(), spec)
}

/// Factorizes a row-major `m x n` slice.
pub fn factorize_rows(
    values: &[f64],
    m: usize,
    n: usize,
    spec: ProjectorSpec,
) -> Result<GramFactorization> {
    spec.validate()?;
    if values.len() != m * n {
        return Err(Error::LengthMismatch {
            expected: m * n,
            found: values.len(),
        });
    }
    if n == 0 {
        return Err(Error::DimensionMismatch("feature matrix has no columns".into()));
    }
    if m < n {
        return Err(Error::DimensionMismatch(format!(
            "need at least as many rows as features, got {m} x {n}"
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("feature matrix".into()));
    }

    let x = DMatrix::from_row_slice(m, n, values);
    // R from a QR keeps the SVD at N x N regardless of M.
    let r = x.qr().r();
    let svd = r.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::NonFinite("SVD did not produce V".into()))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let sigma: Vec<f64> = order.iter().map(|&j| svd.singular_values[j]).collect();
    let mut v = vec![0.0; n * n];
    for (col, &j) in order.iter().enumerate() {
        for row in 0..n {
            v[row * n + col] = v_t[(j, row)];
        }
    }
    let smax = sigma.first().copied().unwrap_or(0.0);
    let (filter, weight) = sigma
        .iter()
        .map(|&s| match spec {
            ProjectorSpec::Ridge { epsilon } => {
                let s2 = s * s;
                (s2 / (s2 + epsilon), 1.0 / (s2 + epsilon))
            }
            ProjectorSpec::Pinv { rcond } => {
                if s > rcond * smax && s > 0.0 {
                    (1.0, 1.0 / (s * s))
                } else {
                    (0.0, 0.0)
                }
            }
        })
        .unzip();
    Ok(GramFactorization {
        spec,
        n,
        v,
        sigma,
        filter,
        weight,
    })
}

/// `Xᵀ e` with compensated column sums.
pub fn xt_times(values: &[f64], m: usize, n: usize, e: &[f64]) -> Vec<f64> {
    (0..n)
        .map(|j| numeric::sum((0..m).map(|i| values[i * n + j] * e[i])))
        .collect()
}

/// Maps `Xᵀ e` to the coefficient vector `V diag(w) Vᵀ Xᵀ e`.
fn filter_coefficients(fact: &GramFactorization, xte: &[f64]) -> Vec<f64> {
    let n = fact.n;
    let mut b = vec![0.0; n];
    for j in 0..n {
        let proj: f64 = (0..n).map(|k| fact.v[k * n + j] * xte[k]).sum();
        b[j] = proj * fact.weight[j];
    }
    (0..n)
        .map(|k| (0..n).map(|j| fact.v[k * n + j] * b[j]).sum())
        .collect()
}

/// `(XᵀX + εI)⁻¹ a` in ridge mode, `(XᵀX)⁺ a` in pinv mode.
pub fn gram_solve(fact: &GramFactorization, a: &[f64]) -> Result<Vec<f64>> {
    if a.len() != fact.n {
        return Err(Error::DimensionMismatch(format!(
            "vector of length {} against {} features",
            a.len(),
            fact.n
        )));
    }
    Ok(filter_coefficients(fact, a))
}

/// `P e` over raw row-major rows. The rows need not be the ones the
/// factorization was built from; with a full-data factorization and batch
/// rows this evaluates the batch block of the full-data projector.
pub fn project_rows(
    values: &[f64],
    m: usize,
    fact: &GramFactorization,
    e: &[f64],
) -> Result<Vec<f64>> {
    let n = fact.n;
    if values.len() != m * n {
        return Err(Error::DimensionMismatch(format!(
            "rows hold {} values, expected {m} x {n}",
            values.len()
        )));
    }
    if e.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "residual of length {} against {m} rows",
            e.len()
        )));
    }
    let xte = xt_times(values, m, n, e);
    let c = filter_coefficients(fact, &xte);
    Ok((0..m)
        .map(|i| {
            let row = &values[i * n..(i + 1) * n];
            row.iter().zip(&c).map(|(a, b)| a * b).sum()
        })
        .collect())
}

pub fn project_parallel(
    x: &FeatureMatrix,
    fact: &GramFactorization,
    e: &[f64],
) -> Result<Vec<f64>> {
    if x.cols() != fact.n {
        return Err(Error::DimensionMismatch(format!(
            "matrix has {} columns, factorization {}",
            x.cols(),
            fact.n
        )));
    }
    project_rows(x.values(), x.rows(), fact, e)
}

/// Residual `e` split into its column-space part and the remainder.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualDecomposition {
    pub e: Vec<f64>,
    pub r_par: Vec<f64>,
    pub r_perp: Vec<f64>,
    pub index_map: Vec<usize>,
}

impl ResidualDecomposition {
    pub fn len(&self) -> usize {
        self.e.len()
    }

    pub fn is_empty(&self) -> bool {
        self.e.is_empty()
    }
}

pub fn decompose_residual(
    x: &FeatureMatrix,
    fact: &GramFactorization,
    e: &[f64],
) -> Result<ResidualDecomposition> {
    let r_par = project_parallel(x, fact, e)?;
    let r_perp = e.iter().zip(&r_par).map(|(a, b)| a - b).collect();
    Ok(ResidualDecomposition {
        e: e.to_vec(),
        r_par,
        r_perp,
        index_map: x.index_map().to_vec(),
    })
}

/// Number of singular values above `tol * σ_max`.
pub fn effective_rank(fact: &GramFactorization, tol: f64) -> usize {
    let smax = fact.sigma.first().copied().unwrap_or(0.0);
    fact.sigma.iter().filter(|&&s| s > tol * smax).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_matrix(m: usize, n: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..m * n).map(|_| StandardNormal.sample(&mut rng)).collect();
        FeatureMatrix::from_rows(m, n, v).unwrap()
    }

    fn random_vec(m: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..m).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    fn to_dmatrix(x: &FeatureMatrix) -> DMatrix<f64> {
        DMatrix::from_row_slice(x.rows(), x.cols(), x.values())
    }

    /// Dense `X (XᵀX + εI)⁻¹ Xᵀ` through an explicit inverse.
    fn dense_ridge(x: &FeatureMatrix, eps: f64) -> DMatrix<f64> {
        let xm = to_dmatrix(x);
        let g = xm.transpose() * &xm + DMatrix::identity(x.cols(), x.cols()) * eps;
        &xm * g.try_inverse().unwrap() * xm.transpose()
    }

    fn orthonormal_stack() -> FeatureMatrix {
        FeatureMatrix::from_rows(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap()
    }

    #[test]
    fn orthonormal_columns_have_unit_sigma() {
        let x = orthonormal_stack();
        let f = gram_factorize(&x, ProjectorSpec::default()).unwrap();
        for (&s, &d) in f.sigma().iter().zip(f.filter()) {
            assert!((s - 1.0).abs() < 1e-14);
            assert!((d - 1.0 / 1.001).abs() < 1e-14);
        }
    }

    #[test]
    fn rank_one_example() {
        let x = FeatureMatrix::from_rows(3, 2, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let f = gram_factorize(&x, ProjectorSpec::pinv()).unwrap();
        assert!((f.sigma()[0] - 1.0).abs() < 1e-14);
        assert!(f.sigma()[1].abs() < 1e-14);
        assert_eq!(f.filter(), &[1.0, 0.0]);
    }

    #[test]
    fn gram_reconstruction_matches_dense() {
        let x = random_matrix(50, 7, 1);
        let f = gram_factorize(&x, ProjectorSpec::pinv()).unwrap();
        let xm = to_dmatrix(&x);
        let gram = xm.transpose() * &xm;
        let n = 7;
        let mut err: f64 = 0.0;
        for a in 0..n {
            for b in 0..n {
                let r: f64 = (0..n)
                    .map(|j| f.v()[a * n + j] * f.sigma()[j].powi(2) * f.v()[b * n + j])
                    .sum();
                err = err.max((r - gram[(a, b)]).abs());
            }
        }
        assert!(err <= 1e-10 * gram.norm(), "err {err}");
        // V orthonormal
        for a in 0..n {
            for b in 0..n {
                let d: f64 = (0..n).map(|k| f.v()[k * n + a] * f.v()[k * n + b]).sum();
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((d - expect).abs() < 1e-10);
            }
        }
        assert!(f.sigma().windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn project_examples() {
        let x = orthonormal_stack();
        let e = [1.0, 2.0, 3.0];
        let pinv = gram_factorize(&x, ProjectorSpec::pinv()).unwrap();
        let r = project_parallel(&x, &pinv, &e).unwrap();
        for (a, b) in r.iter().zip([1.0, 2.0, 0.0]) {
            assert!((a - b).abs() < 1e-14);
        }
        let ridge = gram_factorize(&x, ProjectorSpec::default()).unwrap();
        let r = project_parallel(&x, &ridge, &e).unwrap();
        let dense = dense_ridge(&x, 1e-3) * nalgebra::DVector::from_row_slice(&e);
        for i in 0..3 {
            assert!((r[i] - dense[i]).abs() < 1e-14);
        }
        assert!((r[0] - 1.0 / 1.001).abs() < 1e-14);

        let orth = [0.0, 0.0, 5.0];
        assert!(project_parallel(&x, &pinv, &orth).unwrap().iter().all(|v| v.abs() < 1e-14));
        assert!(project_parallel(&x, &ridge, &orth).unwrap().iter().all(|v| v.abs() < 1e-14));
        assert!(project_parallel(&x, &pinv, &[1.0]).is_err());
    }

    #[test]
    fn in_span_residual_has_no_orthogonal_part() {
        let x = random_matrix(40, 5, 2);
        let beta = [0.5, -1.0, 2.0, 0.25, 3.0];
        let e: Vec<f64> = (0..40).map(|i| x.row(i).iter().zip(&beta).map(|(a, b)| a * b).sum()).collect();
        let f = gram_factorize(&x, ProjectorSpec::pinv()).unwrap();
        let d = decompose_residual(&x, &f, &e).unwrap();
        let scale = numeric::norm(&e);
        assert!(d.r_perp.iter().all(|v| v.abs() <= 1e-10 * scale));
    }

    #[test]
    fn pythagorean_identity_pinv() {
        let x = random_matrix(1000, 7, 3);
        let e = random_vec(1000, 4);
        let f = gram_factorize(&x, ProjectorSpec::pinv()).unwrap();
        let d = decompose_residual(&x, &f, &e).unwrap();
        let lhs = numeric::dot(&e, &e);
        let rhs = numeric::dot(&d.r_par, &d.r_par) + numeric::dot(&d.r_perp, &d.r_perp);
        assert!((lhs - rhs).abs() <= 1e-10 * lhs);
    }

    #[test]
    fn ridge_identity_matches_dense() {
        let x = random_matrix(200, 7, 5);
        let e = random_vec(200, 6);
        let eps = 1e-3;
        let f = gram_factorize(&x, ProjectorSpec::Ridge { epsilon: eps }).unwrap();
        let d = decompose_residual(&x, &f, &e).unwrap();
        let xm = to_dmatrix(&x);
        let ev = nalgebra::DVector::from_row_slice(&e);
        let g = xm.transpose() * &xm + DMatrix::identity(7, 7) * eps;
        let rhs = g.try_inverse().unwrap() * (xm.transpose() * &ev) * eps;
        let lhs = xm.transpose() * nalgebra::DVector::from_row_slice(&d.r_perp);
        // both sides are a cancellation of O(‖Xᵀe‖) terms
        let scale = (xm.transpose() * &ev).norm();
        assert!((&lhs - &rhs).norm() <= 1e-10 * scale);
    }

    #[test]
    fn effective_rank_examples() {
        let x = orthonormal_stack();
        let f = gram_factorize(&x, ProjectorSpec::pinv()).unwrap();
        assert_eq!(effective_rank(&f, 1e-10), 2);

        let base = random_matrix(30, 3, 7);
        let mut vals = Vec::new();
        for i in 0..30 {
            vals.extend_from_slice(base.row(i));
            vals.push(base.row(i)[1]);
        }
        let dup = FeatureMatrix::from_rows(30, 4, vals).unwrap();
        let f = gram_factorize(&dup, ProjectorSpec::pinv()).unwrap();
        assert_eq!(effective_rank(&f, 1e-10), 3);
    }

    #[test]
    fn effective_rank_matches_dense_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..20 {
            let base = random_matrix(60, 6, 100 + trial);
            let noise: f64 = 10f64.powi(-(trial as i32 % 8) - 3);
            let mut vals = base.values().to_vec();
            for i in 0..60 {
                let a: f64 = StandardNormal.sample(&mut rng);
                vals[i * 6 + 5] = vals[i * 6] + noise * a;
            }
            let x = FeatureMatrix::from_rows(60, 6, vals).unwrap();
            let tol = 1e-6;
            let f = gram_factorize(&x, ProjectorSpec::pinv()).unwrap();
            let dense = to_dmatrix(&x).svd(false, false).singular_values;
            let smax = dense.max();
            let expect = dense.iter().filter(|&&s| s > tol * smax).count();
            assert_eq!(effective_rank(&f, tol), expect, "trial {trial}");
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let short = FeatureMatrix::from_rows(2, 3, vec![0.0; 6]).unwrap();
        assert!(gram_factorize(&short, ProjectorSpec::pinv()).is_err());
        assert!(factorize_rows(&[f64::NAN, 1.0], 2, 1, ProjectorSpec::pinv()).is_err());
        assert!(ProjectorSpec::Ridge { epsilon: 0.0 }.validate().is_err());
        assert!(ProjectorSpec::Pinv { rcond: 1.0 }.validate().is_err());
    }
}
