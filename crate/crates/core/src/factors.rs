//! Latent factor matrices `W` (m x u) and the base extractors that produce
//! them.
//!
//! Every base algorithm is reduced to one linear map from the original
//! features to a latent space. Algorithms that only expose the embedded target
//! rows `Z` go through [`recover_w`], which finds a `W` with
//! `X W W' X' = Z Z'` via the metric `G = pinv(X) Z Z' pinv(X)'`.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{mean_energy, rbf_gram};
use crate::linalg::{
    center_columns, column_means, fix_column_signs, orthonormal_columns, pinv, sym_eigen_desc, vstack,
};

/// Relative eigenvalue threshold below which recovered directions are dropped.
pub const RANK_TOL: f64 = 1e-10;

/// Default ridge of [`tca_lite`].
pub const DEFAULT_TCA_RIDGE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct FactorMatrix(DMatrix<f64>);

impl FactorMatrix {
    pub fn new(w: DMatrix<f64>) -> Result<Self> {
        if w.ncols() > w.nrows() {
            return Err(Error::shape(format!(
                "factor matrix has more latent columns ({}) than features ({})",
                w.ncols(),
                w.nrows()
            )));
        }
        if !w.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("factor matrix".into()));
        }
        Ok(Self(w))
    }

    pub fn identity(m: usize) -> Self {
        Self(DMatrix::identity(m, m))
    }

    /// Original feature dimension.
    pub fn m(&self) -> usize {
        self.0.nrows()
    }

    /// Latent dimension.
    pub fn u(&self) -> usize {
        self.0.ncols()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.0.norm_squared()
    }
}

impl AsRef<DMatrix<f64>> for FactorMatrix {
    fn as_ref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// The base algorithms available for generating experiences.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorId {
    JointPca,
    TargetPca,
    TcaLite,
    RandomProj,
    KpcaRecover,
}

impl ExtractorId {
    pub const ALL: [ExtractorId; 5] = [
        ExtractorId::JointPca,
        ExtractorId::TargetPca,
        ExtractorId::TcaLite,
        ExtractorId::RandomProj,
        ExtractorId::KpcaRecover,
    ];

    pub fn token(self) -> &'static str {
        match self {
            ExtractorId::JointPca => "joint_pca",
            ExtractorId::TargetPca => "target_pca",
            ExtractorId::TcaLite => "tca_lite",
            ExtractorId::RandomProj => "random_proj",
            ExtractorId::KpcaRecover => "kpca_recover",
        }
    }

    /// Runs the extractor on a domain pair. `seed` only matters for
    /// [`ExtractorId::RandomProj`]; the kernel PCA bandwidth is the mean
    /// squared distance between target rows.
    pub fn extract(self, xs: &DMatrix<f64>, xt: &DMatrix<f64>, u: usize, seed: u64) -> Result<FactorMatrix> {
        match self {
            ExtractorId::JointPca => joint_pca(xs, xt, u),
            ExtractorId::TargetPca => target_pca(xt, u),
            ExtractorId::TcaLite => tca_lite(xs, xt, u, DEFAULT_TCA_RIDGE),
            ExtractorId::RandomProj => random_proj(xt.ncols(), u, seed),
            ExtractorId::KpcaRecover => {
                let delta = mean_energy(xt, xt)?;
                kpca_recover(xt, u, delta)
            }
        }
    }
}

impl fmt::Display for ExtractorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for ExtractorId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ExtractorId::ALL
            .into_iter()
            .find(|e| e.token() == s)
            .ok_or_else(|| Error::invalid(format!("unknown extractor `{s}`")))
    }
}

/// Latent factors reproducing the target embedding `zt` through the
/// original features `xt`.
///
/// Only the row space of `xt` is recoverable: when `xt` is rank deficient the
/// reconstruction identity holds for the component of `zt` that lies in
/// `xt`'s column span.
pub fn recover_w(xt: &DMatrix<f64>, zt: &DMatrix<f64>) -> Result<FactorMatrix> {
    if xt.nrows() == 0 {
        return Err(Error::invalid("recovery needs at least one target row"));
    }
    if zt.nrows() != xt.nrows() {
        return Err(Error::shape(format!(
            "embedding has {} rows, features have {}",
            zt.nrows(),
            xt.nrows()
        )));
    }
    let m = xt.ncols();
    let proj = pinv(xt)? * zt;
    let g = &proj * proj.transpose();
    let (vals, vecs) = sym_eigen_desc(&g);
    let lambda_max = vals.first().copied().unwrap_or(0.0).max(0.0);
    let keep: Vec<usize> = if lambda_max > 0.0 {
        (0..m).filter(|&i| vals[i] > RANK_TOL * lambda_max).collect()
    } else {
        Vec::new()
    };
    let mut w = DMatrix::from_fn(m, keep.len(), |r, c| {
        let i = keep[c];
        vecs[(r, i)] * vals[i].max(0.0).sqrt()
    });
    fix_column_signs(&mut w);
    FactorMatrix::new(w)
}

/// Top `u` right singular directions of `x`, completed with an orthonormal
/// basis of the remaining space when `x` has fewer than `u` singular
/// vectors.
fn top_right_singular(x: &DMatrix<f64>, u: usize) -> Result<DMatrix<f64>> {
    let m = x.ncols();
    let svd = x.clone().svd(false, true);
    let v_t = svd
        .v_t
        .as_ref()
        .ok_or_else(|| Error::Linalg("svd: missing V^T".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
    let take = u.min(order.len());
    let mut cols: Vec<nalgebra::DVector<f64>> = order[..take].iter().map(|&i| v_t.row(i).transpose()).collect();
    // Gram-Schmidt completion against the standard basis.
    let mut e = 0;
    while cols.len() < u && e < m {
        let mut v = nalgebra::DVector::zeros(m);
        v[e] = 1.0;
        for _ in 0..2 {
            for c in &cols {
                let p = c.dot(&v);
                v -= c * p;
            }
        }
        let norm = v.norm();
        if norm > 1e-8 {
            cols.push(v / norm);
        }
        e += 1;
    }
    let mut w = DMatrix::from_columns(&cols);
    if w.ncols() == 0 {
        w = DMatrix::zeros(m, 0);
    }
    fix_column_signs(&mut w);
    Ok(w)
}

fn pca(x: &DMatrix<f64>, u: usize) -> Result<FactorMatrix> {
    if u > x.ncols() {
        return Err(Error::invalid(format!(
            "latent dimension {u} exceeds feature dimension {}",
            x.ncols()
        )));
    }
    if x.nrows() < 2 {
        return Err(Error::invalid("PCA needs at least two rows"));
    }
    FactorMatrix::new(top_right_singular(&center_columns(x), u)?)
}

/// Principal directions of the stacked, centered source and target rows.
pub fn joint_pca(xs: &DMatrix<f64>, xt: &DMatrix<f64>, u: usize) -> Result<FactorMatrix> {
    pca(&vstack(xs, xt)?, u)
}

/// Principal directions of the target rows only.
pub fn target_pca(xt: &DMatrix<f64>, u: usize) -> Result<FactorMatrix> {
    pca(xt, u)
}

/// Linear transfer component analysis: directions maximizing the pooled
/// scatter relative to the mean-embedding discrepancy plus a ridge.
///
/// Solves `X' C X w = lambda (X' L X + ridge I) w`, where `X' L X` is the
/// outer product of the domain mean difference, and keeps the `u` leading
/// directions normalised to unit length.
pub fn tca_lite(xs: &DMatrix<f64>, xt: &DMatrix<f64>, u: usize, ridge: f64) -> Result<FactorMatrix> {
    let m = xs.ncols();
    if u > m {
        return Err(Error::invalid(format!("latent dimension {u} exceeds feature dimension {m}")));
    }
    if xs.nrows() == 0 || xt.nrows() == 0 {
        return Err(Error::invalid("TCA needs rows in both domains"));
    }
    if !(ridge >= 0.0) {
        return Err(Error::invalid(format!("ridge must be non-negative, got {ridge}")));
    }
    let x = vstack(xs, xt)?;
    let gap = column_means(xs) - column_means(xt);
    let mut b = &gap * gap.transpose();
    for i in 0..m {
        b[(i, i)] += ridge;
    }
    let xc = center_columns(&x);
    let scatter = xc.transpose() * &xc;
    let chol = b
        .cholesky()
        .ok_or_else(|| Error::Linalg("TCA system is singular; increase the ridge".into()))?;
    let l = chol.l();
    let left = l
        .solve_lower_triangular(&scatter)
        .ok_or_else(|| Error::Linalg("TCA triangular solve failed".into()))?;
    let reduced = l
        .solve_lower_triangular(&left.transpose())
        .ok_or_else(|| Error::Linalg("TCA triangular solve failed".into()))?;
    let (_, vecs) = sym_eigen_desc(&reduced);
    let top = vecs.columns(0, u).into_owned();
    let mut w = l
        .transpose()
        .solve_upper_triangular(&top)
        .ok_or_else(|| Error::Linalg("TCA back substitution failed".into()))?;
    for mut col in w.column_iter_mut() {
        let n = col.norm();
        if n > 0.0 {
            col /= n;
        }
    }
    fix_column_signs(&mut w);
    FactorMatrix::new(w)
}

/// Orthonormalised standard-normal `m x u` draw.
pub fn random_proj(m: usize, u: usize, seed: u64) -> Result<FactorMatrix> {
    if u > m {
        return Err(Error::invalid(format!("latent dimension {u} exceeds feature dimension {m}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = DMatrix::from_fn(m, u, |_, _| StandardNormal.sample(&mut rng));
    if u == 0 {
        return FactorMatrix::new(draw);
    }
    FactorMatrix::new(orthonormal_columns(&draw))
}

/// Kernel PCA scores of the target rows under an RBF kernel of bandwidth
/// `delta`.
pub fn kpca_scores(xt: &DMatrix<f64>, u: usize, delta: f64) -> Result<DMatrix<f64>> {
    let n = xt.nrows();
    if n < 2 {
        return Err(Error::invalid("kernel PCA needs at least two rows"));
    }
    let k = rbf_gram(xt, xt, delta)?;
    let row_means: Vec<f64> = (0..n).map(|i| k.row(i).sum() / n as f64).collect();
    let total = row_means.iter().sum::<f64>() / n as f64;
    let kc = DMatrix::from_fn(n, n, |i, j| k[(i, j)] - row_means[i] - row_means[j] + total);
    let (vals, vecs) = sym_eigen_desc(&kc);
    let lambda_max = vals[0].max(0.0);
    let keep: Vec<usize> = (0..u.min(n)).filter(|&i| vals[i] > RANK_TOL * lambda_max && vals[i] > 0.0).collect();
    let mut z = DMatrix::from_fn(n, keep.len(), |r, c| vecs[(r, keep[c])] * vals[keep[c]].sqrt());
    fix_column_signs(&mut z);
    Ok(z)
}

/// Nonlinear extractor: kernel PCA embedding of the target, mapped back to a
/// linear factor matrix through [`recover_w`].
pub fn kpca_recover(xt: &DMatrix<f64>, u: usize, delta: f64) -> Result<FactorMatrix> {
    if u > xt.ncols() {
        return Err(Error::invalid(format!(
            "latent dimension {u} exceeds feature dimension {}",
            xt.ncols()
        )));
    }
    let z = kpca_scores(xt, u, delta)?;
    recover_w(xt, &z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_matrix(seed: u64, r: usize, c: usize) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn gram_residual(x: &DMatrix<f64>, w: &FactorMatrix, z: &DMatrix<f64>) -> f64 {
        let w = w.as_matrix();
        let lhs = x * w * w.transpose() * x.transpose();
        let rhs = z * z.transpose();
        (lhs - &rhs).norm() / rhs.norm()
    }

    #[test]
    fn extractor_tokens_round_trip() {
        for e in ExtractorId::ALL {
            assert_eq!(e.token().parse::<ExtractorId>().unwrap(), e);
        }
        assert!("pca".parse::<ExtractorId>().is_err());
    }

    #[test]
    fn factor_matrix_rejects_wide_and_nonfinite() {
        assert!(FactorMatrix::new(DMatrix::zeros(2, 3)).is_err());
        assert!(FactorMatrix::new(DMatrix::from_element(2, 1, f64::NAN)).is_err());
    }

    #[test]
    fn identity_embedding_recovers_identity_metric() {
        let x = random_matrix(1, 20, 6);
        let w = recover_w(&x, &x).unwrap();
        let wwt = w.as_matrix() * w.as_matrix().transpose();
        assert!((wwt - DMatrix::identity(6, 6)).amax() < 1e-8);
    }

    #[test]
    fn linear_embedding_is_reconstructed() {
        let x = random_matrix(2, 25, 7);
        let a = random_matrix(3, 7, 3);
        let z = &x * a;
        let w = recover_w(&x, &z).unwrap();
        assert_eq!(w.u(), 3);
        let res = gram_residual(&x, &w, &z);
        assert!(res <= 1e-6, "{res}");
    }

    #[test]
    fn zero_embedding_has_no_columns() {
        let x = random_matrix(4, 10, 4);
        let w = recover_w(&x, &DMatrix::zeros(10, 2)).unwrap();
        assert_eq!((w.m(), w.u()), (4, 0));
    }

    #[test]
    fn recover_shape_mismatch() {
        assert!(recover_w(&DMatrix::zeros(3, 2), &DMatrix::zeros(4, 1)).is_err());
    }

    #[test]
    fn recovery_invariant_to_embedding_rotation() {
        let x = random_matrix(5, 18, 6);
        let z = &x * random_matrix(6, 6, 3);
        let r = orthonormal_columns(&random_matrix(7, 3, 3));
        let w1 = recover_w(&x, &z).unwrap();
        let w2 = recover_w(&x, &(&z * r)).unwrap();
        let g1 = w1.as_matrix() * w1.as_matrix().transpose();
        let g2 = w2.as_matrix() * w2.as_matrix().transpose();
        assert!((g1 - g2).amax() < 1e-8);
    }

    #[test]
    fn pca_on_exact_subspace() {
        let basis = random_matrix(8, 3, 8);
        let coeffs = random_matrix(9, 30, 3);
        let x = &coeffs * &basis;
        let xs = x.rows(0, 12).into_owned();
        let xt = x.rows(12, 18).into_owned();
        let w = joint_pca(&xs, &xt, 3).unwrap();
        let wm = w.as_matrix();
        assert!((wm.transpose() * wm - DMatrix::identity(3, 3)).amax() < 1e-10);
        let xc = center_columns(&x);
        assert!((&xc - &xc * wm * wm.transpose()).norm() <= 1e-8);
    }

    #[test]
    fn pca_reconstruction_matches_eigen_oracle() {
        let x = random_matrix(10, 40, 6);
        let w = target_pca(&x, 2).unwrap();
        let xc = center_columns(&x);
        let resid = (&xc - &xc * w.as_matrix() * w.as_matrix().transpose()).norm_squared();
        let cov = xc.transpose() * &xc;
        let mut eig: Vec<f64> = nalgebra::SymmetricEigen::new(cov).eigenvalues.iter().cloned().collect();
        eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let tail: f64 = eig[2..].iter().sum();
        assert!((resid - tail).abs() < 1e-8);
    }

    #[test]
    fn pca_rejects_bad_requests() {
        assert!(target_pca(&random_matrix(11, 1, 4), 2).is_err());
        assert!(joint_pca(&random_matrix(12, 4, 3), &random_matrix(13, 4, 3), 4).is_err());
    }

    #[test]
    fn pca_completes_basis_when_rows_are_scarce() {
        let w = target_pca(&random_matrix(14, 3, 6), 5).unwrap();
        let wm = w.as_matrix();
        assert!((wm.transpose() * wm - DMatrix::identity(5, 5)).amax() < 1e-10);
    }

    #[test]
    fn tca_on_identical_domains_is_pca() {
        let x = random_matrix(15, 30, 5);
        let w = tca_lite(&x, &x, 2, DEFAULT_TCA_RIDGE).unwrap();
        let pca = joint_pca(&x, &x, 2).unwrap();
        let wm = w.as_matrix();
        for c in 0..2 {
            let dot = wm.column(c).dot(&pca.as_matrix().column(c)).abs();
            assert!((dot - 1.0).abs() < 1e-8);
        }
        let gap = (column_means(&x).transpose() * wm - column_means(&x).transpose() * wm).norm();
        assert_eq!(gap, 0.0);
    }

    #[test]
    fn tca_reduces_mean_gap_versus_pca() {
        for seed in 0..5 {
            let xs = random_matrix(100 + seed, 25, 6);
            let mut xt = random_matrix(200 + seed, 20, 6);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for c in 0..6 {
                let shift: f64 = rng.random_range(-1.0..1.0);
                xt.column_mut(c).add_scalar_mut(shift);
            }
            let gap = |w: &FactorMatrix| {
                (column_means(&xs).transpose() * w.as_matrix() - column_means(&xt).transpose() * w.as_matrix()).norm()
            };
            let tca = tca_lite(&xs, &xt, 3, DEFAULT_TCA_RIDGE).unwrap();
            let pca = joint_pca(&xs, &xt, 3).unwrap();
            assert_eq!(tca.as_matrix().shape(), (6, 3));
            assert!(tca.as_matrix().iter().all(|v| v.is_finite()));
            assert!(gap(&tca) <= gap(&pca), "seed {seed}");
        }
    }

    #[test]
    fn random_projection_properties() {
        let a = random_proj(8, 3, 42).unwrap();
        let b = random_proj(8, 3, 42).unwrap();
        let c = random_proj(8, 3, 43).unwrap();
        assert_eq!(a, b);
        assert!((a.as_matrix() - c.as_matrix()).norm() > 0.0);
        let wm = a.as_matrix();
        assert!((wm.transpose() * wm - DMatrix::identity(3, 3)).amax() < 1e-10);
        assert!(random_proj(3, 4, 0).is_err());
    }

    #[test]
    fn wide_kernel_pca_approaches_linear_pca() {
        let x = random_matrix(16, 30, 5);
        let eta = mean_energy(&x, &x).unwrap();
        let z = kpca_scores(&x, 2, 1e6 * eta).unwrap();
        let xc = center_columns(&x);
        let lin = &xc * target_pca(&x, 2).unwrap().as_matrix();
        for c in 0..2 {
            let cos = z.column(c).dot(&lin.column(c)).abs() / (z.column(c).norm() * lin.column(c).norm());
            assert!(cos > 1.0 - 1e-6, "column {c}: cos {cos}");
        }
        // Kernel scores are centred, so the linear map is exact only from
        // centred inputs.
        let w = kpca_recover(&xc, 2, 1e6 * eta).unwrap();
        let res = gram_residual(&xc, &w, &z);
        assert!(res <= 1e-6, "{res}");
    }

    #[test]
    fn kernel_pca_recovery_identity() {
        let x = random_matrix(17, 20, 8);
        let eta = mean_energy(&x, &x).unwrap();
        let z = kpca_scores(&x, 3, eta).unwrap();
        let w = kpca_recover(&x, 3, eta).unwrap();
        // The kernel embedding is not linear in x, so the identity holds on
        // its projection onto the column span of x.
        let proj = &x * pinv(&x).unwrap() * &z;
        assert!(gram_residual(&x, &w, &proj) <= 1e-6);
        let one = kpca_recover(&x, 1, eta).unwrap();
        assert!(one.u() >= 1);
    }
}
