//! Per-kernel two-sample statistics of an embedded domain pair.
//!
//! For every kernel of a [`KernelBank`] this computes
//!
//! * the biased MMD V-statistic between the embedded source and target rows,
//! * the covariance of the paired h-statistics across kernels, and
//! * the unlabeled discriminant ratio `tr(W' S_N W) / tr(W' S_L W)` built from
//!   mutual nearest neighbours of the raw target rows.
//!
//! [`featurize`] bundles the three into the [`ExperienceFeatures`] consumed by
//! the reflection model.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::factors::FactorMatrix;
use crate::kernels::{mean_energy, pairwise_sq_dists, KernelBank};
use crate::pipeline::Domain;

/// Guard added to trace-ratio denominators.
pub const TRACE_EPS: f64 = 1e-12;

/// Default neighbour count for the mutual r-NN graph.
pub const DEFAULT_NEIGHBORS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct ExperienceFeatures {
    pub mmd: DVector<f64>,
    pub variance: DMatrix<f64>,
    pub discriminant: DVector<f64>,
    /// `1 / l` (or `1 / l_hat` once corrected).
    pub inverse_ratio_target: f64,
    /// Raw improvement ratio the target was derived from.
    pub ratio: f64,
    pub n_labeled: usize,
    pub bank: KernelBank,
}

impl ExperienceFeatures {
    pub fn kernel_count(&self) -> usize {
        self.mmd.len()
    }

    pub fn is_finite(&self) -> bool {
        self.mmd.iter().all(|v| v.is_finite())
            && self.variance.iter().all(|v| v.is_finite())
            && self.discriminant.iter().all(|v| v.is_finite())
            && self.inverse_ratio_target.is_finite()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScatterPair {
    pub local: DMatrix<f64>,
    pub nonlocal: DMatrix<f64>,
}

/// Row pairing used by the h-statistic covariance. Both index lists have
/// length `min(n_s, n_t)`; the larger domain is subsampled without
/// replacement and kept in ascending row order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pairing {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

impl Pairing {
    pub fn new(n_s: usize, n_t: usize, seed: u64) -> Self {
        let n = n_s.min(n_t);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pick = |len: usize| -> Vec<usize> {
            if len == n {
                (0..n).collect()
            } else {
                let mut idx = rand::seq::index::sample(&mut rng, len, n).into_vec();
                idx.sort_unstable();
                idx
            }
        };
        let source = pick(n_s);
        let target = pick(n_t);
        Self { source, target }
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }
}

fn check_pair(zs: &DMatrix<f64>, zt: &DMatrix<f64>) -> Result<()> {
    if zs.ncols() != zt.ncols() {
        return Err(Error::shape(format!(
            "source embedding has {} columns, target has {}",
            zs.ncols(),
            zt.ncols()
        )));
    }
    if zs.nrows() == 0 || zt.nrows() == 0 {
        return Err(Error::invalid("empty domain"));
    }
    Ok(())
}

fn kernel_sum(d2: &DMatrix<f64>, delta: f64) -> f64 {
    d2.iter().map(|d| (-d / delta).exp()).sum()
}

/// Biased MMD estimate for every kernel of the bank.
pub fn mmd_vector(zs: &DMatrix<f64>, zt: &DMatrix<f64>, bank: &KernelBank) -> Result<DVector<f64>> {
    check_pair(zs, zt)?;
    let dss = pairwise_sq_dists(zs, zs)?;
    let dtt = pairwise_sq_dists(zt, zt)?;
    let dst = pairwise_sq_dists(zs, zt)?;
    let ns = zs.nrows() as f64;
    let nt = zt.nrows() as f64;
    let out = bank.bandwidths().iter().map(|&delta| {
        kernel_sum(&dss, delta) / (ns * ns) + kernel_sum(&dtt, delta) / (nt * nt)
            - 2.0 * kernel_sum(&dst, delta) / (ns * nt)
    });
    Ok(DVector::from_iterator(bank.count(), out))
}

/// Centered h-statistics, one row per kernel, one column per ordered pair
/// `(i, i')` of paired rows.
fn centered_h(
    zs: &DMatrix<f64>,
    zt: &DMatrix<f64>,
    bank: &KernelBank,
    pairing: &Pairing,
) -> Result<DMatrix<f64>> {
    let ps = crate::linalg::select_rows(zs, &pairing.source);
    let pt = crate::linalg::select_rows(zt, &pairing.target);
    let dss = pairwise_sq_dists(&ps, &ps)?;
    let dtt = pairwise_sq_dists(&pt, &pt)?;
    let dst = pairwise_sq_dists(&ps, &pt)?;
    let n = pairing.len();
    let mut h = DMatrix::zeros(bank.count(), n * n);
    for (k, &delta) in bank.bandwidths().iter().enumerate() {
        let mut sum = 0.0;
        for i in 0..n {
            for ip in 0..n {
                let v = (-dss[(i, ip)] / delta).exp() + (-dtt[(i, ip)] / delta).exp()
                    - 2.0 * (-dst[(i, ip)] / delta).exp();
                h[(k, i * n + ip)] = v;
                sum += v;
            }
        }
        let mean = sum / (n * n) as f64;
        h.row_mut(k).add_scalar_mut(-mean);
    }
    Ok(h)
}

/// Covariance of the paired h-statistics across kernels, normalised by
/// `1 / (n^2 - 1)`. A single paired row carries no variance information and
/// yields the zero matrix.
pub fn variance_matrix(
    zs: &DMatrix<f64>,
    zt: &DMatrix<f64>,
    bank: &KernelBank,
    pairing: &Pairing,
) -> Result<DMatrix<f64>> {
    check_pair(zs, zt)?;
    if pairing.source.iter().any(|&i| i >= zs.nrows()) || pairing.target.iter().any(|&i| i >= zt.nrows()) {
        return Err(Error::shape("pairing indexes rows outside the domain"));
    }
    let nk = bank.count();
    let n = pairing.len();
    if n < 2 {
        return Ok(DMatrix::zeros(nk, nk));
    }
    let h = centered_h(zs, zt, bank, pairing)?;
    let norm = 1.0 / ((n * n) as f64 - 1.0);
    let mut q = DMatrix::zeros(nk, nk);
    for a in 0..nk {
        for b in a..nk {
            let v = h.row(a).dot(&h.row(b)) * norm;
            q[(a, b)] = v;
            q[(b, a)] = v;
        }
    }
    Ok(q)
}

/// Boolean mutual r-nearest-neighbour relation over the rows of `x`.
/// Neighbour lists exclude the row itself; equal distances go to the lower
/// row index.
pub fn mutual_neighbors(x: &DMatrix<f64>, r: usize) -> Result<DMatrix<bool>> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::invalid("neighbour graph needs at least two rows"));
    }
    if r == 0 || r >= n {
        return Err(Error::invalid(format!("neighbour count {r} must be in [1, {})", n)));
    }
    let d = pairwise_sq_dists(x, x)?;
    let mut is_nn = DMatrix::from_element(n, n, false);
    let mut order: Vec<usize> = Vec::with_capacity(n - 1);
    for j in 0..n {
        order.clear();
        order.extend((0..n).filter(|&i| i != j));
        order.sort_by(|&a, &b| d[(j, a)].total_cmp(&d[(j, b)]).then(a.cmp(&b)));
        for &i in order.iter().take(r) {
            is_nn[(j, i)] = true;
        }
    }
    Ok(DMatrix::from_fn(n, n, |a, b| is_nn[(a, b)] && is_nn[(b, a)]))
}

/// `sum_{j,j'} w_{jj'} (x_j - x_j')(x_j - x_j')^T` for symmetric weights, via
/// the Laplacian identity `2 X^T (diag(w 1) - w) X`.
fn weighted_scatter(x: &DMatrix<f64>, w: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let mut lap = -w.clone();
    for j in 0..n {
        lap[(j, j)] += w.row(j).sum();
    }
    let s = x.transpose() * (lap * x) * 2.0;
    crate::linalg::symmetrize(&s)
}

/// Local and non-local scatter matrices of the raw target rows, one pair per
/// kernel. The neighbour graph is computed once and shared by every kernel.
pub fn scatter_matrices(xt: &DMatrix<f64>, bank: &KernelBank, r: usize) -> Result<Vec<ScatterPair>> {
    let mutual = mutual_neighbors(xt, r)?;
    let d = pairwise_sq_dists(xt, xt)?;
    let n2 = (xt.nrows() * xt.nrows()) as f64;
    bank.bandwidths()
        .iter()
        .map(|&delta| {
            let k = d.map(|v| (-v / delta).exp());
            let h = k.zip_map(&mutual, |kv, m| if m { kv } else { 0.0 });
            let local = weighted_scatter(xt, &(&h / n2));
            let nonlocal = weighted_scatter(xt, &((&k - &h) / n2));
            Ok(ScatterPair { local, nonlocal })
        })
        .collect()
}

/// `tr(W' S W)` without forming the product.
pub fn trace_quadratic(s: &DMatrix<f64>, w: &DMatrix<f64>) -> f64 {
    (s * w).component_mul(w).sum()
}

pub fn discriminant_vector(scatter: &[ScatterPair], w: &FactorMatrix) -> Result<DVector<f64>> {
    let w = w.as_matrix();
    let mut out = DVector::zeros(scatter.len());
    for (k, pair) in scatter.iter().enumerate() {
        if pair.local.nrows() != w.nrows() || pair.nonlocal.nrows() != w.nrows() {
            return Err(Error::shape(format!(
                "scatter matrices are {}x{}, factor matrix has {} rows",
                pair.local.nrows(),
                pair.local.ncols(),
                w.nrows()
            )));
        }
        let num = trace_quadratic(&pair.nonlocal, w);
        let den = trace_quadratic(&pair.local, w);
        out[k] = num / (den + TRACE_EPS);
    }
    Ok(out)
}

/// Statistics of one recorded experience. The bank is the default grid
/// scaled by the mean cross energy of the embedded rows; `seed` fixes the
/// row pairing of the covariance estimate.
pub fn featurize(
    source: &Domain,
    target: &Domain,
    w: &FactorMatrix,
    ratio: f64,
    n_labeled: usize,
    r: usize,
    seed: u64,
) -> Result<ExperienceFeatures> {
    if !(ratio > 0.0) || !ratio.is_finite() {
        return Err(Error::invalid(format!("improvement ratio must be positive, got {ratio}")));
    }
    if source.dim() != w.m() || target.dim() != w.m() {
        return Err(Error::shape(format!(
            "domains have {} and {} features, factor matrix has {} rows",
            source.dim(),
            target.dim(),
            w.m()
        )));
    }
    let zs = source.embed(w);
    let zt = target.embed(w);
    let bank = KernelBank::from_energy(mean_energy(&zs, &zt)?)?;
    let mmd = mmd_vector(&zs, &zt, &bank)?;
    let pairing = Pairing::new(zs.nrows(), zt.nrows(), seed);
    let variance = variance_matrix(&zs, &zt, &bank, &pairing)?;
    let scatter = scatter_matrices(target.features(), &bank, r)?;
    let discriminant = discriminant_vector(&scatter, w)?;
    let feats = ExperienceFeatures {
        mmd,
        variance,
        discriminant,
        inverse_ratio_target: 1.0 / ratio,
        ratio,
        n_labeled,
        bank,
    };
    if !feats.is_finite() {
        return Err(Error::NonFinite("experience features".into()));
    }
    Ok(feats)
}
