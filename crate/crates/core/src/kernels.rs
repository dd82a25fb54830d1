//! RBF kernel family `K(a, b) = exp(-||a - b||^2 / delta)` and the bandwidth grid
//! shared by every statistic in the crate.
//!
//! A [`KernelBank`] is a fixed grid of bandwidth exponents scaled by an energy
//! statistic `eta`: `delta_k = 2^{e_k} * eta`. The exponent grid is global, so
//! features computed for different experiences line up by kernel index even
//! though each experience carries its own `eta`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest exponent of the default grid.
pub const GRID_MIN_EXPONENT: f64 = -8.0;
/// Largest exponent of the default grid.
pub const GRID_MAX_EXPONENT: f64 = 8.0;
/// Multiplicative step of the default grid, as a power of two.
pub const GRID_STEP_EXPONENT: f64 = 0.5;
/// Number of kernels in the default grid.
pub const DEFAULT_KERNEL_COUNT: usize = 33;

/// The default exponent grid `-8, -7.5, ..., 8`.
pub fn default_exponents() -> Vec<f64> {
    (0..DEFAULT_KERNEL_COUNT)
        .map(|i| GRID_MIN_EXPONENT + GRID_STEP_EXPONENT * i as f64)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelBank {
    exponents: Vec<f64>,
    scale: f64,
    bandwidths: Vec<f64>,
}

impl KernelBank {
    /// The default 33-kernel grid around `eta`.
    pub fn from_energy(eta: f64) -> Result<Self> {
        Self::with_exponents(default_exponents(), eta)
    }

    pub fn with_exponents(exponents: Vec<f64>, scale: f64) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::invalid(format!("kernel scale must be positive and finite, got {scale}")));
        }
        if exponents.is_empty() {
            return Err(Error::invalid("kernel bank needs at least one exponent"));
        }
        if exponents.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("bandwidth exponents must be strictly increasing"));
        }
        let bandwidths: Vec<f64> = exponents.iter().map(|e| scale * 2f64.powf(*e)).collect();
        if bandwidths.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
            return Err(Error::invalid("bandwidth grid over- or underflows"));
        }
        Ok(Self {
            exponents,
            scale,
            bandwidths,
        })
    }

    /// Same exponent grid, new scale.
    pub fn rescaled(&self, scale: f64) -> Result<Self> {
        Self::with_exponents(self.exponents.clone(), scale)
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    pub fn exponents(&self) -> &[f64] {
        &self.exponents
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn count(&self) -> usize {
        self.bandwidths.len()
    }

    pub fn same_grid(&self, other: &KernelBank) -> bool {
        self.exponents == other.exponents
    }
}

/// `make_bank`: the default grid for a given energy statistic.
pub fn make_bank(eta: f64) -> Result<KernelBank> {
    KernelBank::from_energy(eta)
}

/// Squared Euclidean distances between every row of `a` and every row of `b`.
pub fn pairwise_sq_dists(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::shape(format!(
            "pairwise distances need equal column counts, got {} and {}",
            a.ncols(),
            b.ncols()
        )));
    }
    // Transposed copies make each row a contiguous column.
    let at = a.transpose();
    let bt = b.transpose();
    let mut out = DMatrix::zeros(a.nrows(), b.nrows());
    for j in 0..b.nrows() {
        let bj = bt.column(j);
        for i in 0..a.nrows() {
            let ai = at.column(i);
            let mut acc = 0.0;
            for (x, y) in ai.iter().zip(bj.iter()) {
                let d = x - y;
                acc += d * d;
            }
            out[(i, j)] = acc;
        }
    }
    Ok(out)
}

/// Mean squared cross distance between the two embedded samples. Returns 1
/// when every cross distance is zero so that the bank stays well defined.
pub fn mean_energy(zs: &DMatrix<f64>, zt: &DMatrix<f64>) -> Result<f64> {
    if zs.nrows() == 0 || zt.nrows() == 0 {
        return Err(Error::invalid("mean energy of an empty sample"));
    }
    let d = pairwise_sq_dists(zs, zt)?;
    let eta = d.sum() / (zs.nrows() * zt.nrows()) as f64;
    if !eta.is_finite() {
        return Err(Error::NonFinite("mean energy".into()));
    }
    Ok(if eta == 0.0 { 1.0 } else { eta })
}

/// Elementwise `exp(-d / delta)` of a squared-distance matrix.
pub fn rbf_from_sq_dists(d2: &DMatrix<f64>, delta: f64) -> Result<DMatrix<f64>> {
    check_bandwidth(delta)?;
    Ok(d2.map(|d| (-d / delta).exp()))
}

pub fn rbf_gram(a: &DMatrix<f64>, b: &DMatrix<f64>, delta: f64) -> Result<DMatrix<f64>> {
    check_bandwidth(delta)?;
    let d2 = pairwise_sq_dists(a, b)?;
    rbf_from_sq_dists(&d2, delta)
}

fn check_bandwidth(delta: f64) -> Result<()> {
    if delta > 0.0 && delta.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("bandwidth must be positive, got {delta}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sym_eigen_desc;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn self_distance_is_zero() {
        let a = DMatrix::from_row_slice(1, 3, &[1.0, -2.0, 0.5]);
        assert_eq!(pairwise_sq_dists(&a, &a).unwrap()[(0, 0)], 0.0);
    }

    #[test]
    fn three_four_five() {
        let a = DMatrix::from_row_slice(1, 2, &[0.0, 0.0]);
        let b = DMatrix::from_row_slice(1, 2, &[3.0, 4.0]);
        assert_eq!(pairwise_sq_dists(&a, &b).unwrap()[(0, 0)], 25.0);
    }

    #[test]
    fn distances_match_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_matrix(&mut rng, 7, 3);
        let b = random_matrix(&mut rng, 5, 3);
        let d = pairwise_sq_dists(&a, &b).unwrap();
        for i in 0..7 {
            for j in 0..5 {
                let expect = (a.row(i) - b.row(j)).norm_squared();
                assert!((d[(i, j)] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let a = DMatrix::<f64>::zeros(2, 3);
        let b = DMatrix::<f64>::zeros(2, 4);
        assert!(matches!(pairwise_sq_dists(&a, &b), Err(Error::Shape(_))));
        assert!(rbf_gram(&a, &b, 1.0).is_err());
    }

    #[test]
    fn mean_energy_cases() {
        let one = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        assert_eq!(mean_energy(&one, &one).unwrap(), 1.0);
        let zs = DMatrix::from_row_slice(1, 1, &[0.0]);
        let zt = DMatrix::from_row_slice(1, 1, &[2.0]);
        assert_eq!(mean_energy(&zs, &zt).unwrap(), 4.0);
        assert!(mean_energy(&DMatrix::zeros(0, 2), &one).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let zs = random_matrix(&mut rng, 10, 4);
        let zt = random_matrix(&mut rng, 8, 4);
        let mut acc = 0.0;
        for i in 0..10 {
            for j in 0..8 {
                acc += (zs.row(i) - zt.row(j)).norm_squared();
            }
        }
        assert!((mean_energy(&zs, &zt).unwrap() - acc / 80.0).abs() < 1e-12);
    }

    #[test]
    fn bank_grid() {
        let bank = make_bank(1.0).unwrap();
        assert_eq!(bank.count(), 33);
        assert_eq!(bank.bandwidths()[16], 1.0);
        assert_eq!(bank.bandwidths()[0], 2f64.powi(-8));
        assert_eq!(bank.bandwidths()[32], 256.0);
        for w in make_bank(3.7).unwrap().bandwidths().windows(2) {
            assert!((w[1] / w[0] - std::f64::consts::SQRT_2).abs() < 4.0 * f64::EPSILON);
        }
        assert!(make_bank(0.0).is_err());
        assert!(make_bank(-1.0).is_err());
    }

    #[test]
    fn bank_scales_linearly() {
        let base = make_bank(1.0).unwrap();
        let scaled = make_bank(5.5).unwrap();
        for (a, b) in base.bandwidths().iter().zip(scaled.bandwidths()) {
            assert!((5.5 * a - b).abs() <= 1e-15 * b);
        }
    }

    #[test]
    fn rbf_values() {
        let a = DMatrix::from_row_slice(1, 2, &[0.0, 0.0]);
        let b = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        assert_eq!(rbf_gram(&a, &a, 0.3).unwrap()[(0, 0)], 1.0);
        let k = rbf_gram(&a, &b, 2.0).unwrap()[(0, 0)];
        assert!((k - 0.367879441171442).abs() < 1e-12);
        assert!(rbf_gram(&a, &b, 0.0).is_err());
    }

    #[test]
    fn gram_psd_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let n = rng.random_range(2..50);
            let a = random_matrix(&mut rng, n, 4);
            let k = rbf_gram(&a, &a, rng.random_range(0.1..5.0)).unwrap();
            assert_eq!(k, k.transpose());
            let (vals, _) = sym_eigen_desc(&k);
            assert!(vals.iter().all(|v| *v >= -1e-10));
        }
    }

    proptest! {
        #[test]
        fn rbf_bounded_and_symmetric(seed in 0u64..1000, delta in 0.05f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_matrix(&mut rng, 6, 3);
            let b = random_matrix(&mut rng, 4, 3);
            let kab = rbf_gram(&a, &b, delta).unwrap();
            let kba = rbf_gram(&b, &a, delta).unwrap();
            prop_assert_eq!(&kab, &kba.transpose());
            prop_assert!(kab.iter().all(|v| *v > 0.0 && *v <= 1.0));
            let kaa = rbf_gram(&a, &a, delta).unwrap();
            for i in 0..6 {
                prop_assert_eq!(kaa[(i, i)], 1.0);
            }
        }
    }
}
