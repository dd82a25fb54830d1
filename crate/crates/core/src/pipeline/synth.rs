//! Synthetic domain pairs with a controllable amount of shared structure.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Domain;
use crate::error::{Error, Result};
use crate::linalg::orthonormal_columns;

/// Standard deviation of class means in latent coordinates.
pub const CLASS_MEAN_SCALE: f64 = 1.5;
/// Within-class standard deviation in latent coordinates.
pub const WITHIN_CLASS_SD: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub m: usize,
    pub u_true: usize,
    pub classes_per_domain: usize,
    pub samples_per_class: usize,
    pub relatedness: f64,
    pub noise_sigma: f64,
    #[serde(with = "super::persist::seed_str")]
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            m: 50,
            u_true: 10,
            classes_per_domain: 3,
            samples_per_class: 30,
            relatedness: 0.8,
            noise_sigma: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.u_true == 0 || self.u_true > self.m {
            return Err(Error::invalid(format!(
                "latent dimension {} must be in [1, {}]",
                self.u_true, self.m
            )));
        }
        if !(0.0..=1.0).contains(&self.relatedness) {
            return Err(Error::invalid(format!("relatedness {} outside [0, 1]", self.relatedness)));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise sigma must be non-negative"));
        }
        if self.classes_per_domain == 0 || self.samples_per_class == 0 {
            return Err(Error::invalid("need at least one class and one sample per class"));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn rows_per_domain(&self) -> usize {
        self.classes_per_domain * self.samples_per_class
    }
}

fn normal_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

fn sample_domain(
    rng: &mut ChaCha8Rng,
    frame: &DMatrix<f64>,
    means: &[DVector<f64>],
    cfg: &SynthConfig,
    name: &str,
) -> Result<Domain> {
    let n = cfg.rows_per_domain();
    let mut latent = normal_matrix(rng, n, cfg.u_true, WITHIN_CLASS_SD);
    let mut labels = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        for s in 0..cfg.samples_per_class {
            let row = c * cfg.samples_per_class + s;
            let mut r = latent.row_mut(row);
            r += mean.transpose();
            labels.push(c);
        }
    }
    let noise = normal_matrix(rng, n, cfg.m, cfg.noise_sigma);
    Domain::new(&latent * frame.transpose() + noise, Some(labels), name)
}

/// Draws a labelled source/target pair.
///
/// The target lives on a random `u_true`-dimensional frame. The source frame
/// keeps `round(relatedness * u_true)` of the target's directions and
/// replaces the rest with fresh orthogonal ones; source class means are the
/// blend `relatedness * target_mean + (1 - relatedness) * fresh_mean`. Class
/// `c` of the source corresponds to class `c` of the target.
pub fn gen_pair(cfg: &SynthConfig) -> Result<(Domain, Domain)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (m, u) = (cfg.m, cfg.u_true);
    let shared = (cfg.relatedness * u as f64).round() as usize;
    let fresh_cols = u - shared;
    let width = (u + fresh_cols).min(m);
    let basis = orthonormal_columns(&normal_matrix(&mut rng, m, width, 1.0));
    let target_frame = basis.columns(0, u).into_owned();
    let mut source_frame = DMatrix::zeros(m, u);
    source_frame.columns_mut(0, shared).copy_from(&target_frame.columns(0, shared));
    if fresh_cols > 0 {
        let extra = if u + fresh_cols <= m {
            basis.columns(u, fresh_cols).into_owned()
        } else {
            // Not enough room for orthogonal fresh directions.
            orthonormal_columns(&normal_matrix(&mut rng, m, fresh_cols, 1.0))
        };
        source_frame.columns_mut(shared, fresh_cols).copy_from(&extra);
    }

    let mean = |rng: &mut ChaCha8Rng| DVector::from_column_slice(normal_matrix(rng, u, 1, CLASS_MEAN_SCALE).as_slice());
    let target_means: Vec<DVector<f64>> = (0..cfg.classes_per_domain).map(|_| mean(&mut rng)).collect();
    let source_means: Vec<DVector<f64>> = target_means
        .iter()
        .map(|t| {
            let fresh = mean(&mut rng);
            t * cfg.relatedness + fresh * (1.0 - cfg.relatedness)
        })
        .collect();

    let source = sample_domain(&mut rng, &source_frame, &source_means, cfg, "source")?;
    let target = sample_domain(&mut rng, &target_frame, &target_means, cfg, "target")?;
    Ok((source, target))
}
