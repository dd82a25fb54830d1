//! The reflection function: a constrained model of the inverse improvement
//! ratio
//!
//! ```text
//! 1/f = beta' d + lambda beta' Q beta + mu / (beta' tau) + b,   beta, lambda, mu >= 0
//! ```
//!
//! fitted to recorded experiences under a Huber loss with projected gradient
//! descent.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::KernelBank;
use crate::stats::{ExperienceFeatures, TRACE_EPS};

/// Armijo sufficient-decrease constant used by the trainer.
const ARMIJO_C: f64 = 1e-4;
/// Projected-gradient norm at which training stops.
const PG_TOL: f64 = 1e-6;
/// Largest correction parameter tried by [`fit_correction`].
pub const CORRECTION_GRID_MAX: u32 = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct ReflectionModel {
    pub beta: DVector<f64>,
    pub lambda: f64,
    pub mu: f64,
    pub bias: f64,
    /// Exponent grid the coefficients refer to (scale is irrelevant).
    pub bank: KernelBank,
}

impl ReflectionModel {
    pub fn new(beta: DVector<f64>, lambda: f64, mu: f64, bias: f64, bank: KernelBank) -> Result<Self> {
        if beta.len() != bank.count() {
            return Err(Error::shape(format!(
                "{} coefficients for a {}-kernel bank",
                beta.len(),
                bank.count()
            )));
        }
        if beta.iter().any(|b| !(*b >= 0.0)) || !(lambda >= 0.0) || !(mu >= 0.0) {
            return Err(Error::invalid("reflection coefficients must be non-negative"));
        }
        if !bias.is_finite() || beta.iter().any(|b| !b.is_finite()) || !lambda.is_finite() || !mu.is_finite() {
            return Err(Error::NonFinite("reflection model".into()));
        }
        Ok(Self {
            beta,
            lambda,
            mu,
            bias,
            bank,
        })
    }

    pub fn kernel_count(&self) -> usize {
        self.beta.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub gamma1: f64,
    pub huber_delta: f64,
    pub restarts: usize,
    pub max_iters: usize,
    pub step_init: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma1: 1e-4,
            huber_delta: 1.0,
            restarts: 5,
            max_iters: 2000,
            step_init: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.gamma1 >= 0.0) {
            return Err(Error::invalid("gamma1 must be non-negative"));
        }
        if !(self.huber_delta > 0.0) {
            return Err(Error::invalid("huber delta must be positive"));
        }
        if self.restarts == 0 || self.max_iters == 0 {
            return Err(Error::invalid("restarts and max_iters must be positive"));
        }
        if !(self.step_init > 0.0) {
            return Err(Error::invalid("initial step must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrectionConfig {
    pub p: u32,
    pub q: u32,
    pub b_corr: f64,
    pub enabled: bool,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        Self {
            p: 3,
            q: 120,
            b_corr: 0.0,
            enabled: false,
        }
    }
}

fn check_dims(model: &ReflectionModel, feats: &ExperienceFeatures) -> Result<()> {
    let nk = model.kernel_count();
    if feats.mmd.len() != nk || feats.discriminant.len() != nk || feats.variance.shape() != (nk, nk) {
        return Err(Error::shape(format!(
            "model has {nk} kernels, features have {}",
            feats.mmd.len()
        )));
    }
    Ok(())
}

pub fn predict_inverse_ratio(model: &ReflectionModel, feats: &ExperienceFeatures) -> Result<f64> {
    check_dims(model, feats)?;
    let b = &model.beta;
    let quad = (&feats.variance * b).dot(b);
    Ok(b.dot(&feats.mmd) + model.lambda * quad + model.mu / (b.dot(&feats.discriminant) + TRACE_EPS) + model.bias)
}

pub fn huber_loss(residual: f64, delta: f64) -> f64 {
    let a = residual.abs();
    if a <= delta {
        0.5 * residual * residual
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// Derivative of [`huber_loss`] with respect to the residual.
pub fn huber_grad(residual: f64, delta: f64) -> f64 {
    residual.clamp(-delta, delta)
}

/// Supplementary ratio correction: the expected improvement ratio over
/// labelled counts in `[p, q]` under a hyperbolic decay model anchored at the
/// observed `(n_labeled, l)`.
pub fn correct_ratio(l: f64, n_labeled: usize, cfg: &CorrectionConfig) -> Result<f64> {
    if !(l > 0.0) || !l.is_finite() {
        return Err(Error::invalid(format!("improvement ratio must be positive, got {l}")));
    }
    if n_labeled == 0 {
        return Err(Error::invalid("labelled count must be positive"));
    }
    if !(cfg.b_corr >= 0.0) {
        return Err(Error::invalid("correction parameter must be non-negative"));
    }
    if cfg.p > cfg.q {
        return Err(Error::invalid(format!("correction range [{}, {}] is empty", cfg.p, cfg.q)));
    }
    if !cfg.enabled || cfg.b_corr == 0.0 || cfg.p == cfg.q {
        return Ok(l);
    }
    let b = cfg.b_corr;
    let n = n_labeled as f64;
    let (p, q) = (cfg.p as f64, cfg.q as f64);
    Ok(l * (n + b) / n * (1.0 - b / (q - p) * ((q + b) / (p + b)).ln()))
}

/// Flat parameter vector `[beta..., lambda, mu, bias]`.
struct Problem<'a> {
    feats: &'a [ExperienceFeatures],
    nk: usize,
    gamma1: f64,
    delta: f64,
}

impl Problem<'_> {
    fn dim(&self) -> usize {
        self.nk + 3
    }

    fn project(&self, x: &mut DVector<f64>) {
        for v in x.iter_mut().take(self.nk + 2) {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }

    fn predict(&self, x: &DVector<f64>, f: &ExperienceFeatures) -> (f64, f64, f64) {
        let beta = x.rows(0, self.nk);
        let lin = beta.dot(&f.mmd);
        let quad = (&f.variance * beta).dot(&beta);
        let tau = beta.dot(&f.discriminant) + TRACE_EPS;
        let (lambda, mu, bias) = (x[self.nk], x[self.nk + 1], x[self.nk + 2]);
        (lin + lambda * quad + mu / tau + bias, quad, tau)
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        let loss: f64 = self
            .feats
            .iter()
            .map(|f| huber_loss(self.predict(x, f).0 - f.inverse_ratio_target, self.delta))
            .sum();
        loss + self.gamma1 * self.reg(x)
    }

    fn reg(&self, x: &DVector<f64>) -> f64 {
        x.rows(0, self.nk + 2).norm_squared()
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let nk = self.nk;
        let (lambda, mu) = (x[nk], x[nk + 1]);
        let beta = x.rows(0, nk).into_owned();
        let mut g = DVector::zeros(self.dim());
        for f in self.feats {
            let (pred, quad, tau) = self.predict(x, f);
            let psi = huber_grad(pred - f.inverse_ratio_target, self.delta);
            if psi == 0.0 {
                continue;
            }
            let qb = &f.variance * &beta;
            let mut gb = g.rows_mut(0, nk);
            gb += (&f.mmd + qb * (2.0 * lambda) - &f.discriminant * (mu / (tau * tau))) * psi;
            g[nk] += psi * quad;
            g[nk + 1] += psi / tau;
            g[nk + 2] += psi;
        }
        for i in 0..nk + 2 {
            g[i] += 2.0 * self.gamma1 * x[i];
        }
        g
    }

    fn unpack(&self, x: &DVector<f64>, bank: &KernelBank) -> Result<ReflectionModel> {
        ReflectionModel::new(
            x.rows(0, self.nk).into_owned(),
            x[self.nk],
            x[self.nk + 1],
            x[self.nk + 2],
            bank.rescaled(1.0)?,
        )
    }
}

/// One projected-gradient run.
#[derive(Clone, Debug)]
pub struct RestartTrace {
    /// Objective after every accepted step, starting with the initial value.
    pub objectives: Vec<f64>,
    pub iterations: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ReflectionModel,
    pub objective: f64,
    pub best_restart: usize,
    pub restarts: Vec<RestartTrace>,
}

impl TrainOutcome {
    /// Unregularised training loss of the returned model.
    pub fn huber_total(&self, feats: &[ExperienceFeatures], delta: f64) -> Result<f64> {
        feats
            .iter()
            .map(|f| Ok(huber_loss(predict_inverse_ratio(&self.model, f)? - f.inverse_ratio_target, delta)))
            .sum()
    }
}

fn run_restart(problem: &Problem<'_>, mut x: DVector<f64>, cfg: &TrainConfig) -> (DVector<f64>, RestartTrace) {
    problem.project(&mut x);
    let mut f = problem.value(&x);
    let mut g = problem.gradient(&x);
    let mut objectives = vec![f];
    let mut step = cfg.step_init;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        let mut probe = &x - &g;
        problem.project(&mut probe);
        if (&probe - &x).norm() <= PG_TOL {
            break;
        }
        let mut accepted = None;
        let mut alpha = step;
        while alpha > 1e-30 {
            let mut cand = &x - &g * alpha;
            problem.project(&mut cand);
            let decrease = g.dot(&(&cand - &x));
            let fc = problem.value(&cand);
            if fc.is_finite() && fc <= f + ARMIJO_C * decrease {
                accepted = Some((cand, fc));
                break;
            }
            alpha *= 0.5;
        }
        let Some((cand, fc)) = accepted else { break };
        iterations += 1;
        let gc = problem.gradient(&cand);
        let s = &cand - &x;
        let y = &gc - &g;
        let sy = s.dot(&y);
        // Barzilai-Borwein trial step for the next line search.
        step = if sy > 0.0 {
            (s.norm_squared() / sy).clamp(1e-12, 1e12)
        } else {
            cfg.step_init
        };
        let moved = s.norm() > 0.0;
        x = cand;
        f = fc;
        g = gc;
        objectives.push(f);
        if !moved {
            break;
        }
    }
    (x, RestartTrace { objectives, iterations })
}

/// Fits the reflection model. Restart 0 starts from zero; the others draw
/// `beta`, `lambda` and `mu` uniformly from `[0, 1/N_k]`. The restart with the
/// lowest final objective wins (lowest index on ties).
pub fn train_reflection_traced(feats: &[ExperienceFeatures], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let first = feats.first().ok_or_else(|| Error::invalid("no experiences to train on"))?;
    let nk = first.kernel_count();
    for (i, f) in feats.iter().enumerate() {
        if f.kernel_count() != nk
            || f.discriminant.len() != nk
            || f.variance.shape() != (nk, nk)
            || !f.bank.same_grid(&first.bank)
        {
            return Err(Error::shape(format!("experience {i} has a different kernel grid")));
        }
        if !f.is_finite() {
            return Err(Error::NonFinite(format!("features of experience {i}")));
        }
    }
    let problem = Problem {
        feats,
        nk,
        gamma1: cfg.gamma1,
        delta: cfg.huber_delta,
    };
    let inits: Vec<DVector<f64>> = (0..cfg.restarts)
        .map(|r| {
            let mut x = DVector::zeros(problem.dim());
            if r > 0 {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(r as u64));
                let hi = 1.0 / nk as f64;
                for v in x.iter_mut().take(nk + 2) {
                    *v = rng.random_range(0.0..=hi);
                }
            }
            x
        })
        .collect();
    let runs: Vec<(DVector<f64>, RestartTrace)> =
        inits.into_par_iter().map(|x0| run_restart(&problem, x0, cfg)).collect();
    let (best, _) = runs
        .iter()
        .enumerate()
        .min_by(|(ia, a), (ib, b)| {
            let fa = *a.1.objectives.last().unwrap();
            let fb = *b.1.objectives.last().unwrap();
            fa.total_cmp(&fb).then(ia.cmp(ib))
        })
        .expect("at least one restart");
    let x = &runs[best].0;
    let objective = *runs[best].1.objectives.last().unwrap();
    let model = problem.unpack(x, &first.bank)?;
    Ok(TrainOutcome {
        model,
        objective,
        best_restart: best,
        restarts: runs.into_iter().map(|(_, t)| t).collect(),
    })
}

pub fn train_reflection(feats: &[ExperienceFeatures], cfg: &TrainConfig) -> Result<ReflectionModel> {
    train_reflection_traced(feats, cfg).map(|o| o.model)
}

/// Replaces every training target with `1 / l_hat` under `corr`.
pub fn apply_correction(feats: &[ExperienceFeatures], corr: &CorrectionConfig) -> Result<Vec<ExperienceFeatures>> {
    feats
        .iter()
        .map(|f| {
            let mut out = f.clone();
            out.inverse_ratio_target = 1.0 / correct_ratio(f.ratio, f.n_labeled, corr)?;
            Ok(out)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct CorrectedFit {
    pub outcome: TrainOutcome,
    pub b_corr: f64,
}

/// Grid search of the correction parameter over `{0, 1, ..., 50}`, keeping
/// the fit with the lowest training objective. When `corr` is disabled this
/// is a plain training run with `b_corr = 0`.
pub fn fit_correction(
    feats: &[ExperienceFeatures],
    cfg: &TrainConfig,
    corr: &CorrectionConfig,
) -> Result<CorrectedFit> {
    if !corr.enabled {
        return Ok(CorrectedFit {
            outcome: train_reflection_traced(feats, cfg)?,
            b_corr: 0.0,
        });
    }
    let fits: Vec<(f64, TrainOutcome)> = (0..=CORRECTION_GRID_MAX)
        .into_par_iter()
        .map(|b| {
            let c = CorrectionConfig {
                b_corr: b as f64,
                ..corr.clone()
            };
            let adjusted = apply_correction(feats, &c)?;
            Ok((b as f64, train_reflection_traced(&adjusted, cfg)?))
        })
        .collect::<Result<_>>()?;
    let (b_corr, outcome) = fits
        .into_iter()
        .min_by(|a, b| a.1.objective.total_cmp(&b.1.objective).then(a.0.total_cmp(&b.0)))
        .expect("non-empty grid");
    Ok(CorrectedFit { outcome, b_corr })
}
