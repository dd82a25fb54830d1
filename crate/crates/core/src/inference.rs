//! Inference of the latent factor matrix for a new domain pair by minimising
//! the learned inverse ratio
//!
//! ```text
//! beta' d(W) + lambda beta' Q(W) beta + mu / (beta' tau(W)) + gamma2 ||W||_F^2
//! ```
//!
//! with Polak-Ribiere conjugate gradient. Kernel bandwidths, the
//! covariance row pairing and the target scatter matrices are frozen when the
//! problem is built, so the objective is a fixed smooth function of `W`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::factors::{joint_pca, random_proj, FactorMatrix};
use crate::kernels::{mean_energy, pairwise_sq_dists, KernelBank, DEFAULT_KERNEL_COUNT};
use crate::linalg::select_rows;
use crate::pipeline::Domain;
use crate::reflection::ReflectionModel;
use crate::stats::{scatter_matrices, trace_quadratic, Pairing, ScatterPair, TRACE_EPS};

const ARMIJO_C: f64 = 1e-4;
const BACKTRACK: f64 = 0.5;
const INITIAL_STEP: f64 = 1.0;
const MIN_STEP: f64 = 1e-20;

#[derive(Clone, Debug, PartialEq)]
pub struct InferConfig {
    pub gamma2: f64,
    pub u: usize,
    pub r: usize,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            gamma2: 1e-3,
            u: 10,
            r: crate::stats::DEFAULT_NEIGHBORS,
            max_iters: 100,
            grad_tol: 1e-6,
            restarts: 3,
            seed: 0,
        }
    }
}

impl InferConfig {
    fn validate(&self, m: usize) -> Result<()> {
        if self.u > m {
            return Err(Error::invalid(format!("latent dimension {} exceeds feature dimension {m}", self.u)));
        }
        if !(self.grad_tol > 0.0) {
            return Err(Error::invalid("grad_tol must be positive"));
        }
        if !(self.gamma2 >= 0.0) {
            return Err(Error::invalid("gamma2 must be non-negative"));
        }
        if self.restarts == 0 || self.max_iters == 0 {
            return Err(Error::invalid("restarts and max_iters must be positive"));
        }
        Ok(())
    }
}

/// Value of each objective term at one `W`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveTerms {
    /// `beta' d`
    pub mmd: f64,
    /// `beta' Q beta` (not yet multiplied by lambda)
    pub variance: f64,
    /// `beta' tau`
    pub discriminant: f64,
    /// `||W||_F^2`
    pub frobenius: f64,
}

/// Objective of one domain pair under a trained model with everything that
/// does not depend on `W` precomputed.
pub struct InferenceProblem<'a> {
    xs: &'a DMatrix<f64>,
    xt: &'a DMatrix<f64>,
    paired_s: DMatrix<f64>,
    paired_t: DMatrix<f64>,
    bank: KernelBank,
    scatter: Vec<ScatterPair>,
    beta: Vec<f64>,
    lambda: f64,
    mu: f64,
    gamma2: f64,
}

impl<'a> InferenceProblem<'a> {
    /// Freezes the bank at the mean cross energy of `anchor`'s embedding.
    pub fn new(
        source: &'a Domain,
        target: &'a Domain,
        model: &ReflectionModel,
        cfg: &InferConfig,
        anchor: &FactorMatrix,
    ) -> Result<Self> {
        check_shapes(source, target, anchor)?;
        let eta = mean_energy(&source.embed(anchor), &target.embed(anchor))?;
        let bank = model.bank.rescaled(eta)?;
        Self::with_bank(source, target, model, cfg, bank)
    }

    pub fn with_bank(
        source: &'a Domain,
        target: &'a Domain,
        model: &ReflectionModel,
        cfg: &InferConfig,
        bank: KernelBank,
    ) -> Result<Self> {
        if source.dim() != target.dim() {
            return Err(Error::shape("source and target feature dimensions differ"));
        }
        if !bank.same_grid(&model.bank) {
            return Err(Error::shape("bank grid differs from the model's"));
        }
        if source.rows() == 0 || target.rows() == 0 {
            return Err(Error::invalid("empty domain"));
        }
        cfg.validate(source.dim())?;
        let pairing = Pairing::new(source.rows(), target.rows(), cfg.seed);
        let scatter = scatter_matrices(target.features(), &bank, cfg.r)?;
        Ok(Self {
            xs: source.features(),
            xt: target.features(),
            paired_s: select_rows(source.features(), &pairing.source),
            paired_t: select_rows(target.features(), &pairing.target),
            bank,
            scatter,
            beta: model.beta.iter().cloned().collect(),
            lambda: model.lambda,
            mu: model.mu,
            gamma2: cfg.gamma2,
        })
    }

    pub fn bank(&self) -> &KernelBank {
        &self.bank
    }

    pub fn scatter(&self) -> &[ScatterPair] {
        &self.scatter
    }

    fn active(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.beta
            .iter()
            .zip(self.bank.bandwidths())
            .filter(|(b, _)| **b != 0.0)
            .map(|(b, d)| (*b, *d))
    }

    /// `sum_k beta_k K_k(d)` and `sum_k beta_k K_k(d) / delta_k` over a
    /// squared-distance matrix.
    fn combined(&self, d2: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut val = DMatrix::zeros(d2.nrows(), d2.ncols());
        let mut der = DMatrix::zeros(d2.nrows(), d2.ncols());
        for (b, delta) in self.active() {
            for ((v, g), d) in val.iter_mut().zip(der.iter_mut()).zip(d2.iter()) {
                let k = b * (-d / delta).exp();
                *v += k;
                *g += k / delta;
            }
        }
        (val, der)
    }

    fn check(&self, w: &DMatrix<f64>) -> Result<()> {
        if w.nrows() != self.xs.ncols() {
            return Err(Error::shape(format!(
                "factor matrix has {} rows, features have {}",
                w.nrows(),
                self.xs.ncols()
            )));
        }
        Ok(())
    }

    fn paired_h(&self, w: &DMatrix<f64>) -> Result<(DMatrix<f64>, [DMatrix<f64>; 3])> {
        let ps = &self.paired_s * w;
        let pt = &self.paired_t * w;
        let (hss, dss) = self.combined(&pairwise_sq_dists(&ps, &ps)?);
        let (htt, dtt) = self.combined(&pairwise_sq_dists(&pt, &pt)?);
        let (hst, dst) = self.combined(&pairwise_sq_dists(&ps, &pt)?);
        let g = hss + htt - hst * 2.0;
        Ok((g, [dss, dtt, dst]))
    }

    pub fn terms(&self, w: &DMatrix<f64>) -> Result<ObjectiveTerms> {
        self.check(w)?;
        let zs = self.xs * w;
        let zt = self.xt * w;
        let (ns, nt) = (zs.nrows() as f64, zt.nrows() as f64);
        let (kss, _) = self.combined(&pairwise_sq_dists(&zs, &zs)?);
        let (ktt, _) = self.combined(&pairwise_sq_dists(&zt, &zt)?);
        let (kst, _) = self.combined(&pairwise_sq_dists(&zs, &zt)?);
        let mmd = kss.sum() / (ns * ns) + ktt.sum() / (nt * nt) - 2.0 * kst.sum() / (ns * nt);

        let n = self.paired_s.nrows();
        let variance = if n < 2 {
            0.0
        } else {
            let (g, _) = self.paired_h(w)?;
            let mean = g.sum() / (n * n) as f64;
            g.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / ((n * n) as f64 - 1.0)
        };

        let discriminant = self
            .beta
            .iter()
            .zip(&self.scatter)
            .filter(|(b, _)| **b != 0.0)
            .map(|(b, sc)| b * trace_quadratic(&sc.nonlocal, w) / (trace_quadratic(&sc.local, w) + TRACE_EPS))
            .sum();

        Ok(ObjectiveTerms {
            mmd,
            variance,
            discriminant,
            frobenius: w.norm_squared(),
        })
    }

    pub fn combine(&self, t: &ObjectiveTerms) -> f64 {
        t.mmd + self.lambda * t.variance + self.mu / (t.discriminant + TRACE_EPS) + self.gamma2 * t.frobenius
    }

    pub fn objective(&self, w: &DMatrix<f64>) -> Result<f64> {
        let v = self.combine(&self.terms(w)?);
        if !v.is_finite() {
            return Err(Error::NonFinite("inference objective".into()));
        }
        Ok(v)
    }

    pub fn gradient(&self, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(w)?;
        let zs = self.xs * w;
        let zt = self.xt * w;
        let (ns, nt) = (zs.nrows() as f64, zt.nrows() as f64);
        let mut grad = DMatrix::zeros(w.nrows(), w.ncols());

        // MMD term.
        let (_, dss) = self.combined(&pairwise_sq_dists(&zs, &zs)?);
        let (_, dtt) = self.combined(&pairwise_sq_dists(&zt, &zt)?);
        let (_, dst) = self.combined(&pairwise_sq_dists(&zs, &zt)?);
        add_block(&mut grad, self.xs, &zs, self.xs, &zs, &(dss / (ns * ns)));
        add_block(&mut grad, self.xt, &zt, self.xt, &zt, &(dtt / (nt * nt)));
        add_block(&mut grad, self.xs, &zs, self.xt, &zt, &(dst * (-2.0 / (ns * nt))));

        // Variance term: d/dW sum (g - mean)^2 = 2 sum (g - mean) dg/dW.
        let n = self.paired_s.nrows();
        if n >= 2 && self.lambda != 0.0 {
            let (g, [dss, dtt, dst]) = self.paired_h(w)?;
            let mean = g.sum() / (n * n) as f64;
            let coef = g.map(|v| 2.0 * self.lambda * (v - mean) / ((n * n) as f64 - 1.0));
            let ps = &self.paired_s * w;
            let pt = &self.paired_t * w;
            add_block(&mut grad, &self.paired_s, &ps, &self.paired_s, &ps, &dss.component_mul(&coef));
            add_block(&mut grad, &self.paired_t, &pt, &self.paired_t, &pt, &dtt.component_mul(&coef));
            add_block(&mut grad, &self.paired_s, &ps, &self.paired_t, &pt, &(dst.component_mul(&coef) * -2.0));
        }

        // Discriminant term: -mu / T^2 * dT/dW.
        if self.mu != 0.0 {
            let mut total = 0.0;
            let mut d_total = DMatrix::zeros(w.nrows(), w.ncols());
            for (b, sc) in self.beta.iter().zip(&self.scatter).filter(|(b, _)| **b != 0.0) {
                let sn_w = &sc.nonlocal * w;
                let sl_w = &sc.local * w;
                let num = sn_w.component_mul(w).sum();
                let den = sl_w.component_mul(w).sum() + TRACE_EPS;
                total += b * num / den;
                d_total += (sn_w * (2.0 * den) - sl_w * (2.0 * num)) * (b / (den * den));
            }
            let t = total + TRACE_EPS;
            grad -= d_total * (self.mu / (t * t));
        }

        grad += w * (2.0 * self.gamma2);
        if !grad.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("inference gradient".into()));
        }
        Ok(grad)
    }
}

/// Adds the gradient of `sum_ab c_ab K(x_a W, y_b W)` where `omega_ab`
/// already holds `c_ab K_ab / delta` summed over kernels:
/// `-2 sum_ab omega_ab (x_a - y_b)(x_a - y_b)' W`.
fn add_block(
    grad: &mut DMatrix<f64>,
    x: &DMatrix<f64>,
    zx: &DMatrix<f64>,
    y: &DMatrix<f64>,
    zy: &DMatrix<f64>,
    omega: &DMatrix<f64>,
) {
    let row_sums = DMatrix::from_fn(omega.nrows(), 1, |i, _| omega.row(i).sum());
    let col_sums = DMatrix::from_fn(omega.ncols(), 1, |j, _| omega.column(j).sum());
    let mut left = zx.clone();
    for (i, mut row) in left.row_iter_mut().enumerate() {
        row *= row_sums[(i, 0)];
    }
    left -= omega * zy;
    let mut right = zy.clone();
    for (j, mut row) in right.row_iter_mut().enumerate() {
        row *= col_sums[(j, 0)];
    }
    right -= omega.transpose() * zx;
    *grad -= (x.transpose() * left + y.transpose() * right) * 2.0;
}

fn check_shapes(source: &Domain, target: &Domain, w: &FactorMatrix) -> Result<()> {
    if source.dim() != w.m() || target.dim() != w.m() {
        return Err(Error::shape(format!(
            "domains have {} and {} features, factor matrix has {} rows",
            source.dim(),
            target.dim(),
            w.m()
        )));
    }
    Ok(())
}

/// Objective at `w` with the bank frozen at `w` itself.
pub fn objective(
    w: &FactorMatrix,
    source: &Domain,
    target: &Domain,
    model: &ReflectionModel,
    cfg: &InferConfig,
) -> Result<f64> {
    InferenceProblem::new(source, target, model, cfg, w)?.objective(w.as_matrix())
}

/// Gradient at `w` with the bank frozen at `w` itself.
pub fn analytic_gradient(
    w: &FactorMatrix,
    source: &Domain,
    target: &Domain,
    model: &ReflectionModel,
    cfg: &InferConfig,
) -> Result<DMatrix<f64>> {
    InferenceProblem::new(source, target, model, cfg, w)?.gradient(w.as_matrix())
}

/// Maximum entrywise discrepancy between the analytic gradient and central
/// differences: relative where `|analytic| > 1e-8`, absolute elsewhere.
pub fn finite_diff_check(
    w: &FactorMatrix,
    source: &Domain,
    target: &Domain,
    model: &ReflectionModel,
    cfg: &InferConfig,
    step: f64,
) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let problem = InferenceProblem::new(source, target, model, cfg, w)?;
    let base = w.as_matrix();
    let grad = problem.gradient(base)?;
    let mut worst: f64 = 0.0;
    let mut probe = base.clone();
    for c in 0..base.ncols() {
        for r in 0..base.nrows() {
            let orig = probe[(r, c)];
            probe[(r, c)] = orig + step;
            let fp = problem.objective(&probe)?;
            probe[(r, c)] = orig - step;
            let fm = problem.objective(&probe)?;
            probe[(r, c)] = orig;
            let fd = (fp - fm) / (2.0 * step);
            let a = grad[(r, c)];
            let err = if a.abs() > 1e-8 { (a - fd).abs() / a.abs() } else { (a - fd).abs() };
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// One conjugate-gradient run.
#[derive(Clone, Debug)]
pub struct CgTrace {
    /// Objective after every accepted step, starting with the initial value.
    pub objectives: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Clone, Debug)]
pub struct InferOutcome {
    pub w: FactorMatrix,
    pub objective: f64,
    pub best_restart: usize,
    pub initial_objectives: Vec<f64>,
    pub traces: Vec<CgTrace>,
    pub bank: KernelBank,
}

/// Polak-Ribiere (PR+) nonlinear conjugate gradient with Armijo
/// backtracking. The direction resets to steepest descent every
/// `restart_every` iterations and whenever it fails to descend.
pub fn minimize_cg(
    problem: &InferenceProblem<'_>,
    w0: &DMatrix<f64>,
    max_iters: usize,
    grad_tol: f64,
    restart_every: usize,
) -> Result<(DMatrix<f64>, CgTrace)> {
    let mut w = w0.clone();
    let mut f = problem.objective(&w)?;
    let mut g = problem.gradient(&w)?;
    let mut d = -&g;
    let mut objectives = vec![f];
    let mut iterations = 0;
    let mut converged = false;
    let mut since_reset = 0;
    while iterations < max_iters {
        let gnorm2 = g.norm_squared();
        if gnorm2.sqrt() <= grad_tol {
            converged = true;
            break;
        }
        let mut slope = g.dot(&d);
        if !(slope < 0.0) {
            d = -&g;
            slope = -gnorm2;
            since_reset = 0;
        }
        let mut step = INITIAL_STEP;
        let mut accepted = None;
        loop {
            let cand = &w + &d * step;
            // Non-finite trial points count as insufficient decrease.
            if let Ok(fc) = problem.objective(&cand) {
                if fc <= f + ARMIJO_C * step * slope {
                    accepted = Some((cand, fc));
                    break;
                }
            }
            step *= BACKTRACK;
            if step < MIN_STEP {
                break;
            }
        }
        let Some((w_new, f_new)) = accepted else {
            if since_reset == 0 {
                break;
            }
            d = -&g;
            since_reset = 0;
            continue;
        };
        let g_new = problem.gradient(&w_new)?;
        iterations += 1;
        since_reset += 1;
        let pr = (g_new.dot(&(&g_new - &g)) / gnorm2).max(0.0);
        if restart_every > 0 && since_reset >= restart_every {
            d = -&g_new;
            since_reset = 0;
        } else {
            d = -&g_new + d * pr;
        }
        let stalled = f_new == f;
        w = w_new;
        f = f_new;
        g = g_new;
        objectives.push(f);
        if stalled {
            break;
        }
    }
    Ok((w, CgTrace { objectives, iterations, converged }))
}

/// Initial factor matrices: joint PCA, then `restarts - 1` seeded random
/// projections.
pub fn initial_points(source: &Domain, target: &Domain, cfg: &InferConfig) -> Result<Vec<FactorMatrix>> {
    let mut inits = vec![joint_pca(source.features(), target.features(), cfg.u)?];
    for i in 1..cfg.restarts {
        inits.push(random_proj(source.dim(), cfg.u, cfg.seed.wrapping_add(i as u64))?);
    }
    Ok(inits)
}

pub fn infer_w_traced(
    source: &Domain,
    target: &Domain,
    model: &ReflectionModel,
    cfg: &InferConfig,
) -> Result<InferOutcome> {
    if source.dim() != target.dim() {
        return Err(Error::shape("source and target feature dimensions differ"));
    }
    cfg.validate(source.dim())?;
    let inits = initial_points(source, target, cfg)?;
    let problem = InferenceProblem::new(source, target, model, cfg, &inits[0])?;
    let restart_every = source.dim() * cfg.u;
    let runs: Vec<(f64, DMatrix<f64>, CgTrace)> = inits
        .par_iter()
        .map(|w0| {
            let f0 = problem.objective(w0.as_matrix())?;
            let (w, trace) = minimize_cg(&problem, w0.as_matrix(), cfg.max_iters, cfg.grad_tol, restart_every)?;
            Ok((f0, w, trace))
        })
        .collect::<Result<_>>()?;
    let best = (0..runs.len())
        .min_by(|&a, &b| {
            let fa = runs[a].2.objectives.last().unwrap();
            let fb = runs[b].2.objectives.last().unwrap();
            fa.total_cmp(fb).then(a.cmp(&b))
        })
        .expect("at least one restart");
    let objective = *runs[best].2.objectives.last().unwrap();
    let w = FactorMatrix::new(runs[best].1.clone())?;
    Ok(InferOutcome {
        w,
        objective,
        best_restart: best,
        initial_objectives: runs.iter().map(|r| r.0).collect(),
        traces: runs.into_iter().map(|r| r.2).collect(),
        bank: problem.bank().clone(),
    })
}

pub fn infer_w(source: &Domain, target: &Domain, model: &ReflectionModel, cfg: &InferConfig) -> Result<FactorMatrix> {
    infer_w_traced(source, target, model, cfg).map(|o| o.w)
}

/// A seeded random problem for checking the gradient: `m` in `[4, 20]`,
/// `u` in `[1, 5]`, 6 to 30 rows per domain, every `beta_k`, `lambda` and
/// `mu` strictly positive.
pub struct GradientInstance {
    pub source: Domain,
    pub target: Domain,
    pub w: FactorMatrix,
    pub model: ReflectionModel,
    pub cfg: InferConfig,
}

impl GradientInstance {
    pub fn random(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = rng.random_range(4..=20);
        let u = rng.random_range(1..=5usize.min(m));
        let (ns, nt) = (rng.random_range(6..=30), rng.random_range(6..=30));
        let mut uniform = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
        let source = Domain::new(uniform(ns, m), None, "source")?;
        let target = Domain::new(uniform(nt, m), None, "target")?;
        let w = FactorMatrix::new(uniform(m, u))?;
        let beta = DVector::from_fn(DEFAULT_KERNEL_COUNT, |_, _| rng.random_range(0.05..1.0));
        let lambda = rng.random_range(0.1..1.0);
        let mu = rng.random_range(0.1..1.0);
        let model = ReflectionModel::new(beta, lambda, mu, 0.0, KernelBank::from_energy(1.0)?)?;
        let cfg = InferConfig {
            u,
            r: 3,
            seed,
            ..Default::default()
        };
        Ok(Self { source, target, w, model, cfg })
    }

    pub fn max_error(&self, step: f64) -> Result<f64> {
        finite_diff_check(&self.w, &self.source, &self.target, &self.model, &self.cfg, step)
    }
}
