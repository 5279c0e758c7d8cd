//! Penalized estimation of β by iterated local quadratic approximation (LQA), with
//! sandwich standard errors, effective number of parameters and BIC tuning.
//!
//! The objective is `Q_P(β) = Q(β) + n_T Σ_k p_{λ_k}(|β_k|)` where `Q` is the
//! spline-profiled weighted least-squares criterion. Each LQA step solves
//! `[Q̈ + n_T Σ_λ(β)] β⁺ = X̂ᵀ V⁻¹ Ỹ` on the current active set.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{finish_sandwich, Model, ProfiledSystem};
use crate::linalg;
use crate::penalty::{lqa_matrix, PenaltySpec};

/// BIC reported when the weighted residual sum is zero.
pub const BIC_FLOOR: f64 = -1e300;
/// Two BIC values closer than this are treated as tied.
pub const BIC_TIE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Stop when the sup-norm change between iterates falls below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Coefficients below `zero_tol_rel · max(1, ‖β̂‖_∞)` in magnitude are set to 0.
    pub zero_tol_rel: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 100, zero_tol_rel: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PenalizedFit {
    pub beta_p: DVector<f64>,
    /// Indices of coefficients not set to zero, ascending.
    pub active_set: Vec<usize>,
    /// Sandwich standard errors; 0 off the active set.
    pub se_p: DVector<f64>,
    /// Sandwich covariance of `β̂^P`, zero outside the active block.
    pub covariance: DMatrix<f64>,
    pub gamma_p: DVector<f64>,
    pub lambda_scalar: f64,
    pub lambda_vector: Vec<f64>,
    pub bic: f64,
    pub effective_params: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `Q_P` at the starting value and after every step.
    pub objective_path: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningRecord {
    pub lambda: f64,
    pub active_size: usize,
    pub bic: f64,
    pub effective_params: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningPath {
    pub grid: Vec<f64>,
    pub records: Vec<TuningRecord>,
    /// Index of the chosen grid point.
    pub selected: usize,
}

/// `Q_P(β) = Q(β) + n_T P(β)`.
pub fn penalized_objective(system: &ProfiledSystem, penalty: &PenaltySpec, beta: &DVector<f64>) -> f64 {
    system.objective(beta) + system.n_obs as f64 * penalty.total(beta)
}

/// One LQA update restricted to `active`; coefficients outside it stay 0.
pub fn lqa_step(
    system: &ProfiledSystem,
    beta: &DVector<f64>,
    active: &[usize],
    penalty: &PenaltySpec,
) -> Result<DVector<f64>> {
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::Numeric("non-finite LQA iterate".into()));
    }
    let mut next = DVector::zeros(beta.len());
    if active.is_empty() {
        return Ok(next);
    }
    let lhs = active_system(system, beta, active, penalty);
    let rhs = linalg::select_rows_vec(&system.score, active);
    let sol = linalg::spd_solve_vec(&lhs, &rhs).ok_or_else(|| Error::Numeric("singular LQA system".into()))?;
    for (r, &k) in active.iter().enumerate() {
        next[k] = sol[r];
    }
    Ok(next)
}

/// `Q̈_A + n_T Σ_λ(β)_A`.
fn active_system(system: &ProfiledSystem, beta: &DVector<f64>, active: &[usize], penalty: &PenaltySpec) -> DMatrix<f64> {
    let sigma = lqa_matrix(beta, penalty);
    let mut lhs = linalg::select(&system.hessian, active, active);
    let n_t = system.n_obs as f64;
    for (r, &k) in active.iter().enumerate() {
        lhs[(r, r)] += n_t * sigma[k];
    }
    lhs
}

/// Iterates LQA from the unpenalized estimate with per-coefficient `penalty.lambdas`.
pub fn solve_penalized(model: &Model, penalty: &PenaltySpec, options: &SolverOptions) -> Result<PenalizedFit> {
    let system = &model.profiled;
    let d1 = model.dataset().d1();
    penalty.validate(d1)?;
    let start = &model.fit.beta_hat;
    let zero_tol = options.zero_tol_rel * start.amax().max(1.0);

    let mut beta = start.clone();
    let mut active: Vec<usize> = (0..d1).collect();
    let mut current = penalized_objective(system, penalty, &beta);
    let mut objective_path = vec![current];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < options.max_iter {
        iterations += 1;
        let mut next = lqa_step(system, &beta, &active, penalty)?;
        let next_active: Vec<usize> = active
            .iter()
            .copied()
            .filter(|&k| {
                let keep = penalty.lambda(k) == 0.0 || next[k].abs() >= zero_tol;
                if !keep {
                    next[k] = 0.0;
                }
                keep
            })
            .collect();
        let change = (&next - &beta).amax();
        if !change.is_finite() {
            break;
        }
        let value = penalized_objective(system, penalty, &next);
        // With ε > 0 the quadratic surrogate no longer majorizes the penalty, so near the
        // optimum a step can raise Q_P slightly. Such a step is not taken.
        if value > current {
            log::debug!("LQA step {iterations} would raise Q_P by {:e}; stopping", value - current);
            converged = true;
            break;
        }
        beta = next;
        active = next_active;
        current = value;
        objective_path.push(current);
        if change < options.tol {
            converged = true;
            break;
        }
    }

    let lambda_vector: Vec<f64> = (0..d1).map(|k| penalty.lambda(k)).collect();
    let mut fit = finish(model, penalty, beta, active)?;
    fit.lambda_vector = lambda_vector;
    fit.iterations = iterations;
    fit.converged = converged && fit.bic.is_finite();
    fit.objective_path = objective_path;
    Ok(fit)
}

fn finish(model: &Model, penalty: &PenaltySpec, beta: DVector<f64>, active: Vec<usize>) -> Result<PenalizedFit> {
    let system = &model.profiled;
    let d1 = beta.len();
    let residuals = system.residuals(&beta);
    let (covariance, effective_params) = penalized_covariance(system, &beta, &active, penalty, &residuals);
    let se_p = DVector::from_iterator(d1, (0..d1).map(|k| covariance[(k, k)].max(0.0).sqrt()));
    let bic = bic_score(model, &residuals, effective_params);
    Ok(PenalizedFit {
        gamma_p: model.gamma(&beta),
        beta_p: beta,
        active_set: active,
        se_p,
        covariance,
        lambda_scalar: f64::NAN,
        lambda_vector: Vec::new(),
        bic,
        effective_params,
        iterations: 0,
        converged: false,
        objective_path: Vec::new(),
    })
}

/// Sandwich covariance `{Q̈ + n_T Σ_λ}⁻¹ Côv(Q̇) {Q̈ + n_T Σ_λ}⁻¹` on the active set (embedded
/// in a d1 × d1 matrix) and the effective number of parameters `tr{[Q̈ + n_T Σ_λ]⁻¹ Q̈}`.
pub fn penalized_covariance(
    system: &ProfiledSystem,
    beta: &DVector<f64>,
    active: &[usize],
    penalty: &PenaltySpec,
    residuals: &[DVector<f64>],
) -> (DMatrix<f64>, f64) {
    let d1 = beta.len();
    let mut full = DMatrix::zeros(d1, d1);
    if active.is_empty() {
        return (full, 0.0);
    }
    let lhs = active_system(system, beta, active, penalty);
    let Some(inv) = linalg::spd_inverse(&lhs) else {
        return (full * f64::NAN, f64::NAN);
    };
    let meat = linalg::select(&system.meat(residuals), active, active);
    let (omega, _) = finish_sandwich(&inv, &meat, 1);
    for (r, &i) in active.iter().enumerate() {
        for (c, &j) in active.iter().enumerate() {
            full[(i, j)] = omega[(r, c)];
        }
    }
    let e = (inv * linalg::select(&system.hessian, active, active)).trace();
    (full, e)
}

/// Standard errors of a penalized fit; 0 for inactive coefficients.
pub fn penalized_se(model: &Model, fit: &PenalizedFit, penalty: &PenaltySpec) -> DVector<f64> {
    let residuals = model.profiled.residuals(&fit.beta_p);
    let (cov, _) = penalized_covariance(&model.profiled, &fit.beta_p, &fit.active_set, penalty, &residuals);
    DVector::from_iterator(cov.nrows(), cov.diagonal().iter().map(|v| v.max(0.0).sqrt()))
}

/// `e(λ) = tr{[Q̈ + n_T Σ_λ]⁻¹ Q̈}` on the active set.
pub fn effective_parameters(model: &Model, fit: &PenalizedFit, penalty: &PenaltySpec) -> f64 {
    let residuals = model.profiled.residuals(&fit.beta_p);
    penalized_covariance(&model.profiled, &fit.beta_p, &fit.active_set, penalty, &residuals).1
}

/// `log{ n_T⁻¹ Σ_i r_iᵀ R_i⁻¹ r_i } + log(n_T)/n_T · e`.
pub fn bic_score(model: &Model, residuals: &[DVector<f64>], effective: f64) -> f64 {
    let n_t = model.profiled.n_obs as f64;
    let rss: f64 = residuals.iter().enumerate().map(|(i, r)| r.dot(&(model.design.rinv(i) * r))).sum();
    if !(rss > 0.0) {
        if rss.is_nan() {
            return f64::NAN;
        }
        log::warn!("weighted residual sum is zero; BIC set to {BIC_FLOOR:e}");
        return BIC_FLOOR;
    }
    (rss / n_t).ln() + n_t.ln() / n_t * effective
}

/// `size` log-spaced points on `[min, max]`.
pub fn log_grid(min: f64, max: f64, size: usize) -> Result<Vec<f64>> {
    if !(min > 0.0 && max > min && min.is_finite() && max.is_finite()) || size < 2 {
        return Err(Error::Penalty(format!("invalid grid: [{min}, {max}] with {size} points")));
    }
    let (lo, hi) = (min.ln(), max.ln());
    Ok((0..size).map(|i| (lo + (hi - lo) * i as f64 / (size - 1) as f64).exp()).collect())
}

/// 40 log-spaced points on `[1e-3, 5]`.
pub fn default_grid() -> Vec<f64> {
    log_grid(1e-3, 5.0, 40).expect("fixed grid is valid")
}

/// BIC grid search with `λ_k = λ · SE(β̂_k)` from the unpenalized fit.
pub fn select_lambda(
    model: &Model,
    penalty: &PenaltySpec,
    grid: &[f64],
    options: &SolverOptions,
) -> Result<(PenalizedFit, TuningPath)> {
    let scales: Vec<f64> = model.fit.se.iter().copied().collect();
    select_lambda_with_scales(model, penalty, grid, &scales, options)
}

/// BIC grid search with `λ_k = λ · scales[k]`. The intercept (if any) is not penalized.
/// Among grid points whose BIC is within [`BIC_TIE`] of the minimum, the largest λ wins.
pub fn select_lambda_with_scales(
    model: &Model,
    penalty: &PenaltySpec,
    grid: &[f64],
    scales: &[f64],
    options: &SolverOptions,
) -> Result<(PenalizedFit, TuningPath)> {
    let d1 = model.dataset().d1();
    if scales.len() != d1 {
        return Err(Error::Penalty(format!("{} scales for {d1} coefficients", scales.len())));
    }
    if grid.is_empty() || grid.windows(2).any(|w| !(w[1] > w[0])) || grid.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
        return Err(Error::Penalty("grid must be nonempty, finite, nonnegative and strictly increasing".into()));
    }
    penalty.with_lambdas(vec![0.0; d1]).validate(d1)?;
    let fits: Vec<Option<PenalizedFit>> = grid
        .par_iter()
        .map(|&lambda| {
            let spec = penalty.with_lambdas(scales.iter().map(|s| lambda * s).collect());
            match solve_penalized(model, &spec, options) {
                Ok(mut fit) => {
                    fit.lambda_scalar = lambda;
                    Some(fit)
                }
                Err(e) => {
                    log::debug!("lambda {lambda}: {e}");
                    None
                }
            }
        })
        .collect();

    let records: Vec<TuningRecord> = grid
        .iter()
        .zip(&fits)
        .map(|(&lambda, fit)| match fit {
            Some(f) => TuningRecord {
                lambda,
                active_size: f.active_set.len(),
                bic: f.bic,
                effective_params: f.effective_params,
                converged: f.converged,
            },
            None => TuningRecord { lambda, active_size: 0, bic: f64::NAN, effective_params: f64::NAN, converged: false },
        })
        .collect();

    let usable = |r: &TuningRecord| r.converged && r.bic.is_finite();
    let best = records.iter().filter(|r| usable(r)).map(|r| r.bic).fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return Err(Error::Selection);
    }
    let selected = (0..grid.len())
        .rev()
        .find(|&i| usable(&records[i]) && records[i].bic <= best + BIC_TIE)
        .ok_or(Error::Selection)?;
    let fit = fits.into_iter().nth(selected).flatten().ok_or(Error::Selection)?;
    Ok((fit, TuningPath { grid: grid.to_vec(), records, selected }))
}
