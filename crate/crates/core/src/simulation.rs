//! Seeded Monte Carlo study of selection and estimation accuracy.
//!
//! Each replicate draws `n` clusters of size `m` from
//! `Y_ij = βᵀX_ij + η1(Z_ij1) + η2(Z_ij2) + ε_ij` with `β = (3, 1.5, 0, 0, 2, 0, 0, 0)`,
//! `η1(z) = sin 2π(z − 0.5)`, `η2(z) = z − 0.5 + η1(z)` and exchangeable errors. Replicate
//! `r` uses a ChaCha8 generator seeded with the study seed on stream `r`, so results do
//! not depend on how replicates are scheduled across threads.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{estimate_alpha, CovarianceKind, WorkingCovarianceSpec};
use crate::data::{Cluster, ClusteredDataset};
use crate::error::{Error, Result};
use crate::estimator::Model;
use crate::penalized::{default_grid, select_lambda, SolverOptions};
use crate::penalty::{PenaltyKind, PenaltySpec};
use crate::spline::{unit_grid, SplineSpace};

pub const BETA0: [f64; 8] = [3.0, 1.5, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0];
/// Indices of the nonzero coefficients of [`BETA0`].
pub const TRUE_ACTIVE: [usize; 3] = [0, 1, 4];
const MIN_ACCEPTANCE: f64 = 1e-4;
const ISE_POINTS: usize = 401;

pub fn eta1(z: f64) -> f64 {
    (2.0 * std::f64::consts::PI * (z - 0.5)).sin()
}

pub fn eta2(z: f64) -> f64 {
    z - 0.5 + eta1(z)
}

/// True curve `l` (0-based).
pub fn eta(l: usize, z: f64) -> f64 {
    if l == 0 {
        eta1(z)
    } else {
        eta2(z)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Number of clusters.
    pub n: usize,
    /// Observations per cluster.
    pub m: usize,
    pub replicates: usize,
    pub seed: u64,
    pub working: CovarianceKind,
    pub penalty: PenaltyKind,
    /// Within-cluster error correlation.
    pub error_alpha: f64,
    /// Standard deviation of X1..X6 and of the noise in X7.
    pub x_sd: f64,
    /// Mean, standard deviation and correlation of the untruncated Z pair.
    pub z_mean: f64,
    pub z_sd: f64,
    pub z_corr: f64,
    pub degree: usize,
    pub interior_knots: usize,
    /// Working correlation parameter; `None` estimates it from a working-independence fit.
    pub working_alpha: Option<f64>,
    pub grid: Vec<f64>,
    pub solver: SolverOptions,
}

impl SimConfig {
    pub fn new(n: usize, working: CovarianceKind, penalty: PenaltyKind) -> Self {
        Self {
            n,
            m: 3,
            replicates: 100,
            seed: 20_100_101,
            working,
            penalty,
            error_alpha: 0.9,
            x_sd: 0.25,
            z_mean: 0.0,
            z_sd: 0.5,
            z_corr: 0.9,
            degree: 3,
            interior_knots: 4,
            working_alpha: None,
            grid: default_grid(),
            solver: SolverOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 10 {
            return Err(Error::Simulation(format!("need at least 10 clusters, got {}", self.n)));
        }
        if self.replicates < 1 || self.m < 1 {
            return Err(Error::Simulation("replicates and cluster size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.error_alpha) {
            return Err(Error::Simulation(format!("error correlation {} outside [0, 1)", self.error_alpha)));
        }
        if !(self.x_sd > 0.0 && self.z_sd > 0.0 && self.z_corr.abs() < 1.0) {
            return Err(Error::Simulation("invalid covariate distribution".into()));
        }
        if self.working == CovarianceKind::Rsm {
            return Err(Error::Simulation("the study design has no observation times".into()));
        }
        Ok(())
    }

    pub fn spaces(&self) -> Result<Vec<SplineSpace>> {
        let s = SplineSpace::new(self.degree, self.interior_knots)?;
        Ok(vec![s.clone(), s])
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Draws one dataset. `Z` pairs are rejection-sampled into the unit square.
pub fn generate_replicate<R: Rng + ?Sized>(config: &SimConfig, rng: &mut R) -> Result<ClusteredDataset> {
    let (m, d1) = (config.m, BETA0.len());
    let rho_c = (1.0 - config.z_corr * config.z_corr).sqrt();
    let mut clusters = Vec::with_capacity(config.n);
    for i in 0..config.n {
        let mut z = DMatrix::zeros(m, 2);
        for j in 0..m {
            let mut attempts = 0u64;
            loop {
                attempts += 1;
                let g1 = normal(rng);
                let g2 = config.z_corr * g1 + rho_c * normal(rng);
                let (z1, z2) = (config.z_mean + config.z_sd * g1, config.z_mean + config.z_sd * g2);
                if (0.0..=1.0).contains(&z1) && (0.0..=1.0).contains(&z2) {
                    z[(j, 0)] = z1;
                    z[(j, 1)] = z2;
                    break;
                }
                if attempts >= 1_000_000 && (1.0 / attempts as f64) < MIN_ACCEPTANCE {
                    return Err(Error::Simulation("Z rejection sampler acceptance rate too low".into()));
                }
            }
        }
        let mut x = DMatrix::zeros(m, d1);
        for j in 0..m {
            for k in 0..6 {
                x[(j, k)] = config.x_sd * normal(rng);
            }
            x[(j, 6)] = 3.0 * (1.0 - 2.0 * z[(j, 0)]) * (1.0 - 2.0 * z[(j, 1)]) + config.x_sd * normal(rng);
            x[(j, 7)] = if rng.random_bool(0.5) { 0.5 } else { -0.5 };
        }
        let shared = config.error_alpha.sqrt() * normal(rng);
        let own = (1.0 - config.error_alpha).sqrt();
        let beta = DVector::from_row_slice(&BETA0);
        let mut y = &x * &beta;
        for j in 0..m {
            y[j] += eta1(z[(j, 0)]) + eta2(z[(j, 1)]) + shared + own * normal(rng);
        }
        clusters.push(Cluster::new(format!("{}", i + 1), y, x, z, None)?);
    }
    ClusteredDataset::new(clusters)
}

/// Generator for replicate `index` of a study seeded with `seed`.
pub fn replicate_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Pooled second-moment matrix of the centered covariates.
pub fn covariate_moments(dataset: &ClusteredDataset) -> DMatrix<f64> {
    let x = dataset.stacked_x();
    let n = x.nrows() as f64;
    let mut centered = x.clone();
    for mut col in centered.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    centered.transpose() * &centered / n
}

/// `ME = (β̂ − β₀)ᵀ M̂ (β̂ − β₀)`.
pub fn model_error(beta_hat: &DVector<f64>, beta0: &DVector<f64>, moments: &DMatrix<f64>) -> f64 {
    let d = beta_hat - beta0;
    d.dot(&(moments * &d))
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = v.len() / 2;
    if v.len() % 2 == 1 {
        v[h]
    } else {
        0.5 * (v[h - 1] + v[h])
    }
}

/// Median absolute deviation from the median, divided by 0.6745.
pub fn scaled_mad(values: &[f64]) -> f64 {
    let med = median(values);
    let dev: Vec<f64> = values.iter().map(|v| (v - med).abs()).collect();
    median(&dev) / 0.6745
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdSummary {
    /// Coefficient index (0-based).
    pub coef: usize,
    /// Scaled MAD of the estimates.
    pub sd: f64,
    /// Median of the estimated standard errors.
    pub sd_m: f64,
    /// Scaled MAD of the estimated standard errors.
    pub sd_mad: f64,
}

pub fn sd_metrics(coef: usize, estimates: &[f64], ses: &[f64]) -> SdSummary {
    SdSummary { coef, sd: scaled_mad(estimates), sd_m: median(ses), sd_mad: scaled_mad(ses) }
}

/// Everything kept from one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub index: usize,
    pub working_alpha: f64,
    pub beta_full: Vec<f64>,
    pub se_full: Vec<f64>,
    pub beta_pen: Vec<f64>,
    pub se_pen: Vec<f64>,
    pub active_set: Vec<usize>,
    pub beta_oracle: Vec<f64>,
    pub se_oracle: Vec<f64>,
    pub me_full: f64,
    pub me_pen: f64,
    pub me_oracle: f64,
    /// Integrated squared error of each centered curve from the unpenalized fit.
    pub eta_ise: Vec<f64>,
    pub lambda: f64,
    pub iterations: usize,
}

fn working_spec(config: &SimConfig, dataset: &ClusteredDataset, spaces: &[SplineSpace]) -> Result<WorkingCovarianceSpec> {
    let alpha = match (config.working, config.working_alpha) {
        (CovarianceKind::Wi, _) => return Ok(WorkingCovarianceSpec::independence()),
        (_, Some(a)) => a,
        (kind, None) => {
            let pilot = Model::new(dataset, spaces, &WorkingCovarianceSpec::independence())?;
            estimate_alpha(kind, &pilot.fit.residuals)
        }
    };
    Ok(match config.working {
        CovarianceKind::Ar1 => WorkingCovarianceSpec::ar1(alpha),
        _ => WorkingCovarianceSpec::exchangeable(alpha),
    })
}

/// Integrated squared error on [0, 1] between a fitted centered curve and the truth,
/// both centered over the observed `z` values.
fn curve_ise(model: &Model, l: usize) -> Result<f64> {
    let observed = model.dataset().stacked_z_column(l);
    let shift = observed.iter().map(|z| eta(l, *z)).sum::<f64>() / observed.len() as f64;
    let curve = &model.fit.curves[l];
    let grid = unit_grid(ISE_POINTS);
    let sq = grid
        .iter()
        .map(|z| Ok((curve.eval(*z)? - (eta(l, *z) - shift)).powi(2)))
        .collect::<Result<Vec<f64>>>()?;
    let h = 1.0 / (ISE_POINTS - 1) as f64;
    Ok(h * (sq.iter().sum::<f64>() - 0.5 * (sq[0] + sq[sq.len() - 1])))
}

pub fn run_replicate(config: &SimConfig, index: usize) -> Result<ReplicateOutcome> {
    let mut rng = replicate_rng(config.seed, index);
    let dataset = generate_replicate(config, &mut rng)?;
    let spaces = config.spaces()?;
    let spec = working_spec(config, &dataset, &spaces)?;
    let model = Model::new(&dataset, &spaces, &spec)?;
    let penalty = PenaltySpec::new(config.penalty, vec![0.0; BETA0.len()]);
    let (pen, _) = select_lambda(&model, &penalty, &config.grid, &config.solver)?;

    let oracle = Model::new(&dataset.select_x(&TRUE_ACTIVE), &spaces, &spec)?;
    let mut beta_oracle = vec![0.0; BETA0.len()];
    let mut se_oracle = vec![0.0; BETA0.len()];
    for (r, &k) in TRUE_ACTIVE.iter().enumerate() {
        beta_oracle[k] = oracle.fit.beta_hat[r];
        se_oracle[k] = oracle.fit.se[r];
    }

    let moments = covariate_moments(&dataset);
    let beta0 = DVector::from_row_slice(&BETA0);
    let me = |b: &DVector<f64>| model_error(b, &beta0, &moments);
    Ok(ReplicateOutcome {
        index,
        working_alpha: spec.alpha,
        me_full: me(&model.fit.beta_hat),
        me_pen: me(&pen.beta_p),
        me_oracle: me(&DVector::from_row_slice(&beta_oracle)),
        beta_full: model.fit.beta_hat.iter().copied().collect(),
        se_full: model.fit.se.iter().copied().collect(),
        beta_pen: pen.beta_p.iter().copied().collect(),
        se_pen: pen.se_p.iter().copied().collect(),
        active_set: pen.active_set.clone(),
        beta_oracle,
        se_oracle,
        eta_ise: (0..2).map(|l| curve_ise(&model, l)).collect::<Result<_>>()?,
        lambda: pen.lambda_scalar,
        iterations: pen.iterations,
    })
}

/// Runs all replicates in parallel; entry `r` is replicate `r`.
pub fn run_replicates(config: &SimConfig) -> Result<Vec<Result<ReplicateOutcome>>> {
    config.validate()?;
    Ok((0..config.replicates).into_par_iter().map(|r| run_replicate(config, r)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    pub n: usize,
    pub covariance: CovarianceKind,
    pub penalty: PenaltyKind,
    pub replicates: usize,
    /// Replicates that failed (no usable penalized fit or a numerical error).
    pub excluded: usize,
    /// Mean number of true zeros estimated as zero.
    pub c: f64,
    /// Mean number of true nonzeros estimated as zero.
    pub i: f64,
    /// 100 × median of ME(penalized) / ME(unpenalized).
    pub mrme: f64,
    /// `sqrt(mean ‖β̂ − β₀‖²)` over replicates.
    pub rmse: f64,
    pub oracle_mrme: f64,
    pub oracle_rmse: f64,
    pub full_rmse: f64,
    /// Fraction of replicates selecting exactly the true nonzero set.
    pub exact_rate: f64,
    /// Fraction of replicates with no true nonzero set to zero.
    pub no_false_zero_rate: f64,
    pub sd_table: Vec<SdSummary>,
    pub oracle_sd_table: Vec<SdSummary>,
    /// Coverage of unpenalized 95% sandwich intervals for the nonzero coefficients.
    pub coverage: Vec<f64>,
    /// Mean integrated squared error of each centered curve.
    pub eta_mise: Vec<f64>,
    pub median_lambda: f64,
    pub mean_iterations: f64,
}

pub fn summarize(config: &SimConfig, outcomes: &[Result<ReplicateOutcome>]) -> Result<SimMetrics> {
    let ok: Vec<&ReplicateOutcome> = outcomes.iter().filter_map(|o| o.as_ref().ok()).collect();
    for (r, o) in outcomes.iter().enumerate() {
        if let Err(e) = o {
            log::warn!("replicate {r} excluded: {e}");
        }
    }
    if ok.is_empty() {
        return Err(Error::Simulation("every replicate failed".into()));
    }
    let reps = ok.len() as f64;
    let mean = |f: &dyn Fn(&ReplicateOutcome) -> f64| ok.iter().map(|o| f(o)).sum::<f64>() / reps;
    let zeros: Vec<usize> = (0..BETA0.len()).filter(|k| !TRUE_ACTIVE.contains(k)).collect();
    let rmse_of = |f: &dyn Fn(&ReplicateOutcome) -> &[f64]| {
        mean(&|o| f(o).iter().zip(BETA0).map(|(b, t)| (b - t).powi(2)).sum::<f64>()).sqrt()
    };
    let table = |est: &dyn Fn(&ReplicateOutcome) -> &[f64], se: &dyn Fn(&ReplicateOutcome) -> &[f64]| {
        TRUE_ACTIVE
            .iter()
            .map(|&k| {
                let e: Vec<f64> = ok.iter().map(|o| est(o)[k]).collect();
                let s: Vec<f64> = ok.iter().map(|o| se(o)[k]).collect();
                sd_metrics(k, &e, &s)
            })
            .collect()
    };
    let ratios = |f: &dyn Fn(&ReplicateOutcome) -> f64| {
        100.0 * median(&ok.iter().map(|o| f(o) / o.me_full).collect::<Vec<_>>())
    };
    Ok(SimMetrics {
        n: config.n,
        covariance: config.working,
        penalty: config.penalty,
        replicates: config.replicates,
        excluded: outcomes.len() - ok.len(),
        c: mean(&|o| zeros.iter().filter(|&&k| o.beta_pen[k] == 0.0).count() as f64),
        i: mean(&|o| TRUE_ACTIVE.iter().filter(|&&k| o.beta_pen[k] == 0.0).count() as f64),
        mrme: ratios(&|o| o.me_pen),
        rmse: rmse_of(&|o| &o.beta_pen),
        oracle_mrme: ratios(&|o| o.me_oracle),
        oracle_rmse: rmse_of(&|o| &o.beta_oracle),
        full_rmse: rmse_of(&|o| &o.beta_full),
        exact_rate: mean(&|o| f64::from(u8::from(o.active_set == TRUE_ACTIVE))),
        no_false_zero_rate: mean(&|o| f64::from(u8::from(TRUE_ACTIVE.iter().all(|&k| o.beta_pen[k] != 0.0)))),
        sd_table: table(&|o| &o.beta_pen, &|o| &o.se_pen),
        oracle_sd_table: table(&|o| &o.beta_oracle, &|o| &o.se_oracle),
        coverage: TRUE_ACTIVE
            .iter()
            .map(|&k| mean(&|o| f64::from(u8::from((o.beta_full[k] - BETA0[k]).abs() <= 1.959_963_984_540_054 * o.se_full[k]))))
            .collect(),
        eta_mise: (0..2).map(|l| mean(&|o| o.eta_ise[l])).collect(),
        median_lambda: median(&ok.iter().map(|o| o.lambda).collect::<Vec<_>>()),
        mean_iterations: mean(&|o| o.iterations as f64),
    })
}

pub fn run_study(config: &SimConfig) -> Result<SimMetrics> {
    let outcomes = run_replicates(config)?;
    summarize(config, &outcomes)
}

/// One row of the selection table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub n: usize,
    pub penalty: String,
    pub covariance: String,
    pub c: f64,
    pub i: f64,
    pub mrme: f64,
    pub rmse: f64,
}

/// Penalized row, plus the oracle row when `with_oracle` is set.
pub fn table1_rows(metrics: &SimMetrics, with_oracle: bool) -> Vec<Table1Row> {
    let mut rows = vec![Table1Row {
        n: metrics.n,
        penalty: metrics.penalty.name().to_string(),
        covariance: metrics.covariance.name().to_string(),
        c: metrics.c,
        i: metrics.i,
        mrme: metrics.mrme,
        rmse: metrics.rmse,
    }];
    if with_oracle {
        rows.push(Table1Row {
            n: metrics.n,
            penalty: "oracle".into(),
            covariance: metrics.covariance.name().to_string(),
            c: (BETA0.len() - TRUE_ACTIVE.len()) as f64,
            i: 0.0,
            mrme: metrics.oracle_mrme,
            rmse: metrics.oracle_rmse,
        });
    }
    rows
}

/// One row of the standard-error table: (SD, SD_m, SD_mad) for each nonzero coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table2Row {
    pub n: usize,
    pub penalty: String,
    pub covariance: String,
    pub cells: Vec<SdSummary>,
}

pub fn table2_rows(metrics: &SimMetrics, with_oracle: bool) -> Vec<Table2Row> {
    let mut rows = vec![Table2Row {
        n: metrics.n,
        penalty: metrics.penalty.name().to_string(),
        covariance: metrics.covariance.name().to_string(),
        cells: metrics.sd_table.clone(),
    }];
    if with_oracle {
        rows.push(Table2Row {
            n: metrics.n,
            penalty: "oracle".into(),
            covariance: metrics.covariance.name().to_string(),
            cells: metrics.oracle_sd_table.clone(),
        });
    }
    rows
}
