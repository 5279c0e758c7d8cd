//! Working covariance structures V_i for clustered responses.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Cluster;
use crate::error::{Error, Result};
use crate::linalg;

/// Condition number above which a working covariance is refused.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceKind {
    /// Working independence.
    Wi,
    /// Exchangeable.
    Ex,
    /// First-order autoregressive in within-cluster order.
    Ar1,
    /// Random intercept plus serial correlation plus measurement error.
    Rsm,
}

impl CovarianceKind {
    pub fn name(self) -> &'static str {
        match self {
            CovarianceKind::Wi => "wi",
            CovarianceKind::Ex => "ex",
            CovarianceKind::Ar1 => "ar1",
            CovarianceKind::Rsm => "rsm",
        }
    }
}

impl std::str::FromStr for CovarianceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "wi" => Ok(Self::Wi),
            "ex" => Ok(Self::Ex),
            "ar1" => Ok(Self::Ar1),
            "rsm" => Ok(Self::Rsm),
            other => Err(Error::Usage(format!("unknown covariance '{other}' (wi|ex|ar1|rsm)"))),
        }
    }
}

/// Variance components of `tau2 I + nu2 J + omega2 H`, with `H(j, j') = exp(-alpha |t_j - t_j'|)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RsmParams {
    pub tau2: f64,
    pub nu2: f64,
    pub omega2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkingCovarianceSpec {
    pub kind: CovarianceKind,
    /// Correlation nuisance parameter (EX, AR1) or serial decay rate (RSM).
    pub alpha: f64,
    pub rsm: Option<RsmParams>,
}

impl WorkingCovarianceSpec {
    pub fn independence() -> Self {
        Self { kind: CovarianceKind::Wi, alpha: 0.0, rsm: None }
    }

    pub fn exchangeable(alpha: f64) -> Self {
        Self { kind: CovarianceKind::Ex, alpha, rsm: None }
    }

    pub fn ar1(alpha: f64) -> Self {
        Self { kind: CovarianceKind::Ar1, alpha, rsm: None }
    }

    pub fn rsm(params: RsmParams, alpha: f64) -> Self {
        Self { kind: CovarianceKind::Rsm, alpha, rsm: Some(params) }
    }

    /// Checks the parameter constraints for clusters of size up to `max_size`.
    pub fn validate(&self, max_size: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::CovarianceParameter(msg));
        let a = self.alpha;
        if !a.is_finite() {
            return bad(format!("alpha must be finite, got {a}"));
        }
        match self.kind {
            CovarianceKind::Wi => Ok(()),
            CovarianceKind::Ex => {
                let lower = if max_size > 1 { -1.0 / (max_size as f64 - 1.0) } else { f64::NEG_INFINITY };
                if a > lower && a < 1.0 {
                    Ok(())
                } else {
                    bad(format!("exchangeable alpha must lie in ({lower}, 1) for clusters of size {max_size}, got {a}"))
                }
            }
            CovarianceKind::Ar1 => {
                if a.abs() < 1.0 {
                    Ok(())
                } else {
                    bad(format!("AR(1) alpha must satisfy |alpha| < 1, got {a}"))
                }
            }
            CovarianceKind::Rsm => {
                let Some(p) = self.rsm else {
                    return bad("RSM needs variance components (tau2, nu2, omega2)".into());
                };
                if !(p.tau2 > 0.0) || !(p.nu2 >= 0.0) || !(p.omega2 >= 0.0) || !(a >= 0.0) {
                    return bad(format!(
                        "RSM needs tau2 > 0, nu2 >= 0, omega2 >= 0, alpha >= 0; got ({}, {}, {}, {a})",
                        p.tau2, p.nu2, p.omega2
                    ));
                }
                Ok(())
            }
        }
    }
}

/// Builds the m_i × m_i working covariance for one cluster with unit marginal variances
/// (RSM carries its own variance scale).
pub fn build_working_covariance(spec: &WorkingCovarianceSpec, cluster: &Cluster) -> Result<DMatrix<f64>> {
    let m = cluster.size();
    spec.validate(m)?;
    let a = spec.alpha;
    let v = match spec.kind {
        CovarianceKind::Wi => DMatrix::identity(m, m),
        CovarianceKind::Ex => DMatrix::from_fn(m, m, |i, j| if i == j { 1.0 } else { a }),
        CovarianceKind::Ar1 => DMatrix::from_fn(m, m, |i, j| a.powi(i.abs_diff(j) as i32)),
        CovarianceKind::Rsm => {
            let t = cluster.times.as_ref().ok_or(Error::MissingTimes)?;
            let p = spec.rsm.expect("validated");
            DMatrix::from_fn(m, m, |i, j| {
                let serial = p.omega2 * (-a * (t[i] - t[j]).abs()).exp();
                if i == j {
                    p.tau2 + p.nu2 + serial
                } else {
                    p.nu2 + serial
                }
            })
        }
    };
    if v.clone().cholesky().is_none() {
        return Err(Error::CovarianceParameter(format!(
            "{} working covariance is not positive definite for a cluster of size {m}",
            spec.kind.name()
        )));
    }
    Ok(v)
}

/// Rescales a working correlation by per-observation marginal variances: `A^{1/2} R A^{1/2}`.
pub fn with_marginal_variances(r: &DMatrix<f64>, variances: &[f64]) -> Result<DMatrix<f64>> {
    if variances.len() != r.nrows() || variances.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::CovarianceParameter("marginal variances must be positive, one per observation".into()));
    }
    let s: Vec<f64> = variances.iter().map(|v| v.sqrt()).collect();
    Ok(DMatrix::from_fn(r.nrows(), r.ncols(), |i, j| s[i] * r[(i, j)] * s[j]))
}

/// Inverts a symmetric positive-definite working covariance.
pub fn invert_covariance(v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let condition = linalg::condition_number(v);
    if !(condition <= MAX_CONDITION) {
        return Err(Error::IllConditioned { condition });
    }
    let chol = v.clone().cholesky().ok_or(Error::IllConditioned { condition })?;
    let mut inv = chol.inverse();
    linalg::symmetrize(&mut inv);
    Ok(inv)
}

/// Unit-diagonal correlation matrix `A^{-1/2} V A^{-1/2}` underlying a covariance.
pub fn working_correlation(v: &DMatrix<f64>) -> DMatrix<f64> {
    let s: Vec<f64> = v.diagonal().iter().map(|d| d.sqrt()).collect();
    DMatrix::from_fn(v.nrows(), v.ncols(), |i, j| v[(i, j)] / (s[i] * s[j]))
}

/// Moment estimate of the correlation parameter from residuals of a working-independence fit.
///
/// EX averages all within-cluster cross products, AR1 only adjacent pairs; both are divided
/// by the pooled mean squared residual. The result is clamped inside the legal range for
/// the largest cluster. Returns 0 for WI and RSM.
pub fn estimate_alpha(kind: CovarianceKind, residuals: &[DVector<f64>]) -> f64 {
    let n_obs: usize = residuals.iter().map(|e| e.len()).sum();
    let scale = residuals.iter().map(|e| e.norm_squared()).sum::<f64>() / n_obs as f64;
    if !(scale > 0.0) {
        return 0.0;
    }
    let max_size = residuals.iter().map(|e| e.len()).max().unwrap_or(1);
    let (mut cross, mut pairs) = (0.0, 0usize);
    match kind {
        CovarianceKind::Ex => {
            for e in residuals {
                let s = e.sum();
                cross += s * s - e.norm_squared();
                pairs += e.len() * (e.len() - 1);
            }
        }
        CovarianceKind::Ar1 => {
            for e in residuals {
                for j in 1..e.len() {
                    cross += e[j] * e[j - 1];
                    pairs += 1;
                }
            }
        }
        CovarianceKind::Wi | CovarianceKind::Rsm => return 0.0,
    }
    if pairs == 0 {
        return 0.0;
    }
    let alpha = cross / pairs as f64 / scale;
    let lower = match kind {
        CovarianceKind::Ex if max_size > 1 => -1.0 / (max_size as f64 - 1.0) + 1e-2,
        _ => -0.99,
    };
    alpha.clamp(lower, 0.99)
}
