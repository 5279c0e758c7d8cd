//! SCAD and hard-thresholding penalties and their local quadratic approximation.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SCAD_A: f64 = 3.7;
pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyKind {
    Scad,
    Hard,
}

impl PenaltyKind {
    pub fn name(self) -> &'static str {
        match self {
            PenaltyKind::Scad => "scad",
            PenaltyKind::Hard => "hard",
        }
    }
}

impl std::str::FromStr for PenaltyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "scad" => Ok(Self::Scad),
            "hard" => Ok(Self::Hard),
            other => Err(Error::Usage(format!("unknown penalty '{other}' (scad|hard)"))),
        }
    }
}

/// SCAD derivative `p'_λ(β) = λ { I(β ≤ λ) + (aλ − β)_+ / ((a − 1)λ) I(β > λ) }` for β ≥ 0.
pub fn scad_derivative(beta_abs: f64, lambda: f64, a: f64) -> f64 {
    if lambda <= 0.0 {
        return 0.0;
    }
    if beta_abs <= lambda {
        lambda
    } else {
        lambda * ((a * lambda - beta_abs).max(0.0) / ((a - 1.0) * lambda))
    }
}

/// SCAD penalty, the antiderivative of [`scad_derivative`] with `p_λ(0) = 0`.
pub fn scad_penalty(beta_abs: f64, lambda: f64, a: f64) -> f64 {
    if lambda <= 0.0 {
        return 0.0;
    }
    if beta_abs <= lambda {
        lambda * beta_abs
    } else if beta_abs <= a * lambda {
        -(beta_abs * beta_abs - 2.0 * a * lambda * beta_abs + lambda * lambda) / (2.0 * (a - 1.0))
    } else {
        (a + 1.0) * lambda * lambda / 2.0
    }
}

/// Hard-thresholding penalty `λ² − (|β| − λ)² I(|β| < λ)`.
pub fn hard_penalty(beta_abs: f64, lambda: f64) -> f64 {
    if beta_abs < lambda {
        lambda * lambda - (beta_abs - lambda).powi(2)
    } else {
        lambda * lambda
    }
}

pub fn hard_derivative(beta_abs: f64, lambda: f64) -> f64 {
    if beta_abs < lambda {
        2.0 * (lambda - beta_abs)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltySpec {
    pub kind: PenaltyKind,
    /// SCAD shape parameter.
    pub a: f64,
    /// Per-coefficient regularization parameters λ_k.
    pub lambdas: Vec<f64>,
    /// Ridge added to |β_k| in the LQA denominator.
    pub epsilon: f64,
    pub penalize_intercept: bool,
    /// Position of the intercept among the coefficients, if the design has one.
    pub intercept: Option<usize>,
}

impl PenaltySpec {
    pub fn new(kind: PenaltyKind, lambdas: Vec<f64>) -> Self {
        Self {
            kind,
            a: DEFAULT_SCAD_A,
            lambdas,
            epsilon: DEFAULT_EPSILON,
            penalize_intercept: false,
            intercept: None,
        }
    }

    pub fn scad(lambdas: Vec<f64>) -> Self {
        Self::new(PenaltyKind::Scad, lambdas)
    }

    pub fn hard(lambdas: Vec<f64>) -> Self {
        Self::new(PenaltyKind::Hard, lambdas)
    }

    pub fn with_lambdas(&self, lambdas: Vec<f64>) -> Self {
        Self { lambdas, ..self.clone() }
    }

    pub fn validate(&self, d1: usize) -> Result<()> {
        if self.lambdas.len() != d1 {
            return Err(Error::Penalty(format!("{} lambdas for {d1} coefficients", self.lambdas.len())));
        }
        if !(self.a > 2.0) {
            return Err(Error::Penalty(format!("SCAD shape a must exceed 2, got {}", self.a)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Penalty(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if let Some(bad) = self.lambdas.iter().find(|l| !(**l >= 0.0) || !l.is_finite()) {
            return Err(Error::Penalty(format!("lambdas must be finite and nonnegative, got {bad}")));
        }
        Ok(())
    }

    /// Effective λ_k, with the intercept exempt unless `penalize_intercept` is set.
    pub fn lambda(&self, k: usize) -> f64 {
        if !self.penalize_intercept && self.intercept == Some(k) {
            0.0
        } else {
            self.lambdas[k]
        }
    }

    pub fn value(&self, beta_abs: f64, lambda: f64) -> f64 {
        match self.kind {
            PenaltyKind::Scad => scad_penalty(beta_abs, lambda, self.a),
            PenaltyKind::Hard => hard_penalty(beta_abs, lambda),
        }
    }

    pub fn derivative(&self, beta_abs: f64, lambda: f64) -> f64 {
        match self.kind {
            PenaltyKind::Scad => scad_derivative(beta_abs, lambda, self.a),
            PenaltyKind::Hard => hard_derivative(beta_abs, lambda),
        }
    }

    /// `P(β) = Σ_k p_{λ_k}(|β_k|)`.
    pub fn total(&self, beta: &DVector<f64>) -> f64 {
        beta.iter().enumerate().map(|(k, b)| self.value(b.abs(), self.lambda(k))).sum()
    }
}

/// Diagonal of the LQA weight matrix `Σ_λ(β)`, entry `p'_{λ_k}(|β_k|) / (ε + |β_k|)`.
pub fn lqa_matrix(beta: &DVector<f64>, spec: &PenaltySpec) -> DVector<f64> {
    DVector::from_iterator(
        beta.len(),
        beta.iter().enumerate().map(|(k, b)| {
            let lambda = spec.lambda(k);
            if lambda == 0.0 {
                0.0
            } else {
                spec.derivative(b.abs(), lambda) / (spec.epsilon + b.abs())
            }
        }),
    )
}
