//! Penalized spline estimation and variable selection for additive partially linear
//! models fitted to clustered (longitudinal) data.

// NaN-rejecting guards are written as negated comparisons
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod covariance;
pub mod data;
pub mod error;
pub mod estimator;
pub mod linalg;
pub mod penalized;
pub mod penalty;
pub mod report;
pub mod simulation;
pub mod spline;

pub use covariance::{CovarianceKind, RsmParams, WorkingCovarianceSpec};
pub use data::{Cluster, ClusteredDataset, Record};
pub use error::{Error, Result};
pub use estimator::{fit_unpenalized, FitResult, Model};
pub use penalty::{PenaltyKind, PenaltySpec};
pub use spline::SplineSpace;
