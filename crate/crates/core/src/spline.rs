//! Normalized B-spline spaces on [0, 1] with equally spaced interior knots.
//!
//! The knot vector is clamped: `q + 1` copies of 0, the `N` interior knots `s / (N + 1)`,
//! then `q + 1` copies of 1, giving `J = N + q + 1` basis functions. The last knot
//! interval is closed on the right so that `z = 1` evaluates to the last basis function.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::Cluster;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineSpace {
    degree: usize,
    interior: usize,
    knots: Vec<f64>,
}

impl SplineSpace {
    /// Degree `q` splines with `n_interior` equally spaced interior knots.
    pub fn new(degree: usize, n_interior: usize) -> Result<Self> {
        if degree < 1 {
            return Err(Error::InvalidSpline(format!("degree must be at least 1, got {degree}")));
        }
        let step = (n_interior + 1) as f64;
        let knots = std::iter::repeat_n(0.0, degree + 1)
            .chain((1..=n_interior).map(|s| s as f64 / step))
            .chain(std::iter::repeat_n(1.0, degree + 1))
            .collect();
        Ok(Self { degree, interior: n_interior, knots })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn interior_knots(&self) -> usize {
        self.interior
    }

    /// Basis dimension `J = N + q + 1`.
    pub fn dimension(&self) -> usize {
        self.interior + self.degree + 1
    }

    /// Full clamped knot vector of length `N + 2q + 2`.
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Index of the knot span containing `z`, in `q ..= q + N`.
    fn span(&self, z: f64) -> usize {
        let q = self.degree;
        let last = q + self.interior;
        let mut mu = q + ((z * (self.interior + 1) as f64).floor() as usize).min(self.interior);
        while mu < last && z >= self.knots[mu + 1] {
            mu += 1;
        }
        while mu > q && z < self.knots[mu] {
            mu -= 1;
        }
        mu
    }

    /// Values of the `q + 1` basis functions that can be nonzero at `z`, and the index of
    /// the first one.
    pub fn eval_nonzero(&self, z: f64) -> Result<(usize, Vec<f64>)> {
        if !(0.0..=1.0).contains(&z) {
            return Err(Error::Domain { value: z });
        }
        let q = self.degree;
        let t = &self.knots;
        let mu = self.span(z);
        let mut values = vec![0.0; q + 1];
        let mut left = vec![0.0; q + 1];
        let mut right = vec![0.0; q + 1];
        values[0] = 1.0;
        for j in 1..=q {
            left[j] = z - t[mu + 1 - j];
            right[j] = t[mu + j] - z;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = values[r] / (right[r + 1] + left[j - r]);
                values[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            values[j] = saved;
        }
        Ok((mu - q, values))
    }

    /// All `J` basis values at `z`.
    pub fn eval_basis(&self, z: f64) -> Result<Vec<f64>> {
        let (first, values) = self.eval_nonzero(z)?;
        let mut out = vec![0.0; self.dimension()];
        out[first..first + values.len()].copy_from_slice(&values);
        Ok(out)
    }

    /// Evaluates the spline `sum_s coef[s] B_s(z)`.
    pub fn evaluate(&self, coef: &[f64], z: f64) -> Result<f64> {
        debug_assert_eq!(coef.len(), self.dimension());
        let (first, values) = self.eval_nonzero(z)?;
        Ok(values.iter().zip(&coef[first..]).map(|(b, c)| b * c).sum())
    }
}

pub fn make_space(degree: usize, n_interior: usize) -> Result<SplineSpace> {
    SplineSpace::new(degree, n_interior)
}

/// Interior knot count from the rate `J ~ n^{1/(2p)} log n` with unit constant:
/// `N = max(1, round(n^{1/(2p)} ln n) - q - 1)`.
pub fn default_dimension(n: usize, p: usize, degree: usize) -> usize {
    let n = n.max(2) as f64;
    let p = p.max(1) as f64;
    let j = (n.powf(1.0 / (2.0 * p)) * n.ln()).round() as i64;
    (j - degree as i64 - 1).max(1) as usize
}

/// Basis design for one cluster: row `j` concatenates `eval_basis(space_l, Z_jl)` over `l`.
pub fn build_design(spaces: &[SplineSpace], cluster: &Cluster) -> Result<DMatrix<f64>> {
    if spaces.len() != cluster.z.ncols() {
        return Err(Error::Schema(format!(
            "{} spline spaces supplied for {} nonparametric covariates",
            spaces.len(),
            cluster.z.ncols()
        )));
    }
    let width: usize = spaces.iter().map(SplineSpace::dimension).sum();
    let mut design = DMatrix::zeros(cluster.size(), width);
    for j in 0..cluster.size() {
        let mut offset = 0;
        for (l, space) in spaces.iter().enumerate() {
            let (first, values) = space.eval_nonzero(cluster.z[(j, l)])?;
            for (r, v) in values.into_iter().enumerate() {
                design[(j, offset + first + r)] = v;
            }
            offset += space.dimension();
        }
    }
    Ok(design)
}

/// Equally spaced grid of `points` values on [0, 1].
pub fn unit_grid(points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..points).map(|i| i as f64 / (points - 1) as f64).collect(),
    }
}
