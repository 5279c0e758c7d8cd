//! Unpenalized profiled weighted least squares for the additive partially linear model
//! `Y_i = X_i β + Σ_l η_l(Z_il) + ε_i`, with each η_l replaced by a B-spline expansion.
//!
//! The joint normal equations in `(β, γ)` are assembled block-wise. The spline
//! coefficients are profiled out: `γ(β) = H_BB⁻¹ (b_B − H_BX β)`, and β̂ solves the Schur
//! complement system `(H_XX − H_XB H_BB⁻¹ H_BX) β = b_X − H_XB H_BB⁻¹ b_B`.
//!
//! Every spline block is a partition of unity, so the stacked design carries one
//! constant direction per block. To keep the system nonsingular, the first basis
//! function of blocks 2..d2 (and of block 1 as well when X has an intercept column) is
//! pinned at zero. This changes nothing about fitted values, β̂ or the centered curves.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covariance::{build_working_covariance, invert_covariance, working_correlation, WorkingCovarianceSpec};
use crate::data::ClusteredDataset;
use crate::error::{Error, Result};
use crate::linalg;
use crate::spline::{build_design, SplineSpace};

/// Per-cluster ingredients of the weighted criterion, computed once per dataset.
#[derive(Debug, Clone)]
pub struct WeightedDesign {
    dataset: ClusteredDataset,
    spaces: Vec<SplineSpace>,
    spec: WorkingCovarianceSpec,
    pub(crate) basis: Vec<DMatrix<f64>>,
    pub(crate) vinv: Vec<DMatrix<f64>>,
    pub(crate) rinv: Vec<DMatrix<f64>>,
    pinned: Vec<usize>,
}

impl WeightedDesign {
    pub fn new(dataset: &ClusteredDataset, spaces: &[SplineSpace], spec: &WorkingCovarianceSpec) -> Result<Self> {
        spec.validate(dataset.max_cluster_size())?;
        let mut basis = Vec::with_capacity(dataset.n());
        let mut vinv = Vec::with_capacity(dataset.n());
        let mut rinv = Vec::with_capacity(dataset.n());
        for c in dataset.clusters() {
            basis.push(build_design(spaces, c)?);
            let v = build_working_covariance(spec, c)?;
            let vi = invert_covariance(&v)?;
            rinv.push(match spec.kind {
                crate::covariance::CovarianceKind::Rsm => invert_covariance(&working_correlation(&v))?,
                _ => vi.clone(),
            });
            vinv.push(vi);
        }
        let mut pinned = Vec::new();
        let mut offset = 0;
        for (l, s) in spaces.iter().enumerate() {
            if l > 0 || dataset.intercept().is_some() {
                pinned.push(offset);
            }
            offset += s.dimension();
        }
        Ok(Self {
            dataset: dataset.clone(),
            spaces: spaces.to_vec(),
            spec: *spec,
            basis,
            vinv,
            rinv,
            pinned,
        })
    }

    pub fn dataset(&self) -> &ClusteredDataset {
        &self.dataset
    }

    pub fn spaces(&self) -> &[SplineSpace] {
        &self.spaces
    }

    pub fn spec(&self) -> &WorkingCovarianceSpec {
        &self.spec
    }

    /// Spline design of cluster `i` (all `Σ J_l` columns).
    pub fn basis(&self, i: usize) -> &DMatrix<f64> {
        &self.basis[i]
    }

    pub fn vinv(&self, i: usize) -> &DMatrix<f64> {
        &self.vinv[i]
    }

    /// Inverse working correlation of cluster `i`.
    pub fn rinv(&self, i: usize) -> &DMatrix<f64> {
        &self.rinv[i]
    }

    pub fn spline_width(&self) -> usize {
        self.spaces.iter().map(SplineSpace::dimension).sum()
    }

    /// Spline columns fixed at zero for identifiability.
    pub fn pinned(&self) -> &[usize] {
        &self.pinned
    }

    /// Spline columns that are estimated.
    pub fn free(&self) -> Vec<usize> {
        (0..self.spline_width()).filter(|c| !self.pinned.contains(c)).collect()
    }

    fn knots(&self) -> usize {
        self.spaces.first().map_or(0, SplineSpace::interior_knots)
    }
}

/// V⁻¹-weighted normal-equation blocks summed over clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSystem {
    pub h_xx: DMatrix<f64>,
    pub h_xb: DMatrix<f64>,
    pub h_bb: DMatrix<f64>,
    pub b_x: DVector<f64>,
    pub b_b: DVector<f64>,
    /// Spline columns pinned at zero (see module docs).
    pub pinned: Vec<usize>,
}

impl BlockSystem {
    pub fn free(&self) -> Vec<usize> {
        (0..self.h_bb.nrows()).filter(|c| !self.pinned.contains(c)).collect()
    }

    /// Identifiable sub-block of `H_BB`.
    pub fn h_bb_free(&self) -> DMatrix<f64> {
        let free = self.free();
        linalg::select(&self.h_bb, &free, &free)
    }
}

pub fn assemble_blocks(design: &WeightedDesign) -> BlockSystem {
    let ds = design.dataset();
    let (d1, width) = (ds.d1(), design.spline_width());
    let mut blocks = BlockSystem {
        h_xx: DMatrix::zeros(d1, d1),
        h_xb: DMatrix::zeros(d1, width),
        h_bb: DMatrix::zeros(width, width),
        b_x: DVector::zeros(d1),
        b_b: DVector::zeros(width),
        pinned: design.pinned.clone(),
    };
    for (i, c) in ds.clusters().iter().enumerate() {
        let vx = &design.vinv[i] * &c.x;
        let vb = &design.vinv[i] * &design.basis[i];
        blocks.h_xx += c.x.transpose() * &vx;
        blocks.h_xb += c.x.transpose() * &vb;
        blocks.h_bb += design.basis[i].transpose() * &vb;
        blocks.b_x += vx.transpose() * &c.y;
        blocks.b_b += vb.transpose() * &c.y;
    }
    linalg::symmetrize(&mut blocks.h_xx);
    linalg::symmetrize(&mut blocks.h_bb);
    blocks
}

/// `γ(β) = H_BB⁻¹ (b_B − H_BX β)` on the free spline columns; pinned columns are 0.
pub fn profile_gamma(beta: &DVector<f64>, blocks: &BlockSystem) -> Result<DVector<f64>> {
    let free = blocks.free();
    let rhs = linalg::select_rows_vec(&(&blocks.b_b - blocks.h_xb.transpose() * beta), &free);
    let sol = linalg::spd_solve_vec(&blocks.h_bb_free(), &rhs)
        .ok_or_else(|| Error::Numeric("spline normal matrix is singular".into()))?;
    let mut gamma = DVector::zeros(blocks.h_bb.nrows());
    for (r, &c) in free.iter().enumerate() {
        gamma[c] = sol[r];
    }
    Ok(gamma)
}

/// Coefficients of the V⁻¹-weighted least-squares fits of X and Y on the free spline columns.
#[derive(Debug, Clone)]
pub struct SplineProjection {
    free: Vec<usize>,
    /// `H_BB⁻¹ H_BX` (free × d1).
    pub x_coef: DMatrix<f64>,
    /// `H_BB⁻¹ b_B` (free).
    pub y_coef: DVector<f64>,
}

impl SplineProjection {
    pub fn new(design: &WeightedDesign, blocks: &BlockSystem) -> Result<Self> {
        let free = blocks.free();
        let d1 = blocks.h_xx.nrows();
        let mut rhs = DMatrix::zeros(free.len(), d1 + 1);
        for (r, &c) in free.iter().enumerate() {
            for k in 0..d1 {
                rhs[(r, k)] = blocks.h_xb[(k, c)];
            }
            rhs[(r, d1)] = blocks.b_b[c];
        }
        let sol = linalg::spd_solve(&blocks.h_bb_free(), &rhs).ok_or(Error::TooManyKnots { knots: design.knots() })?;
        Ok(Self { free, x_coef: sol.columns(0, d1).into_owned(), y_coef: sol.column(d1).into_owned() })
    }

    fn free_basis(&self, basis: &DMatrix<f64>) -> DMatrix<f64> {
        linalg::select_cols(basis, &self.free)
    }

    /// `X̂_i = X_i − B_i H_BB⁻¹ H_BX`.
    pub fn xhat(&self, design: &WeightedDesign) -> Vec<DMatrix<f64>> {
        design
            .dataset()
            .clusters()
            .iter()
            .zip(&design.basis)
            .map(|(c, b)| &c.x - self.free_basis(b) * &self.x_coef)
            .collect()
    }

    /// `Y_i − Π̂ Y_i`.
    pub fn ytilde(&self, design: &WeightedDesign) -> Vec<DVector<f64>> {
        design
            .dataset()
            .clusters()
            .iter()
            .zip(&design.basis)
            .map(|(c, b)| &c.y - self.free_basis(b) * &self.y_coef)
            .collect()
    }
}

/// X̂: each X column minus its V⁻¹-weighted least-squares fit on the spline design.
pub fn project_out_splines(design: &WeightedDesign) -> Result<Vec<DMatrix<f64>>> {
    let blocks = assemble_blocks(design);
    Ok(SplineProjection::new(design, &blocks)?.xhat(design))
}

/// The spline-profiled least-squares problem in β alone:
/// `Q(β) = ½ Σ (Ỹ_i − X̂_i β)ᵀ V_i⁻¹ (Ỹ_i − X̂_i β)`.
#[derive(Debug, Clone)]
pub struct ProfiledSystem {
    pub xhat: Vec<DMatrix<f64>>,
    pub ytilde: Vec<DVector<f64>>,
    /// `V_i⁻¹ X̂_i`, reused for per-cluster scores.
    pub weighted_xhat: Vec<DMatrix<f64>>,
    pub vinv: Vec<DMatrix<f64>>,
    /// `Q̈ = Σ X̂_iᵀ V_i⁻¹ X̂_i`.
    pub hessian: DMatrix<f64>,
    /// `Σ X̂_iᵀ V_i⁻¹ Ỹ_i`.
    pub score: DVector<f64>,
    /// `Σ Ỹ_iᵀ V_i⁻¹ Ỹ_i`.
    pub y_energy: f64,
    pub n_obs: usize,
}

impl ProfiledSystem {
    pub fn new(design: &WeightedDesign, projection: &SplineProjection) -> Self {
        let xhat = projection.xhat(design);
        let ytilde = projection.ytilde(design);
        let d1 = design.dataset().d1();
        let mut hessian = DMatrix::zeros(d1, d1);
        let mut score = DVector::zeros(d1);
        let mut y_energy = 0.0;
        let mut weighted_xhat = Vec::with_capacity(xhat.len());
        for ((xh, yt), vinv) in xhat.iter().zip(&ytilde).zip(&design.vinv) {
            let wx = vinv * xh;
            hessian += xh.transpose() * &wx;
            score += wx.transpose() * yt;
            y_energy += yt.dot(&(vinv * yt));
            weighted_xhat.push(wx);
        }
        linalg::symmetrize(&mut hessian);
        Self {
            xhat,
            ytilde,
            weighted_xhat,
            vinv: design.vinv.clone(),
            hessian,
            score,
            y_energy,
            n_obs: design.dataset().n_obs(),
        }
    }

    /// Profiled criterion `Q(β)`.
    pub fn objective(&self, beta: &DVector<f64>) -> f64 {
        let mut q = 0.0;
        for ((x, y), w) in self.xhat.iter().zip(&self.ytilde).zip(&self.vinv) {
            let r = y - x * beta;
            q += r.dot(&(w * &r));
        }
        0.5 * q
    }

    /// Per-cluster residuals `Y_i − X_i β − B_i γ(β)`.
    pub fn residuals(&self, beta: &DVector<f64>) -> Vec<DVector<f64>> {
        self.xhat.iter().zip(&self.ytilde).map(|(x, y)| y - x * beta).collect()
    }

    /// `Σ_i X̂_iᵀ V_i⁻¹ ê_i ê_iᵀ V_i⁻¹ X̂_i`.
    pub fn meat(&self, residuals: &[DVector<f64>]) -> DMatrix<f64> {
        let d1 = self.hessian.nrows();
        let mut meat = DMatrix::zeros(d1, d1);
        for (wx, e) in self.weighted_xhat.iter().zip(residuals) {
            let s = wx.transpose() * e;
            meat += &s * s.transpose();
        }
        meat
    }
}

/// Empirically centered spline: `η̂(z) = Σ_s γ_s B_s(z) − offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenteredCurve {
    pub space: SplineSpace,
    pub coef: Vec<f64>,
    pub offset: f64,
}

impl CenteredCurve {
    /// Centers the spline so its mean over `observed` is zero.
    pub fn new(space: &SplineSpace, coef: &[f64], observed: &[f64]) -> Result<Self> {
        let mean = if observed.is_empty() {
            0.0
        } else {
            observed.iter().map(|z| space.evaluate(coef, *z)).sum::<Result<f64>>()? / observed.len() as f64
        };
        Ok(Self { space: space.clone(), coef: coef.to_vec(), offset: mean })
    }

    pub fn eval(&self, z: f64) -> Result<f64> {
        Ok(self.space.evaluate(&self.coef, z)? - self.offset)
    }
}

/// Centered curve values on `grid`, centered over the observed `z` values.
pub fn centered_eta(gamma: &[f64], space: &SplineSpace, observed: &[f64], grid: &[f64]) -> Result<Vec<f64>> {
    let curve = CenteredCurve::new(space, gamma, observed)?;
    grid.iter().map(|z| curve.eval(*z)).collect()
}

/// Robust covariance with an explicit per-cluster covariance Σ_i:
/// `Ω̂ = n (X̂ᵀ V⁻¹ X̂)⁻¹ (X̂ᵀ V⁻¹ Σ V⁻¹ X̂) (X̂ᵀ V⁻¹ X̂)⁻¹`, `SE_k = sqrt(Ω̂_kk / n)`.
pub fn sandwich_covariance(
    xhat: &[DMatrix<f64>],
    vinv: &[DMatrix<f64>],
    sigma: &[DMatrix<f64>],
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let d1 = xhat.first().map_or(0, |x| x.ncols());
    let n = xhat.len();
    if n < d1 {
        log::warn!("sandwich covariance from {n} clusters for {d1} coefficients is unstable");
    }
    let mut bread = DMatrix::zeros(d1, d1);
    let mut meat = DMatrix::zeros(d1, d1);
    for ((x, vi), s) in xhat.iter().zip(vinv).zip(sigma) {
        let wx = vi * x;
        bread += x.transpose() * &wx;
        meat += wx.transpose() * s * &wx;
    }
    linalg::symmetrize(&mut bread);
    let inv = linalg::spd_inverse(&bread).ok_or(Error::Collinear)?;
    Ok(finish_sandwich(&inv, &meat, n))
}

/// Same as [`sandwich_covariance`] with `Σ_i = ê_i ê_iᵀ`.
pub fn sandwich_from_residuals(
    xhat: &[DMatrix<f64>],
    vinv: &[DMatrix<f64>],
    residuals: &[DVector<f64>],
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let sigma: Vec<_> = residuals.iter().map(|e| e * e.transpose()).collect();
    sandwich_covariance(xhat, vinv, &sigma)
}

pub(crate) fn finish_sandwich(bread_inv: &DMatrix<f64>, meat: &DMatrix<f64>, n: usize) -> (DMatrix<f64>, DVector<f64>) {
    let cov = bread_inv * meat * bread_inv;
    let mut omega = cov * n as f64;
    linalg::symmetrize(&mut omega);
    let se = DVector::from_iterator(omega.nrows(), omega.diagonal().iter().map(|w| (w.max(0.0) / n as f64).sqrt()));
    (omega, se)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// Smallest and largest eigenvalue of `n⁻¹ H_BB` on the free columns.
    pub spline_eigen_range: (f64, f64),
    /// Condition number of `Q̈`.
    pub hessian_condition: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub beta_hat: DVector<f64>,
    pub gamma_hat: DVector<f64>,
    pub curves: Vec<CenteredCurve>,
    pub omega_hat: DMatrix<f64>,
    pub se: DVector<f64>,
    pub residuals: Vec<DVector<f64>>,
    /// Sum of the curve centering offsets; fitted means are `Xβ̂ + shift + Σ η̂_l`.
    pub intercept_shift: f64,
    pub diagnostics: FitDiagnostics,
}

impl FitResult {
    /// Overall intercept: the intercept coefficient (if any) plus the centering shift.
    pub fn intercept(&self, intercept_col: Option<usize>) -> f64 {
        intercept_col.map_or(0.0, |k| self.beta_hat[k]) + self.intercept_shift
    }
}

/// A dataset prepared for estimation: weighted design, normal-equation blocks, spline
/// projection, profiled system and the unpenalized fit.
#[derive(Debug, Clone)]
pub struct Model {
    pub design: WeightedDesign,
    pub blocks: BlockSystem,
    pub projection: SplineProjection,
    pub profiled: ProfiledSystem,
    pub fit: FitResult,
}

impl Model {
    pub fn new(dataset: &ClusteredDataset, spaces: &[SplineSpace], spec: &WorkingCovarianceSpec) -> Result<Self> {
        let design = WeightedDesign::new(dataset, spaces, spec)?;
        let ds = design.dataset();
        let n_cols = ds.d1() + design.free().len();
        if n_cols >= ds.n_obs() {
            return Err(Error::Schema(format!(
                "{n_cols} coefficients need more than {} observations",
                ds.n_obs()
            )));
        }
        let blocks = assemble_blocks(&design);
        let projection = SplineProjection::new(&design, &blocks)?;
        let profiled = ProfiledSystem::new(&design, &projection);
        // a column explained by the splines leaves a Schur diagonal tiny against its raw norm
        let absorbed = (0..ds.d1()).any(|k| profiled.hessian[(k, k)] <= linalg::SINGULAR_RCOND * blocks.h_xx[(k, k)]);
        if absorbed {
            return Err(Error::Collinear);
        }

        let beta_hat = linalg::spd_solve_vec(&profiled.hessian, &profiled.score).ok_or(Error::Collinear)?;
        let gamma_hat = embed(&projection.free, &(&projection.y_coef - &projection.x_coef * &beta_hat), design.spline_width());
        let curves = centered_curves(&design, &gamma_hat)?;
        let intercept_shift = curves.iter().map(|c| c.offset).sum();
        let residuals = profiled.residuals(&beta_hat);
        let hessian_inv = linalg::spd_inverse(&profiled.hessian).ok_or(Error::Collinear)?;
        let (omega_hat, se) = finish_sandwich(&hessian_inv, &profiled.meat(&residuals), ds.n());
        if ds.n() < ds.d1() {
            log::warn!("sandwich covariance from {} clusters for {} coefficients is unstable", ds.n(), ds.d1());
        }

        let h_bb = blocks.h_bb_free() / ds.n() as f64;
        let spline_eigen_range = if h_bb.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let eig = nalgebra::SymmetricEigen::new(h_bb).eigenvalues;
            (eig.min(), eig.max())
        };
        let diagnostics = FitDiagnostics {
            spline_eigen_range,
            hessian_condition: linalg::condition_number(&profiled.hessian),
        };
        let fit = FitResult { beta_hat, gamma_hat, curves, omega_hat, se, residuals, intercept_shift, diagnostics };
        Ok(Self { design, blocks, projection, profiled, fit })
    }

    pub fn dataset(&self) -> &ClusteredDataset {
        self.design.dataset()
    }

    /// `γ(β)` for the full spline coefficient vector.
    pub fn gamma(&self, beta: &DVector<f64>) -> DVector<f64> {
        let free = &self.projection.y_coef - &self.projection.x_coef * beta;
        embed(&self.projection.free, &free, self.design.spline_width())
    }

    /// Centered curves for an arbitrary spline coefficient vector.
    pub fn curves(&self, gamma: &DVector<f64>) -> Result<Vec<CenteredCurve>> {
        centered_curves(&self.design, gamma)
    }
}

fn embed(free: &[usize], values: &DVector<f64>, width: usize) -> DVector<f64> {
    let mut out = DVector::zeros(width);
    for (r, &c) in free.iter().enumerate() {
        out[c] = values[r];
    }
    out
}

fn centered_curves(design: &WeightedDesign, gamma: &DVector<f64>) -> Result<Vec<CenteredCurve>> {
    let mut offset = 0;
    let mut curves = Vec::with_capacity(design.spaces().len());
    for (l, space) in design.spaces().iter().enumerate() {
        let j = space.dimension();
        let observed = design.dataset().stacked_z_column(l);
        curves.push(CenteredCurve::new(space, &gamma.as_slice()[offset..offset + j], &observed)?);
        offset += j;
    }
    Ok(curves)
}

/// Fits the unpenalized model and returns the estimates.
pub fn fit_unpenalized(dataset: &ClusteredDataset, spaces: &[SplineSpace], spec: &WorkingCovarianceSpec) -> Result<FitResult> {
    Ok(Model::new(dataset, spaces, spec)?.fit)
}
