#![allow(dead_code)]

use aplm::penalized::penalized_objective;
use aplm::{Cluster, ClusteredDataset, Model, PenaltySpec, SplineSpace, WorkingCovarianceSpec};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Random clustered data with `n` clusters of size 2..=4, Gaussian X, uniform Z and
/// exchangeable noise around `Xβ + Σ sin(3 z_l)`.
pub fn random_dataset(rng: &mut ChaCha8Rng, n: usize, beta: &[f64], d2: usize, noise: f64) -> ClusteredDataset {
    let d1 = beta.len();
    let b = DVector::from_row_slice(beta);
    let clusters = (0..n)
        .map(|i| {
            let m = rng.random_range(2..=4);
            let x = DMatrix::from_fn(m, d1, |_, _| normal(rng));
            let z = DMatrix::from_fn(m, d2, |_, _| rng.random::<f64>());
            let shared = normal(rng);
            let mut y = &x * &b;
            for j in 0..m {
                for l in 0..d2 {
                    y[j] += (3.0 * z[(j, l)]).sin();
                }
                y[j] += noise * (0.7 * shared + 0.7 * normal(rng));
            }
            Cluster::new(format!("s{i}"), y, x, z, None).unwrap()
        })
        .collect();
    ClusteredDataset::new(clusters).unwrap()
}

pub fn spaces(d2: usize, degree: usize, knots: usize) -> Vec<SplineSpace> {
    vec![SplineSpace::new(degree, knots).unwrap(); d2]
}

/// Stacked whitened design `L⁻¹ [X B]` and response `L⁻¹ Y` where `V_i = L_i L_iᵀ`.
pub fn whitened_joint(
    dataset: &ClusteredDataset,
    spaces: &[SplineSpace],
    spec: &WorkingCovarianceSpec,
    spline_cols: &[usize],
) -> (DMatrix<f64>, DVector<f64>) {
    let d1 = dataset.d1();
    let width = d1 + spline_cols.len();
    let mut a = DMatrix::zeros(dataset.n_obs(), width);
    let mut y = DVector::zeros(dataset.n_obs());
    let mut row = 0;
    for c in dataset.clusters() {
        let m = c.size();
        let v = aplm::covariance::build_working_covariance(spec, c).unwrap();
        let l = v.cholesky().unwrap().l();
        let b = aplm::spline::build_design(spaces, c).unwrap();
        let mut joint = DMatrix::zeros(m, width);
        joint.columns_mut(0, d1).copy_from(&c.x);
        for (k, &s) in spline_cols.iter().enumerate() {
            joint.column_mut(d1 + k).copy_from(&b.column(s));
        }
        let wa = l.solve_lower_triangular(&joint).unwrap();
        let wy = l.solve_lower_triangular(&c.y).unwrap();
        a.rows_mut(row, m).copy_from(&wa);
        y.rows_mut(row, m).copy_from(&wy);
        row += m;
    }
    (a, y)
}

/// Minimum-norm least-squares solution by SVD; singular values below `1e-10 σ_max` are dropped.
pub fn lstsq(a: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let svd = a.clone().svd(true, true);
    let eps = svd.singular_values.max() * 1e-10;
    svd.solve(y, eps).unwrap()
}

pub fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1.0)
}

/// Data with no nonparametric part: `y = Xβ + noise` in one cluster with no Z columns.
pub fn parametric_instance(r: &mut ChaCha8Rng, n_obs: usize, beta: &[f64], noise: f64) -> ClusteredDataset {
    let d1 = beta.len();
    let x = DMatrix::from_fn(n_obs, d1, |_, _| normal(r));
    let y = &x * DVector::from_row_slice(beta) + DVector::from_fn(n_obs, |_, _| noise * normal(r));
    let z = DMatrix::zeros(n_obs, 0);
    ClusteredDataset::new(vec![Cluster::new("only", y, x, z, None).unwrap()]).unwrap()
}

/// Active set minimizing the exact penalized objective over all subsets, each refitted
/// by unpenalized least squares on the profiled system. The refit is the exact subset
/// minimizer when the retained coefficients sit where the penalty is flat.
pub fn brute_force_active_set(model: &Model, spec: &PenaltySpec) -> Vec<usize> {
    let d1 = model.dataset().d1();
    let h = &model.profiled.hessian;
    let g = &model.profiled.score;
    let mut best = (f64::INFINITY, Vec::new());
    for mask in 0u32..(1 << d1) {
        let subset: Vec<usize> = (0..d1).filter(|k| mask & (1 << k) != 0).collect();
        let mut beta = DVector::zeros(d1);
        if !subset.is_empty() {
            let hs = DMatrix::from_fn(subset.len(), subset.len(), |i, j| h[(subset[i], subset[j])]);
            let gs = DVector::from_fn(subset.len(), |i, _| g[subset[i]]);
            let sol = hs.lu().solve(&gs).unwrap();
            for (i, &k) in subset.iter().enumerate() {
                beta[k] = sol[i];
            }
        }
        let obj = penalized_objective(&model.profiled, spec, &beta);
        if obj < best.0 {
            best = (obj, subset);
        }
    }
    best.1
}
