mod common;

use aplm::estimator::{
    assemble_blocks, centered_eta, profile_gamma, project_out_splines, sandwich_covariance, WeightedDesign,
};
use aplm::spline::unit_grid;
use aplm::{Cluster, ClusteredDataset, Error, Model, WorkingCovarianceSpec};
use common::*;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

fn specs() -> Vec<WorkingCovarianceSpec> {
    vec![
        WorkingCovarianceSpec::independence(),
        WorkingCovarianceSpec::exchangeable(0.6),
        WorkingCovarianceSpec::ar1(-0.4),
    ]
}

#[test]
fn profiled_estimator_equals_joint_dense_solve() {
    let mut r = rng(11);
    for trial in 0..50 {
        let n = r.random_range(25..=50);
        let d1 = r.random_range(1..=8);
        let d2 = r.random_range(1..=2);
        let knots = r.random_range(0..=3);
        let beta: Vec<f64> = (0..d1).map(|_| normal(&mut r)).collect();
        let ds = random_dataset(&mut r, n, &beta, d2, 0.5);
        let sp = spaces(d2, 3, knots);
        let spec = specs()[trial % 3];
        let model = Model::new(&ds, &sp, &spec).unwrap();
        let all: Vec<usize> = (0..sp.iter().map(|s| s.dimension()).sum()).collect();
        let (a, y) = whitened_joint(&ds, &sp, &spec, &all);
        let theta = lstsq(&a, &y);
        let beta_joint = theta.rows(0, d1).into_owned();
        assert!(rel_err(&model.fit.beta_hat, &beta_joint) < 1e-8, "trial {trial}");
        let fitted_joint = &a * &theta;
        let (a_fit, _) = whitened_joint(&ds, &sp, &spec, &all);
        let mut ours = DVector::zeros(d1 + all.len());
        ours.rows_mut(0, d1).copy_from(&model.fit.beta_hat);
        ours.rows_mut(d1, all.len()).copy_from(&model.fit.gamma_hat);
        assert!(rel_err(&(&a_fit * &ours), &fitted_joint) < 1e-8, "trial {trial}");
    }
}

#[test]
fn projected_covariates_are_orthogonal_to_splines() {
    let mut r = rng(12);
    for spec in specs() {
        let ds = random_dataset(&mut r, 40, &[1.0, -2.0, 0.5], 2, 1.0);
        let sp = spaces(2, 3, 3);
        let design = WeightedDesign::new(&ds, &sp, &spec).unwrap();
        let xhat = project_out_splines(&design).unwrap();
        let mut cross = DMatrix::zeros(design.spline_width(), 3);
        for (i, xh) in xhat.iter().enumerate() {
            cross += design.basis(i).transpose() * design.vinv(i) * xh;
        }
        assert!(cross.amax() < 1e-8, "{}", cross.amax());
    }
}

#[test]
fn estimating_equations_hold_at_the_estimate() {
    let mut r = rng(13);
    for spec in specs() {
        let ds = random_dataset(&mut r, 60, &[2.0, 0.0, -1.0, 0.3], 2, 1.0);
        let sp = spaces(2, 3, 4);
        let model = Model::new(&ds, &sp, &spec).unwrap();
        let mut gx = DVector::zeros(4);
        let mut gb = DVector::zeros(model.design.spline_width());
        for (i, c) in ds.clusters().iter().enumerate() {
            let e = &c.y - &c.x * &model.fit.beta_hat - model.design.basis(i) * &model.fit.gamma_hat;
            assert!((&e - &model.fit.residuals[i]).amax() < 1e-10);
            let w = model.design.vinv(i) * e;
            gx += c.x.transpose() * &w;
            gb += model.design.basis(i).transpose() * &w;
        }
        let scale = ds.n_obs() as f64;
        assert!(gx.amax() / scale < 1e-8 && gb.amax() / scale < 1e-8);
    }
}

#[test]
fn exact_data_is_reproduced() {
    let mut r = rng(14);
    let sp = spaces(2, 2, 3);
    let gamma: Vec<f64> = (0..sp[0].dimension()).map(|s| (s as f64).cos()).collect();
    let gamma2: Vec<f64> = (0..sp[1].dimension()).map(|s| 0.5 * s as f64).collect();
    let beta = DVector::from_vec(vec![1.5, -0.7]);
    let clusters = (0..30)
        .map(|i| {
            let x = DMatrix::from_fn(3, 2, |_, _| normal(&mut r));
            let z = DMatrix::from_fn(3, 2, |_, _| r.random::<f64>());
            let mut y = &x * &beta;
            for j in 0..3 {
                y[j] += sp[0].evaluate(&gamma, z[(j, 0)]).unwrap() + sp[1].evaluate(&gamma2, z[(j, 1)]).unwrap();
            }
            Cluster::new(i.to_string(), y, x, z, None).unwrap()
        })
        .collect();
    let ds = ClusteredDataset::new(clusters).unwrap();
    let fit = Model::new(&ds, &sp, &WorkingCovarianceSpec::exchangeable(0.3)).unwrap().fit;
    assert!((&fit.beta_hat - &beta).amax() < 1e-10);
    for z in unit_grid(11) {
        let truth = sp[0].evaluate(&gamma, z).unwrap() + sp[1].evaluate(&gamma2, z).unwrap();
        let got = fit.curves[0].eval(z).unwrap() + fit.curves[1].eval(z).unwrap() + fit.intercept_shift;
        assert!((truth - got).abs() < 1e-9);
    }
}

#[test]
fn curves_are_centered_over_observed_values() {
    let mut r = rng(15);
    let ds = random_dataset(&mut r, 50, &[1.0], 2, 1.0);
    let sp = spaces(2, 3, 4);
    let fit = Model::new(&ds, &sp, &WorkingCovarianceSpec::independence()).unwrap().fit;
    for (l, space) in sp.iter().enumerate() {
        let z = ds.stacked_z_column(l);
        let mean: f64 = z.iter().map(|v| fit.curves[l].eval(*v).unwrap()).sum::<f64>() / z.len() as f64;
        assert!(mean.abs() < 1e-12);
        let j = space.dimension();
        let on_grid = centered_eta(&fit.gamma_hat.as_slice()[l * j..(l + 1) * j], space, &z, &[0.0, 0.5]).unwrap();
        assert!((on_grid[1] - fit.curves[l].eval(0.5).unwrap()).abs() < 1e-14);
    }
}

#[test]
fn intercept_column_is_identified() {
    let mut r = rng(16);
    let ds = random_dataset(&mut r, 40, &[1.0, 2.0], 2, 0.5).with_intercept();
    let sp = spaces(2, 3, 2);
    let model = Model::new(&ds, &sp, &WorkingCovarianceSpec::independence()).unwrap();
    assert_eq!(model.design.pinned(), &[0, sp[0].dimension()]);
    assert!(model.fit.gamma_hat[0] == 0.0);
    // the overall level is split between the intercept and the centering shift
    let level = model.fit.intercept(ds.intercept());
    let mean_y: f64 = ds.clusters().iter().map(|c| c.y.sum()).sum::<f64>() / ds.n_obs() as f64;
    let mean_xb: f64 =
        ds.clusters().iter().map(|c| (c.x.columns(1, 2) * model.fit.beta_hat.rows(1, 2)).sum()).sum::<f64>() / ds.n_obs() as f64;
    assert!((level - (mean_y - mean_xb)).abs() < 0.5);
}

#[test]
fn gamma_profile_matches_fit() {
    let mut r = rng(17);
    let ds = random_dataset(&mut r, 30, &[0.5, 1.0], 1, 1.0);
    let sp = spaces(1, 3, 2);
    let model = Model::new(&ds, &sp, &WorkingCovarianceSpec::independence()).unwrap();
    let blocks = assemble_blocks(&model.design);
    let g = profile_gamma(&model.fit.beta_hat, &blocks).unwrap();
    assert!((&g - &model.fit.gamma_hat).amax() < 1e-10);
    let other = DVector::from_vec(vec![3.0, -1.0]);
    assert!((profile_gamma(&other, &blocks).unwrap() - model.gamma(&other)).amax() < 1e-10);
}

#[test]
fn sandwich_with_working_covariance_as_truth_reduces_to_model_based() {
    let mut r = rng(18);
    let ds = random_dataset(&mut r, 40, &[1.0, -1.0, 0.5], 1, 1.0);
    let sp = spaces(1, 3, 3);
    let spec = WorkingCovarianceSpec::exchangeable(0.5);
    let design = WeightedDesign::new(&ds, &sp, &spec).unwrap();
    let xhat = project_out_splines(&design).unwrap();
    let vinv: Vec<_> = (0..ds.n()).map(|i| design.vinv(i).clone()).collect();
    let v: Vec<_> = vinv.iter().map(|m| m.clone().try_inverse().unwrap()).collect();
    let (omega, se) = sandwich_covariance(&xhat, &vinv, &v).unwrap();
    let mut bread = DMatrix::zeros(3, 3);
    for (x, w) in xhat.iter().zip(&vinv) {
        bread += x.transpose() * w * x;
    }
    let expected = bread.try_inverse().unwrap() * ds.n() as f64;
    assert!((&omega - &expected).amax() / expected.amax() < 1e-10);
    for k in 0..3 {
        assert!((se[k] - (expected[(k, k)] / ds.n() as f64).sqrt()).abs() < 1e-12);
    }
    assert!(omega.clone().symmetric_eigen().eigenvalues.min() > 0.0);
}

#[test]
fn sandwich_covariance_is_symmetric_psd() {
    let mut r = rng(19);
    for spec in specs() {
        let ds = random_dataset(&mut r, 35, &[1.0, 0.0, 2.0], 2, 1.0);
        let fit = Model::new(&ds, &spaces(2, 3, 2), &spec).unwrap().fit;
        assert!((&fit.omega_hat - fit.omega_hat.transpose()).amax() < 1e-12);
        assert!(fit.omega_hat.clone().symmetric_eigen().eigenvalues.min() > -1e-10);
    }
}

#[test]
fn spline_gram_is_well_conditioned() {
    let mut r = rng(20);
    let ds = random_dataset(&mut r, 400, &[1.0], 1, 1.0);
    for knots in [2, 4, 8] {
        let sp = spaces(1, 3, knots);
        let fit = Model::new(&ds, &sp, &WorkingCovarianceSpec::independence()).unwrap().fit;
        let (lo, hi) = fit.diagnostics.spline_eigen_range;
        let j = sp[0].dimension() as f64;
        // eigenvalues of n⁻¹ H_BB scale like 1/J on both ends
        assert!(lo * j > 0.05 && hi * j < 10.0, "J={j}: [{lo}, {hi}]");
    }
}

#[test]
fn too_many_knots_is_reported() {
    let mut r = rng(21);
    let ds = random_dataset(&mut r, 3, &[1.0], 1, 1.0);
    let err = Model::new(&ds, &spaces(1, 3, 30), &WorkingCovarianceSpec::independence()).unwrap_err();
    assert!(matches!(err, Error::TooManyKnots { .. } | Error::Schema(_)), "{err}");

    // few distinct z values with many knots: singular spline block
    let clusters = (0..40)
        .map(|i| {
            let z = DMatrix::from_element(2, 1, if i % 2 == 0 { 0.1 } else { 0.9 });
            Cluster::new(i.to_string(), DVector::from_vec(vec![i as f64, 1.0]), DMatrix::from_fn(2, 1, |a, _| (i * 2 + a) as f64), z, None)
                .unwrap()
        })
        .collect();
    let ds = ClusteredDataset::new(clusters).unwrap();
    let err = Model::new(&ds, &spaces(1, 3, 6), &WorkingCovarianceSpec::independence()).unwrap_err();
    assert!(matches!(err, Error::TooManyKnots { knots: 6 }), "{err}");
}

#[test]
fn collinear_covariates_are_reported() {
    let mut r = rng(22);
    let ds = random_dataset(&mut r, 30, &[1.0], 1, 1.0);
    let clusters = ds
        .clusters()
        .iter()
        .map(|c| {
            let x = DMatrix::from_fn(c.size(), 2, |i, j| if j == 0 { c.x[(i, 0)] } else { 2.0 * c.x[(i, 0)] });
            Cluster::new(c.id.clone(), c.y.clone(), x, c.z.clone(), None).unwrap()
        })
        .collect();
    let ds = ClusteredDataset::new(clusters).unwrap();
    assert!(matches!(Model::new(&ds, &spaces(1, 3, 2), &WorkingCovarianceSpec::independence()), Err(Error::Collinear)));

    // a covariate that is itself a spline function of z is absorbed by the spline fit
    let clusters = ds
        .clusters()
        .iter()
        .map(|c| {
            let x = DMatrix::from_fn(c.size(), 1, |i, _| c.z[(i, 0)] * c.z[(i, 0)]);
            Cluster::new(c.id.clone(), c.y.clone(), x, c.z.clone(), None).unwrap()
        })
        .collect();
    let ds = ClusteredDataset::new(clusters).unwrap();
    let design = WeightedDesign::new(&ds, &spaces(1, 3, 2), &WorkingCovarianceSpec::independence()).unwrap();
    let xhat = project_out_splines(&design).unwrap();
    assert!(xhat.iter().all(|x| x.amax() < 1e-10));
    assert!(matches!(Model::new(&ds, &spaces(1, 3, 2), &WorkingCovarianceSpec::independence()), Err(Error::Collinear)));
}

#[test]
fn invalid_working_covariance_is_rejected() {
    let mut r = rng(23);
    let ds = random_dataset(&mut r, 20, &[1.0], 1, 1.0);
    let err = Model::new(&ds, &spaces(1, 3, 2), &WorkingCovarianceSpec::exchangeable(1.2)).unwrap_err();
    assert!(matches!(err, Error::CovarianceParameter(_)));
}
