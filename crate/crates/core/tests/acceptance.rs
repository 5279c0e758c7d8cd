//! Acceptance checks. Runs without the libtest harness and prints one PASS/FAIL line
//! per criterion; the process exits nonzero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use aplm::estimator::{project_out_splines, WeightedDesign};
use aplm::penalized::{default_grid, penalized_objective, select_lambda, solve_penalized, SolverOptions};
use aplm::penalty::{hard_penalty, scad_derivative, scad_penalty, PenaltyKind, DEFAULT_SCAD_A};
use aplm::simulation::{generate_replicate, replicate_rng, run_study, SimConfig, SimMetrics};
use aplm::spline::unit_grid;
use aplm::{CovarianceKind, Model, PenaltySpec, SplineSpace, WorkingCovarianceSpec};
use common::*;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn study(n: usize, cov: CovarianceKind, reps: usize) -> SimMetrics {
    let mut cfg = SimConfig::new(n, cov, PenaltyKind::Scad);
    cfg.replicates = reps;
    run_study(&cfg).unwrap()
}

/// SCAD derivative written out from its definition, for β ≥ 0.
fn scad_derivative_reference(b: f64, lambda: f64, a: f64) -> f64 {
    let low = if b <= lambda { 1.0 } else { 0.0 };
    let high = if b > lambda { 1.0 } else { 0.0 };
    lambda * (low + (a * lambda - b).max(0.0) / ((a - 1.0) * lambda) * high)
}

/// ∫₀^β p'(t) dt by Simpson's rule on each linear piece of p'.
fn scad_quadrature(b: f64, lambda: f64, a: f64) -> f64 {
    let mut cuts = vec![0.0];
    cuts.extend([lambda, a * lambda].into_iter().filter(|c| *c < b));
    cuts.push(b);
    cuts.windows(2)
        .map(|w| {
            let (lo, hi) = (w[0], w[1]);
            let f = |t: f64| scad_derivative(t, lambda, a);
            (hi - lo) / 6.0 * (f(lo) + 4.0 * f(0.5 * (lo + hi)) + f(hi))
        })
        .sum()
}

fn penalty_analytics() -> Outcome {
    let a = DEFAULT_SCAD_A;
    let mut worst_quad: f64 = 0.0;
    let mut mismatches = 0;
    for lambda in [0.05, 0.7, 2.5] {
        for i in 0..1000 {
            let b = 5.0 * a * lambda * i as f64 / 999.0;
            if scad_derivative(b, lambda, a).to_bits() != scad_derivative_reference(b, lambda, a).to_bits() {
                mismatches += 1;
            }
            worst_quad = worst_quad.max((scad_penalty(b, lambda, a) - scad_quadrature(b, lambda, a)).abs());
            if b >= lambda && hard_penalty(b, lambda) != lambda * lambda {
                mismatches += 1;
            }
        }
        for b in [lambda, a * lambda] {
            if scad_derivative(b, lambda, a) != scad_derivative_reference(b, lambda, a) {
                mismatches += 1;
            }
        }
    }
    check(mismatches == 0 && worst_quad < 1e-9, format!("{mismatches} mismatches, max quadrature gap {worst_quad:.2e}"))
}

fn solver_oracles() -> Outcome {
    let mut r = rng(2024);
    let specs = [
        WorkingCovarianceSpec::independence(),
        WorkingCovarianceSpec::exchangeable(0.6),
        WorkingCovarianceSpec::ar1(0.5),
    ];
    let mut worst: f64 = 0.0;
    for trial in 0..50 {
        let n = r.random_range(25..=50);
        let d1 = r.random_range(1..=8);
        let d2 = r.random_range(1..=2);
        let beta: Vec<f64> = (0..d1).map(|_| normal(&mut r)).collect();
        let ds = random_dataset(&mut r, n, &beta, d2, 0.5);
        let sp = spaces(d2, 3, r.random_range(0..=3));
        let spec = specs[trial % 3];
        let model = Model::new(&ds, &sp, &spec).map_err(|e| format!("trial {trial}: {e}"))?;
        let all: Vec<usize> = (0..sp.iter().map(SplineSpace::dimension).sum()).collect();
        let (a, y) = whitened_joint(&ds, &sp, &spec, &all);
        let joint = lstsq(&a, &y);
        worst = worst.max(rel_err(&model.fit.beta_hat, &joint.rows(0, d1).into_owned()));
    }
    let mut disagreements = 0;
    for trial in 0..200 {
        let d1 = r.random_range(1..=4);
        let beta: Vec<f64> = (0..d1)
            .map(|_| if r.random_bool(0.5) { (2.0 + r.random::<f64>()) * if r.random_bool(0.5) { 1.0 } else { -1.0 } } else { 0.0 })
            .collect();
        let n_obs = r.random_range(20..=50);
        let ds = parametric_instance(&mut r, n_obs, &beta, 0.05);
        let model = Model::new(&ds, &[], &WorkingCovarianceSpec::independence()).unwrap();
        let kind = if trial % 2 == 0 { PenaltyKind::Scad } else { PenaltyKind::Hard };
        let spec = PenaltySpec::new(kind, vec![0.4; d1]);
        let fit = solve_penalized(&model, &spec, &SolverOptions::default()).map_err(|e| e.to_string())?;
        if fit.active_set != brute_force_active_set(&model, &spec) {
            disagreements += 1;
        }
    }
    check(
        worst < 1e-8 && disagreements == 0,
        format!("max relative gap to joint solve {worst:.2e}; {disagreements}/200 active-set disagreements"),
    )
}

fn within(v: f64, target: f64, rel: f64) -> bool {
    (v - target).abs() <= rel * target
}

fn table1(ex400: &SimMetrics, wi400: &SimMetrics, others: &[SimMetrics]) -> Outcome {
    let mut failures = Vec::new();
    if !(4.6..=5.0).contains(&ex400.c) {
        failures.push(format!("C {}", ex400.c));
    }
    if ex400.i > 0.05 {
        failures.push(format!("I {}", ex400.i));
    }
    if !within(ex400.rmse, 0.0733, 0.35) {
        failures.push(format!("EX RMSE {}", ex400.rmse));
    }
    if !within(wi400.rmse, 0.2689, 0.35) || wi400.rmse <= ex400.rmse {
        failures.push(format!("WI RMSE {}", wi400.rmse));
    }
    let mrme: Vec<String> = others
        .iter()
        .chain([ex400, wi400])
        .map(|m| {
            if m.mrme >= 100.0 {
                failures.push(format!("MRME {} at n={} {}", m.mrme, m.n, m.covariance.name()));
            }
            format!("{}/{}={:.1}", m.n, m.covariance.name(), m.mrme)
        })
        .collect();
    let detail = format!(
        "EX n=400: C={:.2} I={:.2} RMSE={:.4}; WI n=400 RMSE={:.4}; MRME {}",
        ex400.c,
        ex400.i,
        ex400.rmse,
        wi400.rmse,
        mrme.join(" ")
    );
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; failed: {}", failures.join(", ")))
    }
}

fn table2(ex400: &SimMetrics) -> Outcome {
    let s = &ex400.sd_table[0];
    let ratio = s.sd_m / s.sd;
    check((0.75..=1.35).contains(&ratio), format!("SD={:.4} SD_m={:.4} ratio {ratio:.3}", s.sd, s.sd_m))
}

fn asymptotics(ex400: &SimMetrics, ex100: &SimMetrics) -> Outcome {
    let coverage_ok = ex400.coverage.iter().all(|c| (0.88..=0.99).contains(c));
    let ise_ok = (0..2).all(|l| ex400.eta_mise[l] < ex100.eta_mise[l]);
    check(
        coverage_ok && ise_ok && ex400.replicates == 200,
        format!(
            "coverage {:?}; mean ISE n=100 {:.4}/{:.4}, n=400 {:.4}/{:.4}",
            ex400.coverage, ex100.eta_mise[0], ex100.eta_mise[1], ex400.eta_mise[0], ex400.eta_mise[1]
        ),
    )
}

fn selection_consistency(ex400: &SimMetrics) -> Outcome {
    check(
        ex400.exact_rate >= 0.85 && ex400.replicates == 200,
        format!("exact support in {:.3} of {} replicates ({} excluded)", ex400.exact_rate, ex400.replicates, ex400.excluded),
    )
}

fn property_suites() -> Outcome {
    let mut notes = Vec::new();
    let mut pou: f64 = 0.0;
    for degree in 1..=4 {
        for knots in [0, 1, 4, 10] {
            let s = SplineSpace::new(degree, knots).unwrap();
            for z in unit_grid(1001) {
                pou = pou.max((s.eval_basis(z).unwrap().iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    notes.push(format!("partition of unity {pou:.1e}"));

    let mut r = rng(77);
    let (mut ortho, mut ee): (f64, f64) = (0.0, 0.0);
    for spec in [WorkingCovarianceSpec::independence(), WorkingCovarianceSpec::exchangeable(0.7), WorkingCovarianceSpec::ar1(0.4)] {
        let ds = random_dataset(&mut r, 60, &[1.0, -0.5, 0.0, 2.0], 2, 1.0);
        let sp = spaces(2, 3, 4);
        let design = WeightedDesign::new(&ds, &sp, &spec).unwrap();
        let xhat = project_out_splines(&design).unwrap();
        let mut cross = DMatrix::zeros(design.spline_width(), 4);
        for (i, xh) in xhat.iter().enumerate() {
            cross += design.basis(i).transpose() * design.vinv(i) * xh;
        }
        ortho = ortho.max(cross.amax());
        let model = Model::new(&ds, &sp, &spec).unwrap();
        let mut g = DVector::zeros(4 + model.design.spline_width());
        for (i, c) in ds.clusters().iter().enumerate() {
            let w = model.design.vinv(i) * &model.fit.residuals[i];
            let mut joint = DMatrix::zeros(c.size(), g.len());
            joint.columns_mut(0, 4).copy_from(&c.x);
            joint.columns_mut(4, model.design.spline_width()).copy_from(model.design.basis(i));
            g += joint.transpose() * w;
        }
        ee = ee.max(g.amax() / ds.n_obs() as f64);
    }
    notes.push(format!("orthogonality {ortho:.1e}"));
    notes.push(format!("estimating equations {ee:.1e}"));

    let mut rises = 0;
    for seed in 0..10 {
        let cfg = SimConfig::new(100, CovarianceKind::Ex, PenaltyKind::Scad);
        let ds = generate_replicate(&cfg, &mut replicate_rng(seed, 0)).unwrap();
        let model = Model::new(&ds, &cfg.spaces().unwrap(), &WorkingCovarianceSpec::exchangeable(0.9)).unwrap();
        for kind in [PenaltyKind::Scad, PenaltyKind::Hard] {
            for lambda in [0.1, 0.5, 2.0] {
                let spec = PenaltySpec::new(kind, model.fit.se.iter().map(|s| lambda * s).collect());
                let fit = solve_penalized(&model, &spec, &SolverOptions::default()).unwrap();
                rises += fit.objective_path.windows(2).filter(|w| w[1] > w[0]).count();
                let end = penalized_objective(&model.profiled, &spec, &fit.beta_p);
                if end > fit.objective_path[0] {
                    rises += 1;
                }
            }
        }
    }
    notes.push(format!("{rises} objective increases"));

    let mut cfg = SimConfig::new(100, CovarianceKind::Ex, PenaltyKind::Scad);
    cfg.replicates = 8;
    let pool = |t| rayon::ThreadPoolBuilder::new().num_threads(t).build().unwrap();
    let one = pool(1).install(|| run_study(&cfg).unwrap());
    let four = pool(4).install(|| run_study(&cfg).unwrap());
    let ds = generate_replicate(&cfg, &mut replicate_rng(3, 0)).unwrap();
    let model = Model::new(&ds, &cfg.spaces().unwrap(), &WorkingCovarianceSpec::exchangeable(0.9)).unwrap();
    let base = PenaltySpec::scad(vec![0.0; 8]);
    let sel = |t| pool(t).install(|| select_lambda(&model, &base, &default_grid(), &SolverOptions::default()).unwrap());
    let (s1, s4) = (sel(1), sel(4));
    let deterministic = one == four && s1.0.beta_p == s4.0.beta_p && s1.1.selected == s4.1.selected;
    notes.push(format!("thread-count determinism {deterministic}"));

    check(pou < 1e-12 && ortho < 1e-8 && ee < 1e-8 && rises == 0 && deterministic, notes.join(", "))
}

fn run(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
    });
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("PASS {id} {name} ({secs:.1}s): {detail}");
            true
        }
        Err(detail) => {
            println!("FAIL {id} {name} ({secs:.1}s): {detail}");
            false
        }
    }
}

fn main() {
    let mut ok = true;
    ok &= run(1, "penalty analytics", penalty_analytics);
    ok &= run(2, "solver oracle equivalence", solver_oracles);

    let start = Instant::now();
    let ex400 = study(400, CovarianceKind::Ex, 100);
    let wi400 = study(400, CovarianceKind::Wi, 100);
    let mut others = Vec::new();
    for n in [100, 200] {
        for cov in [CovarianceKind::Ex, CovarianceKind::Ar1, CovarianceKind::Wi] {
            others.push(study(n, cov, 100));
        }
    }
    others.push(study(400, CovarianceKind::Ar1, 100));
    let ex400_long = study(400, CovarianceKind::Ex, 200);
    println!("simulation studies finished in {:.1}s", start.elapsed().as_secs_f64());

    ok &= run(3, "selection table", || table1(&ex400, &wi400, &others));
    ok &= run(4, "standard error table", || table2(&ex400));
    ok &= run(5, "coverage and curve error", || asymptotics(&ex400_long, &others[0]));
    ok &= run(6, "selection consistency", || selection_consistency(&ex400_long));
    ok &= run(7, "property suites", property_suites);
    if !ok {
        std::process::exit(1);
    }
}
