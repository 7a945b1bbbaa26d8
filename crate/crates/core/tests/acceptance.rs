//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p compadre --release --test acceptance -- --nocapture`.

use std::time::Instant;

use compadre::simulation::{
    aggregate, run_campaign, simulate_replicate, AggregateRow, Method, ReplicateRow, SimSetting, TrueFunction,
    TruthDesign,
};
use compadre::solvers::{graphical_lasso, group_lasso_smooth, lasso, mixed_model_refit, SmoothBlock};
use compadre::spline_basis::{build_osullivan, quantile_knots, standardize, DRBasis};
use compadre::{fit, FitConfig, Mode, PenaltySpec, PrecisionPenalty};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const REPS: u64 = 20;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn normal_mat(n: usize, p: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(n, p, |_, _| rng.sample(StandardNormal))
}

/// Columns orthogonal to the constant with `X'X = n I`.
fn centered_orthogonal(n: usize, p: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut m = normal_mat(n, p, rng);
    for mut c in m.column_iter_mut() {
        let mean = c.mean();
        c.add_scalar_mut(-mean);
    }
    m.qr().q() * (n as f64).sqrt()
}

fn soft(x: f64, t: f64) -> f64 {
    x.signum() * (x.abs() - t).max(0.0)
}

fn solver_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 80;

    let x = centered_orthogonal(n, 6, &mut rng);
    let y = DVector::from_fn(n, |i, _| 1.5 * x[(i, 0)] - 0.4 * x[(i, 4)] + rng.sample::<f64, _>(StandardNormal));
    let mut lasso_err = 0.0f64;
    for lambda in [0.01, 0.1, 0.3, 1.0] {
        let fit = lasso(&x, &y, lambda).unwrap();
        let c = x.tr_mul(&y) / n as f64;
        for j in 0..6 {
            lasso_err = lasso_err.max((fit.coefs[j] - soft(c[j], lambda)).abs());
        }
    }

    let s = DMatrix::from_row_slice(2, 2, &[1.3, -0.55, -0.55, 0.8]);
    let mut glasso_err = 0.0f64;
    for lambda in [0.0, 0.05, 0.3, 0.6] {
        let w = DMatrix::from_row_slice(2, 2, &[1.3, soft(-0.55, lambda), soft(-0.55, lambda), 0.8]);
        let expect = w.try_inverse().unwrap();
        let est = graphical_lasso(&s, lambda).unwrap();
        glasso_err = glasso_err.max((est.precision - expect).abs().max());
    }

    let u = centered_orthogonal(n, 5, &mut rng);
    let gamma = DVector::from_element(5, 1.0);
    let y = DVector::from_fn(n, |i, _| 0.7 * u[(i, 1)] - 0.3 * u[(i, 3)] + rng.random_range(-0.5..0.5));
    let mut group_err = 0.0f64;
    for (lambda2, lambda3) in [(0.05, 0.0), (0.2, 0.5), (0.4, 2.0), (2.0, 0.1)] {
        let block = [SmoothBlock { design: &u, gamma: &gamma, lambda3 }];
        let fit = group_lasso_smooth(&block, &y, lambda2).unwrap();
        let c = u.tr_mul(&y) / n as f64;
        let shrink = (1.0 - lambda2 * (1.0 + lambda3).sqrt() / c.norm()).max(0.0);
        group_err = group_err.max((&fit.blocks[0] - c * shrink).abs().max());
    }

    let xs: Vec<Vec<f64>> = (0..2).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let drs: Vec<DRBasis> = xs.iter().map(|v| DRBasis::from_covariate(v, 9).unwrap()).collect();
    let mut fixed = DMatrix::from_element(n, 3, 1.0);
    fixed.set_column(1, &drs[0].linear_col);
    fixed.set_column(2, &drs[1].linear_col);
    let y = DVector::from_fn(n, |i, _| (3.0 * xs[0][i]).sin() + xs[1][i] + rng.sample::<f64, _>(StandardNormal) * 0.3);
    let lambdas = [0.7, 25.0];
    let blocks: Vec<SmoothBlock> = drs
        .iter()
        .zip(lambdas)
        .map(|(d, l)| SmoothBlock { design: &d.nonlinear_cols, gamma: &d.basis.gamma_nl, lambda3: l })
        .collect();
    let mm = mixed_model_refit(&fixed, &blocks, &y).unwrap();
    let k = drs[0].nonlinear_cols.ncols();
    let mut full = DMatrix::zeros(n, 3 + 2 * k);
    full.columns_mut(0, 3).copy_from(&fixed);
    full.columns_mut(3, k).copy_from(&drs[0].nonlinear_cols);
    full.columns_mut(3 + k, k).copy_from(&drs[1].nonlinear_cols);
    let mut lhs = full.tr_mul(&full);
    for (b, l) in lambdas.iter().enumerate() {
        for i in 0..k {
            lhs[(3 + b * k + i, 3 + b * k + i)] += l * drs[b].basis.gamma_nl[i];
        }
    }
    let dense = lhs.lu().solve(&full.tr_mul(&y)).unwrap();
    let mut mm_err = (mm.linear_coefs.clone() - dense.rows(0, 3)).abs().max();
    for b in 0..2 {
        mm_err = mm_err.max((&mm.nonlinear_coefs[b] - dense.rows(3 + b * k, k)).abs().max());
    }

    check(
        lasso_err < 1e-6 && glasso_err < 1e-6 && group_err < 1e-6 && mm_err < 1e-8,
        format!(
            "lasso {lasso_err:.1e} (<1e-6), glasso {glasso_err:.1e} (<1e-6), group lasso {group_err:.1e} (<1e-6), mixed model {mm_err:.1e} (<1e-8)"
        ),
    )
}

fn demmler_reinsch_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 150;
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let dr = DRBasis::from_covariate(&x, 9).unwrap();
    let z = standardize(&x).unwrap().values;
    let knots = quantile_knots(z.as_slice(), 9).unwrap();
    let raw = build_osullivan(z.as_slice(), &knots).unwrap();
    let b = &raw.design;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        for lambda in [0.0, 1.0, 100.0] {
            let lhs = b.tr_mul(b) + &raw.penalty * lambda;
            let direct = b * lhs.lu().solve(&b.tr_mul(&y)).unwrap();
            worst = worst.max((dr.smooth(&y, lambda) - &direct).norm() / direct.norm());
        }
    }
    check(worst < 1e-8, format!("max relative error {worst:.1e} over 20 targets x 3 penalties (<1e-8)"))
}

fn campaign(delta: f64, rho: f64, design: TruthDesign, methods: &[Method]) -> (Vec<ReplicateRow>, Vec<AggregateRow>) {
    let setting = SimSetting { delta, rho, seed: 2024, design, ..SimSetting::default() };
    let rows = run_campaign(&setting, REPS, methods, &FitConfig::default()).unwrap();
    let agg = aggregate(&rows);
    (rows, agg)
}

fn row(agg: &[AggregateRow], m: Method) -> &AggregateRow {
    agg.iter().find(|a| a.method == m).unwrap()
}

fn median(values: Option<compadre::simulation::Summary>) -> f64 {
    values.map_or(f64::NAN, |s| s.median)
}

fn selection_gap(agg: &[AggregateRow]) -> Outcome {
    let c = row(agg, Method::Compadre);
    let p = row(agg, Method::Padre);
    let (ct, pt, cf) = (median(c.tpr), median(p.tpr), median(c.fpr));
    check(
        ct >= 0.55 && pt <= 0.40 && cf <= 0.05,
        format!("CoMPAdRe TPR {ct:.3} (>=0.55), PAdRe TPR {pt:.3} (<=0.40), CoMPAdRe FPR {cf:.3} (<=0.05)"),
    )
}

fn efficiency_trend(high: &[AggregateRow], low: &[AggregateRow]) -> Outcome {
    let h = median(row(high, Method::Compadre).mad_ratio);
    let l = median(row(low, Method::Compadre).mad_ratio);
    check(
        h <= 0.70 && (0.85..=1.15).contains(&l),
        format!("MAD ratio {h:.3} at rho 0.9 (<=0.70), {l:.3} at rho 0.2 (in [0.85, 1.15])"),
    )
}

fn high_signal(agg: &[AggregateRow]) -> Outcome {
    let c = row(agg, Method::Compadre);
    let (t, f) = (median(c.tpr), median(c.fpr));
    check(t >= 0.95 && f <= 0.05, format!("CoMPAdRe TPR {t:.3} (>=0.95), FPR {f:.3} (<=0.05)"))
}

fn shape_recovery(by_function: &[(TrueFunction, Vec<AggregateRow>)]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (f, agg) in by_function {
        let l = median(row(agg, Method::Lasso).tpr);
        let c = median(row(agg, Method::Compadre).tpr);
        pass &= l <= 0.10 && c >= 0.90;
        parts.push(format!("{}: lasso TPR {l:.3} (<=0.10), CoMPAdRe TPR {c:.3} (>=0.90)", f.name()));
    }
    check(pass, parts.join("; "))
}

fn properties() -> Outcome {
    let mut failures = Vec::new();

    let data = simulate_replicate(&SimSetting { seed: 9, ..SimSetting::default() }, 0).unwrap();
    let y1 = data.y.columns(0, 1).clone_owned();
    let joint = fit(&y1, &data.x, &FitConfig::default()).unwrap();
    let marginal = fit(&y1, &data.x, &FitConfig { mode: Mode::Padre, ..FitConfig::default() }).unwrap();
    if joint != marginal {
        failures.push("Q=1 modes differ".to_string());
    }

    let setting = SimSetting { delta: 0.5, rho: 0.7, seed: 77, ..SimSetting::default() };
    let methods = [Method::Compadre, Method::Padre, Method::Lasso];
    let a = run_campaign(&setting, 3, &methods, &FitConfig::default()).unwrap();
    let b = run_campaign(&setting, 3, &methods, &FitConfig::default()).unwrap();
    if format!("{a:?}") != format!("{b:?}") {
        failures.push("seeded campaigns differ".to_string());
    }

    // mean squared error trace at fixed penalties
    let fixed = FitConfig {
        lambda1: PenaltySpec::Fixed(vec![0.05]),
        lambda2: PenaltySpec::Fixed(vec![0.02]),
        lambda4: PrecisionPenalty::Fixed(0.05),
        ..FitConfig::default()
    };
    let runs = 20;
    let mut rises = 0;
    for seed in 0..runs {
        let s = SimSetting { n: 120, p: 6, q: 5, rho: 0.8, delta: 0.75, seed: 100 + seed, ..SimSetting::default() };
        let d = simulate_replicate(&s, 0).unwrap();
        let r = fit(&d.y, &d.x, &fixed).unwrap();
        if r.mse_trace.windows(2).any(|w| w[1] > w[0]) {
            rises += 1;
        }
    }
    let monotone = 1.0 - rises as f64 / runs as f64;
    if monotone < 0.95 {
        failures.push(format!("mse trace non-increasing in {:.0}% of runs (>=95%)", 100.0 * monotone));
    }

    let pass = failures.is_empty();
    let detail = if pass {
        format!("Q=1 bitwise, seeded campaigns identical, mse non-increasing in {:.0}% of runs", 100.0 * monotone)
    } else {
        failures.join("; ")
    };
    check(pass, detail)
}

#[test]
fn acceptance() {
    let start = Instant::now();
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    results.push((1, solver_oracles()));
    results.push((2, demmler_reinsch_equivalence()));

    let (_, hard) = campaign(0.25, 0.9, TruthDesign::Random, &[Method::Compadre, Method::Padre]);
    let (_, easy) = campaign(0.25, 0.2, TruthDesign::Random, &[Method::Compadre, Method::Padre]);
    let (_, strong) = campaign(2.0, 0.9, TruthDesign::Random, &[Method::Compadre]);
    let shapes: Vec<(TrueFunction, Vec<AggregateRow>)> = [TrueFunction::F2, TrueFunction::F4]
        .into_iter()
        .map(|f| (f, campaign(2.0, 0.7, TruthDesign::FunctionSpecific(f), &[Method::Compadre, Method::Lasso]).1))
        .collect();
    results.push((3, selection_gap(&hard)));
    results.push((4, efficiency_trend(&hard, &easy)));
    results.push((5, high_signal(&strong)));
    results.push((6, shape_recovery(&shapes)));
    results.push((7, properties()));

    for (k, o) in &results {
        println!("criterion {k}: {} | {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("acceptance finished in {:.0?}", start.elapsed());
    let failed: Vec<usize> = results.iter().filter(|(_, o)| !o.pass).map(|(k, _)| *k).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
