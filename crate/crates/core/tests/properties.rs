use compadre::model::{Effect, EffectLabels};
use compadre::simulation::{score, TrueFunction, TrueModel};
use compadre::solvers::lasso::lasso_objective;
use compadre::solvers::{graphical_lasso, lasso, lasso_with, problem_from_blocks, FactorKind, SmoothBlock, SolverOptions};
use compadre::spline_basis::{build_osullivan, quantile_knots, standardize, DRBasis};
use compadre::tuning::{fold_assignment, lambda_max_group, lambda_max_linear};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn uniform_x(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-2.0..3.0)).collect()
}

fn normal_vec(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

fn normal_mat(n: usize, p: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(n, p, |_, _| rng.sample(StandardNormal))
}

/// `B (B'B + lambda Omega)^-1 B' y` on the raw B-spline basis.
fn direct_smoother(x: &[f64], y: &DVector<f64>, lambda: f64) -> DVector<f64> {
    let z = standardize(x).unwrap().values;
    let knots = quantile_knots(z.as_slice(), 9).unwrap();
    let raw = build_osullivan(z.as_slice(), &knots).unwrap();
    let b = &raw.design;
    let lhs = b.tr_mul(b) + &raw.penalty * lambda;
    let coef = lhs.lu().solve(&b.tr_mul(y)).unwrap();
    b * coef
}

fn relative_error(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn bspline_rows_sum_to_one(n in 20usize..80, seed in any::<u64>()) {
        let x = uniform_x(n, seed);
        let z = standardize(&x).unwrap().values;
        let knots = quantile_knots(z.as_slice(), 9).unwrap();
        let raw = build_osullivan(z.as_slice(), &knots).unwrap();
        for row in raw.design.row_iter() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn penalty_annihilates_affine_coefficients(n in 20usize..80, seed in any::<u64>(), a in -3.0..3.0f64, c in -3.0..3.0f64) {
        let x = uniform_x(n, seed);
        let z = standardize(&x).unwrap().values;
        let knots = quantile_knots(z.as_slice(), 9).unwrap();
        let raw = build_osullivan(z.as_slice(), &knots).unwrap();
        // Greville abscissae reproduce affine functions exactly
        let t = {
            let (lo, hi) = knots.boundary();
            let mut t = vec![lo; 4];
            t.extend_from_slice(knots.interior());
            t.extend(std::iter::repeat_n(hi, 4));
            t
        };
        let k = knots.num_basis();
        let beta = DVector::from_fn(k, |i, _| a + c * (t[i + 1] + t[i + 2] + t[i + 3]) / 3.0);
        let fit = &raw.design * &beta;
        for (zi, fi) in z.iter().zip(fit.iter()) {
            prop_assert!((a + c * zi - fi).abs() < 1e-10);
        }
        // measured on the scale of the penalty and coefficients
        let quad = beta.dot(&(&raw.penalty * &beta)) / (raw.penalty.norm() * beta.norm_squared());
        prop_assert!(quad.abs() < 1e-10, "{}", quad);
    }

    #[test]
    fn demmler_reinsch_columns_orthonormal(n in 30usize..90, seed in any::<u64>()) {
        let x = uniform_x(n, seed);
        let dr = DRBasis::from_covariate(&x, 9).unwrap();
        let u = &dr.nonlinear_cols;
        let gram = u.tr_mul(u);
        prop_assert!((gram - DMatrix::identity(u.ncols(), u.ncols())).abs().max() < 1e-8);
        let ones = DVector::from_element(n, 1.0);
        prop_assert!(u.tr_mul(&ones).abs().max() < 1e-8);
        prop_assert!(u.tr_mul(&dr.linear_col).abs().max() < 1e-8);
        let g = dr.gamma_nl();
        prop_assert!(g.iter().zip(g.iter().skip(1)).all(|(a, b)| a <= b));
    }

    #[test]
    fn demmler_reinsch_matches_direct_smoother(n in 30usize..90, seed in any::<u64>()) {
        let x = uniform_x(n, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let y = normal_vec(n, &mut rng);
        let dr = DRBasis::from_covariate(&x, 9).unwrap();
        for lambda in [0.0, 1.0, 100.0] {
            let err = relative_error(&dr.smooth(&y, lambda), &direct_smoother(&x, &y, lambda));
            prop_assert!(err < 1e-8, "lambda {} error {}", lambda, err);
        }
    }

    #[test]
    fn smoother_invariant_to_affine_rescaling(n in 30usize..90, seed in any::<u64>(), scale in 0.01..100.0f64, shift in -50.0..50.0f64) {
        let x = uniform_x(n, seed);
        let moved: Vec<f64> = x.iter().map(|v| scale * v + shift).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let y = normal_vec(n, &mut rng);
        let a = DRBasis::from_covariate(&x, 9).unwrap();
        let b = DRBasis::from_covariate(&moved, 9).unwrap();
        for lambda in [0.0, 1.0, 100.0] {
            let diff = (a.smooth(&y, lambda) - b.smooth(&y, lambda)).abs().max();
            prop_assert!(diff < 1e-8, "lambda {} diff {}", lambda, diff);
        }
    }

    #[test]
    fn lasso_objective_never_rises(seed in any::<u64>(), frac in 0.01..0.9f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = normal_mat(40, 8, &mut rng);
        let y = x.column(0) * 2.0 - x.column(3) + normal_vec(40, &mut rng);
        let lambda = frac * lambda_max_linear(&x, &y);
        let mut last = f64::INFINITY;
        for sweeps in 1..12 {
            let opts = SolverOptions { tol: 1e-14, max_sweeps: sweeps };
            let fit = lasso_with(&x, &y, lambda, &opts, None).unwrap();
            let obj = lasso_objective(&x, &y, &fit);
            prop_assert!(obj <= last + 1e-12);
            last = obj;
        }
    }

    #[test]
    fn lasso_zero_at_lambda_max(seed in any::<u64>(), n in 10usize..60, p in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = normal_mat(n, p, &mut rng);
        let y = normal_vec(n, &mut rng);
        let fit = lasso(&x, &y, lambda_max_linear(&x, &y)).unwrap();
        prop_assert!(fit.coefs.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn group_lasso_zero_at_lambda_max(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 60;
        let bases: Vec<DRBasis> = (0..3)
            .map(|_| DRBasis::from_covariate(&(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>(), 9).unwrap())
            .collect();
        let y = normal_vec(n, &mut rng) + bases[0].linear_col.map(|v| v * v);
        let blocks: Vec<SmoothBlock> = bases
            .iter()
            .map(|b| SmoothBlock { design: &b.nonlinear_cols, gamma: &b.basis.gamma_nl, lambda3: 0.01 })
            .collect();
        let problem = problem_from_blocks(&blocks, &y, FactorKind::Cholesky).unwrap();
        let sol = problem.solve(lambda_max_group(&problem), None, &SolverOptions::group_lasso());
        prop_assert!(sol.theta.iter().all(|t| t.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn glasso_output_symmetric_pd(seed in any::<u64>(), q in 2usize..8, n in 3usize..40, lambda in 0.001..1.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = normal_mat(n, q, &mut rng);
        let mean = DVector::from_fn(q, |j, _| e.column(j).mean());
        let mut s = DMatrix::zeros(q, q);
        for row in e.row_iter() {
            let d = row.transpose() - &mean;
            s += &d * d.transpose();
        }
        s /= n as f64;
        let est = graphical_lasso(&s, lambda).unwrap();
        let p = &est.precision;
        prop_assert!(p.symmetric_eigenvalues().min() > 0.0);
        for a in 0..q {
            for b in 0..q {
                prop_assert!((p[(a, b)] - p[(b, a)]).abs() <= 1e-10 * p[(a, a)].abs().max(1.0));
                prop_assert_eq!(p[(a, b)] == 0.0, p[(b, a)] == 0.0);
            }
        }
    }

    #[test]
    fn fold_assignment_is_pure_and_balanced(n in 2usize..500, k in 2usize..10, seed in any::<u64>()) {
        prop_assume!(2 * k <= n);
        let a = fold_assignment(n, k, seed).unwrap();
        prop_assert_eq!(&a, &fold_assignment(n, k, seed).unwrap());
        let mut sizes = vec![0usize; k];
        for f in a {
            sizes[f] += 1;
        }
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn score_equivariant_under_permutation(seed in any::<u64>()) {
        let (p, q, n) = (6, 4, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pairs = Vec::new();
        let mut labels = Vec::new();
        for j in 0..p {
            for r in 0..q {
                if rng.random_bool(0.3) {
                    pairs.push((j, r, TrueFunction::ALL[rng.random_range(0..5)]));
                }
                labels.push([Effect::Null, Effect::Linear, Effect::Nonlinear][rng.random_range(0..3)]);
            }
        }
        let truth = TrueModel::new(p, q, &pairs).unwrap();
        let fitted = normal_mat(n, q, &mut rng);
        let true_f = normal_mat(n, q, &mut rng);
        let base = score(&EffectLabels::new(p, q, labels.clone()).unwrap(), &truth, &fitted, &true_f).unwrap();

        let mut pj: Vec<usize> = (0..p).collect();
        let mut pq: Vec<usize> = (0..q).collect();
        for i in (1..p).rev() { pj.swap(i, rng.random_range(0..=i)); }
        for i in (1..q).rev() { pq.swap(i, rng.random_range(0..=i)); }
        let pairs2: Vec<_> = pairs.iter().map(|&(j, r, f)| (pj[j], pq[r], f)).collect();
        let mut labels2 = vec![Effect::Null; p * q];
        for j in 0..p {
            for r in 0..q {
                labels2[pj[j] * q + pq[r]] = labels[j * q + r];
            }
        }
        let mut fitted2 = DMatrix::zeros(n, q);
        let mut true_f2 = DMatrix::zeros(n, q);
        for (r, &to) in pq.iter().enumerate() {
            fitted2.set_column(to, &fitted.column(r));
            true_f2.set_column(to, &true_f.column(r));
        }
        let moved = score(&EffectLabels::new(p, q, labels2).unwrap(), &TrueModel::new(p, q, &pairs2).unwrap(), &fitted2, &true_f2).unwrap();
        prop_assert_eq!(base.tpr, moved.tpr);
        prop_assert_eq!(base.fpr, moved.fpr);
        prop_assert!((base.mad - moved.mad).abs() < 1e-12);
    }

    #[test]
    fn function_curves_match_scalar_formulas(delta in 0.0..3.0f64) {
        for k in 0..20 {
            let x = -1.0 + 2.0 * k as f64 / 19.0;
            let expect = [
                delta * (1.0 - (-2.0 * x).exp()),
                delta * x * x,
                delta * x.powi(3),
                delta * (-x * x / 0.02).exp() / (0.1 * (2.0 * std::f64::consts::PI).sqrt()),
                delta * x,
            ];
            for (f, e) in TrueFunction::ALL.iter().zip(expect) {
                prop_assert!((f.eval(delta, x) - e).abs() < 1e-12);
            }
        }
    }
}
