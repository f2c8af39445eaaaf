use mfimpute::factors::{self, FactorMethod};
use mfimpute::linalg::Mat;
use mfimpute::simulation::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Mat::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

/// Least squares through the SVD, independent of the normal equations.
fn lstsq(x: &Mat, y: &Mat) -> Mat {
    x.clone().svd(true, true).solve(y, 1e-14).unwrap()
}

#[test]
fn trace_ratio_oracle_and_limits() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f = randn(&mut rng, 50, 2);
    let fhat = &f * randn(&mut rng, 2, 2) + randn(&mut rng, 50, 2) * 0.7;
    let m = metric_trace_ratio(&f, &fhat).unwrap();
    let resid = &f - &fhat * lstsq(&fhat, &f);
    let oracle = 1.0 - resid.norm_squared() / f.norm_squared();
    assert!((m - oracle).abs() < 1e-10);

    let g = Mat::from_row_slice(2, 2, &[2.0, 0.3, -0.7, 1.1]);
    assert!((metric_trace_ratio(&f, &(&f * g)).unwrap() - 1.0).abs() < 1e-10);

    // columns orthogonal to F
    let z = randn(&mut rng, 50, 2);
    let orth = &z - &f * lstsq(&f, &z);
    assert!(metric_trace_ratio(&f, &orth).unwrap().abs() < 1e-10);

    let deficient = Mat::from_fn(50, 2, |t, _| f[(t, 0)]);
    assert!(metric_trace_ratio(&f, &deficient).is_err());
}

#[test]
fn r2_oracle_and_limits() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let f = randn(&mut rng, 60, 3);
    let fhat = &f * randn(&mut rng, 3, 3) + randn(&mut rng, 60, 3);
    let mut z = Mat::from_element(60, 4, 1.0);
    z.columns_mut(1, 3).copy_from(&fhat);
    for j in 0..3 {
        let y = f.columns(j, 1).into_owned();
        let resid = &y - &z * lstsq(&z, &y);
        let centered = y.add_scalar(-y.mean());
        let oracle = 1.0 - resid.norm_squared() / centered.norm_squared();
        let col: Vec<f64> = y.iter().copied().collect();
        assert!((metric_r2_per_factor(&col, &fhat).unwrap() - oracle).abs() < 1e-10);
    }
    let col: Vec<f64> = f.column(1).iter().copied().collect();
    assert!((metric_r2_per_factor(&col, &f).unwrap() - 1.0).abs() < 1e-10);

    // orthogonal to the column and a constant
    let mut base = Mat::from_element(60, 2, 1.0);
    base.set_column(1, &f.column(1));
    let w = randn(&mut rng, 60, 2);
    let orth = &w - &base * lstsq(&base, &w);
    assert!(metric_r2_per_factor(&col, &orth).unwrap().abs() < 1e-10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn trace_ratio_is_rotation_invariant(seed in 0u64..10_000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = randn(&mut rng, 40, 2);
        let fhat = randn(&mut rng, 40, 2) + &f;
        let g = Mat::from_row_slice(2, 2, &[1.5, a, b, -1.0 - a * b]);
        prop_assume!(g.determinant().abs() > 0.1);
        let m0 = metric_trace_ratio(&f, &fhat).unwrap();
        let m1 = metric_trace_ratio(&f, &(&fhat * g)).unwrap();
        prop_assert!((m0 - m1).abs() < 1e-10);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&m0));
    }

    #[test]
    fn block_counts_sum_to_total(nsim in 3usize..2000, a in 0.05f64..0.9) {
        let shares = [a, (1.0 - a) / 2.0, (1.0 - a) / 2.0];
        prop_assert_eq!(block_counts(&shares, nsim).iter().sum::<usize>(), nsim);
        prop_assert_eq!(block_counts(&[0.4, 0.3, 0.3], nsim).iter().sum::<usize>(), nsim);
    }
}

#[test]
fn full_width_uses_every_row_once_and_seeds_are_deterministic() {
    let spec = synthetic_dgp2();
    let a = simulate_panel(&spec, spec.n(), 11).unwrap();
    assert_eq!(a.rows, (0..spec.n()).collect::<Vec<_>>());
    assert_eq!((a.x.nrows(), a.x.ncols(), a.factors.ncols()), (spec.t, spec.n(), spec.r()));
    let b = simulate_panel(&spec, spec.n(), 11).unwrap();
    assert!(a.x.iter().zip(b.x.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    let c = simulate_panel(&spec, spec.n(), 12).unwrap();
    assert_ne!(a.x, c.x);
    let narrow = simulate_panel(&spec, 10, 11).unwrap();
    let blocks = spec.blocks();
    let per_block: Vec<usize> = blocks
        .iter()
        .map(|b| narrow.rows.iter().filter(|i| b.contains(i)).count())
        .collect();
    assert_eq!(per_block, vec![4, 3, 3]);
    assert!(simulate_panel(&spec, 2, 0).is_err());
    assert!(simulate_panel(&spec, spec.n() + 1, 0).is_err());
}

#[test]
fn simulated_idiosyncratic_persistence_matches_spec() {
    let spec = synthetic_dgp1();
    let sim = simulate_panel(&spec, spec.n(), 3).unwrap();
    let common = &sim.factors * spec.loadings.transpose();
    let mut errors: Vec<f64> = (0..spec.n())
        .map(|i| {
            let e: Vec<f64> = (0..spec.t).map(|s| sim.x[(s, i)] - common[(s, i)]).collect();
            (mfimpute::linalg::ar1_coef(&e) - spec.idio_ar[i]).abs()
        })
        .collect();
    errors.sort_by(f64::total_cmp);
    let median = errors[errors.len() / 2];
    assert!(median < 0.1, "median |ρ̂ - ρ| = {median}");
    // re-estimated from PC residuals as well
    let est = factors::estimate_pc(&sim.x, 3).unwrap();
    let (rho, _) = factors::residual_ar_coefs(&sim.x, &est);
    let mut errors: Vec<f64> = rho.iter().zip(&spec.idio_ar).map(|(a, b)| (a - b).abs()).collect();
    errors.sort_by(f64::total_cmp);
    assert!(errors[errors.len() / 2] < 0.1);
}

#[test]
fn calibrate_then_simulate_preserves_variance_shares() {
    let mut spec = synthetic_dgp1();
    spec.t = 5000;
    let sim = simulate_panel(&spec, spec.n(), 5).unwrap();
    let back = calibrate_dgp(&sim.x, 3, 2, CalibrationMethod::Pc, vec![0.4, 0.3, 0.3], "round-trip").unwrap();
    let mut a = spec.factor_variance_shares().unwrap();
    let mut b = back.factor_variance_shares().unwrap();
    a.sort_by(|x, y| y.total_cmp(x));
    b.sort_by(|x, y| y.total_cmp(x));
    let total_a: f64 = a.iter().sum();
    let total_b: f64 = b.iter().sum();
    assert!((total_b / total_a - 1.0).abs() < 0.2, "{a:?} vs {b:?}");
    for (x, y) in a.iter().zip(&b) {
        assert!((y / x - 1.0).abs() < 0.2, "{a:?} vs {b:?}");
    }
    assert_eq!(back.t, 5000);
    assert_eq!(back.var_order(), 2);
    assert!(back.validate().is_ok());

    let mle = calibrate_dgp(&sim.x.rows(0, 600).into_owned(), 3, 1, CalibrationMethod::Mle, vec![0.4, 0.3, 0.3], "mle");
    assert!(mle.is_ok());
}

#[test]
fn comparison_shape_and_thread_independence() {
    let spec = synthetic_dgp2();
    let config = ComparisonConfig {
        estimators: vec![FactorMethod::Pc, FactorMethod::PcGlsH],
        nsim_grid: vec![10, 20, 30],
        reps: 1,
        seed: 4,
        var_order: 1,
    };
    let table = run_estimator_comparison(&spec, &config).unwrap();
    assert_eq!(table.cells.len(), 6);
    let mut out = Vec::new();
    table.write_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().count(), 1 + config.nsim_grid.len());

    let config = ComparisonConfig { reps: 6, ..config };
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| run_estimator_comparison(&spec, &config).unwrap())
    };
    let (one, four) = (run(1), run(4));
    let mut a = Vec::new();
    let mut b = Vec::new();
    one.write_records_csv(&mut a).unwrap();
    four.write_records_csv(&mut b).unwrap();
    assert_eq!(a, b);
    assert_eq!(one.cells, four.cells);
}

#[test]
fn shrinkage_gap_vanishes_without_prior_information() {
    let spec = synthetic_dgp2();
    let sim = simulate_panel(&spec, spec.n(), 8).unwrap();
    let sf = spec.factor_cov().unwrap();
    let gap = shrinkage_gap(&sim.x, &spec.loadings, &spec.idio_var, &sf).unwrap();
    assert!(gap > 0.0);
    let flat = shrinkage_gap(&sim.x, &spec.loadings, &spec.idio_var, &(sf * 1e8)).unwrap();
    assert!(flat < gap * 1e-6);
}
