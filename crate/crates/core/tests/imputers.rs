use mfimpute::grid::{periodic_keep_mask, MaskedSeries, TimeGrid};
use mfimpute::imputers::{
    self, ar1_cov, ar1_cov_matrix, fit_chow_lin, fit_chow_lin_series, impute_chow_lin_series,
    impute_em, impute_ks, impute_ks_star, impute_tp, impute_tp_series, impute_tp_star_series,
    KsStarOptions, Provenance, RhoSearch, SignRestriction, TpStarOptions,
};
use mfimpute::linalg::{Mat, Vector};
use mfimpute::state_space::EmOptions;
use mfimpute::{factors, Panel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Mat::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn ar1_path(rng: &mut ChaCha8Rng, len: usize, rho: f64, sd: f64) -> Vec<f64> {
    let mut u = normal(rng) * sd / (1.0 - rho * rho).sqrt();
    (0..len)
        .map(|_| {
            let e: f64 = StandardNormal.sample(rng);
            let out = u;
            u = rho * u + sd * e;
            out
        })
        .collect()
}

fn keep_every(values: &[f64], m: usize, phase: usize) -> MaskedSeries {
    MaskedSeries {
        values: values.to_vec(),
        observed: (0..values.len()).map(|s| s % m == phase).collect(),
    }
}

#[test]
fn tp_with_orthogonal_factors_bunches_at_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f = randn(&mut rng, 600, 2);
    let y: Vec<f64> = (0..600).map(|_| StandardNormal.sample(&mut rng)).collect();
    let out = impute_tp_series(&keep_every(&y, 3, 2), &f, false).unwrap();
    let fills: Vec<f64> = out.imputed_indices().iter().map(|&s| out.series[s]).collect();
    let sd = (fills.iter().map(|v| v * v).sum::<f64>() / fills.len() as f64).sqrt();
    assert!(sd < 0.2, "{sd}");
}

#[test]
fn cs_style_mask_imputes_two_thirds() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let f = randn(&mut rng, 504, 2);
    let y: Vec<f64> = (0..504).map(|s| f[(s, 0)] + 0.5 * normal(&mut rng)).collect();
    let keep = periodic_keep_mask(504, 12, &[2, 5, 8, 11]).unwrap();
    let series = MaskedSeries { values: y, observed: keep };
    let out = impute_tp_series(&series, &f, false).unwrap();
    assert_eq!(out.imputed_indices().len(), 504 * 2 / 3);
}

#[test]
fn tp_on_grid_uses_release_positions() {
    let grid = TimeGrid::fixed(3, 10).unwrap();
    let f = Mat::from_fn(30, 1, |s, _| (s as f64 * 0.3).sin() + 0.1 * s as f64);
    let y_low: Vec<f64> = (0..10).map(|t| 2.0 * f[(3 * t + 2, 0)]).collect();
    let out = impute_tp(&y_low, &f, &grid).unwrap();
    for s in 0..30 {
        assert!((out.series[s] - 2.0 * f[(s, 0)]).abs() < 1e-10);
    }
    assert_eq!(out.provenance[2], Provenance::Observed);
    assert_eq!(out.provenance[3], Provenance::Imputed);
}

fn factor_panel(rng: &mut ChaCha8Rng, t: usize, n: usize, r: usize, noise: f64) -> (Mat, Mat, Mat) {
    let f = randn(rng, t, r);
    let l = randn(rng, n, r);
    let x = &f * l.transpose() + randn(rng, t, n) * noise;
    (f, l, x)
}

fn with_masked_target(x: &Mat, m: usize) -> Panel {
    let n = x.ncols();
    let mask = mfimpute::ObservationMask::from_fn(x.nrows(), n, |s, i| i + 1 < n || s % m == m - 1);
    Panel::new(x.clone(), mask, (0..n).map(|i| format!("x{i}")).collect()).unwrap()
}

#[test]
fn em_recovers_noiseless_data_quickly() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (_, _, x) = factor_panel(&mut rng, 90, 8, 2, 0.0);
    let panel = with_masked_target(&x, 3);
    let out = impute_em(&panel, 7, 2, 100, 1e-10).unwrap();
    assert!(out.params.converged);
    assert!(out.params.iterations <= 3, "{}", out.params.iterations);
    for s in 0..90 {
        assert!((out.series[s] - x[(s, 7)]).abs() < 1e-8);
    }
}

#[test]
fn em_fixed_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (_, _, x) = factor_panel(&mut rng, 120, 10, 2, 0.5);
    let panel = with_masked_target(&x, 3);
    let tol = 1e-9;
    let out = impute_em(&panel, 9, 2, 5000, tol).unwrap();
    assert!(out.params.converged);
    // feed the completion back in as the starting point
    let mut refill = x.clone();
    for s in 0..120 {
        refill[(s, 9)] = out.series[s];
    }
    let cc = factors::estimate_pc(&refill, 2).unwrap().common_component();
    for &s in &out.imputed_indices() {
        assert!((cc[(s, 9)] - out.series[s]).abs() < 10.0 * tol);
    }
}

#[test]
fn em_and_tp_are_equally_accurate_on_static_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut mse_em, mut mse_tp) = (0.0, 0.0);
    for _ in 0..100 {
        let (_, _, x) = factor_panel(&mut rng, 300, 30, 2, 1.0);
        let panel = with_masked_target(&x, 3);
        let em = impute_em(&panel, 29, 2, 500, 1e-8).unwrap();
        let pc = factors::estimate_pc(&x.columns(0, 29).into_owned(), 2).unwrap();
        let tp = impute_tp_series(&panel.column(29), &pc.factors, false).unwrap();
        for &s in &em.imputed_indices() {
            mse_em += (em.series[s] - x[(s, 29)]).powi(2);
            mse_tp += (tp.series[s] - x[(s, 29)]).powi(2);
        }
    }
    let ratio = mse_em / mse_tp;
    assert!((0.5..=2.0).contains(&ratio), "{ratio}");
}

#[test]
fn chow_lin_low_covariance_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (rho, m) in [(0.3, 2), (-0.6, 3), (0.95, 4), (0.0, 3)] {
        let len = 8 * m;
        let z = randn(&mut rng, len, 1);
        let y: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
        let series = keep_every(&y, m, m - 1);
        let fit = fit_chow_lin_series(&series, &z, RhoSearch::Fixed { rho }).unwrap();
        let c = Mat::from_fn(fit.observed.len(), len, |a, s| f64::from(u8::from(fit.observed[a] == s)));
        let vl = &c * ar1_cov_matrix(rho, len) * c.transpose();
        assert!((vl - &fit.low_cov).abs().max() < 1e-10);
        // fitted values plus residuals reproduce the observations
        let zl = z.clone().insert_column(0, 1.0).select_rows(&fit.observed);
        let back = &zl * &fit.beta_gls + &fit.low_residuals;
        for (a, &s) in fit.observed.iter().enumerate() {
            assert!((back[a] - y[s]).abs() < 1e-12);
        }
    }
}

#[test]
fn chow_lin_locality_and_unbiasedness() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let m = 3;
    let len = 36;
    let z = randn(&mut rng, len, 2);
    let y: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
    let series = keep_every(&y, m, m - 1);
    let fit = fit_chow_lin_series(&series, &z, RhoSearch::Fixed { rho: 0.7 }).unwrap();
    let zh = z.clone().insert_column(0, 1.0);
    let zl = zh.select_rows(&fit.observed);
    // interior sub-period between observed periods a and a+1
    for a in 1..fit.observed.len() - 2 {
        for s in fit.observed[a] + 1..fit.observed[a + 1] {
            for b in 0..fit.observed.len() {
                if b != a && b != a + 1 {
                    assert!(fit.weights[(s, b)].abs() < 1e-10);
                }
            }
        }
    }
    // A = Z_H (Z_L'V⁻¹Z_L)⁻¹Z_L'V⁻¹ + θ (I - Z_L (…)⁻¹ Z_L'V⁻¹) must reproduce Z_H
    let vinv = fit.low_cov.clone().try_inverse().unwrap();
    let g = (zl.transpose() * &vinv * &zl).try_inverse().unwrap() * zl.transpose() * &vinv;
    let n = fit.observed.len();
    let a_mat = &zh * &g + &fit.weights * (Mat::identity(n, n) - &zl * &g);
    assert!((a_mat * &zl - &zh).abs().max() < 1e-8);
}

#[test]
fn chow_lin_recovers_rho() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (m, t_low) = (3, 200);
    let len = m * t_low;
    let mut estimates = Vec::new();
    for _ in 0..100 {
        let z = Mat::from_vec(len, 1, ar1_path(&mut rng, len, 0.5, 1.0));
        let u = ar1_path(&mut rng, len, 0.8, 1.0);
        let y: Vec<f64> = (0..len).map(|s| 1.0 + 2.0 * z[(s, 0)] + u[s]).collect();
        let fit = fit_chow_lin_series(&keep_every(&y, m, m - 1), &z, RhoSearch::Grid).unwrap();
        estimates.push(fit.rho);
    }
    estimates.sort_by(f64::total_cmp);
    let median = 0.5 * (estimates[49] + estimates[50]);
    assert!((median - 0.8).abs() < 0.1, "{median}");
}

#[test]
fn chow_lin_on_grid_matches_series_form() {
    let grid = TimeGrid::fixed(3, 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let z = randn(&mut rng, 36, 2);
    let y_low: Vec<f64> = (0..12).map(|_| StandardNormal.sample(&mut rng)).collect();
    let a = fit_chow_lin(&y_low, &z, &grid, RhoSearch::Grid).unwrap();
    let mut y = vec![f64::NAN; 36];
    for t in 0..12 {
        y[3 * t + 2] = y_low[t];
    }
    let b = fit_chow_lin_series(&keep_every(&y, 3, 2), &z, RhoSearch::Grid).unwrap();
    assert_eq!(a.rho, b.rho);
    assert_eq!(a.beta_gls, b.beta_gls);
}

#[test]
fn ar1_covariance_helper() {
    assert!((ar1_cov(0.5, 0) - 1.0 / 0.75).abs() < 1e-15);
    assert!((ar1_cov(0.5, 2) - 0.25 / 0.75).abs() < 1e-15);
}

/// Exact ADL data: `Y_s = b0 + ρ Y_{s-1} + Σ_l γ_l F_{s-l}` with no error.
fn exact_adl(rng: &mut ChaCha8Rng, len: usize, rho: f64, gamma: &[f64]) -> (Mat, Vec<f64>) {
    let f = randn(rng, len, 1);
    let mut y = vec![0.0; len];
    y[0] = 0.4;
    for s in 1..len {
        let fx: f64 = gamma
            .iter()
            .enumerate()
            .map(|(l, g)| if s >= l { g * f[(s - l, 0)] } else { 0.0 })
            .sum();
        y[s] = 0.2 + rho * y[s - 1] + fx;
    }
    (f, y)
}

#[test]
fn tp_star_pen_and_paper_cases_recover_truth() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for (lag_f, gamma) in [(0usize, vec![1.0]), (1, vec![1.0, -0.5])] {
        let (f, y) = exact_adl(&mut rng, 12, 0.8, &gamma);
        let series = keep_every(&y, 2, 0);
        let opts = TpStarOptions {
            lag_f,
            tol: 1e-8,
            ..Default::default()
        };
        let fit = impute_tp_star_series(&series, &f, &opts).unwrap();
        assert!(fit.result.params.converged);
        for s in 0..12 {
            assert!((fit.result.series[s] - y[s]).abs() < 1e-6, "lag {lag_f} s {s}");
        }
        assert!((fit.coefficients.rho - 0.8).abs() < 1e-6);
    }
}

#[test]
fn tp_star_static_reduction() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let f = randn(&mut rng, 60, 2);
    let y: Vec<f64> = (0..60).map(|s| 0.3 + f[(s, 0)] + 0.2 * normal(&mut rng)).collect();
    let series = keep_every(&y, 3, 2);
    let opts = TpStarOptions {
        lag_f: 0,
        force_rho_zero: true,
        ..Default::default()
    };
    let fit = impute_tp_star_series(&series, &f, &opts).unwrap();
    let tp = impute_tp_series(&series, &f, true).unwrap();
    assert_eq!(fit.result.params.iterations, 1);
    for s in 0..60 {
        assert!((fit.result.series[s] - tp.series[s]).abs() < 1e-8);
    }
}

#[test]
fn tp_star_two_step_expansion() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let f = randn(&mut rng, 90, 1);
    let u = ar1_path(&mut rng, 90, 0.7, 0.5);
    let y: Vec<f64> = (0..90).map(|s| f[(s, 0)] + u[s]).collect();
    let series = keep_every(&y, 3, 0);
    let fit = impute_tp_star_series(&series, &f, &TpStarOptions::default()).unwrap();
    let c = &fit.coefficients;
    let (b0, rho) = (c.intercept, c.rho);
    let (g0, g1) = (c.gamma[0][0], c.gamma[1][0]);
    for t in 1..29 {
        let s = 3 * t;
        // Ŷ_{t+2/3} = δ_Y Y_t + δ_0 Z_t + δ_1 Z_{t+1/3} + δ_2 Z_{t+2/3} + const
        let expanded = b0 * (1.0 + rho)
            + rho * rho * y[s]
            + rho * g1 * f[(s, 0)]
            + (rho * g0 + g1) * f[(s + 1, 0)]
            + g0 * f[(s + 2, 0)];
        assert!((fit.result.series[s + 2] - expanded).abs() < 1e-10);
    }
}

#[test]
fn tp_star_rerun_is_a_no_op_and_sign_restriction_holds() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let f = randn(&mut rng, 120, 2);
    let u = ar1_path(&mut rng, 120, 0.6, 0.5);
    let y: Vec<f64> = (0..120).map(|s| f[(s, 0)] - f[(s, 1)] + u[s]).collect();
    let series = keep_every(&y, 3, 2);
    let opts = TpStarOptions {
        tol: 1e-10,
        ..Default::default()
    };
    let fit = impute_tp_star_series(&series, &f, &opts).unwrap();
    assert!(fit.coefficients.rho >= 0.0);
    let again = fit.coefficients.fill(&series, &f, &fit.result.series);
    for s in 0..120 {
        assert!((again[s] - fit.result.series[s]).abs() < 1e-9);
    }
    let neg = TpStarOptions {
        sign: SignRestriction::Negative,
        ..opts
    };
    let fit = impute_tp_star_series(&series, &f, &neg).unwrap();
    assert!(fit.coefficients.rho <= 0.0);
}

#[test]
fn pass_through_is_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let f = randn(&mut rng, 48, 2);
    let y: Vec<f64> = (0..48).map(|_| StandardNormal.sample(&mut rng)).collect();
    let series = keep_every(&y, 3, 2);
    let tp = impute_tp_series(&series, &f, false).unwrap();
    let star = impute_tp_star_series(&series, &f, &TpStarOptions::default()).unwrap().result;
    let fit = fit_chow_lin_series(&series, &f, RhoSearch::Grid).unwrap();
    let cl = impute_chow_lin_series(&fit, &series, &f).unwrap();
    for s in series.observed_indices() {
        for out in [&tp, &star, &cl] {
            assert_eq!(out.series[s].to_bits(), y[s].to_bits());
        }
    }
}

fn dynamic_panel(rng: &mut ChaCha8Rng, t: usize, n: usize, rho_y: f64) -> Mat {
    let l = randn(rng, n, 1);
    let f = ar1_path(rng, t, 0.7, 1.0);
    let mut x = Mat::zeros(t, n);
    for i in 0..n {
        let e = if i + 1 == n {
            ar1_path(rng, t, rho_y, 0.6)
        } else {
            ar1_path(rng, t, 0.2, 0.5)
        };
        for s in 0..t {
            x[(s, i)] = l[(i, 0)] * f[s] + e[s];
        }
    }
    x
}

#[test]
fn ks_and_ks_star_agree_without_serial_correlation() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = dynamic_panel(&mut rng, 120, 6, 0.0);
    let panel = with_masked_target(&x, 3);
    let em = EmOptions {
        max_iter: 5000,
        tol: 1e-12,
        ..Default::default()
    };
    let ks = impute_ks(&panel, 5, 1, 1, &em).unwrap();
    let star = impute_ks_star(
        &panel,
        5,
        1,
        1,
        &KsStarOptions {
            em,
            force_zero_rho: true,
        },
    )
    .unwrap();
    for s in ks.imputed_indices() {
        assert!((ks.series[s] - star.series[s]).abs() < 1e-4, "{s}: {} {}", ks.series[s], star.series[s]);
    }
}

#[test]
fn ks_star_beats_ks_with_persistent_target_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let reps = 200;
    let mut wins = 0;
    for _ in 0..reps {
        let x = dynamic_panel(&mut rng, 120, 6, 0.8);
        let panel = with_masked_target(&x, 3);
        let em = EmOptions {
            max_iter: 200,
            tol: 1e-7,
            ..Default::default()
        };
        let ks = impute_ks(&panel, 5, 1, 1, &em).unwrap();
        let star = impute_ks_star(&panel, 5, 1, 1, &KsStarOptions { em, force_zero_rho: false }).unwrap();
        let mse = |v: &[f64]| ks.imputed_indices().iter().map(|&s| (v[s] - x[(s, 5)]).powi(2)).sum::<f64>();
        if mse(&star.series) < mse(&ks.series) {
            wins += 1;
        }
    }
    assert!(wins as f64 >= 0.75 * reps as f64, "{wins}/{reps}");
}

#[test]
fn imputers_reject_mismatched_inputs() {
    let f = Mat::zeros(10, 1);
    let y = MaskedSeries {
        values: vec![0.0; 9],
        observed: vec![true; 9],
    };
    assert!(impute_tp_series(&y, &f, false).is_err());
    assert!(fit_chow_lin_series(&y, &f, RhoSearch::Grid).is_err());
    let panel = Panel::complete(Mat::from_fn(10, 3, |s, i| (s * (i + 1)) as f64));
    assert!(impute_em(&panel, 5, 1, 10, 1e-8).is_err());
    let _ = imputers::ImputeMethod::ALL;
    let _ = Vector::zeros(1);
}
