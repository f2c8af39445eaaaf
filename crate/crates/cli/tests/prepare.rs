use mfimpute::linalg::Mat;
use mfimpute::{ObservationMask, Panel};
use mfimpute_cli::prepare::*;

fn names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("s{i}")).collect()
}

fn complete(x: Mat) -> Panel {
    let (t, n) = x.shape();
    Panel::new(x, ObservationMask::from_element(t, n, true), names(n)).unwrap()
}

#[test]
fn three_lags_of_nineteen_series_give_seventy_six() {
    let panel = complete(Mat::from_fn(40, 19, |s, j| (s * 19 + j) as f64));
    let opts = PrepareOptions {
        lags: 3,
        ..Default::default()
    };
    let out = prepare_panel(&panel, &opts, &[]).unwrap();
    assert_eq!(out.ncols(), 76);
    let j = out.column_index("s4_lag2").unwrap();
    for s in 0..40 {
        assert_eq!(out.is_observed(s, j), s >= 2);
        if s >= 2 {
            assert_eq!(out.values()[(s, j)], panel.values()[(s - 2, 4)]);
        }
    }
    // a kept column is neither lagged nor detrended
    let out = prepare_panel(&panel, &opts, &[0]).unwrap();
    assert_eq!(out.ncols(), 19 + 3 * 18);
    assert!(out.column_index("s0_lag1").is_none());
}

#[test]
fn detrending_removes_exact_trends() {
    let line: Vec<f64> = (0..60).map(|s| 3.0 - 0.25 * s as f64).collect();
    let (res, _) = detrend_column(&line, &[true; 60], Detrend::Linear).unwrap();
    assert!(res.iter().all(|v| v.abs() < 1e-10));

    let quad: Vec<f64> = (0..60).map(|s| 1.0 + 0.1 * s as f64 - 0.02 * (s * s) as f64).collect();
    let (res, _) = detrend_column(&quad, &[true; 60], Detrend::Quadratic).unwrap();
    assert!(res.iter().all(|v| v.abs() < 1e-10));

    let growth: Vec<f64> = (0..60).map(|s| 5.0 * (0.013 * s as f64).exp()).collect();
    let (res, mask) = detrend_column(&growth, &[true; 60], Detrend::LogDiff).unwrap();
    assert!(!mask[0]);
    assert!((1..60).all(|s| mask[s] && (res[s] - 0.013).abs() < 1e-10));
}

#[test]
fn detrending_flags_interior_gaps_and_bad_logs() {
    let mut observed = vec![true; 20];
    let values: Vec<f64> = (0..20).map(|s| 1.0 + s as f64).collect();
    observed[0] = false;
    observed[19] = false;
    assert!(detrend_column(&values, &observed, Detrend::Linear).is_ok());
    observed[7] = false;
    for kind in [Detrend::Linear, Detrend::Quadratic, Detrend::LogDiff] {
        assert!(detrend_column(&values, &observed, kind).is_err());
    }
    assert!(detrend_column(&values, &observed, Detrend::None).is_ok());
    let negative = vec![-1.0; 20];
    assert!(detrend_column(&negative, &[true; 20], Detrend::LogDiff).is_err());
}

#[test]
fn per_column_settings_override_the_default() {
    let x = Mat::from_fn(30, 2, |s, j| if j == 0 { 2.0 * s as f64 } else { (0.05 * s as f64).exp() });
    let panel = complete(x);
    let mut opts = PrepareOptions {
        detrend: Detrend::Linear,
        ..Default::default()
    };
    opts.columns.insert("s1".into(), Detrend::LogDiff);
    let out = prepare_panel(&panel, &opts, &[]).unwrap();
    assert!(out.values()[(5, 0)].abs() < 1e-10);
    assert!((out.values()[(5, 1)] - 0.05).abs() < 1e-10);
    opts.columns.insert("missing".into(), Detrend::None);
    assert!(prepare_panel(&panel, &opts, &[]).is_err());
}

fn exact_factor_panel() -> Mat {
    let f = Mat::from_fn(80, 2, |s, j| ((s + 1) as f64 * (0.3 + 0.4 * j as f64)).sin());
    let l = Mat::from_fn(8, 2, |i, j| 1.0 + ((i * 3 + j) % 5) as f64 * 0.3 - j as f64);
    &f * l.transpose()
}

#[test]
fn precompletion_recovers_exact_factor_data() {
    let x = exact_factor_panel();
    let panel = complete(x.clone());
    assert_eq!(precomplete_predictors(&panel, 2).unwrap(), panel);

    let mask = ObservationMask::from_fn(80, 8, |s, j| !(j == 5 && s % 10 == 3));
    let holed = Panel::new(x.clone(), mask, names(8)).unwrap();
    let done = precomplete_predictors(&holed, 2).unwrap();
    assert!(done.is_complete());
    for s in 0..80 {
        for j in 0..8 {
            if holed.is_observed(s, j) {
                assert_eq!(done.values()[(s, j)].to_bits(), x[(s, j)].to_bits());
            } else {
                assert!((done.values()[(s, j)] - x[(s, j)]).abs() < 1e-8);
            }
        }
    }
}

#[test]
fn interior_gaps_are_filled_and_need_complete_columns() {
    let x = exact_factor_panel();
    // a crisis-style block of missing rows in two series
    let mask = ObservationMask::from_fn(80, 8, |s, j| !(j >= 6 && (40..52).contains(&s)));
    let holed = Panel::new(x.clone(), mask, names(8)).unwrap();
    let done = precomplete_predictors(&holed, 2).unwrap();
    assert!((40..52).all(|s| (done.values()[(s, 7)] - x[(s, 7)]).abs() < 1e-8));

    let none = ObservationMask::from_fn(80, 8, |s, j| s != j);
    assert!(precomplete_predictors(&Panel::new(x.clone(), none, names(8)).unwrap(), 2).is_err());
    let one = ObservationMask::from_fn(80, 8, |s, j| j == 0 || s != j);
    assert!(precomplete_predictors(&Panel::new(x, one, names(8)).unwrap(), 2).is_err());
}

#[test]
fn ragged_edges_truncate_or_fill() {
    let x = exact_factor_panel();
    let labels: Vec<String> = (0..80).map(|s| format!("row{s}")).collect();
    // staggered releases at the end
    let mask = ObservationMask::from_fn(80, 8, |s, j| s < 80 - j % 3);
    let panel = Panel::new(x, mask, names(8)).unwrap();
    let all: Vec<usize> = (0..8).collect();
    let cut = handle_ragged(&panel, &labels, &all, RaggedEdge::Truncate, 2).unwrap();
    assert_eq!(cut.panel.nrows(), 78);
    assert_eq!(cut.labels.last().unwrap(), "row77");
    assert!(cut.panel.is_complete());
    let filled = handle_ragged(&panel, &labels, &all, RaggedEdge::Precomplete, 2).unwrap();
    assert_eq!(filled.panel.nrows(), 80);
    assert!(filled.panel.is_complete());

    // interior gaps survive truncation and are reported
    let mask = ObservationMask::from_fn(80, 8, |s, j| !(j == 2 && s == 30));
    let gap = Panel::new(exact_factor_panel(), mask, names(8)).unwrap();
    assert!(handle_ragged(&gap, &labels, &all, RaggedEdge::Truncate, 2).is_err());
}
