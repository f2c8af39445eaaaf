use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mfimpute_cli::manifest::{sha256_hex, Manifest, MANIFEST_NAME};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mfimpute"));
    c.env_remove("MIXFREQ_OUT");
    c
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn month_label(s: usize) -> String {
    format!("{}-{:02}-01", 2000 + s / 12, s % 12 + 1)
}

/// Monthly predictors driven by two smooth factors, plus a target column
/// `y` that is a noisy combination of them.
fn write_monthly(path: &Path, t: usize, n: usize, with_target: bool) {
    let mut text = String::from("date");
    for i in 0..n {
        write!(text, ",x{i}").unwrap();
    }
    if with_target {
        text.push_str(",y");
    }
    text.push('\n');
    for s in 0..t {
        let f1 = (0.21 * s as f64).sin() + 0.3 * (0.05 * s as f64).cos();
        let f2 = (0.13 * s as f64 + 1.0).cos();
        write!(text, "{}", month_label(s)).unwrap();
        for i in 0..n {
            let wiggle = ((s * 7 + i * 13) % 17) as f64 / 17.0 - 0.5;
            let v = (1.0 + 0.2 * i as f64) * f1 + (0.5 - 0.1 * i as f64) * f2 + 0.2 * wiggle;
            write!(text, ",{v}").unwrap();
        }
        if with_target {
            let wiggle = ((s * 5) % 11) as f64 / 11.0 - 0.5;
            write!(text, ",{}", 2.0 * f1 - f2 + 0.3 * wiggle).unwrap();
        }
        text.push('\n');
    }
    std::fs::write(path, text).unwrap();
}

fn read_manifest(dir: &Path) -> Manifest {
    serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_NAME)).unwrap()).unwrap()
}

/// Every output file by name, plus the manifest without its runtime block.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let m = read_manifest(dir);
    let mut files: BTreeMap<String, Vec<u8>> = m
        .outputs
        .iter()
        .map(|o| (o.path.clone(), std::fs::read(dir.join(&o.path)).unwrap()))
        .collect();
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_NAME)).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("runtime");
    files.insert(MANIFEST_NAME.into(), serde_json::to_vec(&v).unwrap());
    files
}

fn assert_manifest_complete(dir: &Path) {
    let m = read_manifest(dir);
    let mut on_disk: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n != MANIFEST_NAME)
        .collect();
    on_disk.sort();
    let mut listed: Vec<String> = m.outputs.iter().map(|o| o.path.clone()).collect();
    listed.sort();
    assert_eq!(on_disk, listed);
    for o in &m.outputs {
        let bytes = std::fs::read(dir.join(&o.path)).unwrap();
        assert_eq!(o.bytes, bytes.len());
        assert_eq!(o.sha256, sha256_hex(&bytes), "{}", o.path);
    }
}

#[test]
fn impute_writes_one_file_per_method_and_a_comparison() {
    let tmp = tempfile::tempdir().unwrap();
    let x = tmp.path().join("x.csv");
    write_monthly(&x, 60, 6, false);
    let mut low = String::from("quarter,gdp\n");
    for q in 0..20 {
        writeln!(low, "q{q},{}", 1.0 + (0.5 * q as f64).sin()).unwrap();
    }
    let y = tmp.path().join("y.csv");
    std::fs::write(&y, &low).unwrap();
    let out = tmp.path().join("out");
    run(&[
        "impute", "--input", p(&x), "--low-input", p(&y), "--grid", "fixed:3",
        "--method", "tp,tp-star,cl", "--out", p(&out),
    ]);
    for name in ["impute_tp.csv", "impute_tp-star.csv", "impute_cl.csv", "comparison.csv", "factors.csv", "factors.json", "methods.json"] {
        assert!(out.join(name).is_file(), "{name}");
    }
    assert_manifest_complete(&out);

    let tidy = std::fs::read_to_string(out.join("impute_tp-star.csv")).unwrap();
    let rows: Vec<Vec<String>> = tidy.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect();
    assert_eq!(rows.len(), 60);
    for (s, row) in rows.iter().enumerate() {
        assert_eq!(row[0], month_label(s));
        if s % 3 == 2 {
            assert_eq!(row[3], "observed");
            let want = 1.0 + (0.5 * (s / 3) as f64).sin();
            assert_eq!(row[2].parse::<f64>().unwrap().to_bits(), want.to_bits());
        } else {
            assert_eq!(row[3], "imputed");
        }
    }
    let wide = std::fs::read_to_string(out.join("comparison.csv")).unwrap();
    assert_eq!(wide.lines().next().unwrap(), "period,observed,TP,TP*,CL");
}

#[test]
fn impute_rejects_a_grid_that_does_not_fit() {
    let tmp = tempfile::tempdir().unwrap();
    let x = tmp.path().join("x.csv");
    write_monthly(&x, 61, 4, false);
    let y = tmp.path().join("y.csv");
    std::fs::write(&y, "q,v\na,1\nb,2\n").unwrap();
    let out = bin()
        .args(["impute", "--input", p(&x), "--low-input", p(&y), "--grid", "fixed:3", "--out"])
        .arg(tmp.path().join("o"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("sub-periods"));
}

fn simulate(dir: &Path, threads: &str) {
    run(&[
        "simulate", "--spec", "builtin:dgp2", "--nsim", "10,20,30", "--reps", "4", "--seed", "7",
        "--estimators", "pc,mle-h,pc-ks", "--threads", threads, "--out", p(dir),
    ]);
}

#[test]
fn simulate_is_deterministic_across_runs_and_threads() {
    let tmp = tempfile::tempdir().unwrap();
    let dirs: Vec<PathBuf> = ["a", "b", "c"].iter().map(|d| tmp.path().join(d)).collect();
    simulate(&dirs[0], "1");
    simulate(&dirs[1], "1");
    simulate(&dirs[2], "4");
    assert_manifest_complete(&dirs[0]);
    let a = snapshot(&dirs[0]);
    assert_eq!(a.keys().cloned().collect::<Vec<_>>(), ["comparison.csv", "manifest.json", "records.csv", "spec.json"]);
    assert_eq!(a, snapshot(&dirs[1]));
    assert_eq!(a, snapshot(&dirs[2]));
    assert_eq!(read_manifest(&dirs[2]).runtime.threads, 4);
}

fn write_counterfactual_input(dir: &Path) -> PathBuf {
    let x = dir.join("panel.csv");
    write_monthly(&x, 144, 8, true);
    x
}

#[test]
fn counterfactual_keeps_exactly_the_release_months() {
    let tmp = tempfile::tempdir().unwrap();
    let x = write_counterfactual_input(tmp.path());
    let out = tmp.path().join("cf");
    run(&[
        "counterfactual", "--input", p(&x), "--target", "y", "--keep-months", "2,5,8,11",
        "--method", "tp,tp-star,cl", "--out", p(&out),
    ]);
    assert_manifest_complete(&out);
    let series = std::fs::read_to_string(out.join("series.csv")).unwrap();
    let mut seen = 0;
    for line in series.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        let month: u32 = cells[0][5..7].parse().unwrap();
        let kept = matches!(month, 2 | 5 | 8 | 11);
        assert_eq!(cells[3] == "observed", kept, "{line}");
        seen += 1;
    }
    assert_eq!(seen, 3 * 144);
    // default windows start at each decade
    let scores = std::fs::read_to_string(out.join("scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 1 + 2 + 1);
}

#[test]
fn counterfactual_is_deterministic_across_threads() {
    let tmp = tempfile::tempdir().unwrap();
    let x = write_counterfactual_input(tmp.path());
    let go = |dir: &str, threads: &str| {
        let out = tmp.path().join(dir);
        run(&[
            "counterfactual", "--input", p(&x), "--target", "y", "--method", "tp,tp-star,cl,ks-star",
            "--threads", threads, "--out", p(&out),
        ]);
        snapshot(&out)
    };
    let a = go("a", "1");
    assert_eq!(a, go("b", "1"));
    assert_eq!(a, go("c", "3"));

    let synth = |dir: &str, threads: &str| {
        let out = tmp.path().join(dir);
        run(&[
            "counterfactual", "--synthetic", "--draws", "3", "--seed", "11", "--method", "tp,cl",
            "--threads", threads, "--out", p(&out),
        ]);
        snapshot(&out)
    };
    let s = synth("s1", "1");
    assert_eq!(s, synth("s2", "4"));
    assert!(s.contains_key("draws.csv"));
}

#[test]
fn config_file_with_flag_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(
        &cfg,
        r#"
command = "simulate"
seed = 3
out = "from-config"

[simulate]
spec = "builtin:dgp2"
nsim = [10, 20]
reps = 50
estimators = ["pc"]
"#,
    )
    .unwrap();
    run(&["run", "--config", p(&cfg), "--threads", "2"]);
    let m = read_manifest(&tmp.path().join("from-config"));
    assert_eq!(m.config.simulate.reps, Some(50));
    assert_eq!(m.seed, 3);

    let over = tmp.path().join("over");
    run(&["simulate", "--config", p(&cfg), "--reps", "2", "--out", p(&over)]);
    let m = read_manifest(&over);
    assert_eq!(m.config.simulate.reps, Some(2));
    assert_eq!(m.config.simulate.nsim, Some(vec![10, 20]));

    let wrong = bin().args(["grid", "--config", p(&cfg)]).output().unwrap();
    assert!(!wrong.status.success());
}

#[test]
fn invalid_configuration_reports_each_field() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["simulate", "--spec", "builtin:nope", "--nsim", "2", "--reps", "0", "--estimators", "pc,zzz"])
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    for field in ["simulate.spec:", "simulate.nsim:", "simulate.reps:", "simulate.estimators:"] {
        assert!(err.contains(field), "{field} missing from {err}");
    }
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "command = \"grid\"\nunknown_field = 1\n").unwrap();
    let out = bin().args(["run", "--config", p(&cfg)]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown_field"));
}

#[test]
fn output_directory_defaults_to_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let target = tmp.path().join("env-out");
    let out = bin()
        .args(["grid", "--grid", "fixed:3:4"])
        .env("MIXFREQ_OUT", &target)
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_manifest_complete(&target);
    let grid = std::fs::read_to_string(target.join("grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 13);
    assert!(grid.lines().nth(3).unwrap().starts_with("2,0,2,1,"));
}

#[test]
fn calibrate_then_simulate_from_the_written_spec() {
    let tmp = tempfile::tempdir().unwrap();
    let x = tmp.path().join("x.csv");
    write_monthly(&x, 150, 12, false);
    let cal = tmp.path().join("cal");
    run(&[
        "calibrate", "--input", p(&x), "--r", "2", "--p", "1", "--block-shares", "0.5,0.5",
        "--detrend", "linear", "--lags", "1", "--out", p(&cal),
    ]);
    assert_manifest_complete(&cal);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(cal.join("calibration.json")).unwrap()).unwrap();
    assert_eq!(summary["rows_used"], 149);
    assert_eq!(summary["series"].as_array().unwrap().len(), 24);
    let spec = cal.join("dgp.json");
    let sim = tmp.path().join("sim");
    run(&["simulate", "--spec", p(&spec), "--nsim", "6,24", "--reps", "2", "--estimators", "pc", "--out", p(&sim)]);
    assert_manifest_complete(&sim);
}
