//! The five pipelines. Each builds its artifacts in memory; [`execute`]
//! writes them with the manifest.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use chrono::{Datelike, NaiveDate};
use mfimpute::evaluation::{self, CounterfactualSpec, MaskPattern};
use mfimpute::factors;
use mfimpute::grid::{build_time_grid, embed_low_frequency, GridSpec, TimeGrid};
use mfimpute::imputers::{self, ImputationResult, ImputeMethod, MethodSettings, Provenance, RhoSearch, TpStarOptions};
use mfimpute::io::{self, PanelFile};
use mfimpute::simulation::{self, ComparisonConfig, DgpSpec, SyntheticTargets};
use mfimpute::state_space::EmOptions;
use serde::Serialize;

use crate::config::{CommandKind, RunConfig};
use crate::manifest::{self, Artifacts, Manifest, Runtime};
use crate::prepare::{handle_ragged, prepare_panel, Prepared};

/// Artifacts plus non-fatal problems met while producing them.
#[derive(Debug, Default)]
pub struct Output {
    pub artifacts: Artifacts,
    pub warnings: Vec<String>,
}

pub fn method_slug(m: ImputeMethod) -> &'static str {
    match m {
        ImputeMethod::Tp => "tp",
        ImputeMethod::TpStar => "tp-star",
        ImputeMethod::ChowLin => "cl",
        ImputeMethod::Em => "em",
        ImputeMethod::Ks => "ks",
        ImputeMethod::KsStar => "ks-star",
    }
}

fn read_panel(path: &Path) -> Result<PanelFile> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    io::read_panel_csv(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

/// `fixed:<m>` without a period count takes the count from the data.
pub fn parse_grid(text: &str, low_count: Option<usize>) -> Result<GridSpec> {
    let t = text.trim();
    if let (Some(m), Some(n)) = (t.strip_prefix("fixed:"), low_count) {
        if !m.contains(':') {
            return Ok(format!("fixed:{m}:{n}").parse()?);
        }
    }
    Ok(t.parse()?)
}

fn method_settings(cfg: &RunConfig) -> MethodSettings {
    let tol = cfg.tol.unwrap_or(1e-8);
    MethodSettings {
        r: cfg.r.unwrap_or(2),
        var_order: cfg.p.unwrap_or(1),
        intercept: true,
        chow_lin: RhoSearch::Grid,
        tp_star: TpStarOptions {
            lag_f: cfg.factor_lags.unwrap_or(1),
            tol,
            sign: cfg.rho_sign.unwrap_or(imputers::SignRestriction::Positive),
            ..TpStarOptions::default()
        },
        em: EmOptions {
            max_iter: cfg.max_iter.unwrap_or(500),
            tol,
            ..EmOptions::default()
        },
    }
}

fn csv_bytes<F>(f: F) -> Result<Vec<u8>>
where
    F: FnOnce(&mut csv::Writer<&mut Vec<u8>>) -> csv::Result<()>,
{
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        f(&mut w)?;
        w.flush()?;
    }
    Ok(buf)
}

#[derive(Serialize)]
struct GridSummary {
    spec: String,
    high_count: usize,
    low_count: usize,
    release_lag: usize,
    /// Number of periods with each sub-period count.
    sub_count_histogram: BTreeMap<usize, usize>,
    /// Calendar years with 53 sub-periods (weekly grids).
    long_years: Vec<i32>,
}

pub fn run_grid(cfg: &RunConfig) -> Result<Output> {
    let spec = parse_grid(cfg.grid.as_deref().unwrap_or_default(), None)?;
    let grid = build_time_grid(&spec)?.with_release_lag(cfg.release_lag.unwrap_or(0));
    let high = grid.high_labels();
    let releases = grid.release_indices();
    let table = csv_bytes(|w| {
        w.write_record(["index", "period", "sub_period", "release", "date"])?;
        for s in 0..grid.high_count() {
            let (t, j) = grid.period_of(s).expect("index within grid");
            let date = high.map(|d| d[s].to_string()).unwrap_or_default();
            let release = u8::from(releases[t] == s);
            w.write_record([s.to_string(), t.to_string(), j.to_string(), release.to_string(), date])?;
        }
        Ok(())
    })?;
    let mut histogram = BTreeMap::new();
    for &m in grid.sub_counts() {
        *histogram.entry(m).or_insert(0) += 1;
    }
    let mut long_years = Vec::new();
    if let Some(dates) = high {
        let mut per_year: BTreeMap<i32, usize> = BTreeMap::new();
        for d in dates {
            *per_year.entry(d.year()).or_insert(0) += 1;
        }
        long_years = per_year.into_iter().filter(|&(_, c)| c == 53).map(|(y, _)| y).collect();
    }
    let summary = GridSummary {
        spec: spec.to_string(),
        high_count: grid.high_count(),
        low_count: grid.low_count(),
        release_lag: grid.release_lag(),
        sub_count_histogram: histogram,
        long_years,
    };
    let mut out = Output::default();
    out.artifacts.add("grid.csv", table);
    out.artifacts.json("grid.json", &summary)?;
    Ok(out)
}

#[derive(Serialize)]
struct CalibrationSummary {
    rows_used: usize,
    first_row: String,
    last_row: String,
    series: Vec<String>,
    factor_variance_shares: Vec<f64>,
    var_spectral_radius: f64,
}

pub fn run_calibrate(cfg: &RunConfig) -> Result<Output> {
    let file = read_panel(cfg.input.as_ref().expect("validated"))?;
    let r = cfg.r.unwrap_or(2);
    let panel = prepare_panel(&file.panel, &cfg.prepare_options(), &[])?;
    let all: Vec<usize> = (0..panel.ncols()).collect();
    let prepared = handle_ragged(&panel, &file.row_labels, &all, cfg.prepare.ragged.unwrap_or_default(), r)?;
    let spec = simulation::calibrate_dgp(
        prepared.panel.complete_values()?,
        r,
        cfg.p.unwrap_or(1),
        cfg.calibrate.method.unwrap_or(simulation::CalibrationMethod::Pc),
        cfg.calibrate.block_shares.clone().unwrap_or_default(),
        cfg.calibrate.label.as_deref().unwrap_or("calibrated"),
    )?;
    let summary = CalibrationSummary {
        rows_used: prepared.labels.len(),
        first_row: prepared.labels.first().cloned().unwrap_or_default(),
        last_row: prepared.labels.last().cloned().unwrap_or_default(),
        series: prepared.panel.names().to_vec(),
        factor_variance_shares: spec.factor_variance_shares()?,
        var_spectral_radius: spec.dynamics().spectral_radius(),
    };
    let mut out = Output::default();
    out.artifacts.add("dgp.json", (spec.to_json()? + "\n").into_bytes());
    out.artifacts.json("calibration.json", &summary)?;
    Ok(out)
}

/// A spec from `builtin:<name>`, a [`DgpSpec`] JSON file, or a JSON file of
/// [`SyntheticTargets`].
pub fn load_spec(source: &str) -> Result<DgpSpec> {
    match source {
        "builtin:dgp1" => return Ok(simulation::synthetic_dgp1()),
        "builtin:dgp2" => return Ok(simulation::synthetic_dgp2()),
        s if s.starts_with("builtin:") => bail!("unknown builtin spec {s:?}"),
        _ => {}
    }
    let text = std::fs::read_to_string(source).with_context(|| format!("reading {source}"))?;
    match DgpSpec::from_json(&text) {
        Ok(spec) => Ok(spec),
        Err(spec_err) => match serde_json::from_str::<SyntheticTargets>(&text) {
            Ok(targets) => Ok(simulation::synthetic_spec(&targets)?),
            Err(_) => Err(anyhow!(spec_err).context(format!("{source} is neither a spec nor synthetic targets"))),
        },
    }
}

pub fn run_simulate(cfg: &RunConfig) -> Result<Output> {
    let spec = load_spec(cfg.simulate.spec.as_deref().expect("validated"))?;
    let config = ComparisonConfig {
        estimators: cfg.estimators().map_err(|e| anyhow!("{e}"))?,
        nsim_grid: cfg.simulate.nsim.clone().unwrap_or_default(),
        reps: cfg.simulate.reps.unwrap_or(1),
        seed: cfg.seed.unwrap_or(0),
        var_order: cfg.p.unwrap_or(1),
    };
    if let Some(&n) = config.nsim_grid.iter().find(|&&n| n > spec.n()) {
        bail!("nsim {n} exceeds the {} series of spec {:?}", spec.n(), spec.label);
    }
    let table = simulation::run_estimator_comparison(&spec, &config)?;
    let mut out = Output::default();
    for cell in table.cells.iter().filter(|c| c.failed > 0) {
        out.warnings.push(format!(
            "{} at nsim={}: {} of {} replications failed",
            cell.estimator.label(),
            cell.nsim,
            cell.failed,
            cell.failed + cell.succeeded
        ));
    }
    out.artifacts.add("spec.json", (spec.to_json()? + "\n").into_bytes());
    out.artifacts.write_with("comparison.csv", |w| table.write_csv(w))?;
    out.artifacts.write_with("records.csv", |w| table.write_records_csv(w))?;
    Ok(out)
}

/// Input panel with the target column located (and appended from the
/// low-frequency file when one is given).
fn impute_panel(cfg: &RunConfig) -> Result<(PanelFile, usize)> {
    let mut file = read_panel(cfg.input.as_ref().expect("validated"))?;
    if let Some(low_path) = &cfg.low_input {
        let low = read_panel(low_path)?;
        let col = match &cfg.target {
            Some(name) => low
                .panel
                .column_index(name)
                .ok_or_else(|| anyhow!("{} has no column {name:?}", low_path.display()))?,
            None => 0,
        };
        let name = low.panel.names()[col].clone();
        if file.panel.column_index(&name).is_some() {
            bail!("target {name:?} appears in both input files");
        }
        let spec = parse_grid(cfg.grid.as_deref().expect("validated"), Some(low.panel.nrows()))?;
        let grid: TimeGrid = build_time_grid(&spec)?.with_release_lag(cfg.release_lag.unwrap_or(0));
        if grid.high_count() != file.panel.nrows() {
            bail!(
                "grid {spec} has {} sub-periods but the input has {} rows",
                grid.high_count(),
                file.panel.nrows()
            );
        }
        let series = low.panel.column(col);
        let y_low: Vec<f64> = (0..series.len())
            .map(|t| if series.observed[t] { series.values[t] } else { f64::NAN })
            .collect();
        let embedded = embed_low_frequency(&y_low, &grid)?;
        file.panel = file.panel.with_column(&name, &embedded)?;
        let target = file.panel.ncols() - 1;
        return Ok((file, target));
    }
    let name = cfg.target.as_deref().expect("validated");
    let target = file
        .panel
        .column_index(name)
        .ok_or_else(|| anyhow!("input has no column {name:?}"))?;
    Ok((file, target))
}

fn prepare_with_target(cfg: &RunConfig, file: &PanelFile, target: usize) -> Result<(Prepared, usize)> {
    let name = file.panel.names()[target].clone();
    let panel = prepare_panel(&file.panel, &cfg.prepare_options(), &[target])?;
    let target = panel.column_index(&name).expect("target kept");
    let predictors: Vec<usize> = (0..panel.ncols()).filter(|&j| j != target).collect();
    if predictors.is_empty() {
        bail!("no predictor columns besides the target");
    }
    let prepared = handle_ragged(
        &panel,
        &file.row_labels,
        &predictors,
        cfg.prepare.ragged.unwrap_or_default(),
        cfg.r.unwrap_or(2),
    )?;
    Ok((prepared, target))
}

#[derive(Serialize)]
struct MethodReport {
    method: String,
    error: Option<String>,
    params: Option<imputers::FittedParams>,
}

pub fn run_impute(cfg: &RunConfig) -> Result<Output> {
    let (file, target) = impute_panel(cfg)?;
    let (prepared, target) = prepare_with_target(cfg, &file, target)?;
    let methods = cfg.impute_methods().map_err(|e| anyhow!("{e}"))?;
    let settings = method_settings(cfg);
    let original = prepared.panel.column(target);
    if original.observed.iter().filter(|&&o| o).count() < 2 {
        bail!("target has fewer than two observations in the kept rows");
    }
    let work = prepared.panel.standardize()?;
    let predictors: Vec<usize> = (0..work.ncols()).filter(|&j| j != target).collect();
    let est = factors::estimate_pc(work.select_columns(&predictors)?.complete_values()?, settings.r)?;

    let results: Vec<(ImputeMethod, mfimpute::Result<ImputationResult>)> = {
        use rayon::prelude::*;
        methods
            .par_iter()
            .map(|&m| (m, imputers::impute_with(m, &work, target, &est.factors, &settings)))
            .collect()
    };
    let mut out = Output::default();
    let mut ok = Vec::new();
    let mut reports = Vec::new();
    for (m, res) in results {
        match res {
            Ok(mut res) => {
                // back to input units; observed entries are copied so they
                // survive bit for bit
                for s in 0..res.series.len() {
                    res.series[s] = if res.provenance[s] == Provenance::Observed {
                        original.values[s]
                    } else {
                        work.to_original_units(target, res.series[s])
                    };
                }
                reports.push(MethodReport {
                    method: m.label().into(),
                    error: None,
                    params: Some(res.params.clone()),
                });
                ok.push(res);
            }
            Err(e) => {
                out.warnings.push(format!("{} failed: {e}", m.label()));
                reports.push(MethodReport {
                    method: m.label().into(),
                    error: Some(e.to_string()),
                    params: None,
                });
            }
        }
    }
    if ok.is_empty() {
        bail!("every method failed: {}", out.warnings.join("; "));
    }
    for res in &ok {
        let name = format!("impute_{}.csv", method_slug(res.method));
        out.artifacts
            .write_with(name, |w| io::write_imputations_csv(w, std::slice::from_ref(res), &prepared.labels))?;
    }
    out.artifacts
        .write_with("comparison.csv", |w| io::write_comparison_csv(w, &ok, &prepared.labels))?;
    let names: Vec<String> = predictors.iter().map(|&j| work.names()[j].clone()).collect();
    let mut factor_csv = Vec::new();
    let mut sidecar = Vec::new();
    io::write_factors(&mut factor_csv, &mut sidecar, &est, &names, &prepared.labels)?;
    out.artifacts.add("factors.csv", factor_csv);
    sidecar.push(b'\n');
    out.artifacts.add("factors.json", sidecar);
    out.artifacts.json("methods.json", &reports)?;
    Ok(out)
}

/// Rows where a new decade starts.
pub fn decade_breaks(dates: &[NaiveDate]) -> Vec<usize> {
    (1..dates.len())
        .filter(|&s| dates[s].year() / 10 != dates[s - 1].year() / 10)
        .collect()
}

fn counterfactual_spec(cfg: &RunConfig, first_month: u32, breaks: Vec<usize>) -> Result<CounterfactualSpec> {
    let settings = method_settings(cfg);
    let cf = &cfg.counterfactual;
    let mut spec = CounterfactualSpec::new(
        cfg.target.as_deref().unwrap_or("y"),
        MaskPattern::KeepMonths {
            months: cf.keep_months.clone().unwrap_or_default(),
            first_month,
        },
        cfg.impute_methods().map_err(|e| anyhow!("{e}"))?,
        settings.r,
    );
    spec.breaks = breaks;
    spec.var_order = settings.var_order;
    spec.tp_star = settings.tp_star;
    spec.em = settings.em;
    spec.standardize = cf.standardize.unwrap_or(true);
    Ok(spec)
}

#[derive(Serialize)]
struct DrawSummary {
    method: String,
    failed: usize,
    median_mse: Option<f64>,
    mean_mse: Option<f64>,
    /// Median over draws of the MSE relative to TP on the same draw.
    median_ratio_to_tp: Option<f64>,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[k] } else { 0.5 * (v[k - 1] + v[k]) })
}

pub fn run_counterfactual(cfg: &RunConfig) -> Result<Output> {
    let cf = &cfg.counterfactual;
    let mut out = Output::default();
    if cf.synthetic == Some(true) {
        let design = cf.design.clone().unwrap_or_default();
        let spec = counterfactual_spec(cfg, cf.first_month.unwrap_or(1), cf.breaks.clone().unwrap_or_default())?;
        let draws = cf.draws.unwrap_or(1);
        let mse = evaluation::run_cs_style_experiment(&design, &spec, draws, cfg.seed.unwrap_or(0))?;
        let tp = spec.methods.iter().position(|&m| m == ImputeMethod::Tp);
        let table = csv_bytes(|w| {
            let mut header = vec!["draw".to_string()];
            header.extend(spec.methods.iter().map(|m| m.label().to_string()));
            w.write_record(&header)?;
            for (k, row) in mse.iter().enumerate() {
                let mut rec = vec![k.to_string()];
                rec.extend(row.iter().map(|v| if v.is_nan() { String::new() } else { v.to_string() }));
                w.write_record(&rec)?;
            }
            Ok(())
        })?;
        let mut summary = Vec::new();
        for (i, m) in spec.methods.iter().enumerate() {
            let vals: Vec<f64> = mse.iter().map(|row| row[i]).filter(|v| v.is_finite()).collect();
            let failed = draws - vals.len();
            if failed > 0 {
                out.warnings.push(format!("{} failed on {failed} of {draws} draws", m.label()));
            }
            let ratios = tp.map(|j| {
                mse.iter()
                    .filter(|row| row[i].is_finite() && row[j].is_finite() && row[j] > 0.0)
                    .map(|row| row[i] / row[j])
                    .collect::<Vec<_>>()
            });
            summary.push(DrawSummary {
                method: m.label().into(),
                failed,
                mean_mse: (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64),
                median_mse: median(vals),
                median_ratio_to_tp: ratios.and_then(median),
            });
        }
        out.artifacts.add("draws.csv", table);
        out.artifacts.json("summary.json", &summary)?;
        out.artifacts.json("design.json", &design)?;
        return Ok(out);
    }

    let file = read_panel(cfg.input.as_ref().expect("validated"))?;
    let name = cfg.target.as_deref().expect("validated");
    let target = file
        .panel
        .column_index(name)
        .ok_or_else(|| anyhow!("input has no column {name:?}"))?;
    let (prepared, _) = prepare_with_target(cfg, &file, target)?;
    let dates: Option<Vec<NaiveDate>> = prepared.labels.iter().map(|l| io::parse_date(l)).collect();
    let first_month = match (cf.first_month, &dates) {
        (Some(m), _) => m,
        (None, Some(d)) if !d.is_empty() => d[0].month(),
        _ => 1,
    };
    let breaks = match (&cf.breaks, &dates) {
        (Some(b), _) => b.clone(),
        (None, Some(d)) => decade_breaks(d),
        _ => Vec::new(),
    };
    let spec = counterfactual_spec(cfg, first_month, breaks)?;
    let outcome = evaluation::run_counterfactual(&prepared.panel, &spec)?;
    for m in &outcome.methods {
        if let Err(e) = &m.outcome {
            out.warnings.push(format!("{} failed: {e}", m.method.label()));
        }
    }
    let labels = &prepared.labels;
    out.artifacts
        .write_with("scores.csv", |w| outcome.write_scores_csv(w, Some(labels)))?;
    out.artifacts.write_with("summary.csv", |w| outcome.write_summary_csv(w))?;
    out.artifacts
        .write_with("series.csv", |w| outcome.write_series_csv(w, Some(labels)))?;
    Ok(out)
}

/// Resolve, validate and run a configuration, writing its outputs and
/// manifest. Returns the manifest.
pub fn execute(cfg: RunConfig) -> Result<Manifest> {
    let cfg = cfg.resolve();
    cfg.validate()?;
    let started = Instant::now();
    let threads = cfg.threads.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
    let command = cfg.command.expect("validated");
    let output = pool.install(|| match command {
        CommandKind::Grid => run_grid(&cfg),
        CommandKind::Calibrate => run_calibrate(&cfg),
        CommandKind::Simulate => run_simulate(&cfg),
        CommandKind::Impute => run_impute(&cfg),
        CommandKind::Counterfactual => run_counterfactual(&cfg),
    })?;
    let mut echo = cfg.clone();
    echo.out = None;
    echo.threads = None;
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        library_version: mfimpute::VERSION.into(),
        command: command.to_string(),
        seed: cfg.seed.unwrap_or(0),
        config: echo,
        outputs: Vec::new(),
        warnings: output.warnings,
        runtime: Runtime {
            threads: pool.current_num_threads(),
            elapsed_ms: started.elapsed().as_millis(),
        },
    };
    let dir: PathBuf = cfg.out.clone().expect("resolved");
    manifest::write_outputs(&dir, &output.artifacts, manifest)
}
