//! Run configuration: a TOML file, overridden field by field by flags.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use mfimpute::evaluation::CsStyleDesign;
use mfimpute::imputers::{ImputeMethod, SignRestriction};
use mfimpute::simulation::CalibrationMethod;
use mfimpute::FactorMethod;
use serde::{Deserialize, Serialize};

use crate::prepare::{Detrend, PrepareOptions, RaggedEdge};

pub const OUT_ENV: &str = "MIXFREQ_OUT";
pub const DEFAULT_OUT: &str = "mfimpute-out";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum CommandKind {
    Grid,
    Calibrate,
    Simulate,
    Impute,
    Counterfactual,
}

impl fmt::Display for CommandKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.to_possible_value().expect("no skipped variants").get_name())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareSection {
    pub detrend: Option<Detrend>,
    /// Per-column overrides of `detrend`.
    pub columns: BTreeMap<String, Detrend>,
    pub lags: Option<usize>,
    pub ragged: Option<RaggedEdge>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateSection {
    pub method: Option<CalibrationMethod>,
    pub block_shares: Option<Vec<f64>>,
    pub label: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    /// Path to a JSON spec or synthetic targets, or `builtin:dgp1`,
    /// `builtin:dgp2`.
    pub spec: Option<String>,
    pub nsim: Option<Vec<usize>>,
    pub reps: Option<usize>,
    pub estimators: Option<Vec<String>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CounterfactualSection {
    pub keep_months: Option<Vec<u32>>,
    /// Calendar month of the first row; read from the dates when absent.
    pub first_month: Option<u32>,
    /// Row indices where scoring windows start; decades when absent.
    pub breaks: Option<Vec<usize>>,
    pub standardize: Option<bool>,
    /// Use simulated panels instead of an input file.
    pub synthetic: Option<bool>,
    pub draws: Option<usize>,
    pub design: Option<CsStyleDesign>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: Option<CommandKind>,
    pub input: Option<PathBuf>,
    /// Low-frequency target, placed on the grid at release sub-periods.
    pub low_input: Option<PathBuf>,
    pub target: Option<String>,
    pub grid: Option<String>,
    pub release_lag: Option<usize>,
    pub r: Option<usize>,
    /// VAR order.
    pub p: Option<usize>,
    /// Factor lags in the TP* regression.
    pub factor_lags: Option<usize>,
    pub methods: Option<Vec<String>>,
    pub rho_sign: Option<SignRestriction>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub prepare: PrepareSection,
    pub calibrate: CalibrateSection,
    pub simulate: SimulateSection,
    pub counterfactual: CounterfactualSection,
}

macro_rules! overlay {
    ($base:expr, $top:expr; $($field:ident),* $(,)?) => {
        $( if $top.$field.is_some() { $base.$field = $top.$field.clone(); } )*
    };
}

/// A field-level validation failure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub field: &'static str,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigErrors(pub Vec<FieldError>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "invalid configuration:")?;
        for e in &self.0 {
            writeln!(f, "  {e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

pub const DEFAULT_METHODS: &str = "tp,tp-star,cl";
pub const DEFAULT_ESTIMATORS: &str = "pc,mle-h,pc-gls-h,pc-gls-har,pc-ks";

fn split(list: &str) -> Vec<String> {
    list.split(',').map(str::to_string).collect()
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    /// Read a config file; relative paths in it are taken relative to the
    /// file's directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("reading config {}: {e}", path.display()))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| anyhow::anyhow!("config {}: {e}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut Option<PathBuf>| {
            if let Some(q) = p.as_mut() {
                if q.is_relative() {
                    *q = base.join(&*q);
                }
            }
        };
        rebase(&mut cfg.input);
        rebase(&mut cfg.low_input);
        rebase(&mut cfg.out);
        if let Some(spec) = cfg.simulate.spec.as_mut() {
            if !spec.starts_with("builtin:") && Path::new(spec.as_str()).is_relative() {
                *spec = base.join(&*spec).to_string_lossy().into_owned();
            }
        }
        Ok(cfg)
    }

    /// Fields set in `top` replace those in `self`.
    pub fn overlay(mut self, top: &RunConfig) -> Self {
        overlay!(self, top; command, input, low_input, target, grid, release_lag, r, p, factor_lags,
            methods, rho_sign, tol, max_iter, seed, out, threads);
        overlay!(self.prepare, top.prepare; detrend, lags, ragged);
        self.prepare
            .columns
            .extend(top.prepare.columns.iter().map(|(k, v)| (k.clone(), *v)));
        overlay!(self.calibrate, top.calibrate; method, block_shares, label);
        overlay!(self.simulate, top.simulate; spec, nsim, reps, estimators);
        overlay!(self.counterfactual, top.counterfactual; keep_months, first_month, breaks, standardize,
            synthetic, draws, design);
        self
    }

    /// Fill unset fields that have defaults. `out` falls back to
    /// `$MIXFREQ_OUT`, then to `mfimpute-out`.
    pub fn resolve(mut self) -> Self {
        self.release_lag.get_or_insert(0);
        self.r.get_or_insert(2);
        self.p.get_or_insert(1);
        self.factor_lags.get_or_insert(1);
        self.methods.get_or_insert_with(|| split(DEFAULT_METHODS));
        self.rho_sign.get_or_insert(SignRestriction::Positive);
        self.tol.get_or_insert(1e-8);
        self.max_iter.get_or_insert(500);
        self.seed.get_or_insert(0);
        if self.out.is_none() {
            self.out = Some(
                std::env::var_os(OUT_ENV)
                    .filter(|v| !v.is_empty())
                    .map_or_else(|| PathBuf::from(DEFAULT_OUT), PathBuf::from),
            );
        }
        self.threads.get_or_insert(0);
        self.prepare.detrend.get_or_insert(Detrend::None);
        self.prepare.lags.get_or_insert(0);
        self.prepare.ragged.get_or_insert(RaggedEdge::Truncate);
        self.calibrate.method.get_or_insert(CalibrationMethod::Pc);
        let r = self.r.unwrap_or(2);
        self.calibrate
            .block_shares
            .get_or_insert_with(|| vec![1.0 / r as f64; r]);
        self.calibrate.label.get_or_insert_with(|| "calibrated".into());
        self.simulate.nsim.get_or_insert_with(|| vec![10, 30, 50]);
        self.simulate.reps.get_or_insert(100);
        self.simulate.estimators.get_or_insert_with(|| split(DEFAULT_ESTIMATORS));
        let cf = &mut self.counterfactual;
        cf.keep_months.get_or_insert_with(|| vec![2, 5, 8, 11]);
        cf.standardize.get_or_insert(true);
        cf.synthetic.get_or_insert(false);
        cf.draws.get_or_insert(50);
        if cf.synthetic == Some(true) {
            cf.design.get_or_insert_with(CsStyleDesign::default);
            self.target.get_or_insert_with(|| "y".into());
        }
        self
    }

    pub fn impute_methods(&self) -> Result<Vec<ImputeMethod>, FieldError> {
        parse_list("methods", self.methods.as_deref().unwrap_or_default(), ImputeMethod::parse)
    }

    pub fn estimators(&self) -> Result<Vec<FactorMethod>, FieldError> {
        parse_list(
            "simulate.estimators",
            self.simulate.estimators.as_deref().unwrap_or_default(),
            FactorMethod::parse,
        )
    }

    pub fn prepare_options(&self) -> PrepareOptions {
        PrepareOptions {
            detrend: self.prepare.detrend.unwrap_or_default(),
            columns: self.prepare.columns.clone(),
            lags: self.prepare.lags.unwrap_or(0),
        }
    }

    /// Check a resolved config for the command it will run.
    pub fn validate(&self) -> Result<(), ConfigErrors> {
        let mut errs = Vec::new();
        let mut err = |field: &'static str, message: String| errs.push(FieldError { field, message });
        let Some(command) = self.command else {
            err("command", "no command given".into());
            return Err(ConfigErrors(errs));
        };
        let needs_file = |path: &Option<PathBuf>| path.as_ref().map(|p| p.is_file());
        let require_input = |err: &mut dyn FnMut(&'static str, String), field: &'static str, p: &Option<PathBuf>| {
            match needs_file(p) {
                None => err(field, "required".into()),
                Some(false) => err(field, format!("{} does not exist", p.as_ref().unwrap().display())),
                Some(true) => {}
            }
        };
        let r = self.r.unwrap_or(0);
        if !(1..=50).contains(&r) {
            err("r", format!("{r} is outside 1..=50"));
        }
        if !(1..=12).contains(&self.p.unwrap_or(0)) {
            err("p", "must lie in 1..=12".into());
        }
        if self.factor_lags.unwrap_or(0) > 12 {
            err("factor_lags", "must be at most 12".into());
        }
        let tol = self.tol.unwrap_or(f64::NAN);
        if !(tol > 0.0 && tol < 1.0) {
            err("tol", format!("{tol} is outside (0, 1)"));
        }
        if self.max_iter.unwrap_or(0) == 0 {
            err("max_iter", "must be positive".into());
        }
        if self.threads.unwrap_or(0) > 1024 {
            err("threads", "must be at most 1024 (0 means all cores)".into());
        }
        if self.prepare.lags.unwrap_or(0) > 52 {
            err("prepare.lags", "must be at most 52".into());
        }
        match command {
            CommandKind::Grid => {
                if self.grid.is_none() {
                    err("grid", "required".into());
                }
            }
            CommandKind::Calibrate => {
                require_input(&mut err, "input", &self.input);
                let shares = self.calibrate.block_shares.clone().unwrap_or_default();
                let total: f64 = shares.iter().sum();
                if shares.is_empty() || shares.iter().any(|&s| !(s > 0.0)) || (total - 1.0).abs() > 1e-6 {
                    err("calibrate.block_shares", "must be positive and sum to 1".into());
                }
            }
            CommandKind::Simulate => {
                match self.simulate.spec.as_deref() {
                    None => err("simulate.spec", "required".into()),
                    Some(s) if s.starts_with("builtin:") => {
                        if !matches!(s, "builtin:dgp1" | "builtin:dgp2") {
                            err("simulate.spec", format!("unknown builtin {s:?} (dgp1, dgp2)"));
                        }
                    }
                    Some(s) => {
                        if !Path::new(s).is_file() {
                            err("simulate.spec", format!("{s} does not exist"));
                        }
                    }
                }
                let nsim = self.simulate.nsim.clone().unwrap_or_default();
                if nsim.is_empty() || nsim.iter().any(|&n| n < 3) {
                    err("simulate.nsim", "needs at least one width, each at least 3".into());
                }
                if self.simulate.reps.unwrap_or(0) == 0 {
                    err("simulate.reps", "must be positive".into());
                }
                if let Err(e) = self.estimators() {
                    errs_push(&mut err, e);
                }
            }
            CommandKind::Impute => {
                require_input(&mut err, "input", &self.input);
                if self.low_input.is_some() {
                    require_input(&mut err, "low_input", &self.low_input);
                    if self.grid.is_none() {
                        err("grid", "required with low_input".into());
                    }
                } else if self.target.is_none() {
                    err("target", "required unless low_input is given".into());
                }
                if let Err(e) = self.impute_methods() {
                    errs_push(&mut err, e);
                }
            }
            CommandKind::Counterfactual => {
                let cf = &self.counterfactual;
                if cf.synthetic == Some(true) {
                    if cf.draws.unwrap_or(0) == 0 {
                        err("counterfactual.draws", "must be positive".into());
                    }
                } else {
                    require_input(&mut err, "input", &self.input);
                    if self.target.is_none() {
                        err("target", "required".into());
                    }
                }
                let months = cf.keep_months.clone().unwrap_or_default();
                if months.is_empty() || months.iter().any(|m| !(1..=12).contains(m)) {
                    err("counterfactual.keep_months", "must be months in 1..=12".into());
                }
                if cf.first_month.is_some_and(|m| !(1..=12).contains(&m)) {
                    err("counterfactual.first_month", "must lie in 1..=12".into());
                }
                if let Some(b) = &cf.breaks {
                    if b.windows(2).any(|w| w[0] >= w[1]) {
                        err("counterfactual.breaks", "must be strictly increasing".into());
                    }
                }
                if let Err(e) = self.impute_methods() {
                    errs_push(&mut err, e);
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigErrors(errs))
        }
    }
}

fn errs_push(err: &mut dyn FnMut(&'static str, String), e: FieldError) {
    err(e.field, e.message);
}

fn parse_list<T>(field: &'static str, items: &[String], parse: fn(&str) -> Option<T>) -> Result<Vec<T>, FieldError> {
    if items.is_empty() {
        return Err(FieldError {
            field,
            message: "empty list".into(),
        });
    }
    items
        .iter()
        .map(|s| {
            parse(s.trim()).ok_or_else(|| FieldError {
                field,
                message: format!("unknown name {s:?}"),
            })
        })
        .collect()
}
