//! Flags. Every flag mirrors a config field and overrides it when given.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use mfimpute::imputers::SignRestriction;
use mfimpute::simulation::CalibrationMethod;

use crate::config::{CommandKind, RunConfig};
use crate::prepare::{Detrend, RaggedEdge};

#[derive(Debug, Parser)]
#[command(name = "mfimpute", version, about = "Factor-based imputation of mixed-frequency series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a time grid and list its sub-periods.
    Grid {
        #[command(flatten)]
        common: Common,
        /// `fixed:<m>:<periods>` or `weekly:<start>:<end>`.
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        release_lag: Option<usize>,
    },
    /// Estimate a simulation spec from a panel.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        panel: PanelArgs,
        #[arg(long)]
        p: Option<usize>,
        #[arg(long, value_enum)]
        method: Option<CalibrationMethodArg>,
        #[arg(long, value_delimiter = ',')]
        block_shares: Option<Vec<f64>>,
        #[arg(long)]
        label: Option<String>,
    },
    /// Monte Carlo comparison of factor estimators.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// JSON spec or synthetic targets, or `builtin:dgp1` / `builtin:dgp2`.
        #[arg(long)]
        spec: Option<String>,
        #[arg(long, value_delimiter = ',')]
        nsim: Option<Vec<usize>>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        estimators: Option<Vec<String>>,
        #[arg(long)]
        p: Option<usize>,
    },
    /// Impute the high-frequency values of a low-frequency target.
    Impute {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        panel: PanelArgs,
        #[command(flatten)]
        methods: MethodArgs,
        /// Low-frequency target file, placed on the grid.
        #[arg(long)]
        low_input: Option<PathBuf>,
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        release_lag: Option<usize>,
    },
    /// Mask a fully observed target and score each method on the hidden values.
    Counterfactual {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        panel: PanelArgs,
        #[command(flatten)]
        methods: MethodArgs,
        /// Calendar months that stay observed.
        #[arg(long, value_delimiter = ',')]
        keep_months: Option<Vec<u32>>,
        #[arg(long)]
        first_month: Option<u32>,
        /// Rows where scoring windows start.
        #[arg(long, value_delimiter = ',')]
        breaks: Option<Vec<usize>>,
        #[arg(long)]
        no_standardize: bool,
        /// Draw simulated panels instead of reading an input file.
        #[arg(long)]
        synthetic: bool,
        #[arg(long)]
        draws: Option<usize>,
    },
    /// Run the command named in a config file.
    Run {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum CalibrationMethodArg {
    Pc,
    Mle,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum SignArg {
    None,
    Positive,
    Negative,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (default: $MIXFREQ_OUT, then ./mfimpute-out).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PanelArgs {
    /// Panel CSV: a row label column, then one column per series.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub r: Option<usize>,
    #[arg(long, value_enum)]
    pub detrend: Option<Detrend>,
    /// Per-column detrending, `name=kind`; repeatable.
    #[arg(long = "detrend-column", value_parser = parse_column_detrend)]
    pub detrend_columns: Vec<(String, Detrend)>,
    /// Lagged copies of each predictor.
    #[arg(long)]
    pub lags: Option<usize>,
    #[arg(long, value_enum)]
    pub ragged: Option<RaggedEdge>,
}

#[derive(Debug, Args)]
pub struct MethodArgs {
    /// Comma-separated: tp, tp-star, cl, em, ks, ks-star.
    #[arg(long = "method", value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub factor_lags: Option<usize>,
    #[arg(long, value_enum)]
    pub rho_sign: Option<SignArg>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
}

fn parse_column_detrend(s: &str) -> Result<(String, Detrend), String> {
    use clap::ValueEnum;
    let (name, kind) = s.split_once('=').ok_or("expected name=kind")?;
    let kind = Detrend::from_str(kind, true)?;
    Ok((name.to_string(), kind))
}

impl Common {
    fn apply(&self, cfg: &mut RunConfig) {
        cfg.out = self.out.clone().or(cfg.out.take());
        cfg.threads = self.threads.or(cfg.threads);
        cfg.seed = self.seed.or(cfg.seed);
    }
}

impl PanelArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        cfg.input = self.input.clone().or(cfg.input.take());
        cfg.target = self.target.clone().or(cfg.target.take());
        cfg.r = self.r.or(cfg.r);
        cfg.prepare.detrend = self.detrend.or(cfg.prepare.detrend);
        cfg.prepare.columns.extend(self.detrend_columns.iter().cloned());
        cfg.prepare.lags = self.lags.or(cfg.prepare.lags);
        cfg.prepare.ragged = self.ragged.or(cfg.prepare.ragged);
    }
}

impl MethodArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        cfg.methods = self.methods.clone().or(cfg.methods.take());
        cfg.p = self.p.or(cfg.p);
        cfg.factor_lags = self.factor_lags.or(cfg.factor_lags);
        cfg.rho_sign = self
            .rho_sign
            .map(|s| match s {
                SignArg::None => SignRestriction::None,
                SignArg::Positive => SignRestriction::Positive,
                SignArg::Negative => SignRestriction::Negative,
            })
            .or(cfg.rho_sign);
        cfg.tol = self.tol.or(cfg.tol);
        cfg.max_iter = self.max_iter.or(cfg.max_iter);
    }
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Grid { common, .. }
            | Command::Calibrate { common, .. }
            | Command::Simulate { common, .. }
            | Command::Impute { common, .. }
            | Command::Counterfactual { common, .. }
            | Command::Run { common } => common,
        }
    }

    fn kind(&self) -> Option<CommandKind> {
        Some(match self {
            Command::Grid { .. } => CommandKind::Grid,
            Command::Calibrate { .. } => CommandKind::Calibrate,
            Command::Simulate { .. } => CommandKind::Simulate,
            Command::Impute { .. } => CommandKind::Impute,
            Command::Counterfactual { .. } => CommandKind::Counterfactual,
            Command::Run { .. } => return None,
        })
    }

    /// The config file (if any) with this command's flags applied.
    pub fn into_config(self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.common().config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(kind) = self.kind() {
            if let Some(file_kind) = cfg.command.filter(|&k| k != kind) {
                anyhow::bail!("config file is for `{file_kind}` but `{kind}` was run");
            }
            cfg.command = Some(kind);
        }
        self.common().apply(&mut cfg);
        match &self {
            Command::Grid { grid, release_lag, .. } => {
                cfg.grid = grid.clone().or(cfg.grid.take());
                cfg.release_lag = release_lag.or(cfg.release_lag);
            }
            Command::Calibrate {
                panel,
                p,
                method,
                block_shares,
                label,
                ..
            } => {
                panel.apply(&mut cfg);
                cfg.p = p.or(cfg.p);
                cfg.calibrate.method = method
                    .map(|m| match m {
                        CalibrationMethodArg::Pc => CalibrationMethod::Pc,
                        CalibrationMethodArg::Mle => CalibrationMethod::Mle,
                    })
                    .or(cfg.calibrate.method);
                cfg.calibrate.block_shares = block_shares.clone().or(cfg.calibrate.block_shares.take());
                cfg.calibrate.label = label.clone().or(cfg.calibrate.label.take());
            }
            Command::Simulate {
                spec,
                nsim,
                reps,
                estimators,
                p,
                ..
            } => {
                cfg.simulate.spec = spec.clone().or(cfg.simulate.spec.take());
                cfg.simulate.nsim = nsim.clone().or(cfg.simulate.nsim.take());
                cfg.simulate.reps = reps.or(cfg.simulate.reps);
                cfg.simulate.estimators = estimators.clone().or(cfg.simulate.estimators.take());
                cfg.p = p.or(cfg.p);
            }
            Command::Impute {
                panel,
                methods,
                low_input,
                grid,
                release_lag,
                ..
            } => {
                panel.apply(&mut cfg);
                methods.apply(&mut cfg);
                cfg.low_input = low_input.clone().or(cfg.low_input.take());
                cfg.grid = grid.clone().or(cfg.grid.take());
                cfg.release_lag = release_lag.or(cfg.release_lag);
            }
            Command::Counterfactual {
                panel,
                methods,
                keep_months,
                first_month,
                breaks,
                no_standardize,
                synthetic,
                draws,
                ..
            } => {
                panel.apply(&mut cfg);
                methods.apply(&mut cfg);
                let cf = &mut cfg.counterfactual;
                cf.keep_months = keep_months.clone().or(cf.keep_months.take());
                cf.first_month = first_month.or(cf.first_month);
                cf.breaks = breaks.clone().or(cf.breaks.take());
                if *no_standardize {
                    cf.standardize = Some(false);
                }
                if *synthetic {
                    cf.synthetic = Some(true);
                }
                cf.draws = draws.or(cf.draws);
            }
            Command::Run { .. } => {}
        }
        Ok(cfg)
    }
}
