//! Imputation of the unobserved high-frequency values of a target series.
//!
//! Every imputer returns the observed values unchanged at observed
//! sub-periods and fills the rest.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factors::{self, RHO_CAP};
use crate::grid::{embed_low_frequency, MaskedSeries, TimeGrid};
use crate::linalg::{self, Mat, Vector};
use crate::panel::Panel;
use crate::state_space::{self, DfmStructure, EmOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Observed,
    Imputed,
}

impl Provenance {
    pub fn label(self) -> &'static str {
        match self {
            Provenance::Observed => "observed",
            Provenance::Imputed => "imputed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ImputeMethod {
    Tp,
    Em,
    ChowLin,
    TpStar,
    Ks,
    KsStar,
}

impl ImputeMethod {
    pub const ALL: [ImputeMethod; 6] = [
        ImputeMethod::Tp,
        ImputeMethod::Em,
        ImputeMethod::ChowLin,
        ImputeMethod::TpStar,
        ImputeMethod::Ks,
        ImputeMethod::KsStar,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ImputeMethod::Tp => "TP",
            ImputeMethod::Em => "EM",
            ImputeMethod::ChowLin => "CL",
            ImputeMethod::TpStar => "TP*",
            ImputeMethod::Ks => "KS",
            ImputeMethod::KsStar => "KS*",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric() || *c == '*')
            .collect::<String>()
            .to_ascii_lowercase();
        Some(match key.as_str() {
            "tp" => ImputeMethod::Tp,
            "em" => ImputeMethod::Em,
            "cl" | "chowlin" => ImputeMethod::ChowLin,
            "tp*" | "tpstar" => ImputeMethod::TpStar,
            "ks" => ImputeMethod::Ks,
            "ks*" | "ksstar" => ImputeMethod::KsStar,
            _ => return None,
        })
    }
}

/// Fitted quantities reported with an imputation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FittedParams {
    /// Target loadings, or regression coefficients for CL and TP*.
    pub coefficients: Vec<f64>,
    pub rho: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImputationResult {
    pub series: Vec<f64>,
    pub provenance: Vec<Provenance>,
    pub method: ImputeMethod,
    pub params: FittedParams,
}

impl ImputationResult {
    fn assemble(
        observed: &MaskedSeries,
        fill: &[f64],
        method: ImputeMethod,
        params: FittedParams,
    ) -> Result<Self> {
        let mut series = Vec::with_capacity(observed.len());
        let mut provenance = Vec::with_capacity(observed.len());
        for s in 0..observed.len() {
            if observed.observed[s] {
                series.push(observed.values[s]);
                provenance.push(Provenance::Observed);
            } else {
                series.push(fill[s]);
                provenance.push(Provenance::Imputed);
            }
        }
        if series.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("imputed series"));
        }
        Ok(Self {
            series,
            provenance,
            method,
            params,
        })
    }

    pub fn imputed_indices(&self) -> Vec<usize> {
        (0..self.series.len())
            .filter(|&s| self.provenance[s] == Provenance::Imputed)
            .collect()
    }
}

fn check_series(y: &MaskedSeries, rows: usize) -> Result<Vec<usize>> {
    if y.len() != rows {
        return Err(Error::Dimension(format!(
            "target has {} sub-periods but regressors have {rows}",
            y.len()
        )));
    }
    let obs = y.observed_indices();
    if obs.iter().any(|&s| !y.values[s].is_finite()) {
        return Err(Error::NonFinite("observed target value"));
    }
    Ok(obs)
}

fn with_intercept(x: &Mat) -> Mat {
    x.clone().insert_column(0, 1.0)
}

/// Static fill: regress the observed target values on the factors at the
/// same sub-periods and predict the rest. With `intercept` a constant is
/// added to the regression.
pub fn impute_tp_series(y: &MaskedSeries, factors: &Mat, intercept: bool) -> Result<ImputationResult> {
    let obs = check_series(y, factors.nrows())?;
    let design = if intercept { with_intercept(factors) } else { factors.clone() };
    let k = design.ncols();
    if obs.len() <= k {
        return Err(Error::Invalid(format!(
            "{} observed target values cannot identify {k} coefficients",
            obs.len()
        )));
    }
    let x = design.select_rows(&obs);
    let yo = Vector::from_iterator(obs.len(), obs.iter().map(|&s| y.values[s]));
    let coef = linalg::ols(&x, &yo)?;
    let fit = &design * &coef;
    let params = FittedParams {
        coefficients: coef.iter().copied().collect(),
        rho: None,
        iterations: 0,
        converged: true,
    };
    ImputationResult::assemble(y, fit.as_slice(), ImputeMethod::Tp, params)
}

/// Static fill for a low-frequency series released on `grid`.
pub fn impute_tp(y_low: &[f64], factors: &Mat, grid: &TimeGrid) -> Result<ImputationResult> {
    check_grid(factors, grid)?;
    impute_tp_series(&embed_low_frequency(y_low, grid)?, factors, false)
}

fn check_grid(regressors: &Mat, grid: &TimeGrid) -> Result<()> {
    if regressors.nrows() != grid.high_count() {
        return Err(Error::Dimension(format!(
            "regressors have {} rows but the grid has {} sub-periods",
            regressors.nrows(),
            grid.high_count()
        )));
    }
    Ok(())
}

/// Iterated principal components: fit PC on the completed panel, refill the
/// missing cells with the common component, repeat until the largest change
/// in a filled cell is below `tol`. Missing target cells start from the
/// static fill on factors of the complete columns.
pub fn impute_em(panel: &Panel, target: usize, r: usize, max_iter: usize, tol: f64) -> Result<ImputationResult> {
    if target >= panel.ncols() {
        return Err(Error::Dimension(format!("target column {target} out of range")));
    }
    let t_len = panel.nrows();
    let y = panel.column(target);
    let mut fill = Mat::zeros(t_len, panel.ncols());
    let complete: Vec<usize> = panel
        .complete_columns()
        .into_iter()
        .filter(|&c| c != target)
        .collect();
    if complete.len() >= r {
        let sub = panel.select_columns(&complete)?;
        let pc = factors::estimate_pc(sub.complete_values()?, r)?;
        let tp = impute_tp_series(&y, &pc.factors, false)?;
        fill.set_column(target, &Vector::from_vec(tp.series));
    }
    let mut x = panel.filled_values(&fill)?;
    let missing: Vec<(usize, usize)> = (0..panel.ncols())
        .flat_map(|j| (0..t_len).map(move |i| (i, j)))
        .filter(|&(i, j)| !panel.is_observed(i, j))
        .collect();
    let mut iterations = 0;
    let mut converged = missing.is_empty();
    while !converged && iterations < max_iter {
        iterations += 1;
        let cc = factors::estimate_pc(&x, r)?.common_component();
        let mut change = 0.0_f64;
        for &(i, j) in &missing {
            change = change.max((cc[(i, j)] - x[(i, j)]).abs());
            x[(i, j)] = cc[(i, j)];
        }
        converged = change < tol;
    }
    let params = FittedParams {
        coefficients: Vec::new(),
        rho: None,
        iterations,
        converged,
    };
    let col: Vec<f64> = x.column(target).iter().copied().collect();
    ImputationResult::assemble(&y, &col, ImputeMethod::Em, params)
}

/// How the Chow-Lin AR(1) coefficient is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RhoSearch {
    /// Profiled likelihood over `-0.99, -0.98, …, 0.99`, refined by
    /// golden-section search around the best grid point.
    Grid,
    Fixed { rho: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChowLinFit {
    /// GLS coefficients, intercept first.
    pub beta_gls: Vector,
    pub rho: f64,
    /// Innovation variance at the optimum.
    pub sigma2: f64,
    pub loglik: f64,
    /// Sub-periods at which the target is observed.
    pub observed: Vec<usize>,
    pub low_residuals: Vector,
    /// `V_L = C V_H C'` with unit innovation variance.
    pub low_cov: Mat,
    /// `θ = V_H C' V_L⁻¹`, sub-periods by observed periods.
    pub weights: Mat,
}

/// `Cov(u_a, u_b)` of a stationary AR(1) with unit innovation variance.
pub fn ar1_cov(rho: f64, lag: usize) -> f64 {
    rho.powi(lag as i32) / (1.0 - rho * rho)
}

/// Dense `V_H` for `len` sub-periods.
pub fn ar1_cov_matrix(rho: f64, len: usize) -> Mat {
    Mat::from_fn(len, len, |a, b| ar1_cov(rho, a.abs_diff(b)))
}

/// Whitened GLS on an AR(1) observed at increasing positions `obs`:
/// returns `(β, σ², log|V_L|)`.
fn whitened_gls(obs: &[usize], z: &Mat, y: &Vector, rho: f64) -> Result<(Vector, f64, f64)> {
    let n = obs.len();
    let k = z.ncols();
    let mut zw = Mat::zeros(n, k);
    let mut yw = Vector::zeros(n);
    let base = 1.0 - rho * rho;
    let mut logdet = -base.ln();
    let s0 = base.sqrt();
    yw[0] = y[0] * s0;
    zw.row_mut(0).copy_from(&(z.row(0) * s0));
    for a in 1..n {
        let phi = rho.powi((obs[a] - obs[a - 1]) as i32);
        let v = (1.0 - phi * phi) / base;
        logdet += v.ln();
        let sc = 1.0 / v.sqrt();
        yw[a] = (y[a] - phi * y[a - 1]) * sc;
        let row = (z.row(a) - z.row(a - 1) * phi) * sc;
        zw.row_mut(a).copy_from(&row);
    }
    let beta = linalg::ols(&zw, &yw)
        .map_err(|_| Error::Singular("Chow-Lin GLS normal equations"))?;
    let resid = &yw - &zw * &beta;
    Ok((beta, resid.norm_squared() / n as f64, logdet))
}

fn profiled_loglik(obs: &[usize], z: &Mat, y: &Vector, rho: f64) -> Result<f64> {
    let n = obs.len() as f64;
    let (_, s2, logdet) = whitened_gls(obs, z, y, rho)?;
    Ok(-0.5 * n * (1.0 + (2.0 * std::f64::consts::PI).ln() + s2.max(1e-300).ln()) - 0.5 * logdet)
}

fn golden_max(f: impl Fn(f64) -> Result<f64>, mut lo: f64, mut hi: f64) -> Result<f64> {
    let g = (5.0_f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - g * (hi - lo);
    let mut d = lo + g * (hi - lo);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    while hi - lo > 1e-7 {
        if fc > fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - g * (hi - lo);
            fc = f(c)?;
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + g * (hi - lo);
            fd = f(d)?;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Chow-Lin fit on a masked high-frequency target. `z_high` holds the
/// regressors without a constant; an intercept is added.
pub fn fit_chow_lin_series(y: &MaskedSeries, z_high: &Mat, search: RhoSearch) -> Result<ChowLinFit> {
    let obs = check_series(y, z_high.nrows())?;
    let z = with_intercept(z_high);
    let k = z.ncols();
    if obs.len() <= k {
        return Err(Error::Invalid(format!(
            "Chow-Lin needs more than {k} observed periods, got {}",
            obs.len()
        )));
    }
    let zl = z.select_rows(&obs);
    let yl = Vector::from_iterator(obs.len(), obs.iter().map(|&s| y.values[s]));
    let rho = match search {
        RhoSearch::Fixed { rho } => {
            if rho.abs() >= 1.0 {
                return Err(Error::Invalid(format!("rho {rho} must lie inside (-1, 1)")));
            }
            rho
        }
        RhoSearch::Grid => {
            let mut best = (f64::NEG_INFINITY, 0.0);
            for step in -99..=99 {
                let r = step as f64 / 100.0;
                let ll = profiled_loglik(&obs, &zl, &yl, r)?;
                if ll > best.0 {
                    best = (ll, r);
                }
            }
            let lo = (best.1 - 0.01).max(-RHO_CAP);
            let hi = (best.1 + 0.01).min(RHO_CAP);
            let refined = golden_max(|r| profiled_loglik(&obs, &zl, &yl, r), lo, hi)?;
            if profiled_loglik(&obs, &zl, &yl, refined)? >= best.0 {
                refined
            } else {
                best.1
            }
        }
    };
    let (beta, sigma2, _) = whitened_gls(&obs, &zl, &yl, rho)?;
    let loglik = profiled_loglik(&obs, &zl, &yl, rho)?;
    let low_residuals = &yl - &zl * &beta;
    let n = obs.len();
    let low_cov = Mat::from_fn(n, n, |a, b| ar1_cov(rho, obs[a].abs_diff(obs[b])));
    // θ' = V_L⁻¹ (C V_H)
    let cvh = Mat::from_fn(n, y.len(), |a, s| ar1_cov(rho, obs[a].abs_diff(s)));
    let weights = linalg::solve_spd(&low_cov, &cvh, "Chow-Lin low-frequency covariance")?.transpose();
    Ok(ChowLinFit {
        beta_gls: beta,
        rho,
        sigma2,
        loglik,
        observed: obs,
        low_residuals,
        low_cov,
        weights,
    })
}

pub fn fit_chow_lin(y_low: &[f64], z_high: &Mat, grid: &TimeGrid, search: RhoSearch) -> Result<ChowLinFit> {
    check_grid(z_high, grid)?;
    fit_chow_lin_series(&embed_low_frequency(y_low, grid)?, z_high, search)
}

impl ChowLinFit {
    /// GLS mean plus distributed residuals, using the fitted coefficients
    /// with the observed target values in `y`.
    pub fn predict(&self, y: &MaskedSeries, z_high: &Mat) -> Result<Vec<f64>> {
        let z = with_intercept(z_high);
        if z.nrows() != self.weights.nrows() || z.ncols() != self.beta_gls.len() {
            return Err(Error::Dimension("regressors do not match the fit".into()));
        }
        if y.observed_indices() != self.observed {
            return Err(Error::Invalid("observation pattern differs from the fit".into()));
        }
        let resid = Vector::from_iterator(
            self.observed.len(),
            self.observed
                .iter()
                .map(|&s| y.values[s] - z.row(s).transpose().dot(&self.beta_gls)),
        );
        let fit = &z * &self.beta_gls + &self.weights * resid;
        Ok(fit.iter().copied().collect())
    }
}

pub fn impute_chow_lin_series(fit: &ChowLinFit, y: &MaskedSeries, z_high: &Mat) -> Result<ImputationResult> {
    let pred = fit.predict(y, z_high)?;
    let params = FittedParams {
        coefficients: fit.beta_gls.iter().copied().collect(),
        rho: Some(fit.rho),
        iterations: 0,
        converged: true,
    };
    ImputationResult::assemble(y, &pred, ImputeMethod::ChowLin, params)
}

pub fn impute_chow_lin(fit: &ChowLinFit, z_high: &Mat, y_low: &[f64], grid: &TimeGrid) -> Result<ImputationResult> {
    check_grid(z_high, grid)?;
    impute_chow_lin_series(fit, &embed_low_frequency(y_low, grid)?, z_high)
}

/// Sign constraint on the autoregressive coefficient of TP*.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignRestriction {
    None,
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TpStarOptions {
    /// Lags of the factors beyond the current one.
    pub lag_f: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub sign: SignRestriction,
    /// Drop the lagged target from the regression.
    pub force_rho_zero: bool,
    /// Weight on the new fill in each update; 1 is a plain substitution.
    /// `None` uses the reciprocal of the average gap between observations.
    pub relaxation: Option<f64>,
    pub start: TpStarStart,
    pub solver: TpStarSolver,
}

/// How the converged TP* coefficients are found.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TpStarSolver {
    /// Solve the fixed-point equations of the iteration directly: for a
    /// given ρ the remaining coefficients solve a linear system, and ρ is
    /// a root of its own normal equation found by bracketing.
    FixedPoint,
    /// Alternate regression and refill until the fills stop moving.
    Iterate,
}

/// Completion used before the first regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TpStarStart {
    /// Static fill with intercept, falling back to carry-forward when the
    /// first regression is singular.
    StaticTp,
    /// Most recent observed value.
    CarryForward,
}

impl Default for TpStarOptions {
    fn default() -> Self {
        Self {
            lag_f: 1,
            tol: 1e-10,
            max_iter: 10_000,
            sign: SignRestriction::Positive,
            force_rho_zero: false,
            relaxation: None,
            start: TpStarStart::StaticTp,
            solver: TpStarSolver::FixedPoint,
        }
    }
}

/// Coefficients of `Y_s = b0 + ρ Y_{s-1} + Σ_l γ_l' F_{s-l}`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdlCoefficients {
    pub intercept: f64,
    /// Whether the lagged target is a regressor; `rho` is zero when not.
    pub uses_lag: bool,
    pub rho: f64,
    /// `gamma[l]` multiplies `F_{s-l}`.
    pub gamma: Vec<Vector>,
}

impl AdlCoefficients {
    pub fn lag_f(&self) -> usize {
        self.gamma.len() - 1
    }

    fn factor_part(&self, factors: &Mat, s: usize) -> f64 {
        self.gamma
            .iter()
            .enumerate()
            .map(|(l, g)| factors.row(s - l).transpose().dot(g))
            .sum()
    }

    /// One step of the recursion at `s`, given `Y_{s-1}`.
    pub fn step(&self, factors: &Mat, s: usize, y_prev: f64) -> f64 {
        self.intercept + self.rho * y_prev + self.factor_part(factors, s)
    }

    /// Fill missing positions forward from the first position where the
    /// recursion is defined; earlier missing positions keep `start`.
    pub fn fill(&self, y: &MaskedSeries, factors: &Mat, start: &[f64]) -> Vec<f64> {
        let mut out = start.to_vec();
        let first = first_recursion_index(y, self.lag_f(), self.uses_lag);
        for s in first..y.len() {
            if !y.observed[s] {
                let prev = if s > 0 { out[s - 1] } else { 0.0 };
                out[s] = self.step(factors, s, prev);
            }
        }
        out
    }
}

/// First sub-period whose factor lags exist and, when the lagged target is
/// used, whose lagged target is at or after the first observation.
fn first_recursion_index(y: &MaskedSeries, lag_f: usize, uses_lag: bool) -> usize {
    if !uses_lag {
        return lag_f;
    }
    let first_obs = y.observed.iter().position(|&b| b).unwrap_or(y.len());
    (first_obs + 1).max(lag_f)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TpStarFit {
    pub coefficients: AdlCoefficients,
    pub result: ImputationResult,
}

fn fit_adl(y: &MaskedSeries, current: &[f64], factors: &Mat, lag_f: usize, with_rho: bool) -> Result<AdlCoefficients> {
    let r = factors.ncols();
    let first = first_recursion_index(y, lag_f, with_rho);
    let rows: Vec<usize> = (first..y.len()).filter(|&s| y.observed[s]).collect();
    let k = 1 + usize::from(with_rho) + r * (lag_f + 1);
    if rows.len() < k {
        return Err(Error::Invalid(format!(
            "TP* regression has {} rows for {k} coefficients",
            rows.len()
        )));
    }
    let mut x = Mat::zeros(rows.len(), k);
    let mut yv = Vector::zeros(rows.len());
    for (row, &s) in rows.iter().enumerate() {
        yv[row] = y.values[s];
        x[(row, 0)] = 1.0;
        let mut c = 1;
        if with_rho {
            x[(row, 1)] = current[s - 1];
            c = 2;
        }
        for l in 0..=lag_f {
            for j in 0..r {
                x[(row, c + l * r + j)] = factors[(s - l, j)];
            }
        }
    }
    let b = linalg::ols(&x, &yv)?;
    let c = if with_rho { 2 } else { 1 };
    Ok(AdlCoefficients {
        intercept: b[0],
        uses_lag: with_rho,
        rho: if with_rho { b[1] } else { 0.0 },
        gamma: (0..=lag_f).map(|l| b.rows(c + l * r, r).into_owned()).collect(),
    })
}

/// Missing positions after the first observation take the most recent
/// observed value; earlier ones keep `start`.
fn carry_forward(y: &MaskedSeries, start: &[f64]) -> Vec<f64> {
    let mut out = start.to_vec();
    let mut last = None;
    for s in 0..y.len() {
        if y.observed[s] {
            last = Some(y.values[s]);
        } else if let Some(v) = last {
            out[s] = v;
        }
    }
    out
}

/// Iterated autoregressive distributed-lag fill.
///
/// Starting from the static fill (with intercept), regress the observed
/// target values on a constant, the current completion lagged one
/// sub-period and current and lagged factors, then refill the missing
/// positions with the fitted recursion. Repeats until the largest change
/// in a fill is below `tol`. When every lagged target in the regression is
/// a static fill the first design is singular, and the iteration starts
/// from the last observed value instead.
pub fn impute_tp_star_series(y: &MaskedSeries, factors: &Mat, opts: &TpStarOptions) -> Result<TpStarFit> {
    check_series(y, factors.nrows())?;
    match opts.solver {
        TpStarSolver::FixedPoint => tp_star_fixed_point(y, factors, opts),
        TpStarSolver::Iterate => tp_star_iterate(y, factors, opts),
    }
}

fn violates_sign(sign: SignRestriction, rho: f64) -> bool {
    match sign {
        SignRestriction::None => false,
        SignRestriction::Positive => rho < 0.0,
        SignRestriction::Negative => rho > 0.0,
    }
}

fn finish_tp_star(
    y: &MaskedSeries,
    fills: &[f64],
    coefficients: AdlCoefficients,
    iterations: usize,
    converged: bool,
) -> Result<TpStarFit> {
    let mut flat = vec![coefficients.intercept, coefficients.rho];
    for g in &coefficients.gamma {
        flat.extend(g.iter().copied());
    }
    let params = FittedParams {
        coefficients: flat,
        rho: Some(coefficients.rho),
        iterations,
        converged,
    };
    let result = ImputationResult::assemble(y, fills, ImputeMethod::TpStar, params)?;
    Ok(TpStarFit {
        coefficients,
        result,
    })
}

/// One plain regression and refill from `fills`; returns the largest
/// change in a fill.
fn tp_star_step_change(y: &MaskedSeries, fills: &[f64], factors: &Mat, start: &[f64], opts: &TpStarOptions) -> Result<f64> {
    let mut c = fit_adl(y, fills, factors, opts.lag_f, !opts.force_rho_zero)?;
    if violates_sign(opts.sign, c.rho) {
        c = fit_adl(y, fills, factors, opts.lag_f, false)?;
    }
    let next = c.fill(y, factors, start);
    Ok(y
        .missing_indices()
        .iter()
        .map(|&s| (next[s] - fills[s]).abs())
        .fold(0.0_f64, f64::max))
}

struct FixedPointEval {
    beta: Vector,
    q: f64,
    sse: f64,
}

/// For fixed ρ the recursive fills are affine in `β = (b0, γ)`; solve the
/// normal equations of β and evaluate the normal equation of ρ.
fn tp_star_eval(y: &MaskedSeries, factors: &Mat, start: &[f64], lag_f: usize, rho: f64) -> Option<FixedPointEval> {
    let r = factors.ncols();
    let k = 1 + r * (lag_f + 1);
    let n = y.len();
    let first = first_recursion_index(y, lag_f, true);
    let fill_g = |s: usize, out: &mut [f64]| {
        out[0] = 1.0;
        for l in 0..=lag_f {
            for j in 0..r {
                out[1 + l * r + j] = factors[(s - l, j)];
            }
        }
    };
    // fill at s is a[s] + b[s]·β; b is stored row-major, k per sub-period
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n * k];
    let mut gs = vec![0.0; k];
    for s in 0..n {
        if y.observed[s] {
            a[s] = y.values[s];
        } else if s >= first {
            a[s] = rho * a[s - 1];
            fill_g(s, &mut gs);
            for c in 0..k {
                b[s * k + c] = rho * b[(s - 1) * k + c] + gs[c];
            }
        } else {
            a[s] = start[s];
        }
    }
    let rows: Vec<usize> = (first..n).filter(|&s| y.observed[s]).collect();
    let mut m = Mat::zeros(k, k);
    let mut v = Vector::zeros(k);
    for &s in &rows {
        fill_g(s, &mut gs);
        let prev = &b[(s - 1) * k..s * k];
        for i in 0..k {
            for j in 0..k {
                m[(i, j)] += gs[i] * (rho * prev[j] + gs[j]);
            }
            v[i] += gs[i] * (y.values[s] - rho * a[s - 1]);
        }
    }
    let beta = m.lu().solve(&v)?;
    if beta.iter().any(|x| !x.is_finite()) {
        return None;
    }
    let (mut q, mut sse) = (0.0, 0.0);
    for &s in &rows {
        fill_g(s, &mut gs);
        let prev_b = &b[(s - 1) * k..s * k];
        let prev = a[s - 1] + (0..k).map(|c| prev_b[c] * beta[c]).sum::<f64>();
        let e = y.values[s] - rho * prev - (0..k).map(|c| gs[c] * beta[c]).sum::<f64>();
        q += prev * e;
        sse += e * e;
    }
    Some(FixedPointEval { beta, q, sse })
}

const FIXED_POINT_GRID: usize = 400;
const RHO_EDGE: f64 = 0.999;

fn tp_star_fixed_point(y: &MaskedSeries, factors: &Mat, opts: &TpStarOptions) -> Result<TpStarFit> {
    let start = impute_tp_series(y, factors, true)?.series;
    let static_fit = |start: &[f64]| -> Result<(AdlCoefficients, Vec<f64>)> {
        let c = fit_adl(y, start, factors, opts.lag_f, false)?;
        let fills = c.fill(y, factors, start);
        Ok((c, fills))
    };
    if opts.force_rho_zero {
        let (c, fills) = static_fit(&start)?;
        let change = tp_star_step_change(y, &fills, factors, &start, opts)?;
        return finish_tp_star(y, &fills, c, 1, change < opts.tol);
    }
    let r = factors.ncols();
    let k = 2 + r * (opts.lag_f + 1);
    let first = first_recursion_index(y, opts.lag_f, true);
    let n_rows = (first..y.len()).filter(|&s| y.observed[s]).count();
    if n_rows < k {
        return Err(Error::Invalid(format!("TP* regression has {n_rows} rows for {k} coefficients")));
    }
    let (lo, hi) = match opts.sign {
        SignRestriction::None => (-RHO_EDGE, RHO_EDGE),
        SignRestriction::Positive => (0.0, RHO_EDGE),
        SignRestriction::Negative => (-RHO_EDGE, 0.0),
    };
    let eval = |rho: f64| tp_star_eval(y, factors, &start, opts.lag_f, rho);
    let mut evaluations = 0;
    let grid: Vec<(f64, Option<FixedPointEval>)> = (0..=FIXED_POINT_GRID)
        .map(|i| {
            let rho = lo + (hi - lo) * i as f64 / FIXED_POINT_GRID as f64;
            (rho, eval(rho))
        })
        .collect();
    evaluations += grid.len();
    let mut best: Option<(f64, FixedPointEval)> = None;
    for w in grid.windows(2) {
        let ((r0, Some(e0)), (r1, Some(e1))) = (&w[0], &w[1]) else {
            continue;
        };
        let candidate = if e0.q == 0.0 {
            Some((*r0, eval(*r0)))
        } else if e0.q.signum() != e1.q.signum() {
            let (mut a, mut b, qa) = (*r0, *r1, e0.q);
            for _ in 0..100 {
                let mid = 0.5 * (a + b);
                if mid <= a || mid >= b {
                    break;
                }
                evaluations += 1;
                match eval(mid) {
                    Some(e) if e.q.signum() == qa.signum() => a = mid,
                    Some(_) => b = mid,
                    None => break,
                }
            }
            let root = 0.5 * (a + b);
            evaluations += 1;
            // a sign change across a pole of the linear solve is not a root
            eval(root)
                .filter(|e| e.q.abs() <= e0.q.abs().min(e1.q.abs()))
                .map(|e| (root, Some(e)))
        } else {
            None
        };
        if let Some((rho, Some(e))) = candidate {
            if best.as_ref().is_none_or(|(_, b)| e.sse < b.sse) {
                best = Some((rho, e));
            }
        }
    }
    let (coefficients, fills) = match best {
        Some((rho, e)) => {
            let c = AdlCoefficients {
                intercept: e.beta[0],
                uses_lag: true,
                rho,
                gamma: (0..=opts.lag_f).map(|l| e.beta.rows(1 + l * r, r).into_owned()).collect(),
            };
            let fills = c.fill(y, factors, &start);
            (c, fills)
        }
        None if opts.sign != SignRestriction::None => static_fit(&start)?,
        None => {
            return Err(Error::Diverged {
                context: "TP* has no fixed point with |ρ| < 1".into(),
                iterations: evaluations,
            })
        }
    };
    let change = tp_star_step_change(y, &fills, factors, &start, opts)?;
    finish_tp_star(y, &fills, coefficients, evaluations, change < opts.tol.max(1e-9))
}

fn tp_star_iterate(y: &MaskedSeries, factors: &Mat, opts: &TpStarOptions) -> Result<TpStarFit> {
    let start = impute_tp_series(y, factors, true)?.series;
    let mut current = match opts.start {
        TpStarStart::StaticTp => start.clone(),
        TpStarStart::CarryForward => carry_forward(y, &start),
    };
    let with_rho = !opts.force_rho_zero;
    let gap = (y.len() as f64 / y.observed_indices().len() as f64).round().max(1.0);
    let relaxation = opts.relaxation.unwrap_or(1.0 / gap);
    if !(relaxation > 0.0 && relaxation <= 1.0) {
        return Err(Error::Invalid(format!("relaxation {relaxation} must lie in (0, 1]")));
    }
    let missing = y.missing_indices();
    let mut last_change = f64::INFINITY;
    let mut growth = 0;
    let mut iterations = 0;
    let mut converged = false;
    let mut coefs = None;
    while iterations < opts.max_iter {
        iterations += 1;
        let mut c = match fit_adl(y, &current, factors, opts.lag_f, with_rho) {
            // a static start makes lagged fills collinear with lagged factors
            Err(Error::Singular(_)) if iterations == 1 => {
                current = carry_forward(y, &start);
                fit_adl(y, &current, factors, opts.lag_f, with_rho)?
            }
            other => other?,
        };
        if violates_sign(opts.sign, c.rho) {
            c = fit_adl(y, &current, factors, opts.lag_f, false)?;
        }
        if !(c.rho.abs() < 1.0) {
            return Err(Error::Diverged {
                context: format!("TP* autoregressive coefficient {}", c.rho),
                iterations,
            });
        }
        let mut next = c.fill(y, factors, &start);
        for &s in &missing {
            next[s] = current[s] + relaxation * (next[s] - current[s]);
        }
        let change = missing
            .iter()
            .map(|&s| (next[s] - current[s]).abs())
            .fold(0.0_f64, f64::max);
        current = next;
        coefs = Some(c);
        if change < opts.tol {
            converged = true;
            break;
        }
        growth = if change > last_change { growth + 1 } else { 0 };
        if growth >= 5 {
            return Err(Error::Diverged {
                context: "TP* fill changes grew for five iterations".into(),
                iterations,
            });
        }
        last_change = change;
    }
    let coefficients = coefs.expect("at least one iteration runs");
    finish_tp_star(y, &current, coefficients, iterations, converged)
}

pub fn impute_tp_star(y_low: &[f64], factors: &Mat, grid: &TimeGrid, opts: &TpStarOptions) -> Result<ImputationResult> {
    check_grid(factors, grid)?;
    Ok(impute_tp_star_series(&embed_low_frequency(y_low, grid)?, factors, opts)?.result)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsStarOptions {
    pub em: EmOptions,
    /// Fix every AR coefficient at zero: no quasi-differencing of the
    /// predictors and a serially uncorrelated target error.
    pub force_zero_rho: bool,
}

impl Default for KsStarOptions {
    fn default() -> Self {
        Self {
            em: EmOptions::default(),
            force_zero_rho: false,
        }
    }
}

/// Settings shared by every method when they are run side by side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodSettings {
    pub r: usize,
    /// VAR order of the state-space methods.
    pub var_order: usize,
    /// Add a constant to the static fill regression.
    pub intercept: bool,
    pub chow_lin: RhoSearch,
    pub tp_star: TpStarOptions,
    pub em: EmOptions,
}

impl Default for MethodSettings {
    fn default() -> Self {
        Self {
            r: 2,
            var_order: 1,
            intercept: true,
            chow_lin: RhoSearch::Grid,
            tp_star: TpStarOptions::default(),
            em: EmOptions::default(),
        }
    }
}

/// Impute column `target` of `panel` with `method`. The single-equation
/// methods regress on `factors`; EM, KS and KS* work on the panel itself.
pub fn impute_with(
    method: ImputeMethod,
    panel: &Panel,
    target: usize,
    factors: &Mat,
    settings: &MethodSettings,
) -> Result<ImputationResult> {
    check_target(panel, target)?;
    let y = panel.column(target);
    match method {
        ImputeMethod::Tp => impute_tp_series(&y, factors, settings.intercept),
        ImputeMethod::TpStar => Ok(impute_tp_star_series(&y, factors, &settings.tp_star)?.result),
        ImputeMethod::ChowLin => {
            let fit = fit_chow_lin_series(&y, factors, settings.chow_lin)?;
            impute_chow_lin_series(&fit, &y, factors)
        }
        ImputeMethod::Em => impute_em(panel, target, settings.r, settings.em.max_iter, settings.em.tol),
        ImputeMethod::Ks => impute_ks(panel, target, settings.r, settings.var_order, &settings.em),
        ImputeMethod::KsStar => {
            let opts = KsStarOptions {
                em: settings.em,
                force_zero_rho: false,
            };
            impute_ks_star(panel, target, settings.r, settings.var_order, &opts)
        }
    }
}

/// Kalman-smoother imputation from a dynamic factor model fitted by EM on
/// the panel including the target column.
pub fn impute_ks(panel: &Panel, target: usize, r: usize, p: usize, opts: &EmOptions) -> Result<ImputationResult> {
    check_target(panel, target)?;
    let structure = DfmStructure {
        factors: r,
        var_order: p,
        qd_rho: vec![0.0; panel.ncols()],
        error_states: Vec::new(),
    };
    impute_with_structure(panel, target, &structure, None, opts, ImputeMethod::Ks)
}

fn check_target(panel: &Panel, target: usize) -> Result<()> {
    if target >= panel.ncols() {
        return Err(Error::Dimension(format!("target column {target} out of range")));
    }
    Ok(())
}

/// Kalman-smoother imputation where the complete predictors are
/// quasi-differenced at their residual AR(1) coefficients and the target
/// carries an AR(1) error state estimated by EM.
pub fn impute_ks_star(panel: &Panel, target: usize, r: usize, p: usize, opts: &KsStarOptions) -> Result<ImputationResult> {
    check_target(panel, target)?;
    let n = panel.ncols();
    if (0..n).any(|i| i != target && !panel.column_is_complete(i)) {
        return Err(Error::Invalid("KS* needs complete predictor columns".into()));
    }
    let mut qd = vec![0.0; n];
    if !opts.force_zero_rho {
        let filled = state_space::pc_fill(panel, r, 20)?;
        let pc = factors::estimate_pc(&filled, r)?;
        let (rho, _) = factors::residual_ar_coefs(&filled, &pc);
        for i in (0..n).filter(|&i| i != target) {
            qd[i] = rho[i];
        }
    }
    let structure = DfmStructure {
        factors: r,
        var_order: p,
        qd_rho: qd,
        error_states: vec![target],
    };
    let mut em = opts.em;
    let rho0 = if opts.force_zero_rho {
        em.fix_error_rho = true;
        Some(0.0)
    } else {
        None
    };
    impute_with_structure(panel, target, &structure, rho0, &em, ImputeMethod::KsStar)
}

fn impute_with_structure(
    panel: &Panel,
    target: usize,
    structure: &DfmStructure,
    target_rho: Option<f64>,
    opts: &EmOptions,
    method: ImputeMethod,
) -> Result<ImputationResult> {
    let mut init = state_space::initial_params(structure, panel)?;
    if let Some(rho) = target_rho {
        let total: f64 = init.error_var.iter().sum::<f64>() / (1.0 - init.error_rho[0].powi(2));
        init.error_rho = vec![rho];
        init.error_var = vec![total.max(state_space::NOISE_FLOOR)];
    }
    let fit = state_space::em_fit(structure, init, panel.values(), panel.mask(), opts)?;
    let signal = structure.smoothed_signal(&fit.params, &fit.smoothed, target);
    let mut coefficients: Vec<f64> = fit.params.loadings.row(target).iter().copied().collect();
    coefficients.push(fit.params.obs_var[target]);
    let params = FittedParams {
        coefficients,
        rho: fit.params.error_rho.first().copied(),
        iterations: fit.iterations,
        converged: fit.converged,
    };
    ImputationResult::assemble(&panel.column(target), &signal, method, params)
}
