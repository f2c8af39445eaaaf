//! Calibrated data-generating processes and Monte Carlo comparisons of
//! factor estimators.
//!
//! A [`DgpSpec`] holds fixed loadings, idiosyncratic variances and AR(1)
//! coefficients, factor VAR dynamics, and the shares of the column blocks
//! that simulated panels sample loading rows from.

use std::io::Write;
use std::ops::Range;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factors::{self, FactorMethod, VarDynamics, VARIANCE_FLOOR};
use crate::linalg::{self, serde_rows, Mat, Vector};

/// Periods simulated and discarded before the kept sample.
pub const BURN_IN: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub label: String,
    /// Built from target summary statistics rather than estimated from data.
    #[serde(default)]
    pub synthetic: bool,
    /// Sample length of simulated panels.
    pub t: usize,
    /// `N x r`.
    #[serde(with = "serde_rows")]
    pub loadings: Mat,
    /// Unconditional idiosyncratic variances.
    pub idio_var: Vec<f64>,
    pub idio_ar: Vec<f64>,
    #[serde(with = "serde_rows::vec")]
    pub var_coefs: Vec<Mat>,
    #[serde(with = "serde_rows")]
    pub var_innov_cov: Mat,
    pub block_shares: Vec<f64>,
}

impl DgpSpec {
    pub fn n(&self) -> usize {
        self.loadings.nrows()
    }

    pub fn r(&self) -> usize {
        self.loadings.ncols()
    }

    pub fn var_order(&self) -> usize {
        self.var_coefs.len()
    }

    pub fn dynamics(&self) -> VarDynamics {
        VarDynamics {
            coefs: self.var_coefs.clone(),
            innov_cov: self.var_innov_cov.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (n, r) = (self.n(), self.r());
        let bad = |msg: String| Err(Error::Invalid(format!("DGP spec {:?}: {msg}", self.label)));
        if n == 0 || r == 0 || r > n {
            return bad(format!("loadings are {n} x {r}"));
        }
        if self.t == 0 {
            return bad("sample length is zero".into());
        }
        if self.idio_var.len() != n || self.idio_ar.len() != n {
            return bad("one idiosyncratic variance and AR coefficient per series required".into());
        }
        if self.loadings.iter().any(|v| !v.is_finite()) {
            return bad("non-finite loading".into());
        }
        if let Some(i) = self.idio_var.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
            return bad(format!("idiosyncratic variance of series {i} is not positive"));
        }
        if let Some(i) = self.idio_ar.iter().position(|v| !(v.abs() < 1.0)) {
            return bad(format!("AR coefficient of series {i} is not inside (-1, 1)"));
        }
        let q = &self.var_innov_cov;
        if q.shape() != (r, r) || self.var_coefs.iter().any(|a| a.shape() != (r, r)) {
            return bad(format!("VAR matrices must be {r} x {r}"));
        }
        if q.iter().chain(self.var_coefs.iter().flatten()).any(|v| !v.is_finite()) {
            return bad("non-finite VAR parameter".into());
        }
        if (q - q.transpose()).abs().max() > 1e-10 * q.abs().max().max(1.0) || q.clone().cholesky().is_none() {
            return bad("innovation covariance is not symmetric positive definite".into());
        }
        if self.dynamics().spectral_radius() >= 1.0 {
            return bad("factor VAR is not stationary".into());
        }
        if self.block_shares.is_empty() || self.block_shares.len() > n {
            return bad(format!("{} blocks for {n} series", self.block_shares.len()));
        }
        if self.block_shares.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad("block shares must be positive".into());
        }
        let total: f64 = self.block_shares.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("block shares sum to {total}"));
        }
        Ok(())
    }

    /// Column ranges of the calibration blocks.
    pub fn blocks(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        block_counts(&self.block_shares, self.n())
            .into_iter()
            .map(|c| {
                let r = start..start + c;
                start += c;
                r
            })
            .collect()
    }

    /// Unconditional factor covariance.
    pub fn factor_cov(&self) -> Result<Mat> {
        let dynamics = self.dynamics();
        match dynamics.order() {
            0 => Ok(dynamics.innov_cov),
            _ => dynamics.unconditional_cov(),
        }
    }

    /// Share of total variance carried by each factor,
    /// `Σ_i λ_ij² Σ_F,jj / Σ_i Var(x_i)`.
    pub fn factor_variance_shares(&self) -> Result<Vec<f64>> {
        let sf = self.factor_cov()?;
        let common = &self.loadings * &sf * self.loadings.transpose();
        let total: f64 = common.diagonal().sum() + self.idio_var.iter().sum::<f64>();
        Ok((0..self.r())
            .map(|j| self.loadings.column(j).norm_squared() * sf[(j, j)] / total)
            .collect())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Allocate `n` items to blocks: floor each `share * n`, then hand out the
/// remainder one at a time to blocks in order.
pub fn block_counts(shares: &[f64], n: usize) -> Vec<usize> {
    if shares.is_empty() {
        return Vec::new();
    }
    // guard against 0.3 * 10 = 2.9999999999999996
    let mut counts: Vec<usize> = shares
        .iter()
        .map(|s| (s * n as f64 + 1e-9).floor() as usize)
        .collect();
    let mut assigned: usize = counts.iter().sum();
    while assigned > n {
        let j = counts.iter().rposition(|&c| c > 0).expect("some count is positive");
        counts[j] -= 1;
        assigned -= 1;
    }
    let mut j = 0;
    while assigned < n {
        counts[j % shares.len()] += 1;
        assigned += 1;
        j += 1;
    }
    counts
}

/// Generator for replication `index` of an experiment seeded with `seed`.
/// Each index gets its own ChaCha stream, so draws do not depend on the
/// order in which replications run.
pub fn replication_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedPanel {
    /// `T x nsim`.
    pub x: Mat,
    /// `T x r`.
    pub factors: Mat,
    /// Spec row behind each simulated column.
    pub rows: Vec<usize>,
}

/// Draw a panel of `nsim` series from `spec` using `rng`.
///
/// Loading rows are sampled without replacement within each block (with
/// replacement only for any excess over the block size) and kept in spec
/// order. Factors follow the VAR with Gaussian innovations; idiosyncratic
/// errors are Gaussian AR(1). Both run a burn-in of [`BURN_IN`] periods.
pub fn simulate_panel_with<R: Rng + ?Sized>(spec: &DgpSpec, nsim: usize, rng: &mut R) -> Result<SimulatedPanel> {
    spec.validate()?;
    let blocks = spec.blocks();
    if nsim < blocks.len() || nsim > spec.n() {
        return Err(Error::Invalid(format!(
            "nsim {nsim} must lie in {}..={}",
            blocks.len(),
            spec.n()
        )));
    }
    let mut rows = Vec::with_capacity(nsim);
    for (block, count) in blocks.iter().zip(block_counts(&spec.block_shares, nsim)) {
        let size = block.len();
        let mut picked: Vec<usize> = index::sample(rng, size, count.min(size)).into_vec();
        for _ in size..count {
            picked.push(rng.random_range(0..size));
        }
        picked.sort_unstable();
        rows.extend(picked.into_iter().map(|k| block.start + k));
    }

    let (t, r) = (spec.t, spec.r());
    let dynamics = spec.dynamics();
    let chol = spec
        .var_innov_cov
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("factor innovation covariance"))?
        .l();
    let total = t + BURN_IN;
    let mut path = Mat::zeros(total, r);
    for s in 0..total {
        let z = Vector::from_fn(r, |_, _| normal(rng));
        let mut f = &chol * z;
        for (l, a) in dynamics.coefs.iter().enumerate() {
            if s > l {
                f += a * path.row(s - 1 - l).transpose();
            }
        }
        path.set_row(s, &f.transpose());
    }
    let factors = path.rows(BURN_IN, t).into_owned();

    let mut x = &factors * loadings_rows(&spec.loadings, &rows).transpose();
    for (k, &i) in rows.iter().enumerate() {
        let (rho, var) = (spec.idio_ar[i], spec.idio_var[i]);
        let sd = (var * (1.0 - rho * rho)).sqrt();
        let mut e = var.sqrt() * normal(rng);
        for s in 0..total {
            if s > 0 {
                e = rho * e + sd * normal(rng);
            }
            if s >= BURN_IN {
                x[(s - BURN_IN, k)] += e;
            }
        }
    }
    Ok(SimulatedPanel { x, factors, rows })
}

/// [`simulate_panel_with`] on replication stream 0 of `seed`.
pub fn simulate_panel(spec: &DgpSpec, nsim: usize, seed: u64) -> Result<SimulatedPanel> {
    simulate_panel_with(spec, nsim, &mut replication_rng(seed, 0))
}

fn loadings_rows(loadings: &Mat, rows: &[usize]) -> Mat {
    Mat::from_fn(rows.len(), loadings.ncols(), |k, j| loadings[(rows[k], j)])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibrationMethod {
    Pc,
    Mle,
}

/// Estimate a [`DgpSpec`] from a complete panel (columns are demeaned
/// first). Loadings come from the chosen estimator; variances and AR(1)
/// coefficients from its residuals; the VAR(p) from its factors, shrunk to
/// stationarity if needed.
pub fn calibrate_dgp(
    x: &Mat,
    r: usize,
    p: usize,
    method: CalibrationMethod,
    block_shares: Vec<f64>,
    label: &str,
) -> Result<DgpSpec> {
    let means = linalg::column_means(x);
    let mut xc = x.clone();
    for (j, mut col) in xc.column_iter_mut().enumerate() {
        col.add_scalar_mut(-means[j]);
    }
    let est = match method {
        CalibrationMethod::Pc => factors::estimate_pc(&xc, r)?,
        CalibrationMethod::Mle => factors::estimate_mle_h(&xc, r, 1000, 1e-8)?,
    };
    let resid = &xc - est.common_component();
    let t = x.nrows();
    let idio_var = resid
        .column_iter()
        .map(|c| (c.norm_squared() / t as f64).max(VARIANCE_FLOOR))
        .collect();
    let (idio_ar, _) = factors::residual_ar_coefs(&xc, &est);
    let mut var = factors::fit_var(&est.factors, p)?;
    var.stabilize();
    let spec = DgpSpec {
        label: label.to_string(),
        synthetic: false,
        t,
        loadings: est.loadings,
        idio_var,
        idio_ar,
        var_coefs: var.coefs,
        var_innov_cov: var.innov_cov,
        block_shares,
    };
    spec.validate()?;
    Ok(spec)
}

/// Summary statistics a synthetic spec is built to match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTargets {
    pub label: String,
    pub t: usize,
    pub n: usize,
    /// Variance share of each factor; the count sets `r`.
    pub factor_shares: Vec<f64>,
    pub idio_var_range: (f64, f64),
    pub idio_ar_range: (f64, f64),
    /// Diagonal VAR coefficients, `var_diag[l][j]` for lag `l + 1`.
    pub var_diag: Vec<Vec<f64>>,
    /// Correlation of the factor innovations.
    pub innov_corr: f64,
    pub block_shares: Vec<f64>,
    pub seed: u64,
}

/// Build a spec on standardized series whose factors have unit variance,
/// whose factor variance shares equal the targets, and whose idiosyncratic
/// variances and AR coefficients span the target ranges. Block `b` loads
/// mostly on factor `b mod r`.
pub fn synthetic_spec(targets: &SyntheticTargets) -> Result<DgpSpec> {
    let n = targets.n;
    let r = targets.factor_shares.len();
    let common: f64 = targets.factor_shares.iter().sum();
    let (lo, hi) = targets.idio_var_range;
    if r == 0 || n < r || !(0.0 < common && common < 1.0) || !(0.0 < lo && lo <= hi && hi < 1.0) {
        return Err(Error::Invalid("inconsistent synthetic targets".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(targets.seed);

    // idiosyncratic variances on a power grid whose mean leaves `common`
    let target_mean = ((1.0 - common) - lo) / (hi - lo).max(f64::MIN_POSITIVE);
    let grid = |k: f64| -> Vec<f64> {
        (0..n)
            .map(|i| if n == 1 { 0.5 } else { (i as f64 / (n - 1) as f64).powf(k) })
            .collect()
    };
    let mean_of = |k: f64| grid(k).iter().sum::<f64>() / n as f64;
    let (mut k_lo, mut k_hi) = (1e-3, 1e3);
    if !(mean_of(k_hi) < target_mean && target_mean < mean_of(k_lo)) {
        return Err(Error::Invalid("idiosyncratic variance range cannot meet the factor shares".into()));
    }
    for _ in 0..200 {
        let mid = (k_lo * k_hi).sqrt();
        if mean_of(mid) > target_mean {
            k_lo = mid;
        } else {
            k_hi = mid;
        }
    }
    let mut idio_var: Vec<f64> = grid((k_lo * k_hi).sqrt()).iter().map(|u| lo + (hi - lo) * u).collect();
    idio_var.shuffle(&mut rng);

    let (alo, ahi) = targets.idio_ar_range;
    let mut idio_ar: Vec<f64> = grid(0.5).iter().map(|u| alo + (ahi - alo) * u).collect();
    idio_ar.shuffle(&mut rng);

    // squared loadings: rows sum to 1 - φ_i, columns to n * share_j
    let blocks = block_counts(&targets.block_shares, n);
    let block_of: Vec<usize> = blocks
        .iter()
        .enumerate()
        .flat_map(|(b, &c)| std::iter::repeat_n(b, c))
        .collect();
    let mut a = Mat::from_fn(n, r, |i, j| {
        let boost = if j == block_of[i] % r { 4.0 } else { 1.0 };
        boost * (0.5 * normal(&mut rng)).exp()
    });
    for _ in 0..10_000 {
        for j in 0..r {
            let scale = n as f64 * targets.factor_shares[j] / a.column(j).sum();
            a.column_mut(j).scale_mut(scale);
        }
        let mut worst = 0.0_f64;
        for i in 0..n {
            let sum = a.row(i).sum();
            worst = worst.max((sum - (1.0 - idio_var[i])).abs());
            a.row_mut(i).scale_mut((1.0 - idio_var[i]) / sum);
        }
        if worst < 1e-14 {
            break;
        }
    }
    let loadings = a.map(|v| if rng.random::<bool>() { -v.sqrt() } else { v.sqrt() });

    let p = targets.var_diag.len();
    if targets.var_diag.iter().any(|d| d.len() != r) {
        return Err(Error::Invalid("one VAR coefficient per factor and lag required".into()));
    }
    let var_coefs: Vec<Mat> = targets
        .var_diag
        .iter()
        .map(|d| Mat::from_diagonal(&Vector::from_column_slice(d)))
        .collect();
    // innovation scales giving each factor unit unconditional variance
    let scales: Vec<f64> = (0..r)
        .map(|j| {
            let single = VarDynamics {
                coefs: (0..p).map(|l| Mat::from_element(1, 1, targets.var_diag[l][j])).collect(),
                innov_cov: Mat::identity(1, 1),
            };
            let v = if p == 0 { Ok(1.0) } else { single.unconditional_cov().map(|m| m[(0, 0)]) };
            v.map(|v| 1.0 / v.sqrt())
        })
        .collect::<Result<_>>()?;
    let var_innov_cov = Mat::from_fn(r, r, |i, j| {
        let corr = if i == j { 1.0 } else { targets.innov_corr };
        corr * scales[i] * scales[j]
    });
    let spec = DgpSpec {
        label: targets.label.clone(),
        synthetic: true,
        t: targets.t,
        loadings,
        idio_var,
        idio_ar,
        var_coefs,
        var_innov_cov,
        block_shares: targets.block_shares.clone(),
    };
    spec.validate()?;
    Ok(spec)
}

/// Targets of the first reference design: `T=720, N=122, r=3`, a
/// persistent first factor, a nearly white second one, VAR(2) dynamics
/// with correlated innovations.
pub fn dgp1_targets() -> SyntheticTargets {
    SyntheticTargets {
        label: "synthetic-dgp1".into(),
        t: 720,
        n: 122,
        factor_shares: vec![0.147, 0.073, 0.070],
        idio_var_range: (0.065, 0.984),
        idio_ar_range: (-0.617, 0.955),
        var_diag: vec![vec![1.0, 0.2, 0.6], vec![-0.12, 0.0, 0.1]],
        innov_corr: 0.3,
        block_shares: vec![0.4, 0.3, 0.3],
        seed: 1,
    }
}

/// Targets of the second reference design: `T=420, N=50, r=2`.
pub fn dgp2_targets() -> SyntheticTargets {
    SyntheticTargets {
        label: "synthetic-dgp2".into(),
        t: 420,
        n: 50,
        factor_shares: vec![0.25, 0.08],
        idio_var_range: (0.065, 0.984),
        idio_ar_range: (-0.617, 0.955),
        var_diag: vec![vec![0.85, 0.4]],
        innov_corr: 0.2,
        block_shares: vec![0.4, 0.3, 0.3],
        seed: 2,
    }
}

pub fn synthetic_dgp1() -> DgpSpec {
    synthetic_spec(&dgp1_targets()).expect("reference targets are consistent")
}

pub fn synthetic_dgp2() -> DgpSpec {
    synthetic_spec(&dgp2_targets()).expect("reference targets are consistent")
}

fn check_full_rank(fhat: &Mat) -> Result<()> {
    if fhat.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("estimated factors"));
    }
    let eig = (fhat.transpose() * fhat).symmetric_eigen().eigenvalues;
    let max = eig.max();
    if fhat.ncols() == 0 || !(max > 0.0) || eig.min() <= 1e-12 * max {
        return Err(Error::Singular("estimated factors are rank deficient"));
    }
    Ok(())
}

/// `M(F*, F̂) = tr(F*' P F*) / tr(F*' F*)` with `P` the projection on the
/// columns of `F̂`.
pub fn metric_trace_ratio(ftrue: &Mat, fhat: &Mat) -> Result<f64> {
    if ftrue.nrows() != fhat.nrows() {
        return Err(Error::Dimension("factor matrices differ in length".into()));
    }
    check_full_rank(fhat)?;
    let b = linalg::ols_multi(fhat, ftrue)?;
    let fitted = fhat * b;
    Ok(fitted.norm_squared() / ftrue.norm_squared())
}

/// R² of `ftrue_col` regressed on a constant and the columns of `F̂`.
pub fn metric_r2_per_factor(ftrue_col: &[f64], fhat: &Mat) -> Result<f64> {
    let t = fhat.nrows();
    if ftrue_col.len() != t {
        return Err(Error::Dimension("factor matrices differ in length".into()));
    }
    check_full_rank(fhat)?;
    let mut z = Mat::from_element(t, fhat.ncols() + 1, 1.0);
    z.columns_mut(1, fhat.ncols()).copy_from(fhat);
    let y = Vector::from_column_slice(ftrue_col);
    let b = linalg::ols(&z, &y)?;
    let ssr = (&y - &z * b).norm_squared();
    let mean = y.mean();
    let sst: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    Ok(1.0 - ssr / sst)
}

/// `‖F^p − F^GLS‖_F / √T` for known parameters, where `F^p` is the static
/// projection with factor covariance `Σ_F` and `F^GLS` the GLS regression.
pub fn shrinkage_gap(x: &Mat, loadings: &Mat, idio_var: &[f64], factor_cov: &Mat) -> Result<f64> {
    let w = Mat::from_fn(loadings.ncols(), loadings.nrows(), |j, i| loadings[(i, j)] / idio_var[i]);
    let normal = &w * loadings;
    let prec = linalg::inv_spd(factor_cov, "factor covariance")?;
    let rhs = &w * x.transpose();
    let gls = linalg::solve_spd(&normal, &rhs, "GLS normal matrix")?;
    let proj = linalg::solve_spd(&(prec + normal), &rhs, "projection normal matrix")?;
    Ok((gls - proj).norm() / (x.nrows() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonConfig {
    pub estimators: Vec<FactorMethod>,
    pub nsim_grid: Vec<usize>,
    pub reps: usize,
    pub seed: u64,
    /// VAR order for the Kalman-smoothed estimator.
    pub var_order: usize,
}

/// Outcome of one estimator on one simulated panel.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationRecord {
    pub rep: usize,
    pub nsim: usize,
    pub estimator: FactorMethod,
    /// `(M, R²_j)` or the error message.
    pub outcome: std::result::Result<(f64, Vec<f64>), String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonCell {
    pub estimator: FactorMethod,
    pub nsim: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub mean_m: f64,
    /// Monte Carlo standard error of `mean_m`.
    pub se_m: f64,
    pub mean_r2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub config: ComparisonConfig,
    pub r: usize,
    pub cells: Vec<ComparisonCell>,
    /// Ordered by nsim, then replication, then estimator.
    pub records: Vec<ReplicationRecord>,
}

/// Stream index of replication `rep` at panel width `nsim`. Keyed by values
/// rather than positions so a cell's draws do not depend on the grid.
fn comparison_stream(rep: usize, nsim: usize) -> u64 {
    ((rep as u64) << 32) | nsim as u64
}

fn score(ftrue: &Mat, fhat: &Mat) -> Result<(f64, Vec<f64>)> {
    let m = metric_trace_ratio(ftrue, fhat)?;
    let r2 = ftrue
        .column_iter()
        .map(|c| metric_r2_per_factor(c.as_slice(), fhat))
        .collect::<Result<_>>()?;
    Ok((m, r2))
}

/// Mean `M` and per-factor R² of each estimator at each panel width over
/// `reps` simulated panels. Every estimator sees the same panels. Runs on
/// the current rayon pool; results do not depend on its size.
pub fn run_estimator_comparison(spec: &DgpSpec, config: &ComparisonConfig) -> Result<ComparisonTable> {
    spec.validate()?;
    if config.estimators.is_empty() || config.nsim_grid.is_empty() || config.reps == 0 {
        return Err(Error::Invalid("comparison needs estimators, panel widths and replications".into()));
    }
    if config.estimators.contains(&FactorMethod::KalmanEm) {
        return Err(Error::Invalid("state-space EM is not a complete-panel estimator".into()));
    }
    let r = spec.r();
    let tasks: Vec<(usize, usize)> = config
        .nsim_grid
        .iter()
        .flat_map(|&nsim| (0..config.reps).map(move |rep| (nsim, rep)))
        .collect();
    let per_task: Vec<Vec<ReplicationRecord>> = tasks
        .par_iter()
        .map(|&(nsim, rep)| -> Result<Vec<ReplicationRecord>> {
            let mut rng = replication_rng(config.seed, comparison_stream(rep, nsim));
            let sim = simulate_panel_with(spec, nsim, &mut rng)?;
            Ok(config
                .estimators
                .iter()
                .map(|&estimator| {
                    let outcome = factors::estimate(&sim.x, r, estimator, config.var_order)
                        .and_then(|est| score(&sim.factors, &est.factors))
                        .map_err(|e| e.to_string());
                    ReplicationRecord {
                        rep,
                        nsim,
                        estimator,
                        outcome,
                    }
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let records: Vec<ReplicationRecord> = per_task.into_iter().flatten().collect();

    let mut cells = Vec::new();
    for &nsim in &config.nsim_grid {
        for &estimator in &config.estimators {
            let ok: Vec<&(f64, Vec<f64>)> = records
                .iter()
                .filter(|rec| rec.nsim == nsim && rec.estimator == estimator)
                .filter_map(|rec| rec.outcome.as_ref().ok())
                .collect();
            let n = ok.len();
            let mean_m = ok.iter().map(|(m, _)| m).sum::<f64>() / n as f64;
            let var_m = if n > 1 {
                ok.iter().map(|(m, _)| (m - mean_m).powi(2)).sum::<f64>() / (n - 1) as f64
            } else {
                0.0
            };
            let mean_r2 = (0..r)
                .map(|j| ok.iter().map(|(_, r2)| r2[j]).sum::<f64>() / n as f64)
                .collect();
            cells.push(ComparisonCell {
                estimator,
                nsim,
                succeeded: n,
                failed: config.reps - n,
                mean_m,
                se_m: (var_m / n as f64).sqrt(),
                mean_r2,
            });
        }
    }
    Ok(ComparisonTable {
        config: config.clone(),
        r,
        cells,
        records,
    })
}

impl ComparisonTable {
    pub fn cell(&self, estimator: FactorMethod, nsim: usize) -> Option<&ComparisonCell> {
        self.cells
            .iter()
            .find(|c| c.estimator == estimator && c.nsim == nsim)
    }

    /// One row per panel width; per estimator the mean `M`, its standard
    /// error, the mean R² of each factor and the failure count.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["nsim".to_string()];
        for e in &self.config.estimators {
            let l = e.label();
            header.push(format!("{l}_M"));
            header.push(format!("{l}_M_se"));
            header.extend((1..=self.r).map(|j| format!("{l}_R2_{j}")));
            header.push(format!("{l}_failed"));
        }
        w.write_record(&header)?;
        for &nsim in &self.config.nsim_grid {
            let mut row = vec![nsim.to_string()];
            for &e in &self.config.estimators {
                let c = self.cell(e, nsim).expect("every cell is computed");
                row.push(c.mean_m.to_string());
                row.push(c.se_m.to_string());
                row.extend(c.mean_r2.iter().map(f64::to_string));
                row.push(c.failed.to_string());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Long format, one row per replication and estimator.
    pub fn write_records_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = ["nsim", "rep", "estimator", "M"].map(String::from).to_vec();
        header.extend((1..=self.r).map(|j| format!("R2_{j}")));
        header.push("error".into());
        w.write_record(&header)?;
        for rec in &self.records {
            let mut row = vec![rec.nsim.to_string(), rec.rep.to_string(), rec.estimator.label().to_string()];
            match &rec.outcome {
                Ok((m, r2)) => {
                    row.push(m.to_string());
                    row.extend(r2.iter().map(f64::to_string));
                    row.push(String::new());
                }
                Err(e) => {
                    row.extend(std::iter::repeat_n(String::new(), self.r + 1));
                    row.push(e.clone());
                }
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}
