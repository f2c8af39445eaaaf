//! Static factor estimators for complete panels.
//!
//! All estimators take a complete `T x N` matrix `X` (rows are periods) and
//! return factors `F` (`T x r`) and loadings `Λ` (`N x r`) with `X ≈ F Λ'`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::state_space::{self, StateSpaceModel};

/// Floor applied to idiosyncratic variances.
pub const VARIANCE_FLOOR: f64 = 1e-6;
/// Cap on estimated idiosyncratic AR(1) coefficients.
pub const RHO_CAP: f64 = 0.99;
/// Largest companion spectral radius accepted for a fitted VAR.
pub const STABILITY_BOUND: f64 = 1.0 - 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FactorMethod {
    Pc,
    MleH,
    PcGlsH,
    PcGlsHar,
    PcKs,
    /// State-space EM on a possibly incomplete panel.
    KalmanEm,
}

impl FactorMethod {
    pub fn label(self) -> &'static str {
        match self {
            FactorMethod::Pc => "PC",
            FactorMethod::MleH => "MLE-h",
            FactorMethod::PcGlsH => "PC-GLS-h",
            FactorMethod::PcGlsHar => "PC-GLS-har",
            FactorMethod::PcKs => "PC-KS",
            FactorMethod::KalmanEm => "KS-EM",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pc" => Some(Self::Pc),
            "mle-h" | "mle_h" | "mle" => Some(Self::MleH),
            "pc-gls-h" | "gls-h" => Some(Self::PcGlsH),
            "pc-gls-har" | "gls-har" => Some(Self::PcGlsHar),
            "pc-ks" | "ks" => Some(Self::PcKs),
            "ks-em" | "kalman-em" => Some(Self::KalmanEm),
            _ => None,
        }
    }
}

/// Convergence and degeneracy diagnostics attached to an estimate.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub iterations: usize,
    pub converged: bool,
    /// Series whose idiosyncratic variance sits at the floor.
    pub floored_variances: Vec<usize>,
    /// Series whose AR(1) coefficient hit the cap.
    pub capped_rho: Vec<usize>,
    /// The fitted VAR was shrunk toward stationarity.
    pub var_shrunk: bool,
    pub loglik_path: Vec<f64>,
}

/// VAR(p) dynamics `F_t = A_1 F_{t-1} + ... + A_p F_{t-p} + η_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct VarDynamics {
    pub coefs: Vec<Mat>,
    pub innov_cov: Mat,
}

impl VarDynamics {
    pub fn order(&self) -> usize {
        self.coefs.len()
    }

    pub fn dim(&self) -> usize {
        self.innov_cov.nrows()
    }

    /// White noise with covariance `cov`.
    pub fn static_factors(cov: Mat) -> Self {
        Self {
            coefs: Vec::new(),
            innov_cov: cov,
        }
    }

    /// Companion form transition and covariance (`rp x rp`).
    pub fn companion(&self) -> (Mat, Mat) {
        let r = self.dim();
        let p = self.order().max(1);
        let k = r * p;
        let mut a = Mat::zeros(k, k);
        for (l, c) in self.coefs.iter().enumerate() {
            a.view_mut((0, l * r), (r, r)).copy_from(c);
        }
        for l in 1..p {
            a.view_mut((l * r, (l - 1) * r), (r, r))
                .copy_from(&Mat::identity(r, r));
        }
        let mut q = Mat::zeros(k, k);
        q.view_mut((0, 0), (r, r)).copy_from(&self.innov_cov);
        (a, q)
    }

    pub fn spectral_radius(&self) -> f64 {
        if self.coefs.is_empty() {
            return 0.0;
        }
        linalg::spectral_radius(&self.companion().0)
    }

    pub fn is_stationary(&self) -> bool {
        self.spectral_radius() < STABILITY_BOUND
    }

    /// Unconditional covariance of `F_t`.
    pub fn unconditional_cov(&self) -> Result<Mat> {
        let r = self.dim();
        let (a, q) = self.companion();
        let p = linalg::discrete_lyapunov(&a, &q)?;
        Ok(p.view((0, 0), (r, r)).into_owned())
    }

    /// Scale lag `l` coefficients by `c^l` until the companion spectral
    /// radius drops below [`STABILITY_BOUND`]. Returns whether it shrank.
    pub fn stabilize(&mut self) -> bool {
        let rho = self.spectral_radius();
        if rho < STABILITY_BOUND {
            return false;
        }
        let c = (STABILITY_BOUND - 1e-6) / rho;
        for (l, coef) in self.coefs.iter_mut().enumerate() {
            *coef *= c.powi(l as i32 + 1);
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorEstimate {
    pub factors: Mat,
    pub loadings: Mat,
    pub idio_var: Vec<f64>,
    pub factor_cov: Mat,
    pub method: FactorMethod,
    pub ar_coefs: Option<Vec<f64>>,
    pub dynamics: Option<VarDynamics>,
    pub diagnostics: Diagnostics,
}

impl FactorEstimate {
    pub fn rank(&self) -> usize {
        self.factors.ncols()
    }

    pub fn common_component(&self) -> Mat {
        &self.factors * self.loadings.transpose()
    }
}

fn check_rank(x: &Mat, r: usize) -> Result<()> {
    if r == 0 || r > x.nrows().min(x.ncols()) {
        return Err(Error::Invalid(format!(
            "factor count {r} must lie in 1..={}",
            x.nrows().min(x.ncols())
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("panel has missing or non-finite entries".into()));
    }
    Ok(())
}

/// Flip signs so that each loading column's largest-magnitude entry is positive.
fn fix_signs(factors: &mut Mat, loadings: &mut Mat) {
    for j in 0..loadings.ncols() {
        let col = loadings.column(j);
        let pivot = col
            .iter()
            .copied()
            .fold(0.0_f64, |best, v| if v.abs() > best.abs() { v } else { best });
        if pivot < 0.0 {
            loadings.column_mut(j).neg_mut();
            factors.column_mut(j).neg_mut();
        }
    }
}

fn residual_variances(x: &Mat, factors: &Mat, loadings: &Mat) -> (Vec<f64>, Vec<usize>) {
    let resid = x - factors * loadings.transpose();
    let t = x.nrows() as f64;
    let mut floored = Vec::new();
    let var = resid
        .column_iter()
        .enumerate()
        .map(|(i, c)| {
            let v = c.norm_squared() / t;
            if v <= VARIANCE_FLOOR {
                floored.push(i);
                VARIANCE_FLOOR
            } else {
                v
            }
        })
        .collect();
    (var, floored)
}

/// Principal components: `(F, Λ) = (√T U_r, √N V_r D_r)` from the SVD of
/// `X / √(NT)`, computed through the smaller Gram matrix, so that `F'F/T = I` and `Λ'Λ` is diagonal.
pub fn estimate_pc(x: &Mat, r: usize) -> Result<FactorEstimate> {
    check_rank(x, r)?;
    let (t, n) = (x.nrows(), x.ncols());
    // eigen-decompose the smaller Gram matrix; d² are its eigenvalues
    let nt = (n * t) as f64;
    let gram = if n <= t {
        x.transpose() * x / nt
    } else {
        x * x.transpose() / nt
    };
    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = &order[..r];
    let largest = eig.eigenvalues[top[0]].max(1e-300);
    if eig.eigenvalues[top[r - 1]] <= 1e-20 * largest {
        return Err(Error::Invalid(format!("panel rank is below {r}")));
    }
    let mut factors = Mat::zeros(t, r);
    let mut loadings = Mat::zeros(n, r);
    for (j, &k) in top.iter().enumerate() {
        let d = eig.eigenvalues[k].sqrt();
        let vec = eig.eigenvectors.column(k);
        if n <= t {
            loadings.set_column(j, &(vec * ((n as f64).sqrt() * d)));
            factors.set_column(j, &(x * vec / ((n as f64).sqrt() * d)));
        } else {
            // Λ = X'F / T
            factors.set_column(j, &(vec * (t as f64).sqrt()));
            loadings.set_column(j, &(x.transpose() * vec / (t as f64).sqrt()));
        }
    }
    fix_signs(&mut factors, &mut loadings);
    let (idio_var, floored) = residual_variances(x, &factors, &loadings);
    Ok(FactorEstimate {
        factor_cov: factors.transpose() * &factors / t as f64,
        factors,
        loadings,
        idio_var,
        method: FactorMethod::Pc,
        ar_coefs: None,
        dynamics: None,
        diagnostics: Diagnostics {
            converged: true,
            floored_variances: floored,
            ..Default::default()
        },
    })
}

/// Weighted normal matrix `Λ'Φ⁻¹Λ` and the weighted loadings `Φ⁻¹Λ`.
fn weighted_normal(loadings: &Mat, idio_var: &[f64]) -> Result<(Mat, Mat)> {
    if loadings.nrows() != idio_var.len() {
        return Err(Error::Dimension("loadings and variances disagree".into()));
    }
    if idio_var.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Invalid("idiosyncratic variances must be positive".into()));
    }
    let mut weighted = loadings.clone();
    for (i, mut row) in weighted.row_iter_mut().enumerate() {
        row /= idio_var[i];
    }
    Ok((loadings.transpose() * &weighted, weighted))
}

/// GLS cross-section projection `(Λ'Φ⁻¹Λ)⁻¹ Λ'Φ⁻¹ X_t`.
pub fn gls_project(loadings: &Mat, idio_var: &[f64], x_t: &Vector) -> Result<Vector> {
    if x_t.len() != loadings.nrows() {
        return Err(Error::Dimension("observation length differs from loadings".into()));
    }
    let (normal, weighted) = weighted_normal(loadings, idio_var)?;
    let rhs = weighted.transpose() * x_t;
    normal
        .cholesky()
        .map(|ch| ch.solve(&rhs))
        .ok_or(Error::Singular("GLS normal matrix"))
}

/// GLS projection of every row of `x`.
pub fn gls_factors(x: &Mat, loadings: &Mat, idio_var: &[f64]) -> Result<Mat> {
    if x.ncols() != loadings.nrows() {
        return Err(Error::Dimension("panel width differs from loadings".into()));
    }
    let (normal, weighted) = weighted_normal(loadings, idio_var)?;
    let ch = normal.cholesky().ok_or(Error::Singular("GLS normal matrix"))?;
    // F' = (Λ'Φ⁻¹Λ)⁻¹ (Φ⁻¹Λ)' X'
    let rhs = weighted.transpose() * x.transpose();
    Ok(ch.solve(&rhs).transpose())
}

/// Shrunken projection `(Σ_F⁻¹ + Λ'Φ⁻¹Λ)⁻¹ Λ'Φ⁻¹ X_t`.
pub fn project_static(
    loadings: &Mat,
    idio_var: &[f64],
    factor_cov: &Mat,
    x_t: &Vector,
) -> Result<Vector> {
    let (normal, weighted) = weighted_normal(loadings, idio_var)?;
    let prec = linalg::inv_spd(factor_cov, "factor covariance")?;
    let rhs = weighted.transpose() * x_t;
    linalg::solve_spd_vec(&(prec + normal), &rhs, "projection normal matrix")
}

/// Gaussian quasi log-likelihood per observation,
/// `-(log|Σ| + tr(S Σ⁻¹)) / 2`, with `Σ = ΛΛ' + Φ`.
pub fn factor_loglik(sample_cov: &Mat, loadings: &Mat, idio_var: &[f64]) -> Result<f64> {
    let (normal, weighted) = weighted_normal(loadings, idio_var)?;
    let r = loadings.ncols();
    let inner = Mat::identity(r, r) + &normal;
    let logdet = idio_var.iter().map(|v| v.ln()).sum::<f64>()
        + linalg::logdet_spd(&inner, "factor likelihood")?;
    // Σ⁻¹ = Φ⁻¹ - Φ⁻¹Λ (I + Λ'Φ⁻¹Λ)⁻¹ Λ'Φ⁻¹
    let inner_inv = linalg::inv_spd(&inner, "factor likelihood")?;
    let mut trace = 0.0;
    for i in 0..idio_var.len() {
        trace += sample_cov[(i, i)] / idio_var[i];
    }
    let sw = sample_cov * &weighted;
    trace -= (weighted.transpose() * sw * inner_inv).trace();
    Ok(-0.5 * (logdet + trace))
}

/// Quasi maximum likelihood with diagonal `Φ`, fitted by EM with `Σ_F = I`.
///
/// Starts from PC, stops when the relative likelihood change falls below
/// `tol` or after `max_iter` iterations. Factors are the GLS projections at
/// the fitted `(Λ, Φ)`.
pub fn estimate_mle_h(x: &Mat, r: usize, max_iter: usize, tol: f64) -> Result<FactorEstimate> {
    check_rank(x, r)?;
    let (t, n) = (x.nrows(), x.ncols());
    if r >= n {
        return Err(Error::Invalid("maximum likelihood needs r < N".into()));
    }
    let s = x.transpose() * x / t as f64;
    let pc = estimate_pc(x, r)?;
    let mut lambda = pc.loadings;
    let mut phi = pc.idio_var;
    let mut ll = factor_loglik(&s, &lambda, &phi)?;
    let mut path = vec![ll];
    let mut converged = false;
    let mut iterations = 0;
    let mut floored = Vec::new();
    for it in 1..=max_iter {
        iterations = it;
        let (normal, weighted) = weighted_normal(&lambda, &phi)?;
        let inner = Mat::identity(r, r) + normal;
        let inner_inv = linalg::inv_spd(&inner, "EM factor step")?;
        // β = Λ'Σ⁻¹ = (I + Λ'Φ⁻¹Λ)⁻¹ Λ'Φ⁻¹
        let beta = &inner_inv * weighted.transpose();
        let sb = &s * beta.transpose();
        let cff = &inner_inv + &beta * &sb;
        let lambda_new = &sb * linalg::inv_spd(&cff, "EM second moment")?;
        floored.clear();
        let lsb = &lambda_new * sb.transpose();
        let phi_new: Vec<f64> = (0..n)
            .map(|i| {
                let v = s[(i, i)] - lsb[(i, i)];
                if v <= VARIANCE_FLOOR {
                    floored.push(i);
                    VARIANCE_FLOOR
                } else {
                    v
                }
            })
            .collect();
        let ll_new = factor_loglik(&s, &lambda_new, &phi_new)?;
        lambda = lambda_new;
        phi = phi_new;
        path.push(ll_new);
        let change = (ll_new - ll).abs() / ll.abs().max(1e-300);
        ll = ll_new;
        if change < tol {
            converged = true;
            break;
        }
    }
    // rotate so that Λ'Φ⁻¹Λ is diagonal with decreasing entries
    let (normal, _) = weighted_normal(&lambda, &phi)?;
    let eig = normal.symmetric_eigen();
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let rot = eig.eigenvectors.select_columns(&order);
    lambda = &lambda * rot;
    let mut factors = gls_factors(x, &lambda, &phi)?;
    fix_signs(&mut factors, &mut lambda);
    Ok(FactorEstimate {
        factors,
        loadings: lambda,
        idio_var: phi,
        factor_cov: Mat::identity(r, r),
        method: FactorMethod::MleH,
        ar_coefs: None,
        dynamics: None,
        diagnostics: Diagnostics {
            iterations,
            converged,
            floored_variances: floored,
            loglik_path: path,
            ..Default::default()
        },
    })
}

/// PC loadings and residual variances, then one GLS update of the factors.
pub fn estimate_pc_gls_h(x: &Mat, r: usize) -> Result<FactorEstimate> {
    let pc = estimate_pc(x, r)?;
    let factors = gls_factors(x, &pc.loadings, &pc.idio_var)?;
    let t = x.nrows() as f64;
    Ok(FactorEstimate {
        factor_cov: factors.transpose() * &factors / t,
        factors,
        method: FactorMethod::PcGlsH,
        ..pc
    })
}

/// Per-series OLS AR(1) coefficients of the PC residuals, capped at ±0.99.
pub fn residual_ar_coefs(x: &Mat, est: &FactorEstimate) -> (Vec<f64>, Vec<usize>) {
    let resid = x - est.common_component();
    let mut capped = Vec::new();
    let rho = resid
        .column_iter()
        .enumerate()
        .map(|(i, c)| {
            let series: Vec<f64> = c.iter().copied().collect();
            let r = linalg::ar1_coef(&series);
            if r.abs() >= RHO_CAP {
                capped.push(i);
                r.signum() * RHO_CAP
            } else {
                r
            }
        })
        .collect();
    (rho, capped)
}

/// Regress `(1 - ρL) x` on `(1 - ρL) F`. With `keep_first` the first period
/// enters scaled by `√(1 - ρ²)` (Prais-Winsten), so `ρ = 0` is plain OLS on
/// all rows. Returns the coefficients and the mean squared residual.
pub fn quasi_differenced_regression(
    x: &[f64],
    f: &Mat,
    rho: f64,
    keep_first: bool,
) -> Result<(Vector, f64)> {
    let (t, r) = (f.nrows(), f.ncols());
    if x.len() != t {
        return Err(Error::Dimension("series and factors differ in length".into()));
    }
    let first = usize::from(!keep_first);
    let rows = t - first;
    let mut fq = Mat::zeros(rows, r);
    let mut xq = Vector::zeros(rows);
    let head = (1.0 - rho * rho).max(0.0).sqrt();
    for s in first..t {
        let k = s - first;
        if s == 0 {
            xq[k] = head * x[0];
            for j in 0..r {
                fq[(k, j)] = head * f[(0, j)];
            }
        } else {
            xq[k] = x[s] - rho * x[s - 1];
            for j in 0..r {
                fq[(k, j)] = f[(s, j)] - rho * f[(s - 1, j)];
            }
        }
    }
    let coef = linalg::ols(&fq, &xq)?;
    let resid = &xq - &fq * &coef;
    Ok((coef, resid.norm_squared() / rows as f64))
}

/// PC-GLS-har with the residual AR(1) coefficients supplied.
pub fn estimate_pc_gls_har_with_rho(x: &Mat, pc: &FactorEstimate, rho: &[f64]) -> Result<FactorEstimate> {
    let (t, n) = (x.nrows(), x.ncols());
    let r = pc.rank();
    if rho.len() != n {
        return Err(Error::Dimension("one AR coefficient per series required".into()));
    }
    if t < r + 2 {
        return Err(Error::Invalid("too few periods for quasi-differencing".into()));
    }
    let mut loadings = Mat::zeros(n, r);
    let mut innov_var = Vec::with_capacity(n);
    let mut floored = Vec::new();
    for i in 0..n {
        let series: Vec<f64> = x.column(i).iter().copied().collect();
        let (coef, v) = quasi_differenced_regression(&series, &pc.factors, rho[i], true)?;
        if v <= VARIANCE_FLOOR {
            floored.push(i);
        }
        innov_var.push(v.max(VARIANCE_FLOOR));
        loadings.set_row(i, &coef.transpose());
    }
    let mut factors = gls_factors(x, &loadings, &innov_var)?;
    fix_signs(&mut factors, &mut loadings);
    Ok(FactorEstimate {
        factor_cov: factors.transpose() * &factors / t as f64,
        factors,
        loadings,
        idio_var: innov_var,
        method: FactorMethod::PcGlsHar,
        ar_coefs: Some(rho.to_vec()),
        dynamics: None,
        diagnostics: Diagnostics {
            converged: true,
            floored_variances: floored,
            ..pc.diagnostics.clone()
        },
    })
}

/// PC, then AR(1) residual coefficients, loadings re-estimated on
/// quasi-differenced data, and a GLS factor update with innovation variances.
pub fn estimate_pc_gls_har(x: &Mat, r: usize) -> Result<FactorEstimate> {
    let pc = estimate_pc(x, r)?;
    let (rho, capped) = residual_ar_coefs(x, &pc);
    let mut est = estimate_pc_gls_har_with_rho(x, &pc, &rho)?;
    est.diagnostics.capped_rho = capped;
    Ok(est)
}

/// Least-squares VAR(p) without intercept, equation by equation.
pub fn fit_var(f: &Mat, p: usize) -> Result<VarDynamics> {
    let (t, r) = (f.nrows(), f.ncols());
    if p == 0 {
        return Ok(VarDynamics::static_factors(f.transpose() * f / t as f64));
    }
    if t <= r * p + 1 {
        return Err(Error::Invalid(format!(
            "VAR({p}) on {r} series needs more than {} observations",
            r * p + 1
        )));
    }
    let rows = t - p;
    let mut z = Mat::zeros(rows, r * p);
    let mut y = Mat::zeros(rows, r);
    for s in p..t {
        y.set_row(s - p, &f.row(s));
        for l in 0..p {
            z.view_mut((s - p, l * r), (1, r)).copy_from(&f.row(s - 1 - l));
        }
    }
    let b = linalg::ols_multi(&z, &y)?;
    let resid = &y - &z * &b;
    let mut innov_cov = resid.transpose() * &resid / rows as f64;
    linalg::symmetrize(&mut innov_cov);
    let coefs = (0..p)
        .map(|l| b.view((l * r, 0), (r, r)).transpose())
        .collect();
    Ok(VarDynamics { coefs, innov_cov })
}

/// Homoskedastic OLS standard errors of the VAR coefficients, laid out like
/// [`VarDynamics::coefs`].
pub fn var_standard_errors(f: &Mat, var: &VarDynamics) -> Result<Vec<Mat>> {
    let (t, r) = (f.nrows(), f.ncols());
    let p = var.order();
    let rows = t - p;
    let mut z = Mat::zeros(rows, r * p);
    for s in p..t {
        for l in 0..p {
            z.view_mut((s - p, l * r), (1, r)).copy_from(&f.row(s - 1 - l));
        }
    }
    let zz_inv = linalg::inv_spd(&(z.transpose() * &z), "VAR regressors")?;
    Ok((0..p)
        .map(|l| {
            Mat::from_fn(r, r, |eq, j| {
                (var.innov_cov[(eq, eq)] * zz_inv[(l * r + j, l * r + j)]).sqrt()
            })
        })
        .collect())
}

/// PC factors refined by the Kalman smoother under a fitted VAR(p).
///
/// On complete data the smoothed factors equal the joint Gaussian projection
/// `(Σ_𝓕⁻¹ + I_T ⊗ Λ'Φ⁻¹Λ)⁻¹ (I_T ⊗ Λ'Φ⁻¹) vec(X')`.
pub fn estimate_pc_ks(x: &Mat, r: usize, p: usize) -> Result<FactorEstimate> {
    let pc = estimate_pc(x, r)?;
    let mut var = fit_var(&pc.factors, p)?;
    let shrunk = var.stabilize();
    let model = StateSpaceModel::factor_model(&pc.loadings, &pc.idio_var, &var)?;
    let smoothed = state_space::smooth_complete(&model, x)?;
    let t = x.nrows();
    let mut factors = Mat::zeros(t, r);
    for s in 0..t {
        factors.set_row(s, &smoothed.means[s].rows(0, r).transpose());
    }
    let mut loadings = pc.loadings.clone();
    fix_signs(&mut factors, &mut loadings);
    // a sign flip must also flip the VAR so the triple stays consistent
    let flips: Vec<f64> = (0..r)
        .map(|j| if loadings[(0, j)] * pc.loadings[(0, j)] < 0.0 { -1.0 } else { 1.0 })
        .collect();
    let d = Mat::from_diagonal(&Vector::from_vec(flips));
    let dynamics = VarDynamics {
        coefs: var.coefs.iter().map(|a| &d * a * &d).collect(),
        innov_cov: &d * &var.innov_cov * &d,
    };
    let factor_cov = match dynamics.order() {
        0 => dynamics.innov_cov.clone(),
        _ => dynamics.unconditional_cov()?,
    };
    Ok(FactorEstimate {
        factors,
        loadings,
        idio_var: pc.idio_var.clone(),
        factor_cov,
        method: FactorMethod::PcKs,
        ar_coefs: None,
        dynamics: Some(dynamics),
        diagnostics: Diagnostics {
            converged: true,
            var_shrunk: shrunk,
            loglik_path: vec![smoothed.loglik],
            ..pc.diagnostics
        },
    })
}

/// Dispatch by method with default settings.
pub fn estimate(x: &Mat, r: usize, method: FactorMethod, var_order: usize) -> Result<FactorEstimate> {
    match method {
        FactorMethod::Pc => estimate_pc(x, r),
        FactorMethod::MleH => estimate_mle_h(x, r, 1000, 1e-8),
        FactorMethod::PcGlsH => estimate_pc_gls_h(x, r),
        FactorMethod::PcGlsHar => estimate_pc_gls_har(x, r),
        FactorMethod::PcKs => estimate_pc_ks(x, r, var_order.max(1)),
        FactorMethod::KalmanEm => Err(Error::Invalid(
            "state-space EM estimates are produced by em_dfm".into(),
        )),
    }
}
