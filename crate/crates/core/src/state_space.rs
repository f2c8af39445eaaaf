//! Linear-Gaussian state-space models with missing observations.
//!
//! Observation: `x_t = c_t + Z s_t + v_t`, `v_t ~ N(0, diag(h))`.
//! Transition:  `s_{t+1} = T s_t + w_t`, `w_t ~ N(0, Q)`.
//!
//! The observation noise is diagonal, so the filter processes the observed
//! rows of each period one at a time. A missing row is skipped, which is the
//! same as giving it zero Kalman gain, and it contributes nothing to the
//! likelihood.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factors::{self, FactorEstimate, FactorMethod, VarDynamics, RHO_CAP};
use crate::linalg::{self, serde_rows, serde_rows_opt, serde_vector, Mat, Vector};
use crate::panel::{ObservationMask, Panel};

/// Smallest observation noise variance allowed in a model.
pub const NOISE_FLOOR: f64 = 1e-8;
/// Initial state variance used when the transition is not stationary.
pub const DIFFUSE_VARIANCE: f64 = 1e6;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StateSlot {
    /// Factor `index` at lag `lag` (0 = current period).
    Factor { index: usize, lag: usize },
    /// Autocorrelated idiosyncratic error of series `series`.
    Error { series: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateLayout {
    pub slots: Vec<StateSlot>,
}

impl StateLayout {
    /// `r` factors with `lags` stacked lags, followed by one error state per
    /// listed series.
    pub fn factors(r: usize, lags: usize, error_series: &[usize]) -> Self {
        let mut slots = Vec::with_capacity(r * lags + error_series.len());
        for lag in 0..lags {
            for index in 0..r {
                slots.push(StateSlot::Factor { index, lag });
            }
        }
        slots.extend(error_series.iter().map(|&series| StateSlot::Error { series }));
        Self { slots }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn factor_slot(&self, index: usize, lag: usize) -> Option<usize> {
        self.slots
            .iter()
            .position(|s| *s == StateSlot::Factor { index, lag })
    }

    pub fn error_slot(&self, series: usize) -> Option<usize> {
        self.slots
            .iter()
            .position(|s| *s == StateSlot::Error { series })
    }

    pub fn factor_count(&self) -> usize {
        self.slots
            .iter()
            .filter(|s| matches!(s, StateSlot::Factor { lag: 0, .. }))
            .count()
    }

    fn validate(&self) -> Result<()> {
        for (i, a) in self.slots.iter().enumerate() {
            if self.slots[..i].contains(a) {
                return Err(Error::Invalid(format!("state slot {a:?} appears twice")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSpaceModel {
    #[serde(with = "serde_rows")]
    pub obs_load: Mat,
    /// Per-period intercepts `c_t` (`T x N`); `None` means zero.
    #[serde(with = "serde_rows_opt", default)]
    pub obs_intercept: Option<Mat>,
    pub obs_noise_var: Vec<f64>,
    /// Observation loadings used in the first period instead of `obs_load`.
    #[serde(with = "serde_rows_opt", default)]
    pub first_obs_load: Option<Mat>,
    #[serde(default)]
    pub first_obs_noise_var: Option<Vec<f64>>,
    #[serde(with = "serde_rows")]
    pub trans_mat: Mat,
    #[serde(with = "serde_rows")]
    pub trans_cov: Mat,
    #[serde(with = "serde_vector")]
    pub init_mean: Vector,
    #[serde(with = "serde_rows")]
    pub init_cov: Mat,
    pub layout: StateLayout,
}

impl StateSpaceModel {
    pub fn state_dim(&self) -> usize {
        self.trans_mat.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_load.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.state_dim();
        let n = self.obs_dim();
        let dim = |what: &str| Err(Error::Dimension(format!("state-space model: {what}")));
        if self.trans_mat.ncols() != k || self.trans_cov.shape() != (k, k) {
            return dim("transition matrices must be k x k");
        }
        if self.obs_load.ncols() != k || self.obs_noise_var.len() != n {
            return dim("observation loadings must be N x k with N noise variances");
        }
        if self.init_mean.len() != k || self.init_cov.shape() != (k, k) {
            return dim("initial state must have dimension k");
        }
        if self.layout.len() != k {
            return dim("layout must describe every state slot");
        }
        if let Some(c) = &self.obs_intercept {
            if c.ncols() != n {
                return dim("intercepts must have N columns");
            }
        }
        if let Some(z0) = &self.first_obs_load {
            if z0.shape() != (n, k) {
                return dim("first-period loadings must be N x k");
            }
        }
        if let Some(h0) = &self.first_obs_noise_var {
            if h0.len() != n || h0.iter().any(|&v| !(v >= NOISE_FLOOR)) {
                return dim("first-period noise variances must be N values above the floor");
            }
        }
        self.layout.validate()?;
        if self.obs_noise_var.iter().any(|&v| !(v >= NOISE_FLOOR)) {
            return Err(Error::Invalid("observation noise variance below floor".into()));
        }
        if self.layout.slots.iter().any(|s| matches!(s, StateSlot::Error { series } if *series >= n)) {
            return dim("error state refers to a missing series");
        }
        let all = [&self.obs_load, &self.trans_mat, &self.trans_cov, &self.init_cov];
        let optional = [&self.obs_intercept, &self.first_obs_load];
        if all.iter().any(|m| m.iter().any(|v| !v.is_finite()))
            || optional.iter().any(|m| m.iter().flatten().any(|v| !v.is_finite()))
            || self.init_mean.iter().any(|v| !v.is_finite())
            || self.obs_noise_var.iter().any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("state-space model"));
        }
        if linalg::min_eigenvalue(&self.trans_cov) < -1e-10 * self.trans_cov.abs().max().max(1.0) {
            return Err(Error::Invalid("transition covariance is not PSD".into()));
        }
        Ok(())
    }

    /// Plain factor model: `X_t = Λ F_t + e_t`, factors follow `var`.
    pub fn factor_model(loadings: &Mat, noise_var: &[f64], var: &VarDynamics) -> Result<Self> {
        let structure = DfmStructure {
            factors: loadings.ncols(),
            var_order: var.order(),
            qd_rho: vec![0.0; loadings.nrows()],
            error_states: Vec::new(),
        };
        let params = DfmParams {
            loadings: loadings.clone(),
            obs_var: noise_var.to_vec(),
            dynamics: var.clone(),
            error_rho: Vec::new(),
            error_var: Vec::new(),
        };
        structure.build(&params, None)
    }

    /// Stationary initial moments, or a diffuse proxy when the transition
    /// is not stable.
    pub fn set_stationary_init(&mut self) {
        let k = self.state_dim();
        self.init_mean = Vector::zeros(k);
        self.init_cov = match linalg::discrete_lyapunov(&self.trans_mat, &self.trans_cov) {
            Ok(p) => p,
            Err(_) => Mat::identity(k, k) * DIFFUSE_VARIANCE,
        };
    }

    fn row_load(&self, t: usize) -> &Mat {
        match (&self.first_obs_load, t) {
            (Some(z0), 0) => z0,
            _ => &self.obs_load,
        }
    }

    fn row_noise(&self, t: usize, i: usize) -> f64 {
        match (&self.first_obs_noise_var, t) {
            (Some(h0), 0) => h0[i],
            _ => self.obs_noise_var[i],
        }
    }

    fn intercept(&self, t: usize, i: usize) -> f64 {
        self.obs_intercept.as_ref().map_or(0.0, |c| c[(t, i)])
    }

    /// Model-implied mean of observation `i` given state `s` at period `t`.
    pub fn predict_observation(&self, t: usize, i: usize, s: &Vector) -> f64 {
        self.intercept(t, i) + self.row_load(t).row(i).transpose().dot(s)
    }
}

#[derive(Debug, Clone)]
pub struct FilterOutput {
    /// `a_{t|t-1}`; the first entry is the initial state.
    pub predicted_means: Vec<Vector>,
    pub predicted_covs: Vec<Mat>,
    pub filtered_means: Vec<Vector>,
    pub filtered_covs: Vec<Mat>,
    pub loglik: f64,
    /// Log-likelihood contribution of each period.
    pub period_loglik: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SmootherOutput {
    pub means: Vec<Vector>,
    pub covs: Vec<Mat>,
    /// `Cov(s_t, s_{t-1} | all data)`; the first entry is zero.
    pub lag_one_covs: Vec<Mat>,
    pub loglik: f64,
}

fn check_data(model: &StateSpaceModel, values: &Mat, mask: &ObservationMask) -> Result<()> {
    model.validate()?;
    if values.ncols() != model.obs_dim() || mask.shape() != values.shape() {
        return Err(Error::Dimension(format!(
            "data is {}x{} but the model observes {} series",
            values.nrows(),
            values.ncols(),
            model.obs_dim()
        )));
    }
    if let Some(c) = &model.obs_intercept {
        if c.nrows() < values.nrows() {
            return Err(Error::Dimension("intercepts cover fewer periods than data".into()));
        }
    }
    if values.nrows() == 0 {
        return Err(Error::Invalid("no periods to filter".into()));
    }
    Ok(())
}

pub fn kalman_filter(model: &StateSpaceModel, data: &Panel) -> Result<FilterOutput> {
    kalman_filter_masked(model, data.values(), data.mask())
}

/// Filter with an explicit mask; entries with a false mask are never read.
pub fn kalman_filter_masked(
    model: &StateSpaceModel,
    values: &Mat,
    mask: &ObservationMask,
) -> Result<FilterOutput> {
    check_data(model, values, mask)?;
    let t_len = values.nrows();
    let n = model.obs_dim();
    let mut a = model.init_mean.clone();
    let mut p = model.init_cov.clone();
    let mut out = FilterOutput {
        predicted_means: Vec::with_capacity(t_len),
        predicted_covs: Vec::with_capacity(t_len),
        filtered_means: Vec::with_capacity(t_len),
        filtered_covs: Vec::with_capacity(t_len),
        loglik: 0.0,
        period_loglik: Vec::with_capacity(t_len),
    };
    let tt = model.trans_mat.transpose();
    for t in 0..t_len {
        out.predicted_means.push(a.clone());
        out.predicted_covs.push(p.clone());
        let load = model.row_load(t);
        let mut ll_t = 0.0;
        for i in 0..n {
            if !mask[(t, i)] {
                continue;
            }
            let z = load.row(i).transpose();
            let pz = &p * &z;
            let f = z.dot(&pz) + model.row_noise(t, i);
            if !(f.is_finite() && f > 0.0) {
                return Err(Error::NonFinite("innovation variance"));
            }
            let v = values[(t, i)] - model.intercept(t, i) - z.dot(&a);
            if !v.is_finite() {
                return Err(Error::NonFinite("innovation"));
            }
            a.axpy(v / f, &pz, 1.0);
            p.ger(-1.0 / f, &pz, &pz, 1.0);
            ll_t -= 0.5 * (LN_2PI + f.ln() + v * v / f);
        }
        linalg::symmetrize(&mut p);
        out.filtered_means.push(a.clone());
        out.filtered_covs.push(p.clone());
        out.period_loglik.push(ll_t);
        out.loglik += ll_t;
        a = &model.trans_mat * &a;
        p = &model.trans_mat * &p * &tt + &model.trans_cov;
        linalg::symmetrize(&mut p);
    }
    Ok(out)
}

/// Solve `P_pred X = rhs` for the smoother gain, tolerating singular `P_pred`.
fn gain_solve(p_pred: &Mat, rhs: &Mat) -> Mat {
    match p_pred.clone().cholesky() {
        Some(ch) => ch.solve(rhs),
        None => linalg::pinv_sym(p_pred) * rhs,
    }
}

pub fn kalman_smoother(model: &StateSpaceModel, data: &Panel) -> Result<SmootherOutput> {
    kalman_smoother_masked(model, data.values(), data.mask())
}

/// Fixed-interval (Rauch-Tung-Striebel) smoother with lag-one covariances.
pub fn kalman_smoother_masked(
    model: &StateSpaceModel,
    values: &Mat,
    mask: &ObservationMask,
) -> Result<SmootherOutput> {
    let filt = kalman_filter_masked(model, values, mask)?;
    smooth_from_filter(model, &filt)
}

pub fn smooth_from_filter(model: &StateSpaceModel, filt: &FilterOutput) -> Result<SmootherOutput> {
    let t_len = filt.filtered_means.len();
    let k = model.state_dim();
    let mut means = filt.filtered_means.clone();
    let mut covs = filt.filtered_covs.clone();
    let mut lag_one = vec![Mat::zeros(k, k); t_len];
    for t in (0..t_len.saturating_sub(1)).rev() {
        let p_f = &filt.filtered_covs[t];
        let p_pred = &filt.predicted_covs[t + 1];
        // J_t = P_{t|t} T' P_{t+1|t}⁻¹, computed as (P_{t+1|t}⁻¹ T P_{t|t})'
        let j = gain_solve(p_pred, &(&model.trans_mat * p_f)).transpose();
        let dm = &means[t + 1] - &filt.predicted_means[t + 1];
        means[t] = &filt.filtered_means[t] + &j * dm;
        let dp = &covs[t + 1] - p_pred;
        let mut pt = p_f + &j * dp * j.transpose();
        linalg::symmetrize(&mut pt);
        lag_one[t + 1] = &covs[t + 1] * j.transpose();
        covs[t] = pt;
    }
    Ok(SmootherOutput {
        means,
        covs,
        lag_one_covs: lag_one,
        loglik: filt.loglik,
    })
}

/// Smoother on a complete data matrix.
pub fn smooth_complete(model: &StateSpaceModel, x: &Mat) -> Result<SmootherOutput> {
    let mask = ObservationMask::from_element(x.nrows(), x.ncols(), true);
    kalman_smoother_masked(model, x, &mask)
}

/// Layout of a dynamic factor model with optional quasi-differenced rows and
/// autocorrelated error states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DfmStructure {
    pub factors: usize,
    /// VAR order of the factors; zero means serially independent factors
    /// with identity covariance.
    pub var_order: usize,
    /// Fixed quasi-differencing coefficient per series (0 = untransformed).
    pub qd_rho: Vec<f64>,
    /// Series whose AR(1) idiosyncratic error is carried as a state.
    pub error_states: Vec<usize>,
}

/// Free parameters of a [`DfmStructure`].
#[derive(Debug, Clone, PartialEq)]
pub struct DfmParams {
    pub loadings: Mat,
    /// Innovation variance for quasi-differenced rows, measurement noise
    /// otherwise.
    pub obs_var: Vec<f64>,
    pub dynamics: VarDynamics,
    pub error_rho: Vec<f64>,
    pub error_var: Vec<f64>,
}

impl DfmStructure {
    pub fn series(&self) -> usize {
        self.qd_rho.len()
    }

    pub fn has_quasi_differencing(&self) -> bool {
        self.qd_rho.iter().any(|&r| r != 0.0)
    }

    /// Number of stacked factor lags in the state.
    pub fn factor_lags(&self) -> usize {
        let need = if self.has_quasi_differencing() { 2 } else { 1 };
        self.var_order.max(need)
    }

    pub fn layout(&self) -> StateLayout {
        StateLayout::factors(self.factors, self.factor_lags(), &self.error_states)
    }

    fn check(&self, params: &DfmParams) -> Result<()> {
        let n = self.series();
        let r = self.factors;
        if params.loadings.shape() != (n, r) || params.obs_var.len() != n {
            return Err(Error::Dimension("loadings must be N x r with N variances".into()));
        }
        if params.dynamics.dim() != r || params.dynamics.order() != self.var_order {
            return Err(Error::Dimension("factor dynamics do not match structure".into()));
        }
        let e = self.error_states.len();
        if params.error_rho.len() != e || params.error_var.len() != e {
            return Err(Error::Dimension("one AR coefficient and variance per error state".into()));
        }
        if self.error_states.iter().any(|&i| i >= n) {
            return Err(Error::Dimension("error state refers to a missing series".into()));
        }
        if self.qd_rho.iter().chain(&params.error_rho).any(|r| r.abs() >= 1.0) {
            return Err(Error::Invalid("AR coefficients must lie inside (-1, 1)".into()));
        }
        Ok(())
    }

    /// Assemble the state-space model. Quasi-differenced rows need the data
    /// to form `c_t = ρ_i x_{i,t-1}`; the first period of such a row uses the
    /// undifferenced equation with stationary error variance `σ²/(1-ρ²)`.
    pub fn build(&self, params: &DfmParams, data: Option<(&Mat, &ObservationMask)>) -> Result<StateSpaceModel> {
        self.check(params)?;
        let n = self.series();
        let r = self.factors;
        let lags = self.factor_lags();
        let layout = self.layout();
        let kf = r * lags;
        let k = layout.len();

        let mut trans = Mat::zeros(k, k);
        let mut q = Mat::zeros(k, k);
        for (l, c) in params.dynamics.coefs.iter().enumerate() {
            trans.view_mut((0, l * r), (r, r)).copy_from(c);
        }
        for l in 1..lags {
            trans
                .view_mut((l * r, (l - 1) * r), (r, r))
                .copy_from(&Mat::identity(r, r));
        }
        if self.var_order == 0 {
            q.view_mut((0, 0), (r, r)).copy_from(&Mat::identity(r, r));
        } else {
            q.view_mut((0, 0), (r, r)).copy_from(&params.dynamics.innov_cov);
        }
        for (j, _) in self.error_states.iter().enumerate() {
            trans[(kf + j, kf + j)] = params.error_rho[j];
            q[(kf + j, kf + j)] = params.error_var[j];
        }

        let mut load = Mat::zeros(n, k);
        let mut load0 = Mat::zeros(n, k);
        let mut noise0 = params.obs_var.clone();
        for i in 0..n {
            let rho = self.qd_rho[i];
            for f in 0..r {
                let lam = params.loadings[(i, f)];
                load[(i, f)] = lam;
                load0[(i, f)] = lam;
                if rho != 0.0 {
                    load[(i, r + f)] = -rho * lam;
                }
            }
            if let Some(j) = self.error_states.iter().position(|&s| s == i) {
                load[(i, kf + j)] = 1.0;
                load0[(i, kf + j)] = 1.0;
            }
            noise0[i] = params.obs_var[i] / (1.0 - rho * rho);
        }

        let intercept = if self.has_quasi_differencing() {
            let (values, mask) = data.ok_or_else(|| {
                Error::Invalid("quasi-differenced rows need the observed data".into())
            })?;
            if values.ncols() != n {
                return Err(Error::Dimension("data width differs from the model".into()));
            }
            let t_len = values.nrows();
            let mut c = Mat::zeros(t_len, n);
            for i in (0..n).filter(|&i| self.qd_rho[i] != 0.0) {
                if (0..t_len).any(|t| !mask[(t, i)]) {
                    return Err(Error::Invalid(format!(
                        "quasi-differenced series {i} has missing entries"
                    )));
                }
                for t in 1..t_len {
                    c[(t, i)] = self.qd_rho[i] * values[(t - 1, i)];
                }
            }
            Some(c)
        } else {
            None
        };

        let floor = |v: &mut Vec<f64>| v.iter_mut().for_each(|x| *x = x.max(NOISE_FLOOR));
        let mut obs_var = params.obs_var.clone();
        floor(&mut obs_var);
        floor(&mut noise0);
        let mut model = StateSpaceModel {
            obs_load: load,
            obs_intercept: intercept,
            obs_noise_var: obs_var,
            first_obs_load: Some(load0),
            first_obs_noise_var: Some(noise0),
            trans_mat: trans,
            trans_cov: q,
            init_mean: Vector::zeros(k),
            init_cov: Mat::zeros(k, k),
            layout,
        };
        model.set_stationary_init();
        model.validate()?;
        Ok(model)
    }

    /// Smoothed target prediction `λ_i' F_t + ε̃_{i,t}` (without the
    /// quasi-differencing intercept) for every period.
    pub fn smoothed_signal(&self, params: &DfmParams, smoothed: &SmootherOutput, i: usize) -> Vec<f64> {
        let r = self.factors;
        let kf = r * self.factor_lags();
        let err = self.error_states.iter().position(|&s| s == i);
        smoothed
            .means
            .iter()
            .map(|m| {
                let mut v = (0..r).map(|f| params.loadings[(i, f)] * m[f]).sum::<f64>();
                if let Some(j) = err {
                    v += m[kf + j];
                }
                v
            })
            .collect()
    }
}

/// Loadings, noise variances and factor dynamics shared by the builders.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModelInputs {
    pub loadings: Mat,
    pub noise_var: Vec<f64>,
    pub dynamics: VarDynamics,
}

/// Quasi-differenced observation equation `X_t = ρX_{t-1} + (Λ, -ρΛ)(F_t, F_{t-1})' + e_t`.
/// `inputs.noise_var` holds the innovation variances `σ²_e`.
pub fn build_method_a(inputs: &FactorModelInputs, rho: &[f64], data: &Panel) -> Result<StateSpaceModel> {
    if rho.len() != inputs.loadings.nrows() {
        return Err(Error::Dimension("one AR coefficient per series required".into()));
    }
    if !data.is_complete() {
        return Err(Error::Invalid(
            "quasi-differencing needs fully observed series".into(),
        ));
    }
    let structure = DfmStructure {
        factors: inputs.loadings.ncols(),
        var_order: inputs.dynamics.order(),
        qd_rho: rho.to_vec(),
        error_states: Vec::new(),
    };
    let params = DfmParams {
        loadings: inputs.loadings.clone(),
        obs_var: inputs.noise_var.clone(),
        dynamics: inputs.dynamics.clone(),
        error_rho: Vec::new(),
        error_var: Vec::new(),
    };
    // the state is (F_t, F_{t-1}) even when every ρ is zero
    build_with_min_lags(&structure, &params, data, 2)
}

/// Build with at least `min_lags` stacked factor lags.
fn build_with_min_lags(
    structure: &DfmStructure,
    params: &DfmParams,
    data: &Panel,
    min_lags: usize,
) -> Result<StateSpaceModel> {
    if structure.factor_lags() >= min_lags {
        return structure.build(params, Some((data.values(), data.mask())));
    }
    // pad the VAR with zero coefficient matrices to reach the lag count
    let r = structure.factors;
    let mut padded = params.dynamics.clone();
    if padded.order() == 0 {
        padded.innov_cov = Mat::identity(r, r);
    }
    while padded.order() < min_lags {
        padded.coefs.push(Mat::zeros(r, r));
    }
    let s = DfmStructure {
        var_order: padded.order(),
        ..structure.clone()
    };
    let p = DfmParams {
        dynamics: padded,
        ..params.clone()
    };
    s.build(&p, Some((data.values(), data.mask())))
}

/// State expanded with an AR(1) error state for every series:
/// `X_t = (Λ, I)(F_t, ε̃_t)' + ξ_t`. `inputs.noise_var` holds `σ²_ξ`;
/// `error_var` holds the AR innovation variances `σ²_e`.
pub fn build_method_b(inputs: &FactorModelInputs, rho: &[f64], error_var: &[f64]) -> Result<StateSpaceModel> {
    let n = inputs.loadings.nrows();
    if rho.len() != n || error_var.len() != n {
        return Err(Error::Dimension("one AR coefficient and variance per series".into()));
    }
    let structure = DfmStructure {
        factors: inputs.loadings.ncols(),
        var_order: inputs.dynamics.order(),
        qd_rho: vec![0.0; n],
        error_states: (0..n).collect(),
    };
    let params = DfmParams {
        loadings: inputs.loadings.clone(),
        obs_var: inputs.noise_var.clone(),
        dynamics: inputs.dynamics.clone(),
        error_rho: rho.to_vec(),
        error_var: error_var.to_vec(),
    };
    structure.build(&params, None)
}

/// Hybrid model: fully observed predictors (all columns but the last) are
/// quasi-differenced; the target (last column) carries one AR(1) error
/// state. State is `(F_t, F_{t-1}, ε̃_{Y,t})`, dimension `2r + 1` for `p ≤ 2`.
/// `inputs.noise_var` holds `σ²_e` for predictors and `σ²_ξ` for the target.
pub fn build_ks_star(
    inputs: &FactorModelInputs,
    rho_observed: &[f64],
    rho_target: f64,
    target_error_var: f64,
    data: &Panel,
) -> Result<StateSpaceModel> {
    let (structure, params) =
        ks_star_parts(inputs, rho_observed, rho_target, target_error_var)?;
    build_with_min_lags(&structure, &params, data, 2)
}

fn ks_star_parts(
    inputs: &FactorModelInputs,
    rho_observed: &[f64],
    rho_target: f64,
    target_error_var: f64,
) -> Result<(DfmStructure, DfmParams)> {
    let n = inputs.loadings.nrows();
    if n < 2 || rho_observed.len() != n - 1 {
        return Err(Error::Dimension(
            "need one AR coefficient per predictor plus a target row".into(),
        ));
    }
    let mut qd = rho_observed.to_vec();
    qd.push(0.0);
    let structure = DfmStructure {
        factors: inputs.loadings.ncols(),
        var_order: inputs.dynamics.order(),
        qd_rho: qd,
        error_states: vec![n - 1],
    };
    let params = DfmParams {
        loadings: inputs.loadings.clone(),
        obs_var: inputs.noise_var.clone(),
        dynamics: inputs.dynamics.clone(),
        error_rho: vec![rho_target],
        error_var: vec![target_error_var],
    };
    Ok((structure, params))
}

/// Per-sub-period AR coefficient from one estimated on the observed points.
///
/// A stock series observed at every `m`-th sub-period of an AR(1) with
/// coefficient `ρ` has persistence `ρ^m` at the observed points. With
/// `share = 1/m` the sub-period coefficient is `rho_hat^share`.
pub fn back_out_target_rho(rho_hat: f64, share_observed: f64) -> Result<f64> {
    if !(rho_hat > 0.0 && rho_hat < 1.0) {
        return Err(Error::Invalid(format!("rho_hat {rho_hat} must lie in (0, 1)")));
    }
    if !(share_observed > 0.0 && share_observed <= 1.0) {
        return Err(Error::Invalid(format!(
            "observed share {share_observed} must lie in (0, 1]"
        )));
    }
    Ok(rho_hat.powf(share_observed))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmOptions {
    pub max_iter: usize,
    pub tol: f64,
    /// Keep the error-state AR coefficients at their initial values.
    pub fix_error_rho: bool,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol: 1e-8,
            fix_error_rho: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmFit {
    pub structure: DfmStructure,
    pub params: DfmParams,
    pub model: StateSpaceModel,
    pub smoothed: SmootherOutput,
    pub loglik_path: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl EmFit {
    /// Smoothed current-period factors (`T x r`).
    pub fn factors(&self) -> Mat {
        let r = self.structure.factors;
        let t = self.smoothed.means.len();
        Mat::from_fn(t, r, |s, j| self.smoothed.means[s][j])
    }

    pub fn to_factor_estimate(&self) -> Result<FactorEstimate> {
        let r = self.structure.factors;
        let factor_cov = if self.structure.var_order == 0 {
            Mat::identity(r, r)
        } else {
            self.params
                .dynamics
                .unconditional_cov()
                .unwrap_or_else(|_| self.params.dynamics.innov_cov.clone())
        };
        Ok(FactorEstimate {
            factors: self.factors(),
            loadings: self.params.loadings.clone(),
            idio_var: self.params.obs_var.clone(),
            factor_cov,
            method: FactorMethod::KalmanEm,
            ar_coefs: None,
            dynamics: (self.structure.var_order > 0).then(|| self.params.dynamics.clone()),
            diagnostics: factors::Diagnostics {
                iterations: self.iterations,
                converged: self.converged,
                loglik_path: self.loglik_path.clone(),
                ..Default::default()
            },
        })
    }
}

/// Second moment `E[s s']` at one period.
fn second_moment(m: &Vector, p: &Mat) -> Mat {
    p + m * m.transpose()
}

fn m_step(
    structure: &DfmStructure,
    params: &DfmParams,
    sm: &SmootherOutput,
    values: &Mat,
    mask: &ObservationMask,
    opts: &EmOptions,
) -> Result<DfmParams> {
    let t_len = values.nrows();
    let n = structure.series();
    let r = structure.factors;
    let kf = r * structure.factor_lags();
    let moments: Vec<Mat> = (0..t_len).map(|t| second_moment(&sm.means[t], &sm.covs[t])).collect();

    let mut loadings = params.loadings.clone();
    let mut obs_var = params.obs_var.clone();
    for i in 0..n {
        let rho = structure.qd_rho[i];
        let err = structure.error_states.iter().position(|&s| s == i).map(|j| kf + j);
        let mut gg = Mat::zeros(r, r);
        let mut b = Vector::zeros(r);
        let mut used = Vec::new();
        for t in 0..t_len {
            if !mask[(t, i)] {
                continue;
            }
            let (w, xt, lag) = if t == 0 || rho == 0.0 {
                (if t == 0 { 1.0 - rho * rho } else { 1.0 }, values[(t, i)], false)
            } else {
                (1.0, values[(t, i)] - rho * values[(t - 1, i)], true)
            };
            let m = &sm.means[t];
            let s = &moments[t];
            let (eg, egg, ege) = g_moments(m, s, r, rho, lag, err);
            gg += egg * w;
            b += (eg * xt - ege) * w;
            used.push((t, w, xt, lag));
        }
        if used.is_empty() {
            continue;
        }
        let lam = match gg.clone().cholesky() {
            Some(ch) => ch.solve(&b),
            None => continue,
        };
        let mut ssr = 0.0;
        for &(t, w, xt, lag) in &used {
            let m = &sm.means[t];
            let s = &moments[t];
            let (eg, egg, ege) = g_moments(m, s, r, rho, lag, err);
            let (e_err, e_err2) = err.map_or((0.0, 0.0), |e| (m[e], s[(e, e)]));
            let val = xt * xt - 2.0 * xt * (lam.dot(&eg) + e_err)
                + lam.dot(&(&egg * &lam))
                + 2.0 * lam.dot(&ege)
                + e_err2;
            ssr += w * val;
        }
        loadings.set_row(i, &lam.transpose());
        obs_var[i] = (ssr / used.len() as f64).max(NOISE_FLOOR);
    }

    let mut dynamics = params.dynamics.clone();
    let p = structure.var_order;
    if p > 0 && t_len > 1 {
        let rp = r * p;
        let mut s10 = Mat::zeros(r, rp);
        let mut s00 = Mat::zeros(rp, rp);
        for t in 1..t_len {
            let cross = &sm.lag_one_covs[t] + &sm.means[t] * sm.means[t - 1].transpose();
            s10 += cross.view((0, 0), (r, rp));
            s00 += moments[t - 1].view((0, 0), (rp, rp));
        }
        let a = linalg::solve_spd(&s00, &s10.transpose(), "EM transition moments")?.transpose();
        dynamics = VarDynamics {
            coefs: (0..p).map(|l| a.view((0, l * r), (r, r)).into_owned()).collect(),
            innov_cov: Mat::identity(r, r),
        };
    }

    let mut error_rho = params.error_rho.clone();
    let mut error_var = params.error_var.clone();
    for j in 0..structure.error_states.len() {
        let e = kf + j;
        let (mut s1, mut s0, mut s11) = (0.0, 0.0, 0.0);
        for t in 1..t_len {
            s1 += sm.lag_one_covs[t][(e, e)] + sm.means[t][e] * sm.means[t - 1][e];
            s0 += moments[t - 1][(e, e)];
            s11 += moments[t][(e, e)];
        }
        let rho = if opts.fix_error_rho {
            params.error_rho[j]
        } else if s0 > 0.0 {
            (s1 / s0).clamp(-RHO_CAP, RHO_CAP)
        } else {
            params.error_rho[j]
        };
        error_rho[j] = rho;
        let v = (s11 - 2.0 * rho * s1 + rho * rho * s0) / (t_len - 1).max(1) as f64;
        error_var[j] = v.max(NOISE_FLOOR);
    }

    Ok(DfmParams {
        loadings,
        obs_var,
        dynamics,
        error_rho,
        error_var,
    })
}

/// Moments of `g = F_t - ρ F_{t-1}` (or `F_t` when `lag` is false):
/// `E[g]`, `E[g g']` and `E[g ε]` for the optional error slot.
fn g_moments(
    m: &Vector,
    s: &Mat,
    r: usize,
    rho: f64,
    lag: bool,
    err: Option<usize>,
) -> (Vector, Mat, Vector) {
    let mut eg = m.rows(0, r).into_owned();
    let mut egg = s.view((0, 0), (r, r)).into_owned();
    let mut ege = match err {
        Some(e) => s.view((0, e), (r, 1)).column(0).into_owned(),
        None => Vector::zeros(r),
    };
    if lag {
        eg -= m.rows(r, r) * rho;
        let s01 = s.view((0, r), (r, r));
        let s11 = s.view((r, r), (r, r));
        egg = egg - (s01 + s01.transpose()) * rho + s11 * (rho * rho);
        if let Some(e) = err {
            ege -= s.view((r, e), (r, 1)).column(0) * rho;
        }
    }
    (eg, egg, ege)
}

/// Expectation-maximization for a [`DfmStructure`] starting from `init`.
///
/// The factor innovation covariance is held at the identity, which fixes
/// the scale of the factors; `init` should already be in that normalization.
/// The initial state distribution is computed from `init` and held fixed,
/// so each iteration is an exact EM step and the likelihood cannot fall.
/// A relative decrease larger than `1e-8` aborts with a diagnostic.
pub fn em_fit(
    structure: &DfmStructure,
    init: DfmParams,
    values: &Mat,
    mask: &ObservationMask,
    opts: &EmOptions,
) -> Result<EmFit> {
    let data = Some((values, mask));
    let init = unit_innovations(init, structure.var_order)?;
    let base = structure.build(&init, data)?;
    let (init_mean, init_cov) = (base.init_mean.clone(), base.init_cov.clone());
    let build = |params: &DfmParams| -> Result<StateSpaceModel> {
        let mut m = structure.build(params, data)?;
        m.init_mean = init_mean.clone();
        m.init_cov = init_cov.clone();
        Ok(m)
    };
    let mut params = init;
    let mut model = build(&params)?;
    let mut smoothed = kalman_smoother_masked(&model, values, mask)?;
    let mut path = vec![smoothed.loglik];
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=opts.max_iter {
        iterations = it;
        let next = m_step(structure, &params, &smoothed, values, mask, opts)?;
        let next_model = build(&next)?;
        let next_smoothed = kalman_smoother_masked(&next_model, values, mask)?;
        let prev = *path.last().expect("path starts non-empty");
        let ll = next_smoothed.loglik;
        if ll < prev - 1e-8 * prev.abs().max(1.0) {
            return Err(Error::LikelihoodDecrease {
                iteration: it,
                decrease: prev - ll,
            });
        }
        params = next;
        model = next_model;
        smoothed = next_smoothed;
        path.push(ll);
        if (ll - prev).abs() <= opts.tol * prev.abs().max(1e-300) {
            converged = true;
            break;
        }
    }
    Ok(EmFit {
        structure: structure.clone(),
        params,
        model,
        smoothed,
        loglik_path: path,
        iterations,
        converged,
    })
}

/// Fill missing entries by alternating PC fits and common-component refills,
/// starting from zeros. Returns the completed matrix.
pub fn pc_fill(panel: &Panel, r: usize, iterations: usize) -> Result<Mat> {
    let mut x = panel.filled_values(&Mat::zeros(panel.nrows(), panel.ncols()))?;
    if panel.is_complete() {
        return Ok(x);
    }
    for _ in 0..iterations {
        let est = factors::estimate_pc(&x, r)?;
        let cc = est.common_component();
        x = panel.filled_values(&cc)?;
    }
    Ok(x)
}

/// Starting values for EM: PC on a PC-filled panel, a VAR on the factors,
/// and residual moments per series. Error states start from the residual
/// AR(1) of the observed points, converted to sub-period persistence.
pub fn initial_params(structure: &DfmStructure, panel: &Panel) -> Result<DfmParams> {
    let r = structure.factors;
    let n = panel.ncols();
    if structure.series() != n {
        return Err(Error::Dimension("structure and panel differ in width".into()));
    }
    let filled = pc_fill(panel, r, 20)?;
    let pc = factors::estimate_pc(&filled, r)?;
    let mut dynamics = factors::fit_var(&pc.factors, structure.var_order)?;
    dynamics.stabilize();
    let t_len = panel.nrows();
    let resid = panel.values() - pc.common_component();
    let mut obs_var = vec![0.0; n];
    let mut error_rho = Vec::new();
    let mut error_var = Vec::new();
    for i in 0..n {
        let obs: Vec<usize> = (0..t_len).filter(|&t| panel.is_observed(t, i)).collect();
        let e: Vec<f64> = obs.iter().map(|&t| resid[(t, i)]).collect();
        let var = e.iter().map(|v| v * v).sum::<f64>() / e.len().max(1) as f64;
        let rho = structure.qd_rho[i];
        obs_var[i] = if rho != 0.0 {
            let d: Vec<f64> = (1..t_len)
                .map(|t| resid[(t, i)] - rho * resid[(t - 1, i)])
                .collect();
            d.iter().map(|v| v * v).sum::<f64>() / d.len().max(1) as f64
        } else {
            var
        };
        if structure.error_states.contains(&i) {
            let share = obs.len() as f64 / t_len as f64;
            let skip = linalg::ar1_coef(&e);
            let sub = if skip > 0.0 && skip < 1.0 {
                back_out_target_rho(skip, share)?
            } else {
                0.0
            }
            .min(RHO_CAP);
            error_rho.push(sub);
            error_var.push((0.9 * var * (1.0 - sub * sub)).max(NOISE_FLOOR));
            obs_var[i] = 0.1 * var;
        }
        obs_var[i] = obs_var[i].max(NOISE_FLOOR);
    }
    let params = DfmParams {
        loadings: pc.loadings,
        obs_var,
        dynamics,
        error_rho,
        error_var,
    };
    unit_innovations(params, structure.var_order)
}

/// Rotate the factors so their innovations have identity covariance:
/// with `C C' = Q`, `F = C F̃`, `Λ̃ = Λ C` and `Ã_l = C⁻¹ A_l C`.
pub fn unit_innovations(mut params: DfmParams, var_order: usize) -> Result<DfmParams> {
    let r = params.loadings.ncols();
    if var_order > 0 {
        let c = params
            .dynamics
            .innov_cov
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite("factor innovation covariance"))?
            .l();
        let c_inv = c
            .clone()
            .try_inverse()
            .ok_or(Error::Singular("factor innovation covariance"))?;
        for a in &mut params.dynamics.coefs {
            *a = &c_inv * &*a * &c;
        }
        params.loadings = &params.loadings * &c;
    }
    params.dynamics.innov_cov = Mat::identity(r, r);
    Ok(params)
}

/// Dynamic factor model fitted by EM on a possibly incomplete panel.
pub fn em_dfm(
    panel: &Panel,
    r: usize,
    p: usize,
    max_iter: usize,
    tol: f64,
) -> Result<(StateSpaceModel, FactorEstimate)> {
    let structure = DfmStructure {
        factors: r,
        var_order: p,
        qd_rho: vec![0.0; panel.ncols()],
        error_states: Vec::new(),
    };
    let init = initial_params(&structure, panel)?;
    let opts = EmOptions {
        max_iter,
        tol,
        ..Default::default()
    };
    let fit = em_fit(&structure, init, panel.values(), panel.mask(), &opts)?;
    let est = fit.to_factor_estimate()?;
    Ok((fit.model, est))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_fn(r, c, |_, _| StandardNormal.sample(rng))
    }

    fn small_model(rng: &mut ChaCha8Rng, n: usize, r: usize) -> StateSpaceModel {
        let l = randn(rng, n, r);
        let var = VarDynamics {
            coefs: vec![Mat::identity(r, r) * 0.6],
            innov_cov: Mat::identity(r, r),
        };
        let noise: Vec<f64> = (0..n).map(|i| 0.3 + 0.1 * i as f64).collect();
        StateSpaceModel::factor_model(&l, &noise, &var).unwrap()
    }

    #[test]
    fn fully_missing_period_only_propagates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = small_model(&mut rng, 4, 2);
        let x = randn(&mut rng, 5, 4);
        let mut mask = ObservationMask::from_element(5, 4, true);
        for i in 0..4 {
            mask[(2, i)] = false;
        }
        let f = kalman_filter_masked(&model, &x, &mask).unwrap();
        assert_eq!(f.filtered_means[2], f.predicted_means[2]);
        assert_eq!(f.filtered_covs[2], f.predicted_covs[2]);
        assert_eq!(f.period_loglik[2], 0.0);
    }

    #[test]
    fn smoother_boundaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = small_model(&mut rng, 3, 1);
        let x = randn(&mut rng, 1, 3);
        let s = smooth_complete(&model, &x).unwrap();
        let f = kalman_filter_masked(&model, &x, &ObservationMask::from_element(1, 3, true)).unwrap();
        assert_eq!(s.means[0], f.filtered_means[0]);
        let x = randn(&mut rng, 10, 3);
        let s = smooth_complete(&model, &x).unwrap();
        let f = kalman_filter_masked(&model, &x, &ObservationMask::from_element(10, 3, true)).unwrap();
        assert_eq!(s.means[9], f.filtered_means[9]);
        assert_eq!(s.covs[9], f.filtered_covs[9]);
    }

    #[test]
    fn smoothed_covariance_below_filtered() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = small_model(&mut rng, 3, 2);
        let x = randn(&mut rng, 15, 3);
        let mut mask = ObservationMask::from_element(15, 3, true);
        mask[(4, 1)] = false;
        mask[(7, 0)] = false;
        let f = kalman_filter_masked(&model, &x, &mask).unwrap();
        let s = smooth_from_filter(&model, &f).unwrap();
        for t in 0..15 {
            let diff = &f.filtered_covs[t] - &s.covs[t];
            assert!(linalg::min_eigenvalue(&diff) > -1e-10, "period {t}");
        }
    }

    #[test]
    fn static_model_filter_equals_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let l = randn(&mut rng, 5, 2);
        let sigma = Mat::from_row_slice(2, 2, &[1.5, 0.2, 0.2, 0.7]);
        let noise = vec![0.5, 0.8, 0.3, 1.1, 0.6];
        let var = VarDynamics {
            coefs: vec![Mat::zeros(2, 2)],
            innov_cov: sigma.clone(),
        };
        let model = StateSpaceModel::factor_model(&l, &noise, &var).unwrap();
        let x = randn(&mut rng, 6, 5);
        let f = kalman_filter_masked(&model, &x, &ObservationMask::from_element(6, 5, true)).unwrap();
        for t in 0..6 {
            let proj = factors::project_static(&l, &noise, &sigma, &x.row(t).transpose()).unwrap();
            assert!((f.filtered_means[t].rows(0, 2) - proj).abs().max() < 1e-10);
        }
    }

    #[test]
    fn layout_queries() {
        let layout = StateLayout::factors(2, 2, &[4]);
        assert_eq!(layout.len(), 5);
        assert_eq!(layout.factor_slot(1, 1), Some(3));
        assert_eq!(layout.error_slot(4), Some(4));
        assert_eq!(layout.factor_count(), 2);
        assert!(layout.validate().is_ok());
        let dup = StateLayout {
            slots: vec![StateSlot::Error { series: 0 }, StateSlot::Error { series: 0 }],
        };
        assert!(dup.validate().is_err());
    }

    #[test]
    fn back_out_rho_cases() {
        assert_eq!(back_out_target_rho(0.9, 1.0).unwrap(), 0.9);
        assert!((back_out_target_rho(0.729, 1.0 / 3.0).unwrap() - 0.9).abs() < 1e-12);
        assert!(back_out_target_rho(0.5, 0.2).is_ok());
        assert!(back_out_target_rho(0.5, 0.25).is_ok());
        assert!(back_out_target_rho(1.2, 0.5).is_err());
        assert!(back_out_target_rho(0.5, 0.0).is_err());
        assert!(back_out_target_rho(-0.5, 0.5).is_err());
    }

    #[test]
    fn skip_sampled_ar1_persistence_is_rho_to_the_m() {
        // oracle: simulate an AR(1), fit on every third point, back out
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rho = 0.9;
        let mut u = 0.0;
        let mut path = Vec::with_capacity(300_000);
        for _ in 0..300_000 {
            let e: f64 = StandardNormal.sample(&mut rng);
            u = rho * u + e;
            path.push(u);
        }
        let skip: Vec<f64> = path.iter().step_by(3).copied().collect();
        let rho_hat = linalg::ar1_coef(&skip);
        assert!((rho_hat - 0.729).abs() < 0.01, "{rho_hat}");
        let back = back_out_target_rho(rho_hat, 1.0 / 3.0).unwrap();
        assert!((back - rho).abs() < 0.01, "{back}");
    }

    #[test]
    fn model_validation_catches_bad_dimensions() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut model = small_model(&mut rng, 3, 1);
        model.obs_noise_var.push(1.0);
        assert!(model.validate().is_err());
        let mut model = small_model(&mut rng, 3, 1);
        model.obs_noise_var[0] = 0.0;
        assert!(model.validate().is_err());
    }

    #[test]
    fn method_a_rejects_missing_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inputs = FactorModelInputs {
            loadings: randn(&mut rng, 3, 1),
            noise_var: vec![0.5; 3],
            dynamics: VarDynamics {
                coefs: vec![Mat::identity(1, 1) * 0.5],
                innov_cov: Mat::identity(1, 1),
            },
        };
        let mut mask = ObservationMask::from_element(10, 3, true);
        mask[(3, 1)] = false;
        let panel = Panel::new(randn(&mut rng, 10, 3), mask, vec!["a".into(), "b".into(), "c".into()]).unwrap();
        assert!(build_method_a(&inputs, &[0.3, 0.2, 0.1], &panel).is_err());
    }
}
