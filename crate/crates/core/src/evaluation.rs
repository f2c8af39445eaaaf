//! Counterfactual masking experiments and their MSE scorecards.
//!
//! A fully observed target is masked to a low-frequency release pattern,
//! each method imputes the hidden values, and errors are scored on the
//! hidden entries only. Imputation is not prediction: a method can have a
//! low MSE and still understate the variability of the series, so bias and
//! the standard deviation of the imputed values are reported alongside.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factors;
use crate::imputers::{self, ImputationResult, ImputeMethod, RhoSearch, TpStarOptions};
use crate::linalg::Mat;
use crate::panel::Panel;
use crate::simulation::replication_rng;
use crate::state_space::EmOptions;

/// Which sub-periods of the target stay observed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MaskPattern {
    /// Monthly data keeping the listed calendar months (1 to 12); row 0 is
    /// month `first_month`. Every quarter must keep at least one month.
    KeepMonths { months: Vec<u32>, first_month: u32 },
    /// Keep the last of every `m` consecutive sub-periods.
    KeepLast { m: usize },
    Custom { observed: Vec<bool> },
}

impl MaskPattern {
    pub fn observed(&self, len: usize) -> Result<Vec<bool>> {
        match self {
            MaskPattern::KeepMonths { months, first_month } => {
                if !(1..=12).contains(first_month) || months.iter().any(|m| !(1..=12).contains(m)) {
                    return Err(Error::Invalid(format!("months {months:?} must lie in 1..=12")));
                }
                for q in 0..4 {
                    if !months.iter().any(|m| (m - 1) / 3 == q) {
                        return Err(Error::Invalid(format!(
                            "months {months:?} keep nothing in quarter {}",
                            q + 1
                        )));
                    }
                }
                let month_of = |s: usize| ((*first_month as usize - 1 + s) % 12 + 1) as u32;
                Ok((0..len).map(|s| months.contains(&month_of(s))).collect())
            }
            MaskPattern::KeepLast { m } => {
                if *m == 0 {
                    return Err(Error::Invalid("period length must be positive".into()));
                }
                Ok((0..len).map(|s| s % m == m - 1).collect())
            }
            MaskPattern::Custom { observed } => {
                if observed.len() != len {
                    return Err(Error::Dimension(format!(
                        "custom mask has {} entries for {len} periods",
                        observed.len()
                    )));
                }
                if !observed.iter().any(|&b| b) {
                    return Err(Error::Invalid("custom mask keeps nothing".into()));
                }
                Ok(observed.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualSpec {
    /// Target column name.
    pub target: String,
    pub mask: MaskPattern,
    pub methods: Vec<ImputeMethod>,
    /// Row indices where scoring windows start; window `k` runs from
    /// `breaks[k-1]` (or 0) up to `breaks[k]` (or the end).
    pub breaks: Vec<usize>,
    pub r: usize,
    /// VAR order of the state-space methods.
    pub var_order: usize,
    /// Add a constant to the static fill regression.
    pub intercept: bool,
    pub tp_star: TpStarOptions,
    pub em: EmOptions,
    /// Standardize every column with the moments of its observed entries
    /// after masking; scores are then in standardized units.
    pub standardize: bool,
}

impl CounterfactualSpec {
    pub fn new(target: &str, mask: MaskPattern, methods: Vec<ImputeMethod>, r: usize) -> Self {
        Self {
            target: target.to_string(),
            mask,
            methods,
            breaks: Vec::new(),
            r,
            var_order: 1,
            intercept: true,
            tp_star: TpStarOptions::default(),
            em: EmOptions::default(),
            standardize: true,
        }
    }
}

/// Score over one window of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowScore {
    pub start: usize,
    pub end: usize,
    /// Masked entries inside the window.
    pub count: usize,
    /// `None` when the window holds no masked entry.
    pub mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsampleTable {
    pub windows: Vec<WindowScore>,
    pub full: WindowScore,
}

impl SubsampleTable {
    pub fn empty_windows(&self) -> Vec<usize> {
        (0..self.windows.len())
            .filter(|&k| self.windows[k].count == 0)
            .collect()
    }
}

/// MSE of `imputed` against `truth` over `masked` indices, per window and
/// for the full sample.
pub fn mse_subsamples(truth: &[f64], imputed: &[f64], masked: &[usize], breaks: &[usize]) -> Result<SubsampleTable> {
    let len = truth.len();
    if imputed.len() != len {
        return Err(Error::Dimension("truth and imputed series differ in length".into()));
    }
    if let Some(&s) = masked.iter().find(|&&s| s >= len) {
        return Err(Error::Dimension(format!("masked index {s} out of range")));
    }
    if breaks.windows(2).any(|w| w[0] >= w[1]) || breaks.iter().any(|&b| b == 0 || b >= len) {
        return Err(Error::Invalid(format!(
            "window breaks {breaks:?} must increase strictly inside 1..{len}"
        )));
    }
    let score = |start: usize, end: usize| {
        let errs: Vec<f64> = masked
            .iter()
            .filter(|&&s| s >= start && s < end)
            .map(|&s| (imputed[s] - truth[s]).powi(2))
            .collect();
        WindowScore {
            start,
            end,
            count: errs.len(),
            mse: (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64),
        }
    };
    let mut edges = vec![0];
    edges.extend_from_slice(breaks);
    edges.push(len);
    Ok(SubsampleTable {
        windows: edges.windows(2).map(|w| score(w[0], w[1])).collect(),
        full: score(0, len),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScores {
    pub subsamples: SubsampleTable,
    /// Mean of imputed minus true values at masked entries.
    pub bias: f64,
    pub imputed_sd: f64,
    pub truth_sd: f64,
}

impl MethodScores {
    pub fn mse(&self) -> f64 {
        self.subsamples.full.mse.unwrap_or(f64::NAN)
    }

    pub fn sd_ratio(&self) -> f64 {
        self.imputed_sd / self.truth_sd
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodOutcome {
    pub method: ImputeMethod,
    /// The imputation and its scores, or the failure message.
    pub outcome: std::result::Result<(ImputationResult, MethodScores), String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualOutcome {
    pub target: String,
    /// True target values, standardized if the spec asks for it.
    pub truth: Vec<f64>,
    pub masked: Vec<usize>,
    pub breaks: Vec<usize>,
    pub methods: Vec<MethodOutcome>,
}

fn sd(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn score_method(truth: &[f64], result: &ImputationResult, masked: &[usize], breaks: &[usize]) -> Result<MethodScores> {
    let subsamples = mse_subsamples(truth, &result.series, masked, breaks)?;
    let imputed: Vec<f64> = masked.iter().map(|&s| result.series[s]).collect();
    let true_vals: Vec<f64> = masked.iter().map(|&s| truth[s]).collect();
    let bias = imputed.iter().zip(&true_vals).map(|(a, b)| a - b).sum::<f64>() / masked.len() as f64;
    Ok(MethodScores {
        subsamples,
        bias,
        imputed_sd: sd(&imputed),
        truth_sd: sd(&true_vals),
    })
}

/// Mask the target, impute it with every method and score the masked
/// entries. The other columns must be complete; the single-equation methods
/// use their principal components as factors. A failing method is recorded
/// and the others still run.
pub fn run_counterfactual(panel: &Panel, spec: &CounterfactualSpec) -> Result<CounterfactualOutcome> {
    let target = panel
        .column_index(&spec.target)
        .ok_or_else(|| Error::Invalid(format!("no column named {:?}", spec.target)))?;
    if !panel.column_is_complete(target) {
        return Err(Error::Invalid(format!(
            "target {:?} must be fully observed to serve as ground truth",
            spec.target
        )));
    }
    if spec.methods.is_empty() {
        return Err(Error::Invalid("no imputation methods requested".into()));
    }
    let observed = spec.mask.observed(panel.nrows())?;
    let masked: Vec<usize> = (0..observed.len()).filter(|&s| !observed[s]).collect();
    if masked.is_empty() {
        return Err(Error::Invalid("mask hides no entries".into()));
    }
    let masked_panel = panel.with_mask_column(target, &observed)?;
    let work = if spec.standardize {
        masked_panel.standardize()?
    } else {
        masked_panel
    };
    let (mean, scale) = (work.means()[target], work.scales()[target]);
    let truth: Vec<f64> = panel
        .column(target)
        .values
        .iter()
        .map(|v| (v - mean) / scale)
        .collect();

    let others: Vec<usize> = (0..panel.ncols()).filter(|&i| i != target).collect();
    let predictors = work.select_columns(&others)?;
    let factors = factors::estimate_pc(predictors.complete_values()?, spec.r)?.factors;
    let settings = imputers::MethodSettings {
        r: spec.r,
        var_order: spec.var_order,
        intercept: spec.intercept,
        chow_lin: RhoSearch::Grid,
        tp_star: spec.tp_star,
        em: spec.em,
    };

    let methods = spec
        .methods
        .par_iter()
        .map(|&method| {
            let outcome = imputers::impute_with(method, &work, target, &factors, &settings)
                .and_then(|res| {
                    let scores = score_method(&truth, &res, &masked, &spec.breaks)?;
                    Ok((res, scores))
                })
                .map_err(|e| e.to_string());
            MethodOutcome { method, outcome }
        })
        .collect();
    Ok(CounterfactualOutcome {
        target: spec.target.clone(),
        truth,
        masked,
        breaks: spec.breaks.clone(),
        methods,
    })
}

impl CounterfactualOutcome {
    pub fn scores(&self, method: ImputeMethod) -> Option<&MethodScores> {
        self.methods
            .iter()
            .find(|m| m.method == method)
            .and_then(|m| m.outcome.as_ref().ok())
            .map(|(_, s)| s)
    }

    /// Window rows, method columns; the last row is the full sample. Empty
    /// windows and failed methods leave blank cells.
    pub fn write_scores_csv<W: Write>(&self, out: W, labels: Option<&[String]>) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = ["window", "start", "end", "count"].map(String::from).to_vec();
        header.extend(self.methods.iter().map(|m| m.method.label().to_string()));
        w.write_record(&header)?;
        let n_windows = self.breaks.len() + 1;
        for k in 0..=n_windows {
            let full = k == n_windows;
            let pick = |s: &MethodScores| if full { s.subsamples.full.clone() } else { s.subsamples.windows[k].clone() };
            let reference = self
                .methods
                .iter()
                .find_map(|m| m.outcome.as_ref().ok().map(|(_, s)| pick(s)));
            let name = if full {
                "full".to_string()
            } else {
                labels.and_then(|l| l.get(k).cloned()).unwrap_or_else(|| format!("w{}", k + 1))
            };
            let (start, end, count) = match &reference {
                Some(ws) => (ws.start.to_string(), ws.end.to_string(), ws.count.to_string()),
                None => Default::default(),
            };
            let mut row = vec![name, start, end, count];
            for m in &self.methods {
                row.push(match &m.outcome {
                    Ok((_, s)) => pick(s).mse.map(|v| v.to_string()).unwrap_or_default(),
                    Err(_) => String::new(),
                });
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// One row per method with headline MSE, bias, dispersion and fit
    /// diagnostics.
    pub fn write_summary_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "method", "mse", "bias", "imputed_sd", "truth_sd", "sd_ratio", "rho", "iterations", "converged", "error",
        ])?;
        for m in &self.methods {
            let row: Vec<String> = match &m.outcome {
                Ok((res, s)) => vec![
                    m.method.label().into(),
                    s.mse().to_string(),
                    s.bias.to_string(),
                    s.imputed_sd.to_string(),
                    s.truth_sd.to_string(),
                    s.sd_ratio().to_string(),
                    res.params.rho.map(|v| v.to_string()).unwrap_or_default(),
                    res.params.iterations.to_string(),
                    res.params.converged.to_string(),
                    String::new(),
                ],
                Err(e) => {
                    let mut row = vec![m.method.label().to_string()];
                    row.extend(std::iter::repeat_n(String::new(), 8));
                    row.push(e.clone());
                    row
                }
            };
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Tidy long format: period, method, value, provenance, truth.
    pub fn write_series_csv<W: Write>(&self, out: W, dates: Option<&[String]>) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["period", "method", "value", "provenance", "truth"])?;
        for m in &self.methods {
            let Ok((res, _)) = &m.outcome else { continue };
            for (s, value) in res.series.iter().enumerate() {
                let period = dates.and_then(|d| d.get(s).cloned()).unwrap_or_else(|| s.to_string());
                w.write_record([
                    period,
                    m.method.label().to_string(),
                    value.to_string(),
                    res.provenance[s].label().to_string(),
                    self.truth[s].to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// A monthly panel whose target has a persistent idiosyncratic component,
/// in the spirit of a survey series released quarterly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsStyleDesign {
    pub t: usize,
    /// Predictor columns.
    pub n: usize,
    /// Diagonal VAR(1) coefficients of the factors; the count sets `r`.
    pub factor_ar: Vec<f64>,
    /// Variance share of the common component in each predictor.
    pub predictor_common_share: f64,
    /// Variance share of the common component in the target.
    pub target_common_share: f64,
    /// AR(1) coefficient of the target's idiosyncratic error.
    pub rho_y: f64,
    /// AR(1) coefficient of the predictors' idiosyncratic errors.
    pub rho_x: f64,
}

impl Default for CsStyleDesign {
    fn default() -> Self {
        Self {
            t: 504,
            n: 40,
            factor_ar: vec![0.8, 0.5],
            predictor_common_share: 0.5,
            target_common_share: 0.5,
            rho_y: 0.85,
            rho_x: 0.3,
        }
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn ar1_draw<R: Rng + ?Sized>(rng: &mut R, len: usize, rho: f64, var: f64) -> Vec<f64> {
    let sd = (var * (1.0 - rho * rho)).sqrt();
    let mut e = var.sqrt() * normal(rng);
    (0..len)
        .map(|s| {
            if s > 0 {
                e = rho * e + sd * normal(rng);
            }
            e
        })
        .collect()
}

/// Draw a complete panel: `n` predictors `x1..xn` and the target `y` as the
/// last column. Factors have unit variance; every series has unit variance.
pub fn simulate_cs_style<R: Rng + ?Sized>(design: &CsStyleDesign, rng: &mut R) -> Result<Panel> {
    let r = design.factor_ar.len();
    let (t, n) = (design.t, design.n);
    let valid = |s: f64| (0.0..=1.0).contains(&s);
    if r == 0 || n < r || t < 10 || !valid(design.predictor_common_share) || !valid(design.target_common_share) {
        return Err(Error::Invalid("inconsistent counterfactual design".into()));
    }
    if design.factor_ar.iter().chain([&design.rho_y, &design.rho_x]).any(|a| !(a.abs() < 1.0)) {
        return Err(Error::Invalid("AR coefficients must lie inside (-1, 1)".into()));
    }
    let factors: Vec<Vec<f64>> = design.factor_ar.iter().map(|&a| ar1_draw(rng, t, a, 1.0)).collect();
    let mut values = Mat::zeros(t, n + 1);
    for col in 0..=n {
        let (share, rho) = if col == n {
            (design.target_common_share, design.rho_y)
        } else {
            (design.predictor_common_share, design.rho_x)
        };
        let raw: Vec<f64> = (0..r).map(|_| normal(rng)).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        let loading: Vec<f64> = raw.iter().map(|v| v / norm * share.sqrt()).collect();
        let e = ar1_draw(rng, t, rho, 1.0 - share);
        for s in 0..t {
            values[(s, col)] = e[s] + (0..r).map(|j| loading[j] * factors[j][s]).sum::<f64>();
        }
    }
    let mut names: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
    names.push("y".into());
    Panel::new(values, crate::panel::ObservationMask::from_element(t, n + 1, true), names)
}

/// Full-sample MSE of each method over `draws` simulated panels, in the
/// order of `spec.methods`. Draw `k` uses replication stream `k` of `seed`.
/// A failed method leaves NaN for that draw.
pub fn run_cs_style_experiment(
    design: &CsStyleDesign,
    spec: &CounterfactualSpec,
    draws: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    (0..draws)
        .into_par_iter()
        .map(|k| {
            let panel = simulate_cs_style(design, &mut replication_rng(seed, k as u64))?;
            let out = run_counterfactual(&panel, spec)?;
            Ok(spec
                .methods
                .iter()
                .map(|&m| out.scores(m).map_or(f64::NAN, MethodScores::mse))
                .collect())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keep_months_matches_release_pattern() {
        let mask = MaskPattern::KeepMonths {
            months: vec![2, 5, 8, 11],
            first_month: 1,
        };
        let obs = mask.observed(24).unwrap();
        let kept: Vec<usize> = (0..24).filter(|&s| obs[s]).collect();
        assert_eq!(kept, vec![1, 4, 7, 10, 13, 16, 19, 22]);
        let bad = MaskPattern::KeepMonths {
            months: vec![1, 2, 3],
            first_month: 1,
        };
        assert!(bad.observed(12).is_err());
    }

    #[test]
    fn hand_computed_scores() {
        let truth = [1.0, 2.0, 3.0, 4.0];
        let imputed = [1.0, 2.5, 3.0, 2.0];
        let t = mse_subsamples(&truth, &imputed, &[1, 3], &[2]).unwrap();
        assert_eq!(t.windows[0].mse, Some(0.25));
        assert_eq!(t.windows[1].mse, Some(4.0));
        assert_eq!(t.full.mse, Some(2.125));
        let same = mse_subsamples(&truth, &truth, &[1, 3], &[]).unwrap();
        assert_eq!(same.full.mse, Some(0.0));
        assert_eq!(same.windows[0], same.full);
        let empty = mse_subsamples(&truth, &imputed, &[3], &[2]).unwrap();
        assert_eq!(empty.empty_windows(), vec![0]);
        assert!(mse_subsamples(&truth, &imputed, &[3], &[2, 2]).is_err());
    }
}
