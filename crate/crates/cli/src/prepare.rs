//! Turning a raw panel CSV into the panel the estimators see.

use std::collections::BTreeMap;

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use mfimpute::factors;
use mfimpute::imputers::impute_tp_series;
use mfimpute::linalg::{self, Mat, Vector};
use mfimpute::{ObservationMask, Panel};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Detrend {
    #[default]
    None,
    Linear,
    Quadratic,
    /// First difference of the natural log.
    LogDiff,
}

/// What to do with rows where some predictor is missing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum RaggedEdge {
    /// Drop leading and trailing rows with a missing predictor.
    #[default]
    Truncate,
    /// Keep every row and fill missing predictor entries by static
    /// regression on factors of the complete columns.
    Precomplete,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareOptions {
    /// Applied to every predictor without its own entry in `columns`.
    pub detrend: Detrend,
    pub columns: BTreeMap<String, Detrend>,
    /// Lagged copies of each predictor to append.
    pub lags: usize,
}

fn interior_gap(observed: &[bool]) -> Option<usize> {
    let first = observed.iter().position(|&o| o)?;
    let last = observed.iter().rposition(|&o| o)?;
    (first..=last).find(|&s| !observed[s])
}

/// Detrend one column. Returns the new values and mask; entries that cannot
/// be computed (the first row of a log difference) become missing.
pub fn detrend_column(values: &[f64], observed: &[bool], kind: Detrend) -> Result<(Vec<f64>, Vec<bool>)> {
    if kind == Detrend::None {
        return Ok((values.to_vec(), observed.to_vec()));
    }
    if let Some(s) = interior_gap(observed) {
        bail!("row {}: missing value inside the observed span cannot be detrended", s + 1);
    }
    let len = values.len();
    match kind {
        Detrend::None => unreachable!(),
        Detrend::Linear | Detrend::Quadratic => {
            let degree = if kind == Detrend::Linear { 1 } else { 2 };
            let rows: Vec<usize> = (0..len).filter(|&s| observed[s]).collect();
            if rows.len() < degree + 2 {
                bail!("too few observations for a degree-{degree} trend");
            }
            // time rescaled to [0, 1] keeps the design well conditioned
            let scale = (len.max(2) - 1) as f64;
            let x = Mat::from_fn(rows.len(), degree + 1, |i, k| (rows[i] as f64 / scale).powi(k as i32));
            let y = Vector::from_iterator(rows.len(), rows.iter().map(|&s| values[s]));
            let beta = linalg::ols(&x, &y).context("trend regression")?;
            let mut out = vec![f64::NAN; len];
            for (i, &s) in rows.iter().enumerate() {
                out[s] = values[s] - (x.row(i) * &beta)[0];
            }
            Ok((out, observed.to_vec()))
        }
        Detrend::LogDiff => {
            let mut out = vec![f64::NAN; len];
            let mut mask = vec![false; len];
            for s in 0..len {
                if observed[s] && values[s] <= 0.0 {
                    bail!("row {}: log of non-positive value {}", s + 1, values[s]);
                }
                if s > 0 && observed[s] && observed[s - 1] {
                    out[s] = values[s].ln() - values[s - 1].ln();
                    mask[s] = true;
                }
            }
            Ok((out, mask))
        }
    }
}

fn build_panel(columns: Vec<(String, Vec<f64>, Vec<bool>)>, t: usize) -> Result<Panel> {
    let n = columns.len();
    let values = Mat::from_fn(t, n, |s, j| columns[j].1[s]);
    let mask = ObservationMask::from_fn(t, n, |s, j| columns[j].2[s] && columns[j].1[s].is_finite());
    let names = columns.into_iter().map(|c| c.0).collect();
    Ok(Panel::new(values, mask, names)?)
}

/// Detrend the predictors and append `lags` lagged copies of each
/// (`<name>_lag<l>`, first `l` rows missing). Columns listed in `keep` pass
/// through untouched and are not lagged.
pub fn prepare_panel(panel: &Panel, opts: &PrepareOptions, keep: &[usize]) -> Result<Panel> {
    for name in opts.columns.keys() {
        if panel.column_index(name).is_none() {
            bail!("detrend setting for unknown column {name:?}");
        }
    }
    let t = panel.nrows();
    let mut columns = Vec::with_capacity(panel.ncols() * (opts.lags + 1));
    let mut lagged = Vec::new();
    for (j, name) in panel.names().iter().enumerate() {
        let col = panel.column(j);
        if keep.contains(&j) {
            columns.push((name.clone(), col.values, col.observed));
            continue;
        }
        let kind = opts.columns.get(name).copied().unwrap_or(opts.detrend);
        let (values, observed) =
            detrend_column(&col.values, &col.observed, kind).with_context(|| format!("column {name:?}"))?;
        lagged.push(columns.len());
        columns.push((name.clone(), values, observed));
    }
    for l in 1..=opts.lags {
        for &j in &lagged {
            let (name, values, observed) = &columns[j];
            let shifted = (0..t).map(|s| if s >= l { values[s - l] } else { f64::NAN }).collect();
            let mask = (0..t).map(|s| s >= l && observed[s - l]).collect();
            columns.push((format!("{name}_lag{l}"), shifted, mask));
        }
    }
    build_panel(columns, t)
}

/// Fill every incomplete column by static regression on `r` principal
/// components of the complete columns. Observed entries are kept as is.
pub fn precomplete_predictors(panel: &Panel, r: usize) -> Result<Panel> {
    let complete = panel.complete_columns();
    if complete.len() == panel.ncols() {
        return Ok(panel.clone());
    }
    if complete.is_empty() {
        bail!("no fully observed column to estimate factors from");
    }
    if complete.len() < r {
        bail!("{} fully observed columns cannot support {r} factors", complete.len());
    }
    let block = panel.select_columns(&complete)?;
    let f = factors::estimate_pc(block.complete_values()?, r)?.factors;
    let t = panel.nrows();
    let mut columns = Vec::with_capacity(panel.ncols());
    for (j, name) in panel.names().iter().enumerate() {
        let col = panel.column(j);
        if complete.contains(&j) {
            columns.push((name.clone(), col.values, col.observed));
        } else {
            let filled = impute_tp_series(&col, &f, true).with_context(|| format!("pre-completing {name:?}"))?;
            columns.push((name.clone(), filled.series, vec![true; t]));
        }
    }
    build_panel(columns, t)
}

/// Keep rows `start..end`.
pub fn slice_rows(panel: &Panel, start: usize, end: usize) -> Result<Panel> {
    let len = end - start;
    Ok(Panel::new(
        panel.values().rows(start, len).into_owned(),
        panel.mask().rows(start, len).into_owned(),
        panel.names().to_vec(),
    )?)
}

/// Rows `start..end` outside of which some predictor is missing.
pub fn complete_span(panel: &Panel, predictors: &[usize]) -> Option<(usize, usize)> {
    let full = |s: usize| predictors.iter().all(|&j| panel.is_observed(s, j));
    let start = (0..panel.nrows()).find(|&s| full(s))?;
    let end = (0..panel.nrows()).rfind(|&s| full(s))? + 1;
    Some((start, end))
}

/// A prepared panel with its row labels.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub panel: Panel,
    pub labels: Vec<String>,
    /// Index of the first kept input row.
    pub first_row: usize,
}

/// Make the predictor columns complete: truncate the ragged edges, or fill
/// them by static regression. Interior gaps left after truncation are an
/// error.
pub fn handle_ragged(panel: &Panel, labels: &[String], predictors: &[usize], mode: RaggedEdge, r: usize) -> Result<Prepared> {
    match mode {
        RaggedEdge::Truncate => {
            let (start, end) = complete_span(panel, predictors)
                .context("no row has every predictor observed")?;
            let kept = slice_rows(panel, start, end)?;
            if let Some(&j) = predictors.iter().find(|&&j| !kept.column_is_complete(j)) {
                bail!(
                    "predictor {:?} has interior gaps; pre-complete them with the precomplete ragged-edge mode",
                    kept.names()[j]
                );
            }
            Ok(Prepared {
                panel: kept,
                labels: labels[start..end].to_vec(),
                first_row: start,
            })
        }
        RaggedEdge::Precomplete => {
            let others: Vec<usize> = (0..panel.ncols()).filter(|j| !predictors.contains(j)).collect();
            let filled = precomplete_predictors(&panel.select_columns(predictors)?, r)?;
            let mut out = filled;
            for &j in &others {
                out = out.with_column(&panel.names()[j], &panel.column(j))?;
            }
            // restore the input column order
            let order: Vec<usize> = (0..panel.ncols())
                .map(|j| out.column_index(&panel.names()[j]).expect("column kept"))
                .collect();
            Ok(Prepared {
                panel: out.select_columns(&order)?,
                labels: labels.to_vec(),
                first_row: 0,
            })
        }
    }
}
