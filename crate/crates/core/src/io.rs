//! File formats: panel CSV, factor CSV with a JSON sidecar, tidy imputation
//! CSV, and JSON dumps of state-space models.
//!
//! A panel CSV has a header row. The first column labels the rows (dates as
//! `YYYY-MM-DD` or `YYYY-MM`, or any text); every other column is numeric.
//! Empty cells and `NA`, `NaN`, `.` mark missing values.

use std::io::{Read, Write};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factors::{Diagnostics, FactorEstimate, FactorMethod};
use crate::imputers::ImputationResult;
use crate::linalg::{serde_rows, serde_rows_opt, Mat};
use crate::panel::{ObservationMask, Panel};
use crate::state_space::StateSpaceModel;

#[derive(Debug, Clone, PartialEq)]
pub struct PanelFile {
    pub panel: Panel,
    /// First-column labels as written.
    pub row_labels: Vec<String>,
    /// Parsed labels when every row label is a date.
    pub dates: Option<Vec<NaiveDate>>,
}

/// Parse a date written as `YYYY-MM-DD` or `YYYY-MM` (first of the month).
pub fn parse_date(s: &str) -> Option<NaiveDate> {
    let s = s.trim();
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .or_else(|| NaiveDate::parse_from_str(&format!("{s}-01"), "%Y-%m-%d").ok())
}

fn is_missing(cell: &str) -> bool {
    matches!(cell, "" | "NA" | "na" | "NaN" | "nan" | "." | "N/A")
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

pub fn read_panel_csv<R: Read>(input: R) -> Result<PanelFile> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let header = reader.headers().map_err(csv_error)?.clone();
    if header.len() < 2 {
        return Err(Error::Parse {
            line: 1,
            message: "need a label column and at least one data column".into(),
        });
    }
    let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    for (j, name) in names.iter().enumerate() {
        if name.is_empty() {
            return Err(Error::Parse {
                line: 1,
                message: format!("data column {} has no name", j + 1),
            });
        }
        if names[..j].contains(name) {
            return Err(Error::Parse {
                line: 1,
                message: format!("duplicate column {name:?}"),
            });
        }
    }
    let n = names.len();
    let mut labels = Vec::new();
    let mut cells: Vec<Option<f64>> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        labels.push(record[0].to_string());
        for (j, cell) in record.iter().skip(1).enumerate() {
            if is_missing(cell) {
                cells.push(None);
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                line,
                message: format!("column {:?}: {cell:?} is not a number", names[j]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("column {:?}: non-finite value", names[j]),
                });
            }
            cells.push(Some(v));
        }
    }
    if labels.is_empty() {
        return Err(Error::Parse {
            line: 2,
            message: "no data rows".into(),
        });
    }
    let t = labels.len();
    let values = Mat::from_fn(t, n, |s, j| cells[s * n + j].unwrap_or(f64::NAN));
    let mask = ObservationMask::from_fn(t, n, |s, j| cells[s * n + j].is_some());
    let dates: Option<Vec<NaiveDate>> = labels.iter().map(|l| parse_date(l)).collect();
    Ok(PanelFile {
        panel: Panel::new(values, mask, names)?,
        row_labels: labels,
        dates,
    })
}

pub fn parse_panel_csv(text: &str) -> Result<PanelFile> {
    read_panel_csv(text.as_bytes())
}

/// Write a panel with the given row labels; missing entries are empty.
pub fn write_panel_csv<W: Write>(out: W, panel: &Panel, row_labels: &[String], label_header: &str) -> Result<()> {
    if row_labels.len() != panel.nrows() {
        return Err(Error::Dimension("one row label per period required".into()));
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![label_header.to_string()];
    header.extend(panel.names().iter().cloned());
    w.write_record(&header)?;
    for (s, label) in row_labels.iter().enumerate() {
        let mut row = vec![label.clone()];
        for j in 0..panel.ncols() {
            row.push(if panel.is_observed(s, j) {
                panel.values()[(s, j)].to_string()
            } else {
                String::new()
            });
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Everything about a factor estimate except the factor values, which go to
/// the accompanying CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSidecar {
    pub method: FactorMethod,
    pub factor_count: usize,
    pub periods: usize,
    pub series: Vec<String>,
    #[serde(with = "serde_rows")]
    pub loadings: Mat,
    pub idio_var: Vec<f64>,
    #[serde(with = "serde_rows")]
    pub factor_cov: Mat,
    #[serde(default)]
    pub ar_coefs: Option<Vec<f64>>,
    #[serde(default, with = "serde_rows::vec")]
    pub var_coefs: Vec<Mat>,
    #[serde(default, with = "serde_rows_opt")]
    pub var_innov_cov: Option<Mat>,
    pub diagnostics: Diagnostics,
}

impl FactorSidecar {
    pub fn new(est: &FactorEstimate, series: &[String]) -> Self {
        Self {
            method: est.method,
            factor_count: est.rank(),
            periods: est.factors.nrows(),
            series: series.to_vec(),
            loadings: est.loadings.clone(),
            idio_var: est.idio_var.clone(),
            factor_cov: est.factor_cov.clone(),
            ar_coefs: est.ar_coefs.clone(),
            var_coefs: est.dynamics.as_ref().map(|d| d.coefs.clone()).unwrap_or_default(),
            var_innov_cov: est.dynamics.as_ref().map(|d| d.innov_cov.clone()),
            diagnostics: est.diagnostics.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (n, r) = (self.series.len(), self.factor_count);
        if self.loadings.shape() != (n, r) || self.idio_var.len() != n || self.factor_cov.shape() != (r, r) {
            return Err(Error::Dimension("factor sidecar shapes disagree".into()));
        }
        if self.var_coefs.iter().any(|a| a.shape() != (r, r))
            || self.var_innov_cov.as_ref().is_some_and(|q| q.shape() != (r, r))
        {
            return Err(Error::Dimension("factor sidecar VAR shapes disagree".into()));
        }
        Ok(())
    }
}

/// Factors as CSV (`period,F1,...,Fr`) plus the JSON sidecar.
pub fn write_factors<W1: Write, W2: Write>(
    csv_out: W1,
    json_out: W2,
    est: &FactorEstimate,
    series: &[String],
    row_labels: &[String],
) -> Result<()> {
    if row_labels.len() != est.factors.nrows() {
        return Err(Error::Dimension("one row label per period required".into()));
    }
    let mut w = csv::Writer::from_writer(csv_out);
    let mut header = vec!["period".to_string()];
    header.extend((1..=est.rank()).map(|j| format!("F{j}")));
    w.write_record(&header)?;
    for (s, label) in row_labels.iter().enumerate() {
        let mut row = vec![label.clone()];
        row.extend(est.factors.row(s).iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    serde_json::to_writer_pretty(json_out, &FactorSidecar::new(est, series))?;
    Ok(())
}

/// Read a factor CSV back: row labels and the `T x r` matrix.
pub fn read_factors_csv<R: Read>(input: R) -> Result<(Vec<String>, Mat)> {
    let file = read_panel_csv(input)?;
    if !file.panel.is_complete() {
        return Err(Error::Invalid("factor file has missing entries".into()));
    }
    Ok((file.row_labels, file.panel.values().clone()))
}

pub fn read_factor_sidecar(text: &str) -> Result<FactorSidecar> {
    let sidecar: FactorSidecar = serde_json::from_str(text)?;
    sidecar.validate()?;
    Ok(sidecar)
}

/// Tidy long format: `period,method,value,provenance`.
pub fn write_imputations_csv<W: Write>(out: W, results: &[ImputationResult], row_labels: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["period", "method", "value", "provenance"])?;
    for res in results {
        if res.series.len() != row_labels.len() {
            return Err(Error::Dimension("one row label per period required".into()));
        }
        for (s, v) in res.series.iter().enumerate() {
            w.write_record([
                row_labels[s].as_str(),
                res.method.label(),
                &v.to_string(),
                res.provenance[s].label(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Wide format: one column per method.
pub fn write_comparison_csv<W: Write>(out: W, results: &[ImputationResult], row_labels: &[String]) -> Result<()> {
    if results.iter().any(|r| r.series.len() != row_labels.len()) {
        return Err(Error::Dimension("one row label per period required".into()));
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["period".to_string(), "observed".to_string()];
    header.extend(results.iter().map(|r| r.method.label().to_string()));
    w.write_record(&header)?;
    for (s, label) in row_labels.iter().enumerate() {
        let observed = results
            .first()
            .is_some_and(|r| r.provenance[s] == crate::imputers::Provenance::Observed);
        let mut row = vec![label.clone(), observed.to_string()];
        row.extend(results.iter().map(|r| r.series[s].to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn model_to_json(model: &StateSpaceModel) -> Result<String> {
    Ok(serde_json::to_string_pretty(model)?)
}

/// Restore a model dump, rejecting inconsistent shapes.
pub fn model_from_json(text: &str) -> Result<StateSpaceModel> {
    let model: StateSpaceModel = serde_json::from_str(text)?;
    model.validate()?;
    Ok(model)
}
