//! Masked `T x N` data panels.
//!
//! The mask is the source of truth for missingness. Missing cells hold NaN,
//! but no computation reads them.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::grid::MaskedSeries;
use crate::linalg::Mat;

/// `true` where an entry is observed.
pub type ObservationMask = DMatrix<bool>;

#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    values: Mat,
    mask: ObservationMask,
    means: Vec<f64>,
    scales: Vec<f64>,
    names: Vec<String>,
}

impl Panel {
    /// Build a panel; non-finite values are treated as missing.
    pub fn new(values: Mat, mask: ObservationMask, names: Vec<String>) -> Result<Self> {
        if values.shape() != mask.shape() {
            return Err(Error::Dimension("values and mask shapes differ".into()));
        }
        if names.len() != values.ncols() {
            return Err(Error::Dimension(format!(
                "{} column names for {} columns",
                names.len(),
                values.ncols()
            )));
        }
        let mut values = values;
        let mut mask = mask;
        for j in 0..values.ncols() {
            for i in 0..values.nrows() {
                if !values[(i, j)].is_finite() {
                    mask[(i, j)] = false;
                }
                if !mask[(i, j)] {
                    values[(i, j)] = f64::NAN;
                }
            }
        }
        let n = values.ncols();
        Ok(Self {
            values,
            mask,
            means: vec![0.0; n],
            scales: vec![1.0; n],
            names,
        })
    }

    /// A fully observed panel with generated column names.
    pub fn complete(values: Mat) -> Self {
        let names = (0..values.ncols()).map(|j| format!("x{}", j + 1)).collect();
        let mask = ObservationMask::from_element(values.nrows(), values.ncols(), true);
        Self::new(values, mask, names).expect("shapes agree by construction")
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Mat {
        &self.values
    }

    pub fn mask(&self) -> &ObservationMask {
        &self.mask
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn is_observed(&self, t: usize, i: usize) -> bool {
        self.mask[(t, i)]
    }

    pub fn is_complete(&self) -> bool {
        self.mask.iter().all(|&b| b)
    }

    pub fn column_is_complete(&self, i: usize) -> bool {
        self.mask.column(i).iter().all(|&b| b)
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    /// Indices of columns with no missing entries.
    pub fn complete_columns(&self) -> Vec<usize> {
        (0..self.ncols()).filter(|&i| self.column_is_complete(i)).collect()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn column(&self, i: usize) -> MaskedSeries {
        MaskedSeries {
            values: self.values.column(i).iter().copied().collect(),
            observed: self.mask.column(i).iter().copied().collect(),
        }
    }

    /// Values matrix, failing if any entry is missing.
    pub fn complete_values(&self) -> Result<&Mat> {
        if self.is_complete() {
            Ok(&self.values)
        } else {
            Err(Error::Invalid("panel has missing entries".into()))
        }
    }

    pub fn select_columns(&self, cols: &[usize]) -> Result<Self> {
        if let Some(&bad) = cols.iter().find(|&&c| c >= self.ncols()) {
            return Err(Error::Dimension(format!("column {bad} out of range")));
        }
        let values = self.values.select_columns(cols);
        let mask = self.mask.select_columns(cols);
        Ok(Self {
            values,
            mask,
            means: cols.iter().map(|&c| self.means[c]).collect(),
            scales: cols.iter().map(|&c| self.scales[c]).collect(),
            names: cols.iter().map(|&c| self.names[c].clone()).collect(),
        })
    }

    /// Append a masked series as a new last column.
    pub fn with_column(&self, name: &str, series: &MaskedSeries) -> Result<Self> {
        if series.len() != self.nrows() {
            return Err(Error::Dimension("appended column has wrong length".into()));
        }
        let n = self.ncols();
        let mut values = self.values.clone().insert_column(n, f64::NAN);
        let mut mask = self.mask.clone().insert_column(n, false);
        for s in 0..series.len() {
            if series.observed[s] && series.values[s].is_finite() {
                values[(s, n)] = series.values[s];
                mask[(s, n)] = true;
            }
        }
        let mut means = self.means.clone();
        means.push(0.0);
        let mut scales = self.scales.clone();
        scales.push(1.0);
        let mut names = self.names.clone();
        names.push(name.to_string());
        Ok(Self {
            values,
            mask,
            means,
            scales,
            names,
        })
    }

    /// Replace a column's mask, hiding entries that become unobserved.
    pub fn with_mask_column(&self, i: usize, observed: &[bool]) -> Result<Self> {
        if observed.len() != self.nrows() {
            return Err(Error::Dimension("mask column has wrong length".into()));
        }
        let mut out = self.clone();
        for (s, &keep) in observed.iter().enumerate() {
            if !keep {
                out.mask[(s, i)] = false;
                out.values[(s, i)] = f64::NAN;
            } else if !self.mask[(s, i)] {
                return Err(Error::Invalid(format!(
                    "cannot reveal missing entry ({s}, {i})"
                )));
            }
        }
        Ok(out)
    }

    /// Overwrite entries with `fill` wherever the mask is false; the mask is
    /// kept so provenance survives.
    pub fn filled_values(&self, fill: &Mat) -> Result<Mat> {
        if fill.shape() != self.values.shape() {
            return Err(Error::Dimension("fill matrix has wrong shape".into()));
        }
        let mut out = self.values.clone();
        for j in 0..self.ncols() {
            for i in 0..self.nrows() {
                if !self.mask[(i, j)] {
                    out[(i, j)] = fill[(i, j)];
                }
            }
        }
        Ok(out)
    }

    /// Demean and scale every column using its observed entries only.
    ///
    /// The moments are stored so [`unstandardize`](Self::unstandardize)
    /// restores the original units. Standardizing an already standardized
    /// panel composes the moments.
    pub fn standardize(&self) -> Result<Self> {
        let mut out = self.clone();
        for j in 0..self.ncols() {
            let obs: Vec<f64> = (0..self.nrows())
                .filter(|&i| self.mask[(i, j)])
                .map(|i| self.values[(i, j)])
                .collect();
            if obs.len() < 2 {
                return Err(Error::Invalid(format!(
                    "column {:?} has fewer than two observed entries",
                    self.names[j]
                )));
            }
            let n = obs.len() as f64;
            let mean = obs.iter().sum::<f64>() / n;
            let var = obs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let sd = var.sqrt();
            if !(sd > 0.0) || !sd.is_finite() {
                return Err(Error::Invalid(format!(
                    "column {:?} is constant on its observed entries",
                    self.names[j]
                )));
            }
            for i in 0..self.nrows() {
                if self.mask[(i, j)] {
                    out.values[(i, j)] = (self.values[(i, j)] - mean) / sd;
                }
            }
            out.means[j] = self.means[j] + self.scales[j] * mean;
            out.scales[j] = self.scales[j] * sd;
        }
        Ok(out)
    }

    /// Undo standardization on observed entries.
    pub fn unstandardize(&self) -> Self {
        let mut out = self.clone();
        for j in 0..self.ncols() {
            for i in 0..self.nrows() {
                if self.mask[(i, j)] {
                    out.values[(i, j)] = self.values[(i, j)] * self.scales[j] + self.means[j];
                }
            }
            out.means[j] = 0.0;
            out.scales[j] = 1.0;
        }
        out
    }

    /// Map a standardized value of column `j` back to original units.
    pub fn to_original_units(&self, j: usize, value: f64) -> f64 {
        value * self.scales[j] + self.means[j]
    }
}
