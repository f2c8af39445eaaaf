//! Mixed-frequency time indexing.
//!
//! A [`TimeGrid`] maps `T_o` low-frequency periods onto `T = sum(m_t)`
//! high-frequency sub-periods. Sub-period `(t, j)` with `j` in `0..m_t` has
//! flat index `offset(t) + j`. Low-frequency values are released in the last
//! sub-period of each period unless a release lag is configured.

use std::fmt;
use std::str::FromStr;

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;

/// How a grid is described before it is built.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GridSpec {
    /// `low_count` periods of `m` sub-periods each.
    Fixed { m: usize, low_count: usize },
    /// Every Monday in `[start, end]`, grouped by calendar month.
    WeeklyMondays { start: NaiveDate, end: NaiveDate },
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GridSpec::Fixed { m, low_count } => write!(f, "fixed:{m}:{low_count}"),
            GridSpec::WeeklyMondays { start, end } => write!(f, "weekly:{start}:{end}"),
        }
    }
}

impl FromStr for GridSpec {
    type Err = Error;

    /// Accepts `fixed:<m>:<low_count>` and `weekly:<YYYY-MM-DD>:<YYYY-MM-DD>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Grid(format!("{msg} in grid spec {s:?}"));
        let mut parts = s.trim().splitn(2, ':');
        let kind = parts.next().unwrap_or_default();
        let rest = parts.next().ok_or_else(|| bad("missing parameters"))?;
        match kind {
            "fixed" => {
                let (m, n) = rest.split_once(':').ok_or_else(|| bad("expected m:count"))?;
                let m = m.trim().parse().map_err(|_| bad("bad sub-period count"))?;
                let low_count = n.trim().parse().map_err(|_| bad("bad period count"))?;
                Ok(GridSpec::Fixed { m, low_count })
            }
            "weekly" => {
                // dates contain '-' only, so the separator is the middle ':'
                let (a, b) = rest.split_once(':').ok_or_else(|| bad("expected start:end"))?;
                let start = NaiveDate::parse_from_str(a.trim(), "%Y-%m-%d")
                    .map_err(|_| bad("bad start date"))?;
                let end = NaiveDate::parse_from_str(b.trim(), "%Y-%m-%d")
                    .map_err(|_| bad("bad end date"))?;
                Ok(GridSpec::WeeklyMondays { start, end })
            }
            _ => Err(bad("unknown grid kind")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    sub_counts: Vec<usize>,
    offsets: Vec<usize>,
    high_count: usize,
    /// Sub-periods counted back from the last one at which the low-frequency
    /// value is released. Zero means the last sub-period.
    release_lag: usize,
    high_labels: Option<Vec<NaiveDate>>,
    low_labels: Option<Vec<NaiveDate>>,
}

impl TimeGrid {
    pub fn from_sub_counts(sub_counts: Vec<usize>) -> Result<Self> {
        if sub_counts.is_empty() {
            return Err(Error::Grid("grid has no low-frequency periods".into()));
        }
        if sub_counts.iter().any(|&m| m == 0) {
            return Err(Error::Grid("every period needs at least one sub-period".into()));
        }
        let mut offsets = Vec::with_capacity(sub_counts.len());
        let mut acc = 0;
        for &m in &sub_counts {
            offsets.push(acc);
            acc += m;
        }
        Ok(Self {
            sub_counts,
            offsets,
            high_count: acc,
            release_lag: 0,
            high_labels: None,
            low_labels: None,
        })
    }

    pub fn fixed(m: usize, low_count: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::Grid("m must be at least 1".into()));
        }
        Self::from_sub_counts(vec![m; low_count])
    }

    /// Release the low-frequency value `lag` sub-periods before the last one
    /// (clamped to the first sub-period of short periods).
    pub fn with_release_lag(mut self, lag: usize) -> Self {
        self.release_lag = lag;
        self
    }

    pub fn with_labels(mut self, high: Vec<NaiveDate>, low: Vec<NaiveDate>) -> Result<Self> {
        if high.len() != self.high_count || low.len() != self.low_count() {
            return Err(Error::Dimension("label lengths do not match grid".into()));
        }
        self.high_labels = Some(high);
        self.low_labels = Some(low);
        Ok(self)
    }

    pub fn low_count(&self) -> usize {
        self.sub_counts.len()
    }

    pub fn high_count(&self) -> usize {
        self.high_count
    }

    pub fn sub_counts(&self) -> &[usize] {
        &self.sub_counts
    }

    pub fn release_lag(&self) -> usize {
        self.release_lag
    }

    pub fn high_labels(&self) -> Option<&[NaiveDate]> {
        self.high_labels.as_deref()
    }

    pub fn low_labels(&self) -> Option<&[NaiveDate]> {
        self.low_labels.as_deref()
    }

    pub fn offset(&self, t: usize) -> usize {
        self.offsets[t]
    }

    /// Flat index of sub-period `j` (0-based) of period `t`.
    pub fn flat_index(&self, t: usize, j: usize) -> Option<usize> {
        if t < self.low_count() && j < self.sub_counts[t] {
            Some(self.offsets[t] + j)
        } else {
            None
        }
    }

    /// Inverse of [`flat_index`](Self::flat_index).
    pub fn period_of(&self, s: usize) -> Option<(usize, usize)> {
        if s >= self.high_count {
            return None;
        }
        let t = self.offsets.partition_point(|&o| o <= s) - 1;
        Some((t, s - self.offsets[t]))
    }

    /// Flat index at which period `t` is released.
    pub fn release_index(&self, t: usize) -> usize {
        let m = self.sub_counts[t];
        self.offsets[t] + (m - 1).saturating_sub(self.release_lag)
    }

    pub fn release_indices(&self) -> Vec<usize> {
        (0..self.low_count()).map(|t| self.release_index(t)).collect()
    }

    pub fn is_fixed_frequency(&self) -> bool {
        self.sub_counts.windows(2).all(|w| w[0] == w[1])
    }
}

/// Every Monday in `[start, end]` inclusive.
pub fn mondays_between(start: NaiveDate, end: NaiveDate) -> Vec<NaiveDate> {
    let shift = (7 - start.weekday().num_days_from_monday()) % 7;
    let mut d = start + Duration::days(i64::from(shift));
    let mut out = Vec::new();
    while d <= end {
        out.push(d);
        d += Duration::days(7);
    }
    out
}

pub fn build_time_grid(spec: &GridSpec) -> Result<TimeGrid> {
    match *spec {
        GridSpec::Fixed { m, low_count } => {
            if low_count == 0 {
                return Err(Error::Grid("fixed grid needs at least one period".into()));
            }
            TimeGrid::fixed(m, low_count)
        }
        GridSpec::WeeklyMondays { start, end } => {
            if end < start {
                return Err(Error::Grid(format!("empty date range {start} .. {end}")));
            }
            let mondays = mondays_between(start, end);
            if mondays.is_empty() {
                return Err(Error::Grid(format!("no Mondays in {start} .. {end}")));
            }
            debug_assert!(mondays.iter().all(|d| d.weekday() == Weekday::Mon));
            let mut counts: Vec<usize> = Vec::new();
            let mut low = Vec::new();
            let mut current: Option<(i32, u32)> = None;
            for d in &mondays {
                let key = (d.year(), d.month());
                if current != Some(key) {
                    current = Some(key);
                    counts.push(0);
                    low.push(NaiveDate::from_ymd_opt(key.0, key.1, 1).expect("valid month"));
                }
                *counts.last_mut().expect("pushed above") += 1;
            }
            TimeGrid::from_sub_counts(counts)?.with_labels(mondays, low)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationKind {
    Stock,
    Flow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowWeights {
    #[default]
    Sum,
    Average,
}

/// Sparse `T_o x T` low-from-high mapping `C`.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationMap {
    kind: AggregationKind,
    cols: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl AggregationMap {
    pub fn kind(&self) -> AggregationKind {
        self.kind
    }

    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, t: usize) -> &[(usize, f64)] {
        &self.rows[t]
    }

    pub fn apply(&self, high: &[f64]) -> Result<Vec<f64>> {
        if high.len() != self.cols {
            return Err(Error::Dimension(format!(
                "aggregation expects {} values, got {}",
                self.cols,
                high.len()
            )));
        }
        Ok(self
            .rows
            .iter()
            .map(|row| row.iter().map(|&(j, w)| w * high[j]).sum())
            .collect())
    }

    pub fn to_dense(&self) -> Mat {
        let mut c = Mat::zeros(self.rows.len(), self.cols);
        for (t, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                c[(t, j)] = w;
            }
        }
        c
    }
}

/// Stock aggregation selects the release sub-period; flow aggregation sums
/// (or averages) every sub-period of the period.
pub fn build_aggregation(
    grid: &TimeGrid,
    kind: AggregationKind,
    weights: FlowWeights,
) -> AggregationMap {
    let rows = (0..grid.low_count())
        .map(|t| match kind {
            AggregationKind::Stock => vec![(grid.release_index(t), 1.0)],
            AggregationKind::Flow => {
                let m = grid.sub_counts()[t];
                let w = match weights {
                    FlowWeights::Sum => 1.0,
                    FlowWeights::Average => 1.0 / m as f64,
                };
                (0..m).map(|j| (grid.offset(t) + j, w)).collect()
            }
        })
        .collect();
    AggregationMap {
        kind,
        cols: grid.high_count(),
        rows,
    }
}

/// A single high-frequency series with an observation mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSeries {
    pub values: Vec<f64>,
    pub observed: Vec<bool>,
}

impl MaskedSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn observed_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&s| self.observed[s]).collect()
    }

    pub fn missing_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&s| !self.observed[s]).collect()
    }
}

/// Place `y_low[t]` at the release sub-period of period `t`; everything else
/// is missing (NaN sentinel, mask false).
pub fn embed_low_frequency(y_low: &[f64], grid: &TimeGrid) -> Result<MaskedSeries> {
    if y_low.len() != grid.low_count() {
        return Err(Error::Dimension(format!(
            "low-frequency series has {} values but grid has {} periods",
            y_low.len(),
            grid.low_count()
        )));
    }
    let mut values = vec![f64::NAN; grid.high_count()];
    let mut observed = vec![false; grid.high_count()];
    for (t, &y) in y_low.iter().enumerate() {
        let s = grid.release_index(t);
        values[s] = y;
        observed[s] = true;
    }
    Ok(MaskedSeries { values, observed })
}

/// Mask over `len` sub-periods keeping positions whose 1-based phase within
/// a cycle of length `period` is listed in `keep`. With `period = 12` and
/// `keep = [2, 5, 8, 11]`, a January-start monthly series keeps February,
/// May, August and November.
pub fn periodic_keep_mask(len: usize, period: usize, keep: &[usize]) -> Result<Vec<bool>> {
    if period == 0 || keep.iter().any(|&k| k == 0 || k > period) {
        return Err(Error::Invalid(format!(
            "keep positions {keep:?} must lie in 1..={period}"
        )));
    }
    Ok((0..len).map(|s| keep.contains(&(s % period + 1))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn date(y: i32, m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, d).unwrap()
    }

    #[test]
    fn fixed_grid_shape() {
        let g = build_time_grid(&GridSpec::Fixed { m: 3, low_count: 4 }).unwrap();
        assert_eq!(g.high_count(), 12);
        assert_eq!(g.sub_counts(), &[3, 3, 3, 3]);
        assert!(g.is_fixed_frequency());
    }

    #[test]
    fn grid_errors() {
        assert!(build_time_grid(&GridSpec::Fixed { m: 0, low_count: 4 }).is_err());
        let spec = GridSpec::WeeklyMondays {
            start: date(2020, 1, 10),
            end: date(2020, 1, 1),
        };
        assert!(build_time_grid(&spec).is_err());
        // a Tuesday-to-Sunday range holds no Monday
        let spec = GridSpec::WeeklyMondays {
            start: date(2020, 1, 7),
            end: date(2020, 1, 12),
        };
        assert!(build_time_grid(&spec).is_err());
    }

    #[test]
    fn weekly_grid_1990_2019() {
        let spec = GridSpec::WeeklyMondays {
            start: date(1990, 1, 1),
            end: date(2019, 12, 31),
        };
        let g = build_time_grid(&spec).unwrap();
        assert_eq!(g.high_count(), 1566);
        assert_eq!(g.low_count(), 360);
        assert!(g.sub_counts().iter().all(|&m| m == 4 || m == 5));
    }

    #[test]
    fn stock_aggregation_rows() {
        let g = TimeGrid::fixed(3, 2).unwrap();
        let c = build_aggregation(&g, AggregationKind::Stock, FlowWeights::Sum).to_dense();
        assert_eq!(c.row(0).iter().copied().collect::<Vec<_>>(), [0., 0., 1., 0., 0., 0.]);
        assert_eq!(c.row(1).iter().copied().collect::<Vec<_>>(), [0., 0., 0., 0., 0., 1.]);
    }

    #[test]
    fn flow_aggregation_rows() {
        let g = TimeGrid::fixed(2, 2).unwrap();
        let c = build_aggregation(&g, AggregationKind::Flow, FlowWeights::Sum).to_dense();
        assert_eq!(c.row(0).iter().copied().collect::<Vec<_>>(), [1., 1., 0., 0.]);
        assert_eq!(c.row(1).iter().copied().collect::<Vec<_>>(), [0., 0., 1., 1.]);
        let avg = build_aggregation(&g, AggregationKind::Flow, FlowWeights::Average);
        assert_eq!(avg.apply(&[1.0, 3.0, 5.0, 7.0]).unwrap(), vec![2.0, 6.0]);
    }

    #[test]
    fn weekly_stock_row_hits_fifth_monday() {
        // January 1990 has Mondays on the 1st, 8th, 15th, 22nd and 29th
        let spec = GridSpec::WeeklyMondays {
            start: date(1990, 1, 1),
            end: date(1990, 3, 31),
        };
        let g = build_time_grid(&spec).unwrap();
        assert_eq!(g.sub_counts()[0], 5);
        let c = build_aggregation(&g, AggregationKind::Stock, FlowWeights::Sum);
        assert_eq!(c.row(0), &[(4, 1.0)]);
        assert_eq!(g.high_labels().unwrap()[4], date(1990, 1, 29));
    }

    #[test]
    fn embed_places_values_at_release() {
        let g = TimeGrid::fixed(3, 2).unwrap();
        let e = embed_low_frequency(&[1.0, 2.0], &g).unwrap();
        assert_eq!(e.observed, vec![false, false, true, false, false, true]);
        assert_eq!(e.values[2], 1.0);
        assert_eq!(e.values[5], 2.0);
        assert!(e.values[0].is_nan());
        assert!(embed_low_frequency(&[1.0], &g).is_err());
    }

    #[test]
    fn release_lag_moves_observation() {
        let g = TimeGrid::fixed(3, 2).unwrap().with_release_lag(2);
        assert_eq!(g.release_indices(), vec![0, 3]);
        let g = TimeGrid::from_sub_counts(vec![1, 3]).unwrap().with_release_lag(2);
        assert_eq!(g.release_indices(), vec![0, 1]);
    }

    #[test]
    fn quarterly_keep_pattern() {
        let mask = periodic_keep_mask(24, 12, &[2, 5, 8, 11]).unwrap();
        let kept: Vec<usize> = (0..24).filter(|&s| mask[s]).collect();
        assert_eq!(kept, vec![1, 4, 7, 10, 13, 16, 19, 22]);
        assert!(periodic_keep_mask(24, 12, &[13]).is_err());
    }

    #[test]
    fn grid_spec_parse_round_trip() {
        for s in ["fixed:3:40", "weekly:1990-01-01:2019-12-31"] {
            let spec: GridSpec = s.parse().unwrap();
            assert_eq!(spec.to_string(), s);
        }
        assert!("fixed:3".parse::<GridSpec>().is_err());
        assert!("monthly:1:2".parse::<GridSpec>().is_err());
        assert!("weekly:1990-13-01:2000-01-01".parse::<GridSpec>().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn flat_index_bijection(counts in prop::collection::vec(1usize..7, 1..30)) {
                let g = TimeGrid::from_sub_counts(counts).unwrap();
                prop_assert_eq!(g.high_count(), g.sub_counts().iter().sum::<usize>());
                for s in 0..g.high_count() {
                    let (t, j) = g.period_of(s).unwrap();
                    prop_assert_eq!(g.flat_index(t, j), Some(s));
                }
                prop_assert!(g.period_of(g.high_count()).is_none());
            }

            #[test]
            fn stock_aggregation_recovers_low_series(
                counts in prop::collection::vec(1usize..6, 1..20),
                fill in -5.0f64..5.0,
            ) {
                let g = TimeGrid::from_sub_counts(counts).unwrap();
                let y: Vec<f64> = (0..g.low_count()).map(|t| t as f64 * 0.5 - 1.0).collect();
                let mut e = embed_low_frequency(&y, &g).unwrap();
                for s in e.missing_indices() {
                    e.values[s] = fill + s as f64;
                }
                let c = build_aggregation(&g, AggregationKind::Stock, FlowWeights::Sum);
                prop_assert_eq!(c.apply(&e.values).unwrap(), y);
            }
        }
    }
}
