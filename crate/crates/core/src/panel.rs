//! Balanced outcome panels: N units by T + S periods, with labels.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Matrix;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PanelError {
    #[error("panel shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite outcome for unit {unit} in period {period}")]
    NonFinite { unit: String, period: String },
    #[error("pre-treatment horizon {pre} is invalid for {periods} periods")]
    InvalidPrePeriods { pre: usize, periods: usize },
}

/// Outcome matrix with units as rows and periods as columns. The first
/// `pre_periods` columns are pre-treatment, the rest are post-treatment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelData {
    units: Vec<String>,
    periods: Vec<String>,
    outcomes: Matrix,
    pre_periods: usize,
}

impl PanelData {
    pub fn new(
        units: Vec<String>,
        periods: Vec<String>,
        outcomes: Matrix,
        pre_periods: usize,
    ) -> Result<Self, PanelError> {
        if outcomes.nrows() != units.len() || outcomes.ncols() != periods.len() {
            return Err(PanelError::Shape(format!(
                "{} units x {} periods but outcomes are {}x{}",
                units.len(),
                periods.len(),
                outcomes.nrows(),
                outcomes.ncols()
            )));
        }
        if units.is_empty() {
            return Err(PanelError::Shape("panel has no units".into()));
        }
        if pre_periods == 0 || pre_periods > periods.len() {
            return Err(PanelError::InvalidPrePeriods { pre: pre_periods, periods: periods.len() });
        }
        if let Some((i, j)) = outcomes.first_non_finite() {
            return Err(PanelError::NonFinite { unit: units[i].clone(), period: periods[j].clone() });
        }
        Ok(Self { units, periods, outcomes, pre_periods })
    }

    /// Panel with generated labels `unit_0..`, `1..=T+S`.
    pub fn unlabeled(outcomes: Matrix, pre_periods: usize) -> Result<Self, PanelError> {
        let units = (0..outcomes.nrows()).map(|i| format!("unit_{i}")).collect();
        let periods = (1..=outcomes.ncols()).map(|t| t.to_string()).collect();
        Self::new(units, periods, outcomes, pre_periods)
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    pub fn n_periods(&self) -> usize {
        self.periods.len()
    }

    pub fn pre_periods(&self) -> usize {
        self.pre_periods
    }

    pub fn post_periods(&self) -> usize {
        self.periods.len() - self.pre_periods
    }

    pub fn units(&self) -> &[String] {
        &self.units
    }

    pub fn periods(&self) -> &[String] {
        &self.periods
    }

    pub fn outcomes(&self) -> &Matrix {
        &self.outcomes
    }

    pub fn pre_matrix(&self) -> Matrix {
        self.outcomes.column_block(0, self.pre_periods)
    }

    pub fn post_matrix(&self) -> Matrix {
        self.outcomes.column_block(self.pre_periods, self.n_periods())
    }

    pub fn with_pre_periods(&self, pre_periods: usize) -> Result<Self, PanelError> {
        Self::new(self.units.clone(), self.periods.clone(), self.outcomes.clone(), pre_periods)
    }

    /// Sub-panel on the given units (in the given order) and the period
    /// window `start..start + pre + post`.
    pub fn subpanel(&self, units: &[usize], start: usize, pre: usize, post: usize) -> Result<Self, PanelError> {
        let end = start + pre + post;
        if end > self.n_periods() {
            return Err(PanelError::Shape(format!(
                "window {start}..{end} exceeds {} periods",
                self.n_periods()
            )));
        }
        if let Some(&bad) = units.iter().find(|&&u| u >= self.n_units()) {
            return Err(PanelError::Shape(format!("unit index {bad} out of range")));
        }
        let outcomes = self.outcomes.select_rows(units).column_block(start, end);
        Self::new(
            units.iter().map(|&u| self.units[u].clone()).collect(),
            self.periods[start..end].to_vec(),
            outcomes,
            pre,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> PanelData {
        let m = Matrix::from_rows(&[[1.0, 2.0, 3.0, 4.0], [5.0, 6.0, 7.0, 8.0], [9.0, 10.0, 11.0, 12.0]]).unwrap();
        PanelData::unlabeled(m, 2).unwrap()
    }

    #[test]
    fn pre_post_split() {
        let p = toy();
        assert_eq!(p.pre_matrix().row(1), &[5.0, 6.0]);
        assert_eq!(p.post_matrix().row(2), &[11.0, 12.0]);
        assert_eq!(p.post_periods(), 2);
    }

    #[test]
    fn subpanel_window() {
        let p = toy().subpanel(&[2, 0], 1, 2, 1).unwrap();
        assert_eq!(p.units(), &["unit_2".to_string(), "unit_0".to_string()]);
        assert_eq!(p.outcomes().row(0), &[10.0, 11.0, 12.0]);
        assert_eq!(p.pre_periods(), 2);
        assert!(toy().subpanel(&[0], 2, 2, 1).is_err());
    }

    #[test]
    fn rejects_bad_horizon_and_nan() {
        let m = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        assert!(matches!(PanelData::unlabeled(m.clone(), 3), Err(PanelError::InvalidPrePeriods { .. })));
        assert!(PanelData::unlabeled(m, 0).is_err());
        let bad = Matrix::from_rows(&[[1.0, f64::NAN]]).unwrap();
        assert!(matches!(PanelData::unlabeled(bad, 1), Err(PanelError::NonFinite { .. })));
    }
}
