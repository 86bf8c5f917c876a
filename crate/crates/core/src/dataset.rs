use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantile::{is_nondecreasing, ProbGrid, QuantileFunction};

/// Right-censored time-to-event outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub time: f64,
    pub event: bool,
}

impl SurvivalRecord {
    pub fn new(time: f64, event: bool) -> Result<Self> {
        if !(time.is_finite() && time > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "survival time must be > 0, got {time}"
            )));
        }
        Ok(Self { time, event })
    }
}

/// Covariates, optional quantile responses on a shared grid, observation
/// flags and an optional survival outcome.
///
/// `delta[i]` marks whether the response of row `i` is observed. A row may
/// still carry a response when `delta[i]` is false; simulated data keep the
/// ground truth there so imputations can be scored.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionalDataset {
    pub ids: Vec<String>,
    pub x: DMatrix<f64>,
    pub grid: ProbGrid,
    pub responses: Vec<Option<Vec<f64>>>,
    pub delta: Vec<bool>,
    pub survival: Option<Vec<SurvivalRecord>>,
}

impl DistributionalDataset {
    pub fn new(
        ids: Vec<String>,
        x: DMatrix<f64>,
        grid: ProbGrid,
        responses: Vec<Option<Vec<f64>>>,
        delta: Vec<bool>,
        survival: Option<Vec<SurvivalRecord>>,
    ) -> Result<Self> {
        let n = x.nrows();
        for len in [ids.len(), responses.len(), delta.len()] {
            if len != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: len,
                });
            }
        }
        if let Some(s) = &survival {
            if s.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: s.len(),
                });
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        for (i, (r, &d)) in responses.iter().zip(&delta).enumerate() {
            match r {
                Some(v) => {
                    if v.len() != grid.len() {
                        return Err(Error::DimensionMismatch {
                            expected: grid.len(),
                            got: v.len(),
                        });
                    }
                    if v.iter().any(|a| !a.is_finite()) {
                        return Err(Error::NonFinite);
                    }
                    if !is_nondecreasing(v) {
                        return Err(Error::InvalidArgument(format!(
                            "response of row {i} is not nondecreasing"
                        )));
                    }
                }
                None if d => {
                    return Err(Error::InvalidArgument(format!(
                        "row {i} is marked observed but has no response"
                    )))
                }
                None => {}
            }
        }
        Ok(Self {
            ids,
            x,
            grid,
            responses,
            delta,
            survival,
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.x.row(i).iter().copied().collect()
    }

    pub fn observed_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.delta[i]).collect()
    }

    pub fn missing_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| !self.delta[i]).collect()
    }

    pub fn delta_f64(&self) -> Vec<f64> {
        self.delta
            .iter()
            .map(|&d| if d { 1.0 } else { 0.0 })
            .collect()
    }

    /// Response of row `i` only if it is observed.
    pub fn observed_response(&self, i: usize) -> Option<&[f64]> {
        if self.delta[i] {
            self.responses[i].as_deref()
        } else {
            None
        }
    }

    pub fn response_curve(&self, i: usize) -> Option<QuantileFunction> {
        self.responses[i]
            .as_ref()
            .map(|v| QuantileFunction::from_parts_unchecked(self.grid.clone(), v.clone()))
    }

    /// Copy with responses of unobserved rows removed.
    pub fn without_hidden_truth(&self) -> Self {
        let mut out = self.clone();
        for (r, &d) in out.responses.iter_mut().zip(&self.delta) {
            if !d {
                *r = None;
            }
        }
        out
    }
}
