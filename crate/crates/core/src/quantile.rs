//! Quantile-function representation of distributions on the real line.
//!
//! A distribution is stored as its quantile function evaluated on a
//! probability grid. The 2-Wasserstein distance between two distributions is
//! then the L² distance between their quantile functions, integrated with the
//! trapezoidal rule on the grid. The same quadrature weights are used by the
//! isotonic projection, so `monotone_project` is the exact nearest
//! nondecreasing vector in the discrete norm that `wasserstein2` measures.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// Ordered probe locations in `[0, 1]` plus their trapezoid weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbGrid {
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl ProbGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidGrid("need at least 2 points".into()));
        }
        ensure_finite(&points)?;
        if points[0] < 0.0 || points[points.len() - 1] > 1.0 {
            return Err(Error::InvalidGrid("points must lie in [0, 1]".into()));
        }
        if points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid(
                "points must be strictly increasing".into(),
            ));
        }
        let weights = trapezoid_weights(&points);
        Ok(Self { points, weights })
    }

    /// `size` equidistant points `j / (size - 1)`.
    pub fn uniform(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidGrid("need at least 2 points".into()));
        }
        let last = (size - 1) as f64;
        Self::new((0..size).map(|j| j as f64 / last).collect())
    }

    /// 101-point grid used for data analysis.
    pub fn analysis_default() -> Self {
        Self::uniform(101).expect("static grid")
    }

    /// 50-point grid used by the simulation study.
    pub fn simulation_default() -> Self {
        Self::uniform(50).expect("static grid")
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    /// Trapezoid quadrature weights; they sum to the grid span.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Quadrature of `f` sampled on the grid.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        self.weights.iter().zip(values).map(|(w, v)| w * v).sum()
    }
}

impl TryFrom<Vec<f64>> for ProbGrid {
    type Error = Error;
    fn try_from(points: Vec<f64>) -> Result<Self> {
        Self::new(points)
    }
}

impl From<ProbGrid> for Vec<f64> {
    fn from(grid: ProbGrid) -> Self {
        grid.points
    }
}

fn trapezoid_weights(points: &[f64]) -> Vec<f64> {
    let g = points.len();
    (0..g)
        .map(|j| {
            let left = if j > 0 {
                points[j] - points[j - 1]
            } else {
                0.0
            };
            let right = if j + 1 < g {
                points[j + 1] - points[j]
            } else {
                0.0
            };
            0.5 * (left + right)
        })
        .collect()
}

/// A nondecreasing curve on a probability grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileFunction {
    grid: ProbGrid,
    values: Vec<f64>,
}

impl QuantileFunction {
    pub fn new(grid: ProbGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::DimensionMismatch {
                expected: grid.len(),
                got: values.len(),
            });
        }
        ensure_finite(&values)?;
        if !is_nondecreasing(&values) {
            return Err(Error::InvalidArgument(
                "quantile values must be nondecreasing".into(),
            ));
        }
        Ok(Self { grid, values })
    }

    pub(crate) fn from_parts_unchecked(grid: ProbGrid, values: Vec<f64>) -> Self {
        debug_assert!(is_nondecreasing(&values));
        Self { grid, values }
    }

    pub fn grid(&self) -> &ProbGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

pub fn is_nondecreasing(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[0] <= w[1])
}

/// Unordered raw observations from one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSampleStream {
    samples: Vec<f64>,
}

impl RawSampleStream {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyStream);
        }
        ensure_finite(&samples)?;
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Left-continuous generalized inverse of the empirical CDF,
/// `Q(ρ) = inf{a : F(a) ≥ ρ}`, with `Q(0)` set to the sample minimum.
pub fn empirical_quantile(stream: &RawSampleStream, grid: &ProbGrid) -> QuantileFunction {
    let mut sorted = stream.samples.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let values = grid
        .points()
        .iter()
        .map(|&rho| {
            // smallest k with k/n >= rho; the slack absorbs rounding in n*rho
            let pos = n as f64 * rho;
            let k = (pos - 1e-9 * pos.max(1.0)).ceil().clamp(1.0, n as f64) as usize;
            sorted[k - 1]
        })
        .collect();
    QuantileFunction::from_parts_unchecked(grid.clone(), values)
}

/// Squared L² distance of two value vectors under the grid quadrature.
pub(crate) fn l2_sq(grid: &ProbGrid, a: &[f64], b: &[f64]) -> f64 {
    grid.weights()
        .iter()
        .zip(a.iter().zip(b))
        .map(|(w, (x, y))| w * (x - y) * (x - y))
        .sum()
}

/// 2-Wasserstein distance, computed as the L² distance between quantile
/// functions.
pub fn wasserstein2(a: &QuantileFunction, b: &QuantileFunction) -> Result<f64> {
    if a.grid != b.grid {
        return Err(Error::GridMismatch);
    }
    Ok(l2_sq(&a.grid, &a.values, &b.values).sqrt())
}

/// Weighted pool-adjacent-violators on raw slices.
pub(crate) fn pava_weighted(values: &[f64], weights: &[f64]) -> Vec<f64> {
    // blocks of (weighted mean, total weight, length)
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(values.len());
    for (&v, &w) in values.iter().zip(weights) {
        let mut cur = (v, w, 1usize);
        while let Some(&(m, pw, len)) = blocks.last() {
            if m > cur.0 {
                blocks.pop();
                let total = pw + cur.1;
                cur = ((m * pw + cur.0 * cur.1) / total, total, len + cur.2);
            } else {
                break;
            }
        }
        blocks.push(cur);
    }
    let mut out = Vec::with_capacity(values.len());
    for (m, _, len) in blocks {
        out.extend(std::iter::repeat_n(m, len));
    }
    out
}

/// L²-nearest nondecreasing vector under the grid's trapezoid weights.
pub fn monotone_project(values: &[f64], grid: &ProbGrid) -> Result<QuantileFunction> {
    if values.len() != grid.len() {
        return Err(Error::DimensionMismatch {
            expected: grid.len(),
            got: values.len(),
        });
    }
    ensure_finite(values)?;
    if is_nondecreasing(values) {
        return Ok(QuantileFunction::from_parts_unchecked(
            grid.clone(),
            values.to_vec(),
        ));
    }
    let projected = pava_weighted(values, grid.weights());
    Ok(QuantileFunction::from_parts_unchecked(
        grid.clone(),
        projected,
    ))
}
