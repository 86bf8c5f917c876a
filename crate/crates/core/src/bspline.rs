//! Cubic B-spline bases with knots at empirical quantiles.

use serde::{Deserialize, Serialize};

const DEGREE: usize = 3;

/// Clamped cubic B-spline basis on `[lower, upper]`. The first basis
/// function is dropped so the columns are not collinear with an intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubicBSpline {
    knots: Vec<f64>,
}

impl CubicBSpline {
    /// Basis with `df` columns: `df - 3` interior knots placed at evenly
    /// spaced empirical quantiles of `values`. Requires `df >= 3` and a
    /// non-constant sample.
    pub fn from_sample(values: &[f64], df: usize) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let lower = sorted[0];
        let upper = sorted[sorted.len() - 1];
        let n_interior = df.saturating_sub(DEGREE);
        let mut interior: Vec<f64> = (1..=n_interior)
            .map(|k| type7_quantile(&sorted, k as f64 / (n_interior + 1) as f64))
            .filter(|&q| q > lower && q < upper)
            .collect();
        interior.dedup();
        let mut knots = vec![lower; DEGREE + 1];
        knots.extend(interior);
        knots.extend(std::iter::repeat_n(upper, DEGREE + 1));
        Self { knots }
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Number of emitted columns (basis size minus the dropped one).
    pub fn ncols(&self) -> usize {
        self.knots.len() - DEGREE - 2
    }

    fn lower(&self) -> f64 {
        self.knots[0]
    }

    fn upper(&self) -> f64 {
        self.knots[self.knots.len() - 1]
    }

    /// Evaluates the basis at `x`; inputs outside the boundary knots are
    /// clamped to them.
    pub fn eval(&self, x: f64, out: &mut Vec<f64>) {
        let x = x.clamp(self.lower(), self.upper());
        let t = &self.knots;
        let nbasis = t.len() - DEGREE - 1;
        // span index s with t[s] <= x < t[s+1], right end maps to the last span
        let s = if x >= self.upper() {
            nbasis - 1
        } else {
            let mut s = DEGREE;
            while s + 1 < t.len() && t[s + 1] <= x {
                s += 1;
            }
            s
        };
        // de Boor triangle: nonzero functions are s-3..=s
        let mut local = [0.0f64; DEGREE + 1];
        local[0] = 1.0;
        let mut left = [0.0f64; DEGREE + 1];
        let mut right = [0.0f64; DEGREE + 1];
        for j in 1..=DEGREE {
            left[j] = x - t[s + 1 - j];
            right[j] = t[s + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom > 0.0 { local[r] / denom } else { 0.0 };
                local[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            local[j] = saved;
        }
        let start = out.len();
        out.extend(std::iter::repeat_n(0.0, self.ncols()));
        for (r, &v) in local.iter().enumerate() {
            let idx = s - DEGREE + r;
            if idx >= 1 {
                out[start + idx - 1] = v;
            }
        }
    }
}

/// Linear-interpolation sample quantile of a sorted slice.
pub(crate) fn type7_quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}
