use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// B-spline basis over a knot vector, evaluated with the Cox–de Boor
/// triangle. The domain is `[t_k, t_n]` for degree `k` and `n` basis
/// functions; inputs outside it are clamped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BSplineBasis {
    knots: Vec<f64>,
    degree: usize,
}

/// Basis weights at one input.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisEval {
    /// First nonzero basis index; `values[j]` belongs to basis `first + j`.
    pub first: usize,
    pub values: Vec<f64>,
    pub clamped: bool,
}

impl BasisEval {
    /// Dense weight vector of length `n_basis`.
    pub fn dense(&self, n_basis: usize) -> Vec<f64> {
        let mut w = vec![0.0; n_basis];
        w[self.first..self.first + self.values.len()].copy_from_slice(&self.values);
        w
    }
}

impl BSplineBasis {
    /// `intervals` uniform intervals on `[lo, hi]`, extended by `degree`
    /// knots on each side.
    pub fn uniform(intervals: usize, degree: usize, lo: f64, hi: f64) -> Result<Self> {
        if intervals == 0 || !(hi > lo) {
            return Err(Error::Config(format!(
                "uniform grid needs intervals > 0 and lo < hi, got {intervals} on [{lo}, {hi}]"
            )));
        }
        let h = (hi - lo) / intervals as f64;
        let knots = (0..=intervals + 2 * degree)
            .map(|i| lo + (i as f64 - degree as f64) * h)
            .collect();
        BSplineBasis::from_knots(knots, degree)
    }

    pub fn from_knots(knots: Vec<f64>, degree: usize) -> Result<Self> {
        if degree == 0 {
            return Err(Error::Config("spline degree must be at least 1".into()));
        }
        if knots.len() < degree + 2 {
            return Err(Error::Config(format!(
                "{} knots cannot carry a degree-{degree} basis",
                knots.len()
            )));
        }
        if knots.iter().any(|k| !k.is_finite()) || knots.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config("knots must be finite and non-decreasing".into()));
        }
        let b = BSplineBasis { knots, degree };
        let (lo, hi) = b.domain();
        if !(hi > lo) {
            return Err(Error::Config("degenerate spline domain".into()));
        }
        Ok(b)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn n_basis(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.knots[self.degree], self.knots[self.n_basis()])
    }

    fn clamp(&self, x: f64) -> (f64, bool) {
        let (lo, hi) = self.domain();
        if x < lo {
            (lo, true)
        } else if x > hi {
            (hi, true)
        } else {
            (x, false)
        }
    }

    /// Knot span `s` with `t_s <= x < t_{s+1}`; the right domain edge
    /// belongs to the last non-empty span.
    fn span(&self, x: f64) -> usize {
        let t = &self.knots;
        let (lo_idx, hi_idx) = (self.degree, self.n_basis() - 1);
        let mut s = lo_idx;
        for i in lo_idx..=hi_idx {
            if t[i] < t[i + 1] && t[i] <= x {
                s = i;
            }
        }
        s
    }

    /// The `degree + 1` nonzero basis values of the given degree on span `s`.
    fn nonzero(&self, s: usize, x: f64, degree: usize) -> Vec<f64> {
        let t = &self.knots;
        let mut n = vec![0.0; degree + 1];
        let mut left = vec![0.0; degree + 1];
        let mut right = vec![0.0; degree + 1];
        n[0] = 1.0;
        for j in 1..=degree {
            left[j] = x - t[s + 1 - j];
            right[j] = t[s + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        n
    }

    pub fn eval(&self, x: f64) -> BasisEval {
        let (xc, clamped) = self.clamp(x);
        let s = self.span(xc);
        BasisEval {
            first: s - self.degree,
            values: self.nonzero(s, xc, self.degree),
            clamped,
        }
    }

    /// Basis values and their derivatives with respect to `x`. Derivatives
    /// are zero where the input was clamped.
    pub fn eval_with_derivative(&self, x: f64) -> (BasisEval, Vec<f64>) {
        let e = self.eval(x);
        let k = self.degree;
        if e.clamped {
            return (e, vec![0.0; k + 1]);
        }
        let (xc, _) = self.clamp(x);
        let s = e.first + k;
        let lower = self.nonzero(s, xc, k - 1);
        let t = &self.knots;
        let kf = k as f64;
        // B'_{i,k} = k/(t_{i+k}-t_i) B_{i,k-1} - k/(t_{i+k+1}-t_{i+1}) B_{i+1,k-1},
        // with B_{i,k-1} nonzero only for i in s-k+1..=s.
        let lower_at = |i: usize| if i + k > s && i <= s { lower[i + k - 1 - s] } else { 0.0 };
        let mut d = vec![0.0; k + 1];
        for (j, dj) in d.iter_mut().enumerate() {
            let i = s - k + j;
            let a = t[i + k] - t[i];
            let b = t[i + k + 1] - t[i + 1];
            let left = if a > 0.0 { kf / a * lower_at(i) } else { 0.0 };
            let right = if b > 0.0 { kf / b * lower_at(i + 1) } else { 0.0 };
            *dj = left - right;
        }
        (e, d)
    }
}
