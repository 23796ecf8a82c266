//! Natural cubic spline interpolation for SOC-indexed parameter tables.

use crate::scalar::{cast, Scalar};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SplineError {
    #[error("spline needs at least two knots, got {0}")]
    TooFewKnots(usize),
    #[error("knot count mismatch: {xs} abscissae vs {ys} ordinates")]
    LengthMismatch { xs: usize, ys: usize },
    #[error("knot abscissae must be strictly increasing (violated at index {0})")]
    NotIncreasing(usize),
    #[error("non-finite knot value at index {0}")]
    NonFinite(usize),
}

/// Natural cubic spline: C² between knots, zero second derivative at both ends.
///
/// Evaluation outside the knot range clamps the argument to the range; the
/// caller decides whether that deserves a warning (see
/// [`crate::battery::interp_param`]).
#[derive(Debug, Clone)]
pub struct CubicSpline<S> {
    xs: Vec<S>,
    ys: Vec<S>,
    /// Second derivatives at the knots, from the natural-spline tridiagonal solve.
    second: Vec<S>,
}

impl<S: Scalar> CubicSpline<S> {
    pub fn new(xs: Vec<S>, ys: Vec<S>) -> Result<Self, SplineError> {
        if xs.len() != ys.len() {
            return Err(SplineError::LengthMismatch {
                xs: xs.len(),
                ys: ys.len(),
            });
        }
        if xs.len() < 2 {
            return Err(SplineError::TooFewKnots(xs.len()));
        }
        for (i, (&x, &y)) in xs.iter().zip(ys.iter()).enumerate() {
            if !x.is_finite() || !y.is_finite() {
                return Err(SplineError::NonFinite(i));
            }
            if i > 0 && x <= xs[i - 1] {
                return Err(SplineError::NotIncreasing(i));
            }
        }
        let second = natural_second_derivatives(&xs, &ys);
        Ok(Self { xs, ys, second })
    }

    pub fn domain(&self) -> (S, S) {
        (self.xs[0], *self.xs.last().unwrap())
    }

    /// True when `x` lies outside the knot range (evaluation would clamp).
    pub fn out_of_domain(&self, x: S) -> bool {
        x < self.xs[0] || x > *self.xs.last().unwrap()
    }

    /// Evaluate at `x`, clamping the argument into the knot range.
    pub fn eval(&self, x: S) -> S {
        self.eval_with_deriv(x).0
    }

    /// Evaluate value and first derivative at `x` (argument clamped).
    ///
    /// Strictly outside the knot range the clamped evaluator is constant, so
    /// the reported derivative is zero there.
    pub fn eval_with_deriv(&self, x: S) -> (S, S) {
        let (lo, hi) = self.domain();
        let clamped = x < lo || x > hi;
        let x = x.max(lo).min(hi);
        let seg = self.segment(x);
        let h = self.xs[seg + 1] - self.xs[seg];
        let a = (self.xs[seg + 1] - x) / h;
        let b = (x - self.xs[seg]) / h;
        let six: S = cast(6.0);
        let three: S = cast(3.0);
        let value = a * self.ys[seg]
            + b * self.ys[seg + 1]
            + ((a * a * a - a) * self.second[seg] + (b * b * b - b) * self.second[seg + 1]) * h * h
                / six;
        let deriv = if clamped {
            S::zero()
        } else {
            (self.ys[seg + 1] - self.ys[seg]) / h
                + (-(three * a * a - S::one()) * self.second[seg]
                    + (three * b * b - S::one()) * self.second[seg + 1])
                    * h
                    / six
        };
        (value, deriv)
    }

    fn segment(&self, x: S) -> usize {
        // Binary search for the segment containing x; x is already in range.
        let mut lo = 0;
        let mut hi = self.xs.len() - 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.xs[mid] > x {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    }
}

/// Solve the natural-spline tridiagonal system for knot second derivatives.
fn natural_second_derivatives<S: Scalar>(xs: &[S], ys: &[S]) -> Vec<S> {
    let n = xs.len();
    let mut second = vec![S::zero(); n];
    if n == 2 {
        return second;
    }
    // Thomas algorithm on the (n-2)-dimensional interior system.
    let m = n - 2;
    let mut diag = vec![S::zero(); m];
    let mut upper = vec![S::zero(); m];
    let mut rhs = vec![S::zero(); m];
    let six: S = cast(6.0);
    let two: S = cast(2.0);
    for i in 0..m {
        let h0 = xs[i + 1] - xs[i];
        let h1 = xs[i + 2] - xs[i + 1];
        diag[i] = two * (h0 + h1);
        upper[i] = h1;
        rhs[i] = six * ((ys[i + 2] - ys[i + 1]) / h1 - (ys[i + 1] - ys[i]) / h0);
    }
    // Forward elimination (sub-diagonal equals the previous upper entry h).
    for i in 1..m {
        let h = xs[i + 1] - xs[i];
        let w = h / diag[i - 1];
        diag[i] = diag[i] - w * upper[i - 1];
        rhs[i] = rhs[i] - w * rhs[i - 1];
    }
    // Back substitution.
    second[m] = rhs[m - 1] / diag[m - 1];
    for i in (0..m.saturating_sub(1)).rev() {
        second[i + 1] = (rhs[i] - upper[i] * second[i + 2]) / diag[i];
    }
    second
}
