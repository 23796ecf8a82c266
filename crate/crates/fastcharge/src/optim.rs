//! Box-constrained smooth minimization: projected BFGS with backtracking.
//!
//! The decision vectors here are small (an MPC input sequence or a handful of
//! kernel hyperparameters), so a dense inverse-Hessian approximation is fine.

use crate::scalar::{cast, Scalar};

/// Objective with an optional cheap value-only path for line searches.
pub trait Objective<S: Scalar> {
    fn value(&mut self, x: &[S]) -> S;

    /// Value and gradient at `x`; writes the gradient into `grad`.
    fn value_grad(&mut self, x: &[S], grad: &mut [S]) -> S;
}

/// Finite box `lo <= x <= hi`, component-wise.
#[derive(Debug, Clone)]
pub struct Bounds<S> {
    pub lo: Vec<S>,
    pub hi: Vec<S>,
}

impl<S: Scalar> Bounds<S> {
    pub fn new(lo: Vec<S>, hi: Vec<S>) -> Self {
        assert_eq!(lo.len(), hi.len());
        for (l, h) in lo.iter().zip(hi.iter()) {
            assert!(l <= h, "lower bound exceeds upper bound");
        }
        Self { lo, hi }
    }

    pub fn uniform(dim: usize, lo: S, hi: S) -> Self {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn project(&self, x: &mut [S]) {
        for ((v, &l), &h) in x.iter_mut().zip(self.lo.iter()).zip(self.hi.iter()) {
            *v = (*v).max(l).min(h);
        }
    }

    pub fn projected(&self, x: &[S]) -> Vec<S> {
        let mut y = x.to_vec();
        self.project(&mut y);
        y
    }

    pub fn contains(&self, x: &[S]) -> bool {
        x.iter()
            .zip(self.lo.iter())
            .zip(self.hi.iter())
            .all(|((v, l), h)| v >= l && v <= h)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MinimizeOptions<S> {
    /// Convergence threshold on the infinity norm of the projected gradient
    /// step `x - P(x - g)`.
    pub tol: S,
    pub max_iters: usize,
    /// Armijo sufficient-decrease coefficient.
    pub armijo_c1: S,
    /// Smallest backtracking step before the line search gives up.
    pub min_step: S,
}

impl<S: Scalar> Default for MinimizeOptions<S> {
    fn default() -> Self {
        Self {
            tol: cast(1e-6),
            max_iters: 200,
            armijo_c1: cast(1e-4),
            min_step: cast(1e-14),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MinimizeOutcome<S> {
    pub x: Vec<S>,
    pub value: S,
    /// Infinity norm of the projected gradient step at the returned point.
    pub grad_pnorm: S,
    pub iterations: usize,
    pub converged: bool,
}

/// Infinity norm of `x - P(x - g)`, the projected-gradient stationarity measure.
fn projected_gradient_norm<S: Scalar>(x: &[S], grad: &[S], bounds: &Bounds<S>) -> S {
    let mut stepped: Vec<S> = x.iter().zip(grad.iter()).map(|(&v, &g)| v - g).collect();
    bounds.project(&mut stepped);
    x.iter()
        .zip(stepped.iter())
        .map(|(&v, &s)| (v - s).abs())
        .fold(S::zero(), S::max)
}

/// Minimize `f` over the box from `x0` with projected BFGS.
///
/// Non-finite trial values during the line search reject the step and shrink
/// it. The best iterate seen is returned even when the tolerance is not met.
pub fn minimize_box<S: Scalar, F: Objective<S>>(
    f: &mut F,
    x0: &[S],
    bounds: &Bounds<S>,
    opts: &MinimizeOptions<S>,
) -> MinimizeOutcome<S> {
    let n = x0.len();
    assert_eq!(n, bounds.dim());
    let mut x = bounds.projected(x0);
    let mut grad = vec![S::zero(); n];
    let mut value = f.value_grad(&x, &mut grad);

    let mut best_x = x.clone();
    let mut best_value = value;

    // Dense inverse-Hessian approximation, row-major. `fresh` marks a bare
    // identity that still wants the s'y/y'y scaling on its first update.
    let mut h = identity(n);
    let mut fresh = true;
    let mut iterations = 0;
    let mut converged = false;
    let mut grad_pnorm = projected_gradient_norm(&x, &grad, bounds);

    while iterations < opts.max_iters {
        if grad_pnorm <= opts.tol {
            converged = true;
            break;
        }
        iterations += 1;

        let mut dir = neg_mat_vec(&h, &grad);
        // Fall back to steepest descent when the quasi-Newton direction has
        // lost descent (possible after curvature-skipped updates).
        let descent = dot(&dir, &grad);
        if !(descent < S::zero()) || !descent.is_finite() {
            h = identity(n);
            fresh = true;
            for (d, &g) in dir.iter_mut().zip(grad.iter()) {
                *d = -g;
            }
        }

        let mut alpha = S::one();
        let mut accepted = None;
        let mut reset_tried = false;
        loop {
            let mut trial: Vec<S> = x
                .iter()
                .zip(dir.iter())
                .map(|(&v, &d)| v + alpha * d)
                .collect();
            bounds.project(&mut trial);
            let step: Vec<S> = trial.iter().zip(x.iter()).map(|(&t, &v)| t - v).collect();
            let predicted = dot(&grad, &step);
            let trial_value = f.value(&trial);
            if trial_value.is_finite()
                && predicted < S::zero()
                && trial_value <= value + opts.armijo_c1 * predicted
            {
                accepted = Some((trial, trial_value));
                break;
            }
            alpha = alpha * cast(0.5);
            if alpha < opts.min_step {
                if !reset_tried {
                    // One retry along steepest descent before giving up.
                    reset_tried = true;
                    h = identity(n);
                    fresh = true;
                    for (d, &g) in dir.iter_mut().zip(grad.iter()) {
                        *d = -g;
                    }
                    alpha = S::one();
                } else {
                    break;
                }
            }
        }

        let Some((new_x, new_value)) = accepted else {
            break;
        };

        let mut new_grad = vec![S::zero(); n];
        let checked = f.value_grad(&new_x, &mut new_grad);
        debug_assert!(checked.is_finite());

        let s: Vec<S> = new_x.iter().zip(x.iter()).map(|(&a, &b)| a - b).collect();
        let y: Vec<S> = new_grad
            .iter()
            .zip(grad.iter())
            .map(|(&a, &b)| a - b)
            .collect();
        let sy = dot(&s, &y);
        let s_norm = norm2(&s);
        let y_norm = norm2(&y);
        if sy > cast::<S>(1e-10) * s_norm * y_norm && sy.is_finite() {
            if fresh {
                // Nocedal-Wright initial scaling: H0 = (s'y / y'y) I.
                let gamma = sy / (y_norm * y_norm);
                for v in h.iter_mut() {
                    *v = *v * gamma;
                }
                fresh = false;
            }
            bfgs_update(&mut h, &s, &y, sy);
        }

        x = new_x;
        value = new_value;
        grad = new_grad;
        grad_pnorm = projected_gradient_norm(&x, &grad, bounds);
        if value < best_value {
            best_value = value;
            best_x = x.clone();
        }
    }

    if value <= best_value {
        best_value = value;
        best_x = x;
    }
    MinimizeOutcome {
        x: best_x,
        value: best_value,
        grad_pnorm,
        iterations,
        converged,
    }
}

fn identity<S: Scalar>(n: usize) -> Vec<S> {
    let mut m = vec![S::zero(); n * n];
    for i in 0..n {
        m[i * n + i] = S::one();
    }
    m
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter()
        .zip(b.iter())
        .fold(S::zero(), |acc, (&x, &y)| acc + x * y)
}

fn norm2<S: Scalar>(a: &[S]) -> S {
    dot(a, a).sqrt()
}

fn neg_mat_vec<S: Scalar>(m: &[S], v: &[S]) -> Vec<S> {
    let n = v.len();
    (0..n)
        .map(|i| {
            let row = &m[i * n..(i + 1) * n];
            -dot(row, v)
        })
        .collect()
}

/// BFGS inverse-Hessian update:
/// `H <- (I - rho s y^T) H (I - rho y s^T) + rho s s^T` with `rho = 1/(s^T y)`.
fn bfgs_update<S: Scalar>(h: &mut [S], s: &[S], y: &[S], sy: S) {
    let n = s.len();
    let rho = S::one() / sy;
    let hy: Vec<S> = (0..n)
        .map(|i| dot(&h[i * n..(i + 1) * n], y))
        .collect();
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            let term = h[i * n + j] - rho * (s[i] * hy[j] + hy[i] * s[j])
                + rho * rho * yhy * s[i] * s[j]
                + rho * s[i] * s[j];
            h[i * n + j] = term;
        }
    }
}
