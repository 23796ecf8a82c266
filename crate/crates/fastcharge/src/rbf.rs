//! Gaussian radial-basis-function network over the (terminal voltage,
//! temperature) plane, used as a learnable shaping term in the MPC stage cost.

use crate::scalar::{cast, Scalar};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RbfError {
    #[error("centers ({centers}) and widths ({widths}) must agree in length")]
    LengthMismatch { centers: usize, widths: usize },
    #[error("width at index {0} must be positive")]
    NonPositiveWidth(usize),
    #[error("normalization range must have positive extent")]
    DegenerateRange,
    #[error("theta has {theta} weights but the network has {network} centers")]
    ThetaMismatch { theta: usize, network: usize },
}

/// Fixed centers and widths of the shaping network.
///
/// Volts and kelvin are incommensurable, so distances are measured after an
/// affine map that takes `vt_range x t_range` onto the unit square; the
/// widths `lambda_i` are expressed in those normalized units.
#[derive(Debug, Clone)]
pub struct RbfNetwork<S> {
    centers: Vec<(S, S)>,
    widths: Vec<S>,
    vt_range: (S, S),
    t_range: (S, S),
}

impl<S: Scalar> RbfNetwork<S> {
    pub fn new(
        centers: Vec<(S, S)>,
        widths: Vec<S>,
        vt_range: (S, S),
        t_range: (S, S),
    ) -> Result<Self, RbfError> {
        if centers.len() != widths.len() {
            return Err(RbfError::LengthMismatch {
                centers: centers.len(),
                widths: widths.len(),
            });
        }
        for (i, w) in widths.iter().enumerate() {
            if !(*w > S::zero()) {
                return Err(RbfError::NonPositiveWidth(i));
            }
        }
        if !(vt_range.1 > vt_range.0) || !(t_range.1 > t_range.0) {
            return Err(RbfError::DegenerateRange);
        }
        Ok(Self {
            centers,
            widths,
            vt_range,
            t_range,
        })
    }

    /// Regular `nv x nt` grid of centers over the given ranges, with widths
    /// chosen so each Gaussian decays to one half at the nearest neighboring
    /// center.
    pub fn grid(nv: usize, nt: usize, vt_range: (S, S), t_range: (S, S)) -> Result<Self, RbfError> {
        assert!(nv >= 1 && nt >= 1);
        let mut centers = Vec::with_capacity(nv * nt);
        for iv in 0..nv {
            for it in 0..nt {
                let fv: S = if nv == 1 {
                    cast(0.5)
                } else {
                    cast(iv as f64 / (nv - 1) as f64)
                };
                let ft: S = if nt == 1 {
                    cast(0.5)
                } else {
                    cast(it as f64 / (nt - 1) as f64)
                };
                centers.push((
                    vt_range.0 + fv * (vt_range.1 - vt_range.0),
                    t_range.0 + ft * (t_range.1 - t_range.0),
                ));
            }
        }
        // Nearest-neighbor spacing in normalized coordinates.
        let mut spacing = S::one();
        if nv > 1 {
            spacing = spacing.min(S::one() / cast((nv - 1) as f64));
        }
        if nt > 1 {
            spacing = spacing.min(S::one() / cast((nt - 1) as f64));
        }
        let lambda = cast::<S>(2.0f64.ln()) / (spacing * spacing);
        let count = centers.len();
        Self::new(centers, vec![lambda; count], vt_range, t_range)
    }

    /// Network with zero basis functions; its cost term is identically zero.
    pub fn empty(vt_range: (S, S), t_range: (S, S)) -> Self {
        Self {
            centers: Vec::new(),
            widths: Vec::new(),
            vt_range,
            t_range,
        }
    }

    pub fn count(&self) -> usize {
        self.centers.len()
    }

    pub fn centers(&self) -> &[(S, S)] {
        &self.centers
    }

    pub fn widths(&self) -> &[S] {
        &self.widths
    }

    pub fn vt_range(&self) -> (S, S) {
        self.vt_range
    }

    pub fn t_range(&self) -> (S, S) {
        self.t_range
    }

    fn normalize(&self, vt: S, t: S) -> (S, S) {
        (
            (vt - self.vt_range.0) / (self.vt_range.1 - self.vt_range.0),
            (t - self.t_range.0) / (self.t_range.1 - self.t_range.0),
        )
    }
}

/// Learnable RBF weight vector (one weight per center).
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaVec<S>(Vec<S>);

impl<S: Scalar> ThetaVec<S> {
    pub fn new(weights: Vec<S>) -> Self {
        Self(weights)
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![S::zero(); n])
    }

    pub fn weights(&self) -> &[S] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn within(&self, lo: S, hi: S) -> bool {
        self.0.iter().all(|w| *w >= lo && *w <= hi)
    }
}

fn check_theta<S: Scalar>(theta: &ThetaVec<S>, net: &RbfNetwork<S>) -> Result<(), RbfError> {
    if theta.len() != net.count() {
        return Err(RbfError::ThetaMismatch {
            theta: theta.len(),
            network: net.count(),
        });
    }
    Ok(())
}

/// `sum_i w_i exp(-lambda_i ||n(vt, t) - n(c_i)||^2)` in normalized coordinates.
pub fn rbf_cost<S: Scalar>(vt: S, t: S, theta: &ThetaVec<S>, net: &RbfNetwork<S>) -> S {
    check_theta(theta, net).expect("theta length matches network");
    let (nv, nt) = net.normalize(vt, t);
    let mut total = S::zero();
    for ((c, &lambda), &w) in net.centers.iter().zip(net.widths.iter()).zip(theta.weights()) {
        let (cv, ct) = net.normalize(c.0, c.1);
        let dv = nv - cv;
        let dt = nt - ct;
        total += w * (-lambda * (dv * dv + dt * dt)).exp();
    }
    total
}

/// RBF cost value with its partial derivatives with respect to raw `vt` and `t`.
pub fn rbf_cost_with_grad<S: Scalar>(
    vt: S,
    t: S,
    theta: &ThetaVec<S>,
    net: &RbfNetwork<S>,
) -> (S, S, S) {
    check_theta(theta, net).expect("theta length matches network");
    let (nv, nt) = net.normalize(vt, t);
    let inv_v = S::one() / (net.vt_range.1 - net.vt_range.0);
    let inv_t = S::one() / (net.t_range.1 - net.t_range.0);
    let two: S = cast(2.0);
    let mut total = S::zero();
    let mut d_vt = S::zero();
    let mut d_t = S::zero();
    for ((c, &lambda), &w) in net.centers.iter().zip(net.widths.iter()).zip(theta.weights()) {
        let (cv, ct) = net.normalize(c.0, c.1);
        let dv = nv - cv;
        let dt = nt - ct;
        let e = (-lambda * (dv * dv + dt * dt)).exp();
        total += w * e;
        let common = -two * lambda * w * e;
        d_vt += common * dv * inv_v;
        d_t += common * dt * inv_t;
    }
    (total, d_vt, d_t)
}
