//! Gaussian-process regression with a squared-exponential ARD kernel.
//!
//! Exact inference through a Cholesky factorization of the noisy kernel
//! matrix, plus evidence (log marginal likelihood) maximization for the
//! hyperparameters. Training sets here stay small (one point per tuning
//! iteration), so the dense factorization is hand-rolled rather than pulled
//! from a linear-algebra crate.

use crate::optim::{minimize_box, Bounds, MinimizeOptions, Objective};
use crate::scalar::{cast, Scalar};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GpError {
    #[error("input row {row} has dimension {got}, expected {expected}")]
    DimensionMismatch {
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("non-finite entry in training data at row {0}")]
    NonFinite(usize),
    #[error("inputs ({inputs}) and targets ({targets}) must agree in length")]
    LengthMismatch { inputs: usize, targets: usize },
    #[error(
        "kernel matrix is not positive definite even with maximum jitter (noise variance {noise})"
    )]
    IndefiniteKernel { noise: f64 },
    #[error("kernel config invalid: {0}")]
    BadConfig(String),
}

/// Squared-exponential ARD kernel with constant prior mean.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelConfig<S> {
    pub signal_variance: S,
    /// One positive lengthscale per input dimension.
    pub lengthscales: Vec<S>,
    pub noise_variance: S,
    /// Constant prior mean.
    pub mean: S,
}

impl<S: Scalar> KernelConfig<S> {
    pub fn validate(&self) -> Result<(), GpError> {
        if !(self.signal_variance > S::zero()) {
            return Err(GpError::BadConfig("signal variance must be positive".into()));
        }
        if self.lengthscales.iter().any(|l| !(*l > S::zero())) {
            return Err(GpError::BadConfig("lengthscales must be positive".into()));
        }
        if !(self.noise_variance >= S::zero()) || !self.noise_variance.is_finite() {
            return Err(GpError::BadConfig("noise variance must be non-negative".into()));
        }
        if !self.mean.is_finite() {
            return Err(GpError::BadConfig("mean must be finite".into()));
        }
        Ok(())
    }
}

/// Training set: rows of inputs with scalar targets.
#[derive(Debug, Clone, Default)]
pub struct GpDataset<S> {
    inputs: Vec<Vec<S>>,
    targets: Vec<S>,
}

impl<S: Scalar> GpDataset<S> {
    pub fn new(inputs: Vec<Vec<S>>, targets: Vec<S>) -> Result<Self, GpError> {
        if inputs.len() != targets.len() {
            return Err(GpError::LengthMismatch {
                inputs: inputs.len(),
                targets: targets.len(),
            });
        }
        let dim = inputs.first().map_or(0, Vec::len);
        for (row, x) in inputs.iter().enumerate() {
            if x.len() != dim {
                return Err(GpError::DimensionMismatch {
                    row,
                    got: x.len(),
                    expected: dim,
                });
            }
            if x.iter().any(|v| !v.is_finite()) || !targets[row].is_finite() {
                return Err(GpError::NonFinite(row));
            }
        }
        Ok(Self { inputs, targets })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn push(&mut self, input: Vec<S>, target: S) -> Result<(), GpError> {
        if let Some(first) = self.inputs.first() {
            if input.len() != first.len() {
                return Err(GpError::DimensionMismatch {
                    row: self.inputs.len(),
                    got: input.len(),
                    expected: first.len(),
                });
            }
        }
        if input.iter().any(|v| !v.is_finite()) || !target.is_finite() {
            return Err(GpError::NonFinite(self.inputs.len()));
        }
        self.inputs.push(input);
        self.targets.push(target);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn inputs(&self) -> &[Vec<S>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[S] {
        &self.targets
    }

    pub fn target_mean(&self) -> S {
        if self.is_empty() {
            return S::zero();
        }
        let sum = self.targets.iter().fold(S::zero(), |a, &b| a + b);
        sum / cast(self.len() as f64)
    }

    pub fn target_variance(&self) -> S {
        if self.len() < 2 {
            return S::zero();
        }
        let m = self.target_mean();
        let ss = self
            .targets
            .iter()
            .fold(S::zero(), |a, &b| a + (b - m) * (b - m));
        ss / cast(self.len() as f64)
    }
}

/// `signal_variance * exp(-1/2 sum_d ((a_d - b_d)/l_d)^2)`.
pub fn kernel<S: Scalar>(a: &[S], b: &[S], cfg: &KernelConfig<S>) -> S {
    assert_eq!(a.len(), b.len(), "kernel inputs must share a dimension");
    assert_eq!(a.len(), cfg.lengthscales.len(), "lengthscale count mismatch");
    let half = cast::<S>(0.5);
    let mut q = S::zero();
    for ((&x, &y), &l) in a.iter().zip(b.iter()).zip(cfg.lengthscales.iter()) {
        let d = (x - y) / l;
        q += d * d;
    }
    cfg.signal_variance * (-half * q).exp()
}

/// Fitted model: training set plus the Cholesky factor of
/// `K(X, X) + noise I` and the solved weights `alpha`.
#[derive(Debug, Clone)]
pub struct GpModel<S> {
    config: KernelConfig<S>,
    data: GpDataset<S>,
    /// Lower-triangular factor, flat row-major `n x n`.
    chol: Vec<S>,
    alpha: Vec<S>,
    /// Jitter actually added to the diagonal (zero in the common case).
    jitter: S,
}

/// Factorize the noisy kernel matrix and precompute `alpha`; escalates
/// diagonal jitter up to `1e-4 * signal_variance` before giving up.
pub fn fit<S: Scalar>(data: GpDataset<S>, config: KernelConfig<S>) -> Result<GpModel<S>, GpError> {
    config.validate()?;
    if !data.is_empty() && data.dim() != config.lengthscales.len() {
        return Err(GpError::DimensionMismatch {
            row: 0,
            got: data.dim(),
            expected: config.lengthscales.len(),
        });
    }
    let n = data.len();
    let base = kernel_matrix(data.inputs(), &config, config.noise_variance);
    let mut chol = base.clone();
    let mut jitter = S::zero();
    if cholesky_in_place(&mut chol, n).is_err() {
        let ladder = [1e-10, 1e-8, 1e-6, 1e-4];
        let mut ok = false;
        for j in ladder {
            jitter = cast::<S>(j) * config.signal_variance;
            chol = base.clone();
            for i in 0..n {
                chol[i * n + i] += jitter;
            }
            if cholesky_in_place(&mut chol, n).is_ok() {
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(GpError::IndefiniteKernel {
                noise: config.noise_variance.as_f64(),
            });
        }
    }
    let mut alpha: Vec<S> = data.targets().iter().map(|&y| y - config.mean).collect();
    solve_lower(&chol, n, &mut alpha);
    solve_lower_transpose(&chol, n, &mut alpha);
    Ok(GpModel {
        config,
        data,
        chol,
        alpha,
        jitter,
    })
}

impl<S: Scalar> GpModel<S> {
    pub fn config(&self) -> &KernelConfig<S> {
        &self.config
    }

    pub fn data(&self) -> &GpDataset<S> {
        &self.data
    }

    pub fn jitter(&self) -> S {
        self.jitter
    }

    pub fn chol(&self) -> &[S] {
        &self.chol
    }

    pub fn alpha(&self) -> &[S] {
        &self.alpha
    }

    /// Posterior mean and variance at a query point. With no training data
    /// this is the prior `(mean, signal_variance)`.
    pub fn posterior(&self, xstar: &[S]) -> (S, S) {
        let n = self.data.len();
        if n == 0 {
            return (self.config.mean, self.config.signal_variance);
        }
        assert_eq!(
            xstar.len(),
            self.data.dim(),
            "query dimension must match training inputs"
        );
        let mut kstar: Vec<S> = self
            .data
            .inputs()
            .iter()
            .map(|xi| kernel(xstar, xi, &self.config))
            .collect();
        let mean = self.config.mean
            + kstar
                .iter()
                .zip(self.alpha.iter())
                .fold(S::zero(), |a, (&k, &al)| a + k * al);
        // variance = k(x*,x*) - || L^{-1} k* ||^2, clamped at zero.
        solve_lower(&self.chol, n, &mut kstar);
        let reduction = kstar.iter().fold(S::zero(), |a, &v| a + v * v);
        let var = (self.config.signal_variance - reduction).max(S::zero());
        (mean, var)
    }

    /// `-1/2 (y-m)' alpha - sum log diag(L) - n/2 log(2 pi)`.
    pub fn log_marginal_likelihood(&self) -> S {
        let n = self.data.len();
        let half = cast::<S>(0.5);
        let resid = self
            .data
            .targets()
            .iter()
            .zip(self.alpha.iter())
            .fold(S::zero(), |a, (&y, &al)| a + (y - self.config.mean) * al);
        let logdet = (0..n).fold(S::zero(), |a, i| a + self.chol[i * n + i].ln());
        let tau = cast::<S>(2.0 * std::f64::consts::PI);
        -half * resid - logdet - half * cast::<S>(n as f64) * tau.ln()
    }
}

/// Hyperparameter search box (absolute values, not ratios).
#[derive(Debug, Clone)]
pub struct HyperBounds<S> {
    pub signal: (S, S),
    pub lengthscale: (S, S),
    pub noise: (S, S),
}

impl<S: Scalar> HyperBounds<S> {
    /// Default box for unit-cube inputs: lengthscales span `[1e-2, 10]` of
    /// the box width, noise `[1e-8, 1]` and signal `[1e-4, 1e2]` of the
    /// target variance.
    pub fn for_unit_cube(target_variance: S) -> Self {
        let v = target_variance.max(cast(1e-8));
        Self {
            signal: (v * cast(1e-4), v * cast(1e2)),
            lengthscale: (cast(1e-2), cast(1e1)),
            noise: (v * cast(1e-8), v),
        }
    }

    fn clamp_config(&self, cfg: &mut KernelConfig<S>) {
        cfg.signal_variance = cfg.signal_variance.max(self.signal.0).min(self.signal.1);
        for l in cfg.lengthscales.iter_mut() {
            *l = (*l).max(self.lengthscale.0).min(self.lengthscale.1);
        }
        cfg.noise_variance = cfg.noise_variance.max(self.noise.0).min(self.noise.1);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HyperoptOptions {
    /// Random restarts in addition to the default-config start.
    pub random_starts: usize,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for HyperoptOptions {
    fn default() -> Self {
        Self {
            random_starts: 3,
            max_iters: 80,
            seed: 0,
        }
    }
}

/// Result of evidence maximization; `fallback` is set when every start failed
/// to produce a finite evidence and the default config was returned as-is.
#[derive(Debug, Clone)]
pub struct HyperoptResult<S> {
    pub config: KernelConfig<S>,
    pub fallback: bool,
}

/// Neutral default kernel for the given data: unit-cube lengthscale 0.5,
/// signal at the target variance, small noise, empirical mean.
pub fn default_config<S: Scalar>(data: &GpDataset<S>) -> KernelConfig<S> {
    let v = data.target_variance().max(cast(1e-8));
    KernelConfig {
        signal_variance: v,
        lengthscales: vec![cast(0.5); data.dim().max(1)],
        noise_variance: v * cast(1e-4),
        mean: data.target_mean(),
    }
}

/// Maximize the log marginal likelihood over the bounds by multi-start
/// projected BFGS in log-hyperparameter space. The default config is always
/// one of the starts, so the result is never worse than it.
pub fn optimize_hyperparameters<S: Scalar>(
    data: &GpDataset<S>,
    bounds: &HyperBounds<S>,
    opts: &HyperoptOptions,
) -> HyperoptResult<S> {
    let mut default = default_config(data);
    bounds.clamp_config(&mut default);
    if data.len() < 2 {
        return HyperoptResult {
            config: default,
            fallback: false,
        };
    }
    let dim = data.dim();
    let mean = data.target_mean();
    let mut objective = NegLogEvidence { data, mean };

    let lo: Vec<S> = std::iter::once(bounds.signal.0.ln())
        .chain(std::iter::repeat(bounds.lengthscale.0.ln()).take(dim))
        .chain(std::iter::once(bounds.noise.0.ln()))
        .collect();
    let hi: Vec<S> = std::iter::once(bounds.signal.1.ln())
        .chain(std::iter::repeat(bounds.lengthscale.1.ln()).take(dim))
        .chain(std::iter::once(bounds.noise.1.ln()))
        .collect();
    let box_bounds = Bounds::new(lo.clone(), hi.clone());
    let min_opts = MinimizeOptions {
        tol: cast(1e-5),
        max_iters: opts.max_iters,
        ..Default::default()
    };

    let mut starts: Vec<Vec<S>> = vec![pack(&default)];
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 0..opts.random_starts {
        let start: Vec<S> = lo
            .iter()
            .zip(hi.iter())
            .map(|(&l, &h)| {
                let u: f64 = rng.gen_range(0.0..=1.0);
                l + (h - l) * cast(u)
            })
            .collect();
        starts.push(start);
    }

    let mut best: Option<(S, Vec<S>)> = None;
    for start in &starts {
        if !objective.value(start).is_finite() {
            continue;
        }
        let out = minimize_box(&mut objective, start, &box_bounds, &min_opts);
        if out.value.is_finite() && best.as_ref().map_or(true, |(v, _)| out.value < *v) {
            best = Some((out.value, out.x));
        }
    }

    match best {
        Some((_, psi)) => HyperoptResult {
            config: unpack(&psi, mean),
            fallback: false,
        },
        None => {
            log::warn!("evidence maximization failed from every start; keeping default kernel");
            HyperoptResult {
                config: default,
                fallback: true,
            }
        }
    }
}

fn pack<S: Scalar>(cfg: &KernelConfig<S>) -> Vec<S> {
    std::iter::once(cfg.signal_variance.ln())
        .chain(cfg.lengthscales.iter().map(|l| l.ln()))
        .chain(std::iter::once(cfg.noise_variance.ln()))
        .collect()
}

fn unpack<S: Scalar>(psi: &[S], mean: S) -> KernelConfig<S> {
    let d = psi.len() - 2;
    KernelConfig {
        signal_variance: psi[0].exp(),
        lengthscales: psi[1..=d].iter().map(|p| p.exp()).collect(),
        noise_variance: psi[d + 1].exp(),
        mean,
    }
}

/// Negative log marginal likelihood over log-hyperparameters, with the
/// analytic gradient `d(-LML)/d(log eta_j)`.
struct NegLogEvidence<'a, S: Scalar> {
    data: &'a GpDataset<S>,
    mean: S,
}

impl<S: Scalar> NegLogEvidence<'_, S> {
    /// Returns `(-lml, grad)`; non-finite value when the factorization fails.
    fn eval(&self, psi: &[S], want_grad: bool) -> (S, Vec<S>) {
        let cfg = unpack(psi, self.mean);
        let n = self.data.len();
        let d = self.data.dim();
        let mut k = kernel_matrix(self.data.inputs(), &cfg, cfg.noise_variance);
        let mut chol = k.clone();
        if cholesky_in_place(&mut chol, n).is_err() {
            return (S::infinity(), vec![S::zero(); psi.len()]);
        }
        let mut alpha: Vec<S> = self.data.targets().iter().map(|&y| y - self.mean).collect();
        solve_lower(&chol, n, &mut alpha);
        solve_lower_transpose(&chol, n, &mut alpha);
        let half = cast::<S>(0.5);
        let resid = self
            .data
            .targets()
            .iter()
            .zip(alpha.iter())
            .fold(S::zero(), |a, (&y, &al)| a + (y - self.mean) * al);
        let logdet = (0..n).fold(S::zero(), |a, i| a + chol[i * n + i].ln());
        let tau: S = cast(2.0 * std::f64::consts::PI);
        let lml = -half * resid - logdet - half * cast::<S>(n as f64) * tau.ln();
        if !want_grad {
            return (-lml, Vec::new());
        }

        // P = alpha alpha' - K^{-1}; d LML / d eta = 1/2 tr(P dK/d eta).
        let kinv = invert_from_cholesky(&chol, n);
        let mut p = vec![S::zero(); n * n];
        for i in 0..n {
            for j in 0..n {
                p[i * n + j] = alpha[i] * alpha[j] - kinv[i * n + j];
            }
        }
        // Reuse k as sigma_f^2 R by stripping the noise diagonal.
        for i in 0..n {
            k[i * n + i] -= cfg.noise_variance;
        }
        let mut grad = vec![S::zero(); psi.len()];
        let mut g_signal = S::zero();
        let mut g_noise = S::zero();
        let mut g_ls = vec![S::zero(); d];
        for i in 0..n {
            g_noise += p[i * n + i];
            for j in 0..n {
                let pk = p[i * n + j] * k[i * n + j];
                g_signal += pk;
                let xi = &self.data.inputs()[i];
                let xj = &self.data.inputs()[j];
                for (dd, g) in g_ls.iter_mut().enumerate() {
                    let diff = (xi[dd] - xj[dd]) / cfg.lengthscales[dd];
                    *g += pk * diff * diff;
                }
            }
        }
        // Negative LML gradient in log space.
        grad[0] = -half * g_signal;
        for (dd, g) in g_ls.iter().enumerate() {
            grad[1 + dd] = -half * *g;
        }
        grad[d + 1] = -half * g_noise * cfg.noise_variance;
        (-lml, grad)
    }
}

impl<S: Scalar> Objective<S> for NegLogEvidence<'_, S> {
    fn value(&mut self, psi: &[S]) -> S {
        self.eval(psi, false).0
    }

    fn value_grad(&mut self, psi: &[S], grad: &mut [S]) -> S {
        let (v, g) = self.eval(psi, true);
        if g.len() == grad.len() {
            grad.copy_from_slice(&g);
        }
        v
    }
}

fn kernel_matrix<S: Scalar>(inputs: &[Vec<S>], cfg: &KernelConfig<S>, noise: S) -> Vec<S> {
    let n = inputs.len();
    let mut k = vec![S::zero(); n * n];
    for i in 0..n {
        for j in 0..=i {
            let v = kernel(&inputs[i], &inputs[j], cfg);
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
        k[i * n + i] += noise;
    }
    k
}

/// In-place lower Cholesky of a flat row-major symmetric matrix.
fn cholesky_in_place<S: Scalar>(a: &mut [S], n: usize) -> Result<(), ()> {
    for j in 0..n {
        let mut diag = a[j * n + j];
        for k in 0..j {
            diag -= a[j * n + k] * a[j * n + k];
        }
        if !(diag > S::zero()) || !diag.is_finite() {
            return Err(());
        }
        let root = diag.sqrt();
        a[j * n + j] = root;
        for i in (j + 1)..n {
            let mut v = a[i * n + j];
            for k in 0..j {
                v -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = v / root;
        }
        for k in (j + 1)..n {
            a[j * n + k] = S::zero();
        }
    }
    Ok(())
}

/// Solve `L x = b` in place.
fn solve_lower<S: Scalar>(l: &[S], n: usize, b: &mut [S]) {
    for i in 0..n {
        let mut v = b[i];
        for k in 0..i {
            v -= l[i * n + k] * b[k];
        }
        b[i] = v / l[i * n + i];
    }
}

/// Solve `L' x = b` in place.
fn solve_lower_transpose<S: Scalar>(l: &[S], n: usize, b: &mut [S]) {
    for i in (0..n).rev() {
        let mut v = b[i];
        for k in (i + 1)..n {
            v -= l[k * n + i] * b[k];
        }
        b[i] = v / l[i * n + i];
    }
}

/// `(L L')^{-1}` from the Cholesky factor.
fn invert_from_cholesky<S: Scalar>(l: &[S], n: usize) -> Vec<S> {
    let mut inv = vec![S::zero(); n * n];
    for col in 0..n {
        let mut e = vec![S::zero(); n];
        e[col] = S::one();
        solve_lower(l, n, &mut e);
        solve_lower_transpose(l, n, &mut e);
        for row in 0..n {
            inv[row * n + col] = e[row];
        }
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg1(signal: f64, ls: f64, noise: f64, mean: f64) -> KernelConfig<f64> {
        KernelConfig {
            signal_variance: signal,
            lengthscales: vec![ls],
            noise_variance: noise,
            mean,
        }
    }

    #[test]
    fn kernel_basics() {
        let cfg = cfg1(1.0, 1.0, 0.0, 0.0);
        assert_eq!(kernel(&[0.3], &[0.3], &cfg), 1.0);
        assert_relative_eq!(
            kernel(&[0.0], &[1.0], &cfg),
            (-0.5f64).exp(),
            max_relative = 1e-15
        );
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = KernelConfig {
            signal_variance: 2.3,
            lengthscales: vec![0.4, 1.7, 0.9],
            noise_variance: 0.0,
            mean: 0.0,
        };
        for _ in 0..20 {
            let a: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            assert_eq!(kernel(&a, &b, &cfg), kernel(&b, &a, &cfg));
        }
    }

    #[test]
    fn single_point_alpha_formula() {
        let data = GpDataset::new(vec![vec![0.2]], vec![1.7]).unwrap();
        let cfg = cfg1(1.5, 1.0, 0.1, 0.0);
        let model = fit(data, cfg).unwrap();
        assert_relative_eq!(model.alpha()[0], 1.7 / 1.6, max_relative = 1e-12);
    }

    #[test]
    fn single_point_lml_formula() {
        let data = GpDataset::new(vec![vec![0.2]], vec![1.7]).unwrap();
        let cfg = cfg1(1.5, 1.0, 0.1, 0.0);
        let model = fit(data, cfg).unwrap();
        let s = 1.6f64;
        let expected = -0.5 * 1.7 * 1.7 / s - 0.5 * s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert_relative_eq!(model.log_marginal_likelihood(), expected, max_relative = 1e-12);
    }

    #[test]
    fn duplicate_inputs_fit_with_noise() {
        let data = GpDataset::new(vec![vec![0.5], vec![0.5]], vec![1.0, 1.2]).unwrap();
        let model = fit(data, cfg1(1.0, 1.0, 0.1, 0.0)).unwrap();
        assert!(model.jitter() == 0.0);
    }

    #[test]
    fn refit_is_deterministic() {
        let data = GpDataset::new(vec![vec![0.1], vec![0.7], vec![0.4]], vec![0.3, -0.2, 0.9])
            .unwrap();
        let a = fit(data.clone(), cfg1(1.0, 0.5, 0.01, 0.2)).unwrap();
        let b = fit(data, cfg1(1.0, 0.5, 0.01, 0.2)).unwrap();
        assert_eq!(a.alpha(), b.alpha());
        assert_eq!(a.chol(), b.chol());
    }

    #[test]
    fn empty_dataset_returns_prior() {
        let model = fit(GpDataset::empty(), cfg1(2.0, 1.0, 0.1, 0.7)).unwrap();
        assert_eq!(model.posterior(&[]), (0.7, 2.0));
        assert_eq!(model.log_marginal_likelihood(), 0.0);
    }

    #[test]
    fn interpolation_limit_at_training_points() {
        let data = GpDataset::new(
            vec![vec![0.1, 0.9], vec![0.8, 0.2], vec![0.5, 0.5]],
            vec![1.0, -0.5, 0.3],
        )
        .unwrap();
        let cfg = KernelConfig {
            signal_variance: 1.0,
            lengthscales: vec![0.7, 0.7],
            noise_variance: 1e-12,
            mean: 0.0,
        };
        let model = fit(data.clone(), cfg).unwrap();
        for (x, y) in data.inputs().iter().zip(data.targets()) {
            let (m, v) = model.posterior(x);
            assert_relative_eq!(m, *y, epsilon = 1e-8);
            assert!(v >= 0.0 && v <= 1e-8, "variance {v}");
        }
    }

    /// Posterior via Cholesky equals posterior via explicit 2x2 inversion.
    #[test]
    fn two_point_dense_inversion_oracle() {
        let x0 = vec![0.2];
        let x1 = vec![0.9];
        let data = GpDataset::new(vec![x0.clone(), x1.clone()], vec![0.8, -0.3]).unwrap();
        let cfg = cfg1(1.3, 0.6, 0.05, 0.1);
        let model = fit(data, cfg.clone()).unwrap();

        let k00 = kernel(&x0, &x0, &cfg) + cfg.noise_variance;
        let k11 = kernel(&x1, &x1, &cfg) + cfg.noise_variance;
        let k01 = kernel(&x0, &x1, &cfg);
        let det = k00 * k11 - k01 * k01;
        let inv = [k11 / det, -k01 / det, -k01 / det, k00 / det];
        let y = [0.8 - cfg.mean, -0.3 - cfg.mean];
        let xs = vec![0.55];
        let ks = [kernel(&xs, &x0, &cfg), kernel(&xs, &x1, &cfg)];
        let mean = cfg.mean
            + ks[0] * (inv[0] * y[0] + inv[1] * y[1])
            + ks[1] * (inv[2] * y[0] + inv[3] * y[1]);
        let var = kernel(&xs, &xs, &cfg)
            - ks[0] * (inv[0] * ks[0] + inv[1] * ks[1])
            - ks[1] * (inv[2] * ks[0] + inv[3] * ks[1]);
        let (pm, pv) = model.posterior(&xs);
        assert_relative_eq!(pm, mean, epsilon = 1e-10);
        assert_relative_eq!(pv, var, epsilon = 1e-10);
    }

    #[test]
    fn posterior_variance_bounded_by_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let inputs: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..3).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect();
        let targets: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let data = GpDataset::new(inputs, targets).unwrap();
        let cfg = KernelConfig {
            signal_variance: 1.9,
            lengthscales: vec![0.4, 0.8, 0.3],
            noise_variance: 0.05,
            mean: 0.0,
        };
        let model = fit(data, cfg).unwrap();
        for _ in 0..1000 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.5..1.5)).collect();
            let (_, v) = model.posterior(&x);
            assert!(v >= 0.0);
            assert!(v <= 1.9 + 1e-12);
        }
    }

    #[test]
    fn adding_a_point_never_increases_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut inputs: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..2).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect();
        let mut targets: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cfg = KernelConfig {
            signal_variance: 1.0,
            lengthscales: vec![0.5, 0.5],
            noise_variance: 0.01,
            mean: 0.0,
        };
        let small = fit(GpDataset::new(inputs.clone(), targets.clone()).unwrap(), cfg.clone())
            .unwrap();
        inputs.push(vec![rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]);
        targets.push(rng.gen_range(-1.0..1.0));
        let large = fit(GpDataset::new(inputs, targets).unwrap(), cfg).unwrap();
        for _ in 0..100 {
            let x: Vec<f64> = (0..2).map(|_| rng.gen_range(0.0..1.0)).collect();
            let (_, v_small) = small.posterior(&x);
            let (_, v_large) = large.posterior(&x);
            assert!(v_large <= v_small + 1e-8);
        }
    }

    #[test]
    fn zero_targets_zero_mean_posterior() {
        let data = GpDataset::new(vec![vec![0.1], vec![0.5], vec![0.9]], vec![0.0; 3]).unwrap();
        let model = fit(data, cfg1(1.0, 0.3, 0.01, 0.0)).unwrap();
        for &x in &[0.0, 0.2, 0.4, 0.6, 0.8, 1.0] {
            let (m, _) = model.posterior(&[x]);
            assert!(m.abs() < 1e-12);
        }
    }

    #[test]
    fn lml_invariant_under_row_permutation() {
        let inputs = vec![vec![0.1], vec![0.5], vec![0.9], vec![0.3]];
        let targets = vec![1.0, -0.4, 0.2, 0.7];
        let cfg = cfg1(1.2, 0.4, 0.05, 0.1);
        let a = fit(GpDataset::new(inputs.clone(), targets.clone()).unwrap(), cfg.clone())
            .unwrap()
            .log_marginal_likelihood();
        let perm = [2usize, 0, 3, 1];
        let b = fit(
            GpDataset::new(
                perm.iter().map(|&i| inputs[i].clone()).collect(),
                perm.iter().map(|&i| targets[i]).collect(),
            )
            .unwrap(),
            cfg,
        )
        .unwrap()
        .log_marginal_likelihood();
        assert_relative_eq!(a, b, epsilon = 1e-10);
    }

    #[test]
    fn lml_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs: Vec<Vec<f64>> = (0..7)
            .map(|_| (0..2).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect();
        let targets: Vec<f64> = (0..7).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let data = GpDataset::new(inputs, targets).unwrap();
        let mean = data.target_mean();
        let mut obj = NegLogEvidence { data: &data, mean };
        let psi: Vec<f64> = vec![0.3f64.ln(), 0.6f64.ln(), 0.4f64.ln(), 0.01f64.ln()];
        let mut grad = vec![0.0; 4];
        obj.value_grad(&psi, &mut grad);
        let h = 1e-6;
        for j in 0..4 {
            let mut up = psi.clone();
            let mut dn = psi.clone();
            up[j] += h;
            dn[j] -= h;
            let fd = (obj.value(&up) - obj.value(&dn)) / (2.0 * h);
            assert_relative_eq!(grad[j], fd, max_relative = 1e-5, epsilon = 1e-7);
        }
    }

    #[test]
    fn hyperopt_beats_default_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let inputs: Vec<Vec<f64>> = (0..15).map(|_| vec![rng.gen_range(0.0..1.0)]).collect();
        let targets: Vec<f64> = inputs
            .iter()
            .map(|x| (6.0 * x[0]).sin() + 0.01 * rng.gen_range(-1.0..1.0))
            .collect();
        let data = GpDataset::new(inputs, targets).unwrap();
        let bounds = HyperBounds::for_unit_cube(data.target_variance());
        let opts = HyperoptOptions::default();
        let r1 = optimize_hyperparameters(&data, &bounds, &opts);
        let r2 = optimize_hyperparameters(&data, &bounds, &opts);
        assert!(!r1.fallback);
        assert_eq!(r1.config, r2.config);

        let mut default = default_config(&data);
        bounds.clamp_config(&mut default);
        let lml_default = fit(data.clone(), default).unwrap().log_marginal_likelihood();
        let lml_opt = fit(data, r1.config).unwrap().log_marginal_likelihood();
        assert!(lml_opt >= lml_default - 1e-9, "{lml_opt} < {lml_default}");
    }

    /// Draw data from a known 1-D GP (lengthscale 0.3) and check the fitted
    /// lengthscale lands within a factor of two in at least 8 of 10 seeds.
    #[test]
    fn hyperopt_recovers_known_lengthscale() {
        let true_cfg = cfg1(1.0, 0.3, 1e-4, 0.0);
        let n = 60;
        let mut hits = 0;
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let inputs: Vec<Vec<f64>> = (0..n)
                .map(|i| vec![i as f64 / (n - 1) as f64 + 1e-3 * rng.gen_range(-1.0..1.0)])
                .collect();
            // Sample y ~ N(0, K) via the Cholesky factor.
            let mut k = kernel_matrix(&inputs, &true_cfg, 1e-6);
            cholesky_in_place(&mut k, n).unwrap();
            let normals: Vec<f64> = (0..n)
                .map(|_| {
                    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                })
                .collect();
            let targets: Vec<f64> = (0..n)
                .map(|i| (0..=i).map(|j| k[i * n + j] * normals[j]).sum())
                .collect();
            let data = GpDataset::new(inputs, targets).unwrap();
            let bounds = HyperBounds::for_unit_cube(data.target_variance());
            let opts = HyperoptOptions {
                seed,
                ..Default::default()
            };
            let result = optimize_hyperparameters(&data, &bounds, &opts);
            let ls = result.config.lengthscales[0];
            if (0.15..=0.6).contains(&ls) {
                hits += 1;
            }
        }
        assert!(hits >= 8, "recovered lengthscale in only {hits}/10 seeds");
    }

    #[test]
    fn works_in_f32() {
        let data =
            GpDataset::<f32>::new(vec![vec![0.1], vec![0.6]], vec![1.0, -0.5]).unwrap();
        let model = fit(
            data,
            KernelConfig {
                signal_variance: 1.0f32,
                lengthscales: vec![0.5],
                noise_variance: 0.01,
                mean: 0.0,
            },
        )
        .unwrap();
        let (m, v) = model.posterior(&[0.35]);
        assert!(m.is_finite() && v >= 0.0);
    }

    #[test]
    fn rejects_bad_data() {
        assert!(GpDataset::new(vec![vec![0.1]], vec![]).is_err());
        assert!(GpDataset::new(vec![vec![0.1], vec![0.2, 0.3]], vec![1.0, 2.0]).is_err());
        assert!(GpDataset::new(vec![vec![f64::NAN]], vec![1.0]).is_err());
    }
}
