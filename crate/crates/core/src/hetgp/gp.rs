//! Single-output GP regression with a per-point noise diagonal, plus
//! marginal-likelihood hyperparameter fitting.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::kernel::KernelParams;
use crate::error::{Error, Result};
use crate::linalg::{gemm, MatRef};

pub(crate) const JITTER_LADDER: [f64; 5] = [1e-8, 1e-7, 1e-6, 1e-5, 1e-4];
pub(crate) const NOISE_VAR_MIN: f64 = 1e-6;
const NOISE_VAR_MAX: f64 = 1e3;

pub(crate) const FIT_ITERATIONS: usize = 200;
pub(crate) const FIT_STEP: f64 = 0.01;
/// Largest accepted change of any log-parameter in one ascent step.
const MAX_LOG_STEP: f64 = 1.0;
const MAX_HALVINGS: usize = 12;
/// Accepted steps grow the step size by this factor, up to [`MAX_STEP`].
const STEP_GROWTH: f64 = 1.3;
const MAX_STEP: f64 = 1.0;
/// Relative likelihood gain below which the ascent stops.
const CONVERGED_GAIN: f64 = 1e-6;

/// Row-major `len x dim` input matrix shared between the GPs of one model.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Inputs {
    pub data: Arc<Vec<f64>>,
    pub dim: usize,
}

impl Inputs {
    pub fn new(data: Vec<f64>, dim: usize) -> Self {
        assert!(dim > 0 && data.len() % dim == 0);
        Self { data: Arc::new(data), dim }
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn kernel_matrix(&self, k: &KernelParams) -> DMatrix<f64> {
        let n = self.len();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = k.signal_variance;
            for j in 0..i {
                let v = k.eval(self.row(i), self.row(j));
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }

    pub fn cross(&self, k: &KernelParams, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.len(), (0..self.len()).map(|i| k.eval(self.row(i), x)))
    }
}

/// Cholesky factor of `a`, escalating diagonal jitter through
/// [`JITTER_LADDER`] if `a` is not numerically positive definite. Returns the
/// factor and the jitter that was needed.
pub(crate) fn factor_with_jitter(a: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if let Some(c) = Cholesky::new(a.clone()) {
        return Ok((c, 0.0));
    }
    for &j in &JITTER_LADDER {
        let mut b = a.clone();
        for i in 0..b.nrows() {
            b[(i, i)] += j;
        }
        if let Some(c) = Cholesky::new(b) {
            return Ok((c, j));
        }
    }
    Err(Error::FitFailure(format!(
        "covariance not positive definite after jitter {:e}",
        JITTER_LADDER[JITTER_LADDER.len() - 1]
    )))
}

/// `A^-1` from its Cholesky factor `L`: `L^-1` by forward substitution, then
/// `L^-T L^-1` as one matrix product. Row-major `n x n`.
pub(crate) fn spd_inverse(chol: &Cholesky<f64, Dyn>) -> Vec<f64> {
    let l = chol.l_dirty();
    let n = l.nrows();
    let mut lr = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..=i {
            lr[i * n + k] = l[(i, k)];
        }
    }
    // Column j of L^-1 stored contiguously: m[j * n + i] = (L^-1)[i][j].
    let mut m = vec![0.0; n * n];
    for j in 0..n {
        let col = &mut m[j * n..(j + 1) * n];
        col[j] = 1.0 / lr[j * n + j];
        for i in j + 1..n {
            let row = &lr[i * n + j..i * n + i];
            let mut s = 0.0;
            for (a, b) in row.iter().zip(&col[j..i]) {
                s += a * b;
            }
            col[i] = -s / lr[i * n + i];
        }
    }
    let mut out = vec![0.0; n * n];
    let mt = MatRef::row_major(&m, n, n);
    gemm(1.0, mt, mt.t(), 0.0, &mut out);
    out
}

/// A conditioned single-output GP with prior mean `prior_mean` and noise
/// covariance `diag(noise)`.
#[derive(Clone, Debug)]
pub(crate) struct ConditionedGp {
    pub kernel: KernelParams,
    pub prior_mean: f64,
    pub inputs: Inputs,
    pub targets: Vec<f64>,
    pub chol: Cholesky<f64, Dyn>,
    #[cfg_attr(not(test), allow(dead_code))]
    pub jitter: f64,
    pub alpha: DVector<f64>,
}

impl ConditionedGp {
    pub fn new(
        inputs: Inputs,
        targets: Vec<f64>,
        kernel: KernelParams,
        noise: Vec<f64>,
        prior_mean: f64,
    ) -> Result<Self> {
        assert_eq!(targets.len(), inputs.len());
        assert_eq!(noise.len(), inputs.len());
        let mut k = inputs.kernel_matrix(&kernel);
        for (i, s) in noise.iter().enumerate() {
            k[(i, i)] += s;
        }
        let (chol, jitter) = factor_with_jitter(&k)?;
        let y = DVector::from_iterator(targets.len(), targets.iter().map(|t| t - prior_mean));
        let alpha = chol.solve(&y);
        Ok(Self {
            kernel,
            prior_mean,
            inputs,
            targets,
            chol,
            jitter,
            alpha,
        })
    }

    pub fn mean(&self, x: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..self.inputs.len() {
            s += self.kernel.eval(self.inputs.row(i), x) * self.alpha[i];
        }
        self.prior_mean + s
    }

    /// Posterior mean and latent-function variance `k(x,x) - k*^T (K+K_N)^-1 k*`
    /// (unclamped; may be slightly negative from round-off).
    pub fn mean_and_latent_var(&self, x: &[f64]) -> (f64, f64) {
        let ks = self.inputs.cross(&self.kernel, x);
        let mean = self.prior_mean + ks.dot(&self.alpha);
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&ks)
            .expect("cholesky factor has a nonzero diagonal");
        (mean, self.kernel.signal_variance - v.norm_squared())
    }

    /// Reconstructs `L L^T` for cache-consistency checks.
    #[cfg(test)]
    pub fn reconstructed(&self) -> DMatrix<f64> {
        let l = self.chol.l();
        &l * l.transpose()
    }
}

/// How observation noise enters a hyperparameter fit.
#[derive(Clone, Debug)]
pub(crate) enum NoiseSpec {
    /// One learned variance shared by all points, starting from this value.
    Learned(f64),
    /// A fixed per-point variance diagonal.
    Fixed(Vec<f64>),
}

#[derive(Clone, Debug)]
pub(crate) struct FitResult {
    pub kernel: KernelParams,
    /// Fitted homoscedastic variance (`None` for a fixed diagonal).
    pub noise_var: Option<f64>,
}

struct Objective<'a> {
    inputs: &'a Inputs,
    centered: DVector<f64>,
    /// Per-dimension squared differences for each pair `j < i`, pairs in
    /// row order, dimensions contiguous.
    sqdist: Vec<f64>,
    noise: &'a NoiseSpec,
}

impl<'a> Objective<'a> {
    fn new(inputs: &'a Inputs, targets: &[f64], prior_mean: f64, noise: &'a NoiseSpec) -> Self {
        let n = inputs.len();
        let mut sqdist = Vec::with_capacity(n * n.saturating_sub(1) / 2 * inputs.dim);
        for i in 0..n {
            for j in 0..i {
                for (a, b) in inputs.row(i).iter().zip(inputs.row(j)) {
                    sqdist.push((a - b) * (a - b));
                }
            }
        }
        Self {
            inputs,
            centered: DVector::from_iterator(n, targets.iter().map(|t| t - prior_mean)),
            sqdist,
            noise,
        }
    }

    fn n_params(&self) -> usize {
        1 + self.inputs.dim + matches!(self.noise, NoiseSpec::Learned(_)) as usize
    }

    /// Log marginal likelihood and its gradient in log-parameters.
    fn eval(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let d = self.inputs.dim;
        let n = self.inputs.len();
        let kp = KernelParams::from_log(&theta[..=d]);
        let inv_l2: Vec<f64> = kp.lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
        let kf: Vec<f64> = self
            .sqdist
            .chunks_exact(d.max(1))
            .map(|sq| {
                let s: f64 = sq.iter().zip(&inv_l2).map(|(a, b)| a * b).sum();
                kp.signal_variance * (-0.5 * s).exp()
            })
            .collect();
        let mut k = DMatrix::zeros(n, n);
        let mut p = 0;
        for i in 0..n {
            k[(i, i)] = kp.signal_variance;
            for j in 0..i {
                k[(i, j)] = kf[p];
                k[(j, i)] = kf[p];
                p += 1;
            }
        }
        let learned_var = match self.noise {
            NoiseSpec::Learned(_) => {
                let s = theta[d + 1].exp().clamp(NOISE_VAR_MIN, NOISE_VAR_MAX);
                for i in 0..n {
                    k[(i, i)] += s;
                }
                Some(s)
            }
            NoiseSpec::Fixed(diag) => {
                for i in 0..n {
                    k[(i, i)] += diag[i];
                }
                None
            }
        };
        let (chol, _) = factor_with_jitter(&k)?;
        let alpha = chol.solve(&self.centered);
        let log_det_half: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
        let lml = -0.5 * self.centered.dot(&alpha) - log_det_half - 0.5 * n as f64 * (2.0 * PI).ln();
        if !lml.is_finite() {
            return Err(Error::FitFailure("non-finite marginal likelihood".into()));
        }
        let kinv = spd_inverse(&chol);
        let mut grad = vec![0.0; self.n_params()];
        let mut trace_w = 0.0;
        let mut gl = vec![0.0; d];
        let mut p = 0;
        for i in 0..n {
            let ki = &kinv[i * n..(i + 1) * n];
            let wii = alpha[i] * alpha[i] - ki[i];
            trace_w += wii;
            grad[0] += wii * kp.signal_variance;
            for j in 0..i {
                // Off-diagonal pairs appear twice in the trace.
                let wk = 2.0 * (alpha[i] * alpha[j] - ki[j]) * kf[p];
                grad[0] += wk;
                for (g, sq) in gl.iter_mut().zip(&self.sqdist[p * d..(p + 1) * d]) {
                    *g += wk * sq;
                }
                p += 1;
            }
        }
        for (g, w) in grad[1..=d].iter_mut().zip(gl.iter().zip(&inv_l2)) {
            *g = w.0 * w.1;
        }
        for g in grad.iter_mut().take(d + 1) {
            *g *= 0.5;
        }
        if let Some(s) = learned_var {
            grad[d + 1] = 0.5 * s * trace_w;
        }
        Ok((lml, grad))
    }
}

fn clamp_log_params(theta: &mut [f64], dim: usize) {
    theta[0] = theta[0].clamp(1e-10f64.ln(), 1e8f64.ln());
    for t in &mut theta[1..=dim] {
        *t = t.clamp(super::kernel::LENGTHSCALE_MIN.ln(), super::kernel::LENGTHSCALE_MAX.ln());
    }
    if theta.len() > dim + 1 {
        theta[dim + 1] = theta[dim + 1].clamp(NOISE_VAR_MIN.ln(), NOISE_VAR_MAX.ln());
    }
}

/// Maximizes the log marginal likelihood by gradient ascent on
/// log-parameters: at most [`FIT_ITERATIONS`] steps starting at size
/// [`FIT_STEP`], growing the step after each accepted move and halving it
/// whenever it would decrease the likelihood (so the result never has a
/// lower likelihood than `init`).
pub(crate) fn fit_hyperparameters(
    inputs: &Inputs,
    targets: &[f64],
    prior_mean: f64,
    init: &KernelParams,
    noise: &NoiseSpec,
) -> Result<FitResult> {
    let obj = Objective::new(inputs, targets, prior_mean, noise);
    let d = inputs.dim;
    let mut theta = init.to_log();
    if let NoiseSpec::Learned(v0) = noise {
        theta.push(v0.max(NOISE_VAR_MIN).ln());
    }
    clamp_log_params(&mut theta, d);
    let (mut f, mut g) = obj.eval(&theta)?;
    let mut step = FIT_STEP;
    for _ in 0..FIT_ITERATIONS {
        let mut gain = None;
        for _ in 0..MAX_HALVINGS {
            let mut cand: Vec<f64> = theta
                .iter()
                .zip(&g)
                .map(|(t, gi)| t + (step * gi).clamp(-MAX_LOG_STEP, MAX_LOG_STEP))
                .collect();
            clamp_log_params(&mut cand, d);
            if let Ok((fc, gc)) = obj.eval(&cand) {
                if fc >= f {
                    gain = Some(fc - f);
                    theta = cand;
                    f = fc;
                    g = gc;
                    break;
                }
            }
            step *= 0.5;
        }
        match gain {
            Some(df) if df > CONVERGED_GAIN * (1.0 + f.abs()) => step = (step * STEP_GROWTH).min(MAX_STEP),
            _ => break,
        }
    }
    Ok(FitResult {
        kernel: KernelParams::from_log(&theta[..=d]),
        noise_var: match noise {
            NoiseSpec::Learned(_) => Some(theta[d + 1].exp().clamp(NOISE_VAR_MIN, NOISE_VAR_MAX)),
            NoiseSpec::Fixed(_) => None,
        },
    })
}

/// Log marginal likelihood of `targets` under the given hyperparameters.
pub(crate) fn log_marginal_likelihood(
    inputs: &Inputs,
    targets: &[f64],
    prior_mean: f64,
    kernel: &KernelParams,
    noise_var: f64,
) -> Result<f64> {
    let spec = NoiseSpec::Learned(noise_var);
    let obj = Objective::new(inputs, targets, prior_mean, &spec);
    let mut theta = kernel.to_log();
    theta.push(noise_var.ln());
    obj.eval(&theta).map(|(f, _)| f)
}
