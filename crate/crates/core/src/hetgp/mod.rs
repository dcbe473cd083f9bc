//! Heteroscedastic GP regression of perception errors.
//!
//! Each state component `i` gets two GPs over perceived states: one for the
//! error `e_i = x_i - xhat_i` and one for its log noise standard deviation
//! `z_i`. Fitting follows the most-likely heteroscedastic GP scheme: a
//! homoscedastic fit, then rounds of (per-point noise from the expected squared
//! residual under the posterior, log-noise GP fit, error-GP refit under
//! `K_N = diag(exp(z_hat)^2)`).
//!
//! Predictive variance at `x*` is
//! `k(x*, x*) + exp(z_hat(x*))^2 - k*^T (K + K_N)^-1 k*`.

mod gp;
mod kernel;

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

pub use kernel::{kernel_eval, KernelParams, LENGTHSCALE_MAX, LENGTHSCALE_MIN};

use self::gp::{ConditionedGp, Inputs, NoiseSpec};
use crate::dynamics::StateVector;
use crate::error::{contract, ensure_dim, Error, Result};
use crate::io;

pub const EM_ROUNDS: usize = 3;
pub const MIN_POINTS: usize = 5;
/// Perceived states closer than this (max-norm) are merged.
pub const DUPLICATE_TOL: f64 = 1e-9;
/// Floor applied to the noise variance `exp(z_hat)^2`.
const NOISE_VAR_FLOOR: f64 = 1e-10;
/// `exp(-E[ln chi2_1])`: the log of one squared Gaussian residual
/// underestimates the log-variance by `gamma + ln 2` on average.
const CHI2_LOG_SCALE: f64 = 3.562_144_835_980_396;
const VARIANCE_CLAMP: f64 = 1e-12;

/// Pairs `(xhat_j, x_j)` of perceived and actual states.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PerceptionDataset {
    pub perceived: Vec<StateVector>,
    pub actual: Vec<StateVector>,
}

impl PerceptionDataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(pairs: Vec<(StateVector, StateVector)>) -> Result<Self> {
        let mut d = Self::new();
        for (xh, x) in pairs {
            d.push(xh, x)?;
        }
        Ok(d)
    }

    pub fn push(&mut self, perceived: StateVector, actual: StateVector) -> Result<()> {
        ensure_dim("actual state", perceived.len(), actual.len())?;
        if let Some(first) = self.perceived.first() {
            ensure_dim("perceived state", first.len(), perceived.len())?;
        }
        self.perceived.push(perceived);
        self.actual.push(actual);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.perceived.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perceived.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.perceived.first().map_or(0, |v| v.len())
    }

    /// Perception error `x_j - xhat_j`.
    pub fn error(&self, j: usize) -> Vec<f64> {
        self.actual[j]
            .iter()
            .zip(self.perceived[j].iter())
            .map(|(x, xh)| x - xh)
            .collect()
    }

    /// Copy with perceived-state duplicates (within [`DUPLICATE_TOL`]) merged:
    /// the first occurrence is kept and its actual state becomes the average
    /// over the group.
    pub fn merged(&self) -> Self {
        let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
        'outer: for j in 0..self.len() {
            for (rep, members) in groups.iter_mut() {
                let close = self.perceived[*rep]
                    .iter()
                    .zip(self.perceived[j].iter())
                    .all(|(a, b)| (a - b).abs() <= DUPLICATE_TOL);
                if close {
                    members.push(j);
                    continue 'outer;
                }
            }
            groups.push((j, vec![j]));
        }
        let mut out = Self::new();
        for (rep, members) in groups {
            let n = self.dim();
            let mut avg = vec![0.0; n];
            for &m in &members {
                for (a, v) in avg.iter_mut().zip(self.actual[m].iter()) {
                    *a += v;
                }
            }
            if members.len() == 1 {
                avg = self.actual[rep].0.clone();
            } else {
                avg.iter_mut().for_each(|a| *a /= members.len() as f64);
            }
            out.perceived.push(self.perceived[rep].clone());
            out.actual.push(StateVector(avg));
        }
        out
    }

    /// CSV with header `xhat0..xhat{n-1},x0..x{n-1}`.
    pub fn to_csv(&self) -> String {
        let n = self.dim();
        let mut header: Vec<String> = (0..n).map(|i| format!("xhat{i}")).collect();
        header.extend((0..n).map(|i| format!("x{i}")));
        let mut out = header.join(",");
        out.push('\n');
        for (xh, x) in self.perceived.iter().zip(&self.actual) {
            let row: Vec<String> = xh.iter().chain(x.iter()).map(|v| io::fmt_f64(*v)).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Parse("empty dataset file".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.len() % 2 != 0 || cols.is_empty() {
            return Err(Error::Parse(format!("bad dataset header `{header}`")));
        }
        let n = cols.len() / 2;
        for i in 0..n {
            if cols[i] != format!("xhat{i}") || cols[n + i] != format!("x{i}") {
                return Err(Error::Parse(format!("bad dataset header `{header}`")));
            }
        }
        let mut d = Self::new();
        for (lineno, line) in lines.enumerate() {
            let vals = line
                .split(',')
                .map(io::parse_f64)
                .collect::<Result<Vec<f64>>>()?;
            if vals.len() != 2 * n {
                return Err(Error::Parse(format!("row {}: expected {} fields", lineno + 2, 2 * n)));
            }
            d.push(StateVector(vals[..n].to_vec()), StateVector(vals[n..].to_vec()))?;
        }
        Ok(d)
    }
}

/// Fits a homoscedastic GP to `targets` by maximizing the log marginal
/// likelihood (gradient ascent on log-parameters, 200 iterations, step 0.01,
/// step-halving safeguard). Returns the kernel and the noise variance.
pub fn fit_homoscedastic(
    inputs: &[StateVector],
    targets: &[f64],
    init: &KernelParams,
    init_noise_var: f64,
) -> Result<(KernelParams, f64)> {
    let (inputs, _) = pack_inputs(inputs, targets.len())?;
    if inputs.len() < 2 {
        return Err(Error::InsufficientData { needed: 2, got: inputs.len() });
    }
    ensure_dim("kernel lengthscales", inputs.dim, init.dim())?;
    let fit = gp::fit_hyperparameters(&inputs, targets, 0.0, init, &NoiseSpec::Learned(init_noise_var))?;
    Ok((fit.kernel, fit.noise_var.expect("learned noise")))
}

/// Zero-mean log marginal likelihood of a homoscedastic GP.
pub fn log_marginal_likelihood(
    inputs: &[StateVector],
    targets: &[f64],
    kernel: &KernelParams,
    noise_var: f64,
) -> Result<f64> {
    let (inputs, _) = pack_inputs(inputs, targets.len())?;
    gp::log_marginal_likelihood(&inputs, targets, 0.0, kernel, noise_var)
}

fn pack_inputs(rows: &[StateVector], expected_len: usize) -> Result<(Inputs, usize)> {
    if rows.len() != expected_len {
        return Err(contract(format!(
            "{} inputs but {} targets",
            rows.len(),
            expected_len
        )));
    }
    let dim = rows.first().map_or(1, |r| r.len());
    let mut data = Vec::with_capacity(rows.len() * dim);
    for r in rows {
        ensure_dim("GP input", dim, r.len())?;
        data.extend_from_slice(r);
    }
    Ok((Inputs::new(data, dim), dim))
}

/// Hand-specified hyperparameters for one output dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputHyperparams {
    pub mean_kernel: KernelParams,
    pub noise_kernel: KernelParams,
    /// Observation-noise variance of the log-noise GP.
    #[serde(with = "io::exact")]
    pub noise_gp_variance: f64,
    /// Constant prior mean of the log-noise GP.
    #[serde(with = "io::exact")]
    pub noise_prior_mean: f64,
    /// Empirical log-noise-std targets the log-noise GP is conditioned on.
    #[serde(with = "io::exact_vec")]
    pub log_noise_targets: Vec<f64>,
}

#[derive(Clone, Debug)]
struct OutputModel {
    hyper: OutputHyperparams,
    mean_gp: ConditionedGp,
    noise_gp: ConditionedGp,
    /// `z_hat` at the training inputs.
    log_noise: Vec<f64>,
}

impl OutputModel {
    fn build(inputs: &Inputs, targets: Vec<f64>, hyper: OutputHyperparams) -> Result<Self> {
        let n = inputs.len();
        if hyper.log_noise_targets.len() != n {
            return Err(contract("log-noise targets do not match the dataset size"));
        }
        let noise_gp = ConditionedGp::new(
            inputs.clone(),
            hyper.log_noise_targets.clone(),
            hyper.noise_kernel.clone(),
            vec![hyper.noise_gp_variance; n],
            hyper.noise_prior_mean,
        )?;
        let log_noise: Vec<f64> = (0..n).map(|j| noise_gp.mean(inputs.row(j))).collect();
        let diag = log_noise.iter().map(|z| noise_variance(*z)).collect();
        let mean_gp = ConditionedGp::new(inputs.clone(), targets, hyper.mean_kernel.clone(), diag, 0.0)?;
        Ok(Self {
            hyper,
            mean_gp,
            noise_gp,
            log_noise,
        })
    }
}

#[inline]
fn noise_variance(z: f64) -> f64 {
    (2.0 * z).exp().max(NOISE_VAR_FLOOR)
}

/// Fitted per-dimension heteroscedastic GP model of the perception error.
#[derive(Debug)]
pub struct HetGpModel {
    inputs: Inputs,
    outputs: Vec<OutputModel>,
    clamps: AtomicUsize,
}

impl Clone for HetGpModel {
    fn clone(&self) -> Self {
        Self {
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
            clamps: AtomicUsize::new(self.clamps.load(Ordering::Relaxed)),
        }
    }
}

/// Posterior of the perception error at one query.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorPosterior {
    pub mean: StateVector,
    pub std: StateVector,
}

impl HetGpModel {
    /// Builds a model from explicit hyperparameters without any fitting.
    pub fn with_hyperparameters(data: &PerceptionDataset, hyper: Vec<OutputHyperparams>) -> Result<Self> {
        let data = data.merged();
        let (inputs, dim) = pack_inputs(&data.perceived, data.len())?;
        ensure_dim("output hyperparameters", dim, hyper.len())?;
        let outputs = hyper
            .into_iter()
            .enumerate()
            .map(|(i, h)| {
                let targets = (0..data.len()).map(|j| data.actual[j][i] - data.perceived[j][i]).collect();
                OutputModel::build(&inputs, targets, h)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            inputs,
            outputs,
            clamps: AtomicUsize::new(0),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.dim
    }

    pub fn n_train(&self) -> usize {
        self.inputs.len()
    }

    pub fn hyperparameters(&self) -> Vec<&OutputHyperparams> {
        self.outputs.iter().map(|o| &o.hyper).collect()
    }

    /// `z_hat_i` at the training inputs.
    pub fn training_log_noise(&self, i: usize) -> &[f64] {
        &self.outputs[i].log_noise
    }

    /// Number of predictive variances clamped to 1e-12 so far.
    pub fn clamp_count(&self) -> usize {
        self.clamps.load(Ordering::Relaxed)
    }

    /// Posterior mean of the error only (the estimator's center path).
    pub fn predict_mean(&self, x: &[f64]) -> StateVector {
        StateVector(self.outputs.iter().map(|o| o.mean_gp.mean(x)).collect())
    }

    /// Log noise std `z_hat_i(x)`.
    pub fn log_noise(&self, x: &[f64]) -> Vec<f64> {
        self.outputs.iter().map(|o| o.noise_gp.mean(x)).collect()
    }

    /// Latent-function variance `k(x,x) - k*^T (K+K_N)^-1 k*` per dimension.
    pub fn latent_variance(&self, x: &[f64]) -> Vec<f64> {
        self.outputs.iter().map(|o| o.mean_gp.mean_and_latent_var(x).1).collect()
    }

    /// Posterior mean and standard deviation of the perception error at `x`.
    pub fn predict_error(&self, x: &[f64]) -> Result<ErrorPosterior> {
        ensure_dim("query", self.inputs.dim, x.len())?;
        let mut mean = Vec::with_capacity(self.outputs.len());
        let mut std = Vec::with_capacity(self.outputs.len());
        for o in &self.outputs {
            let (m, latent) = o.mean_gp.mean_and_latent_var(x);
            let mut var = latent + noise_variance(o.noise_gp.mean(x));
            if !(var >= VARIANCE_CLAMP) {
                self.clamps.fetch_add(1, Ordering::Relaxed);
                var = VARIANCE_CLAMP;
            }
            mean.push(m);
            std.push(var.sqrt());
        }
        Ok(ErrorPosterior {
            mean: StateVector(mean),
            std: StateVector(std),
        })
    }

    pub fn to_checkpoint(&self) -> HetGpCheckpoint {
        HetGpCheckpoint {
            input_dim: self.inputs.dim,
            inputs: (0..self.inputs.len()).map(|j| self.inputs.row(j).to_vec()).collect(),
            outputs: self
                .outputs
                .iter()
                .map(|o| OutputCheckpoint {
                    hyper: o.hyper.clone(),
                    targets: o.mean_gp.targets.clone(),
                    log_noise: o.log_noise.clone(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(c: &HetGpCheckpoint) -> Result<Self> {
        let mut data = Vec::with_capacity(c.inputs.len() * c.input_dim);
        for r in &c.inputs {
            ensure_dim("checkpoint input", c.input_dim, r.len())?;
            data.extend_from_slice(r);
        }
        let inputs = Inputs::new(data, c.input_dim);
        ensure_dim("checkpoint outputs", c.input_dim, c.outputs.len())?;
        let outputs = c
            .outputs
            .iter()
            .map(|o| {
                if o.targets.len() != inputs.len() {
                    return Err(contract("checkpoint targets do not match inputs"));
                }
                OutputModel::build(&inputs, o.targets.clone(), o.hyper.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            inputs,
            outputs,
            clamps: AtomicUsize::new(0),
        })
    }
}

/// JSON checkpoint of a [`HetGpModel`]; every number is an exact decimal string.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HetGpCheckpoint {
    pub input_dim: usize,
    #[serde(with = "io::exact_matrix")]
    pub inputs: Vec<Vec<f64>>,
    pub outputs: Vec<OutputCheckpoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputCheckpoint {
    #[serde(flatten)]
    pub hyper: OutputHyperparams,
    /// Perception-error targets of this dimension.
    #[serde(with = "io::exact_vec")]
    pub targets: Vec<f64>,
    /// Latent log-noise values `z_hat` at the training inputs.
    #[serde(with = "io::exact_vec")]
    pub log_noise: Vec<f64>,
}

fn variance(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
}

fn initial_lengthscales(inputs: &Inputs) -> Vec<f64> {
    (0..inputs.dim)
        .map(|k| {
            let (lo, hi) = (0..inputs.len()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), j| {
                let v = inputs.row(j)[k];
                (lo.min(v), hi.max(v))
            });
            (0.5 * (hi - lo)).max(0.1)
        })
        .collect()
}

fn fit_output(inputs: &Inputs, targets: Vec<f64>) -> Result<OutputModel> {
    let n = inputs.len();
    let ls = initial_lengthscales(inputs);
    if targets.iter().all(|t| *t == 0.0) {
        // Exact perception along this axis: the likelihood is unbounded as
        // the variances shrink, so pin both at the floor instead of fitting.
        let z = 0.5 * NOISE_VAR_FLOOR.ln();
        let h = OutputHyperparams {
            mean_kernel: KernelParams::new(NOISE_VAR_FLOOR, ls.clone()),
            noise_kernel: KernelParams::new(1.0, ls),
            noise_gp_variance: 0.25,
            noise_prior_mean: z,
            log_noise_targets: vec![z; n],
        };
        return OutputModel::build(inputs, targets, h);
    }
    let sv = variance(&targets).max(1e-4);
    let homo = gp::fit_hyperparameters(
        inputs,
        &targets,
        0.0,
        &KernelParams::new(sv, ls.clone()),
        &NoiseSpec::Learned(0.1 * sv),
    )?;
    let homo_var = homo.noise_var.expect("learned noise");
    let mut current = ConditionedGp::new(inputs.clone(), targets.clone(), homo.kernel, vec![homo_var; n], 0.0)?;
    let mut noise_kernel = KernelParams::new(1.0, ls);
    let mut noise_gp_var = 0.25;
    let mut hyper = None;
    for _ in 0..EM_ROUNDS {
        // Empirical log-noise from the expected squared residual under the
        // latent posterior, (e_j - m_j)^2 + var_j, with the residual part
        // scaled to undo the log-chi2 bias.
        let z_targets: Vec<f64> = (0..n)
            .map(|j| {
                let (m, latent) = current.mean_and_latent_var(inputs.row(j));
                let r = targets[j] - m;
                0.5 * (CHI2_LOG_SCALE * r * r + latent.max(0.0)).max(1e-300).ln()
            })
            .collect();
        let z_mean = z_targets.iter().sum::<f64>() / n as f64;
        let zfit = gp::fit_hyperparameters(
            inputs,
            &z_targets,
            z_mean,
            &KernelParams::new(variance(&z_targets).max(0.05), noise_kernel.lengthscales.clone()),
            &NoiseSpec::Learned(noise_gp_var),
        )?;
        noise_kernel = zfit.kernel.clone();
        noise_gp_var = zfit.noise_var.expect("learned noise");
        let h = OutputHyperparams {
            mean_kernel: current.kernel.clone(),
            noise_kernel: zfit.kernel,
            noise_gp_variance: noise_gp_var,
            noise_prior_mean: z_mean,
            log_noise_targets: z_targets,
        };
        let staged = OutputModel::build(inputs, targets.clone(), h)?;
        let diag: Vec<f64> = staged.log_noise.iter().map(|z| noise_variance(*z)).collect();
        let refit = gp::fit_hyperparameters(inputs, &targets, 0.0, &current.kernel, &NoiseSpec::Fixed(diag.clone()))?;
        current = ConditionedGp::new(inputs.clone(), targets.clone(), refit.kernel, diag, 0.0)?;
        let mut h = staged.hyper;
        h.mean_kernel = current.kernel.clone();
        hyper = Some(h);
    }
    OutputModel::build(inputs, targets, hyper.expect("at least one round"))
}

/// Fits the heteroscedastic model on `data` (duplicates merged first).
/// Deterministic; output dimensions are fitted independently.
pub fn fit_heteroscedastic(data: &PerceptionDataset) -> Result<HetGpModel> {
    let data = data.merged();
    if data.len() < MIN_POINTS {
        return Err(Error::InsufficientData {
            needed: MIN_POINTS,
            got: data.len(),
        });
    }
    let (inputs, dim) = pack_inputs(&data.perceived, data.len())?;
    let outputs = crate::par::map_indexed(dim, |i| {
        let targets = (0..data.len()).map(|j| data.actual[j][i] - data.perceived[j][i]).collect();
        fit_output(&inputs, targets)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(HetGpModel {
        inputs,
        outputs,
        clamps: AtomicUsize::new(0),
    })
}

#[cfg(test)]
mod tests;
