//! Set-valued state estimator: GP posterior to axis-aligned confidence ellipsoid.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_lr;

use crate::dynamics::StateVector;
use crate::error::{contract, ensure_dim, Result};
use crate::hetgp::HetGpModel;

pub const DEFAULT_DELTA: f64 = 0.95;
pub const DEFAULT_MIN_SEMIAXIS: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub delta: f64,
    pub min_semiaxis: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            delta: DEFAULT_DELTA,
            min_semiaxis: DEFAULT_MIN_SEMIAXIS,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(contract(format!("delta must lie in (0,1), got {}", self.delta)));
        }
        if !(self.min_semiaxis > 0.0 && self.min_semiaxis.is_finite()) {
            return Err(contract("min_semiaxis must be positive"));
        }
        Ok(())
    }
}

/// `{x : sum_i ((x_i - c_i) / a_i)^2 <= 1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: StateVector,
    pub semiaxes: StateVector,
}

impl Ellipsoid {
    pub fn new(center: StateVector, semiaxes: StateVector) -> Result<Self> {
        ensure_dim("semiaxes", center.len(), semiaxes.len())?;
        if !semiaxes.iter().all(|a| *a > 0.0 && a.is_finite()) {
            return Err(contract("semiaxes must be positive and finite"));
        }
        Ok(Self { center, semiaxes })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// Normalized squared distance `(x-c)^T Q (x-c)`.
    pub fn mahalanobis_sq(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(self.center.iter().zip(self.semiaxes.iter()))
            .map(|(v, (c, a))| {
                let d = (v - c) / a;
                d * d
            })
            .sum()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        debug_assert_eq!(x.len(), self.dim());
        self.mahalanobis_sq(x) <= 1.0
    }

    /// Uniform draw from the solid ellipsoid.
    pub fn sample_uniform(&self, rng: &mut impl Rng) -> StateVector {
        let n = self.dim();
        let mut dir: Vec<f64> = Vec::with_capacity(n);
        let mut norm = 0.0;
        while norm == 0.0 {
            dir.clear();
            dir.extend((0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
            norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        let u: f64 = rng.random();
        let r = u.powf(1.0 / n as f64) / norm;
        let mut x: Vec<f64> = dir
            .iter()
            .zip(self.center.iter().zip(self.semiaxes.iter()))
            .map(|(d, (c, a))| c + a * d * r)
            .collect();
        // Rounding can push a boundary draw a hair outside.
        let m = self.mahalanobis_sq(&x);
        if m > 1.0 {
            let s = 1.0 / m.sqrt();
            for (v, c) in x.iter_mut().zip(self.center.iter()) {
                *v = c + (*v - c) * s * (1.0 - 1e-15);
            }
        }
        StateVector(x)
    }
}

/// `q` with `P(chi2_dof <= q) = delta`, by bisection to absolute tolerance 1e-10.
pub fn chi2_quantile(dof: usize, delta: f64) -> Result<f64> {
    if !(1..=16).contains(&dof) {
        return Err(contract(format!("chi-square dof must be in 1..=16, got {dof}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(contract(format!("delta must lie in (0,1), got {delta}")));
    }
    let k = dof as f64 / 2.0;
    let cdf = |q: f64| gamma_lr(k, q / 2.0);
    let mut lo = 0.0;
    let mut hi = dof as f64 + 10.0;
    while cdf(hi) < delta {
        hi *= 2.0;
    }
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < delta {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Ellipsoid from a posterior mean and std: center `x_hat + mu`, semiaxis
/// `max(sigma_i * sqrt(q), min_semiaxis)` with `q` the joint chi-square quantile.
pub fn ellipsoid_from_posterior(x_hat: &[f64], mean: &[f64], std: &[f64], cfg: &EstimatorConfig) -> Result<Ellipsoid> {
    ensure_dim("posterior mean", x_hat.len(), mean.len())?;
    ensure_dim("posterior std", x_hat.len(), std.len())?;
    let scale = chi2_quantile(x_hat.len(), cfg.delta)?.sqrt();
    let center = x_hat.iter().zip(mean).map(|(x, m)| x + m).collect();
    let semiaxes = std.iter().map(|s| (s * scale).max(cfg.min_semiaxis)).collect();
    Ok(Ellipsoid {
        center: StateVector(center),
        semiaxes: StateVector(semiaxes),
    })
}

pub fn estimate(model: &HetGpModel, cfg: &EstimatorConfig, x_hat: &[f64]) -> Result<Ellipsoid> {
    let p = model.predict_error(x_hat)?;
    ellipsoid_from_posterior(x_hat, &p.mean, &p.std, cfg)
}

/// The estimator `g` deployed in the loop: either a fitted GP or the
/// trust-the-perception baseline `g(x_hat) = {x_hat}` (floored at `min_semiaxis`).
#[derive(Clone, Debug)]
pub enum StateEstimator {
    Gp(Arc<HetGpModel>),
    Identity,
}

impl StateEstimator {
    pub fn estimate(&self, cfg: &EstimatorConfig, x_hat: &[f64]) -> Result<Ellipsoid> {
        match self {
            StateEstimator::Gp(m) => estimate(m, cfg, x_hat),
            StateEstimator::Identity => Ok(Ellipsoid {
                center: StateVector(x_hat.to_vec()),
                semiaxes: StateVector(vec![cfg.min_semiaxis; x_hat.len()]),
            }),
        }
    }

    /// `center(g(x_hat))`.
    pub fn center(&self, x_hat: &[f64]) -> StateVector {
        match self {
            StateEstimator::Gp(m) => {
                let mu = m.predict_mean(x_hat);
                StateVector(x_hat.iter().zip(mu.iter()).map(|(x, m)| x + m).collect())
            }
            StateEstimator::Identity => StateVector(x_hat.to_vec()),
        }
    }

    pub fn model(&self) -> Option<&HetGpModel> {
        match self {
            StateEstimator::Gp(m) => Some(m),
            StateEstimator::Identity => None,
        }
    }
}
