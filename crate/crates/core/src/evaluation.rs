//! Closed-loop safety evaluation, empirical audit of the robust barrier
//! condition, and dataset density histograms.

use serde::{Deserialize, Serialize};

use crate::confset::{EstimatorConfig, StateEstimator};
use crate::dynamics::{BoxSet, ControlVector, StateVector, SystemModel};
use crate::error::{contract, Error, Result};
use crate::hetgp::PerceptionDataset;
use crate::neural::Mlp;
use crate::synthesis::cbf_residual;
use crate::{io, par, rng};

/// Zero-control rejection sampling gives up after this many draws.
pub const MAX_CRITICAL_DRAWS: usize = 1_000_000;
/// Below this acceptance rate the critical set counts as empty.
pub const MIN_ACCEPTANCE_RATE: f64 = 1e-4;
/// Inner points per ellipsoid in [`audit_cbf`].
pub const AUDIT_INNER_POINTS: usize = 64;

const STREAM_CRITICAL: u64 = 0x6372_6974_6963_616c;
const STREAM_AUDIT: u64 = 0x6175_6469_7400_0000;
/// Candidate initial states are screened in blocks of this size.
const CRITICAL_BLOCK: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub horizon_s: f64,
    pub critical_exit_s: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 500,
            horizon_s: 10.0,
            critical_exit_s: 1.0,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(Error::Config("episodes must be at least 1".into()));
        }
        if !(self.critical_exit_s > 0.0 && self.horizon_s > self.critical_exit_s) {
            return Err(Error::Config("need horizon_s > critical_exit_s > 0".into()));
        }
        Ok(())
    }
}

/// True when the closed loop leaves S (or X, or blows up) within `horizon_s`.
fn exits_safe_set<P>(sys: &SystemModel, x0: &[f64], policy: P, horizon_s: f64) -> Result<(bool, Option<f64>, Vec<StateVector>)>
where
    P: FnMut(&[f64]) -> ControlVector,
{
    match sys.rollout_until(x0, policy, horizon_s, |x| !sys.in_safe_set(x)) {
        Ok(t) => {
            let last = t.final_state();
            let out = t.left_state_space || !sys.in_safe_set(last);
            let time = out.then(|| *t.times.last().expect("nonempty"));
            Ok((out, time, t.states))
        }
        Err(Error::IntegrationBlowup { time }) => Ok((true, Some(time), Vec::new())),
        Err(e) => Err(e),
    }
}

/// Whether the unforced system leaves S within `within_s` from `x0`.
pub fn exits_under_zero_control(sys: &SystemModel, x0: &[f64], within_s: f64) -> Result<bool> {
    let m = sys.control_dim();
    Ok(exits_safe_set(sys, x0, |_| ControlVector::zeros(m), within_s)?.0)
}

/// Rejection-samples `cfg.episodes` initial states uniformly over S whose
/// zero-control rollout exits S within `cfg.critical_exit_s`. Draw `i` uses
/// its own stream, and the first accepted draws in index order are kept.
pub fn sample_critical_initial(sys: &SystemModel, cfg: &EvalConfig) -> Result<Vec<StateVector>> {
    cfg.validate()?;
    let safe = sys.safe_box();
    let seed = rng::mix(cfg.seed, STREAM_CRITICAL);
    let mut accepted = Vec::with_capacity(cfg.episodes);
    let mut drawn = 0;
    while accepted.len() < cfg.episodes && drawn < MAX_CRITICAL_DRAWS {
        let block = CRITICAL_BLOCK.min(MAX_CRITICAL_DRAWS - drawn);
        let start = drawn;
        let results = par::map_indexed(block, |k| -> Result<Option<StateVector>> {
            let mut r = rng::stream(seed, (start + k) as u64);
            let x = safe.sample(&mut r);
            Ok(exits_under_zero_control(sys, &x, cfg.critical_exit_s)?.then_some(StateVector(x)))
        });
        for res in results {
            drawn += 1;
            if let Some(x) = res? {
                accepted.push(x);
                if accepted.len() == cfg.episodes {
                    break;
                }
            }
        }
    }
    let rate = accepted.len() as f64 / drawn as f64;
    if accepted.len() < cfg.episodes || rate < MIN_ACCEPTANCE_RATE {
        return Err(Error::Config(format!(
            "critical initial set is effectively empty: {} accepted out of {drawn} draws",
            accepted.len()
        )));
    }
    Ok(accepted)
}

/// The deployed module: perceived state to control through the estimator
/// center and the controller network.
#[derive(Clone, Copy, Debug)]
pub struct Ecm<'a> {
    pub estimator: &'a StateEstimator,
    pub controller: &'a Mlp,
}

impl Ecm<'_> {
    pub fn control(&self, x_hat: &[f64]) -> ControlVector {
        let c = self.estimator.center(x_hat);
        ControlVector(self.controller.tape(&c).output)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub initial: StateVector,
    #[serde(rename = "unsafe")]
    pub is_unsafe: bool,
    /// Time of the first recorded state outside S (or of the blowup).
    pub exit_time: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub unsafe_ratio: f64,
    pub episodes: usize,
    pub unsafe_count: usize,
    /// Mean over safe episodes of `min_t h(x_t)`, when a barrier was given.
    pub mean_min_margin: Option<f64>,
    /// Filled in from [`audit_cbf`] when an audit was run.
    pub cbf_violation_rate: Option<f64>,
    pub outcomes: Vec<EpisodeOutcome>,
}

/// Runs one episode per critical initial state with the policy
/// `x -> ecm(perceive(x))`. Leaving X and integration blowups count as unsafe.
pub fn unsafe_ratio<E>(sys: &SystemModel, ecm: E, barrier: Option<&Mlp>, cfg: &EvalConfig) -> Result<EvalReport>
where
    E: Fn(&[f64]) -> ControlVector + Sync + Send,
{
    let initial = sample_critical_initial(sys, cfg)?;
    let results = par::map_indexed(initial.len(), |i| -> Result<(EpisodeOutcome, Option<f64>)> {
        let x0 = &initial[i];
        let (out, exit_time, states) = exits_safe_set(sys, x0, |x| ecm(&sys.perceive(x)), cfg.horizon_s)?;
        let margin = match barrier {
            Some(h) if !out => states.iter().map(|x| h.value(x)).reduce(f64::min),
            _ => None,
        };
        Ok((
            EpisodeOutcome {
                initial: x0.clone(),
                is_unsafe: out,
                exit_time,
            },
            margin,
        ))
    });
    let mut outcomes = Vec::with_capacity(results.len());
    let mut margins = Vec::new();
    for r in results {
        let (o, m) = r?;
        margins.extend(m);
        outcomes.push(o);
    }
    let unsafe_count = outcomes.iter().filter(|o| o.is_unsafe).count();
    Ok(EvalReport {
        unsafe_ratio: unsafe_count as f64 / outcomes.len() as f64,
        episodes: outcomes.len(),
        unsafe_count,
        mean_min_margin: (!margins.is_empty()).then(|| margins.iter().sum::<f64>() / margins.len() as f64),
        cbf_violation_rate: None,
        outcomes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub queries: usize,
    pub inner_points: usize,
    pub violations: usize,
    pub violation_rate: f64,
    /// Smallest residual seen over all (query, inner point) pairs.
    pub worst_residual: f64,
    pub worst_query: StateVector,
}

/// Empirical check of the robust barrier condition: `n_queries` fresh
/// perceived states drawn over X, `inner_points` uniform points in each
/// ellipsoid (clipped to X), control taken at the ellipsoid center. Query `q`
/// draws its perceived state and then its inner points from one stream, so a
/// larger `inner_points` extends the same sample.
#[allow(clippy::too_many_arguments)]
pub fn audit_cbf(
    sys: &SystemModel,
    h: &Mlp,
    pi: &Mlp,
    estimator: &StateEstimator,
    ecfg: &EstimatorConfig,
    alpha_slope: f64,
    n_queries: usize,
    inner_points: usize,
    seed: u64,
) -> Result<AuditReport> {
    if n_queries == 0 || inner_points == 0 {
        return Err(contract("audit needs at least one query and one inner point"));
    }
    let seed = rng::mix(seed, STREAM_AUDIT);
    let per_query = par::map_indexed(n_queries, |q| -> Result<(usize, f64, StateVector)> {
        let mut r = rng::stream(seed, q as u64);
        let x_hat = StateVector(sys.state_bounds.sample(&mut r));
        let e = estimator.estimate(ecfg, &x_hat)?;
        let u = pi.forward(&e.center)?;
        let mut violations = 0;
        let mut worst = f64::INFINITY;
        for _ in 0..inner_points {
            let mut x = e.sample_uniform(&mut r);
            sys.state_bounds.clamp(&mut x);
            let res = cbf_residual(h, sys, &u, &x, alpha_slope)?;
            violations += (res < 0.0) as usize;
            worst = worst.min(res);
        }
        Ok((violations, worst, x_hat))
    });
    let mut violations = 0;
    let mut worst = f64::INFINITY;
    let mut worst_query = StateVector::zeros(sys.state_dim());
    for r in per_query {
        let (v, w, q) = r?;
        violations += v;
        if w < worst {
            worst = w;
            worst_query = q;
        }
    }
    Ok(AuditReport {
        queries: n_queries,
        inner_points,
        violations,
        violation_rate: violations as f64 / (n_queries * inner_points) as f64,
        worst_residual: worst,
        worst_query,
    })
}

/// 2D histogram of actual states projected onto two dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub dims: (usize, usize),
    pub ranges: [(f64, f64); 2],
    /// `counts[a][b]`: bin `a` along the first dim, `b` along the second.
    pub counts: Vec<Vec<usize>>,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn peak(&self) -> usize {
        self.counts.iter().flatten().copied().max().unwrap_or(0)
    }

    /// Count matrix (rows: first dim) preceded by `#` comment lines with the
    /// axis ranges.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for (axis, (d, (lo, hi))) in [self.dims.0, self.dims.1].iter().zip(self.ranges).enumerate() {
            let name = if axis == 0 { "rows" } else { "cols" };
            s.push_str(&format!("# {name}: dim {d}, range [{}, {}], bins {}\n", io::fmt_f64(lo), io::fmt_f64(hi), if axis == 0 { self.counts.len() } else { self.counts.first().map_or(0, Vec::len) }));
        }
        for row in &self.counts {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }
}

/// Histogram of `data`'s actual states over the uniform `bins x bins` grid
/// spanning `bounds` on dims `(i, j)`. Points on or past the edge land in the
/// edge bins, so the total always equals the dataset size.
pub fn export_density(data: &PerceptionDataset, bounds: &BoxSet, dims: (usize, usize), bins: usize) -> Result<Histogram> {
    if bins < 2 {
        return Err(contract("density histogram needs at least 2 bins per axis"));
    }
    let n = bounds.dim();
    if dims.0 >= n || dims.1 >= n {
        return Err(contract(format!("histogram dims {dims:?} out of range for dimension {n}")));
    }
    if !data.is_empty() && data.dim() != n {
        return Err(contract("dataset dimension does not match the bounds"));
    }
    let ranges = [(bounds.lo[dims.0], bounds.hi[dims.0]), (bounds.lo[dims.1], bounds.hi[dims.1])];
    let bin = |v: f64, (lo, hi): (f64, f64)| -> usize {
        let t = ((v - lo) / (hi - lo) * bins as f64).floor();
        if t.is_nan() {
            0
        } else {
            t.clamp(0.0, (bins - 1) as f64) as usize
        }
    };
    let mut counts = vec![vec![0; bins]; bins];
    for x in &data.actual {
        counts[bin(x[dims.0], ranges[0])][bin(x[dims.1], ranges[1])] += 1;
    }
    Ok(Histogram { dims, ranges, counts })
}
