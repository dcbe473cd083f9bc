//! The outer synthesis loop: fit the estimator, train `(h, pi)`, collect the
//! perceived states where the barrier condition still fails, query the
//! perception function there and repeat. Also the uniform-sampling and
//! no-estimator baselines.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::confset::{EstimatorConfig, StateEstimator};
use crate::dynamics::{StateVector, SystemModel};
use crate::error::{Error, Result};
use crate::hetgp::{fit_heteroscedastic, PerceptionDataset};
use crate::neural::Mlp;
use crate::synthesis::{build_training_set, evaluate, init_networks, train, CertTrainingSet, LossBreakdown, TrainConfig};
use crate::{io, rng};

const STREAM_INIT: u64 = 0x696e_6974_0000_0000;
const STREAM_UNIFORM: u64 = 0x756e_6966_6f72_6d00;
const STREAM_ITERATION: u64 = 0x6974_6572_0000_0000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Query perception at the estimator centers of hard samples.
    Adaptive,
    /// Query perception at as many fresh uniform states as there were hard samples.
    Uniform,
    /// No estimator: the controller trusts the perceived state.
    #[serde(rename = "nogp")]
    NoGp,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Adaptive, Strategy::Uniform, Strategy::NoGp];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Adaptive => "adaptive",
            Strategy::Uniform => "uniform",
            Strategy::NoGp => "nogp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(Strategy::Adaptive),
            "uniform" => Ok(Strategy::Uniform),
            "nogp" => Ok(Strategy::NoGp),
            other => Err(Error::Config(format!("unknown strategy `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptiveConfig {
    pub max_iterations: usize,
    pub initial_n: usize,
    pub hard_threshold: f64,
    /// `None` means 5% of the state-box diagonal.
    pub dedupe_radius: Option<f64>,
    pub strategy: Strategy,
    /// At most this many hard samples are turned into perception queries per
    /// iteration (the largest violations first). Keeps GP fits bounded.
    pub max_new_per_iteration: Option<usize>,
    /// Cap on total perception calls (initial dataset plus augmentation).
    pub sample_budget: Option<usize>,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        Self {
            max_iterations: 6,
            initial_n: 100,
            hard_threshold: 1e-3,
            dedupe_radius: None,
            strategy: Strategy::Adaptive,
            max_new_per_iteration: Some(50),
            sample_budget: None,
        }
    }
}

impl AdaptiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        if self.initial_n < 5 {
            return Err(Error::Config("initial_n must be at least 5".into()));
        }
        if self.hard_threshold.is_nan() || self.hard_threshold < 0.0 {
            return Err(Error::Config("hard_threshold must be non-negative".into()));
        }
        if self.dedupe_radius.is_some_and(|r| !(r >= 0.0)) {
            return Err(Error::Config("dedupe_radius must be non-negative".into()));
        }
        if self.max_new_per_iteration == Some(0) {
            return Err(Error::Config("max_new_per_iteration must be positive".into()));
        }
        if self.sample_budget.is_some_and(|b| b < 5) {
            return Err(Error::Config("sample_budget must be at least 5".into()));
        }
        Ok(())
    }

    pub fn radius(&self, sys: &SystemModel) -> f64 {
        self.dedupe_radius.unwrap_or(0.05 * sys.state_bounds.diameter())
    }
}

/// `n` states drawn uniformly over X, each paired with its perception.
pub fn init_dataset(sys: &SystemModel, n: usize, seed: u64) -> Result<PerceptionDataset> {
    if n < 5 {
        return Err(Error::InsufficientData { needed: 5, got: n });
    }
    uniform_pairs(sys, n, rng::mix(seed, STREAM_INIT))
}

fn uniform_pairs(sys: &SystemModel, n: usize, seed: u64) -> Result<PerceptionDataset> {
    let mut r = rng::seeded(seed);
    let mut d = PerceptionDataset::new();
    for _ in 0..n {
        let x = StateVector(sys.state_bounds.sample(&mut r));
        d.push(sys.perceive(&x), x)?;
    }
    Ok(d)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardSample {
    pub x_hat: StateVector,
    /// Largest ReLU violation over the entry's inner samples.
    pub violation: f64,
}

/// Entries whose worst violation exceeds `threshold`, greedily deduplicated:
/// in order of decreasing violation (ties by index), a point is kept unless a
/// kept point lies within `radius`.
pub fn collect_hard_samples(set: &CertTrainingSet, violations: &[f64], threshold: f64, radius: f64) -> Vec<HardSample> {
    let mut idx: Vec<usize> = (0..set.len()).filter(|&i| violations[i] > threshold).collect();
    idx.sort_by(|&a, &b| violations[b].total_cmp(&violations[a]));
    let mut kept: Vec<HardSample> = Vec::new();
    for i in idx {
        let x = &set.entries[i].x_hat;
        let near = kept.iter().any(|k| {
            let d2: f64 = k.x_hat.iter().zip(x.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            d2.sqrt() <= radius
        });
        if !near {
            kept.push(HardSample {
                x_hat: x.clone(),
                violation: violations[i],
            });
        }
    }
    kept
}

/// Appends `(perceive(c), c)` for each hard sample, with `c` the estimator
/// center clipped to X, then merges duplicate perceived states.
pub fn augment(sys: &SystemModel, data: &PerceptionDataset, hard: &[StateVector], estimator: &StateEstimator) -> Result<PerceptionDataset> {
    if hard.is_empty() {
        return Ok(data.clone());
    }
    let mut d = data.clone();
    for x_hat in hard {
        let mut c = estimator.center(x_hat);
        sys.state_bounds.clamp(&mut c);
        d.push(sys.perceive(&c), c)?;
    }
    Ok(d.merged())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    /// Dataset size the estimator was fitted on.
    pub dataset_size: usize,
    /// Perception calls made so far, including this iteration's augmentation.
    pub perception_calls: usize,
    pub hard_samples: usize,
    pub loss: LossBreakdown,
    pub unsafe_ratio: Option<f64>,
    /// Not serialized, so that manifests of identical runs are identical.
    #[serde(skip)]
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Success,
    Failure,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub outcome: Outcome,
    /// Hard samples left after the last iteration (empty on success).
    pub hard_samples: Vec<HardSample>,
    pub reports: Vec<IterationReport>,
    pub barrier: Mlp,
    pub controller: Mlp,
    pub estimator: StateEstimator,
    /// Dataset used in iteration `k` (empty under the no-estimator baseline).
    pub snapshots: Vec<PerceptionDataset>,
    /// Final dataset, after the last augmentation.
    pub dataset: PerceptionDataset,
    pub gp_fits: usize,
}

impl RunResult {
    pub fn is_success(&self) -> bool {
        self.outcome == Outcome::Success
    }

    pub fn perception_calls(&self) -> usize {
        self.reports.last().map_or(0, |r| r.perception_calls)
    }
}

/// Algorithm loop. Networks are warm-started across iterations; iteration
/// `k` draws its training set from a seed mixed from `(tcfg.seed, k)`. Stops
/// with success once no hard sample remains, and with failure after
/// `max_iterations` or once a round has trained on a dataset that used up the
/// sample budget.
pub fn run(sys: &SystemModel, acfg: &AdaptiveConfig, tcfg: &TrainConfig, ecfg: &EstimatorConfig) -> Result<RunResult> {
    run_with(sys, acfg, tcfg, ecfg, |_, _, _| Ok(None))
}

/// Like [`run`], calling `probe(iteration, estimator, controller)` after each
/// training round; a returned value is recorded as that iteration's unsafe ratio.
pub fn run_with<P>(sys: &SystemModel, acfg: &AdaptiveConfig, tcfg: &TrainConfig, ecfg: &EstimatorConfig, mut probe: P) -> Result<RunResult>
where
    P: FnMut(usize, &StateEstimator, &Mlp) -> Result<Option<f64>>,
{
    acfg.validate()?;
    tcfg.validate()?;
    ecfg.validate()?;
    let budget = acfg.sample_budget.unwrap_or(usize::MAX);
    let radius = acfg.radius(sys);
    let use_gp = acfg.strategy != Strategy::NoGp;

    let mut data = if use_gp {
        init_dataset(sys, acfg.initial_n.min(budget), tcfg.seed)?
    } else {
        PerceptionDataset::new()
    };
    let mut calls = data.len();
    let (mut h, mut pi) = init_networks(sys, tcfg.width, tcfg.seed);
    let mut estimator = StateEstimator::Identity;
    let mut reports = Vec::new();
    let mut snapshots = Vec::new();
    let mut gp_fits = 0;
    let mut hard = Vec::new();

    for k in 0..acfg.max_iterations {
        let start = Instant::now();
        if use_gp {
            estimator = StateEstimator::Gp(Arc::new(fit_heteroscedastic(&data)?));
            gp_fits += 1;
        }
        snapshots.push(data.clone());
        let iter_cfg = TrainConfig {
            seed: rng::mix(tcfg.seed, STREAM_ITERATION ^ k as u64),
            ..tcfg.clone()
        };
        let set = build_training_set(sys, &estimator, ecfg, &iter_cfg)?;
        train(sys, &set, &iter_cfg, &mut h, &mut pi)?;
        let (loss, violations) = evaluate(sys, &h, &pi, &set, &iter_cfg);
        hard = collect_hard_samples(&set, &violations, acfg.hard_threshold, radius);
        let unsafe_ratio = probe(k, &estimator, &pi)?;
        let fitted_size = data.len();

        let last = k + 1 == acfg.max_iterations;
        let exhausted = use_gp && calls >= budget;
        if use_gp && !hard.is_empty() && !last && !exhausted {
            let take = hard
                .len()
                .min(acfg.max_new_per_iteration.unwrap_or(usize::MAX))
                .min(budget - calls);
            let queries: Vec<StateVector> = hard[..take].iter().map(|s| s.x_hat.clone()).collect();
            data = match acfg.strategy {
                Strategy::Adaptive => augment(sys, &data, &queries, &estimator)?,
                _ => {
                    let fresh = uniform_pairs(sys, take, rng::mix(tcfg.seed, STREAM_UNIFORM ^ k as u64))?;
                    let mut d = data.clone();
                    for (p, a) in fresh.perceived.into_iter().zip(fresh.actual) {
                        d.push(p, a)?;
                    }
                    d.merged()
                }
            };
            calls += take;
        }
        reports.push(IterationReport {
            iteration: k,
            dataset_size: fitted_size,
            perception_calls: calls,
            hard_samples: hard.len(),
            loss,
            unsafe_ratio,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        if hard.is_empty() || exhausted {
            break;
        }
    }
    Ok(RunResult {
        outcome: if hard.is_empty() { Outcome::Success } else { Outcome::Failure },
        hard_samples: hard,
        reports,
        barrier: h,
        controller: pi,
        estimator,
        snapshots,
        dataset: data,
        gp_fits,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest<C> {
    pub config: C,
    pub outcome: Outcome,
    pub gp_fits: usize,
    pub iterations: Vec<IterationReport>,
    /// Perceived states of the remaining hard samples on failure.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hard_samples: Option<Vec<StateVector>>,
}

impl RunResult {
    pub fn manifest<C: Clone>(&self, config: &C) -> RunManifest<C> {
        RunManifest {
            config: config.clone(),
            outcome: self.outcome.clone(),
            gp_fits: self.gp_fits,
            iterations: self.reports.clone(),
            hard_samples: (!self.is_success()).then(|| self.hard_samples.iter().map(|s| s.x_hat.clone()).collect()),
        }
    }

    /// Writes `manifest.json`, `barrier.json`, `controller.json`,
    /// `gp_model.json` (when fitted) and `iter_{k}/dataset.csv` (when
    /// nonempty) under `dir`.
    pub fn write_artifacts<C: Clone + Serialize>(&self, dir: &std::path::Path, config: &C) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        io::write_json_atomic(&dir.join("manifest.json"), &self.manifest(config))?;
        io::write_atomic(&dir.join("barrier.json"), self.barrier.to_json()?.as_bytes())?;
        io::write_atomic(&dir.join("controller.json"), self.controller.to_json()?.as_bytes())?;
        if let Some(m) = self.estimator.model() {
            io::write_json_atomic(&dir.join("gp_model.json"), &m.to_checkpoint())?;
        }
        for (k, d) in self.snapshots.iter().enumerate().filter(|(_, d)| !d.is_empty()) {
            let sub = dir.join(format!("iter_{k}"));
            std::fs::create_dir_all(&sub)?;
            io::write_atomic(&sub.join("dataset.csv"), d.to_csv().as_bytes())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
