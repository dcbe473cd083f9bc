//! The JSON run specification.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use robust_ecm::adaptive::{AdaptiveConfig, Strategy};
use robust_ecm::confset::EstimatorConfig;
use robust_ecm::dynamics::{Benchmark, BoxSet, Perception, SystemModel};
use robust_ecm::evaluation::EvalConfig;
use robust_ecm::synthesis::TrainConfig;

use crate::Common;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    pub budgets: Vec<usize>,
    pub seeds: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            budgets: vec![100, 150, 200],
            seeds: 3,
        }
    }
}

/// Everything that determines a run except where its output goes. The
/// top-level `seed` overrides the training and evaluation seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSpec {
    pub benchmark: Benchmark,
    pub strategy: Strategy,
    pub seed: u64,
    pub perception: Perception,
    /// Symmetric half-widths replacing the benchmark's control box.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub control_bounds: Option<Vec<f64>>,
    pub adaptive: AdaptiveConfig,
    pub train: TrainConfig,
    pub estimator: EstimatorConfig,
    pub eval: EvalConfig,
    pub sweep: SweepSpec,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            benchmark: Benchmark::Dubins,
            strategy: Strategy::Adaptive,
            seed: 0,
            perception: Perception::Benchmark,
            control_bounds: None,
            adaptive: AdaptiveConfig::default(),
            train: TrainConfig::default(),
            estimator: EstimatorConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepSpec::default(),
        }
    }
}

impl RunSpec {
    /// Config file (if any) with command-line overrides applied.
    pub fn resolve(common: &Common) -> Result<Self> {
        let mut spec = match &common.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => RunSpec::default(),
        };
        if let Some(b) = &common.benchmark {
            spec.benchmark = Benchmark::parse(b)?;
        }
        if let Some(s) = &common.strategy {
            spec.strategy = Strategy::parse(s)?;
        }
        if let Some(s) = common.seed {
            spec.seed = s;
        }
        let seed = spec.seed;
        spec.with_seed(seed).validated()
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.eval.seed = seed;
        self
    }

    fn validated(mut self) -> Result<Self> {
        self.adaptive.strategy = self.strategy;
        self.adaptive.validate()?;
        self.train.validate()?;
        self.estimator.validate()?;
        self.eval.validate()?;
        let sys = self.system();
        if let Some(c) = &self.control_bounds {
            if c.len() != sys.control_dim() || c.iter().any(|v| !(*v > 0.0)) {
                bail!("control_bounds needs {} positive half-widths", sys.control_dim());
            }
        }
        Ok(self)
    }

    pub fn system(&self) -> SystemModel {
        let mut sys = SystemModel::for_benchmark(self.benchmark).with_perception(self.perception);
        if let Some(c) = &self.control_bounds {
            if c.len() == sys.control_dim() {
                sys.control_bounds = BoxSet::symmetric(c);
            }
        }
        sys
    }
}
