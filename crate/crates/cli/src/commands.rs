use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use anyhow::{bail, Context, Result};

use robust_ecm::adaptive::{self, RunResult, Strategy};
use robust_ecm::confset::StateEstimator;
use robust_ecm::dynamics::{ControlVector, SystemModel};
use robust_ecm::evaluation::{export_density, unsafe_ratio, Ecm, EvalReport};
use robust_ecm::hetgp::{HetGpCheckpoint, HetGpModel, PerceptionDataset};
use robust_ecm::neural::Mlp;
use robust_ecm::{io, par};

use crate::spec::RunSpec;
use crate::Common;

const EXIT_FAILURE_WITH_DEBUG: u8 = 2;

fn writable_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn synthesize_into(spec: &RunSpec, dir: &Path) -> Result<RunResult> {
    writable_dir(dir)?;
    let sys = spec.system();
    let result = adaptive::run(&sys, &spec.adaptive, &spec.train, &spec.estimator)?;
    result.write_artifacts(dir, spec)?;
    if !result.is_success() {
        io::write_json_atomic(&dir.join("hard_samples.json"), &result.hard_samples)?;
    }
    Ok(result)
}

pub fn synthesize(common: &Common) -> Result<ExitCode> {
    let spec = RunSpec::resolve(common)?;
    let result = par::with_threads(common.jobs, || synthesize_into(&spec, &common.out))?;
    for r in &result.reports {
        eprintln!(
            "iteration {}: |D|={} hard={} loss={:.6} ({:.1}s)",
            r.iteration, r.dataset_size, r.hard_samples, r.loss.total, r.wall_time_s
        );
    }
    if result.is_success() {
        println!("outcome=success");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("outcome=failure hard_samples={}", result.hard_samples.len());
        Ok(ExitCode::from(EXIT_FAILURE_WITH_DEBUG))
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// Controller, optional barrier and estimator saved under `dir`, shape-checked
/// against `sys`.
fn load_run(dir: &Path, sys: &SystemModel) -> Result<(Mlp, Option<Mlp>, StateEstimator)> {
    let pi = Mlp::from_json(&read(&dir.join("controller.json"))?).context("loading controller.json")?;
    if pi.input_dim() != sys.state_dim() || pi.output_dim() != sys.control_dim() {
        bail!(
            "controller maps {} -> {}, benchmark needs {} -> {}",
            pi.input_dim(),
            pi.output_dim(),
            sys.state_dim(),
            sys.control_dim()
        );
    }
    let barrier_path = dir.join("barrier.json");
    let h = if barrier_path.exists() {
        let h = Mlp::from_json(&read(&barrier_path)?).context("loading barrier.json")?;
        if h.input_dim() != sys.state_dim() || h.output_dim() != 1 {
            bail!("barrier shape does not match the benchmark");
        }
        Some(h)
    } else {
        None
    };
    let gp_path = dir.join("gp_model.json");
    let estimator = if gp_path.exists() {
        let c: HetGpCheckpoint = serde_json::from_str(&read(&gp_path)?).context("parsing gp_model.json")?;
        let m = HetGpModel::from_checkpoint(&c)?;
        if m.input_dim() != sys.state_dim() {
            bail!("GP input dimension {} does not match state dimension {}", m.input_dim(), sys.state_dim());
        }
        StateEstimator::Gp(Arc::new(m))
    } else {
        StateEstimator::Identity
    };
    Ok((pi, h, estimator))
}

fn evaluate_run(spec: &RunSpec, sys: &SystemModel, pi: &Mlp, h: Option<&Mlp>, estimator: &StateEstimator) -> Result<EvalReport> {
    let ecm = Ecm {
        estimator,
        controller: pi,
    };
    Ok(unsafe_ratio(sys, |x: &[f64]| ecm.control(x), h, &spec.eval)?)
}

pub fn evaluate(common: &Common, run: Option<PathBuf>, zero_control: bool) -> Result<ExitCode> {
    let spec = RunSpec::resolve(common)?;
    let sys = spec.system();
    let report = par::with_threads(common.jobs, || -> Result<EvalReport> {
        if zero_control {
            let m = sys.control_dim();
            Ok(unsafe_ratio(&sys, |_: &[f64]| ControlVector::zeros(m), None, &spec.eval)?)
        } else {
            let dir = run.clone().unwrap_or_else(|| common.out.clone());
            let (pi, h, est) = load_run(&dir, &sys)?;
            evaluate_run(&spec, &sys, &pi, h.as_ref(), &est)
        }
    })?;
    writable_dir(&common.out)?;
    io::write_json_atomic(&common.out.join("eval_report.json"), &report)?;
    println!("unsafe_ratio={:.3}", report.unsafe_ratio);
    Ok(ExitCode::SUCCESS)
}

struct Cell {
    strategy: Strategy,
    budget: Option<usize>,
    seed: u64,
}

impl Cell {
    fn dir_name(&self) -> String {
        match self.budget {
            Some(b) => format!("{}_{}_seed{}", self.strategy.name(), b, self.seed),
            None => format!("{}_seed{}", self.strategy.name(), self.seed),
        }
    }
}

fn sweep_cell(base: &RunSpec, cell: &Cell, dir: &Path) -> Result<f64> {
    let mut spec = base.clone().with_seed(cell.seed);
    spec.strategy = cell.strategy;
    spec.adaptive.strategy = cell.strategy;
    spec.adaptive.sample_budget = cell.budget;
    if let Some(b) = cell.budget {
        spec.adaptive.initial_n = spec.adaptive.initial_n.min(b);
    }
    let result = synthesize_into(&spec, dir)?;
    let sys = spec.system();
    let report = evaluate_run(&spec, &sys, &result.controller, Some(&result.barrier), &result.estimator)?;
    io::write_json_atomic(&dir.join("eval_report.json"), &report)?;
    Ok(report.unsafe_ratio)
}

pub fn sweep(common: &Common, budgets: Vec<usize>, seeds: Option<usize>) -> Result<ExitCode> {
    let spec = RunSpec::resolve(common)?;
    let budgets = if budgets.is_empty() { spec.sweep.budgets.clone() } else { budgets };
    let n_seeds = seeds.unwrap_or(spec.sweep.seeds);
    if budgets.is_empty() || budgets.windows(2).any(|w| w[0] >= w[1]) {
        bail!("sweep budgets must be nonempty and strictly increasing");
    }
    if budgets[0] < 5 {
        bail!("sweep budgets must be at least 5");
    }
    if n_seeds == 0 {
        bail!("need at least one seed");
    }
    let strategies: Vec<Strategy> = match &common.strategy {
        Some(_) => vec![spec.strategy],
        None => Strategy::ALL.to_vec(),
    };
    let seeds: Vec<u64> = (0..n_seeds as u64).map(|k| spec.seed + k).collect();
    let mut cells = Vec::new();
    for &strategy in &strategies {
        if strategy == Strategy::NoGp {
            cells.extend(seeds.iter().map(|&seed| Cell { strategy, budget: None, seed }));
        } else {
            for &b in &budgets {
                cells.extend(seeds.iter().map(|&seed| Cell { strategy, budget: Some(b), seed }));
            }
        }
    }
    writable_dir(&common.out)?;
    let cells_dir = common.out.join("cells");

    let results: Mutex<Vec<Option<f64>>> = Mutex::new(vec![None; cells.len()]);
    let next = AtomicUsize::new(0);
    let workers = if common.jobs == 0 { 1 } else { common.jobs.min(cells.len()) };
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = cells.get(i) else { break };
                let dir = cells_dir.join(cell.dir_name());
                let r = match sweep_cell(&spec, cell, &dir) {
                    Ok(v) => Some(v),
                    Err(e) => {
                        eprintln!("cell {} failed: {e:#}", cell.dir_name());
                        None
                    }
                };
                eprintln!("cell {}: unsafe_ratio={}", cell.dir_name(), r.map_or("NA".into(), |v| format!("{v:.3}")));
                results.lock().expect("results lock")[i] = r;
            });
        }
    });

    let results = results.into_inner().expect("results lock");
    let mut csv = String::from("benchmark,strategy,n_samples,unsafe_ratio,seed\n");
    for (cell, r) in cells.iter().zip(results) {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            spec.benchmark,
            cell.strategy.name(),
            cell.budget.unwrap_or(0),
            r.map_or("NA".to_string(), io::fmt_f64),
            cell.seed
        ));
    }
    io::write_atomic(&common.out.join("sweep.csv"), csv.as_bytes())?;
    println!("wrote {}", common.out.join("sweep.csv").display());
    Ok(ExitCode::SUCCESS)
}

pub fn density(common: &Common, datasets: &[PathBuf], dims: &[usize], bins: usize) -> Result<ExitCode> {
    let spec = RunSpec::resolve(common)?;
    let sys = spec.system();
    let [i, j] = dims else {
        bail!("--dims takes exactly two dimensions");
    };
    let mut parsed = Vec::with_capacity(datasets.len());
    for p in datasets {
        let d = PerceptionDataset::from_csv(&read(p)?).with_context(|| format!("parsing {}", p.display()))?;
        parsed.push(d);
    }
    writable_dir(&common.out)?;
    for (k, (p, d)) in datasets.iter().zip(&parsed).enumerate() {
        let h = export_density(d, &sys.state_bounds, (*i, *j), bins)?;
        let out = common.out.join(format!("density_{k}.csv"));
        io::write_atomic(&out, h.to_csv().as_bytes())?;
        println!("{} -> {} (total {}, peak {})", p.display(), out.display(), h.total(), h.peak());
    }
    Ok(ExitCode::SUCCESS)
}
