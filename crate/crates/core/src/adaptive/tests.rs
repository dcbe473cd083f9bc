use super::*;
use crate::dynamics::{BoxSet, Perception};
use crate::synthesis::CertEntry;

fn tiny_train(seed: u64) -> TrainConfig {
    TrainConfig {
        m1: 40,
        m2: 4,
        epochs: 2,
        batch_size: 20,
        width: 8,
        seed,
        ..TrainConfig::default()
    }
}

fn small_adaptive(strategy: Strategy) -> AdaptiveConfig {
    AdaptiveConfig {
        max_iterations: 3,
        initial_n: 20,
        strategy,
        max_new_per_iteration: Some(6),
        ..AdaptiveConfig::default()
    }
}

fn set_of(points: &[&[f64]]) -> CertTrainingSet {
    CertTrainingSet {
        state_dim: points[0].len(),
        m2: 1,
        entries: points
            .iter()
            .map(|p| CertEntry {
                x_hat: StateVector(p.to_vec()),
                center: StateVector(p.to_vec()),
                inner: p.to_vec(),
                clipped: 0,
                flagged: false,
            })
            .collect(),
    }
}

#[test]
fn initial_pairs_satisfy_perception_identity() {
    let sys = SystemModel::dubins();
    let d = init_dataset(&sys, 30, 4).unwrap();
    assert_eq!(d.len(), 30);
    for (p, a) in d.perceived.iter().zip(&d.actual) {
        assert_eq!(*p, sys.perceive(a));
        assert!(sys.state_bounds.contains(a));
    }
    assert_eq!(init_dataset(&sys, 5, 1).unwrap().len(), 5);
    assert_eq!(init_dataset(&sys, 30, 4).unwrap(), d);
    assert!(init_dataset(&sys, 4, 0).is_err());
}

#[test]
fn no_hard_samples_when_all_residuals_pass() {
    let set = set_of(&[&[0.0], &[1.0]]);
    assert!(collect_hard_samples(&set, &[0.0, 1e-4], 1e-3, 0.1).is_empty());
}

#[test]
fn dedupe_keeps_the_larger_violation() {
    let set = set_of(&[&[0.0, 0.0], &[0.03, 0.0], &[1.0, 1.0]]);
    let h = collect_hard_samples(&set, &[0.2, 0.5, 0.1], 1e-3, 0.05);
    assert_eq!(h.len(), 2);
    assert_eq!(h[0].x_hat.0, vec![0.03, 0.0]);
    assert_eq!(h[0].violation, 0.5);
    assert_eq!(h[1].x_hat.0, vec![1.0, 1.0]);
}

#[test]
fn dedupe_tie_goes_to_first_index() {
    let set = set_of(&[&[0.0], &[0.01]]);
    let h = collect_hard_samples(&set, &[0.3, 0.3], 1e-3, 0.05);
    assert_eq!(h.len(), 1);
    assert_eq!(h[0].x_hat.0, vec![0.0]);
}

#[test]
fn augment_appends_perceived_centers() {
    let sys = SystemModel::dubins();
    let d = init_dataset(&sys, 10, 0).unwrap();
    let hard = vec![StateVector(vec![0.5, -0.5, 0.2, 1.0]), StateVector(vec![2.9, 2.9, 3.0, 1.9])];
    let d2 = augment(&sys, &d, &hard, &StateEstimator::Identity).unwrap();
    assert_eq!(d2.len(), d.len() + hard.len());
    for (p, a) in d2.perceived.iter().zip(&d2.actual) {
        assert_eq!(*p, sys.perceive(a));
    }
    assert_eq!(d2.actual[10], hard[0]);
    assert_eq!(augment(&sys, &d, &[], &StateEstimator::Identity).unwrap(), d);
}

#[test]
fn augment_clips_centers_to_the_state_box() {
    let sys = SystemModel::unstable_scalar();
    let d = init_dataset(&sys, 5, 0).unwrap();
    let d2 = augment(&sys, &d, &[StateVector(vec![7.0])], &StateEstimator::Identity).unwrap();
    assert_eq!(d2.actual[5].0, vec![2.0]);
}

#[test]
fn nogp_never_fits_the_gp() {
    let sys = SystemModel::dubins();
    let r = run(&sys, &small_adaptive(Strategy::NoGp), &tiny_train(0), &EstimatorConfig::default()).unwrap();
    assert_eq!(r.gp_fits, 0);
    assert!(r.dataset.is_empty());
    assert!(matches!(r.estimator, StateEstimator::Identity));
}

#[test]
fn infinite_threshold_succeeds_after_one_iteration() {
    let sys = SystemModel::dubins();
    let acfg = AdaptiveConfig {
        hard_threshold: f64::INFINITY,
        ..small_adaptive(Strategy::Adaptive)
    };
    let r = run(&sys, &acfg, &tiny_train(0), &EstimatorConfig::default()).unwrap();
    assert!(r.is_success());
    assert_eq!(r.reports.len(), 1);
    assert_eq!(r.gp_fits, 1);
}

#[test]
fn zero_threshold_single_iteration_fails_with_hard_samples() {
    let sys = SystemModel::cartpole();
    let acfg = AdaptiveConfig {
        max_iterations: 1,
        hard_threshold: 0.0,
        ..small_adaptive(Strategy::Adaptive)
    };
    let r = run(&sys, &acfg, &tiny_train(1), &EstimatorConfig::default()).unwrap();
    assert_eq!(r.outcome, Outcome::Failure);
    assert!(!r.hard_samples.is_empty());
    let m = r.manifest(&acfg);
    assert_eq!(m.hard_samples.unwrap().len(), r.hard_samples.len());
}

#[test]
fn dataset_grows_while_hard_samples_remain() {
    let sys = SystemModel::dubins();
    for strategy in [Strategy::Adaptive, Strategy::Uniform] {
        let acfg = AdaptiveConfig {
            hard_threshold: 0.0,
            ..small_adaptive(strategy)
        };
        let r = run(&sys, &acfg, &tiny_train(2), &EstimatorConfig::default()).unwrap();
        assert!(r.reports.len() <= acfg.max_iterations);
        let mut before = acfg.initial_n;
        for w in r.reports.windows(2) {
            assert!(w[0].hard_samples > 0);
            let added = w[0].hard_samples.min(6);
            assert_eq!(w[0].perception_calls, before + added);
            // merged duplicates may absorb some of the new pairs
            assert!(w[1].dataset_size > w[0].dataset_size);
            assert!(w[1].dataset_size <= w[0].dataset_size + added);
            before = w[0].perception_calls;
        }
        assert_eq!(r.snapshots.len(), r.reports.len());
    }
}

#[test]
fn strategies_spend_matching_perception_calls() {
    let sys = SystemModel::dubins();
    let mk = |s| AdaptiveConfig {
        hard_threshold: 0.0,
        max_new_per_iteration: Some(3),
        ..small_adaptive(s)
    };
    let a = run(&sys, &mk(Strategy::Adaptive), &tiny_train(3), &EstimatorConfig::default()).unwrap();
    let u = run(&sys, &mk(Strategy::Uniform), &tiny_train(3), &EstimatorConfig::default()).unwrap();
    // With at least 3 hard samples each iteration both add exactly 3 per round.
    let calls = |r: &RunResult| r.reports.iter().map(|x| x.perception_calls).collect::<Vec<_>>();
    assert_eq!(calls(&a), calls(&u));
}

#[test]
fn sample_budget_caps_perception_calls() {
    let sys = SystemModel::dubins();
    let acfg = AdaptiveConfig {
        hard_threshold: 0.0,
        max_iterations: 6,
        sample_budget: Some(25),
        ..small_adaptive(Strategy::Adaptive)
    };
    let r = run(&sys, &acfg, &tiny_train(4), &EstimatorConfig::default()).unwrap();
    assert_eq!(r.perception_calls(), 25);
    assert!(r.dataset.len() <= 25);
    assert_eq!(r.outcome, Outcome::Failure);
}

#[test]
fn runs_are_deterministic() {
    let sys = SystemModel::dubins();
    let acfg = small_adaptive(Strategy::Adaptive);
    let a = run(&sys, &acfg, &tiny_train(5), &EstimatorConfig::default()).unwrap();
    let b = run(&sys, &acfg, &tiny_train(5), &EstimatorConfig::default()).unwrap();
    assert_eq!(a.barrier, b.barrier);
    assert_eq!(a.controller, b.controller);
    assert_eq!(a.dataset, b.dataset);
    let ja = serde_json::to_string(&a.manifest(&acfg)).unwrap();
    let jb = serde_json::to_string(&b.manifest(&acfg)).unwrap();
    assert_eq!(ja, jb);
}

#[test]
fn identity_perception_with_generous_control_succeeds_at_once() {
    let mut sys = SystemModel::unstable_scalar().with_perception(Perception::Identity);
    sys.control_bounds = BoxSet::symmetric(&[10.0]);
    let tcfg = TrainConfig {
        m1: 500,
        epochs: 60,
        batch_size: 25,
        ..TrainConfig::default()
    };
    let acfg = AdaptiveConfig {
        initial_n: 20,
        ..AdaptiveConfig::default()
    };
    let r = run(&sys, &acfg, &tcfg, &EstimatorConfig::default()).unwrap();
    assert!(r.is_success(), "{:?}", r.reports);
    assert_eq!(r.reports.len(), 1);
}

#[test]
fn probe_values_are_recorded() {
    let sys = SystemModel::dubins();
    let acfg = AdaptiveConfig {
        hard_threshold: f64::INFINITY,
        ..small_adaptive(Strategy::Adaptive)
    };
    let r = run_with(&sys, &acfg, &tiny_train(0), &EstimatorConfig::default(), |k, _, _| Ok(Some(k as f64 + 0.5))).unwrap();
    assert_eq!(r.reports[0].unsafe_ratio, Some(0.5));
}

#[test]
fn artifacts_are_written() {
    let sys = SystemModel::dubins();
    let acfg = AdaptiveConfig {
        hard_threshold: f64::INFINITY,
        ..small_adaptive(Strategy::Adaptive)
    };
    let r = run(&sys, &acfg, &tiny_train(0), &EstimatorConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    r.write_artifacts(dir.path(), &acfg).unwrap();
    for f in ["manifest.json", "barrier.json", "controller.json", "gp_model.json", "iter_0/dataset.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(dir.path().join("iter_0/dataset.csv")).unwrap();
    assert_eq!(PerceptionDataset::from_csv(&csv).unwrap(), r.snapshots[0]);
}

#[test]
fn config_validation() {
    assert!(AdaptiveConfig::default().validate().is_ok());
    let bad = [
        AdaptiveConfig { max_iterations: 0, ..AdaptiveConfig::default() },
        AdaptiveConfig { initial_n: 4, ..AdaptiveConfig::default() },
        AdaptiveConfig { hard_threshold: -1.0, ..AdaptiveConfig::default() },
        AdaptiveConfig { dedupe_radius: Some(f64::NAN), ..AdaptiveConfig::default() },
        AdaptiveConfig { max_new_per_iteration: Some(0), ..AdaptiveConfig::default() },
    ];
    for c in bad {
        assert!(c.validate().is_err(), "{c:?}");
    }
    let sys = SystemModel::dubins();
    assert!((AdaptiveConfig::default().radius(&sys) - 0.05 * sys.state_bounds.diameter()).abs() < 1e-15);
}

#[test]
fn strategy_names_round_trip() {
    for s in Strategy::ALL {
        assert_eq!(Strategy::parse(s.name()).unwrap(), s);
        assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.name()));
    }
    assert!(Strategy::parse("greedy").is_err());
}
