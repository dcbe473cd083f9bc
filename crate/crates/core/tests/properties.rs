use proptest::prelude::*;
use std::f64::consts::PI;

use robust_ecm::adaptive::collect_hard_samples;
use robust_ecm::confset::{chi2_quantile, Ellipsoid};
use robust_ecm::dynamics::{BoxSet, ControlVector, StateVector, SystemModel};
use robust_ecm::evaluation::export_density;
use robust_ecm::hetgp::PerceptionDataset;
use robust_ecm::neural::{Head, Mlp};
use robust_ecm::synthesis::{CertEntry, CertTrainingSet};
use robust_ecm::{par, rng};

fn state_in(b: &BoxSet) -> impl Strategy<Value = Vec<f64>> {
    b.lo.iter().zip(&b.hi).map(|(l, h)| *l..*h).collect::<Vec<_>>()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dubins_rollouts_keep_heading_wrapped_and_speed_saturated(
        x0 in state_in(&SystemModel::dubins().state_bounds),
        u in prop::collection::vec(-2.0f64..2.0, 2),
    ) {
        let sys = SystemModel::dubins();
        let t = sys.rollout(&x0, |_| ControlVector(u.clone()), 2.0).unwrap();
        for x in &t.states[1..] {
            prop_assert!((-PI..PI).contains(&x[2]));
            prop_assert!((0.5..=2.0).contains(&x[3]));
        }
        let n = t.states.len();
        for x in &t.states[..n - 1] {
            prop_assert!(sys.in_state_space(x));
        }
    }

    #[test]
    fn clamp_lands_in_the_box_and_is_idempotent(x in prop::collection::vec(-10.0f64..10.0, 4)) {
        let b = SystemModel::cartpole().state_bounds;
        let mut y = x.clone();
        b.clamp(&mut y);
        prop_assert!(b.contains(&y));
        let mut z = y.clone();
        prop_assert!(!b.clamp(&mut z));
        prop_assert_eq!(y, z);
    }

    #[test]
    fn ellipsoid_samples_stay_inside(
        center in prop::collection::vec(-5.0f64..5.0, 3),
        axes in prop::collection::vec(1e-4f64..3.0, 3),
        seed in any::<u64>(),
    ) {
        let e = Ellipsoid::new(StateVector(center), StateVector(axes)).unwrap();
        let mut r = rng::seeded(seed);
        for _ in 0..20 {
            let x = e.sample_uniform(&mut r);
            prop_assert!(e.contains(&x), "m = {}", e.mahalanobis_sq(&x));
        }
    }

    #[test]
    fn chi2_quantile_grows_with_confidence(k in 1usize..6, a in 0.05f64..0.9, gap in 0.01f64..0.09) {
        prop_assert!(chi2_quantile(k, a).unwrap() < chi2_quantile(k, a + gap).unwrap());
    }

    #[test]
    fn dataset_csv_round_trips_exactly(pts in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 4), 1..20)) {
        let d = PerceptionDataset::from_pairs(
            pts.iter().map(|p| (StateVector(p.clone()), StateVector(p.iter().map(|v| v * 0.37 - 1e-9).collect()))).collect(),
        ).unwrap();
        let back = PerceptionDataset::from_csv(&d.to_csv()).unwrap();
        prop_assert_eq!(&back, &d);
        let m = d.merged();
        prop_assert!(m.len() <= d.len());
        prop_assert_eq!(m.merged(), m);
    }

    #[test]
    fn network_checkpoints_round_trip(seed in any::<u64>(), x in prop::collection::vec(-3.0f64..3.0, 2)) {
        let b = SystemModel::lanekeep().state_bounds;
        let h = Mlp::new(&b, 6, 1, Head::Barrier, seed);
        let back = Mlp::from_json(&h.to_json().unwrap()).unwrap();
        prop_assert_eq!(h.value(&x).to_bits(), back.value(&x).to_bits());
    }

    #[test]
    fn hard_sample_dedupe_covers_and_separates(
        pts in prop::collection::vec((prop::collection::vec(-1.0f64..1.0, 2), 0.0f64..1.0), 1..60),
        radius in 0.0f64..0.5,
        threshold in 0.0f64..0.5,
    ) {
        let set = CertTrainingSet {
            state_dim: 2,
            m2: 1,
            entries: pts.iter().map(|(p, _)| CertEntry {
                x_hat: StateVector(p.clone()),
                center: StateVector(p.clone()),
                inner: p.clone(),
                clipped: 0,
                flagged: false,
            }).collect(),
        };
        let viol: Vec<f64> = pts.iter().map(|(_, v)| *v).collect();
        let kept = collect_hard_samples(&set, &viol, threshold, radius);
        let dist = |a: &[f64], b: &[f64]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        for (i, a) in kept.iter().enumerate() {
            prop_assert!(a.violation > threshold);
            for b in &kept[i + 1..] {
                prop_assert!(dist(&a.x_hat, &b.x_hat) > radius);
                prop_assert!(a.violation >= b.violation);
            }
        }
        for ((p, v), _) in pts.iter().zip(&viol).filter(|((_, v), _)| *v > threshold) {
            prop_assert!(kept.iter().any(|k| dist(&k.x_hat, p) <= radius && k.violation >= *v));
        }
    }

    #[test]
    fn density_conserves_points(pts in prop::collection::vec(prop::collection::vec(-8.0f64..8.0, 2), 0..80), bins in 2usize..12) {
        let b = SystemModel::lanekeep().state_bounds;
        let d = PerceptionDataset::from_pairs(pts.iter().map(|p| (StateVector(p.clone()), StateVector(p.clone()))).collect()).unwrap();
        let h = export_density(&d, &b, (0, 1), bins).unwrap();
        prop_assert_eq!(h.total(), pts.len());
        prop_assert_eq!(h.counts.len(), bins);
    }

    #[test]
    fn chunked_sums_ignore_thread_count(vals in prop::collection::vec(-1e6f64..1e6, 0..300), threads in 1usize..4) {
        let f = || par::chunked_sum(vals.len(), 1, |i, acc| acc[0] += vals[i]);
        let a = par::with_threads(1, f);
        let b = par::with_threads(threads, f);
        prop_assert_eq!(a[0].to_bits(), b[0].to_bits());
    }
}
