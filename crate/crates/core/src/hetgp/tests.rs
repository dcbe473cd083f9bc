use super::*;
use crate::rng;
use rand::Rng;
use rand_distr::Distribution;

fn sv(v: &[f64]) -> StateVector {
    StateVector(v.to_vec())
}

/// Gauss-Jordan inverse with partial pivoting; independent of the Cholesky
/// path under test.
pub(crate) fn dense_inverse(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = r.clone();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    for c in 0..n {
        let p = (c..n).max_by(|&x, &y| m[x][c].abs().partial_cmp(&m[y][c].abs()).unwrap()).unwrap();
        m.swap(c, p);
        let piv = m[c][c];
        for v in m[c].iter_mut() {
            *v /= piv;
        }
        for r in 0..n {
            if r != c {
                let f = m[r][c];
                let pivot_row = m[c].clone();
                for (v, pv) in m[r].iter_mut().zip(pivot_row) {
                    *v -= f * pv;
                }
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

fn toy3() -> (PerceptionDataset, Vec<OutputHyperparams>) {
    let data = PerceptionDataset::from_pairs(vec![
        (sv(&[-1.0]), sv(&[-0.7])),
        (sv(&[0.2]), sv(&[0.5])),
        (sv(&[1.1]), sv(&[0.9])),
    ])
    .unwrap();
    let hyper = vec![OutputHyperparams {
        mean_kernel: KernelParams::new(0.8, vec![0.9]),
        noise_kernel: KernelParams::new(0.5, vec![1.3]),
        noise_gp_variance: 0.05,
        noise_prior_mean: -1.5,
        log_noise_targets: vec![-2.0, -1.2, -1.7],
    }];
    (data, hyper)
}

/// Mean and variance at `q` computed with explicit dense inverses.
fn oracle_predict(data: &PerceptionDataset, h: &OutputHyperparams, q: f64) -> (f64, f64) {
    let xs: Vec<f64> = data.perceived.iter().map(|v| v[0]).collect();
    let e: Vec<f64> = (0..xs.len()).map(|j| data.error(j)[0]).collect();
    let n = xs.len();
    let k = |p: &KernelParams, a: f64, b: f64| p.signal_variance * (-0.5 * ((a - b) / p.lengthscales[0]).powi(2)).exp();
    let matvec = |m: &Vec<Vec<f64>>, v: &[f64]| -> Vec<f64> { m.iter().map(|r| r.iter().zip(v).map(|(a, b)| a * b).sum()).collect() };
    let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };
    // log-noise GP
    let mut kz: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| k(&h.noise_kernel, xs[i], xs[j])).collect()).collect();
    for (i, row) in kz.iter_mut().enumerate() {
        row[i] += h.noise_gp_variance;
    }
    let kz_inv = dense_inverse(&kz);
    let zc: Vec<f64> = h.log_noise_targets.iter().map(|z| z - h.noise_prior_mean).collect();
    let wz = matvec(&kz_inv, &zc);
    let zhat = |x: f64| -> f64 {
        let ks: Vec<f64> = xs.iter().map(|xi| k(&h.noise_kernel, x, *xi)).collect();
        h.noise_prior_mean + dot(&ks, &wz)
    };
    // error GP with K_N = diag(exp(zhat)^2)
    let mut kr: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| k(&h.mean_kernel, xs[i], xs[j])).collect()).collect();
    for (i, row) in kr.iter_mut().enumerate() {
        row[i] += (2.0 * zhat(xs[i])).exp();
    }
    let kr_inv = dense_inverse(&kr);
    let ks: Vec<f64> = xs.iter().map(|xi| k(&h.mean_kernel, q, *xi)).collect();
    let mean = dot(&ks, &matvec(&kr_inv, &e));
    let var = h.mean_kernel.signal_variance + (2.0 * zhat(q)).exp() - dot(&ks, &matvec(&kr_inv, &ks));
    (mean, var)
}

#[test]
fn predictions_match_dense_inverse_oracle() {
    let (data, hyper) = toy3();
    let model = HetGpModel::with_hyperparameters(&data, hyper.clone()).unwrap();
    for q in [-2.0, -0.4, 0.2, 0.77, 3.0] {
        let p = model.predict_error(&[q]).unwrap();
        let (m, v) = oracle_predict(&data, &hyper[0], q);
        assert!((p.mean[0] - m).abs() <= 1e-8 * m.abs().max(1e-12), "mean at {q}: {} vs {m}", p.mean[0]);
        let got_var = p.std[0] * p.std[0];
        assert!((got_var - v).abs() <= 1e-8 * v, "var at {q}: {got_var} vs {v}");
    }
}

#[test]
fn noiseless_interpolation_reproduces_training_errors() {
    let (data, mut hyper) = toy3();
    hyper[0].noise_prior_mean = -15.0;
    hyper[0].log_noise_targets = vec![-15.0; 3];
    let model = HetGpModel::with_hyperparameters(&data, hyper).unwrap();
    for j in 0..3 {
        let p = model.predict_error(&data.perceived[j]).unwrap();
        assert!((p.mean[0] - data.error(j)[0]).abs() < 1e-6);
    }
}

#[test]
fn far_queries_revert_to_prior() {
    let (data, hyper) = toy3();
    let model = HetGpModel::with_hyperparameters(&data, hyper.clone()).unwrap();
    let q = [1.1 + 10.0 * 1.3 * 2.0];
    let p = model.predict_error(&q).unwrap();
    assert!(p.mean[0].abs() < 1e-12);
    let zhat = model.log_noise(&q)[0];
    assert!((zhat - hyper[0].noise_prior_mean).abs() < 1e-12);
    let expected = hyper[0].mean_kernel.signal_variance + (2.0 * zhat).exp();
    assert!((p.std[0].powi(2) - expected).abs() < 1e-12);
}

#[test]
fn exchangeable_under_row_permutation() {
    let mut rng = rng::seeded(5);
    let n = 12;
    let pairs: Vec<(StateVector, StateVector)> = (0..n)
        .map(|_| {
            let xh: Vec<f64> = vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let x = xh.iter().map(|v| v + 0.3 * v.sin()).collect();
            (StateVector(xh), StateVector(x))
        })
        .collect();
    let z: Vec<f64> = (0..n).map(|j| -1.0 - 0.1 * j as f64).collect();
    let hyper = |z: Vec<f64>| {
        (0..2)
            .map(|_| OutputHyperparams {
                mean_kernel: KernelParams::new(0.5, vec![0.8, 1.1]),
                noise_kernel: KernelParams::new(0.3, vec![1.0, 1.0]),
                noise_gp_variance: 0.1,
                noise_prior_mean: -1.0,
                log_noise_targets: z.clone(),
            })
            .collect::<Vec<_>>()
    };
    let a = HetGpModel::with_hyperparameters(&PerceptionDataset::from_pairs(pairs.clone()).unwrap(), hyper(z.clone())).unwrap();
    let perm: Vec<usize> = (0..n).rev().collect();
    let b = HetGpModel::with_hyperparameters(
        &PerceptionDataset::from_pairs(perm.iter().map(|&j| pairs[j].clone()).collect()).unwrap(),
        hyper(perm.iter().map(|&j| z[j]).collect()),
    )
    .unwrap();
    for _ in 0..20 {
        let q = [rng.random_range(-2.5..2.5), rng.random_range(-2.5..2.5)];
        let (pa, pb) = (a.predict_error(&q).unwrap(), b.predict_error(&q).unwrap());
        for i in 0..2 {
            assert!((pa.mean[i] - pb.mean[i]).abs() < 1e-10);
            assert!((pa.std[i] - pb.std[i]).abs() < 1e-10);
        }
    }
}

#[test]
fn adding_the_query_point_never_increases_latent_variance() {
    let (data, hyper) = toy3();
    let base = HetGpModel::with_hyperparameters(&data, hyper.clone()).unwrap();
    for q in [-0.5, 0.6, 2.0] {
        let mut bigger = data.clone();
        bigger.push(sv(&[q]), sv(&[q + 0.1])).unwrap();
        let mut h = hyper.clone();
        h[0].log_noise_targets.push(-1.5);
        let grown = HetGpModel::with_hyperparameters(&bigger, h).unwrap();
        assert!(grown.latent_variance(&[q])[0] <= base.latent_variance(&[q])[0] + 1e-15);
    }
}

#[test]
fn homoscedastic_fit_never_lowers_likelihood() {
    let inputs = vec![sv(&[0.0]), sv(&[1.0])];
    let targets = [0.3, -0.4];
    let init = KernelParams::new(1.0, vec![1.0]);
    let before = log_marginal_likelihood(&inputs, &targets, &init, 0.1).unwrap();
    let (k, nv) = fit_homoscedastic(&inputs, &targets, &init, 0.1).unwrap();
    let after = log_marginal_likelihood(&inputs, &targets, &k, nv).unwrap();
    assert!(after >= before);
}

#[test]
fn homoscedastic_fit_recovers_generative_noise() {
    let mut rng = rng::seeded(17);
    let normal = rand_distr::Normal::new(0.0, 0.1).unwrap();
    let xs: Vec<StateVector> = (0..50).map(|i| sv(&[-3.0 + 6.0 * i as f64 / 49.0])).collect();
    let ys: Vec<f64> = xs.iter().map(|x| x[0].sin() + normal.sample(&mut rng)).collect();
    let (_, nv) = fit_homoscedastic(&xs, &ys, &KernelParams::new(0.5, vec![1.5]), 0.05).unwrap();
    assert!((0.005..=0.02).contains(&nv), "noise variance {nv}");
}

#[test]
fn homoscedastic_fit_on_zero_targets_collapses_noise() {
    let xs: Vec<StateVector> = (0..20).map(|i| sv(&[i as f64 * 0.2])).collect();
    let ys = vec![0.0; 20];
    let (_, nv) = fit_homoscedastic(&xs, &ys, &KernelParams::new(1.0, vec![1.0]), 0.1).unwrap();
    assert!(nv <= 1e-4, "noise variance {nv}");
}

#[test]
fn zero_error_data_gives_zero_mean_and_tiny_noise() {
    let mut rng = rng::seeded(2);
    let pairs = (0..30)
        .map(|_| {
            let x = vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            (StateVector(x.clone()), StateVector(x))
        })
        .collect();
    let data = PerceptionDataset::from_pairs(pairs).unwrap();
    let model = fit_heteroscedastic(&data).unwrap();
    for j in 0..data.len() {
        let p = model.predict_error(&data.perceived[j]).unwrap();
        assert!(p.mean.iter().all(|m| m.abs() <= 1e-3));
        for i in 0..2 {
            assert!(model.training_log_noise(i)[j].exp() <= 1e-2);
        }
    }
}

fn small_dataset(seed: u64, n: usize) -> PerceptionDataset {
    let mut rng = rng::seeded(seed);
    let pairs = (0..n)
        .map(|_| {
            let x = vec![rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0)];
            let xh = vec![x[0] + 0.1 * rng.random_range(-1.0..1.0), x[1] + (x[0] * 1.5f64).sin() * 0.4];
            (StateVector(xh), StateVector(x))
        })
        .collect();
    PerceptionDataset::from_pairs(pairs).unwrap()
}

#[test]
fn refit_is_deterministic() {
    let data = small_dataset(1, 25);
    let a = fit_heteroscedastic(&data).unwrap();
    let b = fit_heteroscedastic(&data).unwrap();
    assert_eq!(a.to_checkpoint(), b.to_checkpoint());
}

#[test]
fn output_dimensions_are_independent() {
    let data = small_dataset(3, 25);
    let mut perturbed = data.clone();
    for x in perturbed.actual.iter_mut() {
        x[1] += 0.5 * x[0].cos();
    }
    let a = fit_heteroscedastic(&data).unwrap();
    let b = fit_heteroscedastic(&perturbed).unwrap();
    for q in [[0.3, 0.1], [-1.7, 0.9]] {
        let (pa, pb) = (a.predict_error(&q).unwrap(), b.predict_error(&q).unwrap());
        assert_eq!(pa.mean[0].to_bits(), pb.mean[0].to_bits());
        assert_eq!(pa.std[0].to_bits(), pb.std[0].to_bits());
        assert_ne!(pa.mean[1], pb.mean[1]);
    }
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let data = small_dataset(8, 20);
    let model = fit_heteroscedastic(&data).unwrap();
    let json = serde_json::to_string(&model.to_checkpoint()).unwrap();
    let back = HetGpModel::from_checkpoint(&serde_json::from_str(&json).unwrap()).unwrap();
    for q in [[0.0, 0.0], [1.2, -0.8]] {
        assert_eq!(model.predict_error(&q).unwrap(), back.predict_error(&q).unwrap());
    }
}

#[test]
fn variance_is_never_negative() {
    let data = small_dataset(12, 30);
    let model = fit_heteroscedastic(&data).unwrap();
    let mut rng = rng::seeded(4);
    for _ in 0..500 {
        let q = [rng.random_range(-4.0..4.0), rng.random_range(-3.0..3.0)];
        let p = model.predict_error(&q).unwrap();
        assert!(p.std.iter().all(|s| *s > 0.0 && s.is_finite()));
    }
}

#[test]
fn duplicates_are_merged_by_averaging() {
    let data = PerceptionDataset::from_pairs(vec![
        (sv(&[0.0]), sv(&[1.0])),
        (sv(&[0.5]), sv(&[0.5])),
        (sv(&[0.0]), sv(&[3.0])),
    ])
    .unwrap();
    let m = data.merged();
    assert_eq!(m.len(), 2);
    assert_eq!(m.actual[0].0, vec![2.0]);
}

#[test]
fn too_few_points_is_an_error() {
    let data = small_dataset(1, 4);
    assert!(matches!(fit_heteroscedastic(&data), Err(Error::InsufficientData { .. })));
}

#[test]
fn dataset_csv_round_trip() {
    let data = small_dataset(6, 7);
    let csv = data.to_csv();
    assert!(csv.starts_with("xhat0,xhat1,x0,x1\n"));
    assert_eq!(PerceptionDataset::from_csv(&csv).unwrap(), data);
    assert!(PerceptionDataset::from_csv("a,b\n1,2\n").is_err());
}

#[test]
fn log_residual_scale_removes_chi2_bias() {
    let mut rng = rng::seeded(31);
    let n = 200_000;
    let mean = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            (super::CHI2_LOG_SCALE * z * z).ln()
        })
        .sum::<f64>()
        / n as f64;
    // sd of ln(chi2_1) is pi / sqrt(2), so the standard error is ~5e-3
    assert!(mean.abs() < 0.02, "mean log {mean}");
}

#[test]
fn fitted_noise_tracks_input_dependent_spread() {
    let mut rng = rng::seeded(5);
    let pairs = (0..150)
        .map(|_| {
            let xh: f64 = rng.random_range(-2.0..2.0);
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            let e = 0.3 * xh.sin() + (0.05 + 0.25 * xh.abs()) * z;
            (sv(&[xh]), sv(&[xh + e]))
        })
        .collect();
    let model = fit_heteroscedastic(&PerceptionDataset::from_pairs(pairs).unwrap()).unwrap();
    let sd = |x: f64| model.log_noise(&[x])[0].exp();
    assert!(sd(1.5) > 2.0 * sd(0.0), "{} vs {}", sd(1.5), sd(0.0));
    assert!(sd(-1.5) > 2.0 * sd(0.0), "{} vs {}", sd(-1.5), sd(0.0));
    for x in [-1.5, -0.75, 0.75, 1.5] {
        let truth = 0.05 + 0.25 * f64::abs(x);
        assert!(sd(x) / truth < 2.0 && truth / sd(x) < 2.0, "x={x} sd={}", sd(x));
    }
}
