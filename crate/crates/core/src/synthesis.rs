//! Joint training of the barrier `h` and controller `pi` on the robust CBF loss.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::confset::{EstimatorConfig, StateEstimator};
use crate::dynamics::{StateVector, SystemModel};
use crate::error::{Error, Result};
use crate::neural::{Mlp, DEFAULT_WIDTH};
use crate::{io, par, rng};

/// An entry is flagged when more than this fraction of its inner samples was clipped to X.
pub const CLIP_FLAG_FRACTION: f64 = 0.2;

const STREAM_TRAINING_SET: u64 = 0x7472_6169_6e73_6574;
const STREAM_SHUFFLE: u64 = 0x7368_7566_666c_6500;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub m1: usize,
    pub m2: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha_slope: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            m1: 10_000,
            m2: 32,
            lambda1: 0.01,
            lambda2: 1.0,
            alpha_slope: 0.1,
            epochs: 30,
            learning_rate: 0.1,
            batch_size: 256,
            width: DEFAULT_WIDTH,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [self.m1, self.m2, self.epochs, self.batch_size, self.width];
        if counts.contains(&0) {
            return Err(Error::Config("m1, m2, epochs, batch_size and width must be positive".into()));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0 && self.alpha_slope > 0.0 && self.learning_rate >= 0.0) {
            return Err(Error::Config("loss weights, alpha_slope and learning_rate must be non-negative".into()));
        }
        Ok(())
    }
}

/// One perceived state with its ellipsoid center and inner samples.
#[derive(Clone, Debug, PartialEq)]
pub struct CertEntry {
    pub x_hat: StateVector,
    pub center: StateVector,
    /// `m2` samples, row-major.
    pub inner: Vec<f64>,
    /// Inner samples that had to be clipped into X.
    pub clipped: usize,
    pub flagged: bool,
}

impl CertEntry {
    pub fn inner_sample(&self, j: usize, n: usize) -> &[f64] {
        &self.inner[j * n..(j + 1) * n]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CertTrainingSet {
    pub state_dim: usize,
    pub m2: usize,
    pub entries: Vec<CertEntry>,
}

impl CertTrainingSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_samples(&self) -> usize {
        self.entries.len() * self.m2
    }

    pub fn clip_count(&self) -> usize {
        self.entries.iter().map(|e| e.clipped).sum()
    }

    pub fn flagged_count(&self) -> usize {
        self.entries.iter().filter(|e| e.flagged).count()
    }
}

/// Draws `m1` perceived states uniformly over X and `m2` points uniformly in
/// each one's ellipsoid. Entry `i` uses its own random stream, so the result
/// does not depend on the thread count.
pub fn build_training_set(
    sys: &SystemModel,
    estimator: &StateEstimator,
    ecfg: &EstimatorConfig,
    cfg: &TrainConfig,
) -> Result<CertTrainingSet> {
    cfg.validate()?;
    ecfg.validate()?;
    let n = sys.state_dim();
    let seed = rng::mix(cfg.seed, STREAM_TRAINING_SET);
    let entries = par::map_indexed(cfg.m1, |i| -> Result<CertEntry> {
        let mut r = rng::stream(seed, i as u64);
        let x_hat = StateVector(sys.state_bounds.sample(&mut r));
        let e = estimator.estimate(ecfg, &x_hat)?;
        let mut inner = Vec::with_capacity(cfg.m2 * n);
        let mut clipped = 0;
        for _ in 0..cfg.m2 {
            let mut x = e.sample_uniform(&mut r);
            clipped += sys.state_bounds.clamp(&mut x) as usize;
            inner.extend_from_slice(&x);
        }
        Ok(CertEntry {
            x_hat,
            center: e.center,
            inner,
            clipped,
            flagged: clipped as f64 > CLIP_FLAG_FRACTION * cfg.m2 as f64,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(CertTrainingSet {
        state_dim: n,
        m2: cfg.m2,
        entries,
    })
}

/// `grad_x h(x) . f(x, u) + alpha_slope * h(x)`; the loss contribution is `max(0, -r)`.
pub fn cbf_residual(h: &Mlp, sys: &SystemModel, u: &[f64], x: &[f64], alpha_slope: f64) -> Result<f64> {
    let f = sys.vector_field(x, u)?;
    let g = h.grad_input(x)?;
    let d: f64 = g.iter().zip(f.iter()).map(|(a, b)| a * b).sum();
    Ok(d + alpha_slope * h.value(x))
}

/// Same residual with the control computed as `pi(center)`.
pub fn cbf_residual_at(h: &Mlp, pi: &Mlp, sys: &SystemModel, center: &[f64], x: &[f64], alpha_slope: f64) -> Result<f64> {
    let u = pi.forward(center)?;
    cbf_residual(h, sys, &u, x, alpha_slope)
}

/// Lower bound on each set-loss contribution. Without it the loss can be
/// driven to minus infinity by scaling `h` up inside S, which swamps the
/// CBF term.
pub const SET_TERM_FLOOR: f64 = -1.0;

/// `max(h(x), -1)` outside S, `max(-h(x), -1)` inside.
pub fn set_loss_term(h: &Mlp, x: &[f64], sys: &SystemModel) -> f64 {
    let sign = if sys.in_safe_set(x) { -1.0 } else { 1.0 };
    set_piece(sign, h.value(x)).0
}

/// Floored signed value and its derivative in `h` (zero on the floor).
fn set_piece(sign: f64, h: f64) -> (f64, f64) {
    let v = sign * h;
    if v > SET_TERM_FLOOR {
        (v, sign)
    } else {
        (SET_TERM_FLOOR, 0.0)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Mean of `ReLU(-r)` over all (entry, inner sample) pairs.
    pub cbf_term: f64,
    /// Mean of the floored signed set term over the same pairs.
    pub set_term: f64,
    /// Pairs with `r < 0`.
    pub violation_count: usize,
}

impl LossBreakdown {
    fn from_sums(cbf_sum: f64, set_sum: f64, violations: usize, count: usize, cfg: &TrainConfig) -> Self {
        let cbf_term = cbf_sum / count as f64;
        let set_term = set_sum / count as f64;
        Self {
            total: cfg.lambda1 * cbf_term + cfg.lambda2 * set_term,
            cbf_term,
            set_term,
            violation_count: violations,
        }
    }
}

/// Per-entry loss pieces computed during a pass over the set.
#[derive(Clone, Copy, Debug, Default)]
struct EntryStats {
    cbf_sum: f64,
    set_sum: f64,
    violations: usize,
    max_violation: f64,
}

/// Loss pieces for the entries `idx`, processed as one batch. When `grad` is
/// given, the gradient scaled by `scale` is added into it, laid out as
/// `[theta_h, theta_pi]`.
fn chunk_pass(
    sys: &SystemModel,
    h: &Mlp,
    pi: &Mlp,
    set: &CertTrainingSet,
    idx: &[usize],
    cfg: &TrainConfig,
    grad: Option<(f64, &mut [f64])>,
) -> Vec<EntryStats> {
    let n = sys.state_dim();
    let m = sys.control_dim();
    let m2 = set.m2;
    let rows = idx.len() * m2;
    let pi_tapes: Vec<_> = idx.iter().map(|&i| pi.tape(&set.entries[i].center)).collect();
    let mut xs = Vec::with_capacity(rows * n);
    let mut fs = vec![0.0; rows * n];
    let mut signs = Vec::with_capacity(rows);
    for (k, &i) in idx.iter().enumerate() {
        let entry = &set.entries[i];
        xs.extend_from_slice(&entry.inner);
        for j in 0..m2 {
            let row = k * m2 + j;
            let x = entry.inner_sample(j, n);
            sys.field_into(x, &pi_tapes[k].output, &mut fs[row * n..(row + 1) * n]);
            signs.push(if sys.in_safe_set(x) { -1.0 } else { 1.0 });
        }
    }
    let residual = |hv: f64, d: f64| d + cfg.alpha_slope * hv;
    let out = match grad {
        None => h.barrier_batch(&xs, &fs, None::<(&mut [f64], fn(usize, f64, f64) -> (f64, f64))>),
        Some((scale, g)) => {
            let (gh, gp) = g.split_at_mut(h.n_params());
            let weights = |row: usize, hv: f64, d: f64| {
                let mut a = 0.0;
                let mut b = cfg.lambda2 * set_piece(signs[row], hv).1;
                if residual(hv, d) < 0.0 {
                    a = -cfg.lambda1;
                    b -= cfg.lambda1 * cfg.alpha_slope;
                }
                (scale * a, scale * b)
            };
            let out = h.barrier_batch(&xs, &fs, Some((gh, weights)));
            // Controller path: d r / d u = grad_x h . df/du, summed over the
            // entry's violating samples, then one backward pass through pi.
            let mut jac = vec![0.0; n * m];
            for (k, tape) in pi_tapes.iter().enumerate() {
                let mut u_bar = vec![0.0; m];
                for j in 0..m2 {
                    let row = k * m2 + j;
                    if residual(out.values[row], out.directional[row]) >= 0.0 {
                        continue;
                    }
                    let x = &xs[row * n..(row + 1) * n];
                    let gx = &out.grad_x[row * n..(row + 1) * n];
                    sys.control_jacobian_into(x, &tape.output, &mut jac);
                    for (c, ub) in u_bar.iter_mut().enumerate() {
                        let mut s = 0.0;
                        for i in 0..n {
                            s += gx[i] * jac[i * m + c];
                        }
                        *ub -= scale * cfg.lambda1 * s;
                    }
                }
                if u_bar.iter().any(|v| *v != 0.0) {
                    pi.accumulate_output_grad(tape, &u_bar, gp);
                }
            }
            out
        }
    };
    (0..idx.len())
        .map(|k| {
            let mut st = EntryStats::default();
            for j in 0..m2 {
                let row = k * m2 + j;
                let hv = out.values[row];
                st.set_sum += set_piece(signs[row], hv).0;
                let r = residual(hv, out.directional[row]);
                if r < 0.0 {
                    st.violations += 1;
                    st.cbf_sum -= r;
                    st.max_violation = st.max_violation.max(-r);
                }
            }
            st
        })
        .collect()
}

/// Loss over the whole set plus, per entry, the largest ReLU violation
/// `max_j max(0, -r_ij)`.
pub fn evaluate(sys: &SystemModel, h: &Mlp, pi: &Mlp, set: &CertTrainingSet, cfg: &TrainConfig) -> (LossBreakdown, Vec<f64>) {
    let chunks = set.len().div_ceil(par::REDUCE_CHUNK);
    let stats: Vec<EntryStats> = par::map_indexed(chunks, |c| {
        let idx: Vec<usize> = (c * par::REDUCE_CHUNK..((c + 1) * par::REDUCE_CHUNK).min(set.len())).collect();
        chunk_pass(sys, h, pi, set, &idx, cfg, None)
    })
    .into_iter()
    .flatten()
    .collect();
    let (mut cbf, mut st, mut viol) = (0.0, 0.0, 0);
    for s in &stats {
        cbf += s.cbf_sum;
        st += s.set_sum;
        viol += s.violations;
    }
    let loss = LossBreakdown::from_sums(cbf, st, viol, set.n_samples().max(1), cfg);
    (loss, stats.iter().map(|s| s.max_violation).collect())
}

/// Loss and gradient over a subset of entries, gradient laid out as
/// `[theta_h, theta_pi]`. Reduction order is fixed (see [`par::chunked_reduce`]).
pub fn loss_and_gradient(
    sys: &SystemModel,
    h: &Mlp,
    pi: &Mlp,
    set: &CertTrainingSet,
    indices: &[usize],
    cfg: &TrainConfig,
) -> (LossBreakdown, Vec<f64>) {
    let count = indices.len() * set.m2;
    let scale = 1.0 / count as f64;
    let np = h.n_params() + pi.n_params();
    // Three trailing slots carry cbf_sum, set_sum and the violation count.
    let acc = par::chunked_reduce(indices.len(), np + 3, |range, buf| {
        let (g, tail) = buf.split_at_mut(np);
        for s in chunk_pass(sys, h, pi, set, &indices[range], cfg, Some((scale, g))) {
            tail[0] += s.cbf_sum;
            tail[1] += s.set_sum;
            tail[2] += s.violations as f64;
        }
    });
    let loss = LossBreakdown::from_sums(acc[np], acc[np + 1], acc[np + 2] as usize, count, cfg);
    let mut g = acc;
    g.truncate(np);
    (loss, g)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Full-set loss after the last epoch.
    pub final_loss: LossBreakdown,
    /// Per epoch, the sample-weighted mean of the minibatch losses seen while training.
    pub log: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn log_csv(&self) -> String {
        let mut s = String::from("epoch,total,cbf_term,set_term,violation_count\n");
        for r in &self.log {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch,
                io::fmt_f64(r.loss.total),
                io::fmt_f64(r.loss.cbf_term),
                io::fmt_f64(r.loss.set_term),
                r.loss.violation_count
            ));
        }
        s
    }
}

fn batch_json(set: &CertTrainingSet, idx: &[usize]) -> String {
    let xs: Vec<&StateVector> = idx.iter().map(|&i| &set.entries[i].x_hat).collect();
    serde_json::to_string(&xs).unwrap_or_default()
}

/// Minibatch SGD on the empirical loss, updating `h` and `pi` in place.
pub fn train(sys: &SystemModel, set: &CertTrainingSet, cfg: &TrainConfig, h: &mut Mlp, pi: &mut Mlp) -> Result<TrainReport> {
    cfg.validate()?;
    let nh = h.n_params();
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut shuffle_rng = rng::stream(rng::mix(cfg.seed, STREAM_SHUFFLE), 0);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut cbf, mut st, mut viol, mut seen) = (0.0, 0.0, 0usize, 0usize);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (loss, g) = loss_and_gradient(sys, h, pi, set, batch, cfg);
            if !loss.total.is_finite() || g.iter().any(|v| !v.is_finite()) {
                return Err(Error::TrainingDiverged {
                    epoch,
                    step,
                    batch: batch_json(set, batch),
                });
            }
            let c = batch.len() * set.m2;
            cbf += loss.cbf_term * c as f64;
            st += loss.set_term * c as f64;
            viol += loss.violation_count;
            seen += c;
            if cfg.learning_rate != 0.0 {
                for (p, d) in h.params_mut().iter_mut().zip(&g[..nh]) {
                    *p -= cfg.learning_rate * d;
                }
                for (p, d) in pi.params_mut().iter_mut().zip(&g[nh..]) {
                    *p -= cfg.learning_rate * d;
                }
            }
        }
        log.push(EpochRecord {
            epoch,
            loss: LossBreakdown::from_sums(cbf, st, viol, seen.max(1), cfg),
        });
    }
    let (final_loss, _) = evaluate(sys, h, pi, set, cfg);
    if !final_loss.total.is_finite() {
        return Err(Error::TrainingDiverged {
            epoch: cfg.epochs,
            step: 0,
            batch: batch_json(set, &order),
        });
    }
    Ok(TrainReport { final_loss, log })
}

/// Fresh networks for a system, seeded from `seed`.
pub fn init_networks(sys: &SystemModel, width: usize, seed: u64) -> (Mlp, Mlp) {
    let h = Mlp::barrier(&sys.state_bounds, width, rng::mix(seed, 1));
    let pi = Mlp::controller(&sys.state_bounds, &sys.control_bounds, width, rng::mix(seed, 2));
    (h, pi)
}
