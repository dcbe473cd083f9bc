//! Benchmark plants, their synthetic perception functions, and closed-loop
//! simulation with a fixed-step RK4 integrator.

use std::f64::consts::{FRAC_PI_3, FRAC_PI_6, PI};
use std::fmt;
use std::ops::{Deref, DerefMut};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, ensure_dim, Error, Result};

macro_rules! real_vector {
    ($(#[$m:meta])* $name:ident) => {
        $(#[$m])*
        #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub Vec<f64>);

        impl $name {
            pub fn zeros(n: usize) -> Self {
                Self(vec![0.0; n])
            }
        }

        impl Deref for $name {
            type Target = [f64];
            fn deref(&self) -> &[f64] {
                &self.0
            }
        }

        impl DerefMut for $name {
            fn deref_mut(&mut self) -> &mut [f64] {
                &mut self.0
            }
        }

        impl From<Vec<f64>> for $name {
            fn from(v: Vec<f64>) -> Self {
                Self(v)
            }
        }

        impl From<&[f64]> for $name {
            fn from(v: &[f64]) -> Self {
                Self(v.to_vec())
            }
        }
    };
}

real_vector!(
    /// A point in a benchmark's state space.
    StateVector
);
real_vector!(
    /// A control input; components live in the plant's control box.
    ControlVector
);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Benchmark {
    /// Kinematic vehicle, state `[p_x, p_y, heading, speed]`.
    Dubins,
    /// Frictionless cart-pole, state `[p, v, theta, omega]`.
    #[serde(rename = "cartpole")]
    CartPole,
    /// Constant-speed lateral model, state `[p, theta]`.
    #[serde(rename = "lanekeep")]
    LaneKeep,
    /// `x' = x + u` on the line; zero control is unstable. Test fixture.
    #[serde(rename = "scalar")]
    UnstableScalar,
}

impl Benchmark {
    pub fn name(self) -> &'static str {
        match self {
            Benchmark::Dubins => "dubins",
            Benchmark::CartPole => "cartpole",
            Benchmark::LaneKeep => "lanekeep",
            Benchmark::UnstableScalar => "scalar",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dubins" => Ok(Benchmark::Dubins),
            "cartpole" => Ok(Benchmark::CartPole),
            "lanekeep" => Ok(Benchmark::LaneKeep),
            "scalar" => Ok(Benchmark::UnstableScalar),
            other => Err(Error::Config(format!("unknown benchmark `{other}`"))),
        }
    }
}

impl fmt::Display for Benchmark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which perception function the plant is observed through.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Perception {
    /// The benchmark's own synthetic error model.
    Benchmark,
    /// `s(x) = x`.
    Identity,
}

/// Axis-aligned box `[lo, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxSet {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        assert_eq!(lo.len(), hi.len());
        assert!(lo.iter().zip(&hi).all(|(l, h)| l < h), "empty box");
        Self { lo, hi }
    }

    pub fn symmetric(half: &[f64]) -> Self {
        Self::new(half.iter().map(|h| -h).collect(), half.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (l, h))| *l <= *v && *v <= *h)
    }

    pub fn clamp(&self, x: &mut [f64]) -> bool {
        let mut clipped = false;
        for (v, (l, h)) in x.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            if *v < *l {
                *v = *l;
                clipped = true;
            } else if *v > *h {
                *v = *h;
                clipped = true;
            }
        }
        clipped
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| 0.5 * (l + h)).collect()
    }

    pub fn half_widths(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| 0.5 * (h - l)).collect()
    }

    /// Euclidean length of the box diagonal.
    pub fn diameter(&self) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| (h - l) * (h - l))
            .sum::<f64>()
            .sqrt()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| l + (h - l) * rng.random::<f64>())
            .collect()
    }
}

/// One `|x[dim]| < limit` (or `<=` when not strict) constraint of a safe set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SafeBound {
    pub dim: usize,
    pub limit: f64,
    pub strict: bool,
}

impl SafeBound {
    fn holds(&self, x: &[f64]) -> bool {
        let a = x[self.dim].abs();
        if self.strict {
            a < self.limit
        } else {
            a <= self.limit
        }
    }
}

/// A benchmark plant: dynamics, boxes, safe set and integration step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemModel {
    pub benchmark: Benchmark,
    pub perception: Perception,
    pub state_bounds: BoxSet,
    pub control_bounds: BoxSet,
    pub safe_set: Vec<SafeBound>,
    /// Angle components wrapped to `[-pi, pi)` after every step; they never
    /// count as leaving the state box.
    pub wrap_dims: Vec<bool>,
    /// Components held inside their state-box range after every step (a
    /// hard actuator limit); like wrapped angles they never count as leaving.
    #[serde(default)]
    pub saturate_dims: Vec<bool>,
    pub dt: f64,
}

const CART_MASS: f64 = 1.0;
const POLE_MASS: f64 = 0.1;
const POLE_HALF_LENGTH: f64 = 0.5;
const GRAVITY: f64 = 9.8;
const LANE_SPEED: f64 = 5.0;
pub const DEFAULT_DT: f64 = 0.01;

impl SystemModel {
    pub fn dubins() -> Self {
        Self {
            benchmark: Benchmark::Dubins,
            perception: Perception::Benchmark,
            state_bounds: BoxSet::new(vec![-3.0, -3.0, -PI, 0.5], vec![3.0, 3.0, PI, 2.0]),
            control_bounds: BoxSet::symmetric(&[2.0, 2.0]),
            safe_set: vec![
                SafeBound { dim: 0, limit: 2.0, strict: false },
                SafeBound { dim: 1, limit: 2.0, strict: false },
            ],
            wrap_dims: vec![false, false, true, false],
            saturate_dims: vec![false, false, false, true],
            dt: DEFAULT_DT,
        }
    }

    pub fn cartpole() -> Self {
        Self {
            benchmark: Benchmark::CartPole,
            perception: Perception::Benchmark,
            state_bounds: BoxSet::symmetric(&[4.0, 2.0, FRAC_PI_3, 2.0]),
            control_bounds: BoxSet::symmetric(&[10.0]),
            safe_set: vec![
                SafeBound { dim: 0, limit: 3.0, strict: true },
                SafeBound { dim: 2, limit: FRAC_PI_6, strict: true },
            ],
            wrap_dims: vec![false; 4],
            saturate_dims: vec![false; 4],
            dt: DEFAULT_DT,
        }
    }

    pub fn lanekeep() -> Self {
        Self {
            benchmark: Benchmark::LaneKeep,
            perception: Perception::Benchmark,
            state_bounds: BoxSet::symmetric(&[5.0, FRAC_PI_3]),
            control_bounds: BoxSet::symmetric(&[1.0]),
            safe_set: vec![SafeBound { dim: 0, limit: 3.5, strict: true }],
            wrap_dims: vec![false; 2],
            saturate_dims: vec![false; 2],
            dt: DEFAULT_DT,
        }
    }

    pub fn unstable_scalar() -> Self {
        Self {
            benchmark: Benchmark::UnstableScalar,
            perception: Perception::Identity,
            state_bounds: BoxSet::symmetric(&[2.0]),
            control_bounds: BoxSet::symmetric(&[2.0]),
            safe_set: vec![SafeBound { dim: 0, limit: 1.0, strict: true }],
            wrap_dims: vec![false],
            saturate_dims: vec![false],
            dt: DEFAULT_DT,
        }
    }

    pub fn for_benchmark(b: Benchmark) -> Self {
        match b {
            Benchmark::Dubins => Self::dubins(),
            Benchmark::CartPole => Self::cartpole(),
            Benchmark::LaneKeep => Self::lanekeep(),
            Benchmark::UnstableScalar => Self::unstable_scalar(),
        }
    }

    pub fn with_perception(mut self, p: Perception) -> Self {
        self.perception = p;
        self
    }

    pub fn state_dim(&self) -> usize {
        self.state_bounds.dim()
    }

    pub fn control_dim(&self) -> usize {
        self.control_bounds.dim()
    }

    /// Unchecked `f(x, u)` into `out`.
    pub fn field_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        match self.benchmark {
            Benchmark::Dubins => {
                let (th, v) = (x[2], x[3]);
                out[0] = v * th.cos();
                out[1] = v * th.sin();
                out[2] = u[0];
                out[3] = u[1];
            }
            Benchmark::CartPole => {
                let (vel, th, om) = (x[1], x[2], x[3]);
                let (s, c) = th.sin_cos();
                let total = CART_MASS + POLE_MASS;
                let pml = POLE_MASS * POLE_HALF_LENGTH;
                let temp = (u[0] + pml * om * om * s) / total;
                let den = POLE_HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * c * c / total);
                let th_acc = (GRAVITY * s - c * temp) / den;
                out[0] = vel;
                out[1] = temp - pml * th_acc * c / total;
                out[2] = om;
                out[3] = th_acc;
            }
            Benchmark::LaneKeep => {
                out[0] = LANE_SPEED * x[1].sin();
                out[1] = u[0];
            }
            Benchmark::UnstableScalar => {
                out[0] = x[0] + u[0];
            }
        }
    }

    /// `df/du` at `(x, u)`, row-major `n x m`.
    pub fn control_jacobian_into(&self, x: &[f64], _u: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        match self.benchmark {
            Benchmark::Dubins => {
                out[2 * 2] = 1.0;
                out[3 * 2 + 1] = 1.0;
            }
            Benchmark::CartPole => {
                let c = x[2].cos();
                let total = CART_MASS + POLE_MASS;
                let pml = POLE_MASS * POLE_HALF_LENGTH;
                let den = POLE_HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * c * c / total);
                let dth = -c / (total * den);
                out[1] = 1.0 / total - pml * c * dth / total;
                out[3] = dth;
            }
            Benchmark::LaneKeep => out[1] = 1.0,
            Benchmark::UnstableScalar => out[0] = 1.0,
        }
    }

    /// `x' = f(x, u)`.
    pub fn vector_field(&self, x: &[f64], u: &[f64]) -> Result<StateVector> {
        ensure_dim("state", self.state_dim(), x.len())?;
        ensure_dim("control", self.control_dim(), u.len())?;
        let mut out = StateVector::zeros(self.state_dim());
        self.field_into(x, u, &mut out);
        Ok(out)
    }

    /// Perceived state `s(x)`; components the perception leaves alone are
    /// copied bit-for-bit.
    pub fn perceive(&self, x: &[f64]) -> StateVector {
        let mut xh = StateVector::from(x);
        if self.perception == Perception::Identity {
            return xh;
        }
        match self.benchmark {
            Benchmark::Dubins => xh[2] = x[2] + (x[0] + x[1]).sin(),
            Benchmark::CartPole => {
                let phase = 2.0 * x[0] + 4.0 * x[2];
                xh[1] = x[1] + phase.sin();
                xh[3] = x[3] + phase.cos();
            }
            Benchmark::LaneKeep => {
                xh[0] = x[0] + 0.5 * (3.0 * x[1]).sin();
                xh[1] = x[1] + 0.2 * (2.0 * x[0]).sin();
            }
            Benchmark::UnstableScalar => {}
        }
        xh
    }

    pub fn in_safe_set(&self, x: &[f64]) -> bool {
        self.safe_set.iter().all(|b| b.holds(x))
    }

    fn is_saturated(&self, i: usize) -> bool {
        self.saturate_dims.get(i).copied().unwrap_or(false)
    }

    /// Membership in the state box, ignoring wrapped and saturated components.
    pub fn in_state_space(&self, x: &[f64]) -> bool {
        x.iter().enumerate().all(|(i, v)| {
            self.wrap_dims[i]
                || self.is_saturated(i)
                || (self.state_bounds.lo[i] <= *v && *v <= self.state_bounds.hi[i])
        })
    }

    /// The box `S ∩ X` (every safe set here is a box).
    pub fn safe_box(&self) -> BoxSet {
        let mut b = self.state_bounds.clone();
        for c in &self.safe_set {
            b.lo[c.dim] = b.lo[c.dim].max(-c.limit);
            b.hi[c.dim] = b.hi[c.dim].min(c.limit);
        }
        b
    }

    fn wrap(&self, x: &mut [f64]) {
        for (i, v) in x.iter_mut().enumerate() {
            if self.wrap_dims[i] {
                *v = (*v + PI).rem_euclid(2.0 * PI) - PI;
            } else if self.is_saturated(i) {
                *v = v.clamp(self.state_bounds.lo[i], self.state_bounds.hi[i]);
            }
        }
    }

    /// One classical RK4 step of length `dt` with `u` held constant.
    pub fn integrate_step(&self, x: &[f64], u: &[f64]) -> Result<StateVector> {
        ensure_dim("state", self.state_dim(), x.len())?;
        ensure_dim("control", self.control_dim(), u.len())?;
        let next = self.rk4(x, u);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::IntegrationBlowup { time: self.dt });
        }
        Ok(StateVector(next))
    }

    fn rk4(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let n = x.len();
        let dt = self.dt;
        let mut k1 = vec![0.0; n];
        let mut k2 = vec![0.0; n];
        let mut k3 = vec![0.0; n];
        let mut k4 = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        self.field_into(x, u, &mut k1);
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * dt * k1[i];
        }
        self.field_into(&tmp, u, &mut k2);
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * dt * k2[i];
        }
        self.field_into(&tmp, u, &mut k3);
        for i in 0..n {
            tmp[i] = x[i] + dt * k3[i];
        }
        self.field_into(&tmp, u, &mut k4);
        (0..n)
            .map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect()
    }

    /// Number of integration steps covering `horizon_s`.
    pub fn steps_for(&self, horizon_s: f64) -> usize {
        // tolerate representation error so that horizon = k*dt gives k steps
        ((horizon_s / self.dt) - 1e-9).ceil().max(1.0) as usize
    }

    /// Closed-loop rollout from `x0`. `policy` sees the actual state; callers
    /// compose perception and estimation inside it. Controls are saturated to
    /// the control box. Stops early when the state leaves the state box.
    pub fn rollout<P>(&self, x0: &[f64], policy: P, horizon_s: f64) -> Result<Trajectory>
    where
        P: FnMut(&[f64]) -> ControlVector,
    {
        self.rollout_until(x0, policy, horizon_s, |_| false)
    }

    /// Like [`rollout`](Self::rollout), additionally stopping after the first
    /// recorded state for which `stop` returns true.
    pub fn rollout_until<P, S>(
        &self,
        x0: &[f64],
        mut policy: P,
        horizon_s: f64,
        mut stop: S,
    ) -> Result<Trajectory>
    where
        P: FnMut(&[f64]) -> ControlVector,
        S: FnMut(&[f64]) -> bool,
    {
        ensure_dim("initial state", self.state_dim(), x0.len())?;
        if !(horizon_s > 0.0) {
            return Err(contract("rollout horizon must be positive"));
        }
        let steps = self.steps_for(horizon_s);
        let mut traj = Trajectory {
            times: Vec::with_capacity(steps + 1),
            states: Vec::with_capacity(steps + 1),
            controls: Vec::with_capacity(steps),
            left_state_space: false,
        };
        let mut x = x0.to_vec();
        traj.times.push(0.0);
        traj.states.push(StateVector(x.clone()));
        if !self.in_state_space(&x) {
            traj.left_state_space = true;
            return Ok(traj);
        }
        if stop(&x) {
            return Ok(traj);
        }
        for k in 0..steps {
            let mut u = policy(&x);
            ensure_dim("policy output", self.control_dim(), u.len())?;
            self.control_bounds.clamp(&mut u);
            let mut next = self.rk4(&x, &u);
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::IntegrationBlowup {
                    time: (k + 1) as f64 * self.dt,
                });
            }
            self.wrap(&mut next);
            traj.controls.push(u);
            traj.times.push((k + 1) as f64 * self.dt);
            traj.states.push(StateVector(next.clone()));
            x = next;
            if !self.in_state_space(&x) {
                traj.left_state_space = true;
                break;
            }
            if stop(&x) {
                break;
            }
        }
        Ok(traj)
    }
}

/// A sampled closed-loop trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<StateVector>,
    pub controls: Vec<ControlVector>,
    /// Set when the rollout terminated because the state left the state box.
    pub left_state_space: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn final_state(&self) -> &StateVector {
        self.states.last().expect("trajectory has an initial state")
    }

    /// CSV with header `t,x0..x{n-1},u0..u{m-1}`; the final row has blank
    /// controls.
    pub fn to_csv(&self, control_dim: usize) -> String {
        let n = self.states.first().map_or(0, |s| s.len());
        let mut out = String::from("t");
        for i in 0..n {
            out.push_str(&format!(",x{i}"));
        }
        for j in 0..control_dim {
            out.push_str(&format!(",u{j}"));
        }
        out.push('\n');
        for (k, (t, x)) in self.times.iter().zip(&self.states).enumerate() {
            out.push_str(&crate::io::fmt_f64(*t));
            for v in x.iter() {
                out.push(',');
                out.push_str(&crate::io::fmt_f64(*v));
            }
            match self.controls.get(k) {
                Some(u) => {
                    for v in u.iter() {
                        out.push(',');
                        out.push_str(&crate::io::fmt_f64(*v));
                    }
                }
                None => out.push_str(&",".repeat(control_dim)),
            }
            out.push('\n');
        }
        out
    }
}
