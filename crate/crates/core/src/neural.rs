//! Fixed-shape tanh MLPs `n -> W -> W -> m` for the barrier and the controller.
//!
//! Parameters live in one flat vector laid out as
//! `[W1 (W x n), b1 (W), W2 (W x W), b2 (W), W3 (m x W), b3 (m)]`, weights
//! row-major. Inputs are first mapped affinely from a box to `[-1, 1]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{BoxSet, StateVector};
use crate::error::{contract, ensure_dim, Error, Result};
use crate::io;
use crate::linalg::{gemm, MatRef};
use crate::rng;

pub const DEFAULT_WIDTH: usize = 128;

#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    /// Scalar affine output `h(x)`.
    Barrier,
    /// `mid + half * tanh(a)` componentwise, so the output always lies in `[lo, hi]`.
    Controller { lo: Vec<f64>, hi: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    n_in: usize,
    width: usize,
    n_out: usize,
    in_center: Vec<f64>,
    in_scale: Vec<f64>,
    input_box: BoxSet,
    head: Head,
    params: Vec<f64>,
}

/// Activations of one forward pass, enough to replay any derivative.
#[derive(Clone, Debug)]
pub struct Tape {
    pub z0: Vec<f64>,
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
    pub a3: Vec<f64>,
    pub output: Vec<f64>,
}

struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    end: usize,
}

fn layout(n: usize, w: usize, m: usize) -> Layout {
    let w1 = 0;
    let b1 = w1 + w * n;
    let w2 = b1 + w;
    let b2 = w2 + w * w;
    let w3 = b2 + w;
    let b3 = w3 + m * w;
    Layout {
        w1,
        b1,
        w2,
        b2,
        w3,
        b3,
        end: b3 + m,
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out = W x` for row-major `W` (rows x cols).
fn matvec(w: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o = dot(row, x);
    }
}

/// `out = W^T y` for row-major `W` (rows x cols).
fn matvec_t(w: &[f64], y: &[f64], out: &mut [f64]) {
    let cols = out.len();
    out.iter_mut().for_each(|v| *v = 0.0);
    for (yi, row) in y.iter().zip(w.chunks_exact(cols)) {
        if *yi != 0.0 {
            axpy(*yi, row, out);
        }
    }
}

/// `G += u v^T` (row-major, rows = u.len()).
fn add_outer(g: &mut [f64], u: &[f64], v: &[f64]) {
    for (ui, row) in u.iter().zip(g.chunks_exact_mut(v.len())) {
        if *ui != 0.0 {
            axpy(*ui, v, row);
        }
    }
}

/// `G += u1 v1^T + u2 v2^T`, fused over rows.
fn add_outer2(g: &mut [f64], u1: &[f64], v1: &[f64], u2: &[f64], v2: &[f64]) {
    let cols = v1.len();
    for ((a, b), row) in u1.iter().zip(u2).zip(g.chunks_exact_mut(cols)) {
        for ((r, x), y) in row.iter_mut().zip(v1).zip(v2) {
            *r += a * x + b * y;
        }
    }
}

impl Mlp {
    /// Seeded initialization, every weight and bias uniform in `+-1/sqrt(fan_in)`.
    pub fn new(input_box: &BoxSet, width: usize, n_out: usize, head: Head, seed: u64) -> Self {
        let mut m = Self::zeros(input_box, width, n_out, head);
        let mut r = rng::seeded(seed);
        let l = layout(m.n_in, width, n_out);
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize, p: &mut [f64]| {
            let b = 1.0 / (fan_in as f64).sqrt();
            for v in &mut p[range] {
                *v = r.random_range(-b..b);
            }
        };
        fill(l.w1..l.w2, m.n_in, &mut m.params);
        fill(l.w2..l.w3, width, &mut m.params);
        fill(l.w3..l.end, width, &mut m.params);
        m
    }

    pub fn zeros(input_box: &BoxSet, width: usize, n_out: usize, head: Head) -> Self {
        if let Head::Controller { lo, hi } = &head {
            assert_eq!(lo.len(), n_out);
            assert_eq!(hi.len(), n_out);
        }
        let n_in = input_box.dim();
        Self {
            n_in,
            width,
            n_out,
            in_center: input_box.center(),
            in_scale: input_box.half_widths().iter().map(|h| 1.0 / h).collect(),
            input_box: input_box.clone(),
            head,
            params: vec![0.0; layout(n_in, width, n_out).end],
        }
    }

    pub fn barrier(state_box: &BoxSet, width: usize, seed: u64) -> Self {
        Self::new(state_box, width, 1, Head::Barrier, seed)
    }

    pub fn controller(state_box: &BoxSet, control_box: &BoxSet, width: usize, seed: u64) -> Self {
        let head = Head::Controller {
            lo: control_box.lo.clone(),
            hi: control_box.hi.clone(),
        };
        Self::new(state_box, width, control_box.dim(), head, seed)
    }

    pub fn input_dim(&self) -> usize {
        self.n_in
    }

    pub fn output_dim(&self) -> usize {
        self.n_out
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn lay(&self) -> Layout {
        layout(self.n_in, self.width, self.n_out)
    }

    /// Forward pass recording activations. No dimension or finiteness checks.
    pub fn tape(&self, x: &[f64]) -> Tape {
        debug_assert_eq!(x.len(), self.n_in);
        let l = self.lay();
        let p = &self.params;
        let z0: Vec<f64> = x
            .iter()
            .zip(self.in_center.iter().zip(&self.in_scale))
            .map(|(v, (c, s))| (v - c) * s)
            .collect();
        let mut h1 = vec![0.0; self.width];
        matvec(&p[l.w1..l.b1], &z0, &mut h1);
        for (h, b) in h1.iter_mut().zip(&p[l.b1..l.w2]) {
            *h = (*h + b).tanh();
        }
        let mut h2 = vec![0.0; self.width];
        matvec(&p[l.w2..l.b2], &h1, &mut h2);
        for (h, b) in h2.iter_mut().zip(&p[l.b2..l.w3]) {
            *h = (*h + b).tanh();
        }
        let mut a3 = vec![0.0; self.n_out];
        matvec(&p[l.w3..l.b3], &h2, &mut a3);
        for (a, b) in a3.iter_mut().zip(&p[l.b3..l.end]) {
            *a += b;
        }
        let output = match &self.head {
            Head::Barrier => a3.clone(),
            Head::Controller { lo, hi } => a3
                .iter()
                .zip(lo.iter().zip(hi))
                .map(|(a, (l, h))| 0.5 * (l + h) + 0.5 * (h - l) * a.tanh())
                .collect(),
        };
        Tape { z0, h1, h2, a3, output }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        ensure_dim("network input", self.n_in, x.len())?;
        let out = self.tape(x).output;
        if !out.iter().all(|v| v.is_finite()) {
            return Err(contract("network produced a non-finite output"));
        }
        Ok(out)
    }

    /// Scalar barrier value without bookkeeping.
    pub fn value(&self, x: &[f64]) -> f64 {
        self.tape(x).output[0]
    }

    /// `d output / d a3` per output component.
    fn head_slope(&self, t: &Tape) -> Vec<f64> {
        match &self.head {
            Head::Barrier => vec![1.0; self.n_out],
            Head::Controller { lo, hi } => t
                .a3
                .iter()
                .zip(lo.iter().zip(hi))
                .map(|(a, (l, h))| {
                    let th = a.tanh();
                    0.5 * (h - l) * (1.0 - th * th)
                })
                .collect(),
        }
    }

    /// `upstream^T d output / d x`.
    pub fn input_vjp(&self, t: &Tape, upstream: &[f64]) -> Vec<f64> {
        let l = self.lay();
        let p = &self.params;
        let d3: Vec<f64> = self.head_slope(t).iter().zip(upstream).map(|(s, u)| s * u).collect();
        let mut a2 = vec![0.0; self.width];
        matvec_t(&p[l.w3..l.b3], &d3, &mut a2);
        for (a, h) in a2.iter_mut().zip(&t.h2) {
            *a *= 1.0 - h * h;
        }
        let mut a1 = vec![0.0; self.width];
        matvec_t(&p[l.w2..l.b2], &a2, &mut a1);
        for (a, h) in a1.iter_mut().zip(&t.h1) {
            *a *= 1.0 - h * h;
        }
        let mut gz = vec![0.0; self.n_in];
        matvec_t(&p[l.w1..l.b1], &a1, &mut gz);
        gz.iter().zip(&self.in_scale).map(|(g, s)| g * s).collect()
    }

    /// Exact `grad_x h(x)` of a scalar network.
    pub fn grad_input(&self, x: &[f64]) -> Result<StateVector> {
        ensure_dim("network input", self.n_in, x.len())?;
        if self.n_out != 1 {
            return Err(contract("grad_input needs a scalar-output network"));
        }
        Ok(StateVector(self.input_vjp(&self.tape(x), &[1.0])))
    }

    /// Adds `grad_theta [upstream^T output]` into `g`.
    pub fn accumulate_output_grad(&self, t: &Tape, upstream: &[f64], g: &mut [f64]) {
        let l = self.lay();
        let p = &self.params;
        let d3: Vec<f64> = self.head_slope(t).iter().zip(upstream).map(|(s, u)| s * u).collect();
        add_outer(&mut g[l.w3..l.b3], &d3, &t.h2);
        axpy(1.0, &d3, &mut g[l.b3..l.end]);
        let mut a2 = vec![0.0; self.width];
        matvec_t(&p[l.w3..l.b3], &d3, &mut a2);
        for (a, h) in a2.iter_mut().zip(&t.h2) {
            *a *= 1.0 - h * h;
        }
        add_outer(&mut g[l.w2..l.b2], &a2, &t.h1);
        axpy(1.0, &a2, &mut g[l.b2..l.w3]);
        let mut a1 = vec![0.0; self.width];
        matvec_t(&p[l.w2..l.b2], &a2, &mut a1);
        for (a, h) in a1.iter_mut().zip(&t.h1) {
            *a *= 1.0 - h * h;
        }
        add_outer(&mut g[l.w1..l.b1], &a1, &t.z0);
        axpy(1.0, &a1, &mut g[l.b1..l.w2]);
    }

    pub fn grad_params_output(&self, x: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        ensure_dim("network input", self.n_in, x.len())?;
        ensure_dim("upstream", self.n_out, upstream.len())?;
        let mut g = vec![0.0; self.n_params()];
        self.accumulate_output_grad(&self.tape(x), upstream, &mut g);
        Ok(g)
    }

    /// Adds `grad_theta [a * (grad_x h . v) + b * h]` into `g` for a barrier
    /// network (forward-mode tangent along `v`, then one reverse sweep).
    /// Returns `(grad_x h . v, grad_x h)` at the tape's input.
    pub fn accumulate_barrier_grad(&self, t: &Tape, v: &[f64], a: f64, b: f64, g: &mut [f64]) -> (f64, Vec<f64>) {
        self.accumulate_barrier_grad_with(t, v, |_| (a, b), g)
    }

    /// As [`Mlp::accumulate_barrier_grad`], with `(a, b)` chosen by `weights`
    /// once `grad_x h . v` is known.
    pub fn accumulate_barrier_grad_with<W>(&self, t: &Tape, v: &[f64], weights: W, g: &mut [f64]) -> (f64, Vec<f64>)
    where
        W: FnOnce(f64) -> (f64, f64),
    {
        debug_assert!(matches!(self.head, Head::Barrier));
        let l = self.lay();
        let p = &self.params;
        let w = self.width;
        let w2 = &p[l.w2..l.b2];
        let w3 = &p[l.w3..l.b3];
        let g1: Vec<f64> = t.h1.iter().map(|h| 1.0 - h * h).collect();
        let g2: Vec<f64> = t.h2.iter().map(|h| 1.0 - h * h).collect();

        // Input gradient: grad_z0 h = W1^T (g1 . W2^T (g2 . w3)).
        let c2: Vec<f64> = w3.iter().zip(&g2).map(|(x, y)| x * y).collect();
        let mut q1 = vec![0.0; w];
        matvec_t(w2, &c2, &mut q1);
        let c1: Vec<f64> = q1.iter().zip(&g1).map(|(x, y)| x * y).collect();
        let mut gz = vec![0.0; self.n_in];
        matvec_t(&p[l.w1..l.b1], &c1, &mut gz);
        let grad_x: Vec<f64> = gz.iter().zip(&self.in_scale).map(|(g, s)| g * s).collect();
        let d = dot(&grad_x, v);
        let (a, b) = weights(d);

        // Tangent pass.
        let vt: Vec<f64> = v.iter().zip(&self.in_scale).map(|(x, s)| x * s).collect();
        let mut t1 = vec![0.0; w];
        let mut p1 = vec![0.0; w];
        let mut t2 = vec![0.0; w];
        let mut p2 = vec![0.0; w];
        if a != 0.0 {
            matvec(&p[l.w1..l.b1], &vt, &mut t1);
            for i in 0..w {
                p1[i] = g1[i] * t1[i];
            }
            matvec(w2, &p1, &mut t2);
            for i in 0..w {
                p2[i] = g2[i] * t2[i];
            }
        }

        // Reverse sweep of J = a D + b y.
        {
            let gw3 = &mut g[l.w3..l.b3];
            for i in 0..w {
                gw3[i] += a * p2[i] + b * t.h2[i];
            }
        }
        g[l.b3] += b;
        let mut t2b = vec![0.0; w];
        let mut a2 = vec![0.0; w];
        for i in 0..w {
            t2b[i] = a * c2[i];
            let g2b = a * w3[i] * t2[i];
            let h2b = b * w3[i] - 2.0 * t.h2[i] * g2b;
            a2[i] = h2b * g2[i];
        }
        add_outer2(&mut g[l.w2..l.b2], &t2b, &p1, &a2, &t.h1);
        axpy(1.0, &a2, &mut g[l.b2..l.w3]);
        let mut h1b = vec![0.0; w];
        matvec_t(w2, &a2, &mut h1b);
        let mut t1b = vec![0.0; w];
        let mut a1 = vec![0.0; w];
        for i in 0..w {
            // W2^T t2b = a * q1
            let p1b = a * q1[i];
            t1b[i] = p1b * g1[i];
            let hb = h1b[i] - 2.0 * t.h1[i] * p1b * t1[i];
            a1[i] = hb * g1[i];
        }
        add_outer2(&mut g[l.w1..l.b1], &t1b, &vt, &a1, &t.z0);
        axpy(1.0, &a1, &mut g[l.b1..l.w2]);
        (d, grad_x)
    }

    /// Batched barrier pass over `s` points: `xs` and directions `vs` are
    /// row-major `s x n`. Returns `h`, `grad_x h . v` and `grad_x h` per row.
    /// When `grad` is given, `weights(row, h, d)` picks `(a, b)` per row and
    /// `grad_theta sum_rows [a (grad_x h . v) + b h]` is added into it.
    pub fn barrier_batch<W>(&self, xs: &[f64], vs: &[f64], grad: Option<(&mut [f64], W)>) -> BarrierBatch
    where
        W: FnMut(usize, f64, f64) -> (f64, f64),
    {
        debug_assert!(matches!(self.head, Head::Barrier));
        let n = self.n_in;
        let w = self.width;
        let s = xs.len() / n;
        debug_assert_eq!(vs.len(), s * n);
        let l = self.lay();
        let p = &self.params;
        let w1 = MatRef::row_major(&p[l.w1..l.b1], w, n);
        let w2 = MatRef::row_major(&p[l.w2..l.b2], w, w);
        let w3 = &p[l.w3..l.b3];

        let mut z0 = vec![0.0; s * n];
        for (r, x) in z0.chunks_exact_mut(n).zip(xs.chunks_exact(n)) {
            for i in 0..n {
                r[i] = (x[i] - self.in_center[i]) * self.in_scale[i];
            }
        }
        let mut h1 = vec![0.0; s * w];
        gemm(1.0, MatRef::row_major(&z0, s, n), w1.t(), 0.0, &mut h1);
        for r in h1.chunks_exact_mut(w) {
            for (v, b) in r.iter_mut().zip(&p[l.b1..l.w2]) {
                *v = (*v + b).tanh();
            }
        }
        let mut h2 = vec![0.0; s * w];
        gemm(1.0, MatRef::row_major(&h1, s, w), w2.t(), 0.0, &mut h2);
        for r in h2.chunks_exact_mut(w) {
            for (v, b) in r.iter_mut().zip(&p[l.b2..l.w3]) {
                *v = (*v + b).tanh();
            }
        }
        let values: Vec<f64> = h2.chunks_exact(w).map(|r| dot(r, w3) + p[l.b3]).collect();

        // grad_z0 h = W1^T (g1 . W2^T (g2 . w3)), row by row.
        let mut c2 = vec![0.0; s * w];
        for (c, h) in c2.chunks_exact_mut(w).zip(h2.chunks_exact(w)) {
            for i in 0..w {
                c[i] = w3[i] * (1.0 - h[i] * h[i]);
            }
        }
        let mut q1 = vec![0.0; s * w];
        gemm(1.0, MatRef::row_major(&c2, s, w), w2, 0.0, &mut q1);
        let mut c1 = q1.clone();
        for (c, h) in c1.chunks_exact_mut(w).zip(h1.chunks_exact(w)) {
            for i in 0..w {
                c[i] *= 1.0 - h[i] * h[i];
            }
        }
        let mut grad_x = vec![0.0; s * n];
        gemm(1.0, MatRef::row_major(&c1, s, w), w1, 0.0, &mut grad_x);
        for r in grad_x.chunks_exact_mut(n) {
            for (v, sc) in r.iter_mut().zip(&self.in_scale) {
                *v *= sc;
            }
        }
        let directional: Vec<f64> = grad_x
            .chunks_exact(n)
            .zip(vs.chunks_exact(n))
            .map(|(g, v)| dot(g, v))
            .collect();

        if let Some((g, mut weights)) = grad {
            let (a, b): (Vec<f64>, Vec<f64>) = (0..s).map(|k| weights(k, values[k], directional[k])).unzip();
            self.barrier_batch_backward(&z0, &h1, &h2, &c2, &q1, vs, &a, &b, g);
        }
        BarrierBatch {
            values,
            directional,
            grad_x,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn barrier_batch_backward(
        &self,
        z0: &[f64],
        h1: &[f64],
        h2: &[f64],
        c2: &[f64],
        q1: &[f64],
        vs: &[f64],
        a: &[f64],
        b: &[f64],
        g: &mut [f64],
    ) {
        let n = self.n_in;
        let w = self.width;
        let s = a.len();
        let l = self.lay();
        let p = &self.params;
        let w1 = MatRef::row_major(&p[l.w1..l.b1], w, n);
        let w2 = MatRef::row_major(&p[l.w2..l.b2], w, w);
        let w3 = &p[l.w3..l.b3];
        let tangent = a.iter().any(|v| *v != 0.0);

        let mut vt = vec![0.0; s * n];
        let mut t1 = vec![0.0; s * w];
        let mut p1 = vec![0.0; s * w];
        let mut t2 = vec![0.0; s * w];
        if tangent {
            for (r, v) in vt.chunks_exact_mut(n).zip(vs.chunks_exact(n)) {
                for i in 0..n {
                    r[i] = v[i] * self.in_scale[i];
                }
            }
            gemm(1.0, MatRef::row_major(&vt, s, n), w1.t(), 0.0, &mut t1);
            for k in 0..s {
                for i in 0..w {
                    let h = h1[k * w + i];
                    p1[k * w + i] = (1.0 - h * h) * t1[k * w + i];
                }
            }
            gemm(1.0, MatRef::row_major(&p1, s, w), w2.t(), 0.0, &mut t2);
        }

        let mut t2b = vec![0.0; s * w];
        let mut a2 = vec![0.0; s * w];
        {
            let (head, tail) = g.split_at_mut(l.b3);
            let gw3 = &mut head[l.w3..];
            for k in 0..s {
                let (ak, bk) = (a[k], b[k]);
                tail[0] += bk;
                for i in 0..w {
                    let idx = k * w + i;
                    let hv = h2[idx];
                    let g2 = 1.0 - hv * hv;
                    gw3[i] += ak * g2 * t2[idx] + bk * hv;
                    t2b[idx] = ak * c2[idx];
                    let g2b = ak * w3[i] * t2[idx];
                    a2[idx] = (bk * w3[i] - 2.0 * hv * g2b) * g2;
                }
            }
        }
        {
            let gw2 = &mut g[l.w2..l.b2];
            if tangent {
                gemm(1.0, MatRef::row_major(&t2b, s, w).t(), MatRef::row_major(&p1, s, w), 1.0, gw2);
            }
            gemm(1.0, MatRef::row_major(&a2, s, w).t(), MatRef::row_major(h1, s, w), 1.0, gw2);
        }
        for r in a2.chunks_exact(w) {
            axpy(1.0, r, &mut g[l.b2..l.w3]);
        }
        let mut a1 = vec![0.0; s * w];
        gemm(1.0, MatRef::row_major(&a2, s, w), w2, 0.0, &mut a1);
        let mut t1b = vec![0.0; s * w];
        for k in 0..s {
            for i in 0..w {
                let idx = k * w + i;
                let h = h1[idx];
                let g1 = 1.0 - h * h;
                // W2^T t2b = a * q1
                let p1b = a[k] * q1[idx];
                t1b[idx] = p1b * g1;
                a1[idx] = (a1[idx] - 2.0 * h * p1b * t1[idx]) * g1;
            }
        }
        {
            let gw1 = &mut g[l.w1..l.b1];
            if tangent {
                gemm(1.0, MatRef::row_major(&t1b, s, w).t(), MatRef::row_major(&vt, s, n), 1.0, gw1);
            }
            gemm(1.0, MatRef::row_major(&a1, s, w).t(), MatRef::row_major(z0, s, n), 1.0, gw1);
        }
        for r in a1.chunks_exact(w) {
            axpy(1.0, r, &mut g[l.b1..l.w2]);
        }
    }

    /// `grad_theta [grad_x h(x; theta) . v]`.
    pub fn grad_params_directional(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        ensure_dim("network input", self.n_in, x.len())?;
        ensure_dim("direction", self.n_in, v.len())?;
        if !matches!(self.head, Head::Barrier) {
            return Err(contract("directional gradient needs a barrier network"));
        }
        let mut g = vec![0.0; self.n_params()];
        self.accumulate_barrier_grad(&self.tape(x), v, 1.0, 0.0, &mut g);
        Ok(g)
    }

    pub fn to_checkpoint(&self) -> MlpCheckpoint {
        let l = self.lay();
        let p = &self.params;
        let layer = |w: std::ops::Range<usize>, b: std::ops::Range<usize>, inputs, outputs| LayerCheckpoint {
            inputs,
            outputs,
            weights: p[w].to_vec(),
            biases: p[b].to_vec(),
        };
        MlpCheckpoint {
            activation: "tanh".to_string(),
            head: match &self.head {
                Head::Barrier => HeadCheckpoint::Barrier,
                Head::Controller { lo, hi } => HeadCheckpoint::Controller {
                    lo: lo.clone(),
                    hi: hi.clone(),
                },
            },
            input_lo: self.input_box.lo.clone(),
            input_hi: self.input_box.hi.clone(),
            layers: vec![
                layer(l.w1..l.b1, l.b1..l.w2, self.n_in, self.width),
                layer(l.w2..l.b2, l.b2..l.w3, self.width, self.width),
                layer(l.w3..l.b3, l.b3..l.end, self.width, self.n_out),
            ],
        }
    }

    pub fn from_checkpoint(c: &MlpCheckpoint) -> Result<Self> {
        if c.activation != "tanh" {
            return Err(Error::Parse(format!("unsupported activation `{}`", c.activation)));
        }
        if c.layers.len() != 3 {
            return Err(Error::Parse(format!("expected 3 layers, found {}", c.layers.len())));
        }
        ensure_dim("input box", c.input_lo.len(), c.input_hi.len())?;
        if !c.input_lo.iter().zip(&c.input_hi).all(|(l, h)| l < h) {
            return Err(Error::Parse("empty input box".into()));
        }
        let n_in = c.input_lo.len();
        let width = c.layers[0].outputs;
        let n_out = c.layers[2].outputs;
        let dims = [(n_in, width), (width, width), (width, n_out)];
        for (layer, (i, o)) in c.layers.iter().zip(dims) {
            if layer.inputs != i || layer.outputs != o || layer.weights.len() != i * o || layer.biases.len() != o {
                return Err(Error::Parse("inconsistent layer shapes".into()));
            }
        }
        let head = match &c.head {
            HeadCheckpoint::Barrier => {
                ensure_dim("barrier output", 1, n_out)?;
                Head::Barrier
            }
            HeadCheckpoint::Controller { lo, hi } => {
                ensure_dim("controller bounds", n_out, lo.len())?;
                ensure_dim("controller bounds", n_out, hi.len())?;
                Head::Controller {
                    lo: lo.clone(),
                    hi: hi.clone(),
                }
            }
        };
        let mut m = Self::zeros(&BoxSet::new(c.input_lo.clone(), c.input_hi.clone()), width, n_out, head);
        m.params = c
            .layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases).copied())
            .collect();
        if !m.params.iter().all(|v| v.is_finite()) {
            return Err(Error::Parse("non-finite parameter".into()));
        }
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_checkpoint())? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_checkpoint(&serde_json::from_str(s)?)
    }
}

/// Per-row results of [`Mlp::barrier_batch`].
#[derive(Clone, Debug, PartialEq)]
pub struct BarrierBatch {
    pub values: Vec<f64>,
    pub directional: Vec<f64>,
    /// Row-major `s x n`.
    pub grad_x: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum HeadCheckpoint {
    Barrier,
    Controller {
        #[serde(with = "io::exact_vec")]
        lo: Vec<f64>,
        #[serde(with = "io::exact_vec")]
        hi: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCheckpoint {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major, `outputs x inputs`.
    #[serde(with = "io::exact_vec")]
    pub weights: Vec<f64>,
    #[serde(with = "io::exact_vec")]
    pub biases: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpCheckpoint {
    pub activation: String,
    pub head: HeadCheckpoint,
    #[serde(with = "io::exact_vec")]
    pub input_lo: Vec<f64>,
    #[serde(with = "io::exact_vec")]
    pub input_hi: Vec<f64>,
    pub layers: Vec<LayerCheckpoint>,
}
