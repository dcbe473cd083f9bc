use serde::{Deserialize, Serialize};

pub const LENGTHSCALE_MIN: f64 = 1e-3;
pub const LENGTHSCALE_MAX: f64 = 1e3;

/// Squared-exponential kernel with one lengthscale per input dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    #[serde(with = "crate::io::exact")]
    pub signal_variance: f64,
    #[serde(with = "crate::io::exact_vec")]
    pub lengthscales: Vec<f64>,
}

impl KernelParams {
    pub fn new(signal_variance: f64, lengthscales: Vec<f64>) -> Self {
        assert!(signal_variance > 0.0, "signal variance must be positive");
        assert!(
            lengthscales.iter().all(|l| *l > 0.0),
            "lengthscales must be positive"
        );
        Self {
            signal_variance,
            lengthscales: lengthscales
                .into_iter()
                .map(|l| l.clamp(LENGTHSCALE_MIN, LENGTHSCALE_MAX))
                .collect(),
        }
    }

    pub fn isotropic(signal_variance: f64, lengthscale: f64, dim: usize) -> Self {
        Self::new(signal_variance, vec![lengthscale; dim])
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    #[inline]
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for ((x, y), l) in a.iter().zip(b).zip(&self.lengthscales) {
            let d = (x - y) / l;
            s += d * d;
        }
        self.signal_variance * (-0.5 * s).exp()
    }

    /// Log-parameter vector `[ln sv, ln l_1, .., ln l_n]`.
    pub(crate) fn to_log(&self) -> Vec<f64> {
        std::iter::once(self.signal_variance.ln())
            .chain(self.lengthscales.iter().map(|l| l.ln()))
            .collect()
    }

    pub(crate) fn from_log(theta: &[f64]) -> Self {
        Self {
            signal_variance: theta[0].exp().clamp(1e-10, 1e8),
            lengthscales: theta[1..]
                .iter()
                .map(|t| t.exp().clamp(LENGTHSCALE_MIN, LENGTHSCALE_MAX))
                .collect(),
        }
    }
}

/// `signal_variance * exp(-0.5 * sum(((a_i - b_i) / l_i)^2))`.
pub fn kernel_eval(p: &KernelParams, a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    p.eval(a, b)
}
