//! Deterministic model of the accuracy-versus-noise trade-off in
//! decompose-then-verify pipelines.
//!
//! A verifier is more accurate on simple inputs than complex ones, but every
//! extra sub-claim adds retrieval noise and every split risks decomposition
//! noise. This module makes that tension computable: for an input of
//! complexity `k_o` split into `n` sub-claims, it evaluates both routes and
//! reports the difference.

use serde::{Deserialize, Serialize};

use crate::Scalar;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TradeoffError {
    #[error("invalid trade-off params: {0}")]
    InvalidParams(String),
}

/// Model parameters.
///
/// * `a0`: verifier accuracy on an atomic input (complexity 1), in `(0.5, 1]`.
/// * `lambda`: exponential decay rate of accuracy with complexity, `>= 0`.
/// * `e_r`: per-retrieval noise probability, in `[0, 1)`.
/// * `e_d`: per-split decomposition noise probability, in `[0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Serialize + serde::de::DeserializeOwned")]
pub struct TradeoffParams<T: Scalar> {
    pub a0: T,
    pub lambda: T,
    pub e_r: T,
    pub e_d: T,
}

impl<T: Scalar> Default for TradeoffParams<T> {
    fn default() -> Self {
        TradeoffParams {
            a0: T::from_f64(0.95).unwrap(),
            lambda: T::from_f64(0.15).unwrap(),
            e_r: T::from_f64(0.03).unwrap(),
            e_d: T::from_f64(0.02).unwrap(),
        }
    }
}

impl<T: Scalar> TradeoffParams<T> {
    pub fn validate(&self) -> Result<(), TradeoffError> {
        let half = T::from_f64(0.5).unwrap();
        let zero = T::zero();
        let one = T::one();
        if !(self.a0 > half && self.a0 <= one) {
            return Err(TradeoffError::InvalidParams(format!("a0 {} outside (0.5, 1]", self.a0)));
        }
        if !(self.lambda >= zero && self.lambda.is_finite()) {
            return Err(TradeoffError::InvalidParams(format!("lambda {} must be >= 0", self.lambda)));
        }
        if !(self.e_r >= zero && self.e_r < one) {
            return Err(TradeoffError::InvalidParams(format!("e_r {} outside [0, 1)", self.e_r)));
        }
        if !(self.e_d >= zero && self.e_d < one) {
            return Err(TradeoffError::InvalidParams(format!("e_d {} outside [0, 1)", self.e_d)));
        }
        Ok(())
    }
}

/// One evaluated grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Serialize + serde::de::DeserializeOwned")]
pub struct TradeoffPoint<T: Scalar> {
    pub k_o: T,
    pub n: u32,
    pub k_d: T,
    pub a_baseline: T,
    pub a_decomposed: T,
    pub delta_err: T,
}

/// Verifier accuracy at complexity `k >= 1`:
/// `A(k) = 0.5 + (a0 - 0.5) * exp(-lambda * (k - 1))`.
///
/// Decays from `a0` at `k = 1` toward the random-guess floor of 0.5.
pub fn accuracy_curve<T: Scalar>(params: &TradeoffParams<T>, k: T) -> T {
    let half = T::from_f64(0.5).unwrap();
    half + (params.a0 - half) * (-params.lambda * (k - T::one())).exp()
}

/// Probability that at least one of `n` independent retrievals is noisy:
/// `E_r(n) = 1 - (1 - e_r)^n`. For `n = 1` this reduces to `e_r` exactly.
pub fn cumulative_retrieval_noise<T: Scalar>(e_r: T, n: u32) -> T {
    if n == 1 {
        return e_r;
    }
    T::one() - (T::one() - e_r).powi(n as i32)
}

/// Probability that splitting into `n` sub-claims introduced an error:
/// `E_d(n) = 1 - (1 - e_d)^(n-1)`. A single sub-claim means no split happened,
/// so `E_d(1) = 0` exactly.
pub fn decomposition_noise<T: Scalar>(e_d: T, n: u32) -> T {
    if n == 1 {
        return T::zero();
    }
    T::one() - (T::one() - e_d).powi(n as i32 - 1)
}

/// Evaluate both routes for an input of complexity `k_o` split into `n`
/// sub-claims of residual complexity `k_d = max(1, k_o / n)`.
///
/// `a_baseline = A(k_o) * (1 - e_r)` and
/// `a_decomposed = A(k_d) * (1 - E_d(n)) * (1 - E_r(n))`.
/// At `n = 1` the two routes coincide and `delta_err` is exactly zero.
pub fn evaluate_point<T: Scalar>(params: &TradeoffParams<T>, k_o: T, n: u32) -> TradeoffPoint<T> {
    debug_assert!(n >= 1, "n must be >= 1");
    debug_assert!(k_o >= T::one(), "k_o must be >= 1");
    let k_d = (k_o / T::from_u32(n).unwrap()).max(T::one());
    let a_baseline = accuracy_curve(params, k_o) * (T::one() - params.e_r);
    let e_d_n = decomposition_noise(params.e_d, n);
    let e_r_n = cumulative_retrieval_noise(params.e_r, n);
    let a_decomposed = accuracy_curve(params, k_d) * (T::one() - e_d_n) * (T::one() - e_r_n);
    TradeoffPoint {
        k_o,
        n,
        k_d,
        a_baseline,
        a_decomposed,
        delta_err: a_decomposed - a_baseline,
    }
}

/// Smallest `n` in `[2, n_max]` where decomposition starts losing to the
/// baseline (`delta_err < 0`), or `None` if it never does.
pub fn crossover_n<T: Scalar>(params: &TradeoffParams<T>, k_o: T, n_max: u32) -> Option<u32> {
    (2..=n_max).find(|&n| evaluate_point(params, k_o, n).delta_err < T::zero())
}

/// Evaluate the full `(k_o, n)` grid, rows ordered by `(k_o, n)`.
pub fn sweep_grid<T: Scalar>(
    params: &TradeoffParams<T>,
    k_o_range: std::ops::RangeInclusive<u32>,
    n_range: std::ops::RangeInclusive<u32>,
) -> Vec<TradeoffPoint<T>> {
    let mut points = Vec::new();
    for k_o in k_o_range {
        for n in n_range.clone() {
            points.push(evaluate_point(params, T::from_u32(k_o).unwrap(), n));
        }
    }
    points
}

/// Render sweep points as CSV with the stable header
/// `k_o,n,k_d,a_baseline,a_decomposed,delta_err`.
pub fn render_sweep_csv<T: Scalar>(points: &[TradeoffPoint<T>]) -> String {
    let mut out = String::from("k_o,n,k_d,a_baseline,a_decomposed,delta_err\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.k_o, p.n, p.k_d, p.a_baseline, p.a_decomposed, p.delta_err
        ));
    }
    out
}
