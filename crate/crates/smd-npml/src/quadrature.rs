//! Gauss–Legendre quadrature on a bounded interval.

use crate::interval::Interval;
use thiserror::Error;

/// Newton tolerance for Legendre root refinement (on [-1, 1]).
const ROOT_TOL: f64 = 1e-15;
const ROOT_MAX_ITERS: usize = 64;

#[derive(Debug, Error, PartialEq)]
pub enum QuadratureError {
    #[error("quadrature rule needs at least one node")]
    EmptyRule,
    #[error("integrand not finite at node {index} (x = {x})")]
    NonFiniteIntegrand { index: usize, x: f64 },
}

/// A fixed quadrature rule: nodes strictly inside the interval, positive
/// weights summing to the interval length.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    interval: Interval,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureRule {
    /// Gauss–Legendre rule with `n` nodes, exact for polynomials of degree
    /// ≤ 2n − 1. Roots of the Legendre polynomial are found by Newton
    /// iteration from the Chebyshev-angle initial guess.
    pub fn gauss_legendre(interval: Interval, n: usize) -> Result<Self, QuadratureError> {
        if n == 0 {
            return Err(QuadratureError::EmptyRule);
        }
        let mut ref_nodes = vec![0.0; n];
        let mut ref_weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            for _ in 0..ROOT_MAX_ITERS {
                let (p, d) = legendre_with_derivative(n, x);
                let dx = p / d;
                x -= dx;
                if dx.abs() < ROOT_TOL {
                    break;
                }
            }
            let (_, dp) = legendre_with_derivative(n, x);
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            // cos of a decreasing angle: i = 0 is the largest root.
            ref_nodes[i] = -x;
            ref_weights[i] = w;
            ref_nodes[n - 1 - i] = x;
            ref_weights[n - 1 - i] = w;
        }
        if n % 2 == 1 {
            ref_nodes[m - 1] = 0.0;
        }
        let mid = 0.5 * (interval.a() + interval.b());
        let half = 0.5 * interval.length();
        let nodes = ref_nodes.iter().map(|&x| mid + half * x).collect();
        let weights = ref_weights.iter().map(|&w| w * half).collect();
        Ok(Self { interval, nodes, weights })
    }

    pub fn interval(&self) -> Interval {
        self.interval
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Σ w_i f(x_i); the caller guarantees a finite integrand.
    pub fn integrate(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }

    /// Σ w_i f(x_i), reporting the first node where the integrand fails to
    /// be finite.
    pub fn try_integrate(&self, mut f: impl FnMut(f64) -> f64) -> Result<f64, QuadratureError> {
        let mut acc = 0.0;
        for (index, (&x, &w)) in self.nodes.iter().zip(&self.weights).enumerate() {
            let v = f(x);
            if !v.is_finite() {
                return Err(QuadratureError::NonFiniteIntegrand { index, x });
            }
            acc += w * v;
        }
        Ok(acc)
    }

    /// Weighted inner product ∫ f·g·w dλ ≈ Σ w_i f(x_i) g(x_i) w(x_i),
    /// with a finiteness check at every node.
    pub fn inner_product_weighted(
        &self,
        mut f: impl FnMut(f64) -> f64,
        mut g: impl FnMut(f64) -> f64,
        mut w: impl FnMut(f64) -> f64,
    ) -> Result<f64, QuadratureError> {
        self.try_integrate(|x| f(x) * g(x) * w(x))
    }
}

/// Legendre polynomial `P_n` and its derivative at `x`, via the three-term
/// recurrence and `P'_n = n(x P_n − P_{n−1})/(x² − 1)`.
fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p_prev = 1.0f64;
    let mut p = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let next = ((2.0 * kf - 1.0) * x * p - (kf - 1.0) * p_prev) / kf;
        p_prev = p;
        p = next;
    }
    let d = n as f64 * (x * p - p_prev) / (x * x - 1.0);
    (p, d)
}
