//! The constrained density class: cosine series with unit mass, a pointwise
//! floor on a fixed grid, and a capped Sobolev-scale norm.
//!
//! Working coordinates throughout are the *weighted* coefficients
//! `b_j = (1+(jπ/L)²)^{t/2} a_j`, in which the norm cap is a Euclidean ball,
//! the mass constraint pins `b_0`, and each floor constraint is a halfspace.

use crate::interval::Interval;
use crate::spectral::{embedding_constant, sobolev_weight_sq, SpectralFunction};
use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Dykstra stopping threshold on the estimated distance to the limit
/// (between-sweep change divided by 1 − contraction ratio).
const DYKSTRA_TOL: f64 = 1e-10;
/// Dykstra sweep budget before reporting failure.
const DYKSTRA_MAX_SWEEPS: usize = 10_000;
/// Slack on floor constraints when deciding whether a candidate is feasible.
const FLOOR_CHECK_SLACK: f64 = 1e-12;
/// Tolerated violation on floors whose rows are numerically dependent on the
/// active set (they cannot be activated without a singular Gram matrix).
const PARALLEL_FLOOR_TOL: f64 = 1e-9;
/// Floor slack accepted from the fallback when its sweep budget runs out.
const FALLBACK_FLOOR_TOL: f64 = 1e-7;
/// Quadrupling steps allowed while bracketing the ball multiplier.
const BISECT_BRACKET: usize = 200;
/// Bisection steps on the ball multiplier.
const BISECT_STEPS: usize = 160;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("model parameters violate 0 ≤ zeta < 1/length < D² (zeta={zeta}, length={length}, d={d})")]
    InvalidParameters { zeta: f64, d: f64, length: f64 },
    #[error("smoothness order must be finite and > 1/2, got {0}")]
    InvalidSmoothness(f64),
    #[error("dimension J must be ≥ 1 and positivity grid M ≥ 2 (J={j}, M={m})")]
    InvalidDimensions { j: usize, m: usize },
    #[error("function has {got} coefficients but the model allows at most {max}")]
    DimensionMismatch { got: usize, max: usize },
    #[error("function lives on a different interval than the model")]
    IntervalMismatch,
    #[error("input coefficient {index} is not finite")]
    NonFiniteInput { index: usize },
    #[error("projection did not reach tolerance; residual {residual}")]
    ProjectionStall { residual: f64 },
    #[error(transparent)]
    Spectral(#[from] crate::spectral::SpectralError),
}

/// Wire format `{a, b, t, zeta, D, J, M}`.
#[derive(Serialize, Deserialize)]
struct ModelWire {
    a: f64,
    b: f64,
    t: f64,
    zeta: f64,
    #[serde(rename = "D")]
    d: f64,
    #[serde(rename = "J")]
    j: usize,
    #[serde(rename = "M", default = "default_grid")]
    m: usize,
}

fn default_grid() -> usize {
    512
}

/// Violation report from [`AuxiliaryModel::is_member`]. All gaps are ≥ 0 and
/// zero for a member.
#[derive(Debug, Clone, Copy)]
pub struct MembershipReport {
    pub is_member: bool,
    /// |∫p − 1|.
    pub mass_gap: f64,
    /// max(0, ζ − min over the positivity grid).
    pub floor_gap: f64,
    /// max(0, ‖p‖_t − D).
    pub norm_gap: f64,
    /// Minimum of the function over the positivity grid.
    pub grid_min: f64,
    /// Sobolev-scale norm at the model's smoothness order.
    pub norm: f64,
}

/// The class of candidate densities: degree ≤ J cosine series `p` with
/// ∫p = 1, `p ≥ ζ` on an M-point grid, and `‖p‖_t ≤ D`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "ModelWire", into = "ModelWire")]
pub struct AuxiliaryModel {
    interval: Interval,
    t: f64,
    zeta: f64,
    d: f64,
    j: usize,
    m: usize,
    /// `w_j = (1+(jπ/L)²)^{t/2}` for j = 0..=J.
    weights: Vec<f64>,
    /// Positivity grid, M equally spaced points including both endpoints.
    grid: Vec<f64>,
    /// Basis rows at grid points in weighted coordinates, M × (J+1) flat.
    eta: Vec<f64>,
    /// Squared Euclidean norms of the rows of `eta`.
    eta_norm_sq: Vec<f64>,
    /// Floor level below which the grid constraints are implied by the ball.
    collapse_threshold: f64,
}

impl TryFrom<ModelWire> for AuxiliaryModel {
    type Error = String;

    fn try_from(w: ModelWire) -> Result<Self, String> {
        let interval = Interval::new(w.a, w.b).map_err(|e| e.to_string())?;
        AuxiliaryModel::new(interval, w.t, w.zeta, w.d, w.j, w.m).map_err(|e| e.to_string())
    }
}

impl From<AuxiliaryModel> for ModelWire {
    fn from(m: AuxiliaryModel) -> Self {
        ModelWire {
            a: m.interval.a(),
            b: m.interval.b(),
            t: m.t,
            zeta: m.zeta,
            d: m.d,
            j: m.j,
            m: m.m,
        }
    }
}

impl AuxiliaryModel {
    /// Standard positivity grid size.
    pub const DEFAULT_GRID: usize = 512;

    pub fn new(
        interval: Interval,
        t: f64,
        zeta: f64,
        d: f64,
        j: usize,
        m: usize,
    ) -> Result<Self, ModelError> {
        if !t.is_finite() || t <= 0.5 {
            return Err(ModelError::InvalidSmoothness(t));
        }
        let length = interval.length();
        let inv_len = 1.0 / length;
        if !zeta.is_finite() || !d.is_finite() || zeta < 0.0 || zeta >= inv_len || d * d <= inv_len
        {
            return Err(ModelError::InvalidParameters { zeta, d, length });
        }
        if j < 1 || m < 2 {
            return Err(ModelError::InvalidDimensions { j, m });
        }
        let weights: Vec<f64> = (0..=j)
            .map(|k| sobolev_weight_sq(k, length, t).sqrt())
            .collect();
        let h = length / (m - 1) as f64;
        let grid: Vec<f64> = (0..m)
            .map(|g| {
                if g + 1 == m {
                    interval.b()
                } else {
                    interval.a() + g as f64 * h
                }
            })
            .collect();
        let amp = (2.0 / length).sqrt();
        let inv_sqrt_l = 1.0 / length.sqrt();
        let mut eta = Vec::with_capacity(m * (j + 1));
        let mut eta_norm_sq = Vec::with_capacity(m);
        for &x in &grid {
            let u = (x - interval.a()) / length;
            let mut row_sq = 0.0;
            for k in 0..=j {
                let e = if k == 0 {
                    inv_sqrt_l
                } else {
                    amp * (k as f64 * std::f64::consts::PI * u).cos()
                };
                let v = e / weights[k];
                eta.push(v);
                row_sq += v * v;
            }
            eta_norm_sq.push(row_sq);
        }
        // Radius of the ball on the non-constant block once mass is fixed:
        // ‖p − uniform‖_t² ≤ D² − 1/L, so any function with fixed mass inside
        // the ball is within C_t·sqrt(D² − 1/L) of the uniform height in sup
        // norm; floors at or below 1/L minus that slack are implied.
        let c_t = embedding_constant(t, interval)?;
        let collapse_threshold = (inv_len - c_t * (d * d - inv_len).sqrt()).max(0.0);
        Ok(Self {
            interval,
            t,
            zeta,
            d,
            j,
            m,
            weights,
            grid,
            eta,
            eta_norm_sq,
            collapse_threshold,
        })
    }

    pub fn interval(&self) -> Interval {
        self.interval
    }

    pub fn smoothness(&self) -> f64 {
        self.t
    }

    pub fn zeta(&self) -> f64 {
        self.zeta
    }

    pub fn radius(&self) -> f64 {
        self.d
    }

    /// Highest basis frequency J; members have J + 1 coefficients.
    pub fn dim(&self) -> usize {
        self.j
    }

    pub fn grid_size(&self) -> usize {
        self.m
    }

    pub fn positivity_grid(&self) -> &[f64] {
        &self.grid
    }

    pub(crate) fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// The uniform density, feasible for every valid model.
    pub fn uniform_density(&self) -> SpectralFunction {
        SpectralFunction::uniform(self.interval)
    }

    /// The floor level below which the grid constraints are implied by the
    /// mass and norm constraints; projecting with `zeta` at or below this
    /// value can ignore the floors entirely.
    pub fn floor_collapse_threshold(&self) -> f64 {
        self.collapse_threshold
    }

    /// Convert plain coefficients (padded to J+1) to weighted coordinates.
    pub(crate) fn to_weighted(&self, coeffs: &[f64]) -> Vec<f64> {
        let mut b = vec![0.0; self.j + 1];
        for (k, &a) in coeffs.iter().enumerate() {
            b[k] = a * self.weights[k];
        }
        b
    }

    /// Convert weighted coordinates back to plain coefficients.
    pub(crate) fn from_weighted(&self, b: &[f64]) -> Vec<f64> {
        b.iter().zip(&self.weights).map(|(v, w)| v / w).collect()
    }

    fn check_compatible(&self, f: &SpectralFunction) -> Result<(), ModelError> {
        if f.interval() != self.interval {
            return Err(ModelError::IntervalMismatch);
        }
        if f.coeffs().len() > self.j + 1 {
            return Err(ModelError::DimensionMismatch {
                got: f.coeffs().len(),
                max: self.j + 1,
            });
        }
        Ok(())
    }

    /// Grid minimum of a compatible function over the positivity grid,
    /// evaluated through the cached weighted basis rows.
    pub fn grid_min(&self, f: &SpectralFunction) -> Result<f64, ModelError> {
        self.check_compatible(f)?;
        let b = self.to_weighted(f.coeffs());
        Ok(self.grid_min_weighted(&b))
    }

    fn grid_min_weighted(&self, b: &[f64]) -> f64 {
        let stride = self.j + 1;
        let mut min = f64::INFINITY;
        for g in 0..self.m {
            let row = &self.eta[g * stride..(g + 1) * stride];
            let v: f64 = row.iter().zip(b).map(|(e, x)| e * x).sum();
            min = min.min(v);
        }
        min
    }

    /// Membership check with a violation report; every gap is compared
    /// against `tol`.
    pub fn is_member(&self, f: &SpectralFunction, tol: f64) -> Result<MembershipReport, ModelError> {
        self.check_compatible(f)?;
        let mass_gap = (f.integrate() - 1.0).abs();
        let grid_min = self.grid_min(f)?;
        let floor_gap = (self.zeta - grid_min).max(0.0);
        let norm = f.sobolev_norm(self.t)?;
        let norm_gap = (norm - self.d).max(0.0);
        Ok(MembershipReport {
            is_member: mass_gap <= tol && floor_gap <= tol && norm_gap <= tol,
            mass_gap,
            floor_gap,
            norm_gap,
            grid_min,
            norm,
        })
    }

    /// True when the function has unit mass (within `tol`), clears the floor
    /// by at least `margin`, and sits at least `margin` inside the norm cap.
    pub fn is_interior(&self, f: &SpectralFunction, tol: f64, margin: f64) -> Result<bool, ModelError> {
        let report = self.is_member(f, tol)?;
        Ok(report.mass_gap <= tol
            && report.grid_min >= self.zeta + margin
            && report.norm <= self.d - margin)
    }

    /// Project plain coefficients onto the feasible set in the weighted
    /// metric, returning plain coefficients of length J + 1.
    pub fn project(&self, coeffs: &[f64]) -> Result<Vec<f64>, ModelError> {
        if coeffs.len() > self.j + 1 {
            return Err(ModelError::DimensionMismatch {
                got: coeffs.len(),
                max: self.j + 1,
            });
        }
        if let Some(index) = coeffs.iter().position(|a| !a.is_finite()) {
            return Err(ModelError::NonFiniteInput { index });
        }
        let q = self.to_weighted(coeffs);
        let b = self.project_weighted(&q)?;
        Ok(self.from_weighted(&b))
    }

    /// Projection returning a [`SpectralFunction`].
    pub fn project_spectral(&self, f: &SpectralFunction) -> Result<SpectralFunction, ModelError> {
        if f.interval() != self.interval {
            return Err(ModelError::IntervalMismatch);
        }
        let coeffs = self.project(f.coeffs())?;
        Ok(SpectralFunction::new(self.interval, coeffs)?)
    }

    /// Projection in weighted coordinates. The feasible set factors as
    /// {b₀ = 1/√L} × {y : ‖y‖ ≤ R, ⟨h_g, y⟩ ≥ ζ − 1/L} with R² = D² − 1/L,
    /// so the mass coordinate is pinned and the tail block is projected onto
    /// a ball intersected with halfspaces by an active-set solve. Dykstra
    /// remains as a fallback for the rare case the active set cycles.
    pub(crate) fn project_weighted(&self, q: &[f64]) -> Result<Vec<f64>, ModelError> {
        debug_assert_eq!(q.len(), self.j + 1);
        let b0 = 1.0 / self.interval.length().sqrt();
        let radius = (self.d * self.d - b0 * b0).sqrt();
        let level = self.zeta - b0 * b0;
        let check_floors = self.zeta > self.collapse_threshold;
        let pin = |y: &[f64]| {
            let mut b = Vec::with_capacity(self.j + 1);
            b.push(b0);
            b.extend_from_slice(y);
            b
        };
        if !check_floors {
            let mut y = q[1..].to_vec();
            let norm: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > radius {
                let s = radius / norm;
                for v in &mut y {
                    *v *= s;
                }
            }
            return Ok(pin(&y));
        }
        // Floors-only projection first: when its solution already fits the
        // ball it is the full answer (the ball multiplier is zero there).
        if let Some(y) = self.project_floors(&q[1..], level) {
            let norm2: f64 = y.iter().map(|v| v * v).sum();
            if norm2 <= radius * radius {
                return Ok(pin(&y));
            }
        }
        if let Some(y) = self.project_ball_floors(&q[1..], radius, level) {
            return Ok(pin(&y));
        }
        self.dykstra_fallback(q)
    }

    /// Exact projection of `qy` onto {y : ⟨h_g, y⟩ ≥ level ∀g} via the
    /// Lawson–Hanson iteration on the dual multipliers: enforce the most
    /// violated floor, step back along the multiplier path whenever a
    /// multiplier turns negative, and stop when no floor is violated.
    fn project_floors(&self, qy: &[f64], level: f64) -> Option<Vec<f64>> {
        let stride = self.j + 1;
        let row = |g: usize| &self.eta[g * stride + 1..(g + 1) * stride];
        let m = self.m;
        let mut lambda = vec![0.0f64; m];
        let mut passive: Vec<usize> = Vec::new();
        let mut blocked: Vec<usize> = Vec::new();
        let mut y = qy.to_vec();
        for _ in 0..(4 * m + 8) {
            let mut g_star = usize::MAX;
            let mut worst = FLOOR_CHECK_SLACK;
            let mut worst_blocked = 0.0f64;
            for g in 0..m {
                if passive.contains(&g) {
                    continue;
                }
                let v: f64 = row(g).iter().zip(&y).map(|(e, x)| e * x).sum();
                let w = level - v;
                if blocked.contains(&g) {
                    worst_blocked = worst_blocked.max(w);
                    continue;
                }
                if w > worst {
                    worst = w;
                    g_star = g;
                }
            }
            if g_star == usize::MAX {
                if worst_blocked <= PARALLEL_FLOOR_TOL {
                    return Some(y);
                }
                return None;
            }
            passive.push(g_star);
            let mut solved = false;
            for _ in 0..(2 * (self.j + 1) + 8) {
                let k = passive.len();
                let gram = DMatrix::from_fn(k, k, |a, b| {
                    row(passive[a])
                        .iter()
                        .zip(row(passive[b]))
                        .map(|(p, q)| p * q)
                        .sum::<f64>()
                });
                let rhs = DVector::from_iterator(
                    k,
                    passive.iter().map(|&g| {
                        level - row(g).iter().zip(qy).map(|(e, x)| e * x).sum::<f64>()
                    }),
                );
                let Some(chol) = Cholesky::new(gram) else {
                    let g = passive.pop().expect("nonempty passive set");
                    lambda[g] = 0.0;
                    blocked.push(g);
                    break;
                };
                let mu = chol.solve(&rhs);
                if mu.iter().all(|&v| v > 0.0) {
                    for (i, &g) in passive.iter().enumerate() {
                        lambda[g] = mu[i];
                    }
                    solved = true;
                    break;
                }
                // Walk toward μ until the first multiplier reaches zero;
                // retire every multiplier that lands there.
                let mut alpha = f64::INFINITY;
                for (i, &g) in passive.iter().enumerate() {
                    if mu[i] <= 0.0 {
                        let denom = lambda[g] - mu[i];
                        if denom > 0.0 {
                            alpha = alpha.min(lambda[g] / denom);
                        }
                    }
                }
                if !alpha.is_finite() {
                    let g = passive.pop().expect("nonempty passive set");
                    lambda[g] = 0.0;
                    blocked.push(g);
                    break;
                }
                let alpha = alpha.clamp(0.0, 1.0);
                for (i, &g) in passive.iter().enumerate() {
                    lambda[g] += alpha * (mu[i] - lambda[g]);
                }
                passive.retain(|&g| {
                    if lambda[g] > 1e-14 {
                        true
                    } else {
                        lambda[g] = 0.0;
                        false
                    }
                });
            }
            y.copy_from_slice(qy);
            for &g in &passive {
                let l = lambda[g];
                for (yi, e) in y.iter_mut().zip(row(g)) {
                    *yi += l * e;
                }
            }
            if solved {
                blocked.clear();
            }
        }
        None
    }

    /// Exact projection onto {‖y‖ ≤ radius} ∩ {⟨h_g, y⟩ ≥ level ∀g} when the
    /// ball constraint is active. Writing ν ≥ 0 for the ball multiplier, the
    /// stationarity system collapses to y(ν) = P_floors(qy/(1+ν)), and ‖y(ν)‖
    /// is nonincreasing in ν, so the multiplier is found by bisection between
    /// ν = 0 (outside the ball by assumption) and any ν with ‖y(ν)‖ ≤ radius.
    fn project_ball_floors(&self, qy: &[f64], radius: f64, level: f64) -> Option<Vec<f64>> {
        let norm = |y: &[f64]| y.iter().map(|v| v * v).sum::<f64>().sqrt();
        let at = |nu: f64| -> Option<Vec<f64>> {
            let shrunk: Vec<f64> = qy.iter().map(|v| v / (1.0 + nu)).collect();
            self.project_floors(&shrunk, level)
        };
        let mut lo = 0.0f64;
        let mut hi = 1.0f64;
        let mut best = None;
        for _ in 0..BISECT_BRACKET {
            let y = at(hi)?;
            if norm(&y) <= radius {
                best = Some(y);
                break;
            }
            lo = hi;
            hi *= 4.0;
        }
        let mut best = best?;
        for _ in 0..BISECT_STEPS {
            if hi - lo <= 1e-15 * (1.0 + hi) {
                break;
            }
            let mid = 0.5 * (lo + hi);
            let y = at(mid)?;
            let n = norm(&y);
            if n <= radius {
                hi = mid;
                let tight = n >= radius * (1.0 - 1e-13);
                best = y;
                if tight {
                    break;
                }
            } else {
                lo = mid;
            }
        }
        Some(best)
    }

    /// ⟨η_g, b⟩: the density value at grid point g of the weighted point `b`.
    pub(crate) fn floor_value(&self, g: usize, b: &[f64]) -> f64 {
        self.eta_row(g).iter().zip(b).map(|(e, x)| e * x).sum()
    }

    /// The g-th weighted basis row η_g (length J + 1).
    pub(crate) fn eta_row(&self, g: usize) -> &[f64] {
        let stride = self.j + 1;
        &self.eta[g * stride..(g + 1) * stride]
    }

    /// Dykstra over {mass affine set, norm ball, violated floors}, used only
    /// when the active-set solve gives up. On sweep exhaustion the iterate is
    /// still accepted if it is feasible to high accuracy.
    fn dykstra_fallback(&self, q: &[f64]) -> Result<Vec<f64>, ModelError> {
        let n = self.j + 1;
        let stride = n;
        let b0 = 1.0 / self.interval.length().sqrt();
        let floors: Vec<usize> = if self.zeta <= self.collapse_threshold {
            Vec::new()
        } else {
            (0..self.m).collect()
        };
        let mut x = q.to_vec();
        // Increment vectors: ball, then one per floor. The affine set needs
        // none (Dykstra reduces to plain projection on affine sets).
        let mut inc_ball = vec![0.0; n];
        let mut inc_floor = vec![0.0; n * floors.len()];
        let mut prev = vec![0.0; n];
        let mut prev_delta = f64::INFINITY;
        for _sweep in 0..DYKSTRA_MAX_SWEEPS {
            prev.copy_from_slice(&x);
            // Mass constraint.
            x[0] = b0;
            // Norm ball with its increment.
            for (xi, pi) in x.iter_mut().zip(&inc_ball) {
                *xi += pi;
            }
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > self.d {
                let scale = self.d / norm;
                for (k, xi) in x.iter_mut().enumerate() {
                    let y = *xi * scale;
                    inc_ball[k] = *xi - y;
                    *xi = y;
                }
            } else {
                inc_ball.iter_mut().for_each(|p| *p = 0.0);
            }
            // Floor halfspaces with their increments.
            for (fi, &g) in floors.iter().enumerate() {
                let inc = &mut inc_floor[fi * stride..(fi + 1) * stride];
                for (xi, pi) in x.iter_mut().zip(inc.iter()) {
                    *xi += pi;
                }
                let row = &self.eta[g * stride..(g + 1) * stride];
                let val: f64 = row.iter().zip(&x).map(|(e, v)| e * v).sum();
                if val < self.zeta {
                    let step = (self.zeta - val) / self.eta_norm_sq[g];
                    for ((xi, pi), e) in x.iter_mut().zip(inc.iter_mut()).zip(row) {
                        let y = *xi + step * e;
                        *pi = *xi - y;
                        *xi = y;
                    }
                } else {
                    inc.iter_mut().for_each(|p| *p = 0.0);
                }
            }
            let delta: f64 = x
                .iter()
                .zip(&prev)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            // Linear convergence: distance to the limit is roughly
            // delta·ρ/(1−ρ) with ρ the observed contraction ratio.
            let mut done = delta < 1e-14;
            if !done && prev_delta.is_finite() && delta < 1e-7 {
                let rho = (delta / prev_delta).clamp(0.0, 0.9999);
                done = delta * rho / (1.0 - rho) < DYKSTRA_TOL;
            }
            if done {
                // Re-pin the mass coordinate so returned points carry unit
                // mass exactly; the move is bounded by the sweep change.
                x[0] = b0;
                return Ok(x);
            }
            prev_delta = delta;
        }
        let residual: f64 = x
            .iter()
            .zip(&prev)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        // Sweep budget spent while still drifting: pull the iterate exactly
        // into the ball and accept when the floors hold within a slack far
        // below any statistical scale.
        x[0] = b0;
        let tail_radius = (self.d * self.d - b0 * b0).sqrt();
        let tail_norm = x[1..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if tail_norm > tail_radius {
            let scale = tail_radius / tail_norm;
            for v in &mut x[1..] {
                *v *= scale;
            }
        }
        let floor_ok = floors
            .iter()
            .all(|&g| self.floor_value(g, &x) >= self.zeta - FALLBACK_FLOOR_TOL);
        if floor_ok {
            return Ok(x);
        }
        Err(ModelError::ProjectionStall { residual })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> AuxiliaryModel {
        AuxiliaryModel::new(Interval::unit(), 2.0, 0.1, 1.3, 8, 128).unwrap()
    }

    #[test]
    fn validates_standing_constraints() {
        let iv = Interval::unit();
        assert!(AuxiliaryModel::new(iv, 0.5, 0.1, 1.3, 8, 64).is_err());
        assert!(AuxiliaryModel::new(iv, 2.0, 1.0, 1.3, 8, 64).is_err());
        assert!(AuxiliaryModel::new(iv, 2.0, 0.1, 1.0, 8, 64).is_err());
        assert!(AuxiliaryModel::new(iv, 2.0, -0.1, 1.3, 8, 64).is_err());
        assert!(AuxiliaryModel::new(iv, 2.0, 0.1, 1.3, 0, 64).is_err());
        // Interval of length 1/2: needs zeta < 2 < D².
        let half = Interval::new(0.0, 0.5).unwrap();
        assert!(AuxiliaryModel::new(half, 2.0, 1.5, 1.6, 4, 64).is_ok());
        assert!(AuxiliaryModel::new(half, 2.0, 1.5, 1.4, 4, 64).is_err());
    }

    #[test]
    fn uniform_is_member_and_interior() {
        let m = model();
        let u = m.uniform_density();
        let r = m.is_member(&u, 1e-12).unwrap();
        assert!(r.is_member, "{r:?}");
        assert_eq!(r.mass_gap, 0.0);
        assert!(m.is_interior(&u, 1e-12, 0.05).unwrap());
    }

    #[test]
    fn membership_flags_each_violation() {
        let m = model();
        let iv = Interval::unit();
        // Mass violation.
        let f = SpectralFunction::new(iv, vec![1.2]).unwrap();
        let r = m.is_member(&f, 1e-9).unwrap();
        assert!(!r.is_member && r.mass_gap > 0.1);
        // Norm violation: one unit at frequency 8 has norm (1+(8π)²)^{1}.
        let mut coeffs = vec![0.0; 9];
        coeffs[0] = 1.0;
        coeffs[8] = 1.0;
        let f = SpectralFunction::new(iv, coeffs).unwrap();
        let r = m.is_member(&f, 1e-9).unwrap();
        assert!(!r.is_member && r.norm_gap > 1.0);
        // Floor violation: big negative swing at frequency 1.
        let f = SpectralFunction::new(iv, vec![1.0, 0.8]).unwrap();
        let r = m.is_member(&f, 1e-9).unwrap();
        assert!(r.floor_gap > 0.0, "{r:?}");
        // Dimension check.
        let f = SpectralFunction::new(iv, vec![0.0; 12]).unwrap();
        assert!(matches!(
            m.is_member(&f, 1e-9),
            Err(ModelError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn collapse_threshold_matches_hand_value() {
        // Ω = (0,1), t = 2, D = 1.05: threshold = 1 − C₂·(0.1025)^{1/2}.
        let m = AuxiliaryModel::new(Interval::unit(), 2.0, 0.0, 1.05, 6, 64).unwrap();
        let c2 = embedding_constant(2.0, Interval::unit()).unwrap();
        let expected = 1.0 - c2 * 0.1025f64.sqrt();
        assert!((m.floor_collapse_threshold() - expected).abs() < 1e-12);
        assert!(expected > 0.0);
    }

    #[test]
    fn projection_is_idempotent_and_feasible() {
        let m = model();
        let q = vec![1.4, 0.9, -0.7, 0.5, -0.3, 0.2, -0.1, 0.05, 0.3];
        let p1 = m.project(&q).unwrap();
        let f1 = SpectralFunction::new(Interval::unit(), p1.clone()).unwrap();
        let r = m.is_member(&f1, 1e-7).unwrap();
        assert!(r.is_member, "{r:?}");
        let p2 = m.project(&p1).unwrap();
        let dist: f64 = p1
            .iter()
            .zip(&p2)
            .zip(m.weights())
            .map(|((a, b), w)| ((a - b) * w).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(dist < 1e-9, "projection moved an already-projected point by {dist}");
    }

    #[test]
    fn projection_fixes_member_points() {
        let m = model();
        let u = m.uniform_density();
        let p = m.project(u.coeffs()).unwrap();
        assert!((p[0] - u.coeffs()[0]).abs() < 1e-12);
        assert!(p[1..].iter().all(|&a| a.abs() < 1e-12));
    }

    #[test]
    fn projection_is_nonexpansive_in_weighted_metric() {
        let m = model();
        let q1 = vec![1.1, 0.5, -0.4, 0.3, 0.2, -0.6, 0.1, 0.0, 0.2];
        let q2 = vec![0.8, -0.3, 0.6, -0.2, 0.4, 0.1, -0.3, 0.2, -0.1];
        let p1 = m.to_weighted(&m.project(&q1).unwrap());
        let p2 = m.to_weighted(&m.project(&q2).unwrap());
        let b1 = m.to_weighted(&q1);
        let b2 = m.to_weighted(&q2);
        let dist = |u: &[f64], v: &[f64]| {
            u.iter()
                .zip(v)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        };
        assert!(dist(&p1, &p2) <= dist(&b1, &b2) + 1e-8);
    }

    #[test]
    fn projection_satisfies_variational_inequality() {
        // ⟨q − Pq, z − Pq⟩ ≤ 0 in the weighted metric for every feasible z
        // characterizes the metric projection; cross-check pairs of
        // projections against each other (each is feasible by is_member).
        for (t, zeta, d) in [(2.0, 0.1, 1.3), (1.0, 0.4, 1.6), (0.75, 0.0, 1.2)] {
            let m = AuxiliaryModel::new(Interval::unit(), t, zeta, d, 8, 256).unwrap();
            let inputs = [
                vec![1.4, 0.9, -0.7, 0.5, -0.3, 0.2, -0.1, 0.05, 0.3],
                vec![0.2, -1.1, 0.8, 0.6, -0.9, 0.3, 0.7, -0.2, 0.1],
                vec![1.0, 0.05, 0.0, -0.02, 0.01, 0.0, 0.0, 0.0, 0.0],
                vec![3.0, 2.0, 2.0, -2.0, 1.5, -1.0, 0.5, 1.0, -0.5],
            ];
            let proj: Vec<Vec<f64>> = inputs
                .iter()
                .map(|q| m.to_weighted(&m.project(q).unwrap()))
                .collect();
            for p in &proj {
                let f = SpectralFunction::new(Interval::unit(), m.from_weighted(p)).unwrap();
                let r = m.is_member(&f, 1e-7).unwrap();
                assert!(r.is_member, "t={t}: {r:?}");
            }
            for (q, pq) in inputs.iter().zip(&proj) {
                let bq = m.to_weighted(q);
                for z in &proj {
                    let ip: f64 = bq
                        .iter()
                        .zip(pq)
                        .zip(z.iter().zip(pq))
                        .map(|((qi, pi), (zi, pj))| (qi - pi) * (zi - pj))
                        .sum();
                    assert!(ip <= 1e-8, "t={t}: variational inequality failed: {ip}");
                }
            }
        }
    }

    #[test]
    fn projection_respects_floor_when_active() {
        // A steep single-frequency input whose projection must honor p ≥ ζ.
        let m = AuxiliaryModel::new(Interval::unit(), 1.0, 0.4, 1.6, 6, 256).unwrap();
        assert!(m.zeta() > m.floor_collapse_threshold());
        let q = vec![1.0, 1.5, 0.0, 0.0, 0.0, 0.0, 0.0];
        let p = m.project(&q).unwrap();
        let f = SpectralFunction::new(Interval::unit(), p).unwrap();
        let r = m.is_member(&f, 1e-7).unwrap();
        assert!(r.is_member, "{r:?}");
        assert!(f.eval(1.0).unwrap() >= m.zeta() - 1e-7);
    }

    #[test]
    fn serde_wire_format_with_default_grid() {
        let m = model();
        let s = serde_json::to_string(&m).unwrap();
        assert!(s.contains("\"D\":1.3") && s.contains("\"J\":8"));
        let back: AuxiliaryModel = serde_json::from_str(&s).unwrap();
        assert_eq!(back.dim(), 8);
        let small: AuxiliaryModel =
            serde_json::from_str("{\"a\":0,\"b\":1,\"t\":2,\"zeta\":0.1,\"D\":1.3,\"J\":4}")
                .unwrap();
        assert_eq!(small.grid_size(), AuxiliaryModel::DEFAULT_GRID);
    }
}
