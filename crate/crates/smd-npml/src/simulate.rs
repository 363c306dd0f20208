//! Sampling machinery: deterministic RNG streams, distribution-function
//! inversion for cosine-series and tabulated densities, and a cubic-Hermite
//! quantile table for transforming very large common-random-number batches.

use crate::interval::Interval;
use crate::npml::WeightedPoints;
use crate::spectral::SpectralFunction;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use thiserror::Error;

/// Cells in the tabulated distribution function of a generic density.
const CDF_CELLS: usize = 2048;
/// Knots in a cubic-Hermite quantile table.
const QUANTILE_KNOTS: usize = 8192;
/// Convergence tolerance for distribution-function inversion.
const INVERT_TOL: f64 = 1e-12;
const INVERT_MAX_ITERS: usize = 80;
/// Positivity audit grid for spectral densities.
const POSITIVITY_GRID: usize = 4096;

/// Abscissas and weights of the 5-point Gauss–Legendre rule on [-1, 1].
const GL5_X: [f64; 5] = [
    -0.906179845938664,
    -0.5384693101056831,
    0.0,
    0.5384693101056831,
    0.906179845938664,
];
const GL5_W: [f64; 5] = [
    0.23692688505618908,
    0.47862867049936647,
    0.5688888888888889,
    0.47862867049936647,
    0.23692688505618908,
];

#[derive(Debug, Error, PartialEq)]
pub enum SimulateError {
    #[error("density must integrate to one; got mass {mass}")]
    NotADensity { mass: f64 },
    #[error("density is not strictly positive near x = {x}")]
    NonPositiveDensity { x: f64 },
    #[error("uniform draw {v} outside the open unit interval")]
    DrawOutOfRange { v: f64 },
}

/// What a pseudo-random stream is for; distinct purposes never share
/// randomness even within one replication.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamPurpose {
    Data = 0,
    Simulation = 1,
    Starts = 2,
}

/// Deterministic stream: the seed keys the generator while (salt, rep,
/// purpose) select a dedicated stream, so experiments, replications, and
/// purposes stay independent and reproducible.
pub fn stream_rng(seed: u64, salt: u32, rep: u32, purpose: StreamPurpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((salt as u64) << 32) | ((rep as u64) << 8) | purpose as u64);
    rng
}

/// A uniform draw strictly inside (0, 1).
pub fn uniform_open(rng: &mut impl RngCore) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / 9007199254740992.0)
}

pub fn uniform_batch(rng: &mut impl RngCore, n: usize) -> Vec<f64> {
    (0..n).map(|_| uniform_open(rng)).collect()
}

/// A sampler inverting the distribution function of a fixed density: in
/// closed form for cosine series, through a per-cell quadrature table for
/// anything else.
#[derive(Debug, Clone)]
pub enum CdfSampler {
    Spectral {
        density: SpectralFunction,
    },
    Table {
        interval: Interval,
        density: crate::families::PreparedDensity,
        /// Cumulative mass at the G+1 cell edges, normalized to end at 1.
        cum: Vec<f64>,
    },
}

impl CdfSampler {
    /// Sampler for a strictly positive unit-mass cosine series; inversion
    /// uses the exact closed-form distribution function.
    pub fn from_spectral(density: &SpectralFunction) -> Result<Self, SimulateError> {
        let mass = density.integrate();
        if (mass - 1.0).abs() > 1e-10 {
            return Err(SimulateError::NotADensity { mass });
        }
        let iv = density.interval();
        for i in 0..=POSITIVITY_GRID {
            let x = iv.a() + iv.length() * i as f64 / POSITIVITY_GRID as f64;
            if density.eval_unchecked(x) <= 0.0 {
                return Err(SimulateError::NonPositiveDensity { x });
            }
        }
        Ok(CdfSampler::Spectral {
            density: density.clone(),
        })
    }

    /// Sampler for a prepared family member. Cosine-series members get the
    /// closed-form path; others get a tabulated distribution function.
    pub fn from_prepared(
        prepared: &crate::families::PreparedDensity,
        interval: Interval,
    ) -> Result<Self, SimulateError> {
        if let Some(f) = prepared.as_spectral() {
            return Self::from_spectral(f);
        }
        let h = interval.length() / CDF_CELLS as f64;
        let mut cum = Vec::with_capacity(CDF_CELLS + 1);
        cum.push(0.0);
        let mut acc = 0.0;
        for k in 0..CDF_CELLS {
            let x0 = interval.a() + k as f64 * h;
            acc += gl5(x0, x0 + h, |x| prepared.density(x));
            cum.push(acc);
        }
        let total = cum[CDF_CELLS];
        if !(total.is_finite() && total > 0.0) || (total - 1.0).abs() > 1e-8 {
            return Err(SimulateError::NotADensity { mass: total });
        }
        for c in cum.iter_mut() {
            *c /= total;
        }
        for k in 0..CDF_CELLS {
            if cum[k + 1] <= cum[k] {
                let x = interval.a() + (k as f64 + 0.5) * h;
                return Err(SimulateError::NonPositiveDensity { x });
            }
        }
        Ok(CdfSampler::Table {
            interval,
            density: prepared.clone(),
            cum,
        })
    }

    pub fn interval(&self) -> Interval {
        match self {
            CdfSampler::Spectral { density } => density.interval(),
            CdfSampler::Table { interval, .. } => *interval,
        }
    }

    /// The distribution function F(x).
    pub fn cdf(&self, x: f64) -> f64 {
        match self {
            CdfSampler::Spectral { density } => spectral_cdf(density, x),
            CdfSampler::Table {
                interval,
                density,
                cum,
            } => {
                let h = interval.length() / CDF_CELLS as f64;
                let pos = ((x - interval.a()) / h).clamp(0.0, CDF_CELLS as f64);
                let k = (pos as usize).min(CDF_CELLS - 1);
                let x0 = interval.a() + k as f64 * h;
                cum[k] + gl5(x0, x, |t| density.density(t))
            }
        }
    }

    fn density_at(&self, x: f64) -> f64 {
        match self {
            CdfSampler::Spectral { density } => density.eval_unchecked(x),
            CdfSampler::Table { density, .. } => density.density(x),
        }
    }

    /// The quantile ρ(v) = F⁻¹(v) for v ∈ (0, 1), by bisection-safeguarded
    /// Newton; the result is clamped strictly inside the interval.
    pub fn quantile(&self, v: f64) -> Result<f64, SimulateError> {
        if !(v > 0.0 && v < 1.0) {
            return Err(SimulateError::DrawOutOfRange { v });
        }
        let (mut lo, mut hi, mut x) = match self {
            CdfSampler::Spectral { density } => {
                let iv = density.interval();
                (iv.a(), iv.b(), iv.a() + v * iv.length())
            }
            CdfSampler::Table { interval, cum, .. } => {
                let k = cum.partition_point(|&c| c <= v).saturating_sub(1).min(CDF_CELLS - 1);
                let h = interval.length() / CDF_CELLS as f64;
                let x0 = interval.a() + k as f64 * h;
                let frac = (v - cum[k]) / (cum[k + 1] - cum[k]);
                (x0, x0 + h, x0 + frac * h)
            }
        };
        for _ in 0..INVERT_MAX_ITERS {
            let err = self.cdf(x) - v;
            if err.abs() <= INVERT_TOL {
                break;
            }
            if err > 0.0 {
                hi = x;
            } else {
                lo = x;
            }
            let p = self.density_at(x);
            let newton = x - err / p;
            x = if p > 0.0 && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if hi - lo <= INVERT_TOL * self.interval().length() {
                break;
            }
        }
        let iv = self.interval();
        let margin = 1e-12 * iv.length();
        Ok(x.clamp(iv.a() + margin, iv.b() - margin))
    }

    /// Draw `n` points by inverting fresh uniforms (draw order preserved).
    pub fn simulate(
        &self,
        rng: &mut impl RngCore,
        n: usize,
    ) -> Result<Vec<f64>, SimulateError> {
        (0..n).map(|_| self.quantile(uniform_open(rng))).collect()
    }

    /// Cubic-Hermite interpolant of the quantile function on equispaced
    /// knots; evaluation needs no density calls, so transforming common
    /// random numbers through many candidate densities stays cheap.
    pub fn quantile_table(&self) -> Result<QuantileTable, SimulateError> {
        let iv = self.interval();
        let q = QUANTILE_KNOTS;
        let mut x = Vec::with_capacity(q + 1);
        let mut slope = Vec::with_capacity(q + 1);
        x.push(iv.a());
        slope.push(1.0 / self.density_at(iv.a()));
        for i in 1..q {
            let xi = self.quantile(i as f64 / q as f64)?;
            x.push(xi);
            slope.push(1.0 / self.density_at(xi));
        }
        x.push(iv.b());
        slope.push(1.0 / self.density_at(iv.b()));
        Ok(QuantileTable {
            interval: iv,
            x,
            slope,
        })
    }
}

/// Interpolated quantile function ρ(v) on equispaced v-knots with exact
/// values and slopes ρ′ = 1/(p∘ρ) at the knots.
#[derive(Debug, Clone)]
pub struct QuantileTable {
    interval: Interval,
    x: Vec<f64>,
    slope: Vec<f64>,
}

impl QuantileTable {
    pub fn eval(&self, v: f64) -> f64 {
        let q = self.x.len() - 1;
        let pos = (v * q as f64).clamp(0.0, q as f64 - 1e-9);
        let k = pos as usize;
        let t = pos - k as f64;
        let h = 1.0 / q as f64;
        let (x0, x1) = (self.x[k], self.x[k + 1]);
        let (m0, m1) = (self.slope[k] * h, self.slope[k + 1] * h);
        let t2 = t * t;
        let t3 = t2 * t;
        let y = (2.0 * t3 - 3.0 * t2 + 1.0) * x0
            + (t3 - 2.0 * t2 + t) * m0
            + (-2.0 * t3 + 3.0 * t2) * x1
            + (t3 - t2) * m1;
        let margin = 1e-12 * self.interval.length();
        y.clamp(self.interval.a() + margin, self.interval.b() - margin)
    }

    /// Transform a uniform batch and bin the images in one fused pass.
    pub(crate) fn transform_binned(&self, uniforms: &[f64], bins: usize) -> WeightedPoints {
        WeightedPoints::binned(self.interval, uniforms.iter().map(|&v| self.eval(v)), bins)
    }
}

/// Exact distribution function of a cosine series:
/// F(x) = a₀(x−a)/√L + Σ_j a_j √(2/L)·(L/(jπ))·sin(jπ(x−a)/L).
pub fn spectral_cdf(f: &SpectralFunction, x: f64) -> f64 {
    let iv = f.interval();
    let l = iv.length();
    let u = (x - iv.a()) / l;
    let amp = (2.0 / l).sqrt();
    let mut acc = f.coeffs()[0] / l.sqrt() * (x - iv.a());
    for (j, &a) in f.coeffs().iter().enumerate().skip(1) {
        let jf = j as f64;
        acc += a * amp * l / (jf * PI) * (jf * PI * u).sin();
    }
    acc
}

/// 5-point Gauss–Legendre integral of `f` over [x0, x1].
fn gl5(x0: f64, x1: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    let c = 0.5 * (x0 + x1);
    let r = 0.5 * (x1 - x0);
    let mut acc = 0.0;
    for (&t, &w) in GL5_X.iter().zip(&GL5_W) {
        acc += w * f(c + r * t);
    }
    acc * r
}
