//! Parametric density families targeted by the minimum-distance estimator:
//! a two-parameter exponential tilt, the uniform density, and a fixed
//! two-bump density that no tilt can represent.

use crate::interval::Interval;
use crate::quadrature::QuadratureRule;
use crate::spectral::SpectralFunction;
use nalgebra::DMatrix;
use thiserror::Error;

/// Quadrature order for the tilt's normalizer and moment cache.
const MOMENT_QUAD_ORDER: usize = 128;
/// Quadrature order for Fisher-information integrals.
const FISHER_QUAD_ORDER: usize = 256;

#[derive(Debug, Error, PartialEq)]
pub enum FamilyError {
    #[error("unknown family `{0}`")]
    UnknownFamily(String),
    #[error("family takes {expected} parameters, got {got}")]
    WrongParamCount { expected: usize, got: usize },
    #[error("parameter {index} = {value} outside [{lo}, {hi}]")]
    ParamOutOfBounds {
        index: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("parameter {index} is not finite")]
    NonFiniteParam { index: usize },
}

/// A named density family over a fixed interval, with box-constrained
/// parameters. θ-free members are `Fixed`.
#[derive(Debug, Clone)]
pub enum Family {
    ExpTilt(ExpTilt),
    Fixed(FixedFamily),
}

/// p_θ(x) = exp(θ₁x + θ₂x² − ψ(θ)) with ψ the log-normalizer.
#[derive(Debug, Clone)]
pub struct ExpTilt {
    interval: Interval,
    quad: QuadratureRule,
    lo: [f64; 2],
    hi: [f64; 2],
}

/// A θ-free named density.
#[derive(Debug, Clone)]
pub struct FixedFamily {
    name: String,
    density: SpectralFunction,
}

/// Per-θ evaluation cache; all x-wise calls are allocation-free.
#[derive(Debug, Clone)]
pub enum PreparedDensity {
    ExpTilt {
        theta: [f64; 2],
        psi: f64,
        mean: [f64; 2],
        cov: [[f64; 2]; 2],
    },
    Fixed(SpectralFunction),
}

impl ExpTilt {
    pub fn new(interval: Interval) -> Self {
        ExpTilt {
            interval,
            quad: QuadratureRule::gauss_legendre(interval, MOMENT_QUAD_ORDER)
                .expect("fixed positive order"),
            lo: [-3.0, -3.0],
            hi: [3.0, 3.0],
        }
    }

    fn prepare(&self, theta: &[f64]) -> Result<PreparedDensity, FamilyError> {
        check_params(theta, &self.lo, &self.hi)?;
        let (t1, t2) = (theta[0], theta[1]);
        let mut z = 0.0;
        let mut raw = [0.0f64; 2];
        let mut raw2 = [[0.0f64; 2]; 2];
        for (&x, &w) in self.quad.nodes().iter().zip(self.quad.weights()) {
            let s = [x, x * x];
            let e = w * (t1 * s[0] + t2 * s[1]).exp();
            z += e;
            for i in 0..2 {
                raw[i] += e * s[i];
                for j in 0..2 {
                    raw2[i][j] += e * s[i] * s[j];
                }
            }
        }
        let mean = [raw[0] / z, raw[1] / z];
        let mut cov = [[0.0f64; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                cov[i][j] = raw2[i][j] / z - mean[i] * mean[j];
            }
        }
        Ok(PreparedDensity::ExpTilt {
            theta: [t1, t2],
            psi: z.ln(),
            mean,
            cov,
        })
    }
}

impl Family {
    pub fn name(&self) -> &str {
        match self {
            Family::ExpTilt(_) => "exp_tilt",
            Family::Fixed(f) => &f.name,
        }
    }

    pub fn interval(&self) -> Interval {
        match self {
            Family::ExpTilt(f) => f.interval,
            Family::Fixed(f) => f.density.interval(),
        }
    }

    pub fn param_dim(&self) -> usize {
        match self {
            Family::ExpTilt(_) => 2,
            Family::Fixed(_) => 0,
        }
    }

    /// Per-coordinate box bounds (lower, upper); empty for θ-free families.
    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            Family::ExpTilt(f) => (f.lo.to_vec(), f.hi.to_vec()),
            Family::Fixed(_) => (Vec::new(), Vec::new()),
        }
    }

    /// Validate θ and build the per-θ evaluation cache.
    pub fn prepare(&self, theta: &[f64]) -> Result<PreparedDensity, FamilyError> {
        if theta.len() != self.param_dim() {
            return Err(FamilyError::WrongParamCount {
                expected: self.param_dim(),
                got: theta.len(),
            });
        }
        match self {
            Family::ExpTilt(f) => f.prepare(theta),
            Family::Fixed(f) => Ok(PreparedDensity::Fixed(f.density.clone())),
        }
    }
}

impl PreparedDensity {
    pub fn density(&self, x: f64) -> f64 {
        match self {
            PreparedDensity::ExpTilt { theta, psi, .. } => {
                (theta[0] * x + theta[1] * x * x - psi).exp()
            }
            PreparedDensity::Fixed(f) => f.eval_unchecked(x),
        }
    }

    pub fn param_dim(&self) -> usize {
        match self {
            PreparedDensity::ExpTilt { .. } => 2,
            PreparedDensity::Fixed(_) => 0,
        }
    }

    /// ∂p/∂θ at x, written into `out` (length `param_dim`).
    pub fn dtheta_into(&self, x: f64, out: &mut [f64]) {
        match self {
            PreparedDensity::ExpTilt { mean, .. } => {
                let p = self.density(x);
                let s = [x, x * x];
                out[0] = (s[0] - mean[0]) * p;
                out[1] = (s[1] - mean[1]) * p;
            }
            PreparedDensity::Fixed(_) => {}
        }
    }

    /// ∂²p/∂θ∂θᵀ at x, written row-major into `out` (length `param_dim²`).
    pub fn d2theta_into(&self, x: f64, out: &mut [f64]) {
        match self {
            PreparedDensity::ExpTilt { mean, cov, .. } => {
                let p = self.density(x);
                let s = [x, x * x];
                for i in 0..2 {
                    for j in 0..2 {
                        out[2 * i + j] =
                            ((s[i] - mean[i]) * (s[j] - mean[j]) - cov[i][j]) * p;
                    }
                }
            }
            PreparedDensity::Fixed(_) => {}
        }
    }

    /// The cosine-series form, available for θ-free members; simulation uses
    /// it to invert the distribution function in closed form.
    pub fn as_spectral(&self) -> Option<&SpectralFunction> {
        match self {
            PreparedDensity::Fixed(f) => Some(f),
            PreparedDensity::ExpTilt { .. } => None,
        }
    }
}

fn check_params(theta: &[f64], lo: &[f64], hi: &[f64]) -> Result<(), FamilyError> {
    for (index, &value) in theta.iter().enumerate() {
        if !value.is_finite() {
            return Err(FamilyError::NonFiniteParam { index });
        }
        if value < lo[index] || value > hi[index] {
            return Err(FamilyError::ParamOutOfBounds {
                index,
                value,
                lo: lo[index],
                hi: hi[index],
            });
        }
    }
    Ok(())
}

/// The fixed two-bump density: asymmetric interior modes near the quarter
/// points, strictly positive, and outside the exponential-tilt family (whose
/// log-densities are quadratic).
pub fn two_bump(interval: Interval) -> SpectralFunction {
    let scale = 1.0 / interval.length().sqrt();
    let coeffs = vec![scale, 0.12 * scale, 0.0, 0.0, -0.22 * scale];
    SpectralFunction::new(interval, coeffs).expect("fixed coefficients are finite")
}

/// Resolve a family by its registry name: `exp_tilt`, `uniform`, or
/// `mixture_misspec`.
pub fn family_by_name(name: &str, interval: Interval) -> Result<Family, FamilyError> {
    match name {
        "exp_tilt" => Ok(Family::ExpTilt(ExpTilt::new(interval))),
        "uniform" => Ok(Family::Fixed(FixedFamily {
            name: "uniform".into(),
            density: SpectralFunction::uniform(interval),
        })),
        "mixture_misspec" => Ok(Family::Fixed(FixedFamily {
            name: "mixture_misspec".into(),
            density: two_bump(interval),
        })),
        other => Err(FamilyError::UnknownFamily(other.to_string())),
    }
}

/// Fisher information ∫ (∂p)(∂p)ᵀ / p dλ at θ; the 0×0 matrix for θ-free
/// families.
pub fn fisher_information(family: &Family, theta: &[f64]) -> Result<DMatrix<f64>, FamilyError> {
    let dim = family.param_dim();
    let prepared = family.prepare(theta)?;
    let mut info = DMatrix::zeros(dim, dim);
    if dim == 0 {
        return Ok(info);
    }
    let quad = QuadratureRule::gauss_legendre(family.interval(), FISHER_QUAD_ORDER)
        .expect("fixed positive order");
    let mut d = vec![0.0; dim];
    for (&x, &w) in quad.nodes().iter().zip(quad.weights()) {
        let p = prepared.density(x);
        prepared.dtheta_into(x, &mut d);
        for i in 0..dim {
            for j in 0..dim {
                info[(i, j)] += w * d[i] * d[j] / p;
            }
        }
    }
    Ok(info)
}
