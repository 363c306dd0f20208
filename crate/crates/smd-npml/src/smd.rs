//! Minimum-distance estimation of a parametric family scored against a
//! constrained likelihood fit, with a simulated variant that refits the same
//! auxiliary model to draws from each candidate density under common random
//! numbers.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, SymmetricEigen};
use rand_core::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::auxmodel::{AuxiliaryModel, ModelError};
use crate::families::{Family, FamilyError};
use crate::neldermead::{nelder_mead, NelderMeadOptions};
use crate::npml::{fit_npml_weighted, FitError, FitOptions, WeightedPoints};
use crate::npml::Sample;
use crate::quadrature::QuadratureRule;
use crate::simulate::{CdfSampler, SimulateError};
use crate::spectral::{SpectralError, SpectralFunction};

/// Hard ceiling on simulated draws per objective; schedules above it error
/// out instead of silently thinning.
pub const MAX_SIMULATED_DRAWS: usize = 100_000_000;

const NEWTON_POLISH_STEPS: usize = 10;
const MULTIPLIER_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SmdError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Family(#[from] FamilyError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Simulate(#[from] SimulateError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error("reference density is {value:.3e} at x = {x:.6}; the distance requires a positive reference")]
    NonPositiveReference { x: f64, value: f64 },
    #[error("fitted density dips to {min:.3e}, at or below the required floor {chi:.3e}")]
    FloorBelowThreshold { min: f64, chi: f64 },
    #[error("schedule asks for {requested:.3e} simulated draws, over the {cap} cap; reduce n or the constant")]
    ScheduleOverflow { requested: f64, cap: usize },
    #[error("components live on different intervals")]
    IntervalMismatch,
}

/// Rule mapping a sample size to the simulated-draw count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum KMode {
    /// ⌈c·n²·log(n+1)⌉
    #[serde(rename = "n2")]
    Quadratic,
    /// ⌈c·n^{2+1/t}·log(n+1)⌉
    #[serde(rename = "n2_1t")]
    QuadraticSmoothness,
    /// k = ⌈c⌉ regardless of n
    #[serde(rename = "custom")]
    Custom,
}

impl KMode {
    pub fn parse(name: &str) -> Option<KMode> {
        match name {
            "n2" => Some(KMode::Quadratic),
            "n2_1t" => Some(KMode::QuadraticSmoothness),
            "custom" => Some(KMode::Custom),
            _ => None,
        }
    }
}

/// Simulated-draw budget for a sample of size `n`; errors above
/// [`MAX_SIMULATED_DRAWS`].
pub fn k_schedule(n: usize, mode: KMode, t: f64, c: f64) -> Result<usize, SmdError> {
    let raw = match mode {
        KMode::Quadratic => c * (n as f64).powi(2) * ((n + 1) as f64).ln(),
        KMode::QuadraticSmoothness => {
            c * (n as f64).powf(2.0 + 1.0 / t) * ((n + 1) as f64).ln()
        }
        KMode::Custom => c,
    };
    let k = raw.ceil();
    if !k.is_finite() || k > MAX_SIMULATED_DRAWS as f64 {
        return Err(SmdError::ScheduleOverflow {
            requested: raw,
            cap: MAX_SIMULATED_DRAWS,
        });
    }
    Ok((k as usize).max(1))
}

/// Check that a fitted density clears the floor `chi` everywhere on the
/// model's audit grid; used when the fit ran with a zero floor.
pub fn verify_floor(
    model: &AuxiliaryModel,
    fitted: &SpectralFunction,
    chi: f64,
) -> Result<(), SmdError> {
    let min = model.grid_min(fitted)?;
    if min <= chi {
        return Err(SmdError::FloorBelowThreshold { min, chi });
    }
    Ok(())
}

fn positive_values(
    f: impl Fn(f64) -> f64,
    quad: &QuadratureRule,
) -> Result<Vec<f64>, SmdError> {
    let mut values = Vec::with_capacity(quad.len());
    for &x in quad.nodes() {
        let v = f(x);
        if !(v.is_finite() && v > 0.0) {
            return Err(SmdError::NonPositiveReference { x, value: v });
        }
        values.push(v);
    }
    Ok(values)
}

/// Weighted squared distance ∫ (r − p_θ)² / r dλ for a reference density r
/// known at the quadrature nodes.
pub struct ExactObjective<'a> {
    family: &'a Family,
    quad: &'a QuadratureRule,
    ref_values: Vec<f64>,
}

impl<'a> ExactObjective<'a> {
    pub fn from_fn(
        family: &'a Family,
        reference: impl Fn(f64) -> f64,
        quad: &'a QuadratureRule,
    ) -> Result<Self, SmdError> {
        if quad.interval() != family.interval() {
            return Err(SmdError::IntervalMismatch);
        }
        let ref_values = positive_values(reference, quad)?;
        Ok(ExactObjective {
            family,
            quad,
            ref_values,
        })
    }

    pub fn from_spectral(
        family: &'a Family,
        reference: &SpectralFunction,
        quad: &'a QuadratureRule,
    ) -> Result<Self, SmdError> {
        if reference.interval() != family.interval() {
            return Err(SmdError::IntervalMismatch);
        }
        Self::from_fn(family, |x| reference.eval(x).unwrap(), quad)
    }

    pub fn family(&self) -> &Family {
        self.family
    }

    pub fn value(&self, theta: &[f64]) -> Result<f64, SmdError> {
        let prepared = self.family.prepare(theta)?;
        let mut q = 0.0;
        for ((&x, &w), &r) in self
            .quad
            .nodes()
            .iter()
            .zip(self.quad.weights())
            .zip(&self.ref_values)
        {
            let d = r - prepared.density(x);
            q += w * d * d / r;
        }
        Ok(q)
    }

    /// ∂Q/∂θᵢ = −2 ∫ (r − p_θ) ∂p/∂θᵢ · r⁻¹ dλ
    pub fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>, SmdError> {
        let prepared = self.family.prepare(theta)?;
        let dim = prepared.param_dim();
        let mut grad = vec![0.0; dim];
        let mut dp = vec![0.0; dim];
        for ((&x, &w), &r) in self
            .quad
            .nodes()
            .iter()
            .zip(self.quad.weights())
            .zip(&self.ref_values)
        {
            let p = prepared.density(x);
            prepared.dtheta_into(x, &mut dp);
            let scale = -2.0 * w * (r - p) / r;
            for (g, &d) in grad.iter_mut().zip(&dp) {
                *g += scale * d;
            }
        }
        Ok(grad)
    }

    /// ∂²Q/∂θᵢ∂θⱼ = 2 ∫ (∂ᵢp ∂ⱼp + ∂²ᵢⱼp · p_θ) r⁻¹ dλ
    pub fn hessian(&self, theta: &[f64]) -> Result<DMatrix<f64>, SmdError> {
        let prepared = self.family.prepare(theta)?;
        let dim = prepared.param_dim();
        let mut hess = DMatrix::zeros(dim, dim);
        let mut dp = vec![0.0; dim];
        let mut d2p = vec![0.0; dim * dim];
        for ((&x, &w), &r) in self
            .quad
            .nodes()
            .iter()
            .zip(self.quad.weights())
            .zip(&self.ref_values)
        {
            let p = prepared.density(x);
            prepared.dtheta_into(x, &mut dp);
            prepared.d2theta_into(x, &mut d2p);
            let scale = 2.0 * w / r;
            for i in 0..dim {
                for j in 0..dim {
                    hess[(i, j)] += scale * (dp[i] * dp[j] + d2p[i * dim + j] * p);
                }
            }
        }
        Ok(hess)
    }
}

/// Same distance, but the candidate side is a fresh constrained fit of `k`
/// simulated draws from p_θ. The uniforms are drawn once, so every θ sees the
/// same randomness; values are cached by the bit pattern of θ.
pub struct SimulatedObjective<'a> {
    family: &'a Family,
    model: &'a AuxiliaryModel,
    quad: &'a QuadratureRule,
    ref_values: Vec<f64>,
    uniforms: Vec<f64>,
    fit_options: FitOptions,
    warm: RefCell<Option<Vec<f64>>>,
    cache: RefCell<BTreeMap<Vec<u64>, f64>>,
    inner_fits: Cell<usize>,
}

impl<'a> SimulatedObjective<'a> {
    pub fn new(
        family: &'a Family,
        model: &'a AuxiliaryModel,
        data_fit: &SpectralFunction,
        quad: &'a QuadratureRule,
        k: usize,
        rng: &mut impl RngCore,
        fit_options: FitOptions,
    ) -> Result<Self, SmdError> {
        if family.interval() != model.interval()
            || quad.interval() != model.interval()
            || data_fit.interval() != model.interval()
        {
            return Err(SmdError::IntervalMismatch);
        }
        assert!(k >= 1, "need at least one simulated draw");
        assert!(
            k <= MAX_SIMULATED_DRAWS,
            "draw count above the schedule cap"
        );
        let ref_values = positive_values(|x| data_fit.eval(x).unwrap(), quad)?;
        let uniforms = crate::simulate::uniform_batch(rng, k);
        Ok(SimulatedObjective {
            family,
            model,
            quad,
            ref_values,
            uniforms,
            fit_options: FitOptions {
                warm_start: None,
                ..fit_options
            },
            warm: RefCell::new(None),
            cache: RefCell::new(BTreeMap::new()),
            inner_fits: Cell::new(0),
        })
    }

    pub fn family(&self) -> &Family {
        self.family
    }

    pub fn draws(&self) -> usize {
        self.uniforms.len()
    }

    /// Number of simulated fits actually run (cache hits excluded).
    pub fn inner_fits(&self) -> usize {
        self.inner_fits.get()
    }

    pub fn value(&self, theta: &[f64]) -> Result<f64, SmdError> {
        let key: Vec<u64> = theta.iter().map(|t| t.to_bits()).collect();
        if let Some(&q) = self.cache.borrow().get(&key) {
            return Ok(q);
        }
        let prepared = self.family.prepare(theta)?;
        let sampler = CdfSampler::from_prepared(&prepared, self.model.interval())?;
        let pts = if self.uniforms.len() > self.fit_options.bin_threshold {
            let table = sampler.quantile_table()?;
            table.transform_binned(&self.uniforms, self.fit_options.bins)
        } else {
            let mut xs = Vec::with_capacity(self.uniforms.len());
            for &v in &self.uniforms {
                xs.push(sampler.quantile(v)?);
            }
            let n = xs.len();
            WeightedPoints {
                x: xs,
                w: vec![1.0 / n as f64; n],
                total: n,
            }
        };
        let options = FitOptions {
            warm_start: self.warm.borrow().clone(),
            ..self.fit_options.clone()
        };
        let fit = fit_npml_weighted(self.model, &pts, &options)?;
        self.inner_fits.set(self.inner_fits.get() + 1);
        *self.warm.borrow_mut() = Some(fit.density.coeffs().to_vec());

        let mut q = 0.0;
        for ((&x, &w), &r) in self
            .quad
            .nodes()
            .iter()
            .zip(self.quad.weights())
            .zip(&self.ref_values)
        {
            let d = r - fit.density.eval(x)?;
            q += w * d * d / r;
        }
        self.cache.borrow_mut().insert(key, q);
        Ok(q)
    }
}

fn matrices_core(
    family: &Family,
    theta: &[f64],
    ref_values: &[f64],
    quad: &QuadratureRule,
) -> Result<(DMatrix<f64>, DMatrix<f64>), SmdError> {
    let prepared = family.prepare(theta)?;
    let dim = prepared.param_dim();
    let mut j = DMatrix::zeros(dim, dim);
    let mut outer = DMatrix::zeros(dim, dim);
    let mut mean = vec![0.0; dim];
    let mut dp = vec![0.0; dim];
    let mut d2p = vec![0.0; dim * dim];
    for ((&x, &w), &r) in quad
        .nodes()
        .iter()
        .zip(quad.weights())
        .zip(ref_values)
    {
        let p = prepared.density(x);
        prepared.dtheta_into(x, &mut dp);
        prepared.d2theta_into(x, &mut d2p);
        let p_over_r = p / r;
        for i in 0..dim {
            mean[i] += w * dp[i] * p_over_r;
            for l in 0..dim {
                j[(i, l)] += w * (dp[i] * dp[l] + d2p[i * dim + l] * p) / r;
                outer[(i, l)] += w * dp[i] * dp[l] * p_over_r * p_over_r / r;
            }
        }
    }
    let mut i_mat = outer;
    for a in 0..dim {
        for b in 0..dim {
            i_mat[(a, b)] -= mean[a] * mean[b];
        }
    }
    Ok((j, i_mat))
}

/// Half the Hessian of the population distance at θ against the reference
/// density: ∫ (∂ᵢp ∂ⱼp + ∂²ᵢⱼp · p_θ) · r⁻¹ dλ.
pub fn j_matrix(
    family: &Family,
    theta: &[f64],
    reference: impl Fn(f64) -> f64,
    quad: &QuadratureRule,
) -> Result<DMatrix<f64>, SmdError> {
    let ref_values = positive_values(reference, quad)?;
    Ok(matrices_core(family, theta, &ref_values, quad)?.0)
}

/// Score covariance under the reference density:
/// ∫ ∂ᵢp ∂ⱼp · p_θ² r⁻³ dλ − (∫ ∂ᵢp · p_θ r⁻¹ dλ)(∫ ∂ⱼp · p_θ r⁻¹ dλ).
pub fn i_matrix(
    family: &Family,
    theta: &[f64],
    reference: impl Fn(f64) -> f64,
    quad: &QuadratureRule,
) -> Result<DMatrix<f64>, SmdError> {
    let ref_values = positive_values(reference, quad)?;
    Ok(matrices_core(family, theta, &ref_values, quad)?.1)
}

/// J⁻¹ I J⁻¹ / n, or None when J has no Cholesky factor.
pub fn sandwich_covariance(
    j: &DMatrix<f64>,
    i: &DMatrix<f64>,
    n: usize,
) -> Option<DMatrix<f64>> {
    let dim = j.nrows();
    if dim == 0 {
        return Some(DMatrix::zeros(0, 0));
    }
    let sym = (j + j.transpose()) * 0.5;
    let chol = Cholesky::new(sym)?;
    let j_inv = chol.inverse();
    Some(&j_inv * i * &j_inv / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchPhase {
    Grid,
    Refine,
    Polish,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceEntry {
    pub theta: Vec<f64>,
    pub value: f64,
    pub phase: SearchPhase,
}

#[derive(Debug, Clone)]
pub struct EstimationResult {
    pub theta_hat: Vec<f64>,
    pub objective_value: f64,
    /// Sandwich covariance of θ̂; None when the curvature matrix was not
    /// invertible at the minimizer.
    pub covariance: Option<DMatrix<f64>>,
    /// θ̂ sits within the boundary margin of the parameter box.
    pub boundary: bool,
    pub converged: bool,
    pub evaluations: usize,
    pub trace: Vec<TraceEntry>,
}

#[derive(Debug, Clone)]
pub struct MinimizeOptions {
    pub grid_per_axis: usize,
    pub nelder_mead: NelderMeadOptions,
    /// Damped Newton steps after the simplex stage; only taken for exact
    /// objectives, where derivatives are available.
    pub newton_polish: bool,
    /// Relative distance to the box edge under which θ̂ is flagged.
    pub boundary_margin: f64,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        MinimizeOptions {
            grid_per_axis: 15,
            nelder_mead: NelderMeadOptions::default(),
            newton_polish: true,
            boundary_margin: 1e-6,
        }
    }
}

/// All corner-to-corner lattice points with `per_axis` values per coordinate.
pub fn box_grid(lo: &[f64], hi: &[f64], per_axis: usize) -> Vec<Vec<f64>> {
    let dim = lo.len();
    assert!(per_axis >= 2, "need at least the two endpoints per axis");
    let mut points = Vec::with_capacity(per_axis.pow(dim as u32));
    let mut index = vec![0usize; dim];
    loop {
        let theta: Vec<f64> = (0..dim)
            .map(|i| lo[i] + (hi[i] - lo[i]) * index[i] as f64 / (per_axis - 1) as f64)
            .collect();
        points.push(theta);
        let mut axis = 0;
        loop {
            if axis == dim {
                return points;
            }
            index[axis] += 1;
            if index[axis] < per_axis {
                break;
            }
            index[axis] = 0;
            axis += 1;
        }
    }
}

fn lexicographically_before(a: &[f64], b: &[f64]) -> bool {
    for (x, y) in a.iter().zip(b) {
        if x < y {
            return true;
        }
        if x > y {
            return false;
        }
    }
    false
}

fn near_boundary(theta: &[f64], lo: &[f64], hi: &[f64], margin: f64) -> bool {
    theta.iter().zip(lo).zip(hi).any(|((&t, &l), &h)| {
        let edge = margin * (h - l);
        t - l <= edge || h - t <= edge
    })
}

struct SearchOutcome {
    theta: Vec<f64>,
    value: f64,
    converged: bool,
    trace: Vec<TraceEntry>,
}

/// Coarse lattice scan followed by simplex refinement; ties in the scan go to
/// the lexicographically smallest θ.
fn search(
    mut value: impl FnMut(&[f64]) -> Result<f64, SmdError>,
    lo: &[f64],
    hi: &[f64],
    options: &MinimizeOptions,
) -> Result<SearchOutcome, SmdError> {
    let dim = lo.len();
    if dim == 0 {
        let q = value(&[])?;
        return Ok(SearchOutcome {
            theta: Vec::new(),
            value: q,
            converged: true,
            trace: vec![TraceEntry {
                theta: Vec::new(),
                value: q,
                phase: SearchPhase::Grid,
            }],
        });
    }

    let mut trace = Vec::new();
    let mut best_theta: Option<Vec<f64>> = None;
    let mut best_value = f64::INFINITY;
    for theta in box_grid(lo, hi, options.grid_per_axis) {
        let q = value(&theta)?;
        trace.push(TraceEntry {
            theta: theta.clone(),
            value: q,
            phase: SearchPhase::Grid,
        });
        let better = match &best_theta {
            None => true,
            Some(current) => {
                q < best_value
                    || (q == best_value && lexicographically_before(&theta, current))
            }
        };
        if better {
            best_theta = Some(theta);
            best_value = q;
        }
    }
    let start = best_theta.expect("grid has at least one point");

    let error: RefCell<Option<SmdError>> = RefCell::new(None);
    let trace_cell = RefCell::new(trace);
    let result = nelder_mead(
        |theta| {
            if error.borrow().is_some() {
                return f64::INFINITY;
            }
            match value(theta) {
                Ok(q) => {
                    trace_cell.borrow_mut().push(TraceEntry {
                        theta: theta.to_vec(),
                        value: q,
                        phase: SearchPhase::Refine,
                    });
                    q
                }
                Err(e) => {
                    *error.borrow_mut() = Some(e);
                    f64::INFINITY
                }
            }
        },
        &start,
        lo,
        hi,
        &options.nelder_mead,
    );
    if let Some(e) = error.into_inner() {
        return Err(e);
    }

    let mut trace = trace_cell.into_inner();
    let (theta, q) = if result.value <= best_value {
        (result.x, result.value)
    } else {
        trace.push(TraceEntry {
            theta: start.clone(),
            value: best_value,
            phase: SearchPhase::Refine,
        });
        (start, best_value)
    };
    Ok(SearchOutcome {
        theta,
        value: q,
        converged: result.converged,
        trace,
    })
}

fn polish(
    objective: &ExactObjective,
    outcome: &mut SearchOutcome,
    lo: &[f64],
    hi: &[f64],
) -> Result<(), SmdError> {
    for _ in 0..NEWTON_POLISH_STEPS {
        let grad = objective.gradient(&outcome.theta)?;
        let hess = objective.hessian(&outcome.theta)?;
        let sym = (&hess + hess.transpose()) * 0.5;
        let Some(chol) = Cholesky::new(sym) else {
            break;
        };
        let g = nalgebra::DVector::from_column_slice(&grad);
        let step = chol.solve(&g);
        let mut improved = false;
        let mut damping = 1.0;
        for _ in 0..8 {
            let candidate: Vec<f64> = outcome
                .theta
                .iter()
                .enumerate()
                .map(|(i, &t)| (t - damping * step[i]).clamp(lo[i], hi[i]))
                .collect();
            let q = objective.value(&candidate)?;
            if q < outcome.value {
                outcome.trace.push(TraceEntry {
                    theta: candidate.clone(),
                    value: q,
                    phase: SearchPhase::Polish,
                });
                outcome.theta = candidate;
                outcome.value = q;
                improved = true;
                break;
            }
            damping *= 0.5;
        }
        if !improved || step.amax() < 1e-12 {
            break;
        }
    }
    Ok(())
}

fn finish(
    outcome: SearchOutcome,
    family: &Family,
    ref_values: &[f64],
    quad: &QuadratureRule,
    n_data: Option<usize>,
    options: &MinimizeOptions,
) -> Result<EstimationResult, SmdError> {
    let (lo, hi) = family.bounds();
    let boundary = near_boundary(&outcome.theta, &lo, &hi, options.boundary_margin);
    let covariance = match n_data {
        Some(n) => {
            let (j, i) = matrices_core(family, &outcome.theta, ref_values, quad)?;
            sandwich_covariance(&j, &i, n)
        }
        None => None,
    };
    Ok(EstimationResult {
        evaluations: outcome.trace.len(),
        theta_hat: outcome.theta,
        objective_value: outcome.value,
        covariance,
        boundary,
        converged: outcome.converged,
        trace: outcome.trace,
    })
}

/// Minimize the exact distance. When `n_data` is given, the sandwich
/// covariance at θ̂ (against the objective's own reference) is attached.
pub fn minimize_md(
    objective: &ExactObjective,
    n_data: Option<usize>,
    options: &MinimizeOptions,
) -> Result<EstimationResult, SmdError> {
    let (lo, hi) = objective.family.bounds();
    let mut outcome = search(|theta| objective.value(theta), &lo, &hi, options)?;
    if options.newton_polish && !lo.is_empty() {
        polish(objective, &mut outcome, &lo, &hi)?;
    }
    finish(
        outcome,
        objective.family,
        &objective.ref_values,
        objective.quad,
        n_data,
        options,
    )
}

/// Minimize the simulated distance, derivative-free throughout. When
/// `n_data` is given, the plug-in sandwich covariance at θ̂ is attached.
pub fn minimize_smd(
    objective: &SimulatedObjective,
    n_data: Option<usize>,
    options: &MinimizeOptions,
) -> Result<EstimationResult, SmdError> {
    let (lo, hi) = objective.family.bounds();
    let outcome = search(|theta| objective.value(theta), &lo, &hi, options)?;
    finish(
        outcome,
        objective.family,
        &objective.ref_values,
        objective.quad,
        n_data,
        options,
    )
}

/// Largest discrepancy, over the given test functions, between the fitted
/// integral increment √n·∫(p̂ − p₀)f dλ and the empirical increment
/// √n·(P_n f − ∫ f p₀ dλ).
pub fn donsker_gap(
    fitted: &SpectralFunction,
    sample: &Sample,
    truth: impl Fn(f64) -> f64,
    test_fns: &[SpectralFunction],
    quad: &QuadratureRule,
) -> Result<f64, SmdError> {
    if fitted.interval() != sample.interval() || quad.interval() != sample.interval() {
        return Err(SmdError::IntervalMismatch);
    }
    let root_n = (sample.len() as f64).sqrt();
    let mut gap = 0.0f64;
    for f in test_fns {
        if f.interval() != sample.interval() {
            return Err(SmdError::IntervalMismatch);
        }
        let mut fitted_increment = 0.0;
        let mut truth_mean = 0.0;
        for (&x, &w) in quad.nodes().iter().zip(quad.weights()) {
            let fx = f.eval(x)?;
            let p0 = truth(x);
            fitted_increment += w * (fitted.eval(x)? - p0) * fx;
            truth_mean += w * fx * p0;
        }
        let mut empirical = 0.0;
        for &x in sample.points() {
            empirical += f.eval(x)?;
        }
        empirical /= sample.len() as f64;
        gap = gap.max((root_n * fitted_increment - root_n * (empirical - truth_mean)).abs());
    }
    Ok(gap)
}

#[derive(Debug, Clone)]
pub struct SquareRootCertificate {
    /// ‖θ̂ (simulated) − θ̂ (exact)‖₂
    pub lhs: f64,
    /// max over the probe lattice of |Q_simulated − Q_exact|
    pub sup_gap: f64,
    /// min over the probe lattice of the smallest Hessian eigenvalue of the
    /// exact objective
    pub curvature: f64,
    /// 2·√(sup_gap / curvature); infinite when curvature ≤ 0
    pub rhs: f64,
    pub certified: bool,
}

/// Probe a box around the two minimizers and test the bound
/// ‖θ̂_sim − θ̂_exact‖ ≤ 2·curvature^{−1/2}·sup_gap^{1/2}. The certificate
/// only makes sense when both minimizers lie in the box.
pub fn certify_square_root_bound(
    exact: &ExactObjective,
    simulated: &SimulatedObjective,
    theta_exact: &[f64],
    theta_sim: &[f64],
    box_lo: &[f64],
    box_hi: &[f64],
    probes_per_axis: usize,
) -> Result<SquareRootCertificate, SmdError> {
    let lhs = theta_exact
        .iter()
        .zip(theta_sim)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let mut probes = box_grid(box_lo, box_hi, probes_per_axis);
    probes.push(theta_exact.to_vec());
    probes.push(theta_sim.to_vec());

    let (fam_lo, fam_hi) = exact.family.bounds();
    let mut sup_gap = 0.0f64;
    let mut curvature = f64::INFINITY;
    for theta in &mut probes {
        for (i, t) in theta.iter_mut().enumerate() {
            *t = t.clamp(fam_lo[i], fam_hi[i]);
        }
        let gap = (simulated.value(theta)? - exact.value(theta)?).abs();
        sup_gap = sup_gap.max(gap);
        let hess = exact.hessian(theta)?;
        let sym = (&hess + hess.transpose()) * 0.5;
        let eigen = SymmetricEigen::new(sym);
        curvature = curvature.min(eigen.eigenvalues.min());
    }
    let rhs = if curvature > 0.0 {
        2.0 * (sup_gap / curvature).sqrt()
    } else {
        f64::INFINITY
    };
    let certified = curvature > 0.0 && lhs <= rhs + MULTIPLIER_EPS;
    Ok(SquareRootCertificate {
        lhs,
        sup_gap,
        curvature,
        rhs,
        certified,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::families::{family_by_name, fisher_information, two_bump};
    use crate::interval::Interval;
    use crate::npml::{fit_npml, FitOptions};
    use crate::simulate::{stream_rng, StreamPurpose};

    fn unit_quad(order: usize) -> QuadratureRule {
        QuadratureRule::gauss_legendre(Interval::unit(), order).unwrap()
    }

    fn exp_tilt() -> Family {
        family_by_name("exp_tilt", Interval::unit()).unwrap()
    }

    #[test]
    fn distance_to_uniform_matches_closed_form() {
        let family = exp_tilt();
        let quad = unit_quad(256);
        let objective = ExactObjective::from_fn(&family, |_| 1.0, &quad).unwrap();
        let q = objective.value(&[1.0, 0.0]).unwrap();
        let e = std::f64::consts::E;
        let expected = (e * e - 1.0) / (2.0 * (e - 1.0) * (e - 1.0)) - 1.0;
        assert!((q - expected).abs() < 1e-12, "q = {q}, expected {expected}");
    }

    #[test]
    fn gradient_vanishes_at_zero_residual() {
        let family = exp_tilt();
        let quad = unit_quad(256);
        let theta = [0.9, -0.4];
        let prepared = family.prepare(&theta).unwrap();
        let objective =
            ExactObjective::from_fn(&family, |x| prepared.density(x), &quad).unwrap();
        assert!(objective.value(&theta).unwrap() < 1e-24);
        let grad = objective.gradient(&theta).unwrap();
        for g in grad {
            assert!(g.abs() < 1e-10, "gradient component {g}");
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let family = exp_tilt();
        let quad = unit_quad(256);
        let reference = two_bump(Interval::unit());
        let objective = ExactObjective::from_spectral(&family, &reference, &quad).unwrap();
        let theta = [0.7, -0.4];
        let h = 1e-5;

        let grad = objective.gradient(&theta).unwrap();
        let hess = objective.hessian(&theta).unwrap();
        for i in 0..2 {
            let mut up = theta;
            let mut down = theta;
            up[i] += h;
            down[i] -= h;
            let fd = (objective.value(&up).unwrap() - objective.value(&down).unwrap()) / (2.0 * h);
            assert!(
                (fd - grad[i]).abs() <= 1e-5 * grad[i].abs().max(1.0),
                "grad[{i}] = {}, fd = {fd}",
                grad[i]
            );
            for j in 0..2 {
                let gd_up = objective.gradient(&up).unwrap()[j];
                let gd_down = objective.gradient(&down).unwrap()[j];
                let fd2 = (gd_up - gd_down) / (2.0 * h);
                assert!(
                    (fd2 - hess[(i, j)]).abs() <= 1e-5 * hess[(i, j)].abs().max(1.0),
                    "hess[{i},{j}] = {}, fd = {fd2}",
                    hess[(i, j)]
                );
            }
        }
        assert!((hess[(0, 1)] - hess[(1, 0)]).abs() < 1e-10);
    }

    #[test]
    fn curvature_and_score_matrices_match_fisher_under_correct_model() {
        let family = exp_tilt();
        let quad = unit_quad(256);
        for theta in [[0.0, 0.0], [1.0, -0.5], [-2.0, 1.5]] {
            let prepared = family.prepare(&theta).unwrap();
            let fisher = fisher_information(&family, &theta).unwrap();
            let j = j_matrix(&family, &theta, |x| prepared.density(x), &quad).unwrap();
            let i = i_matrix(&family, &theta, |x| prepared.density(x), &quad).unwrap();
            for a in 0..2 {
                for b in 0..2 {
                    let scale = fisher[(a, b)].abs().max(1.0);
                    assert!(
                        (j[(a, b)] - fisher[(a, b)]).abs() <= 1e-6 * scale,
                        "J mismatch at θ = {theta:?}: {} vs {}",
                        j[(a, b)],
                        fisher[(a, b)]
                    );
                    assert!(
                        (i[(a, b)] - fisher[(a, b)]).abs() <= 1e-6 * scale,
                        "I mismatch at θ = {theta:?}: {} vs {}",
                        i[(a, b)],
                        fisher[(a, b)]
                    );
                }
            }
        }
        let fisher0 = fisher_information(&family, &[0.0, 0.0]).unwrap();
        assert!((fisher0[(0, 0)] - 1.0 / 12.0).abs() < 1e-12);
        assert!((fisher0[(0, 1)] - 1.0 / 12.0).abs() < 1e-12);
        assert!((fisher0[(1, 1)] - 4.0 / 45.0).abs() < 1e-12);
    }

    #[test]
    fn theta_free_family_gives_empty_matrices() {
        let family = family_by_name("uniform", Interval::unit()).unwrap();
        let quad = unit_quad(64);
        let j = j_matrix(&family, &[], |_| 1.0, &quad).unwrap();
        let i = i_matrix(&family, &[], |_| 1.0, &quad).unwrap();
        assert_eq!(j.nrows(), 0);
        assert_eq!(i.nrows(), 0);
        let cov = sandwich_covariance(&j, &i, 50).unwrap();
        assert_eq!(cov.nrows(), 0);
    }

    #[test]
    fn sandwich_covariance_matches_direct_inverse() {
        let j = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let i = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.1, 0.5]);
        let cov = sandwich_covariance(&j, &i, 100).unwrap();
        let j_inv = j.clone().try_inverse().unwrap();
        let expected = &j_inv * &i * &j_inv / 100.0;
        for a in 0..2 {
            for b in 0..2 {
                assert!((cov[(a, b)] - expected[(a, b)]).abs() < 1e-14);
            }
        }
        let singular = DMatrix::zeros(2, 2);
        assert!(sandwich_covariance(&singular, &i, 100).is_none());
    }

    #[test]
    fn schedule_matches_hand_computation() {
        assert_eq!(k_schedule(100, KMode::Quadratic, 1.0, 1.0).unwrap(), 46152);
        assert_eq!(k_schedule(10, KMode::Custom, 1.0, 5000.0).unwrap(), 5000);
        let k1 = k_schedule(50, KMode::QuadraticSmoothness, 1.0, 1.0).unwrap();
        let k2 = k_schedule(50, KMode::Quadratic, 1.0, 1.0).unwrap();
        assert!(k1 > k2, "extra n^{{1/t}} factor must increase the budget");
        assert!(matches!(
            k_schedule(1_000_000, KMode::Quadratic, 1.0, 1.0),
            Err(SmdError::ScheduleOverflow { .. })
        ));
        assert_eq!(k_schedule(1, KMode::Quadratic, 1.0, 0.1).unwrap(), 1);
    }

    #[test]
    fn exact_minimization_recovers_population_parameter() {
        let family = exp_tilt();
        let quad = unit_quad(256);
        let theta_star = [0.8, -0.3];
        let prepared = family.prepare(&theta_star).unwrap();
        let objective =
            ExactObjective::from_fn(&family, |x| prepared.density(x), &quad).unwrap();
        let options = MinimizeOptions {
            grid_per_axis: 7,
            ..MinimizeOptions::default()
        };
        let result = minimize_md(&objective, None, &options).unwrap();
        for (est, truth) in result.theta_hat.iter().zip(&theta_star) {
            assert!(
                (est - truth).abs() < 1e-5,
                "θ̂ = {:?}, θ* = {theta_star:?}",
                result.theta_hat
            );
        }
        assert!(result.objective_value < 1e-10);
        assert!(!result.boundary);
        assert!(result.covariance.is_none());
        assert!(result
            .trace
            .iter()
            .any(|e| e.phase == SearchPhase::Grid));
    }

    #[test]
    fn boundary_is_flagged_when_optimum_sits_on_the_box_edge() {
        let family = exp_tilt();
        let quad = unit_quad(128);
        // A steep exponential pull: the best fit within the box saturates θ₁.
        let steep = |x: f64| (6.0 * x).exp() * 6.0 / ((6.0f64).exp() - 1.0);
        let objective = ExactObjective::from_fn(&family, steep, &quad).unwrap();
        let options = MinimizeOptions {
            grid_per_axis: 7,
            ..MinimizeOptions::default()
        };
        let result = minimize_md(&objective, None, &options).unwrap();
        assert!(result.boundary, "θ̂ = {:?}", result.theta_hat);
    }

    fn simulated_pipeline(seed: u64, rep: u32, k: usize) -> (SpectralFunction, Vec<f64>, f64) {
        let interval = Interval::unit();
        let family = exp_tilt();
        let theta0 = [1.0, -0.5];
        let model = AuxiliaryModel::new(interval, 1.0, 0.1, 1.4, 16, 512).unwrap();
        let quad = unit_quad(128);

        let prepared = family.prepare(&theta0).unwrap();
        let sampler = CdfSampler::from_prepared(&prepared, interval).unwrap();
        let mut data_rng = stream_rng(seed, 0, rep, StreamPurpose::Data);
        let points = sampler.simulate(&mut data_rng, 150).unwrap();
        let sample = Sample::new(interval, points).unwrap();
        let fit = fit_npml(&model, &sample, &FitOptions::default()).unwrap();

        let mut sim_rng = stream_rng(seed, 0, rep, StreamPurpose::Simulation);
        let objective = SimulatedObjective::new(
            &family,
            &model,
            &fit.density,
            &quad,
            k,
            &mut sim_rng,
            FitOptions::default(),
        )
        .unwrap();
        let options = MinimizeOptions {
            grid_per_axis: 5,
            nelder_mead: NelderMeadOptions {
                max_iters: 120,
                tol: 1e-5,
                initial_scale: 0.05,
            },
            ..MinimizeOptions::default()
        };
        let result = minimize_smd(&objective, Some(sample.len()), &options).unwrap();
        let cov = result.covariance.as_ref().expect("covariance available");
        assert_eq!(cov.nrows(), 2);
        assert!((cov[(0, 1)] - cov[(1, 0)]).abs() < 1e-12);
        assert!(cov[(0, 0)] > 0.0 && cov[(1, 1)] > 0.0);
        (fit.density, result.theta_hat, result.objective_value)
    }

    #[test]
    fn simulated_minimization_lands_near_the_generator() {
        // The tilt statistics (x, x²) are nearly collinear on [0,1], so raw
        // coordinate error rides a flat valley; measure closeness in the
        // Fisher metric and at the density level instead.
        let (_, theta_hat, q) = simulated_pipeline(7, 0, 2000);
        let family = exp_tilt();
        let theta0 = [1.0, -0.5];
        let fisher = fisher_information(&family, &theta0).unwrap();
        let d = [theta_hat[0] - theta0[0], theta_hat[1] - theta0[1]];
        let quad_form = 150.0
            * (d[0] * d[0] * fisher[(0, 0)]
                + 2.0 * d[0] * d[1] * fisher[(0, 1)]
                + d[1] * d[1] * fisher[(1, 1)]);
        assert!(quad_form < 15.0, "θ̂ = {theta_hat:?}, n·(θ̂−θ₀)ᵀF(θ̂−θ₀) = {quad_form}");

        let quad = unit_quad(256);
        let p0 = family.prepare(&theta0).unwrap();
        let ph = family.prepare(&theta_hat).unwrap();
        let l2 = quad
            .integrate(|x| (p0.density(x) - ph.density(x)).powi(2))
            .sqrt();
        assert!(l2 < 0.3, "‖p_θ̂ − p_θ₀‖ = {l2}");
        assert!(q.is_finite() && q >= 0.0);
    }

    #[test]
    fn common_random_numbers_make_the_objective_reproducible() {
        let interval = Interval::unit();
        let family = exp_tilt();
        let model = AuxiliaryModel::new(interval, 1.0, 0.1, 1.4, 16, 512).unwrap();
        let quad = unit_quad(128);
        let reference = two_bump(interval);

        let probe = [[1.0, -0.5], [0.3, 0.2], [1.0, -0.5]];
        let mut runs: Vec<Vec<f64>> = Vec::new();
        for _ in 0..2 {
            let mut rng = stream_rng(11, 3, 4, StreamPurpose::Simulation);
            let objective = SimulatedObjective::new(
                &family,
                &model,
                &reference,
                &quad,
                1500,
                &mut rng,
                FitOptions::default(),
            )
            .unwrap();
            runs.push(
                probe
                    .iter()
                    .map(|theta| objective.value(theta).unwrap())
                    .collect(),
            );
        }
        assert_eq!(runs[0], runs[1], "same stream must give identical values");

        let mut other_rng = stream_rng(11, 3, 5, StreamPurpose::Simulation);
        let other = SimulatedObjective::new(
            &family,
            &model,
            &reference,
            &quad,
            1500,
            &mut other_rng,
            FitOptions::default(),
        )
        .unwrap();
        assert_ne!(other.value(&probe[0]).unwrap(), runs[0][0]);
    }

    #[test]
    fn cached_evaluations_skip_refits() {
        let interval = Interval::unit();
        let family = exp_tilt();
        let model = AuxiliaryModel::new(interval, 1.0, 0.1, 1.4, 16, 512).unwrap();
        let quad = unit_quad(64);
        let reference = two_bump(interval);
        let mut rng = stream_rng(2, 0, 0, StreamPurpose::Simulation);
        let objective = SimulatedObjective::new(
            &family,
            &model,
            &reference,
            &quad,
            500,
            &mut rng,
            FitOptions::default(),
        )
        .unwrap();
        let first = objective.value(&[0.5, 0.5]).unwrap();
        let again = objective.value(&[0.5, 0.5]).unwrap();
        assert_eq!(first, again);
        assert_eq!(objective.inner_fits(), 1);
    }

    #[test]
    fn constant_test_function_has_no_donsker_gap() {
        let interval = Interval::unit();
        let model = AuxiliaryModel::new(interval, 2.0, 0.1, 1.3, 12, 512).unwrap();
        let truth = two_bump(interval);
        let sampler = CdfSampler::from_spectral(&truth).unwrap();
        let mut rng = stream_rng(5, 0, 0, StreamPurpose::Data);
        let sample = Sample::new(interval, sampler.simulate(&mut rng, 300).unwrap()).unwrap();
        let fit = fit_npml(&model, &sample, &FitOptions::default()).unwrap();
        let quad = unit_quad(256);

        let constant = SpectralFunction::new(interval, vec![2.0]).unwrap();
        let gap = donsker_gap(
            &fit.density,
            &sample,
            |x| truth.eval(x).unwrap(),
            &[constant],
            &quad,
        )
        .unwrap();
        assert!(gap < 1e-8, "gap = {gap}");

        // For any test function the truth terms cancel, leaving
        // √n·|∫ p̂ f − P_n f|; check the literal computation agrees.
        let wavy = SpectralFunction::new(interval, vec![0.3, 0.5, -0.2, 0.1]).unwrap();
        let gap = donsker_gap(
            &fit.density,
            &sample,
            |x| truth.eval(x).unwrap(),
            &[wavy.clone()],
            &quad,
        )
        .unwrap();
        let inner = fit.density.inner_product(&wavy).unwrap();
        let pn: f64 = sample
            .points()
            .iter()
            .map(|&x| wavy.eval(x).unwrap())
            .sum::<f64>()
            / sample.len() as f64;
        let direct = (sample.len() as f64).sqrt() * (inner - pn).abs();
        assert!((gap - direct).abs() < 1e-8, "gap = {gap}, direct = {direct}");
    }

    #[test]
    fn refinement_error_obeys_square_root_bound() {
        let interval = Interval::unit();
        let family = exp_tilt();
        let model = AuxiliaryModel::new(interval, 1.0, 0.1, 1.4, 16, 512).unwrap();
        let quad = unit_quad(128);

        let theta0 = [1.0, -0.5];
        let prepared = family.prepare(&theta0).unwrap();
        let sampler = CdfSampler::from_prepared(&prepared, interval).unwrap();
        let mut data_rng = stream_rng(7, 0, 1, StreamPurpose::Data);
        let sample = Sample::new(interval, sampler.simulate(&mut data_rng, 150).unwrap()).unwrap();
        let fit = fit_npml(&model, &sample, &FitOptions::default()).unwrap();

        let exact = ExactObjective::from_spectral(&family, &fit.density, &quad).unwrap();
        let options = MinimizeOptions {
            grid_per_axis: 7,
            ..MinimizeOptions::default()
        };
        let exact_result = minimize_md(&exact, None, &options).unwrap();

        let mut sim_rng = stream_rng(7, 0, 1, StreamPurpose::Simulation);
        let simulated = SimulatedObjective::new(
            &family,
            &model,
            &fit.density,
            &quad,
            20_000,
            &mut sim_rng,
            FitOptions::default(),
        )
        .unwrap();
        let sim_options = MinimizeOptions {
            grid_per_axis: 5,
            nelder_mead: NelderMeadOptions {
                max_iters: 150,
                tol: 1e-6,
                initial_scale: 0.05,
            },
            ..MinimizeOptions::default()
        };
        let sim_result = minimize_smd(&simulated, None, &sim_options).unwrap();

        let spread = 0.25f64;
        let lo: Vec<f64> = exact_result.theta_hat.iter().map(|t| t - spread).collect();
        let hi: Vec<f64> = exact_result.theta_hat.iter().map(|t| t + spread).collect();
        let cert = certify_square_root_bound(
            &exact,
            &simulated,
            &exact_result.theta_hat,
            &sim_result.theta_hat,
            &lo,
            &hi,
            4,
        )
        .unwrap();
        assert!(cert.curvature > 0.0, "curvature = {}", cert.curvature);
        assert!(
            cert.certified,
            "lhs = {}, rhs = {}, gap = {}",
            cert.lhs, cert.rhs, cert.sup_gap
        );
    }

    #[test]
    fn floor_verification_flags_thin_fits() {
        let interval = Interval::unit();
        let model = AuxiliaryModel::new(interval, 1.0, 0.0, 1.4, 8, 512).unwrap();
        let healthy = SpectralFunction::uniform(interval);
        assert!(verify_floor(&model, &healthy, 0.2).is_ok());
        let thin = SpectralFunction::new(interval, vec![1.0, 0.9]).unwrap();
        assert!(matches!(
            verify_floor(&model, &thin, 0.2),
            Err(SmdError::FloorBelowThreshold { .. })
        ));
    }
}

