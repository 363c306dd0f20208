//! Constrained maximum-likelihood density fitting: projected gradient ascent
//! over the weighted coefficient space, with optional compression of very
//! large samples onto a moment-matched bin grid.

use crate::auxmodel::{AuxiliaryModel, ModelError};
use crate::interval::Interval;
use crate::spectral::{cosine_series, SpectralError, SpectralFunction};
use nalgebra::{Cholesky, DMatrix, DVector};
use std::f64::consts::PI;
use thiserror::Error;

/// Fraction of the predicted ascent an Armijo step must realize.
const ARMIJO_SLOPE: f64 = 1e-4;
const STEP_INIT: f64 = 1.0;
const STEP_GROW: f64 = 2.0;
const STEP_SHRINK: f64 = 0.5;
const STEP_MAX: f64 = 64.0;
const STEP_MIN: f64 = 1e-16;
/// Slack within which a constraint counts as active for the KKT residual.
const ACTIVE_TOL: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("sample is empty")]
    EmptySample,
    #[error("sample point {index} ({x}) lies outside the open interval")]
    PointOutsideInterval { index: usize, x: f64 },
    #[error("sample point {index} is not finite")]
    NonFinitePoint { index: usize },
    #[error("density is not strictly positive at x = {x}")]
    NonPositiveDensity { x: f64 },
    #[error("direction must integrate to zero; got mass {mass}")]
    DirectionNotMassNeutral { mass: f64 },
    #[error("sample and model live on different intervals")]
    SampleIntervalMismatch,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

/// Observations confined to the open interior of an interval.
#[derive(Debug, Clone)]
pub struct Sample {
    interval: Interval,
    points: Vec<f64>,
}

impl Sample {
    pub fn new(interval: Interval, points: Vec<f64>) -> Result<Self, FitError> {
        if points.is_empty() {
            return Err(FitError::EmptySample);
        }
        for (index, &x) in points.iter().enumerate() {
            if !x.is_finite() {
                return Err(FitError::NonFinitePoint { index });
            }
            if !interval.contains_interior(x) {
                return Err(FitError::PointOutsideInterval { index, x });
            }
        }
        Ok(Self { interval, points })
    }

    pub fn interval(&self) -> Interval {
        self.interval
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// A weighted point set standing in for a sample: either the raw points with
/// uniform weights, or a binned compression matching each bin's count and
/// first moment (so integrals of smooth functions are preserved to O(h²)).
#[derive(Debug, Clone)]
pub(crate) struct WeightedPoints {
    pub(crate) x: Vec<f64>,
    pub(crate) w: Vec<f64>,
    /// Count of source points before any compression.
    #[allow(dead_code)]
    pub(crate) total: usize,
}

impl WeightedPoints {
    pub(crate) fn exact(sample: &Sample) -> Self {
        let n = sample.len();
        WeightedPoints {
            x: sample.points().to_vec(),
            w: vec![1.0 / n as f64; n],
            total: n,
        }
    }

    /// Bin interior points onto `bins` equal-width cells, representing each
    /// nonempty cell by its point count and within-cell mean.
    pub(crate) fn binned(interval: Interval, points: impl Iterator<Item = f64>, bins: usize) -> Self {
        let a = interval.a();
        let inv_h = bins as f64 / interval.length();
        let mut count = vec![0usize; bins];
        let mut sum = vec![0.0f64; bins];
        let mut total = 0usize;
        for x in points {
            let idx = (((x - a) * inv_h) as usize).min(bins - 1);
            count[idx] += 1;
            sum[idx] += x;
            total += 1;
        }
        let mut xs = Vec::new();
        let mut ws = Vec::new();
        for (c, s) in count.into_iter().zip(sum) {
            if c > 0 {
                xs.push(s / c as f64);
                ws.push(c as f64 / total as f64);
            }
        }
        WeightedPoints { x: xs, w: ws, total }
    }
}

/// Knobs for [`fit_npml`]; the defaults suit samples up to a few thousand
/// points and near-exact convergence.
#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Plain coefficients used to start the ascent (projected first).
    pub warm_start: Option<Vec<f64>>,
    pub max_iters: usize,
    /// Relative log-likelihood change that counts as no progress.
    pub rel_tol: f64,
    /// Consecutive no-progress iterations before declaring convergence.
    pub patience: usize,
    /// Samples above this size are compressed onto `bins` cells.
    pub bin_threshold: usize,
    pub bins: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            warm_start: None,
            max_iters: 5000,
            rel_tol: 1e-9,
            patience: 5,
            bin_threshold: 50_000,
            bins: 16_384,
        }
    }
}

/// A fitted density with convergence diagnostics.
#[derive(Debug, Clone)]
pub struct NpmlFit {
    pub density: SpectralFunction,
    /// Average log-likelihood over the fitted point set (exact whenever the
    /// sample was not compressed).
    pub loglik: f64,
    /// |‖p̂‖_t − D|: distance of the fitted norm from the cap.
    pub sphere_residual: f64,
    /// Norm of the likelihood gradient minus its best approximation in the
    /// normal cone of the active constraints; near zero at a true maximizer.
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Dimension rule J(n) = ⌈8·n^{1/(2t+1)}⌉ clamped to [16, 256].
pub fn default_dimension(n: usize, t: f64) -> usize {
    let raw = (8.0 * (n as f64).powf(1.0 / (2.0 * t + 1.0))).ceil() as usize;
    raw.clamp(16, 256)
}

/// Maximize the average log-likelihood over the model's constraint set by
/// projected gradient ascent with Armijo backtracking.
pub fn fit_npml(
    model: &AuxiliaryModel,
    sample: &Sample,
    options: &FitOptions,
) -> Result<NpmlFit, FitError> {
    if sample.interval() != model.interval() {
        return Err(FitError::SampleIntervalMismatch);
    }
    let pts = if sample.len() > options.bin_threshold {
        WeightedPoints::binned(sample.interval(), sample.points().iter().copied(), options.bins)
    } else {
        WeightedPoints::exact(sample)
    };
    fit_npml_weighted(model, &pts, options)
}

pub(crate) fn fit_npml_weighted(
    model: &AuxiliaryModel,
    pts: &WeightedPoints,
    options: &FitOptions,
) -> Result<NpmlFit, FitError> {
    let interval = model.interval();
    let dim = model.dim() + 1;
    let mut cosbuf = vec![0.0; dim];

    let uniform_b = {
        let u = model.uniform_density();
        model.to_weighted(u.coeffs())
    };
    let mut b = match &options.warm_start {
        Some(coeffs) => {
            let start = model.project(coeffs)?;
            let wb = model.to_weighted(&start);
            if loglik_core(interval, &model.from_weighted(&wb), pts).is_finite() {
                wb
            } else {
                uniform_b.clone()
            }
        }
        None => uniform_b,
    };
    let mut a = model.from_weighted(&b);
    let mut f_cur = loglik_core(interval, &a, pts);

    let weights = model.weights().to_vec();
    let mut grad = vec![0.0; dim];
    let mut gtilde = vec![0.0; dim];
    let mut step = STEP_INIT;
    let mut streak = 0usize;
    let mut iterations = 0usize;
    let mut converged = false;

    'outer: for _ in 0..options.max_iters {
        iterations += 1;
        gradient_core(interval, &a, pts, &mut grad, &mut cosbuf)?;
        for ((gt, g), w) in gtilde.iter_mut().zip(&grad).zip(&weights) {
            *gt = g / w;
        }
        loop {
            let proposal: Vec<f64> = b.iter().zip(&gtilde).map(|(bi, gi)| bi + step * gi).collect();
            let trial_b = model.project_weighted(&proposal)?;
            let ascent: f64 = gtilde
                .iter()
                .zip(&trial_b)
                .zip(&b)
                .map(|((g, t), c)| g * (t - c))
                .sum();
            let trial_a = model.from_weighted(&trial_b);
            let f_trial = loglik_core(interval, &trial_a, pts);
            if f_trial.is_finite() && f_trial >= f_cur + ARMIJO_SLOPE * ascent {
                let rel = (f_trial - f_cur).abs() / (f_cur.abs() + 1.0);
                b = trial_b;
                a = trial_a;
                f_cur = f_trial;
                step = (step * STEP_GROW).min(STEP_MAX);
                if rel < options.rel_tol {
                    streak += 1;
                    if streak >= options.patience {
                        converged = true;
                        break 'outer;
                    }
                } else {
                    streak = 0;
                }
                break;
            }
            step *= STEP_SHRINK;
            if step < STEP_MIN {
                converged = true;
                break 'outer;
            }
        }
    }

    gradient_core(interval, &a, pts, &mut grad, &mut cosbuf)?;
    for ((gt, g), w) in gtilde.iter_mut().zip(&grad).zip(&weights) {
        *gt = g / w;
    }
    let norm: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let sphere_residual = (norm - model.radius()).abs();
    let kkt_residual = kkt_residual(model, &b, &gtilde);
    let density = SpectralFunction::new(interval, a)?;
    Ok(NpmlFit {
        density,
        loglik: f_cur,
        sphere_residual,
        kkt_residual,
        iterations,
        converged,
    })
}

/// Average log-likelihood over a weighted point set; −∞ when the candidate
/// is not strictly positive at some point.
fn loglik_core(interval: Interval, coeffs: &[f64], pts: &WeightedPoints) -> f64 {
    let l = interval.length();
    let a0 = interval.a();
    let inv_sqrt_l = 1.0 / l.sqrt();
    let amp = (2.0 / l).sqrt();
    let mut acc = 0.0;
    for (&x, &w) in pts.x.iter().zip(&pts.w) {
        let c = (PI * (x - a0) / l).cos();
        let p = cosine_series(coeffs, c, inv_sqrt_l, amp);
        if p <= 0.0 {
            return f64::NEG_INFINITY;
        }
        acc += w * p.ln();
    }
    acc
}

/// Gradient of the average log-likelihood in plain coordinates:
/// ∂/∂a_j = Σ_i w_i e_j(x_i)/p(x_i).
fn gradient_core(
    interval: Interval,
    coeffs: &[f64],
    pts: &WeightedPoints,
    out: &mut [f64],
    cosbuf: &mut [f64],
) -> Result<(), FitError> {
    let l = interval.length();
    let a0 = interval.a();
    let inv_sqrt_l = 1.0 / l.sqrt();
    let amp = (2.0 / l).sqrt();
    out.iter_mut().for_each(|g| *g = 0.0);
    for (&x, &w) in pts.x.iter().zip(&pts.w) {
        let c = (PI * (x - a0) / l).cos();
        cosbuf[0] = inv_sqrt_l;
        let mut prev = 1.0f64;
        let mut cur = c;
        for slot in cosbuf[1..].iter_mut() {
            *slot = amp * cur;
            let next = 2.0 * c * cur - prev;
            prev = cur;
            cur = next;
        }
        let p: f64 = coeffs.iter().zip(cosbuf.iter()).map(|(a, e)| a * e).sum();
        if p <= 0.0 {
            return Err(FitError::NonPositiveDensity { x });
        }
        let scale = w / p;
        for (g, e) in out.iter_mut().zip(cosbuf.iter()) {
            *g += scale * e;
        }
    }
    Ok(())
}

/// Distance from the weighted-coordinate gradient to the normal cone of the
/// active constraints. The mass multiplier absorbs coordinate zero, so the
/// cone fit runs on the tail block only.
fn kkt_residual(model: &AuxiliaryModel, b: &[f64], gtilde: &[f64]) -> f64 {
    let tail = &gtilde[1..];
    let norm: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    if norm >= model.radius() - ACTIVE_TOL {
        cols.push(b[1..].to_vec());
    }
    for g in 0..model.grid_size() {
        if model.floor_value(g, b) <= model.zeta() + ACTIVE_TOL {
            cols.push(model.eta_row(g)[1..].iter().map(|e| -e).collect());
        }
    }
    if cols.is_empty() {
        return tail.iter().map(|v| v * v).sum::<f64>().sqrt();
    }
    nnls_residual(&cols, tail)
}

/// Residual norm of min_{x ≥ 0} ‖Σ_c x_c·col_c − y‖ (Lawson–Hanson).
fn nnls_residual(cols: &[Vec<f64>], y: &[f64]) -> f64 {
    let n = y.len();
    let k = cols.len();
    let mut x = vec![0.0f64; k];
    let mut passive: Vec<usize> = Vec::new();
    let mut resid = y.to_vec();
    let resid_norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();
    for _ in 0..(3 * k + 10) {
        let mut best = (usize::MAX, 1e-12);
        for (c, col) in cols.iter().enumerate() {
            if passive.contains(&c) {
                continue;
            }
            let w: f64 = col.iter().zip(&resid).map(|(a, r)| a * r).sum();
            if w > best.1 {
                best = (c, w);
            }
        }
        if best.0 == usize::MAX {
            break;
        }
        passive.push(best.0);
        loop {
            let m = passive.len();
            let gram = DMatrix::from_fn(m, m, |i, j| {
                cols[passive[i]]
                    .iter()
                    .zip(&cols[passive[j]])
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            });
            let rhs = DVector::from_iterator(
                m,
                passive
                    .iter()
                    .map(|&c| cols[c].iter().zip(y).map(|(a, b)| a * b).sum::<f64>()),
            );
            let Some(chol) = Cholesky::new(gram) else {
                passive.pop();
                break;
            };
            let z = chol.solve(&rhs);
            if z.iter().all(|&v| v > 0.0) {
                for (i, &c) in passive.iter().enumerate() {
                    x[c] = z[i];
                }
                break;
            }
            let mut alpha = f64::INFINITY;
            for (i, &c) in passive.iter().enumerate() {
                if z[i] <= 0.0 {
                    let denom = x[c] - z[i];
                    if denom > 0.0 {
                        alpha = alpha.min(x[c] / denom);
                    }
                }
            }
            if !alpha.is_finite() {
                passive.pop();
                break;
            }
            for (i, &c) in passive.iter().enumerate() {
                x[c] += alpha * (z[i] - x[c]);
            }
            passive.retain(|&c| x[c] > 1e-14);
        }
        for r in resid.iter_mut().take(n) {
            *r = 0.0;
        }
        for (i, r) in resid.iter_mut().enumerate() {
            *r = y[i];
            for (c, col) in cols.iter().enumerate() {
                if x[c] != 0.0 {
                    *r -= x[c] * col[i];
                }
            }
        }
    }
    resid_norm(&resid)
}

/// Exact average log-likelihood of `density` over `sample`; −∞ when the
/// density is not strictly positive at some sample point.
pub fn empirical_loglik(density: &SpectralFunction, sample: &Sample) -> Result<f64, FitError> {
    if density.interval() != sample.interval() {
        return Err(FitError::SampleIntervalMismatch);
    }
    let pts = WeightedPoints::exact(sample);
    Ok(loglik_core(sample.interval(), density.coeffs(), &pts))
}

/// Exact gradient of the average log-likelihood with respect to the plain
/// coefficients of `density`.
pub fn loglik_gradient(density: &SpectralFunction, sample: &Sample) -> Result<Vec<f64>, FitError> {
    if density.interval() != sample.interval() {
        return Err(FitError::SampleIntervalMismatch);
    }
    let pts = WeightedPoints::exact(sample);
    let mut out = vec![0.0; density.coeffs().len()];
    let mut cosbuf = vec![0.0; density.coeffs().len()];
    gradient_core(sample.interval(), density.coeffs(), &pts, &mut out, &mut cosbuf)?;
    Ok(out)
}

/// Worst first-order residual of a fit over a set of mass-neutral test
/// directions: max over g of |P_n(g/p̂)|.
pub fn score_at_maximizer(
    fit: &NpmlFit,
    sample: &Sample,
    test_fns: &[SpectralFunction],
) -> Result<f64, FitError> {
    let mut worst = 0.0f64;
    for g in test_fns {
        worst = worst.max(empirical_score(&fit.density, sample, g)?.abs());
    }
    Ok(worst)
}

/// Directional derivative of the average log-likelihood at `density` along a
/// mass-neutral `direction`: P_n(direction/density). Directions carrying mass
/// leave the unit-mass constraint set and are rejected.
pub fn empirical_score(
    density: &SpectralFunction,
    sample: &Sample,
    direction: &SpectralFunction,
) -> Result<f64, FitError> {
    if density.interval() != sample.interval() || direction.interval() != sample.interval() {
        return Err(FitError::SampleIntervalMismatch);
    }
    let mass = direction.integrate();
    if mass.abs() > 1e-8 {
        return Err(FitError::DirectionNotMassNeutral { mass });
    }
    let mut acc = 0.0;
    let w = 1.0 / sample.len() as f64;
    for &x in sample.points() {
        let p = density.eval_unchecked(x);
        if p <= 0.0 {
            return Err(FitError::NonPositiveDensity { x });
        }
        acc += w * direction.eval_unchecked(x) / p;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::{RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_uniform(rng: &mut ChaCha8Rng) -> f64 {
        ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / 9007199254740992.0)
    }

    /// Points from density 1 + 0.6·cos(πx) on (0,1) via Newton on the CDF.
    fn cosine_bump_points(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let u = unit_uniform(&mut rng);
                let mut x = u;
                for _ in 0..60 {
                    let f = x + 0.6 / PI * (PI * x).sin() - u;
                    let d = 1.0 + 0.6 * (PI * x).cos();
                    let next = (x - f / d).clamp(1e-12, 1.0 - 1e-12);
                    if (next - x).abs() < 1e-14 {
                        x = next;
                        break;
                    }
                    x = next;
                }
                x
            })
            .collect()
    }

    #[test]
    fn sample_validation() {
        let iv = Interval::unit();
        assert!(matches!(
            Sample::new(iv, vec![]),
            Err(FitError::EmptySample)
        ));
        assert!(matches!(
            Sample::new(iv, vec![0.5, 1.0]),
            Err(FitError::PointOutsideInterval { index: 1, .. })
        ));
        assert!(matches!(
            Sample::new(iv, vec![0.5, f64::NAN]),
            Err(FitError::NonFinitePoint { index: 1 })
        ));
        assert_eq!(Sample::new(iv, vec![0.25, 0.5]).unwrap().len(), 2);
    }

    #[test]
    fn binning_preserves_mass_and_mean() {
        let iv = Interval::unit();
        let points = cosine_bump_points(5000, 7);
        let mean: f64 = points.iter().sum::<f64>() / points.len() as f64;
        let binned = WeightedPoints::binned(iv, points.iter().copied(), 512);
        let wsum: f64 = binned.w.iter().sum();
        let bmean: f64 = binned.x.iter().zip(&binned.w).map(|(x, w)| x * w).sum();
        assert!((wsum - 1.0).abs() < 1e-12);
        assert!((bmean - mean).abs() < 1e-12);
        assert_eq!(binned.total, 5000);
        assert!(binned.x.len() <= 512);
    }

    #[test]
    fn default_dimension_rule() {
        assert_eq!(default_dimension(200, 2.0), 24);
        assert_eq!(default_dimension(1, 1.0), 16);
        assert_eq!(default_dimension(1_000_000, 1.0), 256);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let iv = Interval::unit();
        let sample = Sample::new(iv, cosine_bump_points(40, 3)).unwrap();
        let coeffs = vec![1.0, 0.2, -0.1, 0.05, 0.02];
        let f = SpectralFunction::new(iv, coeffs.clone()).unwrap();
        let grad = loglik_gradient(&f, &sample).unwrap();
        let h = 1e-6;
        for j in 0..coeffs.len() {
            let mut up = coeffs.clone();
            up[j] += h;
            let mut dn = coeffs.clone();
            dn[j] -= h;
            let fu = empirical_loglik(&SpectralFunction::new(iv, up).unwrap(), &sample).unwrap();
            let fd = empirical_loglik(&SpectralFunction::new(iv, dn).unwrap(), &sample).unwrap();
            let approx = (fu - fd) / (2.0 * h);
            assert!(
                (grad[j] - approx).abs() < 1e-5,
                "coefficient {j}: {} vs {approx}",
                grad[j]
            );
        }
    }

    #[test]
    fn tiny_instance_matches_grid_oracle() {
        let iv = Interval::unit();
        let model = AuxiliaryModel::new(iv, 1.0, 0.0, 1.15, 2, 256).unwrap();
        let sample = Sample::new(iv, vec![0.2, 0.5, 0.9]).unwrap();
        // Exhaustive search over plain coefficients (a1, a2) on a 1e-3 grid;
        // a0 is pinned by unit mass. The cap keeps every candidate positive.
        let step = 1e-3;
        let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
        let w1sq = 1.0 + PI * PI;
        let w2sq = 1.0 + 4.0 * PI * PI;
        let cap = model.radius() * model.radius() - 1.0;
        let max1 = (cap / w1sq).sqrt();
        let mut a1 = -max1;
        while a1 <= max1 {
            let rem = cap - w1sq * a1 * a1;
            if rem >= 0.0 {
                let max2 = (rem / w2sq).sqrt();
                let mut a2 = -max2;
                while a2 <= max2 {
                    let f = SpectralFunction::new(iv, vec![1.0, a1, a2]).unwrap();
                    let ll = empirical_loglik(&f, &sample).unwrap();
                    if ll > best.0 {
                        best = (ll, a1, a2);
                    }
                    a2 += step;
                }
            }
            a1 += step;
        }
        let fit = fit_npml(&model, &sample, &FitOptions::default()).unwrap();
        assert!(fit.converged);
        assert!(
            fit.loglik >= best.0 - 1e-5,
            "fit {} vs oracle {}",
            fit.loglik,
            best.0
        );
        assert!((fit.loglik - best.0).abs() < 2e-3);
        let a = fit.density.coeffs();
        assert!((a[1] - best.1).abs() < 5e-3, "{} vs {}", a[1], best.1);
        assert!((a[2] - best.2).abs() < 5e-3, "{} vs {}", a[2], best.2);
    }

    #[test]
    fn fit_lands_on_sphere_with_small_kkt_residual() {
        let iv = Interval::unit();
        let model = AuxiliaryModel::new(iv, 2.0, 0.1, 1.3, 8, 128).unwrap();
        let sample = Sample::new(iv, cosine_bump_points(200, 11)).unwrap();
        let fit = fit_npml(&model, &sample, &FitOptions::default()).unwrap();
        assert!(fit.converged, "no convergence in {} iterations", fit.iterations);
        assert!(
            fit.sphere_residual <= 1e-8 * model.radius(),
            "sphere residual {}",
            fit.sphere_residual
        );
        assert!(fit.kkt_residual < 1e-4, "kkt residual {}", fit.kkt_residual);
        let member = model.is_member(&fit.density, 1e-7).unwrap();
        assert!(member.is_member, "{member:?}");
        // The gradient itself is far from zero; only its cone distance is small.
        let grad = loglik_gradient(&fit.density, &sample).unwrap();
        let gnorm: f64 = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(gnorm > 100.0 * fit.kkt_residual);
    }

    #[test]
    fn floors_skipped_when_cap_implies_them() {
        let iv = Interval::unit();
        let model = AuxiliaryModel::new(iv, 2.0, 0.5, 1.02, 6, 64).unwrap();
        assert!(model.zeta() <= model.floor_collapse_threshold());
        let sample = Sample::new(iv, cosine_bump_points(100, 5)).unwrap();
        let fit = fit_npml(&model, &sample, &FitOptions::default()).unwrap();
        let member = model.is_member(&fit.density, 1e-9).unwrap();
        assert!(member.is_member, "{member:?}");
        assert!(member.grid_min >= model.zeta());
    }

    #[test]
    fn warm_start_reaches_same_optimum() {
        let iv = Interval::unit();
        let model = AuxiliaryModel::new(iv, 2.0, 0.1, 1.3, 8, 128).unwrap();
        let sample = Sample::new(iv, cosine_bump_points(150, 19)).unwrap();
        let cold = fit_npml(&model, &sample, &FitOptions::default()).unwrap();
        let mut warm_coeffs = cold.density.coeffs().to_vec();
        for (j, c) in warm_coeffs.iter_mut().enumerate() {
            *c += 0.02 / (1.0 + j as f64);
        }
        let warm = fit_npml(
            &model,
            &sample,
            &FitOptions {
                warm_start: Some(warm_coeffs),
                ..FitOptions::default()
            },
        )
        .unwrap();
        assert!((warm.loglik - cold.loglik).abs() < 1e-6);
        let dist: f64 = warm
            .density
            .coeffs()
            .iter()
            .zip(cold.density.coeffs())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(dist < 1e-3, "coefficient distance {dist}");
    }

    #[test]
    fn binned_fit_tracks_exact_fit() {
        let iv = Interval::unit();
        let model = AuxiliaryModel::new(iv, 2.0, 0.1, 1.3, 8, 128).unwrap();
        let points = cosine_bump_points(4000, 23);
        let sample = Sample::new(iv, points).unwrap();
        let exact = fit_npml(&model, &sample, &FitOptions::default()).unwrap();
        let binned = fit_npml(
            &model,
            &sample,
            &FitOptions {
                bin_threshold: 0,
                bins: 4096,
                ..FitOptions::default()
            },
        )
        .unwrap();
        let ll_exact = empirical_loglik(&exact.density, &sample).unwrap();
        let ll_binned = empirical_loglik(&binned.density, &sample).unwrap();
        assert!((ll_exact - ll_binned).abs() < 1e-4);
        let sup = (0..=200)
            .map(|i| {
                let x = i as f64 / 200.0;
                (exact.density.eval_unchecked(x) - binned.density.eval_unchecked(x)).abs()
            })
            .fold(0.0f64, f64::max);
        assert!(sup < 1e-2, "sup distance {sup}");
    }

    #[test]
    fn score_identity_along_centered_fit_direction() {
        let iv = Interval::unit();
        let model = AuxiliaryModel::new(iv, 2.0, 0.1, 1.3, 8, 128).unwrap();
        let sample = Sample::new(iv, cosine_bump_points(120, 31)).unwrap();
        let fit = fit_npml(&model, &sample, &FitOptions::default()).unwrap();
        let direction = fit.density.sub(&model.uniform_density()).unwrap();
        let left = empirical_score(&fit.density, &sample, &direction).unwrap();
        // P_n((p̂ − u)/p̂) = 1 − (1/L)·P_n(1/p̂) with u the uniform height.
        let mean_inv: f64 = sample
            .points()
            .iter()
            .map(|&x| 1.0 / fit.density.eval_unchecked(x))
            .sum::<f64>()
            / sample.len() as f64;
        let right = 1.0 - mean_inv / iv.length();
        assert!((left - right).abs() < 1e-12, "{left} vs {right}");
    }

    #[test]
    fn score_rejects_directions_with_mass() {
        let iv = Interval::unit();
        let sample = Sample::new(iv, vec![0.3, 0.6]).unwrap();
        let density = SpectralFunction::uniform(iv);
        let direction = SpectralFunction::new(iv, vec![0.5]).unwrap();
        assert!(matches!(
            empirical_score(&density, &sample, &direction),
            Err(FitError::DirectionNotMassNeutral { .. })
        ));
    }
}

