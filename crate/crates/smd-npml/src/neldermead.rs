//! Box-constrained Nelder–Mead minimization; candidates are clamped into the
//! box, so the simplex never leaves it.

#[derive(Debug, Clone)]
pub struct NelderMeadOptions {
    pub max_iters: usize,
    /// Stop when both the value spread and the coordinate spread of the
    /// simplex fall below this.
    pub tol: f64,
    /// Initial simplex edge as a fraction of each box side.
    pub initial_scale: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        NelderMeadOptions {
            max_iters: 500,
            tol: 1e-6,
            initial_scale: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
    pub iterations: usize,
    pub converged: bool,
}

fn clamp_into(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((xi, &l), &h) in x.iter_mut().zip(lo).zip(hi) {
        *xi = xi.clamp(l, h);
    }
}

/// Minimize `f` over the box [lo, hi] starting at `start` (clamped). Panics
/// if the dimensions disagree or the box is empty in some coordinate.
pub fn nelder_mead(
    mut f: impl FnMut(&[f64]) -> f64,
    start: &[f64],
    lo: &[f64],
    hi: &[f64],
    options: &NelderMeadOptions,
) -> NelderMeadResult {
    let dim = start.len();
    assert_eq!(lo.len(), dim);
    assert_eq!(hi.len(), dim);
    assert!(dim >= 1, "need at least one coordinate");
    assert!(lo.iter().zip(hi).all(|(l, h)| l < h), "empty box");

    let mut evaluations = 0usize;
    let mut eval = |x: &[f64]| {
        evaluations += 1;
        f(x)
    };

    // Simplex of dim+1 vertices, started along the coordinate axes.
    let mut vertices: Vec<Vec<f64>> = Vec::with_capacity(dim + 1);
    let mut base = start.to_vec();
    clamp_into(&mut base, lo, hi);
    vertices.push(base.clone());
    for i in 0..dim {
        let mut v = base.clone();
        let side = options.initial_scale * (hi[i] - lo[i]);
        v[i] = if v[i] + side <= hi[i] { v[i] + side } else { v[i] - side };
        vertices.push(v);
    }
    let mut values: Vec<f64> = vertices.iter().map(|v| eval(v)).collect();

    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut iterations = 0usize;
    let mut converged = false;
    for _ in 0..options.max_iters {
        iterations += 1;
        // Order vertices by value.
        let mut order: Vec<usize> = (0..=dim).collect();
        order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(std::cmp::Ordering::Equal));
        let best = order[0];
        let worst = order[dim];
        let second_worst = order[dim - 1];

        let value_spread = values[worst] - values[best];
        let coord_spread = (0..dim)
            .map(|i| {
                let lo_v = vertices.iter().map(|v| v[i]).fold(f64::INFINITY, f64::min);
                let hi_v = vertices.iter().map(|v| v[i]).fold(f64::NEG_INFINITY, f64::max);
                hi_v - lo_v
            })
            .fold(0.0f64, f64::max);
        if value_spread.abs() <= options.tol && coord_spread <= options.tol {
            converged = true;
            break;
        }

        // Centroid of all but the worst.
        let mut centroid = vec![0.0; dim];
        for (vi, v) in vertices.iter().enumerate() {
            if vi != worst {
                for (c, x) in centroid.iter_mut().zip(v) {
                    *c += x / dim as f64;
                }
            }
        }

        let mut reflected: Vec<f64> = centroid
            .iter()
            .zip(&vertices[worst])
            .map(|(c, w)| c + alpha * (c - w))
            .collect();
        clamp_into(&mut reflected, lo, hi);
        let f_reflected = eval(&reflected);

        if f_reflected < values[best] {
            let mut expanded: Vec<f64> = centroid
                .iter()
                .zip(&reflected)
                .map(|(c, r)| c + gamma * (r - c))
                .collect();
            clamp_into(&mut expanded, lo, hi);
            let f_expanded = eval(&expanded);
            if f_expanded < f_reflected {
                vertices[worst] = expanded;
                values[worst] = f_expanded;
            } else {
                vertices[worst] = reflected;
                values[worst] = f_reflected;
            }
        } else if f_reflected < values[second_worst] {
            vertices[worst] = reflected;
            values[worst] = f_reflected;
        } else {
            let mut contracted: Vec<f64> = if f_reflected < values[worst] {
                centroid
                    .iter()
                    .zip(&reflected)
                    .map(|(c, r)| c + rho * (r - c))
                    .collect()
            } else {
                centroid
                    .iter()
                    .zip(&vertices[worst])
                    .map(|(c, w)| c + rho * (w - c))
                    .collect()
            };
            clamp_into(&mut contracted, lo, hi);
            let f_contracted = eval(&contracted);
            if f_contracted < values[worst].min(f_reflected) {
                vertices[worst] = contracted;
                values[worst] = f_contracted;
            } else {
                // Shrink toward the best vertex.
                let best_v = vertices[best].clone();
                for vi in 0..=dim {
                    if vi == best {
                        continue;
                    }
                    for (x, b) in vertices[vi].iter_mut().zip(&best_v) {
                        *x = b + sigma * (*x - b);
                    }
                    clamp_into(&mut vertices[vi], lo, hi);
                    values[vi] = eval(&vertices[vi]);
                }
            }
        }
    }

    let mut best_idx = 0;
    for i in 1..=dim {
        if values[i] < values[best_idx] {
            best_idx = i;
        }
    }
    NelderMeadResult {
        x: vertices[best_idx].clone(),
        value: values[best_idx],
        evaluations,
        iterations,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_interior_quadratic_minimum() {
        let f = |x: &[f64]| (x[0] - 0.3).powi(2) + 2.0 * (x[1] + 0.7).powi(2);
        let r = nelder_mead(
            f,
            &[0.0, 0.0],
            &[-2.0, -2.0],
            &[2.0, 2.0],
            &NelderMeadOptions::default(),
        );
        assert!(r.converged);
        assert!((r.x[0] - 0.3).abs() < 1e-4, "{:?}", r.x);
        assert!((r.x[1] + 0.7).abs() < 1e-4, "{:?}", r.x);
    }

    #[test]
    fn respects_box_when_minimum_outside() {
        let f = |x: &[f64]| (x[0] - 5.0).powi(2);
        let r = nelder_mead(
            f,
            &[0.0],
            &[-1.0],
            &[1.0],
            &NelderMeadOptions::default(),
        );
        assert!((r.x[0] - 1.0).abs() < 1e-6, "{:?}", r.x);
    }

    #[test]
    fn handles_banana_valley() {
        let f = |x: &[f64]| {
            let a = 1.0 - x[0];
            let b = x[1] - x[0] * x[0];
            a * a + 100.0 * b * b
        };
        let r = nelder_mead(
            f,
            &[-1.2, 1.0],
            &[-2.0, -2.0],
            &[2.0, 2.0],
            &NelderMeadOptions {
                max_iters: 2000,
                tol: 1e-10,
                initial_scale: 0.05,
            },
        );
        assert!((r.x[0] - 1.0).abs() < 1e-3 && (r.x[1] - 1.0).abs() < 1e-3, "{:?}", r.x);
    }

    #[test]
    fn never_evaluates_outside_box() {
        let f = |x: &[f64]| {
            assert!((-1.0..=1.0).contains(&x[0]), "outside box: {}", x[0]);
            x[0] * x[0]
        };
        let r = nelder_mead(
            f,
            &[0.9],
            &[-1.0],
            &[1.0],
            &NelderMeadOptions::default(),
        );
        assert!(r.x[0].abs() < 1e-4);
    }
}
