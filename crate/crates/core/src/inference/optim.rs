//! Derivative-free simplex (Nelder-Mead) ascent for the hyperparameter
//! posterior. Deterministic: fixed tie-breaking, no randomness.

#[derive(Debug, Clone, Copy)]
pub struct SimplexOptions {
    /// stop when the simplex objective spread falls below this
    pub ftol: f64,
    pub max_iter: usize,
    /// initial per-coordinate displacement building the start simplex
    pub init_step: f64,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        SimplexOptions {
            ftol: 1e-4,
            max_iter: 500,
            init_step: 0.3,
        }
    }
}

/// Maximize `f` from `init`; returns (argmax, max, evaluations). Non-finite
/// objective values are treated as negative infinity.
pub fn maximize(
    mut f: impl FnMut(&[f64]) -> f64,
    init: &[f64],
    opts: &SimplexOptions,
) -> (Vec<f64>, f64, usize) {
    let n = init.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| -> f64 {
        *evals += 1;
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::NEG_INFINITY
        }
    };

    // simplex of n+1 points
    let mut pts: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    pts.push(init.to_vec());
    for i in 0..n {
        let mut p = init.to_vec();
        p[i] += opts.init_step;
        pts.push(p);
    }
    let mut vals: Vec<f64> = pts.iter().map(|p| eval(p, &mut evals)).collect();

    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    for _ in 0..opts.max_iter {
        // sort descending by objective (best first), stable for determinism
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).unwrap_or(std::cmp::Ordering::Equal));
        let pts_s: Vec<Vec<f64>> = order.iter().map(|&i| pts[i].clone()).collect();
        let vals_s: Vec<f64> = order.iter().map(|&i| vals[i]).collect();
        pts = pts_s;
        vals = vals_s;

        let best = vals[0];
        let worst = vals[n];
        if best.is_finite() && worst.is_finite() && (best - worst).abs() < opts.ftol {
            break;
        }

        // centroid of all but the worst
        let mut centroid = vec![0.0; n];
        for p in pts.iter().take(n) {
            for k in 0..n {
                centroid[k] += p[k] / n as f64;
            }
        }

        let blend = |t: f64| -> Vec<f64> {
            (0..n)
                .map(|k| centroid[k] + t * (centroid[k] - pts[n][k]))
                .collect()
        };

        let xr = blend(alpha);
        let fr = eval(&xr, &mut evals);
        if fr > vals[0] {
            let xe = blend(gamma);
            let fe = eval(&xe, &mut evals);
            if fe > fr {
                pts[n] = xe;
                vals[n] = fe;
            } else {
                pts[n] = xr;
                vals[n] = fr;
            }
        } else if fr > vals[n - 1] {
            pts[n] = xr;
            vals[n] = fr;
        } else {
            let xc = blend(-rho);
            let fc = eval(&xc, &mut evals);
            if fc > vals[n] {
                pts[n] = xc;
                vals[n] = fc;
            } else {
                // shrink toward the best point
                for i in 1..=n {
                    for k in 0..n {
                        pts[i][k] = pts[0][k] + sigma * (pts[i][k] - pts[0][k]);
                    }
                    vals[i] = eval(&pts[i].clone(), &mut evals);
                }
            }
        }
    }

    let mut best_i = 0;
    for i in 1..=n {
        if vals[i] > vals[best_i] {
            best_i = i;
        }
    }
    (pts[best_i].clone(), vals[best_i], evals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn finds_quadratic_maximum() {
        let f = |x: &[f64]| -(x[0] - 1.5).powi(2) - 2.0 * (x[1] + 0.5).powi(2);
        let (xm, fm, _) = maximize(
            f,
            &[0.0, 0.0],
            &SimplexOptions {
                ftol: 1e-10,
                max_iter: 2000,
                init_step: 0.5,
            },
        );
        assert_abs_diff_eq!(xm[0], 1.5, epsilon = 1e-4);
        assert_abs_diff_eq!(xm[1], -0.5, epsilon = 1e-4);
        assert!(fm > -1e-8);
    }

    #[test]
    fn handles_non_finite_regions() {
        // objective undefined left of x = 0
        let f = |x: &[f64]| {
            if x[0] <= 0.0 {
                f64::NAN
            } else {
                -(x[0].ln()).powi(2)
            }
        };
        let (xm, _, _) = maximize(f, &[3.0], &SimplexOptions::default());
        assert_abs_diff_eq!(xm[0], 1.0, epsilon = 1e-2);
    }

    #[test]
    fn deterministic() {
        let f = |x: &[f64]| -(x[0]).powi(2) - (x[1] - 2.0).powi(4);
        let a = maximize(f, &[1.0, 1.0], &SimplexOptions::default());
        let b = maximize(f, &[1.0, 1.0], &SimplexOptions::default());
        assert_eq!(a.0, b.0);
        assert_eq!(a.2, b.2);
    }
}
