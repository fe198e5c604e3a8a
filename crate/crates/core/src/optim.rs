//! Derivative-free simplex minimization.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimplexOptions {
    pub max_iter: usize,
    /// Converged when `max f - min f` over the simplex drops below this.
    pub f_tol: f64,
    /// Edge length of the initial simplex.
    pub initial_step: f64,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        Self { max_iter: 2000, f_tol: 1e-10, initial_step: 0.25 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimplexResult<const N: usize> {
    pub x: [f64; N],
    pub f: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

/// Nelder–Mead with standard coefficients (reflection 1, expansion 2,
/// contraction ½, shrink ½). Non-finite objective values are treated as +∞.
pub fn nelder_mead<const N: usize, F>(mut f: F, x0: [f64; N], opts: SimplexOptions) -> SimplexResult<N>
where
    F: FnMut(&[f64; N]) -> f64,
{
    let mut evals = 0usize;
    let mut eval = |x: &[f64; N]| {
        evals += 1;
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };

    let mut pts: Vec<[f64; N]> = Vec::with_capacity(N + 1);
    pts.push(x0);
    for i in 0..N {
        let mut p = x0;
        p[i] += opts.initial_step;
        pts.push(p);
    }
    let mut vals: Vec<f64> = pts.iter().map(&mut eval).collect();

    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iter {
        let mut order: Vec<usize> = (0..=N).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        pts = order.iter().map(|&i| pts[i]).collect();
        vals = order.iter().map(|&i| vals[i]).collect();

        if (vals[N] - vals[0]).abs() < opts.f_tol {
            converged = true;
            break;
        }
        iterations += 1;

        let mut centroid = [0.0; N];
        for p in &pts[..N] {
            for k in 0..N {
                centroid[k] += p[k] / N as f64;
            }
        }
        let along = |t: f64| -> [f64; N] { std::array::from_fn(|k| centroid[k] + t * (pts[N][k] - centroid[k])) };

        let xr = along(-1.0);
        let fr = eval(&xr);
        if fr < vals[0] {
            let xe = along(-2.0);
            let fe = eval(&xe);
            if fe < fr {
                pts[N] = xe;
                vals[N] = fe;
            } else {
                pts[N] = xr;
                vals[N] = fr;
            }
            continue;
        }
        if fr < vals[N - 1] {
            pts[N] = xr;
            vals[N] = fr;
            continue;
        }
        let (xc, fc) = if fr < vals[N] {
            let xc = along(-0.5);
            (xc, eval(&xc))
        } else {
            let xc = along(0.5);
            (xc, eval(&xc))
        };
        if fc < vals[N].min(fr) {
            pts[N] = xc;
            vals[N] = fc;
            continue;
        }
        let best = pts[0];
        for i in 1..=N {
            for k in 0..N {
                pts[i][k] = best[k] + 0.5 * (pts[i][k] - best[k]);
            }
            vals[i] = eval(&pts[i]);
        }
    }
    let best = (0..=N).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap_or(0);
    SimplexResult { x: pts[best], f: vals[best], iterations, evaluations: evals, converged }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let r = nelder_mead(
            |x: &[f64; 2]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2),
            [-1.2, 1.0],
            SimplexOptions { max_iter: 5000, f_tol: 1e-14, initial_step: 0.5 },
        );
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-4 && (r.x[1] - 1.0).abs() < 1e-4, "{:?}", r.x);
    }

    #[test]
    fn quadratic_3d() {
        let r = nelder_mead(
            |x: &[f64; 3]| (x[0] - 0.3).powi(2) + 10.0 * (x[1] + 0.5).powi(2) + 100.0 * (x[2] - 0.8).powi(2),
            [0.0; 3],
            SimplexOptions::default(),
        );
        assert!(r.converged);
        for (a, b) in r.x.iter().zip([0.3, -0.5, 0.8]) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn infinite_region_is_avoided() {
        let r = nelder_mead(
            |x: &[f64; 1]| if x[0] < 0.0 { f64::NAN } else { (x[0] - 0.1).powi(2) },
            [0.5],
            SimplexOptions::default(),
        );
        assert!((r.x[0] - 0.1).abs() < 1e-4);
    }

    #[test]
    fn iteration_cap() {
        let r = nelder_mead(|x: &[f64; 2]| x[0] + x[1], [0.0, 0.0], SimplexOptions { max_iter: 10, ..Default::default() });
        assert!(!r.converged);
        assert_eq!(r.iterations, 10);
    }
}
