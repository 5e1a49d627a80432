//! Unconstrained minimizers: Nelder–Mead and BFGS with backtracking.

/// Stopping rules shared by both minimizers.
#[derive(Debug, Clone, Copy)]
pub struct StopRule {
    pub max_evals: usize,
    /// Relative objective change regarded as "no progress".
    pub rel_tol: f64,
    /// Consecutive iterations without progress before stopping.
    pub stall_iters: usize,
}

impl Default for StopRule {
    fn default() -> Self {
        StopRule { max_evals: 10_000, rel_tol: 1e-9, stall_iters: 5 }
    }
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub n_iter: usize,
    pub n_evals: usize,
    pub converged: bool,
    pub trace: Vec<f64>,
}

fn small_change(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}

/// Nelder–Mead simplex search. Non-finite objective values are treated as +∞.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(mut f: F, x0: &[f64], step: &[f64], rule: StopRule) -> OptimResult {
    let n = x0.len();
    let mut evals = 0;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let f0 = eval(x0, &mut evals);
    simplex.push((x0.to_vec(), f0));
    for k in 0..n {
        let mut x = x0.to_vec();
        x[k] += if step[k] != 0.0 { step[k] } else { 1e-3 };
        let fx = eval(&x, &mut evals);
        simplex.push((x, fx));
    }
    let mut trace = Vec::new();
    let mut iter = 0;
    let mut stall = 0;
    let mut converged = false;
    while evals < rule.max_evals {
        iter += 1;
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        trace.push(best);
        let worst = simplex[n].1;
        if best.is_finite() && small_change(best, worst, rule.rel_tol) {
            stall += 1;
            if stall >= rule.stall_iters {
                converged = true;
                break;
            }
        } else {
            stall = 0;
        }
        let centroid: Vec<f64> =
            (0..n).map(|k| simplex[..n].iter().map(|s| s.0[k]).sum::<f64>() / n as f64).collect();
        let along = |t: f64| -> Vec<f64> { (0..n).map(|k| centroid[k] + t * (simplex[n].0[k] - centroid[k])).collect() };
        let xr = along(-1.0);
        let fr = eval(&xr, &mut evals);
        if fr < simplex[0].1 {
            let xe = along(-2.0);
            let fe = eval(&xe, &mut evals);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < simplex[n].1 {
                let xc = along(-0.5);
                let fc = eval(&xc, &mut evals);
                (xc, fc)
            } else {
                let xc = along(0.5);
                let fc = eval(&xc, &mut evals);
                (xc, fc)
            };
            if fc < simplex[n].1.min(fr) {
                simplex[n] = (xc, fc);
            } else {
                let x_best = simplex[0].0.clone();
                for s in simplex.iter_mut().skip(1) {
                    let x: Vec<f64> = (0..n).map(|k| x_best[k] + 0.5 * (s.0[k] - x_best[k])).collect();
                    let fx = eval(&x, &mut evals);
                    *s = (x, fx);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, fx) = simplex.swap_remove(0);
    OptimResult { x, f: fx, n_iter: iter, n_evals: evals, converged, trace }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// BFGS on an objective returning `(value, gradient)`; `None` marks an
/// infeasible or non-finite point.
pub fn bfgs<F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>>(mut fg: F, x0: &[f64], rule: StopRule) -> OptimResult {
    let n = x0.len();
    let mut evals = 1;
    let mut trace = Vec::new();
    let Some((mut f, mut g)) = fg(x0).filter(|(v, g)| v.is_finite() && g.iter().all(|x| x.is_finite())) else {
        return OptimResult { x: x0.to_vec(), f: f64::INFINITY, n_iter: 0, n_evals: 1, converged: false, trace };
    };
    let mut x = x0.to_vec();
    let mut h = vec![0.0; n * n];
    let reset = |h: &mut [f64], scale: f64| {
        h.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..n {
            h[k * n + k] = scale;
        }
    };
    let gmax = g.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    reset(&mut h, if gmax > 1.0 { 1.0 / gmax } else { 1.0 });
    let mut stall = 0;
    let mut iter = 0;
    let mut converged = false;
    let mut fresh = true;
    while evals < rule.max_evals {
        iter += 1;
        trace.push(f);
        let gnorm = g.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if gnorm <= 1e-12 * f.abs().max(1.0) {
            converged = true;
            break;
        }
        let mut d: Vec<f64> = (0..n).map(|i| -(0..n).map(|j| h[i * n + j] * g[j]).sum::<f64>()).collect();
        let mut slope = dot(&d, &g);
        if slope >= 0.0 {
            reset(&mut h, 1.0 / gnorm.max(1.0));
            d = g.iter().map(|v| -v / gnorm.max(1.0)).collect();
            slope = dot(&d, &g);
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            if evals >= rule.max_evals {
                break;
            }
            let xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + alpha * b).collect();
            evals += 1;
            if let Some((fnew, gnew)) = fg(&xn) {
                if fnew.is_finite() && gnew.iter().all(|v| v.is_finite()) && fnew <= f + 1e-4 * alpha * slope {
                    accepted = Some((xn, fnew, gnew));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((xn, fnew, gnew)) = accepted else {
            if fresh {
                // Already steepest descent: no further decrease is available.
                converged = gnorm <= 1e-5 * f.abs().max(1.0) || stall > 0;
                break;
            }
            reset(&mut h, 1.0 / gnorm.max(1.0));
            fresh = true;
            continue;
        };
        fresh = false;
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gnew.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if iter == 1 {
                reset(&mut h, sy / dot(&y, &y));
            }
            let hy: Vec<f64> = (0..n).map(|i| (0..n).map(|j| h[i * n + j] * y[j]).sum()).collect();
            let yhy = dot(&y, &hy);
            let rho = 1.0 / sy;
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] += rho * ((1.0 + rho * yhy) * s[i] * s[j] - hy[i] * s[j] - s[i] * hy[j]);
                }
            }
        }
        if small_change(f, fnew, rule.rel_tol) {
            stall += 1;
        } else {
            stall = 0;
        }
        x = xn;
        f = fnew;
        g = gnew;
        if stall >= rule.stall_iters {
            converged = true;
            break;
        }
    }
    trace.push(f);
    OptimResult { x, f, n_iter: iter, n_evals: evals, converged, trace }
}
