//! Nelder–Mead simplex minimization and a small Levenberg–Marquardt solver.

#[derive(Debug, Clone)]
pub struct NelderMeadOptions {
    /// Stop once the spread of simplex values falls below this.
    pub tolerance: f64,
    pub max_evaluations: usize,
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
    pub converged: bool,
}

/// Minimizes `f` from `start`, building the initial simplex with one step per
/// coordinate.
pub fn nelder_mead<F>(mut f: F, start: &[f64], steps: &[f64], opts: &NelderMeadOptions) -> Minimum
where
    F: FnMut(&[f64]) -> f64,
{
    let dim = start.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
    simplex.push((start.to_vec(), eval(start, &mut evals)));
    for i in 0..dim {
        let mut x = start.to_vec();
        x[i] += steps[i];
        let v = eval(&x, &mut evals);
        simplex.push((x, v));
    }

    let mut converged = false;
    while evals < opts.max_evaluations {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let spread = simplex[dim].1 - simplex[0].1;
        let size = simplex[1..]
            .iter()
            .map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if spread <= opts.tolerance || size < 1e-14 {
            converged = true;
            break;
        }

        let mut centroid = vec![0.0; dim];
        for (x, _) in &simplex[..dim] {
            for (c, xi) in centroid.iter_mut().zip(x) {
                *c += xi / dim as f64;
            }
        }
        let along = |t: f64, worst: &[f64]| -> Vec<f64> {
            centroid.iter().zip(worst).map(|(c, w)| c + t * (c - w)).collect()
        };

        let worst = simplex[dim].0.clone();
        let reflected = along(1.0, &worst);
        let fr = eval(&reflected, &mut evals);
        if fr < simplex[0].1 {
            let expanded = along(2.0, &worst);
            let fe = eval(&expanded, &mut evals);
            simplex[dim] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
            continue;
        }
        if fr < simplex[dim - 1].1 {
            simplex[dim] = (reflected, fr);
            continue;
        }
        let (contracted, fc) = if fr < simplex[dim].1 {
            let c = along(0.5, &worst);
            let v = eval(&c, &mut evals);
            (c, v)
        } else {
            let c = along(-0.5, &worst);
            let v = eval(&c, &mut evals);
            (c, v)
        };
        if fc < simplex[dim].1.min(fr) {
            simplex[dim] = (contracted, fc);
            continue;
        }
        // shrink toward the best vertex
        let best = simplex[0].0.clone();
        for (x, v) in simplex.iter_mut().skip(1) {
            for (xi, bi) in x.iter_mut().zip(&best) {
                *xi = bi + 0.5 * (*xi - bi);
            }
            *v = eval(x, &mut evals);
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, value) = simplex.swap_remove(0);
    Minimum { x, value, evaluations: evals, converged }
}

/// Levenberg–Marquardt on a residual vector with forward-difference
/// Jacobians. `value` of the result is the sum of squared residuals.
pub fn levenberg_marquardt<F>(mut residuals: F, start: &[f64], opts: &NelderMeadOptions) -> Minimum
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let dim = start.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        residuals(x)
    };
    let cost = |r: &[f64]| {
        let c: f64 = r.iter().map(|v| v * v).sum();
        if c.is_nan() {
            f64::INFINITY
        } else {
            c
        }
    };
    let mut x = start.to_vec();
    let mut r = eval(&x, &mut evals);
    let mut value = cost(&r);
    let mut lambda = 1e-3;
    let mut converged = false;
    while evals < opts.max_evaluations && value.is_finite() {
        let m = r.len();
        let mut jac = nalgebra::DMatrix::zeros(m, dim);
        for j in 0..dim {
            let h = 1e-7 * x[j].abs().max(1.0);
            let mut xp = x.clone();
            xp[j] += h;
            let rp = eval(&xp, &mut evals);
            for i in 0..m {
                jac[(i, j)] = (rp[i] - r[i]) / h;
            }
        }
        let rv = nalgebra::DVector::from_vec(r.clone());
        let jtj = jac.transpose() * &jac;
        let grad = jac.transpose() * &rv;
        let mut stepped = false;
        while evals < opts.max_evaluations && lambda < 1e12 {
            let mut a = jtj.clone();
            for k in 0..dim {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let Some(delta) = a.cholesky().map(|c| c.solve(&(-&grad))) else {
                lambda *= 10.0;
                continue;
            };
            let candidate: Vec<f64> = x.iter().zip(delta.iter()).map(|(a, b)| a + b).collect();
            let rc = eval(&candidate, &mut evals);
            let vc = cost(&rc);
            if vc < value {
                let gain = value - vc;
                x = candidate;
                r = rc;
                value = vc;
                lambda = (lambda * 0.3).max(1e-12);
                stepped = true;
                if gain <= opts.tolerance * value.max(1e-300) || delta.norm() < 1e-14 {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !stepped || converged || value == 0.0 {
            converged = converged || !stepped;
            break;
        }
    }
    Minimum { x, value, evaluations: evals, converged }
}
