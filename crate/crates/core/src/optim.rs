//! Small unconstrained minimizers for low-dimensional smooth objectives.

use nalgebra::{DMatrix, DVector};

#[derive(Clone, Debug)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
}

/// Nelder-Mead simplex search. Non-finite objective values act as walls.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    start: &[f64],
    scale: &[f64],
    tol: f64,
    max_evals: usize,
) -> Minimum {
    let n = start.len();
    let mut eval = |x: &[f64], count: &mut usize| {
        *count += 1;
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let mut evals = 0;
    let mut pts: Vec<Vec<f64>> = vec![start.to_vec()];
    for i in 0..n {
        let mut p = start.to_vec();
        p[i] += scale[i];
        pts.push(p);
    }
    let mut vals: Vec<f64> = pts.iter().map(|p| eval(p, &mut evals)).collect();
    while evals < max_evals {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        pts = order.iter().map(|&i| pts[i].clone()).collect();
        vals = order.iter().map(|&i| vals[i]).collect();
        let spread = vals[n] - vals[0];
        let size = pts[1..]
            .iter()
            .flat_map(|p| p.iter().zip(&pts[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if spread.is_finite() && spread <= tol * (1.0 + vals[0].abs()) && size <= tol.sqrt() {
            break;
        }
        let centroid: Vec<f64> = (0..n).map(|j| pts[..n].iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
        let along = |t: f64| -> Vec<f64> { (0..n).map(|j| centroid[j] + t * (pts[n][j] - centroid[j])).collect() };
        let xr = along(-1.0);
        let fr = eval(&xr, &mut evals);
        if fr < vals[0] {
            let xe = along(-2.0);
            let fe = eval(&xe, &mut evals);
            if fe < fr {
                pts[n] = xe;
                vals[n] = fe;
            } else {
                pts[n] = xr;
                vals[n] = fr;
            }
        } else if fr < vals[n - 1] {
            pts[n] = xr;
            vals[n] = fr;
        } else {
            let (xc, fc) = if fr < vals[n] {
                let x = along(-0.5);
                let v = eval(&x, &mut evals);
                (x, v)
            } else {
                let x = along(0.5);
                let v = eval(&x, &mut evals);
                (x, v)
            };
            if fc < vals[n].min(fr) {
                pts[n] = xc;
                vals[n] = fc;
            } else {
                for i in 1..=n {
                    let p: Vec<f64> = (0..n).map(|j| pts[0][j] + 0.5 * (pts[i][j] - pts[0][j])).collect();
                    vals[i] = eval(&p, &mut evals);
                    pts[i] = p;
                }
            }
        }
    }
    let best = (0..=n).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap_or(0);
    Minimum {
        x: pts[best].clone(),
        value: vals[best],
    }
}

/// Levenberg-Marquardt steps on a finite-difference gradient and Hessian.
/// Meant as a polish after a simplex search has located the basin.
pub fn newton_polish<F: FnMut(&[f64]) -> f64>(mut f: F, start: &[f64], step: f64, max_iter: usize) -> Minimum {
    let n = start.len();
    let mut x = start.to_vec();
    let mut fx = f(&x);
    let mut evals = 1;
    let mut mu = 1e-6;
    for _ in 0..max_iter {
        let mut g = DVector::zeros(n);
        let mut h = DMatrix::zeros(n, n);
        let mut probe = x.clone();
        let mut at = |probe: &mut Vec<f64>, d: &[(usize, f64)], evals: &mut usize| {
            for &(i, s) in d {
                probe[i] += s;
            }
            let v = f(probe);
            for &(i, s) in d {
                probe[i] -= s;
            }
            *evals += 1;
            v
        };
        for i in 0..n {
            let fp = at(&mut probe, &[(i, step)], &mut evals);
            let fm = at(&mut probe, &[(i, -step)], &mut evals);
            g[i] = (fp - fm) / (2.0 * step);
            h[(i, i)] = (fp - 2.0 * fx + fm) / (step * step);
            for j in 0..i {
                let pp = at(&mut probe, &[(i, step), (j, step)], &mut evals);
                let pm = at(&mut probe, &[(i, step), (j, -step)], &mut evals);
                let mp = at(&mut probe, &[(i, -step), (j, step)], &mut evals);
                let mm = at(&mut probe, &[(i, -step), (j, -step)], &mut evals);
                let v = (pp - pm - mp + mm) / (4.0 * step * step);
                h[(i, j)] = v;
                h[(j, i)] = v;
            }
        }
        if !g.iter().chain(h.iter()).all(|v| v.is_finite()) || g.norm() < 1e-11 {
            break;
        }
        let mut improved = false;
        for _ in 0..30 {
            let mut damped = h.clone();
            let diag_scale = h.diagonal().abs().max().max(1.0);
            for i in 0..n {
                damped[(i, i)] += mu * diag_scale;
            }
            let Some(d) = damped.cholesky().map(|c| c.solve(&(-&g))) else {
                mu *= 10.0;
                continue;
            };
            let trial: Vec<f64> = x.iter().zip(d.iter()).map(|(a, b)| a + b).collect();
            let ft = f(&trial);
            evals += 1;
            if ft.is_finite() && ft <= fx {
                let moved = d.norm();
                x = trial;
                fx = ft;
                mu = (mu * 0.1).max(1e-12);
                improved = moved > 1e-13;
                break;
            }
            mu *= 10.0;
        }
        if !improved {
            break;
        }
    }
    Minimum {
        x,
        value: fx,
    }
}
