//! Linear quantile regression.
//!
//! The fit runs a short majorize-minimize pass to land near the optimum and
//! then finishes with an exact basis-exchange descent: a basic solution
//! interpolates `r` observations, and the check-loss directional derivatives
//! along each basis edge decide whether to swap an observation in or out.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::{check_full_rank, linear_predictor, solve_spd, weighted_gram, xt_vec, FitOptions, NullFit};
use crate::error::{Error, Result};

const MM_ITERS: usize = 40;
const OPT_SLACK: f64 = 1e-10;

pub fn check_loss(u: f64, tau: f64) -> f64 {
    u * (tau - if u < 0.0 { 1.0 } else { 0.0 })
}

/// `1(r_i ≤ 0) − τ` with `r_i = Y_i − X̃_i'α`.
pub(crate) fn sign_scores(x: &DMatrix<f64>, y: &DVector<f64>, alpha: &DVector<f64>, tau: f64) -> DVector<f64> {
    let eta = linear_predictor(x, alpha);
    DVector::from_fn(y.len(), |i, _| if y[i] - eta[i] <= 0.0 { 1.0 - tau } else { -tau })
}

pub fn silverman_bandwidth(residuals: &[f64]) -> f64 {
    let n = residuals.len() as f64;
    let mean = residuals.iter().sum::<f64>() / n;
    let var = residuals.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
    1.06 * var.sqrt() * n.powf(-0.2)
}

/// Gaussian kernel density estimate at zero.
pub fn kde_at_zero(residuals: &[f64], bandwidth: f64) -> f64 {
    let n = residuals.len() as f64;
    residuals.iter().map(|r| crate::special::norm_pdf(r / bandwidth)).sum::<f64>() / (n * bandwidth)
}

fn mm_start(x: &DMatrix<f64>, y: &DVector<f64>, tau: f64) -> Result<DVector<f64>> {
    let n = y.len();
    let ones = vec![1.0; n];
    let mut alpha = solve_spd(weighted_gram(x, &ones), &xt_vec(x, y.as_slice())).ok_or(Error::SingularDesign)?;
    let colsum = xt_vec(x, &ones);
    let eta = linear_predictor(x, &alpha);
    let scale = (0..n).map(|i| (y[i] - eta[i]).abs()).sum::<f64>() / n as f64;
    let mut eps = (0.1 * scale).max(1e-8);
    for _ in 0..MM_ITERS {
        let eta = linear_predictor(x, &alpha);
        let w: Vec<f64> = (0..n).map(|i| 1.0 / ((y[i] - eta[i]).abs() + eps)).collect();
        let wy: Vec<f64> = (0..n).map(|i| w[i] * y[i]).collect();
        let rhs = xt_vec(x, &wy) + &colsum * (2.0 * tau - 1.0);
        match solve_spd(weighted_gram(x, &w), &rhs) {
            Some(a) if a.iter().all(|v| v.is_finite()) => alpha = a,
            _ => break,
        }
        eps = (eps * 0.5).max(1e-8);
    }
    Ok(alpha)
}

/// Greedy choice of `r` linearly independent rows, visiting rows in `order`.
fn independent_rows(x: &DMatrix<f64>, order: &[usize]) -> Option<Vec<usize>> {
    let r = x.ncols();
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(r);
    let mut chosen = Vec::with_capacity(r);
    for &i in order {
        let row = x.row(i).transpose();
        let norm = row.norm();
        if norm == 0.0 {
            continue;
        }
        let mut v = row.clone();
        for b in &basis {
            let c = b.dot(&v);
            v -= b * c;
        }
        let vn = v.norm();
        if vn > 1e-9 * norm {
            basis.push(v / vn);
            chosen.push(i);
            if chosen.len() == r {
                return Some(chosen);
            }
        }
    }
    None
}

struct Descent {
    alpha: DVector<f64>,
    pivots: usize,
    violation: f64,
    optimal: bool,
}

fn basis_descent(x: &DMatrix<f64>, y: &DVector<f64>, tau: f64, mut h: Vec<usize>, max_pivots: usize) -> Result<Descent> {
    let n = y.len();
    let r = x.ncols();
    let mut pivots = 0;
    loop {
        let xh = DMatrix::from_fn(r, r, |a, b| x[(h[a], b)]);
        let yh = DVector::from_fn(r, |a, _| y[h[a]]);
        let lu = xh.clone().lu();
        let alpha = lu.solve(&yh).ok_or(Error::SingularDesign)?;
        let mut in_basis = vec![false; n];
        for &i in &h {
            in_basis[i] = true;
        }
        let eta = linear_predictor(x, &alpha);
        let res: Vec<f64> = (0..n).map(|i| if in_basis[i] { 0.0 } else { y[i] - eta[i] }).collect();

        // Multipliers u solving X_h' u = −Σ_{i∉h} ρ'(r_i) x_i.
        let mut g = DVector::zeros(r);
        for i in (0..n).filter(|&i| !in_basis[i]) {
            let d = if res[i] < 0.0 { tau - 1.0 } else { tau };
            for k in 0..r {
                g[k] += d * x[(i, k)];
            }
        }
        let u = xh.transpose().lu().solve(&(-g)).ok_or(Error::SingularDesign)?;
        let viol: Vec<f64> = u.iter().map(|&v| (v - tau).max(tau - 1.0 - v).max(0.0)).collect();
        let violation = viol.iter().cloned().fold(0.0, f64::max);
        if violation <= OPT_SLACK || pivots >= max_pivots {
            return Ok(Descent {
                alpha,
                pivots,
                violation,
                optimal: violation <= OPT_SLACK,
            });
        }

        // Try violated edges from the worst down until one gives descent.
        let mut cand: Vec<usize> = (0..r).filter(|&j| viol[j] > OPT_SLACK).collect();
        cand.sort_by(|&a, &b| viol[b].total_cmp(&viol[a]));
        let mut moved = false;
        for j in cand {
            let s = if u[j] > tau { -1.0 } else { 1.0 };
            let mut e = DVector::zeros(r);
            e[j] = s;
            let Some(dir) = lu.solve(&e) else { continue };
            let c: Vec<f64> = (0..n).map(|i| x.row(i).transpose().dot(&dir)).collect();
            // Directional derivative at t = 0+, resolving zero residuals by direction.
            let mut slope = if s > 0.0 { 1.0 - tau } else { tau };
            let mut kinks: Vec<(f64, usize)> = Vec::new();
            for i in (0..n).filter(|&i| !in_basis[i]) {
                if c[i] == 0.0 {
                    continue;
                }
                let neg_next = if res[i] != 0.0 { res[i] < 0.0 } else { c[i] > 0.0 };
                slope -= c[i] * if neg_next { tau - 1.0 } else { tau };
                let t = res[i] / c[i];
                if t > 0.0 && res[i] != 0.0 {
                    kinks.push((t, i));
                }
            }
            if slope >= -1e-12 {
                continue;
            }
            kinks.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut enter = None;
            for &(_, i) in &kinks {
                slope += c[i].abs();
                if slope >= 0.0 {
                    enter = Some(i);
                    break;
                }
            }
            let Some(i) = enter else {
                return Err(Error::InvalidParameter("quantile objective is unbounded".into()));
            };
            h[j] = i;
            moved = true;
            break;
        }
        pivots += 1;
        if !moved {
            // Degenerate vertex with no strictly descending edge.
            return Ok(Descent {
                alpha,
                pivots,
                violation: 0.0,
                optimal: true,
            });
        }
    }
}

pub(crate) fn fit(x: &DMatrix<f64>, y: &DVector<f64>, tau: f64, opts: &FitOptions) -> Result<NullFit> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidParameter(format!("tau = {tau} must lie in (0, 1)")));
    }
    check_full_rank(x)?;
    let n = y.len();
    let start = mm_start(x, y, tau)?;
    let eta = linear_predictor(x, &start);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| (y[a] - eta[a]).abs().total_cmp(&(y[b] - eta[b]).abs()));
    let h = independent_rows(x, &order).ok_or(Error::SingularDesign)?;
    let max_pivots = (10 * n).max(opts.max_iter);
    let d = basis_descent(x, y, tau, h, max_pivots)?;
    Ok(NullFit {
        alpha_hat: d.alpha,
        converged: d.optimal && d.violation <= opts.tol,
        iterations: MM_ITERS + d.pivots,
        gradient_norm: d.violation,
    })
}

/// `g_i = f̂(0) X̃_i` and `n⁻¹ Σ f̂(0) X̃ X̃'`.
pub(crate) fn derivative_rows(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    alpha: &DVector<f64>,
    bandwidth: Option<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = x.nrows();
    let eta = linear_predictor(x, alpha);
    let res: Vec<f64> = (0..n).map(|i| y[i] - eta[i]).collect();
    let h = match bandwidth {
        Some(b) if b > 0.0 && b.is_finite() => b,
        Some(b) => return Err(Error::InvalidParameter(format!("bandwidth {b} must be positive"))),
        None => silverman_bandwidth(&res),
    };
    let f0 = kde_at_zero(&res, h);
    if !(f0 > 0.0 && f0.is_finite()) {
        return Err(Error::SingularInformation("residual density at zero is not positive".into()));
    }
    let g = x * f0;
    let info = weighted_gram(x, &vec![f0; n]) / n as f64;
    Ok((g, info))
}

/// `Y* = X̃'α̂ + ν |r̃|` with `ν = 2(1 − τ)` w.p. `1 − τ` and `−2τ` w.p. `τ`.
pub(crate) fn simulate<R: Rng + ?Sized>(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    alpha: &DVector<f64>,
    tau: f64,
    rng: &mut R,
) -> DVector<f64> {
    let eta = linear_predictor(x, alpha);
    DVector::from_fn(y.len(), |i, _| {
        let nu = if rng.random::<f64>() < tau { -2.0 * tau } else { 2.0 * (1.0 - tau) };
        eta[i] + nu * (y[i] - eta[i]).abs()
    })
}
