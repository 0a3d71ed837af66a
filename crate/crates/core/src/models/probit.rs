use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{check_full_rank, linear_predictor, max_abs, solve_spd, weighted_gram, xt_vec, FitOptions, NullFit};
use crate::error::Result;
use crate::special::{inv_mills, inv_mills_derivative, log_norm_cdf};

fn loglik(x: &DMatrix<f64>, y: &DVector<f64>, alpha: &DVector<f64>) -> f64 {
    let eta = linear_predictor(x, alpha);
    (0..y.len())
        .map(|i| if y[i] > 0.5 { log_norm_cdf(eta[i]) } else { log_norm_cdf(-eta[i]) })
        .sum()
}

/// `λ_i = Y φ/Φ(η) − (1 − Y) φ/Φ(−η)`.
pub(crate) fn generalized_residuals(x: &DMatrix<f64>, y: &DVector<f64>, alpha: &DVector<f64>) -> DVector<f64> {
    let eta = linear_predictor(x, alpha);
    DVector::from_fn(y.len(), |i, _| {
        if y[i] > 0.5 {
            inv_mills(eta[i])
        } else {
            -inv_mills(-eta[i])
        }
    })
}

/// `∂λ_i/∂η`, always negative.
fn residual_slopes(x: &DMatrix<f64>, y: &DVector<f64>, alpha: &DVector<f64>) -> Vec<f64> {
    let eta = linear_predictor(x, alpha);
    (0..y.len())
        .map(|i| {
            if y[i] > 0.5 {
                inv_mills_derivative(eta[i])
            } else {
                inv_mills_derivative(-eta[i])
            }
        })
        .collect()
}

fn mean_score(x: &DMatrix<f64>, y: &DVector<f64>, alpha: &DVector<f64>) -> DVector<f64> {
    let lam = generalized_residuals(x, y, alpha);
    xt_vec(x, lam.as_slice()) / y.len() as f64
}

pub(crate) fn fit(x: &DMatrix<f64>, y: &DVector<f64>, opts: &FitOptions) -> Result<NullFit> {
    check_full_rank(x)?;
    let n = y.len();
    let mut alpha = DVector::zeros(x.ncols());
    let mut ll = loglik(x, y, &alpha);
    let mut grad = mean_score(x, y, &alpha);
    let mut iterations = 0;
    while max_abs(&grad) > opts.tol && iterations < opts.max_iter {
        iterations += 1;
        let w: Vec<f64> = residual_slopes(x, y, &alpha).into_iter().map(|d| -d).collect();
        let Some(step) = solve_spd(weighted_gram(x, &w), &(&grad * n as f64)) else {
            break;
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &alpha + &step * t;
            let cand_ll = loglik(x, y, &cand);
            if cand_ll.is_finite() && cand_ll >= ll - 1e-12 * ll.abs().max(1.0) {
                alpha = cand;
                ll = cand_ll;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        grad = mean_score(x, y, &alpha);
        if !accepted {
            break;
        }
    }
    let gradient_norm = max_abs(&grad);
    Ok(NullFit {
        converged: gradient_norm <= opts.tol && alpha.iter().all(|v| v.is_finite()),
        alpha_hat: alpha,
        iterations,
        gradient_norm,
    })
}

pub(crate) fn derivative_rows(x: &DMatrix<f64>, y: &DVector<f64>, alpha: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = x.nrows();
    let d = residual_slopes(x, y, alpha);
    let g = DMatrix::from_fn(n, x.ncols(), |i, k| d[i] * x[(i, k)]);
    let info = weighted_gram(x, &d) / n as f64;
    (g, info)
}

/// `Y* = 1(ν ≤ X̃'α̂)` with `ν ~ N(0, 1)`.
pub(crate) fn simulate<R: Rng + ?Sized>(x: &DMatrix<f64>, alpha: &DVector<f64>, rng: &mut R) -> DVector<f64> {
    let eta = linear_predictor(x, alpha);
    DVector::from_fn(x.nrows(), |i, _| {
        let nu: f64 = StandardNormal.sample(rng);
        if nu <= eta[i] {
            1.0
        } else {
            0.0
        }
    })
}
