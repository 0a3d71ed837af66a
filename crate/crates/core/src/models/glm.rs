//! Canonical-link GLMs fitted by Newton-Raphson with step halving.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};

use super::{check_full_rank, linear_predictor, max_abs, solve_spd, weighted_gram, xt_vec, FamilyKind, FitOptions, NullFit};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Link {
    Identity,
    Logit,
    Log,
}

impl Link {
    pub(crate) fn of(family: &FamilyKind) -> Self {
        match family {
            FamilyKind::BinomialGlm => Link::Logit,
            FamilyKind::PoissonGlm => Link::Log,
            _ => Link::Identity,
        }
    }

    /// `c'(η)`.
    pub(crate) fn mean(self, eta: f64) -> f64 {
        match self {
            Link::Identity => eta,
            Link::Logit => expit(eta),
            Link::Log => eta.exp(),
        }
    }

    /// `c''(η)`.
    pub(crate) fn variance(self, eta: f64) -> f64 {
        match self {
            Link::Identity => 1.0,
            Link::Logit => {
                let m = expit(eta);
                m * (1.0 - m)
            }
            Link::Log => eta.exp(),
        }
    }

    /// `Y η − c(η)`, up to terms free of `η`.
    fn loglik_term(self, y: f64, eta: f64) -> f64 {
        match self {
            Link::Identity => -0.5 * (y - eta) * (y - eta),
            Link::Logit => y * eta - softplus(eta),
            Link::Log => y * eta - eta.exp(),
        }
    }

    fn initial_mean(self, y: f64, ybar: f64) -> f64 {
        match self {
            Link::Identity => y,
            Link::Logit => (y + ybar) / 2.0,
            Link::Log => (y + ybar) / 2.0 + 0.1,
        }
    }

    fn link(self, mu: f64) -> f64 {
        match self {
            Link::Identity => mu,
            Link::Logit => (mu / (1.0 - mu)).ln(),
            Link::Log => mu.ln(),
        }
    }
}

pub(crate) fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn loglik(x: &DMatrix<f64>, y: &DVector<f64>, alpha: &DVector<f64>, link: Link) -> f64 {
    let eta = linear_predictor(x, alpha);
    eta.iter().zip(y.iter()).map(|(&e, &yi)| link.loglik_term(yi, e)).sum()
}

pub(crate) fn residuals(x: &DMatrix<f64>, y: &DVector<f64>, alpha: &DVector<f64>, link: Link) -> DVector<f64> {
    let eta = linear_predictor(x, alpha);
    DVector::from_fn(y.len(), |i, _| y[i] - link.mean(eta[i]))
}

fn mean_score(x: &DMatrix<f64>, y: &DVector<f64>, alpha: &DVector<f64>, link: Link) -> DVector<f64> {
    let res = residuals(x, y, alpha, link);
    xt_vec(x, res.as_slice()) / y.len() as f64
}

pub(crate) fn fit(x: &DMatrix<f64>, y: &DVector<f64>, link: Link, opts: &FitOptions) -> Result<NullFit> {
    check_full_rank(x)?;
    let n = y.len();
    if link == Link::Log && y.iter().all(|&v| v == 0.0) {
        return Err(Error::InvalidParameter("all Poisson counts are zero; the null fit diverges".into()));
    }

    // One weighted least-squares step from a data-based starting mean.
    let ybar = y.mean();
    let mu0: Vec<f64> = y.iter().map(|&v| link.initial_mean(v, ybar)).collect();
    let eta0: Vec<f64> = mu0.iter().map(|&m| link.link(m)).collect();
    let w0: Vec<f64> = eta0.iter().map(|&e| link.variance(e)).collect();
    let z0: Vec<f64> = (0..n).map(|i| w0[i] * eta0[i] + (y[i] - mu0[i])).collect();
    let mut alpha = solve_spd(weighted_gram(x, &w0), &xt_vec(x, &z0)).ok_or(Error::SingularDesign)?;
    if alpha.iter().any(|v| !v.is_finite()) {
        alpha = DVector::zeros(x.ncols());
    }

    let mut ll = loglik(x, y, &alpha, link);
    let mut grad = mean_score(x, y, &alpha, link);
    let mut iterations = 0;
    while max_abs(&grad) > opts.tol && iterations < opts.max_iter {
        iterations += 1;
        let eta = linear_predictor(x, &alpha);
        let w: Vec<f64> = eta.iter().map(|&e| link.variance(e)).collect();
        let Some(step) = solve_spd(weighted_gram(x, &w), &(&grad * n as f64)) else {
            break;
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &alpha + &step * t;
            let cand_ll = loglik(x, y, &cand, link);
            if cand_ll.is_finite() && cand_ll >= ll - 1e-12 * ll.abs().max(1.0) {
                alpha = cand;
                ll = cand_ll;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        grad = mean_score(x, y, &alpha, link);
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

/// `g_i = −c''(X̃_i'α) X̃_i` and the normalized information `−n⁻¹ Σ c'' X̃ X̃'`.
pub(crate) fn derivative_rows(x: &DMatrix<f64>, alpha: &DVector<f64>, link: Link) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = x.nrows();
    let eta = linear_predictor(x, alpha);
    let w: Vec<f64> = eta.iter().map(|&e| link.variance(e)).collect();
    let g = DMatrix::from_fn(n, x.ncols(), |i, k| -w[i] * x[(i, k)]);
    let info = -weighted_gram(x, &w) / n as f64;
    (g, info)
}

pub(crate) fn simulate<R: Rng + ?Sized>(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    alpha: &DVector<f64>,
    link: Link,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let eta = linear_predictor(x, alpha);
    let n = y.len();
    let out = match link {
        Link::Identity => {
            let sigma2 = (0..n).map(|i| (y[i] - eta[i]).powi(2)).sum::<f64>() / n as f64;
            let noise = Normal::new(0.0, sigma2.sqrt()).map_err(|e| Error::InvalidParameter(e.to_string()))?;
            DVector::from_fn(n, |i, _| eta[i] + noise.sample(rng))
        }
        Link::Logit => DVector::from_fn(n, |i, _| {
            let p = expit(eta[i]);
            if rng.random::<f64>() < p {
                1.0
            } else {
                0.0
            }
        }),
        Link::Log => {
            let mut v = DVector::zeros(n);
            for i in 0..n {
                let mu = eta[i].exp();
                v[i] = if mu > 0.0 && mu.is_finite() {
                    Poisson::new(mu).map_err(|e| Error::InvalidParameter(e.to_string()))?.sample(rng)
                } else {
                    0.0
                };
            }
            v
        }
    };
    Ok(out)
}
