//! Treatment-effect model `Y = γ(X̃) + A X'β 1(Z'θ ≥ 0) + ε` with a logistic
//! propensity `π(X̃'α₁)` and a linear working baseline `γ = X̃'α₂`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::glm::{self, expit, Link};
use super::{linear_predictor, weighted_gram, FitOptions, NullFit};
use crate::data::Dataset;
use crate::error::{Error, Result};

fn treatment(ds: &Dataset) -> Result<&DVector<f64>> {
    ds.treatment()
        .ok_or_else(|| Error::Config("the semiparametric family needs a treatment column".into()))
}

fn split(ds: &Dataset, alpha: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    let r = ds.r();
    if alpha.len() != 2 * r {
        return Err(Error::DimensionMismatch("semiparametric coefficients".into()));
    }
    Ok((alpha.rows(0, r).into_owned(), alpha.rows(r, r).into_owned()))
}

/// Fitted propensities `π_i` and baseline means `γ_i`.
fn nuisance_values(ds: &Dataset, alpha: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    let (a1, a2) = split(ds, alpha)?;
    let pi = linear_predictor(ds.x_base(), &a1).map(expit);
    let gamma = linear_predictor(ds.x_base(), &a2);
    Ok((pi, gamma))
}

pub(crate) fn fit(ds: &Dataset, opts: &FitOptions) -> Result<NullFit> {
    let a = treatment(ds)?;
    let prop = glm::fit(ds.x_base(), a, Link::Logit, opts)?;
    let base = glm::fit(ds.x_base(), ds.y(), Link::Identity, opts)?;
    let r = ds.r();
    let mut alpha = DVector::zeros(2 * r);
    alpha.rows_mut(0, r).copy_from(&prop.alpha_hat);
    alpha.rows_mut(r, r).copy_from(&base.alpha_hat);
    Ok(NullFit {
        alpha_hat: alpha,
        converged: prop.converged && base.converged,
        iterations: prop.iterations + base.iterations,
        gradient_norm: prop.gradient_norm.max(base.gradient_norm),
    })
}

/// `(A_i − π_i)(Y_i − γ_i)`.
pub(crate) fn score_factor(ds: &Dataset, alpha: &DVector<f64>) -> Result<DVector<f64>> {
    let a = treatment(ds)?;
    let (pi, gamma) = nuisance_values(ds, alpha)?;
    let y = ds.y();
    Ok(DVector::from_fn(ds.n(), |i, _| (a[i] - pi[i]) * (y[i] - gamma[i])))
}

/// Rows `[X̃(A − π), X̃(Y − γ)]`.
pub(crate) fn nuisance_score(ds: &Dataset, alpha: &DVector<f64>) -> Result<DMatrix<f64>> {
    let a = treatment(ds)?;
    let (pi, gamma) = nuisance_values(ds, alpha)?;
    let (x, y, r) = (ds.x_base(), ds.y(), ds.r());
    Ok(DMatrix::from_fn(ds.n(), 2 * r, |i, k| {
        if k < r {
            x[(i, k)] * (a[i] - pi[i])
        } else {
            x[(i, k - r)] * (y[i] - gamma[i])
        }
    }))
}

pub(crate) fn derivative_rows(ds: &Dataset, alpha: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let a = treatment(ds)?;
    let (pi, gamma) = nuisance_values(ds, alpha)?;
    let (x, y, r, n) = (ds.x_base(), ds.y(), ds.r(), ds.n());
    let g = DMatrix::from_fn(n, 2 * r, |i, k| {
        if k < r {
            -(y[i] - gamma[i]) * pi[i] * (1.0 - pi[i]) * x[(i, k)]
        } else {
            -(a[i] - pi[i]) * x[(i, k - r)]
        }
    });
    let w: Vec<f64> = pi.iter().map(|p| p * (1.0 - p)).collect();
    let mut info = DMatrix::zeros(2 * r, 2 * r);
    info.view_mut((0, 0), (r, r)).copy_from(&(-weighted_gram(x, &w) / n as f64));
    info.view_mut((r, r), (r, r)).copy_from(&(-weighted_gram(x, &vec![1.0; n]) / n as f64));
    Ok((g, info))
}

/// `Y* = γ̂ + ν (Y − γ̂)` with `ν ~ N(0, 1)`.
pub(crate) fn simulate<R: Rng + ?Sized>(ds: &Dataset, alpha: &DVector<f64>, rng: &mut R) -> Result<DVector<f64>> {
    let (_, gamma) = nuisance_values(ds, alpha)?;
    let y = ds.y();
    Ok(DVector::from_fn(ds.n(), |i, _| {
        let nu: f64 = StandardNormal.sample(rng);
        gamma[i] + nu * (y[i] - gamma[i])
    }))
}
