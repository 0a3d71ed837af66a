//! Per-family estimating equations under the null `β = 0`.
//!
//! Every supported family has a score for the tested coefficients of the form
//! `ψ₀(V_i, α̂) = s_i · X_i`, a scalar residual-type factor times the
//! grouping-difference row. The family also supplies the nuisance score
//! `ψ₁(V_i, α)`, the rows `g_i` with `∂ψ₀(V_i, α)/∂α' = X_i g_i'`, and the
//! normalized information `n⁻¹ ∂Ψ₁ₙ/∂α'`. Those pieces are all the supremum
//! test needs to build `K̂(θ)` and `Ĵ`.

mod glm;
mod probit;
mod quantile;
mod semiparametric;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};

pub(crate) use glm::expit;
pub use quantile::{check_loss, kde_at_zero, silverman_bandwidth};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FamilyKind {
    GaussianGlm,
    BinomialGlm,
    PoissonGlm,
    Probit,
    Quantile { tau: f64 },
    Semiparametric,
}

impl FamilyKind {
    pub fn name(&self) -> String {
        match self {
            FamilyKind::GaussianGlm => "gaussian".into(),
            FamilyKind::BinomialGlm => "binomial".into(),
            FamilyKind::PoissonGlm => "poisson".into(),
            FamilyKind::Probit => "probit".into(),
            FamilyKind::Quantile { tau } => format!("quantile({tau})"),
            FamilyKind::Semiparametric => "semiparametric".into(),
        }
    }

    pub fn quantile(tau: f64) -> Result<Self> {
        if tau > 0.0 && tau < 1.0 {
            Ok(FamilyKind::Quantile { tau })
        } else {
            Err(Error::InvalidParameter(format!("tau = {tau} must lie in (0, 1)")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Convergence threshold on the largest component of the mean nuisance score.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
        }
    }
}

/// Null-model estimate `α̂` solving `Ψ₁ₙ(α) = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct NullFit {
    /// For the semiparametric family, `(α̂₁, α̂₂)`: propensity then baseline.
    pub alpha_hat: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Largest component of the mean nuisance score at `α̂`. For quantile
    /// regression, the distance of the basis multipliers from `[τ-1, τ]`.
    pub gradient_norm: f64,
}

/// Rows `ψ₀(V_i, α̂) = s_i X_i` and the scalar factors `s_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub psi0: DMatrix<f64>,
    pub factor: DVector<f64>,
}

impl ScoreVector {
    pub fn from_factor(factor: DVector<f64>, x_diff: &DMatrix<f64>) -> Result<Self> {
        if factor.len() != x_diff.nrows() {
            return Err(Error::DimensionMismatch("score factor length".into()));
        }
        let psi0 = DMatrix::from_fn(x_diff.nrows(), x_diff.ncols(), |i, k| factor[i] * x_diff[(i, k)]);
        Ok(Self { psi0, factor })
    }

    pub fn n(&self) -> usize {
        self.psi0.nrows()
    }
}

/// Derivative ingredients for the squared score statistic at fixed `θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SstDerivatives {
    /// `ψ₁(V_i, α̂)` as rows (`n × r`).
    pub psi1: DMatrix<f64>,
    /// Rows `g_i` with `∂ψ₀(V_i, α)/∂α' = X_i g_i'` (`n × r`).
    pub grad_rows: DMatrix<f64>,
    /// `Ĵ`, inverse of `n⁻¹ ∂Ψ₁ₙ/∂α'` (`r × r`).
    pub j_inv: DMatrix<f64>,
}

impl SstDerivatives {
    /// `K̂(θ) = n⁻¹ Σ 1(Z_i'θ ≥ 0) X_i g_i'` for the given indicator.
    pub fn k_hat(&self, x_diff: &DMatrix<f64>, indicator: &[bool]) -> DMatrix<f64> {
        let n = x_diff.nrows();
        let (p, r) = (x_diff.ncols(), self.grad_rows.ncols());
        let mut k = DMatrix::zeros(p, r);
        for i in (0..n).filter(|&i| indicator[i]) {
            for a in 0..p {
                let xa = x_diff[(i, a)];
                if xa == 0.0 {
                    continue;
                }
                for b in 0..r {
                    k[(a, b)] += xa * self.grad_rows[(i, b)];
                }
            }
        }
        k / n as f64
    }

    /// `K̂(θ)` for a grouping parameter `θ` applied to the rows of `z`.
    pub fn k_of_theta(&self, x_diff: &DMatrix<f64>, z: &DMatrix<f64>, theta: &DVector<f64>) -> DMatrix<f64> {
        let ind: Vec<bool> = (0..z.nrows()).map(|i| z.row(i).transpose().dot(theta) >= 0.0).collect();
        self.k_hat(x_diff, &ind)
    }

    pub fn r(&self) -> usize {
        self.psi1.ncols()
    }
}

/// Options for [`sst_derivatives`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DerivativeOptions {
    /// Kernel bandwidth for the quantile residual density; Silverman when `None`.
    pub bandwidth: Option<f64>,
}

pub fn fit_null(ds: &Dataset, family: &FamilyKind, opts: &FitOptions) -> Result<NullFit> {
    match family {
        FamilyKind::GaussianGlm | FamilyKind::BinomialGlm | FamilyKind::PoissonGlm => {
            glm::fit(ds.x_base(), ds.y(), glm::Link::of(family), opts)
        }
        FamilyKind::Probit => probit::fit(ds.x_base(), ds.y(), opts),
        FamilyKind::Quantile { tau } => quantile::fit(ds.x_base(), ds.y(), *tau, opts),
        FamilyKind::Semiparametric => semiparametric::fit(ds, opts),
    }
}

fn check_alpha(ds: &Dataset, family: &FamilyKind, fit: &NullFit) -> Result<()> {
    let want = match family {
        FamilyKind::Semiparametric => 2 * ds.r(),
        _ => ds.r(),
    };
    if fit.alpha_hat.len() != want {
        return Err(Error::DimensionMismatch(format!(
            "fit has {} coefficients, family expects {want}",
            fit.alpha_hat.len()
        )));
    }
    Ok(())
}

/// Scalar score factors `s_i` at `α`, so that `ψ₀(V_i, α) = s_i X_i`.
pub fn score_factor(ds: &Dataset, family: &FamilyKind, alpha: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(match family {
        FamilyKind::GaussianGlm | FamilyKind::BinomialGlm | FamilyKind::PoissonGlm => {
            glm::residuals(ds.x_base(), ds.y(), alpha, glm::Link::of(family))
        }
        FamilyKind::Probit => probit::generalized_residuals(ds.x_base(), ds.y(), alpha),
        FamilyKind::Quantile { tau } => quantile::sign_scores(ds.x_base(), ds.y(), alpha, *tau),
        FamilyKind::Semiparametric => semiparametric::score_factor(ds, alpha)?,
    })
}

pub fn score_psi0(ds: &Dataset, family: &FamilyKind, fit: &NullFit) -> Result<ScoreVector> {
    check_alpha(ds, family, fit)?;
    let factor = score_factor(ds, family, &fit.alpha_hat)?;
    ScoreVector::from_factor(factor, ds.x_diff())
}

/// `ψ₁(V_i, α)` rows at an arbitrary `α`.
pub fn nuisance_score(ds: &Dataset, family: &FamilyKind, alpha: &DVector<f64>) -> Result<DMatrix<f64>> {
    match family {
        FamilyKind::Semiparametric => semiparametric::nuisance_score(ds, alpha),
        _ => {
            let s = score_factor(ds, family, alpha)?;
            let x = ds.x_base();
            Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, k| s[i] * x[(i, k)]))
        }
    }
}

pub fn sst_derivatives(
    ds: &Dataset,
    family: &FamilyKind,
    fit: &NullFit,
    opts: &DerivativeOptions,
) -> Result<SstDerivatives> {
    check_alpha(ds, family, fit)?;
    let alpha = &fit.alpha_hat;
    let psi1 = nuisance_score(ds, family, alpha)?;
    let (grad_rows, info) = match family {
        FamilyKind::GaussianGlm | FamilyKind::BinomialGlm | FamilyKind::PoissonGlm => {
            glm::derivative_rows(ds.x_base(), alpha, glm::Link::of(family))
        }
        FamilyKind::Probit => probit::derivative_rows(ds.x_base(), ds.y(), alpha),
        FamilyKind::Quantile { tau: _ } => quantile::derivative_rows(ds.x_base(), ds.y(), alpha, opts.bandwidth)?,
        FamilyKind::Semiparametric => semiparametric::derivative_rows(ds, alpha)?,
    };
    let j_inv = info
        .clone()
        .lu()
        .try_inverse()
        .filter(|m| m.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::SingularInformation("n⁻¹ ∂Ψ₁ₙ/∂α' is not invertible".into()))?;
    Ok(SstDerivatives {
        psi1,
        grad_rows,
        j_inv,
    })
}

/// Draws a response vector from the fitted null model and returns the
/// dataset with `Y` replaced. Covariates are shared with `ds`.
pub fn bootstrap_sample<R: Rng + ?Sized>(
    ds: &Dataset,
    family: &FamilyKind,
    fit: &NullFit,
    rng: &mut R,
) -> Result<Dataset> {
    check_alpha(ds, family, fit)?;
    let y = match family {
        FamilyKind::GaussianGlm | FamilyKind::BinomialGlm | FamilyKind::PoissonGlm => {
            glm::simulate(ds.x_base(), ds.y(), &fit.alpha_hat, glm::Link::of(family), rng)?
        }
        FamilyKind::Probit => probit::simulate(ds.x_base(), &fit.alpha_hat, rng),
        FamilyKind::Quantile { tau } => quantile::simulate(ds.x_base(), ds.y(), &fit.alpha_hat, *tau, rng),
        FamilyKind::Semiparametric => semiparametric::simulate(ds, &fit.alpha_hat, rng)?,
    };
    ds.with_response(y)
}

// ---------------------------------------------------------------------------
// shared linear algebra

/// `X' diag(w) X`.
pub(crate) fn weighted_gram(x: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let r = x.ncols();
    let mut g = DMatrix::zeros(r, r);
    for i in 0..x.nrows() {
        let wi = w[i];
        if wi == 0.0 {
            continue;
        }
        for a in 0..r {
            let v = wi * x[(i, a)];
            for b in a..r {
                g[(a, b)] += v * x[(i, b)];
            }
        }
    }
    for a in 0..r {
        for b in 0..a {
            g[(a, b)] = g[(b, a)];
        }
    }
    g
}

/// `X' v`.
pub(crate) fn xt_vec(x: &DMatrix<f64>, v: &[f64]) -> DVector<f64> {
    let mut out = DVector::zeros(x.ncols());
    for i in 0..x.nrows() {
        for a in 0..x.ncols() {
            out[a] += x[(i, a)] * v[i];
        }
    }
    out
}

/// Rejects designs whose Gram matrix is numerically rank deficient.
pub(crate) fn check_full_rank(x: &DMatrix<f64>) -> Result<()> {
    if x.nrows() < x.ncols() {
        return Err(Error::SingularDesign);
    }
    let gram = weighted_gram(x, &vec![1.0; x.nrows()]);
    let eig = gram.symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(max > 0.0) || min <= 1e-10 * max {
        return Err(Error::SingularDesign);
    }
    Ok(())
}

/// Solves the symmetric positive definite system `A x = b`.
pub(crate) fn solve_spd(a: DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    a.cholesky().map(|c| c.solve(b))
}

pub(crate) fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

pub(crate) fn linear_predictor(x: &DMatrix<f64>, alpha: &DVector<f64>) -> DVector<f64> {
    x * alpha
}

#[cfg(test)]
mod tests;
