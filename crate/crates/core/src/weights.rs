//! Pairwise weights `ω_ij = ∫ 1(Z_i'θ ≥ 0) 1(Z_j'θ ≥ 0) w(θ) dθ`.
//!
//! Under a standard Gaussian prior the integral is a bivariate-normal orthant
//! probability and has the closed form `1/4 + arctan(ϱ/√(1-ϱ²)) / 2π`, where
//! `ϱ` is the cosine between `Z_i` and `Z_j`. A general Gaussian prior is
//! handled by one-dimensional Monte Carlo over a single shared stream of
//! standard normal draws. Scalar grouping variables admit the beta and
//! univariate Gaussian priors, for which `ω_ij` is a CDF at `min(Z_i, Z_j)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng;
use crate::special::{beta_cdf, norm_cdf};

/// `1 - ϱ²` at or below this value is treated as a coincident or opposite pair.
const ENDPOINT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum WeightSpec {
    /// `θ ~ N(0, I)`: closed form.
    StandardGaussianClosedForm,
    /// `θ ~ N(μ, Σ)`: Monte Carlo with `mc_draws` shared draws.
    Gaussian {
        mu: DVector<f64>,
        sigma: DMatrix<f64>,
        mc_draws: usize,
        seed: u64,
    },
    /// Scalar threshold with a `Beta(λ1, λ2)` prior.
    Beta { lambda1: f64, lambda2: f64 },
    /// Scalar threshold with a `N(μ, σ²)` prior.
    UnivariateGaussian { mu: f64, sigma2: f64 },
}

impl Default for WeightSpec {
    fn default() -> Self {
        WeightSpec::StandardGaussianClosedForm
    }
}

impl WeightSpec {
    /// Short human-readable tag used in reports.
    pub fn descriptor(&self) -> String {
        match self {
            WeightSpec::StandardGaussianClosedForm => "std-gaussian".into(),
            WeightSpec::Gaussian { mc_draws, seed, .. } => {
                format!("gaussian-mc(draws={mc_draws},seed={seed})")
            }
            WeightSpec::Beta { lambda1, lambda2 } => format!("beta({lambda1},{lambda2})"),
            WeightSpec::UnivariateGaussian { mu, sigma2 } => format!("normal1d({mu},{sigma2})"),
        }
    }

    /// `N(0, I_q)` evaluated by Monte Carlo rather than the closed form.
    pub fn standard_gaussian_mc(q: usize, mc_draws: usize, seed: u64) -> Self {
        WeightSpec::Gaussian {
            mu: DVector::zeros(q),
            sigma: DMatrix::identity(q, q),
            mc_draws,
            seed,
        }
    }
}

/// Symmetric `n × n` matrix of pairwise weights; the diagonal is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    omega: DMatrix<f64>,
}

impl WeightMatrix {
    /// Wraps a precomputed matrix after checking symmetry and range.
    pub fn from_matrix(mut omega: DMatrix<f64>) -> Result<Self> {
        let n = omega.nrows();
        if omega.ncols() != n {
            return Err(Error::DimensionMismatch("weight matrix must be square".into()));
        }
        for i in 0..n {
            omega[(i, i)] = 0.0;
            for j in 0..i {
                let v = omega[(i, j)];
                if v != omega[(j, i)] || !(0.0..=1.0).contains(&v) {
                    return Err(Error::InvalidParameter(format!(
                        "weight ({i},{j}) is asymmetric or outside [0,1]"
                    )));
                }
            }
        }
        Ok(Self { omega })
    }

    pub fn n(&self) -> usize {
        self.omega.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.omega[(i, j)]
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.omega
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Σ-weighted cosine `Z_i'ΣZ_j / (‖Z_i‖_Σ ‖Z_j‖_Σ)`, clamped to `[-1, 1]`.
pub fn varrho(z_i: &DVector<f64>, z_j: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
    let q = z_i.len();
    if z_j.len() != q || sigma.nrows() != q || sigma.ncols() != q {
        return Err(Error::DimensionMismatch("varrho operands".into()));
    }
    let sz_j = sigma * z_j;
    let sz_i = sigma * z_i;
    let ni = z_i.dot(&sz_i);
    let nj = z_j.dot(&sz_j);
    if !(ni > 0.0) || !(nj > 0.0) {
        return Err(Error::DegenerateVector("zero Σ-norm grouping vector".into()));
    }
    Ok((z_i.dot(&sz_j) / (ni.sqrt() * nj.sqrt())).clamp(-1.0, 1.0))
}

/// Orthant probability `P(N₁ ≥ 0, N₂ ≥ 0)` for standard normals with correlation `ϱ`.
pub fn omega_closed_form(varrho: f64) -> f64 {
    let rho = varrho.clamp(-1.0, 1.0);
    let gap = 1.0 - rho * rho;
    if gap <= ENDPOINT_EPS {
        return if rho > 0.0 { 0.5 } else { 0.0 };
    }
    0.25 + (rho / gap.sqrt()).atan() / (2.0 * std::f64::consts::PI)
}

/// Projected offsets and correlation for one pair under `N(μ, Σ)`.
#[derive(Debug, Clone, Copy)]
struct PairGeometry {
    a_i: f64,
    b_j: f64,
    rho: f64,
}

fn mc_average(g: PairGeometry, sorted_draws: &[f64]) -> f64 {
    let n = sorted_draws.len() as f64;
    // Only draws with z_k ≤ b_j contribute.
    let upto = sorted_draws.partition_point(|&z| z <= g.b_j);
    let active = &sorted_draws[..upto];
    let gap = 1.0 - g.rho * g.rho;
    let total: f64 = if gap <= ENDPOINT_EPS {
        if g.rho > 0.0 {
            active.iter().filter(|&&z| z < g.a_i).count() as f64
        } else {
            active.iter().filter(|&&z| z > -g.a_i).count() as f64
        }
    } else {
        let scale = gap.sqrt().recip();
        active.iter().map(|&z| norm_cdf(scale * (g.a_i - g.rho * z))).sum()
    };
    total / n
}

/// Σ-whitened grouping rows: `u_i = L'Z_i` with `Σ = LL'`, plus `Z_i'μ`.
struct Whitened {
    rows: Vec<Vec<f64>>,
    norms: Vec<f64>,
    mean_proj: Vec<f64>,
}

impl Whitened {
    fn new(z: &DMatrix<f64>, mu: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<Self> {
        let q = z.ncols();
        if mu.len() != q || sigma.nrows() != q || sigma.ncols() != q {
            return Err(Error::DimensionMismatch(format!(
                "prior has dimension {} but grouping block has {q} columns",
                mu.len()
            )));
        }
        let sym = (sigma - sigma.transpose()).abs().max();
        if sym > 1e-10 * sigma.abs().max().max(1.0) {
            return Err(Error::InvalidParameter("Σ must be symmetric".into()));
        }
        let chol = sigma
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidParameter("Σ must be positive definite".into()))?;
        let lt = chol.l().transpose();
        let mut rows = Vec::with_capacity(z.nrows());
        let mut norms = Vec::with_capacity(z.nrows());
        let mut mean_proj = Vec::with_capacity(z.nrows());
        for i in 0..z.nrows() {
            let zi = z.row(i).transpose();
            let u = &lt * &zi;
            let norm = u.norm();
            if !(norm > 0.0) {
                return Err(Error::DegenerateVector(format!(
                    "grouping row {} has zero Σ-norm",
                    i + 1
                )));
            }
            rows.push(u.iter().copied().collect());
            norms.push(norm);
            mean_proj.push(zi.dot(mu));
        }
        Ok(Self {
            rows,
            norms,
            mean_proj,
        })
    }

    fn geometry(&self, i: usize, j: usize) -> PairGeometry {
        let rho = (dot(&self.rows[i], &self.rows[j]) / (self.norms[i] * self.norms[j])).clamp(-1.0, 1.0);
        PairGeometry {
            a_i: self.mean_proj[i] / self.norms[i],
            b_j: self.mean_proj[j] / self.norms[j],
            rho,
        }
    }
}

/// Monte Carlo estimate of `ω_ij` under `θ ~ N(μ, Σ)` from `n_draws` fresh draws.
pub fn omega_gaussian_mc<R: Rng + ?Sized>(
    z_i: &DVector<f64>,
    z_j: &DVector<f64>,
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    n_draws: usize,
    rng: &mut R,
) -> Result<f64> {
    if n_draws == 0 {
        return Err(Error::InvalidParameter("n_draws must be at least 1".into()));
    }
    let draws = standard_normal_draws(n_draws, rng);
    omega_gaussian_mc_with_draws(z_i, z_j, mu, sigma, &draws)
}

/// Same as [`omega_gaussian_mc`] but with caller-provided, sorted draws.
pub fn omega_gaussian_mc_with_draws(
    z_i: &DVector<f64>,
    z_j: &DVector<f64>,
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    sorted_draws: &[f64],
) -> Result<f64> {
    if sorted_draws.is_empty() {
        return Err(Error::InvalidParameter("n_draws must be at least 1".into()));
    }
    let z = DMatrix::from_rows(&[z_i.transpose(), z_j.transpose()]);
    let w = Whitened::new(&z, mu, sigma)?;
    Ok(mc_average(w.geometry(0, 1), sorted_draws).clamp(0.0, 1.0))
}

/// Draws `n` standard normals and sorts them ascending.
pub fn standard_normal_draws<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut draws: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    draws.sort_by(f64::total_cmp);
    draws
}

fn check_lambda(l1: f64, l2: f64) -> Result<()> {
    if !(l1 > 0.0 && l2 > 0.0 && l1.is_finite() && l2.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "beta shapes must be positive, got ({l1}, {l2})"
        )));
    }
    Ok(())
}

/// `B(min{Z_i, Z_j}; λ1, λ2)`, the beta CDF clamped to `[0, 1]`.
pub fn omega_beta(z_i: f64, z_j: f64, lambda1: f64, lambda2: f64) -> Result<f64> {
    check_lambda(lambda1, lambda2)?;
    Ok(beta_cdf(z_i.min(z_j), lambda1, lambda2))
}

/// `Φ(min{Z_i, Z_j}; μ, σ²)`.
pub fn omega_univariate_gaussian(z_i: f64, z_j: f64, mu: f64, sigma2: f64) -> Result<f64> {
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::InvalidParameter(format!("σ² must be positive, got {sigma2}")));
    }
    Ok(norm_cdf((z_i.min(z_j) - mu) / sigma2.sqrt()))
}

/// The scalar grouping variable for threshold priors: the only column, or the
/// second column when the first is an intercept.
fn scalar_grouping(z: &DMatrix<f64>) -> Result<Vec<f64>> {
    match z.ncols() {
        1 => Ok(z.column(0).iter().copied().collect()),
        2 if z.column(0).iter().all(|&v| v == 1.0) => Ok(z.column(1).iter().copied().collect()),
        q => Err(Error::InvalidParameter(format!(
            "scalar-threshold priors need a single grouping variable, got q = {q}"
        ))),
    }
}

fn fill_symmetric<F>(n: usize, entry: F) -> Result<WeightMatrix>
where
    F: Fn(usize, usize) -> Result<f64> + Sync,
{
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| ((i + 1)..n).map(|j| entry(i, j)).collect::<Result<Vec<f64>>>())
        .collect::<Result<_>>()?;
    let mut omega = DMatrix::zeros(n, n);
    for (i, row) in rows.into_iter().enumerate() {
        for (k, v) in row.into_iter().enumerate() {
            let j = i + 1 + k;
            omega[(i, j)] = v;
            omega[(j, i)] = v;
        }
    }
    Ok(WeightMatrix { omega })
}

pub fn weight_matrix(ds: &Dataset, spec: &WeightSpec) -> Result<WeightMatrix> {
    weight_matrix_for(ds.z_group(), spec)
}

/// Fills every off-diagonal entry for the grouping block `z` (rows are
/// observations). The result does not depend on the rayon thread count.
pub fn weight_matrix_for(z: &DMatrix<f64>, spec: &WeightSpec) -> Result<WeightMatrix> {
    let n = z.nrows();
    match spec {
        WeightSpec::StandardGaussianClosedForm => {
            let q = z.ncols();
            let w = Whitened::new(z, &DVector::zeros(q), &DMatrix::identity(q, q))?;
            fill_symmetric(n, |i, j| Ok(omega_closed_form(w.geometry(i, j).rho)))
        }
        WeightSpec::Gaussian {
            mu,
            sigma,
            mc_draws,
            seed,
        } => {
            if *mc_draws == 0 {
                return Err(Error::InvalidParameter("mc_draws must be at least 1".into()));
            }
            let w = Whitened::new(z, mu, sigma)?;
            // One stream of draws shared by every pair, materialized up front.
            let draws = standard_normal_draws(*mc_draws, &mut rng::stream(*seed, 0));
            fill_symmetric(n, |i, j| Ok(mc_average(w.geometry(i, j), &draws).clamp(0.0, 1.0)))
        }
        WeightSpec::Beta { lambda1, lambda2 } => {
            check_lambda(*lambda1, *lambda2)?;
            let s = scalar_grouping(z)?;
            fill_symmetric(n, |i, j| omega_beta(s[i], s[j], *lambda1, *lambda2))
        }
        WeightSpec::UnivariateGaussian { mu, sigma2 } => {
            let s = scalar_grouping(z)?;
            fill_symmetric(n, |i, j| omega_univariate_gaussian(s[i], s[j], *mu, *sigma2))
        }
    }
}
