//! Supremum of squared score statistics over a grid of grouping parameters,
//! calibrated by multiplier perturbation.
//!
//! Everything that depends on `θ` alone (the indicator, `K̂(θ)Ĵ`, the Cholesky
//! factor of `Ṽ(θ)`) is computed once per grid point. A batch of perturbation
//! draws then costs one indicator-by-score matrix product plus a triangular
//! solve per grid point.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{self, DerivativeOptions, FamilyKind, FitOptions, NullFit, SstDerivatives};
use crate::rng;
use crate::wast::{p_value, TestOutcome};

const RIDGE: f64 = 1e-8;
const RESAMPLE_CHUNK: usize = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct ThetaGrid {
    /// One candidate `θ` per row (`K × q`).
    pub thetas: DMatrix<f64>,
    pub seed: u64,
    pub k_directions: usize,
    pub grid_per_direction: usize,
    /// 10th and 90th percentiles of the projected scores, per direction.
    pub bounds: Vec<(f64, f64)>,
}

impl ThetaGrid {
    pub fn from_rows(thetas: DMatrix<f64>) -> Result<Self> {
        if thetas.nrows() == 0 {
            return Err(Error::Grid("the grid has no rows".into()));
        }
        Ok(Self {
            k_directions: thetas.nrows(),
            grid_per_direction: 1,
            bounds: Vec::new(),
            seed: 0,
            thetas,
        })
    }

    pub fn len(&self) -> usize {
        self.thetas.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.nrows() == 0
    }

    pub fn theta(&self, k: usize) -> DVector<f64> {
        self.thetas.row(k).transpose()
    }

    pub fn descriptor(&self) -> String {
        format!(
            "grid(directions={}, per_direction={}, seed={})",
            self.k_directions, self.grid_per_direction, self.seed
        )
    }
}

/// Type-7 sample quantile of sorted data.
fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Random unit directions for `θ₂..θ_q`, each paired with intercepts `θ₁ = −c`
/// spread across the 10th–90th percentile range of the projections.
pub fn build_theta_grid(z: &DMatrix<f64>, k_directions: usize, grid_per_direction: usize, seed: u64) -> Result<ThetaGrid> {
    let (n, q) = z.shape();
    if q < 2 {
        return Err(Error::Grid(format!("need an intercept and at least one grouping variable, got q = {q}")));
    }
    if (0..n).any(|i| z[(i, 0)] != 1.0) {
        return Err(Error::Grid("the first grouping column must be the intercept".into()));
    }
    if k_directions == 0 || grid_per_direction == 0 {
        return Err(Error::Grid("grid sizes must be positive".into()));
    }
    let mut g = rng::stream(seed, 0);
    let mut thetas = DMatrix::zeros(k_directions * grid_per_direction, q);
    let mut bounds = Vec::with_capacity(k_directions);
    let tail = z.columns(1, q - 1);
    for k in 0..k_directions {
        let u: DVector<f64> = loop {
            let u: DVector<f64> = DVector::from_fn(q - 1, |_, _| StandardNormal.sample(&mut g));
            let norm = u.norm();
            if norm > 1e-12 {
                break u / norm;
            }
        };
        let proj_v: DVector<f64> = tail * &u;
        let mut proj: Vec<f64> = proj_v.iter().copied().collect();
        proj.sort_by(f64::total_cmp);
        let lo = quantile_sorted(&proj, 0.1);
        let hi = quantile_sorted(&proj, 0.9);
        bounds.push((lo, hi));
        for m in 0..grid_per_direction {
            let frac = if grid_per_direction == 1 {
                (k as f64 + 0.5) / k_directions as f64
            } else {
                m as f64 / (grid_per_direction - 1) as f64
            };
            let row = k * grid_per_direction + m;
            thetas[(row, 0)] = -(lo + frac * (hi - lo));
            for a in 0..q - 1 {
                thetas[(row, a + 1)] = u[a];
            }
        }
    }
    Ok(ThetaGrid {
        thetas,
        seed,
        k_directions,
        grid_per_direction,
        bounds,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PerturbationSign {
    /// `ν_i {ψ_i + K̂(θ)Ĵψ₁_i}`.
    #[default]
    Plus,
    /// `ν_i {ψ_i − K̂(θ)Ĵψ₁_i}`, the variance-matching alternative.
    Minus,
}

impl PerturbationSign {
    fn factor(self) -> f64 {
        match self {
            PerturbationSign::Plus => 1.0,
            PerturbationSign::Minus => -1.0,
        }
    }
}

/// Per-`θ` quantities reused across perturbation draws.
struct GridPoint {
    index: usize,
    indicator: Vec<bool>,
    /// `K̂(θ)`, `p × r`.
    k_hat: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    statistic: f64,
    ridged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScorePoint {
    pub statistic: f64,
    /// Ṽ(θ) needed a diagonal ridge before it could be factorized.
    pub ridged: bool,
}

/// Inputs shared by every grid point: scores, nuisance influence rows, design.
struct Ingredients<'a> {
    x: &'a DMatrix<f64>,
    factor: DVector<f64>,
    derivs: &'a SstDerivatives,
    /// Rows `M_i = Ĵ ψ₁_i` (`n × r`).
    m_rows: DMatrix<f64>,
}

impl<'a> Ingredients<'a> {
    fn new(ds: &'a Dataset, family: &FamilyKind, fit: &NullFit, derivs: &'a SstDerivatives) -> Result<Self> {
        let factor = models::score_psi0(ds, family, fit)?.factor;
        let m_rows = &derivs.psi1 * derivs.j_inv.transpose();
        Ok(Self {
            x: ds.x_diff(),
            factor,
            derivs,
            m_rows,
        })
    }

    fn point(&self, index: usize, indicator: Vec<bool>) -> Option<GridPoint> {
        let (n, p) = self.x.shape();
        let k_hat = self.derivs.k_hat(self.x, &indicator);
        let correction = &self.m_rows * k_hat.transpose();
        let mut v = DMatrix::zeros(p, p);
        let mut score = DVector::zeros(p);
        let mut e = DVector::zeros(p);
        for i in 0..n {
            let ind = if indicator[i] { self.factor[i] } else { 0.0 };
            for a in 0..p {
                e[a] = ind * self.x[(i, a)] - correction[(i, a)];
                score[a] += ind * self.x[(i, a)];
            }
            v.ger(1.0, &e, &e, 1.0);
        }
        v /= n as f64;
        let (chol, ridged) = factorize(v)?;
        let z = chol.l().solve_lower_triangular(&score)?;
        Some(GridPoint {
            index,
            indicator,
            k_hat,
            statistic: z.norm_squared() / n as f64,
            chol,
            ridged,
        })
    }
}

fn factorize(v: DMatrix<f64>) -> Option<(Cholesky<f64, Dyn>, bool)> {
    if v.iter().any(|x| !x.is_finite()) {
        return None;
    }
    if let Some(c) = v.clone().cholesky() {
        if c.l().diagonal().iter().all(|d| *d > 0.0) {
            return Some((c, false));
        }
    }
    let p = v.nrows();
    let trace = v.trace();
    if !(trace > 0.0) {
        return None;
    }
    let mut r = v;
    for a in 0..p {
        r[(a, a)] += RIDGE * trace / p as f64;
    }
    r.cholesky().map(|c| (c, true))
}

fn indicator(z: &DMatrix<f64>, theta: &DVector<f64>) -> Vec<bool> {
    (0..z.nrows()).map(|i| z.row(i).transpose().dot(theta) >= 0.0).collect()
}

/// `T̃ₙ(θ) = n⁻¹ Ψₙ' Ṽ(θ)⁻¹ Ψₙ`.
pub fn score_test_at(
    ds: &Dataset,
    family: &FamilyKind,
    fit: &NullFit,
    derivs: &SstDerivatives,
    theta: &DVector<f64>,
) -> Result<ScorePoint> {
    if theta.len() != ds.q() {
        return Err(Error::DimensionMismatch(format!("θ has length {}, Z has {} columns", theta.len(), ds.q())));
    }
    let ing = Ingredients::new(ds, family, fit, derivs)?;
    let pt = ing
        .point(0, indicator(ds.z_group(), theta))
        .ok_or_else(|| Error::SingularInformation("Ṽ(θ) is singular even after a ridge".into()))?;
    Ok(ScorePoint {
        statistic: pt.statistic,
        ridged: pt.ridged,
    })
}

/// Factorized grid, ready for the observed statistic and for resampling.
pub struct SstCache<'a> {
    ing: Ingredients<'a>,
    points: Vec<GridPoint>,
    pub n_skipped: usize,
    pub n_ridged: usize,
}

impl<'a> SstCache<'a> {
    pub fn new(
        ds: &'a Dataset,
        family: &FamilyKind,
        fit: &NullFit,
        derivs: &'a SstDerivatives,
        grid: &ThetaGrid,
    ) -> Result<Self> {
        if grid.is_empty() {
            return Err(Error::Grid("the grid has no rows".into()));
        }
        if grid.thetas.ncols() != ds.q() {
            return Err(Error::DimensionMismatch(format!(
                "grid has {} columns, Z has {}",
                grid.thetas.ncols(),
                ds.q()
            )));
        }
        let ing = Ingredients::new(ds, family, fit, derivs)?;
        let z = ds.z_group();
        let candidates: Vec<Option<GridPoint>> = (0..grid.len())
            .into_par_iter()
            .map(|k| ing.point(k, indicator(z, &grid.theta(k))))
            .collect();
        let n_skipped = candidates.iter().filter(|c| c.is_none()).count();
        let points: Vec<GridPoint> = candidates.into_iter().flatten().collect();
        if points.is_empty() {
            return Err(Error::DegenerateGrid);
        }
        let n_ridged = points.iter().filter(|p| p.ridged).count();
        Ok(Self {
            ing,
            points,
            n_skipped,
            n_ridged,
        })
    }

    /// `sup_θ T̃ₙ(θ)` over the grid points that could be factorized.
    pub fn statistic(&self) -> f64 {
        self.points.iter().map(|p| p.statistic).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Per-row statistics; `None` for skipped rows.
    pub fn point_statistics(&self, k: usize) -> Vec<Option<f64>> {
        let mut out = vec![None; k];
        for p in &self.points {
            out[p.index] = Some(p.statistic);
        }
        out
    }

    /// Perturbed suprema for multiplier matrix `nu` (`n × N`, one column per draw).
    pub fn perturbed(&self, nu: &DMatrix<f64>, sign: PerturbationSign) -> Vec<f64> {
        let x = self.ing.x;
        let (n, p) = x.shape();
        let draws = nu.ncols();
        // Column block a holds ν_i s_i X_ia for every draw.
        let mut y = DMatrix::zeros(n, p * draws);
        for a in 0..p {
            for j in 0..draws {
                for i in 0..n {
                    y[(i, a * draws + j)] = nu[(i, j)] * self.ing.factor[i] * x[(i, a)];
                }
            }
        }
        let kpts = self.points.len();
        let ind = DMatrix::from_fn(kpts, n, |k, i| if self.points[k].indicator[i] { 1.0 } else { 0.0 });
        let sums = ind * y;
        // u_j = Σ ν_i M_i, an r × N matrix.
        let u = self.ing.m_rows.transpose() * nu;
        let sgn = sign.factor();
        let mut best = vec![f64::NEG_INFINITY; draws];
        let mut s = DVector::zeros(p);
        for (k, pt) in self.points.iter().enumerate() {
            let ku = &pt.k_hat * &u;
            for j in 0..draws {
                for a in 0..p {
                    s[a] = sums[(k, a * draws + j)] + sgn * ku[(a, j)];
                }
                let Some(z) = pt.chol.l().solve_lower_triangular(&s) else {
                    continue;
                };
                let t = z.norm_squared() / n as f64;
                if t > best[j] {
                    best[j] = t;
                }
            }
        }
        best
    }
}

pub fn sst_statistic(
    ds: &Dataset,
    family: &FamilyKind,
    fit: &NullFit,
    derivs: &SstDerivatives,
    grid: &ThetaGrid,
) -> Result<f64> {
    Ok(SstCache::new(ds, family, fit, derivs, grid)?.statistic())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SstOptions {
    pub k_directions: usize,
    pub grid_per_direction: usize,
    pub n_resample: usize,
    pub sign: PerturbationSign,
    pub bandwidth: Option<f64>,
    pub fit: FitOptions,
}

impl SstOptions {
    /// Defaults: 1000 directions (2000 for quantile regression), 1000 draws.
    pub fn for_family(family: &FamilyKind) -> Self {
        Self {
            k_directions: match family {
                FamilyKind::Quantile { .. } => 2000,
                _ => 1000,
            },
            grid_per_direction: 1,
            n_resample: 1000,
            sign: PerturbationSign::Plus,
            bandwidth: None,
            fit: FitOptions::default(),
        }
    }
}

/// Fit, build the grid and calibrate the supremum by perturbation.
pub fn sst_test(ds: &Dataset, family: &FamilyKind, opts: &SstOptions, seed: u64) -> Result<TestOutcome> {
    if opts.n_resample == 0 {
        return Err(Error::InvalidParameter("the number of perturbation draws must be at least 1".into()));
    }
    let fit = models::fit_null(ds, family, &opts.fit)?;
    if !fit.converged {
        return Err(Error::NonConvergence(format!(
            "{} after {} iterations, gradient norm {:e}",
            family.name(),
            fit.iterations,
            fit.gradient_norm
        )));
    }
    let derivs = models::sst_derivatives(ds, family, &fit, &DerivativeOptions { bandwidth: opts.bandwidth })?;
    let grid = build_theta_grid(
        ds.z_group(),
        opts.k_directions,
        opts.grid_per_direction,
        rng::derive_seed(seed, &[0x6a1d]),
    )?;
    let cache = SstCache::new(ds, family, &fit, &derivs, &grid)?;
    let statistic = cache.statistic();
    let nu_seed = rng::derive_seed(seed, &[0x0e75]);
    let n = ds.n();
    let chunks: Vec<(usize, usize)> = (0..opts.n_resample)
        .step_by(RESAMPLE_CHUNK)
        .map(|s| (s, (s + RESAMPLE_CHUNK).min(opts.n_resample)))
        .collect();
    let parts: Vec<Vec<f64>> = chunks
        .par_iter()
        .map(|&(lo, hi)| {
            let mut nu = DMatrix::zeros(n, hi - lo);
            for j in lo..hi {
                let mut g = rng::stream(nu_seed, j as u64);
                for i in 0..n {
                    nu[(i, j - lo)] = StandardNormal.sample(&mut g);
                }
            }
            cache.perturbed(&nu, opts.sign)
        })
        .collect();
    let boot_stats: Vec<f64> = parts.into_iter().flatten().collect();
    Ok(TestOutcome {
        p_value: p_value(statistic, &boot_stats),
        statistic,
        n_boot: opts.n_resample,
        n_failed: 0,
        boot_stats,
        family: *family,
        weight: format!(
            "{} points={} skipped={} ridged={}",
            grid.descriptor(),
            grid.len(),
            cache.n_skipped,
            cache.n_ridged
        ),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small() -> Dataset {
        let y = DVector::from_vec(vec![1.0, 3.0, 2.0, 6.0, 4.0, 0.5, 2.5, 5.0]);
        let n = y.len();
        let z = DMatrix::from_fn(n, 2, |i, k| if k == 0 { 1.0 } else { i as f64 });
        Dataset::new(y, DMatrix::from_element(n, 1, 1.0), DMatrix::from_element(n, 1, 1.0), z).unwrap()
    }

    #[test]
    fn grid_requires_grouping_variable() {
        let z = DMatrix::from_element(5, 1, 1.0);
        assert!(matches!(build_theta_grid(&z, 3, 1, 0), Err(Error::Grid(_))));
    }

    #[test]
    fn constant_projection_collapses_intercepts() {
        let z = DMatrix::from_fn(6, 2, |_, k| if k == 0 { 1.0 } else { 2.0 });
        let g = build_theta_grid(&z, 1, 4, 1).unwrap();
        let first = g.thetas[(0, 0)];
        assert!((0..4).all(|k| g.thetas[(k, 0)] == first));
    }

    #[test]
    fn grid_rows_are_normalized_and_reproducible() {
        let z = DMatrix::from_fn(50, 4, |i, k| if k == 0 { 1.0 } else { ((i * 7 + k * 3) % 11) as f64 });
        let a = build_theta_grid(&z, 20, 3, 9).unwrap();
        let b = build_theta_grid(&z, 20, 3, 9).unwrap();
        assert_eq!(a, b);
        for k in 0..a.len() {
            assert_relative_eq!(a.thetas.row(k).columns(1, 3).norm(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn three_observation_hand_case() {
        // Gaussian, X̃ = X = 1, θ selecting rows 2 and 3.
        let y = DVector::from_vec(vec![0.0, 1.0, 5.0]);
        let z = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0]);
        let ds = Dataset::new(y, DMatrix::from_element(3, 1, 1.0), DMatrix::from_element(3, 1, 1.0), z).unwrap();
        let fam = FamilyKind::GaussianGlm;
        let fit = models::fit_null(&ds, &fam, &FitOptions::default()).unwrap();
        let d = models::sst_derivatives(&ds, &fam, &fit, &DerivativeOptions::default()).unwrap();
        let theta = DVector::from_vec(vec![-0.5, 1.0]);
        let got = score_test_at(&ds, &fam, &fit, &d, &theta).unwrap();
        // residuals (-2, -1, 3); K̂ = -2/3, Ĵ = -1, so e_i = 1_i r_i - (2/3) r_i.
        let r = [-2.0, -1.0, 3.0];
        let ind = [0.0, 1.0, 1.0];
        let psi: f64 = (0..3).map(|i| ind[i] * r[i]).sum();
        let v: f64 = (0..3).map(|i| (ind[i] * r[i] - 2.0 / 3.0 * r[i]).powi(2)).sum::<f64>() / 3.0;
        assert_relative_eq!(got.statistic, psi * psi / (3.0 * v), max_relative = 1e-12);
        assert!(!got.ridged);
    }

    #[test]
    fn zero_score_gives_zero() {
        let n = 6;
        let y = DVector::from_element(n, 2.0);
        let mut yv = y.clone();
        yv[0] = 2.5;
        yv[1] = 1.5;
        let z = DMatrix::from_fn(n, 2, |i, k| if k == 0 { 1.0 } else { i as f64 });
        let ds = Dataset::new(yv, DMatrix::from_element(n, 1, 1.0), DMatrix::from_element(n, 1, 1.0), z).unwrap();
        let fam = FamilyKind::GaussianGlm;
        let fit = models::fit_null(&ds, &fam, &FitOptions::default()).unwrap();
        let d = models::sst_derivatives(&ds, &fam, &fit, &DerivativeOptions::default()).unwrap();
        let t = score_test_at(&ds, &fam, &fit, &d, &DVector::from_vec(vec![-2.0, 1.0])).unwrap();
        assert!(t.statistic.abs() < 1e-20);
    }

    #[test]
    fn supremum_is_max_of_rows_and_ignores_duplicates() {
        let ds = small();
        let fam = FamilyKind::GaussianGlm;
        let fit = models::fit_null(&ds, &fam, &FitOptions::default()).unwrap();
        let d = models::sst_derivatives(&ds, &fam, &fit, &DerivativeOptions::default()).unwrap();
        let rows = DMatrix::from_row_slice(5, 2, &[-1.5, 1.0, -2.5, 1.0, -3.5, 1.0, -4.5, 1.0, -5.5, 1.0]);
        let grid = ThetaGrid::from_rows(rows.clone()).unwrap();
        let sup = sst_statistic(&ds, &fam, &fit, &d, &grid).unwrap();
        let each: Vec<f64> = (0..5)
            .map(|k| score_test_at(&ds, &fam, &fit, &d, &rows.row(k).transpose()).unwrap().statistic)
            .collect();
        assert_eq!(sup, each.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        let dup = DMatrix::from_fn(10, 2, |k, c| rows[(k % 5, c)]);
        assert_eq!(sst_statistic(&ds, &fam, &fit, &d, &ThetaGrid::from_rows(dup).unwrap()).unwrap(), sup);
        let one = ThetaGrid::from_rows(rows.rows(2, 1).into_owned()).unwrap();
        assert_eq!(sst_statistic(&ds, &fam, &fit, &d, &one).unwrap(), each[2]);
    }

    #[test]
    fn perturbation_matches_direct_formula() {
        let ds = small();
        let fam = FamilyKind::GaussianGlm;
        let fit = models::fit_null(&ds, &fam, &FitOptions::default()).unwrap();
        let d = models::sst_derivatives(&ds, &fam, &fit, &DerivativeOptions::default()).unwrap();
        let rows = DMatrix::from_row_slice(2, 2, &[-2.5, 1.0, -4.5, 1.0]);
        let grid = ThetaGrid::from_rows(rows.clone()).unwrap();
        let cache = SstCache::new(&ds, &fam, &fit, &d, &grid).unwrap();
        let n = ds.n();
        let nu = DMatrix::from_fn(n, 1, |i, _| (i as f64 * 0.37).sin());
        let got = cache.perturbed(&nu, PerturbationSign::Plus)[0];
        let s = models::score_psi0(&ds, &fam, &fit).unwrap().factor;
        let mut best = f64::NEG_INFINITY;
        for k in 0..2 {
            let th = rows.row(k).transpose();
            let ind = indicator(ds.z_group(), &th);
            let kh = d.k_hat(ds.x_diff(), &ind)[(0, 0)];
            let j = d.j_inv[(0, 0)];
            let e: Vec<f64> = (0..n).map(|i| if ind[i] { s[i] } else { 0.0 } - kh * j * d.psi1[(i, 0)]).collect();
            let v = e.iter().map(|x| x * x).sum::<f64>() / n as f64;
            let pert: f64 = (0..n)
                .map(|i| nu[(i, 0)] * (if ind[i] { s[i] } else { 0.0 } + kh * j * d.psi1[(i, 0)]))
                .sum();
            best = best.max(pert * pert / (n as f64 * v));
        }
        assert_relative_eq!(got, best, max_relative = 1e-12);
    }

    #[test]
    fn sst_test_is_deterministic() {
        let ds = small();
        let mut o = SstOptions::for_family(&FamilyKind::GaussianGlm);
        o.k_directions = 10;
        o.n_resample = 300;
        let a = sst_test(&ds, &FamilyKind::GaussianGlm, &o, 4).unwrap();
        let b = sst_test(&ds, &FamilyKind::GaussianGlm, &o, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.boot_stats.len(), 300);
    }
}
