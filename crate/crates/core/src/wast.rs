//! Weighted-average score test.
//!
//! With `ψ₀_i = s_i X_i` the statistic is `s'Cs / (n(n-1))` for the fixed
//! pair kernel `C_ij = ω_ij X_i'X_j` (zero diagonal). Bootstrap replicates
//! only change `s`, so `C` is built once per test.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{self, FamilyKind, FitOptions, NullFit, ScoreVector};
use crate::rng;
use crate::weights::{weight_matrix_for, WeightMatrix, WeightSpec};

/// Largest tolerated share of failed bootstrap refits.
pub const MAX_FAILURE_SHARE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct TestOutcome {
    pub statistic: f64,
    /// Statistics of the replicates that succeeded, in replicate order.
    pub boot_stats: Vec<f64>,
    pub p_value: f64,
    pub n_boot: usize,
    pub n_failed: usize,
    pub family: FamilyKind,
    /// Weight descriptor for the averaged test, grid description for the supremum test.
    pub weight: String,
    pub seed: u64,
}

/// Share of replicates at least as large as the observed statistic.
pub fn p_value(statistic: f64, boot_stats: &[f64]) -> f64 {
    if boot_stats.is_empty() {
        return f64::NAN;
    }
    boot_stats.iter().filter(|&&b| b >= statistic).count() as f64 / boot_stats.len() as f64
}

pub(crate) fn check_failures(failed: usize, total: usize) -> Result<()> {
    if failed as f64 > MAX_FAILURE_SHARE * total as f64 {
        Err(Error::TooManyFailures { failed, total })
    } else {
        Ok(())
    }
}

/// `(n(n−1))⁻¹ Σ_{i≠j} ω_ij ⟨ψ₀_i, ψ₀_j⟩`.
pub fn wast_statistic(psi0: &ScoreVector, omega: &WeightMatrix) -> Result<f64> {
    let n = psi0.n();
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }
    if omega.n() != n {
        return Err(Error::DimensionMismatch(format!("{n} score rows, weight matrix of order {}", omega.n())));
    }
    let gram = &psi0.psi0 * psi0.psi0.transpose();
    let w = omega.as_matrix();
    let total: f64 = (0..n)
        .into_par_iter()
        .map(|i| (0..i).map(|j| w[(i, j)] * gram[(i, j)]).sum::<f64>())
        .collect::<Vec<_>>()
        .iter()
        .sum();
    Ok(2.0 * total / (n as f64 * (n as f64 - 1.0)))
}

/// Cached `C_ij = Σ_t ω^{(t)}_ij X_ti'X_tj`, zero on the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct PairKernel {
    c: DMatrix<f64>,
}

impl PairKernel {
    pub fn new(x_diff: &DMatrix<f64>, omega: &WeightMatrix) -> Result<Self> {
        let n = x_diff.nrows();
        if omega.n() != n {
            return Err(Error::DimensionMismatch(format!("{n} rows, weight matrix of order {}", omega.n())));
        }
        let mut c = x_diff * x_diff.transpose();
        c.component_mul_assign(omega.as_matrix());
        c.fill_diagonal(0.0);
        Ok(Self { c })
    }

    pub fn n(&self) -> usize {
        self.c.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.c
    }

    fn add(&mut self, other: &PairKernel) {
        self.c += &other.c;
    }

    /// `s'Cs / (n(n−1))`.
    pub fn statistic(&self, factor: &DVector<f64>) -> Result<f64> {
        let n = self.n();
        if n < 2 {
            return Err(Error::InsufficientData { needed: 2, got: n });
        }
        if factor.len() != n {
            return Err(Error::DimensionMismatch("score factor length".into()));
        }
        let cs = &self.c * factor;
        Ok(factor.dot(&cs) / (n as f64 * (n as f64 - 1.0)))
    }
}

/// One change plane: its difference covariates, grouping variables and weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub x_diff: DMatrix<f64>,
    pub z_group: DMatrix<f64>,
    pub weight: WeightSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiPlaneSpec {
    pub planes: Vec<Plane>,
}

impl MultiPlaneSpec {
    pub fn new(planes: Vec<Plane>) -> Result<Self> {
        if planes.is_empty() {
            return Err(Error::Config("a multi-plane test needs at least one plane".into()));
        }
        let n = planes[0].x_diff.nrows();
        for (t, pl) in planes.iter().enumerate() {
            if pl.x_diff.ncols() == 0 || pl.z_group.ncols() == 0 {
                return Err(Error::Config(format!("plane {} has an empty block", t + 1)));
            }
            if pl.x_diff.nrows() != n || pl.z_group.nrows() != n {
                return Err(Error::DimensionMismatch(format!("plane {} row count", t + 1)));
            }
        }
        Ok(Self { planes })
    }

    /// Kernel `ω̃_ij = Σ_t X_ti'X_tj ω^{(t)}_ij`.
    pub fn kernel(&self) -> Result<PairKernel> {
        let mut total: Option<PairKernel> = None;
        for pl in &self.planes {
            let w = weight_matrix_for(&pl.z_group, &pl.weight)?;
            let k = PairKernel::new(&pl.x_diff, &w)?;
            match total.as_mut() {
                Some(t) => t.add(&k),
                None => total = Some(k),
            }
        }
        total.ok_or_else(|| Error::Config("no planes".into()))
    }

    pub fn descriptor(&self) -> String {
        let parts: Vec<String> = self.planes.iter().map(|p| p.weight.descriptor()).collect();
        format!("multi[{}]", parts.join("; "))
    }
}

/// Multi-plane statistic from scalar score factors `s_i`.
pub fn wast_multi_statistic(factor: &DVector<f64>, spec: &MultiPlaneSpec) -> Result<f64> {
    spec.kernel()?.statistic(factor)
}

fn fit_converged(ds: &Dataset, family: &FamilyKind, opts: &FitOptions) -> Result<NullFit> {
    let fit = models::fit_null(ds, family, opts)?;
    if !fit.converged {
        return Err(Error::NonConvergence(format!(
            "{} after {} iterations, gradient norm {:e}",
            family.name(),
            fit.iterations,
            fit.gradient_norm
        )));
    }
    Ok(fit)
}

/// Bootstrap calibration with a precomputed kernel.
pub fn wast_test_with_kernel(
    ds: &Dataset,
    family: &FamilyKind,
    kernel: &PairKernel,
    n_boot: usize,
    seed: u64,
    opts: &FitOptions,
) -> Result<(f64, Vec<f64>, usize)> {
    if n_boot == 0 {
        return Err(Error::InvalidParameter("the number of bootstrap replicates must be at least 1".into()));
    }
    if kernel.n() != ds.n() {
        return Err(Error::DimensionMismatch("kernel order differs from sample size".into()));
    }
    let fit = fit_converged(ds, family, opts)?;
    let statistic = kernel.statistic(&models::score_factor(ds, family, &fit.alpha_hat)?)?;
    let boot_seed = rng::derive_seed(seed, &[0x57a5]);
    let reps: Vec<Option<f64>> = (0..n_boot)
        .into_par_iter()
        .map(|b| {
            let mut stream = rng::stream(boot_seed, b as u64);
            let star = models::bootstrap_sample(ds, family, &fit, &mut stream).ok()?;
            let refit = models::fit_null(&star, family, opts).ok().filter(|f| f.converged)?;
            let s = models::score_factor(&star, family, &refit.alpha_hat).ok()?;
            kernel.statistic(&s).ok().filter(|t| t.is_finite())
        })
        .collect();
    let boot: Vec<f64> = reps.iter().flatten().copied().collect();
    let failed = n_boot - boot.len();
    check_failures(failed, n_boot)?;
    Ok((statistic, boot, failed))
}

pub fn wast_test(ds: &Dataset, family: &FamilyKind, weight: &WeightSpec, n_boot: usize, seed: u64) -> Result<TestOutcome> {
    wast_test_opts(ds, family, weight, n_boot, seed, &FitOptions::default())
}

pub fn wast_test_opts(
    ds: &Dataset,
    family: &FamilyKind,
    weight: &WeightSpec,
    n_boot: usize,
    seed: u64,
    opts: &FitOptions,
) -> Result<TestOutcome> {
    let omega = weight_matrix_for(ds.z_group(), weight)?;
    let kernel = PairKernel::new(ds.x_diff(), &omega)?;
    let (statistic, boot_stats, n_failed) = wast_test_with_kernel(ds, family, &kernel, n_boot, seed, opts)?;
    Ok(TestOutcome {
        p_value: p_value(statistic, &boot_stats),
        statistic,
        boot_stats,
        n_boot,
        n_failed,
        family: *family,
        weight: weight.descriptor(),
        seed,
    })
}

pub fn wast_multi_test(
    ds: &Dataset,
    family: &FamilyKind,
    spec: &MultiPlaneSpec,
    n_boot: usize,
    seed: u64,
    opts: &FitOptions,
) -> Result<TestOutcome> {
    let kernel = spec.kernel()?;
    let (statistic, boot_stats, n_failed) = wast_test_with_kernel(ds, family, &kernel, n_boot, seed, opts)?;
    Ok(TestOutcome {
        p_value: p_value(statistic, &boot_stats),
        statistic,
        boot_stats,
        n_boot,
        n_failed,
        family: *family,
        weight: spec.descriptor(),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn brute(psi: &DMatrix<f64>, w: &DMatrix<f64>) -> f64 {
        let n = psi.nrows();
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += w[(i, j)] * psi.row(i).dot(&psi.row(j));
                }
            }
        }
        s / (n * (n - 1)) as f64
    }

    #[test]
    fn two_point_example() {
        let s = ScoreVector::from_factor(DVector::from_vec(vec![1.0, 1.0]), &DMatrix::from_element(2, 1, 1.0)).unwrap();
        let w = WeightMatrix::from_matrix(DMatrix::from_row_slice(2, 2, &[0.5, 0.25, 0.25, 0.5])).unwrap();
        assert_relative_eq!(wast_statistic(&s, &w).unwrap(), 0.25);
        let zero = ScoreVector::from_factor(DVector::zeros(2), &DMatrix::from_element(2, 1, 1.0)).unwrap();
        assert_eq!(wast_statistic(&zero, &w).unwrap(), 0.0);
    }

    #[test]
    fn single_row_is_insufficient() {
        let s = ScoreVector::from_factor(DVector::from_vec(vec![1.0]), &DMatrix::from_element(1, 1, 1.0)).unwrap();
        let w = WeightMatrix::from_matrix(DMatrix::from_element(1, 1, 0.5)).unwrap();
        assert!(matches!(wast_statistic(&s, &w), Err(Error::InsufficientData { .. })));
    }

    #[test]
    fn kernel_matches_brute_force() {
        let mut g = rng::stream(1, 1);
        for _ in 0..10 {
            let n = g.random_range(2..10);
            let p = g.random_range(1..4);
            let x = DMatrix::from_fn(n, p, |_, _| g.random::<f64>() - 0.5);
            let z = DMatrix::from_fn(n, 3, |_, k| if k == 0 { 1.0 } else { g.random::<f64>() - 0.5 });
            let s = DVector::from_fn(n, |_, _| g.random::<f64>() - 0.5);
            let w = weight_matrix_for(&z, &WeightSpec::default()).unwrap();
            let sv = ScoreVector::from_factor(s.clone(), &x).unwrap();
            let b = brute(&sv.psi0, w.as_matrix());
            assert_relative_eq!(wast_statistic(&sv, &w).unwrap(), b, max_relative = 1e-12);
            assert_relative_eq!(PairKernel::new(&x, &w).unwrap().statistic(&s).unwrap(), b, max_relative = 1e-12);
        }
    }

    #[test]
    fn identical_planes_double_the_kernel() {
        let mut g = rng::stream(2, 2);
        let n = 6;
        let x = DMatrix::from_fn(n, 2, |_, _| g.random::<f64>());
        let z = DMatrix::from_fn(n, 2, |_, k| if k == 0 { 1.0 } else { g.random::<f64>() });
        let plane = Plane {
            x_diff: x.clone(),
            z_group: z.clone(),
            weight: WeightSpec::default(),
        };
        let one = MultiPlaneSpec::new(vec![plane.clone()]).unwrap().kernel().unwrap();
        let two = MultiPlaneSpec::new(vec![plane.clone(), plane]).unwrap().kernel().unwrap();
        assert_eq!(two.matrix(), &(one.matrix() * 2.0));
        let s = DVector::from_fn(n, |_, _| g.random::<f64>() - 0.5);
        let w = weight_matrix_for(&z, &WeightSpec::default()).unwrap();
        let sv = ScoreVector::from_factor(s.clone(), &x).unwrap();
        assert_relative_eq!(one.statistic(&s).unwrap(), wast_statistic(&sv, &w).unwrap(), max_relative = 1e-12);
    }

    #[test]
    fn p_value_counting() {
        assert_eq!(p_value(1.0, &[2.0]), 1.0);
        assert_eq!(p_value(3.0, &[2.0]), 0.0);
        assert_eq!(p_value(2.0, &[2.0, 1.0, 3.0, 0.0]), 0.5);
    }

    #[test]
    fn failure_breaker() {
        assert!(check_failures(5, 100).is_ok());
        assert!(matches!(check_failures(6, 100), Err(Error::TooManyFailures { failed: 6, total: 100 })));
    }
}
