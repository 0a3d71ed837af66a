use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use changeplane::models::{self, DerivativeOptions, FamilyKind, FitOptions};
use changeplane::rng;
use changeplane::sim::{Generator, Scenario};
use changeplane::sst::{build_theta_grid, score_test_at, SstCache};
use changeplane::wast::{p_value, wast_statistic, wast_test_with_kernel, PairKernel};
use changeplane::weights::{weight_matrix_for, WeightSpec};
use changeplane::Dataset;

fn normal<R: Rng + ?Sized>(g: &mut R) -> f64 {
    StandardNormal.sample(g)
}

fn gaussian_null(n: usize, seed: u64) -> Dataset {
    let sc = Scenario::new(FamilyKind::GaussianGlm, (2, 2, 3), n);
    Generator::new(&sc).unwrap().generate(&mut rng::stream(seed, 0)).unwrap()
}

fn matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut g = rng::stream(seed, 0);
    DMatrix::from_fn(rows, cols, |_, _| normal(&mut g))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn closed_form_weights_are_symmetric_bounded_and_scale_free(
        seed in any::<u64>(),
        n in 2usize..12,
        q in 1usize..6,
        scales in proptest::collection::vec(0.01f64..100.0, 12),
    ) {
        let z = matrix(n, q, seed);
        let w = weight_matrix_for(&z, &WeightSpec::StandardGaussianClosedForm).unwrap();
        let m = w.as_matrix();
        prop_assert_eq!(m, &m.transpose());
        for i in 0..n {
            prop_assert_eq!(m[(i, i)], 0.0);
            for j in (0..n).filter(|&j| j != i) {
                prop_assert!((0.0..=0.5).contains(&m[(i, j)]));
            }
        }
        let scaled = DMatrix::from_fn(n, q, |i, j| z[(i, j)] * scales[i]);
        let ws = weight_matrix_for(&scaled, &WeightSpec::StandardGaussianClosedForm).unwrap();
        for (a, b) in m.iter().zip(ws.as_matrix().iter()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn scalar_prior_weights_lie_in_unit_interval(seed in any::<u64>(), n in 2usize..10, l1 in 0.2f64..5.0, l2 in 0.2f64..5.0) {
        let mut g = rng::stream(seed, 0);
        let z = DMatrix::from_fn(n, 2, |_, j| if j == 0 { 1.0 } else { g.random::<f64>() });
        for spec in [
            WeightSpec::Beta { lambda1: l1, lambda2: l2 },
            WeightSpec::UnivariateGaussian { mu: 0.5, sigma2: l1 },
        ] {
            let w = weight_matrix_for(&z, &spec).unwrap();
            prop_assert!(w.as_matrix().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(w.as_matrix(), &w.as_matrix().transpose());
        }
    }

    #[test]
    fn wast_is_permutation_invariant(seed in any::<u64>(), n in 3usize..15) {
        let mut g = rng::stream(seed, 1);
        let x = matrix(n, 2, seed);
        let z = matrix(n, 3, seed ^ 7);
        let s = DVector::from_fn(n, |_, _| normal(&mut g));
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, g.random_range(0..=i));
        }
        let stat = |x: &DMatrix<f64>, z: &DMatrix<f64>, s: &DVector<f64>| {
            let psi0 = models::ScoreVector::from_factor(s.clone(), x).unwrap();
            let w = weight_matrix_for(z, &WeightSpec::StandardGaussianClosedForm).unwrap();
            wast_statistic(&psi0, &w).unwrap()
        };
        let xp = DMatrix::from_fn(n, 2, |i, j| x[(perm[i], j)]);
        let zp = DMatrix::from_fn(n, 3, |i, j| z[(perm[i], j)]);
        let sp = DVector::from_fn(n, |i, _| s[perm[i]]);
        let a = stat(&x, &z, &s);
        let b = stat(&xp, &zp, &sp);
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-3));
    }

    #[test]
    fn score_test_ignores_positive_rescaling_of_theta(seed in any::<u64>(), c in 1e-3f64..1e3) {
        let ds = gaussian_null(40, seed);
        let fam = FamilyKind::GaussianGlm;
        let fit = models::fit_null(&ds, &fam, &FitOptions::default()).unwrap();
        let d = models::sst_derivatives(&ds, &fam, &fit, &DerivativeOptions::default()).unwrap();
        let mut g = rng::stream(seed, 2);
        let theta = DVector::from_fn(3, |_, _| normal(&mut g));
        let a = score_test_at(&ds, &fam, &fit, &d, &theta);
        let b = score_test_at(&ds, &fam, &fit, &d, &(theta * c));
        match (a, b) {
            (Ok(a), Ok(b)) => prop_assert_eq!(a.statistic, b.statistic),
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "rescaling changed solvability"),
        }
    }
}

#[test]
fn monte_carlo_weights_track_the_closed_form_on_a_sample() {
    let z = matrix(50, 3, 11);
    let closed = weight_matrix_for(&z, &WeightSpec::StandardGaussianClosedForm).unwrap();
    let mc = weight_matrix_for(&z, &WeightSpec::standard_gaussian_mc(3, 100_000, 5)).unwrap();
    let gap = (closed.as_matrix() - mc.as_matrix()).amax();
    assert!(gap < 0.01, "max gap {gap}");
}

#[test]
fn refitting_at_the_optimum_is_stable() {
    let opts = FitOptions::default();
    for (fam, dims) in [
        (FamilyKind::GaussianGlm, (3, 2, 3)),
        (FamilyKind::BinomialGlm, (3, 2, 3)),
        (FamilyKind::PoissonGlm, (3, 2, 3)),
        (FamilyKind::Probit, (2, 2, 3)),
        (FamilyKind::Quantile { tau: 0.3 }, (2, 2, 3)),
        (FamilyKind::Semiparametric, (3, 2, 5)),
    ] {
        let ds = Generator::new(&Scenario::new(fam, dims, 150)).unwrap().generate(&mut rng::stream(21, 0)).unwrap();
        let a = models::fit_null(&ds, &fam, &opts).unwrap();
        let b = models::fit_null(&ds, &fam, &opts).unwrap();
        assert!(a.converged, "{}", fam.name());
        assert!((&a.alpha_hat - &b.alpha_hat).amax() < opts.tol, "{}", fam.name());
    }
}

#[test]
fn quantile_fit_balances_negative_residuals() {
    for (k, tau) in [0.2, 0.5, 0.7].into_iter().enumerate() {
        let fam = FamilyKind::Quantile { tau };
        let ds = Generator::new(&Scenario::new(fam, (2, 3, 3), 180))
            .unwrap()
            .generate(&mut rng::stream(31, k as u64))
            .unwrap();
        let fit = models::fit_null(&ds, &fam, &FitOptions::default()).unwrap();
        let resid = ds.y() - ds.x_base() * &fit.alpha_hat;
        let n = ds.n() as f64;
        let share = resid.iter().filter(|&&r| r < -1e-9).count() as f64 / n;
        let slack = ds.r() as f64 / n;
        assert!((share - tau).abs() <= slack + 1e-12, "tau {tau}: share {share}");
    }
}

#[test]
fn cached_kernel_matches_per_replicate_weights() {
    let ds = gaussian_null(30, 41);
    let fam = FamilyKind::GaussianGlm;
    let w = weight_matrix_for(ds.z_group(), &WeightSpec::StandardGaussianClosedForm).unwrap();
    let kernel = PairKernel::new(ds.x_diff(), &w).unwrap();
    let opts = FitOptions::default();
    let (_, boot, failed) = wast_test_with_kernel(&ds, &fam, &kernel, 20, 9, &opts).unwrap();
    assert_eq!(failed, 0);
    // Recompute each replicate from scratch, weights included.
    let boot_seed = rng::derive_seed(9, &[0x57a5]);
    for (b, &t) in boot.iter().enumerate() {
        let fit = models::fit_null(&ds, &fam, &opts).unwrap();
        let ystar = models::bootstrap_sample(&ds, &fam, &fit, &mut rng::stream(boot_seed, b as u64)).unwrap();
        let refit = models::fit_null(&ystar, &fam, &opts).unwrap();
        let psi0 = models::score_psi0(&ystar, &fam, &refit).unwrap();
        let w_b = weight_matrix_for(ystar.z_group(), &WeightSpec::StandardGaussianClosedForm).unwrap();
        let direct = wast_statistic(&psi0, &w_b).unwrap();
        assert!((direct - t).abs() <= 1e-10 * t.abs().max(1e-6), "replicate {b}: {direct} vs {t}");
    }
}

#[test]
fn p_values_live_on_the_bootstrap_lattice() {
    let mut g = rng::stream(51, 0);
    let boot: Vec<f64> = (0..40).map(|_| normal(&mut g)).collect();
    for t in [-3.0, -0.2, 0.0, 0.4, 5.0] {
        let p = p_value(t, &boot);
        let k = p * 40.0;
        assert!((k - k.round()).abs() < 1e-12 && (0.0..=1.0).contains(&p));
    }
}

#[test]
fn sup_statistic_dominates_every_grid_point() {
    let ds = gaussian_null(60, 61);
    let fam = FamilyKind::GaussianGlm;
    let fit = models::fit_null(&ds, &fam, &FitOptions::default()).unwrap();
    let d = models::sst_derivatives(&ds, &fam, &fit, &DerivativeOptions::default()).unwrap();
    let grid = build_theta_grid(ds.z_group(), 40, 3, 7).unwrap();
    let cache = SstCache::new(&ds, &fam, &fit, &d, &grid).unwrap();
    let sup = cache.statistic();
    for k in 0..grid.len() {
        let t = score_test_at(&ds, &fam, &fit, &d, &grid.theta(k)).unwrap().statistic;
        assert!(sup >= t - 1e-12 * t.abs().max(1.0), "grid point {k}: {t} > {sup}");
    }
}

#[test]
fn grid_rows_split_between_ten_and_ninety_percent() {
    let ds = gaussian_null(200, 71);
    let grid = build_theta_grid(ds.z_group(), 1000, 1, 3).unwrap();
    assert_eq!(grid.len(), 1000);
    for k in 0..grid.len() {
        let th = grid.theta(k);
        let ones = (0..200).filter(|&i| ds.z_group().row(i).transpose().dot(&th) >= 0.0).count();
        assert!((20..=180).contains(&ones), "row {k}: {ones} of 200");
    }
}
