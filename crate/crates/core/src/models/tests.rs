use super::*;
use crate::rng;
use approx::assert_relative_eq;
use rand_distr::{Distribution, StandardNormal};

fn normal(g: &mut rng::Stream) -> f64 {
    StandardNormal.sample(g)
}

fn intercept_only(y: &[f64]) -> Dataset {
    let n = y.len();
    Dataset::new(
        DVector::from_column_slice(y),
        DMatrix::from_element(n, 1, 1.0),
        DMatrix::from_element(n, 1, 1.0),
        DMatrix::from_fn(n, 2, |i, k| if k == 0 { 1.0 } else { i as f64 }),
    )
    .unwrap()
}

fn random_design(n: usize, r: usize, p: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let mut g = rng::stream(seed, 0);
    let xb = DMatrix::from_fn(n, r, |_, k| if k == 0 { 1.0 } else { StandardNormal.sample(&mut g) });
    let xd = DMatrix::from_fn(n, p, |i, k| if k == 0 { 1.0 } else { xb[(i, 1.min(r - 1))] * 0.5 + normal(&mut g).abs() * 0.1 });
    let z = DMatrix::from_fn(n, 3, |_, k| if k == 0 { 1.0 } else { StandardNormal.sample(&mut g) });
    (xb, xd, z)
}

#[test]
fn gaussian_intercept_is_sample_mean() {
    let ds = intercept_only(&[1.0, 2.0, 3.0]);
    let fit = fit_null(&ds, &FamilyKind::GaussianGlm, &FitOptions::default()).unwrap();
    assert!(fit.converged);
    assert_relative_eq!(fit.alpha_hat[0], 2.0, epsilon = 1e-12);
}

#[test]
fn binomial_intercept_is_logit_of_rate() {
    let ds = intercept_only(&[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    let fit = fit_null(&ds, &FamilyKind::BinomialGlm, &FitOptions::default()).unwrap();
    assert!(fit.converged);
    assert_relative_eq!(fit.alpha_hat[0], -(2.0f64).ln(), epsilon = 1e-8);
}

#[test]
fn quantile_median_intercept() {
    let ds = intercept_only(&[1.0, 2.0, 9.0]);
    let fit = fit_null(&ds, &FamilyKind::Quantile { tau: 0.5 }, &FitOptions::default()).unwrap();
    assert!(fit.converged);
    assert_relative_eq!(fit.alpha_hat[0], 2.0, epsilon = 1e-12);
}

#[test]
fn poisson_intercept_is_log_mean() {
    let ds = intercept_only(&[1.0, 2.0, 3.0]);
    let fit = fit_null(&ds, &FamilyKind::PoissonGlm, &FitOptions::default()).unwrap();
    assert!(fit.converged);
    assert_relative_eq!(fit.alpha_hat[0], (2.0f64).ln(), epsilon = 1e-9);
    let s = score_factor(&ds, &FamilyKind::PoissonGlm, &DVector::from_element(1, (2.0f64).ln())).unwrap();
    assert!(s.sum().abs() < 1e-12);
}

#[test]
fn rank_deficient_design_is_rejected() {
    let n = 10;
    let xb = DMatrix::from_fn(n, 2, |_, _| 1.0);
    let ds = Dataset::new(
        DVector::from_fn(n, |i, _| i as f64),
        xb,
        DMatrix::from_element(n, 1, 1.0),
        DMatrix::from_fn(n, 2, |i, k| if k == 0 { 1.0 } else { i as f64 }),
    )
    .unwrap();
    assert!(matches!(
        fit_null(&ds, &FamilyKind::GaussianGlm, &FitOptions::default()),
        Err(Error::SingularDesign)
    ));
}

#[test]
fn quantile_zero_residual_counts_as_nonpositive() {
    let ds = intercept_only(&[1.0, 2.0, 9.0]);
    let fit = NullFit {
        alpha_hat: DVector::from_element(1, 2.0),
        converged: true,
        iterations: 0,
        gradient_norm: 0.0,
    };
    let s = score_psi0(&ds, &FamilyKind::Quantile { tau: 0.5 }, &fit).unwrap();
    assert_eq!(s.factor[1], 0.5);
    assert_eq!(s.factor[0], 0.5);
    assert_eq!(s.factor[2], -0.5);
}

#[test]
fn quantile_fit_minimizes_check_loss() {
    for seed in 0..10u64 {
        let n = 60;
        let (xb, xd, z) = random_design(n, 3, 1, seed);
        let mut g = rng::stream(seed, 9);
        let y = DVector::from_fn(n, |i, _| xb[(i, 1)] + normal(&mut g));
        let ds = Dataset::new(y.clone(), xb.clone(), xd, z).unwrap();
        for &tau in &[0.25, 0.5, 0.8] {
            let fit = fit_null(&ds, &FamilyKind::Quantile { tau }, &FitOptions::default()).unwrap();
            assert!(fit.converged);
            let loss = |a: &DVector<f64>| -> f64 {
                let e = &xb * a;
                (0..n).map(|i| check_loss(y[i] - e[i], tau)).sum()
            };
            let best = loss(&fit.alpha_hat);
            for k in 0..3 {
                for &h in &[1e-4, -1e-4, 1e-2, -1e-2] {
                    let mut a = fit.alpha_hat.clone();
                    a[k] += h;
                    assert!(loss(&a) >= best - 1e-10);
                }
            }
            let neg = (0..n).filter(|&i| y[i] - (xb.row(i) * &fit.alpha_hat)[0] < 0.0).count() as f64 / n as f64;
            assert!((neg - tau).abs() <= 3.0 / n as f64 + 1e-12);
        }
    }
}

#[test]
fn glm_and_probit_first_order_conditions() {
    let n = 200;
    let (xb, xd, z) = random_design(n, 3, 2, 5);
    let mut g = rng::stream(5, 1);
    let eta: Vec<f64> = (0..n).map(|i| 0.3 + 0.5 * xb[(i, 1)] - 0.4 * xb[(i, 2)]).collect();
    let yb = DVector::from_fn(n, |i, _| if g.random::<f64>() < glm::expit(eta[i]) { 1.0 } else { 0.0 });
    let yp = DVector::from_fn(n, |i, _| {
        rand_distr::Poisson::new(eta[i].exp()).unwrap().sample(&mut g)
    });
    let ds = Dataset::new(yb.clone(), xb.clone(), xd, z).unwrap();
    for (fam, y) in [
        (FamilyKind::BinomialGlm, yb.clone()),
        (FamilyKind::Probit, yb),
        (FamilyKind::PoissonGlm, yp),
    ] {
        let d = ds.with_response(y).unwrap();
        let fit = fit_null(&d, &fam, &FitOptions::default()).unwrap();
        assert!(fit.converged, "{fam:?}");
        let psi1 = nuisance_score(&d, &fam, &fit.alpha_hat).unwrap();
        let mean = psi1.row_sum() / n as f64;
        assert!(mean.amax() <= 1e-8, "{fam:?}");
        let refit = fit_null(&d, &fam, &FitOptions::default()).unwrap();
        assert!((refit.alpha_hat - &fit.alpha_hat).amax() < 1e-8);
    }
}

fn finite_difference_k(ds: &Dataset, fam: &FamilyKind, alpha: &DVector<f64>, ind: &[bool]) -> DMatrix<f64> {
    let n = ds.n();
    let r = alpha.len();
    let p = ds.p();
    let mean_psi = |a: &DVector<f64>| -> DVector<f64> {
        let s = score_factor(ds, fam, a).unwrap();
        let mut m = DVector::zeros(p);
        for i in (0..n).filter(|&i| ind[i]) {
            for k in 0..p {
                m[k] += s[i] * ds.x_diff()[(i, k)];
            }
        }
        m / n as f64
    };
    let h = 1e-5;
    let mut k = DMatrix::zeros(p, r);
    for b in 0..r {
        let mut ap = alpha.clone();
        let mut am = alpha.clone();
        ap[b] += h;
        am[b] -= h;
        k.set_column(b, &((mean_psi(&ap) - mean_psi(&am)) / (2.0 * h)));
    }
    k
}

#[test]
fn k_hat_matches_finite_differences() {
    let n = 150;
    let (xb, xd, z) = random_design(n, 3, 2, 11);
    let mut g = rng::stream(11, 2);
    let y = DVector::from_fn(n, |i, _| if g.random::<f64>() < glm::expit(0.2 + xb[(i, 1)]) { 1.0 } else { 0.0 });
    let a = DVector::from_fn(n, |i, _| if g.random::<f64>() < glm::expit(0.3 * xb[(i, 2)]) { 1.0 } else { 0.0 });
    let ds = Dataset::new(y, xb, xd, z.clone()).unwrap().with_treatment(a).unwrap();
    let theta = DVector::from_vec(vec![0.1, 0.6, -0.8]);
    let ind: Vec<bool> = (0..n).map(|i| z.row(i).transpose().dot(&theta) >= 0.0).collect();
    for fam in [
        FamilyKind::GaussianGlm,
        FamilyKind::BinomialGlm,
        FamilyKind::PoissonGlm,
        FamilyKind::Probit,
        FamilyKind::Semiparametric,
    ] {
        let fit = fit_null(&ds, &fam, &FitOptions::default()).unwrap();
        let d = sst_derivatives(&ds, &fam, &fit, &DerivativeOptions::default()).unwrap();
        let k = d.k_hat(ds.x_diff(), &ind);
        let fd = finite_difference_k(&ds, &fam, &fit.alpha_hat, &ind);
        let scale = fd.amax().max(1e-12);
        assert!((&k - &fd).amax() / scale < 1e-4, "{fam:?}: {k} vs {fd}");
        let kt = d.k_of_theta(ds.x_diff(), &z, &theta);
        assert_eq!(k, kt);
    }
}

#[test]
fn empty_indicator_gives_zero_k() {
    let ds = intercept_only(&[1.0, 2.0, 3.0, 5.0]);
    let fit = fit_null(&ds, &FamilyKind::GaussianGlm, &FitOptions::default()).unwrap();
    let d = sst_derivatives(&ds, &FamilyKind::GaussianGlm, &fit, &DerivativeOptions::default()).unwrap();
    let k = d.k_of_theta(ds.x_diff(), ds.z_group(), &DVector::from_vec(vec![-100.0, 0.0]));
    assert_eq!(k, DMatrix::zeros(1, 1));
    assert_relative_eq!(d.j_inv[(0, 0)], -1.0);
}

#[test]
fn kde_recovers_standard_normal_density() {
    let mut g = rng::stream(3, 0);
    let r: Vec<f64> = (0..20_000).map(|_| StandardNormal.sample(&mut g)).collect();
    let f0 = kde_at_zero(&r, silverman_bandwidth(&r));
    assert!((f0 - 0.398_942_280_401_432_7).abs() < 0.05);
}

#[test]
fn gaussian_bootstrap_moments() {
    let y = [0.0, 1.0, 2.0, 3.0, 4.0];
    let ds = intercept_only(&y);
    let fit = fit_null(&ds, &FamilyKind::GaussianGlm, &FitOptions::default()).unwrap();
    let sigma2 = 2.0;
    let mut g = rng::stream(1, 0);
    let reps = 20_000;
    let mut sum = 0.0;
    let mut sq = 0.0;
    for _ in 0..reps {
        let b = bootstrap_sample(&ds, &FamilyKind::GaussianGlm, &fit, &mut g).unwrap();
        for &v in b.y().iter() {
            sum += v;
            sq += (v - 2.0) * (v - 2.0);
        }
    }
    let m = (reps * y.len()) as f64;
    assert!((sum / m - 2.0).abs() < 3.0 * (sigma2 / m).sqrt());
    assert!((sq / m - sigma2).abs() < 3.0 * sigma2 * (2.0 / m).sqrt());
}

#[test]
fn bootstrap_is_deterministic_and_shares_covariates() {
    let ds = intercept_only(&[1.0, 2.0, 9.0, 4.0]);
    for fam in [FamilyKind::GaussianGlm, FamilyKind::PoissonGlm, FamilyKind::Quantile { tau: 0.3 }] {
        let fit = fit_null(&ds, &fam, &FitOptions::default()).unwrap();
        let a = bootstrap_sample(&ds, &fam, &fit, &mut rng::stream(4, 7)).unwrap();
        let b = bootstrap_sample(&ds, &fam, &fit, &mut rng::stream(4, 7)).unwrap();
        assert_eq!(a.y(), b.y());
        assert_eq!(a.x_base(), ds.x_base());
    }
}

#[test]
fn quantile_bootstrap_uses_two_point_multipliers() {
    let ds = intercept_only(&[1.0, 2.0, 9.0]);
    let fam = FamilyKind::Quantile { tau: 0.5 };
    let fit = fit_null(&ds, &fam, &FitOptions::default()).unwrap();
    let b = bootstrap_sample(&ds, &fam, &fit, &mut rng::stream(2, 2)).unwrap();
    assert!(b.y()[0] == 1.0 || b.y()[0] == 3.0);
    assert_eq!(b.y()[1], 2.0);
    assert!(b.y()[2] == 9.0 || b.y()[2] == -5.0);
}

#[test]
fn probit_zero_predictor_is_fair_coin() {
    let n = 20_000;
    let ds = Dataset::new(
        DVector::from_fn(n, |i, _| (i % 2) as f64),
        DMatrix::from_element(n, 1, 1.0),
        DMatrix::from_element(n, 1, 1.0),
        DMatrix::from_fn(n, 2, |i, k| if k == 0 { 1.0 } else { i as f64 }),
    )
    .unwrap();
    let fit = NullFit {
        alpha_hat: DVector::zeros(1),
        converged: true,
        iterations: 0,
        gradient_norm: 0.0,
    };
    let b = bootstrap_sample(&ds, &FamilyKind::Probit, &fit, &mut rng::stream(8, 0)).unwrap();
    let rate = b.y().mean();
    assert!((rate - 0.5).abs() < 3.0 * (0.25 / n as f64).sqrt());
}

#[test]
fn probit_scores_stay_finite_at_extremes() {
    let ds = intercept_only(&[1.0, 0.0, 1.0]);
    let s = score_factor(&ds, &FamilyKind::Probit, &DVector::from_element(1, -60.0)).unwrap();
    assert!(s.iter().all(|v| v.is_finite()));
    assert_relative_eq!(s[0], 60.0, max_relative = 1e-3);
}

#[test]
fn semiparametric_score_with_constant_propensity() {
    let n = 6;
    let xb = DMatrix::from_element(n, 1, 1.0);
    let y = DVector::from_vec(vec![1.0, 3.0, 2.0, 5.0, 4.0, 0.0]);
    let a = DVector::from_vec(vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    let ds = Dataset::new(y.clone(), xb, DMatrix::from_element(n, 1, 1.0), DMatrix::from_fn(n, 2, |i, k| if k == 0 { 1.0 } else { i as f64 }))
        .unwrap()
        .with_treatment(a.clone())
        .unwrap();
    let fit = fit_null(&ds, &FamilyKind::Semiparametric, &FitOptions::default()).unwrap();
    assert!(fit.alpha_hat[0].abs() < 1e-10);
    let s = score_psi0(&ds, &FamilyKind::Semiparametric, &fit).unwrap();
    let ybar = y.mean();
    for i in 0..n {
        assert_relative_eq!(s.factor[i], (a[i] - 0.5) * (y[i] - ybar), epsilon = 1e-10);
    }
}
