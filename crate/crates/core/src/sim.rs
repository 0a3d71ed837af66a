//! Simulation designs and Monte Carlo size/power drivers.

use std::fmt::Write as _;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Bernoulli, ChiSquared, Distribution, Poisson, StandardNormal, StudentT, Uniform};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal as NormalDist, StudentsT};

use crate::data::{ColumnNames, Dataset, INTERCEPT};
use crate::error::{Error, Result};
use crate::models::expit;
use crate::models::FamilyKind;
use crate::rng;
use crate::sst::{sst_test, PerturbationSign, SstOptions};
use crate::wast::wast_test_with_kernel;
use crate::wast::PairKernel;
use crate::weights::{weight_matrix_for, WeightSpec};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ZLaw {
    StandardNormal,
    /// Multivariate t with three degrees of freedom.
    T3,
    /// Independent normal with the given standard deviation.
    Normal(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ErrorLaw {
    StandardNormal,
    T3,
    Cauchy,
}

/// Rule for the slope part `θ₂..θ_q` of the true grouping parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThetaTruth {
    /// Equally spaced on `[-1, 1]`.
    EquallySpaced,
    /// `(1, 2, ..., 2)`.
    OneThenTwos,
    /// The first `active` slopes drawn from `U(low, high)`, the rest zero.
    Uniform { low: f64, high: f64, active: usize },
}

/// Where the intercept `θ₁` is calibrated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitCalibration {
    /// Empirical percentile of each generated sample.
    Realized,
    /// Percentile of one large pilot sample, so `θ` is fixed across replicates.
    Pilot,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Propensity {
    /// `π = 0.5`.
    Constant,
    /// `π = expit(0.5 v₁ + 0.5 v₂)`.
    Logistic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Baseline {
    /// `1 + 0.5 v₁ + v₂²`.
    Quadratic,
    /// `1 + sin(v₁ + v₂)`.
    Sine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub family: FamilyKind,
    /// `(r, p, q)`. Quantile and probit designs fix `r = 2`; the
    /// semiparametric design fixes `r = 3`.
    pub dims: (usize, usize, usize),
    pub n: usize,
    pub rho: f64,
    pub kappa: f64,
    pub theta_truth: ThetaTruth,
    pub split_quantile: f64,
    pub split_calibration: SplitCalibration,
    pub z_law: ZLaw,
    pub error_law: ErrorLaw,
    pub propensity: Propensity,
    pub baseline: Baseline,
    pub seed: u64,
}

impl Scenario {
    /// Defaults matching the family's standard design.
    pub fn new(family: FamilyKind, dims: (usize, usize, usize), n: usize) -> Self {
        let theta_truth = match family {
            FamilyKind::GaussianGlm | FamilyKind::BinomialGlm | FamilyKind::PoissonGlm => ThetaTruth::EquallySpaced,
            _ => ThetaTruth::OneThenTwos,
        };
        Self {
            family,
            dims,
            n,
            rho: 0.0,
            kappa: 0.0,
            theta_truth,
            split_quantile: 0.65,
            split_calibration: SplitCalibration::Realized,
            z_law: ZLaw::StandardNormal,
            error_law: ErrorLaw::StandardNormal,
            propensity: Propensity::Constant,
            baseline: Baseline::Quadratic,
            seed: 0,
        }
    }

    pub fn with_kappa(&self, kappa: f64) -> Self {
        Self { kappa, ..self.clone() }
    }

    pub fn check(&self) -> Result<()> {
        let (r, p, q) = self.dims;
        if r == 0 || p == 0 || q < 2 {
            return Err(Error::Config(format!("dimensions must satisfy r, p ≥ 1 and q ≥ 2, got ({r}, {p}, {q})")));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho = {} must lie in [0, 1)", self.rho)));
        }
        if !(self.split_quantile > 0.0 && self.split_quantile < 1.0) {
            return Err(Error::Config("split quantile must lie in (0, 1)".into()));
        }
        if self.n < 2 {
            return Err(Error::Config("n must be at least 2".into()));
        }
        if !self.kappa.is_finite() {
            return Err(Error::Config("kappa must be finite".into()));
        }
        match self.family {
            FamilyKind::Quantile { tau } if !(tau > 0.0 && tau < 1.0) => {
                Err(Error::Config(format!("tau = {tau} must lie in (0, 1)")))
            }
            FamilyKind::Quantile { .. } | FamilyKind::Probit if r != 2 => {
                Err(Error::Config("quantile and probit designs use r = 2".into()))
            }
            FamilyKind::Semiparametric if r != 3 || q < 3 => {
                Err(Error::Config("the semiparametric design uses r = 3 and q ≥ 3".into()))
            }
            _ => Ok(()),
        }
    }

    /// Stable identifier mixed into replicate seeds.
    fn tag(&self) -> u64 {
        let text = format!("{:?}", self.with_kappa(0.0));
        text.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
    }
}

fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn empirical_quantile(values: &[f64], prob: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, prob)
}

/// Generator with the scenario-level constants resolved once.
#[derive(Debug, Clone)]
pub struct Generator {
    sc: Scenario,
    alpha: DVector<f64>,
    theta_tail: DVector<f64>,
    pilot_theta1: Option<f64>,
    error_shift: f64,
}

/// Intercept giving an average case rate of 1/3 in the binomial design.
fn binomial_intercept(r: usize, rho: f64, seed: u64) -> f64 {
    let slope = 1.4f64.ln();
    let m = r - 1;
    let rate: Box<dyn Fn(f64) -> f64> = if rho == 0.0 || m <= 1 {
        // Count of positive latent covariates is Binomial(m, 1/2).
        let weights: Vec<f64> = (0..=m).map(|k| binom(m, k) / 2f64.powi(m as i32)).collect();
        Box::new(move |a: f64| (0..=m).map(|k| weights[k] * expit(a + slope * k as f64)).sum())
    } else {
        let mut g = rng::stream(rng::derive_seed(seed, &[0xb1a5]), 0);
        let draws = 200_000;
        let mut counts = vec![0f64; m + 1];
        let (a, b) = (rho.sqrt(), (1.0 - rho).sqrt());
        for _ in 0..draws {
            let w0 = std_normal(&mut g);
            let k = (0..m)
                .filter(|_| a * w0 + b * std_normal(&mut g) > 0.0)
                .count();
            counts[k] += 1.0;
        }
        let weights: Vec<f64> = counts.iter().map(|c| c / draws as f64).collect();
        Box::new(move |x: f64| (0..=m).map(|k| weights[k] * expit(x + slope * k as f64)).sum())
    };
    let (mut lo, mut hi) = (-20.0, 20.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if rate(mid) < 1.0 / 3.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn std_normal<R: Rng + ?Sized>(g: &mut R) -> f64 {
    StandardNormal.sample(g)
}

fn binom(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

impl Generator {
    pub fn new(sc: &Scenario) -> Result<Self> {
        sc.check()?;
        let (r, _, q) = sc.dims;
        let alpha = match sc.family {
            FamilyKind::GaussianGlm | FamilyKind::PoissonGlm | FamilyKind::BinomialGlm => {
                let a1 = if sc.family == FamilyKind::BinomialGlm {
                    binomial_intercept(r, sc.rho, sc.seed)
                } else {
                    0.5
                };
                DVector::from_fn(r, |j, _| if j == 0 { a1 } else { 1.4f64.ln() })
            }
            _ => DVector::from_vec(vec![0.5, 1.0]),
        };
        let m = q - 1;
        let theta_tail = match sc.theta_truth {
            ThetaTruth::EquallySpaced => {
                if m == 1 {
                    DVector::from_element(1, 1.0)
                } else {
                    DVector::from_fn(m, |j, _| -1.0 + 2.0 * j as f64 / (m - 1) as f64)
                }
            }
            ThetaTruth::OneThenTwos => DVector::from_fn(m, |j, _| if j == 0 { 1.0 } else { 2.0 }),
            ThetaTruth::Uniform { low, high, active } => {
                if !(low < high) {
                    return Err(Error::Config("uniform theta bounds must satisfy low < high".into()));
                }
                let mut g = rng::stream(rng::derive_seed(sc.seed, &[0x7e7a]), 0);
                let u = Uniform::new(low, high).map_err(|e| Error::Config(e.to_string()))?;
                DVector::from_fn(m, |j, _| if j < active { u.sample(&mut g) } else { 0.0 })
            }
        };
        let error_shift = match sc.family {
            FamilyKind::Quantile { tau } => error_quantile(sc.error_law, tau)?,
            _ => 0.0,
        };
        let mut gen = Self {
            sc: sc.clone(),
            alpha,
            theta_tail,
            pilot_theta1: None,
            error_shift,
        };
        if sc.split_calibration == SplitCalibration::Pilot {
            let mut g = rng::stream(rng::derive_seed(sc.seed, &[0x9170]), 0);
            let pilot_n = 100_000;
            let z = gen.draw_z(pilot_n, &mut g)?;
            let proj: Vec<f64> = (0..pilot_n).map(|i| gen.project(&z, i)).collect();
            gen.pilot_theta1 = Some(-empirical_quantile(&proj, sc.split_quantile));
        }
        Ok(gen)
    }

    pub fn scenario(&self) -> &Scenario {
        &self.sc
    }

    /// Null-model coefficients used to generate `Y` (propensity excluded).
    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    fn project(&self, z: &DMatrix<f64>, i: usize) -> f64 {
        (0..self.theta_tail.len()).map(|j| z[(i, j + 1)] * self.theta_tail[j]).sum()
    }

    /// Grouping variables for the non-GLM designs (column 0 is the intercept).
    fn draw_z<R: Rng + ?Sized>(&self, n: usize, g: &mut R) -> Result<DMatrix<f64>> {
        let q = self.sc.dims.2;
        let mut z = DMatrix::from_element(n, q, 1.0);
        match self.sc.family {
            FamilyKind::Semiparametric => {
                let u = Uniform::new(-1.0, 1.0).map_err(|e| Error::Config(e.to_string()))?;
                for i in 0..n {
                    z[(i, 1)] = if g.random::<bool>() { 1.0 } else { 0.0 };
                    for j in 2..q {
                        z[(i, j)] = u.sample(g);
                    }
                }
            }
            _ => {
                for i in 0..n {
                    let scale = z_row_scale(self.sc.z_law, g)?;
                    for j in 1..q {
                        z[(i, j)] = scale * std_normal(g);
                    }
                }
            }
        }
        Ok(z)
    }

    pub fn generate<R: Rng + ?Sized>(&self, g: &mut R) -> Result<Dataset> {
        match self.sc.family {
            FamilyKind::GaussianGlm | FamilyKind::BinomialGlm | FamilyKind::PoissonGlm => self.generate_glm(g),
            FamilyKind::Semiparametric => self.generate_semiparametric(g),
            _ => self.generate_index(g),
        }
    }

    fn theta1(&self, z: &DMatrix<f64>) -> f64 {
        match self.pilot_theta1 {
            Some(t) => t,
            None => {
                let proj: Vec<f64> = (0..z.nrows()).map(|i| self.project(z, i)).collect();
                -empirical_quantile(&proj, self.sc.split_quantile)
            }
        }
    }

    /// `1(Z_i'θ ≥ 0)` for the true `θ`.
    fn subgroup(&self, z: &DMatrix<f64>) -> Vec<bool> {
        let t1 = self.theta1(z);
        (0..z.nrows()).map(|i| t1 + self.project(z, i) >= 0.0).collect()
    }

    fn generate_glm<R: Rng + ?Sized>(&self, g: &mut R) -> Result<Dataset> {
        let (r, p, q) = self.sc.dims;
        let n = self.sc.n;
        let mv = r.max(p) - 1;
        let dim = mv + q - 1;
        let (a, b) = (self.sc.rho.sqrt(), (1.0 - self.sc.rho).sqrt());
        let mut latent = DMatrix::zeros(n, dim);
        for i in 0..n {
            let w0: f64 = std_normal(g);
            for j in 0..dim {
                let e: f64 = std_normal(g);
                latent[(i, j)] = a * w0 + b * e;
            }
            let scale = z_row_scale(self.sc.z_law, g)?;
            for j in mv..dim {
                latent[(i, j)] *= scale;
            }
        }
        let ind = |i: usize, j: usize| if latent[(i, j - 1)] > 0.0 { 1.0 } else { 0.0 };
        let xb = DMatrix::from_fn(n, r, |i, j| if j == 0 { 1.0 } else { ind(i, j) });
        let xd = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { ind(i, j) });
        let z = DMatrix::from_fn(n, q, |i, j| if j == 0 { 1.0 } else { latent[(i, mv + j - 1)] });
        let sub = self.subgroup(&z);
        let eta: Vec<f64> = (0..n)
            .map(|i| {
                let base = xb.row(i).dot(&self.alpha.transpose());
                let shift = if sub[i] { self.sc.kappa * xd.row(i).sum() } else { 0.0 };
                base + shift
            })
            .collect();
        let y = match self.sc.family {
            FamilyKind::GaussianGlm => DVector::from_fn(n, |i, _| eta[i] + std_normal(g)),
            FamilyKind::BinomialGlm => {
                let mut y = DVector::zeros(n);
                for i in 0..n {
                    y[i] = if g.random::<f64>() < expit(eta[i]) { 1.0 } else { 0.0 };
                }
                y
            }
            _ => {
                let mut y = DVector::zeros(n);
                for i in 0..n {
                    let mu = eta[i].exp();
                    y[i] = Poisson::new(mu).map_err(|e| Error::Config(e.to_string()))?.sample(g);
                }
                y
            }
        };
        let names = ColumnNames {
            response: "y".into(),
            baseline: latent_names(r),
            diff: latent_names(p),
            grouping: group_names(q),
            treatment: None,
        };
        Dataset::from_parts(y, xb, xd, z, None, names)
    }

    /// Quantile and probit designs: `0.5 + X̃₁ + X'β 1(Z'θ ≥ 0)`.
    fn generate_index<R: Rng + ?Sized>(&self, g: &mut R) -> Result<Dataset> {
        let (_, p, _) = self.sc.dims;
        let n = self.sc.n;
        let probit = self.sc.family == FamilyKind::Probit;
        let sd_x = 2f64.sqrt().sqrt();
        let mut x1 = DVector::zeros(n);
        let mut xd = DMatrix::zeros(n, p);
        for i in 0..n {
            x1[i] = if probit {
                if g.random::<bool>() {
                    1.0
                } else {
                    0.0
                }
            } else {
                std_normal(g)
            };
            for k in 0..p {
                xd[(i, k)] = sd_x * std_normal(g);
            }
        }
        let z = self.draw_z(n, g)?;
        let sub = self.subgroup(&z);
        let mut y = DVector::zeros(n);
        for i in 0..n {
            let shift = if sub[i] { self.sc.kappa * xd.row(i).sum() } else { 0.0 };
            let index = self.alpha[0] + self.alpha[1] * x1[i] + shift;
            y[i] = if probit {
                let nu: f64 = std_normal(g);
                if nu <= index {
                    1.0
                } else {
                    0.0
                }
            } else {
                index + draw_error(self.sc.error_law, g)? - self.error_shift
            };
        }
        let xb = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { x1[i] });
        let names = ColumnNames {
            response: "y".into(),
            baseline: vec![INTERCEPT.into(), "xb2".into()],
            diff: (1..=p).map(|k| format!("x{k}")).collect(),
            grouping: group_names(self.sc.dims.2),
            treatment: None,
        };
        Dataset::from_parts(y, xb, xd, z, None, names)
    }

    /// `Y = γ(v) + A X'β 1(Z'θ ≥ 0) + ε` with `X̃ = (1, v₁, v₂)`.
    fn generate_semiparametric<R: Rng + ?Sized>(&self, g: &mut R) -> Result<Dataset> {
        let (_, p, q) = self.sc.dims;
        let n = self.sc.n;
        let u = Uniform::new(-1.0, 1.0).map_err(|e| Error::Config(e.to_string()))?;
        let z = self.draw_z(n, g)?;
        // Z = (1, v₁, v₂, X₁, ..., X_{q-3}); X columns beyond q - 3 are fresh draws.
        let xd = DMatrix::from_fn(n, p, |i, k| if k + 3 < q { z[(i, k + 3)] } else { f64::NAN });
        let mut xd = xd;
        for i in 0..n {
            for k in 0..p {
                if xd[(i, k)].is_nan() {
                    xd[(i, k)] = u.sample(g);
                }
            }
        }
        let sub = self.subgroup(&z);
        let mut y = DVector::zeros(n);
        let mut a = DVector::zeros(n);
        for i in 0..n {
            let (v1, v2) = (z[(i, 1)], z[(i, 2)]);
            let pi = match self.sc.propensity {
                Propensity::Constant => 0.5,
                Propensity::Logistic => expit(0.5 * v1 + 0.5 * v2),
            };
            a[i] = if Bernoulli::new(pi).map_err(|e| Error::Config(e.to_string()))?.sample(g) { 1.0 } else { 0.0 };
            let gamma = match self.sc.baseline {
                Baseline::Quadratic => 1.0 + 0.5 * v1 + v2 * v2,
                Baseline::Sine => 1.0 + (v1 + v2).sin(),
            };
            let shift = if sub[i] { self.sc.kappa * a[i] * xd.row(i).sum() } else { 0.0 };
            y[i] = gamma + shift + draw_error(self.sc.error_law, g)?;
        }
        let xb = DMatrix::from_fn(n, 3, |i, j| z[(i, j)]);
        let grouping: Vec<String> = (0..q)
            .map(|j| match j {
                0 => INTERCEPT.to_string(),
                1 => "v1".into(),
                2 => "v2".into(),
                _ => format!("x{}", j - 2),
            })
            .collect();
        let names = ColumnNames {
            response: "y".into(),
            baseline: vec![INTERCEPT.into(), "v1".into(), "v2".into()],
            diff: (1..=p).map(|k| if k + 3 <= q { format!("x{k}") } else { format!("w{k}") }).collect(),
            grouping,
            treatment: Some("a".into()),
        };
        Dataset::from_parts(y, xb, xd, z, Some(a), names)
    }
}

fn latent_names(k: usize) -> Vec<String> {
    (0..k).map(|j| if j == 0 { INTERCEPT.to_string() } else { format!("v{}", j + 1) }).collect()
}

fn group_names(q: usize) -> Vec<String> {
    (0..q).map(|j| if j == 0 { INTERCEPT.to_string() } else { format!("z{}", j + 1) }).collect()
}

fn z_row_scale<R: Rng + ?Sized>(law: ZLaw, g: &mut R) -> Result<f64> {
    Ok(match law {
        ZLaw::StandardNormal => 1.0,
        ZLaw::Normal(sd) => sd,
        ZLaw::T3 => {
            let c: f64 = ChiSquared::new(3.0).map_err(|e| Error::Config(e.to_string()))?.sample(g);
            (3.0 / c).sqrt()
        }
    })
}

fn draw_error<R: Rng + ?Sized>(law: ErrorLaw, g: &mut R) -> Result<f64> {
    Ok(match law {
        ErrorLaw::StandardNormal => std_normal(g),
        ErrorLaw::T3 => StudentT::new(3.0).map_err(|e| Error::Config(e.to_string()))?.sample(g),
        ErrorLaw::Cauchy => {
            let u: f64 = g.random();
            (std::f64::consts::PI * (u - 0.5)).tan()
        }
    })
}

/// `τ`-quantile of the error law, subtracted so the null `α` is the `τ`-quantile fit.
fn error_quantile(law: ErrorLaw, tau: f64) -> Result<f64> {
    Ok(match law {
        ErrorLaw::StandardNormal => NormalDist::new(0.0, 1.0).map_err(|e| Error::Config(e.to_string()))?.inverse_cdf(tau),
        ErrorLaw::T3 => StudentsT::new(0.0, 1.0, 3.0).map_err(|e| Error::Config(e.to_string()))?.inverse_cdf(tau),
        ErrorLaw::Cauchy => (std::f64::consts::PI * (tau - 0.5)).tan(),
    })
}

/// One dataset from the scenario.
pub fn generate<R: Rng + ?Sized>(sc: &Scenario, g: &mut R) -> Result<Dataset> {
    Generator::new(sc)?.generate(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Wast,
    Sst,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Wast => "WAST",
            Method::Sst => "SST",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub reps: usize,
    pub n_boot: usize,
    pub level: f64,
    pub methods: Vec<Method>,
    pub weight: WeightSpec,
    pub sst: SstOptions,
    pub seed: u64,
}

impl StudyConfig {
    /// Desk-scale defaults: 300 replicates with 200 resamples each.
    pub fn desk(family: &FamilyKind, seed: u64) -> Self {
        let mut sst = SstOptions::for_family(family);
        sst.n_resample = 200;
        Self {
            reps: 300,
            n_boot: 200,
            level: 0.05,
            methods: vec![Method::Wast, Method::Sst],
            weight: WeightSpec::default(),
            sst,
            seed,
        }
    }

    /// 1000 replicates with 1000 resamples each.
    pub fn full(family: &FamilyKind, seed: u64) -> Self {
        Self {
            reps: 1000,
            n_boot: 1000,
            level: 0.05,
            methods: vec![Method::Wast, Method::Sst],
            weight: WeightSpec::default(),
            sst: SstOptions::for_family(family),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerRow {
    pub kappa: f64,
    pub n: usize,
    pub method: Method,
    pub rate: f64,
    /// Replicates that produced a p-value.
    pub reps: usize,
    pub stderr: f64,
    /// Replicates dropped because the test itself failed.
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PowerTable {
    pub rows: Vec<PowerRow>,
}

/// Formats with 12 significant digits, shortest round-trip form.
pub fn fmt_sig(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    let rounded: f64 = format!("{x:.11e}").parse().unwrap_or(x);
    format!("{rounded}")
}

impl PowerTable {
    pub fn to_csv_string(&self) -> String {
        let mut s = String::from("kappa,n,method,rate,reps,stderr\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                fmt_sig(r.kappa),
                r.n,
                r.method.name(),
                fmt_sig(r.rate),
                r.reps,
                fmt_sig(r.stderr)
            );
        }
        s
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(self.to_csv_string().as_bytes())?;
        Ok(())
    }

    pub fn rate(&self, method: Method, kappa: f64) -> Option<&PowerRow> {
        self.rows.iter().find(|r| r.method == method && r.kappa == kappa)
    }
}

/// p-values of every method on one generated dataset.
fn replicate(gen: &Generator, cfg: &StudyConfig, kappa_index: usize, rep: usize) -> Result<Vec<Option<f64>>> {
    let sc = gen.scenario();
    let data_seed = rng::derive_seed(cfg.seed, &[sc.tag(), kappa_index as u64, 0xda7a]);
    let mut g = rng::stream(data_seed, rep as u64);
    let ds = gen.generate(&mut g)?;
    let test_seed = rng::derive_seed(data_seed, &[rep as u64]);
    let mut out = Vec::with_capacity(cfg.methods.len());
    for m in &cfg.methods {
        let p = match m {
            Method::Wast => weight_matrix_for(ds.z_group(), &cfg.weight)
                .and_then(|w| PairKernel::new(ds.x_diff(), &w))
                .and_then(|k| wast_test_with_kernel(&ds, &sc.family, &k, cfg.n_boot, test_seed, &cfg.sst.fit))
                .map(|(t, boot, _)| crate::wast::p_value(t, &boot)),
            Method::Sst => sst_test(&ds, &sc.family, &cfg.sst, test_seed).map(|o| o.p_value),
        };
        out.push(p.ok().filter(|v| v.is_finite()));
    }
    Ok(out)
}

fn rows_for(gen: &Generator, cfg: &StudyConfig, kappa_index: usize) -> Result<Vec<PowerRow>> {
    if cfg.reps == 0 {
        return Err(Error::Config("reps must be at least 1".into()));
    }
    if cfg.methods.is_empty() {
        return Err(Error::Config("no test methods selected".into()));
    }
    let results: Vec<Result<Vec<Option<f64>>>> =
        (0..cfg.reps).into_par_iter().map(|b| replicate(gen, cfg, kappa_index, b)).collect();
    let mut per_rep = Vec::with_capacity(cfg.reps);
    for r in results {
        per_rep.push(r?);
    }
    let sc = gen.scenario();
    Ok(cfg
        .methods
        .iter()
        .enumerate()
        .map(|(k, &method)| {
            let ps: Vec<f64> = per_rep.iter().filter_map(|v| v[k]).collect();
            let reps = ps.len();
            let rate = if reps == 0 {
                f64::NAN
            } else {
                ps.iter().filter(|&&p| p < cfg.level).count() as f64 / reps as f64
            };
            PowerRow {
                kappa: sc.kappa,
                n: sc.n,
                method,
                rate,
                reps,
                stderr: (rate * (1.0 - rate) / reps as f64).sqrt(),
                failed: cfg.reps - reps,
            }
        })
        .collect())
}

/// Empirical size at `κ = 0`: one row per method.
pub fn run_size(sc: &Scenario, cfg: &StudyConfig) -> Result<Vec<PowerRow>> {
    let gen = Generator::new(&sc.with_kappa(0.0))?;
    rows_for(&gen, cfg, 0)
}

/// Rejection rates along an ascending `κ` grid.
pub fn run_power(sc: &Scenario, kappas: &[f64], cfg: &StudyConfig) -> Result<PowerTable> {
    run_power_with(sc, kappas, cfg, |_| {})
}

/// [`run_power`] with a callback after each finished row.
pub fn run_power_with<F: FnMut(&PowerRow)>(
    sc: &Scenario,
    kappas: &[f64],
    cfg: &StudyConfig,
    mut progress: F,
) -> Result<PowerTable> {
    if kappas.is_empty() {
        return Err(Error::Config("the kappa grid is empty".into()));
    }
    if kappas.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Config("the kappa grid must be ascending".into()));
    }
    let mut table = PowerTable::default();
    for (k, &kappa) in kappas.iter().enumerate() {
        let gen = Generator::new(&sc.with_kappa(kappa))?;
        // κ = 0 shares its streams with run_size.
        let idx = if kappa == 0.0 { 0 } else { k + 1 };
        for row in rows_for(&gen, cfg, idx)? {
            progress(&row);
            table.rows.push(row);
        }
    }
    Ok(table)
}

/// `κ = i/10` for the semiparametric design and `i/20` otherwise, `i = 1..10`.
pub fn default_kappa_grid(family: &FamilyKind) -> Vec<f64> {
    let step = if *family == FamilyKind::Semiparametric { 10.0 } else { 20.0 };
    (1..=10).map(|i| i as f64 / step).collect()
}

/// Study specification read from `key = value` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyFile {
    pub scenario: Scenario,
    pub kappas: Vec<f64>,
    pub config: StudyConfig,
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("cannot parse `{v}` for `{key}`")))
}

pub fn parse_family(s: &str, tau: Option<f64>) -> Result<FamilyKind> {
    Ok(match s.to_ascii_lowercase().as_str() {
        "gaussian" => FamilyKind::GaussianGlm,
        "binomial" | "logistic" => FamilyKind::BinomialGlm,
        "poisson" => FamilyKind::PoissonGlm,
        "probit" => FamilyKind::Probit,
        "quantile" => FamilyKind::quantile(tau.unwrap_or(0.5))?,
        "semiparametric" => FamilyKind::Semiparametric,
        other => return Err(Error::Config(format!("unknown family `{other}`"))),
    })
}

pub fn parse_z_law(s: &str) -> Result<ZLaw> {
    let l = s.to_ascii_lowercase();
    if l == "normal" || l == "standard_normal" {
        return Ok(ZLaw::StandardNormal);
    }
    if l == "t3" {
        return Ok(ZLaw::T3);
    }
    if let Some(sd) = l.strip_prefix("normal(").and_then(|r| r.strip_suffix(')')) {
        let sd: f64 = parse_num("z_law", sd)?;
        if sd > 0.0 {
            return Ok(ZLaw::Normal(sd));
        }
    }
    Err(Error::Config(format!("unknown z law `{s}` (normal, t3, normal(<sd>))")))
}

pub fn parse_error_law(s: &str) -> Result<ErrorLaw> {
    match s.to_ascii_lowercase().as_str() {
        "normal" | "standard_normal" => Ok(ErrorLaw::StandardNormal),
        "t3" => Ok(ErrorLaw::T3),
        "cauchy" => Ok(ErrorLaw::Cauchy),
        _ => Err(Error::Config(format!("unknown error law `{s}` (normal, t3, cauchy)"))),
    }
}

pub fn parse_methods(s: &str) -> Result<Vec<Method>> {
    s.split(',')
        .map(|m| match m.trim().to_ascii_lowercase().as_str() {
            "wast" => Ok(Method::Wast),
            "sst" => Ok(Method::Sst),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        })
        .collect()
}

pub fn parse_list(key: &str, s: &str) -> Result<Vec<f64>> {
    s.split(',').map(|v| parse_num(key, v.trim())).collect()
}

impl StudyFile {
    /// Parses `key = value` lines; `#` starts a comment. Required keys:
    /// `family`, `dims` (r,p,q), `n`, `seed`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv: Vec<(String, String)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            kv.push((k.trim().to_ascii_lowercase(), v.trim().to_string()));
        }
        let get = |k: &str| kv.iter().rev().find(|(key, _)| key == k).map(|(_, v)| v.as_str());
        let need = |k: &str| get(k).ok_or_else(|| Error::Config(format!("missing required key `{k}`")));
        let tau = get("tau").map(|v| parse_num::<f64>("tau", v)).transpose()?;
        let family = parse_family(need("family")?, tau)?;
        let dims = parse_list("dims", need("dims")?)?;
        if dims.len() != 3 || dims.iter().any(|d| *d < 0.0 || d.fract() != 0.0) {
            return Err(Error::Config("dims must be three nonnegative integers r,p,q".into()));
        }
        let n: usize = parse_num("n", need("n")?)?;
        let seed: u64 = parse_num("seed", need("seed")?)?;
        let mut sc = Scenario::new(family, (dims[0] as usize, dims[1] as usize, dims[2] as usize), n);
        sc.seed = seed;
        let mut cfg = StudyConfig::desk(&family, seed);
        let mut kappas = default_kappa_grid(&family);
        for (k, v) in &kv {
            match k.as_str() {
                "family" | "tau" | "dims" | "n" | "seed" => {}
                "rho" => sc.rho = parse_num(k, v)?,
                "split_quantile" => sc.split_quantile = parse_num(k, v)?,
                "split_calibration" => {
                    sc.split_calibration = match v.as_str() {
                        "realized" => SplitCalibration::Realized,
                        "pilot" => SplitCalibration::Pilot,
                        _ => return Err(Error::Config(format!("unknown split calibration `{v}`"))),
                    }
                }
                "z_law" => sc.z_law = parse_z_law(v)?,
                "error_law" => sc.error_law = parse_error_law(v)?,
                "propensity" => {
                    sc.propensity = match v.as_str() {
                        "constant" => Propensity::Constant,
                        "logistic" => Propensity::Logistic,
                        _ => return Err(Error::Config(format!("unknown propensity `{v}`"))),
                    }
                }
                "baseline" => {
                    sc.baseline = match v.as_str() {
                        "quadratic" => Baseline::Quadratic,
                        "sine" => Baseline::Sine,
                        _ => return Err(Error::Config(format!("unknown baseline `{v}`"))),
                    }
                }
                "theta_truth" => {
                    sc.theta_truth = match v.as_str() {
                        "equally_spaced" => ThetaTruth::EquallySpaced,
                        "one_then_twos" => ThetaTruth::OneThenTwos,
                        other => {
                            let args = other
                                .strip_prefix("uniform(")
                                .and_then(|r| r.strip_suffix(')'))
                                .ok_or_else(|| Error::Config(format!("unknown theta rule `{other}`")))?;
                            let a = parse_list(k, args)?;
                            if a.len() != 3 {
                                return Err(Error::Config("uniform(low,high,active) takes three values".into()));
                            }
                            ThetaTruth::Uniform {
                                low: a[0],
                                high: a[1],
                                active: a[2] as usize,
                            }
                        }
                    }
                }
                "kappa" | "kappas" => kappas = parse_list(k, v)?,
                "reps" => cfg.reps = parse_num(k, v)?,
                "boot" | "n_boot" => cfg.n_boot = parse_num(k, v)?,
                "resamples" => cfg.sst.n_resample = parse_num(k, v)?,
                "grid_k" => cfg.sst.k_directions = parse_num(k, v)?,
                "grid_per_direction" => cfg.sst.grid_per_direction = parse_num(k, v)?,
                "level" => cfg.level = parse_num(k, v)?,
                "sst_sign" => {
                    cfg.sst.sign = match v.as_str() {
                        "plus" => PerturbationSign::Plus,
                        "minus" => PerturbationSign::Minus,
                        _ => return Err(Error::Config(format!("unknown sign `{v}` (plus, minus)"))),
                    }
                }
                "methods" => cfg.methods = parse_methods(v)?,
                "scale" => {
                    if v == "full" {
                        let f = StudyConfig::full(&family, seed);
                        cfg.reps = f.reps;
                        cfg.n_boot = f.n_boot;
                        cfg.sst.n_resample = f.sst.n_resample;
                    } else if v != "desk" {
                        return Err(Error::Config(format!("unknown scale `{v}` (desk, full)")));
                    }
                }
                other => return Err(Error::Config(format!("unknown key `{other}`"))),
            }
        }
        sc.check()?;
        Ok(Self {
            scenario: sc,
            kappas,
            config: cfg,
        })
    }
}
