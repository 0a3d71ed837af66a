//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::{self, ColumnSpec, Dataset};
use crate::error::{Error, Result};
use crate::models::FamilyKind;
use crate::sim::{self, fmt_sig, PowerRow, StudyFile};
use crate::sst::{sst_test, PerturbationSign, SstOptions};
use crate::wast::{wast_test_opts, TestOutcome};
use crate::weights::WeightSpec;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Environment variable that sets the default worker count.
pub const THREADS_ENV: &str = "CHANGEPLANE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "changeplane", version, about = "Score tests for change-plane subgroups in regression models")]
pub struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true, env = THREADS_ENV)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Test for a change plane in a CSV dataset.
    Test(TestArgs),
    /// Empirical size (kappa = 0) of a simulation scenario.
    Simulate(StudyArgs),
    /// Rejection rates along a kappa grid.
    Power(StudyArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Wast,
    Sst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FamilyArg {
    Gaussian,
    Binomial,
    Poisson,
    Probit,
    Quantile,
    Semiparametric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SignArg {
    Plus,
    Minus,
}

#[derive(Debug, Args)]
pub struct TestArgs {
    /// Input CSV with a header row.
    pub data: PathBuf,

    #[arg(long, value_enum, default_value = "wast")]
    pub method: MethodArg,

    #[arg(long, value_enum)]
    pub family: FamilyArg,

    /// Quantile level for `--family quantile`.
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,

    /// Bootstrap replicates (WAST) or perturbation draws (SST).
    #[arg(long, default_value_t = 1000)]
    pub boot: usize,

    /// Master seed; drawn from the clock when omitted.
    #[arg(long)]
    pub seed: Option<u64>,

    #[arg(long, default_value_t = 0.05)]
    pub level: f64,

    /// Weight prior: std-gaussian, gaussian-mc:<draws>, beta:<l1>,<l2>, normal1d:<mu>,<sigma2>.
    #[arg(long, default_value = "std-gaussian")]
    pub weight: String,

    /// SST grid directions (default 1000, 2000 for quantile).
    #[arg(long)]
    pub grid_k: Option<usize>,

    /// SST grid points per direction.
    #[arg(long, default_value_t = 1)]
    pub grid_per_dir: usize,

    #[arg(long, value_enum, default_value = "plus")]
    pub sign: SignArg,

    /// Residual-density bandwidth for quantile SST.
    #[arg(long)]
    pub bandwidth: Option<f64>,

    #[arg(long, default_value = "y")]
    pub response: String,

    /// Baseline covariates (default: columns named xb*).
    #[arg(long, value_delimiter = ',')]
    pub baseline: Option<Vec<String>>,

    /// Grouping-difference covariates (default: x* columns other than xb*).
    #[arg(long, value_delimiter = ',')]
    pub diff: Option<Vec<String>>,

    /// Grouping variables (default: columns named z*).
    #[arg(long, value_delimiter = ',')]
    pub grouping: Option<Vec<String>>,

    /// Treatment column (semiparametric only).
    #[arg(long, default_value = "a")]
    pub treatment: String,

    #[arg(long)]
    pub no_baseline_intercept: bool,

    #[arg(long)]
    pub no_grouping_intercept: bool,

    /// Prepend an intercept to the grouping-difference block.
    #[arg(long)]
    pub diff_intercept: bool,

    /// Single-row CSV report.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StudyArgs {
    /// `key = value` study file; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,

    #[arg(long, value_enum)]
    pub family: Option<FamilyArg>,

    #[arg(long)]
    pub tau: Option<f64>,

    /// r,p,q
    #[arg(long)]
    pub dims: Option<String>,

    #[arg(long)]
    pub n: Option<usize>,

    #[arg(long)]
    pub seed: Option<u64>,

    #[arg(long)]
    pub reps: Option<usize>,

    #[arg(long)]
    pub boot: Option<usize>,

    #[arg(long)]
    pub resamples: Option<usize>,

    #[arg(long)]
    pub grid_k: Option<usize>,

    #[arg(long)]
    pub level: Option<f64>,

    /// Comma-separated subset of wast,sst.
    #[arg(long)]
    pub methods: Option<String>,

    #[arg(long)]
    pub rho: Option<f64>,

    /// SST perturbation sign.
    #[arg(long, value_enum)]
    pub sign: Option<SignArg>,

    /// Comma-separated kappa grid (power only).
    #[arg(long)]
    pub kappas: Option<String>,

    /// desk (300 reps x 200 resamples) or full (1000 x 1000).
    #[arg(long)]
    pub scale: Option<String>,

    /// CSV destination; stdout when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

fn family_of(arg: FamilyArg, tau: f64) -> Result<FamilyKind> {
    Ok(match arg {
        FamilyArg::Gaussian => FamilyKind::GaussianGlm,
        FamilyArg::Binomial => FamilyKind::BinomialGlm,
        FamilyArg::Poisson => FamilyKind::PoissonGlm,
        FamilyArg::Probit => FamilyKind::Probit,
        FamilyArg::Quantile => FamilyKind::quantile(tau)?,
        FamilyArg::Semiparametric => FamilyKind::Semiparametric,
    })
}

fn family_key(arg: FamilyArg) -> &'static str {
    match arg {
        FamilyArg::Gaussian => "gaussian",
        FamilyArg::Binomial => "binomial",
        FamilyArg::Poisson => "poisson",
        FamilyArg::Probit => "probit",
        FamilyArg::Quantile => "quantile",
        FamilyArg::Semiparametric => "semiparametric",
    }
}

fn parse_pair(name: &str, args: &str) -> Result<(f64, f64)> {
    let v = sim::parse_list(name, args)?;
    match v.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(Error::Config(format!("`{name}` takes two comma-separated numbers"))),
    }
}

/// Parses the `--weight` value; `q` and `seed` feed the Monte Carlo form.
pub fn parse_weight(s: &str, q: usize, seed: u64) -> Result<WeightSpec> {
    let (kind, args) = s.split_once(':').unwrap_or((s, ""));
    match kind {
        "std-gaussian" if args.is_empty() => Ok(WeightSpec::StandardGaussianClosedForm),
        "gaussian-mc" => {
            let draws = args
                .parse()
                .map_err(|_| Error::Config(format!("bad draw count `{args}` in --weight")))?;
            Ok(WeightSpec::standard_gaussian_mc(q, draws, crate::rng::derive_seed(seed, &[0x3e16])))
        }
        "beta" => {
            let (lambda1, lambda2) = parse_pair("beta", args)?;
            Ok(WeightSpec::Beta { lambda1, lambda2 })
        }
        "normal1d" => {
            let (mu, sigma2) = parse_pair("normal1d", args)?;
            Ok(WeightSpec::UnivariateGaussian { mu, sigma2 })
        }
        _ => Err(Error::Config(format!("unknown weight `{s}`"))),
    }
}

fn header_columns(path: &Path) -> Result<Vec<String>> {
    let mut rdr = csv::Reader::from_path(path)?;
    Ok(rdr.headers()?.iter().map(|h| h.trim().to_string()).collect())
}

fn column_spec(a: &TestArgs, family: &FamilyKind) -> Result<ColumnSpec> {
    let need_header = a.baseline.is_none() || a.diff.is_none() || a.grouping.is_none();
    let header = if need_header { header_columns(&a.data)? } else { Vec::new() };
    let pick = |pred: &dyn Fn(&str) -> bool| -> Vec<String> {
        header.iter().filter(|h| pred(h)).cloned().collect()
    };
    let baseline = a.baseline.clone().unwrap_or_else(|| pick(&|h| h.starts_with("xb")));
    let diff = a
        .diff
        .clone()
        .unwrap_or_else(|| pick(&|h| h.starts_with('x') && !h.starts_with("xb")));
    let grouping = a.grouping.clone().unwrap_or_else(|| pick(&|h| h.starts_with('z')));
    if diff.is_empty() && !a.diff_intercept {
        return Err(Error::Config("no grouping-difference columns (use --diff)".into()));
    }
    if grouping.is_empty() && a.no_grouping_intercept {
        return Err(Error::Config("no grouping columns (use --grouping)".into()));
    }
    Ok(ColumnSpec {
        response: a.response.clone(),
        baseline,
        diff,
        grouping,
        treatment: (*family == FamilyKind::Semiparametric).then(|| a.treatment.clone()),
        add_intercept_baseline: !a.no_baseline_intercept,
        add_intercept_diff: a.diff_intercept,
        add_intercept_grouping: !a.no_grouping_intercept,
    })
}

fn clock_seed() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0)
}

fn run_test(a: &TestArgs, out: &mut (dyn Write + Send)) -> Result<()> {
    if !(a.level > 0.0 && a.level <= 1.0) {
        return Err(Error::Config(format!("level = {} must lie in (0, 1]", a.level)));
    }
    let family = family_of(a.family, a.tau)?;
    let spec = column_spec(a, &family)?;
    let ds: Dataset = data::load_csv(&a.data, &spec)?;
    data::validate(&ds, &family)?;
    let seed = a.seed.unwrap_or_else(clock_seed);
    let (method, outcome): (&str, TestOutcome) = match a.method {
        MethodArg::Wast => {
            let weight = parse_weight(&a.weight, ds.q(), seed)?;
            let opts = SstOptions::for_family(&family).fit;
            ("WAST", wast_test_opts(&ds, &family, &weight, a.boot, seed, &opts)?)
        }
        MethodArg::Sst => {
            let mut opts = SstOptions::for_family(&family);
            if let Some(k) = a.grid_k {
                opts.k_directions = k;
            }
            opts.grid_per_direction = a.grid_per_dir;
            opts.n_resample = a.boot;
            opts.bandwidth = a.bandwidth;
            opts.sign = match a.sign {
                SignArg::Plus => PerturbationSign::Plus,
                SignArg::Minus => PerturbationSign::Minus,
            };
            ("SST", sst_test(&ds, &family, &opts, seed)?)
        }
    };
    let reject = outcome.p_value < a.level;
    let weight_label = if method == "SST" { "grid" } else { "weight" };
    writeln!(out, "# changeplane test  seed={seed}")?;
    writeln!(out, "method      {method}")?;
    writeln!(out, "family      {}", family.name())?;
    writeln!(out, "n           {}", ds.n())?;
    writeln!(out, "dims        r={} p={} q={}", ds.r(), ds.p(), ds.q())?;
    writeln!(out, "{weight_label:<11} {}", outcome.weight)?;
    writeln!(out, "statistic   {}", fmt_sig(outcome.statistic))?;
    writeln!(out, "B           {} (failed {})", outcome.n_boot, outcome.n_failed)?;
    writeln!(out, "p_value     {}", fmt_sig(outcome.p_value))?;
    writeln!(out, "level       {}", fmt_sig(a.level))?;
    writeln!(out, "decision    {}", if reject { "reject H0" } else { "do not reject H0" })?;
    if let Some(path) = &a.output {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["method", "family", "n", "statistic", "B", "failed", "p_value", "level", "reject", "seed", weight_label])?;
        w.write_record([
            method.to_string(),
            family.name(),
            ds.n().to_string(),
            fmt_sig(outcome.statistic),
            outcome.n_boot.to_string(),
            outcome.n_failed.to_string(),
            fmt_sig(outcome.p_value),
            fmt_sig(a.level),
            reject.to_string(),
            seed.to_string(),
            outcome.weight.clone(),
        ])?;
        w.flush()?;
    }
    Ok(())
}

/// Config-file text with the command-line overrides appended.
fn study_text(a: &StudyArgs) -> Result<String> {
    let mut text = match &a.config {
        Some(p) => fs::read_to_string(p)?,
        None => String::new(),
    };
    text.push('\n');
    let mut push = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            text.push_str(&format!("{k} = {v}\n"));
        }
    };
    push("family", a.family.map(|f| family_key(f).to_string()));
    push("tau", a.tau.map(|v| v.to_string()));
    push("dims", a.dims.clone());
    push("n", a.n.map(|v| v.to_string()));
    push("seed", a.seed.map(|v| v.to_string()));
    // Scale goes first so explicit counts override it.
    push("scale", a.scale.clone());
    push("reps", a.reps.map(|v| v.to_string()));
    push("boot", a.boot.map(|v| v.to_string()));
    push("resamples", a.resamples.map(|v| v.to_string()));
    push("grid_k", a.grid_k.map(|v| v.to_string()));
    push("level", a.level.map(|v| v.to_string()));
    push("methods", a.methods.clone());
    push("rho", a.rho.map(|v| v.to_string()));
    push(
        "sst_sign",
        a.sign.map(|s| match s {
            SignArg::Plus => "plus".to_string(),
            SignArg::Minus => "minus".to_string(),
        }),
    );
    push("kappas", a.kappas.clone());
    Ok(text)
}

fn write_study(a: &StudyArgs, csv: &str, out: &mut (dyn Write + Send)) -> Result<()> {
    match &a.output {
        Some(p) => fs::write(p, csv)?,
        None => out.write_all(csv.as_bytes())?,
    }
    Ok(())
}

fn log_row(err: &mut (dyn Write + Send), r: &PowerRow) {
    let _ = writeln!(
        err,
        "kappa={} n={} {}: rate={} reps={} failed={}",
        fmt_sig(r.kappa),
        r.n,
        r.method.name(),
        fmt_sig(r.rate),
        r.reps,
        r.failed
    );
}

fn run_study(a: &StudyArgs, power: bool, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> Result<()> {
    let mut study = StudyFile::parse(&study_text(a)?)?;
    if !power && a.kappas.is_some() {
        return Err(Error::Config("--kappas applies to the power subcommand".into()));
    }
    let sc = &study.scenario;
    let cfg = &study.config;
    let _ = writeln!(
        err,
        "# changeplane {}  seed={}  family={} dims={:?} n={} reps={} B={}",
        if power { "power" } else { "simulate" },
        cfg.seed,
        sc.family.name(),
        sc.dims,
        sc.n,
        cfg.reps,
        cfg.n_boot
    );
    let table = if power {
        let kappas = std::mem::take(&mut study.kappas);
        sim::run_power_with(&study.scenario, &kappas, &study.config, |r| log_row(err, r))?
    } else {
        let rows = sim::run_size(sc, cfg)?;
        rows.iter().for_each(|r| log_row(err, r));
        sim::PowerTable { rows }
    };
    write_study(a, &table.to_csv_string(), out)
}

fn exit_code(e: &Error) -> i32 {
    if e.is_input_error() {
        EXIT_USAGE
    } else {
        EXIT_NUMERIC
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() {
                write!(err, "{}", e.render())
            } else {
                write!(out, "{}", e.render())
            };
            return code;
        }
    };
    if cli.threads == Some(0) {
        let _ = writeln!(err, "error: --threads must be at least 1");
        return EXIT_USAGE;
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cli.threads {
        builder = builder.num_threads(t);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            let _ = writeln!(err, "error: cannot start worker pool: {e}");
            return EXIT_NUMERIC;
        }
    };
    let result = pool.install(|| match &cli.command {
        Command::Test(a) => run_test(a, out),
        Command::Simulate(a) => run_study(a, false, out, err),
        Command::Power(a) => run_study(a, true, out, err),
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}
