use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use haarstab::multiplier::{lambda_mu, t2_variation};
use haarstab::probe::{check_factorization, probe_capon, ProbeFamily};
use haarstab::spaces::Method;
use haarstab::stabilizer::{stabilize_full, EtaSchedule, StabilizeConfig};
use haarstab::{Coeffs2D, Error, Multiplier2D, NormOptions, ZSpec};
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

mod selftest;

#[derive(Parser)]
#[command(name = "haarstab", version, about = "Bi-parameter Haar multipliers: norms, stabilization and Capon probes")]
struct Cli {
    /// Also write a tabular report here.
    #[arg(long, global = true)]
    csv: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Auto,
    Exact,
    Mc,
}

#[derive(clap::Args)]
struct NormArgs {
    /// Space spec such as `s00:L1:L2`.
    #[arg(long)]
    space: String,
    #[arg(long)]
    grid_depth: Option<u32>,
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    #[arg(long, value_enum, default_value = "auto")]
    method: MethodArg,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(clap::Args)]
struct StabilizeArgs {
    #[arg(long)]
    multiplier: PathBuf,
    /// JSON stabilizer config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSON eta schedule.
    #[arg(long, conflicts_with = "eta_flat")]
    eta: Option<PathBuf>,
    #[arg(long)]
    eta_flat: Option<f64>,
    #[arg(long)]
    depth: Option<u32>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    budget: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate `||z||_Z` for a vector file.
    Norm {
        #[arg(long)]
        vector: PathBuf,
        #[command(flatten)]
        norm: NormArgs,
    },
    /// Finite-window estimates of lambda(D) and mu(D).
    LambdaMu {
        #[arg(long)]
        multiplier: PathBuf,
        #[arg(long)]
        lo: u32,
        #[arg(long)]
        hi: u32,
        #[arg(long)]
        window: Option<u32>,
        #[arg(long)]
        tol: Option<f64>,
        /// Print the full averaging tables.
        #[arg(long)]
        table: bool,
    },
    /// Truncated variation report.
    Variation {
        #[arg(long)]
        multiplier: PathBuf,
        #[arg(long)]
        truncation: u32,
    },
    /// Run the full stabilization pipeline.
    Stabilize {
        #[command(flatten)]
        args: StabilizeArgs,
        /// Write the stabilized multiplier here.
        #[arg(long)]
        out_multiplier: Option<PathBuf>,
        #[arg(long)]
        out_h: Option<PathBuf>,
        #[arg(long)]
        out_k: Option<PathBuf>,
    },
    /// Growth of the Capon projection on the probe families.
    ProbeCapon {
        #[arg(long)]
        family: String,
        /// Sizes, `a..b` inclusive or a single value.
        #[arg(long, default_value = "1..6")]
        n: String,
        /// Comma separated probe coefficients.
        #[arg(long, value_delimiter = ',')]
        coeffs: Option<Vec<f64>>,
        #[command(flatten)]
        norm: NormArgs,
    },
    /// Stabilize, then measure the residual against the Capon pattern.
    CheckFactor {
        #[command(flatten)]
        args: StabilizeArgs,
        #[arg(long)]
        space: String,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 2000)]
        samples: usize,
    },
    /// Run the built-in oracle checks.
    Selftest,
}

/// Failure classes, mapped to exit codes 1 and 2.
enum Failure {
    Check(anyhow::Error),
    Usage(anyhow::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidSpec(_)
            | Error::InvalidArgument(_)
            | Error::InvalidSystem(_)
            | Error::InvalidInterval { .. }
            | Error::GridTooCoarse { .. }
            | Error::LevelOverflow { .. }
            | Error::DepthMismatch(..)
            | Error::ZeroSamples
            | Error::Io(_)
            | Error::Json(_) => Failure::Usage(e.into()),
            _ => Failure::Check(e.into()),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn load<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(usage)?;
    serde_json::from_str(&text).map_err(|e| {
        usage(anyhow!("{}:{}:{}: {}", path.display(), e.line(), e.column(), e))
    })
}

fn save<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(usage)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display())).map_err(usage)
}

fn emit<T: Serialize>(value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(usage)?;
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => r.context("writing stdout").map_err(usage),
    }
}

fn write_csv<R: Serialize>(path: Option<&Path>, rows: &[R]) -> CliResult<()> {
    let Some(path) = path else { return Ok(()) };
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display())).map_err(usage)?;
    for r in rows {
        w.serialize(r).map_err(usage)?;
    }
    w.flush().map_err(usage)?;
    Ok(())
}

fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var("HAARSTAB_SEED") {
        Ok(s) => s.trim().parse().map(Some).map_err(|_| usage(anyhow!("HAARSTAB_SEED: `{s}` is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn parse_spec(s: &str) -> CliResult<ZSpec> {
    Ok(s.parse::<ZSpec>()?)
}

fn parse_range(s: &str) -> CliResult<std::ops::RangeInclusive<u32>> {
    let bad = || usage(anyhow!("--n: expected `a..b` or a single size, got `{s}`"));
    let (a, b) = match s.split_once("..") {
        Some((a, b)) => (a.trim().parse().map_err(|_| bad())?, b.trim_start_matches('=').trim().parse().map_err(|_| bad())?),
        None => {
            let n = s.trim().parse().map_err(|_| bad())?;
            (n, n)
        }
    };
    if a > b {
        return Err(bad());
    }
    Ok(a..=b)
}

fn norm_options(a: &NormArgs) -> CliResult<NormOptions> {
    let seed = a.seed.or(env_seed()?).unwrap_or(0);
    let method = match a.method {
        MethodArg::Auto => Method::Auto,
        MethodArg::Exact => Method::Exact,
        MethodArg::Mc => Method::MonteCarlo,
    };
    Ok(NormOptions { grid_depth: a.grid_depth, samples: a.samples, ..NormOptions::default() }
        .with_method(method)
        .with_seed(seed))
}

fn stabilize_inputs(a: &StabilizeArgs) -> CliResult<(Multiplier2D, EtaSchedule, StabilizeConfig)> {
    let d: Multiplier2D = load(&a.multiplier)?;
    let mut cfg: StabilizeConfig = match &a.config {
        Some(p) => load(p)?,
        None => StabilizeConfig::default(),
    };
    if let Some(s) = env_seed()? {
        cfg.seed = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(k) = a.depth {
        cfg.output_depth = k;
    }
    if let Some(x) = a.delta {
        cfg.delta_balance = x;
    }
    if let Some(b) = a.budget {
        cfg.frequency_budget = b;
    }
    let eta = match (&a.eta, a.eta_flat) {
        (Some(p), _) => load(p)?,
        (None, Some(v)) => EtaSchedule::flat(v),
        (None, None) => EtaSchedule::flat(0.25),
    };
    cfg.validate()?;
    eta.validate(cfg.output_depth + 2)?;
    Ok((d, eta, cfg))
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct LambdaMuShort {
    lambda: f64,
    mu: f64,
    converged: bool,
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct NormRow {
    space: String,
    value: f64,
    std_error: f64,
    samples: usize,
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct VariationRow {
    truncation_level: u32,
    t2s_semi_norm: f64,
    t2_norm: f64,
    diagonal: f64,
    superdiagonal: f64,
    lower: f64,
    upper: f64,
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct StabilizeRow {
    seed: u64,
    pass: bool,
    lambda: f64,
    mu: f64,
    transport_error: f64,
    t2s_semi_norm: f64,
    proximity_bound: f64,
    retries_used: usize,
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct TrialRow {
    trial: usize,
    ratio: f64,
}

fn run(cli: Cli) -> CliResult<bool> {
    let csv = cli.csv.as_deref();
    match cli.command {
        Command::Norm { vector, norm } => {
            let z: Coeffs2D = load(&vector)?;
            let spec = parse_spec(&norm.space)?;
            let est = haarstab::spaces::z_norm(&z, &spec, &norm_options(&norm)?)?;
            emit(&est)?;
            write_csv(
                csv,
                &[NormRow { space: spec.to_string(), value: est.value, std_error: est.std_error, samples: est.samples }],
            )?;
            Ok(true)
        }
        Command::LambdaMu { multiplier, lo, hi, window, tol, table } => {
            let d: Multiplier2D = load(&multiplier)?;
            let lm = lambda_mu(&d, lo, hi, window, tol)?;
            let short = LambdaMuShort { lambda: lm.lambda, mu: lm.mu, converged: lm.converged };
            if table {
                emit(&lm)?;
            } else {
                emit(&short)?;
            }
            write_csv(csv, &[short])?;
            Ok(true)
        }
        Command::Variation { multiplier, truncation } => {
            let d: Multiplier2D = load(&multiplier)?;
            let rep = t2_variation(&d, truncation)?;
            emit(&rep)?;
            let [diagonal, superdiagonal, lower, upper] = rep.per_term_breakdown;
            write_csv(
                csv,
                &[VariationRow {
                    truncation_level: rep.truncation_level,
                    t2s_semi_norm: rep.t2s_semi_norm,
                    t2_norm: rep.t2_norm,
                    diagonal,
                    superdiagonal,
                    lower,
                    upper,
                }],
            )?;
            Ok(true)
        }
        Command::Stabilize { args, out_multiplier, out_h, out_k } => {
            let (d, eta, cfg) = stabilize_inputs(&args)?;
            let res = stabilize_full(&d, &eta, &cfg)?;
            if let Some(p) = out_multiplier {
                save(&p, &res.d_tilde)?;
            }
            if let Some(p) = out_h {
                save(&p, &res.h_tilde)?;
            }
            if let Some(p) = out_k {
                save(&p, &res.k_tilde)?;
            }
            emit(&res)?;
            let pass = res.report.pass && res.transport_error <= 1e-10;
            write_csv(
                csv,
                &[StabilizeRow {
                    seed: cfg.seed,
                    pass,
                    lambda: res.lambda_mu_out.lambda,
                    mu: res.lambda_mu_out.mu,
                    transport_error: res.transport_error,
                    t2s_semi_norm: res.residual.t2s_semi_norm,
                    proximity_bound: res.proximity_bound,
                    retries_used: res.retries_used,
                }],
            )?;
            Ok(pass)
        }
        Command::ProbeCapon { family, n, coeffs, norm } => {
            let family: ProbeFamily = family.parse()?;
            let spec = parse_spec(&norm.space)?;
            let sizes = parse_range(&n)?;
            let rep = probe_capon(family, sizes, coeffs.as_deref(), &spec, &norm_options(&norm)?)?;
            emit(&rep)?;
            write_csv(csv, &rep.rows)?;
            Ok(true)
        }
        Command::CheckFactor { args, space, trials, samples } => {
            let spec = parse_spec(&space)?;
            let (d, eta, cfg) = stabilize_inputs(&args)?;
            let opts = NormOptions::default().with_samples(samples).with_seed(cfg.seed);
            let rep = check_factorization(&d, &spec, &eta, &cfg, trials, &opts)?;
            emit(&rep)?;
            let rows: Vec<TrialRow> = rep.ratios.iter().enumerate().map(|(trial, &ratio)| TrialRow { trial, ratio }).collect();
            write_csv(csv, &rows)?;
            Ok(rep.pass)
        }
        Command::Selftest => {
            let rep = selftest::run();
            emit(&rep)?;
            write_csv(csv, &rep.checks)?;
            Ok(rep.pass)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Check(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
