//! `rvm`: kernel checks, posterior fits, the grid oracle and contraction benches.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rvm_core::bench::{aggregate, q_schedule, rate_fit, read_cells_csv, run_bench, simulate_data, write_outputs, generate_truth};
use rvm_core::gibbs::{run_chains, write_trace_csv, Hyperparams, Problem};
use rvm_core::io::{load_matrix_csv, save_matrix_csv};
use rvm_core::kernel::{
    build_kernel, check_gaussian_separation, check_near_orthogonality, generate_design, spectral_certificate, DesignMatrix,
    KernelFamily, SpectralCertificate,
};
use rvm_core::oracle::oracle_posterior;
use rvm_core::prior::GlobalSchedule;
use rvm_core::rng::{child_stream, label};
use rvm_core::RvmError;
use serde_json::json;

use config::{DataSource, DesignSource, RunConfig};

#[derive(Debug)]
pub enum CliError {
    /// Unusable config, unreadable input or unwritable output.
    Config(String),
    Numerical(String),
    /// A requested check did not hold.
    CheckFailed(String),
    /// A result crossed a configured acceptance threshold.
    Threshold(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::CheckFailed(_) => 1,
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Threshold(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical error: {m}"),
            CliError::CheckFailed(m) => write!(f, "check failed: {m}"),
            CliError::Threshold(m) => write!(f, "threshold exceeded: {m}"),
        }
    }
}

impl From<RvmError> for CliError {
    fn from(e: RvmError) -> Self {
        if e.is_numerical() || matches!(e, RvmError::RangeTooNarrow { .. }) {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Config(e.to_string())
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "rvm", version, about = "Shrinkage-prior relevance vector machine: fits, oracle and contraction benches")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to available parallelism.
    #[arg(long, global = true, env = "RVM_THREADS")]
    threads: Option<usize>,
    /// Scalar override `dotted.key=value`; repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Spectral certificate and design-condition checks for a kernel matrix.
    KernelCheck,
    /// Run the Gibbs sampler and write a posterior summary.
    Fit,
    /// Grid-integration reference posterior for n <= 3.
    Oracle,
    /// Monte-Carlo contraction bench over an n-grid.
    Bench,
    /// Log-log rate fit over bench cell CSVs.
    RateFit {
        /// `cells.csv` files; appended to `rate_fit.inputs`.
        inputs: Vec<PathBuf>,
    },
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut value = config::load_value(cli.config.as_deref())?;
    for o in &cli.overrides {
        config::apply_override(&mut value, o)?;
    }
    let mut cfg = RunConfig::from_value(value)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    if let Command::RateFit { inputs } = &cli.command {
        cfg.rate_fit.inputs.extend(inputs.iter().cloned());
    }
    cfg.chain.seed = cfg.seed;
    cfg.bench.seed = cfg.seed;
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serializable output");
    fs::write(path, text).map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
}

fn load_design(cfg: &RunConfig, command: &str) -> Result<DesignMatrix, CliError> {
    match RunConfig::require(&cfg.design, "design", command)? {
        DesignSource::Generate { n, p, design } => {
            Ok(generate_design(*n, *p, *design, &mut child_stream(cfg.seed, &[label::DESIGN]))?)
        }
        DesignSource::Csv { path } => Ok(DesignMatrix::new(load_matrix_csv(path)?)?),
    }
}

fn certificate(cfg: &RunConfig, k: &nalgebra::DMatrix<f64>) -> Result<SpectralCertificate, CliError> {
    let (c1, c2) = cfg.checks.certificate.unwrap_or((f64::MIN_POSITIVE, f64::INFINITY));
    Ok(spectral_certificate(k, c1, c2)?)
}

fn cmd_kernel_check(cfg: &RunConfig) -> Result<(), CliError> {
    let x = load_design(cfg, "kernel-check")?;
    let spec = *RunConfig::require(&cfg.kernel, "kernel", "kernel-check")?;
    let k = build_kernel(&x, &spec)?;
    let cert = certificate(cfg, k.entries())?;
    let mut passed = cert.satisfied;
    let mut report = json!({ "n": x.n(), "p": x.p(), "kernel": spec, "certificate": cert });
    let separation = cfg.checks.separation.unwrap_or(spec.family == KernelFamily::Gaussian);
    if separation {
        let s = check_gaussian_separation(&x, spec.theta)?;
        passed &= s.satisfied;
        report["separation"] = json!(s);
    }
    if let Some((a_l, a_u)) = cfg.checks.near_orthogonality {
        let r = check_near_orthogonality(&x, a_l, a_u)?;
        passed &= r.satisfied;
        report["near_orthogonality"] = json!(r);
    }
    report["passed"] = json!(passed);
    save_matrix_csv(&cfg.out.join("design.csv"), x.matrix())?;
    write_json(&cfg.out.join("kernel_check.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report).unwrap());
    if passed {
        Ok(())
    } else {
        Err(CliError::CheckFailed("one or more kernel checks failed; see kernel_check.json".into()))
    }
}

/// Kernel, response, hyperparameters and (when simulated) the truth.
struct FitInputs {
    k: nalgebra::DMatrix<f64>,
    y: nalgebra::DVector<f64>,
    hyper: Hyperparams,
    cert: SpectralCertificate,
    beta0: Option<Vec<f64>>,
}

fn fit_inputs(cfg: &RunConfig, command: &str) -> Result<FitInputs, CliError> {
    let x = load_design(cfg, command)?;
    let spec = RunConfig::require(&cfg.kernel, "kernel", command)?;
    let k = build_kernel(&x, spec)?.into_entries();
    let cert = certificate(cfg, &k)?;
    let n = x.n();
    let (y, q_sim, beta0) = match &cfg.data {
        DataSource::Simulate { q_n, gamma, m, sigma0_sq, support_rule, value_rule } => {
            let q = q_n.unwrap_or_else(|| q_schedule(n, *gamma));
            let truth =
                generate_truth(n, q, *m, *sigma0_sq, *support_rule, *value_rule, &mut child_stream(cfg.seed, &[label::TRUTH]))?;
            let y = simulate_data(&k, &truth, &mut child_stream(cfg.seed, &[label::NOISE]))?;
            (y, Some(q), Some(truth.beta0))
        }
        DataSource::Csv { path } => {
            let m = load_matrix_csv(path)?;
            if m.ncols() != 1 || m.nrows() != n {
                return Err(CliError::Config(format!("response must be {n} x 1, got {} x {}", m.nrows(), m.ncols())));
            }
            (m.column(0).into_owned(), None, None)
        }
    };
    let h = &cfg.hyper;
    let tau_sq = match h.tau_sq {
        Some(t) => t,
        None => {
            let q = h.q_n.or(q_sim).ok_or_else(|| {
                CliError::Config("missing config key `hyper.q_n` (needed for the tau^2 schedule with CSV data)".into())
            })?;
            let schedule = GlobalSchedule { regime: h.regime, constant: h.schedule_constant, delta: h.schedule_delta };
            schedule.tau_squared(n, q, Some(cert.lambda_min))?
        }
    };
    let hyper = Hyperparams { a: h.a, b: h.b, tau_sq };
    hyper.validate()?;
    Ok(FitInputs { k, y, hyper, cert, beta0 })
}

fn cmd_fit(cfg: &RunConfig) -> Result<(), CliError> {
    let prior = RunConfig::require(&cfg.prior, "prior", "fit")?;
    let inp = fit_inputs(cfg, "fit")?;
    let chain = &cfg.chain;
    let problem = Problem::new(inp.k, inp.y.clone())?;
    let run = run_chains(&problem, prior, &inp.hyper, chain, &[])?;
    save_matrix_csv(&cfg.out.join("y.csv"), &nalgebra::DMatrix::from_column_slice(inp.y.len(), 1, inp.y.as_slice()))?;
    write_json(&cfg.out.join("summary.json"), &run.summary)?;
    write_json(&cfg.out.join("certificate.json"), &json!({ "certificate": inp.cert, "tau_sq": inp.hyper.tau_sq, "beta0": inp.beta0 }))?;
    if chain.keep_trace {
        let path = cfg.out.join("trace.csv");
        let f = fs::File::create(&path).map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))?;
        write_trace_csv(std::io::BufWriter::new(f), &run.records, chain.trace_beta_max)?;
    }
    let s = &run.summary;
    println!(
        "fit: n={} kept={} sigma^2={:.6} rhat_max={:.4} ess_min={:.0}",
        s.n,
        s.n_kept,
        s.sigma_sq_mean,
        s.rhat_max(),
        s.ess_min
    );
    Ok(())
}

fn cmd_oracle(cfg: &RunConfig) -> Result<(), CliError> {
    let prior = RunConfig::require(&cfg.prior, "prior", "oracle")?;
    let inp = fit_inputs(cfg, "oracle")?;
    let result = oracle_posterior(&inp.k, &inp.y, prior, &inp.hyper, &cfg.grid)?;
    write_json(&cfg.out.join("oracle.json"), &result)?;
    println!("{}", serde_json::to_string_pretty(&result).unwrap());
    Ok(())
}

fn cmd_bench(cfg: &RunConfig) -> Result<(), CliError> {
    let report = run_bench(&cfg.bench)?;
    write_outputs(&cfg.out, &report)?;
    let s = &report.summary;
    for a in &s.aggregates {
        println!(
            "n={:>4} q_n={:>3} used={:>3}/{:<3} err_sq={:.4e} trace_var={:.4e} tail={:.3}",
            a.n, a.q_n, a.used, a.cells, a.err_sq.mean, a.trace_var.mean, a.tail_prob_kbeta.mean
        );
    }
    for f in &s.fits {
        if let Some(fit) = &f.fit {
            println!("slope {:?} vs {:?}: {:.4} (r^2 {:.3})", f.metric, f.against, fit.slope, fit.r_squared);
        }
    }
    Ok(())
}

fn cmd_rate_fit(cfg: &RunConfig) -> Result<(), CliError> {
    let rf = &cfg.rate_fit;
    if rf.inputs.is_empty() {
        return Err(CliError::Config("missing config key `rate_fit.inputs` (or positional CSV paths)".into()));
    }
    let mut rows = Vec::new();
    for path in &rf.inputs {
        let f = fs::File::open(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        rows.extend(read_cells_csv(f)?);
    }
    let aggs = aggregate(&rows);
    let fit = rate_fit(&aggs, rf.metric, rf.against)?;
    let out = json!({ "metric": rf.metric, "against": rf.against, "fit": fit, "points": aggs.len() });
    fs::create_dir_all(&cfg.out).map_err(|e| CliError::Config(format!("cannot create {}: {e}", cfg.out.display())))?;
    write_json(&cfg.out.join("rate_fit.json"), &out)?;
    println!("{}", serde_json::to_string_pretty(&out).unwrap());
    match rf.max_slope {
        Some(max) if fit.slope > max => Err(CliError::Threshold(format!("slope {:.4} exceeds {max}", fit.slope))),
        _ => Ok(()),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve(&cli)?;
    if let Some(t) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    cfg.write_resolved(&cfg.out)?;
    if cfg.verbosity > 0 {
        eprintln!("resolved config written to {}", cfg.out.join("config.json").display());
    }
    match cli.command {
        Command::KernelCheck => cmd_kernel_check(&cfg),
        Command::Fit => cmd_fit(&cfg),
        Command::Oracle => cmd_oracle(&cfg),
        Command::Bench => cmd_bench(&cfg),
        Command::RateFit { .. } => cmd_rate_fit(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rvm: {e}");
            ExitCode::from(e.code())
        }
    }
}
