//! Command line front end: run the estimator, benchmark it, query the
//! reference oracles, and check gradients.
//!
//! Exit codes are a stable contract: 0 success / converged, 1 usage or
//! configuration error, 2 aborted run, 3 iteration cap reached.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use svre::stats::derive_seed;
use svre::{
    crude_mc, fourbranch_branch_gap, gradient_check, rrmse, run_svre, EstimateReport,
    ProblemSpec, RunConfig, Termination,
};

const SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "svre", version, about = "Rare event probability estimation by Stein variational particle transport")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a single estimator run from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Write the report JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Dump final estimation samples and weights as CSV.
        #[arg(long)]
        samples_csv: Option<PathBuf>,
    },
    /// Execute repeated seeded runs and summarize accuracy against a
    /// reference probability.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Number of repetitions (overrides the config).
        #[arg(long)]
        runs: Option<usize>,
        /// Master seed (overrides the config seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Reference probability override.
        #[arg(long = "p-ref")]
        p_ref: Option<f64>,
        /// Summary JSON output path (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-run CSV output path.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Worker threads (or env SVRE_THREADS; default: all cores).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Compute a reference probability for the configured problem.
    Oracle {
        #[arg(long)]
        config: PathBuf,
        /// auto | analytic | is | mc
        #[arg(long, default_value = "auto")]
        method: String,
        #[arg(long, default_value_t = 1_000_000)]
        n_samples: u64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check analytic gradients against central finite differences.
    Gradcheck {
        /// Restrict to the problem of this config (default: builtin suite).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// List the built-in problems and their parameters.
    ListProblems,
}

#[derive(Serialize)]
struct RunDocument<'a> {
    schema_version: u32,
    problem: &'a ProblemSpec,
    #[serde(flatten)]
    report: &'a EstimateReport,
}

#[derive(Serialize)]
struct BenchDocument<'a> {
    schema_version: u32,
    problem: &'a ProblemSpec,
    runs_requested: usize,
    master_seed: u64,
    p_ref_source: &'a str,
    #[serde(flatten)]
    summary: svre::BenchmarkResult,
}

#[derive(Serialize)]
struct OracleDocument<'a> {
    schema_version: u32,
    problem: &'a ProblemSpec,
    method: &'a str,
    n_samples: u64,
    p_ref: f64,
    cov: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode, Box<dyn std::error::Error>> {
    match cli.command {
        Command::Run { config, out, seed, samples_csv } => cmd_run(&config, out, seed, samples_csv),
        Command::Bench { config, runs, seed, p_ref, out, csv, threads } => {
            cmd_bench(&config, runs, seed, p_ref, out, csv, threads)
        }
        Command::Oracle { config, method, n_samples, seed, out } => {
            cmd_oracle(&config, &method, n_samples, seed, out)
        }
        Command::Gradcheck { config } => cmd_gradcheck(config.as_deref()),
        Command::ListProblems => {
            print!("{}", problem_listing());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfig, Box<dyn std::error::Error>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    Ok(RunConfig::from_json(&text)?)
}

fn emit(doc: &impl Serialize, out: Option<PathBuf>) -> Result<(), Box<dyn std::error::Error>> {
    let mut text = serde_json::to_string_pretty(doc)?;
    text.push('\n');
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_run(
    config_path: &Path,
    out: Option<PathBuf>,
    seed: Option<u64>,
    samples_csv: Option<PathBuf>,
) -> Result<ExitCode, Box<dyn std::error::Error>> {
    let mut config = load_config(config_path)?;
    if let Some(s) = seed {
        config.svre.seed = s; // CLI seed supersedes the file seed
    }
    let problem = config.problem.build()?;
    let report = run_svre(&problem, &config.svre)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    emit(
        &RunDocument { schema_version: SCHEMA_VERSION, problem: &config.problem, report: &report },
        out,
    )?;
    if let Some(path) = samples_csv {
        let mut text = String::from("weight");
        for j in 0..problem.dim() {
            text.push_str(&format!(",x{}", j + 1));
        }
        text.push('\n');
        for (w, x) in report.weights.iter().zip(&report.final_positions) {
            text.push_str(&format!("{w:e}"));
            for v in x {
                text.push_str(&format!(",{v:e}"));
            }
            text.push('\n');
        }
        std::fs::write(path, text)?;
    }
    Ok(match report.termination {
        Termination::Converged => ExitCode::SUCCESS,
        Termination::Aborted => ExitCode::from(2),
        Termination::MaxIterations => ExitCode::from(3),
    })
}

fn resolve_p_ref(
    spec: &ProblemSpec,
    flag: Option<f64>,
    seed: u64,
) -> Result<(f64, &'static str), Box<dyn std::error::Error>> {
    if let Some(p) = flag {
        return Ok((p, "flag"));
    }
    if let Some(p) = spec.analytic_reference()? {
        return Ok((p, "analytic"));
    }
    if let ProblemSpec::Fourbranch { gamma } = spec {
        let (p, _cov) = svre::oracle::fourbranch_is_reference(*gamma, 2_000_000, seed);
        return Ok((p, "is_oracle"));
    }
    Err(format!(
        "no analytic reference for problem '{}'; pass --p-ref or run `svre oracle` first",
        spec.id()
    )
    .into())
}

fn cmd_bench(
    config_path: &Path,
    runs: Option<usize>,
    seed: Option<u64>,
    p_ref: Option<f64>,
    out: Option<PathBuf>,
    csv: Option<PathBuf>,
    threads: Option<usize>,
) -> Result<ExitCode, Box<dyn std::error::Error>> {
    let config = load_config(config_path)?;
    let runs = runs.unwrap_or(config.runs);
    if runs < 2 {
        return Err(format!("bench needs at least 2 runs, got {runs}").into());
    }
    let threads =
        threads.or_else(|| std::env::var("SVRE_THREADS").ok().and_then(|v| v.parse().ok()));
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }

    let master_seed = seed.unwrap_or(config.svre.seed);
    let (p_ref, p_ref_source) = resolve_p_ref(&config.problem, p_ref, master_seed)?;
    let problem = config.problem.build()?;

    use rayon::prelude::*;
    let reports: Vec<EstimateReport> = (0..runs)
        .into_par_iter()
        .map(|idx| {
            let mut cfg = config.svre.clone();
            cfg.seed = derive_seed(master_seed, idx as u64);
            run_svre(&problem.clone(), &cfg).expect("validated config")
        })
        .collect();

    if let Some(path) = csv {
        let mut text =
            String::from("seed,p_hat,delta_hat,iterations,gradient_calls,model_calls\n");
        for r in &reports {
            let p = r.p_hat.map(|v| format!("{v:e}")).unwrap_or_default();
            let d = r.delta_hat.map(|v| format!("{v:e}")).unwrap_or_default();
            text.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.seed, p, d, r.iterations, r.gradient_calls, r.model_calls
            ));
        }
        std::fs::write(path, text)?;
    }

    let summary = rrmse(&reports, p_ref, 0.5)?;
    emit(
        &BenchDocument {
            schema_version: SCHEMA_VERSION,
            problem: &config.problem,
            runs_requested: runs,
            master_seed,
            p_ref_source,
            summary,
        },
        out,
    )?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_oracle(
    config_path: &Path,
    method: &str,
    n_samples: u64,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<ExitCode, Box<dyn std::error::Error>> {
    let config = load_config(config_path)?;
    let seed = seed.unwrap_or(config.svre.seed);
    let spec = &config.problem;
    let (method_used, p, cov, n_used): (&str, f64, f64, u64) = match method {
        "analytic" => {
            let p = spec
                .analytic_reference()?
                .ok_or_else(|| format!("no analytic reference for '{}'", spec.id()))?;
            ("analytic", p, 0.0, 0)
        }
        "is" => match spec {
            ProblemSpec::Fourbranch { gamma } => {
                let (p, cov) = svre::oracle::fourbranch_is_reference(*gamma, n_samples, seed);
                ("is_oracle", p, cov, n_samples)
            }
            _ => {
                return Err(
                    format!("IS oracle only exists for fourbranch, not '{}'", spec.id()).into()
                )
            }
        },
        "mc" => {
            let problem = spec.build()?;
            let (p, cov) = crude_mc(&problem, n_samples, seed);
            ("crude_mc", p, cov, n_samples)
        }
        "auto" => match spec {
            ProblemSpec::Linear { .. } | ProblemSpec::Quadratic { .. } => {
                let p = spec.analytic_reference()?.expect("analytic reference exists");
                ("analytic", p, 0.0, 0)
            }
            ProblemSpec::Fourbranch { gamma } => {
                let (p, cov) = svre::oracle::fourbranch_is_reference(*gamma, n_samples, seed);
                ("is_oracle", p, cov, n_samples)
            }
            ProblemSpec::Darcy(_) => {
                let problem = spec.build()?;
                let (p, cov) = crude_mc(&problem, n_samples, seed);
                ("crude_mc", p, cov, n_samples)
            }
        },
        other => return Err(format!("unknown oracle method '{other}'").into()),
    };
    emit(
        &OracleDocument {
            schema_version: SCHEMA_VERSION,
            problem: spec,
            method: method_used,
            n_samples: n_used,
            p_ref: p,
            cov,
        },
        out,
    )?;
    Ok(ExitCode::SUCCESS)
}

fn gradcheck_one(
    label: &str,
    spec: &ProblemSpec,
    points: usize,
    h: f64,
    tol: f64,
) -> Result<bool, Box<dyn std::error::Error>> {
    use rand::prelude::*;
    use rand_distr::StandardNormal;
    let problem = spec.build()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x6AD5);
    let mut worst = 0.0f64;
    let mut checked = 0;
    while checked < points {
        let x: Vec<f64> =
            (0..problem.dim()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        if matches!(spec, ProblemSpec::Fourbranch { .. }) && fourbranch_branch_gap(&x) < 1e-3 {
            continue; // kink between branches; the subgradient is one-sided
        }
        let err = gradient_check(&problem, &x, h)?;
        worst = worst.max(err);
        checked += 1;
    }
    let ok = worst <= tol;
    println!(
        "{} {label}: max relative gradient error {worst:.3e} (tolerance {tol:.0e})",
        if ok { "PASS" } else { "FAIL" }
    );
    Ok(ok)
}

fn cmd_gradcheck(config: Option<&Path>) -> Result<ExitCode, Box<dyn std::error::Error>> {
    let mut all_ok = true;
    if let Some(path) = config {
        let cfg = load_config(path)?;
        let tol = if matches!(cfg.problem, ProblemSpec::Darcy(_)) { 1e-4 } else { 1e-5 };
        all_ok &= gradcheck_one(cfg.problem.id(), &cfg.problem, 20, 1e-5, tol)?;
    } else {
        let suite: Vec<(&str, ProblemSpec, f64)> = vec![
            ("linear d=100 beta=4", ProblemSpec::Linear { d: 100, beta: 4.0 }, 1e-5),
            ("quadratic d=2", ProblemSpec::Quadratic { d: 2, beta: 4.0, kappa: 10.0 }, 1e-5),
            ("quadratic d=100", ProblemSpec::Quadratic { d: 100, beta: 4.0, kappa: 10.0 }, 1e-5),
            ("fourbranch gamma=0", ProblemSpec::Fourbranch { gamma: 0.0 }, 1e-5),
            ("darcy d=10", ProblemSpec::Darcy(svre::darcy::DarcyConfig::with_dim(10)), 1e-4),
        ];
        for (label, spec, tol) in &suite {
            all_ok &= gradcheck_one(label, spec, 20, 1e-5, *tol)?;
        }
    }
    Ok(if all_ok { ExitCode::SUCCESS } else { ExitCode::from(4) })
}

fn problem_listing() -> String {
    [
        "linear      {d, beta}                  g = beta - sum(x)/sqrt(d); exact p_F = Phi(-beta)",
        "quadratic   {d, beta, kappa}           adds (kappa/4)(x1-x2)^2; reference by 1-D quadrature",
        "fourbranch  {gamma}                    min of four branches - gamma in d=2; IS oracle reference",
        "darcy       {d, grid_m, p_thresh, ...} 1-D porous-medium flow, max pressure exceedance",
    ]
    .join("\n")
        + "\n"
}
