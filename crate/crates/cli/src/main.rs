use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use concavlab::harness::{
    run_baselines, run_check, run_deficit, run_envelope, run_solve, run_sweep, write_baselines, CheckKind,
    ExperimentConfig, FitOutcome,
};
use concavlab::Error;

#[derive(Parser)]
#[command(name = "concavlab", version, about = "Concavity deficits of semilinear elliptic problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; CONCAVLAB_THREADS takes precedence.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Recorded in the sweep report; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the configured problem and write the solution field.
    Solve,
    /// Solve, transform and locate the maximal concavity deficit.
    Deficit,
    /// Concave envelope of the transform and its Hyers-Ulam witness.
    Envelope,
    /// Audit a theorem inequality, the eps-scaling bound or the remark.
    Check {
        #[arg(long, value_enum)]
        theorem: Which,
    },
    /// Run every eps of the configured sweep and fit the scaling.
    Sweep,
    /// The classical closed-form baselines.
    Baselines {
        #[arg(long, default_value_t = 1.0 / 64.0)]
        h: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Props,
    Remark,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::Json(_)
        | Error::Expression(_)
        | Error::InvalidDomain(_)
        | Error::InvalidGrid(_)
        | Error::InvalidProblem(_)
        | Error::BetaOneRejected
        | Error::EllipticityViolation { .. }
        | Error::NonpositiveSource { .. } => 2,
        Error::Io(_) => 1,
        _ => 3,
    }
}

fn threads(cli: Option<usize>, cfg: Option<usize>) -> Option<usize> {
    std::env::var("CONCAVLAB_THREADS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .or(cli)
        .or(cfg)
        .filter(|&n| n > 0)
}

fn print<T: serde::Serialize>(v: &T) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> Result<u8, Error> {
    let cfg = match &cli.config {
        Some(p) => {
            let mut c = ExperimentConfig::load(p)?;
            if let Some(s) = cli.seed {
                c.seed = s;
            }
            Some(c)
        }
        None => None,
    };
    if let Some(n) = threads(cli.threads, cfg.as_ref().and_then(|c| c.threads)) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let need = || cfg.clone().ok_or_else(|| Error::Config("--config is required for this command".into()));
    let out = |c: &ExperimentConfig| cli.out.clone().unwrap_or_else(|| c.output_dir());
    match cli.command {
        Command::Solve => {
            let c = need()?;
            print(&run_solve(&c, &out(&c))?)?;
        }
        Command::Deficit => {
            let c = need()?;
            print(&run_deficit(&c, &out(&c))?)?;
        }
        Command::Envelope => {
            let c = need()?;
            let o = run_envelope(&c, &out(&c))?;
            print(&o)?;
            if !o.envelope.consistent {
                return Ok(4);
            }
        }
        Command::Check { theorem } => {
            let c = need()?;
            let kind = match theorem {
                Which::One => CheckKind::Theorem1,
                Which::Two => CheckKind::Theorem2,
                Which::Props => CheckKind::Props,
                Which::Remark => CheckKind::Remark,
            };
            let o = run_check(&c, kind, &out(&c))?;
            print(&o)?;
            if o.failed() {
                return Ok(4);
            }
        }
        Command::Sweep => {
            let c = need()?;
            let dir = out(&c);
            let r = run_sweep(&c, &dir)?;
            println!("{:>10} {:>12} {:>12} {:>12} {:>8} {:>10} {:>10}", "eps", "eps_meas", "deficit", "floor", "status", "thm1", "thm2");
            let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4e}"));
            for row in &r.rows {
                println!(
                    "{:>10} {:>12} {:>12} {:>12} {:>8} {:>10} {:>10}",
                    row.eps,
                    opt(row.eps_meas),
                    opt(row.deficit),
                    opt(row.floor),
                    if row.status == "ok" && row.censored { "censored" } else { row.status.as_str() },
                    row.theorem1,
                    row.theorem2
                );
            }
            match &r.fit {
                FitOutcome::Fitted(f) => println!("slope {:.4} intercept {:.4} rms {:.3e} over {} rows", f.slope, f.intercept, f.residual, f.rows),
                FitOutcome::Refused { reason } => println!("fit refused: {reason}"),
            }
            println!("reports in {}", dir.display());
            if r.audit_failures > 0 {
                return Ok(4);
            }
        }
        Command::Baselines { h } => {
            let r = run_baselines(h)?;
            let dir = cli
                .out
                .clone()
                .or_else(|| cfg.as_ref().map(|c| c.output_dir()))
                .unwrap_or_else(|| PathBuf::from("concavlab-out"));
            write_baselines(&r, &dir)?;
            print!("{}", r.table());
            if !r.all_pass {
                return Ok(4);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
