use clap::{Parser, Subcommand};
use kinetic::cli::{self, report::to_json, AppError, RunConfig};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "kinetic", version, about = "Audits and toy runs for the non-cutoff Boltzmann collision operator")]
struct Args {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long = "grid-n", global = true)]
    grid_n: Option<usize>,
    #[arg(long = "grid-R", global = true)]
    grid_r: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the kernel exponents and the angular-bound check.
    KernelInfo,
    /// Evaluate <Gamma(g,h), f> for the functions of the [gamma] section.
    Gamma {
        /// Run all three representations and report their spread.
        #[arg(long)]
        compare: bool,
        /// With --compare: sweep every triple of the suite and the
        /// collision invariants instead of a single triple.
        #[arg(long, requires = "compare")]
        suite: bool,
    },
    /// Run one of: bjest, cancellation, lp_slopes, estnorm3, nonlin,
    /// compact, psi, redistribution, nu, coercivity.
    Audit { name: String },
    /// Toy evolution with energy ledger and decay fit.
    Evolve,
}

fn config(args: &Args) -> Result<RunConfig, AppError> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = &args.out {
        cfg.out = o.clone();
    }
    if args.grid_n.is_some() {
        cfg.grid.n = args.grid_n;
    }
    if args.grid_r.is_some() {
        cfg.grid.radius = args.grid_r;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(args: Args) -> Result<(), AppError> {
    if let Some(n) = args.threads {
        if n == 0 {
            return Err(AppError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| AppError::Abort(e.to_string()))?;
    }
    let cfg = config(&args)?;
    match &args.command {
        Command::KernelInfo => println!("{}", cli::cmd_kernel_info(&cfg)?),
        Command::Gamma { compare, suite: true } if *compare => {
            for rep in [cli::audits::representation_suite(&cfg)?, cli::audits::invariant_suite(&cfg)?] {
                let (_, json) = rep.write(&cfg.out)?;
                print!("{}", rep.summary());
                println!("  wall time {:.1} s, written to {}", rep.wall_time.as_secs_f64(), json.display());
            }
        }
        Command::Gamma { compare, .. } => {
            let out = cli::cmd_gamma(&cfg, *compare)?;
            std::fs::create_dir_all(&cfg.out)?;
            let path = cfg.out.join("gamma.json");
            std::fs::write(&path, to_json(&out))?;
            for r in &out.reports {
                println!("{:?}: {:.16e} +- {:.3e}", r.representation, r.value, r.error_estimate);
            }
            if let (Some(d), Some(q)) = (out.max_deviation, out.deviation_over_error) {
                println!("max pairwise deviation {d:.6e} ({q:.3} x combined error)");
            }
            println!("written to {}", path.display());
        }
        Command::Audit { name } => {
            let rep = cli::cmd_audit(&cfg, name)?;
            print!("{}", rep.summary());
            println!("  wall time {:.1} s", rep.wall_time.as_secs_f64());
        }
        Command::Evolve => {
            let out = cli::evolve::cmd_evolve(&cfg)?;
            print!("{}", to_json(&out.summary));
            println!("run directory {}", out.dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
