use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use online_control::harness::{
    oracle, parse_spec, run_experiment, sweep, verify, ExperimentSpec, HarnessError, RunOptions, SweepParam,
};

#[derive(Parser)]
#[command(name = "onctl", version, about = "Online control of linear dynamical systems: experiments and checks")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Output directory (overrides the spec's `output`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
    /// Worker threads for sweeps.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Run every horizon in the spec and write traces, plots and a summary.
    Run { spec: PathBuf },
    /// One run per parameter value.
    Sweep {
        spec: PathBuf,
        #[arg(long)]
        param: SweepParam,
        /// Comma-separated values, e.g. 2,4,8,16.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Property checks on the instance only.
    Verify { spec: PathBuf },
    /// Print recomputed reference values as JSON.
    Oracle { spec: PathBuf },
}

fn load(path: &PathBuf, common: &Common) -> Result<(ExperimentSpec, RunOptions), HarnessError> {
    let mut spec = parse_spec(path)?;
    if let Some(seed) = common.seed {
        spec.seed = seed;
    }
    let out_dir = common
        .out
        .clone()
        .or_else(|| spec.output.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let opts = RunOptions {
        out_dir,
        quiet: common.quiet,
        threads: common.threads.max(1),
    };
    Ok((spec, opts))
}

fn execute(cli: &Cli) -> Result<(), HarnessError> {
    match &cli.command {
        Command::Run { spec } => {
            let (spec, opts) = load(spec, &cli.common)?;
            let summary = run_experiment(&spec, &opts)?;
            if !opts.quiet {
                print!("{}", summary.to_json());
            }
        }
        Command::Sweep { spec, param, values } => {
            let (spec, opts) = load(spec, &cli.common)?;
            let rows = sweep(&spec, *param, values, &opts)?;
            if !opts.quiet {
                println!("value,final_regret,mean_gap");
                for r in rows {
                    println!("{},{},{}", r.value, r.final_regret, r.mean_gap);
                }
            }
        }
        Command::Verify { spec } => {
            let (spec, opts) = load(spec, &cli.common)?;
            let checks = verify(&spec)?;
            let failed = checks.iter().filter(|c| !c.passed).count();
            for c in &checks {
                if !opts.quiet || !c.passed {
                    println!("{} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
                }
            }
            if failed > 0 {
                return Err(HarnessError::ChecksFailed(failed));
            }
        }
        Command::Oracle { spec } => {
            let (spec, opts) = load(spec, &cli.common)?;
            let doc = oracle(&spec)?;
            let text = serde_json::to_string_pretty(&doc).expect("json") + "\n";
            let dir = opts.out_dir.join(&spec.name);
            std::fs::create_dir_all(&dir)?;
            std::fs::write(dir.join("oracle.json"), &text)?;
            if !opts.quiet {
                print!("{text}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("onctl: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
