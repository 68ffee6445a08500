use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use gridsnoop::scenario::{cmd_campaign, cmd_learn, cmd_simulate, ScenarioConfig};
use gridsnoop::Error;

#[derive(Parser)]
#[command(name = "gridsnoop", version, about = "Blind FDI attack co-simulation on AC state estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the grid and log the operator's estimates.
    Simulate(RunArgs),
    /// Sweep topology learning over sample counts.
    Learn(RunArgs),
    /// Run attack campaigns against a live simulation.
    Campaign(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Flat toml scenario file.
    #[arg(long)]
    config: PathBuf,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Any other config key, as `--key value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

fn pairs(raw: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = raw.iter();
    while let Some(flag) = it.next() {
        let Some(key) = flag.strip_prefix("--") else {
            bail!("expected --key, found {flag:?}");
        };
        match key.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => match it.next() {
                Some(v) => out.push((key.to_string(), v.clone())),
                None => bail!("--{key} needs a value"),
            },
        }
    }
    Ok(out)
}

fn load(args: &RunArgs) -> Result<ScenarioConfig> {
    let mut overrides = pairs(&args.overrides)?;
    if let Some(seed) = args.seed {
        overrides.push(("seeds".into(), seed.to_string()));
    }
    if let Some(out) = &args.out {
        overrides.push(("out".into(), out.to_string_lossy().into_owned()));
    }
    Ok(ScenarioConfig::from_file(&args.config, &overrides)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(args) => {
            let cfg = load(&args)?;
            for r in cmd_simulate(&cfg)? {
                println!("seed {}: {} snapshots, {} operator alarms", r.seed, r.snapshots, r.alarms);
            }
        }
        Command::Learn(args) => {
            let cfg = load(&args)?;
            for row in cmd_learn(&cfg)? {
                match (&row.pseudo_residual, &row.error) {
                    (Some(r), _) => println!("T={} seed {}: r_p {r:.4} (alarm {:.3})", row.samples, row.seed, row.alarm),
                    (None, Some(e)) => println!("T={} seed {}: {e}", row.samples, row.seed),
                    (None, None) => println!("T={} seed {}: no result", row.samples, row.seed),
                }
            }
        }
        Command::Campaign(args) => {
            let cfg = load(&args)?;
            let s = cmd_campaign(&cfg)?;
            for o in &s.outcomes {
                println!("seed {}: {}", o.seed, o.log.diagnosis);
            }
            let show = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
            println!("ungated detection {}", show(s.ungated_detection));
            println!("gated detection {}", show(s.gated_detection));
            println!("median first attack (min) {}", show(s.median_first_attack));
        }
    }
    Ok(())
}

/// 2 for bad input, 3 for numerical failure.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_validation() => 2,
        Some(Error::Io(_) | Error::Csv(_)) => 2,
        Some(_) => 3,
        None => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
