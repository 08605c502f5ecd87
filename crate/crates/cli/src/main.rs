use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mat_cli::config::{parse_policy, Switch};
use mat_cli::{compare, run, CliError, RunOptions};

#[derive(Debug, Parser)]
#[command(name = "mat", version, about = "Spectrum-driven selective training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one configuration and write its run directory.
    Run {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = parse_policy_arg)]
        policy: Option<String>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
        #[arg(long)]
        cadence: Option<usize>,
        #[arg(long, value_parser = parse_switch_arg)]
        sticky: Option<String>,
    },
    /// Align two or more finished runs; the first is the baseline.
    Compare {
        #[arg(required = true, num_args = 2..)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_policy_arg(s: &str) -> Result<String, String> {
    parse_policy(s).map(|_| s.to_string())
}

fn parse_switch_arg(s: &str) -> Result<String, String> {
    s.parse::<Switch>().map(|_| s.to_string())
}

fn overrides(command: &Command) -> Vec<(String, String, String)> {
    let Command::Run {
        seed,
        policy,
        alpha,
        beta,
        samples,
        epochs,
        warmup,
        cadence,
        sticky,
        ..
    } = command
    else {
        return Vec::new();
    };
    let pairs: [(&str, &str, Option<String>); 9] = [
        ("train", "seed", seed.map(|v| v.to_string())),
        ("train", "policy", policy.clone()),
        ("train", "epochs", epochs.map(|v| v.to_string())),
        ("policy", "alpha", alpha.map(|v| v.to_string())),
        ("policy", "beta", beta.map(|v| v.to_string())),
        ("policy", "samples", samples.map(|v| v.to_string())),
        ("policy", "warmup", warmup.map(|v| v.to_string())),
        ("policy", "cadence", cadence.map(|v| v.to_string())),
        ("policy", "sticky", sticky.clone()),
    ];
    pairs
        .into_iter()
        .filter_map(|(s, k, v)| Some((s.to_string(), k.to_string(), v?)))
        .collect()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MAT_LOG_LEVEL", "error")).init();
    let cli = Cli::parse();
    let outcome: Result<(), CliError> = match &cli.command {
        Command::Run { spec, out, .. } => {
            let opts = RunOptions {
                spec: spec.clone(),
                out: out.clone(),
                overrides: overrides(&cli.command),
            };
            run(&opts).map(|s| {
                println!(
                    "{}: {} epochs, final val loss {}, {} FLOPs",
                    out.display(),
                    s.epochs_run,
                    s.final_val_loss.map_or("n/a".into(), |v| format!("{v:.6}")),
                    s.flops.total
                );
            })
        }
        Command::Compare { runs, out } => compare(runs, out).map(|report| {
            for r in &report.runs {
                println!(
                    "{}: best val {} after {} FLOPs",
                    r.name,
                    r.best_val_loss.map_or("n/a".into(), |v| format!("{v:.6}")),
                    r.flops_to_best_val.map_or("n/a".into(), |v| v.to_string())
                );
            }
        }),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let (Command::Compare { out, .. }, false) = (&cli.command, matches!(e, CliError::Locked(_))) {
                if fs::create_dir_all(out).is_ok() {
                    if let Ok(json) = serde_json::to_string_pretty(&e.record()) {
                        let _ = fs::write(out.join("error.json"), json + "\n");
                    }
                }
            }
            ExitCode::from(e.exit_code())
        }
    }
}
