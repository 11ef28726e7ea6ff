use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sleepctl::experiment::{cmd_analyze, cmd_compare, cmd_evaluate, cmd_sweep, cmd_train, ExperimentConfig, RunSummary};

#[derive(Parser)]
#[command(version, about = "RU sleep-mode control experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Experiment config (`key = value` lines); defaults apply without one.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Number of decision steps (default: the whole trace).
    #[arg(long, global = true)]
    steps: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Idle-period statistics of the trace.
    Analyze,
    /// Constant-threshold sweep: power saving vs extra delay.
    Sweep,
    /// Online training of the configured variant.
    Train,
    /// Frozen-policy run of the configured variant.
    Evaluate,
    /// Paired runs of every comparison variant.
    Compare,
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let c = &cli.common;
    let cfg = c
        .config
        .as_ref()
        .map_or_else(|| Ok(ExperimentConfig::default()), ExperimentConfig::load)
        .and_then(|cfg| cfg.with_overrides(c.seed, c.steps));
    let cfg = match cfg {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(2);
        }
    };
    let out = c.out.as_path();
    let result = match cli.command {
        Command::Analyze => cmd_analyze(&cfg, out).map(|s| {
            let mean = s.iter().map(|w| w.idle_ratio).sum::<f64>() / s.len().max(1) as f64;
            println!("{} windows, mean idle ratio {mean:.3}", s.len());
        }),
        Command::Sweep => cmd_sweep(&cfg, out).map(|points| {
            for p in points {
                println!(
                    "load {:>4} d {:>6} us: saving {:.3}, extra delay {:.3} ms",
                    p.load_factor, p.d_us, p.power_saving, p.extra_delay_ms
                );
            }
        }),
        Command::Train => cmd_train(&cfg, out).map(|r| report(&cfg.variant.to_string(), &r, cfg.trailing_steps)),
        Command::Evaluate => cmd_evaluate(&cfg, out).map(|r| report(&cfg.variant.to_string(), &r, cfg.trailing_steps)),
        Command::Compare => cmd_compare(&cfg, out).map(|runs| {
            for (v, r) in runs {
                report(&v.to_string(), &r, cfg.trailing_steps);
            }
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ sleepctl::Error::Config(_)) => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn report(name: &str, reports: &[sleepctl::sim::StepReport], trailing: usize) {
    let s = RunSummary::from_reports(name, reports, trailing);
    println!(
        "{name}: {} steps, energy {:.3} (trailing {:.3}), violations {:.4} (trailing {:.4})",
        s.steps, s.mean_energy_norm, s.trailing_energy_norm, s.violation_rate, s.trailing_violation_rate
    );
}
