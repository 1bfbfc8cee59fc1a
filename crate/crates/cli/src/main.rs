use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use flowguide_cli::config::{load_spec, GuideSpec, SampleSpec, SweepSpec, TrainSpec};
use flowguide_cli::{cmd_guide, cmd_sample, cmd_sweep, cmd_train, CliError};

#[derive(Parser)]
#[command(name = "flowguide", about = "Train flow-matching models and guide them through inverse problems", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Override the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for independent repeat jobs.
    #[arg(long, global = true, default_value_t = 1)]
    parallel: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes model.ckpt and loss.csv.
    Train,
    /// Integrate free-flow samples; writes endpoints.csv and trajectory CSVs.
    Sample,
    /// Run one guided solve (or a repeat loop); writes summaries, metrics,
    /// trajectories, and image files.
    Guide,
    /// Sweep K (or lambda, or N) for the receding-horizon solver against a
    /// global reference; writes sweep_<param>.csv.
    #[command(name = "sweep-k")]
    SweepK,
}

fn config_path(cli: &Cli) -> Result<&PathBuf, CliError> {
    cli.config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config <path> is required for this command".into()))
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train => {
            let mut spec: TrainSpec = load_spec(config_path(cli)?)?;
            if let Some(seed) = cli.seed {
                spec.seed = seed;
            }
            let ckpt = cmd_train(&spec, &cli.out)?;
            println!("checkpoint written to {}", ckpt.display());
        }
        Command::Sample => {
            let mut spec: SampleSpec = load_spec(config_path(cli)?)?;
            if let Some(seed) = cli.seed {
                spec.seed = seed;
            }
            cmd_sample(&spec, &cli.out)?;
            println!("samples written to {}", cli.out.display());
        }
        Command::Guide => {
            let mut spec: GuideSpec = load_spec(config_path(cli)?)?;
            if let Some(seed) = cli.seed {
                spec.seed = seed;
            }
            let outcomes = cmd_guide(&spec, &cli.out, cli.parallel)?;
            for outcome in &outcomes {
                println!(
                    "seed {}: J {:.6} energy {:.6} terminal {:.6}{}",
                    outcome.seed,
                    outcome.result.objective,
                    outcome.result.control_energy,
                    outcome.result.terminal_loss,
                    outcome
                        .summary
                        .psnr
                        .map(|p| format!(" psnr {p:.2}"))
                        .unwrap_or_default()
                );
            }
        }
        Command::SweepK => {
            let mut spec: SweepSpec = load_spec(config_path(cli)?)?;
            if let Some(seed) = cli.seed {
                spec.seed = seed;
            }
            let rows = cmd_sweep(&spec, &cli.out)?;
            for row in &rows {
                println!(
                    "{} = {}: traj_distance {:.6} terminal {:.6}",
                    spec.param, row.value, row.trajectory_distance, row.terminal_error
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
