use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lmt_cli::{
    evaluate_checkpoint, generate_data, reproduce_tables, results_path, run_experiment, run_probe, sweep_alpha,
    CliError, ExperimentConfig, Report,
};

/// Longitudinal mixing training and time-aware progression models.
#[derive(Parser)]
#[command(name = "lmt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key=value configuration file.
    #[arg(long, short)]
    config: Option<PathBuf>,

    /// key=value overrides, applied after the file in order.
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic cohort (cohort.bin, cohort.csv).
    GenerateData(Common),
    /// Train `method` once per seed and score it on the test split.
    Train(Common),
    /// Score a saved checkpoint on the test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain, then linear probe and fine-tune on the downstream task.
    Probe(Common),
    /// Train over the alpha grid (`alphas`) for every seed.
    SweepAlpha(Common),
    /// Grading, downstream and next-visit tables and the alpha series.
    ReproduceTables(Common),
}

fn run(cli: Cli) -> Result<(Report, ExperimentConfig), CliError> {
    let resolve = |c: &Common| ExperimentConfig::resolve(c.config.as_deref(), &c.overrides);
    Ok(match cli.command {
        Command::GenerateData(c) => {
            let cfg = resolve(&c)?;
            (generate_data(&cfg)?, cfg)
        }
        Command::Train(c) => {
            let cfg = resolve(&c)?;
            (run_experiment(&cfg)?, cfg)
        }
        Command::Evaluate { checkpoint, common } => {
            let cfg = resolve(&common)?;
            (evaluate_checkpoint(&cfg, &checkpoint)?, cfg)
        }
        Command::Probe(c) => {
            let cfg = resolve(&c)?;
            (run_probe(&cfg)?, cfg)
        }
        Command::SweepAlpha(c) => {
            let cfg = resolve(&c)?;
            (sweep_alpha(&cfg)?, cfg)
        }
        Command::ReproduceTables(c) => {
            let cfg = resolve(&c)?;
            (reproduce_tables(&cfg)?, cfg)
        }
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok((report, cfg)) => {
            for r in &report.rows {
                println!("{} {} {} seed={} {}={:.6}", r.method, r.setup, r.model, r.seed, r.metric, r.value);
            }
            println!("results: {}", results_path(&cfg).display());
            if report.failures.is_empty() {
                ExitCode::SUCCESS
            } else {
                for f in &report.failures {
                    eprintln!("failed: {}: {}", f.run, f.message);
                }
                ExitCode::from(3)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
