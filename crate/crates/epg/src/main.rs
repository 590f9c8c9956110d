use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use epg::commands::{self, TestMode, TestOptions, TrainOptions};
use epg::config::ExperimentConfig;
use epg::{CliError, Result};

#[derive(Parser)]
#[command(name = "epg", version, about = "Evolve and test policy-gradient losses on point-mass task families")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evolve a loss function with the outer ES loop.
    Train {
        config: PathBuf,
        /// Continue from the last saved coordinator state in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs in this invocation (state stays resumable).
        #[arg(long)]
        stop_after: Option<u64>,
        /// Override the config's training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; 0 uses one per core.
        #[arg(long, default_value_t = 0)]
        workers: usize,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Train fresh policies on new tasks with a frozen loss.
    Test {
        config: PathBuf,
        /// Evolved loss checkpoint; required unless a comparator mode is chosen.
        #[arg(long, required_unless_present_any = ["guidance_only", "random_loss"])]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<usize>,
        /// Override the config's test seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Plain policy gradient with an untrained loss.
        #[arg(long, conflicts_with_all = ["checkpoint", "random_loss"])]
        guidance_only: bool,
        /// Never-trained loss with a random output layer.
        #[arg(long, conflicts_with = "checkpoint")]
        random_loss: bool,
        /// Sample tasks from the mirrored distribution.
        #[arg(long)]
        mirror: bool,
        /// Write the final buffer of every seed for sensitivity analysis.
        #[arg(long)]
        record_buffer: bool,
        /// Name of the output subdirectory.
        #[arg(long)]
        label: Option<String>,
        #[arg(long, default_value_t = 0)]
        workers: usize,
    },
    /// Gradient magnitude of one per-step loss with respect to every buffer input.
    AnalyzeSensitivity {
        checkpoint: PathBuf,
        buffer: PathBuf,
        /// Step index within the loss head's window.
        #[arg(long)]
        t: usize,
        /// Output directory; defaults to the buffer's directory.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Render trace CSVs as return and KL panels.
    Plot {
        #[arg(required = true)]
        traces: Vec<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
}

fn load(path: &Path, seed: Option<u64>, test_seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(s) = test_seed {
        cfg.test.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, resume, stop_after, seed, workers, quiet } => {
            let cfg = load(&config, seed, None)?;
            let out = commands::train(&cfg, &TrainOptions { workers, resume, max_epochs: stop_after, quiet })?;
            println!(
                "{} epochs run, {} ({})",
                out.epochs_run,
                if out.finished { "finished" } else { "resumable" },
                out.out_dir.display()
            );
        }
        Command::Test {
            config,
            checkpoint,
            seeds,
            seed,
            guidance_only,
            random_loss,
            mirror,
            record_buffer,
            label,
            workers,
        } => {
            let cfg = load(&config, None, seed)?;
            let mode = match (checkpoint, guidance_only, random_loss) {
                (_, true, _) => TestMode::GuidanceOnly,
                (_, _, true) => TestMode::RandomLoss,
                (Some(p), _, _) => TestMode::Evolved(p),
                (None, false, false) => return Err(CliError::Config("--checkpoint is required".into())),
            };
            let out = commands::test(&cfg, &TestOptions { mode, seeds, mirror, record_buffer, workers, label })?;
            println!(
                "median final return {:.3}, {}/{} positive ({})",
                out.median_final(),
                out.solved(),
                out.final_returns.len(),
                out.dir.display()
            );
        }
        Command::AnalyzeSensitivity { checkpoint, buffer, t, out } => {
            let dir = out.unwrap_or_else(|| buffer.parent().map(PathBuf::from).unwrap_or_default());
            let res = commands::analyze_sensitivity(&checkpoint, &buffer, t, &dir)?;
            println!("{} rows -> {}", res.rows.len(), res.csv.display());
        }
        Command::Plot { traces, output } => commands::plot_traces(&traces, &output)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
