//! The four entry points behind the CLI, callable as library functions.

use std::path::{Path, PathBuf};
use std::time::Instant;

use epg_core::innerloop::InnerLoopReport;
use epg_core::nets::{HeadInit, LossParams};
use epg_core::outerloop::{layout_for, test_time_train, Coordinator};
use epg_core::rng;
use epg_core::sensitivity;

use crate::checkpoint::{Checkpoint, ResumeState};
use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::exec::Parallel;
use crate::plot;
use crate::stats;
use crate::traces::{self, TraceRow};

pub const TRAINING_LOG: &str = "training_log.csv";
pub const RESUME_STATE: &str = "coordinator.json";
pub const FINAL_CHECKPOINT: &str = "loss_final.ckpt";

pub struct TrainOptions {
    pub workers: usize,
    /// Continue from the coordinator state in the output directory.
    pub resume: bool,
    /// Stop after this many epochs in this invocation.
    pub max_epochs: Option<u64>,
    pub quiet: bool,
}

pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub epochs_run: u64,
    pub finished: bool,
}

pub fn checkpoint_name(epoch: u64) -> String {
    format!("loss_epoch{epoch:05}.ckpt")
}

/// Evolves a loss per the config, writing the training log, periodic
/// checkpoints with resumable state, the final loss and a fitness plot.
pub fn train(cfg: &ExperimentConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    let out = cfg.resolve_out_dir();
    std::fs::create_dir_all(&out).map_err(CliError::io(&out))?;
    let hash = cfg.hash();
    crate::checkpoint::write_atomic(&out.join("config.json"), cfg.to_pretty_json().as_bytes())?;

    let log_path = out.join(TRAINING_LOG);
    let state_path = out.join(RESUME_STATE);
    let (mut coord, mut log) = if opts.resume {
        let saved = ResumeState::load(&state_path)?;
        if saved.config_hash != hash {
            return Err(CliError::Config(format!(
                "resume state was written by config {} but this config hashes to {hash}",
                saved.config_hash
            )));
        }
        let coord = Coordinator::resume(cfg.epg.clone(), cfg.task.clone(), saved.coordinator)?;
        let mut log = traces::read_training_log(&log_path)?;
        log.truncate(coord.epoch() as usize);
        (coord, log)
    } else {
        (Coordinator::new(cfg.epg.clone(), cfg.task.clone(), cfg.seed)?, Vec::new())
    };

    let exec = Parallel::new(opts.workers);
    let start = Instant::now();
    let mut ran = 0;
    let save = |coord: &Coordinator| -> Result<()> {
        let ck = Checkpoint::new(coord.loss()?, coord.policy_init()?, &hash, coord.epoch());
        ck.save(&out.join(checkpoint_name(coord.epoch())))?;
        ResumeState { config_hash: hash.clone(), coordinator: coord.state().clone() }.save(&state_path)
    };
    while !coord.is_finished() && opts.max_epochs.is_none_or(|m| ran < m) {
        let entry = coord.step(&exec)?;
        ran += 1;
        if !opts.quiet {
            eprintln!(
                "epoch {:>5}  mean {:>9.3}  std {:>8.3}  alpha {:.3}  failures {}",
                entry.epoch, entry.mean_fitness, entry.std_fitness, entry.alpha, entry.failures
            );
        }
        log.push((entry, start.elapsed().as_secs_f64()));
        traces::write_training_log(&log_path, &hash, &log)?;
        let epoch = coord.epoch();
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            save(&coord)?;
        }
    }
    // Always leave a resumable state behind, even mid-schedule.
    save(&coord)?;
    let finished = coord.is_finished();
    if finished {
        Checkpoint::new(coord.loss()?, coord.policy_init()?, &hash, coord.epoch()).save(&out.join(FINAL_CHECKPOINT))?;
    }
    if !log.is_empty() {
        let pts: Vec<_> = log.iter().map(|(l, _)| (l.epoch, l.mean_fitness, l.min_fitness, l.max_fitness)).collect();
        let svg = plot::training_svg(&pts, &hash)?;
        crate::checkpoint::write_atomic(&out.join("training.svg"), svg.as_bytes())?;
    }
    Ok(TrainOutcome { out_dir: out, epochs_run: ran, finished })
}

/// Which loss drives test-time training.
#[derive(Clone, Debug)]
pub enum TestMode {
    /// Frozen evolved loss from a checkpoint, α = 0.
    Evolved(PathBuf),
    /// Guidance-only policy gradient, α = 1, untrained loss.
    GuidanceOnly,
    /// Never-trained loss with a random output layer, α = 0.
    RandomLoss,
}

pub struct TestOptions {
    pub mode: TestMode,
    pub seeds: Option<usize>,
    pub mirror: bool,
    pub record_buffer: bool,
    pub workers: usize,
    /// Subdirectory name under the output directory.
    pub label: Option<String>,
}

pub struct TestOutcome {
    pub dir: PathBuf,
    pub final_returns: Vec<(u64, f64)>,
    pub kl_traces: Vec<Vec<f64>>,
}

impl TestOutcome {
    pub fn median_final(&self) -> f64 {
        let v: Vec<f64> = self.final_returns.iter().map(|r| r.1).collect();
        stats::median(&v).unwrap_or(f64::NAN)
    }

    pub fn solved(&self) -> usize {
        self.final_returns.iter().filter(|r| r.1 > 0.0).count()
    }
}

/// Seed used for test task `index`.
pub fn test_seed(cfg: &ExperimentConfig, index: usize) -> u64 {
    rng::derive_seed(cfg.test.seed, &[index as u64])
}

/// Trains fresh policies on freshly sampled tasks with the chosen loss and
/// writes per-seed traces, a summary, final returns and a plot.
pub fn test(cfg: &ExperimentConfig, opts: &TestOptions) -> Result<TestOutcome> {
    let hash = cfg.hash();
    let mut dist = cfg.task.clone();
    if opts.mirror {
        dist.mirror = !dist.mirror;
    }
    let layout = layout_for(&dist);
    let arch = epg_core::nets::LossArch::new(layout, cfg.epg.inner.buffer_len);
    let (loss, init, alpha, default_label) = match &opts.mode {
        TestMode::Evolved(path) => {
            let ck = Checkpoint::load(path)?;
            if *ck.loss.arch() != arch {
                return Err(CliError::Config(format!(
                    "{}: checkpoint expects {} buffer channels over N={}, config provides {} over N={}",
                    path.display(),
                    ck.loss.arch().layout.buffer_channels(),
                    ck.loss.arch().buffer_len,
                    layout.buffer_channels(),
                    arch.buffer_len
                )));
            }
            (ck.loss, ck.policy_init, 0.0, "test")
        }
        TestMode::GuidanceOnly => (LossParams::zeros(arch)?, None, 1.0, "baseline"),
        TestMode::RandomLoss => {
            let mut r = rng::stream(cfg.test.seed, &[rng::label::LOSS_INIT]);
            (LossParams::init(arch, HeadInit::Random, &mut r)?, None, 0.0, "random_loss")
        }
    };
    let label = opts.label.clone().unwrap_or_else(|| {
        if opts.mirror {
            format!("{default_label}_mirror")
        } else {
            default_label.to_string()
        }
    });
    let dir = cfg.resolve_out_dir().join(label);
    std::fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;

    let seeds = opts.seeds.unwrap_or(cfg.test.seeds);
    if seeds == 0 {
        return Err(CliError::Config("--seeds must be at least 1".into()));
    }
    let mut inner = cfg.epg.inner.clone();
    inner.record_buffer = opts.record_buffer;
    let exec = Parallel::new(opts.workers);
    let reports: Vec<std::result::Result<InnerLoopReport, epg_core::Error>> = exec.run(seeds, |i| {
        test_time_train(&loss, &dist, &inner, &cfg.epg.policy_hidden, init.as_ref(), alpha, test_seed(cfg, i))
    });

    let mut final_returns = Vec::with_capacity(seeds);
    let mut traces_all = Vec::with_capacity(seeds);
    let mut kl_traces = Vec::with_capacity(seeds);
    for (i, report) in reports.into_iter().enumerate() {
        let report = report.map_err(|e| CliError::Numeric(format!("test seed {i}: {e}")))?;
        let rows = TraceRow::from_updates(&report.updates);
        if rows.iter().any(|r| !(r.kl.is_finite() && r.kl >= 0.0)) {
            return Err(CliError::Numeric(format!("test seed {i}: KL trace has a negative or non-finite entry")));
        }
        traces::write_trace(&dir.join(format!("trace_seed{i:02}.csv")), &hash, &rows)?;
        if let Some(snap) = &report.snapshot {
            traces::write_buffer(&dir.join(format!("buffer_seed{i:02}.csv")), &hash, &layout, snap)?;
        }
        final_returns.push((i as u64, report.final_return));
        kl_traces.push(report.kl_trace());
        traces_all.push(rows);
    }
    traces::write_summary(&dir.join("summary.csv"), &hash, &traces::summarize(&traces_all)?)?;
    traces::write_final_returns(&dir.join("final_returns.csv"), &hash, &final_returns)?;
    let svg = plot::traces_svg(&traces_all, &hash)?;
    crate::checkpoint::write_atomic(&dir.join("curves.svg"), svg.as_bytes())?;
    Ok(TestOutcome { dir, final_returns, kl_traces })
}

pub struct SensitivityOutcome {
    pub rows: Vec<sensitivity::SensitivityRow>,
    pub csv: PathBuf,
    pub svg: PathBuf,
}

/// Gradient magnitudes of the per-step loss at window step `t` with
/// respect to every recorded buffer input.
pub fn analyze_sensitivity(
    checkpoint: &Path,
    buffer_csv: &Path,
    t: usize,
    out_dir: &Path,
) -> Result<SensitivityOutcome> {
    let ck = Checkpoint::load(checkpoint)?;
    let (buffer, window, columns) = traces::read_buffer(buffer_csv)?;
    let expected = traces::buffer_columns(&ck.loss.arch().layout);
    if columns != expected {
        return Err(CliError::Config(format!(
            "{}: buffer has {} columns, checkpoint expects {}",
            buffer_csv.display(),
            columns.len(),
            expected.len()
        )));
    }
    if t >= window {
        return Err(CliError::Config(format!("--t {t} lies outside the head window of {window} steps")));
    }
    let (_, rows) = sensitivity::analyze(&ck.loss, &buffer, window, t)?;
    std::fs::create_dir_all(out_dir).map_err(CliError::io(out_dir))?;
    let csv = out_dir.join(format!("sensitivity_t{t}.csv"));
    let svg = out_dir.join(format!("sensitivity_t{t}.svg"));
    traces::write_sensitivity(&csv, &ck.header.config_hash, &rows)?;
    crate::checkpoint::write_atomic(&svg, plot::sensitivity_svg(&rows, &ck.header.config_hash)?.as_bytes())?;
    Ok(SensitivityOutcome { rows, csv, svg })
}

/// Renders trace CSVs into one SVG.
pub fn plot_traces(inputs: &[PathBuf], output: &Path) -> Result<()> {
    if inputs.is_empty() {
        return Err(CliError::Config("plot needs at least one trace".into()));
    }
    let mut all = Vec::with_capacity(inputs.len());
    let mut hash = String::new();
    for p in inputs {
        let table = traces::CsvTable::read(p)?;
        if hash.is_empty() {
            hash = table.comment("config_hash").unwrap_or("unknown").to_string();
        }
        all.push(traces::read_trace(p)?);
    }
    let svg = plot::traces_svg(&all, &hash)?;
    crate::checkpoint::write_atomic(output, svg.as_bytes())
}
