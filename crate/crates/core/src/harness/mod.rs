//! Training loop, evaluation, checkpoints, configuration and raster output behind the CLI.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod plot;
pub mod train;

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

pub use checkpoint::{checkpoint_bytes, checkpoint_config, load_checkpoint, save_checkpoint, FORMAT_VERSION};
pub use config::{DataConfig, OptimConfig, Precision, RunConfig, TrainConfig};
pub use eval::{evaluate, infer, score_frames, super_resolve, EvalResult};
pub use train::{Batch, TrainState};

use crate::data::{load_sequences, split_by_ids, split_tail, synth_dataset, ImageSequence, TrainingSample};
use crate::error::{Error, Result};
use crate::losses::LossReport;

pub const LOG_FILE: &str = "train.log";
pub const LATEST_CHECKPOINT: &str = "checkpoint-latest.safetensors";

/// Train/test sequences per the data config: a manifest when given, otherwise synthesized.
pub fn load_datasets(cfg: &DataConfig) -> Result<(Vec<ImageSequence>, Vec<ImageSequence>)> {
    let seqs = match &cfg.manifest {
        Some(path) => load_sequences(path)?,
        None => synth_dataset(&cfg.synth, cfg.synth_sequences)?,
    };
    Ok(if cfg.test_ids.is_empty() {
        split_tail(seqs, cfg.test_sequences)
    } else {
        split_by_ids(seqs, &cfg.test_ids)
    })
}

/// Append-only step log that keeps exactly one line per completed step.
pub struct TrainingLog {
    writer: BufWriter<File>,
}

impl TrainingLog {
    /// Open `path` for a run that has completed `step` steps, dropping any lines past it.
    pub fn open(path: &Path, step: u64) -> Result<Self> {
        let kept: Vec<String> = match fs::read_to_string(path) {
            Ok(text) => text.lines().take(step as usize).map(str::to_string).collect(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(Error::io(path, e)),
        };
        if (kept.len() as u64) < step {
            log::warn!("{} has {} lines for {step} completed steps", path.display(), kept.len());
        }
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let mut text = kept.join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
        let file = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            writer: BufWriter::new(file),
        })
    }

    pub fn append(&mut self, report: &LossReport) -> Result<()> {
        writeln!(self.writer, "{}", report.to_log_line()).map_err(|e| Error::io("<train log>", e))?;
        self.writer.flush().map_err(|e| Error::io("<train log>", e))
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LossReport>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(LossReport::from_log_line).collect()
}

/// Output locations of a training run.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn log(&self) -> PathBuf {
        self.dir.join(LOG_FILE)
    }

    pub fn latest(&self) -> PathBuf {
        self.dir.join(LATEST_CHECKPOINT)
    }

    pub fn at_step(&self, step: u64) -> PathBuf {
        self.dir.join(format!("checkpoint-{step:06}.safetensors"))
    }
}

/// Train until `state.step` reaches `until`, logging each step and checkpointing on the
/// configured cadence and at the end.
pub fn run_training(
    state: &mut TrainState,
    samples: &[TrainingSample],
    until: u64,
    paths: Option<&RunPaths>,
) -> Result<Vec<LossReport>> {
    let mut log = match paths {
        Some(p) => Some(TrainingLog::open(&p.log(), state.step)?),
        None => None,
    };
    let every = state.config.train.checkpoint_every;
    let mut reports = Vec::new();
    while state.step < until {
        let report = state.train_next(samples)?;
        if let Some(log) = log.as_mut() {
            log.append(&report)?;
        }
        if let Some(p) = paths {
            if every > 0 && state.step % every == 0 {
                save_checkpoint(state, &p.at_step(state.step))?;
            }
        }
        if state.step % 50 == 0 || state.step == until {
            log::info!(
                "step {} total {:.5} l1 {:.5} d_s {:.4} d_t {:.4}",
                state.step,
                report.total,
                report.terms.l1,
                report.d_spatial,
                report.d_temporal
            );
        }
        reports.push(report);
    }
    if let Some(p) = paths {
        save_checkpoint(state, &p.latest())?;
    }
    Ok(reports)
}
