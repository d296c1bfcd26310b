use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pestgan::data::{save_sequences, synth_dataset, window_all, BitDepth};
use pestgan::generator::upsample_nn;
use pestgan::harness::plot::{kernel_table, render_image_grid, render_kernels, render_loss_curves};
use pestgan::harness::{
    evaluate, infer, load_checkpoint, load_datasets, read_log, run_training, super_resolve, RunConfig, RunPaths,
    TrainState,
};
use pestgan::{Error, Result};

#[derive(Parser)]
#[command(name = "pestgan", version, about = "Physics-encoded GAN for 4x super-resolution of image sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run config; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the configured dataset, logging every step and checkpointing into --out-dir.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint (its embedded config is used).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides train.steps.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Score a checkpoint on the test split against the nearest-neighbor baseline.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate every sequence of this manifest instead of the configured test split.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Write SR frames for every eligible center frame as a 16-bit dataset.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Write synthetic vortex sequences as PNG frames plus a manifest.
    SynthData {
        #[command(flatten)]
        common: Common,
        /// Overrides data.synth_sequences.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        eight_bit: bool,
    },
    /// Print the operator bank's moment table and write a kernel preview PNG.
    InspectKernels {
        #[command(flatten)]
        common: Common,
        /// Inspect a trained bank; otherwise the freshly initialized one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Render loss curves from a training log and, given a checkpoint, an LR/SR/HR grid.
    Plot {
        #[command(flatten)]
        common: Common,
        /// Defaults to <out-dir>/train.log.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 6)]
        samples: usize,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn eval_sequences(common: &Common, manifest: &Option<PathBuf>) -> Result<Vec<pestgan::data::ImageSequence>> {
    match manifest {
        Some(p) => pestgan::data::load_sequences(p),
        None => Ok(load_datasets(&load_config(common)?.data)?.1),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, resume, steps } => {
            let mut state = match &resume {
                Some(p) => load_checkpoint(p)?,
                None => TrainState::new(load_config(&common)?)?,
            };
            if let Some(n) = steps {
                state.config.train.steps = n;
            }
            let (train, _) = load_datasets(&state.config.data)?;
            let samples = window_all(&train)?;
            log::info!("{} training samples from {} sequences", samples.len(), train.len());
            let paths = RunPaths::new(&common.out_dir);
            write_text(&common.out_dir.join("config.toml"), &state.config.to_toml_string()?)?;
            let until = state.config.train.steps;
            run_training(&mut state, &samples, until, Some(&paths))?;
            println!("trained to step {}; checkpoint {}", state.step, paths.latest().display());
        }
        Command::Eval {
            common,
            checkpoint,
            manifest,
        } => {
            let state = load_checkpoint(&checkpoint)?;
            let seqs = eval_sequences(&common, &manifest)?;
            let result = evaluate(&state.generator, &seqs, state.dtype())?;
            let table = result.render();
            write_text(&common.out_dir.join("metrics.txt"), &table)?;
            print!("{table}");
        }
        Command::Infer {
            common,
            checkpoint,
            manifest,
        } => {
            let state = load_checkpoint(&checkpoint)?;
            let seqs = eval_sequences(&common, &manifest)?;
            let path = infer(&state.generator, &seqs, state.dtype(), &common.out_dir)?;
            println!("wrote {}", path.display());
        }
        Command::SynthData {
            common,
            count,
            eight_bit,
        } => {
            let cfg = load_config(&common)?;
            let mut synth = cfg.data.synth.clone();
            if let Some(seed) = common.seed {
                synth.seed = seed;
            }
            let seqs = synth_dataset(&synth, count.unwrap_or(cfg.data.synth_sequences))?;
            let depth = if eight_bit { BitDepth::Eight } else { BitDepth::Sixteen };
            let path = save_sequences(&common.out_dir, &seqs, depth)?;
            println!("wrote {} sequences to {}", seqs.len(), path.display());
        }
        Command::InspectKernels { common, checkpoint } => {
            let state = match &checkpoint {
                Some(p) => load_checkpoint(p)?,
                None => TrainState::new(load_config(&common)?)?,
            };
            let bank = &state.generator.phycell.bank;
            let table = kernel_table(bank)?;
            write_text(&common.out_dir.join("kernels.txt"), &table)?;
            render_kernels(bank, 8, &common.out_dir.join("kernels.png"))?;
            print!("{table}");
        }
        Command::Plot {
            common,
            log,
            checkpoint,
            samples,
        } => {
            let log_path = log.unwrap_or_else(|| common.out_dir.join(pestgan::harness::LOG_FILE));
            let reports = read_log(&log_path)?;
            render_loss_curves(&reports, &common.out_dir.join("loss_curves.png"))?;
            println!("wrote {}", common.out_dir.join("loss_curves.png").display());
            if let Some(ckpt) = checkpoint {
                let state = load_checkpoint(&ckpt)?;
                let (_, test) = load_datasets(&state.config.data)?;
                let mut chosen = window_all(&test)?;
                chosen.truncate(samples);
                if chosen.is_empty() {
                    return Err(pestgan::error::DataError::Empty.into());
                }
                let sr = super_resolve(&state.generator, &chosen, state.dtype())?;
                let mut rows = vec![Vec::new(), Vec::new(), Vec::new()];
                for (s, f) in chosen.iter().zip(sr) {
                    rows[0].push(upsample_nn(s.lr.center(), 4)?);
                    rows[1].push(f);
                    rows[2].push(s.hr_center().clone());
                }
                render_image_grid(&rows, &common.out_dir.join("grid.png"))?;
                println!("wrote {}", common.out_dir.join("grid.png").display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
