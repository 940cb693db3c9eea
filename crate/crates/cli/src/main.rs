//! `dropvid`: synthesis, training, inference and evaluation for video
//! raindrop removal.
//!
//! Exit codes: 0 success, 2 usage, 3 missing artifact, 4 shape or padding,
//! 5 data mismatch, 1 anything else.

mod ablate;
mod eval;
mod failure;
mod infer;
mod manifest;
mod synth;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use failure::Failure;
use manifest::Run;

#[derive(Parser)]
#[command(name = "dropvid", version, about = "Video raindrop removal")]
struct Cli {
    /// Worker threads for per-frame work; 0 picks one per core.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the bundled toy clip: 16 frames, 128x128, one static drop.
    MakeToy(synth::MakeToyArgs),
    /// Composite synthetic raindrops onto a directory of clean frames.
    Synth(synth::SynthArgs),
    /// Train stage one (supervised) or stage two (self-supervised).
    Train(train::TrainArgs),
    /// Restore a frame directory with trained checkpoints.
    Infer(infer::InferArgs),
    /// Score restored frames against ground truth and write a CSV report.
    Eval(eval::EvalArgs),
    /// Train, restore and score the full model and each ablation.
    Ablate(ablate::AblateArgs),
}

/// Structural ablation switches shared by `train` and `ablate`.
#[derive(Args, Clone, Copy, Debug, Default)]
pub struct AblationFlags {
    /// Non-raindrop weight fixed at 1.
    #[arg(long)]
    pub no_mask: bool,
    /// Feed raw rainy frames to stage two.
    #[arg(long)]
    pub no_initialnet: bool,
    /// Skip flow warping and zero the deformable offsets.
    #[arg(long)]
    pub no_alignment: bool,
    /// Drop the temporal consistency term.
    #[arg(long)]
    pub no_temporal: bool,
}

/// `--seed`, else `DROPVID_SEED`, else `fallback`.
pub fn resolve_seed(flag: Option<u64>, fallback: u64) -> Result<u64, Failure> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("DROPVID_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Failure::usage(format!("DROPVID_SEED must be an unsigned integer, got `{v}`"))),
        Err(_) => Ok(fallback),
    }
}

/// The `rain/` subdirectory of a clip directory, or the directory itself.
pub fn rain_dir(dir: &std::path::Path) -> PathBuf {
    let r = dir.join("rain");
    if r.is_dir() {
        r
    } else {
        dir.to_path_buf()
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if cli.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global()
            .map_err(|e| Failure::usage(format!("--jobs: {e}")))?;
    }
    let name = match &cli.command {
        Command::MakeToy(_) => "make-toy",
        Command::Synth(_) => "synth",
        Command::Train(_) => "train",
        Command::Infer(_) => "infer",
        Command::Eval(_) => "eval",
        Command::Ablate(_) => "ablate",
    };
    let mut r = Run::start(name);
    r.detail("jobs", cli.jobs);
    let outcome = match cli.command {
        Command::MakeToy(a) => synth::make_toy(a, &mut r),
        Command::Synth(a) => synth::synth(a, &mut r),
        Command::Train(a) => train::train(a, &mut r),
        Command::Infer(a) => infer::infer(a, &mut r),
        Command::Eval(a) => eval::eval(a, &mut r),
        Command::Ablate(a) => ablate::ablate(a, &mut r),
    };
    r.finish(&outcome)?;
    outcome
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("dropvid: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
