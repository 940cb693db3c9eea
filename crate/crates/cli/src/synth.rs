use std::path::PathBuf;

use clap::Args;
use dropvid::io::read_frames;
use dropvid::synth::{
    random_trajectories, synthesize_clip, toy_clip, write_clip_dir, SynthManifest, SyntheticClip, ToyClipSpec,
};
use dropvid::{Frame, VideoClip};

use crate::failure::Failure;
use crate::manifest::{Run, FILE_NAME};
use crate::resolve_seed;

#[derive(Args)]
pub struct MakeToyArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Scene and drop seed; falls back to `DROPVID_SEED`, then the built-in toy seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn make_toy(a: MakeToyArgs, run: &mut Run) -> Result<(), Failure> {
    run.write_to(a.out_dir.join(FILE_NAME));
    let mut spec = ToyClipSpec::default();
    spec.seed = resolve_seed(a.seed, spec.seed)?;
    run.manifest.seed = Some(spec.seed);
    run.manifest.config = serde_json::to_value(&spec).expect("spec serialises");
    let clip = toy_clip(&spec)?;
    let manifest = SynthManifest {
        seed: spec.seed,
        frames: spec.frames,
        height: spec.height,
        width: spec.width,
        background_speed: spec.background_velocity.0.hypot(spec.background_velocity.1),
        drops: vec![dropvid::synth::DropTrajectory {
            shape: spec.drop.clone(),
            velocity: (0.0, 0.0),
            jitter_sigma: 0.0,
        }],
    };
    write_clip_dir(&a.out_dir, &clip, &manifest)?;
    eprintln!("wrote toy clip to {}", a.out_dir.display());
    Ok(())
}

#[derive(Args)]
pub struct SynthArgs {
    /// Directory of clean PNG frames.
    #[arg(long)]
    pub clean_dir: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Falls back to `DROPVID_SEED`, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 5)]
    pub drops: usize,
    /// Use the first N frames; all of them by default.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Apparent background motion in px/frame; drops move slower than half of it.
    #[arg(long, default_value_t = 2.0)]
    pub background_speed: f32,
}

pub fn synth(a: SynthArgs, run: &mut Run) -> Result<(), Failure> {
    if !a.clean_dir.is_dir() {
        return Err(Failure::usage(format!(
            "--clean-dir {} does not exist or is not a directory",
            a.clean_dir.display()
        )));
    }
    if !(a.background_speed > 0.0 && a.background_speed.is_finite()) {
        return Err(Failure::usage("--background-speed must be positive"));
    }
    run.write_to(a.out_dir.join(FILE_NAME));
    let seed = resolve_seed(a.seed, 0)?;
    run.manifest.seed = Some(seed);
    run.manifest.config = serde_json::json!({
        "clean_dir": a.clean_dir.display().to_string(),
        "drops": a.drops,
        "frames": a.frames,
        "background_speed": a.background_speed,
    });
    let mut frames = read_frames(&a.clean_dir)?;
    if let Some(n) = a.frames {
        if n > frames.len() {
            return Err(Failure::usage(format!(
                "--frames {n} but {} has only {} frames",
                a.clean_dir.display(),
                frames.len()
            )));
        }
        frames.truncate(n);
    }
    let frames: Vec<Frame> = frames
        .into_iter()
        .enumerate()
        .map(|(i, f)| Frame { time_index: i as i64, ..f })
        .collect();
    let (h, w) = frames
        .first()
        .map(|f| (f.height(), f.width()))
        .ok_or_else(|| Failure::usage(format!("no PNG frames in {}", a.clean_dir.display())))?;
    let clean = VideoClip::new(frames, 0)?;
    let trajectories = random_trajectories(a.drops, h, w, a.background_speed, seed);
    let (rain, masks) = synthesize_clip(&clean, &trajectories, seed, a.background_speed)?;
    let manifest = SynthManifest {
        seed,
        frames: clean.len(),
        height: h,
        width: w,
        background_speed: a.background_speed,
        drops: trajectories,
    };
    write_clip_dir(&a.out_dir, &SyntheticClip { rain, clean, masks }, &manifest)?;
    eprintln!("wrote {} frames to {}", manifest.frames, a.out_dir.display());
    Ok(())
}
