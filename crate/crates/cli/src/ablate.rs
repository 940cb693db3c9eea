use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use dropvid::io::write_frame_png;
use dropvid::metrics::{csv_rows, evaluate_method, to_csv, write_csv, CsvRow, EvalReport, MaskSource, SsimMode};
use dropvid::training::train_stage2;
use dropvid::videonet::Ablation;
use dropvid::VideoClip;

use crate::eval::eval_flow;
use crate::failure::Failure;
use crate::infer::{read_named_frames, restore_to_dir};
use crate::manifest::{Run, FILE_NAME};
use crate::train::{config_snapshot, initial_video_net, load_config, load_stage1, save_stage2, write_jsonl};
use crate::AblationFlags;

#[derive(Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Clip directories with `rain/` and `clean/`, optionally `mask/`.
    #[arg(long, required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub stage1_ckpt: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Stage-two steps per variant; overrides the config.
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// The full model followed by each single-flag ablation.
pub fn flagsets() -> Vec<Ablation> {
    let mut v = vec![Ablation::default()];
    for i in 0..4 {
        v.push(Ablation {
            no_mask: i == 0,
            no_initialnet: i == 1,
            no_alignment: i == 2,
            no_temporal: i == 3,
        });
    }
    v
}

fn clip_name(dir: &Path) -> String {
    dir.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "clip".into())
}

fn score(restored: &[PathBuf], data: &[PathBuf]) -> Result<Vec<EvalReport>, Failure> {
    let flow = eval_flow();
    restored
        .iter()
        .zip(data)
        .map(|(r, d)| {
            let m = d.join("mask");
            let masks = m.is_dir().then_some((m.as_path(), MaskSource::GroundTruth));
            evaluate_method(r, &d.join("clean"), masks, &flow, SsimMode::Float).map_err(Failure::from)
        })
        .collect()
}

/// Scores a method, writes its CSV and returns the `mean` row relabelled.
fn report(label: &str, restored: &[PathBuf], data: &[PathBuf], out: &Path, run: &mut Run) -> Result<CsvRow, Failure> {
    let reports = score(restored, data)?;
    let p = out.join(label).join("report.csv");
    write_csv(&p, &reports)?;
    run.detail(&format!("report.{label}"), p.display().to_string());
    let mut mean = csv_rows(&reports).pop().expect("mean row");
    mean.video = label.into();
    eprintln!(
        "{label}: PSNR {:.3} SSIM {:.4} masked PSNR {:.3} TWE {:.3e}",
        mean.psnr, mean.ssim, mean.masked_psnr, mean.temporal_warp_error
    );
    Ok(mean)
}

pub fn ablate(a: AblateArgs, run: &mut Run) -> Result<(), Failure> {
    run.write_to(a.out.join(FILE_NAME));
    let base = load_config(a.config.as_deref(), a.max_steps, a.seed, AblationFlags::default())?;
    run.manifest.seed = Some(base.seed);
    run.manifest.config = config_snapshot(&base);
    let stage1 = load_stage1(a.stage1_ckpt.as_deref(), run)?;
    let mut clips: Vec<VideoClip> = Vec::new();
    let mut inputs = Vec::new();
    for d in &a.data {
        let (names, frames) = read_named_frames(&d.join("rain"))?;
        clips.push(VideoClip::new(frames.clone(), base.window_radius)?);
        inputs.push((names, frames));
    }
    let mut summary = vec![report("input", &a.data.iter().map(|d| d.join("rain")).collect::<Vec<_>>(), &a.data, &a.out, run)?];
    let mut stage1_dirs = Vec::new();
    for (variant, flags) in flagsets().into_iter().enumerate() {
        let label = flags.label();
        let mut cfg = base.clone();
        cfg.set_ablation(flags);
        let vdir = a.out.join(&label);
        fs::create_dir_all(&vdir).map_err(|e| Failure::io(&vdir, e))?;
        let net = initial_video_net(&cfg, None, run)?;
        let res = train_stage2(&clips, &stage1, net, &cfg)?;
        save_stage2(&res.net, &vdir, run)?;
        write_jsonl(&vdir.join("stage2_loss.jsonl"), res.log.iter().map(|r| r.to_json_line()))?;
        let mut restored = Vec::new();
        for (d, (names, frames)) in a.data.iter().zip(&inputs) {
            let rdir = vdir.join(clip_name(d));
            let r = restore_to_dir(frames.clone(), names, &stage1, &res.net, &rdir, false, false)?;
            if variant == 0 {
                let sdir = a.out.join("stage1").join(clip_name(d));
                for (n, f) in names.iter().zip(&r.initial) {
                    write_frame_png(&sdir.join(n), f)?;
                }
                stage1_dirs.push(sdir);
            }
            restored.push(rdir);
        }
        if variant == 0 {
            summary.push(report("stage1", &stage1_dirs, &a.data, &a.out, run)?);
        }
        summary.push(report(&label, &restored, &a.data, &a.out, run)?);
    }
    let p = a.out.join("summary.csv");
    fs::write(&p, to_csv(&summary)).map_err(|e| Failure::io(&p, e))?;
    Ok(())
}
