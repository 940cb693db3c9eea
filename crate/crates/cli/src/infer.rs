use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use dropvid::checkpoint::{stage1_from_checkpoint, stage2_from_checkpoints, Checkpoint};
use dropvid::flow::dvfl;
use dropvid::initial::InitialNet;
use dropvid::io::{crop_frame, list_frames, pad_frame, read_frame_png, write_frame_png, write_mask_png};
use dropvid::types::{check_pipeline_dims, ENCODER_STRIDE, MIN_FRAME_SIDE};
use dropvid::videonet::{restore_clip, window_indices, VideoNet};
use dropvid::{FlowField, Frame, RaindropMask, VideoClip};
use serde::Serialize;

use crate::failure::{Failure, EXIT_MISSING};
use crate::manifest::{Run, FILE_NAME};
use crate::rain_dir;
use crate::train::{FLOW_CKPT, STAGE1_CKPT, STAGE2_CKPT};

#[derive(Args)]
pub struct InferArgs {
    /// Frame directory, or a clip directory with `rain/`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Directory holding `stage1.ckpt`, `stage2.ckpt` and `flow.ckpt`.
    #[arg(long)]
    pub ckpt_dir: Option<PathBuf>,
    #[arg(long)]
    pub stage1_ckpt: Option<PathBuf>,
    #[arg(long)]
    pub stage2_ckpt: Option<PathBuf>,
    #[arg(long)]
    pub flow_ckpt: Option<PathBuf>,
    /// Replicate-pad frames to a usable size and crop the results back.
    #[arg(long)]
    pub pad: bool,
    /// Also write S_t, window masks and flows under `intermediates/`.
    #[arg(long)]
    pub dump_intermediates: bool,
}

fn ckpt_path(explicit: &Option<PathBuf>, dir: &Option<PathBuf>, name: &str) -> Result<PathBuf, Failure> {
    explicit
        .clone()
        .or_else(|| dir.as_ref().map(|d| d.join(name)))
        .ok_or_else(|| Failure::new(EXIT_MISSING, format!("no {name}: pass --ckpt-dir or the explicit flag")))
}

/// Input frames with their file names, in name order.
pub fn read_named_frames(dir: &Path) -> Result<(Vec<String>, Vec<Frame>), Failure> {
    let paths = list_frames(dir)?;
    if paths.is_empty() {
        return Err(Failure::new(EXIT_MISSING, format!("no PNG frames in {}", dir.display())));
    }
    let names = paths
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    let frames = paths
        .iter()
        .enumerate()
        .map(|(i, p)| read_frame_png(p, i as i64))
        .collect::<dropvid::Result<Vec<_>>>()?;
    Ok((names, frames))
}

fn padded_side(n: usize) -> usize {
    n.max(MIN_FRAME_SIDE).div_ceil(ENCODER_STRIDE) * ENCODER_STRIDE
}

fn crop_mask(m: &RaindropMask, h: usize, w: usize) -> RaindropMask {
    m.crop(0, 0, h, w)
}

fn crop_flow(f: &FlowField, h: usize, w: usize) -> Result<FlowField, Failure> {
    Ok(FlowField::new(
        f.vectors.crop_hw(0, 0, h, w),
        f.source_index,
        f.target_index,
    )?)
}

#[derive(Serialize)]
struct WindowInfo {
    centre: usize,
    frames: Vec<usize>,
    reflected: bool,
}

/// What a restoration pass produced.
pub struct Restored {
    pub outputs: Vec<Frame>,
    pub initial: Vec<Frame>,
    pub masks: Vec<RaindropMask>,
    pub reflected: Vec<usize>,
}

/// Restores `frames` and writes them to `out` under `names`; padding is
/// applied first when `pad` is set.
pub fn restore_to_dir(
    frames: Vec<Frame>,
    names: &[String],
    initial: &InitialNet,
    net: &VideoNet,
    out: &Path,
    pad: bool,
    dump: bool,
) -> Result<Restored, Failure> {
    let (h, w) = (frames[0].height(), frames[0].width());
    let needs_pad = check_pipeline_dims(h, w).is_err();
    if needs_pad && !pad {
        check_pipeline_dims(h, w)?;
    }
    let (ph, pw) = if needs_pad { (padded_side(h), padded_side(w)) } else { (h, w) };
    let frames: Vec<Frame> = if needs_pad {
        frames.iter().map(|f| pad_frame(f, ph, pw)).collect()
    } else {
        frames
    };
    let clip = VideoClip::new(frames, net.window_radius)?;
    let (stage1, outs) = restore_clip(&clip, initial, net)?;
    fs::create_dir_all(out).map_err(|e| Failure::io(out, e))?;
    let mut res = Restored {
        outputs: Vec::with_capacity(outs.len()),
        initial: Vec::with_capacity(outs.len()),
        masks: Vec::with_capacity(outs.len()),
        reflected: Vec::new(),
    };
    for (t, (o, name)) in outs.iter().zip(names).enumerate() {
        let frame = crop_frame(&o.output, h, w);
        write_frame_png(&out.join(name), &frame)?;
        res.outputs.push(frame);
        res.initial.push(crop_frame(&stage1.initial[t], h, w));
        res.masks.push(crop_mask(&stage1.masks[t], h, w));
        if o.reflected {
            res.reflected.push(t);
        }
    }
    if dump {
        let base = out.join("intermediates");
        for t in 0..outs.len() {
            write_frame_png(&base.join("initial").join(&names[t]), &res.initial[t])?;
            write_mask_png(&base.join("masks").join(&names[t]), &res.masks[t])?;
            let o = &outs[t];
            let (idx, reflected) = window_indices(clip.len(), t, net.window_radius, true)?;
            let stem = Path::new(&names[t]).file_stem().unwrap().to_string_lossy().into_owned();
            let wdir = base.join("windows").join(stem);
            fs::create_dir_all(&wdir).map_err(|e| Failure::io(&wdir, e))?;
            for (k, m) in o.masks.iter().enumerate() {
                write_mask_png(&wdir.join(format!("mask_{k}.png")), &crop_mask(m, h, w))?;
            }
            let neighbours = (0..idx.len()).filter(|&k| k != net.window_radius);
            for (k, f) in neighbours.zip(&o.flows) {
                dvfl::write(&wdir.join(format!("flow_{k}.dvfl")), &crop_flow(f, h, w)?)?;
            }
            let info = WindowInfo {
                centre: t,
                frames: idx,
                reflected,
            };
            let p = wdir.join("window.json");
            fs::write(&p, serde_json::to_string(&info).expect("window info serialises") + "\n")
                .map_err(|e| Failure::io(&p, e))?;
        }
    }
    Ok(res)
}

pub fn infer(a: InferArgs, run: &mut Run) -> Result<(), Failure> {
    run.write_to(a.out.join(FILE_NAME));
    let p1 = ckpt_path(&a.stage1_ckpt, &a.ckpt_dir, STAGE1_CKPT)?;
    let p2 = ckpt_path(&a.stage2_ckpt, &a.ckpt_dir, STAGE2_CKPT)?;
    let pf = ckpt_path(&a.flow_ckpt, &a.ckpt_dir, FLOW_CKPT)?;
    let initial = stage1_from_checkpoint(&Checkpoint::load(&p1)?)?;
    let net = stage2_from_checkpoints(&Checkpoint::load(&p2)?, &Checkpoint::load(&pf)?)?;
    for p in [&p1, &p2, &pf] {
        run.consumed(p)?;
    }
    let input = rain_dir(&a.input);
    run.manifest.config = serde_json::json!({
        "input": input.display().to_string(),
        "pad": a.pad,
        "dump_intermediates": a.dump_intermediates,
        "window_radius": net.window_radius,
        "ablation": net.ablation,
    });
    let (names, frames) = read_named_frames(&input)?;
    let res = restore_to_dir(frames, &names, &initial, &net, &a.out, a.pad, a.dump_intermediates)?;
    run.detail("frames", res.outputs.len());
    run.detail("reflected_frames", &res.reflected);
    eprintln!(
        "restored {} frames into {}; windows completed by reflection at frames {:?}",
        res.outputs.len(),
        a.out.display(),
        res.reflected
    );
    Ok(())
}
