use std::path::PathBuf;

use clap::{Args, ValueEnum};
use dropvid::checkpoint::{flow_from_checkpoint, Checkpoint};
use dropvid::flow::{FlowEstimator, FlowSettings};
use dropvid::metrics::{evaluate_method, write_csv, MaskSource, SsimMode};

use crate::failure::{Failure, EXIT_MISMATCH};
use crate::manifest::{Run, FILE_NAME};

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MaskKind {
    /// Synthesis masks.
    GroundTruth,
    /// Masks derived from stage-one residuals.
    Estimated,
}

impl From<MaskKind> for MaskSource {
    fn from(k: MaskKind) -> Self {
        match k {
            MaskKind::GroundTruth => MaskSource::GroundTruth,
            MaskKind::Estimated => MaskSource::Estimated,
        }
    }
}

#[derive(Args)]
pub struct EvalArgs {
    /// Restored frame directory; repeat once per video.
    #[arg(long, required = true)]
    pub restored: Vec<PathBuf>,
    /// Ground-truth frame directory, paired with `--restored` in order.
    #[arg(long, required = true)]
    pub gt: Vec<PathBuf>,
    /// Mask directory per video for masked-region PSNR.
    #[arg(long)]
    pub masks: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = MaskKind::GroundTruth)]
    pub mask_source: MaskKind,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
    /// Flow estimator for the temporal warp error; a fresh toy estimator otherwise.
    #[arg(long)]
    pub flow_ckpt: Option<PathBuf>,
    /// Quantise frames to 8 bits before SSIM.
    #[arg(long)]
    pub quantized_ssim: bool,
}

pub fn eval_flow() -> FlowEstimator {
    FlowEstimator::toy(FlowSettings::default(), 0)
}

pub fn eval(a: EvalArgs, run: &mut Run) -> Result<(), Failure> {
    let dir = a.out.parent().map(PathBuf::from).unwrap_or_default();
    run.write_to(dir.join(FILE_NAME));
    if a.restored.len() != a.gt.len() {
        return Err(Failure::new(
            EXIT_MISMATCH,
            format!("{} --restored dirs but {} --gt dirs", a.restored.len(), a.gt.len()),
        ));
    }
    if !a.masks.is_empty() && a.masks.len() != a.gt.len() {
        return Err(Failure::new(
            EXIT_MISMATCH,
            format!("{} --masks dirs for {} videos", a.masks.len(), a.gt.len()),
        ));
    }
    let flow = match &a.flow_ckpt {
        Some(p) => {
            let f = flow_from_checkpoint(&Checkpoint::load(p)?)?;
            run.consumed(p)?;
            f
        }
        None => eval_flow(),
    };
    let ssim_mode = if a.quantized_ssim { SsimMode::Quantized } else { SsimMode::Float };
    run.manifest.config = serde_json::json!({
        "restored": a.restored,
        "gt": a.gt,
        "masks": a.masks,
        "mask_source": MaskSource::from(a.mask_source).name(),
        "quantized_ssim": a.quantized_ssim,
    });
    let reports = a
        .restored
        .iter()
        .zip(&a.gt)
        .enumerate()
        .map(|(i, (r, g))| {
            let m = a.masks.get(i).map(|m| (m.as_path(), MaskSource::from(a.mask_source)));
            evaluate_method(r, g, m, &flow, ssim_mode)
        })
        .collect::<dropvid::Result<Vec<_>>>()?;
    write_csv(&a.out, &reports)?;
    for r in &reports {
        eprintln!(
            "{}: PSNR {:.3} SSIM {:.4} masked PSNR {} ({}) TWE {:.3e}",
            r.video,
            r.psnr,
            r.ssim,
            r.masked_psnr.map_or("n/a".into(), |v| format!("{v:.3}")),
            r.mask_source.name(),
            r.temporal_warp_error
        );
    }
    Ok(())
}
