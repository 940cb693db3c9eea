//! Image and video quality metrics and the per-video report.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{warp_tensor, FlowEstimator};
use crate::imgproc::gaussian_kernel;
use crate::io::{list_frames, read_frame_png, read_mask_png};
use crate::tensor::Tensor;
use crate::types::{FlowField, Frame, MaskMode, RaindropMask, VideoClip};
use crate::videonet::in_frame_mask;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_shape(a: &Frame, b: &Frame) -> Result<()> {
    if a.pixels.shape() != b.pixels.shape() {
        return Err(Error::Shape(format!(
            "frames differ: {:?} vs {:?}",
            a.pixels.shape(),
            b.pixels.shape()
        )));
    }
    Ok(())
}

/// `10 log10(1 / mse)`; zero error maps to `+inf`.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Peak 1.0; identical frames give `+inf`.
pub fn psnr(a: &Frame, b: &Frame) -> Result<f64> {
    same_shape(a, b)?;
    let n = a.pixels.len() as f64;
    let sse: f64 = a
        .pixels
        .data()
        .iter()
        .zip(b.pixels.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(psnr_from_mse(sse / n))
}

/// PSNR over the raindrop pixels of `region` (weight exactly 0). `None`
/// when the region is empty.
pub fn masked_psnr(a: &Frame, b: &Frame, region: &RaindropMask) -> Result<Option<f64>> {
    same_shape(a, b)?;
    if region.height() != a.height() || region.width() != a.width() {
        return Err(Error::Shape("mask does not match frame size".into()));
    }
    let p = a.height() * a.width();
    let (mut sse, mut n) = (0.0f64, 0usize);
    for (i, &w) in region.nonrain_weight.data().iter().enumerate() {
        if w != 0.0 {
            continue;
        }
        for c in 0..a.channels() {
            let d = a.pixels.data()[c * p + i] as f64 - b.pixels.data()[c * p + i] as f64;
            sse += d * d;
        }
        n += a.channels();
    }
    Ok((n > 0).then(|| psnr_from_mse(sse / n as f64)))
}

/// Separable "valid" filtering of an `h x w` plane with a 1-d kernel.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Gaussian-window SSIM (11x11, sigma 1.5) per channel over valid window
/// positions, averaged over channels.
pub fn ssim(a: &Frame, b: &Frame) -> Result<f64> {
    same_shape(a, b)?;
    let (c, h, w) = (a.channels(), a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "SSIM needs frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let k = gaussian_kernel(SSIM_SIGMA);
    let k = &k[k.len() / 2 - SSIM_WINDOW / 2..=k.len() / 2 + SSIM_WINDOW / 2];
    let s: f64 = k.iter().sum();
    let k: Vec<f64> = k.iter().map(|v| v / s).collect();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let p = h * w;
    let mut total = 0.0;
    for ci in 0..c {
        let x: Vec<f64> = a.pixels.data()[ci * p..(ci + 1) * p].iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = b.pixels.data()[ci * p..(ci + 1) * p].iter().map(|&v| v as f64).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let mx = filter_valid(&x, h, w, &k);
        let my = filter_valid(&y, h, w, &k);
        let sxx = filter_valid(&xx, h, w, &k);
        let syy = filter_valid(&yy, h, w, &k);
        let sxy = filter_valid(&xy, h, w, &k);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / c as f64)
}

/// SSIM after rounding both frames to 8-bit levels.
/// Whether SSIM sees the float frames or their 8-bit quantisation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SsimMode {
    #[default]
    Float,
    Quantized,
}

pub fn ssim_quantized(a: &Frame, b: &Frame) -> Result<f64> {
    let q = |f: &Frame| Frame {
        pixels: f.pixels.map(|v| (v * 255.0).round() / 255.0),
        time_index: f.time_index,
    };
    ssim(&q(a), &q(b))
}

/// Mean over consecutive pairs of the masked squared error between
/// `warp(O_k, flows[k])` and `O_{k+1}`, weighted by `masks[k]` (on frame
/// `k + 1`'s grid).
pub fn temporal_warp_error(outputs: &VideoClip, flows: &[FlowField], masks: &[RaindropMask]) -> Result<f64> {
    let n = outputs.len();
    if n < 2 {
        return Err(Error::Invalid("temporal warp error needs at least 2 frames".into()));
    }
    if flows.len() != n - 1 || masks.len() != n - 1 {
        return Err(Error::Mismatch(format!(
            "{n} frames need {} flows and masks, got {} and {}",
            n - 1,
            flows.len(),
            masks.len()
        )));
    }
    let mut total = 0.0;
    for k in 0..n - 1 {
        let (a, b) = (&outputs.frames[k], &outputs.frames[k + 1]);
        let f = &flows[k];
        let (c, h, w) = (a.channels(), a.height(), a.width());
        if f.height() != h || f.width() != w || masks[k].height() != h || masks[k].width() != w {
            return Err(Error::Shape(format!("pair {k}: flow or mask size differs from frames")));
        }
        let warped = warp_tensor(&a.to_batch(), &f.vectors.clone().reshape(&[1, 2, h, w])?);
        let p = h * w;
        let wts = masks[k].nonrain_weight.data();
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for i in 0..p {
            let wt = wts[i] as f64;
            if wt == 0.0 {
                continue;
            }
            for ci in 0..c {
                let d = warped.data()[ci * p + i] as f64 - b.pixels.data()[ci * p + i] as f64;
                num += wt * d * d;
            }
            den += wt * c as f64;
        }
        if den > 0.0 {
            total += num / den;
        }
    }
    Ok(total / (n - 1) as f64)
}

/// Where the masked-region metric takes its raindrop region from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskSource {
    /// Synthesis masks.
    #[default]
    GroundTruth,
    /// Masks derived from stage-one residuals.
    Estimated,
    None,
}

impl MaskSource {
    pub fn name(self) -> &'static str {
        match self {
            MaskSource::GroundTruth => "ground-truth",
            MaskSource::Estimated => "estimated",
            MaskSource::None => "none",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub masked_psnr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub video: String,
    /// Mean over frames; `inf` if any frame is identical.
    pub psnr: f64,
    pub ssim: f64,
    /// Mean over frames that contain raindrop pixels.
    pub masked_psnr: Option<f64>,
    pub temporal_warp_error: f64,
    pub mask_source: MaskSource,
    pub frames: Vec<FrameMetrics>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// Pixels of `f`'s target grid whose warp sample stays inside the frame.
pub fn in_frame_region(f: &FlowField) -> RaindropMask {
    let (h, w) = (f.height(), f.width());
    let valid = in_frame_mask(&f.vectors.clone().reshape(&[1, 2, h, w]).expect("flow shape"));
    let mut m = RaindropMask::keep_all(h, w);
    m.nonrain_weight = valid.reshape(&[1, h, w]).expect("mask shape");
    m
}

/// Scores restored frames against ground truth. Temporal warp error uses
/// flows estimated on consecutive ground-truth frames and counts every
/// pixel whose warp sample stays inside the frame, raindrop regions
/// included.
pub fn evaluate_frames(
    video: &str,
    restored: &[Frame],
    gt: &[Frame],
    masks: Option<&[RaindropMask]>,
    mask_source: MaskSource,
    flow: &FlowEstimator,
    ssim_mode: SsimMode,
) -> Result<EvalReport> {
    if restored.len() != gt.len() || restored.is_empty() {
        return Err(Error::Mismatch(format!(
            "{} restored frames vs {} ground-truth frames",
            restored.len(),
            gt.len()
        )));
    }
    if let Some(m) = masks {
        if m.len() != gt.len() {
            return Err(Error::Mismatch(format!("{} masks for {} frames", m.len(), gt.len())));
        }
    }
    let frames = (0..gt.len())
        .into_par_iter()
        .map(|i| {
            Ok(FrameMetrics {
                psnr: psnr(&restored[i], &gt[i])?,
                ssim: match ssim_mode {
                    SsimMode::Float => ssim(&restored[i], &gt[i])?,
                    SsimMode::Quantized => ssim_quantized(&restored[i], &gt[i])?,
                },
                masked_psnr: match masks {
                    Some(m) => masked_psnr(&restored[i], &gt[i], &m[i])?,
                    None => None,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let twe = if gt.len() >= 2 {
        let flows = (0..gt.len() - 1)
            .into_par_iter()
            .map(|k| flow.estimate_flow(&gt[k], &gt[k + 1]))
            .collect::<Result<Vec<_>>>()?;
        let tw_masks: Vec<RaindropMask> = flows.iter().map(in_frame_region).collect();
        let clip = VideoClip::new(
            restored
                .iter()
                .enumerate()
                .map(|(i, f)| Frame {
                    time_index: i as i64,
                    ..f.clone()
                })
                .collect(),
            0,
        )?;
        temporal_warp_error(&clip, &flows, &tw_masks)?
    } else {
        0.0
    };
    Ok(EvalReport {
        video: video.to_string(),
        psnr: mean(frames.iter().map(|f| f.psnr)).unwrap(),
        ssim: mean(frames.iter().map(|f| f.ssim)).unwrap(),
        masked_psnr: mean(frames.iter().filter_map(|f| f.masked_psnr)),
        temporal_warp_error: twe,
        mask_source: if masks.is_some() { mask_source } else { MaskSource::None },
        frames,
    })
}

/// Reads two frame directories aligned by file name (and optionally a mask
/// directory) and scores them.
pub fn evaluate_method(
    restored_dir: &Path,
    gt_dir: &Path,
    mask_dir: Option<(&Path, MaskSource)>,
    flow: &FlowEstimator,
    ssim_mode: SsimMode,
) -> Result<EvalReport> {
    let names = |dir: &Path| -> Result<Vec<String>> {
        Ok(list_frames(dir)?
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect())
    };
    let rn = names(restored_dir)?;
    let gn = names(gt_dir)?;
    if rn != gn || rn.is_empty() {
        let missing: Vec<&String> = gn.iter().filter(|n| !rn.contains(n)).collect();
        let extra: Vec<&String> = rn.iter().filter(|n| !gn.contains(n)).collect();
        return Err(Error::Mismatch(format!(
            "frame sets differ: missing from restored {missing:?}, unexpected {extra:?}"
        )));
    }
    let load = |dir: &Path| -> Result<Vec<Frame>> {
        gn.iter()
            .enumerate()
            .map(|(i, n)| read_frame_png(&dir.join(n), i as i64))
            .collect()
    };
    let restored = load(restored_dir)?;
    let gt = load(gt_dir)?;
    let (masks, source) = match mask_dir {
        Some((dir, source)) => {
            let mn = names(dir)?;
            let missing: Vec<&String> = gn.iter().filter(|n| !mn.contains(n)).collect();
            if !missing.is_empty() {
                return Err(Error::Mismatch(format!("masks missing for {missing:?}")));
            }
            let m = gn
                .iter()
                .map(|n| read_mask_png(&dir.join(n), crate::initial::DEFAULT_TAU, MaskMode::Hard))
                .collect::<Result<Vec<_>>>()?;
            (Some(m), source)
        }
        None => (None, MaskSource::None),
    };
    let video = gt_dir
        .parent()
        .and_then(|p| p.file_name())
        .or_else(|| gt_dir.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "video".into());
    evaluate_frames(&video, &restored, &gt, masks.as_deref(), source, flow, ssim_mode)
}

pub const CSV_HEADER: &str = "video,psnr,ssim,masked_psnr,temporal_warp_error";

fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v}")
    }
}

fn parse_num(s: &str) -> Result<f64> {
    match s {
        "nan" => Ok(f64::NAN),
        "inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        _ => s
            .parse()
            .map_err(|_| Error::Format(format!("not a number in CSV: `{s}`"))),
    }
}

/// One parsed CSV row.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvRow {
    pub video: String,
    pub psnr: f64,
    pub ssim: f64,
    pub masked_psnr: f64,
    pub temporal_warp_error: f64,
}

impl CsvRow {
    pub fn from_report(r: &EvalReport) -> Self {
        Self {
            video: r.video.clone(),
            psnr: r.psnr,
            ssim: r.ssim,
            masked_psnr: r.masked_psnr.unwrap_or(f64::NAN),
            temporal_warp_error: r.temporal_warp_error,
        }
    }

    /// Field-wise equality that treats NaN as equal to NaN.
    pub fn same_as(&self, other: &CsvRow) -> bool {
        let eq = |a: f64, b: f64| a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan());
        self.video == other.video
            && eq(self.psnr, other.psnr)
            && eq(self.ssim, other.ssim)
            && eq(self.masked_psnr, other.masked_psnr)
            && eq(self.temporal_warp_error, other.temporal_warp_error)
    }
}

/// Per-video rows plus a final `mean` row.
pub fn csv_rows(reports: &[EvalReport]) -> Vec<CsvRow> {
    let mut rows: Vec<CsvRow> = reports.iter().map(CsvRow::from_report).collect();
    let n = rows.len().max(1) as f64;
    let avg = |f: &dyn Fn(&CsvRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let finite_masked: Vec<f64> = rows.iter().map(|r| r.masked_psnr).filter(|v| !v.is_nan()).collect();
    let mean_row = CsvRow {
        video: "mean".into(),
        psnr: avg(&|r| r.psnr),
        ssim: avg(&|r| r.ssim),
        masked_psnr: if finite_masked.is_empty() {
            f64::NAN
        } else {
            finite_masked.iter().sum::<f64>() / finite_masked.len() as f64
        },
        temporal_warp_error: avg(&|r| r.temporal_warp_error),
    };
    rows.push(mean_row);
    rows
}

pub fn to_csv(rows: &[CsvRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        if r.video.contains([',', '\n', '"']) {
            // Video names come from directory names; keep the format flat.
            let _ = writeln!(s, "\"{}\",{},{},{},{}", r.video.replace('"', "\"\""), fmt_num(r.psnr), fmt_num(r.ssim), fmt_num(r.masked_psnr), fmt_num(r.temporal_warp_error));
        } else {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.video,
                fmt_num(r.psnr),
                fmt_num(r.ssim),
                fmt_num(r.masked_psnr),
                fmt_num(r.temporal_warp_error)
            );
        }
    }
    s
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(Error::Format(format!(
                "CSV header must be `{CSV_HEADER}`, got {other:?}"
            )))
        }
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (video, rest) = if let Some(stripped) = l.strip_prefix('"') {
                let end = stripped
                    .find("\",")
                    .ok_or_else(|| Error::Format(format!("unterminated quote: `{l}`")))?;
                (stripped[..end].replace("\"\"", "\""), &stripped[end + 2..])
            } else {
                let (v, r) = l
                    .split_once(',')
                    .ok_or_else(|| Error::Format(format!("short CSV row: `{l}`")))?;
                (v.to_string(), r)
            };
            let f: Vec<&str> = rest.split(',').collect();
            if f.len() != 4 {
                return Err(Error::Format(format!("CSV row needs 5 fields: `{l}`")));
            }
            Ok(CsvRow {
                video,
                psnr: parse_num(f[0])?,
                ssim: parse_num(f[1])?,
                masked_psnr: parse_num(f[2])?,
                temporal_warp_error: parse_num(f[3])?,
            })
        })
        .collect()
}

pub fn write_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    fs::write(path, to_csv(&csv_rows(reports))).map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>> {
    parse_csv(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// Converts a flow-free frame difference into a mask tensor helper for
/// callers that only have a raindrop-region boolean map.
pub fn region_mask(region: &[bool], height: usize, width: usize) -> RaindropMask {
    let ev: Vec<f32> = region.iter().map(|&r| if r { 1.0 } else { 0.0 }).collect();
    RaindropMask::from_evidence(
        Tensor::from_vec(&[1, height, width], ev).expect("region size"),
        0.5,
        MaskMode::Hard,
    )
}
