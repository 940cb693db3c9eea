//! Frame directories: numbered 8-bit PNG files.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::types::{Frame, MaskMode, RaindropMask, VideoClip};

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:06}.png")
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn img_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

pub fn write_frame_png(path: &Path, f: &Frame) -> Result<()> {
    if f.channels() != 3 {
        return Err(Error::Shape(format!("PNG frames are RGB, got {} channels", f.channels())));
    }
    let (h, w) = (f.height(), f.width());
    let p = h * w;
    let d = f.pixels.data();
    let mut raw = Vec::with_capacity(3 * p);
    for i in 0..p {
        for c in 0..3 {
            raw.push(to_u8(d[c * p + i]));
        }
    }
    let img = RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer size");
    ensure_parent(path)?;
    img.save(path).map_err(|e| img_err(path, e))
}

pub fn read_frame_png(path: &Path, time_index: i64) -> Result<Frame> {
    if !path.exists() {
        return Err(Error::Missing(format!("frame {}", path.display())));
    }
    let img = image::open(path).map_err(|e| img_err(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let p = h * w;
    let mut data = vec![0.0f32; 3 * p];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * p + i] = px.0[c] as f32 / 255.0;
        }
    }
    Frame::new(Tensor::from_vec(&[3, h, w], data)?, time_index)
}

/// Stores the mask evidence as 8-bit grey.
pub fn write_mask_png(path: &Path, m: &RaindropMask) -> Result<()> {
    let raw = m.evidence.data().iter().map(|&v| to_u8(v)).collect();
    let img = GrayImage::from_raw(m.width() as u32, m.height() as u32, raw).expect("buffer size");
    ensure_parent(path)?;
    img.save(path).map_err(|e| img_err(path, e))
}

pub fn read_mask_png(path: &Path, tau: f32, mode: MaskMode) -> Result<RaindropMask> {
    if !path.exists() {
        return Err(Error::Missing(format!("mask {}", path.display())));
    }
    let img = image::open(path).map_err(|e| img_err(path, e))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| p.0[0] as f32 / 255.0).collect();
    Ok(RaindropMask::from_evidence(
        Tensor::from_vec(&[1, h, w], data)?,
        tau,
        mode,
    ))
}

/// PNG files in `dir`, sorted by name.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Missing(format!("frame directory {}", dir.display())));
    }
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}

pub fn read_frames(dir: &Path) -> Result<Vec<Frame>> {
    list_frames(dir)?
        .iter()
        .enumerate()
        .map(|(i, p)| read_frame_png(p, i as i64))
        .collect()
}

pub fn read_clip(dir: &Path, window_radius: usize) -> Result<VideoClip> {
    let frames = read_frames(dir)?;
    if frames.is_empty() {
        return Err(Error::Missing(format!("no PNG frames in {}", dir.display())));
    }
    VideoClip::new(frames, window_radius)
}

pub fn read_masks(dir: &Path, tau: f32, mode: MaskMode) -> Result<Vec<RaindropMask>> {
    list_frames(dir)?
        .iter()
        .map(|p| read_mask_png(p, tau, mode))
        .collect()
}

pub fn write_frames(dir: &Path, frames: &[Frame]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in frames.iter().enumerate() {
        write_frame_png(&dir.join(frame_file_name(i)), f)?;
    }
    Ok(())
}

pub fn write_masks(dir: &Path, masks: &[RaindropMask]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, m) in masks.iter().enumerate() {
        write_mask_png(&dir.join(frame_file_name(i)), m)?;
    }
    Ok(())
}

/// Replicate-pads a frame on the bottom and right to `h x w`.
pub fn pad_frame(f: &Frame, h: usize, w: usize) -> Frame {
    let (c, fh, fw) = (f.channels(), f.height(), f.width());
    let mut out = vec![0.0f32; c * h * w];
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ci * h + y) * w + x] = f.pixels.data()[(ci * fh + y.min(fh - 1)) * fw + x.min(fw - 1)];
            }
        }
    }
    Frame {
        pixels: Tensor::from_vec(&[c, h, w], out).unwrap(),
        time_index: f.time_index,
    }
}

/// Top-left `h x w` window of a frame.
pub fn crop_frame(f: &Frame, h: usize, w: usize) -> Frame {
    Frame {
        pixels: f.pixels.crop_hw(0, 0, h, w),
        time_index: f.time_index,
    }
}
