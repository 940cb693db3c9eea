//! Synthetic adherent raindrops composited onto clean frames, plus a
//! procedural translating background for toy clips.
//!
//! A drop shows a blurred, vertically flipped, rescaled view of the scene
//! around its centre (thin-lens approximation), optionally tinted and with
//! grain, alpha-blended with a feathered elliptical profile.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgproc::{blur_plane, gaussian_kernel};
use crate::initial::{channel_mean_abs_diff, DEFAULT_TAU};
use crate::io::{write_frames, write_masks};
use crate::sampling::Stencil;
use crate::tensor::Tensor;
use crate::types::{Frame, MaskMode, RaindropMask, VideoClip};

pub const MIN_RADIUS: f32 = 3.0;
pub const MAX_RADIUS: f32 = 80.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RaindropShape {
    pub center: (f32, f32),
    pub radii: (f32, f32),
    /// Peak opacity in `[0, 1]`.
    pub opacity: f32,
    /// Magnification of the scene region seen through the drop; 0 shows a
    /// single scene point.
    pub refraction_strength: f32,
    /// Blur of the refracted view and width of the edge feather.
    pub blur_sigma: f32,
    pub tint: [f32; 3],
    /// Blend between the refracted view (0) and the tint (1).
    pub tint_mix: f32,
    /// Standard deviation of per-pixel grain inside the drop.
    pub noise: f32,
}

impl RaindropShape {
    pub fn new(center: (f32, f32), radii: (f32, f32)) -> Self {
        Self {
            center,
            radii,
            opacity: 0.9,
            refraction_strength: 0.4,
            blur_sigma: 1.0,
            tint: [0.85, 0.9, 0.95],
            tint_mix: 0.25,
            noise: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.radii;
        if !(MIN_RADIUS..=MAX_RADIUS).contains(&a) || !(MIN_RADIUS..=MAX_RADIUS).contains(&b) {
            return Err(Error::Invalid(format!(
                "drop radii ({a}, {b}) outside [{MIN_RADIUS}, {MAX_RADIUS}]"
            )));
        }
        let finite = [
            self.center.0,
            self.center.1,
            self.opacity,
            self.refraction_strength,
            self.blur_sigma,
            self.tint_mix,
            self.noise,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite
            || !(0.0..=1.0).contains(&self.opacity)
            || !(0.0..=1.0).contains(&self.tint_mix)
            || self.refraction_strength < 0.0
            || self.blur_sigma < 0.0
            || self.noise < 0.0
        {
            return Err(Error::Invalid(format!("invalid drop parameters: {self:?}")));
        }
        Ok(())
    }

    /// Opacity at pixel `(x, y)`: `opacity` inside the ellipse shrunk by the
    /// feather, falling smoothly to 0 at the ellipse dilated by
    /// `2 * blur_sigma`, and exactly 0 beyond.
    pub fn alpha(&self, x: f32, y: f32) -> f32 {
        let (a, b) = self.radii;
        let dx = (x - self.center.0) / a;
        let dy = (y - self.center.1) / b;
        let r = (dx * dx + dy * dy).sqrt();
        let d = (r - 1.0) * a.min(b);
        let feather = 2.0 * self.blur_sigma;
        if feather == 0.0 {
            return if r <= 1.0 { self.opacity } else { 0.0 };
        }
        if d >= feather {
            return 0.0;
        }
        let t = ((feather - d) / (2.0 * feather)).clamp(0.0, 1.0);
        self.opacity * t * t * (3.0 - 2.0 * t)
    }

    /// Pixel bounding box `(x0, y0, x1, y1)` (exclusive ends) of the support,
    /// clipped to the frame.
    fn bounds(&self, h: usize, w: usize) -> (usize, usize, usize, usize) {
        let m = 2.0 * self.blur_sigma + 1.0;
        let lo = |c: f32, r: f32| (c - r - m).floor().max(0.0) as usize;
        let hi = |c: f32, r: f32, n: usize| ((c + r + m).ceil().max(0.0) as usize + 1).min(n);
        (
            lo(self.center.0, self.radii.0),
            lo(self.center.1, self.radii.1),
            hi(self.center.0, self.radii.0, w),
            hi(self.center.1, self.radii.1, h),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropTrajectory {
    pub shape: RaindropShape,
    /// Pixels per frame.
    pub velocity: (f32, f32),
    pub jitter_sigma: f32,
}

impl DropTrajectory {
    pub fn speed(&self) -> f32 {
        self.velocity.0.hypot(self.velocity.1)
    }
}

/// Composites `drops` onto `clean`. Pixels no drop touches stay bit-exact;
/// the mask evidence is the channel mean of `|rain - clean|`.
pub fn composite_drop(clean: &Frame, drops: &[RaindropShape], seed: u64) -> Result<(Frame, RaindropMask)> {
    composite_drop_tau(clean, drops, seed, DEFAULT_TAU)
}

pub fn composite_drop_tau(
    clean: &Frame,
    drops: &[RaindropShape],
    seed: u64,
    tau: f32,
) -> Result<(Frame, RaindropMask)> {
    let (c, h, w) = (clean.channels(), clean.height(), clean.width());
    let p = h * w;
    let mut out = clean.pixels.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for drop in drops {
        drop.validate()?;
        let kernel = gaussian_kernel(drop.blur_sigma as f64);
        let src = clean.pixels.data();
        let blurred: Vec<Vec<f32>> = (0..c)
            .map(|ci| blur_plane(&src[ci * p..(ci + 1) * p], h, w, &kernel))
            .collect();
        let grain = Normal::new(0.0f32, drop.noise.max(0.0)).expect("valid grain std");
        let (x0, y0, x1, y1) = drop.bounds(h, w);
        let k = drop.refraction_strength;
        let (cx, cy) = drop.center;
        let data = out.data_mut();
        for y in y0..y1 {
            for x in x0..x1 {
                let a = drop.alpha(x as f32, y as f32);
                if a <= 0.0 {
                    continue;
                }
                let sx = cx + (x as f32 - cx) * k;
                let sy = cy - (y as f32 - cy) * k;
                let st = Stencil::new(sx, sy, h, w);
                for (ci, plane) in blurred.iter().enumerate() {
                    let refracted = st.sample(plane);
                    let tint = drop.tint[ci.min(2)];
                    let mut inner = (1.0 - drop.tint_mix) * refracted + drop.tint_mix * tint;
                    if drop.noise > 0.0 {
                        inner += grain.sample(&mut rng);
                    }
                    let idx = ci * p + y * w + x;
                    let v = (1.0 - a) * data[idx] + a * inner;
                    data[idx] = v.clamp(0.0, 1.0);
                }
            }
        }
    }
    let evidence = channel_mean_abs_diff(&out, &clean.pixels);
    let rain = Frame {
        pixels: out,
        time_index: clean.time_index,
    };
    Ok((rain, RaindropMask::from_evidence(evidence, tau, MaskMode::Hard)))
}

/// Per-frame drop shapes: centre at frame `k` is `c0 + k * v` plus
/// independent Gaussian jitter.
pub fn trajectory_shapes(
    trajectories: &[DropTrajectory],
    frames: usize,
    seed: u64,
) -> Result<Vec<Vec<RaindropShape>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut out = vec![Vec::with_capacity(trajectories.len()); frames];
    for tr in trajectories {
        let jitter = Normal::new(0.0f32, tr.jitter_sigma.max(0.0))
            .map_err(|e| Error::Invalid(format!("jitter: {e}")))?;
        for (k, shapes) in out.iter_mut().enumerate() {
            let mut s = tr.shape.clone();
            let (mut jx, mut jy) = (0.0, 0.0);
            if tr.jitter_sigma > 0.0 {
                jx = jitter.sample(&mut rng);
                jy = jitter.sample(&mut rng);
            }
            s.center.0 += tr.velocity.0 * k as f32 + jx;
            s.center.1 += tr.velocity.1 * k as f32 + jy;
            shapes.push(s);
        }
    }
    Ok(out)
}

/// Adds persistent drops to every frame of `clean_clip`. Every drop must
/// move strictly slower than `background_speed` pixels per frame.
pub fn synthesize_clip(
    clean_clip: &VideoClip,
    trajectories: &[DropTrajectory],
    seed: u64,
    background_speed: f32,
) -> Result<(VideoClip, Vec<RaindropMask>)> {
    if clean_clip.len() < 2 {
        return Err(Error::Invalid(format!(
            "clip needs at least 2 frames, got {}",
            clean_clip.len()
        )));
    }
    for (i, tr) in trajectories.iter().enumerate() {
        if tr.speed() >= background_speed {
            return Err(Error::Invalid(format!(
                "drop {i} moves at {:.3} px/frame, not slower than the background ({background_speed} px/frame)",
                tr.speed()
            )));
        }
        tr.shape.validate()?;
    }
    let per_frame = trajectory_shapes(trajectories, clean_clip.len(), seed)?;
    let mut frames = Vec::with_capacity(clean_clip.len());
    let mut masks = Vec::with_capacity(clean_clip.len());
    for (k, (f, shapes)) in clean_clip.frames.iter().zip(&per_frame).enumerate() {
        let (r, m) = composite_drop(f, shapes, seed.wrapping_add(k as u64))?;
        frames.push(r);
        masks.push(m);
    }
    Ok((VideoClip::new(frames, clean_clip.window_radius)?, masks))
}

/// Random drops for `synth`: radii in `[4, 12]`, speeds below half the
/// background speed.
pub fn random_trajectories(
    count: usize,
    height: usize,
    width: usize,
    background_speed: f32,
    seed: u64,
) -> Vec<DropTrajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let a = rng.random_range(4.0f32..12.0);
            let b = (a * rng.random_range(0.75f32..1.25)).clamp(MIN_RADIUS, MAX_RADIUS);
            let mut shape = RaindropShape::new(
                (
                    rng.random_range(0.0..width as f32),
                    rng.random_range(0.0..height as f32),
                ),
                (a, b),
            );
            shape.opacity = rng.random_range(0.6f32..0.95);
            shape.refraction_strength = rng.random_range(0.2f32..0.6);
            shape.blur_sigma = rng.random_range(0.5f32..1.5);
            shape.tint_mix = rng.random_range(0.1f32..0.4);
            shape.noise = 0.01;
            let speed = rng.random_range(0.0f32..0.5) * background_speed;
            let angle = rng.random_range(0.0f32..std::f32::consts::TAU);
            DropTrajectory {
                shape,
                velocity: (speed * angle.cos(), speed * angle.sin()),
                jitter_sigma: 0.1,
            }
        })
        .collect()
}

/// Procedural textured scene translating by `velocity` pixels per frame.
/// Frame `k` at `p` shows the canvas at `p + k * velocity`.
pub fn translating_background(
    height: usize,
    width: usize,
    frames: usize,
    velocity: (f32, f32),
    seed: u64,
) -> Result<VideoClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = frames.saturating_sub(1) as f32;
    let margin_x = (velocity.0.abs() * span).ceil() as usize + 4;
    let margin_y = (velocity.1.abs() * span).ceil() as usize + 4;
    let (ch, cw) = (height + 2 * margin_y, width + 2 * margin_x);
    let waves: Vec<(f32, f32, f32, [f32; 3])> = (0..6)
        .map(|_| {
            let f = rng.random_range(0.01f32..0.05);
            let th = rng.random_range(0.0f32..std::f32::consts::PI);
            let ph = rng.random_range(0.0f32..std::f32::consts::TAU);
            let amp = [
                rng.random_range(0.03f32..0.1),
                rng.random_range(0.03f32..0.1),
                rng.random_range(0.03f32..0.1),
            ];
            (f * th.cos(), f * th.sin(), ph, amp)
        })
        .collect();
    let noise: Vec<f32> = (0..ch * cw).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let blobs = blur_plane(&noise, ch, cw, &gaussian_kernel(3.0));
    let scale = blobs.iter().fold(0.0f32, |m, v| m.max(v.abs())).max(1e-6);
    let tint = [
        rng.random_range(0.8f32..1.2),
        rng.random_range(0.8f32..1.2),
        rng.random_range(0.8f32..1.2),
    ];
    let mut canvas = vec![0.0f32; 3 * ch * cw];
    for y in 0..ch {
        for x in 0..cw {
            let mut v = [0.5f32; 3];
            for (fx, fy, ph, amp) in &waves {
                let s = (std::f32::consts::TAU * (fx * x as f32 + fy * y as f32) + ph).sin();
                for c in 0..3 {
                    v[c] += amp[c] * s;
                }
            }
            let b = blobs[y * cw + x] / scale;
            for c in 0..3 {
                canvas[(c * ch + y) * cw + x] = (v[c] + 0.2 * b * tint[c]).clamp(0.02, 0.98);
            }
        }
    }
    let mut out = Vec::with_capacity(frames);
    for k in 0..frames {
        let ox = margin_x as f32 + velocity.0 * k as f32;
        let oy = margin_y as f32 + velocity.1 * k as f32;
        let mut px = vec![0.0f32; 3 * height * width];
        for y in 0..height {
            for x in 0..width {
                let st = Stencil::new(ox + x as f32, oy + y as f32, ch, cw);
                for c in 0..3 {
                    px[(c * height + y) * width + x] = st.sample(&canvas[c * ch * cw..(c + 1) * ch * cw]);
                }
            }
        }
        out.push(Frame::new(Tensor::from_vec(&[3, height, width], px)?, k as i64)?);
    }
    VideoClip::new(out, 2)
}

/// Parameters of the bundled toy clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyClipSpec {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub background_velocity: (f32, f32),
    pub drop: RaindropShape,
    pub seed: u64,
}

impl Default for ToyClipSpec {
    fn default() -> Self {
        let mut drop = RaindropShape::new((60.0, 58.0), (5.0, 4.5));
        drop.opacity = 0.95;
        drop.refraction_strength = 0.3;
        drop.blur_sigma = 0.8;
        drop.tint_mix = 0.35;
        drop.noise = 0.01;
        Self {
            height: 128,
            width: 128,
            frames: 16,
            background_velocity: (4.0, 2.0),
            drop,
            seed: 2024,
        }
    }
}

/// Rainy clip, clean clip and ground-truth masks.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClip {
    pub rain: VideoClip,
    pub clean: VideoClip,
    pub masks: Vec<RaindropMask>,
}

/// Translating background with one static drop.
pub fn toy_clip(spec: &ToyClipSpec) -> Result<SyntheticClip> {
    let clean = translating_background(
        spec.height,
        spec.width,
        spec.frames,
        spec.background_velocity,
        spec.seed,
    )?;
    let speed = spec.background_velocity.0.hypot(spec.background_velocity.1);
    let tr = DropTrajectory {
        shape: spec.drop.clone(),
        velocity: (0.0, 0.0),
        jitter_sigma: 0.0,
    };
    let (rain, masks) = synthesize_clip(&clean, &[tr], spec.seed, speed)?;
    Ok(SyntheticClip { rain, clean, masks })
}

/// What `synth` records next to the frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub background_speed: f32,
    pub drops: Vec<DropTrajectory>,
}

/// Writes `rain/`, `clean/`, `mask/` and `manifest.json` under `dir`.
pub fn write_clip_dir(dir: &Path, clip: &SyntheticClip, manifest: &SynthManifest) -> Result<()> {
    write_frames(&dir.join("rain"), &clip.rain.frames)?;
    write_frames(&dir.join("clean"), &clip.clean.frames)?;
    write_masks(&dir.join("mask"), &clip.masks)?;
    let json = serde_json::to_string_pretty(manifest)?;
    let p = dir.join("manifest.json");
    fs::write(&p, json + "\n").map_err(|e| Error::io(&p, e))
}
