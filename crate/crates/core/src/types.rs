//! Shared data model: frames, clips, masks, flows, features and loss reports.
//!
//! Pixel values live in `[0, 1]`; layouts are channel-major (`C x H x W`).
//! Optical-flow fields and feature maps get distinct types.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Spatial stride of the stage-two encoder.
pub const ENCODER_STRIDE: usize = 4;
/// Smallest frame side accepted by the stage-two pipeline.
pub const MIN_FRAME_SIDE: usize = 64;

/// A single image (`C x H x W`, values in `[0, 1]`) at time step `time_index`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub pixels: Tensor<f32>,
    pub time_index: i64,
}

impl Frame {
    /// Wraps a `C x H x W` tensor, clamping values into `[0, 1]`.
    pub fn new(pixels: Tensor<f32>, time_index: i64) -> Result<Self> {
        if pixels.ndim() != 3 {
            return Err(Error::Shape(format!(
                "frame must be CxHxW, got {:?}",
                pixels.shape()
            )));
        }
        clamp_frame(&Frame { pixels, time_index })
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim(0)
    }

    pub fn height(&self) -> usize {
        self.pixels.dim(1)
    }

    pub fn width(&self) -> usize {
        self.pixels.dim(2)
    }

    /// Checks the stage-two size contract (side >= 64, divisible by the stride).
    pub fn check_pipeline_dims(&self) -> Result<()> {
        check_pipeline_dims(self.height(), self.width())
    }

    /// `1 x C x H x W` batch view.
    pub fn to_batch(&self) -> Tensor<f32> {
        let s = self.pixels.shape();
        self.pixels
            .clone()
            .reshape(&[1, s[0], s[1], s[2]])
            .expect("frame reshape")
    }
}

pub fn check_pipeline_dims(height: usize, width: usize) -> Result<()> {
    let r = ENCODER_STRIDE;
    if height < MIN_FRAME_SIDE
        || width < MIN_FRAME_SIDE
        || height % r != 0
        || width % r != 0
    {
        let ph = height.max(MIN_FRAME_SIDE).div_ceil(r) * r;
        let pw = width.max(MIN_FRAME_SIDE).div_ceil(r) * r;
        return Err(Error::Padding {
            height,
            width,
            hint: format!(
                "sides must be >= {MIN_FRAME_SIDE} and divisible by {r}; pad to {ph}x{pw} (use --pad)"
            ),
        });
    }
    Ok(())
}

/// Clamps every pixel into `[0, 1]`. Rejects non-finite input.
pub fn clamp_frame(f: &Frame) -> Result<Frame> {
    if let Some(pos) = f.pixels.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "frame t={} at element {pos}",
            f.time_index
        )));
    }
    Ok(Frame {
        pixels: f.pixels.map(|v| v.clamp(0.0, 1.0)),
        time_index: f.time_index,
    })
}

/// Ordered frames with a temporal window radius `s` (window length `2s + 1`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoClip {
    pub frames: Vec<Frame>,
    pub window_radius: usize,
}

impl VideoClip {
    pub fn new(frames: Vec<Frame>, window_radius: usize) -> Result<Self> {
        for pair in frames.windows(2) {
            if pair[1].time_index != pair[0].time_index + 1 {
                return Err(Error::Invalid(format!(
                    "clip frames must have unit time spacing: {} then {}",
                    pair[0].time_index, pair[1].time_index
                )));
            }
            if pair[1].pixels.shape() != pair[0].pixels.shape() {
                return Err(Error::Shape("clip frames differ in shape".into()));
            }
        }
        Ok(Self {
            frames,
            window_radius,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn window_len(&self) -> usize {
        2 * self.window_radius + 1
    }
}

/// How the non-raindrop weight is derived from the evidence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskMode {
    /// `1` where evidence < tau, else `0`.
    #[default]
    Hard,
    /// `max(0, 1 - evidence / tau)`.
    Soft,
}

/// Raindrop evidence `|I - S|` (channel mean) and the derived non-raindrop weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RaindropMask {
    /// `1 x H x W`, non-negative.
    pub evidence: Tensor<f32>,
    /// `1 x H x W`, in `[0, 1]`.
    pub nonrain_weight: Tensor<f32>,
    pub threshold: f32,
    pub mode: MaskMode,
}

impl RaindropMask {
    pub fn from_evidence(evidence: Tensor<f32>, threshold: f32, mode: MaskMode) -> Self {
        let nonrain_weight = match mode {
            MaskMode::Hard => evidence.map(|e| if e < threshold { 1.0 } else { 0.0 }),
            MaskMode::Soft => evidence.map(|e| {
                if threshold > 0.0 {
                    (1.0 - e / threshold).max(0.0)
                } else if e > 0.0 {
                    0.0
                } else {
                    1.0
                }
            }),
        };
        Self {
            evidence,
            nonrain_weight,
            threshold,
            mode,
        }
    }

    /// Mask that keeps every pixel (used when masking is disabled).
    pub fn keep_all(height: usize, width: usize) -> Self {
        Self {
            evidence: Tensor::zeros(&[1, height, width]),
            nonrain_weight: Tensor::full(&[1, height, width], 1.0),
            threshold: 0.0,
            mode: MaskMode::Hard,
        }
    }

    pub fn height(&self) -> usize {
        self.evidence.dim(1)
    }

    pub fn width(&self) -> usize {
        self.evidence.dim(2)
    }

    /// Number of pixels flagged as raindrop (weight exactly zero).
    pub fn raindrop_pixels(&self) -> usize {
        self.nonrain_weight.data().iter().filter(|&&w| w == 0.0).count()
    }

    /// `1 x 1 x H x W` weight view for loss kernels.
    pub fn weight_batch(&self) -> Tensor<f32> {
        self.nonrain_weight
            .clone()
            .reshape(&[1, 1, self.height(), self.width()])
            .expect("mask reshape")
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        Self {
            evidence: self.evidence.crop_hw(y0, x0, h, w),
            nonrain_weight: self.nonrain_weight.crop_hw(y0, x0, h, w),
            threshold: self.threshold,
            mode: self.mode,
        }
    }
}

/// Dense displacement field `2 x H x W` (x then y, in pixels).
///
/// `F(i -> j)` lives on frame `j`'s grid: warping frame `i` with it
/// reads `i` at `p + F(p)` and lands on `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowField {
    pub vectors: Tensor<f32>,
    pub source_index: i64,
    pub target_index: i64,
}

impl FlowField {
    pub fn new(vectors: Tensor<f32>, source_index: i64, target_index: i64) -> Result<Self> {
        if vectors.ndim() != 3 || vectors.dim(0) != 2 {
            return Err(Error::Shape(format!(
                "flow must be 2xHxW, got {:?}",
                vectors.shape()
            )));
        }
        let (h, w) = (vectors.dim(1), vectors.dim(2));
        if !vectors.all_finite() {
            return Err(Error::NonFinite(format!(
                "flow {source_index}->{target_index}"
            )));
        }
        let bound = h.max(w) as f32;
        let plane = h * w;
        let d = vectors.data();
        for i in 0..plane {
            let m = (d[i] * d[i] + d[plane + i] * d[plane + i]).sqrt();
            if m > bound {
                return Err(Error::Invalid(format!(
                    "flow {source_index}->{target_index} magnitude {m} exceeds {bound}"
                )));
            }
        }
        Ok(Self {
            vectors,
            source_index,
            target_index,
        })
    }

    pub fn zeros(height: usize, width: usize, source_index: i64, target_index: i64) -> Self {
        Self {
            vectors: Tensor::zeros(&[2, height, width]),
            source_index,
            target_index,
        }
    }

    pub fn height(&self) -> usize {
        self.vectors.dim(1)
    }

    pub fn width(&self) -> usize {
        self.vectors.dim(2)
    }

    /// Mean of the x and y components over a rectangular interior region.
    pub fn mean_in(&self, y0: usize, x0: usize, h: usize, w: usize) -> (f32, f32) {
        let c = self.vectors.crop_hw(y0, x0, h, w);
        let plane = h * w;
        let sx: f32 = c.data()[..plane].iter().sum();
        let sy: f32 = c.data()[plane..].iter().sum();
        (sx / plane as f32, sy / plane as f32)
    }

    pub fn mean_magnitude(&self) -> f32 {
        let plane = self.height() * self.width();
        let d = self.vectors.data();
        (0..plane)
            .map(|i| (d[i] * d[i] + d[plane + i] * d[plane + i]).sqrt())
            .sum::<f32>()
            / plane as f32
    }

    /// Bilinear downscale by `stride` with vectors divided by `stride`, for
    /// use on a feature grid.
    pub fn downscale(&self, stride: usize) -> Self {
        let (h, w) = (self.height(), self.width());
        let (oh, ow) = (h / stride, w / stride);
        let d = self.vectors.data();
        let mut out = vec![0.0f32; 2 * oh * ow];
        let s = stride as f32;
        for c in 0..2 {
            let plane = &d[c * h * w..(c + 1) * h * w];
            for y in 0..oh {
                // Pixel-centre alignment: output (y, x) samples ((y + .5) s - .5).
                let sy = ((y as f32 + 0.5) * s - 0.5).clamp(0.0, (h - 1) as f32);
                let y0 = sy.floor() as usize;
                let y1 = (y0 + 1).min(h - 1);
                let fy = sy - y0 as f32;
                for x in 0..ow {
                    let sx = ((x as f32 + 0.5) * s - 0.5).clamp(0.0, (w - 1) as f32);
                    let x0 = sx.floor() as usize;
                    let x1 = (x0 + 1).min(w - 1);
                    let fx = sx - x0 as f32;
                    let v = plane[y0 * w + x0] * (1.0 - fx) * (1.0 - fy)
                        + plane[y0 * w + x1] * fx * (1.0 - fy)
                        + plane[y1 * w + x0] * (1.0 - fx) * fy
                        + plane[y1 * w + x1] * fx * fy;
                    out[(c * oh + y) * ow + x] = v / s;
                }
            }
        }
        Self {
            vectors: Tensor::from_vec(&[2, oh, ow], out).expect("flow downscale"),
            source_index: self.source_index,
            target_index: self.target_index,
        }
    }
}

/// Encoder activations `C_f x H/r x W/r`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub activations: Tensor<f32>,
    pub time_index: i64,
}

/// Per-position sampling displacements for each kernel tap:
/// `2K x h x w`, channel `2k` is x and `2k + 1` is y for tap `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffsetField {
    pub offsets: Tensor<f32>,
}

impl OffsetField {
    pub fn taps(&self) -> usize {
        self.offsets.dim(0) / 2
    }
}

/// Named stage-two loss terms and their weighted total.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub flow: f64,
    pub mask_ct: f64,
    pub mask_cl: f64,
    pub temp: f64,
    pub lambda_t: f64,
    pub total: f64,
}

pub const DEFAULT_LAMBDA_T: f64 = 0.5;

impl LossReport {
    /// `total = flow + mask_ct + mask_cl + lambda_t * temp`.
    pub fn new(flow: f64, mask_ct: f64, mask_cl: f64, temp: f64, lambda_t: f64) -> Result<Self> {
        for (name, v) in [
            ("flow", flow),
            ("mask_ct", mask_ct),
            ("mask_cl", mask_cl),
            ("temp", temp),
            ("lambda_t", lambda_t),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("loss term `{name}` = {v}")));
            }
        }
        for (name, v) in [
            ("flow", flow),
            ("mask_ct", mask_ct),
            ("mask_cl", mask_cl),
            ("temp", temp),
        ] {
            if v < 0.0 {
                return Err(Error::Invalid(format!("loss term `{name}` is negative: {v}")));
            }
        }
        Ok(Self {
            flow,
            mask_ct,
            mask_cl,
            temp,
            lambda_t,
            total: flow + mask_ct + mask_cl + lambda_t * temp,
        })
    }

    pub fn recomputed_total(&self) -> f64 {
        self.flow + self.mask_ct + self.mask_cl + self.lambda_t * self.temp
    }
}
