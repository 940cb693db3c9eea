//! Feature-level alignment: a shared strided encoder, an offset predictor
//! conditioned on the current frame's features, and a deformable
//! convolution that resamples neighbour features along the predicted offsets.

mod deform;

pub use deform::deform_conv_tensor;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Bound, Init, ParamStore};
use crate::tensor::Tensor;
use crate::types::{FeatureMap, Frame, OffsetField, ENCODER_STRIDE};

#[derive(Clone, Debug, PartialEq)]
pub struct AlignSettings {
    pub feat_channels: usize,
    /// Offsets are clamped to `[-offset_bound, offset_bound]` feature pixels.
    pub offset_bound: f32,
    pub kernel: usize,
}

impl Default for AlignSettings {
    fn default() -> Self {
        Self {
            feat_channels: 64,
            offset_bound: 8.0,
            kernel: 3,
        }
    }
}

const SLOPE: f32 = 0.1;

/// Encoder `E_init`, offset predictor and deformable layer `G`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignEncoder {
    pub settings: AlignSettings,
    pub params: ParamStore,
}

impl AlignEncoder {
    pub fn new(settings: AlignSettings, seed: u64) -> Self {
        let c = settings.feat_channels;
        let k = settings.kernel;
        let mut params = ParamStore::new();
        let mut init = Init::new(seed);
        init.conv2d(&mut params, "enc.conv1", c, 3, 3);
        init.conv2d(&mut params, "enc.conv2", c, c, 3);
        init.conv2d(&mut params, "enc.conv3", c, c, 3);
        init.conv2d(&mut params, "off.conv1", c, 2 * c, 3);
        init.conv2d_zero(&mut params, "off.conv2", 2 * k * k, c, 3);
        init.conv2d(&mut params, "dcn", c, c, k);
        Self { settings, params }
    }

    pub fn taps(&self) -> usize {
        self.settings.kernel * self.settings.kernel
    }

    /// `[N, 3, H, W]` -> `[N, C_f, H/4, W/4]`.
    pub fn encode_graph(&self, g: &mut Graph<f32>, b: &Bound, x: Var) -> Var {
        let h = b.conv2d(g, "enc.conv1", x, 1, 1);
        let h = g.leaky_relu(h, SLOPE);
        let h = b.conv2d(g, "enc.conv2", h, 2, 1);
        let h = g.leaky_relu(h, SLOPE);
        let h = b.conv2d(g, "enc.conv3", h, 2, 1);
        g.leaky_relu(h, SLOPE)
    }

    /// Offsets for neighbour features `f_i` relative to the current `f_t`.
    pub fn offsets_graph(&self, g: &mut Graph<f32>, b: &Bound, f_i: Var, f_t: Var) -> Var {
        let x = g.concat_channels(&[f_i, f_t]);
        let h = b.conv2d(g, "off.conv1", x, 1, 1);
        let h = g.leaky_relu(h, SLOPE);
        let o = b.conv2d(g, "off.conv2", h, 1, 1);
        let m = self.settings.offset_bound;
        g.clamp(o, -m, m)
    }

    /// Deformable convolution of `f_i` along `offsets` (no activation).
    pub fn deform_graph(&self, g: &mut Graph<f32>, b: &Bound, f_i: Var, offsets: Var) -> Var {
        let w = b.var("dcn.weight");
        let bias = b.try_var("dcn.bias");
        g.deform_conv2d(f_i, offsets, w, bias)
    }

    pub fn encode(&self, x: &Frame) -> Result<FeatureMap> {
        check_stride(x.height(), x.width())?;
        if x.channels() != 3 {
            return Err(Error::Shape(format!("encoder expects 3 channels, got {}", x.channels())));
        }
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let xv = g.constant(x.to_batch());
        let f = self.encode_graph(&mut g, &b, xv);
        Ok(FeatureMap {
            activations: unbatch(g.value(f)),
            time_index: x.time_index,
        })
    }

    pub fn predict_offsets(&self, f_i: &FeatureMap, f_t: &FeatureMap) -> Result<OffsetField> {
        self.check_features(f_i)?;
        if f_i.activations.shape() != f_t.activations.shape() {
            return Err(Error::Shape(format!(
                "feature maps differ: {:?} vs {:?}",
                f_i.activations.shape(),
                f_t.activations.shape()
            )));
        }
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let a = g.constant(batch(&f_i.activations));
        let c = g.constant(batch(&f_t.activations));
        let o = self.offsets_graph(&mut g, &b, a, c);
        Ok(OffsetField {
            offsets: unbatch(g.value(o)),
        })
    }

    pub fn deform_conv(&self, f_i: &FeatureMap, theta: &OffsetField) -> Result<FeatureMap> {
        self.check_features(f_i)?;
        let s = f_i.activations.shape();
        let want = [2 * self.taps(), s[1], s[2]];
        if theta.offsets.shape() != want {
            return Err(Error::Shape(format!(
                "offset field {:?}, expected {:?}",
                theta.offsets.shape(),
                want
            )));
        }
        let out = deform_conv_tensor(
            &batch(&f_i.activations),
            &batch(&theta.offsets),
            self.params.get("dcn.weight")?,
            Some(self.params.get("dcn.bias")?),
        );
        Ok(FeatureMap {
            activations: unbatch(&out),
            time_index: f_i.time_index,
        })
    }

    fn check_features(&self, f: &FeatureMap) -> Result<()> {
        let s = f.activations.shape();
        if s.len() != 3 || s[0] != self.settings.feat_channels {
            return Err(Error::Shape(format!(
                "feature map {:?} does not have {} channels",
                s, self.settings.feat_channels
            )));
        }
        Ok(())
    }
}

/// Rejects sizes the stride-4 encoder cannot tile exactly.
pub fn check_stride(height: usize, width: usize) -> Result<()> {
    let r = ENCODER_STRIDE;
    if height % r != 0 || width % r != 0 || height == 0 || width == 0 {
        return Err(Error::Padding {
            height,
            width,
            hint: format!(
                "sides must be divisible by {r}; pad to {}x{} (use --pad)",
                height.div_ceil(r).max(1) * r,
                width.div_ceil(r).max(1) * r
            ),
        });
    }
    Ok(())
}

fn batch(t: &Tensor<f32>) -> Tensor<f32> {
    let mut s = vec![1];
    s.extend_from_slice(t.shape());
    t.clone().reshape(&s).unwrap()
}

fn unbatch(t: &Tensor<f32>) -> Tensor<f32> {
    t.clone().reshape(&t.shape()[1..]).unwrap()
}
