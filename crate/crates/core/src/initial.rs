//! Stage one: single-image restoration with recurrent attention, the
//! residual-based raindrop mask, and the supervised loss.

use crate::align::check_stride;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Bound, Init, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::types::{FeatureMap, Frame, MaskMode, RaindropMask};

/// Default mask threshold on the `[0, 1]` scale.
pub const DEFAULT_TAU: f32 = 0.05;
/// Guard inside `ln(1 - d + eps)`.
pub const ADV_EPS: f64 = 1e-6;
const PERCEPTUAL_SEED: u64 = 0x5eed_cafe;

#[derive(Clone, Debug, PartialEq)]
pub struct InitialSettings {
    pub channels: usize,
    pub attention_channels: usize,
    pub attention_steps: usize,
}

impl Default for InitialSettings {
    fn default() -> Self {
        Self {
            channels: 16,
            attention_channels: 8,
            attention_steps: 3,
        }
    }
}

/// Generator, attention branch and patch discriminator weights.
#[derive(Clone, Debug, PartialEq)]
pub struct InitialNet {
    pub settings: InitialSettings,
    /// `att.*` and `gen.*` entries.
    pub params: ParamStore,
    /// `disc.*` entries.
    pub disc: ParamStore,
}

impl InitialNet {
    /// The output layer starts at zero, so a fresh network is the identity.
    pub fn new(settings: InitialSettings, seed: u64) -> Self {
        let (c, ca) = (settings.channels, settings.attention_channels);
        let mut params = ParamStore::new();
        let mut init = Init::new(seed);
        init.conv2d(&mut params, "att.conv_h", ca, 4 + ca, 3);
        init.conv2d(&mut params, "att.conv_a", 1, ca, 3);
        init.conv2d(&mut params, "gen.e1", c, 4, 3);
        init.conv2d(&mut params, "gen.e2", 2 * c, c, 3);
        init.conv2d(&mut params, "gen.mid", 2 * c, 2 * c, 3);
        init.conv2d(&mut params, "gen.d1", c, 3 * c, 3);
        init.conv2d_zero(&mut params, "gen.out", 3, c, 3);
        let mut disc = ParamStore::new();
        init.conv2d(&mut disc, "disc.c1", 8, 3, 3);
        init.conv2d(&mut disc, "disc.c2", 16, 8, 3);
        init.conv2d(&mut disc, "disc.c3", 1, 16, 3);
        Self {
            settings,
            params,
            disc,
        }
    }

    /// Returns `(S, A)` for a `[N, 3, H, W]` input: the restored batch and
    /// the final attention map `[N, 1, H, W]`.
    pub fn forward_graph(&self, g: &mut Graph<f32>, b: &Bound, x: Var) -> (Var, Var) {
        let s = g.shape(x).to_vec();
        let (n, h, w) = (s[0], s[2], s[3]);
        let ca = self.settings.attention_channels;
        let mut att = g.constant(Tensor::full(&[n, 1, h, w], 0.5));
        let mut hid = g.constant(Tensor::zeros(&[n, ca, h, w]));
        for _ in 0..self.settings.attention_steps.max(1) {
            let inp = g.concat_channels(&[x, att, hid]);
            let hh = b.conv2d(g, "att.conv_h", inp, 1, 1);
            hid = g.leaky_relu(hh, 0.1);
            let a = b.conv2d(g, "att.conv_a", hid, 1, 1);
            att = g.sigmoid(a);
        }
        let inp = g.concat_channels(&[x, att]);
        let e1 = b.conv2d(g, "gen.e1", inp, 1, 1);
        let e1 = g.leaky_relu(e1, 0.1);
        let e2 = b.conv2d(g, "gen.e2", e1, 2, 1);
        let e2 = g.leaky_relu(e2, 0.1);
        let m = b.conv2d(g, "gen.mid", e2, 1, 1);
        let m = g.leaky_relu(m, 0.1);
        let up = g.upsample_nearest(m, 2);
        let cat = g.concat_channels(&[up, e1]);
        let d1 = b.conv2d(g, "gen.d1", cat, 1, 1);
        let d1 = g.leaky_relu(d1, 0.1);
        let delta = b.conv2d(g, "gen.out", d1, 1, 1);
        let gated = g.mul_channel_broadcast(delta, att);
        let out = g.add(x, gated);
        (g.clamp(out, 0.0, 1.0), att)
    }

    /// Patch discriminator score in `(0, 1)`, averaged over patches.
    pub fn disc_graph(&self, g: &mut Graph<f32>, b: &Bound, x: Var) -> Var {
        let h = b.conv2d(g, "disc.c1", x, 2, 1);
        let h = g.leaky_relu(h, 0.2);
        let h = b.conv2d(g, "disc.c2", h, 2, 1);
        let h = g.leaky_relu(h, 0.2);
        let h = b.conv2d(g, "disc.c3", h, 1, 1);
        let p = g.sigmoid(h);
        g.mean(p)
    }

    /// Gradient-free restoration of a `[N, 3, H, W]` batch.
    pub fn restore_batch(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Shape(format!("expected [N, 3, H, W], got {s:?}")));
        }
        check_stride(s[2], s[3])?;
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let (out, _) = self.forward_graph(&mut g, &b, xv);
        Ok(g.value(out).clone())
    }

    /// `S_t` for one frame.
    pub fn restore_single(&self, frame: &Frame) -> Result<Frame> {
        if frame.channels() != 3 {
            return Err(Error::Shape(format!(
                "network expects 3 channels, got {}",
                frame.channels()
            )));
        }
        let out = self.restore_batch(&frame.to_batch())?;
        Frame::new(out.reshape(frame.pixels.shape())?, frame.time_index)
    }
}

/// `M = mean_c |I - S|`, thresholded into a non-raindrop weight.
pub fn compute_mask(i_t: &Frame, s_t: &Frame, tau: f32) -> Result<RaindropMask> {
    compute_mask_with(i_t, s_t, tau, MaskMode::Hard)
}

pub fn compute_mask_with(i_t: &Frame, s_t: &Frame, tau: f32, mode: MaskMode) -> Result<RaindropMask> {
    if i_t.pixels.shape() != s_t.pixels.shape() {
        return Err(Error::Shape(format!(
            "mask inputs differ: {:?} vs {:?}",
            i_t.pixels.shape(),
            s_t.pixels.shape()
        )));
    }
    Ok(RaindropMask::from_evidence(
        channel_mean_abs_diff(&i_t.pixels, &s_t.pixels),
        tau,
        mode,
    ))
}

/// `1 x H x W` channel mean of `|a - b|` for `C x H x W` inputs.
pub fn channel_mean_abs_diff(a: &Tensor<f32>, b: &Tensor<f32>) -> Tensor<f32> {
    let (c, h, w) = (a.dim(0), a.dim(1), a.dim(2));
    let p = h * w;
    let mut out = vec![0.0f32; p];
    for ci in 0..c {
        for (o, (x, y)) in out
            .iter_mut()
            .zip(a.data()[ci * p..(ci + 1) * p].iter().zip(&b.data()[ci * p..(ci + 1) * p]))
        {
            *o += (x - y).abs();
        }
    }
    let inv = 1.0 / c as f32;
    out.iter_mut().for_each(|v| *v *= inv);
    Tensor::from_vec(&[1, h, w], out).unwrap()
}

/// Frozen, randomly initialised feature extractor for the perceptual term.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualExtractor {
    pub params: ParamStore,
}

impl Default for PerceptualExtractor {
    fn default() -> Self {
        let mut params = ParamStore::new();
        let mut init = Init::new(PERCEPTUAL_SEED);
        init.conv2d(&mut params, "perc.c1", 8, 3, 3);
        init.conv2d(&mut params, "perc.c2", 16, 8, 3);
        Self { params }
    }
}

impl PerceptualExtractor {
    pub fn graph(&self, g: &mut Graph<f32>, b: &Bound, x: Var) -> Var {
        let h = b.conv2d(g, "perc.c1", x, 1, 1);
        let h = g.relu(h);
        let h = b.conv2d(g, "perc.c2", h, 2, 1);
        g.relu(h)
    }

    pub fn features(&self, f: &Frame) -> FeatureMap {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let x = g.constant(f.to_batch());
        let out = self.graph(&mut g, &b, x);
        let v = g.value(out);
        FeatureMap {
            activations: v.clone().reshape(&v.shape()[1..]).unwrap(),
            time_index: f.time_index,
        }
    }
}

/// Separate terms of the stage-one loss and their unweighted sum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SingleImageLoss {
    pub pixel: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub total: f64,
}

/// Graph form: `(pixel, perceptual, adversarial)` with element-count
/// normalised squared errors and `ln(1 - d + eps)`.
pub fn single_image_loss_graph<T: Real>(
    g: &mut Graph<T>,
    target: Var,
    restored: Var,
    disc_score: Var,
    feat_target: Var,
    feat_restored: Var,
) -> (Var, Var, Var) {
    let pixel = g.mse(restored, target);
    let perceptual = g.mse(feat_restored, feat_target);
    let neg = g.scale(disc_score, -T::one());
    let one_minus = g.add_scalar(neg, T::one() + T::c(ADV_EPS));
    let adv = g.ln(one_minus);
    (pixel, perceptual, adv)
}

pub fn single_image_loss(
    i_gt: &Frame,
    s_t: &Frame,
    disc_score: f64,
    feat_gt: &FeatureMap,
    feat_s: &FeatureMap,
) -> Result<SingleImageLoss> {
    if i_gt.pixels.shape() != s_t.pixels.shape() {
        return Err(Error::Shape("stage-one loss: frame shapes differ".into()));
    }
    if feat_gt.activations.shape() != feat_s.activations.shape() {
        return Err(Error::Shape("stage-one loss: feature shapes differ".into()));
    }
    if !(0.0..=1.0).contains(&disc_score) {
        return Err(Error::Invalid(format!(
            "discriminator score {disc_score} outside [0, 1]"
        )));
    }
    let mut g = Graph::<f64>::new();
    let a = g.constant(i_gt.pixels.cast());
    let b = g.constant(s_t.pixels.cast());
    let d = g.constant(Tensor::scalar(disc_score));
    let fa = g.constant(feat_gt.activations.cast());
    let fb = g.constant(feat_s.activations.cast());
    let (p, q, r) = single_image_loss_graph(&mut g, a, b, d, fa, fb);
    let (pixel, perceptual, adversarial) = (g.value(p).item(), g.value(q).item(), g.value(r).item());
    Ok(SingleImageLoss {
        pixel,
        perceptual,
        adversarial,
        total: pixel + perceptual + adversarial,
    })
}
