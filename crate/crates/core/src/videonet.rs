//! Stage two: warp neighbours to the current step, align their features
//! with deformable convolution, and decode the current frame from the
//! neighbour features alone.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{check_stride, AlignEncoder, AlignSettings};
use crate::error::{Error, Result};
use crate::flow::{FlowEstimator, FlowPairing};
use crate::graph::{Graph, Var};
use crate::initial::{compute_mask_with, InitialNet};
use crate::nn::{Bound, Init, ParamStore};
use crate::tensor::Tensor;
use crate::types::{FeatureMap, FlowField, Frame, MaskMode, RaindropMask, VideoClip, ENCODER_STRIDE};

const SLOPE: f32 = 0.1;
const LOGIT_EPS: f32 = 1e-3;

/// Structural switches mirroring the ablation study.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Non-raindrop weight is 1 everywhere.
    pub no_mask: bool,
    /// Stage two sees the raw rainy frames instead of stage-one results.
    pub no_initialnet: bool,
    /// No flow warping of the inputs and zero deformable offsets.
    pub no_alignment: bool,
    /// Temporal consistency weight is 0.
    pub no_temporal: bool,
}

impl Ablation {
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.no_mask {
            parts.push("no-mask");
        }
        if self.no_initialnet {
            parts.push("no-initialnet");
        }
        if self.no_alignment {
            parts.push("no-alignment");
        }
        if self.no_temporal {
            parts.push("no-temporal");
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderSettings {
    pub feat_channels: usize,
    pub hidden_channels: usize,
    /// Adds the logit of the mean warped neighbour before the output sigmoid.
    pub residual: bool,
}

impl DecoderSettings {
    pub fn for_features(feat_channels: usize) -> Self {
        Self {
            feat_channels,
            hidden_channels: (feat_channels / 2).max(4),
            residual: true,
        }
    }
}

/// 3-d temporal reduction, two nearest-neighbour upsampling stages and an
/// RGB head.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub settings: DecoderSettings,
    pub params: ParamStore,
}

impl Decoder {
    pub fn new(settings: DecoderSettings, seed: u64) -> Self {
        let (c, hd) = (settings.feat_channels, settings.hidden_channels);
        let mut params = ParamStore::new();
        let mut init = Init::new(seed);
        init.conv3d(&mut params, "dec.t1", c, c, [3, 3, 3]);
        init.conv3d(&mut params, "dec.t2", c, c, [2, 3, 3]);
        init.conv2d(&mut params, "dec.up1", hd, c, 3);
        init.conv2d(&mut params, "dec.up2", hd, hd, 3);
        init.conv2d_zero(&mut params, "dec.head", 3, hd, 3);
        Self { settings, params }
    }

    /// `aligned` holds the four neighbour features in temporal order; `base`
    /// is the optional full-resolution residual image.
    pub fn decode_graph(&self, g: &mut Graph<f32>, b: &Bound, aligned: &[Var], base: Option<Var>) -> Var {
        let stacked = g.stack_depth(aligned);
        let h = b.conv3d(g, "dec.t1", stacked, [0, 1, 1]);
        let h = g.leaky_relu(h, SLOPE);
        let h = b.conv3d(g, "dec.t2", h, [0, 1, 1]);
        let h = g.leaky_relu(h, SLOPE);
        let s = g.shape(h).to_vec();
        let flat = g.reshape(h, &[s[0], s[1] * s[2], s[3], s[4]]);
        let u = g.upsample_nearest(flat, 2);
        let u = b.conv2d(g, "dec.up1", u, 1, 1);
        let u = g.leaky_relu(u, SLOPE);
        let u = g.upsample_nearest(u, 2);
        let u = b.conv2d(g, "dec.up2", u, 1, 1);
        let u = g.leaky_relu(u, SLOPE);
        let mut logits = b.conv2d(g, "dec.head", u, 1, 1);
        if let Some(base) = base {
            let l = g.logit(base, LOGIT_EPS);
            logits = g.add(logits, l);
        }
        g.sigmoid(logits)
    }

    /// Decodes the current frame from four aligned neighbour feature maps
    /// ordered `t-2, t-1, t+1, t+2`.
    pub fn decode(&self, aligned: &[FeatureMap]) -> Result<Frame> {
        if aligned.len() != 4 {
            return Err(Error::Window(format!(
                "decoder needs 4 neighbour feature maps, got {}",
                aligned.len()
            )));
        }
        let t0 = aligned[0].time_index;
        let steps: Vec<i64> = aligned.iter().map(|f| f.time_index - t0).collect();
        if steps != [0, 1, 3, 4] {
            return Err(Error::Window(format!(
                "neighbour features must be at t-2, t-1, t+1, t+2; got offsets {steps:?}"
            )));
        }
        let shape = aligned[0].activations.shape().to_vec();
        if shape.len() != 3 || shape[0] != self.settings.feat_channels {
            return Err(Error::Shape(format!(
                "feature maps {shape:?} do not have {} channels",
                self.settings.feat_channels
            )));
        }
        if aligned.iter().any(|f| f.activations.shape() != &shape[..]) {
            return Err(Error::Shape("neighbour feature maps differ in shape".into()));
        }
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let vars: Vec<Var> = aligned
            .iter()
            .map(|f| {
                let t = f.activations.clone().reshape(&[1, shape[0], shape[1], shape[2]]).unwrap();
                g.constant(t)
            })
            .collect();
        let out = self.decode_graph(&mut g, &b, &vars, None);
        let v = g.value(out).clone();
        let s = v.shape().to_vec();
        Frame::new(v.reshape(&s[1..])?, t0 + 2)
    }
}

/// Where stage two takes its flows from.
pub enum FlowSource<'a> {
    /// Run the estimator inside the graph.
    Estimate(&'a Bound),
    /// Precomputed `[N, 2, H, W]` flows `F(i -> t)`, one per neighbour.
    Given(&'a [Tensor<f32>]),
}

/// Graph handles produced by one window forward pass.
pub struct WindowOutput {
    pub output: Var,
    /// `F(i -> t)` for each neighbour, in window order.
    pub flows: Vec<Var>,
    pub warped: Vec<Var>,
}

/// Multi-frame module: flow estimator, feature alignment and decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoNet {
    pub flow: FlowEstimator,
    pub align: AlignEncoder,
    pub decoder: Decoder,
    pub window_radius: usize,
    pub pairing: FlowPairing,
    pub ablation: Ablation,
    pub tau: f32,
    pub mask_mode: MaskMode,
}

/// Stage-one products for a clip.
#[derive(Clone, Debug, PartialEq)]
pub struct StageOne {
    pub initial: Vec<Frame>,
    pub masks: Vec<RaindropMask>,
}

/// Everything a single window forward produces.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub output: Frame,
    /// Initial results of the `2s + 1` window frames.
    pub initial: Vec<Frame>,
    pub masks: Vec<RaindropMask>,
    /// `F(i -> t)` for the `2s` neighbours.
    pub flows: Vec<FlowField>,
    /// True when the window was completed by reflection at a clip edge.
    pub reflected: bool,
}

/// Clip indices of the window centred on `t`. With `reflect`, indices past
/// either end are mirrored back into the clip.
pub fn window_indices(len: usize, t: usize, s: usize, reflect: bool) -> Result<(Vec<usize>, bool)> {
    if t >= len {
        return Err(Error::Window(format!("frame {t} outside clip of {len}")));
    }
    let mut out = Vec::with_capacity(2 * s + 1);
    let mut reflected = false;
    for d in -(s as isize)..=(s as isize) {
        let i = t as isize + d;
        let last = len as isize - 1;
        if (0..=last).contains(&i) {
            out.push(i as usize);
            continue;
        }
        if !reflect {
            return Err(Error::Window(format!(
                "window of radius {s} around frame {t} leaves the clip [0, {last}]; \
                 boundary frames need reflection"
            )));
        }
        let r = if i < 0 { -i } else { 2 * last - i };
        if !(0..=last).contains(&r) {
            return Err(Error::Window(format!("clip of {len} frames too short for radius {s}")));
        }
        reflected = true;
        out.push(r as usize);
    }
    Ok((out, reflected))
}

impl VideoNet {
    pub fn new(flow: FlowEstimator, align: AlignSettings, seed: u64) -> Self {
        let dec = DecoderSettings::for_features(align.feat_channels);
        Self {
            flow,
            align: AlignEncoder::new(align, seed),
            decoder: Decoder::new(dec, seed.wrapping_add(1)),
            window_radius: 2,
            pairing: FlowPairing::default(),
            ablation: Ablation::default(),
            tau: crate::initial::DEFAULT_TAU,
            mask_mode: MaskMode::Hard,
        }
    }

    /// Trainable alignment and decoder parameters under one store.
    pub fn trainable_params(&self) -> ParamStore {
        let mut p = ParamStore::new();
        p.merge_prefixed("align", &self.align.params);
        p.merge_prefixed("decoder", &self.decoder.params);
        p
    }

    pub fn set_trainable_params(&mut self, p: &ParamStore) {
        self.align.params = p.extract_prefixed("align");
        self.decoder.params = p.extract_prefixed("decoder");
    }

    /// Runs stage one on every frame (or passes frames through when the
    /// stage is ablated) and derives the masks.
    pub fn stage_one(&self, initial: &InitialNet, clip: &VideoClip) -> Result<StageOne> {
        let mut s = Vec::with_capacity(clip.len());
        let mut m = Vec::with_capacity(clip.len());
        for f in &clip.frames {
            let si = if self.ablation.no_initialnet {
                f.clone()
            } else {
                initial.restore_single(f)?
            };
            let mask = if self.ablation.no_mask {
                RaindropMask::keep_all(f.height(), f.width())
            } else {
                compute_mask_with(f, &si, self.tau, self.mask_mode)?
            };
            s.push(si);
            m.push(mask);
        }
        Ok(StageOne { initial: s, masks: m })
    }

    fn flow_target<'a>(&self, rainy: &'a Tensor<f32>, initial: &'a Tensor<f32>) -> &'a Tensor<f32> {
        match self.pairing {
            FlowPairing::InitialToRainy => rainy,
            FlowPairing::InitialToInitial => initial,
        }
    }

    /// Flow `F(src -> dst)` on the graph, from initial result `src` to the
    /// pairing target of `dst`.
    pub fn flow_graph(
        &self,
        g: &mut Graph<f32>,
        bound: &Bound,
        initial_src: &Tensor<f32>,
        rainy_dst: &Tensor<f32>,
        initial_dst: &Tensor<f32>,
    ) -> Result<Var> {
        let tgt = self.flow_target(rainy_dst, initial_dst);
        self.flow.forward(g, bound, initial_src, tgt)
    }

    /// Gradient-free flow `F(src -> dst)`.
    pub fn flow_value(
        &self,
        initial_src: &Tensor<f32>,
        rainy_dst: &Tensor<f32>,
        initial_dst: &Tensor<f32>,
    ) -> Result<Tensor<f32>> {
        self.flow
            .estimate_batch(initial_src, self.flow_target(rainy_dst, initial_dst))
    }

    /// One window on the graph. `rainy` and `initial` hold `2s + 1` batches
    /// `[N, 3, H, W]` in temporal order; the centre is index `s`.
    pub fn forward_window(
        &self,
        g: &mut Graph<f32>,
        align: &Bound,
        dec: &Bound,
        rainy: &[Tensor<f32>],
        initial: &[Tensor<f32>],
        flows: FlowSource<'_>,
    ) -> Result<WindowOutput> {
        let s = self.window_radius;
        if rainy.len() != 2 * s + 1 || initial.len() != rainy.len() {
            return Err(Error::Window(format!(
                "window needs {} frames, got {} rainy and {} initial",
                2 * s + 1,
                rainy.len(),
                initial.len()
            )));
        }
        let shape = rainy[s].shape().to_vec();
        check_stride(shape[2], shape[3])?;
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        let neighbours: Vec<usize> = (0..rainy.len()).filter(|&i| i != s).collect();
        if let FlowSource::Given(f) = &flows {
            if f.len() != neighbours.len() {
                return Err(Error::Window(format!(
                    "expected {} flows, got {}",
                    neighbours.len(),
                    f.len()
                )));
            }
        }

        let i_t = g.constant(rainy[s].clone());
        let f_t = self.align.encode_graph(g, align, i_t);
        let (fh, fw) = (h / ENCODER_STRIDE, w / ENCODER_STRIDE);
        let taps = self.align.taps();

        let mut flow_vars = Vec::with_capacity(neighbours.len());
        let mut warped = Vec::with_capacity(neighbours.len());
        let mut aligned = Vec::with_capacity(neighbours.len());
        for (k, &i) in neighbours.iter().enumerate() {
            let s_i = g.constant(initial[i].clone());
            let flow = if self.ablation.no_alignment {
                g.constant(Tensor::zeros(&[n, 2, h, w]))
            } else {
                match &flows {
                    FlowSource::Estimate(fb) => {
                        self.flow_graph(g, fb, &initial[i], &rainy[s], &initial[s])?
                    }
                    FlowSource::Given(f) => g.constant(f[k].clone()),
                }
            };
            let wi = if self.ablation.no_alignment {
                s_i
            } else {
                g.warp(s_i, flow)
            };
            let f_i = self.align.encode_graph(g, align, wi);
            let theta = if self.ablation.no_alignment {
                g.constant(Tensor::zeros(&[n, 2 * taps, fh, fw]))
            } else {
                self.align.offsets_graph(g, align, f_i, f_t)
            };
            let a = self.align.deform_graph(g, align, f_i, theta);
            aligned.push(g.leaky_relu(a, SLOPE));
            flow_vars.push(flow);
            warped.push(wi);
        }
        let base = if self.decoder.settings.residual {
            let weights = in_frame_weights(g, &flow_vars);
            let parts: Vec<Var> = warped
                .iter()
                .zip(weights)
                .map(|(&wi, m)| {
                    let m = g.constant(m);
                    g.mul_channel_broadcast(wi, m)
                })
                .collect();
            Some(g.add_n(&parts))
        } else {
            None
        };
        let output = self.decoder.decode_graph(g, dec, &aligned, base);
        Ok(WindowOutput {
            output,
            flows: flow_vars,
            warped,
        })
    }

    /// Restores clip frame `t` from precomputed stage-one products. Windows
    /// that leave the clip are an error unless `reflect` is set.
    pub fn forward_frame(
        &self,
        clip: &VideoClip,
        stage1: &StageOne,
        t: usize,
        reflect: bool,
    ) -> Result<ForwardOutput> {
        let s = self.window_radius;
        let (idx, reflected) = window_indices(clip.len(), t, s, reflect)?;
        for f in &clip.frames {
            check_stride(f.height(), f.width())?;
        }
        let rainy: Vec<Tensor<f32>> = idx.iter().map(|&i| clip.frames[i].to_batch()).collect();
        let initial: Vec<Tensor<f32>> = idx.iter().map(|&i| stage1.initial[i].to_batch()).collect();
        let mut g = Graph::new();
        let ab = self.align.params.bind(&mut g, false);
        let db = self.decoder.params.bind(&mut g, false);
        let fb = self.flow.params.bind(&mut g, false);
        let out = self.forward_window(&mut g, &ab, &db, &rainy, &initial, FlowSource::Estimate(&fb))?;
        let (h, w) = (clip.frames[t].height(), clip.frames[t].width());
        let t_idx = clip.frames[t].time_index;
        let output = Frame::new(g.value(out.output).clone().reshape(&[3, h, w])?, t_idx)?;
        let neighbours: Vec<usize> = idx
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != s)
            .map(|(_, &i)| i)
            .collect();
        let flows = out
            .flows
            .iter()
            .zip(&neighbours)
            .map(|(&f, &i)| {
                FlowField::new(
                    g.value(f).clone().reshape(&[2, h, w])?,
                    clip.frames[i].time_index,
                    t_idx,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ForwardOutput {
            output,
            initial: idx.iter().map(|&i| stage1.initial[i].clone()).collect(),
            masks: idx.iter().map(|&i| stage1.masks[i].clone()).collect(),
            flows,
            reflected,
        })
    }
}

/// `[N, 1, H, W]` indicator of pixels whose warp sample `p + flow(p)` lies
/// inside the frame, for a `[N, 2, H, W]` flow.
pub fn in_frame_mask(flow: &Tensor<f32>) -> Tensor<f32> {
    let s = flow.shape();
    let (n, h, w) = (s[0], s[2], s[3]);
    let plane = h * w;
    let d = flow.data();
    let mut v = vec![0.0f32; n * plane];
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let sx = x as f32 + d[(ni * 2) * plane + i];
                let sy = y as f32 + d[(ni * 2 + 1) * plane + i];
                if (0.0..=(w - 1) as f32).contains(&sx) && (0.0..=(h - 1) as f32).contains(&sy) {
                    v[ni * plane + i] = 1.0;
                }
            }
        }
    }
    Tensor::from_vec(&[n, 1, h, w], v).expect("mask shape")
}

/// Per-neighbour averaging weights for the residual base: neighbours whose
/// warp samples fall outside the frame are left out, and pixels with no
/// in-frame neighbour fall back to the plain mean.
fn in_frame_weights(g: &Graph<f32>, flows: &[Var]) -> Vec<Tensor<f32>> {
    let valid: Vec<Tensor<f32>> = flows.iter().map(|&f| in_frame_mask(g.value(f))).collect();
    let k = valid.len();
    let len = valid[0].len();
    let mut out: Vec<Tensor<f32>> = valid.iter().map(|v| Tensor::zeros(v.shape())).collect();
    for i in 0..len {
        let total: f32 = valid.iter().map(|v| v.data()[i]).sum();
        for j in 0..k {
            out[j].data_mut()[i] = if total > 0.0 { valid[j].data()[i] / total } else { 1.0 / k as f32 };
        }
    }
    out
}

/// Restores every frame of a clip, reflecting windows at the clip edges.
/// Frames are processed in parallel on the current rayon pool.
pub fn restore_clip(clip: &VideoClip, initial: &InitialNet, net: &VideoNet) -> Result<(StageOne, Vec<ForwardOutput>)> {
    let stage1 = net.stage_one(initial, clip)?;
    let outs = (0..clip.len())
        .into_par_iter()
        .map(|t| net.forward_frame(clip, &stage1, t, true))
        .collect::<Result<Vec<_>>>()?;
    Ok((stage1, outs))
}

/// Full stage-two forward for clip frame `t`; `t` must have a complete
/// window inside the clip.
pub fn videonet_forward(
    clip: &VideoClip,
    t: usize,
    initial: &InitialNet,
    net: &VideoNet,
) -> Result<ForwardOutput> {
    let s = net.window_radius;
    if clip.window_radius != s {
        return Err(Error::Window(format!(
            "clip window radius {} differs from model radius {s}",
            clip.window_radius
        )));
    }
    window_indices(clip.len(), t, s, false)?;
    let stage1 = net.stage_one(initial, clip)?;
    net.forward_frame(clip, &stage1, t, false)
}
