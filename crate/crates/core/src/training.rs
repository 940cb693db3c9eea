//! Training schedules: supervised stage one on paired frames, then
//! self-supervised stage two on rainy clips with stage one frozen.

use std::collections::HashMap;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::AlignSettings;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::flow::{masked_flow_finetune_graph, FlowEstimator, FlowSettings};
use crate::graph::{Graph, Var};
use crate::initial::{channel_mean_abs_diff, single_image_loss_graph, InitialNet, InitialSettings, PerceptualExtractor, ADV_EPS};
use crate::losses::{mask_consistency_graph, mask_correlation_graph, temporal_consistency_graph, LossRecord};
use crate::nn::{Adam, Bound, GradMap, ParamStore};
use crate::tensor::Tensor;
use crate::types::{Frame, LossReport, VideoClip, ENCODER_STRIDE};
use crate::videonet::{in_frame_mask, window_indices, FlowSource, StageOne, VideoNet};

/// Rainy frames with their clean counterparts.
#[derive(Clone, Debug)]
pub struct PairedDataset {
    pairs: Vec<(Frame, Frame)>,
}

impl PairedDataset {
    pub fn new(rain: Vec<Frame>, clean: Vec<Frame>) -> Result<Self> {
        if rain.is_empty() {
            return Err(Error::Missing("paired dataset is empty".into()));
        }
        if rain.len() != clean.len() {
            return Err(Error::Mismatch(format!(
                "{} rainy frames but {} clean frames; stage one needs pairs",
                rain.len(),
                clean.len()
            )));
        }
        for (k, (r, c)) in rain.iter().zip(&clean).enumerate() {
            if r.pixels.shape() != c.pixels.shape() || r.channels() != 3 {
                return Err(Error::Mismatch(format!(
                    "pair {k}: rainy {:?} vs clean {:?}",
                    r.pixels.shape(),
                    c.pixels.shape()
                )));
            }
        }
        Ok(Self {
            pairs: rain.into_iter().zip(clean).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(Frame, Frame)] {
        &self.pairs
    }
}

/// Crop side lengths for frames of `h x w`: at most `crop`, a multiple of
/// the encoder stride.
fn crop_dims(crop: usize, h: usize, w: usize) -> Result<(usize, usize)> {
    let ch = crop.min(h) / ENCODER_STRIDE * ENCODER_STRIDE;
    let cw = crop.min(w) / ENCODER_STRIDE * ENCODER_STRIDE;
    if ch == 0 || cw == 0 {
        return Err(Error::Shape(format!("frames of {h}x{w} are too small to crop")));
    }
    Ok((ch, cw))
}

fn random_origin(rng: &mut ChaCha8Rng, h: usize, w: usize, ch: usize, cw: usize) -> (usize, usize) {
    (rng.random_range(0..=h - ch), rng.random_range(0..=w - cw))
}

/// Per-step stage-one losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Record {
    pub step: u64,
    pub pixel: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub attention: f64,
    pub total: f64,
    pub disc: f64,
}

impl Stage1Record {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serialises")
    }
}

pub struct Stage1Result {
    pub net: InitialNet,
    pub log: Vec<Stage1Record>,
}

pub fn new_initial_net(cfg: &TrainConfig) -> InitialNet {
    InitialNet::new(
        InitialSettings {
            channels: cfg.initial_channels,
            ..InitialSettings::default()
        },
        cfg.seed,
    )
}

/// Supervised training of the single-image network. The pixel, perceptual
/// and adversarial terms are weighted `1`, `perceptual_weight` and
/// `adversarial_weight`; the attention map is additionally pulled towards
/// the thresholded rainy/clean difference with `attention_weight`.
pub fn train_stage1(data: &PairedDataset, init: InitialNet, cfg: &TrainConfig) -> Result<Stage1Result> {
    cfg.validate()?;
    let mut net = init;
    let perc = PerceptualExtractor::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.lr_stage1);
    let mut opt_d = Adam::new(cfg.lr_disc);
    let mut log = Vec::with_capacity(cfg.max_steps as usize);
    for step in 0..cfg.max_steps {
        let mut rain = Vec::with_capacity(cfg.batch_size);
        let mut clean = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let (r, c) = &data.pairs[rng.random_range(0..data.len())];
            let (h, w) = (r.height(), r.width());
            let (ch, cw) = crop_dims(cfg.crop_size, h, w)?;
            let (y0, x0) = random_origin(&mut rng, h, w, ch, cw);
            rain.push(r.pixels.crop_hw(y0, x0, ch, cw));
            clean.push(c.pixels.crop_hw(y0, x0, ch, cw));
        }
        let target_att = Tensor::stack(
            &rain
                .iter()
                .zip(&clean)
                .map(|(r, c)| channel_mean_abs_diff(r, c).map(|e| if e >= cfg.tau { 1.0 } else { 0.0 }))
                .collect::<Vec<_>>(),
        )?;
        let rain = Tensor::stack(&rain)?;
        let clean = Tensor::stack(&clean)?;

        let mut g = Graph::new();
        let b = net.params.bind(&mut g, true);
        let x = g.constant(rain);
        let y = g.constant(clean.clone());
        let (s, a) = net.forward_graph(&mut g, &b, x);
        let pb = perc.params.bind(&mut g, false);
        let fy = perc.graph(&mut g, &pb, y);
        let fs = perc.graph(&mut g, &pb, s);
        let use_adv = cfg.adversarial_weight > 0.0;
        let d = if use_adv {
            let db = net.disc.bind(&mut g, false);
            net.disc_graph(&mut g, &db, s)
        } else {
            g.constant(Tensor::scalar(0.5))
        };
        let (pixel, perceptual, adv) = single_image_loss_graph(&mut g, y, s, d, fy, fs);
        let ta = g.constant(target_att);
        let att = g.mse(a, ta);
        let mut terms = vec![(pixel, 1.0), (perceptual, cfg.perceptual_weight as f32)];
        if use_adv {
            terms.push((adv, cfg.adversarial_weight as f32));
        }
        if cfg.attention_weight > 0.0 {
            terms.push((att, cfg.attention_weight as f32));
        }
        let total = g.weighted_sum(&terms);
        let mut grads = g.backward(total);
        let mut gm = b.gradients(&mut grads, &net.params);
        gm.clip_global_norm(cfg.grad_clip);
        opt.update(&mut net.params, &gm);

        let mut disc_loss = 0.0;
        if use_adv {
            let restored = g.value(s).clone();
            let mut gd = Graph::new();
            let db = net.disc.bind(&mut gd, true);
            let real = gd.constant(clean);
            let fake = gd.constant(restored);
            let dr = net.disc_graph(&mut gd, &db, real);
            let df = net.disc_graph(&mut gd, &db, fake);
            let lr_ = gd.add_scalar(dr, ADV_EPS as f32);
            let lr_ = gd.ln(lr_);
            let nf = gd.scale(df, -1.0);
            let lf = gd.add_scalar(nf, 1.0 + ADV_EPS as f32);
            let lf = gd.ln(lf);
            let dl = gd.weighted_sum(&[(lr_, -1.0), (lf, -1.0)]);
            disc_loss = gd.value(dl).item() as f64;
            let mut grads = gd.backward(dl);
            let mut gmd = db.gradients(&mut grads, &net.disc);
            gmd.clip_global_norm(cfg.grad_clip);
            opt_d.update(&mut net.disc, &gmd);
        }

        let rec = Stage1Record {
            step,
            pixel: g.value(pixel).item() as f64,
            perceptual: g.value(perceptual).item() as f64,
            adversarial: if use_adv { g.value(adv).item() as f64 } else { 0.0 },
            attention: g.value(att).item() as f64,
            total: g.value(total).item() as f64,
            disc: disc_loss,
        };
        if !rec.total.is_finite() {
            return Err(Error::NonFinite(format!("stage-one loss at step {step}")));
        }
        debug!("stage1 step {step}: {}", rec.to_json_line());
        log.push(rec);
    }
    info!("stage one finished after {} steps", cfg.max_steps);
    Ok(Stage1Result { net, log })
}

pub fn new_video_net(cfg: &TrainConfig) -> VideoNet {
    let flow = match cfg.flow_backend {
        crate::flow::FlowBackend::ToyTrainable => FlowEstimator::toy(
            FlowSettings {
                finetune_lr: cfg.lr_flow_finetune,
                pairing: cfg.flow_pairing,
                ..FlowSettings::default()
            },
            cfg.seed.wrapping_add(7),
        ),
        crate::flow::FlowBackend::PretrainedExternal => FlowEstimator::pretrained_external(),
    };
    let mut net = VideoNet::new(
        flow,
        AlignSettings {
            feat_channels: cfg.feat_channels,
            offset_bound: cfg.offset_bound,
            ..AlignSettings::default()
        },
        cfg.seed.wrapping_add(11),
    );
    net.window_radius = cfg.window_radius;
    net.pairing = cfg.flow_pairing;
    net.ablation = cfg.ablation();
    net.tau = cfg.tau;
    net.mask_mode = cfg.mask_mode;
    net
}

/// A clip with its frozen stage-one products.
pub struct PreparedClip {
    pub clip: VideoClip,
    pub stage1: StageOne,
}

pub fn prepare_clips(clips: &[VideoClip], stage1: &InitialNet, net: &VideoNet) -> Result<Vec<PreparedClip>> {
    if clips.is_empty() {
        return Err(Error::Missing("no training clips".into()));
    }
    clips
        .iter()
        .map(|c| {
            if c.len() < 2 * net.window_radius + 1 {
                return Err(Error::Window(format!(
                    "clip of {} frames is shorter than the {}-frame window",
                    c.len(),
                    2 * net.window_radius + 1
                )));
            }
            Ok(PreparedClip {
                clip: c.clone(),
                stage1: net.stage_one(stage1, c)?,
            })
        })
        .collect()
}

/// One training window: clip, centre frame and crop.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSample {
    pub clip: usize,
    pub t: usize,
    pub y0: usize,
    pub x0: usize,
}

/// Full-frame flows for a frozen estimator, computed on first use.
#[derive(Default)]
struct FlowCache {
    flows: HashMap<(usize, usize, usize), Tensor<f32>>,
}

impl FlowCache {
    fn get(&mut self, net: &VideoNet, data: &[PreparedClip], c: usize, src: usize, dst: usize) -> Result<&Tensor<f32>> {
        if !self.flows.contains_key(&(c, src, dst)) {
            let p = &data[c];
            let f = if src == dst {
                let f = &p.clip.frames[src];
                Tensor::zeros(&[1, 2, f.height(), f.width()])
            } else {
                net.flow_value(
                    &p.stage1.initial[src].to_batch(),
                    &p.clip.frames[dst].to_batch(),
                    &p.stage1.initial[dst].to_batch(),
                )?
            };
            self.flows.insert((c, src, dst), f);
        }
        Ok(&self.flows[&(c, src, dst)])
    }
}

/// Graph values of one stage-two loss evaluation.
struct Stage2Terms {
    flow: Option<Var>,
    mask_ct: Option<Var>,
    mask_cl: Option<Var>,
    temp: Option<Var>,
}

/// Bindings of the three parameter groups on one graph.
struct Binds {
    align: Bound,
    dec: Bound,
    flow: Bound,
    frozen: Option<(Bound, Bound)>,
}

struct Stage2Ctx<'a> {
    cfg: &'a TrainConfig,
    data: &'a [PreparedClip],
    ch: usize,
    cw: usize,
}

fn stack_crops(parts: impl Iterator<Item = Tensor<f32>>) -> Result<Tensor<f32>> {
    let v: Vec<Tensor<f32>> = parts.collect();
    Tensor::stack(&v)
}

impl Stage2Ctx<'_> {
    fn crop(&self, t: &Tensor<f32>, s: &WindowSample) -> Tensor<f32> {
        t.crop_hw(s.y0, s.x0, self.ch, self.cw)
    }

    fn frames(&self, batch: &[WindowSample], idx: &[Vec<usize>], pos: usize, initial: bool) -> Result<Tensor<f32>> {
        stack_crops(batch.iter().zip(idx).map(|(s, ix)| {
            let p = &self.data[s.clip];
            let f = if initial { &p.stage1.initial[ix[pos]] } else { &p.clip.frames[ix[pos]] };
            self.crop(&f.pixels, s)
        }))
    }

    fn weights(&self, batch: &[WindowSample], frame: &[usize]) -> Result<Tensor<f32>> {
        stack_crops(
            batch
                .iter()
                .zip(frame)
                .map(|(s, &i)| self.crop(&self.data[s.clip].stage1.masks[i].nonrain_weight, s)),
        )
    }

    /// Flows `F(src -> dst)` for each sample, cached or on the graph.
    fn flows(
        &self,
        g: &mut Graph<f32>,
        net: &VideoNet,
        binds: &Binds,
        cache: Option<&mut FlowCache>,
        batch: &[WindowSample],
        src: &[usize],
        dst: &[usize],
    ) -> Result<Var> {
        match cache {
            Some(cache) => {
                let mut parts = Vec::with_capacity(batch.len());
                for (k, s) in batch.iter().enumerate() {
                    let f = cache.get(net, self.data, s.clip, src[k], dst[k])?;
                    parts.push(self.crop(&f.index_first(0), s));
                }
                Ok(g.constant(Tensor::stack(&parts)?))
            }
            None => {
                let pick = |f: &dyn Fn(&PreparedClip, usize) -> Tensor<f32>, ix: &[usize]| {
                    stack_crops(batch.iter().zip(ix).map(|(s, &i)| self.crop(&f(&self.data[s.clip], i), s)))
                };
                let s_src = pick(&|p, i| p.stage1.initial[i].pixels.clone(), src)?;
                let i_dst = pick(&|p, i| p.clip.frames[i].pixels.clone(), dst)?;
                let s_dst = pick(&|p, i| p.stage1.initial[i].pixels.clone(), dst)?;
                net.flow_graph(g, &binds.flow, &s_src, &i_dst, &s_dst)
            }
        }
    }

    /// Output window centred on each sample's `centre[k]`.
    fn window(
        &self,
        g: &mut Graph<f32>,
        net: &VideoNet,
        binds: &Binds,
        cache: Option<&mut FlowCache>,
        batch: &[WindowSample],
        centre: &[usize],
        frozen: bool,
    ) -> Result<Var> {
        let s = net.window_radius;
        let idx: Vec<Vec<usize>> = batch
            .iter()
            .zip(centre)
            .map(|(b, &t)| window_indices(self.data[b.clip].clip.len(), t, s, true).map(|r| r.0))
            .collect::<Result<_>>()?;
        let rainy = (0..2 * s + 1)
            .map(|p| self.frames(batch, &idx, p, false))
            .collect::<Result<Vec<_>>>()?;
        let initial = (0..2 * s + 1)
            .map(|p| self.frames(batch, &idx, p, true))
            .collect::<Result<Vec<_>>>()?;
        let (ab, db) = match (&binds.frozen, frozen) {
            (Some((a, d)), true) => (a, d),
            _ => (&binds.align, &binds.dec),
        };
        let out = match cache {
            Some(cache) => {
                let mut flows = Vec::with_capacity(2 * s);
                for p in (0..2 * s + 1).filter(|&p| p != s) {
                    let mut parts = Vec::with_capacity(batch.len());
                    for (k, b) in batch.iter().enumerate() {
                        let f = cache.get(net, self.data, b.clip, idx[k][p], idx[k][s])?;
                        parts.push(self.crop(&f.index_first(0), b));
                    }
                    flows.push(Tensor::stack(&parts)?);
                }
                net.forward_window(g, ab, db, &rainy, &initial, FlowSource::Given(&flows))?
            }
            None => net.forward_window(g, ab, db, &rainy, &initial, FlowSource::Estimate(&binds.flow))?,
        };
        Ok(out.output)
    }

    fn terms(
        &self,
        g: &mut Graph<f32>,
        net: &VideoNet,
        binds: &Binds,
        mut cache: Option<&mut FlowCache>,
        batch: &[WindowSample],
    ) -> Result<Stage2Terms> {
        let cfg = self.cfg;
        let s = net.window_radius;
        let centres: Vec<usize> = batch.iter().map(|b| b.t).collect();
        let o_t = self.window(g, net, binds, cache.as_deref_mut(), batch, &centres, false)?;
        let idx: Vec<Vec<usize>> = batch
            .iter()
            .map(|b| window_indices(self.data[b.clip].clip.len(), b.t, s, true).map(|r| r.0))
            .collect::<Result<_>>()?;
        let i_t = self.frames(batch, &idx, s, false)?;
        let s_t = self.frames(batch, &idx, s, true)?;
        let use_temp = cfg.loss_temp && !cfg.no_temporal;

        let mut flow_items = Vec::new();
        let mut cl_items = Vec::new();
        let mut temp_items = Vec::new();
        for p in (0..2 * s + 1).filter(|&p| p != s) {
            let nb: Vec<usize> = idx.iter().map(|ix| ix[p]).collect();
            let f_t_i = self.flows(g, net, binds, cache.as_deref_mut(), batch, &centres, &nb)?;
            // Pixels whose warp sample leaves the frame have no correspondence.
            let w_i = self
                .weights(batch, &nb)?
                .zip_map(&in_frame_mask(g.value(f_t_i)), |a, b| a * b);
            if cfg.loss_flow {
                let s_i = g.constant(self.frames(batch, &idx, p, true)?);
                flow_items.push((s_i, f_t_i, w_i.clone()));
            }
            if cfg.loss_mask_cl {
                let i_i = g.constant(self.frames(batch, &idx, p, false)?);
                cl_items.push((i_i, f_t_i, w_i.clone()));
            }
            if use_temp {
                let o_i = self.window(g, net, binds, cache.as_deref_mut(), batch, &nb, cfg.stop_grad_neighbours)?;
                let o_i = if cfg.stop_grad_neighbours { g.detach(o_i) } else { o_i };
                temp_items.push((o_i, f_t_i, w_i));
            }
        }
        let flow = if cfg.loss_flow {
            let s_t = g.constant(s_t);
            Some(masked_flow_finetune_graph(g, s_t, &flow_items)?)
        } else {
            None
        };
        let mask_ct = if cfg.loss_mask_ct {
            let it = g.constant(i_t);
            let centre: Vec<usize> = idx.iter().map(|ix| ix[s]).collect();
            let w_t = self.weights(batch, &centre)?;
            Some(mask_consistency_graph(g, o_t, it, &w_t))
        } else {
            None
        };
        let mask_cl = if cfg.loss_mask_cl {
            Some(mask_correlation_graph(g, o_t, &cl_items)?)
        } else {
            None
        };
        let temp = if use_temp {
            Some(temporal_consistency_graph(g, o_t, &temp_items)?)
        } else {
            None
        };
        Ok(Stage2Terms {
            flow,
            mask_ct,
            mask_cl,
            temp,
        })
    }
}

fn effective_lambda(cfg: &TrainConfig) -> f64 {
    if cfg.no_temporal {
        0.0
    } else {
        cfg.lambda_t
    }
}

fn report(g: &Graph<f32>, t: &Stage2Terms, lambda_t: f64) -> Result<LossReport> {
    let v = |x: Option<Var>| x.map_or(0.0, |x| g.value(x).item() as f64);
    LossReport::new(v(t.flow), v(t.mask_ct), v(t.mask_cl), v(t.temp), lambda_t)
}

fn total_var(g: &mut Graph<f32>, t: &Stage2Terms, lambda_t: f64) -> Option<Var> {
    let mut terms = Vec::new();
    for x in [t.flow, t.mask_ct, t.mask_cl].into_iter().flatten() {
        terms.push((x, 1.0f32));
    }
    if let Some(x) = t.temp {
        if lambda_t > 0.0 {
            terms.push((x, lambda_t as f32));
        }
    }
    (!terms.is_empty()).then(|| g.weighted_sum(&terms))
}

pub struct Stage2Result {
    pub net: VideoNet,
    pub log: Vec<LossRecord>,
    /// Content hash of the stage-one parameters before and after training.
    pub stage1_hash: (String, String),
}

/// Draws `n` windows: a random clip, a centre with a complete window and a
/// crop shared by every frame of the window.
pub fn sample_windows(
    rng: &mut ChaCha8Rng,
    data: &[PreparedClip],
    radius: usize,
    crop: (usize, usize),
    n: usize,
) -> Vec<WindowSample> {
    (0..n)
        .map(|_| {
            let c = rng.random_range(0..data.len());
            let len = data[c].clip.len();
            let t = rng.random_range(radius..len - radius);
            let f = &data[c].clip.frames[0];
            let (y0, x0) = random_origin(rng, f.height(), f.width(), crop.0, crop.1);
            WindowSample { clip: c, t, y0, x0 }
        })
        .collect()
}

fn flow_trainable(cfg: &TrainConfig, net: &VideoNet) -> bool {
    cfg.flow_finetune
        && cfg.lr_flow_finetune > 0.0
        && net.flow.settings.backend == crate::flow::FlowBackend::ToyTrainable
}

fn crop_for(data: &[PreparedClip], cfg: &TrainConfig) -> Result<(usize, usize)> {
    let (mut h, mut w) = (usize::MAX, usize::MAX);
    for p in data {
        let f = &p.clip.frames[0];
        crate::align::check_stride(f.height(), f.width())?;
        h = h.min(f.height());
        w = w.min(f.width());
    }
    crop_dims(cfg.crop_size, h, w)
}

/// Loss of `net` on fixed windows, without updating anything.
pub fn evaluate_stage2(
    data: &[PreparedClip],
    net: &VideoNet,
    cfg: &TrainConfig,
    windows: &[WindowSample],
) -> Result<LossReport> {
    let (ch, cw) = crop_for(data, cfg)?;
    let ctx = Stage2Ctx { cfg, data, ch, cw };
    let mut g = Graph::new();
    let binds = Binds {
        align: net.align.params.bind(&mut g, false),
        dec: net.decoder.params.bind(&mut g, false),
        flow: net.flow.params.bind(&mut g, false),
        frozen: None,
    };
    let mut cache = FlowCache::default();
    let terms = ctx.terms(&mut g, net, &binds, Some(&mut cache), windows)?;
    report(&g, &terms, effective_lambda(cfg))
}

/// Self-supervised stage-two training. `stage1` is only read; its hash is
/// checked before and after.
pub fn train_stage2(
    clips: &[VideoClip],
    stage1: &InitialNet,
    init: VideoNet,
    cfg: &TrainConfig,
) -> Result<Stage2Result> {
    cfg.validate()?;
    let hash_of = |n: &InitialNet| {
        let mut p = ParamStore::new();
        p.merge_prefixed("net", &n.params);
        p.merge_prefixed("disc", &n.disc);
        p.content_hash()
    };
    let before = hash_of(stage1);
    let mut net = init;
    let data = prepare_clips(clips, stage1, &net)?;
    let (ch, cw) = crop_for(&data, cfg)?;
    let ctx = Stage2Ctx { cfg, data: &data, ch, cw };
    let train_flow = flow_trainable(cfg, &net);
    let mut cache = (!train_flow).then(FlowCache::default);
    let lambda_t = effective_lambda(cfg);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = net.trainable_params();
    let mut opt = Adam::new(cfg.lr_stage2);
    let mut opt_flow = Adam::new(cfg.lr_flow_finetune);
    let mut log = Vec::with_capacity(cfg.max_steps as usize);
    for step in 0..cfg.max_steps {
        let batch = sample_windows(&mut rng, &data, net.window_radius, (ch, cw), cfg.batch_size);
        let mut g = Graph::new();
        let frozen = cfg.stop_grad_neighbours.then(|| {
            (
                net.align.params.bind(&mut g, false),
                net.decoder.params.bind(&mut g, false),
            )
        });
        let binds = Binds {
            align: net.align.params.bind(&mut g, true),
            dec: net.decoder.params.bind(&mut g, true),
            flow: net.flow.params.bind(&mut g, train_flow),
            frozen,
        };
        let terms = ctx.terms(&mut g, &net, &binds, cache.as_mut(), &batch)?;
        let rep = report(&g, &terms, lambda_t)?;
        if let Some(total) = total_var(&mut g, &terms, lambda_t) {
            let mut grads = g.backward(total);
            let ga = binds.align.gradients(&mut grads, &net.align.params);
            let gd = binds.dec.gradients(&mut grads, &net.decoder.params);
            let mut gm = GradMap::default();
            for (k, v) in ga.0 {
                gm.0.insert(format!("align.{k}"), v);
            }
            for (k, v) in gd.0 {
                gm.0.insert(format!("decoder.{k}"), v);
            }
            if !gm.is_all_zero() {
                gm.clip_global_norm(cfg.grad_clip);
                opt.update(&mut store, &gm);
                net.set_trainable_params(&store);
            }
            if train_flow {
                let mut gf = binds.flow.gradients(&mut grads, &net.flow.params);
                if !gf.is_all_zero() {
                    gf.clip_global_norm(cfg.grad_clip);
                    opt_flow.update(&mut net.flow.params, &gf);
                }
            }
        }
        let rec = LossRecord::new(step, &rep);
        debug!("stage2 step {step}: {}", rec.to_json_line());
        log.push(rec);
    }
    let after = hash_of(stage1);
    if before != after {
        return Err(Error::Invalid("stage-one parameters changed during stage two".into()));
    }
    info!("stage two finished after {} steps", cfg.max_steps);
    Ok(Stage2Result {
        net,
        log,
        stage1_hash: (before, after),
    })
}
