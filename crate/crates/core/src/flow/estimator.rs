//! Pluggable optical-flow estimation.
//!
//! The self-contained backend is a three-level coarse-to-fine estimator: at
//! each pyramid level the upsampled coarse flow is improved by a few
//! windowed Lucas-Kanade iterations, then corrected by a small trainable
//! convolutional refiner whose last layer starts at zero. The refiners are
//! differentiable through the warp, so the estimator can be fine-tuned by the
//! stage-two losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::imgproc::{blur_plane, downsample2, gaussian_kernel};
use crate::nn::{Adam, Bound, Init, ParamStore};
use crate::sampling::Stencil;
use crate::tensor::Tensor;
use crate::types::{FlowField, Frame};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowBackend {
    /// Externally supplied pretrained network (not bundled).
    PretrainedExternal,
    /// Built-in coarse-to-fine estimator.
    ToyTrainable,
}

impl FlowBackend {
    pub fn name(self) -> &'static str {
        match self {
            FlowBackend::PretrainedExternal => "pretrained-external",
            FlowBackend::ToyTrainable => "toy-trainable",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pretrained-external" => Ok(FlowBackend::PretrainedExternal),
            "toy-trainable" => Ok(FlowBackend::ToyTrainable),
            other => Err(Error::Config(format!("unknown flow backend `{other}`"))),
        }
    }
}

/// Which images the flow between frames `i` and `j` is estimated from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowPairing {
    /// Initial result of `i` against the rainy frame `j`.
    #[default]
    InitialToRainy,
    /// Initial results of both frames.
    InitialToInitial,
}

impl FlowPairing {
    pub fn name(self) -> &'static str {
        match self {
            FlowPairing::InitialToRainy => "initial-to-rainy",
            FlowPairing::InitialToInitial => "initial-to-initial",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "initial-to-rainy" => Ok(FlowPairing::InitialToRainy),
            "initial-to-initial" => Ok(FlowPairing::InitialToInitial),
            other => Err(Error::Config(format!("unknown flow pairing `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowSettings {
    pub backend: FlowBackend,
    pub levels: usize,
    pub lk_iterations: usize,
    /// Gaussian integration window of the Lucas-Kanade normal equations.
    pub window_sigma: f64,
    /// Gaussian smoothing applied to the flow after each iteration.
    pub smooth_sigma: f64,
    pub regularization: f64,
    pub refiner_channels: usize,
    pub finetune_lr: f64,
    pub pairing: FlowPairing,
}

impl Default for FlowSettings {
    fn default() -> Self {
        Self {
            backend: FlowBackend::ToyTrainable,
            levels: 3,
            lk_iterations: 4,
            window_sigma: 2.0,
            smooth_sigma: 1.0,
            regularization: 1e-5,
            refiner_channels: 8,
            finetune_lr: 1e-7,
            pairing: FlowPairing::InitialToRainy,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowEstimator {
    pub settings: FlowSettings,
    pub params: ParamStore,
}

const FLOW_INPUT_SCALE: f32 = 0.25;

impl FlowEstimator {
    pub fn toy(settings: FlowSettings, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let mut init = Init::new(seed);
        let c = settings.refiner_channels;
        for l in 0..settings.levels {
            init.conv2d(&mut params, &format!("refine{l}.conv1"), c, 8, 3);
            init.conv2d_zero(&mut params, &format!("refine{l}.conv2"), 2, c, 3);
        }
        Self {
            settings: FlowSettings {
                backend: FlowBackend::ToyTrainable,
                ..settings
            },
            params,
        }
    }

    pub fn pretrained_external() -> Self {
        Self {
            settings: FlowSettings {
                backend: FlowBackend::PretrainedExternal,
                ..FlowSettings::default()
            },
            params: ParamStore::new(),
        }
    }

    fn check_backend(&self) -> Result<()> {
        match self.settings.backend {
            FlowBackend::ToyTrainable => Ok(()),
            FlowBackend::PretrainedExternal => Err(Error::Backend(
                "no pretrained external flow network is linked into this build; \
                 set `flow_backend = toy-trainable` to use the built-in estimator"
                    .into(),
            )),
        }
    }

    /// Flow `F(i -> j)` from an initial result `S_i` and a frame `I_j`.
    pub fn estimate_flow(&self, s_i: &Frame, i_j: &Frame) -> Result<FlowField> {
        if s_i.pixels.shape() != i_j.pixels.shape() {
            return Err(Error::Shape(format!(
                "flow inputs differ: {:?} vs {:?}",
                s_i.pixels.shape(),
                i_j.pixels.shape()
            )));
        }
        let out = self.estimate_batch(&s_i.to_batch(), &i_j.to_batch())?;
        let (h, w) = (s_i.height(), s_i.width());
        FlowField::new(
            out.reshape(&[2, h, w])?,
            s_i.time_index,
            i_j.time_index,
        )
    }

    /// Gradient-free estimate for `[N, 3, H, W]` batches.
    pub fn estimate_batch(&self, src: &Tensor<f32>, tgt: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let f = self.forward(&mut g, &bound, src, tgt)?;
        Ok(g.value(f).clone())
    }

    /// Builds the estimator on `g`; the result is a `[N, 2, H, W]` flow
    /// differentiable with respect to the bound refiner parameters.
    pub fn forward(
        &self,
        g: &mut Graph<f32>,
        bound: &Bound,
        src: &Tensor<f32>,
        tgt: &Tensor<f32>,
    ) -> Result<Var> {
        self.check_backend()?;
        let s = src.shape().to_vec();
        if s.len() != 4 || tgt.shape() != &s[..] {
            return Err(Error::Shape(format!(
                "flow inputs must be equal NCHW, got {:?} and {:?}",
                s,
                tgt.shape()
            )));
        }
        let levels = self.settings.levels.max(1);
        let pyr_src = pyramid(src, levels);
        let pyr_tgt = pyramid(tgt, levels);
        let window = gaussian_kernel(self.settings.window_sigma);
        let smooth = gaussian_kernel(self.settings.smooth_sigma);

        let mut flow: Option<Var> = None;
        for l in (0..levels).rev() {
            let (ls, lt) = (&pyr_src[l], &pyr_tgt[l]);
            let (n, h, w) = (ls.dim(0), ls.dim(2), ls.dim(3));
            let up = match flow {
                None => g.constant(Tensor::zeros(&[n, 2, h, w])),
                Some(f) => {
                    let u = g.upsample_nearest(f, 2);
                    let u = g.scale(u, 2.0);
                    if g.shape(u)[2] == h && g.shape(u)[3] == w {
                        u
                    } else {
                        // Odd parent sizes: pad by replication through a fresh constant.
                        let v = resize_flow_nearest(g.value(u), h, w);
                        g.constant(v)
                    }
                }
            };
            let mut refined = g.value(up).clone();
            for ni in 0..n {
                let a = gray(ls, ni);
                let b = gray(lt, ni);
                let fl = &mut refined.data_mut()[ni * 2 * h * w..(ni + 1) * 2 * h * w];
                lucas_kanade(
                    &a,
                    &b,
                    h,
                    w,
                    fl,
                    self.settings.lk_iterations,
                    &window,
                    &smooth,
                    self.settings.regularization as f32,
                );
            }
            let delta = refined.zip_map(g.value(up), |a, b| a - b);
            let delta = g.constant(delta);
            let lk = g.add(up, delta);

            let src_c = g.constant(ls.clone());
            let tgt_c = g.constant(lt.clone());
            let warped = g.warp(src_c, lk);
            let fin = g.scale(lk, FLOW_INPUT_SCALE);
            let x = g.concat_channels(&[tgt_c, warped, fin]);
            let hdn = bound.conv2d(g, &format!("refine{l}.conv1"), x, 1, 1);
            let hdn = g.leaky_relu(hdn, 0.1);
            let corr = bound.conv2d(g, &format!("refine{l}.conv2"), hdn, 1, 1);
            flow = Some(g.add(lk, corr));
        }
        let f = flow.expect("at least one level");
        let bound_mag = (s[2].max(s[3]) as f32) * 0.5;
        Ok(g.clamp(f, -bound_mag, bound_mag))
    }

    /// Self-supervised photometric training of the refiners on image pairs
    /// (`src`, `tgt`), minimising `|warp(src, F) - tgt|^2`. Returns the loss
    /// per step.
    pub fn warm_up(
        &mut self,
        pairs: &[(Tensor<f32>, Tensor<f32>)],
        steps: usize,
        lr: f64,
    ) -> Result<Vec<f64>> {
        self.check_backend()?;
        let mut opt = Adam::new(lr);
        let mut history = Vec::with_capacity(steps);
        for step in 0..steps {
            let (src, tgt) = &pairs[step % pairs.len()];
            let mut g = Graph::new();
            let bound = self.params.bind(&mut g, true);
            let f = self.forward(&mut g, &bound, src, tgt)?;
            let s = g.constant(src.clone());
            let t = g.constant(tgt.clone());
            let warped = g.warp(s, f);
            let loss = g.mse(warped, t);
            history.push(g.value(loss).item() as f64);
            let mut grads = g.backward(loss);
            let mut gm = bound.gradients(&mut grads, &self.params);
            gm.clip_global_norm(1.0);
            opt.update(&mut self.params, &gm);
        }
        Ok(history)
    }
}

fn pyramid(x: &Tensor<f32>, levels: usize) -> Vec<Tensor<f32>> {
    let mut out = vec![x.clone()];
    for _ in 1..levels {
        let prev = out.last().unwrap();
        let (n, c, h, w) = (prev.dim(0), prev.dim(1), prev.dim(2), prev.dim(3));
        if h < 4 || w < 4 {
            break;
        }
        let mut data = Vec::new();
        let (mut oh, mut ow) = (0, 0);
        for plane in prev.data().chunks(h * w).take(n * c) {
            let (d, a, b) = downsample2(plane, h, w);
            oh = a;
            ow = b;
            data.extend(d);
        }
        out.push(Tensor::from_vec(&[n, c, oh, ow], data).unwrap());
    }
    out
}

fn gray(x: &Tensor<f32>, n: usize) -> Vec<f32> {
    let (c, h, w) = (x.dim(1), x.dim(2), x.dim(3));
    let plane = h * w;
    let d = &x.data()[n * c * plane..(n + 1) * c * plane];
    (0..plane)
        .map(|i| (0..c).map(|ci| d[ci * plane + i]).sum::<f32>() / c as f32)
        .collect()
}

fn resize_flow_nearest(f: &Tensor<f32>, h: usize, w: usize) -> Tensor<f32> {
    let (n, fh, fw) = (f.dim(0), f.dim(2), f.dim(3));
    let mut out = vec![0.0; n * 2 * h * w];
    for nc in 0..n * 2 {
        for y in 0..h {
            for x in 0..w {
                out[(nc * h + y) * w + x] = f.data()[(nc * fh + y.min(fh - 1)) * fw + x.min(fw - 1)];
            }
        }
    }
    Tensor::from_vec(&[n, 2, h, w], out).unwrap()
}

/// Iterative windowed Lucas-Kanade: refines `flow` (x plane then y plane) so
/// that `src(p + flow(p)) ~ tgt(p)`.
#[allow(clippy::too_many_arguments)]
fn lucas_kanade(
    src: &[f32],
    tgt: &[f32],
    h: usize,
    w: usize,
    flow: &mut [f32],
    iterations: usize,
    window: &[f64],
    smooth: &[f64],
    reg: f32,
) {
    let plane = h * w;
    let mut warped = vec![0.0f32; plane];
    let mut prods = vec![vec![0.0f32; plane]; 5];
    for _ in 0..iterations {
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let st = Stencil::new(x as f32 + flow[p], y as f32 + flow[plane + p], h, w);
                warped[p] = st.sample(src);
            }
        }
        for y in 0..h {
            let (ym, yp) = (y.saturating_sub(1), (y + 1).min(h - 1));
            for x in 0..w {
                let (xm, xp) = (x.saturating_sub(1), (x + 1).min(w - 1));
                let p = y * w + x;
                let avg = |i: usize| 0.5 * (warped[i] + tgt[i]);
                let ix = 0.5 * (avg(y * w + xp) - avg(y * w + xm));
                let iy = 0.5 * (avg(yp * w + x) - avg(ym * w + x));
                let it = warped[p] - tgt[p];
                prods[0][p] = ix * ix;
                prods[1][p] = ix * iy;
                prods[2][p] = iy * iy;
                prods[3][p] = ix * it;
                prods[4][p] = iy * it;
            }
        }
        let sums: Vec<Vec<f32>> = prods.iter().map(|p| blur_plane(p, h, w, window)).collect();
        for p in 0..plane {
            let (sxx, sxy, syy) = (sums[0][p] + reg, sums[1][p], sums[2][p] + reg);
            let (sxt, syt) = (sums[3][p], sums[4][p]);
            let det = sxx * syy - sxy * sxy;
            if det <= 0.0 || !det.is_finite() {
                continue;
            }
            let mut du = -(syy * sxt - sxy * syt) / det;
            let mut dv = -(sxx * syt - sxy * sxt) / det;
            let m = (du * du + dv * dv).sqrt();
            if m > 1.0 {
                du /= m;
                dv /= m;
            }
            flow[p] += du;
            flow[plane + p] += dv;
        }
        let sx = blur_plane(&flow[..plane], h, w, smooth);
        let sy = blur_plane(&flow[plane..], h, w, smooth);
        flow[..plane].copy_from_slice(&sx);
        flow[plane..].copy_from_slice(&sy);
    }
}
