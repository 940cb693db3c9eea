//! Library-level acceptance checks. Each returns a one-line summary on
//! success or the first violation found.

#![allow(dead_code)]

use std::time::Instant;

use dropvid::align::deform_conv_tensor;
use dropvid::checkpoint::Checkpoint;
use dropvid::config::TrainConfig;
use dropvid::flow::{dvfl, masked_flow_finetune_graph, masked_flow_finetune_loss, warp_tensor};
use dropvid::graph::Graph;
use dropvid::initial::compute_mask;
use dropvid::losses::{
    mask_consistency_graph, mask_consistency_loss, mask_correlation_graph, mask_correlation_loss,
    temporal_consistency_graph, temporal_consistency_loss, total_graph, total_loss, LossWeights,
};
use dropvid::metrics::{parse_csv, psnr, psnr_from_mse, ssim, to_csv, CsvRow};
use dropvid::nn::ParamStore;
use dropvid::synth::{composite_drop, random_trajectories, synthesize_clip, toy_clip, RaindropShape, ToyClipSpec};
use dropvid::tensor::Tensor;
use dropvid::types::{MaskMode, DEFAULT_LAMBDA_T};
use dropvid::{FlowField, Frame, RaindropMask, VideoClip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::oracles::*;

pub type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)*) => {
        if !$cond {
            return Err(format!($($msg)*));
        }
    };
}

pub const DEFORM_DRAWS: usize = 50;
pub const DEFORM_TOL: f64 = 1e-5;
pub const DEFORM_BUDGET_S: f64 = 10.0;

/// Zero offsets reduce deformable convolution to a dense 3x3 convolution.
pub fn deform_zero_offset_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng(101);
    let mut worst = 0.0f64;
    for _ in 0..DEFORM_DRAWS {
        let x = random_tensor(&mut r, &[1, 4, 6, 6], -1.0, 1.0);
        let w = random_tensor(&mut r, &[4, 4, 3, 3], -1.0, 1.0);
        let b = random_tensor(&mut r, &[4], -1.0, 1.0);
        let (x32, w32, b32) = (x.cast::<f32>(), w.cast::<f32>(), b.cast::<f32>());
        let out = deform_conv_tensor(&x32, &Tensor::zeros(&[1, 18, 6, 6]), &w32, Some(&b32));
        let want = dense_conv3x3_replicate(&x32.cast(), &w32.cast(), &b32.cast::<f64>().into_data());
        for (a, e) in out.data().iter().zip(want) {
            worst = worst.max((*a as f64 - e).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(worst < DEFORM_TOL, "max abs diff {worst:e} >= {DEFORM_TOL:e}");
    ensure!(secs < DEFORM_BUDGET_S, "took {secs:.2}s, budget {DEFORM_BUDGET_S}s");
    Ok(format!("{DEFORM_DRAWS} draws, max abs diff {worst:.2e}, {secs:.3}s"))
}

pub const GRAD_CASES: usize = 20;
pub const GRAD_TOL: f64 = 1e-3;
pub const GRAD_STEP: f64 = 1e-6;
pub const GRAD_BUDGET_S: f64 = 60.0;

/// Flow whose samples land strictly inside the frame and away from
/// integer coordinates, so the bilinear kinks are out of reach of the
/// finite-difference step.
fn kink_free_flow(r: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f64> {
    let mut v = vec![0.0; 2 * h * w];
    let coord = |r: &mut ChaCha8Rng, n: usize| {
        let cell = r.random_range(0..n - 1) as f64;
        cell + r.random_range(0.1..0.9)
    };
    for y in 0..h {
        for x in 0..w {
            v[y * w + x] = coord(r, w) - x as f64;
            v[h * w + y * w + x] = coord(r, h) - y as f64;
        }
    }
    Tensor::from_vec(&[1, 2, h, w], v).unwrap()
}

fn soft_weight(r: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f64> {
    let v = (0..h * w)
        .map(|_| if r.random_bool(0.25) { 0.0 } else { r.random_range(0.2..1.0) })
        .collect();
    Tensor::from_vec(&[1, 1, h, w], v).unwrap()
}

/// Compares the analytic gradient of a scalar function of `x` with central
/// differences at every element; returns the worst relative error.
fn check_grad(f: &dyn Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>, analytic: &Tensor<f64>) -> f64 {
    (0..x.len())
        .map(|i| rel_err(analytic.data()[i], central_diff(f, x, i, GRAD_STEP)))
        .fold(0.0, f64::max)
}

struct Family {
    name: &'static str,
    worst: f64,
    cases: usize,
}

fn grad_warp(r: &mut ChaCha8Rng) -> (Family, Family) {
    let (mut img_f, mut flow_f) = (
        Family { name: "warp/image", worst: 0.0, cases: 0 },
        Family { name: "warp/flow", worst: 0.0, cases: 0 },
    );
    for _ in 0..GRAD_CASES {
        let img = random_tensor(r, &[1, 2, 5, 6], -1.0, 1.0);
        let flow = kink_free_flow(r, 5, 6);
        let probe = random_tensor(r, &[1, 2, 5, 6], -1.0, 1.0);
        let mut g = Graph::<f64>::new();
        let (iv, fv) = (g.param(img.clone()), g.param(flow.clone()));
        let y = g.warp(iv, fv);
        let grads = g.backward_with(y, probe.clone());
        let dot = |t: Tensor<f64>| t.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>();
        let fi = |x: &Tensor<f64>| dot(warp_tensor(x, &flow));
        let ff = |x: &Tensor<f64>| dot(warp_tensor(&img, x));
        img_f.worst = img_f.worst.max(check_grad(&fi, &img, grads.get(iv).unwrap()));
        flow_f.worst = flow_f.worst.max(check_grad(&ff, &flow, grads.get(fv).unwrap()));
        img_f.cases += 1;
        flow_f.cases += 1;
    }
    (img_f, flow_f)
}

fn grad_deform(r: &mut ChaCha8Rng) -> [Family; 3] {
    let mut fams = [
        Family { name: "deform/input", worst: 0.0, cases: 0 },
        Family { name: "deform/weight", worst: 0.0, cases: 0 },
        Family { name: "deform/offsets", worst: 0.0, cases: 0 },
    ];
    for _ in 0..GRAD_CASES {
        let x = random_tensor(r, &[1, 2, 5, 5], -1.0, 1.0);
        // Offsets that keep every tap inside the frame and off integer
        // coordinates.
        let mut off = Tensor::zeros(&[1, 18, 5, 5]);
        for tap in 0..9 {
            let (ky, kx) = ((tap / 3) as f64 - 1.0, (tap % 3) as f64 - 1.0);
            for y in 0..5 {
                for xx in 0..5 {
                    let ty = r.random_range(0..4) as f64 + r.random_range(0.1..0.9);
                    let tx = r.random_range(0..4) as f64 + r.random_range(0.1..0.9);
                    off.data_mut()[((2 * tap) * 5 + y) * 5 + xx] = tx - (xx as f64 + kx);
                    off.data_mut()[((2 * tap + 1) * 5 + y) * 5 + xx] = ty - (y as f64 + ky);
                }
            }
        }
        let w = random_tensor(r, &[3, 2, 3, 3], -1.0, 1.0);
        let probe = random_tensor(r, &[1, 3, 5, 5], -1.0, 1.0);
        let mut g = Graph::<f64>::new();
        let (xv, ov, wv) = (g.param(x.clone()), g.param(off.clone()), g.param(w.clone()));
        let y = g.deform_conv2d(xv, ov, wv, None);
        let grads = g.backward_with(y, probe.clone());
        let dot = |t: Tensor<f64>| t.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>();
        let fx = |t: &Tensor<f64>| dot(deform_conv_tensor(t, &off, &w, None));
        let fw = |t: &Tensor<f64>| dot(deform_conv_tensor(&x, &off, t, None));
        let fo = |t: &Tensor<f64>| dot(deform_conv_tensor(&x, t, &w, None));
        fams[0].worst = fams[0].worst.max(check_grad(&fx, &x, grads.get(xv).unwrap()));
        fams[1].worst = fams[1].worst.max(check_grad(&fw, &w, grads.get(wv).unwrap()));
        fams[2].worst = fams[2].worst.max(check_grad(&fo, &off, grads.get(ov).unwrap()));
        for f in fams.iter_mut() {
            f.cases += 1;
        }
    }
    fams
}

/// Value of a loss graph built by `build` with the output `o` as a leaf.
fn loss_at(build: &dyn Fn(&mut Graph<f64>, dropvid::graph::Var) -> dropvid::graph::Var, o: &Tensor<f64>) -> f64 {
    let mut g = Graph::<f64>::new();
    let ov = g.constant(o.clone());
    let l = build(&mut g, ov);
    g.value(l).item()
}

fn loss_family(
    name: &'static str,
    r: &mut ChaCha8Rng,
    make: &dyn Fn(&mut ChaCha8Rng) -> Box<dyn Fn(&mut Graph<f64>, dropvid::graph::Var) -> dropvid::graph::Var>,
) -> Family {
    let mut fam = Family { name, worst: 0.0, cases: 0 };
    for _ in 0..GRAD_CASES {
        let build = make(r);
        let o = random_tensor(r, &[1, 3, 5, 6], 0.0, 1.0);
        let mut g = Graph::<f64>::new();
        let ov = g.param(o.clone());
        let l = build(&mut g, ov);
        let grads = g.backward(l);
        let f = |t: &Tensor<f64>| loss_at(&*build, t);
        fam.worst = fam.worst.max(check_grad(&f, &o, grads.get(ov).unwrap()));
        fam.cases += 1;
    }
    fam
}

/// Four `(target, F(t -> i), weight)` neighbours as graph constants.
fn neighbours(
    g: &mut Graph<f64>,
    targets: &[Tensor<f64>],
    flows: &[Tensor<f64>],
    weights: &[Tensor<f64>],
) -> Vec<(dropvid::graph::Var, dropvid::graph::Var, Tensor<f64>)> {
    (0..targets.len())
        .map(|k| (g.constant(targets[k].clone()), g.constant(flows[k].clone()), weights[k].clone()))
        .collect()
}

fn grad_losses(r: &mut ChaCha8Rng) -> Vec<Family> {
    let (h, w) = (5, 6);
    let mut out = Vec::new();
    out.push(loss_family("L_mask_ct/O_t", r, &|r| {
        let i_t = random_tensor(r, &[1, 3, h, w], 0.0, 1.0);
        let wt = soft_weight(r, h, w);
        Box::new(move |g, o| {
            let iv = g.constant(i_t.clone());
            mask_consistency_graph(g, o, iv, &wt)
        })
    }));
    for (name, temporal) in [("L_mask_cl/O_t", false), ("L_temp/O_t", true)] {
        out.push(loss_family(name, r, &move |r| {
            let targets: Vec<_> = (0..4).map(|_| random_tensor(r, &[1, 3, h, w], 0.0, 1.0)).collect();
            let flows: Vec<_> = (0..4).map(|_| kink_free_flow(r, h, w)).collect();
            let weights: Vec<_> = (0..4).map(|_| soft_weight(r, h, w)).collect();
            Box::new(move |g, o| {
                let items = neighbours(g, &targets, &flows, &weights);
                if temporal {
                    temporal_consistency_graph(g, o, &items).unwrap()
                } else {
                    mask_correlation_graph(g, o, &items).unwrap()
                }
            })
        }));
    }
    // The flow term does not see O_t; it is checked against its own
    // differentiable inputs, the current initial result and the flows.
    let mut s_fam = Family { name: "L_flow/S_t", worst: 0.0, cases: 0 };
    let mut f_fam = Family { name: "L_flow/flow", worst: 0.0, cases: 0 };
    for _ in 0..GRAD_CASES {
        let s_t = random_tensor(r, &[1, 3, h, w], 0.0, 1.0);
        let s_i: Vec<_> = (0..4).map(|_| random_tensor(r, &[1, 3, h, w], 0.0, 1.0)).collect();
        let flows: Vec<_> = (0..4).map(|_| kink_free_flow(r, h, w)).collect();
        let weights: Vec<_> = (0..4).map(|_| soft_weight(r, h, w)).collect();
        let value = |s: &Tensor<f64>, fl: &[Tensor<f64>]| {
            let mut g = Graph::<f64>::new();
            let sv = g.constant(s.clone());
            let items = neighbours(&mut g, &s_i, fl, &weights);
            let l = masked_flow_finetune_graph(&mut g, sv, &items).unwrap();
            g.value(l).item()
        };
        let mut g = Graph::<f64>::new();
        let sv = g.param(s_t.clone());
        let fvs: Vec<_> = flows.iter().map(|f| g.param(f.clone())).collect();
        let items: Vec<_> = (0..4)
            .map(|k| (g.constant(s_i[k].clone()), fvs[k], weights[k].clone()))
            .collect();
        let l = masked_flow_finetune_graph(&mut g, sv, &items).unwrap();
        let grads = g.backward(l);
        s_fam.worst = s_fam.worst.max(check_grad(&|t| value(t, &flows), &s_t, grads.get(sv).unwrap()));
        for k in 0..4 {
            let f = |t: &Tensor<f64>| {
                let mut fl = flows.clone();
                fl[k] = t.clone();
                value(&s_t, &fl)
            };
            f_fam.worst = f_fam.worst.max(check_grad(&f, &flows[k], grads.get(fvs[k]).unwrap()));
        }
        s_fam.cases += 1;
        f_fam.cases += 1;
    }
    out.push(s_fam);
    out.push(f_fam);
    out
}

/// Analytic gradients against central differences in double precision.
pub fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut r = rng(202);
    let (a, b) = grad_warp(&mut r);
    let mut fams = vec![a, b];
    fams.extend(grad_deform(&mut r));
    fams.extend(grad_losses(&mut r));
    let secs = start.elapsed().as_secs_f64();
    for f in &fams {
        ensure!(f.cases >= GRAD_CASES, "{}: only {} cases", f.name, f.cases);
        ensure!(f.worst < GRAD_TOL, "{}: relative error {:.3e} >= {GRAD_TOL:e}", f.name, f.worst);
    }
    ensure!(secs < GRAD_BUDGET_S, "took {secs:.1}s, budget {GRAD_BUDGET_S}s");
    let worst = fams.iter().map(|f| f.worst).fold(0.0, f64::max);
    Ok(format!(
        "{} families x {GRAD_CASES} cases, worst relative error {worst:.2e}, {secs:.2}s",
        fams.len()
    ))
}

pub const ROUND_TRIP_TOL: f64 = 0.02;

fn batch(f: &Frame) -> Tensor<f32> {
    f.to_batch()
}

/// Inverse of a smooth flow by fixed-point iteration: `G(p) = -F(p + G(p))`.
fn invert_flow(f: &Tensor<f32>, h: usize, w: usize) -> Tensor<f32> {
    let p = h * w;
    let fx: Vec<f64> = f.data()[..p].iter().map(|&v| v as f64).collect();
    let fy: Vec<f64> = f.data()[p..].iter().map(|&v| v as f64).collect();
    let mut g = vec![0.0f64; 2 * p];
    for _ in 0..30 {
        let mut next = vec![0.0; 2 * p];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let (sx, sy) = (x as f64 + g[i], y as f64 + g[p + i]);
                next[i] = -bilinear(&fx, h, w, sx, sy);
                next[p + i] = -bilinear(&fy, h, w, sx, sy);
            }
        }
        g = next;
    }
    Tensor::from_vec(&[1, 2, h, w], g.into_iter().map(|v| v as f32).collect()).unwrap()
}

pub fn warp_oracles() -> Outcome {
    let mut r = rng(303);
    let (h, w) = (24, 28);
    let p = h * w;
    // Identity.
    for _ in 0..10 {
        let f = random_frame(&mut r, 3, h, w);
        let out = warp_tensor(&batch(&f), &Tensor::zeros(&[1, 2, h, w]));
        ensure!(out.data() == f.pixels.data(), "zero flow changed the image");
    }
    // Integer translations against a loop gather.
    let mut checked = 0usize;
    for &(dx, dy) in &[(1i64, 0i64), (0, 1), (-2, 3), (3, -1), (-1, -2)] {
        let f = random_frame(&mut r, 3, h, w);
        let mut flow = Tensor::zeros(&[1, 2, h, w]);
        flow.data_mut()[..p].fill(dx as f32);
        flow.data_mut()[p..].fill(dy as f32);
        let out = warp_tensor(&batch(&f), &flow);
        for c in 0..3 {
            let want = gather_translate(&f.pixels.data()[c * p..(c + 1) * p], h, w, dx, dy);
            for (i, e) in want.iter().enumerate() {
                if let Some(e) = e {
                    ensure!(out.data()[c * p + i] == *e, "translation ({dx},{dy}) differs at {c}/{i}");
                    checked += 1;
                }
            }
        }
    }
    // Constant images are invariant under any flow, including samples
    // that leave the frame.
    for _ in 0..10 {
        let v = r.random_range(0.0f32..1.0);
        let img = Tensor::full(&[1, 3, h, w], v);
        let flow = random_tensor(&mut r, &[1, 2, h, w], -30.0, 30.0).cast::<f32>();
        let out = warp_tensor(&img, &flow);
        ensure!(out.data().iter().all(|&x| x == v), "constant image {v} not preserved");
    }
    // Smooth round trip.
    let img = smooth_frame(h * 2, w * 2, 0.3);
    let (h2, w2) = (h * 2, w * 2);
    let p2 = h2 * w2;
    let mut flow = Tensor::zeros(&[1, 2, h2, w2]);
    for y in 0..h2 {
        for x in 0..w2 {
            flow.data_mut()[y * w2 + x] = 1.3 + 0.5 * (0.1 * y as f32).sin();
            flow.data_mut()[p2 + y * w2 + x] = -0.7 + 0.4 * (0.08 * x as f32).cos();
        }
    }
    let back = warp_tensor(&warp_tensor(&batch(&img), &flow), &invert_flow(&flow, h2, w2));
    let margin = 4;
    let (mut err, mut n) = (0.0f64, 0usize);
    for c in 0..3 {
        for y in margin..h2 - margin {
            for x in margin..w2 - margin {
                let i = c * p2 + y * w2 + x;
                err += (back.data()[i] - img.pixels.data()[i]).abs() as f64;
                n += 1;
            }
        }
    }
    let mae = err / n as f64;
    ensure!(mae < ROUND_TRIP_TOL, "round-trip mean abs error {mae:.4} >= {ROUND_TRIP_TOL}");
    Ok(format!(
        "identity bit-exact, {checked} translated pixels exact, constants exact, round-trip MAE {mae:.4}"
    ))
}

fn random_mask(r: &mut ChaCha8Rng, h: usize, w: usize) -> RaindropMask {
    let ev = (0..h * w).map(|_| if r.random_bool(0.3) { 0.5 } else { 0.0 }).collect();
    RaindropMask::from_evidence(Tensor::from_vec(&[1, h, w], ev).unwrap(), 0.05, MaskMode::Hard)
}

/// Copy of `f` with every pixel where `m` is raindrop replaced by noise.
fn perturb_masked(r: &mut ChaCha8Rng, f: &Frame, m: &RaindropMask) -> Frame {
    let mut g = f.clone();
    let p = m.height() * m.width();
    for (i, &wt) in m.nonrain_weight.data().iter().enumerate() {
        if wt == 0.0 {
            for c in 0..f.channels() {
                g.pixels.data_mut()[c * p + i] = r.random_range(0.0..1.0);
            }
        }
    }
    g
}

fn random_flow_field(r: &mut ChaCha8Rng, h: usize, w: usize) -> FlowField {
    FlowField::new(random_tensor(r, &[2, h, w], -2.0, 2.0).cast(), 0, 1).unwrap()
}

pub fn loss_algebra() -> Outcome {
    let mut r = rng(404);
    ensure!(DEFAULT_LAMBDA_T == 0.5, "default lambda_t is {DEFAULT_LAMBDA_T}");
    for _ in 0..100 {
        let c: Vec<f64> = (0..4).map(|_| r.random_range(0.0..2.0)).collect();
        let rep = total_loss(c[0], c[1], c[2], c[3], LossWeights::default()).map_err(|e| e.to_string())?;
        let want = c[0] + c[1] + c[2] + 0.5 * c[3];
        ensure!(rep.total == want, "total {} != {want}", rep.total);
        ensure!(rep.recomputed_total() == want, "recomputed total differs");
        let mut g = Graph::<f64>::new();
        let v: Vec<_> = c.iter().map(|&x| g.constant(Tensor::scalar(x))).collect();
        let t = total_graph(&mut g, v[0], v[1], v[2], v[3], LossWeights::default());
        let gt = g.value(t).item();
        ensure!((gt - want).abs() <= 4.0 * f64::EPSILON * want.abs(), "graph total {gt} != {want}");
    }
    let (h, w) = (12, 14);
    let mut invariance = 0;
    for _ in 0..20 {
        let o_t = random_frame(&mut r, 3, h, w);
        let i_t = random_frame(&mut r, 3, h, w);
        let m_t = random_mask(&mut r, h, w);
        let base = mask_consistency_loss(&o_t, &i_t, &m_t).unwrap();
        let moved = mask_consistency_loss(&perturb_masked(&mut r, &o_t, &m_t), &perturb_masked(&mut r, &i_t, &m_t), &m_t).unwrap();
        ensure!(base == moved, "L_mask_ct moved under masked perturbation");

        let nb: Vec<(Frame, RaindropMask, FlowField)> = (0..4)
            .map(|_| (random_frame(&mut r, 3, h, w), random_mask(&mut r, h, w), random_flow_field(&mut r, h, w)))
            .collect();
        let moved_nb: Vec<_> = nb
            .iter()
            .map(|(f, m, fl)| (perturb_masked(&mut r, f, m), m.clone(), fl.clone()))
            .collect();
        ensure!(
            mask_correlation_loss(&o_t, &nb).unwrap() == mask_correlation_loss(&o_t, &moved_nb).unwrap(),
            "L_mask_cl moved under masked perturbation"
        );
        ensure!(
            temporal_consistency_loss(&o_t, &nb).unwrap() == temporal_consistency_loss(&o_t, &moved_nb).unwrap(),
            "L_temp moved under masked perturbation"
        );
        let (s_i, m_i, fl) = &nb[0];
        ensure!(
            masked_flow_finetune_loss(&o_t, s_i, fl, m_i).unwrap()
                == masked_flow_finetune_loss(&o_t, &perturb_masked(&mut r, s_i, m_i), fl, m_i).unwrap(),
            "L_flow moved under masked perturbation"
        );
        invariance += 4;
    }
    // Trivial configurations.
    let f = random_frame(&mut r, 3, h, w);
    let m = random_mask(&mut r, h, w);
    let zero = FlowField::zeros(h, w, 0, 1);
    let same: Vec<_> = (0..4).map(|_| (f.clone(), m.clone(), zero.clone())).collect();
    ensure!(mask_consistency_loss(&f, &f, &m).unwrap() == 0.0, "L_mask_ct(O = I) != 0");
    ensure!(mask_correlation_loss(&f, &same).unwrap() == 0.0, "L_mask_cl on a static clip != 0");
    ensure!(temporal_consistency_loss(&f, &same).unwrap() == 0.0, "L_temp on identical outputs != 0");
    ensure!(masked_flow_finetune_loss(&f, &f, &zero, &m).unwrap() == 0.0, "L_flow on a static clip != 0");
    let all_rain = RaindropMask::from_evidence(Tensor::full(&[1, h, w], 1.0), 0.05, MaskMode::Hard);
    let g = random_frame(&mut r, 3, h, w);
    ensure!(mask_consistency_loss(&f, &g, &all_rain).unwrap() == 0.0, "fully masked L_mask_ct != 0");
    Ok(format!(
        "100 totals exact with lambda_t = 0.5, {invariance} masked-perturbation checks exact, trivial cases zero"
    ))
}

pub fn mask_definition() -> Outcome {
    let mut r = rng(505);
    let mut pixels = 0;
    for k in 0..100 {
        let (h, w) = (r.random_range(1..20), r.random_range(1..20));
        let i = random_frame(&mut r, 3, h, w);
        // Half the draws put S close to I so both sides of tau occur.
        let s = if k % 2 == 0 {
            random_frame(&mut r, 3, h, w)
        } else {
            let mut s = i.clone();
            s.pixels.data_mut().iter_mut().for_each(|v| *v = (*v + r.random_range(-0.1f32..0.1)).clamp(0.0, 1.0));
            s
        };
        let tau = r.random_range(0.01f32..0.3);
        let m = compute_mask(&i, &s, tau).map_err(|e| e.to_string())?;
        let (ev, wt) = mask_loop(&i, &s, tau);
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        ensure!(bits(m.evidence.data()) == bits(&ev), "evidence differs from loop oracle");
        ensure!(bits(m.nonrain_weight.data()) == bits(&wt), "weight differs from loop oracle");
        let swapped = compute_mask(&s, &i, tau).unwrap();
        ensure!(swapped == m, "mask(I, S) != mask(S, I)");
        pixels += h * w;
    }
    Ok(format!("100 draws, {pixels} pixels bit-exact, symmetric"))
}

pub fn synth_purity() -> Outcome {
    let mut r = rng(606);
    let mut untouched = 0usize;
    for k in 0..20 {
        let (h, w) = (40, 48);
        let clean = smooth_frame(h, w, k as f32);
        let drops: Vec<RaindropShape> = random_trajectories(4, h, w, 2.0, k).into_iter().map(|t| t.shape).collect();
        let seed = r.random::<u64>();
        let (rain, _) = composite_drop(&clean, &drops, seed).map_err(|e| e.to_string())?;
        let (again, _) = composite_drop(&clean, &drops, seed).unwrap();
        ensure!(again == rain, "composite not deterministic");
        let p = h * w;
        for y in 0..h {
            for x in 0..w {
                let total: f32 = drops.iter().map(|d| d.alpha(x as f32, y as f32)).sum();
                if total == 0.0 {
                    for c in 0..3 {
                        let i = c * p + y * w + x;
                        ensure!(
                            rain.pixels.data()[i].to_bits() == clean.pixels.data()[i].to_bits(),
                            "pixel ({x},{y}) changed with zero alpha"
                        );
                    }
                    untouched += 1;
                }
            }
        }
    }
    let frames: Vec<Frame> = (0..6).map(|t| Frame { time_index: t, ..smooth_frame(32, 32, t as f32 * 0.2) }).collect();
    let clip = VideoClip::new(frames, 2).unwrap();
    let tr = random_trajectories(3, 32, 32, 2.0, 9);
    let a = synthesize_clip(&clip, &tr, 17, 2.0).map_err(|e| e.to_string())?;
    let b = synthesize_clip(&clip, &tr, 17, 2.0).unwrap();
    let c = synthesize_clip(&clip, &tr, 18, 2.0).unwrap();
    ensure!(a == b, "same seed gave different clips");
    ensure!(a != c, "different seeds gave identical clips");
    ensure!(toy_clip(&ToyClipSpec::default()).unwrap() == toy_clip(&ToyClipSpec::default()).unwrap(), "toy clip not deterministic");
    Ok(format!("{untouched} zero-alpha pixels bit-exact; clips deterministic per seed"))
}

pub const PSNR_TOL_DB: f64 = 1e-6;
pub const SSIM_TOL: f64 = 1e-4;

pub fn metric_oracles() -> Outcome {
    let mut r = rng(808);
    let mut worst_psnr = 0.0f64;
    for _ in 0..50 {
        let (h, w) = (r.random_range(4..30), r.random_range(4..30));
        let a = random_frame(&mut r, 3, h, w);
        let b = random_frame(&mut r, 3, h, w);
        let d = (psnr(&a, &b).unwrap() - psnr_loop(&a, &b)).abs();
        worst_psnr = worst_psnr.max(d);
    }
    ensure!(worst_psnr < PSNR_TOL_DB, "PSNR differs from loop reference by {worst_psnr:e} dB");
    let mut worst_ssim = 0.0f64;
    for k in 0..12 {
        let (h, w) = (r.random_range(11..26), r.random_range(11..26));
        let (a, b) = if k % 2 == 0 {
            (random_frame(&mut r, 3, h, w), random_frame(&mut r, 3, h, w))
        } else {
            let a = smooth_frame(h, w, k as f32);
            let mut b = a.clone();
            b.pixels.data_mut().iter_mut().for_each(|v| *v = (*v + r.random_range(-0.05f32..0.05)).clamp(0.0, 1.0));
            (a, b)
        };
        worst_ssim = worst_ssim.max((ssim(&a, &b).unwrap() - ssim_reference(&a, &b)).abs());
    }
    ensure!(worst_ssim < SSIM_TOL, "SSIM differs from reference by {worst_ssim:e}");
    let db = psnr_from_mse(0.01);
    ensure!(db == 20.0, "MSE 0.01 gave {db} dB");
    Ok(format!(
        "PSNR max diff {worst_psnr:.1e} dB, SSIM max diff {worst_ssim:.1e}, MSE 0.01 -> {db} dB"
    ))
}

pub fn format_round_trips() -> Outcome {
    let mut r = rng(1111);
    let dir = std::env::temp_dir().join(format!("dropvid-roundtrip-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let io = |e: dropvid::Error| e.to_string();
    for k in 0..10 {
        let (h, w) = (r.random_range(1..16), r.random_range(1..16));
        let bound = h.max(w) as f64 / 2.0;
        let f = FlowField::new(random_tensor(&mut r, &[2, h, w], -bound, bound).cast(), k, k + 1).unwrap();
        let p = dir.join(format!("f{k}.dvfl"));
        dvfl::write(&p, &f).map_err(io)?;
        let back = dvfl::read(&p, k, k + 1).map_err(io)?;
        ensure!(dvfl::encode(&back) == dvfl::encode(&f) && back == f, "DVFL round trip differs");
    }
    for k in 0..5 {
        let mut store = ParamStore::new();
        for j in 0..3 {
            let shape = [r.random_range(1..5), r.random_range(1..5)];
            store.insert(format!("layer{j}.w"), random_tensor(&mut r, &shape, -3.0, 3.0).cast());
        }
        let ck = Checkpoint::new(store).with_meta("kind", "test").with_meta("k", k);
        let p = dir.join(format!("c{k}.ckpt"));
        ck.save(&p).map_err(io)?;
        let back = Checkpoint::load(&p).map_err(io)?;
        ensure!(back == ck && back.encode() == std::fs::read(&p).unwrap(), "checkpoint round trip differs");
    }
    let mut cfg = TrainConfig::test_default();
    cfg.lambda_t = 0.3;
    cfg.lr_flow_finetune = 1e-7;
    cfg.tau = 0.07;
    cfg.flow_finetune = false;
    let p = dir.join("train.conf");
    cfg.save(&p).map_err(io)?;
    ensure!(TrainConfig::load(&p).map_err(io)? == cfg, "config round trip differs");
    let rows = vec![
        CsvRow { video: "v1".into(), psnr: f64::INFINITY, ssim: 1.0, masked_psnr: f64::NAN, temporal_warp_error: 0.0 },
        CsvRow { video: "v2".into(), psnr: r.random_range(10.0..50.0), ssim: r.random(), masked_psnr: 0.1 + 0.2, temporal_warp_error: 1e-7 },
    ];
    let back = parse_csv(&to_csv(&rows)).map_err(io)?;
    ensure!(back.len() == rows.len() && back.iter().zip(&rows).all(|(a, b)| a.same_as(b)), "CSV round trip differs");
    let _ = std::fs::remove_dir_all(&dir);
    Ok("DVFL, checkpoint, config and CSV round-trips exact".into())
}
