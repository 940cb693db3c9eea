//! Scalar-loop reference implementations, written independently of the
//! library kernels.

#![allow(dead_code)]

use dropvid::tensor::Tensor;
use dropvid::{FlowField, Frame, RaindropMask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn random_frame(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Frame {
    let v = (0..c * h * w).map(|_| rng.random_range(0.0f32..1.0)).collect();
    Frame::new(Tensor::from_vec(&[c, h, w], v).unwrap(), 0).unwrap()
}

/// Smooth RGB test image built from a few low-frequency sinusoids.
pub fn smooth_frame(h: usize, w: usize, phase: f32) -> Frame {
    let mut v = vec![0.0f32; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let (xf, yf) = (x as f32, y as f32);
                v[(c * h + y) * w + x] = 0.5
                    + 0.2 * (0.11 * xf + 0.07 * yf + phase + c as f32).sin()
                    + 0.15 * (0.05 * xf - 0.13 * yf + 2.0 * c as f32).cos();
            }
        }
    }
    Frame::new(Tensor::from_vec(&[3, h, w], v).unwrap(), 0).unwrap()
}

/// Dense 3x3 convolution, stride 1, border replication, one scalar at a
/// time. `x` is `[1, C, H, W]`, `w` is `[O, C, 3, 3]`.
pub fn dense_conv3x3_replicate(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]) -> Vec<f64> {
    let (c, h, wd) = (x.dim(1), x.dim(2), x.dim(3));
    let o = w.dim(0);
    let xv = x.data();
    let wv = w.data();
    let at = |ic: usize, y: isize, xx: isize| {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xc = xx.clamp(0, wd as isize - 1) as usize;
        xv[(ic * h + yy) * wd + xc]
    };
    let mut out = Vec::with_capacity(o * h * wd);
    for oc in 0..o {
        for y in 0..h as isize {
            for xx in 0..wd as isize {
                let mut acc = b[oc];
                for ic in 0..c {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            acc += wv[((oc * c + ic) * 3 + ky) * 3 + kx] * at(ic, y + ky as isize - 1, xx + kx as isize - 1);
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

/// `out(x, y) = img(x + dx, y + dy)` for every pixel whose source lies
/// inside the plane; `None` elsewhere.
pub fn gather_translate(plane: &[f32], h: usize, w: usize, dx: i64, dy: i64) -> Vec<Option<f32>> {
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let (sx, sy) = (x + dx, y + dy);
            out.push(
                (sx >= 0 && sy >= 0 && sx < w as i64 && sy < h as i64)
                    .then(|| plane[(sy as usize) * w + sx as usize]),
            );
        }
    }
    out
}

/// Bilinear read of an `h x w` plane at `(x, y)` with coordinates clamped
/// to the border.
pub fn bilinear(plane: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Backward warp of a `C x H x W` frame by a flow, in double precision.
pub fn warp_loop(frame: &Frame, flow: &FlowField) -> Vec<f64> {
    let (c, h, w) = (frame.channels(), frame.height(), frame.width());
    let p = h * w;
    let fv = flow.vectors.data();
    let mut out = vec![0.0; c * p];
    for ci in 0..c {
        let plane: Vec<f64> = frame.pixels.data()[ci * p..(ci + 1) * p].iter().map(|&v| v as f64).collect();
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                out[ci * p + i] = bilinear(&plane, h, w, x as f64 + fv[i] as f64, y as f64 + fv[p + i] as f64);
            }
        }
    }
    out
}

pub fn psnr_loop(a: &Frame, b: &Frame) -> f64 {
    let (ad, bd) = (a.pixels.data(), b.pixels.data());
    let mut sse = 0.0f64;
    for i in 0..ad.len() {
        let d = ad[i] as f64 - bd[i] as f64;
        sse += d * d;
    }
    let mse = sse / ad.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// Direct 2-d windowed SSIM: 11x11 Gaussian weights (sigma 1.5) built and
/// normalised in two dimensions, statistics summed per window position.
pub fn ssim_reference(a: &Frame, b: &Frame) -> f64 {
    const N: usize = 11;
    let sigma = 1.5f64;
    let mut win = [[0.0f64; N]; N];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let (c1, c2) = ((0.01f64).powi(2), (0.03f64).powi(2));
    let (ch, h, w) = (a.channels(), a.height(), a.width());
    let p = h * w;
    let mut score = 0.0;
    for c in 0..ch {
        let x = &a.pixels.data()[c * p..(c + 1) * p];
        let y = &b.pixels.data()[c * p..(c + 1) * p];
        let mut acc = 0.0;
        let mut count = 0usize;
        for oy in 0..=h - N {
            for ox in 0..=w - N {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..N {
                    for j in 0..N {
                        let k = win[i][j] / total;
                        let xv = x[(oy + i) * w + ox + j] as f64;
                        let yv = y[(oy + i) * w + ox + j] as f64;
                        mx += k * xv;
                        my += k * yv;
                        sxx += k * xv * xv;
                        syy += k * yv * yv;
                        sxy += k * xv * yv;
                    }
                }
                let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        score += acc / count as f64;
    }
    score / ch as f64
}

/// Temporal warp error by explicit loops over pairs, pixels and channels.
pub fn twe_loop(frames: &[Frame], flows: &[FlowField], masks: &[RaindropMask]) -> f64 {
    let mut total = 0.0;
    for k in 0..frames.len() - 1 {
        let warped = warp_loop(&frames[k], &flows[k]);
        let next = frames[k + 1].pixels.data();
        let wts = masks[k].nonrain_weight.data();
        let p = wts.len();
        let c = frames[k].channels();
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..p {
            let wt = wts[i] as f64;
            for ci in 0..c {
                let d = warped[ci * p + i] - next[ci * p + i] as f64;
                num += wt * d * d;
                den += wt;
            }
        }
        if den > 0.0 {
            total += num / den;
        }
    }
    total / (frames.len() - 1) as f64
}

/// Channel-mean absolute difference and its hard threshold, pixel by pixel.
pub fn mask_loop(i_t: &Frame, s_t: &Frame, tau: f32) -> (Vec<f32>, Vec<f32>) {
    let (c, h, w) = (i_t.channels(), i_t.height(), i_t.width());
    let p = h * w;
    let (a, b) = (i_t.pixels.data(), s_t.pixels.data());
    let mut evidence = Vec::with_capacity(p);
    let mut weight = Vec::with_capacity(p);
    for i in 0..p {
        let mut s = 0.0f32;
        for ci in 0..c {
            s += (a[ci * p + i] - b[ci * p + i]).abs();
        }
        let e = s * (1.0 / c as f32);
        evidence.push(e);
        weight.push(if e < tau { 1.0 } else { 0.0 });
    }
    (evidence, weight)
}

/// Relative error with a floor so that near-zero gradients compare on an
/// absolute scale.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central difference of `f` along element `i` of `x`.
pub fn central_diff(f: &dyn Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>, i: usize, h: f64) -> f64 {
    let mut up = x.clone();
    up.data_mut()[i] += h;
    let mut dn = x.clone();
    dn.data_mut()[i] -= h;
    (f(&up) - f(&dn)) / (2.0 * h)
}
