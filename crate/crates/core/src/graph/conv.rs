//! Dense convolution (2-d and 3-d) through im2col + GEMM.

use super::{Backward, Graph, Var};
use crate::tensor::{Real, Tensor};

/// Geometry of a volumetric convolution. 2-d convolutions use a unit depth.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeometry {
    pub fn out_dims(&self) -> [usize; 3] {
        let d = |size: usize, k: usize, s: usize, p: usize| (size + 2 * p - k) / s + 1;
        [
            d(self.depth, self.kernel[0], self.stride[0], self.pad[0]),
            d(self.height, self.kernel[1], self.stride[1], self.pad[1]),
            d(self.width, self.kernel[2], self.stride[2], self.pad[2]),
        ]
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    fn rows(&self) -> usize {
        self.channels * self.taps()
    }

    fn positions(&self) -> usize {
        self.out_dims().iter().product()
    }

    fn plane(&self) -> usize {
        self.depth * self.height * self.width
    }
}

/// Gathers zero-padded patches of one sample into `cols[rows, positions]`.
fn im2col<T: Real>(geo: &ConvGeometry, x: &[T], cols: &mut [T]) {
    let [od, oh, ow] = geo.out_dims();
    let p = od * oh * ow;
    let [kd, kh, kw] = geo.kernel;
    let [sd, sh, sw] = geo.stride;
    let [pd, ph, pw] = geo.pad;
    let (d, h, w) = (geo.depth, geo.height, geo.width);
    let mut row = 0;
    for c in 0..geo.channels {
        let xc = &x[c * d * h * w..(c + 1) * d * h * w];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let mut idx = 0;
                    for zo in 0..od {
                        let z = (zo * sd + a) as isize - pd as isize;
                        if z < 0 || z >= d as isize {
                            dst[idx..idx + oh * ow].fill(T::zero());
                            idx += oh * ow;
                            continue;
                        }
                        let zoff = z as usize * h * w;
                        for yo in 0..oh {
                            let y = (yo * sh + b) as isize - ph as isize;
                            if y < 0 || y >= h as isize {
                                dst[idx..idx + ow].fill(T::zero());
                                idx += ow;
                                continue;
                            }
                            let src = &xc[zoff + y as usize * w..zoff + (y as usize + 1) * w];
                            for xo in 0..ow {
                                let xi = (xo * sw + e) as isize - pw as isize;
                                dst[idx] = if xi < 0 || xi >= w as isize {
                                    T::zero()
                                } else {
                                    src[xi as usize]
                                };
                                idx += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Scatter-adds `cols` back into the input layout (adjoint of [`im2col`]).
fn col2im<T: Real>(geo: &ConvGeometry, cols: &[T], dx: &mut [T]) {
    let [od, oh, ow] = geo.out_dims();
    let p = od * oh * ow;
    let [kd, kh, kw] = geo.kernel;
    let [sd, sh, sw] = geo.stride;
    let [pd, ph, pw] = geo.pad;
    let (d, h, w) = (geo.depth, geo.height, geo.width);
    let mut row = 0;
    for c in 0..geo.channels {
        let base = c * d * h * w;
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let src = &cols[row * p..(row + 1) * p];
                    let mut idx = 0;
                    for zo in 0..od {
                        let z = (zo * sd + a) as isize - pd as isize;
                        if z < 0 || z >= d as isize {
                            idx += oh * ow;
                            continue;
                        }
                        for yo in 0..oh {
                            let y = (yo * sh + b) as isize - ph as isize;
                            if y < 0 || y >= h as isize {
                                idx += ow;
                                continue;
                            }
                            let off = base + z as usize * h * w + y as usize * w;
                            for xo in 0..ow {
                                let xi = (xo * sw + e) as isize - pw as isize;
                                if xi >= 0 && xi < w as isize {
                                    dx[off + xi as usize] += src[idx];
                                }
                                idx += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Forward convolution of a `[N, C, D, H, W]` buffer with `[O, C, kd, kh, kw]`
/// weights. Returns the output buffer and, if requested, the im2col matrices.
pub fn conv_forward<T: Real>(
    geo: &ConvGeometry,
    batch: usize,
    x: &[T],
    weight: &[T],
    out_channels: usize,
    bias: Option<&[T]>,
    keep_cols: bool,
) -> (Vec<T>, Vec<Vec<T>>) {
    let rows = geo.rows();
    let p = geo.positions();
    let plane = geo.plane();
    let mut out = vec![T::zero(); batch * out_channels * p];
    let mut kept = Vec::new();
    let mut cols = vec![T::zero(); rows * p];
    for n in 0..batch {
        im2col(geo, &x[n * geo.channels * plane..(n + 1) * geo.channels * plane], &mut cols);
        let o = &mut out[n * out_channels * p..(n + 1) * out_channels * p];
        if let Some(b) = bias {
            for (oc, chunk) in o.chunks_mut(p).enumerate() {
                chunk.fill(b[oc]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            out_channels,
            rows,
            p,
            T::one(),
            weight,
            rows as isize,
            1,
            &cols,
            p as isize,
            1,
            beta,
            o,
            p as isize,
            1,
        );
        if keep_cols {
            kept.push(cols.clone());
        }
    }
    (out, kept)
}

struct ConvOp<T: Real> {
    geo: ConvGeometry,
    batch: usize,
    out_channels: usize,
    cols: Vec<Vec<T>>,
    input_shape: Vec<usize>,
}

impl<T: Real> Backward<T> for ConvOp<T> {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let geo = &self.geo;
        let rows = geo.rows();
        let p = geo.positions();
        let plane = geo.plane();
        let oc = self.out_channels;
        let weight = inputs[1];
        let g = grad.data();

        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); self.batch * geo.channels * plane];
            let mut dcols = vec![T::zero(); rows * p];
            for n in 0..self.batch {
                // dcols = W^T * dout
                T::gemm(
                    rows,
                    oc,
                    p,
                    T::one(),
                    weight.data(),
                    1,
                    rows as isize,
                    &g[n * oc * p..(n + 1) * oc * p],
                    p as isize,
                    1,
                    T::zero(),
                    &mut dcols,
                    p as isize,
                    1,
                );
                col2im(
                    geo,
                    &dcols,
                    &mut dx[n * geo.channels * plane..(n + 1) * geo.channels * plane],
                );
            }
            Tensor::from_vec(&self.input_shape, dx).expect("conv dx shape")
        });

        let dw = needs[1].then(|| {
            let mut dw = vec![T::zero(); oc * rows];
            let mut scratch = vec![T::zero(); rows * p];
            for n in 0..self.batch {
                let cols = if self.cols.is_empty() {
                    im2col(
                        geo,
                        &inputs[0].data()[n * geo.channels * plane..(n + 1) * geo.channels * plane],
                        &mut scratch,
                    );
                    &scratch
                } else {
                    &self.cols[n]
                };
                // dW += dout * cols^T
                T::gemm(
                    oc,
                    p,
                    rows,
                    T::one(),
                    &g[n * oc * p..(n + 1) * oc * p],
                    p as isize,
                    1,
                    cols,
                    1,
                    p as isize,
                    T::one(),
                    &mut dw,
                    rows as isize,
                    1,
                );
            }
            Tensor::from_vec(weight.shape(), dw).expect("conv dw shape")
        });

        let mut result = vec![dx, dw];
        if inputs.len() == 3 {
            let db = needs[2].then(|| {
                let mut db = vec![T::zero(); oc];
                for n in 0..self.batch {
                    for (o, acc) in db.iter_mut().enumerate() {
                        let start = (n * oc + o) * p;
                        *acc += g[start..start + p].iter().copied().sum::<T>();
                    }
                }
                Tensor::from_vec(&[oc], db).expect("conv db shape")
            });
            result.push(db);
        }
        result
    }
}

impl<T: Real> Graph<T> {
    /// 2-d convolution of `[N, C, H, W]` with `[O, C, kh, kw]` weights, zero padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW, got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d weight must be OCkk, got {ws:?}");
        let geo = ConvGeometry {
            channels: xs[1],
            depth: 1,
            height: xs[2],
            width: xs[3],
            kernel: [1, ws[2], ws[3]],
            stride: [1, stride, stride],
            pad: [0, pad, pad],
        };
        let [_, oh, ow] = geo.out_dims();
        self.conv_impl(x, weight, bias, geo, xs[0], vec![xs[0], ws[0], oh, ow])
    }

    /// 3-d convolution of `[N, C, D, H, W]` with `[O, C, kd, kh, kw]` weights,
    /// unit stride, zero padding `pad = [pd, ph, pw]`.
    pub fn conv3d(&mut self, x: Var, weight: Var, bias: Option<Var>, pad: [usize; 3]) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        assert_eq!(xs.len(), 5, "conv3d input must be NCDHW, got {xs:?}");
        assert_eq!(ws.len(), 5, "conv3d weight must be OCkkk, got {ws:?}");
        let geo = ConvGeometry {
            channels: xs[1],
            depth: xs[2],
            height: xs[3],
            width: xs[4],
            kernel: [ws[2], ws[3], ws[4]],
            stride: [1, 1, 1],
            pad,
        };
        let [od, oh, ow] = geo.out_dims();
        self.conv_impl(x, weight, bias, geo, xs[0], vec![xs[0], ws[0], od, oh, ow])
    }

    fn conv_impl(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        geo: ConvGeometry,
        batch: usize,
        out_shape: Vec<usize>,
    ) -> Var {
        let ws = self.shape(weight);
        assert_eq!(ws[1], geo.channels, "conv channel mismatch");
        let out_channels = ws[0];
        let keep_cols = self.requires_grad(weight);
        let (out, cols) = conv_forward(
            &geo,
            batch,
            self.value(x).data(),
            self.value(weight).data(),
            out_channels,
            bias.map(|b| self.value(b).data()),
            keep_cols,
        );
        let value = Tensor::from_vec(&out_shape, out).expect("conv output shape");
        let op = ConvOp {
            geo,
            batch,
            out_channels,
            cols,
            input_shape: self.shape(x).to_vec(),
        };
        match bias {
            Some(b) => self.push(value, &[x, weight, b], op),
            None => self.push(value, &[x, weight], op),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct nested-loop convolution.
    fn naive_conv2d(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: &Tensor<f64>,
        stride: usize,
        pad: usize,
    ) -> Tensor<f64> {
        let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (o, kh, kw) = (w.dim(0), w.dim(2), w.dim(3));
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[n, o, oh, ow]);
        for ni in 0..n {
            for oi in 0..o {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = b.data()[oi];
                        for ci in 0..c {
                            for a in 0..kh {
                                for e in 0..kw {
                                    let yy = (y * stride + a) as isize - pad as isize;
                                    let xx = (xo * stride + e) as isize - pad as isize;
                                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()[((ni * c + ci) * h + yy as usize) * wd + xx as usize]
                                        * w.data()[((oi * c + ci) * kh + a) * kw + e];
                                }
                            }
                        }
                        out.data_mut()[((ni * o + oi) * oh + y) * ow + xo] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(stride, pad) in &[(1, 1), (2, 1), (1, 0)] {
            let x = rand_tensor(&mut rng, &[2, 3, 7, 6]);
            let w = rand_tensor(&mut rng, &[4, 3, 3, 3]);
            let b = rand_tensor(&mut rng, &[4]);
            let mut g = Graph::new();
            let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
            let y = g.conv2d(xv, wv, Some(bv), stride, pad);
            let want = naive_conv2d(&x, &w, &b, stride, pad);
            assert_eq!(g.shape(y), want.shape());
            for (a, b) in g.value(y).data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[1, 2, 5, 5]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        let r = rand_tensor(&mut rng, &[1, 3, 3, 3]);
        let f = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
            naive_conv2d(x, w, b, 2, 1)
                .data()
                .iter()
                .zip(r.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.param(x.clone()), g.param(w.clone()), g.param(b.clone()));
        let y = g.conv2d(xv, wv, Some(bv), 2, 1);
        let rv = g.constant(r.clone());
        let prod = g.mul(y, rv);
        let loss = g.sum(prod);
        let grads = g.backward(loss);
        let h = 1e-6;
        for (var, base) in [(xv, &x), (wv, &w), (bv, &b)] {
            let analytic = grads.get(var).unwrap();
            for i in 0..base.len() {
                let mut plus = base.clone();
                plus.data_mut()[i] += h;
                let mut minus = base.clone();
                minus.data_mut()[i] -= h;
                let (fp, fm) = if var == xv {
                    (f(&plus, &w, &b), f(&minus, &w, &b))
                } else if var == wv {
                    (f(&x, &plus, &b), f(&x, &minus, &b))
                } else {
                    (f(&x, &w, &plus), f(&x, &w, &minus))
                };
                let numeric = (fp - fm) / (2.0 * h);
                assert!((numeric - analytic.data()[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn conv3d_temporal_reduction() {
        // A [1,1,3,1,1] kernel over time reduces a 4-step sequence to 2 steps.
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec(&[1, 1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = g.constant(Tensor::from_vec(&[1, 1, 3, 1, 1], vec![1.0, 10.0, 100.0]).unwrap());
        let y = g.conv3d(x, w, None, [0, 0, 0]);
        assert_eq!(g.shape(y), &[1, 1, 2, 1, 1]);
        assert_eq!(g.value(y).data(), &[321.0, 432.0]);
    }
}
