//! Deformable convolution (offsets only, no modulation), stride 1, "same"
//! output size. Tap `k = a * kw + b` samples the input at
//! `p + (b - kw/2, a - kh/2) + offset(p, k)` with bilinear interpolation and
//! border replication.

use crate::graph::{Backward, Graph, Var};
use crate::sampling::Stencil;
use crate::tensor::{Real, Tensor};

struct Layout {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    out_channels: usize,
}

impl Layout {
    fn taps(&self) -> usize {
        self.kh * self.kw
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Stencils for every (tap, position) of sample `ni`.
    fn stencils<T: Real>(&self, offsets: &[T], ni: usize) -> Vec<Stencil<T>> {
        let (k, p) = (self.taps(), self.plane());
        let off = &offsets[ni * 2 * k * p..(ni + 1) * 2 * k * p];
        let mut out = Vec::with_capacity(k * p);
        for a in 0..self.kh {
            for b in 0..self.kw {
                let tap = a * self.kw + b;
                let dx = T::c(b as f64 - (self.kw / 2) as f64);
                let dy = T::c(a as f64 - (self.kh / 2) as f64);
                let ox = &off[(2 * tap) * p..(2 * tap + 1) * p];
                let oy = &off[(2 * tap + 1) * p..(2 * tap + 2) * p];
                for y in 0..self.h {
                    for x in 0..self.w {
                        let i = y * self.w + x;
                        out.push(Stencil::new(
                            T::c(x as f64) + dx + ox[i],
                            T::c(y as f64) + dy + oy[i],
                            self.h,
                            self.w,
                        ));
                    }
                }
            }
        }
        out
    }

    /// `cols[(c * K + k), p]` sampled values for sample `ni`.
    fn columns<T: Real>(&self, x: &[T], stencils: &[Stencil<T>], ni: usize) -> Vec<T> {
        let (k, p) = (self.taps(), self.plane());
        let mut cols = vec![T::zero(); self.c * k * p];
        for ci in 0..self.c {
            let src = &x[(ni * self.c + ci) * p..(ni * self.c + ci + 1) * p];
            for tap in 0..k {
                let row = &mut cols[(ci * k + tap) * p..(ci * k + tap + 1) * p];
                for (dst, st) in row.iter_mut().zip(&stencils[tap * p..(tap + 1) * p]) {
                    *dst = st.sample(src);
                }
            }
        }
        cols
    }
}

/// Forward pass on raw buffers: `x [N,C,H,W]`, `offsets [N,2K,H,W]`,
/// `weight [O,C,kh,kw]`, optional `bias [O]`.
pub fn deform_conv_tensor<T: Real>(
    x: &Tensor<T>,
    offsets: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Tensor<T> {
    let l = layout(x, offsets, weight);
    let (k, p) = (l.taps(), l.plane());
    let rows = l.c * k;
    let mut out = vec![T::zero(); l.n * l.out_channels * p];
    for ni in 0..l.n {
        let st = l.stencils(offsets.data(), ni);
        let cols = l.columns(x.data(), &st, ni);
        let o = &mut out[ni * l.out_channels * p..(ni + 1) * l.out_channels * p];
        if let Some(b) = bias {
            for (oc, chunk) in o.chunks_mut(p).enumerate() {
                chunk.fill(b.data()[oc]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            l.out_channels,
            rows,
            p,
            T::one(),
            weight.data(),
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
    }
    Tensor::from_vec(&[l.n, l.out_channels, l.h, l.w], out).unwrap()
}

fn layout<T: Real>(x: &Tensor<T>, offsets: &Tensor<T>, weight: &Tensor<T>) -> Layout {
    let (xs, os, ws) = (x.shape(), offsets.shape(), weight.shape());
    assert_eq!(xs.len(), 4, "deform input must be NCHW");
    assert_eq!(ws.len(), 4, "deform weight must be OCkk");
    assert_eq!(ws[1], xs[1], "deform channel mismatch");
    assert!(ws[2] % 2 == 1 && ws[3] % 2 == 1, "deform kernel must be odd");
    let taps = ws[2] * ws[3];
    assert_eq!(
        os,
        &[xs[0], 2 * taps, xs[2], xs[3]],
        "offset field must be [N, 2K, H, W]"
    );
    Layout {
        n: xs[0],
        c: xs[1],
        h: xs[2],
        w: xs[3],
        kh: ws[2],
        kw: ws[3],
        out_channels: ws[0],
    }
}

struct DeformOp;

impl<T: Real> Backward<T> for DeformOp {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (x, offsets, weight) = (inputs[0], inputs[1], inputs[2]);
        let l = layout(x, offsets, weight);
        let (k, p) = (l.taps(), l.plane());
        let rows = l.c * k;
        let oc = l.out_channels;
        let gv = grad.data();
        let xv = x.data();

        let mut dx = needs[0].then(|| vec![T::zero(); xv.len()]);
        let mut doff = needs[1].then(|| vec![T::zero(); offsets.len()]);
        let mut dw = needs[2].then(|| vec![T::zero(); weight.len()]);
        let mut dcols = vec![T::zero(); rows * p];

        for ni in 0..l.n {
            let st = l.stencils(offsets.data(), ni);
            let g = &gv[ni * oc * p..(ni + 1) * oc * p];
            if let Some(dw) = dw.as_mut() {
                let cols = l.columns(xv, &st, ni);
                T::gemm(
                    oc, p, rows, T::one(), g, p as isize, 1, &cols, 1, p as isize, T::one(), dw,
                    rows as isize, 1,
                );
            }
            if dx.is_none() && doff.is_none() {
                continue;
            }
            T::gemm(
                rows,
                oc,
                p,
                T::one(),
                weight.data(),
                1,
                rows as isize,
                g,
                p as isize,
                1,
                T::zero(),
                &mut dcols,
                p as isize,
                1,
            );
            for ci in 0..l.c {
                let base = (ni * l.c + ci) * p;
                let src = &xv[base..base + p];
                for tap in 0..k {
                    let dc = &dcols[(ci * k + tap) * p..(ci * k + tap + 1) * p];
                    let sts = &st[tap * p..(tap + 1) * p];
                    if let Some(dx) = dx.as_mut() {
                        let plane = &mut dx[base..base + p];
                        for (s, &gval) in sts.iter().zip(dc) {
                            s.scatter(plane, gval);
                        }
                    }
                    if let Some(doff) = doff.as_mut() {
                        let obase = ni * 2 * k * p;
                        for (i, (s, &gval)) in sts.iter().zip(dc).enumerate() {
                            let (gx, gy) = s.gradient(src);
                            doff[obase + (2 * tap) * p + i] += gval * gx;
                            doff[obase + (2 * tap + 1) * p + i] += gval * gy;
                        }
                    }
                }
            }
        }

        let mut result = vec![
            dx.map(|d| Tensor::from_vec(x.shape(), d).unwrap()),
            doff.map(|d| Tensor::from_vec(offsets.shape(), d).unwrap()),
            dw.map(|d| Tensor::from_vec(weight.shape(), d).unwrap()),
        ];
        if inputs.len() == 4 {
            result.push(needs[3].then(|| {
                let mut db = vec![T::zero(); oc];
                for ni in 0..l.n {
                    for (o, acc) in db.iter_mut().enumerate() {
                        let s = (ni * oc + o) * p;
                        *acc += gv[s..s + p].iter().copied().sum::<T>();
                    }
                }
                Tensor::from_vec(&[oc], db).unwrap()
            }));
        }
        result
    }
}

impl<T: Real> Graph<T> {
    /// Deformable convolution; differentiable in input, offsets, weight and bias.
    pub fn deform_conv2d(&mut self, x: Var, offsets: Var, weight: Var, bias: Option<Var>) -> Var {
        let value = deform_conv_tensor(
            self.value(x),
            self.value(offsets),
            self.value(weight),
            bias.map(|b| self.value(b)),
        );
        match bias {
            Some(b) => self.push(value, &[x, offsets, weight, b], DeformOp),
            None => self.push(value, &[x, offsets, weight], DeformOp),
        }
    }
}
