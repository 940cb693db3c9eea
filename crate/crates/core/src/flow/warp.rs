//! Backward (gather) warping: `out(p) = img(p + flow(p))`, bilinear, border
//! replication, differentiable in both the image and the flow.

use crate::error::{Error, Result};
use crate::graph::{Backward, Graph, Var};
use crate::sampling::Stencil;
use crate::tensor::{Real, Tensor};
use crate::types::{FeatureMap, FlowField, Frame};

/// Warps a `[N, C, H, W]` buffer with a `[N, 2, H, W]` flow.
pub fn warp_tensor<T: Real>(img: &Tensor<T>, flow: &Tensor<T>) -> Tensor<T> {
    let s = img.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    assert_eq!(flow.shape(), &[n, 2, h, w], "warp flow shape");
    let plane = h * w;
    let iv = img.data();
    let fv = flow.data();
    let mut out = vec![T::zero(); iv.len()];
    for ni in 0..n {
        let fx = &fv[(ni * 2) * plane..(ni * 2 + 1) * plane];
        let fy = &fv[(ni * 2 + 1) * plane..(ni * 2 + 2) * plane];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let st = Stencil::new(T::c(x as f64) + fx[p], T::c(y as f64) + fy[p], h, w);
                for ci in 0..c {
                    let off = (ni * c + ci) * plane;
                    out[off + p] = st.sample(&iv[off..off + plane]);
                }
            }
        }
    }
    Tensor::from_vec(s, out).expect("warp output")
}

struct WarpOp;

impl<T: Real> Backward<T> for WarpOp {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (img, flow) = (inputs[0], inputs[1]);
        let s = img.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let plane = h * w;
        let iv = img.data();
        let fv = flow.data();
        let gv = grad.data();
        let mut dimg = needs[0].then(|| vec![T::zero(); iv.len()]);
        let mut dflow = needs[1].then(|| vec![T::zero(); fv.len()]);
        for ni in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    let fxp = fv[(ni * 2) * plane + p];
                    let fyp = fv[(ni * 2 + 1) * plane + p];
                    let st = Stencil::new(T::c(x as f64) + fxp, T::c(y as f64) + fyp, h, w);
                    let (mut ax, mut ay) = (T::zero(), T::zero());
                    for ci in 0..c {
                        let off = (ni * c + ci) * plane;
                        let g = gv[off + p];
                        if let Some(d) = dimg.as_mut() {
                            st.scatter(&mut d[off..off + plane], g);
                        }
                        if dflow.is_some() {
                            let (gx, gy) = st.gradient(&iv[off..off + plane]);
                            ax += g * gx;
                            ay += g * gy;
                        }
                    }
                    if let Some(d) = dflow.as_mut() {
                        d[(ni * 2) * plane + p] += ax;
                        d[(ni * 2 + 1) * plane + p] += ay;
                    }
                }
            }
        }
        vec![
            dimg.map(|d| Tensor::from_vec(s, d).unwrap()),
            dflow.map(|d| Tensor::from_vec(flow.shape(), d).unwrap()),
        ]
    }
}

impl<T: Real> Graph<T> {
    /// Differentiable backward warp of `img` `[N, C, H, W]` by `flow` `[N, 2, H, W]`.
    pub fn warp(&mut self, img: Var, flow: Var) -> Var {
        let value = warp_tensor(self.value(img), self.value(flow));
        self.push(value, &[img, flow], WarpOp)
    }
}

/// Anything that can be resampled along a flow field.
pub trait Warp: Sized {
    fn warp(&self, flow: &FlowField) -> Result<Self>;
}

fn check_size(h: usize, w: usize, flow: &FlowField) -> Result<()> {
    if flow.height() != h || flow.width() != w {
        return Err(Error::Shape(format!(
            "flow {}x{} does not match image {}x{}",
            flow.height(),
            flow.width(),
            h,
            w
        )));
    }
    Ok(())
}

fn warp_chw(pixels: &Tensor<f32>, flow: &FlowField) -> Tensor<f32> {
    let s = pixels.shape();
    let batch = pixels.clone().reshape(&[1, s[0], s[1], s[2]]).unwrap();
    let f = flow.vectors.clone().reshape(&[1, 2, s[1], s[2]]).unwrap();
    warp_tensor(&batch, &f).reshape(s).unwrap()
}

impl Warp for Frame {
    fn warp(&self, flow: &FlowField) -> Result<Self> {
        check_size(self.height(), self.width(), flow)?;
        Ok(Frame {
            pixels: warp_chw(&self.pixels, flow),
            time_index: flow.target_index,
        })
    }
}

impl Warp for FeatureMap {
    /// Accepts a full-resolution flow when the feature grid is an integer
    /// fraction of it; the flow is then downscaled first.
    fn warp(&self, flow: &FlowField) -> Result<Self> {
        let (h, w) = (self.activations.dim(1), self.activations.dim(2));
        let scaled;
        let flow = if flow.height() != h && h > 0 && flow.height() % h == 0 {
            let r = flow.height() / h;
            scaled = flow.downscale(r);
            &scaled
        } else {
            flow
        };
        check_size(h, w, flow)?;
        Ok(FeatureMap {
            activations: warp_chw(&self.activations, flow),
            time_index: flow.target_index,
        })
    }
}
