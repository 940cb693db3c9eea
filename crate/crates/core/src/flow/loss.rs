//! Image-level alignment losses.

use log::warn;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};
use crate::types::{FlowField, Frame, RaindropMask};

/// Mean over frames of the per-frame mean squared error between each warped
/// neighbour and the current frame.
pub fn flow_loss_graph<T: Real>(g: &mut Graph<T>, warped: &[Var], current: Var) -> Result<Var> {
    if warped.is_empty() {
        return Err(Error::Invalid("flow loss needs at least one warped frame".into()));
    }
    let terms: Vec<(Var, T)> = warped
        .iter()
        .map(|&w| (g.mse(w, current), T::one() / T::c(warped.len() as f64)))
        .collect();
    Ok(g.weighted_sum(&terms))
}

/// Masked alignment error of the current initial result warped onto one
/// neighbour: `|mask_i * (W(S_t, F(t -> i)) - S_i)|^2`, normalised by the
/// number of unmasked elements.
pub fn masked_flow_term_graph<T: Real>(
    g: &mut Graph<T>,
    s_t: Var,
    s_i: Var,
    flow_t_to_i: Var,
    weight: &Tensor<T>,
) -> Var {
    let warped = g.warp(s_t, flow_t_to_i);
    masked_term(g, warped, s_i, weight)
}

pub(crate) fn masked_term<T: Real>(g: &mut Graph<T>, a: Var, b: Var, weight: &Tensor<T>) -> Var {
    if weight.data().iter().all(|&w| w == T::zero()) {
        warn!("every pixel is masked as raindrop; loss term contributes 0");
    }
    g.masked_mse(a, b, weight)
}

/// Average of [`masked_flow_term_graph`] over neighbours.
pub fn masked_flow_finetune_graph<T: Real>(
    g: &mut Graph<T>,
    s_t: Var,
    neighbours: &[(Var, Var, Tensor<T>)],
) -> Result<Var> {
    if neighbours.is_empty() {
        return Err(Error::Invalid("flow fine-tune loss needs neighbours".into()));
    }
    let w = T::one() / T::c(neighbours.len() as f64);
    let terms: Vec<(Var, T)> = neighbours
        .iter()
        .map(|(s_i, f, m)| (masked_flow_term_graph(g, s_t, *s_i, *f, m), w))
        .collect();
    Ok(g.weighted_sum(&terms))
}

pub(crate) fn frame_batch<T: Real>(f: &Frame) -> Tensor<T> {
    f.to_batch().cast()
}

pub(crate) fn flow_batch<T: Real>(f: &FlowField) -> Tensor<T> {
    let (h, w) = (f.height(), f.width());
    f.vectors.clone().reshape(&[1, 2, h, w]).unwrap().cast()
}

pub(crate) fn mask_batch<T: Real>(m: &RaindropMask) -> Tensor<T> {
    m.weight_batch().cast()
}

fn check_same(a: &Frame, b: &Frame) -> Result<()> {
    if a.pixels.shape() != b.pixels.shape() {
        return Err(Error::Shape(format!(
            "frames differ: {:?} vs {:?}",
            a.pixels.shape(),
            b.pixels.shape()
        )));
    }
    Ok(())
}

/// Diagnostic alignment loss of warped initial results against the current
/// rainy frame.
pub fn flow_loss(warped: &[Frame], current: &Frame) -> Result<f64> {
    for w in warped {
        check_same(w, current)?;
    }
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = warped.iter().map(|w| g.constant(frame_batch(w))).collect();
    let cur = g.constant(frame_batch(current));
    let l = flow_loss_graph(&mut g, &vars, cur)?;
    Ok(g.value(l).item())
}

/// Masked fine-tuning loss for one neighbour `i`.
pub fn masked_flow_finetune_loss(
    s_t: &Frame,
    s_i: &Frame,
    flow_t_to_i: &FlowField,
    mask_i: &RaindropMask,
) -> Result<f64> {
    check_same(s_t, s_i)?;
    let mut g = Graph::<f64>::new();
    let a = g.constant(frame_batch(s_t));
    let b = g.constant(frame_batch(s_i));
    let f = g.constant(flow_batch(flow_t_to_i));
    let l = masked_flow_term_graph(&mut g, a, b, f, &mask_batch(mask_i));
    Ok(g.value(l).item())
}
