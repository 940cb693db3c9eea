//! Stage-two self-supervised losses and their weighted total.
//!
//! Every masked term divides by the number of unmasked elements of each
//! frame, then averages over frames.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{flow_batch, frame_batch, mask_batch, masked_term};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};
use crate::types::{FlowField, Frame, LossReport, RaindropMask, DEFAULT_LAMBDA_T};

/// Number of neighbours in the default five-frame window.
pub const NEIGHBOURS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_t: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_t: DEFAULT_LAMBDA_T,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_t: f64) -> Result<Self> {
        if !(lambda_t > 0.0 && lambda_t.is_finite()) {
            return Err(Error::Invalid(format!("lambda_t must be > 0, got {lambda_t}")));
        }
        Ok(Self { lambda_t })
    }

    /// Named settings: `default` (0.5), `strong` (1.0, tends to wash out
    /// colour) and `weak` (0.1, too little temporal smoothing).
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Self::new(DEFAULT_LAMBDA_T),
            "strong" => Self::new(1.0),
            "weak" => Self::new(0.1),
            other => Err(Error::Config(format!(
                "unknown loss preset `{other}` (expected default, strong or weak)"
            ))),
        }
    }
}

/// Background of the output must match the input outside raindrops.
pub fn mask_consistency_graph<T: Real>(g: &mut Graph<T>, o_t: Var, i_t: Var, weight: &Tensor<T>) -> Var {
    masked_term(g, o_t, i_t, weight)
}

/// Average over neighbours of the masked error between `W(O_t, F(t -> i))`
/// and `target_i`, weighted by neighbour `i`'s mask. Used with the rainy
/// neighbours for mask correlation and with neighbour outputs for temporal
/// consistency.
pub fn warped_masked_average<T: Real>(
    g: &mut Graph<T>,
    o_t: Var,
    neighbours: &[(Var, Var, Tensor<T>)],
) -> Result<Var> {
    if neighbours.is_empty() {
        return Err(Error::Invalid("loss needs at least one neighbour".into()));
    }
    let w = T::one() / T::c(neighbours.len() as f64);
    let terms: Vec<(Var, T)> = neighbours
        .iter()
        .map(|(target, flow, m)| {
            let warped = g.warp(o_t, *flow);
            (masked_term(g, warped, *target, m), w)
        })
        .collect();
    Ok(g.weighted_sum(&terms))
}

pub fn mask_correlation_graph<T: Real>(
    g: &mut Graph<T>,
    o_t: Var,
    neighbours: &[(Var, Var, Tensor<T>)],
) -> Result<Var> {
    warped_masked_average(g, o_t, neighbours)
}

pub fn temporal_consistency_graph<T: Real>(
    g: &mut Graph<T>,
    o_t: Var,
    neighbour_outputs: &[(Var, Var, Tensor<T>)],
) -> Result<Var> {
    warped_masked_average(g, o_t, neighbour_outputs)
}

/// Graph form of the weighted total.
pub fn total_graph<T: Real>(
    g: &mut Graph<T>,
    flow: Var,
    mask_ct: Var,
    mask_cl: Var,
    temp: Var,
    weights: LossWeights,
) -> Var {
    g.weighted_sum(&[
        (flow, T::one()),
        (mask_ct, T::one()),
        (mask_cl, T::one()),
        (temp, T::c(weights.lambda_t)),
    ])
}

fn check_pair(a: &Frame, b: &Frame, m: &RaindropMask) -> Result<()> {
    if a.pixels.shape() != b.pixels.shape() || m.height() != a.height() || m.width() != a.width() {
        return Err(Error::Shape(format!(
            "loss inputs disagree: {:?}, {:?}, mask {}x{}",
            a.pixels.shape(),
            b.pixels.shape(),
            m.height(),
            m.width()
        )));
    }
    Ok(())
}

pub fn mask_consistency_loss(o_t: &Frame, i_t: &Frame, mask_t: &RaindropMask) -> Result<f64> {
    check_pair(o_t, i_t, mask_t)?;
    let mut g = Graph::<f64>::new();
    let a = g.constant(frame_batch(o_t));
    let b = g.constant(frame_batch(i_t));
    let l = mask_consistency_graph(&mut g, a, b, &mask_batch(mask_t));
    Ok(g.value(l).item())
}

fn warped_average_loss(
    o_t: &Frame,
    neighbours: &[(Frame, RaindropMask, FlowField)],
    expected: usize,
) -> Result<f64> {
    if neighbours.len() != expected {
        return Err(Error::Invalid(format!(
            "expected {expected} neighbours, got {}",
            neighbours.len()
        )));
    }
    let mut g = Graph::<f64>::new();
    let o = g.constant(frame_batch(o_t));
    let mut items = Vec::with_capacity(neighbours.len());
    for (f, m, fl) in neighbours {
        check_pair(o_t, f, m)?;
        if fl.height() != o_t.height() || fl.width() != o_t.width() {
            return Err(Error::Shape("flow does not match frame size".into()));
        }
        items.push((g.constant(frame_batch(f)), g.constant(flow_batch(fl)), mask_batch(m)));
    }
    let l = warped_masked_average(&mut g, o, &items)?;
    Ok(g.value(l).item())
}

/// Neighbours are `(I_i, mask_i, F(t -> i))`; exactly four are required.
pub fn mask_correlation_loss(o_t: &Frame, neighbours: &[(Frame, RaindropMask, FlowField)]) -> Result<f64> {
    warped_average_loss(o_t, neighbours, NEIGHBOURS)
}

/// As [`mask_correlation_loss`] for a window with `n` neighbours.
pub fn mask_correlation_loss_n(
    o_t: &Frame,
    neighbours: &[(Frame, RaindropMask, FlowField)],
    n: usize,
) -> Result<f64> {
    warped_average_loss(o_t, neighbours, n)
}

/// Neighbours are `(O_i, mask_i, F(t -> i))`.
pub fn temporal_consistency_loss(
    o_t: &Frame,
    neighbour_outputs: &[(Frame, RaindropMask, FlowField)],
) -> Result<f64> {
    if neighbour_outputs.is_empty() {
        return Err(Error::Missing("neighbour outputs for the temporal loss".into()));
    }
    warped_average_loss(o_t, neighbour_outputs, neighbour_outputs.len())
}

pub fn total_loss(flow: f64, mask_ct: f64, mask_cl: f64, temp: f64, weights: LossWeights) -> Result<LossReport> {
    LossReport::new(flow, mask_ct, mask_cl, temp, weights.lambda_t)
}

/// One line of the per-step loss log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub flow: f64,
    pub mask_ct: f64,
    pub mask_cl: f64,
    pub temp: f64,
    pub total: f64,
}

impl LossRecord {
    pub fn new(step: u64, r: &LossReport) -> Self {
        Self {
            step,
            flow: r.flow,
            mask_ct: r.mask_ct,
            mask_cl: r.mask_cl,
            temp: r.temp,
            total: r.total,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("loss record serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::MaskMode;

    fn constant(v: f32, t: i64) -> Frame {
        Frame::new(Tensor::full(&[3, 6, 6], v), t).unwrap()
    }

    fn keep() -> RaindropMask {
        RaindropMask::keep_all(6, 6)
    }

    #[test]
    fn weighted_total_arithmetic() {
        let r = total_loss(0.1, 0.2, 0.3, 0.4, LossWeights::default()).unwrap();
        assert_eq!(r.total, 0.1 + 0.2 + 0.3 + 0.5 * 0.4);
        assert!((r.total - 0.8).abs() < 1e-15);
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0, LossWeights::default()).unwrap().total, 0.0);
        assert!(total_loss(0.0, f64::NAN, 0.0, 0.0, LossWeights::default())
            .unwrap_err()
            .to_string()
            .contains("mask_ct"));
    }

    #[test]
    fn presets() {
        assert_eq!(LossWeights::preset("strong").unwrap().lambda_t, 1.0);
        assert_eq!(LossWeights::preset("weak").unwrap().lambda_t, 0.1);
        assert_eq!(LossWeights::preset("default").unwrap().lambda_t, 0.5);
        assert!(LossWeights::preset("x").is_err());
        assert!(LossWeights::new(0.0).is_err());
    }

    #[test]
    fn one_neighbour_of_four_contributes_a_quarter() {
        let o = constant(0.5, 2);
        let mut nb: Vec<_> = [0, 1, 3, 4]
            .iter()
            .map(|&t| (constant(0.5, t), keep(), FlowField::zeros(6, 6, 2, t)))
            .collect();
        nb[1].0 = constant(0.7, 1);
        let l = mask_correlation_loss(&o, &nb).unwrap();
        let d = 0.7f32 as f64 - 0.5f32 as f64;
        assert!((l - d * d / 4.0).abs() < 1e-15);
        assert!(mask_correlation_loss(&o, &nb[..3]).is_err());
    }

    #[test]
    fn flickering_outputs() {
        let o = constant(0.4, 2);
        let nb: Vec<_> = [0, 1, 3, 4]
            .iter()
            .map(|&t| (constant(0.6, t), keep(), FlowField::zeros(6, 6, 2, t)))
            .collect();
        let l = temporal_consistency_loss(&o, &nb).unwrap();
        let d = 0.6f32 as f64 - 0.4f32 as f64;
        assert!((l - d * d).abs() < 1e-15);
        assert!(temporal_consistency_loss(&o, &[]).is_err());
    }

    #[test]
    fn differences_inside_raindrops_are_ignored() {
        let i = constant(0.3, 0);
        let mut o = i.clone();
        let mut ev = Tensor::zeros(&[1, 6, 6]);
        ev.data_mut()[7] = 0.5;
        let m = RaindropMask::from_evidence(ev, 0.05, MaskMode::Hard);
        for c in 0..3 {
            o.pixels.data_mut()[c * 36 + 7] = 0.9;
        }
        assert_eq!(mask_consistency_loss(&o, &i, &m).unwrap(), 0.0);
        let all = RaindropMask::from_evidence(Tensor::full(&[1, 6, 6], 1.0), 0.05, MaskMode::Hard);
        assert_eq!(mask_consistency_loss(&o, &i, &all).unwrap(), 0.0);
    }

    #[test]
    fn json_line_has_the_declared_keys() {
        let r = total_loss(0.1, 0.2, 0.3, 0.4, LossWeights::default()).unwrap();
        let line = LossRecord::new(7, &r).to_json_line();
        assert!(line.starts_with("{\"step\":7,\"flow\":0.1,\"mask_ct\":0.2,\"mask_cl\":0.3,\"temp\":0.4,\"total\":"));
        let back: LossRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back, LossRecord::new(7, &r));
    }
}
