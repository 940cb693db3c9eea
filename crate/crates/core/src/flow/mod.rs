//! Image-level alignment: flow estimation, backward warping, and the flow
//! losses.

pub mod dvfl;
mod estimator;
mod loss;
mod warp;

pub use estimator::{FlowBackend, FlowEstimator, FlowPairing, FlowSettings};
pub use loss::{
    flow_loss, flow_loss_graph, masked_flow_finetune_graph, masked_flow_finetune_loss,
    masked_flow_term_graph,
};
#[allow(unused_imports)]
pub(crate) use loss::{flow_batch, frame_batch, mask_batch, masked_term};
pub use warp::{warp_tensor, Warp};
