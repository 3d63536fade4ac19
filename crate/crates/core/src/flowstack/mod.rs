//! Squeeze, the shared-estimator flow stack, and both mapping directions.
//!
//! Blocks alternate row orientation: block `k` runs on the grid with its
//! rows reversed when `k` is odd. The latent grid is always reported in natural order.

mod estimator;
mod flow;
pub(crate) mod model;
pub(crate) mod squeeze;

pub use estimator::{ParamGrid, RowParams};
pub use flow::{
    block_reversed, estimator_forward, flow_forward, flow_forward_observed, flow_reverse,
    log_likelihood, FlowRun, ForwardObserver, ForwardTiming,
};
pub use model::{FlowModel, ModelDims, ParamSet};
pub use squeeze::{squeeze, unsqueeze, SqueezedAudio};

pub(crate) use flow::flow_graph;
