//! The learnable representation-flow layer.

mod flow;
mod normalize;
mod optim;
mod wrapper;

pub use flow::{
    rep_flow_backward, rep_flow_forward, Branch, FlowGrads, FlowParamGrads, FlowParams, FlowTape,
    IterationRecord, LearnFlags, DIV_X_INIT, DIV_Y_INIT, SOBEL_X_INIT, SOBEL_Y_INIT,
};
pub use normalize::{normalize_255, normalize_255_backward, NormalizeTape, NORMALIZED_MAX};
pub use optim::{
    step_conv, step_flow_params, step_layer, ConvMomentum, FlowMomentum, LayerMomentum, Sgd,
};
pub(crate) use wrapper::per_channel;
pub use wrapper::{
    flow_conv_flow, flow_conv_flow_backward, flow_conv_flow_taped, layer_backward, layer_forward,
    layer_forward_taped, stack_flows, FcfGrads, FcfTape, GradientBundle, LayerTape, LayerWeights,
    DEFAULT_C_PRIME,
};
