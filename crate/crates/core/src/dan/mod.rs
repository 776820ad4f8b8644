//! Controller-based task adaptation on top of a frozen base network.

mod alpha;
mod controller;
mod cost;
mod network;

pub use alpha::{argmax, one_hot, select_alpha_from_decider, set_alpha, AlphaBinding, AlphaSelector, AlphaSpec};
pub use controller::{
    adapt_filters, adapt_weights, approximation_residual, init_controller, least_squares_controller,
    multitask_conv, switched_conv, ControllerMode, ControllerModule, InitScheme,
};
pub use cost::{
    amortized_cost, controller_cost_ratio, layer_cost_ratio, network_cost, parameter_cost, quantized_storage_fraction, total_cost,
    CostReport, LayerCost,
};
pub use network::{
    Architecture, AttachSpec, ConvSpec, DanNetwork, ForwardOptions, ForwardPass, LayerPlan, LayerSpec, ParamKey,
    Task, TaskConv,
};
