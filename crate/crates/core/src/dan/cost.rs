//! Parameter accounting for added tasks.

use log::warn;
use serde::Serialize;

use super::controller::ControllerMode;
use super::network::{Architecture, DanNetwork, TaskConv};
use crate::error::{DanError, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCost {
    pub layer: usize,
    pub c_out: usize,
    /// Flattened filter length `C_i * k * k`.
    pub filter_len: usize,
    /// New parameters over the layer's original parameters.
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    /// Learnable parameters of one network (conv, batch norm, head).
    pub base_params: usize,
    /// Parameters added by one extra task.
    pub task_params: usize,
    /// `task_params / base_params`
    pub increment: f64,
    pub tasks: usize,
    /// Parameters for all tasks over `base_params`.
    pub total: f64,
    pub amortized: f64,
}

/// `(C_o + 1) / (D + 1)` for a full controller: `C_o^2 + C_o` new values
/// against `C_o * D + C_o` original ones.
pub fn layer_cost_ratio(c_out: usize, filter_len: usize) -> f64 {
    if c_out >= filter_len {
        warn!("controller with C_o = {c_out} >= D = {filter_len} adds at least as many parameters as the layer holds");
    }
    (c_out as f64 + 1.0) / (filter_len as f64 + 1.0)
}

/// Per-layer cost ratio of one controller in the given mode.
pub fn controller_cost_ratio(mode: ControllerMode, c_out: usize, filter_len: usize) -> f64 {
    match mode {
        ControllerMode::Linear => layer_cost_ratio(c_out, filter_len),
        ControllerMode::Diagonal => 2.0 / (filter_len as f64 + 1.0),
    }
}

/// `1 + increment * (tasks - 1)`
pub fn total_cost(increment: f64, tasks: usize) -> f64 {
    1.0 + increment * tasks.saturating_sub(1) as f64
}

pub fn amortized_cost(increment: f64, tasks: usize) -> f64 {
    total_cost(increment, tasks) / tasks.max(1) as f64
}

/// Cost of one task's increment stored at `bits` per value, relative to a
/// 32-bit base network.
pub fn quantized_storage_fraction(increment: f64, bits: u32) -> f64 {
    increment * bits as f64 / 32.0
}

fn base_count(arch: &Architecture) -> Result<(usize, usize, usize)> {
    let conv: usize = arch.conv_specs().iter().map(|s| s.c_out * s.c_in * s.kernel * s.kernel + s.c_out).sum();
    let bn: usize = arch.bn_channels().iter().map(|c| 2 * c).sum();
    let mut head = 0;
    let mut prev = arch.feature_len()?;
    for &w in &arch.head {
        head += prev * w + w;
        prev = w;
    }
    Ok((conv, bn, head))
}

/// Cost of adding tasks with a controller of `mode` on every conv layer, a
/// fresh head of the base shape and fresh batch-norm parameters.
pub fn parameter_cost(arch: &Architecture, tasks: usize, mode: ControllerMode) -> Result<CostReport> {
    if tasks == 0 {
        return Err(DanError::InvalidArgument("task count must be at least 1".into()));
    }
    let (conv, bn, head) = base_count(arch)?;
    let base_params = conv + bn + head;
    let mut layers = Vec::new();
    let mut ctrl = 0;
    for (layer, s) in arch.conv_specs().iter().enumerate() {
        let d = s.c_in * s.kernel * s.kernel;
        ctrl += match mode {
            ControllerMode::Linear => s.c_out * s.c_out + s.c_out,
            ControllerMode::Diagonal => 2 * s.c_out,
        };
        layers.push(LayerCost { layer, c_out: s.c_out, filter_len: d, ratio: controller_cost_ratio(mode, s.c_out, d) });
    }
    Ok(report(layers, base_params, ctrl + bn + head, tasks))
}

/// Cost of an existing network, counting what each added task really owns.
/// The increment is averaged over added tasks.
pub fn network_cost(net: &DanNetwork) -> Result<CostReport> {
    let (conv, bn, head) = base_count(&net.arch)?;
    let base_params = conv + bn + head;
    let tasks = net.task_count();
    let mut added = 0;
    let mut layers = Vec::new();
    for (layer, base) in net.convs.iter().enumerate() {
        let d = base.filter_len();
        let mut ratio = 0.0;
        for t in &net.tasks[1..] {
            ratio += match &t.convs[layer] {
                TaskConv::Controlled(c) => controller_cost_ratio(c.mode, c.c_out(), d),
                TaskConv::Independent(_) => 1.0,
            };
        }
        if tasks > 1 {
            ratio /= (tasks - 1) as f64;
        } else {
            ratio = layer_cost_ratio(base.c_out(), d);
        }
        layers.push(LayerCost { layer, c_out: base.c_out(), filter_len: d, ratio });
    }
    for t in &net.tasks[1..] {
        added += bn + t.head.param_count();
        for (c, base) in t.convs.iter().zip(&net.convs) {
            added += match c {
                TaskConv::Controlled(c) => c.param_count(),
                TaskConv::Independent(_) => base.weights.len() + base.bias.len(),
            };
        }
    }
    let task_params = if tasks > 1 { added / (tasks - 1) } else { 0 };
    let mut r = report(layers, base_params, task_params, tasks);
    if tasks > 1 {
        r.total = (base_params + added) as f64 / base_params as f64;
        r.amortized = r.total / tasks as f64;
    }
    Ok(r)
}

fn report(layers: Vec<LayerCost>, base_params: usize, task_params: usize, tasks: usize) -> CostReport {
    let increment = task_params as f64 / base_params as f64;
    CostReport {
        layers,
        base_params,
        task_params,
        increment,
        tasks,
        total: total_cost(increment, tasks),
        amortized: amortized_cost(increment, tasks),
    }
}
