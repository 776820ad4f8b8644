//! Layer vocabulary: ReLU, max pooling, fully connected layers, per-task
//! batch-norm banks, classification heads and the softmax loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Var};
use crate::error::{shape_err, DanError, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

pub fn relu<'t>(x: &Var<'t>) -> Var<'t> {
    x.relu()
}

pub fn maxpool2d<'t>(x: &Var<'t>, window: usize, stride: usize) -> Result<Var<'t>> {
    x.maxpool2d(window, stride)
}

/// `x[N, D_in] * w[D_in, D_out] + b[D_out]`
pub fn fully_connected<'t>(x: &Var<'t>, w: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
    x.matmul(w)?.add_bias(b)
}

pub fn softmax_cross_entropy<'t>(logits: &Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    logits.softmax_cross_entropy(labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BnParams {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
        }
    }
}

/// One batch-norm layer holding a parameter set per registered task.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormBank {
    pub tasks: Vec<BnParams>,
    pub active_task: usize,
    pub mode: BnMode,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNormBank {
    pub fn new(channels: usize) -> Self {
        Self {
            tasks: vec![BnParams::new(channels)],
            active_task: 0,
            mode: BnMode::Eval,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.tasks[0].gamma.len()
    }

    /// Registers a new task whose parameters and statistics start as a copy
    /// of `source`'s. Returns the new task index.
    pub fn add_task_from(&mut self, source: usize) -> usize {
        let copy = self.tasks[source].clone();
        self.tasks.push(copy);
        self.tasks.len() - 1
    }

    pub fn set_active(&mut self, task: usize) -> Result<()> {
        if task >= self.tasks.len() {
            return Err(DanError::InvalidArgument(format!("bn bank has no task {task}")));
        }
        self.active_task = task;
        Ok(())
    }

    pub fn update_running(&mut self, task: usize, stats: &BatchStats) {
        let m = self.momentum;
        let p = &mut self.tasks[task];
        for (r, &b) in p.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in p.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = ((1.0 - m) * *r + m * b).max(0.0);
        }
    }

    /// Normalizes `x` with the active task's parameters as graph constants.
    /// Train mode uses and records batch statistics.
    pub fn forward<'t>(&mut self, x: &Var<'t>) -> Result<Var<'t>> {
        let task = self.active_task;
        let p = &self.tasks[task];
        if x.dims().get(1) != Some(&self.channels()) {
            return shape_err(format!("bn bank has {} channels, input {:?}", self.channels(), x.dims()));
        }
        let (gamma, beta) = constants(x, &p.gamma, &p.beta);
        match self.mode {
            BnMode::Train => {
                let (out, stats) = x.batch_norm_train(&gamma, &beta, self.eps)?;
                self.update_running(task, &stats);
                Ok(out)
            }
            BnMode::Eval => x.batch_norm_eval(&gamma, &beta, p.running_mean.data(), p.running_var.data(), self.eps),
        }
    }
}

fn constants<'t>(x: &Var<'t>, gamma: &Tensor, beta: &Tensor) -> (Var<'t>, Var<'t>) {
    let tape = x.tape();
    (tape.constant(gamma.clone()), tape.constant(beta.clone()))
}

/// Entry point matching the layer vocabulary: `batchnorm(x, bank)`.
pub fn batchnorm<'t>(x: &Var<'t>, bank: &mut BatchNormBank) -> Result<Var<'t>> {
    bank.forward(x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[d_in, d_out]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn random<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        Self { weight: Tensor::uniform(&[d_in, d_out], bound, rng), bias: Tensor::uniform(&[d_out], bound, rng) }
    }

    pub fn d_in(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.dims()[1]
    }
}

/// Fully connected stack mapping a flattened feature vector to task logits.
/// ReLU sits between consecutive layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub layers: Vec<Linear>,
    pub frozen: bool,
}

impl Head {
    /// `widths` lists every layer output, the last being the class count.
    pub fn random<R: Rng + ?Sized>(d_in: usize, widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) {
            return Err(DanError::InvalidArgument(format!("bad head widths {widths:?}")));
        }
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = d_in;
        for &w in widths {
            layers.push(Linear::random(prev, w, rng));
            prev = w;
        }
        Ok(Self { layers, frozen: false })
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(Linear::d_out).collect()
    }

    pub fn classes(&self) -> usize {
        self.layers.last().map_or(0, Linear::d_out)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }
}
