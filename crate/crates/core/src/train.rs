//! Optimizers, the training loop, evaluation and multi-trial scenario runs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::bars::{gen_bars, scenario_setup, toy_network, BarsConfig, BarsSplit, Dataset, FirstLayerInit, ScenarioSpec, CLASSES};
use crate::dan::{
    argmax, one_hot, AttachSpec, ControllerMode, DanNetwork, ForwardOptions, InitScheme, LayerPlan, ParamKey,
    TaskConv,
};
use crate::error::{DanError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Halve the rate after every `n` epochs.
    HalveEvery(usize),
}

impl LrSchedule {
    pub fn rate(self, base: f64, epoch: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::HalveEvery(0) => base,
            LrSchedule::HalveEvery(n) => base * 0.5f64.powi((epoch / n) as i32),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub momentum: f64,
    pub schedule: LrSchedule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            momentum: 0.0,
            schedule: LrSchedule::Constant,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(DanError::InvalidArgument(format!("learning rate {} must be positive", self.learning_rate)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

/// One bias-corrected Adam update at rate `lr`.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &OptimizerConfig, lr: f64) {
    assert_eq!(params.len(), grads.len(), "parameter and gradient lengths");
    if state.m.len() != params.len() {
        state.m = vec![0.0; params.len()];
        state.v = vec![0.0; params.len()];
        state.t = 0;
    }
    state.t += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<f64>,
}

/// `v <- momentum * v + g; p <- p - lr * v`
pub fn sgd_step(params: &mut [f64], grads: &[f64], state: &mut SgdState, cfg: &OptimizerConfig, lr: f64) {
    assert_eq!(params.len(), grads.len(), "parameter and gradient lengths");
    if cfg.momentum == 0.0 {
        for (p, g) in params.iter_mut().zip(grads) {
            *p -= lr * g;
        }
        return;
    }
    if state.velocity.len() != params.len() {
        state.velocity = vec![0.0; params.len()];
    }
    for i in 0..params.len() {
        state.velocity[i] = cfg.momentum * state.velocity[i] + grads[i];
        params[i] -= lr * state.velocity[i];
    }
}

#[derive(Clone, Debug, PartialEq)]
enum SlotState {
    Adam(AdamState),
    Sgd(SgdState),
}

/// Per-parameter optimizer state for a network.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub cfg: OptimizerConfig,
    state: BTreeMap<ParamKey, SlotState>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, state: BTreeMap::new() })
    }

    /// Applies gradients, skipping frozen tensors and masking controller
    /// gradients of diagonal controllers.
    pub fn step(&mut self, net: &mut DanNetwork, grads: Vec<(ParamKey, Tensor)>, lr: f64) {
        for (key, grad) in grads {
            if net.is_frozen(key) {
                continue;
            }
            let mut g = grad.into_data();
            net.mask_gradient(key, &mut g);
            let Some(t) = net.tensor_mut(key) else { continue };
            let slot = self.state.entry(key).or_insert_with(|| match self.cfg.kind {
                OptimizerKind::Adam => SlotState::Adam(AdamState::default()),
                OptimizerKind::Sgd => SlotState::Sgd(SgdState::default()),
            });
            match slot {
                SlotState::Adam(s) => adam_step(t.data_mut(), &g, s, &self.cfg, lr),
                SlotState::Sgd(s) => sgd_step(t.data_mut(), &g, s, &self.cfg, lr),
            }
        }
    }
}

/// What a training run may change.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransferMode {
    /// Full controllers; base frozen.
    DanLinear,
    /// Diagonal controllers; base frozen.
    DanDiagonal,
    /// Head only.
    FtLast,
    /// Every parameter of the task.
    FtFull,
    /// Every parameter except batch-norm coefficients and statistics.
    FtFullBnOff,
    /// Every parameter, starting from random filters.
    Scratch,
}

impl TransferMode {
    pub const ALL: [TransferMode; 6] = [
        TransferMode::DanLinear,
        TransferMode::DanDiagonal,
        TransferMode::FtLast,
        TransferMode::FtFull,
        TransferMode::FtFullBnOff,
        TransferMode::Scratch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransferMode::DanLinear => "dan-linear",
            TransferMode::DanDiagonal => "dan-diagonal",
            TransferMode::FtLast => "ft-last",
            TransferMode::FtFull => "ft-full",
            TransferMode::FtFullBnOff => "ft-full-bn-off",
            TransferMode::Scratch => "scratch",
        }
    }

    pub fn controller_mode(self) -> Option<ControllerMode> {
        match self {
            TransferMode::DanLinear => Some(ControllerMode::Linear),
            TransferMode::DanDiagonal => Some(ControllerMode::Diagonal),
            _ => None,
        }
    }

    /// Attach plan for a task trained in this mode.
    pub fn layer_plan(self, scheme: InitScheme) -> LayerPlan {
        match self.controller_mode() {
            Some(mode) => LayerPlan::Control { scheme, mode },
            None if self == TransferMode::Scratch => LayerPlan::Random,
            None => LayerPlan::CopyBase,
        }
    }

    pub fn attach_spec(self, name: &str, head: Vec<usize>, conv_layers: usize, scheme: InitScheme) -> AttachSpec {
        AttachSpec { name: name.to_string(), head, layers: vec![self.layer_plan(scheme); conv_layers] }
    }
}

impl fmt::Display for TransferMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TransferMode {
    type Err = DanError;

    fn from_str(s: &str) -> Result<Self> {
        TransferMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| DanError::InvalidArgument(format!("unknown transfer mode {s:?}")))
    }
}

/// The parameters `mode` allows to change when training `task`.
pub fn trainable_keys(net: &DanNetwork, task: usize, mode: TransferMode) -> Result<BTreeSet<ParamKey>> {
    if task >= net.task_count() {
        return Err(DanError::InvalidArgument(format!("no task {task}")));
    }
    if task == 0 && net.base_frozen {
        return Err(DanError::InvalidArgument("the base task is frozen once other tasks are attached".into()));
    }
    if let Some(cm) = mode.controller_mode() {
        let controllers: Vec<ControllerMode> = net.tasks[task]
            .convs
            .iter()
            .filter_map(|c| match c {
                TaskConv::Controlled(c) => Some(c.mode),
                TaskConv::Independent(_) => None,
            })
            .collect();
        if controllers.is_empty() || controllers.iter().any(|&m| m != cm) {
            return Err(DanError::InvalidArgument(format!("task {task} has no {mode} controllers")));
        }
    }
    let keys = net.task_keys(task).into_iter();
    let set: BTreeSet<ParamKey> = match mode {
        TransferMode::FtLast => {
            keys.filter(|k| matches!(k, ParamKey::HeadWeight { .. } | ParamKey::HeadBias { .. })).collect()
        }
        TransferMode::FtFullBnOff => keys.filter(|k| !k.is_batch_norm()).collect(),
        _ => keys.collect(),
    };
    Ok(set)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { optimizer: OptimizerConfig::default(), epochs: 50, batch_size: 32 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub scenario: String,
    pub trial: usize,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
}

impl RunHistory {
    pub fn final_val_acc(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.val_acc)
    }
}

/// Trains `task` on `train`, evaluating on `val` after every epoch.
#[allow(clippy::too_many_arguments)]
pub fn train(
    net: &mut DanNetwork,
    train: &Dataset,
    val: &Dataset,
    task: usize,
    mode: TransferMode,
    cfg: &TrainConfig,
    seed: u64,
    label: &str,
) -> Result<RunHistory> {
    if train.is_empty() {
        return Err(DanError::EmptyDataset);
    }
    if cfg.batch_size == 0 {
        return Err(DanError::InvalidArgument("batch size must be positive".into()));
    }
    let trainable = trainable_keys(net, task, mode)?;
    let bn_train = trainable.iter().any(|k| k.is_batch_norm());
    let opts = ForwardOptions { trainable, bn_train, stop_after_conv: None };
    let alpha = one_hot(net.task_count(), task);
    let mut optimizer = Optimizer::new(cfg.optimizer.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    info!(
        "train {label}: task={task} mode={mode} optimizer={:?} lr={} schedule={:?} batch={} epochs={} seed={seed}",
        cfg.optimizer.kind, cfg.optimizer.learning_rate, cfg.optimizer.schedule, cfg.batch_size, cfg.epochs
    );
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = RunHistory { scenario: label.to_string(), trial: 0, seed, epochs: Vec::with_capacity(cfg.epochs) };
    for epoch in 0..cfg.epochs {
        let lr = cfg.optimizer.schedule.rate(cfg.optimizer.learning_rate, epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = train.batch(chunk);
            let tape = Tape::new();
            let pass = net.forward(&tape, tape.constant(x), &alpha, &opts)?;
            let loss = pass.output.softmax_cross_entropy(&labels)?;
            loss.backward()?;
            loss_sum += loss.value().data()[0] * chunk.len() as f64;
            correct += count_correct(&pass.output.value(), &labels);
            let mut grads: BTreeMap<ParamKey, Tensor> = BTreeMap::new();
            for (key, var) in &pass.params {
                let Some(g) = var.grad() else { continue };
                match grads.get_mut(key) {
                    Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                    None => {
                        grads.insert(*key, g);
                    }
                }
            }
            for (bn, t, stats) in &pass.bn_stats {
                net.bns[*bn].update_running(*t, stats);
            }
            optimizer.step(net, grads.into_iter().collect(), lr);
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            val_acc: if val.is_empty() { 0.0 } else { evaluate(net, val, task)? },
        };
        log::debug!("{label} epoch {epoch}: {record:?}");
        history.epochs.push(record);
    }
    Ok(history)
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let classes = logits.dims()[1];
    logits.data().chunks(classes).zip(labels).filter(|(row, &l)| argmax(row) == l).count()
}

const EVAL_BATCH: usize = 250;

/// Predicted class per example under task `task`.
pub fn predict(net: &DanNetwork, data: &Dataset, task: usize) -> Result<Vec<usize>> {
    predict_with(net, data, &one_hot(net.task_count(), task))
}

pub fn predict_with(net: &DanNetwork, data: &Dataset, alpha: &[f64]) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, _) = data.batch(chunk);
        let logits = net.logits_with(&x, alpha)?;
        let classes = logits.dims()[1];
        out.extend(logits.data().chunks(classes).map(argmax));
    }
    Ok(out)
}

/// Fraction of matching predictions.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(DanError::EmptyDataset);
    }
    if predictions.len() != labels.len() {
        return Err(DanError::InvalidArgument(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    Ok(predictions.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
}

/// Top-1 accuracy of task `task` on `data`.
pub fn evaluate(net: &DanNetwork, data: &Dataset, task: usize) -> Result<f64> {
    accuracy(&predict(net, data, task)?, &data.labels)
}

/// A toy network set up for one scenario: task 0 holds the scenario's first
/// layer filter, task 1 is the trainable task. Returns the network, the
/// task index and the mode to train it with.
pub fn scenario_network(spec: &ScenarioSpec, rng: &mut ChaCha8Rng) -> Result<(DanNetwork, usize, TransferMode)> {
    let mut net = DanNetwork::new(toy_network(), "base", rng)?;
    net.convs[0] = spec.first_layer(rng);
    let (first, mode) = match (spec.first_layer_trainable, spec.init) {
        (false, _) => (
            LayerPlan::Control { scheme: InitScheme::Diagonal, mode: ControllerMode::Diagonal },
            TransferMode::DanDiagonal,
        ),
        (true, FirstLayerInit::Random) => (LayerPlan::Random, TransferMode::Scratch),
        (true, _) => (LayerPlan::CopyBase, TransferMode::FtFull),
    };
    let attach = AttachSpec {
        name: spec.variant.name().to_string(),
        head: vec![50, CLASSES],
        layers: vec![first, LayerPlan::Random],
    };
    let task = net.attach_task(&attach, None, rng)?;
    Ok((net, task, mode))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochAggregate {
    pub epoch: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialsReport {
    pub spec: ScenarioSpec,
    pub histories: Vec<RunHistory>,
    /// Validation accuracy statistics across trials per epoch.
    pub per_epoch: Vec<EpochAggregate>,
}

impl TrialsReport {
    pub fn final_accuracies(&self) -> Vec<f64> {
        self.histories.iter().map(RunHistory::final_val_acc).collect()
    }

    pub fn final_mean(&self) -> f64 {
        self.per_epoch.last().map_or(0.0, |a| a.mean)
    }

    pub fn final_max(&self) -> f64 {
        self.per_epoch.last().map_or(0.0, |a| a.max)
    }
}

/// Per-epoch mean, min and max of validation accuracy.
pub fn aggregate(histories: &[RunHistory]) -> Vec<EpochAggregate> {
    let epochs = histories.iter().map(|h| h.epochs.len()).min().unwrap_or(0);
    (0..epochs)
        .map(|e| {
            let vals: Vec<f64> = histories.iter().map(|h| h.epochs[e].val_acc).collect();
            EpochAggregate {
                epoch: e,
                mean: vals.iter().sum::<f64>() / vals.len() as f64,
                min: vals.iter().copied().fold(f64::INFINITY, f64::min),
                max: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect()
}

/// Runs `spec.trials` independent trials. The dataset comes from
/// `base_seed`; trial `i` initializes and shuffles with `base_seed + i`.
pub fn run_trials(spec: &ScenarioSpec, cfg: &TrainConfig, base_seed: u64) -> Result<TrialsReport> {
    let data = gen_bars(&BarsConfig { variant: spec.variant, seed: base_seed, ..Default::default() })?;
    run_trials_on(spec, cfg, base_seed, &data)
}

/// [`run_trials`] on a given dataset.
pub fn run_trials_on(spec: &ScenarioSpec, cfg: &TrainConfig, base_seed: u64, data: &BarsSplit) -> Result<TrialsReport> {
    if spec.trials == 0 {
        return Err(DanError::InvalidArgument("at least one trial".into()));
    }
    let cfg = TrainConfig { epochs: spec.epochs, ..cfg.clone() };
    info!(
        "scenario {}: variant={} init={:?} first_layer_trainable={} filter={:?}/{:?} noise_sigma={} trials={} epochs={} batch={} lr={}",
        spec.scenario,
        spec.variant,
        spec.init,
        spec.first_layer_trainable,
        spec.filter_orientation,
        spec.filter_channel,
        spec.noise_sigma,
        spec.trials,
        cfg.epochs,
        cfg.batch_size,
        cfg.optimizer.learning_rate
    );
    let mut histories = Vec::with_capacity(spec.trials);
    for trial in 0..spec.trials {
        let seed = base_seed + trial as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut net, task, mode) = scenario_network(spec, &mut rng)?;
        let mut h = train(&mut net, &data.train, &data.test, task, mode, &cfg, seed, spec.scenario.name())?;
        h.trial = trial;
        info!("scenario {} trial {trial}: final val acc {:.4}", spec.scenario, h.final_val_acc());
        histories.push(h);
    }
    let per_epoch = aggregate(&histories);
    Ok(TrialsReport { spec: spec.clone(), histories, per_epoch })
}

/// Runs a named scenario with default training settings.
pub fn run_named(name: &str, trials: usize, epochs: usize, base_seed: u64) -> Result<TrialsReport> {
    let mut spec = scenario_setup(name)?;
    spec.trials = trials;
    spec.epochs = epochs;
    run_trials(&spec, &TrainConfig::default(), base_seed)
}
