//! The adapted network: a frozen base plus, for every added task, one
//! convolution binding per conv layer, a batch-norm parameter set and a head.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::alpha::{AlphaSelector, AlphaSpec};
use super::controller::{adapt_filters, init_controller, mix_banks, ControllerMode, ControllerModule, InitScheme};
use crate::autodiff::{conv2d, BatchStats, Tape, Var};
use crate::error::{shape_err, DanError, Result};
use crate::nn::{BatchNormBank, Head};
use crate::tensor::{FilterBank, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv(ConvSpec),
    BatchNorm { channels: usize },
    Relu,
    MaxPool { window: usize, stride: usize },
}

/// Feature extractor layers followed by a flatten and a fully connected head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// `[channels, height, width]`
    pub input: [usize; 3],
    pub features: Vec<LayerSpec>,
    /// Output width of each head layer for the base task.
    pub head: Vec<usize>,
}

impl Architecture {
    /// Shape after every feature layer, starting with the input shape.
    pub fn shape_trace(&self) -> Result<Vec<[usize; 3]>> {
        let mut shapes = vec![self.input];
        let mut cur = self.input;
        for (i, layer) in self.features.iter().enumerate() {
            let [c, h, w] = cur;
            cur = match *layer {
                LayerSpec::Conv(s) => {
                    if s.c_in != c {
                        return shape_err(format!("layer {i}: conv expects {} channels, gets {c}", s.c_in));
                    }
                    let span = |d: usize| {
                        let p = d + 2 * s.padding;
                        if s.stride == 0 || p < s.kernel || !(p - s.kernel).is_multiple_of(s.stride) {
                            None
                        } else {
                            Some((p - s.kernel) / s.stride + 1)
                        }
                    };
                    match (span(h), span(w)) {
                        (Some(oh), Some(ow)) => [s.c_out, oh, ow],
                        _ => return shape_err(format!("layer {i}: conv output size not integral for {h}x{w}")),
                    }
                }
                LayerSpec::BatchNorm { channels } => {
                    if channels != c {
                        return shape_err(format!("layer {i}: batch norm over {channels} channels, gets {c}"));
                    }
                    cur
                }
                LayerSpec::Relu => cur,
                LayerSpec::MaxPool { window, stride } => {
                    if stride == 0 || h < window || w < window || (h - window) % stride != 0 || (w - window) % stride != 0 {
                        return shape_err(format!("layer {i}: {h}x{w} does not pool by {window}/{stride}"));
                    }
                    [c, (h - window) / stride + 1, (w - window) / stride + 1]
                }
            };
            shapes.push(cur);
        }
        Ok(shapes)
    }

    pub fn feature_len(&self) -> Result<usize> {
        let last = *self.shape_trace()?.last().expect("trace includes input");
        Ok(last.iter().product())
    }

    pub fn conv_specs(&self) -> Vec<ConvSpec> {
        self.features
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Conv(s) => Some(*s),
                _ => None,
            })
            .collect()
    }

    pub fn bn_channels(&self) -> Vec<usize> {
        self.features
            .iter()
            .filter_map(|l| match l {
                LayerSpec::BatchNorm { channels } => Some(*channels),
                _ => None,
            })
            .collect()
    }
}

/// How an added task realizes one base conv layer.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskConv {
    /// Recombination of the frozen base filters.
    Controlled(ControllerModule),
    /// Filters owned by the task, used by fine-tuning baselines and for
    /// layers outside the controller mask.
    Independent(FilterBank),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub name: String,
    pub head: Head,
    /// Empty for the base task.
    pub convs: Vec<TaskConv>,
}

/// Per-layer recipe used when attaching a task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "plan", rename_all = "snake_case")]
pub enum LayerPlan {
    Control { scheme: InitScheme, mode: ControllerMode },
    CopyBase,
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttachSpec {
    pub name: String,
    pub head: Vec<usize>,
    pub layers: Vec<LayerPlan>,
}

impl AttachSpec {
    /// Controllers on every conv layer.
    pub fn controlled(name: &str, head: Vec<usize>, conv_layers: usize, scheme: InitScheme, mode: ControllerMode) -> Self {
        Self { name: name.to_string(), head, layers: vec![LayerPlan::Control { scheme, mode }; conv_layers] }
    }
}

/// Names every tensor a network owns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKey {
    /// Task 0 addresses the base filters; other tasks their own filters.
    ConvWeight { task: usize, layer: usize },
    ConvBias { task: usize, layer: usize },
    ControllerW { task: usize, layer: usize },
    ControllerBias { task: usize, layer: usize },
    BnGamma { bn: usize, task: usize },
    BnBeta { bn: usize, task: usize },
    BnMean { bn: usize, task: usize },
    BnVar { bn: usize, task: usize },
    HeadWeight { task: usize, index: usize },
    HeadBias { task: usize, index: usize },
}

impl ParamKey {
    /// Running statistics, never touched by an optimizer.
    pub fn is_buffer(&self) -> bool {
        matches!(self, ParamKey::BnMean { .. } | ParamKey::BnVar { .. })
    }

    pub fn is_batch_norm(&self) -> bool {
        matches!(
            self,
            ParamKey::BnGamma { .. } | ParamKey::BnBeta { .. } | ParamKey::BnMean { .. } | ParamKey::BnVar { .. }
        )
    }

    pub fn task(&self) -> usize {
        match *self {
            ParamKey::ConvWeight { task, .. }
            | ParamKey::ConvBias { task, .. }
            | ParamKey::ControllerW { task, .. }
            | ParamKey::ControllerBias { task, .. }
            | ParamKey::BnGamma { task, .. }
            | ParamKey::BnBeta { task, .. }
            | ParamKey::BnMean { task, .. }
            | ParamKey::BnVar { task, .. }
            | ParamKey::HeadWeight { task, .. }
            | ParamKey::HeadBias { task, .. } => task,
        }
    }
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ParamKey::ConvWeight { task: 0, layer } => write!(f, "conv{layer}.weight"),
            ParamKey::ConvBias { task: 0, layer } => write!(f, "conv{layer}.bias"),
            ParamKey::ConvWeight { task, layer } => write!(f, "task{task}.conv{layer}.weight"),
            ParamKey::ConvBias { task, layer } => write!(f, "task{task}.conv{layer}.bias"),
            ParamKey::ControllerW { task, layer } => write!(f, "task{task}.conv{layer}.ctrl_w"),
            ParamKey::ControllerBias { task, layer } => write!(f, "task{task}.conv{layer}.ctrl_bias"),
            ParamKey::BnGamma { bn, task } => write!(f, "bn{bn}.task{task}.gamma"),
            ParamKey::BnBeta { bn, task } => write!(f, "bn{bn}.task{task}.beta"),
            ParamKey::BnMean { bn, task } => write!(f, "bn{bn}.task{task}.running_mean"),
            ParamKey::BnVar { bn, task } => write!(f, "bn{bn}.task{task}.running_var"),
            ParamKey::HeadWeight { task, index } => write!(f, "task{task}.fc{index}.weight"),
            ParamKey::HeadBias { task, index } => write!(f, "task{task}.fc{index}.bias"),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    /// Parameters that become gradient-requiring leaves.
    pub trainable: BTreeSet<ParamKey>,
    /// Use batch statistics in batch-norm layers.
    pub bn_train: bool,
    /// Stop after this conv layer's output (before its nonlinearity).
    pub stop_after_conv: Option<usize>,
}

pub struct ForwardPass<'t> {
    pub output: Var<'t>,
    pub params: Vec<(ParamKey, Var<'t>)>,
    /// `(bn layer, task, batch statistics)` for every train-mode bn call.
    pub bn_stats: Vec<(usize, usize, BatchStats)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DanNetwork {
    pub arch: Architecture,
    /// Base filters, one bank per conv layer.
    pub convs: Vec<FilterBank>,
    pub bns: Vec<BatchNormBank>,
    pub tasks: Vec<Task>,
    pub alpha: AlphaSelector,
    pub base_frozen: bool,
}

impl DanNetwork {
    /// A randomly initialized single-task network.
    pub fn new<R: Rng + ?Sized>(arch: Architecture, base_task: &str, rng: &mut R) -> Result<Self> {
        let feature_len = arch.feature_len()?;
        let convs = arch
            .conv_specs()
            .iter()
            .map(|s| FilterBank::random(s.c_out, s.c_in, s.kernel, rng))
            .collect();
        let bns = arch.bn_channels().into_iter().map(BatchNormBank::new).collect();
        let head = Head::random(feature_len, &arch.head, rng)?;
        Ok(Self {
            arch,
            convs,
            bns,
            tasks: vec![Task { name: base_task.to_string(), head, convs: Vec::new() }],
            alpha: AlphaSelector::new(1),
            base_frozen: false,
        })
    }

    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    pub fn task_index(&self, name: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.name == name)
    }

    /// Resolves a task given by index or by name.
    pub fn resolve_task(&self, id: &str) -> Result<usize> {
        if let Ok(i) = id.parse::<usize>() {
            if i < self.tasks.len() {
                return Ok(i);
            }
        }
        self.task_index(id).ok_or_else(|| DanError::InvalidArgument(format!("no task {id:?}")))
    }

    pub fn freeze_base(&mut self) {
        self.base_frozen = true;
        for c in &mut self.convs {
            c.frozen = true;
        }
        self.tasks[0].head.frozen = true;
    }

    pub fn set_alpha(&mut self, spec: AlphaSpec) -> Result<()> {
        self.alpha.set(spec)
    }

    /// Adds a task and returns its index. Freezes the base first; existing
    /// tasks are not touched. `targets` supplies one independently trained
    /// bank per conv layer for least-squares controller initialization.
    pub fn attach_task<R: Rng + ?Sized>(
        &mut self,
        spec: &AttachSpec,
        targets: Option<&[FilterBank]>,
        rng: &mut R,
    ) -> Result<usize> {
        if spec.layers.len() != self.convs.len() {
            return Err(DanError::InvalidArgument(format!(
                "{} layer plans for {} conv layers",
                spec.layers.len(),
                self.convs.len()
            )));
        }
        if self.task_index(&spec.name).is_some() {
            return Err(DanError::InvalidArgument(format!("task {:?} already exists", spec.name)));
        }
        if let Some(t) = targets {
            if t.len() != self.convs.len() {
                return shape_err(format!("{} target banks for {} conv layers", t.len(), self.convs.len()));
            }
        }
        self.freeze_base();
        let mut convs = Vec::with_capacity(self.convs.len());
        for (layer, (plan, base)) in spec.layers.iter().zip(&self.convs).enumerate() {
            convs.push(match *plan {
                LayerPlan::Control { scheme, mode } => {
                    let target = targets.map(|t| &t[layer]);
                    TaskConv::Controlled(init_controller(scheme, mode, layer, base, target, rng)?)
                }
                LayerPlan::CopyBase => {
                    let mut fb = base.clone();
                    fb.frozen = false;
                    TaskConv::Independent(fb)
                }
                LayerPlan::Random => {
                    TaskConv::Independent(FilterBank::random(base.c_out(), base.c_in(), base.kernel(), rng))
                }
            });
        }
        let head = Head::random(self.arch.feature_len()?, &spec.head, rng)?;
        for bn in &mut self.bns {
            bn.add_task_from(0);
        }
        self.tasks.push(Task { name: spec.name.clone(), head, convs });
        self.alpha.push_task();
        Ok(self.tasks.len() - 1)
    }

    /// Every tensor key in a deterministic order, buffers included.
    pub fn keys(&self) -> Vec<ParamKey> {
        let mut keys = Vec::new();
        for task in 0..self.tasks.len() {
            keys.extend(self.task_keys(task));
            for bn in 0..self.bns.len() {
                keys.push(ParamKey::BnMean { bn, task });
                keys.push(ParamKey::BnVar { bn, task });
            }
        }
        keys
    }

    /// Learnable parameters owned by `task` (base filters count for task 0).
    pub fn task_keys(&self, task: usize) -> Vec<ParamKey> {
        let mut keys = Vec::new();
        if task == 0 {
            for layer in 0..self.convs.len() {
                keys.push(ParamKey::ConvWeight { task, layer });
                keys.push(ParamKey::ConvBias { task, layer });
            }
        } else {
            for (layer, c) in self.tasks[task].convs.iter().enumerate() {
                match c {
                    TaskConv::Controlled(_) => {
                        keys.push(ParamKey::ControllerW { task, layer });
                        keys.push(ParamKey::ControllerBias { task, layer });
                    }
                    TaskConv::Independent(_) => {
                        keys.push(ParamKey::ConvWeight { task, layer });
                        keys.push(ParamKey::ConvBias { task, layer });
                    }
                }
            }
        }
        for bn in 0..self.bns.len() {
            keys.push(ParamKey::BnGamma { bn, task });
            keys.push(ParamKey::BnBeta { bn, task });
        }
        for index in 0..self.tasks[task].head.layers.len() {
            keys.push(ParamKey::HeadWeight { task, index });
            keys.push(ParamKey::HeadBias { task, index });
        }
        keys
    }

    pub fn tensor(&self, key: ParamKey) -> Option<&Tensor> {
        match key {
            ParamKey::ConvWeight { task: 0, layer } => self.convs.get(layer).map(|c| &c.weights),
            ParamKey::ConvBias { task: 0, layer } => self.convs.get(layer).map(|c| &c.bias),
            ParamKey::ConvWeight { task, layer } => match self.task_conv(task, layer)? {
                TaskConv::Independent(fb) => Some(&fb.weights),
                TaskConv::Controlled(_) => None,
            },
            ParamKey::ConvBias { task, layer } => match self.task_conv(task, layer)? {
                TaskConv::Independent(fb) => Some(&fb.bias),
                TaskConv::Controlled(_) => None,
            },
            ParamKey::ControllerW { task, layer } => match self.task_conv(task, layer)? {
                TaskConv::Controlled(c) => Some(&c.w),
                TaskConv::Independent(_) => None,
            },
            ParamKey::ControllerBias { task, layer } => match self.task_conv(task, layer)? {
                TaskConv::Controlled(c) => Some(&c.bias),
                TaskConv::Independent(_) => None,
            },
            ParamKey::BnGamma { bn, task } => self.bns.get(bn)?.tasks.get(task).map(|p| &p.gamma),
            ParamKey::BnBeta { bn, task } => self.bns.get(bn)?.tasks.get(task).map(|p| &p.beta),
            ParamKey::BnMean { bn, task } => self.bns.get(bn)?.tasks.get(task).map(|p| &p.running_mean),
            ParamKey::BnVar { bn, task } => self.bns.get(bn)?.tasks.get(task).map(|p| &p.running_var),
            ParamKey::HeadWeight { task, index } => self.tasks.get(task)?.head.layers.get(index).map(|l| &l.weight),
            ParamKey::HeadBias { task, index } => self.tasks.get(task)?.head.layers.get(index).map(|l| &l.bias),
        }
    }

    pub fn tensor_mut(&mut self, key: ParamKey) -> Option<&mut Tensor> {
        match key {
            ParamKey::ConvWeight { task: 0, layer } => self.convs.get_mut(layer).map(|c| &mut c.weights),
            ParamKey::ConvBias { task: 0, layer } => self.convs.get_mut(layer).map(|c| &mut c.bias),
            ParamKey::ConvWeight { task, layer } => match self.task_conv_mut(task, layer)? {
                TaskConv::Independent(fb) => Some(&mut fb.weights),
                TaskConv::Controlled(_) => None,
            },
            ParamKey::ConvBias { task, layer } => match self.task_conv_mut(task, layer)? {
                TaskConv::Independent(fb) => Some(&mut fb.bias),
                TaskConv::Controlled(_) => None,
            },
            ParamKey::ControllerW { task, layer } => match self.task_conv_mut(task, layer)? {
                TaskConv::Controlled(c) => Some(&mut c.w),
                TaskConv::Independent(_) => None,
            },
            ParamKey::ControllerBias { task, layer } => match self.task_conv_mut(task, layer)? {
                TaskConv::Controlled(c) => Some(&mut c.bias),
                TaskConv::Independent(_) => None,
            },
            ParamKey::BnGamma { bn, task } => self.bns.get_mut(bn)?.tasks.get_mut(task).map(|p| &mut p.gamma),
            ParamKey::BnBeta { bn, task } => self.bns.get_mut(bn)?.tasks.get_mut(task).map(|p| &mut p.beta),
            ParamKey::BnMean { bn, task } => self.bns.get_mut(bn)?.tasks.get_mut(task).map(|p| &mut p.running_mean),
            ParamKey::BnVar { bn, task } => self.bns.get_mut(bn)?.tasks.get_mut(task).map(|p| &mut p.running_var),
            ParamKey::HeadWeight { task, index } => {
                self.tasks.get_mut(task)?.head.layers.get_mut(index).map(|l| &mut l.weight)
            }
            ParamKey::HeadBias { task, index } => self.tasks.get_mut(task)?.head.layers.get_mut(index).map(|l| &mut l.bias),
        }
    }

    fn task_conv(&self, task: usize, layer: usize) -> Option<&TaskConv> {
        self.tasks.get(task)?.convs.get(layer)
    }

    fn task_conv_mut(&mut self, task: usize, layer: usize) -> Option<&mut TaskConv> {
        self.tasks.get_mut(task)?.convs.get_mut(layer)
    }

    /// Whether an optimizer may change this tensor.
    pub fn is_frozen(&self, key: ParamKey) -> bool {
        if key.is_buffer() {
            return true;
        }
        match key {
            ParamKey::ConvWeight { task: 0, layer } | ParamKey::ConvBias { task: 0, layer } => {
                self.convs.get(layer).is_none_or(|c| c.frozen)
            }
            ParamKey::ConvWeight { task, layer } | ParamKey::ConvBias { task, layer } => {
                !matches!(self.task_conv(task, layer), Some(TaskConv::Independent(fb)) if !fb.frozen)
            }
            ParamKey::HeadWeight { task, .. } | ParamKey::HeadBias { task, .. } => {
                self.tasks.get(task).is_none_or(|t| t.head.frozen)
            }
            ParamKey::BnGamma { task: 0, .. } | ParamKey::BnBeta { task: 0, .. } => self.base_frozen,
            _ => self.tensor(key).is_none(),
        }
    }

    /// Projects a raw gradient onto the parameter's allowed subspace.
    pub fn mask_gradient(&self, key: ParamKey, grad: &mut [f64]) {
        if let ParamKey::ControllerW { task, layer } = key {
            if let Some(TaskConv::Controlled(c)) = self.task_conv(task, layer) {
                c.mask_gradient(grad);
            }
        }
    }

    /// Effective filters of task `task` at conv `layer`, outside any graph.
    pub fn task_filters(&self, task: usize, layer: usize) -> Result<FilterBank> {
        let base = &self.convs[layer];
        if task == 0 {
            return Ok(base.clone());
        }
        match self.task_conv(task, layer) {
            Some(TaskConv::Controlled(c)) => FilterBank::new(c.adapted(base)?, c.bias.clone()),
            Some(TaskConv::Independent(fb)) => Ok(fb.clone()),
            None => Err(DanError::InvalidArgument(format!("no task {task} layer {layer}"))),
        }
    }

    fn leaf<'t>(
        &self,
        tape: &'t Tape,
        key: ParamKey,
        opts: &ForwardOptions,
        params: &mut Vec<(ParamKey, Var<'t>)>,
    ) -> Var<'t> {
        let t = self.tensor(key).unwrap_or_else(|| panic!("network has no tensor {key}")).clone();
        if opts.trainable.contains(&key) {
            let v = tape.param(t);
            params.push((key, v));
            v
        } else {
            tape.constant(t)
        }
    }

    fn task_bank<'t>(
        &self,
        tape: &'t Tape,
        task: usize,
        layer: usize,
        opts: &ForwardOptions,
        params: &mut Vec<(ParamKey, Var<'t>)>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let base_w = ParamKey::ConvWeight { task: 0, layer };
        let base_b = ParamKey::ConvBias { task: 0, layer };
        if task == 0 {
            return Ok((self.leaf(tape, base_w, opts, params), self.leaf(tape, base_b, opts, params)));
        }
        match self.task_conv(task, layer) {
            Some(TaskConv::Controlled(_)) => {
                let w = self.leaf(tape, ParamKey::ControllerW { task, layer }, opts, params);
                let f = self.leaf(tape, base_w, opts, params);
                let b = self.leaf(tape, ParamKey::ControllerBias { task, layer }, opts, params);
                Ok((adapt_filters(&w, &f)?, b))
            }
            Some(TaskConv::Independent(_)) => Ok((
                self.leaf(tape, ParamKey::ConvWeight { task, layer }, opts, params),
                self.leaf(tape, ParamKey::ConvBias { task, layer }, opts, params),
            )),
            None => Err(DanError::InvalidArgument(format!("no task {task} layer {layer}"))),
        }
    }

    /// Builds the forward graph for input `[N, C, H, W]` under `alpha`.
    /// Conv layers mix task parameters by alpha; batch norm and the head
    /// come from the dominant task.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        alpha: &[f64],
        opts: &ForwardOptions,
    ) -> Result<ForwardPass<'t>> {
        if alpha.len() != self.tasks.len() {
            return Err(DanError::InvalidArgument(format!(
                "{} alpha entries for {} tasks",
                alpha.len(),
                self.tasks.len()
            )));
        }
        let xd = x.dims();
        if xd.len() != 4 || xd[1..] != self.arch.input {
            return shape_err(format!("input {:?} does not match network input {:?}", xd, self.arch.input));
        }
        let mut selector = AlphaSelector::new(self.tasks.len());
        selector.set(AlphaSpec::Weights(alpha.to_vec()))?;
        let one_hot = selector.one_hot_task();
        let dominant = selector.dominant_task();

        let mut params = Vec::new();
        let mut bn_stats = Vec::new();
        let (mut conv_i, mut bn_i) = (0, 0);
        let mut h = x;
        for layer in &self.arch.features {
            match *layer {
                LayerSpec::Conv(s) => {
                    let (w, b) = match one_hot {
                        Some(task) => self.task_bank(tape, task, conv_i, opts, &mut params)?,
                        None => {
                            let mut banks = Vec::new();
                            let mut weights = Vec::new();
                            for (task, &a) in alpha.iter().enumerate() {
                                if a != 0.0 {
                                    banks.push(self.task_bank(tape, task, conv_i, opts, &mut params)?);
                                    weights.push(a);
                                }
                            }
                            if banks.is_empty() {
                                banks.push(self.task_bank(tape, 0, conv_i, opts, &mut params)?);
                                weights.push(0.0);
                            }
                            mix_banks(&banks, &weights)?
                        }
                    };
                    h = conv2d(&h, &w, &b, s.stride, s.padding)?;
                    if opts.stop_after_conv == Some(conv_i) {
                        return Ok(ForwardPass { output: h, params, bn_stats });
                    }
                    conv_i += 1;
                }
                LayerSpec::BatchNorm { .. } => {
                    let gamma = self.leaf(tape, ParamKey::BnGamma { bn: bn_i, task: dominant }, opts, &mut params);
                    let beta = self.leaf(tape, ParamKey::BnBeta { bn: bn_i, task: dominant }, opts, &mut params);
                    let bank = &self.bns[bn_i];
                    h = if opts.bn_train {
                        let (out, stats) = h.batch_norm_train(&gamma, &beta, bank.eps)?;
                        bn_stats.push((bn_i, dominant, stats));
                        out
                    } else {
                        let p = &bank.tasks[dominant];
                        h.batch_norm_eval(&gamma, &beta, p.running_mean.data(), p.running_var.data(), bank.eps)?
                    };
                    bn_i += 1;
                }
                LayerSpec::Relu => h = h.relu(),
                LayerSpec::MaxPool { window, stride } => h = h.maxpool2d(window, stride)?,
            }
        }
        if let Some(stop) = opts.stop_after_conv {
            return Err(DanError::InvalidArgument(format!("no conv layer {stop}")));
        }
        let n = xd[0];
        h = h.reshape(&[n, self.arch.feature_len()?])?;
        let head = &self.tasks[dominant].head;
        for index in 0..head.layers.len() {
            let w = self.leaf(tape, ParamKey::HeadWeight { task: dominant, index }, opts, &mut params);
            let b = self.leaf(tape, ParamKey::HeadBias { task: dominant, index }, opts, &mut params);
            h = h.matmul(&w)?.add_bias(&b)?;
            if index + 1 < head.layers.len() {
                h = h.relu();
            }
        }
        Ok(ForwardPass { output: h, params, bn_stats })
    }

    /// Inference logits under an explicit alpha, batch norm in eval mode.
    pub fn logits_with(&self, x: &Tensor, alpha: &[f64]) -> Result<Tensor> {
        let tape = Tape::new();
        let pass = self.forward(&tape, tape.constant(x.clone()), alpha, &ForwardOptions::default())?;
        Ok(pass.output.value().as_ref().clone())
    }

    /// Inference logits under the network's current alpha.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.logits_with(x, self.alpha.alphas())
    }

    pub fn logits_for_task(&self, x: &Tensor, task: usize) -> Result<Tensor> {
        if task >= self.tasks.len() {
            return Err(DanError::InvalidArgument(format!("no task {task}")));
        }
        self.logits_with(x, &super::alpha::one_hot(self.tasks.len(), task))
    }

    /// Output of conv layer `conv` before its nonlinearity.
    pub fn conv_output(&self, x: &Tensor, alpha: &[f64], conv: usize) -> Result<Tensor> {
        let tape = Tape::new();
        let opts = ForwardOptions { stop_after_conv: Some(conv), ..Default::default() };
        let pass = self.forward(&tape, tape.constant(x.clone()), alpha, &opts)?;
        Ok(pass.output.value().as_ref().clone())
    }

    /// Learnable parameter count of the base network alone.
    pub fn base_param_count(&self) -> usize {
        self.task_keys(0).iter().filter_map(|&k| self.tensor(k)).map(Tensor::len).sum()
    }
}
