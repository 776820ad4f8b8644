//! The `dan` command line.

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::archive::{load_filter_banks, load_model, save_model};
use crate::bars::{
    gen_bars, read_bars, scenario_setup_with, toy_network, write_bars, BarsConfig, BarsSplit, BarsVariant,
    ChannelLabeling, Scenario, CLASSES,
};
use crate::config::ExperimentConfig;
use crate::dan::{
    amortized_cost, argmax, controller_cost_ratio, network_cost, parameter_cost, quantized_storage_fraction, total_cost,
    ControllerMode, DanNetwork, InitScheme, LayerCost, TaskConv,
};
use crate::decider::{evaluate_with_decider, train_decider};
use crate::error::{DanError, Result};
use crate::metrics::{emit_history, emit_quant, write_csv};
use crate::quant::{accuracy_vs_bits, quantize_model, QuantSpec, SWEEP_BITS};
use crate::train::{evaluate, run_trials_on, train, TransferMode};

#[derive(Debug, Parser)]
#[command(name = "dan", version, about = "Deep adaptation networks on the toy bars problems")]
pub struct Cli {
    /// Master seed for data generation, initialization and shuffling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML experiment config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Directory written by `gen-bars`; overrides the config's data path.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write train/test splits of the bars datasets.
    GenBars(GenBarsArgs),
    /// Train a base network (or, with --domains, a domain decider).
    TrainBase(TrainBaseArgs),
    /// Attach a new task to a saved model.
    Attach(AttachArgs),
    /// Train one task of a saved model.
    TrainTask(TrainTaskArgs),
    /// Report test accuracy of a task, or of decider-routed tasks.
    Eval(EvalArgs),
    /// Run a toy scenario for several trials.
    Scenario(ScenarioArgs),
    /// Parameter cost of adding tasks.
    Cost(CostArgs),
    /// Accuracy against quantization bit width.
    Quantize(QuantizeArgs),
    /// Accuracy while interpolating between two tasks.
    Interp(InterpArgs),
}

#[derive(Debug, Args)]
pub struct GenBarsArgs {
    /// Variants to write; all three by default.
    #[arg(long, value_delimiter = ',')]
    pub variant: Vec<BarsVariant>,
    #[arg(long)]
    pub n_examples: Option<usize>,
    #[arg(long)]
    pub split: Option<f64>,
    #[arg(long)]
    pub margin: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainBaseArgs {
    #[arg(long, default_value = "red-horizontal", conflicts_with = "domains")]
    pub variant: BarsVariant,
    /// Train a decider that tells these variants apart instead.
    #[arg(long, value_delimiter = ',')]
    pub domains: Vec<BarsVariant>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AttachArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Name of the new task.
    #[arg(long)]
    pub name: String,
    #[arg(long, default_value = "dan-linear")]
    pub transfer: TransferMode,
    #[arg(long, default_value = "diagonal")]
    pub init: InitScheme,
    /// Saved model whose base filters the controllers approximate
    /// (`--init linear_approx`).
    #[arg(long)]
    pub target: Option<PathBuf>,
    #[arg(long, default_value_t = CLASSES)]
    pub classes: usize,
}

#[derive(Debug, Args)]
pub struct TrainTaskArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Task name or index.
    #[arg(long)]
    pub task: String,
    /// Training data; defaults to the variant named like the task.
    #[arg(long)]
    pub variant: Option<BarsVariant>,
    /// Defaults to what the task was attached for.
    #[arg(long)]
    pub transfer: Option<TransferMode>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, conflicts_with = "decider")]
    pub task: Option<String>,
    #[arg(long, conflicts_with = "decider")]
    pub variant: Option<BarsVariant>,
    /// Decider archive; routes each example to the task named like its
    /// predicted variant.
    #[arg(long, requires = "variants")]
    pub decider: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<BarsVariant>,
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    /// e.g. "original", "channel switch + learn".
    pub name: Option<Scenario>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Put the filter in the green channel for every scenario.
    #[arg(long)]
    pub green_filter: bool,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    /// Saved model to report on; the toy network otherwise.
    #[arg(long, conflicts_with = "layer")]
    pub model: Option<PathBuf>,
    /// A single convolution `C_o,C_i,k`.
    #[arg(long, value_parser = parse_layer)]
    pub layer: Option<[usize; 3]>,
    #[arg(long, default_value_t = 2)]
    pub tasks: usize,
    #[arg(long, default_value = "linear")]
    pub mode: ControllerMode,
    /// Use this per-task increment instead of computing one.
    #[arg(long)]
    pub increment: Option<f64>,
    #[arg(long)]
    pub bits: Option<u32>,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "0")]
    pub task: String,
    #[arg(long)]
    pub variant: Option<BarsVariant>,
    #[arg(long, value_delimiter = ',', default_values_t = SWEEP_BITS)]
    pub bits: Vec<u32>,
    /// Also save the model quantized to this many bits.
    #[arg(long)]
    pub save: Option<u32>,
}

#[derive(Debug, Args)]
pub struct InterpArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "0")]
    pub from: String,
    #[arg(long)]
    pub to: String,
    #[arg(long)]
    pub variant: Option<BarsVariant>,
    #[arg(long, default_value_t = 11)]
    pub steps: usize,
}

fn parse_layer(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match parts[..] {
        [c_out, c_in, k] if c_out > 0 && c_in > 0 && k > 0 => Ok([c_out, c_in, k]),
        _ => Err("expected three positive integers C_o,C_i,k".into()),
    }
}

/// Parses `args` and runs the command. Returns the process exit code:
/// 0 on success, 1 for usage errors, 2 for runtime failures.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

struct Context {
    cfg: ExperimentConfig,
    seed: u64,
    out: Option<PathBuf>,
}

impl Context {
    fn out_or(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }

    fn bars_config(&self, variant: BarsVariant) -> BarsConfig {
        BarsConfig {
            variant,
            n_examples: self.cfg.data.n_examples,
            split: self.cfg.data.split,
            seed: self.seed,
            margin: self.cfg.data.margin,
        }
    }

    fn dataset(&self, variant: BarsVariant) -> Result<BarsSplit> {
        match &self.cfg.data.path {
            Some(dir) => {
                let dir = dir.join(variant.name());
                Ok(BarsSplit { train: read_bars(&dir.join("train.bars"))?, test: read_bars(&dir.join("test.bars"))? })
            }
            None => gen_bars(&self.bars_config(variant)),
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if cli.data.is_some() {
        cfg.data.path = cli.data.clone();
        cfg.check_paths()?;
    }
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    let out = cli.out.clone().or_else(|| cfg.out.clone());
    let ctx = Context { cfg, seed, out };
    match cli.command {
        Command::GenBars(a) => gen_bars_cmd(&ctx, a),
        Command::TrainBase(a) => train_base_cmd(&ctx, a),
        Command::Attach(a) => attach_cmd(&ctx, a),
        Command::TrainTask(a) => train_task_cmd(&ctx, a),
        Command::Eval(a) => eval_cmd(&ctx, a),
        Command::Scenario(a) => scenario_cmd(&ctx, a),
        Command::Cost(a) => cost_cmd(&ctx, a),
        Command::Quantize(a) => quantize_cmd(&ctx, a),
        Command::Interp(a) => interp_cmd(&ctx, a),
    }
}

fn gen_bars_cmd(ctx: &Context, a: GenBarsArgs) -> Result<()> {
    let out = ctx.out_or("bars");
    let variants = if a.variant.is_empty() { BarsVariant::ALL.to_vec() } else { a.variant };
    for variant in variants {
        let mut cfg = ctx.bars_config(variant);
        cfg.n_examples = a.n_examples.unwrap_or(cfg.n_examples);
        cfg.split = a.split.unwrap_or(cfg.split);
        cfg.margin = a.margin.unwrap_or(cfg.margin);
        let data = gen_bars(&cfg)?;
        let dir = out.join(variant.name());
        fs::create_dir_all(&dir)?;
        write_bars(&dir.join("train.bars"), &data.train, &cfg.sidecar())?;
        write_bars(&dir.join("test.bars"), &data.test, &cfg.sidecar())?;
        println!("{}: {} train, {} test -> {}", variant, data.train.len(), data.test.len(), dir.display());
    }
    Ok(())
}

fn train_base_cmd(ctx: &Context, a: TrainBaseArgs) -> Result<()> {
    let mut train_cfg = ctx.cfg.train.clone();
    train_cfg.epochs = a.epochs.unwrap_or(train_cfg.epochs);
    let (net, history, default_out) = if a.domains.is_empty() {
        let data = ctx.dataset(a.variant)?;
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
        let mut net = DanNetwork::new(toy_network(), a.variant.name(), &mut rng)?;
        let history = train(&mut net, &data.train, &data.test, 0, TransferMode::FtFull, &train_cfg, ctx.seed, "base")?;
        (net, history, "base-model")
    } else {
        let splits = a.domains.iter().map(|&v| ctx.dataset(v)).collect::<Result<Vec<_>>>()?;
        let train_sets: Vec<_> = splits.iter().map(|s| &s.train).collect();
        let test_sets: Vec<_> = splits.iter().map(|s| &s.test).collect();
        let (net, history) = train_decider(&train_sets, &test_sets, &train_cfg, ctx.seed)?;
        (net, history, "decider-model")
    };
    let out = ctx.out_or(default_out);
    save_model(&net, &out)?;
    emit_history(std::slice::from_ref(&history), &out.join("history.csv"))?;
    println!("val_acc={:.4} -> {}", history.final_val_acc(), out.display());
    Ok(())
}

fn attach_cmd(ctx: &Context, a: AttachArgs) -> Result<()> {
    let mut net = load_model(&a.model)?;
    if net.task_index(&a.name).is_some() {
        return Err(DanError::InvalidArgument(format!("task {:?} already exists", a.name)));
    }
    let targets = match &a.target {
        Some(dir) => Some(load_filter_banks(dir)?),
        None if a.init == InitScheme::LinearApprox => {
            return Err(DanError::InvalidArgument("--init linear_approx needs --target".into()))
        }
        None => None,
    };
    let mut head = net.tasks[0].head.widths();
    head.pop();
    head.push(a.classes);
    let spec = a.transfer.attach_spec(&a.name, head, net.arch.conv_specs().len(), a.init);
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let task = net.attach_task(&spec, targets.as_deref(), &mut rng)?;
    let out = ctx.out.clone().unwrap_or_else(|| a.model.clone());
    save_model(&net, &out)?;
    println!("attached task {} {:?} ({}) -> {}", task, a.name, a.transfer, out.display());
    Ok(())
}

/// The transfer mode matching how `task`'s layers were attached.
fn inferred_mode(net: &DanNetwork, task: usize) -> TransferMode {
    if task == 0 {
        return TransferMode::FtFull;
    }
    let modes: Vec<Option<ControllerMode>> = net.tasks[task]
        .convs
        .iter()
        .map(|c| match c {
            TaskConv::Controlled(m) => Some(m.mode),
            TaskConv::Independent(_) => None,
        })
        .collect();
    match modes[..] {
        [Some(ControllerMode::Linear), ..] => TransferMode::DanLinear,
        [Some(ControllerMode::Diagonal), ..] => TransferMode::DanDiagonal,
        _ => TransferMode::FtFull,
    }
}

fn variant_for(net: &DanNetwork, task: usize, given: Option<BarsVariant>) -> Result<BarsVariant> {
    match given {
        Some(v) => Ok(v),
        None => net.tasks[task].name.parse().map_err(|_| {
            DanError::InvalidArgument(format!("task {:?} is not a variant name; pass --variant", net.tasks[task].name))
        }),
    }
}

fn train_task_cmd(ctx: &Context, a: TrainTaskArgs) -> Result<()> {
    let mut net = load_model(&a.model)?;
    let task = net.resolve_task(&a.task)?;
    let variant = variant_for(&net, task, a.variant)?;
    let mode = a.transfer.unwrap_or_else(|| inferred_mode(&net, task));
    let mut train_cfg = ctx.cfg.train.clone();
    train_cfg.epochs = a.epochs.unwrap_or(train_cfg.epochs);
    let data = ctx.dataset(variant)?;
    let label = net.tasks[task].name.clone();
    let history = train(&mut net, &data.train, &data.test, task, mode, &train_cfg, ctx.seed, &label)?;
    let out = ctx.out.clone().unwrap_or_else(|| a.model.clone());
    save_model(&net, &out)?;
    emit_history(std::slice::from_ref(&history), &out.join(format!("history-{label}.csv")))?;
    println!("task {label}: val_acc={:.4} -> {}", history.final_val_acc(), out.display());
    Ok(())
}

fn eval_cmd(ctx: &Context, a: EvalArgs) -> Result<()> {
    let net = load_model(&a.model)?;
    if let Some(decider_dir) = &a.decider {
        let decider = load_model(decider_dir)?;
        let tasks = a
            .variants
            .iter()
            .map(|v| {
                net.task_index(v.name())
                    .ok_or_else(|| DanError::InvalidArgument(format!("model has no task named {:?}", v.name())))
            })
            .collect::<Result<Vec<_>>>()?;
        let splits = a.variants.iter().map(|&v| ctx.dataset(v)).collect::<Result<Vec<_>>>()?;
        let tests: Vec<_> = splits.iter().map(|s| &s.test).collect();
        let report = evaluate_with_decider(&net, &decider, &tasks, &tests)?;
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        return Ok(());
    }
    let task = net.resolve_task(a.task.as_deref().unwrap_or("0"))?;
    let variant = variant_for(&net, task, a.variant)?;
    let data = ctx.dataset(variant)?;
    println!("accuracy={:.4}", evaluate(&net, &data.test, task)?);
    Ok(())
}

fn scenario_cmd(ctx: &Context, a: ScenarioArgs) -> Result<()> {
    let scenario = match (a.name, &ctx.cfg.scenario.name) {
        (Some(s), _) => s,
        (None, Some(name)) => name.parse()?,
        (None, None) => return Err(DanError::InvalidArgument("no scenario named on the command line or in the config".into())),
    };
    let labeling = if a.green_filter { ChannelLabeling::Green } else { ctx.cfg.scenario.labeling };
    let mut spec = scenario_setup_with(scenario, labeling)?;
    spec.trials = a.trials.unwrap_or(ctx.cfg.scenario.trials);
    spec.epochs = a.epochs.unwrap_or(ctx.cfg.scenario.epochs);
    spec.noise_sigma = a.noise_sigma.unwrap_or(ctx.cfg.scenario.noise_sigma);
    let data = ctx.dataset(spec.variant)?;
    let report = run_trials_on(&spec, &ctx.cfg.train, ctx.seed, &data)?;
    let out = ctx.out_or("runs");
    fs::create_dir_all(&out)?;
    let path = out.join(format!("{}.csv", scenario.name()));
    emit_history(&report.histories, &path)?;
    info!("wrote {}", path.display());
    let finals = report.final_accuracies();
    println!(
        "{}: final val_acc mean={:.4} min={:.4} max={:.4} over {} trials",
        scenario,
        report.final_mean(),
        finals.iter().copied().fold(f64::INFINITY, f64::min),
        report.final_max(),
        finals.len()
    );
    Ok(())
}

fn cost_cmd(_ctx: &Context, a: CostArgs) -> Result<()> {
    if a.tasks == 0 {
        return Err(DanError::InvalidArgument("--tasks must be at least 1".into()));
    }
    let increment = match (a.increment, &a.model, a.layer) {
        (Some(inc), _, _) => inc,
        (None, Some(dir), _) => {
            let report = network_cost(&load_model(dir)?)?;
            print_layers(&report.layers);
            report.increment
        }
        (None, None, Some([c_out, c_in, k])) => {
            let ratio = controller_cost_ratio(a.mode, c_out, c_in * k * k);
            println!("layer C_o={c_out} D={}: ratio={ratio:.6}", c_in * k * k);
            ratio
        }
        (None, None, None) => {
            let report = parameter_cost(&toy_network(), a.tasks, a.mode)?;
            print_layers(&report.layers);
            report.increment
        }
    };
    println!("increment={increment:.6}");
    println!("total={:.6}", total_cost(increment, a.tasks));
    println!("amortized={:.6}", amortized_cost(increment, a.tasks));
    if let Some(bits) = a.bits {
        println!("storage_fraction={:.6}", quantized_storage_fraction(increment, bits));
    }
    Ok(())
}

fn print_layers(layers: &[LayerCost]) {
    for l in layers {
        println!("conv{} C_o={} D={}: ratio={:.6}", l.layer, l.c_out, l.filter_len, l.ratio);
    }
}

fn quantize_cmd(ctx: &Context, a: QuantizeArgs) -> Result<()> {
    let net = load_model(&a.model)?;
    let task = net.resolve_task(&a.task)?;
    let variant = variant_for(&net, task, a.variant)?;
    let data = ctx.dataset(variant)?;
    let rows = accuracy_vs_bits(&net, &data.test, task, &a.bits)?;
    let out = ctx.out_or(".");
    fs::create_dir_all(&out)?;
    emit_quant(&rows, &out.join("quant.csv"))?;
    for r in &rows {
        println!("bits={} accuracy={:.4} total_param_bits={}", r.bits, r.accuracy, r.total_param_bits);
    }
    if let Some(bits) = a.save {
        let q = quantize_model(&net, QuantSpec::new(bits))?;
        let dir = out.join(format!("quantized-{bits}"));
        save_model(&q, &dir)?;
        println!("saved {}", dir.display());
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct InterpRow {
    alpha: f64,
    accuracy: f64,
}

fn interp_cmd(ctx: &Context, a: InterpArgs) -> Result<()> {
    if a.steps < 2 {
        return Err(DanError::InvalidArgument("--steps must be at least 2".into()));
    }
    let net = load_model(&a.model)?;
    let from = net.resolve_task(&a.from)?;
    let to = net.resolve_task(&a.to)?;
    if from == to {
        return Err(DanError::InvalidArgument("--from and --to name the same task".into()));
    }
    let variant = variant_for(&net, to, a.variant)?;
    let data = ctx.dataset(variant)?;
    let idx: Vec<usize> = (0..data.test.len()).collect();
    let mut rows = Vec::with_capacity(a.steps);
    for s in 0..a.steps {
        let t = s as f64 / (a.steps - 1) as f64;
        let mut alpha = vec![0.0; net.task_count()];
        alpha[from] = 1.0 - t;
        alpha[to] = t;
        let mut correct = 0;
        for chunk in idx.chunks(250) {
            let (x, labels) = data.test.batch(chunk);
            let logits = net.logits_with(&x, &alpha)?;
            let k = logits.dims()[1];
            correct += logits
                .data()
                .chunks(k)
                .zip(&labels)
                .filter(|(row, &y)| argmax(row) == y)
                .count();
        }
        let accuracy = correct as f64 / data.test.len() as f64;
        println!("alpha={t:.3} accuracy={accuracy:.4}");
        rows.push(InterpRow { alpha: t, accuracy });
    }
    let out = ctx.out_or(".");
    fs::create_dir_all(&out)?;
    write_csv(fs::File::create(out.join("interp.csv"))?, &["alpha", "accuracy"], &rows)
}
