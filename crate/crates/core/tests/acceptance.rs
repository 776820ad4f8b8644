//! One PASS/FAIL line per acceptance criterion.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the report.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use dan_core::autodiff::{conv2d, Tape, Var};
use dan_core::bars::{gen_bars, scenario_setup, toy_network, BarsConfig, BarsVariant};
use dan_core::dan::{
    adapt_filters, amortized_cost, approximation_residual, argmax, init_controller, layer_cost_ratio,
    least_squares_controller, multitask_conv, quantized_storage_fraction, select_alpha_from_decider, switched_conv,
    total_cost, AttachSpec, ControllerMode, DanNetwork, ForwardOptions, InitScheme, ParamKey, TaskConv,
};
use dan_core::quant::{accuracy_vs_bits, error_bound, quantize_linear, SWEEP_BITS};
use dan_core::train::{evaluate, run_trials, scenario_network, train, TrainConfig, TransferMode};
use dan_core::{FilterBank, Tensor};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_EPS: f64 = 1e-6;
const FD_REL: f64 = 1e-4;
const FD_ABS: f64 = 1e-6;
const GRAD_CONFIGS: u64 = 20;

struct Report {
    lines: Vec<(u32, bool, String)>,
}

impl Report {
    fn record(&mut self, id: u32, name: &str, pass: bool, detail: String) {
        let line = format!("{} criterion {id:>2} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        println!("{line}");
        self.lines.push((id, pass, line));
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn trained_base(variant: BarsVariant, epochs: usize, seed: u64) -> DanNetwork {
    let data = gen_bars(&BarsConfig { variant, seed, ..Default::default() }).unwrap();
    let mut net = DanNetwork::new(toy_network(), variant.name(), &mut rng(seed)).unwrap();
    let cfg = TrainConfig { epochs, ..Default::default() };
    train(&mut net, &data.train, &data.test, 0, TransferMode::FtFull, &cfg, seed, "base").unwrap();
    net
}

fn criterion_preservation(r: &mut Report) {
    let start = Instant::now();
    let mut net = trained_base(BarsVariant::RedHorizontal, 5, 11);
    let before = net.clone();
    let spec = TransferMode::DanLinear.attach_spec("green-horizontal", vec![50, 5], 2, InitScheme::Diagonal);
    let task = net.attach_task(&spec, None, &mut rng(12)).unwrap();
    let data = gen_bars(&BarsConfig { variant: BarsVariant::GreenHorizontal, seed: 13, ..Default::default() }).unwrap();
    let cfg = TrainConfig { epochs: 50, ..Default::default() };
    let hist = train(&mut net, &data.train, &data.test, task, TransferMode::DanLinear, &cfg, 14, "preserve").unwrap();
    let x = Tensor::randn(&[1000, 3, 28, 28], 1.0, &mut rng(15));
    let after = net.logits_for_task(&x, 0).unwrap();
    let reference = before.logits_for_task(&x, 0).unwrap();
    let identical = after.bit_eq(&reference);
    let changed = !net.logits_for_task(&x, task).unwrap().bit_eq(&reference);
    r.record(
        1,
        "preservation",
        identical && changed,
        format!(
            "base logits bit-identical on 1000 inputs: {identical}; new task trained to val_acc {:.3} ({:.1}s)",
            hist.final_val_acc(),
            start.elapsed().as_secs_f64()
        ),
    );
}

fn criterion_mimicry(r: &mut Report) {
    let mut all = true;
    for (seed, mode) in [(21, ControllerMode::Linear), (22, ControllerMode::Diagonal)] {
        let mut net = trained_base(BarsVariant::RedHorizontal, 2, seed);
        let spec = AttachSpec::controlled("copy", vec![50, 5], 2, InitScheme::Diagonal, mode);
        let task = net.attach_task(&spec, None, &mut rng(seed)).unwrap();
        net.tasks[task].head = net.tasks[0].head.clone();
        let x = Tensor::randn(&[200, 3, 28, 28], 1.0, &mut rng(seed + 100));
        let base = net.logits_for_task(&x, 0).unwrap();
        let copy = net.logits_for_task(&x, task).unwrap();
        let mut a = vec![0.0; 2];
        a[task] = 1.0;
        let convs_equal = (0..2).all(|c| {
            net.conv_output(&x, &[1.0, 0.0], c).unwrap().bit_eq(&net.conv_output(&x, &a, c).unwrap())
        });
        all &= base.bit_eq(&copy) && convs_equal;
    }
    r.record(2, "identity mimicry", all, format!("linear and diagonal controllers at W=I reproduce base outputs exactly: {all}"));
}

/// Worst agreement ratio between tape gradients and central differences for
/// every input of `f`. At most `limit` entries per input are probed.
fn fd_check<F>(inputs: &[Tensor], limit: usize, seed: u64, f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    f(&tape, &vars).backward().unwrap();
    let grads: Vec<Tensor> = vars.iter().map(|v| v.grad().unwrap()).collect();
    let eval = |probe: &[Tensor]| {
        let t = Tape::new();
        let vs: Vec<Var<'_>> = probe.iter().map(|p| t.constant(p.clone())).collect();
        f(&t, &vs).value().data()[0]
    };
    let mut r = rng(seed ^ 0x5eed);
    let mut worst: f64 = 0.0;
    for i in 0..inputs.len() {
        let n = inputs[i].len();
        let idx: Vec<usize> = if n <= limit { (0..n).collect() } else { (0..limit).map(|_| r.random_range(0..n)).collect() };
        let mut probe = inputs.to_vec();
        for j in idx {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + FD_EPS;
            let hi = eval(&probe);
            probe[i].data_mut()[j] = orig - FD_EPS;
            let lo = eval(&probe);
            probe[i].data_mut()[j] = orig;
            let numeric = (hi - lo) / (2.0 * FD_EPS);
            let analytic = grads[i].data()[j];
            let allowed = (FD_REL * analytic.abs().max(numeric.abs())).max(FD_ABS);
            worst = worst.max((analytic - numeric).abs() / allowed);
        }
    }
    worst
}

/// Scalar loss from any output: a fixed random weighting summed.
fn weigh<'t>(tape: &'t Tape, v: Var<'t>, seed: u64) -> Var<'t> {
    let w = Tensor::randn(&v.dims(), 1.0, &mut rng(seed));
    v.mul(&tape.constant(w)).unwrap().sum()
}

/// Normal samples pushed away from zero so relu kinks are not probed.
fn away_from_zero(dims: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::randn(dims, 1.0, r);
    t.data_mut().iter_mut().for_each(|v| *v += 0.05f64.copysign(*v));
    t
}

fn dims4(r: &mut ChaCha8Rng) -> Vec<usize> {
    vec![r.random_range(1..4), r.random_range(1..4), r.random_range(3..7), r.random_range(3..7)]
}

/// Smallest side `>= side` whose windowed output size is integral.
fn fit(mut side: usize, k: usize, stride: usize, pad: usize) -> usize {
    while !(side + 2 * pad - k).is_multiple_of(stride) {
        side += 1;
    }
    side
}

fn grad_suite() -> Vec<(&'static str, u64, f64)> {
    let mut results = Vec::new();
    let mut push = |name: &'static str, worst: Vec<f64>| {
        results.push((name, worst.len() as u64, worst.into_iter().fold(0.0, f64::max)));
    };
    let seeds = 0..GRAD_CONFIGS;

    push("add", seeds.clone().map(|s| {
        let mut r = rng(s);
        let d = dims4(&mut r);
        let ins = [Tensor::randn(&d, 1.0, &mut r), Tensor::randn(&d, 1.0, &mut r)];
        fd_check(&ins, 200, s, |t, v| weigh(t, v[0].add(&v[1]).unwrap(), s))
    }).collect());
    push("sub", seeds.clone().map(|s| {
        let mut r = rng(s + 1000);
        let d = dims4(&mut r);
        let ins = [Tensor::randn(&d, 1.0, &mut r), Tensor::randn(&d, 1.0, &mut r)];
        fd_check(&ins, 200, s, |t, v| weigh(t, v[0].sub(&v[1]).unwrap(), s))
    }).collect());
    push("mul", seeds.clone().map(|s| {
        let mut r = rng(s + 2000);
        let d = dims4(&mut r);
        let ins = [Tensor::randn(&d, 1.0, &mut r), Tensor::randn(&d, 1.0, &mut r)];
        fd_check(&ins, 200, s, |t, v| weigh(t, v[0].mul(&v[1]).unwrap(), s))
    }).collect());
    push("scale", seeds.clone().map(|s| {
        let mut r = rng(s + 3000);
        let k: f64 = r.random_range(-3.0..3.0);
        let ins = [Tensor::randn(&dims4(&mut r), 1.0, &mut r)];
        fd_check(&ins, 200, s, |t, v| weigh(t, v[0].scale(k), s))
    }).collect());
    push("add_bias", seeds.clone().map(|s| {
        let mut r = rng(s + 4000);
        let d = dims4(&mut r);
        let ins = [Tensor::randn(&d, 1.0, &mut r), Tensor::randn(&[d[1]], 1.0, &mut r)];
        fd_check(&ins, 200, s, |t, v| weigh(t, v[0].add_bias(&v[1]).unwrap(), s))
    }).collect());
    push("matmul", seeds.clone().map(|s| {
        let mut r = rng(s + 5000);
        let (m, k, n) = (r.random_range(1..6), r.random_range(1..6), r.random_range(1..6));
        let ins = [Tensor::randn(&[m, k], 1.0, &mut r), Tensor::randn(&[k, n], 1.0, &mut r)];
        fd_check(&ins, 200, s, |t, v| weigh(t, v[0].matmul(&v[1]).unwrap(), s))
    }).collect());
    push("conv2d", seeds.clone().map(|s| {
        let mut r = rng(s + 6000);
        let (n, ci, co) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4));
        let (k, stride, pad) = (r.random_range(1..4), r.random_range(1..3), r.random_range(0..3));
        let side = fit(r.random_range(k..k + 5), k, stride, pad);
        let ins = [
            Tensor::randn(&[n, ci, side, side], 1.0, &mut r),
            Tensor::randn(&[co, ci, k, k], 1.0, &mut r),
            Tensor::randn(&[co], 1.0, &mut r),
        ];
        fd_check(&ins, 200, s, |t, v| weigh(t, conv2d(&v[0], &v[1], &v[2], stride, pad).unwrap(), s))
    }).collect());
    push("relu", seeds.clone().map(|s| {
        let mut r = rng(s + 7000);
        let ins = [away_from_zero(&dims4(&mut r), &mut r)];
        fd_check(&ins, 200, s, |t, v| weigh(t, v[0].relu(), s))
    }).collect());
    push("maxpool2d", seeds.clone().map(|s| {
        let mut r = rng(s + 8000);
        let (window, stride) = (r.random_range(1..4), r.random_range(1..3));
        let (h, w) = (r.random_range(window..window + 5), r.random_range(window..window + 5));
        let d = vec![r.random_range(1..3), r.random_range(1..3), fit(h, window, stride, 0), fit(w, window, stride, 0)];
        let ins = [Tensor::randn(&d, 1.0, &mut r)];
        fd_check(&ins, 200, s, |t, v| weigh(t, v[0].maxpool2d(window, stride).unwrap(), s))
    }).collect());
    push("batch_norm_train", seeds.clone().map(|s| {
        let mut r = rng(s + 9000);
        let mut d = dims4(&mut r);
        d[0] = r.random_range(2..4);
        let ins = [Tensor::randn(&d, 1.0, &mut r), Tensor::randn(&[d[1]], 1.0, &mut r), Tensor::randn(&[d[1]], 1.0, &mut r)];
        fd_check(&ins, 200, s, |t, v| weigh(t, v[0].batch_norm_train(&v[1], &v[2], 1e-5).unwrap().0, s))
    }).collect());
    push("batch_norm_eval", seeds.clone().map(|s| {
        let mut r = rng(s + 10_000);
        let d = dims4(&mut r);
        let mean: Vec<f64> = (0..d[1]).map(|_| r.random_range(-1.0..1.0)).collect();
        let var: Vec<f64> = (0..d[1]).map(|_| r.random_range(0.1..2.0)).collect();
        let ins = [Tensor::randn(&d, 1.0, &mut r), Tensor::randn(&[d[1]], 1.0, &mut r), Tensor::randn(&[d[1]], 1.0, &mut r)];
        fd_check(&ins, 200, s, |t, v| weigh(t, v[0].batch_norm_eval(&v[1], &v[2], &mean, &var, 1e-5).unwrap(), s))
    }).collect());
    push("softmax_cross_entropy", seeds.clone().map(|s| {
        let mut r = rng(s + 11_000);
        let (n, k) = (r.random_range(1..6), r.random_range(2..6));
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let ins = [Tensor::randn(&[n, k], 2.0, &mut r)];
        fd_check(&ins, 200, s, |_, v| v[0].softmax_cross_entropy(&labels).unwrap())
    }).collect());
    push("reshape", seeds.clone().map(|s| {
        let mut r = rng(s + 12_000);
        let d = dims4(&mut r);
        let flat = d.iter().product::<usize>();
        let ins = [Tensor::randn(&d, 1.0, &mut r)];
        fd_check(&ins, 200, s, |t, v| weigh(t, v[0].reshape(&[d[0], flat / d[0]]).unwrap(), s))
    }).collect());
    push("sum", seeds.clone().map(|s| {
        let mut r = rng(s + 13_000);
        let ins = [Tensor::randn(&dims4(&mut r), 1.0, &mut r)];
        fd_check(&ins, 200, s, |_, v| v[0].sum())
    }).collect());
    push("concat", seeds.clone().map(|s| {
        let mut r = rng(s + 14_000);
        let axis = r.random_range(0..4);
        let d = dims4(&mut r);
        let mut d2 = d.clone();
        d2[axis] = r.random_range(1..4);
        let ins = [Tensor::randn(&d, 1.0, &mut r), Tensor::randn(&d2, 1.0, &mut r)];
        fd_check(&ins, 200, s, |t, v| weigh(t, Var::concat(&[v[0], v[1]], axis).unwrap(), s))
    }).collect());
    push("adapt_filters", seeds.clone().map(|s| {
        let mut r = rng(s + 15_000);
        let (co, ci, k) = (r.random_range(1..6), r.random_range(1..4), r.random_range(1..4));
        let ins = [Tensor::randn(&[co, co], 1.0, &mut r), Tensor::randn(&[co, ci, k, k], 1.0, &mut r)];
        fd_check(&ins, 200, s, |t, v| weigh(t, adapt_filters(&v[0], &v[1]).unwrap(), s))
    }).collect());
    push("switched_conv", seeds.clone().map(|s| {
        let mut r = rng(s + 16_000);
        let (co, ci, k) = (r.random_range(1..4), r.random_range(1..4), r.random_range(1..4));
        let alpha: f64 = r.random_range(0.0..=1.0);
        let side = r.random_range(k..k + 4);
        let ins = [
            Tensor::randn(&[2, ci, side, side], 1.0, &mut r),
            Tensor::randn(&[co, ci, k, k], 1.0, &mut r),
            Tensor::randn(&[co], 1.0, &mut r),
            Tensor::randn(&[co, co], 1.0, &mut r),
            Tensor::randn(&[co], 1.0, &mut r),
        ];
        fd_check(&ins, 200, s, |t, v| weigh(t, switched_conv(&v[0], &v[1], &v[2], &v[3], &v[4], alpha, 1, 1).unwrap(), s))
    }).collect());
    push("multitask_conv", seeds.clone().map(|s| {
        let mut r = rng(s + 17_000);
        let (co, ci, k) = (r.random_range(1..4), r.random_range(1..4), r.random_range(1..4));
        let side = r.random_range(k..k + 4);
        let alpha: Vec<f64> = (0..3).map(|_| r.random_range(0.0..=1.0)).collect();
        let mut ins = vec![Tensor::randn(&[2, ci, side, side], 1.0, &mut r)];
        for _ in 0..3 {
            ins.push(Tensor::randn(&[co, ci, k, k], 1.0, &mut r));
            ins.push(Tensor::randn(&[co], 1.0, &mut r));
        }
        fd_check(&ins, 200, s, |t, v| {
            let banks = [(v[1], v[2]), (v[3], v[4]), (v[5], v[6])];
            weigh(t, multitask_conv(&v[0], &banks, &alpha, 1, 0).unwrap(), s)
        })
    }).collect());
    push("toy network with switched convs", seeds.clone().map(|s| {
        let mut r = rng(s + 18_000);
        let alpha: f64 = r.random_range(0.0..=1.0);
        let labels = vec![r.random_range(0..5), r.random_range(0..5)];
        let ins = [
            Tensor::randn(&[2, 3, 28, 28], 1.0, &mut r),
            Tensor::randn(&[1, 3, 5, 5], 0.3, &mut r),
            Tensor::randn(&[1], 0.1, &mut r),
            Tensor::randn(&[1, 1], 1.0, &mut r),
            Tensor::randn(&[1], 0.1, &mut r),
            Tensor::randn(&[20, 1, 5, 5], 0.3, &mut r),
            Tensor::randn(&[20], 0.1, &mut r),
            Tensor::randn(&[20, 20], 0.3, &mut r),
            Tensor::randn(&[20], 0.1, &mut r),
            Tensor::randn(&[320, 50], 0.1, &mut r),
            Tensor::randn(&[50], 0.1, &mut r),
            Tensor::randn(&[50, 5], 0.3, &mut r),
            Tensor::randn(&[5], 0.1, &mut r),
        ];
        fd_check(&ins, 25, s, |_, v| {
            let h = switched_conv(&v[0], &v[1], &v[2], &v[3], &v[4], alpha, 1, 0).unwrap();
            let h = h.relu().maxpool2d(2, 2).unwrap();
            let h = switched_conv(&h, &v[5], &v[6], &v[7], &v[8], alpha, 1, 0).unwrap();
            let h = h.relu().maxpool2d(2, 2).unwrap().reshape(&[2, 320]).unwrap();
            let h = h.matmul(&v[9]).unwrap().add_bias(&v[10]).unwrap().relu();
            let logits = h.matmul(&v[11]).unwrap().add_bias(&v[12]).unwrap();
            logits.softmax_cross_entropy(&labels).unwrap()
        })
    }).collect());
    push("DanNetwork forward", seeds.map(network_fd_check).collect());
    results
}

/// Gradient check of the assembled network with a controlled second task,
/// through its own parameter keys.
fn network_fd_check(s: u64) -> f64 {
    let mut r = rng(s + 19_000);
    let mut net = DanNetwork::new(toy_network(), "base", &mut r).unwrap();
    let mode = if s.is_multiple_of(2) { ControllerMode::Linear } else { ControllerMode::Diagonal };
    let spec = AttachSpec::controlled("t", vec![50, 5], 2, InitScheme::Random, mode);
    net.attach_task(&spec, None, &mut r).unwrap();
    let a: f64 = if s.is_multiple_of(3) { 1.0 } else { r.random_range(0.0..=1.0) };
    let alpha = [1.0 - a, a];
    let x = Tensor::randn(&[2, 3, 28, 28], 1.0, &mut r);
    let labels = vec![r.random_range(0..5), r.random_range(0..5)];
    let keys = net.task_keys(1);
    let opts = ForwardOptions { trainable: keys.iter().copied().filter(|k| !k.is_buffer()).collect(), ..Default::default() };
    let loss_of = |n: &DanNetwork| {
        let tape = Tape::new();
        let out = n.forward(&tape, tape.constant(x.clone()), &alpha, &ForwardOptions::default()).unwrap();
        out.output.softmax_cross_entropy(&labels).unwrap().value().data()[0]
    };
    let tape = Tape::new();
    let pass = net.forward(&tape, tape.constant(x.clone()), &alpha, &opts).unwrap();
    pass.output.softmax_cross_entropy(&labels).unwrap().backward().unwrap();
    let mut worst: f64 = 0.0;
    let mut probe = net.clone();
    for (key, var) in &pass.params {
        let grad = var.grad().unwrap();
        let n = grad.len();
        for _ in 0..n.min(25) {
            let j = r.random_range(0..n);
            if matches!(key, ParamKey::ControllerW { .. }) && mode == ControllerMode::Diagonal && j % (grad.dims()[0] + 1) != 0 {
                continue;
            }
            let orig = probe.tensor(*key).unwrap().data()[j];
            probe.tensor_mut(*key).unwrap().data_mut()[j] = orig + FD_EPS;
            let hi = loss_of(&probe);
            probe.tensor_mut(*key).unwrap().data_mut()[j] = orig - FD_EPS;
            let lo = loss_of(&probe);
            probe.tensor_mut(*key).unwrap().data_mut()[j] = orig;
            let numeric = (hi - lo) / (2.0 * FD_EPS);
            let analytic = grad.data()[j];
            let allowed = (FD_REL * analytic.abs().max(numeric.abs())).max(FD_ABS);
            worst = worst.max((analytic - numeric).abs() / allowed);
        }
    }
    worst
}

fn criterion_gradients(r: &mut Report) {
    let start = Instant::now();
    let results = grad_suite();
    let mut pass = true;
    for (name, configs, worst) in &results {
        let ok = *configs >= 20 && *worst <= 1.0;
        pass &= ok;
        println!("    {name:<32} configs={configs:<3} worst_ratio={worst:.3e} {}", if ok { "ok" } else { "MISMATCH" });
    }
    r.record(
        3,
        "gradient suite",
        pass,
        format!("{} ops, rel 1e-4 / abs 1e-6 ({:.1}s)", results.len(), start.elapsed().as_secs_f64()),
    );
}

fn criterion_scenarios(r: &mut Report) {
    let start = Instant::now();
    let cfg = TrainConfig::default();
    let run = |name: &str| {
        let spec = scenario_setup(name).unwrap();
        let report = run_trials(&spec, &cfg, 1).unwrap();
        let finals = report.final_accuracies();
        println!("    {name}: final accuracies {finals:?}");
        finals
    };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let original = run("original");
    let hits = original.iter().filter(|&&a| a >= 0.99).count();
    let switch = run("channel switch");
    let learn = run("channel switch + learn");
    let clean = run("channel switch + clean start");
    let transposed = run("transposed");

    let checks = [
        ("original >=18/20 at >=0.99", hits >= 18, format!("{hits}/20")),
        ("channel switch mean <=0.30", mean(&switch) <= 0.30, format!("mean {:.3}", mean(&switch))),
        (
            "channel switch + learn mean in [0.35, 0.75], best >=0.95",
            (0.35..=0.75).contains(&mean(&learn)) && max(&learn) >= 0.95,
            format!("mean {:.3}, best {:.3}", mean(&learn), max(&learn)),
        ),
        (
            "channel switch + clean start best >=0.99, mean >=0.90",
            max(&clean) >= 0.99 && mean(&clean) >= 0.90,
            format!("mean {:.3}, best {:.3}", mean(&clean), max(&clean)),
        ),
        ("transposed best >=0.95", max(&transposed) >= 0.95, format!("best {:.3}", max(&transposed))),
    ];
    let mut pass = true;
    for (what, ok, detail) in &checks {
        pass &= ok;
        println!("    {what}: {detail} {}", if *ok { "ok" } else { "MISS" });
    }
    r.record(4, "toy scenario statistics", pass, format!("5 scenarios x 20 trials x 50 epochs ({:.0}s)", start.elapsed().as_secs_f64()));
}

fn criterion_cost(r: &mut Report) {
    let layer = layer_cost_ratio(256, 256 * 25);
    let total = total_cost(0.13, 10);
    let storage = quantized_storage_fraction(0.13, 8);
    let pass = (layer - 0.0401).abs() <= 1e-3
        && (total - 2.17).abs() <= 1e-3
        && (storage - 0.0325).abs() <= 1e-3
        && (amortized_cost(0.13, 10) - 0.217).abs() <= 1e-3;
    r.record(
        5,
        "parameter cost arithmetic",
        pass,
        format!("layer ratio {layer:.4}, 10-task total {total:.4}, 8-bit storage {:.2}%", storage * 100.0),
    );
}

fn criterion_quantization(r: &mut Report) {
    let start = Instant::now();
    let mut gen = rng(61);
    let mut tensors: Vec<Tensor> = (0..200)
        .map(|i| {
            let n = gen.random_range(1..400);
            let scale = 10f64.powi(gen.random_range(-4..4));
            let offset = if i % 3 == 0 { gen.random_range(-100.0..100.0) } else { 0.0 };
            let mut t = Tensor::randn(&[n], scale, &mut gen);
            t.data_mut().iter_mut().for_each(|v| *v += offset);
            t
        })
        .collect();

    let spec = scenario_setup("original").unwrap();
    let data = gen_bars(&BarsConfig { variant: spec.variant, seed: 62, ..Default::default() }).unwrap();
    let mut trial_rng = rng(62);
    let (mut net, task, mode) = scenario_network(&spec, &mut trial_rng).unwrap();
    train(&mut net, &data.train, &data.test, task, mode, &TrainConfig::default(), 62, "quant").unwrap();
    tensors.extend(net.keys().into_iter().filter(|k| !k.is_batch_norm()).map(|k| net.tensor(k).unwrap().clone()));

    let mut violations = 0usize;
    let mut checked = 0usize;
    let (mut extended_violations, mut worst_ulps) = (0usize, 0.0f64);
    for t in &tensors {
        for bits in 1..=32 {
            let q = quantize_linear(t, bits).unwrap();
            let bound = error_bound(t, bits);
            let in_sweep = SWEEP_BITS.contains(&bits);
            for (a, b) in t.data().iter().zip(q.data()) {
                checked += usize::from(in_sweep);
                let err = (a - b).abs();
                if err > bound {
                    if in_sweep {
                        violations += 1;
                    } else {
                        extended_violations += 1;
                        worst_ulps = worst_ulps.max((err - bound) / (a.abs() * f64::EPSILON));
                    }
                }
            }
        }
    }
    println!(
        "    widths outside the sweep (1..=32): {extended_violations} values exceed the bound, by at most {worst_ulps:.2} ulp of the value"
    );
    let rows = accuracy_vs_bits(&net, &data.test, task, &[8, 32]).unwrap();
    let full = evaluate(&net, &data.test, task).unwrap();
    let (acc8, acc32) = (rows[0].accuracy, rows[1].accuracy);
    let pass = violations == 0 && (acc32 - acc8).abs() <= 0.02 && acc32 == full;
    r.record(
        6,
        "quantization",
        pass,
        format!(
            "{violations} bound violations in {checked} values at widths {SWEEP_BITS:?}; 8-bit {acc8:.4} vs 32-bit {acc32:.4}, unquantized {full:.4} ({:.1}s)",
            start.elapsed().as_secs_f64()
        ),
    );
}

fn criterion_least_squares(r: &mut Report) {
    let mut gen = rng(71);
    let mut beaten = 0usize;
    for _ in 0..50 {
        let c_out = gen.random_range(1..9);
        let d = gen.random_range(1..30);
        let base = Tensor::randn(&[c_out, d], 1.0, &mut gen);
        let target = Tensor::randn(&[c_out, d], 1.0, &mut gen);
        let w = least_squares_controller(&base, &target, ControllerMode::Linear, 0);
        let best = approximation_residual(&w, &base, &target);
        for _ in 0..1000 {
            let cand = Tensor::randn(&[c_out, c_out], gen.random_range(0.1..3.0), &mut gen);
            if approximation_residual(&cand, &base, &target) < best {
                beaten += 1;
            }
        }
    }
    let mut worst_identity: f64 = 0.0;
    for seed in 0..20 {
        let mut g = rng(seed + 700);
        let c_out = g.random_range(1..9);
        let fb = FilterBank::random(c_out, g.random_range(1..4), 5, &mut g);
        let c = init_controller(InitScheme::LinearApprox, ControllerMode::Linear, 0, &fb, Some(&fb), &mut g).unwrap();
        for i in 0..c_out {
            for j in 0..c_out {
                let expect = if i == j { 1.0 } else { 0.0 };
                worst_identity = worst_identity.max((c.w.get(&[i, j]) - expect).abs());
            }
        }
    }
    r.record(
        7,
        "least-squares initialization",
        beaten == 0 && worst_identity <= 1e-8,
        format!("random candidates beating the fit: {beaten}/50000; self-approximation max |W - I| {worst_identity:.2e}"),
    );
}

/// Distance of each adapted filter from the row span of the base filters,
/// relative to the filter norm. The span basis comes from an SVD.
fn span_residual(base: &Tensor, adapted: &Tensor) -> f64 {
    let (c_out, d) = (base.dims()[0], base.dims()[1]);
    let b = DMatrix::from_row_slice(c_out, d, base.data());
    let svd = b.svd(false, true);
    let v_t = svd.v_t.unwrap();
    let tol = svd.singular_values.max() * (c_out.max(d) as f64) * f64::EPSILON;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let basis = v_t.rows(0, rank);
    let mut worst: f64 = 0.0;
    for row in adapted.data().chunks(d) {
        let a = DMatrix::from_row_slice(1, d, row);
        let proj = (&a * basis.transpose()) * basis;
        let norm = a.norm();
        if norm > 0.0 {
            worst = worst.max((a - proj).norm() / norm);
        }
    }
    worst
}

fn criterion_subspace(r: &mut Report) {
    let mut gen = rng(81);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for i in 0..200 {
        let c_out = gen.random_range(1..12);
        let (c_in, k) = (gen.random_range(1..4), gen.random_range(1..4));
        let mut fb = FilterBank::random(c_out, c_in, k, &mut gen);
        if i % 4 == 0 && c_out > 1 {
            let d = c_in * k * k;
            let first: Vec<f64> = fb.weights.data()[..d].to_vec();
            fb.weights.data_mut()[d..2 * d].copy_from_slice(&first);
        }
        let mode = if i % 2 == 0 { ControllerMode::Linear } else { ControllerMode::Diagonal };
        let ctrl = init_controller(InitScheme::Random, mode, 0, &fb, None, &mut gen).unwrap();
        let adapted = ctrl.adapted(&fb).unwrap();
        let d = c_in * k * k;
        let base = fb.weights.reshape(&[c_out, d]).unwrap();
        worst = worst.max(span_residual(&base, &adapted.reshape(&[c_out, d]).unwrap()));
        cases += 1;
    }
    let mut net = DanNetwork::new(toy_network(), "base", &mut gen).unwrap();
    let spec = AttachSpec::controlled("t", vec![50, 5], 2, InitScheme::Random, ControllerMode::Linear);
    let t = net.attach_task(&spec, None, &mut gen).unwrap();
    for (layer, conv) in net.tasks[t].convs.iter().enumerate() {
        if let TaskConv::Controlled(c) = conv {
            let fb = &net.convs[layer];
            let d = fb.weights.len() / fb.c_out();
            let adapted = c.adapted(fb).unwrap();
            worst = worst.max(span_residual(
                &fb.weights.reshape(&[fb.c_out(), d]).unwrap(),
                &adapted.reshape(&[fb.c_out(), d]).unwrap(),
            ));
            cases += 1;
        }
    }
    r.record(8, "subspace property", worst < 1e-8, format!("worst relative projection residual {worst:.2e} over {cases} banks"));
}

fn dan(args: &[&str], dir: &Path) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_dan")).args(args).current_dir(dir).output().unwrap();
    assert!(out.status.success(), "dan {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn criterion_decider(r: &mut Report) {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    dan(&["--seed", "91", "--out", "bars", "gen-bars"], dir);
    dan(&["--data", "bars", "--seed", "92", "--out", "model", "train-base", "--variant", "red-horizontal", "--epochs", "20"], dir);
    dan(&["--seed", "93", "attach", "--model", "model", "--name", "red-vertical", "--transfer", "dan-linear"], dir);
    dan(&["--data", "bars", "--seed", "94", "train-task", "--model", "model", "--task", "red-vertical", "--epochs", "20"], dir);
    dan(&["--data", "bars", "--seed", "95", "--out", "decider", "train-base", "--domains", "red-horizontal,red-vertical", "--epochs", "5"], dir);
    let json = dan(&["--data", "bars", "eval", "--model", "model", "--decider", "decider", "--variants", "red-horizontal,red-vertical"], dir);
    let report: serde_json::Value = serde_json::from_str(&json).unwrap();
    let end_to_end = report["end_to_end"].as_f64().unwrap();
    let product = report["product"].as_f64().unwrap();
    let routing_ok = end_to_end >= product - 0.02;

    let mut gen = rng(96);
    let mut mismatches = 0;
    for i in 0..10_000 {
        let n = gen.random_range(1..12);
        let mut logits: Vec<f64> = (0..n).map(|_| gen.random_range(-5.0..5.0)).collect();
        if i % 10 == 0 && n > 1 {
            logits[n - 1] = logits[0];
        }
        let mut best = 0;
        for j in 1..n {
            if logits[j] > logits[best] {
                best = j;
            }
        }
        let oracle: Vec<f64> = (0..n).map(|j| if j == best { 1.0 } else { 0.0 }).collect();
        if select_alpha_from_decider(&logits) != oracle || argmax(&logits) != best {
            mismatches += 1;
        }
    }
    r.record(
        9,
        "multi-task decider",
        routing_ok && mismatches == 0,
        format!(
            "end-to-end {end_to_end:.4} vs product {product:.4} (decider {:.4}, tasks {}); one-hot mismatches {mismatches}/10000 ({:.1}s)",
            report["decider_accuracy"].as_f64().unwrap(),
            report["task_accuracies"],
            start.elapsed().as_secs_f64()
        ),
    );
}

fn criterion_reproducibility(r: &mut Report) {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(
        dir.join("exp.toml"),
        "seed = 5\n\n[scenario]\nname = \"channel switch + learn\"\ntrials = 2\nepochs = 3\n\n[train]\nbatch_size = 16\n",
    )
    .unwrap();
    let mut csvs = Vec::new();
    for run in ["a", "b"] {
        dan(&["--config", "exp.toml", "--out", run, "scenario"], dir);
        dan(&["--config", "exp.toml", "--out", &format!("{run}/model"), "train-base", "--epochs", "2"], dir);
        dan(&["--config", "exp.toml", "--out", run, "quantize", "--model", &format!("{run}/model")], dir);
        let read = |p: &str| std::fs::read(dir.join(run).join(p)).unwrap();
        csvs.push([read("channel-switch+learn.csv"), read("model/history.csv"), read("quant.csv")]);
    }
    let identical = csvs[0] == csvs[1];
    r.record(10, "reproducibility", identical, format!("scenario, history and quantization CSVs byte-identical across two runs: {identical}"));
}

#[test]
fn acceptance() {
    let mut r = Report { lines: Vec::new() };
    criterion_preservation(&mut r);
    criterion_mimicry(&mut r);
    criterion_gradients(&mut r);
    criterion_scenarios(&mut r);
    criterion_cost(&mut r);
    criterion_quantization(&mut r);
    criterion_least_squares(&mut r);
    criterion_subspace(&mut r);
    criterion_decider(&mut r);
    criterion_reproducibility(&mut r);

    println!("\nacceptance summary");
    for (_, _, line) in &r.lines {
        println!("{line}");
    }
    let failed: Vec<u32> = r.lines.iter().filter(|(_, ok, _)| !ok).map(|(id, _, _)| *id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
