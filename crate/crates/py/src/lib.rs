//! Python bindings: models, scenario runs and the cost and quantization helpers.

use std::path::PathBuf;

use dan_core::archive::{load_model, save_model};
use dan_core::bars::{gen_bars, scenario_setup, toy_network, BarsConfig, BarsVariant};
use dan_core::dan::{network_cost, AlphaSpec, DanNetwork, InitScheme};
use dan_core::train::{evaluate, run_trials, train, TrainConfig, TransferMode};
use dan_core::{DanError, Tensor};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

create_exception!(pydan, DanException, PyException);

fn py_err(e: DanError) -> PyErr {
    DanException::new_err(format!("[{}] {e}", e.code()))
}

fn parse<T: std::str::FromStr<Err = DanError>>(s: &str) -> PyResult<T> {
    s.parse().map_err(py_err)
}

#[pyclass(name = "Model", module = "pydan")]
struct PyModel {
    net: DanNetwork,
}

#[pymethods]
impl PyModel {
    /// A fresh toy network whose only task is named `base`.
    #[staticmethod]
    #[pyo3(signature = (base="red-horizontal", seed=0))]
    fn toy(base: &str, seed: u64) -> PyResult<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self { net: DanNetwork::new(toy_network(), base, &mut rng).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { net: load_model(&path).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_model(&self.net, &path).map_err(py_err)
    }

    #[getter]
    fn task_names(&self) -> Vec<String> {
        self.net.tasks.iter().map(|t| t.name.clone()).collect()
    }

    #[getter]
    fn alpha(&self) -> Vec<f64> {
        self.net.alpha.alphas().to_vec()
    }

    fn select_task(&mut self, task: &str) -> PyResult<()> {
        let t = self.net.resolve_task(task).map_err(py_err)?;
        self.net.set_alpha(AlphaSpec::Task(t)).map_err(py_err)
    }

    fn set_alpha(&mut self, alpha: Vec<f64>) -> PyResult<()> {
        self.net.set_alpha(AlphaSpec::Weights(alpha)).map_err(py_err)
    }

    /// Adds a task and returns its index.
    #[pyo3(signature = (name, transfer="dan-linear", init="diagonal", classes=5, seed=0))]
    fn attach(&mut self, name: &str, transfer: &str, init: &str, classes: usize, seed: u64) -> PyResult<usize> {
        let transfer: TransferMode = parse(transfer)?;
        let init: InitScheme = parse(init)?;
        let mut head = self.net.tasks[0].head.widths();
        head.pop();
        head.push(classes);
        let spec = transfer.attach_spec(name, head, self.net.convs.len(), init);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.net.attach_task(&spec, None, &mut rng).map_err(py_err)
    }

    /// Trains one task on a generated bars dataset and returns the
    /// per-epoch validation accuracy.
    #[pyo3(signature = (task, variant=None, transfer=None, epochs=50, seed=0))]
    fn train(
        &mut self,
        py: Python<'_>,
        task: &str,
        variant: Option<&str>,
        transfer: Option<&str>,
        epochs: usize,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let t = self.net.resolve_task(task).map_err(py_err)?;
        let variant: BarsVariant = parse(variant.unwrap_or(&self.net.tasks[t].name))?;
        let mode: TransferMode = match transfer {
            Some(m) => parse(m)?,
            None if t == 0 => TransferMode::FtFull,
            None => TransferMode::DanLinear,
        };
        let net = &mut self.net;
        let history = py
            .detach(|| {
                let data = gen_bars(&BarsConfig { variant, seed, ..Default::default() })?;
                let cfg = TrainConfig { epochs, ..Default::default() };
                train(net, &data.train, &data.test, t, mode, &cfg, seed, "python")
            })
            .map_err(py_err)?;
        Ok(history.epochs.iter().map(|e| e.val_acc).collect())
    }

    #[pyo3(signature = (task, variant=None, seed=0))]
    fn evaluate(&self, task: &str, variant: Option<&str>, seed: u64) -> PyResult<f64> {
        let t = self.net.resolve_task(task).map_err(py_err)?;
        let variant: BarsVariant = parse(variant.unwrap_or(&self.net.tasks[t].name))?;
        let data = gen_bars(&BarsConfig { variant, seed, ..Default::default() }).map_err(py_err)?;
        evaluate(&self.net, &data.test, t).map_err(py_err)
    }

    /// Logits for flat `[N, 3, 28, 28]` images under the current alpha.
    fn logits(&self, images: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        let per: usize = self.net.arch.input.iter().product();
        if images.is_empty() || !images.len().is_multiple_of(per) {
            return Err(py_err(DanError::Shape(format!("{} values is not a whole number of images", images.len()))));
        }
        let mut dims = vec![images.len() / per];
        dims.extend(self.net.arch.input);
        let x = Tensor::new(dims, images).map_err(py_err)?;
        let out = self.net.logits(&x).map_err(py_err)?;
        let k = out.dims()[1];
        Ok(out.data().chunks(k).map(<[f64]>::to_vec).collect())
    }

    fn cost<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let report = network_cost(&self.net).map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("base_params", report.base_params)?;
        d.set_item("increment", report.increment)?;
        d.set_item("tasks", report.tasks)?;
        d.set_item("total", report.total)?;
        d.set_item("amortized", report.amortized)?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        format!("Model(tasks={:?})", self.task_names())
    }
}

#[pyfunction]
fn layer_cost_ratio(c_out: usize, filter_len: usize) -> f64 {
    dan_core::dan::layer_cost_ratio(c_out, filter_len)
}

#[pyfunction]
fn total_cost(increment: f64, tasks: usize) -> f64 {
    dan_core::dan::total_cost(increment, tasks)
}

#[pyfunction]
fn amortized_cost(increment: f64, tasks: usize) -> f64 {
    dan_core::dan::amortized_cost(increment, tasks)
}

#[pyfunction]
fn quantized_storage_fraction(increment: f64, bits: u32) -> f64 {
    dan_core::dan::quantized_storage_fraction(increment, bits)
}

#[pyfunction]
fn quantize_linear(values: Vec<f64>, bits: u32) -> PyResult<Vec<f64>> {
    let n = values.len();
    let t = Tensor::new(vec![n], values).map_err(py_err)?;
    Ok(dan_core::quant::quantize_linear(&t, bits).map_err(py_err)?.into_data())
}

#[pyfunction]
fn select_alpha_from_decider(logits: Vec<f64>) -> PyResult<Vec<f64>> {
    if logits.is_empty() {
        return Err(py_err(DanError::InvalidArgument("no decider outputs".into())));
    }
    Ok(dan_core::dan::select_alpha_from_decider(&logits))
}

/// Final validation accuracy of each trial of a toy scenario.
#[pyfunction]
#[pyo3(signature = (name, trials=20, epochs=50, seed=0))]
fn run_scenario(py: Python<'_>, name: &str, trials: usize, epochs: usize, seed: u64) -> PyResult<Vec<f64>> {
    let mut spec = scenario_setup(name).map_err(py_err)?;
    spec.trials = trials;
    spec.epochs = epochs;
    let report = py.detach(|| run_trials(&spec, &TrainConfig::default(), seed)).map_err(py_err)?;
    Ok(report.final_accuracies())
}

#[pymodule]
fn pydan(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DanError", m.py().get_type::<DanException>())?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(layer_cost_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(total_cost, m)?)?;
    m.add_function(wrap_pyfunction!(amortized_cost, m)?)?;
    m.add_function(wrap_pyfunction!(quantized_storage_fraction, m)?)?;
    m.add_function(wrap_pyfunction!(quantize_linear, m)?)?;
    m.add_function(wrap_pyfunction!(select_alpha_from_decider, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    Ok(())
}
