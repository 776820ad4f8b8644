//! Domain classification for automatic task selection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bars::{toy_network, Dataset};
use crate::dan::{argmax, select_alpha_from_decider, DanNetwork};
use crate::error::{DanError, Result};
use crate::train::{evaluate, predict, train, RunHistory, TrainConfig, TransferMode};

/// Concatenates domains, labelling every example with its domain index.
pub fn domain_dataset(domains: &[&Dataset]) -> Result<Dataset> {
    let first = domains.first().ok_or(DanError::EmptyDataset)?;
    let mut out = Dataset::empty(first.image_dims);
    for (i, d) in domains.iter().enumerate() {
        out.extend(&d.relabeled(i))?;
    }
    Ok(out)
}

/// Trains a toy-shaped network with one output per domain.
pub fn train_decider(
    train_domains: &[&Dataset],
    val_domains: &[&Dataset],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(DanNetwork, RunHistory)> {
    let train_set = domain_dataset(train_domains)?;
    let val_set = domain_dataset(val_domains)?;
    let mut arch = toy_network();
    arch.head = vec![50, train_domains.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = DanNetwork::new(arch, "decider", &mut rng)?;
    let history = train(&mut net, &train_set, &val_set, 0, TransferMode::FtFull, cfg, seed, "decider")?;
    Ok((net, history))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeciderReport {
    pub decider_accuracy: f64,
    /// Accuracy of each domain's task with the correct task selected.
    pub task_accuracies: Vec<f64>,
    pub end_to_end: f64,
    /// `decider_accuracy * mean(task_accuracies)`
    pub product: f64,
}

/// Classifies every example of every domain by letting the decider pick the
/// task. `tasks[i]` is the model task serving domain `i`.
pub fn evaluate_with_decider(
    model: &DanNetwork,
    decider: &DanNetwork,
    tasks: &[usize],
    domains: &[&Dataset],
) -> Result<DeciderReport> {
    if tasks.len() != domains.len() {
        return Err(DanError::InvalidArgument(format!("{} tasks for {} domains", tasks.len(), domains.len())));
    }
    if decider.tasks[0].head.classes() != domains.len() {
        return Err(DanError::InvalidArgument(format!(
            "decider has {} outputs for {} domains",
            decider.tasks[0].head.classes(),
            domains.len()
        )));
    }
    let mut task_accuracies = Vec::with_capacity(domains.len());
    let (mut routed, mut correct, mut total) = (0, 0, 0);
    for (i, d) in domains.iter().enumerate() {
        task_accuracies.push(evaluate(model, d, tasks[i])?);
        let per_task: Vec<Vec<usize>> = tasks.iter().map(|&t| predict(model, d, t)).collect::<Result<_>>()?;
        for (j, logits) in decider_logits(decider, d)?.iter().enumerate() {
            let alpha = select_alpha_from_decider(logits);
            let domain = argmax(&alpha);
            routed += usize::from(domain == i);
            correct += usize::from(per_task[domain][j] == d.labels[j]);
        }
        total += d.len();
    }
    if total == 0 {
        return Err(DanError::EmptyDataset);
    }
    let decider_accuracy = routed as f64 / total as f64;
    let mean_task = task_accuracies.iter().sum::<f64>() / task_accuracies.len() as f64;
    Ok(DeciderReport {
        decider_accuracy,
        task_accuracies,
        end_to_end: correct as f64 / total as f64,
        product: decider_accuracy * mean_task,
    })
}

/// Raw decider outputs, one row per example.
pub fn decider_logits(decider: &DanNetwork, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut rows = Vec::with_capacity(data.len());
    for chunk in idx.chunks(250) {
        let (x, _) = data.batch(chunk);
        let logits = decider.logits_for_task(&x, 0)?;
        let k = logits.dims()[1];
        rows.extend(logits.data().chunks(k).map(<[f64]>::to_vec));
    }
    Ok(rows)
}
