use serde::{Deserialize, Serialize};

use crate::error::{DanError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaBinding {
    Manual,
    Decider,
}

/// Per-task switching weights. One-hot selects a single task; real values in
/// `[0, 1]` interpolate convolution parameters between tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaSelector {
    alphas: Vec<f64>,
    pub binding: AlphaBinding,
}

#[derive(Clone, Debug, PartialEq)]
pub enum AlphaSpec {
    Task(usize),
    Weights(Vec<f64>),
}

impl AlphaSelector {
    /// Selects task 0 out of `tasks`.
    pub fn new(tasks: usize) -> Self {
        assert!(tasks >= 1, "at least one task");
        Self { alphas: one_hot(tasks, 0), binding: AlphaBinding::Manual }
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn task_count(&self) -> usize {
        self.alphas.len()
    }

    /// Extends to one more task, keeping the current selection.
    pub(crate) fn push_task(&mut self) {
        self.alphas.push(0.0);
    }

    pub fn set(&mut self, spec: AlphaSpec) -> Result<()> {
        let n = self.alphas.len();
        match spec {
            AlphaSpec::Task(j) if j < n => self.alphas = one_hot(n, j),
            AlphaSpec::Task(j) => {
                return Err(DanError::InvalidArgument(format!("task {j} out of range for {n} tasks")))
            }
            AlphaSpec::Weights(v) => {
                if v.len() != n {
                    return Err(DanError::InvalidArgument(format!("{} alpha entries for {n} tasks", v.len())));
                }
                if let Some(bad) = v.iter().find(|a| !(0.0..=1.0).contains(*a)) {
                    return Err(DanError::InvalidArgument(format!("alpha entry {bad} outside [0, 1]")));
                }
                self.alphas = v;
            }
        }
        Ok(())
    }

    /// The selected task when alpha is exactly one-hot.
    pub fn one_hot_task(&self) -> Option<usize> {
        let mut hit = None;
        for (i, &a) in self.alphas.iter().enumerate() {
            if a == 1.0 && hit.is_none() {
                hit = Some(i);
            } else if a != 0.0 {
                return None;
            }
        }
        hit
    }

    /// Task with the largest weight, lowest index on ties.
    pub fn dominant_task(&self) -> usize {
        argmax(&self.alphas)
    }
}

/// Updates `selector` from a task index or a weight vector.
pub fn set_alpha(selector: &mut AlphaSelector, spec: AlphaSpec) -> Result<()> {
    selector.set(spec)
}

pub fn one_hot(n: usize, j: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[j] = 1.0;
    v
}

/// First index of the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Converts real-valued decider outputs to a one-hot selection: the highest
/// entry becomes 1, the rest 0.
pub fn select_alpha_from_decider(logits: &[f64]) -> Vec<f64> {
    assert!(!logits.is_empty(), "decider produced no outputs");
    one_hot(logits.len(), argmax(logits))
}
