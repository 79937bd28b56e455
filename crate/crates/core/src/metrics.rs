//! Step and task level evaluation of predicted actions.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::Action;
use crate::alignment::argument_f1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    pub task_id: String,
    pub step_index: usize,
    pub predicted: Action,
    pub gold: Action,
    /// Unparsed model text; when present the reward checks its format.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_output: Option<String>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("no step records")]
    EmptyRun,
    #[error("step {step_index} of task {task_id:?} appears twice")]
    DuplicateStep { task_id: String, step_index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Minimum argument F1 for a step to count as successful.
    pub success_f1_threshold: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { success_f1_threshold: 1.0 }
    }
}

pub fn element_correct(predicted: &Action, gold: &Action) -> bool {
    predicted.element_id() == gold.element_id()
}

/// Zero on kind mismatch, otherwise argument token F1 (1.0 for argument-less
/// operations).
pub fn operation_f1(predicted: &Action, gold: &Action) -> f64 {
    if predicted.kind() != gold.kind() {
        return 0.0;
    }
    argument_f1(predicted, gold)
}

pub fn step_success_with(predicted: &Action, gold: &Action, threshold: f64) -> bool {
    element_correct(predicted, gold) && predicted.kind() == gold.kind() && argument_f1(predicted, gold) >= threshold
}

pub fn step_success(predicted: &Action, gold: &Action) -> bool {
    step_success_with(predicted, gold, MetricsConfig::default().success_f1_threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub steps: usize,
    pub acc: f64,
    pub f1: f64,
    pub sr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub steps: usize,
    pub tasks: usize,
    pub acc_micro: f64,
    pub f1_micro: f64,
    pub acc_macro: f64,
    pub f1_macro: f64,
    pub step_sr: f64,
    pub composite: f64,
    pub per_task: BTreeMap<String, TaskMetrics>,
}

#[derive(Default, Clone, Copy)]
struct Sums {
    steps: usize,
    acc: f64,
    f1: f64,
    sr: f64,
}

pub fn compute_report(records: &[StepRecord], config: &MetricsConfig) -> Result<MetricsReport, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyRun);
    }
    let mut seen = HashSet::new();
    let mut tasks: BTreeMap<&str, Sums> = BTreeMap::new();
    for r in records {
        if !seen.insert((r.task_id.as_str(), r.step_index)) {
            return Err(MetricsError::DuplicateStep {
                task_id: r.task_id.clone(),
                step_index: r.step_index,
            });
        }
        let sums = tasks.entry(&r.task_id).or_default();
        sums.steps += 1;
        sums.acc += f64::from(u8::from(element_correct(&r.predicted, &r.gold)));
        sums.f1 += operation_f1(&r.predicted, &r.gold);
        sums.sr += f64::from(u8::from(step_success_with(&r.predicted, &r.gold, config.success_f1_threshold)));
    }

    // Sum per task first so the result does not depend on record order.
    let mut total = Sums::default();
    let mut per_task = BTreeMap::new();
    let (mut acc_macro, mut f1_macro) = (0.0, 0.0);
    for (task, s) in &tasks {
        total.steps += s.steps;
        total.acc += s.acc;
        total.f1 += s.f1;
        total.sr += s.sr;
        let n = s.steps as f64;
        let m = TaskMetrics {
            steps: s.steps,
            acc: s.acc / n,
            f1: s.f1 / n,
            sr: s.sr / n,
        };
        acc_macro += m.acc;
        f1_macro += m.f1;
        per_task.insert(task.to_string(), m);
    }
    let n = total.steps as f64;
    let t = tasks.len() as f64;
    let (acc_micro, f1_micro) = (total.acc / n, total.f1 / n);
    let (acc_macro, f1_macro) = (acc_macro / t, f1_macro / t);
    Ok(MetricsReport {
        steps: total.steps,
        tasks: tasks.len(),
        acc_micro,
        f1_micro,
        acc_macro,
        f1_macro,
        step_sr: total.sr / n,
        composite: (acc_micro + f1_micro + acc_macro + f1_macro) / 4.0,
        per_task,
    })
}

impl MetricsReport {
    /// One-row table in percent.
    pub fn render_table(&self) -> String {
        let header = ["Ele. Acc (μ)", "Op. F1 (μ)", "Ele. Acc (M)", "Op. F1 (M)", "Step SR", "Score"];
        let values = [
            self.acc_micro,
            self.f1_micro,
            self.acc_macro,
            self.f1_macro,
            self.step_sr,
            self.composite,
        ];
        let mut out = String::new();
        let _ = writeln!(out, "| {} |", header.join(" | "));
        let _ = writeln!(out, "|{}", header.iter().map(|h| format!("{}|", "-".repeat(h.chars().count() + 2))).collect::<String>());
        let cells: Vec<String> = header
            .iter()
            .zip(values)
            .map(|(h, v)| format!("{:>w$.1}", v * 100.0, w = h.chars().count()))
            .collect();
        let _ = writeln!(out, "| {} |", cells.join(" | "));
        let _ = writeln!(out, "{} steps over {} tasks", self.steps, self.tasks);
        out
    }
}
