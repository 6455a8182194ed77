//! CSV writers for metrics and score tables.

use std::fmt::Write as _;

use bitagent_core::eval::ScoreRow;
use bitagent_core::toyworlds::TaskId;
use bitagent_core::train::MetricsRow;

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

/// Gate columns for `tasks` x `layers`, named `gate_<task>_<layer>`.
pub fn gate_columns(tasks: &[TaskId], layers: usize) -> Vec<String> {
    tasks
        .iter()
        .flat_map(|t| (0..layers).map(move |l| format!("gate_{t}_{l}")))
        .collect()
}

/// Streams metrics rows as CSV. Floats use Rust's shortest round-trip
/// formatting, so identical runs give identical bytes.
pub struct MetricsCsv {
    tasks: Vec<TaskId>,
    layers: usize,
    pub text: String,
}

impl MetricsCsv {
    pub fn new(tasks: &[TaskId], layers: usize) -> Self {
        let mut text = String::from(
            "step,phase,total,wm_dynamics,wm_reconstruction,mllm,jbo,grad_norm,grad_wm,grad_mllm,grad_jbo,\
             actor,critic,mean_reward,behavior_grad_norm",
        );
        for c in gate_columns(tasks, layers) {
            text.push(',');
            text.push_str(&c);
        }
        text.push_str(",eval_score\n");
        Self {
            tasks: tasks.to_vec(),
            layers,
            text,
        }
    }

    pub fn push(&mut self, r: &MetricsRow) {
        let b = r.behavior.as_ref();
        let _ = write!(
            self.text,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.phase,
            r.total,
            r.wm_dynamics,
            r.wm_reconstruction,
            r.mllm,
            opt(r.jbo),
            r.grad_norm,
            r.grad_wm,
            r.grad_mllm,
            opt(r.grad_jbo),
            opt(b.map(|b| b.actor)),
            opt(b.map(|b| b.critic)),
            opt(b.map(|b| b.mean_reward)),
            opt(b.map(|b| b.grad_norm)),
        );
        for t in &self.tasks {
            let gates = r.gates.iter().find(|(g, _)| g == t).map(|(_, v)| v.as_slice());
            for l in 0..self.layers {
                self.text.push(',');
                if let Some(v) = gates.and_then(|g| g.get(l)) {
                    self.text.push_str(&v.to_string());
                }
            }
        }
        let _ = writeln!(self.text, ",{}", opt(r.eval_score));
    }
}

pub const SCORE_HEADER: &str = "embodiment,task,rung,raw_mean,normalized_mean,std_err,n_seeds\n";

pub fn score_csv<'a>(rows: impl IntoIterator<Item = &'a ScoreRow>) -> String {
    let mut s = String::from(SCORE_HEADER);
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.embodiment, r.task, r.rung, r.raw_mean, r.normalized_mean, r.std_err, r.n_seeds
        );
    }
    s
}

/// Human-readable table for the terminal.
pub fn score_pretty<'a>(rows: impl IntoIterator<Item = &'a ScoreRow>) -> String {
    let mut s = format!(
        "{:<10} {:<6} {:<8} {:>9} {:>10} {:>8}\n",
        "embodiment", "task", "rung", "raw", "normalized", "se"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<10} {:<6} {:<8} {:>9.2} {:>10.3} {:>8.3}",
            r.embodiment, r.task, r.rung, r.raw_mean, r.normalized_mean, r.std_err
        );
    }
    s
}
