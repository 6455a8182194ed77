//! Two-phase training: joint-objective pretraining, then alternating
//! joint-objective and behavior updates.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::behavior::{behavior_update, BehaviorStats};
use crate::error::Result;
use crate::invalid;
use crate::jointopt::{grad_norm, total_loss, Adam, LossWeights, ObjectiveConfig, StartSnapshot, DEFAULT_LR};
use crate::model::{Agent, PromptBook};
use crate::numcore::Graph;
use crate::rng::Rng;
use crate::toyworlds::{Dataset, TaskId};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch: usize,
    pub seq_len: usize,
    pub pretrain_steps: usize,
    pub behavior_steps: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub objective: ObjectiveConfig,
    /// A metrics row (with per-term gradient norms) every this many steps.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch: 16,
            seq_len: 16,
            pretrain_steps: 3000,
            behavior_steps: 1500,
            lr: DEFAULT_LR,
            weights: LossWeights::default(),
            objective: ObjectiveConfig::default(),
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch == 0 || self.seq_len < 2 {
            return Err(invalid!("batch must be positive and seq_len at least 2"));
        }
        if self.log_every == 0 {
            return Err(invalid!("log_every must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid!("learning rate must be positive, got {}", self.lr));
        }
        if self.objective.horizon == 0 {
            return Err(invalid!("imagination horizon must be at least 1"));
        }
        if let Some(a) = self.objective.kl_balance {
            if !(0.0..=1.0).contains(&a) {
                return Err(invalid!("kl_balance must lie in [0, 1], got {a}"));
            }
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.pretrain_steps + self.behavior_steps
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Behavior,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Behavior => "behavior",
        })
    }
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub phase: Phase,
    pub total: f64,
    pub wm_dynamics: f64,
    pub wm_reconstruction: f64,
    pub mllm: f64,
    pub jbo: Option<f64>,
    pub grad_norm: f64,
    pub grad_wm: f64,
    pub grad_mllm: f64,
    pub grad_jbo: Option<f64>,
    pub behavior: Option<BehaviorStats>,
    /// Per-layer gate values for each task in the data.
    pub gates: Vec<(TaskId, Vec<f64>)>,
    pub eval_score: Option<f64>,
}

/// Values from one joint-objective step.
#[derive(Clone, Debug)]
pub struct ModelStepStats {
    pub total: f64,
    pub wm_dynamics: f64,
    pub wm_reconstruction: f64,
    pub mllm: f64,
    pub jbo: Option<f64>,
    pub grad_norm: f64,
    /// Per-term gradient norms, only computed when requested.
    pub term_norms: Option<(f64, f64, Option<f64>)>,
    pub starts: StartSnapshot,
}

/// Owns the agent and optimizer state during a run.
pub struct Trainer<'a> {
    pub agent: Agent,
    pub cfg: TrainConfig,
    opt: Adam,
    rng: Rng,
    data: &'a Dataset,
    prompts: &'a PromptBook,
    tasks: Vec<(String, TaskId)>,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(agent: Agent, data: &'a Dataset, prompts: &'a PromptBook, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(invalid!("training dataset is empty"));
        }
        if data.obs_dim() != agent.dims.obs_dim || data.act_dim() != agent.dims.act_dim {
            return Err(invalid!(
                "dataset dims {}/{} do not match the model's {}/{}",
                data.obs_dim(),
                data.act_dim(),
                agent.dims.obs_dim,
                agent.dims.act_dim
            ));
        }
        let mut tasks: Vec<(String, TaskId)> = Vec::new();
        for ep in &data.episodes {
            if !tasks.iter().any(|(_, t)| *t == ep.task) {
                tasks.push((ep.embodiment.clone(), ep.task));
            }
        }
        tasks.sort_by_key(|(_, t)| t.index());
        let mut opt = Adam::new(&agent.store, cfg.lr);
        opt.lr = cfg.lr;
        Ok(Self {
            agent,
            cfg,
            opt,
            rng: Rng::new(cfg.seed).fork(0x7472_6169_6e),
            data,
            prompts,
            tasks,
            step: 0,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Jumps the schedule forward, e.g. to run only the behavior phase on
    /// a pretrained agent. Optimizer moments start fresh.
    pub fn skip_to(&mut self, step: usize) -> Result<()> {
        if step < self.step || step > self.cfg.total_steps() {
            return Err(invalid!("cannot move the schedule from step {} to {step}", self.step));
        }
        self.step = step;
        Ok(())
    }

    pub fn phase(&self) -> Phase {
        if self.step < self.cfg.pretrain_steps {
            Phase::Pretrain
        } else {
            Phase::Behavior
        }
    }

    /// Gate values per (task, layer) for the tasks present in the data.
    pub fn gate_snapshot(&self) -> Result<Vec<(TaskId, Vec<f64>)>> {
        self.tasks
            .iter()
            .map(|(e, t)| Ok((*t, self.agent.gate_values(self.prompts.get(e, *t))?)))
            .collect()
    }

    /// One optimizer step on the joint objective.
    pub fn model_step(&mut self, term_norms: bool) -> Result<ModelStepStats> {
        let batch = self.data.sample_batch(self.cfg.batch, self.cfg.seq_len, &mut self.rng)?;
        let prompts: Vec<&str> = (0..batch.batch)
            .map(|i| self.prompts.get(&batch.embodiments[i], batch.tasks[i]))
            .collect();
        let ids = self.agent.objective_params();
        let (stats, grads) = {
            let mut g = Graph::with_trainable(&self.agent.store, &ids);
            let out = total_loss(
                &mut g,
                &self.agent,
                &batch,
                &prompts,
                &self.cfg.weights,
                &self.cfg.objective,
                &mut self.rng,
            )?;
            let grads = g.backward(out.total)?.into_params();
            let norms = if term_norms {
                let w = &self.cfg.weights;
                let n = |v| -> Result<f64> { Ok(grad_norm(&g.backward(v)?.into_params(), None)) };
                let jbo = match out.jbo {
                    Some(j) => Some(w.jbo * n(j)?),
                    None => None,
                };
                Some((w.wm * n(out.wm.total)?, w.mllm * n(out.mllm)?, jbo))
            } else {
                None
            };
            let stats = ModelStepStats {
                total: g.scalar(out.total),
                wm_dynamics: g.scalar(out.wm.dynamics),
                wm_reconstruction: g.scalar(out.wm.reconstruction),
                mllm: g.scalar(out.mllm),
                jbo: out.jbo.map(|j| g.scalar(j)),
                grad_norm: 0.0,
                term_norms: norms,
                starts: out.starts,
            };
            (stats, grads)
        };
        let grad_norm = self.opt.step(&mut self.agent.store, &grads, Some(&ids))?;
        Ok(ModelStepStats { grad_norm, ..stats })
    }

    pub fn behavior_step(&mut self, starts: &StartSnapshot) -> Result<BehaviorStats> {
        behavior_update(
            &mut self.agent,
            &mut self.opt,
            starts,
            &self.cfg.objective,
            self.cfg.weights.gamma,
            &mut self.rng,
        )
    }

    /// Advances one schedule step and returns a metrics row on logging
    /// steps (and on the final step).
    pub fn advance(&mut self) -> Result<Option<MetricsRow>> {
        if self.step >= self.cfg.total_steps() {
            return Err(invalid!("training schedule already complete"));
        }
        let phase = self.phase();
        let last = self.step + 1 == self.cfg.total_steps();
        let log = (self.step + 1) % self.cfg.log_every == 0 || last;
        let m = self.model_step(log)?;
        let behavior = match phase {
            Phase::Behavior => Some(self.behavior_step(&m.starts)?),
            Phase::Pretrain => None,
        };
        self.step += 1;
        if !log {
            return Ok(None);
        }
        let (grad_wm, grad_mllm, grad_jbo) = m.term_norms.unwrap_or((0.0, 0.0, None));
        Ok(Some(MetricsRow {
            step: self.step,
            phase,
            total: m.total,
            wm_dynamics: m.wm_dynamics,
            wm_reconstruction: m.wm_reconstruction,
            mllm: m.mllm,
            jbo: m.jbo,
            grad_norm: m.grad_norm,
            grad_wm,
            grad_mllm,
            grad_jbo,
            behavior,
            gates: self.gate_snapshot()?,
            eval_score: None,
        }))
    }

    /// Runs the remaining schedule, handing each metrics row to `sink`.
    pub fn run(&mut self, mut sink: impl FnMut(&Trainer<'_>, MetricsRow) -> Result<()>) -> Result<()> {
        while self.step < self.cfg.total_steps() {
            if let Some(row) = self.advance()? {
                sink(self, row)?;
            }
        }
        Ok(())
    }

    pub fn into_agent(self) -> Agent {
        self.agent
    }
}

/// Trains a fresh copy of `agent` for the whole schedule and returns it with
/// its metrics.
pub fn train(agent: Agent, data: &Dataset, prompts: &PromptBook, cfg: TrainConfig) -> Result<(Agent, Vec<MetricsRow>)> {
    let mut rows = Vec::new();
    let mut t = Trainer::new(agent, data, prompts, cfg)?;
    t.run(|_, r| {
        rows.push(r);
        Ok(())
    })?;
    Ok((t.into_agent(), rows))
}
