//! Experiment protocols: one configured run, the four-rung ablation ladder
//! and the cross-embodiment transfer matrix.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::eval::{aggregate, evaluate, References, ScoreRow, DEFAULT_EPISODES};
use crate::invalid;
use crate::jointopt::{LossWeights, ObjectiveConfig};
use crate::model::{Agent, FusionKind, ModelDims, PromptBook};
use crate::rng::Rng;
use crate::toyworlds::{collect_offline, Dataset, Embodiment, EnvConfig, TaskId};
use crate::train::{train, MetricsRow, TrainConfig};

/// Cumulative component sets compared by the ablation ladder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Rung {
    /// Additive fusion, world-model loss only.
    Base,
    /// Adds the semantic reconstruction and alignment loss.
    Mllm,
    /// Swaps in task-aware modular fusion.
    Tamf,
    /// Adds trajectory alignment to the objective.
    Jbo,
}

impl Rung {
    pub const ALL: [Rung; 4] = [Rung::Base, Rung::Mllm, Rung::Tamf, Rung::Jbo];

    pub fn as_str(self) -> &'static str {
        match self {
            Rung::Base => "base",
            Rung::Mllm => "+mllm",
            Rung::Tamf => "+tamf",
            Rung::Jbo => "+jbo",
        }
    }

    pub fn fusion(self) -> FusionKind {
        match self {
            Rung::Base | Rung::Mllm => FusionKind::Additive,
            Rung::Tamf | Rung::Jbo => FusionKind::Tamf,
        }
    }

    /// `full` with the terms this rung lacks zeroed.
    pub fn weights(self, full: LossWeights) -> LossWeights {
        match self {
            Rung::Base => LossWeights {
                mllm: 0.0,
                jbo: 0.0,
                ..full
            },
            Rung::Mllm | Rung::Tamf => LossWeights { jbo: 0.0, ..full },
            Rung::Jbo => full,
        }
    }
}

impl fmt::Display for Rung {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Rung {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Rung::ALL
            .into_iter()
            .find(|r| r.as_str() == s || r.as_str().trim_start_matches('+') == s)
            .ok_or_else(|| invalid!("unknown rung `{s}` (expected base, +mllm, +tamf or +jbo)"))
    }
}

/// Everything a run needs. Validated before any compute.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub embodiments_train: Vec<String>,
    pub embodiments_eval: Vec<String>,
    pub tasks: Vec<TaskId>,
    /// Offline episodes collected per training embodiment.
    pub episodes: usize,
    pub eval_episodes: usize,
    /// Evaluation seeds, counted from `eval_seed_base`.
    pub eval_seeds: usize,
    pub eval_seed_base: u64,
    /// Independently trained agents per protocol cell.
    pub replicates: usize,
    pub train: TrainConfig,
    pub dims: ModelDims,
    pub rung: Rung,
    pub env: EnvConfig,
    pub output_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            embodiments_train: alloc::vec!["light".into()],
            embodiments_eval: alloc::vec!["light".into()],
            tasks: alloc::vec![TaskId::Walk],
            episodes: 200,
            eval_episodes: DEFAULT_EPISODES,
            eval_seeds: 1,
            eval_seed_base: 10_000,
            replicates: 1,
            train: TrainConfig::default(),
            dims: ModelDims::new(5, 3),
            rung: Rung::Jbo,
            env: EnvConfig::default(),
            output_dir: "runs".into(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.dims.validate()?;
        if self.tasks.is_empty() {
            return Err(invalid!("no tasks configured"));
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if self.tasks[..i].contains(t) {
                return Err(invalid!("task {t} listed twice"));
            }
        }
        if self.embodiments_train.is_empty() || self.embodiments_eval.is_empty() {
            return Err(invalid!("need at least one training and one evaluation embodiment"));
        }
        if self.episodes == 0 || self.eval_episodes == 0 || self.eval_seeds == 0 || self.replicates == 0 {
            return Err(invalid!("episodes, eval_episodes, eval_seeds and replicates must be positive"));
        }
        if self.env.episode_len < self.train.seq_len {
            return Err(invalid!(
                "episode length {} is shorter than seq_len {}",
                self.env.episode_len,
                self.train.seq_len
            ));
        }
        if !(self.env.noise_std >= 0.0 && self.env.noise_std.is_finite()) {
            return Err(invalid!("noise_std must be finite and non-negative"));
        }
        for name in self.embodiments_train.iter().chain(&self.embodiments_eval) {
            let e = Embodiment::preset(name).ok_or_else(|| invalid!("unknown embodiment `{name}`"))?;
            if e.obs_dim() != self.dims.obs_dim || e.act_dim() != self.dims.act_dim {
                return Err(invalid!(
                    "embodiment `{name}` has dims {}/{}, the model is configured for {}/{}",
                    e.obs_dim(),
                    e.act_dim(),
                    self.dims.obs_dim,
                    self.dims.act_dim
                ));
            }
        }
        Ok(())
    }

    pub fn eval_seed_list(&self) -> Vec<u64> {
        (0..self.eval_seeds as u64).map(|i| self.eval_seed_base + i).collect()
    }

    /// Training seed of replicate `k`.
    pub fn replicate_seed(&self, k: usize) -> u64 {
        self.seed.wrapping_add(k as u64)
    }

    pub fn train_config(&self, rung: Rung, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            weights: rung.weights(self.train.weights),
            ..self.train
        }
    }
}

/// Collection seed of an embodiment's dataset; depends only on the
/// experiment seed and the embodiment name.
pub fn dataset_seed(seed: u64, embodiment: &str) -> u64 {
    let tag = embodiment.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    Rng::new(seed).fork(tag).seed()
}

/// Offline data for one embodiment under `cfg`.
pub fn collect_for(cfg: &ExperimentConfig, embodiment: &str) -> Result<Dataset> {
    let e = Embodiment::preset(embodiment).ok_or_else(|| invalid!("unknown embodiment `{embodiment}`"))?;
    Dataset::new(collect_offline(
        &e,
        &cfg.tasks,
        cfg.episodes,
        &cfg.env,
        &Rng::new(dataset_seed(cfg.seed, embodiment)),
    )?)
}

/// Random and expert references per (embodiment, task) on the evaluation
/// seeds.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReferenceCache {
    entries: Vec<(String, TaskId, References)>,
}

impl ReferenceCache {
    pub fn get_or_compute(&mut self, cfg: &ExperimentConfig, embodiment: &str, task: TaskId) -> Result<References> {
        if let Some((_, _, r)) = self.entries.iter().find(|(e, t, _)| e == embodiment && *t == task) {
            return Ok(*r);
        }
        let e = Embodiment::preset(embodiment).ok_or_else(|| invalid!("unknown embodiment `{embodiment}`"))?;
        let r = References::compute(&e, task, cfg.eval_episodes, &cfg.eval_seed_list(), &cfg.env)?;
        self.entries.push((embodiment.to_string(), task, r));
        Ok(r)
    }

    pub fn insert(&mut self, embodiment: &str, task: TaskId, r: References) -> Result<()> {
        r.validate()?;
        self.entries.retain(|(e, t, _)| !(e == embodiment && *t == task));
        self.entries.push((embodiment.to_string(), task, r));
        Ok(())
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, TaskId, References)> {
        self.entries.iter().map(|(e, t, r)| (e.as_str(), *t, *r))
    }
}

/// Trains one agent of the given rung.
pub fn train_rung(
    cfg: &ExperimentConfig,
    rung: Rung,
    seed: u64,
    data: &Dataset,
    prompts: &PromptBook,
) -> Result<(Agent, Vec<MetricsRow>)> {
    let agent = Agent::new(cfg.dims, rung.fusion(), seed)?;
    train(agent, data, prompts, cfg.train_config(rung, seed))
}

/// Scores one agent on every configured task of one embodiment.
pub fn score_agent(
    cfg: &ExperimentConfig,
    agent: &Agent,
    prompts: &PromptBook,
    embodiment: &str,
    label: &str,
    refs: &mut ReferenceCache,
) -> Result<Vec<ScoreRow>> {
    let e = Embodiment::preset(embodiment).ok_or_else(|| invalid!("unknown embodiment `{embodiment}`"))?;
    cfg.tasks
        .iter()
        .map(|&t| {
            let r = refs.get_or_compute(cfg, embodiment, t)?;
            evaluate(agent, prompts, &e, t, &r, cfg.eval_episodes, &cfg.eval_seed_list(), &cfg.env, label)
        })
        .collect()
}

/// Per-task rows averaged over replicates (each row list in task order).
fn combine(per_replicate: &[Vec<ScoreRow>]) -> Result<Vec<ScoreRow>> {
    let n = per_replicate.first().map_or(0, Vec::len);
    (0..n)
        .map(|i| {
            let cell: Vec<ScoreRow> = per_replicate.iter().map(|rows| rows[i].clone()).collect();
            aggregate(&cell)
        })
        .collect()
}

/// Mean normalized score of a table.
pub fn table_mean(rows: &[ScoreRow]) -> f64 {
    rows.iter().map(|r| r.normalized_mean).sum::<f64>() / rows.len().max(1) as f64
}

/// Trains every rung on the first training embodiment's data with the same
/// replicate seeds, then scores each on that embodiment. One table per
/// rung, in ladder order. `progress` sees each trained agent and its rows.
pub fn ablation_ladder(
    cfg: &ExperimentConfig,
    data: &Dataset,
    prompts: &PromptBook,
    refs: &mut ReferenceCache,
    mut progress: impl FnMut(Rung, usize, &Agent, &[ScoreRow]),
) -> Result<Vec<(Rung, Vec<ScoreRow>)>> {
    cfg.validate()?;
    let embodiment = &cfg.embodiments_train[0];
    let mut tables = Vec::with_capacity(Rung::ALL.len());
    for rung in Rung::ALL {
        let mut per = Vec::with_capacity(cfg.replicates);
        for k in 0..cfg.replicates {
            let (agent, _) = train_rung(cfg, rung, cfg.replicate_seed(k), data, prompts)?;
            let rows = score_agent(cfg, &agent, prompts, embodiment, rung.as_str(), refs)?;
            progress(rung, k, &agent, &rows);
            per.push(rows);
        }
        tables.push((rung, combine(&per)?));
    }
    Ok(tables)
}

/// Scores of the transfer protocol. `source` holds in-domain rows for
/// reference; `full` and `no_tamf` hold one row per (target, task).
#[derive(Clone, Debug, PartialEq)]
pub struct TransferTable {
    pub source_full: Vec<ScoreRow>,
    pub source_no_tamf: Vec<ScoreRow>,
    pub full: Vec<ScoreRow>,
    pub no_tamf: Vec<ScoreRow>,
}

impl TransferTable {
    pub fn rows(&self) -> impl Iterator<Item = &ScoreRow> {
        self.source_full
            .iter()
            .chain(&self.source_no_tamf)
            .chain(&self.full)
            .chain(&self.no_tamf)
    }
}

pub const FULL_LABEL: &str = "full";
pub const NO_TAMF_LABEL: &str = "no-tamf";

/// Trains on the first training embodiment only and scores zero-shot on
/// every evaluation embodiment other than it. The no-TAMF variant keeps
/// every loss term and swaps in additive fusion.
pub fn transfer_protocol(
    cfg: &ExperimentConfig,
    data: &Dataset,
    prompts: &PromptBook,
    refs: &mut ReferenceCache,
    mut progress: impl FnMut(&str, usize, &[ScoreRow]),
) -> Result<TransferTable> {
    cfg.validate()?;
    let source = &cfg.embodiments_train[0];
    let targets: Vec<&String> = cfg.embodiments_eval.iter().filter(|e| *e != source).collect();
    if targets.is_empty() {
        return Err(invalid!("transfer needs an evaluation embodiment different from `{source}`"));
    }
    let mut cells: [(Vec<Vec<ScoreRow>>, Vec<Vec<ScoreRow>>); 2] = Default::default();
    for (v, (label, kind)) in [(FULL_LABEL, FusionKind::Tamf), (NO_TAMF_LABEL, FusionKind::Additive)]
        .into_iter()
        .enumerate()
    {
        for k in 0..cfg.replicates {
            let seed = cfg.replicate_seed(k);
            let agent = Agent::new(cfg.dims, kind, seed)?;
            let (agent, _) = train(agent, data, prompts, cfg.train_config(Rung::Jbo, seed))?;
            let src = score_agent(cfg, &agent, prompts, source, label, refs)?;
            progress(label, k, &src);
            let mut tgt = Vec::new();
            for t in &targets {
                tgt.extend(score_agent(cfg, &agent, prompts, t, label, refs)?);
            }
            progress(label, k, &tgt);
            cells[v].0.push(src);
            cells[v].1.push(tgt);
        }
    }
    let [(sf, tf), (sn, tn)] = cells;
    Ok(TransferTable {
        source_full: combine(&sf)?,
        source_no_tamf: combine(&sn)?,
        full: combine(&tf)?,
        no_tamf: combine(&tn)?,
    })
}

/// Resolves the weights a rung actually trains with, for manifests.
pub fn rung_weights(cfg: &ExperimentConfig) -> LossWeights {
    cfg.rung.weights(cfg.train.weights)
}

/// Objective knobs, for manifests.
pub fn objective(cfg: &ExperimentConfig) -> ObjectiveConfig {
    cfg.train.objective
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig {
            tasks: alloc::vec![TaskId::Stand, TaskId::Walk, TaskId::Run],
            embodiments_eval: alloc::vec!["light".into(), "heavy".into(), "springy".into()],
            episodes: 8,
            eval_episodes: 2,
            ..ExperimentConfig::default()
        };
        c.env.episode_len = 20;
        c.train.pretrain_steps = 2;
        c.train.behavior_steps = 1;
        c.train.batch = 2;
        c.train.seq_len = 4;
        c
    }

    #[test]
    fn rung_semantics() {
        let w = LossWeights::default();
        assert_eq!(Rung::Base.weights(w).mllm, 0.0);
        assert_eq!(Rung::Base.weights(w).jbo, 0.0);
        assert_eq!(Rung::Mllm.weights(w).mllm, 1.0);
        assert_eq!(Rung::Mllm.weights(w).jbo, 0.0);
        assert_eq!(Rung::Jbo.weights(w), w);
        assert_eq!(Rung::Base.fusion(), FusionKind::Additive);
        assert_eq!(Rung::Tamf.fusion(), FusionKind::Tamf);
        for r in Rung::ALL {
            assert_eq!(r.as_str().parse::<Rung>().unwrap(), r);
        }
        assert!("tamf".parse::<Rung>().is_ok());
        assert!("nope".parse::<Rung>().is_err());
    }

    #[test]
    fn validation_rejects_bad_configs() {
        assert!(tiny().validate().is_ok());
        let mut c = tiny();
        c.embodiments_eval.push("giant".into());
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.tasks.push(TaskId::Walk);
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.dims.obs_dim = 6;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.train.seq_len = 40;
        assert!(c.validate().is_err());
    }

    #[test]
    fn ablation_emits_four_tables() {
        let c = tiny();
        let data = collect_for(&c, "light").unwrap();
        let mut refs = ReferenceCache::default();
        let tables = ablation_ladder(&c, &data, &PromptBook::new(), &mut refs, |_, _, _, _| {}).unwrap();
        assert_eq!(tables.len(), 4);
        assert!(tables.iter().all(|(_, t)| t.len() == 3));
        assert_eq!(tables[0].1[0].rung, "base");
    }

    #[test]
    fn transfer_counts_cells() {
        let c = tiny();
        let data = collect_for(&c, "light").unwrap();
        let mut refs = ReferenceCache::default();
        let t = transfer_protocol(&c, &data, &PromptBook::new(), &mut refs, |_, _, _| {}).unwrap();
        assert_eq!(t.full.len(), 6);
        assert_eq!(t.no_tamf.len(), 6);
        assert_eq!(t.source_full.len(), 3);
        assert!(t.full.iter().all(|r| r.embodiment != "light"));
    }

    #[test]
    fn dataset_seed_depends_on_embodiment() {
        assert_ne!(dataset_seed(0, "light"), dataset_seed(0, "heavy"));
        assert_eq!(dataset_seed(3, "light"), dataset_seed(3, "light"));
    }
}
