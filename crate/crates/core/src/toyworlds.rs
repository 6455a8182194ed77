//! Toy locomotion worlds: a damped point mass with spring-driven posture
//! joints, scripted offline data collection and the replay dataset.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::invalid;
use crate::rng::Rng;

pub const DT: f64 = 0.1;
pub const NOISE_STD: f64 = 0.01;
pub const V_MAX: f64 = 5.0;
pub const EPISODE_LEN: usize = 100;
/// Spring rate pulling each posture joint toward its commanded value.
pub const POSTURE_RATE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct Embodiment {
    pub name: String,
    pub mass: f64,
    pub damping: f64,
    pub action_scale: f64,
    pub posture_dim: usize,
}

impl Embodiment {
    pub const NAMES: [&'static str; 4] = ["light", "heavy", "segmented", "springy"];

    pub fn preset(name: &str) -> Option<Embodiment> {
        let (mass, damping, action_scale) = match name {
            "light" => (1.0, 0.1, 1.0),
            "heavy" => (2.0, 0.05, 3.0),
            "segmented" => (1.5, 0.06, 3.0),
            "springy" => (0.7, 0.08, 1.4),
            _ => return None,
        };
        Some(Embodiment {
            name: name.to_string(),
            mass,
            damping,
            action_scale,
            posture_dim: 2,
        })
    }

    pub fn presets() -> Vec<Embodiment> {
        Self::NAMES.iter().filter_map(|n| Self::preset(n)).collect()
    }

    pub fn obs_dim(&self) -> usize {
        3 + self.posture_dim
    }

    pub fn act_dim(&self) -> usize {
        1 + self.posture_dim
    }

    /// Velocity gained per step from a unit forward action.
    pub fn thrust(&self) -> f64 {
        self.action_scale / self.mass * DT
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0) || !(0.0..1.0).contains(&self.damping) || !(self.action_scale > 0.0) || self.posture_dim == 0 {
            return Err(invalid!("embodiment `{}` has out-of-range parameters", self.name));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskId {
    Stand,
    Walk,
    Run,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::Stand, TaskId::Walk, TaskId::Run];

    pub fn target_speed(self) -> f64 {
        match self {
            TaskId::Stand => 0.0,
            TaskId::Walk => 1.0,
            TaskId::Run => 3.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskId::Stand => "stand",
            TaskId::Walk => "walk",
            TaskId::Run => "run",
        }
    }

    pub fn default_prompt(self) -> &'static str {
        match self {
            TaskId::Stand => "stand still upright",
            TaskId::Walk => "walk forward steadily",
            TaskId::Run => "run forward fast",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stand" => Ok(TaskId::Stand),
            "walk" => Ok(TaskId::Walk),
            "run" => Ok(TaskId::Run),
            other => Err(invalid!("unknown task `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub id: TaskId,
    pub prompt: String,
}

impl Task {
    pub fn new(id: TaskId, prompt: impl Into<String>) -> Self {
        Self { id, prompt: prompt.into() }
    }

    pub fn with_default_prompt(id: TaskId) -> Self {
        Self::new(id, id.default_prompt())
    }

    pub fn target_speed(&self) -> f64 {
        self.id.target_speed()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub position: f64,
    pub velocity: f64,
    pub posture: Vec<f64>,
    pub steps: usize,
}

impl EnvState {
    pub fn at_rest(posture_dim: usize) -> Self {
        Self {
            position: 0.0,
            velocity: 0.0,
            posture: vec![0.0; posture_dim],
            steps: 0,
        }
    }

    /// `[sin(position), velocity, mean posture, posture...]`
    pub fn observe(&self) -> Vec<f64> {
        let p = self.posture.len() as f64;
        let mut obs = Vec::with_capacity(3 + self.posture.len());
        obs.push(libm::sin(self.position));
        obs.push(self.velocity);
        obs.push(self.posture.iter().sum::<f64>() / p);
        obs.extend_from_slice(&self.posture);
        obs
    }
}

/// Knobs shared by collection and evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvConfig {
    /// Std of the velocity disturbance; 0 makes `env_step` deterministic.
    pub noise_std: f64,
    /// Initial velocity is uniform on `[-init_velocity, init_velocity]`.
    pub init_velocity: f64,
    /// Initial posture joints are uniform on `[-init_posture, init_posture]`.
    pub init_posture: f64,
    pub episode_len: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            noise_std: NOISE_STD,
            init_velocity: 0.5,
            init_posture: 0.5,
            episode_len: EPISODE_LEN,
        }
    }
}

impl EnvConfig {
    pub fn reset(&self, e: &Embodiment, rng: &mut Rng) -> EnvState {
        let position = rng.uniform(-core::f64::consts::PI, core::f64::consts::PI);
        let velocity = rng.uniform(-self.init_velocity, self.init_velocity);
        let posture = (0..e.posture_dim)
            .map(|_| rng.uniform(-self.init_posture, self.init_posture))
            .collect();
        EnvState {
            position,
            velocity,
            posture,
            steps: 0,
        }
    }
}

/// One control step. The action is clamped to `[-1, 1]` per component.
pub fn env_step(s: &EnvState, a: &[f64], e: &Embodiment, noise_std: f64, rng: &mut Rng) -> Result<(EnvState, Vec<f64>)> {
    if a.len() != e.act_dim() {
        return Err(invalid!("action has {} components, embodiment `{}` takes {}", a.len(), e.name, e.act_dim()));
    }
    if let Some(bad) = a.iter().find(|x| !x.is_finite()) {
        return Err(Error::NonFinite(alloc::format!("action component {bad}")));
    }
    let a: Vec<f64> = a.iter().map(|x| x.clamp(-1.0, 1.0)).collect();
    let noise = if noise_std > 0.0 { noise_std * rng.normal() } else { 0.0 };
    let velocity = ((1.0 - e.damping) * s.velocity + e.thrust() * a[0] + noise).clamp(-V_MAX, V_MAX);
    let posture = s
        .posture
        .iter()
        .zip(&a[1..])
        .map(|(p, cmd)| p + POSTURE_RATE * (cmd - p) * DT)
        .collect();
    let next = EnvState {
        position: s.position + velocity * DT,
        velocity,
        posture,
        steps: s.steps + 1,
    };
    let obs = next.observe();
    Ok((next, obs))
}

/// Evaluation-only reward in `(0, 1]`, maximal at the task's target speed
/// with every posture joint at zero.
pub fn true_reward(s: &EnvState, task: TaskId) -> f64 {
    let dv = s.velocity - task.target_speed();
    let p2: f64 = s.posture.iter().map(|p| p * p).sum();
    libm::exp(-dv * dv) * libm::exp(-p2 / s.posture.len() as f64)
}

/// Scripted behavior sources standing in for an exploration agent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Controller {
    /// Independent uniform actions every step.
    Random,
    /// Saturated actions whose signs flip with probability `0.1` per step.
    BangBang,
    /// Feed-forward plus proportional tracking of a target speed, posture
    /// driven back to zero.
    Proportional(TaskId),
}

/// Velocity loop gain of the proportional controller.
const SPEED_GAIN: f64 = 5.0;
const POSTURE_GAIN: f64 = 4.0;
const BANG_BANG_FLIP: f64 = 0.1;

/// The scripted expert: exact feed-forward for the embodiment plus a
/// proportional correction, saturated to the action box.
pub fn expert_action(s: &EnvState, e: &Embodiment, task: TaskId) -> Vec<f64> {
    let target = task.target_speed();
    let hold = e.damping * target / e.thrust();
    let mut a = Vec::with_capacity(e.act_dim());
    a.push((hold + SPEED_GAIN * (target - s.velocity)).clamp(-1.0, 1.0));
    a.extend(s.posture.iter().map(|p| (-POSTURE_GAIN * p).clamp(-1.0, 1.0)));
    a
}

pub fn random_action(e: &Embodiment, rng: &mut Rng) -> Vec<f64> {
    (0..e.act_dim()).map(|_| rng.uniform(-1.0, 1.0)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub embodiment: String,
    pub task: TaskId,
    pub obs_dim: usize,
    pub act_dim: usize,
    /// `[len + 1, obs_dim]`, row-major.
    pub observations: Vec<f64>,
    /// `[len, act_dim]`, row-major.
    pub actions: Vec<f64>,
    /// `[len]`. Never read by training code.
    pub true_rewards: Vec<f64>,
}

impl EpisodeRecord {
    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.actions.len() / self.act_dim
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn n_obs(&self) -> usize {
        self.observations.len() / self.obs_dim
    }

    pub fn obs(&self, t: usize) -> &[f64] {
        &self.observations[t * self.obs_dim..(t + 1) * self.obs_dim]
    }

    pub fn action(&self, t: usize) -> &[f64] {
        &self.actions[t * self.act_dim..(t + 1) * self.act_dim]
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.true_rewards.len();
        if self.actions.len() != t * self.act_dim || self.observations.len() != (t + 1) * self.obs_dim {
            return Err(invalid!("episode arrays disagree on length {t}"));
        }
        if self.observations.iter().chain(&self.actions).chain(&self.true_rewards).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("episode record".into()));
        }
        Ok(())
    }
}

/// Runs one episode under `controller`.
pub fn run_episode(
    e: &Embodiment,
    task: TaskId,
    controller: Controller,
    cfg: &EnvConfig,
    rng: &mut Rng,
) -> Result<EpisodeRecord> {
    let mut s = cfg.reset(e, rng);
    let mut observations = s.observe();
    let mut actions = Vec::with_capacity(cfg.episode_len * e.act_dim());
    let mut rewards = Vec::with_capacity(cfg.episode_len);
    let mut signs: Vec<f64> = (0..e.act_dim())
        .map(|_| if rng.bernoulli(0.5) { 1.0 } else { -1.0 })
        .collect();
    for _ in 0..cfg.episode_len {
        let a = match controller {
            Controller::Random => random_action(e, rng),
            Controller::BangBang => {
                for sgn in signs.iter_mut() {
                    if rng.bernoulli(BANG_BANG_FLIP) {
                        *sgn = -*sgn;
                    }
                }
                signs.clone()
            }
            Controller::Proportional(t) => expert_action(&s, e, t),
        };
        let (next, obs) = env_step(&s, &a, e, cfg.noise_std, rng)?;
        rewards.push(true_reward(&next, task));
        actions.extend(a.iter().map(|x| x.clamp(-1.0, 1.0)));
        observations.extend(obs);
        s = next;
    }
    Ok(EpisodeRecord {
        embodiment: e.name.clone(),
        task,
        obs_dim: e.obs_dim(),
        act_dim: e.act_dim(),
        observations,
        actions,
        true_rewards: rewards,
    })
}

/// Scripted offline collection: of every four episodes two are uniform
/// random, one bang-bang and one proportional. Controller episodes cycle
/// through `tasks`; the exploratory ones are tagged round-robin. Episode `i`
/// draws from its own stream seeded `rng.seed() ^ i`.
pub fn collect_offline(
    e: &Embodiment,
    tasks: &[TaskId],
    n_episodes: usize,
    cfg: &EnvConfig,
    rng: &Rng,
) -> Result<Vec<EpisodeRecord>> {
    if n_episodes == 0 {
        return Err(invalid!("n_episodes must be at least 1"));
    }
    if tasks.is_empty() {
        return Err(invalid!("no tasks to collect for"));
    }
    e.validate()?;
    let (mut n_explore, mut n_control) = (0usize, 0usize);
    let mut out = Vec::with_capacity(n_episodes);
    for i in 0..n_episodes {
        let (controller, task) = match i % 4 {
            3 => {
                let t = tasks[n_control % tasks.len()];
                n_control += 1;
                (Controller::Proportional(t), t)
            }
            k => {
                let t = tasks[n_explore % tasks.len()];
                n_explore += 1;
                (if k == 2 { Controller::BangBang } else { Controller::Random }, t)
            }
        };
        let mut ep_rng = Rng::new(rng.seed() ^ i as u64);
        out.push(run_episode(e, task, controller, cfg, &mut ep_rng)?);
    }
    Ok(out)
}

/// Episodes sharing one observation/action layout.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    pub episodes: Vec<EpisodeRecord>,
}

/// Contiguous sub-sequences. Observations `[batch, seq_len, obs_dim]`, the
/// actions between them `[batch, seq_len - 1, act_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub batch: usize,
    pub seq_len: usize,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub obs: Vec<f64>,
    pub actions: Vec<f64>,
    pub tasks: Vec<TaskId>,
    pub embodiments: Vec<String>,
    /// `(episode index, start offset)` of each row.
    pub origins: Vec<(usize, usize)>,
}

impl Dataset {
    pub fn new(episodes: Vec<EpisodeRecord>) -> Result<Self> {
        if let Some(first) = episodes.first() {
            for ep in &episodes {
                ep.validate()?;
                if ep.obs_dim != first.obs_dim || ep.act_dim != first.act_dim {
                    return Err(invalid!(
                        "mixed layouts: obs/act dims {}/{} vs {}/{}",
                        ep.obs_dim,
                        ep.act_dim,
                        first.obs_dim,
                        first.act_dim
                    ));
                }
            }
        }
        Ok(Self { episodes })
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.episodes.first().map_or(0, |e| e.obs_dim)
    }

    pub fn act_dim(&self) -> usize {
        self.episodes.first().map_or(0, |e| e.act_dim)
    }

    pub fn merge(mut self, other: Dataset) -> Result<Dataset> {
        self.episodes.extend(other.episodes);
        Dataset::new(self.episodes)
    }

    /// Subset restricted to the given tasks.
    pub fn filter_tasks(&self, tasks: &[TaskId]) -> Dataset {
        Dataset {
            episodes: self.episodes.iter().filter(|e| tasks.contains(&e.task)).cloned().collect(),
        }
    }

    /// Uniform over every valid `(episode, start)` pair. `seq_len` counts
    /// observations, so an episode of `T` transitions admits
    /// `T + 2 - seq_len` starts.
    pub fn sample_batch(&self, batch: usize, seq_len: usize, rng: &mut Rng) -> Result<Batch> {
        if self.episodes.is_empty() || batch == 0 || seq_len < 2 {
            return Err(invalid!("sample_batch needs episodes, batch >= 1 and seq_len >= 2"));
        }
        let mut offsets = Vec::with_capacity(self.episodes.len());
        let mut total = 0usize;
        for (i, ep) in self.episodes.iter().enumerate() {
            if seq_len > ep.n_obs() {
                return Err(invalid!("seq_len {seq_len} exceeds episode {i} length {}", ep.n_obs()));
            }
            offsets.push(total);
            total += ep.n_obs() - seq_len + 1;
        }
        let (od, ad) = (self.obs_dim(), self.act_dim());
        let mut out = Batch {
            batch,
            seq_len,
            obs_dim: od,
            act_dim: ad,
            obs: Vec::with_capacity(batch * seq_len * od),
            actions: Vec::with_capacity(batch * (seq_len - 1) * ad),
            tasks: Vec::with_capacity(batch),
            embodiments: Vec::with_capacity(batch),
            origins: Vec::with_capacity(batch),
        };
        for _ in 0..batch {
            let flat = rng.below(total);
            let ep_idx = offsets.partition_point(|&o| o <= flat) - 1;
            let start = flat - offsets[ep_idx];
            let ep = &self.episodes[ep_idx];
            out.obs.extend_from_slice(&ep.observations[start * od..(start + seq_len) * od]);
            out.actions.extend_from_slice(&ep.actions[start * ad..(start + seq_len - 1) * ad]);
            out.tasks.push(ep.task);
            out.embodiments.push(ep.embodiment.clone());
            out.origins.push((ep_idx, start));
        }
        Ok(out)
    }
}

impl Batch {
    pub fn obs(&self, row: usize, t: usize) -> &[f64] {
        let base = (row * self.seq_len + t) * self.obs_dim;
        &self.obs[base..base + self.obs_dim]
    }

    pub fn action(&self, row: usize, t: usize) -> &[f64] {
        let base = (row * (self.seq_len - 1) + t) * self.act_dim;
        &self.actions[base..base + self.act_dim]
    }

    /// Observations of every row at step `t`, `[batch, obs_dim]`.
    pub fn obs_at(&self, t: usize) -> Vec<f64> {
        (0..self.batch).flat_map(|r| self.obs(r, t).iter().copied()).collect()
    }

    /// Action taken after step `t` in every row, `[batch, act_dim]`.
    pub fn action_at(&self, t: usize) -> Vec<f64> {
        (0..self.batch).flat_map(|r| self.action(r, t).iter().copied()).collect()
    }

    /// The `k` observations ending at `t`, flattened oldest first. Steps
    /// before the start of the sequence repeat its first observation.
    pub fn window(&self, row: usize, t: usize, k: usize) -> Vec<f64> {
        let mut w = Vec::with_capacity(k * self.obs_dim);
        for j in 0..k {
            let idx = (t + j + 1).saturating_sub(k);
            w.extend_from_slice(self.obs(row, idx));
        }
        w
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn light() -> Embodiment {
        Embodiment::preset("light").unwrap()
    }

    #[test]
    fn zero_action_only_damps() {
        let e = light();
        let s = EnvState {
            velocity: 2.0,
            ..EnvState::at_rest(2)
        };
        let (n, _) = env_step(&s, &[0.0, 0.0, 0.0], &e, 0.0, &mut Rng::new(0)).unwrap();
        assert_eq!(n.velocity, (1.0 - e.damping) * 2.0);
    }

    #[test]
    fn velocity_clamps() {
        let e = Embodiment {
            action_scale: 100.0,
            ..light()
        };
        let s = EnvState {
            velocity: V_MAX,
            ..EnvState::at_rest(2)
        };
        let (n, _) = env_step(&s, &[1.0, 0.0, 0.0], &e, 0.0, &mut Rng::new(0)).unwrap();
        assert_eq!(n.velocity, 5.0);
    }

    #[test]
    fn light_unit_push() {
        let (n, obs) = env_step(&EnvState::at_rest(2), &[1.0, 0.0, 0.0], &light(), 0.0, &mut Rng::new(0)).unwrap();
        assert!((n.velocity - 0.1).abs() < 1e-15);
        assert_eq!(obs.len(), 5);
        assert_eq!(obs[1], n.velocity);
    }

    #[test]
    fn non_finite_action_rejected() {
        let r = env_step(&EnvState::at_rest(2), &[f64::NAN, 0.0, 0.0], &light(), 0.0, &mut Rng::new(0));
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn reward_examples() {
        let rest = EnvState::at_rest(2);
        assert_eq!(true_reward(&rest, TaskId::Stand), 1.0);
        let walking = EnvState {
            velocity: 1.0,
            ..rest.clone()
        };
        assert_eq!(true_reward(&walking, TaskId::Walk), 1.0);
        assert!((true_reward(&walking, TaskId::Stand) - libm::exp(-1.0)).abs() < 1e-15);
        assert!((true_reward(&walking, TaskId::Stand) - 0.3679).abs() < 1e-4);
    }

    #[test]
    fn six_episodes_cover_three_tasks() {
        let eps = collect_offline(&light(), &TaskId::ALL, 6, &EnvConfig::default(), &Rng::new(3)).unwrap();
        for t in TaskId::ALL {
            assert!(eps.iter().any(|e| e.task == t), "{t} missing");
        }
        assert!(eps.iter().all(|e| e.len() == EPISODE_LEN && e.n_obs() == EPISODE_LEN + 1));
    }

    #[test]
    fn proportional_walk_tracks_target() {
        // Frozen regression: the scripted walk controller on `light` settles
        // well inside 0.3 of the target over the last 20 steps; at this seed
        // the recorded statistic is 0.020295.
        let ep = run_episode(&light(), TaskId::Walk, Controller::Proportional(TaskId::Walk), &EnvConfig::default(), &mut Rng::new(11)).unwrap();
        let err: f64 = (81..=100).map(|t| (ep.obs(t)[1] - 1.0).abs()).sum::<f64>() / 20.0;
        assert!(err < 0.3, "mean |v - 1| = {err}");
        assert!((err - 0.020295).abs() < 1e-5, "regression drifted: {err}");
    }

    #[test]
    fn batch_shapes_and_alignment() {
        let eps = collect_offline(&light(), &TaskId::ALL, 8, &EnvConfig::default(), &Rng::new(5)).unwrap();
        let ds = Dataset::new(eps).unwrap();
        let b = ds.sample_batch(16, 16, &mut Rng::new(1)).unwrap();
        assert_eq!(b.obs.len(), 16 * 16 * 5);
        assert_eq!(b.actions.len(), 16 * 15 * 3);
        for r in 0..16 {
            let (ep, start) = b.origins[r];
            let e = &ds.episodes[ep];
            assert_eq!(b.obs(r, 3), e.obs(start + 3));
            assert_eq!(b.action(r, 14), e.action(start + 14));
            assert_eq!(b.tasks[r], e.task);
        }
    }

    #[test]
    fn full_length_sequence_is_whole_episode() {
        let eps = collect_offline(&light(), &[TaskId::Walk], 1, &EnvConfig::default(), &Rng::new(5)).unwrap();
        let ds = Dataset::new(eps).unwrap();
        let b = ds.sample_batch(2, EPISODE_LEN + 1, &mut Rng::new(1)).unwrap();
        assert_eq!(&b.obs[..(EPISODE_LEN + 1) * 5], &ds.episodes[0].observations[..]);
        assert!(ds.sample_batch(2, EPISODE_LEN + 2, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn window_pads_with_first_observation() {
        let eps = collect_offline(&light(), &[TaskId::Walk], 1, &EnvConfig::default(), &Rng::new(5)).unwrap();
        let ds = Dataset::new(eps).unwrap();
        let b = ds.sample_batch(1, 8, &mut Rng::new(2)).unwrap();
        let w = b.window(0, 1, 4);
        assert_eq!(&w[0..5], b.obs(0, 0));
        assert_eq!(&w[5..10], b.obs(0, 0));
        assert_eq!(&w[10..15], b.obs(0, 0));
        assert_eq!(&w[15..20], b.obs(0, 1));
    }
}
