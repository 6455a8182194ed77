//! Evaluation in the real environment and min–max normalized scoring.
//!
//! Every controller is scored on the same episodes: episode `k` of seed `s`
//! resets and perturbs the environment from one stream, and a random policy
//! draws its actions from a second one, so policy and reference returns
//! differ only through the actions taken.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::invalid;
use crate::model::{Agent, PromptBook};
use crate::numcore::Graph;
use crate::rng::Rng;
use crate::toyworlds::{env_step, expert_action, random_action, true_reward, Embodiment, EnvConfig, EnvState, TaskId};
use crate::worldmodel::LatentState;

pub const DEFAULT_EPISODES: usize = 10;

const ENV_STREAM: u64 = 0x656e_76;
const ACTION_STREAM: u64 = 0x6163_74;

fn env_rng(seed: u64, episode: usize) -> Rng {
    Rng::new(seed).fork(ENV_STREAM).fork(episode as u64)
}

fn action_rng(seed: u64, episode: usize) -> Rng {
    Rng::new(seed).fork(ACTION_STREAM).fork(episode as u64)
}

/// Scripted policies the learned agent is normalized against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scripted {
    Random,
    Expert,
}

/// Returns of a scripted policy on episodes `0..n` of `seed`.
pub fn scripted_returns(
    kind: Scripted,
    e: &Embodiment,
    task: TaskId,
    n: usize,
    seed: u64,
    cfg: &EnvConfig,
) -> Result<Vec<f64>> {
    (0..n)
        .map(|k| {
            let mut env = env_rng(seed, k);
            let mut act = action_rng(seed, k);
            let mut s = cfg.reset(e, &mut env);
            let mut ret = 0.0;
            for _ in 0..cfg.episode_len {
                let a = match kind {
                    Scripted::Random => random_action(e, &mut act),
                    Scripted::Expert => expert_action(&s, e, task),
                };
                s = env_step(&s, &a, e, cfg.noise_std, &mut env)?.0;
                ret += true_reward(&s, task);
            }
            Ok(ret)
        })
        .collect()
}

/// Mean random and expert returns for one (embodiment, task).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct References {
    pub random: f64,
    pub expert: f64,
}

impl References {
    pub fn compute(e: &Embodiment, task: TaskId, n: usize, seeds: &[u64], cfg: &EnvConfig) -> Result<Self> {
        let mut random = Vec::new();
        let mut expert = Vec::new();
        for &s in seeds {
            random.extend(scripted_returns(Scripted::Random, e, task, n, s, cfg)?);
            expert.extend(scripted_returns(Scripted::Expert, e, task, n, s, cfg)?);
        }
        let r = Self {
            random: mean_se(&random).0,
            expert: mean_se(&expert).0,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.random.is_finite() && self.expert.is_finite()) {
            return Err(Error::NonFinite("reference returns".into()));
        }
        if self.expert <= self.random {
            return Err(invalid!(
                "expert reference {} does not exceed random reference {}",
                self.expert,
                self.random
            ));
        }
        Ok(())
    }

    pub fn normalize(&self, raw: f64) -> Result<f64> {
        self.validate()?;
        Ok((raw - self.random) / (self.expert - self.random))
    }
}

/// Sample mean and standard error of the mean; a single sample has zero
/// error.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, libm::sqrt(var / n))
}

/// What the agent saw and did in one evaluation step, per episode row.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTrace {
    pub obs: Vec<f64>,
    pub predicted_obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
}

/// Per-episode returns of the agent's deterministic policy: posterior-mean
/// states filtered from the streamed observations, fused, then the tanh of
/// the policy mean. Episodes run side by side as batch rows. With `trace`
/// the first episode's steps are recorded.
pub fn policy_returns(
    agent: &Agent,
    prompt: &str,
    e: &Embodiment,
    task: TaskId,
    n: usize,
    seed: u64,
    cfg: &EnvConfig,
    mut trace: Option<&mut Vec<StepTrace>>,
) -> Result<Vec<f64>> {
    let d = agent.dims;
    if e.obs_dim() != d.obs_dim || e.act_dim() != d.act_dim {
        return Err(invalid!(
            "embodiment `{}` has dims {}/{}, the model expects {}/{}",
            e.name,
            e.obs_dim(),
            e.act_dim(),
            d.obs_dim,
            d.act_dim
        ));
    }
    if n == 0 {
        return Err(invalid!("need at least one evaluation episode"));
    }
    let mut envs: Vec<Rng> = (0..n).map(|k| env_rng(seed, k)).collect();
    let mut states: Vec<EnvState> = envs.iter_mut().map(|r| cfg.reset(e, r)).collect();
    let mut history: Vec<Vec<Vec<f64>>> = states.iter().map(|s| vec![s.observe()]).collect();
    let mut h = vec![0.0; n * d.d_h];
    let mut s_lat = vec![0.0; n * d.d_s];
    let mut prev_action = vec![0.0; n * d.act_dim];
    let mut returns = vec![0.0; n];
    let prompts: Vec<&str> = vec![prompt; n];

    for _ in 0..cfg.episode_len {
        let mut g = Graph::new(&agent.store);
        let prev = LatentState {
            h: g.constant(n, d.d_h, h)?,
            s: g.constant(n, d.d_s, s_lat)?,
        };
        let a_prev = g.constant(n, d.act_dim, prev_action)?;
        let obs: Vec<f64> = history.iter().flat_map(|hs| hs.last().unwrap().iter().copied()).collect();
        let obs = g.constant(n, d.obs_dim, obs)?;
        let tr = agent.wm.step(&mut g, prev, a_prev, Some(obs), None)?;
        let mut windows = Vec::with_capacity(n * d.window * d.obs_dim);
        for hs in &history {
            for j in 0..d.window {
                let idx = (hs.len() + j).saturating_sub(d.window);
                windows.extend_from_slice(&hs[idx]);
            }
        }
        let windows = g.constant(n, d.window * d.obs_dim, windows)?;
        let e_v = agent.mllm.forward(&mut g, windows)?;
        let tau = agent.task_encoder.encode(&mut g, &prompts)?;
        let gates = agent.fusion.gates(&mut g, tau)?;
        let state = tr.state.concat(&mut g)?;
        let z = agent.fusion.fuse(&mut g, e_v, state, &gates)?;
        let act = agent.policy.mode(&mut g, z)?;
        let predicted = if trace.is_some() {
            let o = agent.decoder.observation(&mut g, z)?;
            g.value(o)[..d.obs_dim].to_vec()
        } else {
            Vec::new()
        };
        let act_vals = g.value(act).to_vec();
        if act_vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("policy action".into()));
        }
        h = g.value(tr.state.h).to_vec();
        s_lat = g.value(tr.state.s).to_vec();
        for k in 0..n {
            let a = &act_vals[k * d.act_dim..(k + 1) * d.act_dim];
            let (next, o) = env_step(&states[k], a, e, cfg.noise_std, &mut envs[k])?;
            let r = true_reward(&next, task);
            returns[k] += r;
            if k == 0 {
                if let Some(t) = trace.as_deref_mut() {
                    t.push(StepTrace {
                        obs: history[0].last().unwrap().clone(),
                        predicted_obs: predicted.clone(),
                        action: a.to_vec(),
                        reward: r,
                    });
                }
            }
            states[k] = next;
            history[k].push(o);
        }
        prev_action = act_vals;
    }
    Ok(returns)
}

/// Open-loop predictions: filters the first `context` observations, then
/// rolls the prior forward under the recorded actions (prior means, the
/// semantic input decoded from the previous latent) and decodes an
/// observation at every step from the last filtered one on. `obs` has one
/// more entry than `actions`; entry `j` of the result predicts
/// `obs[context - 1 + j]`.
pub fn imagine_observations(
    agent: &Agent,
    prompt: &str,
    obs: &[Vec<f64>],
    actions: &[Vec<f64>],
    context: usize,
) -> Result<Vec<Vec<f64>>> {
    let d = agent.dims;
    if obs.len() != actions.len() + 1 || context == 0 || context > obs.len() {
        return Err(invalid!(
            "need obs = actions + 1 and 1 <= context <= {}, got {} obs, {} actions, context {context}",
            obs.len(),
            obs.len(),
            actions.len()
        ));
    }
    let mut g = Graph::new(&agent.store);
    let tau = agent.task_encoder.encode(&mut g, &[prompt])?;
    let gates = agent.fusion.gates(&mut g, tau)?;
    let mut state = agent.wm.initial_state(&mut g, 1);
    let mut z = None;
    let mut out = Vec::with_capacity(obs.len() - context + 1);
    for t in 0..obs.len() {
        let a = if t == 0 {
            g.zeros(1, d.act_dim)
        } else {
            g.constant(1, d.act_dim, actions[t - 1].clone())?
        };
        let e_v = if t < context {
            let o = g.constant(1, d.obs_dim, obs[t].clone())?;
            state = agent.wm.step(&mut g, state, a, Some(o), None)?.state;
            let mut w = Vec::with_capacity(d.window * d.obs_dim);
            for j in 0..d.window {
                w.extend_from_slice(&obs[(t + j + 1).saturating_sub(d.window)]);
            }
            let w = g.constant(1, d.window * d.obs_dim, w)?;
            agent.mllm.forward(&mut g, w)?
        } else {
            state = agent.wm.step(&mut g, state, a, None, None)?.state;
            agent.decoder.semantic(&mut g, z.expect("set during context"))?
        };
        let hs = state.concat(&mut g)?;
        let zt = agent.fusion.fuse(&mut g, e_v, hs, &gates)?;
        z = Some(zt);
        if t + 1 >= context {
            let o = agent.decoder.observation(&mut g, zt)?;
            out.push(g.value(o).to_vec());
        }
    }
    Ok(out)
}

/// One cell of a score table.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub embodiment: String,
    pub task: TaskId,
    pub rung: String,
    pub raw_mean: f64,
    pub normalized_mean: f64,
    pub std_err: f64,
    pub n_seeds: usize,
}

/// Evaluates one agent on `n` episodes for each seed. The standard error
/// is over per-seed normalized means.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    agent: &Agent,
    prompts: &PromptBook,
    e: &Embodiment,
    task: TaskId,
    refs: &References,
    n: usize,
    seeds: &[u64],
    cfg: &EnvConfig,
    rung: &str,
) -> Result<ScoreRow> {
    if seeds.is_empty() {
        return Err(invalid!("need at least one evaluation seed"));
    }
    let prompt = prompts.get(&e.name, task);
    let mut raw = Vec::with_capacity(seeds.len());
    for &s in seeds {
        raw.push(mean_se(&policy_returns(agent, prompt, e, task, n, s, cfg, None)?).0);
    }
    let norm: Vec<f64> = raw.iter().map(|r| refs.normalize(*r)).collect::<Result<_>>()?;
    let (normalized_mean, std_err) = mean_se(&norm);
    Ok(ScoreRow {
        embodiment: e.name.clone(),
        task,
        rung: rung.into(),
        raw_mean: mean_se(&raw).0,
        normalized_mean,
        std_err,
        n_seeds: seeds.len(),
    })
}

/// Averages rows for the same cell produced by independently trained
/// agents; the standard error is across those agents.
pub fn aggregate(rows: &[ScoreRow]) -> Result<ScoreRow> {
    let first = rows.first().ok_or_else(|| invalid!("no rows to aggregate"))?;
    if rows
        .iter()
        .any(|r| r.embodiment != first.embodiment || r.task != first.task || r.rung != first.rung)
    {
        return Err(invalid!("rows to aggregate must share embodiment, task and rung"));
    }
    let raw: Vec<f64> = rows.iter().map(|r| r.raw_mean).collect();
    let norm: Vec<f64> = rows.iter().map(|r| r.normalized_mean).collect();
    let (normalized_mean, std_err) = mean_se(&norm);
    Ok(ScoreRow {
        raw_mean: mean_se(&raw).0,
        normalized_mean,
        std_err,
        n_seeds: rows.len(),
        ..first.clone()
    })
}
