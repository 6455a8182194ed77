//! Behavior learning in latent space: the policy and critic, imagination
//! rollouts through the world model and fusion, the task-conditioned text
//! imagination, trajectory alignment, the semantic reward, and the
//! actor-critic losses.
//!
//! Nothing here can see the environment's reward; the only reward signal is
//! the cosine between imagined fused latents and the task-conditioned
//! reference trajectory.

use alloc::format;
use alloc::vec::Vec;

use crate::encoders::{FusedDecoder, TaskMapper};
use crate::error::{Error, Result};
use crate::invalid;
use crate::numcore::{kl_diag_gaussian, DiagGaussian, Graph, Linear, ParamId, ParamStore, Var};
use crate::rng::Rng;
use crate::tamf::Fusion;
use crate::worldmodel::{LatentState, WorldModel};

pub const HORIZON: usize = 15;
pub const GAMMA: f64 = 0.99;

/// Tanh-squashed diagonal-Gaussian policy over the fused latent.
#[derive(Clone, Copy, Debug)]
pub struct Policy {
    pub trunk: Linear,
    pub mean: Linear,
    pub log_std: Linear,
}

impl Policy {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, d_z: usize, hidden: usize, act_dim: usize) -> Self {
        Self {
            trunk: Linear::new(store, rng, "policy.trunk", d_z, hidden),
            mean: Linear::new(store, rng, "policy.mean", hidden, act_dim),
            log_std: Linear::new(store, rng, "policy.log_std", hidden, act_dim),
        }
    }

    /// Pre-squash action distribution.
    pub fn dist(&self, g: &mut Graph<'_>, z: Var) -> Result<DiagGaussian> {
        let h = self.trunk.forward(g, z)?;
        let h = g.gelu(h);
        let mean = self.mean.forward(g, h)?;
        let log_std = self.log_std.forward(g, h)?;
        DiagGaussian::new_clamped(g, mean, log_std)
    }

    /// Reparameterized action in `(-1, 1)`.
    pub fn sample(&self, g: &mut Graph<'_>, z: Var, rng: &mut Rng) -> Result<Var> {
        let d = self.dist(g, z)?;
        let u = d.sample(g, rng)?;
        Ok(g.tanh(u))
    }

    /// Deterministic action `tanh(mean)`.
    pub fn mode(&self, g: &mut Graph<'_>, z: Var) -> Result<Var> {
        let d = self.dist(g, z)?;
        Ok(g.tanh(d.mean))
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.trunk.params(), self.mean.params(), self.log_std.params()].concat()
    }
}

/// State-value estimate `d_z -> hidden -> GELU -> 1`.
#[derive(Clone, Copy, Debug)]
pub struct Critic {
    pub hidden: Linear,
    pub out: Linear,
}

impl Critic {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, d_z: usize, hidden: usize) -> Self {
        Self {
            hidden: Linear::new(store, rng, "critic.hidden", d_z, hidden),
            out: Linear::new(store, rng, "critic.out", hidden, 1),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, z: Var) -> Result<Var> {
        let h = self.hidden.forward(g, z)?;
        let h = g.gelu(h);
        self.out.forward(g, h)
    }

    /// Value with the critic's own parameters held constant.
    pub fn forward_fixed(&self, g: &mut Graph<'_>, z: Var) -> Result<Var> {
        let h = self.hidden.forward_fixed(g, z)?;
        let h = g.gelu(h);
        self.out.forward_fixed(g, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.hidden.params(), self.out.params()].concat()
    }
}

/// Task-conditioned transition `[z_tau, a] -> hidden -> GELU -> N(z_tau')`.
#[derive(Clone, Copy, Debug)]
pub struct TextImagination {
    pub hidden: Linear,
    pub out: Linear,
    pub d_z: usize,
}

impl TextImagination {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, d_z: usize, act_dim: usize, hidden: usize) -> Self {
        Self {
            hidden: Linear::new(store, rng, "text_imag.hidden", d_z + act_dim, hidden),
            out: Linear::new(store, rng, "text_imag.out", hidden, 2 * d_z),
            d_z,
        }
    }

    pub fn step(&self, g: &mut Graph<'_>, z_tau: Var, action: Var) -> Result<DiagGaussian> {
        let x = g.concat_cols(&[z_tau, action])?;
        let h = self.hidden.forward(g, x)?;
        let h = g.gelu(h);
        let o = self.out.forward(g, h)?;
        let mean = g.slice_cols(o, 0, self.d_z)?;
        let raw = g.slice_cols(o, self.d_z, self.d_z)?;
        DiagGaussian::from_raw(g, mean, raw)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.hidden.params(), self.out.params()].concat()
    }
}

/// Where the semantic input to the fusion comes from during imagination.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ImaginationEv {
    /// Decode it from the current fused latent.
    #[default]
    Decoded,
    /// Keep the embedding of the last real observation window.
    FrozenLast,
}

/// Real posterior context an imagination rollout starts from.
#[derive(Clone, Debug)]
pub struct RolloutStart {
    pub state: LatentState,
    pub z: Var,
    pub e_v: Var,
    /// Per-layer gates, one row per start.
    pub gates: Vec<Var>,
}

/// Latent trajectory produced by [`Imagination::rollout`].
#[derive(Clone, Debug)]
pub struct ImaginedTrajectory {
    /// `H + 1` fused latents, the first being the start.
    pub z: Vec<Var>,
    /// `H` squashed actions.
    pub actions: Vec<Var>,
    /// `H + 1` latent states.
    pub states: Vec<LatentState>,
    /// `H` prior distributions over the stochastic state.
    pub priors: Vec<DiagGaussian>,
    /// `H` priors carried into fused-latent space.
    pub lifted: Vec<DiagGaussian>,
}

impl ImaginedTrajectory {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }
}

/// Components needed to imagine forward from a real state.
#[derive(Clone, Copy)]
pub struct Imagination<'a> {
    pub wm: &'a WorldModel,
    pub fusion: &'a Fusion,
    pub decoder: &'a FusedDecoder,
    pub policy: &'a Policy,
    pub ev: ImaginationEv,
}

impl Imagination<'_> {
    pub fn rollout(&self, g: &mut Graph<'_>, start: &RolloutStart, horizon: usize, rng: &mut Rng) -> Result<ImaginedTrajectory> {
        if horizon == 0 {
            return Err(invalid!("imagination horizon must be at least 1"));
        }
        let w_s = self.fusion.stochastic_block(g)?;
        let mut traj = ImaginedTrajectory {
            z: Vec::with_capacity(horizon + 1),
            actions: Vec::with_capacity(horizon),
            states: Vec::with_capacity(horizon + 1),
            priors: Vec::with_capacity(horizon),
            lifted: Vec::with_capacity(horizon),
        };
        traj.z.push(start.z);
        traj.states.push(start.state);
        for step in 0..horizon {
            let z = traj.z[step];
            let state = traj.states[step];
            let a = self.policy.sample(g, z, rng)?;
            let tr = self.wm.step(g, state, a, None, Some(rng))?;
            let e_v = match self.ev {
                ImaginationEv::Decoded => self.decoder.semantic(g, z)?,
                ImaginationEv::FrozenLast => start.e_v,
            };
            let hs = tr.state.concat(g)?;
            let z_next = self.fusion.fuse(g, e_v, hs, &start.gates)?;
            let lifted = lift_prior(g, w_s, &tr.prior, tr.state.s, z_next)?;
            for (name, v) in [("latent", z_next), ("action", a), ("deterministic state", tr.state.h)] {
                if let Some(i) = g.value(v).iter().position(|x| !x.is_finite()) {
                    return Err(Error::RolloutDiverged {
                        step,
                        detail: format!("{name} entry {i} is {}", g.value(v)[i]),
                    });
                }
            }
            traj.actions.push(a);
            traj.states.push(tr.state);
            traj.priors.push(tr.prior);
            traj.lifted.push(lifted);
            traj.z.push(z_next);
        }
        Ok(traj)
    }
}

/// Pushes the stochastic-state prior through the rows of the fusion's
/// first layer that read `s`: mean `z + (mu - s) W_s`, variance
/// `sigma^2 (W_s * W_s)`.
pub fn lift_prior(g: &mut Graph<'_>, w_s: Var, prior: &DiagGaussian, s: Var, z: Var) -> Result<DiagGaussian> {
    let shift = g.sub(prior.mean, s)?;
    let shift = g.matmul(shift, w_s)?;
    let mean = g.add(z, shift)?;
    let two_ls = g.scale(prior.log_std, 2.0);
    let var = g.exp(two_ls);
    let w2 = g.square(w_s);
    let var = g.matmul(var, w2)?;
    let var = g.affine(var, 1.0, 1e-12);
    let ln_var = g.ln(var);
    let log_std = g.scale(ln_var, 0.5);
    DiagGaussian::new_clamped(g, mean, log_std)
}

/// `z_tau_0 = f_map(tau)` as a point mass, then one text-imagination step per
/// action, feeding each step's mean into the next.
pub fn text_rollout(
    g: &mut Graph<'_>,
    mapper: &TaskMapper,
    text: &TextImagination,
    tau: Var,
    actions: &[Var],
) -> Result<Vec<DiagGaussian>> {
    let z0 = mapper.forward(g, tau)?;
    let mut out = Vec::with_capacity(actions.len() + 1);
    out.push(DiagGaussian::point(g, z0));
    for &a in actions {
        let prev = out[out.len() - 1].mean;
        out.push(text.step(g, prev, a)?);
    }
    Ok(out)
}

/// Mean over steps (and rows) of `KL(wm_h || text_h)`.
pub fn traj_alignment_kl(g: &mut Graph<'_>, wm: &[DiagGaussian], text: &[DiagGaussian]) -> Result<Var> {
    if wm.len() != text.len() || wm.is_empty() {
        return Err(invalid!(
            "alignment needs equal non-empty sequences, got {} and {}",
            wm.len(),
            text.len()
        ));
    }
    let mut kls = Vec::with_capacity(wm.len());
    for (p, q) in wm.iter().zip(text) {
        kls.push(kl_diag_gaussian(g, p, q)?);
    }
    let all = g.concat_rows(&kls)?;
    Ok(g.mean(all))
}

/// Cosine similarity per row, `[m, 1]`. Degenerate rows score 0 and are
/// counted by [`Graph::degenerate_cosines`].
pub fn task_reward(g: &mut Graph<'_>, z: Var, z_tau_mean: Var) -> Result<Var> {
    g.cosine_rows(z, z_tau_mean)
}

/// Rewards `r_h = cos(z_{h+1}, mean z_tau_{h+1})`. With `fixed_reference`
/// the text means are treated as constants.
pub fn trajectory_rewards(
    g: &mut Graph<'_>,
    traj: &ImaginedTrajectory,
    text: &[DiagGaussian],
    fixed_reference: bool,
) -> Result<Vec<Var>> {
    if text.len() != traj.z.len() {
        return Err(invalid!("{} text steps for {} latents", text.len(), traj.z.len()));
    }
    (0..traj.horizon())
        .map(|h| {
            let r = if fixed_reference { g.detach(text[h + 1].mean) } else { text[h + 1].mean };
            task_reward(g, traj.z[h + 1], r)
        })
        .collect()
}

/// Discounted returns `R_h = r_h + gamma R_{h+1}`, `R_H = bootstrap`.
pub fn discounted_returns(g: &mut Graph<'_>, rewards: &[Var], bootstrap: Var, gamma: f64) -> Result<Vec<Var>> {
    let mut out = Vec::with_capacity(rewards.len());
    let mut next = bootstrap;
    for &r in rewards.iter().rev() {
        let disc = g.scale(next, gamma);
        next = g.add(r, disc)?;
        out.push(next);
    }
    out.reverse();
    Ok(out)
}

/// Actor and critic losses on one batch of imagined trajectories.
#[derive(Clone, Copy, Debug)]
pub struct BehaviorLosses {
    pub actor: Var,
    pub critic: Var,
    pub mean_reward: f64,
}

/// Actor: `-mean(R_0)`, differentiated through rewards and dynamics with
/// the critic's bootstrap held fixed. Critic: mean squared error of
/// `V(z_h)` against the stop-gradient returns, on stop-gradient latents.
pub fn behavior_losses(
    g: &mut Graph<'_>,
    z: &[Var],
    rewards: &[Var],
    critic: &Critic,
    gamma: f64,
) -> Result<BehaviorLosses> {
    let h = rewards.len();
    if h == 0 || z.len() != h + 1 {
        return Err(invalid!("{} latents for {h} rewards", z.len()));
    }
    let bootstrap = critic.forward_fixed(g, z[h])?;
    let returns = discounted_returns(g, rewards, bootstrap, gamma)?;
    let r0 = g.mean(returns[0]);
    let actor = g.neg(r0);
    let mut errs = Vec::with_capacity(h);
    for (step, &ret) in returns.iter().enumerate() {
        let zi = g.detach(z[step]);
        let v = critic.forward(g, zi)?;
        let target = g.detach(ret);
        let d = g.sub(v, target)?;
        errs.push(g.square(d));
    }
    let all = g.concat_rows(&errs)?;
    let critic_loss = g.mean(all);
    let mut total_r = 0.0;
    let mut n = 0usize;
    for &r in rewards {
        total_r += g.value(r).iter().sum::<f64>();
        n += g.value(r).len();
    }
    for (name, v) in [("actor", actor), ("critic", critic_loss)] {
        if !g.scalar(v).is_finite() {
            return Err(Error::NonFiniteLoss(name));
        }
    }
    Ok(BehaviorLosses {
        actor,
        critic: critic_loss,
        mean_reward: total_r / n as f64,
    })
}

/// Summary of one behavior update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BehaviorStats {
    pub actor: f64,
    pub critic: f64,
    pub mean_reward: f64,
    pub grad_norm: f64,
}

/// One actor-critic step on trajectories imagined from `starts`. Only the
/// policy and critic move; every other parameter enters as a constant.
pub fn behavior_update(
    agent: &mut crate::model::Agent,
    opt: &mut crate::jointopt::Adam,
    starts: &crate::jointopt::StartSnapshot,
    cfg: &crate::jointopt::ObjectiveConfig,
    gamma: f64,
    rng: &mut Rng,
) -> Result<BehaviorStats> {
    let ids = agent.behavior_params();
    let d = agent.dims;
    let n = starts.rows;
    let (stats, grads) = {
        let mut g = Graph::with_trainable(&agent.store, &ids);
        let prompts: Vec<&str> = starts.prompts.iter().map(|p| p.as_str()).collect();
        let tau = agent.task_encoder.encode(&mut g, &prompts)?;
        let gates = agent.fusion.gates(&mut g, tau)?;
        let start = RolloutStart {
            state: LatentState {
                h: g.constant(n, d.d_h, starts.h.clone())?,
                s: g.constant(n, d.d_s, starts.s.clone())?,
            },
            z: g.constant(n, d.d_z, starts.z.clone())?,
            e_v: g.constant(n, d.d_m, starts.e_v.clone())?,
            gates,
        };
        let traj = agent.imagination(cfg.imagination_ev).rollout(&mut g, &start, cfg.horizon, rng)?;
        // The reference is a fixed target here, so the text model only
        // needs the action values.
        let actions: Vec<Var> = traj.actions.iter().map(|&a| g.detach(a)).collect();
        let text = text_rollout(&mut g, &agent.mapper, &agent.text, tau, &actions)?;
        let rewards = trajectory_rewards(&mut g, &traj, &text, true)?;
        let losses = behavior_losses(&mut g, &traj.z, &rewards, &agent.critic, gamma)?;
        let total = g.add(losses.actor, losses.critic)?;
        let grads = g.backward(total)?.into_params();
        let stats = BehaviorStats {
            actor: g.scalar(losses.actor),
            critic: g.scalar(losses.critic),
            mean_reward: losses.mean_reward,
            grad_norm: 0.0,
        };
        (stats, grads)
    };
    let grad_norm = opt.step(&mut agent.store, &grads, Some(&ids))?;
    Ok(BehaviorStats { grad_norm, ..stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jointopt::Adam;
    use crate::numcore::{grad_check_params, GRAD_CHECK_STEP};
    use crate::tamf::{Tamf, TamfDims};
    use crate::worldmodel::WorldModelDims;

    struct Parts {
        wm: WorldModel,
        fusion: Fusion,
        dec: FusedDecoder,
        policy: Policy,
    }

    fn parts(ps: &mut ParamStore, seed: u64) -> Parts {
        let mut r = Rng::new(seed);
        let wm = WorldModel::new(
            ps,
            &mut r,
            WorldModelDims {
                obs_dim: 5,
                act_dim: 3,
                d_h: 64,
                d_s: 32,
                obs_embed: 16,
                head_hidden: 64,
            },
        );
        let fusion = Fusion::Tamf(Tamf::new(
            ps,
            &mut r,
            TamfDims {
                d_m: 64,
                d_h: 64,
                d_s: 32,
                d_z: 64,
                d_tau: 32,
                adapter_width: 64,
                layers: 3,
            },
        ));
        let dec = FusedDecoder::new(ps, &mut r, 64, 64, 5);
        let policy = Policy::new(ps, &mut r, 64, 64, 3);
        Parts { wm, fusion, dec, policy }
    }

    fn start(g: &mut Graph<'_>, p: &Parts, rows: usize, seed: u64) -> RolloutStart {
        let mut r = Rng::new(seed);
        let h = g.constant(rows, 64, r.normals(rows * 64)).unwrap();
        let s = g.constant(rows, 32, r.normals(rows * 32)).unwrap();
        let e_v = g.constant(rows, 64, r.normals(rows * 64)).unwrap();
        let tau = g.constant(rows, 32, r.normals(rows * 32)).unwrap();
        let tau = g.normalize_rows(tau);
        let gates = p.fusion.gates(g, tau).unwrap();
        let state = LatentState { h, s };
        let hs = state.concat(g).unwrap();
        let z = p.fusion.fuse(g, e_v, hs, &gates).unwrap();
        RolloutStart { state, z, e_v, gates }
    }

    fn imag(p: &Parts) -> Imagination<'_> {
        Imagination {
            wm: &p.wm,
            fusion: &p.fusion,
            decoder: &p.dec,
            policy: &p.policy,
            ev: ImaginationEv::Decoded,
        }
    }

    #[test]
    fn one_step_rollout_and_determinism() {
        let mut ps = ParamStore::new();
        let p = parts(&mut ps, 0);
        let run = |h: usize| {
            let mut g = Graph::new(&ps);
            let st = start(&mut g, &p, 2, 1);
            let t = imag(&p).rollout(&mut g, &st, h, &mut Rng::new(2)).unwrap();
            let last = *t.z.last().unwrap();
            (t.actions.len(), t.z.len(), g.value(last).to_vec())
        };
        let (na, nz, _) = run(1);
        assert_eq!((na, nz), (1, 2));
        assert_eq!(run(HORIZON).2, run(HORIZON).2);
        let mut g = Graph::new(&ps);
        let st = start(&mut g, &p, 1, 1);
        assert!(imag(&p).rollout(&mut g, &st, 0, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn sampled_actions_stay_inside_the_box() {
        let mut ps = ParamStore::new();
        let p = parts(&mut ps, 3);
        let mut g = Graph::new(&ps);
        let z = g.constant(64, 64, Rng::new(4).normals(64 * 64)).unwrap();
        let z = g.scale(z, 20.0);
        let a = p.policy.sample(&mut g, z, &mut Rng::new(5)).unwrap();
        assert!(g.value(a).iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn rollouts_stay_finite_over_random_parameters() {
        let mut rng = Rng::new(6);
        for trial in 0..1000u64 {
            let mut ps = ParamStore::new();
            let p = parts(&mut ps, 1000 + trial);
            // exercise the adapters too, at a random scale
            let scale = rng.uniform(0.0, 3.0);
            if let Fusion::Tamf(t) = &p.fusion {
                for l in &t.layers {
                    for ls in [l.semantic.layer_scale, l.dynamics.layer_scale] {
                        ps.get_mut(ls).values = rng.normals(64).into_iter().map(|v| v * scale).collect();
                    }
                }
            }
            let mut g = Graph::new(&ps);
            let st = start(&mut g, &p, 1, trial);
            let t = imag(&p).rollout(&mut g, &st, HORIZON, &mut rng).unwrap();
            for d in &t.lifted {
                assert!(g.value(d.mean).iter().chain(g.value(d.log_std)).all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn text_rollout_boundaries() {
        let mut ps = ParamStore::new();
        let mut r = Rng::new(7);
        let mapper = TaskMapper::new(&mut ps, &mut r, 32, 64);
        let text = TextImagination {
            hidden: Linear::zeros(&mut ps, "t.hidden", 67, 128),
            out: Linear::zeros(&mut ps, "t.out", 128, 128),
            d_z: 64,
        };
        let bias: Vec<f64> = (0..128).map(|i| i as f64 * 0.01).collect();
        ps.get_mut(text.out.b).values = bias.clone();
        let mut g = Graph::new(&ps);
        let tau = g.constant(1, 32, r.normals(32)).unwrap();
        let only = text_rollout(&mut g, &mapper, &text, tau, &[]).unwrap();
        assert_eq!(only.len(), 1);
        let z0 = mapper.forward(&mut g, tau).unwrap();
        assert_eq!(g.value(only[0].mean), g.value(z0));
        let acts: Vec<Var> = (0..3).map(|_| g.constant(1, 3, r.normals(3)).unwrap()).collect();
        let seq = text_rollout(&mut g, &mapper, &text, tau, &acts).unwrap();
        assert_eq!(seq.len(), 4);
        for d in &seq[1..] {
            assert_eq!(g.value(d.mean), &bias[..64]);
        }
    }

    #[test]
    fn text_rollout_gradients_match_finite_differences() {
        let mut ps = ParamStore::new();
        let mut r = Rng::new(8);
        let mapper = TaskMapper::new(&mut ps, &mut r, 4, 5);
        let text = TextImagination::new(&mut ps, &mut r, 5, 2, 6);
        let tau = r.normals(8);
        let acts: Vec<Vec<f64>> = (0..3).map(|_| r.normals(4)).collect();
        let ids = [mapper.map.params().to_vec(), text.params()].concat();
        let err = grad_check_params(
            &ps,
            &ids,
            |g| {
                let tau = g.constant(2, 4, tau.clone())?;
                let a: Vec<Var> = acts.iter().map(|v| g.constant(2, 2, v.clone())).collect::<Result<_>>()?;
                let seq = text_rollout(g, &mapper, &text, tau, &a)?;
                let last = seq[3];
                let m = g.square(last.mean);
                let m = g.sum(m);
                let s = g.sum(last.log_std);
                g.add(m, s)
            },
            GRAD_CHECK_STEP,
            None,
            &mut Rng::new(9),
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn policy_gradients_match_finite_differences() {
        let mut ps = ParamStore::new();
        let policy = Policy::new(&mut ps, &mut Rng::new(10), 4, 5, 2);
        let z = Rng::new(11).normals(12);
        let err = grad_check_params(
            &ps,
            &policy.params(),
            |g| {
                let z = g.constant(3, 4, z.clone())?;
                let a = policy.sample(g, z, &mut Rng::new(12))?;
                let a = g.square(a);
                Ok(g.sum(a))
            },
            GRAD_CHECK_STEP,
            None,
            &mut Rng::new(13),
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    fn gaussian(g: &mut Graph<'_>, mean: &[f64], log_std: &[f64]) -> DiagGaussian {
        let m = g.constant(1, mean.len(), mean.to_vec()).unwrap();
        let l = g.constant(1, log_std.len(), log_std.to_vec()).unwrap();
        DiagGaussian { mean: m, log_std: l }
    }

    #[test]
    fn alignment_kl_cases() {
        let ps = ParamStore::new();
        let mut g = Graph::new(&ps);
        let a = gaussian(&mut g, &[0.0, 1.0], &[0.0, 0.0]);
        let b = gaussian(&mut g, &[1.0, 1.0], &[0.5, -0.5]);
        let same = traj_alignment_kl(&mut g, &[a, b], &[a, b]).unwrap();
        assert_eq!(g.scalar(same), 0.0);
        assert!(traj_alignment_kl(&mut g, &[a], &[a, b]).is_err());
        // hand-evaluated closed form: KL(N(m1,s1)||N(m2,s2)) per dimension is
        // ln(s2/s1) + (s1^2 + (m1-m2)^2) / (2 s2^2) - 1/2
        let kl1 = |m1: f64, s1: f64, m2: f64, s2: f64| (s2 / s1).ln() + (s1 * s1 + (m1 - m2).powi(2)) / (2.0 * s2 * s2) - 0.5;
        let e = core::f64::consts::E;
        let step0 = kl1(0.0, 1.0, 1.0, e.sqrt()) + kl1(1.0, 1.0, 1.0, 1.0 / e.sqrt());
        let step1 = kl1(1.0, e.sqrt(), 0.0, 1.0) + kl1(1.0, 1.0 / e.sqrt(), 1.0, 1.0);
        let v = traj_alignment_kl(&mut g, &[a, b], &[b, a]).unwrap();
        assert!((g.scalar(v) - (step0 + step1) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn reward_cases_and_argmax_oracle() {
        let ps = ParamStore::new();
        let mut g = Graph::new(&ps);
        let mut r = Rng::new(14);
        let t = r.normals(8);
        let tv = g.constant(1, 8, t.clone()).unwrap();
        let neg = g.neg(tv);
        let same = task_reward(&mut g, tv, tv).unwrap();
        let opp = task_reward(&mut g, neg, tv).unwrap();
        assert!((g.scalar(same) - 1.0).abs() < 1e-12);
        assert!((g.scalar(opp) + 1.0).abs() < 1e-12);

        let zs = r.normals(100 * 8);
        let z = g.constant(100, 8, zs.clone()).unwrap();
        let rep: Vec<f64> = (0..100).flat_map(|_| t.iter().copied()).collect();
        let tref = g.constant(100, 8, rep).unwrap();
        let rew = task_reward(&mut g, z, tref).unwrap();
        let best = (0..100).max_by(|&i, &j| g.value(rew)[i].total_cmp(&g.value(rew)[j])).unwrap();
        let tn = t.iter().map(|x| x * x).sum::<f64>().sqrt();
        let angle = |i: usize| {
            let row = &zs[i * 8..(i + 1) * 8];
            let dot: f64 = row.iter().zip(&t).map(|(a, b)| a * b).sum();
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            (dot / (n * tn)).clamp(-1.0, 1.0).acos()
        };
        let smallest = (0..100).min_by(|&i, &j| angle(i).total_cmp(&angle(j))).unwrap();
        assert_eq!(best, smallest);
    }

    #[test]
    fn return_arithmetic() {
        let ps = ParamStore::new();
        let mut g = Graph::new(&ps);
        let one = g.full(1, 1, 1.0);
        let zero = g.full(1, 1, 0.0);
        let r = discounted_returns(&mut g, &[one], zero, GAMMA).unwrap();
        assert_eq!(g.scalar(r[0]), 1.0);
        let c = g.full(1, 1, 0.3);
        let rs = [c; 15];
        let r = discounted_returns(&mut g, &rs, zero, GAMMA).unwrap();
        let want = 0.3 * (1.0 - GAMMA.powi(15)) / (1.0 - GAMMA);
        assert!((g.scalar(r[0]) - want).abs() < 1e-12);
    }

    #[test]
    fn critic_pass_leaves_latents_alone_and_actor_pass_leaves_critic_alone() {
        let mut ps = ParamStore::new();
        let critic = Critic::new(&mut ps, &mut Rng::new(15), 4, 8);
        let mut g = Graph::new(&ps);
        let z: Vec<Var> = (0..3).map(|i| g.input(2, 4, Rng::new(16 + i).normals(8)).unwrap()).collect();
        let rewards: Vec<Var> = (0..2)
            .map(|h| {
                let s = g.sum_cols(z[h + 1]);
                g.scale(s, 0.1)
            })
            .collect();
        let l = behavior_losses(&mut g, &z, &rewards, &critic, GAMMA).unwrap();
        let cg = g.backward(l.critic).unwrap();
        assert!(z.iter().all(|&v| cg.wrt(v).is_none_or(|d| d.iter().all(|x| *x == 0.0))));
        assert!(critic.params().iter().all(|&id| cg.param(id).is_some()));
        let ag = g.backward(l.actor).unwrap();
        assert!(critic.params().iter().all(|&id| ag.param(id).is_none()));
        assert!(ag.wrt(z[2]).unwrap().iter().any(|x| *x != 0.0));
    }

    #[test]
    fn bandit_policy_learns_to_hit_the_target() {
        // One-step latent problem: the next latent is the action itself and
        // the reward is its cosine to a fixed reachable target.
        let mut ps = ParamStore::new();
        let policy = Policy::new(&mut ps, &mut Rng::new(17), 4, 16, 3);
        let critic = Critic {
            hidden: Linear::zeros(&mut ps, "c.hidden", 3, 4),
            out: Linear::zeros(&mut ps, "c.out", 4, 1),
        };
        let target = [0.5, -0.3, 0.2];
        let mut opt = Adam::new(&ps, 1e-2);
        let mut rng = Rng::new(18);
        let mut last = 0.0;
        for _ in 0..500 {
            let (grads, mean_r) = {
                let mut g = Graph::new(&ps);
                let z0 = g.constant(32, 4, rng.normals(128)).unwrap();
                let a = policy.sample(&mut g, z0, &mut rng).unwrap();
                let t = g.constant(32, 3, target.repeat(32)).unwrap();
                let r = task_reward(&mut g, a, t).unwrap();
                // pad z0 to the action width so the critic can read both
                let z0a = g.slice_cols(z0, 0, 3).unwrap();
                let l = behavior_losses(&mut g, &[z0a, a], &[r], &critic, GAMMA).unwrap();
                (g.backward(l.actor).unwrap().into_params(), l.mean_reward)
            };
            opt.step(&mut ps, &grads, Some(&policy.params())).unwrap();
            last = mean_r;
        }
        assert!(last > 0.9, "mean reward {last}");
    }
}
