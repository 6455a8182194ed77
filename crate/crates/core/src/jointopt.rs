//! Adam optimizer with global-norm clipping, and the joint objective
//! `lambda_wm L_wm + lambda_mllm L_mllm + lambda_jbo L_jbo`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::behavior::{text_rollout, ImaginationEv, RolloutStart};
use crate::encoders::squared_error;
use crate::error::{Error, Result};
use crate::invalid;
use crate::model::Agent;
use crate::numcore::{kl_diag_gaussian, DiagGaussian, Graph, ParamId, ParamStore, Var};
use crate::rng::Rng;
use crate::toyworlds::Batch;
use crate::worldmodel::{wm_loss, WmLoss, FREE_BITS};

pub const DEFAULT_LR: f64 = 3e-4;
pub const DEFAULT_CLIP: f64 = 100.0;

/// Adam state for every parameter of a store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling.
    pub clip: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: Vec<u64>,
    steps: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let sizes: Vec<usize> = store.iter().map(|(_, p)| p.values.len()).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: DEFAULT_CLIP,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: vec![0; sizes.len()],
            steps: 0,
        }
    }

    /// Number of completed [`Adam::step`] calls.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update from per-parameter gradients (indexed like the
    /// store). `only` restricts the update to a subset. Returns the global
    /// gradient norm before clipping. Any non-finite gradient aborts the
    /// step before a single value changes.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>], only: Option<&[ParamId]>) -> Result<f64> {
        let selected: Vec<usize> = match only {
            Some(ids) => ids.iter().map(|id| id.index()).collect(),
            None => (0..grads.len()).collect(),
        };
        let mut sq = 0.0;
        for &i in &selected {
            if let Some(gv) = grads.get(i).and_then(Option::as_ref) {
                if gv.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFiniteGradient(store.get(ParamId(i)).name.clone()));
                }
                sq += gv.iter().map(|x| x * x).sum::<f64>();
            }
        }
        let norm = libm::sqrt(sq);
        let scale = if norm > self.clip { self.clip / norm } else { 1.0 };
        for &i in &selected {
            let Some(gv) = grads.get(i).and_then(Option::as_ref) else {
                continue;
            };
            let p = store.get_mut(ParamId(i));
            if p.frozen {
                continue;
            }
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let c1 = 1.0 - libm::pow(self.beta1, t as f64);
            let c2 = 1.0 - libm::pow(self.beta2, t as f64);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..gv.len() {
                let gk = gv[k] * scale;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                p.values[k] -= self.lr * (m[k] / c1) / (libm::sqrt(v[k] / c2) + self.eps);
            }
        }
        self.steps += 1;
        Ok(norm)
    }
}

/// Term weights and the discount shared by alignment and returns.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub wm: f64,
    pub mllm: f64,
    pub jbo: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            wm: 1.0,
            mllm: 1.0,
            jbo: 0.1,
            gamma: 0.99,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_wm", self.wm), ("lambda_mllm", self.mllm), ("lambda_jbo", self.jbo)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(invalid!("gamma must lie in (0, 1), got {}", self.gamma));
        }
        Ok(())
    }
}

/// Knobs of the joint forward pass other than the term weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub free_bits: f64,
    /// Stop-gradient split of the dynamics KL; `None` trains both sides.
    pub kl_balance: Option<f64>,
    pub horizon: usize,
    pub imagination_ev: ImaginationEv,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            free_bits: FREE_BITS,
            kl_balance: None,
            horizon: crate::behavior::HORIZON,
            imagination_ev: ImaginationEv::Decoded,
        }
    }
}

/// `(||e_v - ev_pred||^2 + ||e_v - align_pred||^2) / batch`. `e_v` stays
/// differentiable so the semantic encoder's head is trained too.
pub fn mllm_loss(g: &mut Graph<'_>, e_v: Var, ev_pred: Var, align_pred: Var, batch: usize) -> Result<Var> {
    if batch == 0 {
        return Err(invalid!("semantic loss over an empty batch"));
    }
    let rec = squared_error(g, e_v, ev_pred)?;
    let ali = squared_error(g, e_v, align_pred)?;
    let s = g.add(rec, ali)?;
    Ok(g.scale(s, 1.0 / batch as f64))
}

/// `sum_h gamma^h mean_rows KL(wm_h || text_h)`.
pub fn jbo_loss(g: &mut Graph<'_>, wm: &[DiagGaussian], text: &[DiagGaussian], gamma: f64) -> Result<Var> {
    if wm.len() != text.len() || wm.is_empty() {
        return Err(invalid!(
            "trajectory objective needs equal non-empty sequences, got {} and {}",
            wm.len(),
            text.len()
        ));
    }
    let mut acc: Option<Var> = None;
    let mut w = 1.0;
    for (p, q) in wm.iter().zip(text) {
        let kl = kl_diag_gaussian(g, p, q)?;
        let m = g.mean(kl);
        let m = g.scale(m, w);
        acc = Some(match acc {
            Some(a) => g.add(a, m)?,
            None => m,
        });
        w *= gamma;
    }
    Ok(acc.expect("non-empty"))
}

/// Detached values of the posterior contexts imagination starts from, one
/// per batch row.
#[derive(Clone, Debug, PartialEq)]
pub struct StartSnapshot {
    pub rows: usize,
    pub h: Vec<f64>,
    pub s: Vec<f64>,
    pub z: Vec<f64>,
    pub e_v: Vec<f64>,
    pub prompts: Vec<String>,
}

/// Every term of one joint forward pass.
#[derive(Clone, Debug)]
pub struct TotalLoss {
    pub total: Var,
    pub wm: WmLoss,
    pub mllm: Var,
    /// Absent when `lambda_jbo = 0`: no imagination is run at all.
    pub jbo: Option<Var>,
    /// One `[batch, 1]` gate per fusion layer.
    pub gates: Vec<Var>,
    pub starts: StartSnapshot,
}

/// Full forward pass on a replay batch: task encoding, posterior unroll,
/// semantic windows, fusion, decoding, and (when weighted) imagination from
/// one random posterior state per row.
pub fn total_loss(
    g: &mut Graph<'_>,
    agent: &Agent,
    batch: &Batch,
    prompts: &[&str],
    w: &LossWeights,
    cfg: &ObjectiveConfig,
    rng: &mut Rng,
) -> Result<TotalLoss> {
    w.validate()?;
    let (b, l) = (batch.batch, batch.seq_len);
    if prompts.len() != b {
        return Err(invalid!("{} prompts for a batch of {b}", prompts.len()));
    }
    let d = agent.dims;
    if batch.obs_dim != d.obs_dim || batch.act_dim != d.act_dim {
        return Err(invalid!(
            "batch dims {}/{} do not match the model's {}/{}",
            batch.obs_dim,
            batch.act_dim,
            d.obs_dim,
            d.act_dim
        ));
    }
    let tau = agent.task_encoder.encode(g, prompts)?;
    let gates = agent.fusion.gates(g, tau)?;

    let obs: Vec<Var> = (0..l).map(|t| g.constant(b, d.obs_dim, batch.obs_at(t))).collect::<Result<_>>()?;
    let acts: Vec<Var> = (0..l - 1)
        .map(|t| g.constant(b, d.act_dim, batch.action_at(t)))
        .collect::<Result<_>>()?;
    let steps = agent.wm.observe(g, &obs, &acts, Some(rng))?;

    // Rows are time-major: row t * b + i is timestep t of sequence i.
    let hs: Vec<Var> = steps.iter().map(|s| s.state.h).collect();
    let ss: Vec<Var> = steps.iter().map(|s| s.state.s).collect();
    let h_all = g.concat_rows(&hs)?;
    let s_all = g.concat_rows(&ss)?;
    let state_all = g.concat_cols(&[h_all, s_all])?;
    let mut windows = Vec::with_capacity(l * b * d.window * d.obs_dim);
    for t in 0..l {
        for i in 0..b {
            windows.extend(batch.window(i, t, d.window));
        }
    }
    let windows = g.constant(l * b, d.window * d.obs_dim, windows)?;
    let e_v = agent.mllm.forward(g, windows)?;
    let tile: Vec<usize> = (0..l * b).map(|r| r % b).collect();
    let gates_all: Vec<Var> = gates.iter().map(|&p| g.gather_rows(p, &tile)).collect::<Result<_>>()?;
    let z = agent.fusion.fuse(g, e_v, state_all, &gates_all)?;
    let (ev_pred, obs_pred) = agent.decoder.forward(g, z)?;

    let x_all = g.concat_rows(&obs)?;
    let wm = wm_loss(g, &steps, obs_pred, x_all, b, cfg.free_bits, cfg.kl_balance)?;
    let align = agent.aligner.forward(g, tau)?;
    let align_all = g.gather_rows(align, &tile)?;
    let mllm = mllm_loss(g, e_v, ev_pred, align_all, b)?;

    let picks: Vec<usize> = (0..b).map(|i| rng.below(l) * b + i).collect();
    let h0 = g.gather_rows(h_all, &picks)?;
    let s0 = g.gather_rows(s_all, &picks)?;
    let z0 = g.gather_rows(z, &picks)?;
    let e0 = g.gather_rows(e_v, &picks)?;
    let starts = StartSnapshot {
        rows: b,
        h: g.value(h0).to_vec(),
        s: g.value(s0).to_vec(),
        z: g.value(z0).to_vec(),
        e_v: g.value(e0).to_vec(),
        prompts: prompts.iter().map(|p| String::from(*p)).collect(),
    };

    let jbo = if w.jbo > 0.0 {
        let start = RolloutStart {
            state: crate::worldmodel::LatentState {
                h: g.detach(h0),
                s: g.detach(s0),
            },
            z: g.detach(z0),
            e_v: g.detach(e0),
            gates: gates.clone(),
        };
        let traj = agent.imagination(cfg.imagination_ev).rollout(g, &start, cfg.horizon, rng)?;
        let text = text_rollout(g, &agent.mapper, &agent.text, tau, &traj.actions)?;
        Some(jbo_loss(g, &traj.lifted, &text[1..], w.gamma)?)
    } else {
        None
    };

    let mut total: Option<Var> = None;
    let weighted = [(w.wm, Some(wm.total)), (w.mllm, Some(mllm)), (w.jbo, jbo)];
    for (lambda, term) in weighted {
        let Some(term) = term else { continue };
        if lambda == 0.0 {
            continue;
        }
        let t = g.scale(term, lambda);
        total = Some(match total {
            Some(acc) => g.add(acc, t)?,
            None => t,
        });
    }
    let total = total.unwrap_or_else(|| g.zeros(1, 1));
    for (name, v) in [("world model", wm.total), ("semantic", mllm), ("total", total)] {
        if !g.scalar(v).is_finite() {
            return Err(Error::NonFiniteLoss(name));
        }
    }
    if let Some(j) = jbo {
        if !g.scalar(j).is_finite() {
            return Err(Error::NonFiniteLoss("trajectory alignment"));
        }
    }
    Ok(TotalLoss {
        total,
        wm,
        mllm,
        jbo,
        gates,
        starts,
    })
}

/// L2 norm of a set of parameter gradients.
pub fn grad_norm(grads: &[Option<Vec<f64>>], ids: Option<&[ParamId]>) -> f64 {
    let sq = |g: &Option<Vec<f64>>| g.as_ref().map_or(0.0, |v| v.iter().map(|x| x * x).sum::<f64>());
    let total: f64 = match ids {
        Some(ids) => ids.iter().filter_map(|id| grads.get(id.index())).map(sq).sum(),
        None => grads.iter().map(sq).sum(),
    };
    libm::sqrt(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FusionKind, ModelDims};
    use crate::toyworlds::{collect_offline, Dataset, EnvConfig, Embodiment, TaskId};

    fn setup(kind: FusionKind) -> (Agent, Batch, Vec<&'static str>) {
        let e = Embodiment::preset("light").unwrap();
        let eps = collect_offline(&e, &[TaskId::Walk, TaskId::Stand], 8, &EnvConfig::default(), &Rng::new(1)).unwrap();
        let ds = Dataset::new(eps).unwrap();
        let batch = ds.sample_batch(4, 6, &mut Rng::new(2)).unwrap();
        let prompts = batch.tasks.iter().map(|t| t.default_prompt()).collect();
        let agent = Agent::new(ModelDims::new(5, 3), kind, 3).unwrap();
        (agent, batch, prompts)
    }

    fn grads_for(agent: &Agent, batch: &Batch, prompts: &[&str], w: LossWeights) -> (f64, Vec<Option<Vec<f64>>>) {
        let mut g = Graph::new(&agent.store);
        let out = total_loss(&mut g, agent, batch, prompts, &w, &ObjectiveConfig::default(), &mut Rng::new(4)).unwrap();
        let v = g.scalar(out.total);
        (v, g.backward(out.total).unwrap().into_params())
    }

    fn touched(grads: &[Option<Vec<f64>>], ids: &[ParamId]) -> bool {
        ids.iter()
            .any(|id| grads[id.index()].as_ref().is_some_and(|g| g.iter().any(|x| *x != 0.0)))
    }

    #[test]
    fn semantic_loss_cases() {
        let ps = ParamStore::new();
        let mut g = Graph::new(&ps);
        let e = g.constant(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let zero = mllm_loss(&mut g, e, e, e, 1).unwrap();
        assert_eq!(g.scalar(zero), 0.0);
        let z = g.zeros(1, 3);
        let p1 = g.constant(1, 3, vec![1.0, -1.0, 2.0]).unwrap();
        let p2 = g.constant(1, 3, vec![0.5, 0.0, 3.0]).unwrap();
        let v = mllm_loss(&mut g, z, p1, p2, 1).unwrap();
        assert!((g.scalar(v) - (6.0 + 9.25)).abs() < 1e-12);
    }

    #[test]
    fn trajectory_objective_weights() {
        let ps = ParamStore::new();
        let mut g = Graph::new(&ps);
        let mk = |g: &mut Graph<'_>, m: f64, ls: f64| {
            let mean = g.full(1, 2, m);
            let log_std = g.full(1, 2, ls);
            DiagGaussian { mean, log_std }
        };
        let a = mk(&mut g, 0.0, 0.0);
        let b = mk(&mut g, 1.0, 0.3);
        let c = mk(&mut g, -0.5, -0.2);
        let same = jbo_loss(&mut g, &[a, b, c], &[a, b, c], 0.99).unwrap();
        assert_eq!(g.scalar(same), 0.0);
        assert!(jbo_loss(&mut g, &[a], &[a, b], 0.99).is_err());
        // closed-form per-dimension KL, two identical dimensions
        let kl = |m1: f64, l1: f64, m2: f64, l2: f64| {
            2.0 * ((l2 - l1) + ((2.0 * l1).exp() + (m1 - m2).powi(2)) / (2.0 * (2.0 * l2).exp()) - 0.5)
        };
        let v = jbo_loss(&mut g, &[a, b], &[b, c], 0.99).unwrap();
        let want = kl(0.0, 0.0, 1.0, 0.3) + 0.99 * kl(1.0, 0.3, -0.5, -0.2);
        assert!((g.scalar(v) - want).abs() < 1e-12);
        // third step carries weight gamma^2
        let only_third = jbo_loss(&mut g, &[a, a, a], &[a, a, b], 0.99).unwrap();
        let w = g.scalar(only_third) / kl(0.0, 0.0, 1.0, 0.3);
        assert!((w - 0.9801).abs() < 1e-12);
    }

    #[test]
    fn all_weights_zero_annihilates_the_objective() {
        let (agent, batch, prompts) = setup(FusionKind::Tamf);
        let w = LossWeights {
            wm: 0.0,
            mllm: 0.0,
            jbo: 0.0,
            gamma: 0.99,
        };
        let (v, grads) = grads_for(&agent, &batch, &prompts, w);
        assert_eq!(v, 0.0);
        assert!(grads.iter().all(|g| g.as_ref().is_none_or(|g| g.iter().all(|x| *x == 0.0))));
    }

    #[test]
    fn removing_alignment_silences_text_imagination() {
        let (agent, batch, prompts) = setup(FusionKind::Tamf);
        let off = LossWeights { jbo: 0.0, ..LossWeights::default() };
        let (_, grads) = grads_for(&agent, &batch, &prompts, off);
        assert!(!touched(&grads, &agent.text.params()));
        assert!(!touched(&grads, &agent.mapper.map.params()));
        let (_, grads) = grads_for(&agent, &batch, &prompts, LossWeights::default());
        assert!(touched(&grads, &agent.text.params()));
        assert!(touched(&grads, &agent.mapper.map.params()));
    }

    #[test]
    fn total_is_the_weighted_sum_of_its_terms() {
        let (agent, batch, prompts) = setup(FusionKind::Tamf);
        let w = LossWeights {
            wm: 0.7,
            mllm: 1.3,
            jbo: 0.4,
            gamma: 0.95,
        };
        let mut g = Graph::new(&agent.store);
        let out = total_loss(&mut g, &agent, &batch, &prompts, &w, &ObjectiveConfig::default(), &mut Rng::new(4)).unwrap();
        let parts = 0.7 * g.scalar(out.wm.total) + 1.3 * g.scalar(out.mllm) + 0.4 * g.scalar(out.jbo.unwrap());
        assert!((g.scalar(out.total) - parts).abs() < 1e-10);
        assert!((g.scalar(out.wm.total) - g.scalar(out.wm.dynamics) - g.scalar(out.wm.reconstruction)).abs() < 1e-10);
    }

    #[test]
    fn one_backward_pass_reaches_world_model_fusion_and_encoder() {
        let (agent, batch, prompts) = setup(FusionKind::Tamf);
        let (_, grads) = grads_for(&agent, &batch, &prompts, LossWeights::default());
        assert!(touched(&grads, &agent.wm.params()));
        assert!(touched(&grads, &agent.fusion.params()));
        assert!(touched(&grads, &agent.mllm.trainable_params()));
        assert!(!touched(&grads, &agent.mllm.frozen_params()));
        assert!(!touched(&grads, &agent.critic.params()));
    }

    #[test]
    fn semantic_term_alone_moves_the_encoder_head() {
        let (mut agent, batch, prompts) = setup(FusionKind::Tamf);
        let w = LossWeights {
            wm: 0.0,
            mllm: 1.0,
            jbo: 0.0,
            gamma: 0.99,
        };
        let (_, grads) = grads_for(&agent, &batch, &prompts, w);
        let before = agent.store.clone();
        let mut opt = Adam::new(&agent.store, DEFAULT_LR);
        opt.step(&mut agent.store, &grads, None).unwrap();
        let moved = agent
            .mllm
            .trainable_params()
            .iter()
            .map(|&id| {
                let (a, b) = (&before.get(id).values, &agent.store.get(id).values);
                a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        assert!(moved > 0.0);
        for id in agent.mllm.frozen_params() {
            assert_eq!(before.get(id).values, agent.store.get(id).values);
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_and_counts_the_step() {
        let mut ps = ParamStore::new();
        let x = ps.add("x", 1, 2, vec![0.3, -0.2], false);
        let mut opt = Adam::new(&ps, 0.1);
        opt.step(&mut ps, &[Some(vec![0.0, 0.0])], None).unwrap();
        assert_eq!(ps.get(x).values, vec![0.3, -0.2]);
        assert_eq!(opt.steps(), 1);
        opt.step(&mut ps, &[None], None).unwrap();
        assert_eq!(opt.steps(), 2);
    }

    #[test]
    fn scalar_quadratic_probe_converges() {
        let mut ps = ParamStore::new();
        let x = ps.add("x", 1, 1, vec![1.0], false);
        let mut opt = Adam::new(&ps, 1e-2);
        let mut hit = None;
        for step in 0..2000 {
            let gx = ps.get(x).values[0];
            opt.step(&mut ps, &[Some(vec![gx])], None).unwrap();
            if hit.is_none() && ps.get(x).values[0].abs() < 1e-3 {
                hit = Some(step);
            }
        }
        assert!(hit.is_some());
        assert!(ps.get(x).values[0].abs() < 1e-3, "{}", ps.get(x).values[0]);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut ps = ParamStore::new();
        let x = ps.add("x", 1, 3, vec![3.0, -2.0, 1.0], false);
        let mut opt = Adam::new(&ps, 0.05);
        for _ in 0..500 {
            let grads = {
                let mut g = Graph::new(&ps);
                let v = g.param(x);
                let sq = g.square(v);
                let l = g.sum(sq);
                g.backward(l).unwrap().into_params()
            };
            opt.step(&mut ps, &grads, None).unwrap();
        }
        assert!(ps.get(x).values.iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn non_finite_gradient_names_the_parameter_and_changes_nothing() {
        let mut ps = ParamStore::new();
        let a = ps.add("enc.a", 1, 2, vec![1.0, 2.0], false);
        let _b = ps.add("enc.b", 1, 1, vec![0.5], false);
        let mut opt = Adam::new(&ps, 0.1);
        let grads = vec![Some(vec![1.0, 1.0]), Some(vec![f64::NAN])];
        let err = opt.step(&mut ps, &grads, None).unwrap_err();
        assert!(matches!(&err, Error::NonFiniteGradient(n) if n == "enc.b"));
        assert_eq!(ps.get(a).values, vec![1.0, 2.0]);
    }

    #[test]
    fn clipping_bounds_the_first_step_and_subset_is_respected() {
        let mut ps = ParamStore::new();
        let a = ps.add("a", 1, 1, vec![0.0], false);
        let b = ps.add("b", 1, 1, vec![0.0], false);
        let mut opt = Adam::new(&ps, 0.1);
        opt.clip = 1.0;
        let grads = vec![Some(vec![1e6]), Some(vec![1.0])];
        let n = opt.step(&mut ps, &grads, Some(&[a])).unwrap();
        assert_eq!(n, 1e6);
        // Adam's first step moves by lr regardless of scale.
        assert!((ps.get(a).values[0] + 0.1).abs() < 1e-6);
        assert_eq!(ps.get(b).values[0], 0.0);
    }
}
