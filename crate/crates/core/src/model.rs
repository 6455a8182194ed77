//! The full agent: every sub-network, their shared parameter store, and
//! the prompt book that turns task ids into instructions.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::behavior::{Critic, ImaginationEv, Imagination, Policy, TextImagination};
use crate::encoders::{FusedDecoder, SemanticEncoder, TaskEncoder, TaskMapper, TextAligner};
use crate::error::Result;
use crate::invalid;
use crate::numcore::{Graph, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tamf::{AdditiveFusion, Fusion, Tamf, TamfDims};
use crate::toyworlds::TaskId;
use crate::worldmodel::{WorldModel, WorldModelDims};

/// Every width in the agent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub d_tau: usize,
    pub d_m: usize,
    pub d_z: usize,
    pub d_h: usize,
    pub d_s: usize,
    pub obs_embed: usize,
    pub window: usize,
    pub mllm_hidden: usize,
    pub task_hidden: usize,
    pub align_hidden: usize,
    pub wm_head_hidden: usize,
    pub adapter_width: usize,
    pub tamf_layers: usize,
    pub policy_hidden: usize,
    pub critic_hidden: usize,
    pub text_hidden: usize,
}

impl ModelDims {
    pub fn new(obs_dim: usize, act_dim: usize) -> Self {
        Self {
            obs_dim,
            act_dim,
            d_tau: 32,
            d_m: 64,
            d_z: 64,
            d_h: 64,
            d_s: 32,
            obs_embed: 16,
            window: 4,
            mllm_hidden: 128,
            task_hidden: 64,
            align_hidden: 64,
            wm_head_hidden: 64,
            adapter_width: 64,
            tamf_layers: 3,
            policy_hidden: 64,
            critic_hidden: 64,
            text_hidden: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            self.obs_dim,
            self.act_dim,
            self.d_tau,
            self.d_m,
            self.d_z,
            self.d_h,
            self.d_s,
            self.obs_embed,
            self.window,
            self.mllm_hidden,
            self.task_hidden,
            self.align_hidden,
            self.wm_head_hidden,
            self.adapter_width,
            self.tamf_layers,
            self.policy_hidden,
            self.critic_hidden,
            self.text_hidden,
        ];
        if widths.contains(&0) {
            return Err(invalid!("model widths must all be positive: {self:?}"));
        }
        if self.d_tau < 2 || self.d_z < 2 {
            return Err(invalid!("layer-normalized widths need at least 2 features"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionKind {
    Tamf,
    Additive,
}

/// Instruction text per (embodiment, task); falls back to the task's
/// default prompt.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PromptBook {
    entries: Vec<(String, TaskId, String)>,
}

impl PromptBook {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, embodiment: &str, task: TaskId, prompt: &str) -> Result<()> {
        if prompt.split_whitespace().next().is_none() {
            return Err(invalid!("empty prompt for {embodiment}.{task}"));
        }
        match self.entries.iter_mut().find(|(e, t, _)| e == embodiment && *t == task) {
            Some(entry) => entry.2 = prompt.to_string(),
            None => self.entries.push((embodiment.to_string(), task, prompt.to_string())),
        }
        Ok(())
    }

    pub fn get(&self, embodiment: &str, task: TaskId) -> &str {
        self.entries
            .iter()
            .find(|(e, t, _)| e == embodiment && *t == task)
            .map_or_else(|| task.default_prompt(), |(_, _, p)| p.as_str())
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, TaskId, &str)> {
        self.entries.iter().map(|(e, t, p)| (e.as_str(), *t, p.as_str()))
    }

    /// Prompts within one embodiment must be distinct.
    pub fn validate(&self) -> Result<()> {
        for (i, a) in self.entries.iter().enumerate() {
            for b in &self.entries[i + 1..] {
                if a.0 == b.0 && a.2 == b.2 {
                    return Err(invalid!("{}: tasks {} and {} share the prompt {:?}", a.0, a.1, b.1, a.2));
                }
            }
        }
        Ok(())
    }
}

/// All networks of the agent over one parameter store.
#[derive(Clone, Debug)]
pub struct Agent {
    pub dims: ModelDims,
    pub store: ParamStore,
    pub task_encoder: TaskEncoder,
    pub mllm: SemanticEncoder,
    pub mapper: TaskMapper,
    pub aligner: TextAligner,
    pub decoder: FusedDecoder,
    pub wm: WorldModel,
    pub fusion: Fusion,
    pub policy: Policy,
    pub critic: Critic,
    pub text: TextImagination,
}

impl Agent {
    pub fn new(dims: ModelDims, kind: FusionKind, seed: u64) -> Result<Self> {
        dims.validate()?;
        let d = dims;
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let task_encoder = TaskEncoder::new(&mut store, &mut rng, d.task_hidden, d.d_tau);
        let mllm = SemanticEncoder::new(&mut store, &mut rng, d.window, d.obs_dim, d.mllm_hidden, d.d_m);
        let mapper = TaskMapper::new(&mut store, &mut rng, d.d_tau, d.d_z);
        let aligner = TextAligner::new(&mut store, &mut rng, d.d_tau, d.align_hidden, d.d_m);
        let decoder = FusedDecoder::new(&mut store, &mut rng, d.d_z, d.d_m, d.obs_dim);
        let wm = WorldModel::new(
            &mut store,
            &mut rng,
            WorldModelDims {
                obs_dim: d.obs_dim,
                act_dim: d.act_dim,
                d_h: d.d_h,
                d_s: d.d_s,
                obs_embed: d.obs_embed,
                head_hidden: d.wm_head_hidden,
            },
        );
        let fusion = match kind {
            FusionKind::Tamf => Fusion::Tamf(Tamf::new(
                &mut store,
                &mut rng,
                TamfDims {
                    d_m: d.d_m,
                    d_h: d.d_h,
                    d_s: d.d_s,
                    d_z: d.d_z,
                    d_tau: d.d_tau,
                    adapter_width: d.adapter_width,
                    layers: d.tamf_layers,
                },
            )),
            FusionKind::Additive => Fusion::Additive(AdditiveFusion::new(&mut store, &mut rng, d.d_m, d.d_h, d.d_s, d.d_z)),
        };
        let policy = Policy::new(&mut store, &mut rng, d.d_z, d.policy_hidden, d.act_dim);
        let critic = Critic::new(&mut store, &mut rng, d.d_z, d.critic_hidden);
        let text = TextImagination::new(&mut store, &mut rng, d.d_z, d.act_dim, d.text_hidden);
        Ok(Self {
            dims,
            store,
            task_encoder,
            mllm,
            mapper,
            aligner,
            decoder,
            wm,
            fusion,
            policy,
            critic,
            text,
        })
    }

    pub fn fusion_kind(&self) -> FusionKind {
        match self.fusion {
            Fusion::Tamf(_) => FusionKind::Tamf,
            Fusion::Additive(_) => FusionKind::Additive,
        }
    }

    pub fn imagination(&self, ev: ImaginationEv) -> Imagination<'_> {
        Imagination {
            wm: &self.wm,
            fusion: &self.fusion,
            decoder: &self.decoder,
            policy: &self.policy,
            ev,
        }
    }

    /// Policy and critic: the parameters the behavior update owns.
    pub fn behavior_params(&self) -> Vec<ParamId> {
        [self.policy.params(), self.critic.params()].concat()
    }

    /// Every trainable parameter outside the policy and critic. Those two
    /// belong to the behavior update alone.
    pub fn objective_params(&self) -> Vec<ParamId> {
        let behavior = self.behavior_params();
        self.store
            .ids()
            .filter(|id| !self.store.get(*id).frozen && !behavior.contains(id))
            .collect()
    }

    /// Per-layer gate values for one prompt; empty without task-aware fusion.
    pub fn gate_values(&self, prompt: &str) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.store);
        let tau = self.task_encoder.encode(&mut g, &[prompt])?;
        let gates = self.fusion.gates(&mut g, tau)?;
        Ok(gates.iter().map(|&p| g.value(p)[0]).collect())
    }
}
