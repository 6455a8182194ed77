//! Recurrent state-space world model: a GRU deterministic path plus a
//! diagonal-Gaussian stochastic state with prior and posterior heads.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::invalid;
use crate::numcore::{kl_diag_gaussian, DiagGaussian, Graph, Linear, ParamId, ParamStore, Var};
use crate::rng::Rng;

/// Minimum per-step KL counted by the dynamics term.
pub const FREE_BITS: f64 = 1.0;

/// Gated recurrent unit with reset (`r`), update (`u`) and candidate (`n`)
/// gates:
///
/// ```text
/// r = sigmoid(x Wx_r + h Wh_r + b_r)
/// u = sigmoid(x Wx_u + h Wh_u + b_u)
/// n = tanh(x Wx_n + b_n + r * (h Wh_n))
/// h' = (1 - u) * n + u * h
/// ```
#[derive(Clone, Copy, Debug)]
pub struct Gru {
    pub input: Linear,
    pub recurrent: ParamId,
    pub hidden: usize,
}

impl Gru {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, input: usize, hidden: usize) -> Self {
        Self {
            input: Linear::new(store, rng, &format!("{name}.input"), input, 3 * hidden),
            recurrent: store.add_glorot(format!("{name}.recurrent"), hidden, 3 * hidden, rng),
            hidden,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, h: Var) -> Result<Var> {
        let n = self.hidden;
        if g.shape(h).cols != n {
            return Err(invalid!("gru hidden state has width {}, expected {n}", g.shape(h).cols));
        }
        let xw = self.input.forward(g, x)?;
        let wh = g.param(self.recurrent);
        let hw = g.matmul(h, wh)?;
        let xr = g.slice_cols(xw, 0, 2 * n)?;
        let hr = g.slice_cols(hw, 0, 2 * n)?;
        let ru = g.add(xr, hr)?;
        let ru = g.sigmoid(ru);
        let r = g.slice_cols(ru, 0, n)?;
        let u = g.slice_cols(ru, n, n)?;
        let xn = g.slice_cols(xw, 2 * n, n)?;
        let hn = g.slice_cols(hw, 2 * n, n)?;
        let rh = g.mul(r, hn)?;
        let cand = g.add(xn, rh)?;
        let cand = g.tanh(cand);
        // (1 - u) n + u h = n + u (h - n)
        let d = g.sub(h, cand)?;
        let ud = g.mul(u, d)?;
        g.add(cand, ud)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let [w, b] = self.input.params();
        alloc::vec![w, b, self.recurrent]
    }
}

/// Two-layer head producing a diagonal Gaussian: `in -> hidden -> GELU ->
/// 2 * dim`, split into mean and raw log-std.
#[derive(Clone, Copy, Debug)]
pub struct GaussianHead {
    pub hidden: Linear,
    pub out: Linear,
    pub dim: usize,
}

impl GaussianHead {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, input: usize, hidden: usize, dim: usize) -> Self {
        Self {
            hidden: Linear::new(store, rng, &format!("{name}.hidden"), input, hidden),
            out: Linear::new(store, rng, &format!("{name}.out"), hidden, 2 * dim),
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<DiagGaussian> {
        let h = self.hidden.forward(g, x)?;
        let h = g.gelu(h);
        let o = self.out.forward(g, h)?;
        let mean = g.slice_cols(o, 0, self.dim)?;
        let raw = g.slice_cols(o, self.dim, self.dim)?;
        DiagGaussian::from_raw(g, mean, raw)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.hidden.params(), self.out.params()].concat()
    }
}

/// Deterministic and stochastic parts of the latent state.
#[derive(Clone, Copy, Debug)]
pub struct LatentState {
    pub h: Var,
    pub s: Var,
}

impl LatentState {
    /// `[h, s]` as one row per batch element.
    pub fn concat(&self, g: &mut Graph<'_>) -> Result<Var> {
        g.concat_cols(&[self.h, self.s])
    }

    pub fn detach(&self, g: &mut Graph<'_>) -> Self {
        Self {
            h: g.detach(self.h),
            s: g.detach(self.s),
        }
    }
}

/// Result of one world-model transition.
#[derive(Clone, Copy, Debug)]
pub struct Transition {
    pub state: LatentState,
    pub prior: DiagGaussian,
    /// Present when an observation was assimilated.
    pub posterior: Option<DiagGaussian>,
}

#[derive(Clone, Debug)]
pub struct WorldModel {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub d_h: usize,
    pub d_s: usize,
    pub gru: Gru,
    pub obs_embed: Linear,
    pub prior: GaussianHead,
    pub posterior: GaussianHead,
}

/// Dimensions of a [`WorldModel`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WorldModelDims {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub d_h: usize,
    pub d_s: usize,
    pub obs_embed: usize,
    pub head_hidden: usize,
}

impl WorldModel {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, d: WorldModelDims) -> Self {
        Self {
            obs_dim: d.obs_dim,
            act_dim: d.act_dim,
            d_h: d.d_h,
            d_s: d.d_s,
            gru: Gru::new(store, rng, "wm.gru", d.d_s + d.act_dim, d.d_h),
            obs_embed: Linear::new(store, rng, "wm.obs_embed", d.obs_dim, d.obs_embed),
            prior: GaussianHead::new(store, rng, "wm.prior", d.d_h, d.head_hidden, d.d_s),
            posterior: GaussianHead::new(store, rng, "wm.posterior", d.d_h + d.obs_embed, d.head_hidden, d.d_s),
        }
    }

    pub fn initial_state(&self, g: &mut Graph<'_>, rows: usize) -> LatentState {
        LatentState {
            h: g.zeros(rows, self.d_h),
            s: g.zeros(rows, self.d_s),
        }
    }

    /// One transition. With `obs` the stochastic state comes from the
    /// posterior, otherwise from the prior. With `rng` it is a
    /// reparameterized sample, otherwise the distribution mean.
    pub fn step(
        &self,
        g: &mut Graph<'_>,
        prev: LatentState,
        action: Var,
        obs: Option<Var>,
        rng: Option<&mut Rng>,
    ) -> Result<Transition> {
        let rows = g.shape(prev.h).rows;
        let a = g.shape(action);
        if a.cols != self.act_dim || a.rows != rows {
            return Err(invalid!("action batch {a} does not match [{rows}, {}]", self.act_dim));
        }
        let x = g.concat_cols(&[prev.s, action])?;
        let h = self.gru.forward(g, x, prev.h)?;
        let prior = self.prior.forward(g, h)?;
        let posterior = match obs {
            Some(o) => {
                let os = g.shape(o);
                if os.cols != self.obs_dim || os.rows != rows {
                    return Err(invalid!("observation batch {os} does not match [{rows}, {}]", self.obs_dim));
                }
                if g.value(o).iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("world-model observation".into()));
                }
                let e = self.obs_embed.forward(g, o)?;
                let e = g.gelu(e);
                let hx = g.concat_cols(&[h, e])?;
                Some(self.posterior.forward(g, hx)?)
            }
            None => None,
        };
        let dist = posterior.unwrap_or(prior);
        let s = match rng {
            Some(r) => dist.sample(g, r)?,
            None => dist.mean,
        };
        Ok(Transition {
            state: LatentState { h, s },
            prior,
            posterior,
        })
    }

    /// Assimilates a sequence. `obs` has one entry per timestep, `actions`
    /// one fewer; the first transition uses a zero action.
    pub fn observe(
        &self,
        g: &mut Graph<'_>,
        obs: &[Var],
        actions: &[Var],
        mut rng: Option<&mut Rng>,
    ) -> Result<Vec<Transition>> {
        if obs.is_empty() || actions.len() + 1 != obs.len() {
            return Err(invalid!(
                "sequence of {} observations needs {} actions, got {}",
                obs.len(),
                obs.len().saturating_sub(1),
                actions.len()
            ));
        }
        let rows = g.shape(obs[0]).rows;
        let mut state = self.initial_state(g, rows);
        let mut out = Vec::with_capacity(obs.len());
        for (t, &o) in obs.iter().enumerate() {
            let a = if t == 0 { g.zeros(rows, self.act_dim) } else { actions[t - 1] };
            let tr = self.step(g, state, a, Some(o), rng.as_deref_mut())?;
            state = tr.state;
            out.push(tr);
        }
        Ok(out)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [
            self.gru.params(),
            self.obs_embed.params().to_vec(),
            self.prior.params(),
            self.posterior.params(),
        ]
        .concat()
    }
}

/// `sum_t mean_b max(KL(post_t || prior_t), free_bits)`.
///
/// With `balance = Some(a)` the KL is split into `a KL(sg(post) || prior) +
/// (1 - a) KL(post || sg(prior))`: same value, different gradient routing.
pub fn dynamics_loss(g: &mut Graph<'_>, steps: &[Transition], free_bits: f64, balance: Option<f64>) -> Result<Var> {
    let mut kls = Vec::with_capacity(steps.len());
    for tr in steps {
        let post = tr
            .posterior
            .ok_or_else(|| invalid!("dynamics loss needs posterior transitions"))?;
        let kl = match balance {
            None => kl_diag_gaussian(g, &post, &tr.prior)?,
            Some(a) => {
                let sp = post.detach(g);
                let sq = tr.prior.detach(g);
                let to_prior = kl_diag_gaussian(g, &sp, &tr.prior)?;
                let to_post = kl_diag_gaussian(g, &post, &sq)?;
                let to_prior = g.scale(to_prior, a);
                let to_post = g.scale(to_post, 1.0 - a);
                g.add(to_prior, to_post)?
            }
        };
        kls.push(g.max_const(kl, free_bits));
    }
    let rows = g.shape(kls[0]).rows as f64;
    let all = g.concat_rows(&kls)?;
    let s = g.sum(all);
    Ok(g.scale(s, 1.0 / rows))
}

/// World-model loss terms. `recon_pred` and `recon_target` stack every
/// timestep row-wise; both sums are divided by the batch size.
#[derive(Clone, Copy, Debug)]
pub struct WmLoss {
    pub total: Var,
    pub dynamics: Var,
    pub reconstruction: Var,
}

pub fn wm_loss(
    g: &mut Graph<'_>,
    steps: &[Transition],
    recon_pred: Var,
    recon_target: Var,
    batch: usize,
    free_bits: f64,
    balance: Option<f64>,
) -> Result<WmLoss> {
    if steps.is_empty() || batch == 0 {
        return Err(invalid!("world-model loss over an empty batch"));
    }
    let dynamics = dynamics_loss(g, steps, free_bits, balance)?;
    let se = crate::encoders::squared_error(g, recon_target, recon_pred)?;
    let reconstruction = g.scale(se, 1.0 / batch as f64);
    let total = g.add(dynamics, reconstruction)?;
    if !g.scalar(total).is_finite() {
        return Err(Error::NonFiniteLoss("world model"));
    }
    Ok(WmLoss {
        total,
        dynamics,
        reconstruction,
    })
}
