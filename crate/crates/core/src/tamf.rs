//! Task-aware modality fusion: projects `[e_v, h, s]` into the fused
//! latent and refines it with gated mixtures of a semantic and a dynamics
//! expert adapter per layer. The gates depend only on the task embedding.

use alloc::format;
use alloc::vec::Vec;

use crate::error::Result;
use crate::invalid;
use crate::numcore::{Graph, LayerNormAffine, Linear, ParamId, ParamStore, Var};
use crate::rng::Rng;

/// Residual adapter `layerscale * down(GEGLU(up(LN(z))))`. The layer scale
/// starts at zero so a fresh adapter is the identity on the residual path.
#[derive(Clone, Copy, Debug)]
pub struct ExpertAdapter {
    pub norm: LayerNormAffine,
    pub up: Linear,
    pub down: Linear,
    pub layer_scale: ParamId,
}

impl ExpertAdapter {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d_z: usize, width: usize) -> Self {
        Self {
            norm: LayerNormAffine::new(store, &format!("{name}.norm"), d_z),
            up: Linear::new(store, rng, &format!("{name}.up"), d_z, 2 * width),
            down: Linear::new(store, rng, &format!("{name}.down"), width, d_z),
            layer_scale: store.add_filled(format!("{name}.layer_scale"), 1, d_z, 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, z: Var) -> Result<Var> {
        let x = self.norm.forward(g, z)?;
        let x = self.up.forward(g, x)?;
        let x = g.geglu(x)?;
        let x = self.down.forward(g, x)?;
        let ls = g.param(self.layer_scale);
        g.mul(x, ls)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [
            self.norm.params().to_vec(),
            self.up.params().to_vec(),
            self.down.params().to_vec(),
            alloc::vec![self.layer_scale],
        ]
        .concat()
    }
}

/// Scalar gate `sigmoid(w2 GELU(w1 LN(tau)))` per row.
#[derive(Clone, Copy, Debug)]
pub struct TaskGate {
    pub norm: LayerNormAffine,
    pub hidden: Linear,
    pub out: Linear,
}

impl TaskGate {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d_tau: usize) -> Self {
        Self {
            norm: LayerNormAffine::new(store, &format!("{name}.norm"), d_tau),
            hidden: Linear::new(store, rng, &format!("{name}.hidden"), d_tau, d_tau),
            out: Linear::new(store, rng, &format!("{name}.out"), d_tau, 1),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, tau: Var) -> Result<Var> {
        let x = self.norm.forward(g, tau)?;
        let x = self.hidden.forward(g, x)?;
        let x = g.gelu(x);
        let x = self.out.forward(g, x)?;
        Ok(g.sigmoid(x))
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.norm.params(), self.hidden.params(), self.out.params()].concat()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TamfLayer {
    pub semantic: ExpertAdapter,
    pub dynamics: ExpertAdapter,
    pub gate: TaskGate,
}

impl TamfLayer {
    /// `z + (1 - p) * A_sem(z) + p * A_dyn(z)`; `p` is `[rows, 1]`.
    pub fn forward(&self, g: &mut Graph<'_>, z: Var, p: Var) -> Result<Var> {
        let rows = g.shape(z).rows;
        if g.shape(p).rows != rows || g.shape(p).cols != 1 {
            return Err(invalid!("gate of shape {} for {rows} latent rows", g.shape(p)));
        }
        let d = g.shape(z).cols;
        let sem = self.semantic.forward(g, z)?;
        let dy = self.dynamics.forward(g, z)?;
        // Kept in the literal two-product form so a pinned gate silences
        // the other branch bit-exactly.
        let q = g.rsub_scalar(1.0, p);
        let qw = g.repeat_cols(q, d)?;
        let pw = g.repeat_cols(p, d)?;
        let sem = g.mul(qw, sem)?;
        let dy = g.mul(pw, dy)?;
        let mixed = g.add(sem, dy)?;
        g.add(z, mixed)
    }
}

/// Full fusion module.
#[derive(Clone, Debug)]
pub struct Tamf {
    pub d_m: usize,
    pub d_h: usize,
    pub d_s: usize,
    pub project: Linear,
    pub layers: Vec<TamfLayer>,
}

/// Shape parameters of [`Tamf`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TamfDims {
    pub d_m: usize,
    pub d_h: usize,
    pub d_s: usize,
    pub d_z: usize,
    pub d_tau: usize,
    pub adapter_width: usize,
    pub layers: usize,
}

impl Tamf {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, d: TamfDims) -> Self {
        let project = Linear::new(store, rng, "tamf.project", d.d_m + d.d_h + d.d_s, d.d_z);
        let layers = (0..d.layers)
            .map(|l| TamfLayer {
                semantic: ExpertAdapter::new(store, rng, &format!("tamf.{l}.semantic"), d.d_z, d.adapter_width),
                dynamics: ExpertAdapter::new(store, rng, &format!("tamf.{l}.dynamics"), d.d_z, d.adapter_width),
                gate: TaskGate::new(store, rng, &format!("tamf.{l}.gate"), d.d_tau),
            })
            .collect();
        Self {
            d_m: d.d_m,
            d_h: d.d_h,
            d_s: d.d_s,
            project,
            layers,
        }
    }

    /// One `[rows, 1]` gate per layer.
    pub fn gates(&self, g: &mut Graph<'_>, tau: Var) -> Result<Vec<Var>> {
        self.layers.iter().map(|l| l.gate.forward(g, tau)).collect()
    }

    /// `state` is `[h, s]`; `gates` come from [`Tamf::gates`], one row per
    /// latent row.
    pub fn fuse(&self, g: &mut Graph<'_>, e_v: Var, state: Var, gates: &[Var]) -> Result<Var> {
        if gates.len() != self.layers.len() {
            return Err(invalid!("{} gates for {} fusion layers", gates.len(), self.layers.len()));
        }
        let x = g.concat_cols(&[e_v, state])?;
        let mut z = self.project.forward(g, x)?;
        for (layer, &p) in self.layers.iter().zip(gates) {
            z = layer.forward(g, z, p)?;
        }
        Ok(z)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.project.params().to_vec();
        for l in &self.layers {
            v.extend(l.semantic.params());
            v.extend(l.dynamics.params());
            v.extend(l.gate.params());
        }
        v
    }
}

/// The synthetic two-task routing problem. A teacher stack with unit layer
/// scales labels random inputs with every gate pinned to 0 for task A
/// (semantic experts only) and to 1 for task B (dynamics experts only). A
/// student starting from the teacher's weights, with its own gates, is
/// trained on the squared error with Adam; the result is the per-layer
/// `|p(tau_A) - p(tau_B)|` after `steps` updates.
pub fn routing_separation(d: TamfDims, seed: u64, steps: usize, batch: usize, lr: f64) -> Result<Vec<f64>> {
    if batch == 0 {
        return Err(invalid!("batch must be positive"));
    }
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let tamf = Tamf::new(&mut store, &mut rng, d);
    for l in &tamf.layers {
        for ls in [l.semantic.layer_scale, l.dynamics.layer_scale] {
            store.get_mut(ls).values.fill(1.0);
        }
    }
    let teacher = store.clone();
    let mut taus = Vec::with_capacity(2 * d.d_tau);
    for _ in 0..2 {
        let t = rng.normals(d.d_tau);
        let n = libm::sqrt(t.iter().map(|x| x * x).sum::<f64>());
        taus.extend(t.iter().map(|x| x / n));
    }
    let tau_rows = |g: &mut Graph<'_>| -> Result<Var> {
        let mut v = Vec::with_capacity(2 * batch * d.d_tau);
        for k in 0..2 {
            for _ in 0..batch {
                v.extend_from_slice(&taus[k * d.d_tau..(k + 1) * d.d_tau]);
            }
        }
        g.constant(2 * batch, d.d_tau, v)
    };
    let params = tamf.params();
    let mut opt = crate::jointopt::Adam::new(&store, lr);
    for _ in 0..steps {
        let n = 2 * batch;
        let e_v = rng.normals(n * d.d_m);
        let state = rng.normals(n * (d.d_h + d.d_s));
        let target = {
            let mut g = Graph::new(&teacher);
            let e = g.constant(n, d.d_m, e_v.clone())?;
            let s = g.constant(n, d.d_h + d.d_s, state.clone())?;
            let mut pin = alloc::vec![0.0; batch];
            pin.extend(core::iter::repeat_n(1.0, batch));
            let p = g.constant(n, 1, pin)?;
            let gates = alloc::vec![p; tamf.layers.len()];
            let z = tamf.fuse(&mut g, e, s, &gates)?;
            g.value(z).to_vec()
        };
        let grads = {
            let mut g = Graph::new(&store);
            let e = g.constant(n, d.d_m, e_v)?;
            let s = g.constant(n, d.d_h + d.d_s, state)?;
            let tau = tau_rows(&mut g)?;
            let gates = tamf.gates(&mut g, tau)?;
            let z = tamf.fuse(&mut g, e, s, &gates)?;
            let t = g.constant(n, d.d_z, target)?;
            let diff = g.sub(z, t)?;
            let sq = g.square(diff);
            let loss = g.mean(sq);
            g.backward(loss)?.into_params()
        };
        opt.step(&mut store, &grads, Some(&params))?;
    }
    let mut g = Graph::new(&store);
    let tau = tau_rows(&mut g)?;
    let gates = tamf.gates(&mut g, tau)?;
    Ok(gates
        .iter()
        .map(|&p| {
            let v = g.value(p);
            libm::fabs(v[0] - v[batch])
        })
        .collect())
}

/// Gate-free baseline: `z = W_e e_v + W_x [h, s] + b`.
#[derive(Clone, Copy, Debug)]
pub struct AdditiveFusion {
    pub d_m: usize,
    pub d_h: usize,
    pub d_s: usize,
    pub semantic: Linear,
    pub state: Linear,
}

impl AdditiveFusion {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, d_m: usize, d_h: usize, d_s: usize, d_z: usize) -> Self {
        Self {
            d_m,
            d_h,
            d_s,
            semantic: Linear::new(store, rng, "additive.semantic", d_m, d_z),
            state: Linear::new(store, rng, "additive.state", d_h + d_s, d_z),
        }
    }

    pub fn fuse(&self, g: &mut Graph<'_>, e_v: Var, state: Var) -> Result<Var> {
        let a = self.semantic.forward(g, e_v)?;
        let b = self.state.forward(g, state)?;
        g.add(a, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.semantic.params(), self.state.params()].concat()
    }
}

/// Which fusion module an agent uses.
#[derive(Clone, Debug)]
pub enum Fusion {
    Tamf(Tamf),
    Additive(AdditiveFusion),
}

impl Fusion {
    /// Per-layer gates; empty for additive fusion.
    pub fn gates(&self, g: &mut Graph<'_>, tau: Var) -> Result<Vec<Var>> {
        match self {
            Fusion::Tamf(t) => t.gates(g, tau),
            Fusion::Additive(_) => Ok(Vec::new()),
        }
    }

    pub fn fuse(&self, g: &mut Graph<'_>, e_v: Var, state: Var, gates: &[Var]) -> Result<Var> {
        match self {
            Fusion::Tamf(t) => t.fuse(g, e_v, state, gates),
            Fusion::Additive(a) => a.fuse(g, e_v, state),
        }
    }

    /// Rows of the first linear map that multiply the stochastic state,
    /// `[d_s, d_z]`. Used to carry state uncertainty into latent space.
    pub fn stochastic_block(&self, g: &mut Graph<'_>) -> Result<Var> {
        let (w, offset, d_s) = match self {
            Fusion::Tamf(t) => (t.project.w, t.d_m + t.d_h, t.d_s),
            Fusion::Additive(a) => (a.state.w, a.d_h, a.d_s),
        };
        let w = g.param(w);
        // Slice rows of the weight matrix.
        g.slice_rows(w, offset, d_s)
    }

    pub fn params(&self) -> Vec<ParamId> {
        match self {
            Fusion::Tamf(t) => t.params(),
            Fusion::Additive(a) => a.params(),
        }
    }

    pub fn is_task_aware(&self) -> bool {
        matches!(self, Fusion::Tamf(_))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{grad_check_params, GRAD_CHECK_STEP};

    fn dims() -> TamfDims {
        TamfDims {
            d_m: 64,
            d_h: 64,
            d_s: 32,
            d_z: 64,
            d_tau: 32,
            adapter_width: 64,
            layers: 3,
        }
    }

    fn inputs(g: &mut Graph<'_>, rows: usize, seed: u64) -> (Var, Var, Var) {
        let mut r = Rng::new(seed);
        let e = g.constant(rows, 64, r.normals(rows * 64)).unwrap();
        let st = g.constant(rows, 96, r.normals(rows * 96)).unwrap();
        let tau = g.constant(rows, 32, r.normals(rows * 32)).unwrap();
        let tau = g.normalize_rows(tau);
        (e, st, tau)
    }

    #[test]
    fn zero_layer_scales_reduce_to_the_projection() {
        let mut ps = ParamStore::new();
        let t = Tamf::new(&mut ps, &mut Rng::new(0), dims());
        let mut g = Graph::new(&ps);
        let (e, st, tau) = inputs(&mut g, 3, 1);
        let gates = t.gates(&mut g, tau).unwrap();
        let z = t.fuse(&mut g, e, st, &gates).unwrap();
        let x = g.concat_cols(&[e, st]).unwrap();
        let z0 = t.project.forward(&mut g, x).unwrap();
        assert_eq!(g.value(z), g.value(z0));
    }

    #[test]
    fn pinned_gates_select_one_expert() {
        let mut ps = ParamStore::new();
        let t = Tamf::new(&mut ps, &mut Rng::new(2), dims());
        let mut r = Rng::new(3);
        for l in &t.layers {
            for ls in [l.semantic.layer_scale, l.dynamics.layer_scale] {
                ps.get_mut(ls).values = r.normals(64);
            }
        }
        let mut g = Graph::new(&ps);
        let (e, st, _) = inputs(&mut g, 2, 4);
        let one = g.full(2, 1, 1.0);
        let zero = g.full(2, 1, 0.0);
        let x = g.concat_cols(&[e, st]).unwrap();
        let z0 = t.project.forward(&mut g, x).unwrap();
        let layer = t.layers[0];
        for (p, adapter) in [(zero, layer.semantic), (one, layer.dynamics)] {
            let z1 = layer.forward(&mut g, z0, p).unwrap();
            let a = adapter.forward(&mut g, z0).unwrap();
            let want = g.add(z0, a).unwrap();
            for (u, v) in g.value(z1).iter().zip(g.value(want)) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gates_lie_in_unit_interval_and_depend_only_on_tau() {
        let mut ps = ParamStore::new();
        let t = Tamf::new(&mut ps, &mut Rng::new(5), dims());
        let mut g = Graph::new(&ps);
        let (_, _, tau) = inputs(&mut g, 8, 6);
        for p in t.gates(&mut g, tau).unwrap() {
            assert!(g.value(p).iter().all(|v| *v > 0.0 && *v < 1.0));
        }
    }

    #[test]
    fn zero_gate_weights_give_one_half() {
        let mut ps = ParamStore::new();
        let t = Tamf::new(&mut ps, &mut Rng::new(20), dims());
        for l in &t.layers {
            for id in [l.gate.hidden.params(), l.gate.out.params()].concat() {
                ps.get_mut(id).values.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut g = Graph::new(&ps);
        let (_, _, tau) = inputs(&mut g, 2, 21);
        for p in t.gates(&mut g, tau).unwrap() {
            assert!(g.value(p).iter().all(|v| *v == 0.5));
        }
    }

    #[test]
    fn pinned_gates_make_the_other_branch_irrelevant() {
        let mut ps = ParamStore::new();
        let t = Tamf::new(&mut ps, &mut Rng::new(22), dims());
        let mut r = Rng::new(23);
        for l in &t.layers {
            for ls in [l.semantic.layer_scale, l.dynamics.layer_scale] {
                ps.get_mut(ls).values = r.normals(64);
            }
        }
        for pin in [0.0, 1.0] {
            let run = |ps: &ParamStore| {
                let mut g = Graph::new(ps);
                let (e, st, _) = inputs(&mut g, 3, 24);
                let gates: Vec<Var> = (0..3).map(|_| g.full(3, 1, pin)).collect();
                let z = t.fuse(&mut g, e, st, &gates).unwrap();
                g.value(z).to_vec()
            };
            let before = run(&ps);
            let mut scrambled = ps.clone();
            for l in &t.layers {
                // p = 0 silences the dynamics branch, p = 1 the semantic one
                let silenced = if pin == 0.0 { l.dynamics } else { l.semantic };
                for id in silenced.params() {
                    let n = scrambled.get(id).values.len();
                    scrambled.get_mut(id).values = r.normals(n);
                }
            }
            assert_eq!(before, run(&scrambled));
        }
    }

    #[test]
    fn gate_gradients_stay_local_to_their_layer() {
        let mut ps = ParamStore::new();
        let t = Tamf::new(&mut ps, &mut Rng::new(25), dims());
        let mut g = Graph::new(&ps);
        let (_, _, tau) = inputs(&mut g, 2, 26);
        let gates = t.gates(&mut g, tau).unwrap();
        let p1 = g.sum(gates[1]);
        let grads = g.backward(p1).unwrap();
        for (l, layer) in t.layers.iter().enumerate() {
            let gate_hit = layer.gate.params().iter().any(|&id| grads.param(id).is_some());
            assert_eq!(gate_hit, l == 1);
            for id in [layer.semantic.params(), layer.dynamics.params()].concat() {
                assert!(grads.param(id).is_none());
            }
        }
    }

    #[test]
    fn fusion_gradients_match_finite_differences() {
        let d = TamfDims {
            d_m: 3,
            d_h: 3,
            d_s: 2,
            d_z: 4,
            d_tau: 3,
            adapter_width: 3,
            layers: 2,
        };
        let mut ps = ParamStore::new();
        let t = Tamf::new(&mut ps, &mut Rng::new(7), d);
        let mut r = Rng::new(8);
        for l in &t.layers {
            for ls in [l.semantic.layer_scale, l.dynamics.layer_scale] {
                ps.get_mut(ls).values = r.normals(4);
            }
        }
        let e = r.normals(6);
        let st = r.normals(10);
        let tau = r.normals(6);
        let err = grad_check_params(
            &ps,
            &t.params(),
            |g| {
                let e = g.constant(2, 3, e.clone())?;
                let st = g.constant(2, 5, st.clone())?;
                let tau = g.constant(2, 3, tau.clone())?;
                let gates = t.gates(g, tau)?;
                let z = t.fuse(g, e, st, &gates)?;
                let z = g.tanh(z);
                Ok(g.sum(z))
            },
            GRAD_CHECK_STEP,
            None,
            &mut Rng::new(9),
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn routing_problem_separates_gates() {
        let d = TamfDims {
            d_m: 8,
            d_h: 8,
            d_s: 4,
            d_z: 16,
            d_tau: 8,
            adapter_width: 16,
            layers: 2,
        };
        let before = routing_separation(d, 5, 0, 4, 3e-3).unwrap();
        let after = routing_separation(d, 5, 300, 4, 3e-3).unwrap();
        assert_eq!(after.len(), 2);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&after) > mean(&before) + 0.2, "{before:?} -> {after:?}");
    }

    #[test]
    fn stochastic_block_matches_weight_rows() {
        let mut ps = ParamStore::new();
        let f = Fusion::Tamf(Tamf::new(&mut ps, &mut Rng::new(10), dims()));
        let Fusion::Tamf(t) = &f else { unreachable!() };
        let w = ps.get(t.project.w).values.clone();
        let mut g = Graph::new(&ps);
        let blk = f.stochastic_block(&mut g).unwrap();
        assert_eq!(g.shape(blk).rows, 32);
        assert_eq!(g.value(blk), &w[128 * 64..160 * 64]);

        let mut ps = ParamStore::new();
        let a = Fusion::Additive(AdditiveFusion::new(&mut ps, &mut Rng::new(11), 64, 64, 32, 64));
        let Fusion::Additive(add) = &a else { unreachable!() };
        let w = ps.get(add.state.w).values.clone();
        let mut g = Graph::new(&ps);
        let blk = a.stochastic_block(&mut g).unwrap();
        assert_eq!(g.value(blk), &w[64 * 64..96 * 64]);
        let tau = g.zeros(1, 32);
        assert!(a.gates(&mut g, tau).unwrap().is_empty());
    }
}
