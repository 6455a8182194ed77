use alloc::format;

use super::params::{ParamId, ParamStore};
use super::tape::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const LN_EPS: f64 = 1e-5;

/// `y = x W + b` with `W: [in, out]`, `b: [1, out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add_glorot(format!("{name}.w"), fan_in, fan_out, rng);
        let b = store.add_filled(format!("{name}.b"), 1, fan_out, 0.0);
        Self { w, b, fan_in, fan_out }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add_filled(format!("{name}.w"), fan_in, fan_out, 0.0);
        let b = store.add_filled(format!("{name}.b"), 1, fan_out, 0.0);
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        if g.shape(x).cols != self.fan_in {
            let w = self.w;
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: g.shape(x),
                rhs: g.store().get(w).rows_cols(),
            });
        }
        let w = g.param(self.w);
        let b = g.param(self.b);
        let xw = g.matmul(x, w)?;
        g.add(xw, b)
    }

    /// Forward pass with the weights entering as constants.
    pub fn forward_fixed(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param_const(self.w);
        let b = g.param_const(self.b);
        let xw = g.matmul(x, w)?;
        g.add(xw, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

/// Layer normalization with learned per-feature gain and shift.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNormAffine {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNormAffine {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add_filled(format!("{name}.gain"), 1, dim, 1.0),
            shift: store.add_filled(format!("{name}.shift"), 1, dim, 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let n = g.layernorm(x, LN_EPS)?;
        let gain = g.param(self.gain);
        let shift = g.param(self.shift);
        let scaled = g.mul(n, gain)?;
        g.add(scaled, shift)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.gain, self.shift]
    }
}

impl super::params::Param {
    pub fn rows_cols(&self) -> super::tape::Shape {
        super::tape::Shape::new(self.rows, self.cols)
    }
}
