use alloc::vec::Vec;

use super::tape::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// `ln 0.1`
pub const LOG_STD_MIN: f64 = -core::f64::consts::LN_10;
/// `ln 10`
pub const LOG_STD_MAX: f64 = core::f64::consts::LN_10;

/// Diagonal Gaussian over the columns of `mean`; each row is a separate
/// distribution. `log_std` always lies in `[LOG_STD_MIN, LOG_STD_MAX]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DiagGaussian {
    pub mean: Var,
    pub log_std: Var,
}

impl DiagGaussian {
    /// Maps an unconstrained head output into the allowed `log_std` range
    /// with a sigmoid, so the bound holds without killing gradients.
    /// A raw value of 0 gives unit std.
    pub fn from_raw(g: &mut Graph<'_>, mean: Var, raw_log_std: Var) -> Result<Self> {
        check_same(g, mean, raw_log_std)?;
        let s = g.sigmoid(raw_log_std);
        let log_std = g.affine(s, LOG_STD_MAX - LOG_STD_MIN, LOG_STD_MIN);
        Ok(Self { mean, log_std })
    }

    /// Hard-clamps `log_std` into range.
    pub fn new_clamped(g: &mut Graph<'_>, mean: Var, log_std: Var) -> Result<Self> {
        check_same(g, mean, log_std)?;
        let log_std = g.clamp(log_std, LOG_STD_MIN, LOG_STD_MAX);
        Ok(Self { mean, log_std })
    }

    /// Constant distribution with every std equal to `std` (clamped).
    pub fn isotropic(g: &mut Graph<'_>, rows: usize, dim: usize, mean: f64, std: f64) -> Self {
        let ls = libm::log(std).clamp(LOG_STD_MIN, LOG_STD_MAX);
        let mean = g.full(rows, dim, mean);
        let log_std = g.full(rows, dim, ls);
        Self { mean, log_std }
    }

    /// Distribution concentrated as tightly as the std floor allows.
    pub fn point(g: &mut Graph<'_>, mean: Var) -> Self {
        let s = g.shape(mean);
        let log_std = g.full(s.rows, s.cols, LOG_STD_MIN);
        Self { mean, log_std }
    }

    pub fn rows(&self, g: &Graph<'_>) -> usize {
        g.shape(self.mean).rows
    }

    pub fn dim(&self, g: &Graph<'_>) -> usize {
        g.shape(self.mean).cols
    }

    pub fn std(&self, g: &mut Graph<'_>) -> Var {
        g.exp(self.log_std)
    }

    /// Reparameterized draw `mean + std * eps`, `eps ~ N(0, I)`.
    pub fn sample(&self, g: &mut Graph<'_>, rng: &mut Rng) -> Result<Var> {
        let s = g.shape(self.mean);
        let eps: Vec<f64> = rng.normals(s.len());
        let eps = g.constant(s.rows, s.cols, eps)?;
        let std = self.std(g);
        let noise = g.mul(std, eps)?;
        g.add(self.mean, noise)
    }

    pub fn detach(&self, g: &mut Graph<'_>) -> Self {
        Self {
            mean: g.detach(self.mean),
            log_std: g.detach(self.log_std),
        }
    }
}

fn check_same(g: &Graph<'_>, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::ShapeMismatch {
            op: "diag_gaussian",
            lhs: g.shape(a),
            rhs: g.shape(b),
        });
    }
    Ok(())
}

/// Closed-form `KL(p || q)` per row, `[m, 1]`.
///
/// With `d = log_std_q - log_std_p`, each dimension contributes
/// `d + (exp(-2d) + (mu_p - mu_q)^2 exp(-2 log_std_q)) / 2 - 1/2`.
pub fn kl_diag_gaussian(g: &mut Graph<'_>, p: &DiagGaussian, q: &DiagGaussian) -> Result<Var> {
    if g.shape(p.mean) != g.shape(q.mean) {
        return Err(Error::ShapeMismatch {
            op: "kl_diag_gaussian",
            lhs: g.shape(p.mean),
            rhs: g.shape(q.mean),
        });
    }
    let d = g.sub(q.log_std, p.log_std)?;
    let var_ratio = {
        let m2d = g.scale(d, -2.0);
        g.exp(m2d)
    };
    let diff = g.sub(p.mean, q.mean)?;
    let diff2 = g.square(diff);
    let inv_var_q = {
        let m2 = g.scale(q.log_std, -2.0);
        g.exp(m2)
    };
    let maha = g.mul(diff2, inv_var_q)?;
    let quad = g.add(var_ratio, maha)?;
    let half = g.affine(quad, 0.5, -0.5);
    let per_dim = g.add(d, half)?;
    Ok(g.sum_cols(per_dim))
}
