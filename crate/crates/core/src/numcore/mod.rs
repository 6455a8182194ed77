//! Differentiable-array substrate: the tape, parameter storage, small
//! layer building blocks, diagonal Gaussians and a finite-difference
//! gradient checker.

mod dist;
mod gradcheck;
mod nn;
mod params;
mod tape;

pub use dist::{kl_diag_gaussian, DiagGaussian, LOG_STD_MAX, LOG_STD_MIN};
pub use gradcheck::{grad_check, grad_check_params, GRAD_CHECK_STEP};
pub use nn::{LayerNormAffine, Linear, LN_EPS};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{Graph, Gradients, Shape, Var, COSINE_EPS};
