//! Central-difference gradient checking.

use alloc::vec::Vec;

use super::params::{ParamId, ParamStore};
use super::tape::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Max over coordinates of `|analytic - numeric| / max(1, |analytic|)` for
/// the scalar map `f` at the input `x` (`rows x cols`).
pub fn grad_check<F>(f: F, rows: usize, cols: usize, x: &[f64], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, Var) -> Result<Var>,
{
    let empty = ParamStore::new();
    let eval = |vals: Vec<f64>| -> Result<f64> {
        let mut g = Graph::new(&empty);
        let v = g.constant(rows, cols, vals)?;
        let out = f(&mut g, v)?;
        finite(g.scalar(out))
    };

    let mut g = Graph::new(&empty);
    let v = g.input(rows, cols, x.to_vec())?;
    let out = f(&mut g, v)?;
    finite(g.scalar(out))?;
    let grads = g.backward(out)?;
    let zero = alloc::vec![0.0; x.len()];
    let analytic = grads.wrt(v).unwrap_or(&zero).to_vec();

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.to_vec();
        plus[i] += h;
        let mut minus = x.to_vec();
        minus[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    Ok(worst)
}

/// Same measure with respect to the trainable parameters in `ids`. When
/// `max_coords` is set, at most that many coordinates per parameter are
/// probed, chosen with `rng`.
pub fn grad_check_params<F>(
    store: &ParamStore,
    ids: &[ParamId],
    f: F,
    h: f64,
    max_coords: Option<usize>,
    rng: &mut Rng,
) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let out = f(&mut g)?;
    finite(g.scalar(out))?;
    let grads = g.backward(out)?;
    drop(g);

    let mut work = store.clone();
    let mut worst = 0.0f64;
    for &id in ids {
        let n = store.get(id).values.len();
        let coords: Vec<usize> = match max_coords {
            Some(k) if k < n => (0..k).map(|_| rng.below(n)).collect(),
            _ => (0..n).collect(),
        };
        let analytic = grads.param(id);
        for i in coords {
            let a = analytic.map_or(0.0, |g| g[i]);
            let orig = work.get(id).values[i];
            work.get_mut(id).values[i] = orig + h;
            let fp = eval_store(&work, &f)?;
            work.get_mut(id).values[i] = orig - h;
            let fm = eval_store(&work, &f)?;
            work.get_mut(id).values[i] = orig;
            worst = worst.max(rel_err(a, (fp - fm) / (2.0 * h)));
        }
    }
    Ok(worst)
}

fn eval_store<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let out = f(&mut g)?;
    finite(g.scalar(out))
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn finite(x: f64) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite(alloc::format!("grad_check objective evaluated to {x}")))
    }
}
