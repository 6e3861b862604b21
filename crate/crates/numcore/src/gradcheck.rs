//! Central finite-difference verification of tape gradients.

use crate::error::{NumError, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter name, flat index)` of the worst component.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Step for a coordinate of magnitude `x`: cube root of machine epsilon, scaled.
pub fn fd_step(x: f64) -> f64 {
    f64::EPSILON.cbrt() * x.abs().max(1.0)
}

/// Components smaller than this are compared against it instead of their
/// own magnitude, since the difference quotient carries roundoff of order
/// `eps^(2/3) · |f|`.
fn magnitude_floor(f0: f64) -> f64 {
    1e-4 * f0.abs().max(1.0)
}

fn eval<F>(f: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Var,
{
    let mut g = Graph::new();
    let out = f(&mut g, store);
    let v = g.scalar(out);
    if !v.is_finite() {
        return Err(NumError::NonFinite("function value during gradient check".into()));
    }
    Ok(v)
}

/// Tape gradient of `f` with respect to every parameter in `store`.
pub fn tape_gradients<F>(f: &F, store: &ParamStore) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Graph, &ParamStore) -> Var,
{
    let mut g = Graph::new();
    let out = f(&mut g, store);
    let v = g.scalar(out);
    if !v.is_finite() {
        return Err(NumError::NonFinite("function value during gradient check".into()));
    }
    Ok((v, g.backward(out).param_grads(store)))
}

/// Compares `analytic` (one tensor per parameter) against central differences of `f`.
pub fn compare_gradients<F>(
    f: &F,
    store: &ParamStore,
    analytic: &[Tensor],
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Var,
{
    let f0 = eval(f, store)?;
    let floor = magnitude_floor(f0);
    let mut work = store.clone();
    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut checked = 0;
    for id in store.ids() {
        for k in 0..store.get(id).len() {
            let x = store.get(id).data()[k];
            let h = fd_step(x);
            work.get_mut(id).data_mut()[k] = x + h;
            let fp = eval(f, &work)?;
            work.get_mut(id).data_mut()[k] = x - h;
            let fm = eval(f, &work)?;
            work.get_mut(id).data_mut()[k] = x;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[id.index()].data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            checked += 1;
            if worst.is_none() || rel > max_rel {
                max_rel = rel;
                worst = Some((store.name(id).to_string(), k));
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        worst,
        checked,
        tol,
        passed: max_rel <= tol,
    })
}

/// Checks tape gradients of `f` against finite differences over all of `store`.
pub fn grad_check_params<F>(f: F, store: &ParamStore, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Var,
{
    let (_, analytic) = tape_gradients(&f, store)?;
    compare_gradients(&f, store, &analytic, tol)
}

/// Convenience form over plain input tensors.
pub fn grad_check<F>(f: F, inputs: &[Tensor], tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("x{i}"), t.clone()))
        .collect();
    grad_check_params(
        |g, s| {
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
            f(g, &vars)
        },
        &store,
        tol,
    )
}
