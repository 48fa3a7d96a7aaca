//! Central finite-difference gradient checks.

use crate::error::Result;
use crate::graph::Var;
use crate::layers::{Ctx, Mode};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Finite-difference step used by the gradient checks.
pub const FD_STEP: f64 = 1e-5;

/// Norm-wise relative error `‖a − n‖ / max(‖a‖ + ‖n‖, 1e-6)`.
///
/// The floor keeps exactly-zero gradients (a bias feeding a batch norm)
/// from turning finite-difference round-off into a unit error.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / (na + nn).max(1e-6)
}

fn loss_value(params: &ParamStore, mode: Mode, seed: u64, build: &dyn Fn(&mut Ctx<'_>) -> Result<Var>) -> Result<f64> {
    let mut cx = Ctx::new(params, mode, seed);
    let l = build(&mut cx)?;
    Ok(cx.graph.value(l)[0])
}

/// Compares backprop gradients of every parameter in `ids` with central
/// differences and returns the relative error per parameter.
///
/// `build` must be deterministic for a fixed context seed.
pub fn check_params(
    params: &mut ParamStore,
    ids: &[ParamId],
    mode: Mode,
    build: &dyn Fn(&mut Ctx<'_>) -> Result<Var>,
) -> Result<Vec<(String, f64)>> {
    const SEED: u64 = 0x5eed;
    params.zero_grads();
    let analytic: Vec<Vec<f64>> = {
        let mut cx = Ctx::new(params, mode, SEED);
        let loss = build(&mut cx)?;
        let (graph, _) = cx.finish();
        let grads = graph.backward(loss)?;
        ids.iter()
            .map(|&id| {
                graph
                    .param_nodes()
                    .find(|(p, _)| *p == id)
                    .and_then(|(_, v)| grads.wrt(v).map(<[f64]>::to_vec))
                    .unwrap_or_else(|| vec![0.0; params.get(id).numel()])
            })
            .collect()
    };
    let mut out = Vec::with_capacity(ids.len());
    for (&id, a) in ids.iter().zip(&analytic) {
        let n = params.get(id).numel();
        let mut numeric = vec![0.0; n];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = orig + FD_STEP;
            let fp = loss_value(params, mode, SEED, build)?;
            params.get_mut(id).data_mut()[i] = orig - FD_STEP;
            let fm = loss_value(params, mode, SEED, build)?;
            params.get_mut(id).data_mut()[i] = orig;
            *slot = (fp - fm) / (2.0 * FD_STEP);
        }
        out.push((params.name(id).to_string(), relative_error(a, &numeric)));
    }
    Ok(out)
}

/// Same check for a differentiable input `x`.
pub fn check_input(
    params: &ParamStore,
    x: &Tensor,
    mode: Mode,
    build: &dyn Fn(&mut Ctx<'_>, Var) -> Result<Var>,
) -> Result<f64> {
    const SEED: u64 = 0x5eed;
    let analytic = {
        let mut cx = Ctx::new(params, mode, SEED);
        let xv = cx.leaf(x);
        let loss = build(&mut cx, xv)?;
        let grads = cx.graph.backward(loss)?;
        grads
            .wrt(xv)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; x.numel()])
    };
    let eval = |t: &Tensor| -> Result<f64> {
        let mut cx = Ctx::new(params, mode, SEED);
        let xv = cx.leaf(t);
        let l = build(&mut cx, xv)?;
        Ok(cx.graph.value(l)[0])
    };
    let mut numeric = vec![0.0; x.numel()];
    let mut probe = x.clone();
    for (i, slot) in numeric.iter_mut().enumerate() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - FD_STEP;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        *slot = (fp - fm) / (2.0 * FD_STEP);
    }
    Ok(relative_error(&analytic, &numeric))
}
