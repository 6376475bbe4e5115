//! Central finite-difference oracle for analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParameterStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |analytic|)` over checked coordinates.
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub coordinates: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates sampled per parameter tensor; smaller tensors are checked fully.
    pub coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            coords_per_param: 4,
            seed: 0,
        }
    }
}

/// Analytic gradients of `f` with respect to `ids`, plus the stop-gradient
/// values recorded during that pass.
pub fn analytic_gradients<T, F>(
    store: &mut ParameterStore<T>,
    ids: &[ParamId],
    f: &mut F,
) -> Result<(T, Vec<Tensor<T>>, Vec<Tensor<T>>)>
where
    T: Scalar,
    F: FnMut(&ParameterStore<T>, &mut Graph<T>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(store, &mut g)?;
    let value = g.scalar(loss);
    store.zero_grads();
    g.backward(loss, store)?;
    let grads = ids.iter().map(|&id| store.grad(id).clone()).collect();
    store.zero_grads();
    Ok((value, grads, g.take_detached()))
}

/// Compares `analytic` (one tensor per id) against central differences of `f`.
pub fn grad_check_against<T, F>(
    store: &mut ParameterStore<T>,
    ids: &[ParamId],
    analytic: &[Tensor<T>],
    detached: &[Tensor<T>],
    mut f: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&ParameterStore<T>, &mut Graph<T>) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let h = T::lit(opts.step);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: None,
        worst_index: 0,
        coordinates: 0,
    };
    let mut eval = |store: &ParameterStore<T>| -> Result<T> {
        let mut g = Graph::with_replay(detached.to_vec());
        let loss = f(store, &mut g)?;
        let v = g.scalar(loss);
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        Ok(v)
    };
    for (&id, grad) in ids.iter().zip(analytic) {
        let n = store.value(id).len();
        let coords: Vec<usize> = if n <= opts.coords_per_param {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        for i in coords {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + h;
            let fp = eval(store);
            store.value_mut(id).data_mut()[i] = orig - h;
            let fm = eval(store);
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = ((fp? - fm?) / (h + h)).as_f64();
            let a = grad.data()[i].as_f64();
            if !a.is_finite() {
                return Err(Error::NonFinite(format!(
                    "analytic gradient of {}",
                    store.name(id)
                )));
            }
            let err = (a - numeric).abs() / a.abs().max(1.0);
            report.coordinates += 1;
            if report.worst_param.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = Some(store.name(id).to_string());
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

/// Finite-difference check of the reverse pass of `f` over `ids`.
pub fn grad_check<T, F>(
    store: &mut ParameterStore<T>,
    ids: &[ParamId],
    mut f: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&ParameterStore<T>, &mut Graph<T>) -> Result<Var>,
{
    let (_, analytic, detached) = analytic_gradients(store, ids, &mut f)?;
    grad_check_against(store, ids, &analytic, &detached, f, opts)
}
