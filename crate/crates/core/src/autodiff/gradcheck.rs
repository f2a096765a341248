//! Central-difference gradient verification in double precision.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::graph::{Graph, Var};
use super::param::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct CheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator so that coordinates with
    /// vanishing gradients are compared absolutely.
    pub floor: f64,
    /// Coordinates sampled per parameter; `None` checks all of them.
    pub coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-4,
            floor: 1e-2,
            coords_per_param: Some(8),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CoordCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub checks: Vec<CoordCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckReport {
    pub fn worst(&self) -> Option<&CoordCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Anything that owns a [`ParamStore`] and can be differentiated through.
pub trait ParamOwner<T> {
    fn store(&self) -> &ParamStore<T>;
    fn store_mut(&mut self) -> &mut ParamStore<T>;
}

impl<T> ParamOwner<T> for ParamStore<T> {
    fn store(&self) -> &ParamStore<T> {
        self
    }

    fn store_mut(&mut self) -> &mut ParamStore<T> {
        self
    }
}

fn evaluate<M, F>(model: &M, f: &mut F) -> Result<f64>
where
    M: ParamOwner<f64>,
    F: FnMut(&mut Graph<f64>, &M) -> Result<Var>,
{
    let mut g = Graph::eval();
    let loss = f(&mut g, model)?;
    g.scalar(loss)
}

/// Analytic gradients of every trainable parameter under `f`.
pub fn analytic_gradients<M, F>(model: &mut M, f: &mut F) -> Result<Vec<(ParamId, Vec<f64>)>>
where
    M: ParamOwner<f64>,
    F: FnMut(&mut Graph<f64>, &M) -> Result<Var>,
{
    model.store_mut().zero_grad();
    let mut g = Graph::eval();
    let loss = f(&mut g, model)?;
    let store = model.store_mut();
    g.backward(loss, store)?;
    let out = store
        .iter()
        .filter(|(_, p)| !p.frozen)
        .map(|(id, p)| {
            let grad = p
                .tensor
                .grad()
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.tensor.len()]);
            (id, grad)
        })
        .collect();
    store.zero_grad();
    Ok(out)
}

/// Compare analytic gradients of `f` with central differences.
pub fn finite_diff_check<M, F>(model: &mut M, mut f: F, opts: CheckOptions) -> Result<CheckReport>
where
    M: ParamOwner<f64>,
    F: FnMut(&mut Graph<f64>, &M) -> Result<Var>,
{
    let analytic = analytic_gradients(model, &mut f)?;
    compare_gradients(model, f, &analytic, opts)
}

/// Compare supplied analytic gradients with central differences of `f`.
pub fn compare_gradients<M, F>(
    model: &mut M,
    mut f: F,
    analytic: &[(ParamId, Vec<f64>)],
    opts: CheckOptions,
) -> Result<CheckReport>
where
    M: ParamOwner<f64>,
    F: FnMut(&mut Graph<f64>, &M) -> Result<Var>,
{
    let first = evaluate(model, &mut f)?;
    let second = evaluate(model, &mut f)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut checks = Vec::new();
    for (id, grad) in analytic {
        let len = grad.len();
        let mut coords: Vec<usize> = match opts.coords_per_param {
            Some(k) if k < len => sample(&mut rng, len, k).into_vec(),
            _ => (0..len).collect(),
        };
        coords.sort_unstable();
        for idx in coords {
            let orig = model.store().get(*id).tensor.data()[idx];
            model.store_mut().get_mut(*id).tensor.data_mut()[idx] = orig + opts.step;
            let plus = evaluate(model, &mut f);
            model.store_mut().get_mut(*id).tensor.data_mut()[idx] = orig - opts.step;
            let minus = evaluate(model, &mut f);
            model.store_mut().get_mut(*id).tensor.data_mut()[idx] = orig;
            let numeric = (plus? - minus?) / (2.0 * opts.step);
            let a = grad[idx];
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            checks.push(CoordCheck {
                param: model.store().get(*id).name.clone(),
                index: idx,
                analytic: a,
                numeric,
                rel_error: (a - numeric).abs() / denom,
            });
        }
    }
    let max_rel_error = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(CheckReport {
        passed: max_rel_error < opts.tolerance,
        max_rel_error,
        tolerance: opts.tolerance,
        checks,
    })
}
