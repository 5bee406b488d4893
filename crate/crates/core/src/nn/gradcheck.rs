//! Central-difference verification of analytic gradients.

use rand::seq::index::sample;

use super::{uniform, Gradients, Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Lower bound on the denominator of the relative error.
    pub floor: f64,
    /// Check at most this many scalars per tensor (random subsample).
    pub max_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            floor: 1e-6,
            max_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
}

/// Reduce any tensor to a scalar with fixed random weights, so every output
/// element contributes a distinct gradient.
pub fn project_to_scalar(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut r = rng::stream(&[seed, 0x9c]);
    let w = uniform(&mut r, g.shape(y), 1.0);
    let wv = g.constant(w);
    let p = g.mul(y, wv)?;
    Ok(g.sum(p))
}

fn eval<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let out = f(&mut g)?;
    let t = g.value(out);
    if t.len() != 1 {
        return Err(Error::Shape(format!(
            "gradient check needs a scalar objective, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

/// Analytic gradients of a scalar objective.
pub fn analytic_gradients<F>(store: &ParamStore, f: &F) -> Result<Gradients>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let out = f(&mut g)?;
    g.check_finite()?;
    g.backward(out, None)
}

/// Compare `analytic` against central differences of `f` for every
/// trainable parameter.
pub fn compare_gradients<F>(
    store: &ParamStore,
    f: F,
    analytic: &Gradients,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let base = eval(store, &f)?;
    let again = eval(store, &f)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Training(
            "forward is not deterministic; disable dropout and patchout before checking".into(),
        ));
    }
    let mut work = store.clone();
    let mut rng = rng::stream(&[opts.seed, 0x6c]);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: 0,
    };
    for i in 0..store.len() {
        let (name, p) = store.get_index(i).unwrap();
        if !p.trainable {
            continue;
        }
        let n = p.value.len();
        let indices: Vec<usize> = match opts.max_per_tensor {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let grad = analytic.get(i);
        for j in indices {
            let orig = p.value.data()[j];
            work.get_index_mut(i).unwrap().1.value.data_mut()[j] = orig + opts.eps;
            let plus = eval(&work, &f)?;
            work.get_index_mut(i).unwrap().1.value.data_mut()[j] = orig - opts.eps;
            let minus = eval(&work, &f)?;
            work.get_index_mut(i).unwrap().1.value.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = grad.map_or(0.0, |t| t.data()[j]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
                report.worst_param = name.to_string();
                report.worst_index = j;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Worst relative error between backpropagated and finite-difference
/// gradients of the scalar returned by `f`.
pub fn grad_check<F>(store: &ParamStore, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let analytic = analytic_gradients(store, &f)?;
    compare_gradients(store, f, &analytic, opts)
}
