//! Finite-difference gradient checking with the fourth-order central stencil
//! `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`, whose truncation error
//! is `O(h⁴)`. The higher order lets `h` be large enough that round-off in
//! the loss does not swamp small gradients.

use rand::seq::index::sample;

use super::{Graph, Tensor, Var};
use crate::error::{HctError, Result};
use crate::params::ParamStore;
use crate::rng;

/// Outcome of a gradient check: the worst coordinate found.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Index of the input (or parameter) holding the worst coordinate.
    pub worst_input: usize,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

impl GradCheckReport {
    fn empty() -> Self {
        Self { max_rel_error: 0.0, worst_input: 0, worst_coord: 0, analytic: 0.0, numeric: 0.0, coords_checked: 0 }
    }

    fn record(&mut self, input: usize, coord: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.coords_checked += 1;
        if self.coords_checked == 1 || err > self.max_rel_error {
            self.max_rel_error = err;
            self.worst_input = input;
            self.worst_coord = coord;
            self.analytic = analytic;
            self.numeric = numeric;
        }
    }

    /// Combines two reports, keeping the worse one.
    pub fn merge(mut self, other: GradCheckReport) -> Self {
        let checked = self.coords_checked + other.coords_checked;
        if other.max_rel_error > self.max_rel_error {
            self = other;
        }
        self.coords_checked = checked;
        self
    }
}

/// `|analytic - numeric| / max(1e-8, |numeric|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1e-8)
}

fn coords(numel: usize, max: Option<usize>, seed: u64, stream: u64) -> Vec<usize> {
    match max {
        Some(k) if k < numel => {
            let mut r = rng::stream(seed, stream);
            let mut idx = sample(&mut r, numel, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..numel).collect(),
    }
}

/// Derivative of `f` at `x` by the fourth-order central stencil.
fn central_difference(mut f: impl FnMut(f64) -> Result<f64>, x: f64, h: f64) -> Result<f64> {
    let (p2, p1, m1, m2) = (f(x + 2.0 * h)?, f(x + h)?, f(x - h)?, f(x - 2.0 * h)?);
    Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h))
}

fn eval_scalar(graph: &Graph, out: Var) -> Result<f64> {
    if graph.value(out).len() != 1 {
        return Err(HctError::Usage(format!(
            "gradient check needs a scalar function, got shape {:?}",
            graph.shape(out)
        )));
    }
    Ok(graph.scalar(out))
}

/// Checks `f` at `inputs`, every coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_sampled(f, inputs, eps, None, 0)
}

/// Like [`grad_check`] but checks at most `max_coords` randomly chosen
/// coordinates per input.
pub fn grad_check_sampled<F>(
    f: F,
    inputs: &[Tensor],
    eps: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone().with_requires_grad(true))).collect();
    let out = f(&mut g, &vars)?;
    eval_scalar(&g, out)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport::empty();
    let forward = |work: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = work.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        eval_scalar(&g, out)
    };
    for i in 0..inputs.len() {
        for c in coords(inputs[i].numel(), max_coords, seed, i as u64) {
            let orig = work[i].data()[c];
            let numeric = central_difference(
                |x| {
                    work[i].data_mut()[c] = x;
                    forward(&work)
                },
                orig,
                eps,
            )?;
            work[i].data_mut()[c] = orig;
            report.record(i, c, analytic[i][c], numeric);
        }
    }
    Ok(report)
}

/// Gradient check over the trainable parameters of a store. `f` must bind
/// parameters through [`Graph::param`].
pub fn grad_check_params<F>(
    store: &mut ParamStore,
    f: F,
    eps: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    eval_scalar(&g, out)?;
    g.backward(out)?;
    let bindings: Vec<_> = g.param_bindings().collect();
    let mut report = GradCheckReport::empty();
    for (pid, var) in bindings {
        if store.is_frozen(pid) {
            continue;
        }
        let analytic = g.grad(var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; store.tensor(pid).numel()]);
        for c in coords(analytic.len(), max_coords, seed, pid.index() as u64) {
            let orig = store.tensor(pid).data()[c];
            let numeric = central_difference(
                |x| {
                    store.tensor_mut(pid).data_mut()[c] = x;
                    let mut gx = Graph::new();
                    let out = f(&mut gx, store)?;
                    eval_scalar(&gx, out)
                },
                orig,
                eps,
            )?;
            store.tensor_mut(pid).data_mut()[c] = orig;
            report.record(pid.index(), c, analytic[c], numeric);
        }
    }
    Ok(report)
}
