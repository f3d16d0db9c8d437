//! Dense tensors and a tape-based reverse-mode differentiation engine.

mod dense;
pub mod gradcheck;
mod graph;
pub mod kernels;


pub use dense::Tensor;
pub use gradcheck::{grad_check, grad_check_params, grad_check_sampled, GradCheckReport};
pub use graph::{Graph, Var, NORM_EPS};
pub use kernels::PoolKind;

use crate::error::{HctError, Result};

/// Cosine similarity of two vectors, recorded on the graph.
pub fn cosine_sim(g: &mut Graph, x: Var, y: Var) -> Result<Var> {
    if g.shape(x) != g.shape(y) || g.shape(x).len() != 1 {
        return Err(HctError::Dimension(format!("cosine similarity of {:?} and {:?}", g.shape(x), g.shape(y))));
    }
    for v in [x, y] {
        let norm = g.value(v).iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm <= NORM_EPS {
            return Err(HctError::Degenerate("cosine similarity of a zero vector".into()));
        }
    }
    let xn = g.l2_normalize(x);
    let yn = g.l2_normalize(y);
    let prod = g.mul(xn, yn)?;
    Ok(g.sum(prod))
}
