//! Finite-difference gradient checking.
//!
//! The independent oracle used throughout the test suites: analytic
//! gradients from [`crate::autodiff::Graph::backward`] are compared
//! against central differences computed purely from forward evaluations.

use crate::autodiff::{Graph, NodeId};
use crate::error::Result;
use crate::tensor::Tensor;

/// A constructed loss graph: the graph, its scalar loss node and the
/// leaf node of each checked parameter, in parameter order.
pub struct Built {
    pub graph: Graph,
    pub loss: NodeId,
    pub params: Vec<NodeId>,
}

/// Outcome of a gradient check.
#[derive(Debug)]
pub struct Report {
    /// Largest relative error across all parameter elements.
    pub max_rel_error: f64,
    /// (parameter index, element index) of the worst element.
    pub worst: (usize, usize),
    /// Elements checked in total.
    pub elements: usize,
}

/// Relative error with an absolute floor, so elements whose true gradient
/// is ~0 are judged against the finite-difference noise floor instead of
/// blowing up the ratio.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Check d loss / d params for a loss builder `f`.
///
/// `f` must construct a fresh graph from the given parameter tensors.
/// Analytic gradients come from one backward pass; numeric gradients from
/// central differences `(f(x+eps) - f(x-eps)) / 2 eps` per element.
pub fn check<F>(f: F, params: &[Tensor], eps: f64) -> Result<Report>
where
    F: Fn(&[Tensor]) -> Result<Built>,
{
    let mut built = f(params)?;
    built.graph.backward(built.loss)?;
    let analytic: Vec<Vec<f64>> = built
        .params
        .iter()
        .map(|&id| built.graph.grad(id).map(|g| g.to_vec()).unwrap_or_default())
        .collect();

    let mut report = Report {
        max_rel_error: 0.0,
        worst: (0, 0),
        elements: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for ei in 0..p.numel() {
            let orig = p.data()[ei];
            work[pi].data_mut()[ei] = orig + eps;
            let plus = f(&work).map(|b| b.graph.scalar(b.loss))?;
            work[pi].data_mut()[ei] = orig - eps;
            let minus = f(&work).map(|b| b.graph.scalar(b.loss))?;
            work[pi].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic
                .get(pi)
                .and_then(|g| g.get(ei).copied())
                .unwrap_or(0.0);
            let err = rel_error(a, numeric);
            report.elements += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (pi, ei);
            }
        }
    }
    Ok(report)
}
