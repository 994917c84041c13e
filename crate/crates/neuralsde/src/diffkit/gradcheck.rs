//! Finite-difference verification of reverse-mode gradients.

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of a gradient check: per-coordinate analytic and central-difference
/// values plus the worst relative error `|a - fd| / (|a| + 1e-12)`.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_err: f64,
    pub worst_index: usize,
}

/// Checks the gradient of the scalar function built by `f` at `point`.
///
/// `f` receives a fresh graph and the bound input node and must return the scalar
/// root. The analytic gradient comes from one reverse sweep; each coordinate is then
/// probed with central differences of step `h`.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    if h <= 0.0 {
        return Err(Error::NonPositive {
            what: "finite-difference step".to_string(),
            value: h,
        });
    }
    let mut traced = point.clone();
    traced.set_requires_grad(true);
    let mut graph = Graph::new();
    let input = graph.leaf(&traced);
    let root = f(&mut graph, input)?;
    graph.backward(root)?;
    let analytic: Vec<f64> = graph
        .grad(input)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; point.len()]);

    let eval = |data: &[f64]| -> Result<f64> {
        let probe = Tensor::from_vec(point.shape(), data.to_vec())?;
        let mut g = Graph::new();
        let id = g.leaf(&probe);
        let r = f(&mut g, id)?;
        Ok(g.value_scalar(r))
    };

    let mut numeric = vec![0.0; point.len()];
    let mut data = point.data().to_vec();
    for i in 0..data.len() {
        let orig = data[i];
        data[i] = orig + h;
        let up = eval(&data)?;
        data[i] = orig - h;
        let down = eval(&data)?;
        data[i] = orig;
        let fd = (up - down) / (2.0 * h);
        if !fd.is_finite() {
            return Err(Error::NotFinite {
                context: format!("finite difference at coordinate {i}"),
            });
        }
        numeric[i] = fd;
    }

    let mut max_rel_err = 0.0;
    let mut worst_index = 0;
    for i in 0..analytic.len() {
        if !analytic[i].is_finite() {
            return Err(Error::NotFinite {
                context: format!("analytic gradient at coordinate {i}"),
            });
        }
        let rel = (analytic[i] - numeric[i]).abs() / (analytic[i].abs() + 1e-12);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        analytic,
        numeric,
        max_rel_err,
        worst_index,
    })
}
