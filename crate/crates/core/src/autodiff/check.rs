use crate::error::{Error, Result};

use super::graph::{Graph, Var};

/// Outcome of a central-difference gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates skipped because a perturbation crossed a kink (max-aggregation
    /// winner change or rectifier sign flip).
    pub skipped_kinks: usize,
}

/// Compares `backward` against central differences for every coordinate of
/// every differentiable leaf, or an evenly strided subset of at most
/// `max_per_leaf` coordinates per leaf when given.
pub fn finite_difference_check(
    graph: &Graph,
    root: Var,
    epsilon: f64,
    max_per_leaf: Option<usize>,
) -> Result<GradCheck> {
    if !(1e-7..=1e-4).contains(&epsilon) {
        return Err(Error::invalid(format!("epsilon {epsilon} outside [1e-7, 1e-4]")));
    }
    let grads = graph.backward(root)?;
    let mut g = graph.clone();
    let base_sig = g.kink_signature();
    let mut report = GradCheck { max_rel_error: 0.0, checked: 0, skipped_kinks: 0 };
    for leaf in graph.grad_leaves() {
        let n = graph.value(leaf).len();
        let stride = match max_per_leaf {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let analytic = grads.get(leaf);
        for k in (0..n).step_by(stride) {
            let x0 = graph.value(leaf).data()[k];
            let mut f = [0.0; 4];
            let mut crossed = false;
            for (slot, step) in f.iter_mut().zip([2.0, 1.0, -1.0, -2.0]) {
                g.set_leaf_value(leaf, k, x0 + step * epsilon);
                g.recompute()?;
                *slot = g.value(root).data()[0];
                crossed |= g.kink_signature() != base_sig;
            }
            g.set_leaf_value(leaf, k, x0);
            if crossed {
                report.skipped_kinks += 1;
                continue;
            }
            // fourth-order central stencil
            let numeric = (8.0 * (f[1] - f[2]) - (f[0] - f[3])) / (12.0 * epsilon);
            let a = analytic.map_or(0.0, |t| t.data()[k]);
            let denom = a.abs() + numeric.abs();
            if denom > 1e-10 {
                report.max_rel_error = report.max_rel_error.max((a - numeric).abs() / denom);
                report.checked += 1;
            }
        }
    }
    g.recompute()?;
    Ok(report)
}
