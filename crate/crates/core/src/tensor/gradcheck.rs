//! Finite-difference verification of backward passes.

use super::{Graph, Tensor, TensorError, TensorId};

/// Worst coordinate found by [`check_gradients`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    pub fn ok(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Compare the analytic gradient of `f` at `x` against central
/// differences with step `h`. `f` must build a scalar loss from its
/// input leaf and be deterministic across calls. The relative error of
/// coordinate i is |a - n| / max(1, |a|, |n|).
pub fn check_gradients<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph<f64>, TensorId) -> Result<TensorId, TensorError>,
{
    let eval = |data: &[f64]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let t = Tensor::new(x.shape().to_vec(), data.to_vec())?;
        let id = g.constant(t);
        let loss = f(&mut g, id)?;
        g.value(loss).scalar_value().ok_or(TensorError::NotScalar {
            shape: g.value(loss).shape().to_vec(),
        })
    };

    let mut g = Graph::new();
    let mut leaf = x.clone();
    leaf.requires_grad = true;
    leaf.grad = None;
    let id = g.leaf(leaf);
    let loss = f(&mut g, id)?;
    g.backward(loss)?;
    let analytic = g.grad(id).expect("input gradient").to_vec();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: 0.0,
    };
    let mut probe = x.data().to_vec();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = eval(&probe)?;
        probe[i] = orig - h;
        let down = eval(&probe)?;
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}
