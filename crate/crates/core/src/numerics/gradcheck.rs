//! Central finite-difference gradient checking.

use super::graph::{Graph, NodeId};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    /// Largest relative error over checked elements.
    pub max_rel_error: f64,
    /// Elements whose gradient magnitude exceeded the threshold.
    pub checked: usize,
    /// `(parameter, flat index, analytic, numeric)` of the worst element.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compares tape gradients of the scalar built by `build` against central
/// differences with step `h`, for every element of every parameter.
/// Elements where both gradients are at most `threshold` in magnitude are skipped.
pub fn check_gradients<F>(store: &ParamStore, h: f64, threshold: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(Graph, NodeId)>,
{
    let (graph, loss) = build(store)?;
    let grads = graph.backward(loss)?;
    let mut report = GradCheckReport::default();
    let mut probe = store.clone();

    for (id, name, value) in store.iter() {
        let analytic = grads.get(id).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; value.numel()]);
        for i in 0..value.numel() {
            let mut eval_at = |delta: f64| -> Result<f64> {
                let mut data = value.data().to_vec();
                data[i] += delta;
                probe.set(id, Tensor::new(value.shape().to_vec(), data, value.precision())?)?;
                let (g, l) = build(&probe)?;
                Ok(g.value(l).data()[0])
            };
            let plus = eval_at(h)?;
            let minus = eval_at(-h)?;
            probe.set(id, value.clone())?;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i];
            let scale = a.abs().max(numeric.abs());
            if scale <= threshold {
                continue;
            }
            report.checked += 1;
            let rel = (a - numeric).abs() / scale;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.to_string(), i, a, numeric));
            }
        }
    }
    Ok(report)
}
