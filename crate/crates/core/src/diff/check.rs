//! Central finite differences against the tape's analytic gradients.

use super::{DiffError, Graph, NodeId, ParamStore};

/// Worst relative error found for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub id: String,
    pub max_rel_error: f64,
    /// Per-entry relative errors, row-major.
    pub entries: Vec<f64>,
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval<F>(build: &F, store: &ParamStore) -> Result<f64, DiffError>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId, DiffError>,
{
    let mut graph = Graph::new();
    let loss = build(&mut graph, store)?;
    graph.value(loss).item()
}

/// Compares analytic gradients with central differences using step
/// `h_scale * max(1, |v|)` per entry. Only the parameters named in `ids` are
/// perturbed. Gradients in `store` are reset first and left holding the
/// analytic values.
pub fn finite_difference_check<F>(
    build: F,
    store: &mut ParamStore,
    ids: &[&str],
    h_scale: f64,
) -> Result<Vec<GradCheck>, DiffError>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId, DiffError>,
{
    let first = eval(&build, store)?;
    let second = eval(&build, store)?;
    if first.to_bits() != second.to_bits() {
        return Err(DiffError::NonDeterministic { first, second });
    }

    store.zero_grad();
    let mut graph = Graph::new();
    let loss = build(&mut graph, store)?;
    graph.backward(loss, store)?;

    let mut report = Vec::with_capacity(ids.len());
    for &id in ids {
        let index = store
            .index_of(id)
            .ok_or_else(|| DiffError::UnknownParameter(id.to_string()))?;
        let n = store.get_index(index).value.len();
        let mut entries = Vec::with_capacity(n);
        for k in 0..n {
            let original = store.get_index(index).value.data()[k];
            let h = h_scale * original.abs().max(1.0);
            store.get_index_mut(index).value.data_mut()[k] = original + h;
            let plus = eval(&build, store)?;
            store.get_index_mut(index).value.data_mut()[k] = original - h;
            let minus = eval(&build, store)?;
            store.get_index_mut(index).value.data_mut()[k] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = store.get_index(index).grad.data()[k];
            entries.push(relative_error(analytic, numeric));
        }
        let max_rel_error = entries.iter().copied().fold(0.0, f64::max);
        report.push(GradCheck {
            id: id.to_string(),
            max_rel_error,
            entries,
        });
    }
    Ok(report)
}
