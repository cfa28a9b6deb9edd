use std::collections::BTreeMap;

use super::{Graph, ParamStore, Scalar, Var};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_parameter: String,
    /// Largest relative error seen in each trainable parameter.
    pub per_parameter_errors: BTreeMap<String, f64>,
}

/// Compares analytic gradients against central differences.
///
/// `loss_fn` builds the loss on a fresh graph from the current store values
/// and must be deterministic. Every element of every trainable parameter is
/// perturbed by `±eps`; the relative error denominator is
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<T, F>(store: &mut ParamStore<T>, eps: f64, mut loss_fn: F) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("finite difference step must be positive, got {eps}")));
    }
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    check_finite(&g, loss)?;
    let grads = g.backward(loss)?;
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            let n = store.get(id).value().len();
            grads
                .param(id)
                .map(|t| t.data().iter().map(|v| v.as_f64()).collect())
                .unwrap_or_else(|| vec![0.0; n])
        })
        .collect();

    let mut eval = |store: &ParamStore<T>| -> Result<f64> {
        let mut g = Graph::new();
        let loss = loss_fn(&mut g, store)?;
        check_finite(&g, loss)
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_parameter: String::new(),
        per_parameter_errors: BTreeMap::new(),
    };
    for (&id, an) in ids.iter().zip(&analytic) {
        let mut worst = 0.0f64;
        for (k, &a) in an.iter().enumerate() {
            let orig = store.get(id).value().data()[k];
            store.get_mut(id).value_mut()[k] = T::of(orig.as_f64() + eps);
            let plus = eval(store)?;
            store.get_mut(id).value_mut()[k] = T::of(orig.as_f64() - eps);
            let minus = eval(store)?;
            store.get_mut(id).value_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        let name = store.get(id).name.clone();
        if worst > report.max_relative_error || report.worst_parameter.is_empty() {
            report.max_relative_error = report.max_relative_error.max(worst);
            report.worst_parameter = name.clone();
        }
        report.per_parameter_errors.insert(name, worst);
    }
    Ok(report)
}

fn check_finite<T: Scalar>(g: &Graph<T>, loss: Var) -> Result<f64> {
    let v = g.value(loss).data().first().copied().ok_or(Error::Empty("loss"))?.as_f64();
    if !v.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    Ok(v)
}
