//! Central finite-difference gradient checks against the tape.

use super::{Graph, ParameterStore, Var};
use crate::error::Result;

/// Denominator floor for the relative error, so entries whose true gradient
/// is ~0 are judged on absolute error instead.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares analytic gradients of every trainable parameter against
/// `(f(p + h) - f(p - h)) / 2h`.
pub fn check_gradients<F>(store: &mut ParameterStore, forward: F, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParameterStore) -> Result<Var>,
{
    check_gradients_sampled(store, forward, step, usize::MAX)
}

/// Like [`check_gradients`] but probes at most `per_param` evenly spaced
/// entries of each parameter tensor.
pub fn check_gradients_sampled<F>(
    store: &mut ParameterStore,
    forward: F,
    step: f64,
    per_param: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParameterStore) -> Result<Var>,
{
    store.zero_grad();
    let mut g = Graph::new();
    let loss = forward(&mut g, store)?;
    g.backward(loss, store)?;

    let names: Vec<String> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n.to_string())
        .collect();
    let mut report = GradCheckReport::default();
    for name in names {
        let analytic = store.get(&name)?.grad.clone();
        let n = analytic.len();
        let stride = (n / per_param.min(n)).max(1);
        for idx in (0..n).step_by(stride).take(per_param) {
            let original = store.get(&name)?.value.data()[idx];
            let eval = |store: &mut ParameterStore, x: f64| -> Result<f64> {
                let mut t = store.get(&name)?.value.clone();
                t.data_mut()[idx] = x;
                store.set_value(&name, t)?;
                let mut g = Graph::new();
                let l = forward(&mut g, store)?;
                Ok(g.value(l).item())
            };
            let plus = eval(store, original + step)?;
            let minus = eval(store, original - step)?;
            eval(store, original)?;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    store.zero_grad();
    Ok(report)
}
