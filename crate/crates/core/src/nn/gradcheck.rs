use super::params::{Gradients, ParamGroup, ParamStore};
use crate::error::{Error, Result};

/// Largest relative gap between analytic gradients and central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    pub worst_entry: String,
    pub entries_checked: usize,
}

/// Relative error with a floor on the denominator, so entries whose true
/// gradient is ~0 are judged on absolute error instead.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Denominator floor for a loss of magnitude `loss`. Rounding in the loss
/// itself grows with its size and limits what central differences can
/// resolve, so the floor scales with it.
pub fn gradient_floor(loss: f64) -> f64 {
    1e-6 * loss.abs().max(1.0)
}

/// Compares `loss_fn`'s analytic gradient with central finite differences
/// over every entry of the parameters in `groups`. `loss_fn` must be a pure
/// function of the parameters, i.e. all sampling noise frozen.
pub fn gradient_check<F>(loss_fn: F, store: &ParamStore, groups: &[ParamGroup], epsilon: f64) -> Result<GradientCheck>
where
    F: Fn(&ParamStore) -> Result<(f64, Gradients)>,
{
    let (base, grads) = loss_fn(store)?;
    let (again, _) = loss_fn(store)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Contract(format!("loss is not deterministic under frozen noise ({base} vs {again})")));
    }
    let floor = gradient_floor(base);
    let mut work = store.clone();
    let mut report = GradientCheck {
        max_relative_error: 0.0,
        worst_entry: String::new(),
        entries_checked: 0,
    };
    for id in store.ids_in(groups) {
        for idx in 0..store.value(id).len() {
            let orig = store.value(id).as_slice().expect("standard layout")[idx];
            let mut eval_at = |x: f64| -> Result<f64> {
                work.value_mut(id).as_slice_mut().expect("standard layout")[idx] = x;
                Ok(loss_fn(&work)?.0)
            };
            let up = eval_at(orig + epsilon)?;
            let down = eval_at(orig - epsilon)?;
            work.value_mut(id).as_slice_mut().expect("standard layout")[idx] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let analytic = grads.get(id).map(|g| g.as_slice().expect("standard layout")[idx]).unwrap_or(0.0);
            let err = relative_error(analytic, numeric, floor);
            report.entries_checked += 1;
            if err > report.max_relative_error || report.worst_entry.is_empty() {
                report.max_relative_error = err;
                report.worst_entry = format!("{}[{idx}] analytic={analytic:e} numeric={numeric:e}", store.name(id));
            }
        }
    }
    Ok(report)
}
