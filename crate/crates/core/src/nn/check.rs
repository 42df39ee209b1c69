//! Finite-difference probes for checking analytic gradients.

use crate::nn::params::{ParamId, ParamStore};

/// Central difference `(f(p + h) - f(p - h)) / 2h` for one scalar entry of a parameter.
pub fn central_difference(
    store: &mut ParamStore,
    id: ParamId,
    index: usize,
    h: f64,
    mut f: impl FnMut(&ParamStore) -> f64,
) -> f64 {
    let orig = store.get(id).data()[index];
    store.get_mut(id).data_mut()[index] = orig + h;
    let plus = f(store);
    store.get_mut(id).data_mut()[index] = orig - h;
    let minus = f(store);
    store.get_mut(id).data_mut()[index] = orig;
    (plus - minus) / (2.0 * h)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
