//! Central finite differences over parameter coordinates.
//!
//! Used by the test suites as the independent oracle for `backward`: the
//! loss closure re-runs a fresh forward pass against the mutated store, so
//! nothing here touches the reverse sweep being checked.

use crate::autodiff::{ParamId, ParamStore};
use crate::scalar::Scalar;

/// Central difference `(f(x+h) - f(x-h)) / 2h` for each picked coordinate.
pub fn central_diff<S: Scalar>(
    store: &mut ParamStore<S>,
    picks: &[(ParamId, usize)],
    step: S,
    mut loss: impl FnMut(&ParamStore<S>) -> S,
) -> Vec<S> {
    let two = S::from_f64_lossy(2.0);
    picks
        .iter()
        .map(|&(pid, idx)| {
            let original = store.get(pid).data()[idx];
            store.get_mut(pid).data_mut()[idx] = original + step;
            let plus = loss(store);
            store.get_mut(pid).data_mut()[idx] = original - step;
            let minus = loss(store);
            store.get_mut(pid).data_mut()[idx] = original;
            (plus - minus) / (two * step)
        })
        .collect()
}

/// Relative error with an absolute floor, for comparing analytic and
/// finite-difference gradients.
pub fn relative_error<S: Scalar>(a: S, b: S) -> S {
    let denom = a.abs().max(b.abs()).max(S::from_f64_lossy(1e-8));
    (a - b).abs() / denom
}

/// Whether an analytic gradient agrees with a central difference at the
/// stated relative tolerance.
///
/// Pairs where both sides sit below `1e-7` are accepted outright: central
/// differences bottom out around `eps * |loss| / step ~ 1e-10`, so such
/// coordinates (e.g. parameters with exactly-zero gradients by softmax shift
/// invariance) carry no signal to compare against.
pub fn grad_close<S: Scalar>(analytic: S, fd: S, rel_tol: S) -> bool {
    let floor = S::from_f64_lossy(1e-7);
    if analytic.abs() < floor && fd.abs() < floor {
        return true;
    }
    relative_error(analytic, fd) < rel_tol
}
