use super::tape::{Tape, Var};
use super::tensor::ParamStore;
use crate::error::{Error, Result};

/// Denominator floor for [`relative_error`]; gradients smaller than this are
/// compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares the tape gradient of `loss_fn` with central differences
/// `(f(x+eps) - f(x-eps)) / (2 eps)` on every coordinate of every parameter
/// that requires a gradient. Returns the worst relative error.
///
/// Parameter values are restored before returning; gradients are cleared.
pub fn grad_check<F>(store: &mut ParamStore, eps: f64, mut loss_fn: F) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store)?;
    if !tape.scalar(loss).is_finite() {
        return Err(Error::NonFinite("grad_check loss"));
    }
    tape.backward(loss, store)?;
    drop(tape);

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let v = loss_fn(&mut tape, store)?;
        let f = tape.scalar(v);
        if f.is_finite() {
            Ok(f)
        } else {
            Err(Error::NonFinite("grad_check perturbed loss"))
        }
    };

    let mut worst = 0.0f64;
    for id in store.trainable_ids() {
        let analytic = match store.get(id).grad() {
            Some(g) => g.to_vec(),
            None => alloc::vec![0.0; store.get(id).len()],
        };
        for (j, &a) in analytic.iter().enumerate() {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + eps;
            let plus = eval(store);
            store.get_mut(id).data_mut()[j] = orig - eps;
            let minus = eval(store);
            store.get_mut(id).data_mut()[j] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    store.zero_grad();
    Ok(worst)
}
