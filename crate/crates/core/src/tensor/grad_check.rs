//! Finite-difference verification of reverse-mode gradients.

use super::param::{ParamBind, ParamStore};
use super::{Precision, Tape, Tensor};
use crate::error::{Error, Result};

/// Compare reverse-mode gradients of a scalar loss against central finite
/// differences over every parameter coordinate, returning the maximum
/// relative error.
///
/// `f` rebuilds the loss from scratch on the given tape, so it is called
/// `1 + 2·numel` times. Requires a 64-bit store and `eps` in `[1e-7, 1e-3]`;
/// relative error uses `|a - b| / max(1, |a|, |b|)`.
pub fn grad_check<F>(store: &mut ParamStore, eps: f64, f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &ParamBind<'t>) -> Result<Tensor<'t>>,
{
    if store.precision() != Precision::F64 {
        return Err(Error::Numeric(
            "grad_check requires a 64-bit parameter store".into(),
        ));
    }
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Domain(format!(
            "grad_check eps {eps} outside [1e-7, 1e-3]"
        )));
    }

    let eval = |store: &ParamStore| -> Result<f64> {
        let tape = Tape::new(Precision::F64);
        let bind = tape.bind(store);
        let loss = f(&tape, &bind)?;
        let v = loss.item();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {v}")));
        }
        Ok(v)
    };

    // Analytic gradients.
    store.zero_grads();
    {
        let tape = Tape::new(Precision::F64);
        let bind = tape.bind(store);
        let loss = f(&tape, &bind)?;
        if !loss.item().is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {}", loss.item())));
        }
        tape.backward(loss)?;
        tape.param_grads_into(store);
    }
    let analytic: Vec<Vec<f64>> = (0..store.len())
        .map(|pid| store.param(pid).grad.clone())
        .collect();

    let mut max_rel = 0.0f64;
    for pid in 0..store.len() {
        for i in 0..store.param(pid).numel() {
            let orig = store.param(pid).data[i];
            store.param_mut(pid).data[i] = orig + eps;
            let up = eval(store)?;
            store.param_mut(pid).data[i] = orig - eps;
            let down = eval(store)?;
            store.param_mut(pid).data[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            let an = analytic[pid][i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
