//! Central finite differences against the tape's analytic gradients.

use dmwp_core::autodiff::{AutodiffError, Gradients, ParamStore};

pub const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
pub const FLOOR: f64 = 1e-5;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

pub struct Report {
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst: String,
}

/// Checks every scalar of every parameter (or a strided subset when
/// `stride > 1`) of `store` against `loss`, which must build and return the
/// loss value together with gradients (`with_grad = true`) or only the value.
pub fn check<F>(store: &mut ParamStore, stride: usize, mut loss: F) -> Report
where
    F: FnMut(&ParamStore, bool) -> Result<(f64, Option<Gradients>), AutodiffError>,
{
    let (_, grads) = loss(store, true).expect("forward pass");
    let grads = grads.expect("gradients requested");
    let mut report = Report { max_rel_err: 0.0, checked: 0, worst: String::new() };
    let ids: Vec<_> = store.ids().collect();
    let mut counter = 0usize;
    for id in ids {
        let analytic = grads.dense(id, store);
        for k in 0..analytic.data().len() {
            counter += 1;
            if !counter.is_multiple_of(stride) {
                continue;
            }
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + STEP;
            let up = loss(store, false).expect("forward +h").0;
            store.get_mut(id).data_mut()[k] = orig - STEP;
            let down = loss(store, false).expect("forward -h").0;
            store.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let err = rel_err(analytic.data()[k], numeric);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = format!("{}[{k}] analytic {} numeric {numeric}", store.name(id), analytic.data()[k]);
            }
        }
    }
    report
}
