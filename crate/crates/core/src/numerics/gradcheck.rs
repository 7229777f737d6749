//! Central finite-difference validation of hand-written backward passes.

use super::{Parameter, Scalar};

/// Anything exposing its trainable parameters in a fixed order.
pub trait HasParameters<T> {
    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>>;
}

/// `|a - b| / max(|a|, |b|, 1e-5)`; the floor absorbs central-difference round-off
/// on gradients that are exactly zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

/// Compares `p.grad` with central differences of `f` around `p.value`.
///
/// Returns the worst relative error over all entries.
pub fn finite_difference_check<F>(mut f: F, p: &Parameter<f64>, eps: f64) -> f64
where
    F: FnMut(&Parameter<f64>) -> f64,
{
    let mut probe = p.clone();
    let mut worst = 0.0f64;
    for i in 0..p.value.data().len() {
        let orig = p.value.data()[i];
        probe.value.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.value.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.value.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(p.grad.data()[i], numeric));
    }
    worst
}

/// Checks every parameter of `model` whose gradients have already been accumulated.
///
/// `loss` must evaluate the same objective the gradients were computed for.
pub fn check_gradients<M, F>(model: &mut M, eps: f64, loss: F) -> f64
where
    M: HasParameters<f64>,
    F: Fn(&M) -> f64,
{
    let analytic: Vec<Vec<f64>> = model
        .parameters_mut()
        .into_iter()
        .map(|p| p.grad.data().to_vec())
        .collect();
    let mut worst = 0.0f64;
    for (pi, grads) in analytic.iter().enumerate() {
        for (ei, &g) in grads.iter().enumerate() {
            let orig = model.parameters_mut()[pi].value.data()[ei];
            model.parameters_mut()[pi].value.data_mut()[ei] = orig + eps;
            let plus = loss(model);
            model.parameters_mut()[pi].value.data_mut()[ei] = orig - eps;
            let minus = loss(model);
            model.parameters_mut()[pi].value.data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(g, numeric);
            if err > worst {
                log::debug!(
                    "gradcheck {}[{ei}]: analytic {g:e} numeric {numeric:e}",
                    model.parameters_mut()[pi].name
                );
                worst = err;
            }
        }
    }
    worst
}

impl<T: Scalar> HasParameters<T> for Vec<Parameter<T>> {
    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.iter_mut().collect()
    }
}
