//! Central-difference verification of the analytic gradients.

use super::forward::{backward, forward, forward_replay};
use super::{Mode, Model};
use crate::error::{invalid, Result};
use crate::params::{Gradients, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Extra differentiable term folded into the objective (e.g. a penalty):
/// its value and a routine adding its gradient in place.
pub type ExtraTerm<'f> = (&'f dyn Fn(&ParamStore) -> f64, &'f dyn Fn(&ParamStore, &mut Gradients));

/// `max |a - n| / max(|a|, |n|, 1e-12)` over all elements.
pub fn max_relative_error(analytic: &Gradients, numeric: &Gradients) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..analytic.len() {
        for (a, n) in analytic.value(i).data().iter().zip(numeric.value(i).data()) {
            let denom = a.abs().max(n.abs()).max(1e-12);
            worst = worst.max((a - n).abs() / denom);
        }
    }
    worst
}

/// Compares backprop gradients of the batch loss with central differences.
/// Masks are drawn once from `rng` and frozen for every evaluation.
pub fn check_gradients(
    model: &Model,
    params: &ParamStore,
    batch: &Tensor,
    labels: &Tensor,
    epsilon: f64,
    rng: &mut Rng,
) -> Result<f64> {
    check_gradients_with(model, params, batch, labels, epsilon, rng, None)
}

/// [`check_gradients`] on `loss + extra(params)`.
pub fn check_gradients_with(
    model: &Model,
    params: &ParamStore,
    batch: &Tensor,
    labels: &Tensor,
    epsilon: f64,
    rng: &mut Rng,
    extra: Option<ExtraTerm<'_>>,
) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    let masks = {
        let (_, _, tape) = forward(model, params, batch, labels, Mode::Train, rng)?;
        tape.masks().clone()
    };
    let mut analytic = {
        let (_, _, tape) = forward_replay(model, params, batch, labels, &masks)?;
        backward(&tape)?
    };
    if let Some((_, add_grad)) = extra {
        add_grad(params, &mut analytic);
    }

    let objective = |p: &ParamStore| -> Result<f64> {
        let (loss, _, _) = forward_replay(model, p, batch, labels, &masks)?;
        Ok(loss + extra.map_or(0.0, |(value, _)| value(p)))
    };

    let mut probe = params.clone();
    let mut numeric = Gradients::zeros_like(params);
    for i in 0..params.len() {
        for j in 0..params.value(i).len() {
            let orig = probe.value(i).data()[j];
            probe.value_mut(i).data_mut()[j] = orig + epsilon;
            let plus = objective(&probe)?;
            probe.value_mut(i).data_mut()[j] = orig - epsilon;
            let minus = objective(&probe)?;
            probe.value_mut(i).data_mut()[j] = orig;
            numeric.value_mut(i).data_mut()[j] = (plus - minus) / (2.0 * epsilon);
        }
    }
    Ok(max_relative_error(&analytic, &numeric))
}
