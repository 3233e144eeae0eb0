//! Dropout, DropConnect and stochastic-depth gates.
//!
//! Dropout and DropConnect use the inverted scheme: survivors are scaled by
//! `1/(1-p)` at train time so evaluation applies no mask and no scaling. A
//! residual branch is skipped with probability `1 - survival` during
//! training and scaled by `survival` at evaluation.

use super::{LayerKind, LayerSpec, Mode};
use crate::error::{invalid, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Final-block survival probability of the linear stochastic-depth rule.
pub const FINAL_SURVIVAL: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub enum Mask {
    /// Per-element multipliers: `0` for dropped entries, `1/(1-p)` for kept.
    Multipliers(Vec<f64>),
    /// Residual branch gate.
    Gate { active: bool },
    /// Deterministic pass; nothing was drawn.
    None,
}

impl Mask {
    /// True when nothing was dropped.
    pub fn is_full(&self) -> bool {
        match self {
            Mask::Multipliers(m) => m.iter().all(|&x| x != 0.0),
            Mask::Gate { active } => *active,
            Mask::None => true,
        }
    }
}

/// Masks in the order a forward pass drew them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Masks(pub Vec<Mask>);

impl Masks {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub(crate) fn drop_probability(layer: &LayerSpec) -> Result<f64> {
    let p = layer
        .perturb
        .ok_or_else(|| invalid(format!("layer `{}` has no drop probability", layer.name)))?;
    if !(0.0..1.0).contains(&p) {
        return Err(invalid(format!(
            "layer `{}`: drop probability {p} must lie in [0, 1)",
            layer.name
        )));
    }
    Ok(p)
}

pub(crate) fn survival(layer: &LayerSpec) -> Result<f64> {
    let s = layer.survival.unwrap_or(1.0);
    if !(0.0..=1.0).contains(&s) {
        return Err(invalid(format!("layer `{}`: survival {s} outside [0, 1]", layer.name)));
    }
    Ok(s)
}

pub(crate) fn draw_multipliers(len: usize, p: f64, rng: &mut Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..len).map(|_| if rng.uniform() < p { 0.0 } else { keep }).collect()
}

pub(crate) fn draw_gate(s: f64, rng: &mut Rng) -> bool {
    rng.uniform() < s
}

/// Applies a perturbation layer to `input`.
///
/// For DROPOUT `input` is the activation batch, for DROPCONNECT it is the
/// wrapped layer's weight matrix, for RESIDUAL_BLOCK it is the branch output
/// to be gated.
pub fn apply_perturbation(layer: &LayerSpec, input: &Tensor, mode: Mode, rng: &mut Rng) -> Result<(Tensor, Mask)> {
    match &layer.kind {
        LayerKind::Dropout | LayerKind::Dropconnect { .. } => {
            let p = drop_probability(layer)?;
            match mode {
                Mode::Eval => Ok((input.clone(), Mask::None)),
                Mode::Train => {
                    let m = draw_multipliers(input.len(), p, rng);
                    let data = input.data().iter().zip(&m).map(|(x, k)| x * k).collect();
                    let out = Tensor::new(input.shape().to_vec(), data)?;
                    Ok((out, Mask::Multipliers(m)))
                }
            }
        }
        LayerKind::ResidualBlock { .. } => {
            let s = survival(layer)?;
            match mode {
                Mode::Eval => Ok((input.scale(s), Mask::None)),
                Mode::Train => {
                    let active = draw_gate(s, rng);
                    let out = if active {
                        input.clone()
                    } else {
                        Tensor::zeros(input.shape())
                    };
                    Ok((out, Mask::Gate { active }))
                }
            }
        }
        _ => Err(invalid(format!("layer `{}` is not a perturbation layer", layer.name))),
    }
}

/// Linear stochastic-depth rule: `1 - (index/last)(1 - 0.5)`.
pub fn survival_probability(index: usize, last: usize) -> f64 {
    if last == 0 {
        return 1.0;
    }
    1.0 - (index as f64 / last as f64) * (1.0 - FINAL_SURVIVAL)
}

/// Survival for each of `num_blocks` residual blocks, input side first:
/// the first block always survives, the last survives with probability 0.5.
pub fn survival_schedule(num_blocks: usize) -> Vec<f64> {
    let last = num_blocks.saturating_sub(1);
    (0..num_blocks).map(|i| survival_probability(i, last)).collect()
}
