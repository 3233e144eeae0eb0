//! Explicit transfer penalties: weight decay (`‖ω‖²`) and the
//! starting-point penalty (`‖ω - ω_s‖²`), plus the combined objective.
//!
//! Under L2SP the FC head has no source counterpart and is penalized with
//! plain `‖ω_FC‖²`, weighted by `head_lambda`.

use serde::{Deserialize, Serialize};

use crate::error::{contract, invalid, Result};
use crate::graph::{check_gradients_with, Model};
use crate::params::{Gradients, ParamStore, Role};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DEFAULT_L2_LAMBDA: f64 = 1e-4;
pub const DEFAULT_L2SP_LAMBDA: f64 = 1e-2;
pub const DEFAULT_L2SP_HEAD_LAMBDA: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Penalty {
    #[serde(rename = "L2")]
    L2,
    #[serde(rename = "L2SP")]
    L2Sp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizerKind {
    pub kind: Penalty,
    pub lambda: f64,
    /// Weight on the head under L2SP; defaults to `lambda` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_lambda: Option<f64>,
}

impl Default for RegularizerKind {
    fn default() -> Self {
        Self::l2(DEFAULT_L2_LAMBDA)
    }
}

impl RegularizerKind {
    pub fn l2(lambda: f64) -> Self {
        Self {
            kind: Penalty::L2,
            lambda,
            head_lambda: None,
        }
    }

    pub fn l2sp(lambda: f64, head_lambda: f64) -> Self {
        Self {
            kind: Penalty::L2Sp,
            lambda,
            head_lambda: Some(head_lambda),
        }
    }

    pub fn default_l2sp() -> Self {
        Self::l2sp(DEFAULT_L2SP_LAMBDA, DEFAULT_L2SP_HEAD_LAMBDA)
    }

    pub fn validate(&self) -> Result<()> {
        for (what, v) in [("lambda", Some(self.lambda)), ("head_lambda", self.head_lambda)] {
            if let Some(v) = v {
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(invalid(format!("{what} must be finite and >= 0, got {v}")));
                }
            }
        }
        Ok(())
    }

    fn weight_for(&self, role: Role) -> f64 {
        match (self.kind, role) {
            (Penalty::L2Sp, Role::Fc) => self.head_lambda.unwrap_or(self.lambda),
            _ => self.lambda,
        }
    }
}

/// `‖ω‖²` over every parameter tensor.
pub fn l2_penalty(params: &ParamStore) -> f64 {
    params.entries().iter().map(|e| e.value.sum_sq()).sum()
}

fn start_point(params: &ParamStore) -> Result<&[Tensor]> {
    params
        .start_point()
        .ok_or_else(|| contract("L2SP needs a frozen starting point"))
}

fn sq_dist(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `‖ω_backbone - ω_s‖² + ‖ω_FC‖²`.
pub fn l2sp_penalty(params: &ParamStore) -> Result<f64> {
    let sp = start_point(params)?;
    Ok(params
        .entries()
        .iter()
        .zip(sp)
        .map(|(e, s)| match e.role {
            Role::Backbone => sq_dist(&e.value, s),
            Role::Fc => e.value.sum_sq(),
        })
        .sum())
}

/// `λ·Ω(ω, ω_s)` with the per-role weights of `reg`.
pub fn weighted_penalty(params: &ParamStore, reg: &RegularizerKind) -> Result<f64> {
    match reg.kind {
        Penalty::L2 => Ok(reg.lambda * l2_penalty(params)),
        Penalty::L2Sp => {
            let sp = start_point(params)?;
            let mut bb = 0.0;
            let mut fc = 0.0;
            for (e, s) in params.entries().iter().zip(sp) {
                match e.role {
                    Role::Backbone => bb += sq_dist(&e.value, s),
                    Role::Fc => fc += e.value.sum_sq(),
                }
            }
            Ok(reg.weight_for(Role::Backbone) * bb + reg.weight_for(Role::Fc) * fc)
        }
    }
}

/// Empirical loss plus the weighted penalty.
pub fn total_objective(empirical_loss: f64, params: &ParamStore, reg: &RegularizerKind) -> Result<f64> {
    if !empirical_loss.is_finite() {
        return Err(invalid(format!("empirical loss is not finite: {empirical_loss}")));
    }
    if reg.lambda == 0.0 && reg.head_lambda.unwrap_or(0.0) == 0.0 {
        return Ok(empirical_loss);
    }
    Ok(empirical_loss + weighted_penalty(params, reg)?)
}

/// Adds `λ ∂Ω/∂ω` onto backprop gradients in place: `2λω` for L2,
/// `2λ(ω - ω_s)` for L2SP backbone entries and `2λ_head ω` for the head.
pub fn add_reg_gradients(grads: &mut Gradients, params: &ParamStore, reg: &RegularizerKind) -> Result<()> {
    grads.check_aligned(params)?;
    let sp = match reg.kind {
        Penalty::L2 => None,
        Penalty::L2Sp => Some(start_point(params)?),
    };
    for (i, e) in params.entries().iter().enumerate() {
        let lam = reg.weight_for(e.role);
        if lam == 0.0 {
            continue;
        }
        let g = grads.value_mut(i).data_mut();
        let w = e.value.data();
        match (sp, e.role) {
            (Some(sp), Role::Backbone) => {
                for ((g, w), s) in g.iter_mut().zip(w).zip(sp[i].data()) {
                    *g += 2.0 * lam * (w - s);
                }
            }
            _ => {
                for (g, w) in g.iter_mut().zip(w) {
                    *g += 2.0 * lam * w;
                }
            }
        }
    }
    Ok(())
}

/// Finite-difference check of the whole regularized objective.
pub fn check_objective_gradients(
    model: &Model,
    params: &ParamStore,
    batch: &Tensor,
    labels: &Tensor,
    reg: &RegularizerKind,
    epsilon: f64,
    rng: &mut Rng,
) -> Result<f64> {
    let value = |p: &ParamStore| weighted_penalty(p, reg).expect("penalty on a checked store");
    let grad =
        |p: &ParamStore, g: &mut Gradients| add_reg_gradients(g, p, reg).expect("penalty gradient on a checked store");
    weighted_penalty(params, reg)?;
    check_gradients_with(model, params, batch, labels, epsilon, rng, Some((&value, &grad)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gaussian_init;

    fn random_store(seed: u64) -> ParamStore {
        let mut rng = Rng::new(seed);
        let mut s = ParamStore::new();
        s.push("a", Role::Backbone, gaussian_init(&[3, 4], 0.0, 1.0, &mut rng).unwrap())
            .unwrap();
        s.push("b", Role::Backbone, gaussian_init(&[5], 0.0, 1.0, &mut rng).unwrap())
            .unwrap();
        s.push(
            "head.weight",
            Role::Fc,
            gaussian_init(&[4, 2], 0.0, 1.0, &mut rng).unwrap(),
        )
        .unwrap();
        s
    }

    #[test]
    fn l2_examples() {
        let mut s = ParamStore::new();
        s.push("w", Role::Backbone, Tensor::zeros(&[3])).unwrap();
        assert_eq!(l2_penalty(&s), 0.0);
        let mut s = ParamStore::new();
        s.push("w", Role::Backbone, Tensor::from_vec(vec![3.0, 4.0])).unwrap();
        assert_eq!(l2_penalty(&s), 25.0);
    }

    #[test]
    fn l2_matches_flat_loop() {
        let s = random_store(1);
        let mut flat = 0.0;
        for e in s.entries() {
            for x in e.value.data() {
                flat += x * x;
            }
        }
        assert!((l2_penalty(&s) - flat).abs() <= 1e-12 * flat);
    }

    #[test]
    fn l2sp_examples() {
        let mut s = ParamStore::new();
        s.push("w", Role::Backbone, Tensor::from_vec(vec![2.0, 3.0])).unwrap();
        s.push("head.weight", Role::Fc, Tensor::zeros(&[2])).unwrap();
        assert!(matches!(l2sp_penalty(&s), Err(crate::Error::ContractViolation(_))));
        s.freeze_start_point();
        assert_eq!(l2sp_penalty(&s).unwrap(), 0.0);
        s.set("w", Tensor::from_vec(vec![3.0, 4.0])).unwrap();
        assert_eq!(l2sp_penalty(&s).unwrap(), 2.0);
    }

    #[test]
    fn l2sp_head_contributes_plain_norm() {
        let mut s = random_store(2);
        s.freeze_start_point();
        let head = s.get("head.weight").unwrap().sum_sq();
        assert!((l2sp_penalty(&s).unwrap() - head).abs() < 1e-12);
    }

    #[test]
    fn l2sp_gradient_is_twice_displacement() {
        // closed form vs central differences on the penalty alone
        let mut s = random_store(3);
        s.freeze_start_point();
        let mut rng = Rng::new(9);
        for i in 0..2 {
            let noise = gaussian_init(s.value(i).shape(), 0.0, 0.5, &mut rng).unwrap();
            s.value_mut(i).add_scaled(1.0, &noise).unwrap();
        }
        let reg = RegularizerKind::l2sp(1.0, 1.0);
        let mut g = Gradients::zeros_like(&s);
        add_reg_gradients(&mut g, &s, &reg).unwrap();
        let eps = 1e-5;
        let mut probe = s.clone();
        for i in 0..s.len() {
            for j in 0..s.value(i).len() {
                let x = s.value(i).data()[j];
                probe.value_mut(i).data_mut()[j] = x + eps;
                let p = l2sp_penalty(&probe).unwrap();
                probe.value_mut(i).data_mut()[j] = x - eps;
                let m = l2sp_penalty(&probe).unwrap();
                probe.value_mut(i).data_mut()[j] = x;
                let numeric = (p - m) / (2.0 * eps);
                let analytic = g.value(i).data()[j];
                let closed = match s.role(i) {
                    Role::Backbone => 2.0 * (x - s.start_point().unwrap()[i].data()[j]),
                    Role::Fc => 2.0 * x,
                };
                assert_eq!(analytic, closed);
                assert!((analytic - numeric).abs() <= 1e-8 * analytic.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn total_objective_examples() {
        let mut s = ParamStore::new();
        s.push("w", Role::Backbone, Tensor::from_vec(vec![3.0, 4.0])).unwrap();
        let t = total_objective(1.0, &s, &RegularizerKind::l2(0.01)).unwrap();
        assert!((t - 1.25).abs() < 1e-15);
        assert_eq!(total_objective(0.7, &s, &RegularizerKind::l2(0.0)).unwrap(), 0.7);
    }

    #[test]
    fn gradients_are_additive_in_lambda() {
        let mut s = random_store(4);
        s.freeze_start_point();
        for kind in [Penalty::L2, Penalty::L2Sp] {
            let r = |l: f64| RegularizerKind {
                kind,
                lambda: l,
                head_lambda: None,
            };
            let mut twice = Gradients::zeros_like(&s);
            add_reg_gradients(&mut twice, &s, &r(0.25)).unwrap();
            add_reg_gradients(&mut twice, &s, &r(0.5)).unwrap();
            let mut once = Gradients::zeros_like(&s);
            add_reg_gradients(&mut once, &s, &r(0.75)).unwrap();
            for i in 0..s.len() {
                for (a, b) in twice.value(i).data().iter().zip(once.value(i).data()) {
                    assert!((a - b).abs() <= 1e-14 * b.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn negative_lambda_rejected() {
        assert!(RegularizerKind::l2(-1.0).validate().is_err());
        assert!(RegularizerKind::l2sp(0.1, f64::NAN).validate().is_err());
        assert!(RegularizerKind::default_l2sp().validate().is_ok());
    }
}
