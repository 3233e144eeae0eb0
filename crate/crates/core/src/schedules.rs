//! Per-iteration interventions: the learning-rate schedule, periodic head
//! re-initialization and label disturbance, tied together by a
//! [`SchedulePolicy`].

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::graph::Perturbations;
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::{gaussian_init, Tensor};

pub const DEFAULT_DELTA: f64 = 0.01;
pub const DEFAULT_NUM_PERIODS: usize = 4;
pub const DEFAULT_DISTURB_P: f64 = 0.1;
pub const DEFAULT_DROP_P: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Strategy {
    None,
    Rifle,
    RifleA,
    RifleB,
    CyclicLr,
    DisturbLabel,
    DropoutFc,
    DropoutCnn,
    Dropconnect,
    StochasticDepth,
}

impl Strategy {
    /// Re-initializes the head at every period boundary.
    pub fn resets_head(self) -> bool {
        matches!(self, Strategy::Rifle | Strategy::RifleA)
    }

    /// Uses the per-period cyclic learning rate.
    pub fn cyclic(self) -> bool {
        matches!(self, Strategy::Rifle | Strategy::RifleB | Strategy::CyclicLr)
    }

    pub fn uses_periods(self) -> bool {
        self.resets_head() || self.cyclic()
    }
}

/// Shape of the in-period learning-rate curve.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LrShape {
    /// `½η cos(2πτ/P) + ½η`: falls to zero mid-period and climbs back.
    #[default]
    FullCosine,
    /// `½η (1 + cos(πτ/P))`: conventional restart, decays over the period.
    HalfCosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulePolicy {
    pub strategy: Strategy,
    /// Period length P in iterations.
    pub period: usize,
    /// Total iterations T.
    pub total_iters: usize,
    pub num_periods: usize,
    pub eta_max: f64,
    /// Standard deviation of re-initialized head weights.
    pub delta: f64,
    pub disturb_p: f64,
    pub drop_p: f64,
    pub lr_shape: LrShape,
}

impl SchedulePolicy {
    /// Splits `total_iters` into `num_periods` equal periods.
    pub fn new(strategy: Strategy, total_iters: usize, num_periods: usize, eta_max: f64) -> Result<Self> {
        let p = Self {
            strategy,
            period: total_iters.checked_div(num_periods).unwrap_or(0),
            total_iters,
            num_periods,
            eta_max,
            delta: DEFAULT_DELTA,
            disturb_p: DEFAULT_DISTURB_P,
            drop_p: DEFAULT_DROP_P,
            lr_shape: LrShape::FullCosine,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_delta(mut self, delta: f64) -> Self {
        self.delta = delta;
        self
    }

    pub fn with_disturb_p(mut self, p: f64) -> Self {
        self.disturb_p = p;
        self
    }

    pub fn with_drop_p(mut self, p: f64) -> Self {
        self.drop_p = p;
        self
    }

    pub fn with_lr_shape(mut self, shape: LrShape) -> Self {
        self.lr_shape = shape;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta_max > 0.0) || !self.eta_max.is_finite() {
            return Err(invalid(format!("eta_max must be positive, got {}", self.eta_max)));
        }
        if !(self.delta >= 0.0) || !self.delta.is_finite() {
            return Err(invalid(format!("delta must be >= 0, got {}", self.delta)));
        }
        if !(0.0..=1.0).contains(&self.disturb_p) {
            return Err(invalid(format!("disturb_p {} outside [0, 1]", self.disturb_p)));
        }
        if !(0.0..1.0).contains(&self.drop_p) {
            return Err(invalid(format!("drop_p {} outside [0, 1)", self.drop_p)));
        }
        if self.strategy.uses_periods() {
            if self.num_periods == 0 {
                return Err(invalid("num_periods must be positive"));
            }
            if self.total_iters > 0 && self.period * self.num_periods != self.total_iters {
                return Err(invalid(format!(
                    "{} iterations do not split into {} equal periods",
                    self.total_iters, self.num_periods
                )));
            }
        }
        Ok(())
    }

    /// Iteration indices at which the head is re-initialized.
    pub fn reset_iterations(&self) -> Vec<usize> {
        if !self.strategy.resets_head() || self.period == 0 {
            return Vec::new();
        }
        (0..self.total_iters).step_by(self.period).collect()
    }
}

/// User-facing policy settings. Period length is derived from the run
/// length, so `epochs` must be a multiple of `num_periods`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub strategy: Strategy,
    pub num_periods: usize,
    pub delta: f64,
    pub disturb_p: f64,
    pub drop_p: f64,
    pub lr_shape: LrShape,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::None,
            num_periods: DEFAULT_NUM_PERIODS,
            delta: DEFAULT_DELTA,
            disturb_p: DEFAULT_DISTURB_P,
            drop_p: DEFAULT_DROP_P,
            lr_shape: LrShape::FullCosine,
        }
    }
}

impl PolicyConfig {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            ..Self::default()
        }
    }

    /// Binds the settings to a run of `epochs × batches_per_epoch` iterations.
    pub fn resolve(&self, epochs: usize, batches_per_epoch: usize, eta_max: f64) -> Result<SchedulePolicy> {
        if self.strategy.uses_periods() && (self.num_periods == 0 || !epochs.is_multiple_of(self.num_periods)) {
            return Err(Error::Config(format!(
                "num_periods: {} does not divide {epochs} epochs",
                self.num_periods
            )));
        }
        let policy = SchedulePolicy::new(
            self.strategy,
            epochs * batches_per_epoch,
            self.num_periods.max(1),
            eta_max,
        )?
        .with_delta(self.delta)
        .with_disturb_p(self.disturb_p)
        .with_drop_p(self.drop_p)
        .with_lr_shape(self.lr_shape);
        policy.validate().map_err(|e| match e {
            Error::InvalidArgument(m) => Error::Config(m),
            e => e,
        })?;
        Ok(policy)
    }

    /// Perturbation layers the model builders should insert.
    pub fn perturbations(&self) -> Perturbations {
        let p = Some(self.drop_p);
        match self.strategy {
            Strategy::DropoutFc => Perturbations {
                dropout_fc: p,
                ..Default::default()
            },
            Strategy::DropoutCnn => Perturbations {
                dropout_hidden: p,
                ..Default::default()
            },
            Strategy::Dropconnect => Perturbations {
                dropconnect_fc: p,
                ..Default::default()
            },
            Strategy::StochasticDepth => Perturbations {
                stochastic_depth: true,
                ..Default::default()
            },
            _ => Perturbations::default(),
        }
    }
}

/// Learning rate for iteration `t` (0-based).
///
/// Cyclic strategies restart every period; the rest follow one global
/// half-cosine anneal `½η(1 + cos(πt/T))` over the whole run.
pub fn cyclic_lr(t: usize, policy: &SchedulePolicy) -> f64 {
    let eta = policy.eta_max;
    if policy.strategy.cyclic() && policy.period > 0 {
        let tau = (t % policy.period) as f64;
        let p = policy.period as f64;
        match policy.lr_shape {
            LrShape::FullCosine => 0.5 * eta * (2.0 * PI * tau / p).cos() + 0.5 * eta,
            LrShape::HalfCosine => 0.5 * eta * (1.0 + (PI * tau / p).cos()),
        }
    } else if policy.total_iters == 0 {
        eta
    } else {
        let frac = t as f64 / policy.total_iters as f64;
        0.5 * eta * (1.0 + (PI * frac).cos())
    }
}

/// Re-initializes the FC group when `t` starts a period: weights are drawn
/// from `N(0, δ²)` and biases zeroed. Backbone entries are never touched.
/// Returns whether a reset happened; strategies without resets always
/// return `false`.
pub fn rifle_reset(params: &mut ParamStore, t: usize, policy: &SchedulePolicy, rng: &mut Rng) -> Result<bool> {
    if !policy.strategy.resets_head() {
        return Ok(false);
    }
    let fc = params.fc_range()?;
    if policy.period == 0 || !t.is_multiple_of(policy.period) {
        return Ok(false);
    }
    for i in fc {
        let is_bias = params.entries()[i].name.ends_with(".bias");
        let shape = params.value(i).shape().to_vec();
        let fresh = if is_bias {
            Tensor::zeros(&shape)
        } else {
            gaussian_init(&shape, 0.0, policy.delta, rng)?
        };
        *params.value_mut(i) = fresh;
    }
    Ok(true)
}

/// With probability `disturb_p` each label is replaced by a uniform draw
/// over all classes (the true class included).
pub fn disturb_labels(labels: &Tensor, num_classes: usize, disturb_p: f64, rng: &mut Rng) -> Result<Tensor> {
    if num_classes < 2 {
        return Err(invalid(format!("need at least 2 classes, got {num_classes}")));
    }
    if !(0.0..=1.0).contains(&disturb_p) {
        return Err(invalid(format!("disturb_p {disturb_p} outside [0, 1]")));
    }
    for &y in labels.data() {
        if y.fract() != 0.0 || y < 0.0 || y >= num_classes as f64 {
            return Err(invalid(format!("label {y} outside [0, {num_classes})")));
        }
    }
    if disturb_p == 0.0 {
        return Ok(labels.clone());
    }
    let data = labels
        .data()
        .iter()
        .map(|&y| {
            if rng.uniform() < disturb_p {
                rng.below(num_classes) as f64
            } else {
                y
            }
        })
        .collect();
    Tensor::new(labels.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Role;

    fn policy(strategy: Strategy) -> SchedulePolicy {
        SchedulePolicy::new(strategy, 400, 4, 0.01).unwrap()
    }

    fn store() -> ParamStore {
        let mut rng = Rng::new(0);
        let mut s = ParamStore::new();
        s.push(
            "fc1.weight",
            Role::Backbone,
            gaussian_init(&[3, 4], 0.0, 1.0, &mut rng).unwrap(),
        )
        .unwrap();
        s.push(
            "fc1.bias",
            Role::Backbone,
            gaussian_init(&[4], 0.0, 1.0, &mut rng).unwrap(),
        )
        .unwrap();
        s.push(
            "head.weight",
            Role::Fc,
            gaussian_init(&[4, 2], 0.0, 1.0, &mut rng).unwrap(),
        )
        .unwrap();
        s.push("head.bias", Role::Fc, gaussian_init(&[2], 0.0, 1.0, &mut rng).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn cyclic_lr_examples() {
        let p = policy(Strategy::Rifle);
        assert_eq!(p.period, 100);
        assert_eq!(cyclic_lr(0, &p), 0.01);
        assert!(cyclic_lr(50, &p).abs() < 1e-18);
        assert!((cyclic_lr(25, &p) - 0.005).abs() < 1e-15);
        assert_eq!(cyclic_lr(100, &p), 0.01);
    }

    #[test]
    fn global_anneal_for_non_cyclic() {
        for s in [Strategy::None, Strategy::RifleA, Strategy::DisturbLabel] {
            let p = policy(s);
            assert_eq!(cyclic_lr(0, &p), 0.01);
            assert!((cyclic_lr(200, &p) - 0.005).abs() < 1e-15);
            assert!(cyclic_lr(399, &p) < 1e-6);
        }
    }

    #[test]
    fn half_cosine_variant() {
        let p = policy(Strategy::CyclicLr).with_lr_shape(LrShape::HalfCosine);
        assert_eq!(cyclic_lr(0, &p), 0.01);
        assert!((cyclic_lr(50, &p) - 0.005).abs() < 1e-15);
        assert!(cyclic_lr(99, &p) < 1e-5);
    }

    #[test]
    fn periods_must_divide_total() {
        assert!(SchedulePolicy::new(Strategy::Rifle, 10, 3, 0.01).is_err());
        assert!(SchedulePolicy::new(Strategy::None, 10, 3, 0.01).is_ok());
        assert!(SchedulePolicy::new(Strategy::Rifle, 12, 3, 0.01).is_ok());
    }

    #[test]
    fn reset_off_boundary_is_noop() {
        let mut s = store();
        let before = s.clone();
        let did = rifle_reset(&mut s, 7, &policy(Strategy::Rifle), &mut Rng::new(1)).unwrap();
        assert!(!did);
        assert!(s.bitwise_eq(&before));
    }

    #[test]
    fn zero_delta_reset_zeroes_head() {
        let mut s = store();
        let before = s.clone();
        let p = policy(Strategy::Rifle).with_delta(0.0);
        assert!(rifle_reset(&mut s, 100, &p, &mut Rng::new(1)).unwrap());
        assert!(s.get("head.weight").unwrap().data().iter().all(|&x| x == 0.0));
        assert!(s.get("head.bias").unwrap().data().iter().all(|&x| x == 0.0));
        for i in 0..2 {
            assert!(s.value(i).bitwise_eq(before.value(i)));
        }
    }

    #[test]
    fn reset_at_zero_redraws_head_only() {
        let mut s = store();
        let before = s.clone();
        assert!(rifle_reset(&mut s, 0, &policy(Strategy::RifleA), &mut Rng::new(2)).unwrap());
        assert!(!s
            .get("head.weight")
            .unwrap()
            .bitwise_eq(before.get("head.weight").unwrap()));
        for (a, b) in s.entries().iter().zip(before.entries()) {
            if a.role == Role::Backbone {
                assert!(a.value.bitwise_eq(&b.value));
            }
        }
    }

    #[test]
    fn reset_count_equals_num_periods() {
        let p = policy(Strategy::Rifle);
        let mut s = store();
        let mut rng = Rng::new(3);
        let fired = (0..p.total_iters)
            .filter(|&t| rifle_reset(&mut s, t, &p, &mut rng).unwrap())
            .count();
        assert_eq!(fired, 4);
        assert_eq!(p.reset_iterations(), vec![0, 100, 200, 300]);
    }

    #[test]
    fn non_resetting_strategies_never_reset() {
        let mut s = store();
        for st in [Strategy::RifleB, Strategy::CyclicLr, Strategy::None] {
            assert!(!rifle_reset(&mut s, 0, &policy(st), &mut Rng::new(0)).unwrap());
        }
    }

    #[test]
    fn reset_without_head_is_contract_violation() {
        let mut s = ParamStore::new();
        s.push("w", Role::Backbone, Tensor::zeros(&[2])).unwrap();
        let err = rifle_reset(&mut s, 0, &policy(Strategy::Rifle), &mut Rng::new(0)).unwrap_err();
        assert!(matches!(err, crate::Error::ContractViolation(_)));
    }

    #[test]
    fn policy_config_resolves_period_in_iterations() {
        let p = PolicyConfig::new(Strategy::Rifle).resolve(40, 7, 0.01).unwrap();
        assert_eq!(p.period, 70);
        assert_eq!(p.total_iters, 280);
        let err = PolicyConfig::new(Strategy::Rifle).resolve(10, 7, 0.01).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(PolicyConfig::new(Strategy::None).resolve(10, 7, 0.01).is_ok());
    }

    #[test]
    fn policy_config_perturbations() {
        let mut c = PolicyConfig::new(Strategy::Dropconnect);
        c.drop_p = 0.3;
        assert_eq!(c.perturbations().dropconnect_fc, Some(0.3));
        assert!(
            PolicyConfig::new(Strategy::StochasticDepth)
                .perturbations()
                .stochastic_depth
        );
        assert_eq!(
            PolicyConfig::new(Strategy::Rifle).perturbations(),
            Perturbations::default()
        );
    }

    #[test]
    fn disturb_zero_is_identity() {
        let labels = Tensor::from_vec((0..100).map(|i| (i % 5) as f64).collect());
        let out = disturb_labels(&labels, 5, 0.0, &mut Rng::new(1)).unwrap();
        assert!(out.bitwise_eq(&labels));
    }

    #[test]
    fn disturb_rejects_single_class() {
        let labels = Tensor::from_vec(vec![0.0]);
        assert!(disturb_labels(&labels, 1, 0.1, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn disturb_full_keeps_one_over_c() {
        // Monte-Carlo frequency oracle: with p = 1 a label survives w.p. 1/C.
        let c = 10;
        let n = 1_000_000;
        let labels = Tensor::from_vec((0..n).map(|i| (i % c) as f64).collect());
        let out = disturb_labels(&labels, c, 1.0, &mut Rng::new(5)).unwrap();
        let same = out.data().iter().zip(labels.data()).filter(|(a, b)| a == b).count();
        let frac = same as f64 / n as f64;
        assert!((frac - 0.1).abs() < 0.005, "{frac}");
    }

    #[test]
    fn disturb_changed_fraction() {
        // Binomial bound: changed fraction ≈ p(C-1)/C within ±1.5% relative.
        let c = 1000;
        let n = 1_000_000;
        let labels = Tensor::from_vec((0..n).map(|i| (i % c) as f64).collect());
        let out = disturb_labels(&labels, c, 0.1, &mut Rng::new(6)).unwrap();
        let changed = out.data().iter().zip(labels.data()).filter(|(a, b)| a != b).count();
        let frac = changed as f64 / n as f64;
        let k = (c - 1) as f64 / c as f64;
        assert!(frac >= 0.0985 * k && frac <= 0.1015 * k, "{frac}");
    }
}
