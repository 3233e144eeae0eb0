//! The fine-tuning loop: mini-batch SGD with momentum, periodic head
//! re-initialization, per-epoch telemetry and gradient probes.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{contract, Error, Result};
use crate::graph::{backward, forward, forward_probe, LossKind, Mode, Model};
use crate::par;
use crate::params::{Gradients, ParamStore};
use crate::regularizers::{add_reg_gradients, RegularizerKind};
use crate::rng::Rng;
use crate::schedules::{cyclic_lr, disturb_labels, rifle_reset, PolicyConfig, SchedulePolicy, Strategy};
use crate::tensor::Tensor;

pub const DEFAULT_EPOCHS: usize = 40;
pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_ETA_MAX: f64 = 0.01;

/// Rows per evaluation chunk; chunks are the unit of parallel work.
const EVAL_CHUNK: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub eta_max: f64,
    pub regularizer: RegularizerKind,
    /// Set by the caller; experiment configs carry these at the top level.
    #[serde(skip)]
    pub policy: PolicyConfig,
    #[serde(skip)]
    pub seed: u64,
    /// Glob patterns over parameter names, e.g. `stage*.block.conv2.weight`.
    pub probe_layers: Vec<String>,
    /// Zero the head's momentum buffers whenever the head is re-initialized.
    pub reset_momentum: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            momentum: DEFAULT_MOMENTUM,
            eta_max: DEFAULT_ETA_MAX,
            regularizer: RegularizerKind::default(),
            policy: PolicyConfig::default(),
            seed: 0,
            probe_layers: Vec::new(),
            reset_momentum: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 {
            return cfg("epochs: must be positive".into());
        }
        if self.batch_size == 0 {
            return cfg("batch_size: must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return cfg(format!("momentum: {} outside [0, 1)", self.momentum));
        }
        if !(self.eta_max > 0.0) || !self.eta_max.is_finite() {
            return cfg(format!("eta_max: must be positive, got {}", self.eta_max));
        }
        self.regularizer
            .validate()
            .map_err(|e| Error::Config(format!("regularizer: {e}")))?;
        for p in &self.probe_layers {
            glob::Pattern::new(p).map_err(|e| Error::Config(format!("probe_layers: `{p}`: {e}")))?;
        }
        Ok(())
    }

    pub fn batches_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    /// Schedule bound to a training set of `n` examples.
    pub fn schedule(&self, n: usize) -> Result<SchedulePolicy> {
        self.policy
            .resolve(self.epochs, self.batches_per_epoch(n), self.eta_max)
    }
}

/// One row per epoch. For regression the `*_top1` fields hold the MSE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    /// 1-based.
    pub epoch: usize,
    /// Global index of the epoch's first iteration.
    pub step: usize,
    /// Learning rate at the epoch's first iteration.
    pub eta: f64,
    /// Running mean over the epoch's TRAIN-mode mini-batches.
    pub train_loss: f64,
    pub train_top1: f64,
    /// EVAL-mode metrics on the held-out set after the epoch.
    pub test_loss: f64,
    pub test_top1: f64,
    pub reset_event: bool,
    /// Probe-batch gradient norms taken at the start of the epoch, after
    /// any reset on its first iteration.
    pub grad_norms: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    /// Top-1 accuracy, or MSE for regression.
    pub top1: f64,
}

/// `v ← μv + g; ω ← ω − ηv`.
pub fn sgd_momentum_step(
    params: &mut ParamStore,
    velocity: &mut Gradients,
    grads: &Gradients,
    eta: f64,
    mu: f64,
) -> Result<()> {
    velocity.check_aligned(params)?;
    grads.check_aligned(params)?;
    for i in 0..params.len() {
        let g = grads.value(i).data();
        let v = velocity.value_mut(i).data_mut();
        for (vj, gj) in v.iter_mut().zip(g) {
            *vj = mu * *vj + gj;
        }
        let v = velocity.value(i).data();
        for (wj, vj) in params.value_mut(i).data_mut().iter_mut().zip(v) {
            *wj -= eta * vj;
        }
    }
    Ok(())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = j;
        }
    }
    best
}

fn correct_count(outputs: &Tensor, labels: &Tensor) -> usize {
    (0..outputs.rows())
        .filter(|&i| argmax(outputs.row(i)) as f64 == labels.data()[i])
        .count()
}

/// Deterministic EVAL-mode metrics over the whole dataset. Chunks run in
/// parallel and are reduced in order, so the result does not depend on the
/// thread count.
pub fn evaluate(model: &Model, params: &ParamStore, data: &Dataset) -> Result<Metrics> {
    if data.is_empty() {
        return Err(crate::error::invalid("cannot evaluate on an empty dataset"));
    }
    let n = data.len();
    let chunks = n.div_ceil(EVAL_CHUNK);
    let parts = par::map_indices(chunks, |c| -> Result<(f64, usize)> {
        let (x, y) = data.slice(c * EVAL_CHUNK, (c + 1) * EVAL_CHUNK);
        let rows = x.rows();
        // EVAL mode never draws from the stream.
        let mut unused = Rng::new(0);
        let (loss, out, _) = forward(model, params, &x, &y, Mode::Eval, &mut unused)?;
        let correct = match model.loss() {
            LossKind::SoftmaxCe => correct_count(&out, &y),
            LossKind::Mse => 0,
        };
        Ok((loss * rows as f64, correct))
    });
    let mut loss = 0.0;
    let mut correct = 0;
    for p in parts {
        let (l, c) = p?;
        loss += l;
        correct += c;
    }
    let loss = loss / n as f64;
    let top1 = match model.loss() {
        LossKind::SoftmaxCe => correct as f64 / n as f64,
        LossKind::Mse => loss,
    };
    Ok(Metrics { loss, top1 })
}

/// Parameters whose names match any pattern, in store order. Every pattern
/// must match at least one parameter.
pub fn match_probe_layers(params: &ParamStore, patterns: &[String]) -> Result<Vec<usize>> {
    let mut hit = vec![false; params.len()];
    for pat in patterns {
        let compiled = glob::Pattern::new(pat).map_err(|e| Error::Config(format!("probe pattern `{pat}`: {e}")))?;
        let mut any = false;
        for (i, name) in params.names().enumerate() {
            if compiled.matches(name) {
                hit[i] = true;
                any = true;
            }
        }
        if !any {
            return Err(Error::Config(format!("probe pattern `{pat}` matches no parameter")));
        }
    }
    Ok((0..params.len()).filter(|&i| hit[i]).collect())
}

/// Frobenius norm of the empirical-loss gradient for each matched
/// parameter, using a deterministic mask-free forward.
pub fn grad_norm_probe(
    model: &Model,
    params: &ParamStore,
    batch: &Tensor,
    labels: &Tensor,
    patterns: &[String],
) -> Result<Vec<(String, f64)>> {
    let selected = match_probe_layers(params, patterns)?;
    probe_selected(model, params, batch, labels, &selected)
}

fn probe_selected(
    model: &Model,
    params: &ParamStore,
    batch: &Tensor,
    labels: &Tensor,
    selected: &[usize],
) -> Result<Vec<(String, f64)>> {
    if selected.is_empty() {
        return Ok(Vec::new());
    }
    let (_, _, tape) = forward_probe(model, params, batch, labels)?;
    let grads = backward(&tape)?;
    Ok(selected
        .iter()
        .map(|&i| (grads.name(i).to_string(), grads.value(i).frobenius_norm()))
        .collect())
}

/// The fixed probe batch: the first `batch_size` rows of a permutation
/// drawn from a dedicated stream.
pub fn probe_batch(data: &Dataset, batch_size: usize, seed: u64) -> (Tensor, Tensor) {
    let mut rng = Rng::new(seed).derive("probe");
    let perm = rng.permutation(data.len());
    data.batch(&perm[..batch_size.min(data.len())])
}

/// Runs the full fine-tuning loop, updating `params` in place.
///
/// Each iteration: head reset if the policy demands it, learning rate,
/// next mini-batch (reshuffled every epoch), optional label disturbance,
/// TRAIN forward, backward, regularizer gradient, momentum step.
pub fn train(
    model: &Model,
    params: &mut ParamStore,
    train_set: &Dataset,
    test_set: &Dataset,
    config: &TrainConfig,
) -> Result<Vec<TelemetryRecord>> {
    train_observed(model, params, train_set, test_set, config, |_, _| {})
}

/// [`train`] that calls `observe(t, params)` after every iteration's update.
pub fn train_observed<F>(
    model: &Model,
    params: &mut ParamStore,
    train_set: &Dataset,
    test_set: &Dataset,
    config: &TrainConfig,
    mut observe: F,
) -> Result<Vec<TelemetryRecord>>
where
    F: FnMut(usize, &ParamStore),
{
    config.validate()?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(crate::error::invalid("training and test sets must be nonempty"));
    }
    if params.start_point().is_none() {
        return Err(contract("start point must be frozen before training"));
    }
    let policy = config.schedule(train_set.len())?;
    let num_classes = train_set.num_classes();
    if policy.strategy == Strategy::DisturbLabel && num_classes.is_none() {
        return Err(Error::Config(
            "strategy: DISTURB_LABEL needs a classification task".into(),
        ));
    }
    let probes = match_probe_layers(params, &config.probe_layers)?;
    let (probe_x, probe_y) = probe_batch(train_set, config.batch_size, config.seed);

    let root = Rng::new(config.seed);
    let mut shuffle_rng = root.derive("shuffle");
    let mut mask_rng = root.derive("masks");
    let mut reset_rng = root.derive("reset");
    let mut label_rng = root.derive("disturb");

    let mut velocity = Gradients::zeros_like(params);
    let n = train_set.len();
    let per_epoch = config.batches_per_epoch(n);
    let mut telemetry = Vec::with_capacity(config.epochs);
    let mut t = 0usize;

    for epoch in 1..=config.epochs {
        let order = shuffle_rng.permutation(n);
        let epoch_step = t;
        let mut reset_event = false;
        let mut grad_norms = Vec::new();
        let mut eta_first = 0.0;
        let mut loss_sum = 0.0;
        let mut metric_sum = 0.0;

        for b in 0..per_epoch {
            if rifle_reset(params, t, &policy, &mut reset_rng)? {
                reset_event = true;
                if config.reset_momentum {
                    for i in params.fc_range()? {
                        velocity.value_mut(i).data_mut().fill(0.0);
                    }
                }
            }
            if b == 0 {
                grad_norms = probe_selected(model, params, &probe_x, &probe_y, &probes)?;
            }
            let eta = cyclic_lr(t, &policy);
            if b == 0 {
                eta_first = eta;
            }
            let idx = &order[b * config.batch_size..((b + 1) * config.batch_size).min(n)];
            let (x, y_true) = train_set.batch(idx);
            let y = match (policy.strategy, num_classes) {
                (Strategy::DisturbLabel, Some(c)) => disturb_labels(&y_true, c, policy.disturb_p, &mut label_rng)?,
                _ => y_true.clone(),
            };
            let (loss, out, tape) = forward(model, params, &x, &y, Mode::Train, &mut mask_rng)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    step: t,
                    layer: tape.first_nonfinite_layer().unwrap_or("loss").to_string(),
                });
            }
            let rows = idx.len() as f64;
            loss_sum += loss * rows;
            metric_sum += match num_classes {
                Some(_) => correct_count(&out, &y_true) as f64,
                None => loss * rows,
            };
            let mut grads = backward(&tape)?;
            drop(tape);
            add_reg_gradients(&mut grads, params, &config.regularizer)?;
            sgd_momentum_step(params, &mut velocity, &grads, eta, config.momentum)?;
            observe(t, params);
            t += 1;
        }

        if !params.all_finite() {
            let layer = params
                .entries()
                .iter()
                .find(|e| !e.value.all_finite())
                .map(|e| e.name.clone())
                .unwrap_or_default();
            return Err(Error::NonFinite { epoch, step: t, layer });
        }
        let test = evaluate(model, params, test_set)?;
        telemetry.push(TelemetryRecord {
            epoch,
            step: epoch_step,
            eta: eta_first,
            train_loss: loss_sum / n as f64,
            train_top1: metric_sum / n as f64,
            test_loss: test.loss,
            test_top1: test.top1,
            reset_event,
            grad_norms,
        });
    }
    Ok(telemetry)
}
