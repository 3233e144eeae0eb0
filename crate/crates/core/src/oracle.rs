//! Teacher-student transfer experiment: two bias-free ReLU teachers share a
//! first layer; a student pretrained on the first teacher is fine-tuned on
//! the second with and without head re-initialization, and its learned first
//! layer is compared to the shared teacher layer by optimal transport.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::graph::{oracle_mlp, Model};
use crate::params::{ParamStore, Role};
use crate::regularizers::RegularizerKind;
use crate::rng::Rng;
use crate::schedules::{PolicyConfig, Strategy};
use crate::tensor::{gaussian_init, Tensor};
use crate::trainer::{evaluate, train, TrainConfig};
use crate::transport::ot_distance;

const HIDDEN: &str = "hidden.weight";
const HEAD: &str = "head.weight";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub n_samples: usize,
    /// Size of the held-out sets; their labels are noise-free.
    pub n_test: usize,
    /// Label noise variance (std is its square root).
    pub noise_var: f64,
    /// Entry std of the shared first layer W1.
    pub w1_std: f64,
    /// Entry std of the two teacher heads W2, W3.
    pub head_std: f64,
    pub weight_seed: u64,
    pub data_seed: u64,
}

impl Default for OracleSpec {
    fn default() -> Self {
        Self {
            input_dim: 100,
            hidden_dim: 50,
            output_dim: 1,
            n_samples: 1000,
            n_test: 2000,
            noise_var: 0.01,
            w1_std: 0.03,
            head_std: 0.1,
            weight_seed: 0,
            data_seed: 0,
        }
    }
}

impl OracleSpec {
    /// Teachers with standard-normal entries.
    pub fn unit_scale() -> Self {
        Self {
            w1_std: 1.0,
            head_std: 1.0,
            ..Self::default()
        }
    }

    /// Both seeds set to `seed`.
    pub fn with_seed(self, seed: u64) -> Self {
        Self {
            weight_seed: seed,
            data_seed: seed,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0
            || self.hidden_dim == 0
            || self.output_dim == 0
            || self.n_samples == 0
            || self.n_test == 0
        {
            return Err(invalid("oracle dimensions and sample counts must be positive"));
        }
        if !(self.noise_var >= 0.0) || !(self.w1_std >= 0.0) || !(self.head_std >= 0.0) {
            return Err(invalid("oracle noise_var and scales must be >= 0"));
        }
        Ok(())
    }
}

/// The shared first layer and the two teacher heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Oracles {
    pub w1: Tensor,
    pub w2: Tensor,
    pub w3: Tensor,
}

pub fn make_oracles(spec: &OracleSpec) -> Result<Oracles> {
    spec.validate()?;
    let root = Rng::new(spec.weight_seed);
    let (d, h, o) = (spec.input_dim, spec.hidden_dim, spec.output_dim);
    Ok(Oracles {
        w1: gaussian_init(&[d, h], 0.0, spec.w1_std, &mut root.derive("w1"))?,
        w2: gaussian_init(&[h, o], 0.0, spec.head_std, &mut root.derive("w2"))?,
        w3: gaussian_init(&[h, o], 0.0, spec.head_std, &mut root.derive("w3"))?,
    })
}

/// First-layer activations `ReLU(X W1)`.
pub fn hidden_features(x: &Tensor, w1: &Tensor) -> Result<Tensor> {
    Ok(x.matmul(w1)?.map(|v| v.max(0.0)))
}

/// Teacher output `ReLU(X W1) Wout` for row-major inputs `X`.
pub fn oracle_output(x: &Tensor, w1: &Tensor, wout: &Tensor) -> Result<Tensor> {
    hidden_features(x, w1)?.matmul(wout)
}

/// `n` pairs with `x ~ N(0, I)` and `y = oracle(x) + ε`, `ε ~ N(0, noise_var)`.
pub fn synth_dataset(w1: &Tensor, wout: &Tensor, n: usize, noise_var: f64, rng: &mut Rng) -> Result<Dataset> {
    if w1.shape().len() != 2 || wout.shape().len() != 2 || w1.shape()[1] != wout.shape()[0] {
        return Err(invalid(format!(
            "oracle shapes do not chain: {:?} then {:?}",
            w1.shape(),
            wout.shape()
        )));
    }
    if !(noise_var >= 0.0) {
        return Err(invalid(format!("noise_var must be >= 0, got {noise_var}")));
    }
    let x = gaussian_init(&[n, w1.shape()[0]], 0.0, 1.0, rng)?;
    let mut y = oracle_output(&x, w1, wout)?;
    if noise_var > 0.0 {
        let std = noise_var.sqrt();
        for v in y.data_mut() {
            *v += std * rng.normal();
        }
    }
    Dataset::regression(x, y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    /// From-scratch training on the first teacher.
    pub source: TrainConfig,
    /// Fine-tuning on the second teacher; its policy is overridden per arm.
    pub target: TrainConfig,
    /// Policy of the re-initialization arm.
    pub rifle: PolicyConfig,
    /// Entry std of the from-scratch student.
    pub student_std: f64,
    /// Entry std of the fresh head given to both fine-tuning arms.
    pub fresh_head_std: f64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        let source = TrainConfig {
            epochs: 200,
            momentum: 0.0,
            regularizer: RegularizerKind::l2(0.0),
            ..TrainConfig::default()
        };
        let rifle = PolicyConfig {
            delta: 0.1,
            ..PolicyConfig::new(Strategy::Rifle)
        };
        Self {
            source,
            target: TrainConfig::default(),
            rifle,
            student_std: 0.01,
            fresh_head_std: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub mse_scratch_source: f64,
    pub mse_l2: f64,
    pub mse_rifle: f64,
    /// OT distance of the pretrained first layer to W1, before fine-tuning.
    pub ot_source: f64,
    pub ot_l2: f64,
    pub ot_rifle: f64,
}

fn student(model: &Model, hidden: Tensor, head: Tensor) -> Result<ParamStore> {
    debug_assert_eq!(model.param_shapes().len(), 2);
    let mut p = ParamStore::new();
    p.push(HIDDEN, Role::Backbone, hidden)?;
    p.push(HEAD, Role::Fc, head)?;
    p.freeze_start_point();
    Ok(p)
}

/// Runs the full experiment for one seed. All training runs share
/// `seed`; the two fine-tuning arms start from identical parameters.
pub fn run_transfer(spec: &OracleSpec, config: &TransferConfig, seed: u64) -> Result<TransferReport> {
    let spec = spec.with_seed(seed);
    let oracles = make_oracles(&spec)?;
    let data = Rng::new(seed).derive("oracle-data");
    let gen = |wout: &Tensor, n: usize, noise: f64, stream: &str| {
        synth_dataset(&oracles.w1, wout, n, noise, &mut data.derive(stream))
    };
    let source_train = gen(&oracles.w2, spec.n_samples, spec.noise_var, "source-train")?;
    let source_test = gen(&oracles.w2, spec.n_test, 0.0, "source-test")?;
    let target_train = gen(&oracles.w3, spec.n_samples, spec.noise_var, "target-train")?;
    let target_test = gen(&oracles.w3, spec.n_test, 0.0, "target-test")?;

    let model = oracle_mlp(spec.input_dim, spec.hidden_dim)?;
    let (d, h, o) = (spec.input_dim, spec.hidden_dim, spec.output_dim);
    let init = Rng::new(seed).derive("student");
    let mut src = student(
        &model,
        gaussian_init(&[d, h], 0.0, config.student_std, &mut init.derive("hidden"))?,
        gaussian_init(&[h, o], 0.0, config.student_std, &mut init.derive("head"))?,
    )?;
    let source_cfg = TrainConfig {
        seed,
        ..config.source.clone()
    };
    train(&model, &mut src, &source_train, &source_test, &source_cfg)?;
    let mse_scratch_source = evaluate(&model, &src, &source_test)?.top1;
    let pretrained = src.get(HIDDEN).expect("student has a hidden layer").clone();

    let head = gaussian_init(&[h, o], 0.0, config.fresh_head_std, &mut init.derive("fresh-head"))?;
    let finetune = |policy: PolicyConfig| -> Result<(f64, f64)> {
        let mut p = student(&model, pretrained.clone(), head.clone())?;
        if config.target.epochs > 0 {
            let cfg = TrainConfig {
                seed,
                policy,
                ..config.target.clone()
            };
            train(&model, &mut p, &target_train, &target_test, &cfg)?;
        }
        let mse = evaluate(&model, &p, &target_test)?.top1;
        let ot = ot_distance(p.get(HIDDEN).expect("student has a hidden layer"), &oracles.w1)?.total;
        Ok((mse, ot))
    };
    let (mse_l2, ot_l2) = finetune(PolicyConfig {
        strategy: Strategy::None,
        ..config.target.policy
    })?;
    let (mse_rifle, ot_rifle) = finetune(config.rifle)?;
    Ok(TransferReport {
        mse_scratch_source,
        mse_l2,
        mse_rifle,
        ot_source: ot_distance(&pretrained, &oracles.w1)?.total,
        ot_l2,
        ot_rifle,
    })
}
