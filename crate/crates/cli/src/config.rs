//! Experiment configuration documents.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rifle_core::data::SynthSpec;
use rifle_core::graph::{mlp, res_mlp, surrogate_cnn, LossKind, Model, Perturbations};
use rifle_core::oracle::{OracleSpec, TransferConfig};
use rifle_core::schedules::PolicyConfig;
use rifle_core::trainer::TrainConfig;

use crate::error::{CliError, CliResult};

/// Maps a core validation error to a config error under `name`.
pub(crate) fn section(name: &'static str) -> impl Fn(rifle_core::Error) -> CliError {
    move |e| match e {
        rifle_core::Error::Config(m) => CliError::Config(format!("{name}.{m}")),
        rifle_core::Error::InvalidArgument(m) => CliError::Config(format!("{name}: {m}")),
        other => CliError::Config(format!("{name}: {other}")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classify,
    Oracle,
}

fn default_head_std() -> f64 {
    rifle_core::schedules::DEFAULT_DELTA
}

fn default_hidden() -> Vec<usize> {
    vec![64]
}

fn default_student_std() -> f64 {
    TransferConfig::default().student_std
}

fn default_fresh_head_std() -> f64 {
    TransferConfig::default().fresh_head_std
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Mlp {
        #[serde(default = "default_hidden")]
        hidden: Vec<usize>,
        #[serde(default = "default_head_std")]
        head_std: f64,
    },
    ResMlp {
        width: usize,
        blocks: usize,
        #[serde(default = "default_head_std")]
        head_std: f64,
    },
    Cnn {
        channels: usize,
        height: usize,
        width: usize,
        widths: Vec<usize>,
        #[serde(default = "default_head_std")]
        head_std: f64,
    },
    /// Student of the teacher-student experiment.
    Oracle {
        #[serde(default = "default_student_std")]
        student_std: f64,
        #[serde(default = "default_fresh_head_std")]
        fresh_head_std: f64,
    },
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::Mlp {
            hidden: default_hidden(),
            head_std: default_head_std(),
        }
    }
}

impl ModelConfig {
    /// Std of a freshly initialized head.
    pub fn head_std(&self) -> f64 {
        match *self {
            ModelConfig::Mlp { head_std, .. }
            | ModelConfig::ResMlp { head_std, .. }
            | ModelConfig::Cnn { head_std, .. } => head_std,
            ModelConfig::Oracle { fresh_head_std, .. } => fresh_head_std,
        }
    }

    /// Classifier for `input_dim` features and `classes` outputs.
    pub fn build(&self, input_dim: usize, classes: usize, pert: &Perturbations) -> CliResult<Model> {
        let model = match self {
            ModelConfig::Mlp { hidden, .. } => mlp(input_dim, hidden, classes, LossKind::SoftmaxCe, pert),
            ModelConfig::ResMlp { width, blocks, .. } => {
                res_mlp(input_dim, *width, *blocks, classes, LossKind::SoftmaxCe, pert)
            }
            ModelConfig::Cnn {
                channels,
                height,
                width,
                widths,
                ..
            } => {
                if channels * height * width != input_dim {
                    return Err(CliError::Config(format!(
                        "model: cnn input {channels}x{height}x{width} does not match {input_dim} dataset features"
                    )));
                }
                surrogate_cnn(*channels, *height, *width, widths, classes, pert)
            }
            ModelConfig::Oracle { .. } => {
                return Err(CliError::Config(
                    "model: arch `oracle` is only valid for task `oracle`".into(),
                ))
            }
        };
        model.map_err(|e| CliError::Config(format!("model: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synth {
        num_classes: usize,
        per_class: usize,
        #[serde(default)]
        test_per_class: Option<usize>,
        dim: usize,
        separation: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Label-first CSV files; paths are relative to the config file.
    Csv {
        train: PathBuf,
        test: PathBuf,
        #[serde(default)]
        source_train: Option<PathBuf>,
        #[serde(default)]
        source_test: Option<PathBuf>,
        num_classes: usize,
    },
    /// Teacher-student data; its seeds are replaced by each run seed.
    Oracle(OracleSpec),
}

impl DatasetConfig {
    pub fn synth_spec(&self) -> Option<SynthSpec> {
        match *self {
            DatasetConfig::Synth {
                num_classes,
                per_class,
                test_per_class,
                dim,
                separation,
                seed,
            } => Some(SynthSpec {
                num_classes,
                per_class,
                test_per_class,
                dim,
                separation,
                seed,
            }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    #[serde(default)]
    pub model: ModelConfig,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Source-task training; defaults depend on the task.
    #[serde(default)]
    pub pretrain: Option<TrainConfig>,
    /// Fine-tuning policy; for the oracle task, the policy of the
    /// re-initialization arm.
    #[serde(default)]
    pub policy: Option<PolicyConfig>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            if path.is_empty() || path == "." {
                CliError::Config(format!("config: {inner}"))
            } else {
                CliError::Config(format!("{path}: {inner}"))
            }
        })
    }

    /// Reads and validates a config. Relative dataset paths are resolved
    /// against the config file's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let DatasetConfig::Csv {
            train,
            test,
            source_train,
            source_test,
            ..
        } = &mut cfg.dataset
        {
            for p in [Some(train), Some(test), source_train.as_mut(), source_test.as_mut()]
                .into_iter()
                .flatten()
            {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        let cfg = |m: String| Err(CliError::Config(m));
        if self.seeds.is_empty() {
            return cfg("seeds: at least one required".into());
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return cfg("seeds: duplicates are not allowed".into());
        }
        if self.task == Task::Classify {
            self.train.validate().map_err(section("train"))?;
        }
        if let Some(p) = &self.pretrain {
            p.validate().map_err(section("pretrain"))?;
        }
        match (self.task, &self.dataset, &self.model) {
            (Task::Oracle, DatasetConfig::Oracle(spec), ModelConfig::Oracle { .. }) => {
                spec.validate().map_err(section("dataset"))?;
                if self.train.epochs > 0 {
                    self.train.validate().map_err(section("train"))?;
                }
            }
            (Task::Oracle, DatasetConfig::Oracle(_), _) => {
                return cfg("model: task `oracle` needs arch `oracle`".into())
            }
            (Task::Oracle, _, _) => return cfg("dataset: task `oracle` needs kind `oracle`".into()),
            (Task::Classify, DatasetConfig::Oracle(_), _) => {
                return cfg("dataset: kind `oracle` is only valid for task `oracle`".into())
            }
            (Task::Classify, _, ModelConfig::Oracle { .. }) => {
                return cfg("model: arch `oracle` is only valid for task `oracle`".into())
            }
            (Task::Classify, DatasetConfig::Synth { .. }, _) => {
                let spec = self.dataset.synth_spec().expect("synth dataset");
                if spec.separation.is_nan() || spec.separation < 0.0 {
                    return cfg(format!("dataset.separation: must be >= 0, got {}", spec.separation));
                }
            }
            (Task::Classify, DatasetConfig::Csv { .. }, _) => {}
        }
        if let Some(p) = &self.policy {
            p.resolve(self.train.epochs, 1, self.train.eta_max)
                .map_err(section("policy"))?;
        }
        Ok(())
    }

    /// Fine-tuning policy with task defaults applied.
    pub fn policy(&self) -> PolicyConfig {
        match (self.policy, self.task) {
            (Some(p), _) => p,
            (None, Task::Classify) => PolicyConfig::default(),
            (None, Task::Oracle) => TransferConfig::default().rifle,
        }
    }

    /// Source-task training config with task defaults applied.
    pub fn pretrain(&self) -> TrainConfig {
        match (&self.pretrain, self.task) {
            (Some(p), _) => p.clone(),
            (None, Task::Classify) => TrainConfig::default(),
            (None, Task::Oracle) => TransferConfig::default().source,
        }
    }

    /// Output directory: `--out` wins over `output_dir`.
    pub fn output_dir(&self, override_dir: Option<&Path>) -> CliResult<PathBuf> {
        override_dir
            .map(Path::to_path_buf)
            .or_else(|| self.output_dir.clone())
            .ok_or_else(|| CliError::Config("output_dir: required (or pass --out)".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "task": "classify",
        "dataset": {"kind": "synth", "num_classes": 3, "per_class": 4, "dim": 5, "separation": 2.0},
        "seeds": [1, 2]
    }"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.model, ModelConfig::default());
        assert_eq!(cfg.policy(), PolicyConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected_with_path() {
        let text = MINIMAL.replace("\"seeds\"", "\"train\": {\"epochz\": 3}, \"seeds\"");
        let err = ExperimentConfig::parse(&text).unwrap_err().to_string();
        assert!(err.starts_with("train"), "{err}");
        assert!(err.contains("epochz"), "{err}");
        let text = MINIMAL.replace("\"seeds\"", "\"bogus\": 1, \"seeds\"");
        assert!(ExperimentConfig::parse(&text)
            .unwrap_err()
            .to_string()
            .contains("bogus"));
        let text = MINIMAL.replace("\"dim\"", "\"colour\": 1, \"dim\"");
        assert!(ExperimentConfig::parse(&text)
            .unwrap_err()
            .to_string()
            .contains("colour"));
    }

    #[test]
    fn empty_seeds_message() {
        let cfg = ExperimentConfig::parse(&MINIMAL.replace("[1, 2]", "[]")).unwrap();
        let err = cfg.validate().unwrap_err();
        assert_eq!(err.to_string(), "seeds: at least one required");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn malformed_json_reports_location() {
        let err = ExperimentConfig::parse("{\"task\": \"classify\",\n \"seeds\": [1,}").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn oracle_task_defaults() {
        let cfg = ExperimentConfig::parse(
            r#"{"task": "oracle", "model": {"arch": "oracle", "student_std": 0.01, "fresh_head_std": 0.1},
                "dataset": {"kind": "oracle"}, "seeds": [0]}"#,
        )
        .unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.pretrain().epochs, 200);
        assert_eq!(cfg.policy().strategy, rifle_core::schedules::Strategy::Rifle);
    }

    #[test]
    fn periods_must_divide_epochs() {
        let text = MINIMAL.replace(
            "\"seeds\"",
            "\"train\": {\"epochs\": 10}, \"policy\": {\"strategy\": \"RIFLE\", \"num_periods\": 3}, \"seeds\"",
        );
        let err = ExperimentConfig::parse(&text).unwrap().validate().unwrap_err();
        assert!(err.to_string().contains("num_periods"), "{err}");
    }
}
