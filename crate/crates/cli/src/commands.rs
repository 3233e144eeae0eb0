//! Subcommand drivers. Each seed is an independent run; seeds are spread
//! over a worker pool and every output file is written atomically.

use std::path::{Path, PathBuf};

use serde::Serialize;

use rifle_core::data::{make_synth_classification, Dataset};
use rifle_core::graph::{init_params, Model, Perturbations};
use rifle_core::oracle::{run_transfer, TransferConfig, TransferReport};
use rifle_core::params::Role;
use rifle_core::trainer::{match_probe_layers, train, TelemetryRecord, TrainConfig};
use rifle_core::{ParamStore, Rng};

use crate::config::{section, DatasetConfig, ExperimentConfig, ModelConfig, Task};
use crate::csvio::{read_dataset, render_dataset, render_gradnorms, render_telemetry, write_atomic};
use crate::error::{CliError, CliResult};

pub const SEED_OFFSET_ENV: &str = "RIFLE_LAB_SEED_OFFSET";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
}

/// Seed shift from the environment; 0 when unset.
pub fn seed_offset() -> CliResult<i64> {
    match std::env::var(SEED_OFFSET_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("{SEED_OFFSET_ENV}: `{v}` is not an integer"))),
        Err(std::env::VarError::NotPresent) => Ok(0),
        Err(e) => Err(CliError::Config(format!("{SEED_OFFSET_ENV}: {e}"))),
    }
}

fn effective_seeds(cfg: &ExperimentConfig, offset: i64) -> Vec<u64> {
    cfg.seeds.iter().map(|s| s.wrapping_add_signed(offset)).collect()
}

/// Runs `f` for every seed, in parallel when enabled, returning results in
/// seed order.
fn for_each_seed<T, F>(seeds: &[u64], jobs: Option<usize>, f: F) -> CliResult<Vec<(u64, CliResult<T>)>>
where
    T: Send,
    F: Fn(u64) -> CliResult<T> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        let run = || seeds.par_iter().map(|&s| (s, f(s))).collect();
        match jobs {
            Some(n) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| CliError::Config(format!("--jobs: {e}")))?;
                Ok(pool.install(run))
            }
            None => Ok(run()),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = jobs;
        Ok(seeds.iter().map(|&s| (s, f(s))).collect())
    }
}

fn split_results<T>(results: Vec<(u64, CliResult<T>)>) -> CliResult<Vec<(u64, T)>> {
    let total = results.len();
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for (seed, r) in results {
        match r {
            Ok(v) => ok.push((seed, v)),
            Err(e) => failures.push((seed, e.to_string())),
        }
    }
    if failures.is_empty() {
        Ok(ok)
    } else {
        Err(CliError::Seeds { total, failures })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    write_atomic(path, &text)
}

/// Config as actually run, with task defaults filled in.
fn resolved(cfg: &ExperimentConfig) -> ExperimentConfig {
    let mut echo = cfg.clone();
    echo.policy = Some(cfg.policy());
    echo.pretrain = Some(cfg.pretrain());
    echo
}

/// Datasets for a classification run.
#[derive(Debug, Clone)]
pub struct ClassifyData {
    pub train: Dataset,
    pub test: Dataset,
    /// Source task for pretraining, with its held-out split.
    pub source: Option<(Dataset, Dataset)>,
}

pub fn load_classify_data(cfg: &ExperimentConfig) -> CliResult<ClassifyData> {
    match &cfg.dataset {
        DatasetConfig::Synth { .. } => {
            let spec = cfg.dataset.synth_spec().expect("synth dataset");
            let s = make_synth_classification(&spec).map_err(section("dataset"))?;
            Ok(ClassifyData {
                train: s.target_train,
                test: s.target_test,
                source: Some((s.source_train, s.source_test)),
            })
        }
        DatasetConfig::Csv {
            train,
            test,
            source_train,
            source_test,
            num_classes,
        } => {
            let c = Some(*num_classes);
            let source = match source_train {
                Some(st) => {
                    let s = read_dataset(st, c)?;
                    let t = match source_test {
                        Some(p) => read_dataset(p, c)?,
                        None => s.clone(),
                    };
                    Some((s, t))
                }
                None => None,
            };
            let data = ClassifyData {
                train: read_dataset(train, c)?,
                test: read_dataset(test, c)?,
                source,
            };
            if data.test.dim() != data.train.dim()
                || data.source.as_ref().is_some_and(|(s, _)| s.dim() != data.train.dim())
            {
                return Err(CliError::Config(
                    "dataset: files disagree on the number of features".into(),
                ));
            }
            Ok(data)
        }
        DatasetConfig::Oracle(_) => Err(CliError::Config("dataset: kind `oracle` needs task `oracle`".into())),
    }
}

/// Outcome of one seeded classification run.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub telemetry: Vec<TelemetryRecord>,
}

impl SeedRun {
    pub fn last(&self) -> &TelemetryRecord {
        self.telemetry.last().expect("at least one epoch")
    }
}

fn classes(data: &ClassifyData) -> usize {
    data.train.num_classes().expect("classification data")
}

/// Model for the fine-tuning run, including policy perturbation layers.
pub fn target_model(cfg: &ExperimentConfig, data: &ClassifyData) -> CliResult<Model> {
    cfg.model
        .build(data.train.dim(), classes(data), &cfg.policy().perturbations())
}

/// Pretrains on the source task (if any) and returns fine-tuning
/// parameters: the pretrained backbone, a fresh head and the frozen start
/// point.
pub fn initial_params(cfg: &ExperimentConfig, data: &ClassifyData, model: &Model, seed: u64) -> CliResult<ParamStore> {
    let root = Rng::new(seed);
    let head_std = cfg.model.head_std();
    let mut params = init_params(model, &mut root.derive("init"), head_std)?;
    if let Some((src_train, src_test)) = &data.source {
        let src_classes = src_train.num_classes().expect("classification data");
        let src_model = cfg
            .model
            .build(src_train.dim(), src_classes, &Perturbations::default())?;
        let mut src = init_params(&src_model, &mut root.derive("init"), head_std)?;
        src.freeze_start_point();
        let pre = TrainConfig {
            seed: root.derive("pretrain").next_u64(),
            probe_layers: Vec::new(),
            ..cfg.pretrain()
        };
        train(&src_model, &mut src, src_train, src_test, &pre)?;
        for i in 0..params.len() {
            if params.role(i) == Role::Backbone {
                let name = params.entries()[i].name.clone();
                let value = src.get(&name).expect("source shares the backbone").clone();
                params.set(&name, value)?;
            }
        }
    }
    params.freeze_start_point();
    Ok(params)
}

/// One full classification run: optional pretraining, then fine-tuning.
pub fn run_classify_seed(cfg: &ExperimentConfig, data: &ClassifyData, seed: u64) -> CliResult<SeedRun> {
    let model = target_model(cfg, data)?;
    let mut params = initial_params(cfg, data, &model, seed)?;
    let tc = TrainConfig {
        seed,
        policy: cfg.policy(),
        ..cfg.train.clone()
    };
    let telemetry = train(&model, &mut params, &data.train, &data.test, &tc)?;
    Ok(SeedRun { seed, telemetry })
}

/// Fails fast (exit 2) on probe patterns that match nothing.
fn preflight(cfg: &ExperimentConfig, data: &ClassifyData) -> CliResult<()> {
    let model = target_model(cfg, data)?;
    let params = init_params(&model, &mut Rng::new(0), cfg.model.head_std())?;
    match_probe_layers(&params, &cfg.train.probe_layers).map_err(section("train"))?;
    cfg.train.schedule(data.train.len()).map_err(section("policy"))?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub train_loss: f64,
    pub train_top1: f64,
    pub test_loss: f64,
    pub test_top1: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub config: ExperimentConfig,
    pub seed_offset: i64,
    pub runs: Vec<SeedMetrics>,
    pub mean_test_top1: f64,
    pub std_test_top1: f64,
    pub mean_test_loss: f64,
    pub std_test_loss: f64,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn summarize(cfg: &ExperimentConfig, offset: i64, runs: &[SeedRun]) -> TrainSummary {
    let metrics: Vec<SeedMetrics> = runs
        .iter()
        .map(|r| {
            let l = r.last();
            SeedMetrics {
                seed: r.seed,
                train_loss: l.train_loss,
                train_top1: l.train_top1,
                test_loss: l.test_loss,
                test_top1: l.test_top1,
            }
        })
        .collect();
    let (mean_test_top1, std_test_top1) = mean_std(&metrics.iter().map(|m| m.test_top1).collect::<Vec<_>>());
    let (mean_test_loss, std_test_loss) = mean_std(&metrics.iter().map(|m| m.test_loss).collect::<Vec<_>>());
    TrainSummary {
        config: resolved(cfg),
        seed_offset: offset,
        runs: metrics,
        mean_test_top1,
        std_test_top1,
        mean_test_loss,
        std_test_loss,
    }
}

fn load_checked(config_path: &Path, task: Task) -> CliResult<ExperimentConfig> {
    let cfg = ExperimentConfig::load(config_path)?;
    if cfg.task != task {
        return Err(CliError::Config(format!(
            "task: expected `{}` for this command",
            match task {
                Task::Classify => "classify",
                Task::Oracle => "oracle",
            }
        )));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn classify(config_path: &Path, opts: &RunOptions, telemetry: bool) -> CliResult<PathBuf> {
    let cfg = load_checked(config_path, Task::Classify)?;
    if !telemetry && cfg.train.probe_layers.is_empty() {
        return Err(CliError::Config(
            "train.probe_layers: grad-probe needs at least one pattern".into(),
        ));
    }
    let out = cfg.output_dir(opts.out.as_deref())?;
    let offset = seed_offset()?;
    let data = load_classify_data(&cfg)?;
    preflight(&cfg, &data)?;
    let seeds = effective_seeds(&cfg, offset);
    let results = for_each_seed(&seeds, opts.jobs, |seed| {
        let run = run_classify_seed(&cfg, &data, seed)?;
        if telemetry {
            write_atomic(
                &out.join(format!("telemetry_{seed}.csv")),
                &render_telemetry(&run.telemetry),
            )?;
        }
        write_atomic(
            &out.join(format!("gradnorm_{seed}.csv")),
            &render_gradnorms(&run.telemetry),
        )?;
        Ok(run)
    })?;
    let runs: Vec<SeedRun> = split_results(results)?.into_iter().map(|(_, r)| r).collect();
    if telemetry {
        write_json(&out.join("summary.json"), &summarize(&cfg, offset, &runs))?;
    }
    Ok(out)
}

/// `train`: per-seed telemetry and gradient-norm CSVs plus `summary.json`.
pub fn cmd_train(config_path: &Path, opts: &RunOptions) -> CliResult<PathBuf> {
    classify(config_path, opts, true)
}

/// `grad-probe`: gradient-norm CSVs only.
pub fn cmd_grad_probe(config_path: &Path, opts: &RunOptions) -> CliResult<PathBuf> {
    classify(config_path, opts, false)
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleRun {
    pub seed: u64,
    #[serde(flatten)]
    pub report: TransferReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleSummary {
    pub config: ExperimentConfig,
    pub seed_offset: i64,
    pub runs: Vec<OracleRun>,
    pub median_mse_scratch_source: f64,
    pub median_mse_l2: f64,
    pub median_mse_rifle: f64,
    pub median_ot_source: f64,
    pub median_ot_l2: f64,
    pub median_ot_rifle: f64,
}

pub fn transfer_config(cfg: &ExperimentConfig) -> TransferConfig {
    let (student_std, fresh_head_std) = match cfg.model {
        ModelConfig::Oracle {
            student_std,
            fresh_head_std,
        } => (student_std, fresh_head_std),
        _ => {
            let d = TransferConfig::default();
            (d.student_std, d.fresh_head_std)
        }
    };
    TransferConfig {
        source: cfg.pretrain(),
        target: cfg.train.clone(),
        rifle: cfg.policy(),
        student_std,
        fresh_head_std,
    }
}

pub fn summarize_oracle(cfg: &ExperimentConfig, offset: i64, runs: Vec<OracleRun>) -> OracleSummary {
    let med = |f: fn(&TransferReport) -> f64| median(&runs.iter().map(|r| f(&r.report)).collect::<Vec<_>>());
    OracleSummary {
        config: resolved(cfg),
        seed_offset: offset,
        median_mse_scratch_source: med(|r| r.mse_scratch_source),
        median_mse_l2: med(|r| r.mse_l2),
        median_mse_rifle: med(|r| r.mse_rifle),
        median_ot_source: med(|r| r.ot_source),
        median_ot_l2: med(|r| r.ot_l2),
        median_ot_rifle: med(|r| r.ot_rifle),
        runs,
    }
}

/// `oracle`: per-seed `oracle_<seed>.json` and the `oracle_summary.json`
/// medians.
pub fn cmd_oracle(config_path: &Path, opts: &RunOptions) -> CliResult<PathBuf> {
    let cfg = load_checked(config_path, Task::Oracle)?;
    let out = cfg.output_dir(opts.out.as_deref())?;
    let offset = seed_offset()?;
    let DatasetConfig::Oracle(spec) = cfg.dataset else {
        unreachable!("validated")
    };
    let tc = transfer_config(&cfg);
    let seeds = effective_seeds(&cfg, offset);
    let results = for_each_seed(&seeds, opts.jobs, |seed| {
        let run = OracleRun {
            seed,
            report: run_transfer(&spec, &tc, seed)?,
        };
        write_json(&out.join(format!("oracle_{seed}.json")), &run)?;
        Ok(run)
    })?;
    let runs = split_results(results)?.into_iter().map(|(_, r)| r).collect();
    write_json(&out.join("oracle_summary.json"), &summarize_oracle(&cfg, offset, runs))?;
    Ok(out)
}

/// `make-data`: writes the synthetic source/target train/test CSVs.
pub fn cmd_make_data(config_path: &Path, opts: &RunOptions) -> CliResult<PathBuf> {
    let cfg = ExperimentConfig::load(config_path)?;
    let Some(spec) = cfg.dataset.synth_spec() else {
        return Err(CliError::Config("dataset: make-data needs kind `synth`".into()));
    };
    let out = cfg.output_dir(opts.out.as_deref())?;
    let s = make_synth_classification(&spec).map_err(section("dataset"))?;
    for (name, d) in [
        ("source_train", &s.source_train),
        ("source_test", &s.source_test),
        ("target_train", &s.target_train),
        ("target_test", &s.target_test),
    ] {
        write_atomic(&out.join(format!("{name}.csv")), &render_dataset(d))?;
    }
    Ok(out)
}
