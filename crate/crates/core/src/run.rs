//! Scenario orchestration and the run report.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{DataSource, RunConfig};
use crate::data::{generate_synthetic, read_cifar100_binary, LabeledDataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::{evaluate_tasks, knn_evaluate, AccuracyMatrix, MetricsReport};
use crate::nn::{ArchSpec, EncoderState};
use crate::scenario::{split, TaskStream};
use crate::train::{train_task, Learner, StepSettings, TaskLog};

pub const REPORT_FORMAT: &str = "cassle-run-report/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format: String,
    pub version: String,
    pub config: RunConfig,
    /// Number of tasks actually produced by the splitter.
    pub tasks: usize,
    pub class_sets: Vec<Vec<usize>>,
    pub lr_schedule: String,
    pub predictor_init: String,
    pub initial_digest: String,
    pub checkpoint_digests: Vec<String>,
    pub task_logs: Vec<TaskLog>,
    pub accuracy: AccuracyMatrix,
    pub random_baseline: Vec<f64>,
    pub metrics: Option<MetricsReport>,
    /// Final-row weighted k-NN accuracies, when enabled.
    pub knn_accuracy: Option<Vec<f64>>,
    pub complete: bool,
    pub error: Option<String>,
    /// Exit status class of the failure, when incomplete.
    pub error_code: Option<i32>,
    pub wall_clock_seconds: Option<f64>,
}

impl RunReport {
    /// Copy with volatile fields blanked, for determinism comparisons.
    pub fn canonical(&self) -> Self {
        RunReport { wall_clock_seconds: None, ..self.clone() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// The dataset a configuration points at.
pub fn load_dataset(cfg: &RunConfig) -> Result<LabeledDataset> {
    match cfg.data.source {
        DataSource::Synthetic => generate_synthetic(&SyntheticSpec {
            n_classes: cfg.data.n_classes,
            samples_per_class: cfg.data.samples_per_class,
            input_dim: cfg.data.input_dim,
            cluster_std: cfg.data.cluster_std,
            n_domains: cfg.n_domains(),
            domain_shift_strength: cfg.data.domain_shift_strength,
            seed: cfg.data_seed(),
        }),
        DataSource::Cifar100 => {
            let path = cfg.data.path.as_deref().ok_or_else(|| Error::config("data.path", "required for cifar100"))?;
            read_cifar100_binary(Path::new(path))
        }
    }
}

/// Training stream, matching evaluation splits and the data's shape.
#[derive(Clone, Debug)]
pub struct PreparedTasks {
    pub stream: TaskStream,
    pub eval: Vec<LabeledDataset>,
    pub input_dim: usize,
    pub n_classes: usize,
}

impl PreparedTasks {
    pub fn arch(&self, cfg: &RunConfig) -> ArchSpec {
        cfg.arch.spec(self.input_dim, cfg.method, self.n_classes)
    }
}

/// Validates `cfg`, loads its data, holds out the evaluation split and cuts
/// both into tasks.
pub fn prepare_tasks(cfg: &RunConfig) -> Result<PreparedTasks> {
    cfg.validate()?;
    let ds = load_dataset(cfg)?;
    let (train_all, eval_all) = ds.stratified_split(cfg.data.eval_fraction, cfg.data_seed() ^ 0x5EED_E7A1);
    let stream = split(&train_all, cfg.scenario, cfg.tasks, cfg.seed)?;
    let eval = stream.cut(&eval_all, cfg.seed ^ 0xE7A1)?;
    Ok(PreparedTasks { stream, eval, input_dim: ds.dim(), n_classes: ds.classes().len() })
}

/// Builds the task stream, trains every task, evaluates all tasks after each
/// one and collects the report. Failures after setup yield an incomplete
/// report rather than an error. Checkpoints go to `out/checkpoints` when
/// `out` is given.
pub fn run_scenario(cfg: &RunConfig, out: Option<&Path>) -> Result<RunReport> {
    let start = Instant::now();
    let prepared = prepare_tasks(cfg)?;
    let PreparedTasks { stream, eval: eval_tasks, .. } = &prepared;
    let t = stream.len();

    let arch = prepared.arch(cfg);
    let encoder = EncoderState::init(&arch, cfg.seed)?;
    let initial_digest = checkpoint::encoder_digest(&encoder);
    let random_baseline = evaluate_tasks(&encoder, &stream.tasks, &eval_tasks, &cfg.probe)?;
    let ckpt_dir = match out {
        Some(dir) => {
            let d = dir.join("checkpoints");
            std::fs::create_dir_all(&d)?;
            Some(d)
        }
        None => None,
    };

    let settings = StepSettings {
        method: cfg.method,
        strategy: cfg.strategy,
        train: cfg.training.clone(),
        optimizer: cfg.optimizer.clone(),
        losses: cfg.losses.clone(),
        augment: cfg.augment.clone(),
        seed: cfg.seed,
    };
    let mut report = RunReport {
        format: REPORT_FORMAT.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        tasks: t,
        class_sets: stream.class_sets.clone(),
        lr_schedule: "cosine, restarted every task".to_string(),
        predictor_init: if cfg.training.persist_predictor { "persist" } else { "reinit_per_task" }.to_string(),
        initial_digest,
        checkpoint_digests: Vec::new(),
        task_logs: Vec::new(),
        accuracy: AccuracyMatrix::new(t),
        random_baseline,
        metrics: None,
        knn_accuracy: None,
        complete: false,
        error: None,
        error_code: None,
        wall_clock_seconds: None,
    };

    let mut learner = Learner::new(encoder, cfg.method, &cfg.training)?;
    let outcome = (|| -> Result<()> {
        for (j, task) in stream.tasks.iter().enumerate() {
            let log = train_task(&mut learner, task, j, &settings)?;
            report.task_logs.push(log);
            let digest = match &ckpt_dir {
                Some(d) => checkpoint::save(&learner.encoder, &d.join(format!("task_{}.csle", j + 1)))?,
                None => checkpoint::encoder_digest(&learner.encoder),
            };
            report.checkpoint_digests.push(digest);
            let row = evaluate_tasks(&learner.encoder, &stream.tasks, &eval_tasks, &cfg.probe)?;
            for (k, acc) in row.into_iter().enumerate() {
                report.accuracy.set(j, k, acc);
            }
        }
        report.metrics = Some(MetricsReport::compute(&report.accuracy, &report.random_baseline)?);
        if cfg.knn.enabled {
            let feats = |d: &LabeledDataset| learner.encoder.features(&d.samples);
            let all = LabeledDataset::concat(&stream.tasks.iter().collect::<Vec<_>>())?;
            let train_f = feats(&all)?;
            let accs = eval_tasks
                .iter()
                .map(|ev| knn_evaluate(&train_f, &all.labels, &feats(ev)?, &ev.labels, cfg.knn.k.min(all.len()), cfg.knn.temperature))
                .collect::<Result<Vec<_>>>()?;
            report.knn_accuracy = Some(accs);
        }
        Ok(())
    })();
    match outcome {
        Ok(()) => report.complete = true,
        Err(e) => {
            report.error_code = Some(e.exit_code());
            report.error = Some(e.to_string());
        }
    }
    report.wall_clock_seconds = Some(start.elapsed().as_secs_f64());
    Ok(report)
}
