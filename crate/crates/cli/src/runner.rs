//! Turns a configuration into data, a model and a training run, and writes its artifacts.

use std::path::{Path, PathBuf};

use log::{info, warn};
use waffle_core::data::{
    load_cifar10_bin, load_idx, multimodal_preset, partition_multimodal, partition_unimodal, ClientData, LabeledDataset,
};
use waffle_core::federation::{run_training, RunOptions, TrainingHistory};
use waffle_core::metrics::fairness_report;
use waffle_core::mia::{compare_algorithms, AttackReport};
use waffle_core::{count_parameters, Algorithm, ModelConfig};

use crate::artifacts::{self, write_atomic, FinalSummary};
use crate::config::{DataSettings, DataSource, ExperimentConfig, PartitionMode, Settings};
use crate::error::{CliError, Result};

pub const IDX_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const IDX_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const CIFAR_BATCHES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];

/// What a single run produced.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub config_hash: String,
    pub history: TrainingHistory,
    /// `None` when no round was evaluated, e.g. with zero rounds.
    pub summary: Option<FinalSummary>,
}

/// The full example pool for the configured source.
pub fn load_pool(data: &DataSettings) -> Result<LabeledDataset> {
    let pool = match data.source {
        DataSource::Mnist | DataSource::Fmnist => {
            load_idx(data.dir.join(IDX_TRAIN_IMAGES), data.dir.join(IDX_TRAIN_LABELS))?
        }
        DataSource::Cifar10 => {
            let paths: Vec<PathBuf> = CIFAR_BATCHES.iter().map(|b| data.dir.join(b)).collect();
            load_cifar10_bin(&paths)?
        }
        DataSource::Synthetic => data.synthetic.generate()?,
    };
    Ok(pool)
}

/// The configured architecture, checked against the data it will see.
pub fn build_model(settings: &Settings, pool: &LabeledDataset) -> Result<ModelConfig> {
    let base = if settings.model_preset == "mlp" {
        ModelConfig::mlp(
            "mlp",
            pool.dim(),
            &settings.hidden,
            pool.classes(),
            Some(settings.hidden[0]),
        )?
        .with_factors(&settings.hidden)?
    } else {
        ModelConfig::preset(&settings.model_preset)?
    };
    let model = match &settings.factors {
        Some(f) => base
            .with_factors(f)
            .map_err(|e| CliError::key("ibp.factors", e.to_string()))?,
        None => base,
    };
    if model.input_len != pool.dim() || model.classes != pool.classes() {
        return Err(CliError::key(
            "model.preset",
            format!(
                "`{}` expects {} inputs and {} classes but the data has {} and {}",
                model.name,
                model.input_len,
                model.classes,
                pool.dim(),
                pool.classes()
            ),
        ));
    }
    Ok(model)
}

/// Partitions the pool across clients. Partitioning is seeded by `fed.seed`.
pub fn build_clients(settings: &Settings, pool: &LabeledDataset) -> Result<Vec<ClientData>> {
    let d = &settings.data;
    let seed = settings.round.seed;
    let clients = match d.partition {
        PartitionMode::Unimodal => partition_unimodal(pool, d.clients, d.z, d.test_fraction, seed)?,
        PartitionMode::Multimodal => {
            let (mut majority, mut minority) = multimodal_preset(&d.groups)?;
            if let Some(n) = d.majority_clients {
                majority.clients = n;
            }
            if let Some(n) = d.minority_clients {
                minority.clients = n;
            }
            partition_multimodal(pool, &majority, &minority, d.z, d.test_fraction, seed)?
        }
    };
    for c in &clients {
        for w in &c.warnings {
            warn!("client {}: {w}", c.id);
        }
    }
    Ok(clients)
}

fn summarize(settings: &Settings, model: &ModelConfig, history: &TrainingHistory) -> Result<Option<FinalSummary>> {
    let Some((round, eval)) = history.last_evaluation() else {
        return Ok(None);
    };
    let fairness = match settings.data.partition {
        PartitionMode::Multimodal => Some(fairness_report(&eval.clients)?),
        PartitionMode::Unimodal => None,
    };
    let partition = match settings.data.partition {
        PartitionMode::Unimodal => "unimodal",
        PartitionMode::Multimodal => "multimodal",
    };
    Ok(Some(FinalSummary {
        algorithm: settings.round.algorithm,
        model: model.name.clone(),
        partition: partition.into(),
        round,
        parameters: count_parameters(model, settings.round.algorithm),
        mean: 100.0 * eval.mean,
        majority: eval.majority.map(|m| 100.0 * m),
        minority: eval.minority.map(|m| 100.0 * m),
        fairness,
    }))
}

fn reject_sweep(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.is_sweep() {
        return Err(CliError::key(
            "sweep",
            "this configuration defines a grid; use the sweep command",
        ));
    }
    Ok(())
}

fn write_snapshot(cfg: &ExperimentConfig) -> Result<()> {
    write_atomic(
        &cfg.out_dir().join(artifacts::CONFIG_SNAPSHOT),
        cfg.snapshot().as_bytes(),
    )
}

/// Trains one configuration and writes its artifacts into its output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    reject_sweep(cfg)?;
    let settings = cfg.settings()?;
    let pool = load_pool(&settings.data)?;
    let model = build_model(&settings, &pool)?;
    let clients = build_clients(&settings, &pool)?;
    info!(
        "{} on {} clients with {} ({} parameters)",
        settings.round.algorithm,
        clients.len(),
        model.name,
        count_parameters(&model, settings.round.algorithm)
    );
    let run = run_training(&model, &settings.round, &clients, RunOptions::default())?;
    let summary = summarize(&settings, &model, &run.history)?;

    let hash = cfg.hash();
    let dir = cfg.out_dir();
    write_snapshot(cfg)?;
    write_atomic(
        &dir.join(artifacts::HISTORY),
        &artifacts::history_csv(&hash, &run.history)?,
    )?;
    write_atomic(
        &dir.join(artifacts::CLIENTS),
        &artifacts::clients_csv(&hash, &run.history)?,
    )?;
    if let Some(s) = &summary {
        write_atomic(
            &dir.join(artifacts::FINAL_ACCURACY),
            &artifacts::final_csv(&hash, std::slice::from_ref(s))?,
        )?;
        if let Some(f) = &s.fairness {
            write_atomic(&dir.join(artifacts::FAIRNESS), &artifacts::fairness_csv(&hash, f)?)?;
        }
        if settings.plots {
            let grouped = settings.data.partition == PartitionMode::Multimodal;
            for (name, bytes) in artifacts::plot_files(&hash, &run.history, grouped)? {
                write_atomic(&dir.join(name), &bytes)?;
            }
        }
    }
    Ok(RunOutcome {
        out_dir: dir.to_path_buf(),
        config_hash: hash,
        history: run.history,
        summary,
    })
}

/// Runs every grid cell in its own subdirectory and writes a summary table at the top.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Vec<(String, RunOutcome)>> {
    let cells = cfg.cells()?;
    let mut outcomes = Vec::with_capacity(cells.len());
    for (i, (name, cell)) in cells.into_iter().enumerate() {
        info!("cell {}: {}", i + 1, if name.is_empty() { "(single)" } else { &name });
        outcomes.push((name, run_experiment(&cell)?));
    }
    let rows: Vec<_> = outcomes.iter().map(|(n, o)| (n.clone(), o.summary.clone())).collect();
    let hash = cfg.hash();
    write_snapshot(cfg)?;
    write_atomic(
        &cfg.out_dir().join(artifacts::SWEEP_SUMMARY),
        &artifacts::sweep_csv(&hash, &rows)?,
    )?;
    Ok(outcomes)
}

/// Attacks each configured algorithm's intercepted update and writes the reports.
pub fn run_mia(cfg: &ExperimentConfig) -> Result<Vec<(Algorithm, AttackReport)>> {
    reject_sweep(cfg)?;
    let settings = cfg.settings()?;
    let pool = load_pool(&settings.data)?;
    let model = build_model(&settings, &pool)?;
    let reports = compare_algorithms(&pool, &model, &settings.round, &settings.mia, &settings.mia_algorithms)?;
    for (a, r) in &reports {
        info!("{a}: attack accuracy {:.4}, F1 {:.4}", r.accuracy, r.f1);
    }
    let hash = cfg.hash();
    let dir = cfg.out_dir();
    write_snapshot(cfg)?;
    write_atomic(&dir.join(artifacts::MIA_REPORT), &artifacts::mia_csv(&hash, &reports)?)?;
    write_atomic(
        &dir.join(artifacts::MIA_CLASSES),
        &artifacts::mia_classes_csv(&hash, &reports)?,
    )?;
    Ok(reports)
}

/// Trainable parameters of a named preset under an algorithm.
pub fn count_params(preset: &str, algorithm: &str) -> Result<usize> {
    let model = ModelConfig::preset(preset)?;
    let algorithm: Algorithm = algorithm.parse()?;
    Ok(count_parameters(&model, algorithm))
}

/// Loads a configuration file and applies command-line overrides.
pub fn load_config(path: &Path, seed: Option<u64>, out_dir: Option<&Path>) -> Result<ExperimentConfig> {
    ExperimentConfig::from_file(path)?.with_overrides(seed, out_dir)
}
