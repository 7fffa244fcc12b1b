//! Executes configured runs and writes their result files.
//!
//! Each cell writes `<cell>.jsonl` (a header with the full config, one
//! record per evaluated round, a summary) and `<cell>.csv` with the
//! columns `round,accuracy,loss,agg_norm`. Rounds are counted from 1.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use fedrobust::data::{load_mnist, synthetic_blobs};
use fedrobust::metrics::{summarize, LOSS_CEILING};
use fedrobust::rng::{stream, Purpose};
use fedrobust::{Architecture, Dataset, RoundLog, Simulation};
use log::info;
use serde::Serialize;

use crate::config::{Cell, ConfigError, DatasetSpec, ExperimentConfig, ModelSpec};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error(transparent)]
    Core(#[from] fedrobust::Error),
}

#[derive(Serialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record<'a> {
    Header {
        cell: &'a str,
        config: &'a ExperimentConfig,
    },
    Round {
        round: usize,
        test_accuracy: f64,
        test_loss: f64,
        aggregate_norm: f64,
        wall_ms: f64,
    },
    Summary {
        rounds: usize,
        evaluations: usize,
        final_accuracy: Option<f64>,
        best_accuracy: Option<f64>,
        final_loss: Option<f64>,
        mean_similarity: Option<f64>,
        diverged: bool,
        wall_ms: f64,
    },
}

#[derive(Serialize)]
struct CsvRow {
    round: usize,
    accuracy: f64,
    loss: f64,
    agg_norm: f64,
}

/// Paths written for one cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellOutput {
    pub name: String,
    pub jsonl: PathBuf,
    pub csv: PathBuf,
}

pub struct Loaded {
    pub train: Dataset,
    pub test: Dataset,
}

/// A relative `path` is taken from `base`.
fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

pub fn load_data(config: &ExperimentConfig, base: &Path) -> Result<Loaded, RunError> {
    let (train, test) = match &config.dataset {
        DatasetSpec::Mnist {
            dir,
            train_limit,
            test_limit,
        } => {
            let (train, test) = load_mnist(resolve(base, dir))?;
            (
                train_limit.map_or(train.clone(), |n| train.truncated(n)),
                test_limit.map_or(test.clone(), |n| test.truncated(n)),
            )
        }
        DatasetSpec::Synthetic {
            classes,
            dim,
            train_per_class,
            test_per_class,
            separation,
        } => {
            let train = synthetic_blobs(
                *classes,
                *train_per_class,
                *dim,
                *separation,
                &mut stream(config.seed, Purpose::Data, 0, 0),
            )?;
            let test = synthetic_blobs(
                *classes,
                *test_per_class,
                *dim,
                *separation,
                &mut stream(config.seed, Purpose::Data, 1, 0),
            )?;
            (train, test)
        }
    };
    info!("loaded {} training and {} test samples", train.len(), test.len());
    Ok(Loaded { train, test })
}

pub fn architecture(model: ModelSpec, data: &Dataset) -> Result<Architecture, RunError> {
    Ok(match model {
        ModelSpec::Mlp { hidden } => Architecture::mlp(data.feature_dim(), hidden, data.num_classes())?,
        ModelSpec::Logistic {} => Architecture::logistic(data.feature_dim(), data.num_classes())?,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>, RunError> {
    File::create(path).map(BufWriter::new).map_err(|source| RunError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_record(out: &mut impl Write, record: &Record<'_>, path: &Path) -> Result<(), RunError> {
    let io = |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    };
    serde_json::to_writer(&mut *out, record).map_err(|e| io(e.into()))?;
    out.write_all(b"\n").map_err(io)
}

/// Runs one cell and writes its two files into `out_dir`.
pub fn run_cell(config: &ExperimentConfig, cell: &Cell, data: &Loaded, out_dir: &Path) -> Result<CellOutput, RunError> {
    std::fs::create_dir_all(out_dir).map_err(|source| RunError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let jsonl = out_dir.join(format!("{}.jsonl", cell.name));
    let csv_path = out_dir.join(format!("{}.csv", cell.name));
    let mut json_out = create(&jsonl)?;
    let mut csv_out = csv::WriterBuilder::new().has_headers(false).from_writer(create(&csv_path)?);
    let csv_err = |source| RunError::Csv {
        path: csv_path.clone(),
        source,
    };
    // Header first so the columns exist even without rows.
    csv_out.write_record(["round", "accuracy", "loss", "agg_norm"]).map_err(csv_err)?;

    let narrowed = config.for_cell(cell);
    write_record(
        &mut json_out,
        &Record::Header {
            cell: &cell.name,
            config: &narrowed,
        },
        &jsonl,
    )?;

    let federation = config.federation();
    let arch = architecture(config.model, &data.train)?;
    let partition = config.partition.apply(
        data.train.labels(),
        config.num_clients,
        &mut stream(config.seed, Purpose::Partition, 0, 0),
    )?;
    let aggregator = cell.aggregator.resolve(config.num_clients, config.num_byzantine)?;
    let mut sim = Simulation::new(
        federation,
        arch,
        &data.train,
        &data.test,
        partition,
        &aggregator,
        cell.attack.clone(),
    )?;

    let start = Instant::now();
    let mut failure: Option<RunError> = None;
    let mut non_finite = false;
    let logs: Vec<RoundLog> = sim.run(|record| {
        let norm = record.aggregate.norm();
        non_finite |= !norm.is_finite();
        let Some(eval) = record.evaluation else {
            return;
        };
        if failure.is_some() {
            return;
        }
        let round = record.round + 1;
        let row = Record::Round {
            round,
            test_accuracy: eval.accuracy,
            test_loss: eval.loss,
            aggregate_norm: norm,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        let written = write_record(&mut json_out, &row, &jsonl).and_then(|_| {
            csv_out
                .serialize(CsvRow {
                    round,
                    accuracy: eval.accuracy,
                    loss: eval.loss,
                    agg_norm: norm,
                })
                .map_err(|source| RunError::Csv {
                    path: csv_path.clone(),
                    source,
                })
        });
        if let Err(e) = written {
            failure = Some(e);
        }
        info!("{} round {round}: accuracy {:.4}, loss {:.4}", cell.name, eval.accuracy, eval.loss);
    })?;
    if let Some(e) = failure {
        return Err(e);
    }

    let summary = summarize(&logs).ok();
    let final_loss = summary.as_ref().map(|s| s.final_loss);
    let record = Record::Summary {
        rounds: logs.len(),
        evaluations: summary.as_ref().map_or(0, |s| s.evaluations),
        final_accuracy: summary.as_ref().map(|s| s.final_accuracy),
        best_accuracy: summary.as_ref().map(|s| s.best_accuracy),
        final_loss,
        mean_similarity: summary.as_ref().and_then(|s| s.mean_similarity),
        diverged: non_finite || final_loss.is_some_and(|l| l >= LOSS_CEILING),
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    write_record(&mut json_out, &record, &jsonl)?;
    json_out.flush().map_err(|source| RunError::Io {
        path: jsonl.clone(),
        source,
    })?;
    csv_out.flush().map_err(|source| RunError::Io {
        path: csv_path.clone(),
        source,
    })?;
    Ok(CellOutput {
        name: cell.name.clone(),
        jsonl,
        csv: csv_path,
    })
}

/// Runs every cell of `config`. Relative paths in the config are taken
/// from `base`; `out_dir` overrides the configured output path.
pub fn run_all(config: &ExperimentConfig, base: &Path, out_dir: Option<&Path>) -> Result<Vec<CellOutput>, RunError> {
    config.check_files(base)?;
    let cells = config.cells()?;
    let out_dir = out_dir.map_or_else(|| resolve(base, &config.output_path), Path::to_path_buf);
    let data = load_data(config, base)?;
    cells.iter().map(|cell| run_cell(config, cell, &data, &out_dir)).collect()
}
