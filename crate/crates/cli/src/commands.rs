//! The subcommands and the files they write.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use owssl_core::data::{generate, write_binary, write_csv};
use owssl_core::estimate::estimate_class_count;
use owssl_core::train::{evaluate, train};
use owssl_core::{Checkpoint, EpochRecord, EvalReport, Matrix, SplitDataset, TrainOutcome};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::{CliError, SCHEMA_VERSION};

pub const METRICS_FILE: &str = "metrics.json";
pub const CURVES_FILE: &str = "curves.csv";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const EVALUATION_FILE: &str = "evaluation.json";
pub const ESTIMATE_FILE: &str = "estimate.json";
pub const ESTIMATE_TABLE_FILE: &str = "estimate_table.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const DATASET_CSV_FILE: &str = "dataset.csv";
pub const DATASET_BINARY_FILE: &str = "dataset.bin";

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn finish(path: &Path, mut w: BufWriter<File>) -> Result<(), CliError> {
    w.flush().map_err(|e| io_err(path, e))
}

fn generate_data(cfg: &ExperimentConfig) -> Result<SplitDataset, CliError> {
    generate(&cfg.dataset).map_err(|e| CliError::Config(e.to_string()))
}

#[derive(Serialize)]
struct Metrics<'a> {
    schema_version: u32,
    seed: u64,
    seen_acc: f64,
    novel_acc: Option<f64>,
    all_acc: f64,
    removed_count: usize,
    mapping: &'a [Option<usize>],
    #[serde(skip_serializing_if = "Option::is_none")]
    prior: Option<&'a [f64]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    epochs: Option<usize>,
    config: &'a ExperimentConfig,
}

impl<'a> Metrics<'a> {
    fn new(cfg: &'a ExperimentConfig, report: &'a EvalReport) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: cfg.train.seed,
            seen_acc: report.seen_acc,
            novel_acc: report.novel_acc,
            all_acc: report.all_acc,
            removed_count: report.removed_count,
            mapping: &report.mapping,
            prior: None,
            epochs: None,
            config: cfg,
        }
    }
}

/// Per-epoch history with one `prior_j` column per head class.
pub fn write_curves<W: Write>(
    history: &[EpochRecord],
    num_classes: usize,
    w: W,
) -> Result<(), CliError> {
    let mut out = csv::Writer::from_writer(w);
    let fail = |e: csv::Error| CliError::Runtime(format!("writing curves: {e}"));
    let mut header: Vec<String> = [
        "epoch",
        "lr",
        "loss",
        "seen_acc",
        "novel_acc",
        "all_acc",
        "hard_fraction",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((0..num_classes).map(|j| format!("prior_{j}")));
    out.write_record(&header).map_err(fail)?;
    for r in history {
        let mut row = vec![
            r.epoch.to_string(),
            r.lr.to_string(),
            r.loss.to_string(),
            r.seen_acc.to_string(),
            r.novel_acc.map(|v| v.to_string()).unwrap_or_default(),
            r.all_acc.to_string(),
            r.hard_fraction.to_string(),
        ];
        row.extend(r.prior.iter().map(|p| p.to_string()));
        out.write_record(&row).map_err(fail)?;
    }
    out.flush()
        .map_err(|e| CliError::Runtime(format!("writing curves: {e}")))
}

fn write_confusion(dir: &Path, report: &EvalReport) -> Result<(), CliError> {
    let path = dir.join(CONFUSION_FILE);
    let mut w = create(&path)?;
    report.write_confusion_csv(&mut w)?;
    finish(&path, w)
}

/// Generates the dataset, trains, and writes metrics, curves, the
/// checkpoint and optionally the confusion matrix into `out`.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<TrainOutcome, CliError> {
    cfg.validate()?;
    create_dir(out)?;
    let data = generate_data(cfg)?;
    info!(
        "training on {} labeled and {} unlabeled samples for {} epochs",
        data.labeled_y.len(),
        data.unlabeled_x.rows(),
        cfg.train.epochs
    );
    let outcome = train(&data, &cfg.train)?;
    info!(
        "seen {:.4} novel {:?} all {:.4}",
        outcome.report.seen_acc, outcome.report.novel_acc, outcome.report.all_acc
    );

    let metrics = Metrics {
        prior: Some(outcome.prior.fractions()),
        epochs: Some(outcome.history.len()),
        ..Metrics::new(cfg, &outcome.report)
    };
    write_json(&out.join(METRICS_FILE), &metrics)?;

    let path = out.join(CURVES_FILE);
    let mut w = create(&path)?;
    write_curves(&outcome.history, outcome.params.num_classes(), &mut w)?;
    finish(&path, w)?;

    let path = out.join(CHECKPOINT_FILE);
    let mut text = Checkpoint::from_params(&outcome.params).to_json()?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| io_err(&path, e))?;

    if cfg.emit_confusion {
        write_confusion(out, &outcome.report)?;
    }
    Ok(outcome)
}

/// Scores a saved checkpoint on the test split of the configured dataset.
pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    out: &Path,
    checkpoint: &Path,
) -> Result<EvalReport, CliError> {
    cfg.validate()?;
    let text = fs::read_to_string(checkpoint).map_err(|e| io_err(checkpoint, e))?;
    let params = Checkpoint::from_json(&text)
        .and_then(Checkpoint::into_params)
        .map_err(|e| io_err(checkpoint, e))?;
    let data = generate_data(cfg)?;
    if params.input_dim() != data.dim() {
        return Err(CliError::Config(format!(
            "checkpoint expects {} input features but the dataset has {}",
            params.input_dim(),
            data.dim()
        )));
    }
    create_dir(out)?;
    let report = evaluate(&params, &data)?;
    write_json(&out.join(EVALUATION_FILE), &Metrics::new(cfg, &report))?;
    if cfg.emit_confusion {
        write_confusion(out, &report)?;
    }
    Ok(report)
}

#[derive(Serialize)]
struct EstimateFile<'a> {
    schema_version: u32,
    seed: u64,
    estimate: usize,
    ground_truth: usize,
    labeled_classes: usize,
    top_k: &'a [usize],
    table: &'a str,
}

/// Estimates the total class count from labeled and unlabeled features.
pub fn cmd_estimate(cfg: &ExperimentConfig, out: &Path) -> Result<usize, CliError> {
    cfg.validate()?;
    create_dir(out)?;
    let data = generate_data(cfg)?;
    let x = Matrix::vstack(&[&data.labeled_x, &data.unlabeled_x])?;
    let labeled_idx: Vec<usize> = (0..data.labeled_y.len()).collect();
    let est = estimate_class_count(&x, &labeled_idx, &data.labeled_y, &cfg.estimator)?;
    info!(
        "estimated {} classes (true {})",
        est.estimate,
        data.num_classes()
    );

    let path = out.join(ESTIMATE_TABLE_FILE);
    let mut w = create(&path)?;
    est.write_table_csv(&mut w)?;
    finish(&path, w)?;
    write_json(
        &out.join(ESTIMATE_FILE),
        &EstimateFile {
            schema_version: SCHEMA_VERSION,
            seed: cfg.estimator.seed,
            estimate: est.estimate,
            ground_truth: data.num_classes(),
            labeled_classes: data.num_seen,
            top_k: &est.top_k,
            table: ESTIMATE_TABLE_FILE,
        },
    )?;
    Ok(est.estimate)
}

/// Writes the generated dataset as CSV and in the binary format.
pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<SplitDataset, CliError> {
    cfg.dataset
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    create_dir(out)?;
    let data = generate_data(cfg)?;
    let path = out.join(DATASET_CSV_FILE);
    let mut w = create(&path)?;
    write_csv(&data, &mut w)?;
    finish(&path, w)?;
    let path = out.join(DATASET_BINARY_FILE);
    let mut w = create(&path)?;
    write_binary(&data, &mut w)?;
    finish(&path, w)?;
    Ok(data)
}

/// Reads back a dataset written by [`cmd_gen_data`].
pub fn read_dataset(path: &Path) -> Result<SplitDataset, CliError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let r = BufReader::new(file);
    let data = if path.extension().is_some_and(|e| e == "csv") {
        owssl_core::data::read_csv(r)
    } else {
        owssl_core::data::read_binary(r)
    };
    data.map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Share of all classes that are novel; the class total stays fixed.
    NovelFraction,
    /// Base training temperature.
    Temperature,
    /// Relative error of the novel class count used for the head; the seen
    /// count is always known.
    ClassEstimateError,
    /// Ratio of the largest to the smallest class size.
    ImbalanceFactor,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::NovelFraction => "novel_fraction",
            SweepAxis::Temperature => "temperature",
            SweepAxis::ClassEstimateError => "class_estimate_error",
            SweepAxis::ImbalanceFactor => "imbalance_factor",
        }
    }

    /// The config for one sweep point.
    pub fn apply(self, base: &ExperimentConfig, value: f64) -> Result<ExperimentConfig, CliError> {
        let mut cfg = base.clone();
        let bad = |why: &str| {
            Err(CliError::Config(format!(
                "{} = {value}: {why}",
                self.name()
            )))
        };
        if !value.is_finite() {
            return bad("not a number");
        }
        let total = cfg.dataset.num_seen + cfg.dataset.num_novel;
        match self {
            SweepAxis::NovelFraction => {
                if !(0.0..1.0).contains(&value) {
                    return bad("must be in [0, 1)");
                }
                let novel = (total as f64 * value).round() as usize;
                if novel >= total {
                    return bad("leaves no seen class");
                }
                cfg.dataset.num_novel = novel;
                cfg.dataset.num_seen = total - novel;
                cfg.train.num_novel_override = None;
            }
            SweepAxis::Temperature => cfg.train.temperature = value,
            SweepAxis::ClassEstimateError => {
                let novel = (cfg.dataset.num_novel as f64 * (1.0 + value)).round();
                if novel < 1.0 {
                    return bad("head would have no novel column");
                }
                cfg.train.num_novel_override = Some(novel as usize);
            }
            SweepAxis::ImbalanceFactor => cfg.dataset.imbalance_factor = value,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `0.1`, `-25%` and similar sweep values.
pub fn parse_value(s: &str) -> Result<f64, CliError> {
    let s = s.trim();
    let parsed = match s.strip_suffix('%') {
        Some(pct) => pct.trim().parse::<f64>().map(|v| v / 100.0),
        None => s.parse::<f64>(),
    };
    parsed.map_err(|_| CliError::Config(format!("cannot parse sweep value `{s}`")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub head_size: usize,
    pub report: EvalReport,
}

/// Trains once per value into `out/<axis>_<i>` and collects a summary in
/// `out/sweep.csv`. All points share the base seed.
pub fn cmd_sweep(
    cfg: &ExperimentConfig,
    out: &Path,
    axis: SweepAxis,
    values: &[f64],
) -> Result<Vec<SweepRow>, CliError> {
    if values.is_empty() {
        return Err(CliError::Config("sweep needs at least one value".into()));
    }
    // Reject every bad value before spending time on training.
    let points = values
        .iter()
        .map(|&v| axis.apply(cfg, v))
        .collect::<Result<Vec<_>, _>>()?;
    create_dir(out)?;
    let mut rows = Vec::with_capacity(points.len());
    for (i, (point, &value)) in points.iter().zip(values).enumerate() {
        info!("{} = {value}", axis.name());
        let dir: PathBuf = out.join(format!("{}_{i}", axis.name()));
        let outcome = cmd_train(point, &dir)?;
        rows.push(SweepRow {
            value,
            head_size: outcome.params.num_classes(),
            report: outcome.report,
        });
    }

    let path = out.join(SWEEP_FILE);
    let mut w = csv::Writer::from_writer(create(&path)?);
    let fail = |e: csv::Error| io_err(&path, e);
    w.write_record([
        "axis",
        "value",
        "head_size",
        "seen_acc",
        "novel_acc",
        "all_acc",
        "removed_count",
    ])
    .map_err(fail)?;
    for r in &rows {
        w.write_record([
            axis.name().to_string(),
            r.value.to_string(),
            r.head_size.to_string(),
            r.report.seen_acc.to_string(),
            r.report
                .novel_acc
                .map(|v| v.to_string())
                .unwrap_or_default(),
            r.report.all_acc.to_string(),
            r.report.removed_count.to_string(),
        ])
        .map_err(fail)?;
    }
    w.flush().map_err(|e| io_err(&path, e))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_values_parse() {
        assert_eq!(parse_value("0.25").unwrap(), 0.25);
        assert_eq!(parse_value(" -25% ").unwrap(), -0.25);
        assert_eq!(parse_value("10").unwrap(), 10.0);
        assert!(matches!(parse_value("abc"), Err(CliError::Config(_))));
    }

    #[test]
    fn axes_edit_the_right_fields() {
        let base = ExperimentConfig::default();
        let cfg = SweepAxis::NovelFraction.apply(&base, 2.0 / 3.0).unwrap();
        assert_eq!((cfg.dataset.num_seen, cfg.dataset.num_novel), (2, 4));
        assert!(SweepAxis::NovelFraction.apply(&base, 1.0).is_err());

        let cfg = SweepAxis::ClassEstimateError.apply(&base, 0.25).unwrap();
        // round(3 · 1.25) = round(3.75)
        assert_eq!(cfg.train.num_novel_override, Some(4));
        let cfg = SweepAxis::ClassEstimateError.apply(&base, -0.25).unwrap();
        assert_eq!(cfg.train.num_novel_override, Some(2));
        assert_eq!(
            SweepAxis::ClassEstimateError
                .apply(&base, -0.5)
                .unwrap()
                .train
                .num_novel_override,
            Some(2)
        );
        assert!(SweepAxis::ClassEstimateError.apply(&base, -0.9).is_err());

        assert_eq!(
            SweepAxis::Temperature
                .apply(&base, 0.3)
                .unwrap()
                .train
                .temperature,
            0.3
        );
        assert!(SweepAxis::Temperature.apply(&base, 0.0).is_err());
        assert_eq!(
            SweepAxis::ImbalanceFactor
                .apply(&base, 20.0)
                .unwrap()
                .dataset
                .imbalance_factor,
            20.0
        );
        assert!(SweepAxis::ImbalanceFactor.apply(&base, 0.5).is_err());
    }

    #[test]
    fn curves_header_without_epochs() {
        let mut buf = Vec::new();
        write_curves(&[], 3, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,lr,loss,seen_acc,novel_acc,all_acc,hard_fraction,prior_0,prior_1,prior_2\n"
        );
    }
}
