use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use owssl_runner::commands::{self, parse_value, CHECKPOINT_FILE};
use owssl_runner::{CliError, ExperimentConfig, SweepAxis};

/// Open-world semi-supervised learning experiments on synthetic data.
///
/// Log verbosity follows the OWSSL_LOG environment variable
/// (error, warn, info, debug; default warn).
#[derive(Parser)]
#[command(name = "owssl", version)]
struct Cli {
    /// TOML experiment config; built-in defaults otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data generation, training and estimation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Novel class discovery: the unlabeled pool holds only novel classes.
    #[arg(long, global = true)]
    ncd: bool,
    /// Print the effective config as TOML and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics, curves and a checkpoint.
    Train,
    /// Evaluate a saved checkpoint on the configured test split.
    Evaluate {
        /// Defaults to checkpoint.json in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Estimate the number of classes by k-means sweeps.
    Estimate,
    /// Train once per value of one config axis.
    Sweep {
        #[arg(long, value_enum)]
        axis: SweepAxis,
        /// Comma-separated values; a `%` suffix divides by 100.
        #[arg(
            long,
            allow_hyphen_values = true,
            value_delimiter = ',',
            required = true
        )]
        values: Vec<String>,
    },
    /// Write the generated dataset as CSV and binary.
    GenData,
}

fn effective_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if cli.ncd {
        cfg = cfg.into_ncd();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = effective_config(&cli)?;
    if cli.print_config {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let out = cfg.output_dir.clone();
    match cli.command {
        Command::Train => {
            let outcome = commands::cmd_train(&cfg, &out)?;
            let r = &outcome.report;
            println!(
                "seen_acc {:.4}  novel_acc {}  all_acc {:.4}",
                r.seen_acc,
                r.novel_acc.map_or("n/a".to_string(), |v| format!("{v:.4}")),
                r.all_acc
            );
        }
        Command::Evaluate { checkpoint } => {
            let checkpoint = checkpoint.unwrap_or_else(|| out.join(CHECKPOINT_FILE));
            let r = commands::cmd_evaluate(&cfg, &out, &checkpoint)?;
            println!("seen_acc {:.4}  all_acc {:.4}", r.seen_acc, r.all_acc);
        }
        Command::Estimate => {
            let k = commands::cmd_estimate(&cfg, &out)?;
            println!("estimated classes {k}");
        }
        Command::Sweep { axis, values } => {
            let values = values
                .iter()
                .map(|v| parse_value(v))
                .collect::<Result<Vec<_>, _>>()?;
            let rows = commands::cmd_sweep(&cfg, &out, axis, &values)?;
            for r in rows {
                println!(
                    "{} {}: all_acc {:.4}",
                    axis.name(),
                    r.value,
                    r.report.all_acc
                );
            }
        }
        Command::GenData => {
            let data = commands::cmd_gen_data(&cfg, &out)?;
            println!(
                "{} labeled, {} unlabeled, {} test samples in {}",
                data.labeled_y.len(),
                data.unlabeled_x.rows(),
                data.test_y.len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("OWSSL_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::Path;

    const SMALL: &str = "[dataset]\nsamples_per_class = 60\ntest_per_class = 15\n\
                         [train]\nepochs = 2\nbatch_size = 32\n\
                         [estimator]\nk_max = 8\nruns_per_k = 1\ntop_values = 2\n";

    fn invoke(dir: &Path, config: &str, args: &[&str]) -> Result<(), CliError> {
        let path = dir.join("config.toml");
        std::fs::write(&path, config).unwrap();
        let path = path.display().to_string();
        let argv = ["owssl", "--config", &path]
            .into_iter()
            .chain(args.iter().copied());
        run(Cli::try_parse_from(argv).unwrap())
    }

    fn out_dir(dir: &Path) -> String {
        dir.join("out").display().to_string()
    }

    #[test]
    fn invalid_estimator_range_is_a_config_error() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = format!("{SMALL}k_min = 9\n");
        let err = invoke(
            tmp.path(),
            &cfg,
            &["estimate", "--out", &out_dir(tmp.path())],
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn unknown_config_key_is_a_config_error() {
        let tmp = tempfile::tempdir().unwrap();
        let err = invoke(tmp.path(), "[train]\nepoch = 3\n", &["train"]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn bad_sweep_value_is_a_config_error() {
        let tmp = tempfile::tempdir().unwrap();
        let args = ["sweep", "--axis", "temperature", "--values", "abc"];
        assert_eq!(invoke(tmp.path(), SMALL, &args).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn unwritable_output_is_a_runtime_error() {
        let tmp = tempfile::tempdir().unwrap();
        let blocker = tmp.path().join("file");
        std::fs::write(&blocker, "").unwrap();
        let target = blocker.join("out").display().to_string();
        let err = invoke(tmp.path(), SMALL, &["train", "--out", &target]).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn zero_epochs_leaves_only_the_curve_header() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = SMALL.replace("epochs = 2", "epochs = 0");
        invoke(tmp.path(), &cfg, &["train", "--out", &out_dir(tmp.path())]).unwrap();
        let curves = std::fs::read_to_string(tmp.path().join("out/curves.csv")).unwrap();
        assert_eq!(curves.lines().count(), 1);
        assert!(
            curves.starts_with("epoch,lr,loss,seen_acc,novel_acc,all_acc,hard_fraction,prior_0")
        );
    }

    #[test]
    fn metrics_report_accuracies_in_unit_interval() {
        let tmp = tempfile::tempdir().unwrap();
        invoke(tmp.path(), SMALL, &["train", "--out", &out_dir(tmp.path())]).unwrap();
        let text = std::fs::read_to_string(tmp.path().join("out/metrics.json")).unwrap();
        let metrics: serde_json::Value = serde_json::from_str(&text).unwrap();
        for key in ["seen_acc", "novel_acc", "all_acc"] {
            let v = metrics[key].as_f64().unwrap();
            assert!((0.0..=1.0).contains(&v), "{key} = {v}");
        }
        assert_eq!(metrics["schema_version"], 1);
        let curves = std::fs::read_to_string(tmp.path().join("out/curves.csv")).unwrap();
        assert_eq!(curves.lines().count(), 3);
    }

    #[test]
    fn temperature_sweep_writes_one_row_per_value() {
        let tmp = tempfile::tempdir().unwrap();
        let out = out_dir(tmp.path());
        let args = [
            "sweep",
            "--axis",
            "temperature",
            "--values",
            "0.05,0.1,0.5",
            "--out",
            &out,
        ];
        invoke(tmp.path(), SMALL, &args).unwrap();
        let mut reader = csv::Reader::from_path(tmp.path().join("out/sweep.csv")).unwrap();
        let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
        assert_eq!(rows.len(), 3);
        for row in rows {
            assert!(row[5].parse::<f64>().unwrap().is_finite());
        }
    }

    #[test]
    fn effective_config_round_trips_through_toml() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("config.toml");
        std::fs::write(&path, SMALL).unwrap();
        let path = path.display().to_string();
        let cli =
            Cli::try_parse_from(["owssl", "--config", &path, "--seed", "4", "--ncd", "train"])
                .unwrap();
        let cfg = effective_config(&cli).unwrap();
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.train.seed, 4);
        assert_eq!(back.dataset.labeled_fraction, 1.0);
    }

    #[test]
    fn evaluate_reproduces_training_metrics() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = out_dir(tmp.path());
        invoke(tmp.path(), SMALL, &["train", "--out", &dir]).unwrap();
        invoke(tmp.path(), SMALL, &["evaluate", "--out", &dir]).unwrap();
        let read = |name: &str| -> serde_json::Value {
            let text = std::fs::read_to_string(tmp.path().join("out").join(name)).unwrap();
            serde_json::from_str(&text).unwrap()
        };
        let (train, eval) = (read("metrics.json"), read("evaluation.json"));
        for key in ["seen_acc", "novel_acc", "all_acc"] {
            assert_eq!(train[key], eval[key], "{key}");
        }
    }
}
