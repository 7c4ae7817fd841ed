//! The `run` command: load data, train, write artifacts.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rpu_core::data::{load_cifar10_dir, load_mnist_dir, make_synthetic, normalize_pair};
use rpu_core::{train, Dataset, EpochMetrics, MetricsCsv, Network, Split};

use crate::config::{DatasetSpec, ExperimentConfig};
use crate::error::CliError;

pub const METRICS_FILE: &str = "metrics.csv";
pub const RESOLVED_CONFIG_FILE: &str = "resolved-config.toml";
pub const FINAL_CHECKPOINT: &str = "checkpoint-final.json";

pub fn checkpoint_name(epoch: usize) -> String {
    format!("checkpoint-epoch{epoch:04}.json")
}

/// Artifacts of a finished run.
#[derive(Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub metrics: Vec<EpochMetrics>,
}

pub fn load_dataset(spec: &DatasetSpec, seed: u64) -> Result<(Dataset<f32>, Dataset<f32>), CliError> {
    let dir = |p: &Option<PathBuf>| {
        p.clone()
            .ok_or_else(|| CliError::Config("dataset.path is not resolved".into()))
    };
    let data_err = |p: &Path, e: rpu_core::RpuError| CliError::Config(format!("dataset.path {}: {e}", p.display()));
    let (mut tr, mut te, normalize) = match spec {
        DatasetSpec::Mnist { path, normalize } => {
            let p = dir(path)?;
            let (a, b) = load_mnist_dir(&p).map_err(|e| data_err(&p, e))?;
            (a, b, *normalize)
        }
        DatasetSpec::Cifar10 { path, normalize } => {
            let p = dir(path)?;
            let (a, b) = load_cifar10_dir(&p).map_err(|e| data_err(&p, e))?;
            (a, b, *normalize)
        }
        DatasetSpec::Synthetic {
            classes,
            dims,
            train,
            test,
            separation,
        } => {
            let a = make_synthetic(*classes, *dims, *train, *separation, seed, Split::Train)?;
            let b = make_synthetic(*classes, *dims, *test, *separation, seed ^ 0x5eed, Split::Test)?;
            (a, b, false)
        }
    };
    if normalize {
        normalize_pair(&mut tr, &mut te)?;
    }
    Ok((tr, te))
}

/// Trains as configured. `cfg` must already be resolved; progress lines go
/// to `log`.
pub fn run(cfg: &ExperimentConfig, log: &mut dyn Write) -> Result<RunSummary, CliError> {
    cfg.validate()?;
    let (train_set, test_set) = load_dataset(&cfg.dataset, cfg.seed)?;
    if train_set.sample_shape() != cfg.network.input_shape {
        return Err(CliError::Config(format!(
            "network.input_shape {:?} does not match the data ({:?})",
            cfg.network.input_shape,
            train_set.sample_shape()
        )));
    }
    let mut net = Network::<f32>::build(&cfg.network, cfg.mode, cfg.seed)?;

    let out = &cfg.out_dir;
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::Runtime(format!("cannot create output directory {}: {e}", out.display())))?;
    std::fs::write(out.join(RESOLVED_CONFIG_FILE), cfg.to_toml()?)?;
    let sink = BufWriter::new(File::create(out.join(METRICS_FILE))?);
    let mut csv = MetricsCsv::new(sink, &net.weight_layer_names())?;

    writeln!(
        log,
        "{} train / {} test samples, {:?} mode, seed {}",
        train_set.len(),
        test_set.len(),
        cfg.mode,
        cfg.seed
    )?;
    let every = cfg.checkpoint_every;
    let metrics = train(
        &mut net,
        &train_set,
        &test_set,
        &cfg.train_config(),
        &cfg.augment,
        |m, net| {
            csv.write(m)?;
            if every > 0 && m.epoch % every == 0 {
                net.checkpoint().save(&out.join(checkpoint_name(m.epoch)))?;
            }
            writeln!(
                log,
                "epoch {:>4}  loss {:.4}  train {:6.2}%  test {:6.2}%  lr {:.5}",
                m.epoch, m.train_loss, m.train_err, m.test_err, m.lr
            )?;
            Ok(())
        },
    )?;
    net.checkpoint().save(&out.join(FINAL_CHECKPOINT))?;
    Ok(RunSummary {
        out_dir: out.clone(),
        metrics,
    })
}
