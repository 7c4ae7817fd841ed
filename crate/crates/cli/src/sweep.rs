//! The `sweep` command: the same experiment over several seeds.

use std::io::Write;
use std::path::PathBuf;

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::run::run;

pub const SWEEP_FILE: &str = "sweep.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub final_test_err: f64,
    pub best_test_err: f64,
}

/// Runs `cfg` once per seed in `out_dir/seed-N` and writes a summary CSV.
pub fn sweep(cfg: &ExperimentConfig, seeds: &[u64], log: &mut dyn Write) -> Result<Vec<SeedResult>, CliError> {
    if seeds.is_empty() {
        return Err(CliError::Config("--seeds must name at least one seed".into()));
    }
    cfg.validate()?;
    let mut results = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut c = cfg.clone();
        c.seed = seed;
        c.out_dir = cfg.out_dir.join(format!("seed-{seed}"));
        writeln!(log, "== seed {seed}")?;
        let summary = run(&c, log)?;
        let errs = summary.metrics.iter().map(|m| m.test_err);
        results.push(SeedResult {
            seed,
            out_dir: summary.out_dir,
            final_test_err: summary.metrics.last().map_or(f64::NAN, |m| m.test_err),
            best_test_err: errs.fold(f64::NAN, f64::min),
        });
    }
    let mut w = csv::Writer::from_path(cfg.out_dir.join(SWEEP_FILE)).map_err(|e| CliError::Runtime(e.to_string()))?;
    w.write_record(["seed", "final_test_err", "best_test_err"])
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    for r in &results {
        w.write_record([r.seed.to_string(), r.final_test_err.to_string(), r.best_test_err.to_string()])
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    w.flush()?;
    Ok(results)
}
