//! Command implementations behind the `fedsim` binary. Each returns the
//! process exit code.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{error, info};

use crate::config::{parse_config_with, ExperimentConfig};
use crate::error::Error;
use crate::orchestrator::{build_partition, load_datasets, run_experiment, StopReason};
use crate::report::{compare, read_jsonl, write_compare_table, write_jsonl, write_summary_csv};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_BUDGET: i32 = 3;

fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::ConfigParse(_) | Error::Validation(_) => EXIT_VALIDATION,
        Error::BudgetExhausted { .. } => EXIT_BUDGET,
        _ => EXIT_INTERNAL,
    }
}

fn load(config_path: &Path, overrides: &[String], out: Option<&Path>) -> Result<ExperimentConfig, Error> {
    let mut overrides = overrides.to_vec();
    if let Some(dir) = out {
        overrides.push(format!("output_dir={}", serde_json::Value::from(dir.display().to_string())));
    }
    parse_config_with(config_path, &overrides)
}

/// `run`: executes the experiment and writes `rounds.jsonl`, `summary.csv`
/// and `config_resolved.json` into the output directory.
pub fn cmd_run(config_path: &Path, overrides: &[String], out: Option<&Path>) -> i32 {
    let cfg = match load(config_path, overrides, out) {
        Ok(c) => c,
        Err(e) => {
            error!("{e}");
            return exit_code_for(&e);
        }
    };
    info!("resolved config:\n{}", cfg.to_json_pretty());
    match run_and_write(&cfg) {
        Ok(code) => code,
        Err(e) => {
            error!("{e}");
            exit_code_for(&e)
        }
    }
}

fn run_and_write(cfg: &ExperimentConfig) -> Result<i32, Error> {
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (records, summary) = run_experiment(cfg)?;
    write_jsonl(&dir.join("rounds.jsonl"), &records)?;
    write_summary_csv(&dir.join("summary.csv"), &summary)?;
    let resolved = dir.join("config_resolved.json");
    fs::write(&resolved, cfg.to_json_pretty()).map_err(|e| Error::io(&resolved, e))?;
    info!(
        "{}: {} round(s), {:.3} s simulated, final accuracy {}",
        summary.strategy,
        summary.rounds_completed,
        summary.elapsed_s,
        summary.final_acc.map_or("n/a".into(), |a| format!("{a:.4}"))
    );
    if cfg.rounds > 0 && summary.rounds_completed == 0 && summary.stop_reason == StopReason::BudgetExhausted {
        error!("time budget exhausted before the first round");
        return Ok(EXIT_BUDGET);
    }
    Ok(EXIT_OK)
}

/// `compare`: time and traffic to `target` per run, with speedups relative
/// to the first directory.
pub fn cmd_compare(run_dirs: &[PathBuf], target: f64, out: &mut impl Write) -> i32 {
    let mut runs = Vec::with_capacity(run_dirs.len());
    for d in run_dirs {
        match read_jsonl(&d.join("rounds.jsonl")) {
            Ok(r) => runs.push((d.display().to_string(), r)),
            Err(e) => {
                error!("{e}");
                return exit_code_for(&e);
            }
        }
    }
    let rows = compare(&runs, target);
    match write_compare_table(out, &rows, target) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            error!("{e}");
            EXIT_INTERNAL
        }
    }
}

/// `partition-preview`: per-client class histograms, optionally exporting
/// the assignment as JSON.
pub fn cmd_partition_preview(config_path: &Path, overrides: &[String], export: Option<&Path>, out: &mut impl Write) -> i32 {
    let result = (|| -> Result<(), Error> {
        let cfg = load(config_path, overrides, None)?;
        let (train, _) = load_datasets(&cfg)?;
        let part = build_partition(&cfg, &train)?;
        let io = |e: std::io::Error| Error::io("<stdout>", e);
        write!(out, "{:>6} {:>6}", "client", "n").map_err(io)?;
        for c in 0..train.num_classes() {
            write!(out, " {:>5}", format!("c{c}")).map_err(io)?;
        }
        writeln!(out).map_err(io)?;
        for (n, h) in part.class_histogram(&train).iter().enumerate() {
            write!(out, "{n:>6} {:>6}", h.iter().sum::<usize>()).map_err(io)?;
            for v in h {
                write!(out, " {v:>5}").map_err(io)?;
            }
            writeln!(out).map_err(io)?;
        }
        if let Some(p) = export {
            let text = serde_json::to_string_pretty(&part.to_json()).expect("partition serializes");
            fs::write(p, text).map_err(|e| Error::io(p, e))?;
        }
        Ok(())
    })();
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            error!("{e}");
            exit_code_for(&e)
        }
    }
}
