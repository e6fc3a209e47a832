//! `alfa train`: run meta-training, emitting the resolved config, the
//! line-oriented training log, periodic eval snapshots, checkpoints, and a
//! final evaluation report.

use std::fs;
use std::io::Write;
use std::path::Path;

use alfa_core::checkpoint::{load_checkpoint, save_checkpoint};
use alfa_core::config::RunConfig;
use alfa_core::element::{Dtype, Element};
use alfa_core::error::{Error, Result};
use alfa_core::trainer::{EvalReport, LogRecord, Trainer};

use crate::env_threads;

pub fn run(config: &Path, out: &Path, seed: Option<u64>, resume: Option<&Path>) -> Result<()> {
    let mut cfg = RunConfig::from_file(config)?;
    if let Some(seed) = seed {
        cfg.train.seed_train = seed;
        cfg.train.seed_eval = seed;
    }
    match cfg.train.precision {
        Dtype::F64 => run_typed::<f64>(&cfg, out, resume),
        Dtype::F32 => run_typed::<f32>(&cfg, out, resume),
    }
}

fn run_typed<E: Element>(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join(&cfg.io.resolved_config_file), cfg.resolved_json())?;

    let setup = cfg.setup()?;
    let snapshot = serde_json::to_value(cfg)?;
    let mut trainer: Trainer<E> = match resume {
        None => Trainer::new(setup)?,
        Some(path) => load_checkpoint(path, &setup)?.0,
    };

    let log_path = out.join(&cfg.io.log_file);
    let mut log = open_log(
        &log_path,
        "iteration,support_loss,query_loss,wall_ms",
        resume.is_some(),
        trainer.iteration,
    )?;
    let evals_path = out.join(&cfg.io.evals_file);
    let mut evals = open_log(
        &evals_path,
        "iteration,mean_query_loss,ci95_half_width,task_count",
        resume.is_some(),
        trainer.iteration,
    )?;

    let threads = env_threads();
    let ckpt_path = out.join(&cfg.io.checkpoint_file);
    while trainer.iteration < trainer.setup.train.total_iterations {
        let record: LogRecord = trainer.step(threads)?;
        writeln!(
            log,
            "{},{},{},{:.3}",
            record.iteration, record.support_loss, record.query_loss, record.wall_ms
        )?;
        let every = trainer.setup.train.eval_every;
        if every > 0 && trainer.iteration.is_multiple_of(every) {
            let report = trainer.eval(trainer.setup.train.eval_tasks, threads)?;
            writeln!(
                evals,
                "{},{},{},{}",
                trainer.iteration, report.mean_query_loss, report.ci95_half_width, report.task_count
            )?;
            save_checkpoint(&ckpt_path, &trainer, &snapshot)?;
        }
    }
    log.flush()?;
    evals.flush()?;
    save_checkpoint(&ckpt_path, &trainer, &snapshot)?;

    let report = trainer.eval(cfg.train.eval_tasks, threads)?;
    write_report(&out.join(&cfg.io.report_file), &report)?;
    Ok(())
}

fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Open a CSV log. Fresh runs truncate; resumed runs keep rows up to the
/// checkpoint iteration and continue from there.
fn open_log(
    path: &Path,
    header: &str,
    resuming: bool,
    from_iteration: u64,
) -> Result<fs::File> {
    use std::io::BufRead;
    if resuming && path.exists() {
        let file = fs::File::open(path)?;
        let mut kept = String::new();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if i == 0 {
                if line != header {
                    return Err(Error::Config(format!(
                        "existing log {} has a different header",
                        path.display()
                    )));
                }
                kept.push_str(&line);
                kept.push('\n');
                continue;
            }
            let iter: u64 = line
                .split(',')
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Config(format!("malformed log line in {}", path.display())))?;
            if iter <= from_iteration {
                kept.push_str(&line);
                kept.push('\n');
            }
        }
        fs::write(path, kept)?;
        return Ok(fs::OpenOptions::new().append(true).open(path)?);
    }
    let mut file = fs::File::create(path)?;
    writeln!(file, "{header}")?;
    Ok(file)
}
