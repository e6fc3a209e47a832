//! `alfa eval`: evaluate a checkpoint on fresh tasks and optionally export
//! the generated-hyperparameter trajectories.

use std::path::Path;

use alfa_core::checkpoint::{export_trace, load_checkpoint};
use alfa_core::config::RunConfig;
use alfa_core::element::{Dtype, Element};
use alfa_core::error::Result;
use alfa_core::trainer::{collect_traces, meta_eval, Trainer};

use crate::env_threads;

pub fn run(config: &Path, checkpoint: &Path, tasks: usize, trace: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::from_file(config)?;
    match cfg.train.precision {
        Dtype::F64 => run_typed::<f64>(&cfg, checkpoint, tasks, trace),
        Dtype::F32 => run_typed::<f32>(&cfg, checkpoint, tasks, trace),
    }
}

fn run_typed<E: Element>(
    cfg: &RunConfig,
    checkpoint: &Path,
    tasks: usize,
    trace: Option<&Path>,
) -> Result<()> {
    let setup = cfg.setup()?;
    let (trainer, _snapshot): (Trainer<E>, _) = load_checkpoint(checkpoint, &setup)?;
    let threads = env_threads();
    let report = meta_eval(&trainer.setup, &trainer.theta, trainer.gen.as_ref(), tasks, threads)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(path) = trace {
        let traces =
            collect_traces(&trainer.setup, &trainer.theta, trainer.gen.as_ref(), tasks, threads)?;
        export_trace(&traces, &trainer.theta.unit_names(), path)?;
    }
    Ok(())
}
