//! `alfa ablate`: run a named grid of update-rule variants on the configured
//! task family and tabulate mean query loss with confidence intervals.
//!
//! Grids:
//! - `table5`: learning-state conditioning (weight-only / gradient-only / both)
//! - `table6`: alpha and beta, per-step vs per-layer, fixed vs adaptive
//! - `steps`: plain SGD at 5 steps plus the adaptive rule at 1..=5 steps

use std::fs;
use std::io::Write;
use std::path::Path;

use alfa_core::config::RunConfig;
use alfa_core::element::{Dtype, Element};
use alfa_core::error::Result;
use alfa_core::inner_loop::{BetaMode, HyperMode, Rule};
use alfa_core::state::StateMode;
use alfa_core::trainer::{EvalReport, Trainer};

use crate::{env_threads, GridName};

struct Cell {
    name: String,
    cfg: RunConfig,
}

fn cells(base: &RunConfig, grid: GridName) -> Vec<Cell> {
    let alfa_full = |cfg: &mut RunConfig| {
        cfg.update_rule.rule = Rule::Alfa;
        cfg.update_rule.alpha_mode = HyperMode::GeneratedFull;
        cfg.update_rule.beta_mode = BetaMode::GeneratedFull;
    };
    match grid {
        GridName::Table5 => [
            ("weight-only", StateMode::WeightOnly),
            ("gradient-only", StateMode::GradientOnly),
            ("weight+gradient", StateMode::Both),
        ]
        .into_iter()
        .map(|(name, mode)| {
            let mut cfg = base.clone();
            alfa_full(&mut cfg);
            cfg.update_rule.state_mode = mode;
            Cell { name: name.into(), cfg }
        })
        .collect(),
        GridName::Table6 => {
            let alpha_cells = [
                ("alpha per-step fixed", HyperMode::MetaFixedPerStep),
                ("alpha per-step adaptive", HyperMode::GeneratedPerStep),
                ("alpha per-layer fixed", HyperMode::MetaFixedPerLayer),
                ("alpha per-layer adaptive", HyperMode::GeneratedPerLayer),
            ]
            .into_iter()
            .map(|(name, mode)| {
                let mut cfg = base.clone();
                cfg.update_rule.rule = Rule::Alfa;
                cfg.update_rule.alpha_mode = mode;
                cfg.update_rule.beta_mode = BetaMode::Off;
                Cell { name: name.into(), cfg }
            });
            let beta_cells = [
                ("beta per-step fixed", BetaMode::MetaFixedPerStep),
                ("beta per-step adaptive", BetaMode::GeneratedPerStep),
                ("beta per-layer fixed", BetaMode::MetaFixedPerLayer),
                ("beta per-layer adaptive", BetaMode::GeneratedPerLayer),
            ]
            .into_iter()
            .map(|(name, mode)| {
                let mut cfg = base.clone();
                cfg.update_rule.rule = Rule::Alfa;
                cfg.update_rule.alpha_mode = HyperMode::Constant;
                cfg.update_rule.beta_mode = mode;
                Cell { name: name.into(), cfg }
            });
            alpha_cells.chain(beta_cells).collect()
        }
        GridName::Steps => {
            let mut out = Vec::new();
            let mut maml = base.clone();
            maml.update_rule.rule = Rule::Sgd;
            maml.update_rule.alpha_mode = HyperMode::Constant;
            maml.update_rule.beta_mode = BetaMode::Off;
            maml.update_rule.steps = 5;
            out.push(Cell { name: "sgd step 5".into(), cfg: maml });
            for s in 1..=5 {
                let mut cfg = base.clone();
                alfa_full(&mut cfg);
                cfg.update_rule.steps = s;
                out.push(Cell { name: format!("adaptive step {s}"), cfg });
            }
            out
        }
    }
}

pub fn run(config: &Path, grid: GridName, out: &Path) -> Result<()> {
    let base = RunConfig::from_file(config)?;
    match base.train.precision {
        Dtype::F64 => run_typed::<f64>(&base, grid, out),
        Dtype::F32 => run_typed::<f32>(&base, grid, out),
    }
}

fn run_cell<E: Element>(cell: &Cell, out: &Path) -> Result<EvalReport> {
    let dir = out.join(cell.name.replace([' ', '+'], "-"));
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(&cell.cfg.io.resolved_config_file), cell.cfg.resolved_json())?;
    let setup = cell.cfg.setup()?;
    let mut trainer = Trainer::<E>::new(setup)?;
    // Cells are parallelized across workers; inside a cell stay sequential.
    trainer.run(1, |_| {}, |_, _| {})?;
    let snapshot = serde_json::to_value(&cell.cfg)?;
    alfa_core::checkpoint::save_checkpoint(
        &dir.join(&cell.cfg.io.checkpoint_file),
        &trainer,
        &snapshot,
    )?;
    let report = trainer.eval(cell.cfg.train.eval_tasks, 1)?;
    fs::write(dir.join(&cell.cfg.io.report_file), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

fn run_typed<E: Element>(base: &RunConfig, grid: GridName, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let cells = cells(base, grid);
    let threads = env_threads().min(cells.len());
    let results: Vec<Result<EvalReport>> = {
        let out = &out;
        let mut slots: Vec<Option<Result<EvalReport>>> = (0..cells.len()).map(|_| None).collect();
        let chunk = cells.len().div_ceil(threads.max(1));
        std::thread::scope(|scope| {
            for (cell_chunk, slot_chunk) in cells.chunks(chunk).zip(slots.chunks_mut(chunk)) {
                scope.spawn(move || {
                    for (cell, slot) in cell_chunk.iter().zip(slot_chunk.iter_mut()) {
                        *slot = Some(run_cell::<E>(cell, out));
                    }
                });
            }
        });
        slots.into_iter().map(|s| s.expect("all cells ran")).collect()
    };

    let mut csv = String::from("cell,mean_query_loss,ci95_half_width,task_count\n");
    let mut text = format!("{:<26} {:>12} {:>12} {:>8}\n", "cell", "mean", "ci95", "tasks");
    for (cell, result) in cells.iter().zip(results) {
        let report = result?;
        csv.push_str(&format!(
            "{},{},{},{}\n",
            cell.name, report.mean_query_loss, report.ci95_half_width, report.task_count
        ));
        text.push_str(&format!(
            "{:<26} {:>12.4} {:>12.4} {:>8}\n",
            cell.name, report.mean_query_loss, report.ci95_half_width, report.task_count
        ));
    }
    fs::write(out.join("ablation.csv"), &csv)?;
    fs::write(out.join("ablation.txt"), &text)?;
    let mut stdout = std::io::stdout();
    stdout.write_all(text.as_bytes())?;
    Ok(())
}
