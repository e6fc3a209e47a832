//! Versioned single-file checkpoints and the hyperparameter-trajectory CSV.
//!
//! Checkpoint layout: a magic+version line, a JSON header line (config
//! snapshot, structural fields, tensor table), then the little-endian tensor
//! payload followed by its CRC32. Tensors round-trip bitwise.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::element::{Dtype, Element};
use crate::error::{Error, Result};
use crate::inner_loop::AdaptationTrace;
use crate::trainer::{Trainer, TrainerSetup};

const MAGIC: &str = "ALFA-CKPT";
const VERSION: &str = "v1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StructuralFields {
    n_units: usize,
    steps: usize,
    learner_dims: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: Dtype,
    iteration: u64,
    next_task_index: u64,
    opt_step: u64,
    structural: StructuralFields,
    config: serde_json::Value,
    tensors: Vec<TensorMeta>,
}

fn structural_of<E: Element>(trainer: &Trainer<E>) -> StructuralFields {
    let spec = &trainer.setup.learner;
    let mut dims = vec![spec.input_dim];
    dims.extend_from_slice(&spec.hidden);
    dims.push(spec.output_dim);
    StructuralFields {
        n_units: trainer.theta.n_units(),
        steps: trainer.setup.rule.steps,
        learner_dims: dims,
    }
}

/// Every state tensor of a run, in a fixed order: learner parameters, then
/// generator tensors, then optimizer moments for each trained parameter.
fn state_tensors<E: Element>(trainer: &Trainer<E>) -> Vec<(String, Tensor<E>)> {
    let mut out = Vec::new();
    for e in &trainer.theta.entries {
        out.push((format!("theta.{}", e.name), e.tensor.clone()));
    }
    if let Some(gen) = &trainer.gen {
        out.push(("gen.w1".into(), gen.w1.clone()));
        out.push(("gen.w2".into(), gen.w2.clone()));
        out.push(("gen.w3".into(), gen.w3.clone()));
        for (name, b) in [("gen.b1", &gen.b1), ("gen.b2", &gen.b2), ("gen.b3", &gen.b3)] {
            if let Some(b) = b {
                out.push((name.into(), b.clone()));
            }
        }
        out.push(("gen.post_alpha".into(), gen.post_alpha.clone()));
        out.push(("gen.post_beta".into(), gen.post_beta.clone()));
        if let Some(decay) = &gen.per_param_decay {
            for (e, d) in trainer.theta.entries.iter().zip(decay) {
                out.push((format!("gen.decay.{}", e.name), d.clone()));
            }
        }
    }
    for (i, name) in trainer.trained_names().iter().enumerate() {
        out.push((format!("opt.m.{name}"), Tensor::vector(trainer.opt.m[i].clone())));
        out.push((format!("opt.v.{name}"), Tensor::vector(trainer.opt.v[i].clone())));
    }
    out
}

/// Write the full trainer state to `path`.
pub fn save_checkpoint<E: Element>(
    path: &Path,
    trainer: &Trainer<E>,
    config_snapshot: &serde_json::Value,
) -> Result<()> {
    let tensors = state_tensors(trainer);
    let header = Header {
        dtype: E::DTYPE,
        iteration: trainer.iteration,
        next_task_index: trainer.next_task_index,
        opt_step: trainer.opt.step,
        structural: structural_of(trainer),
        config: config_snapshot.clone(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorMeta { name: name.clone(), shape: t.shape().to_vec() })
            .collect(),
    };
    let mut payload = Vec::new();
    for (_, t) in &tensors {
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes_vec());
        }
    }
    let checksum = crc32fast::hash(&payload);

    let mut buf = Vec::new();
    writeln!(buf, "{MAGIC} {VERSION}")?;
    serde_json::to_writer(&mut buf, &header)?;
    buf.push(b'\n');
    buf.extend_from_slice(&payload);
    buf.extend_from_slice(&checksum.to_le_bytes());
    fs::write(path, buf)?;
    Ok(())
}

/// Load a checkpoint into a fresh trainer built from the *runtime* setup.
///
/// Fails loudly on version or checksum problems and on structural conflicts
/// between the checkpoint and the runtime config (N, S, learner shape).
/// Returns the trainer and the stored config snapshot.
pub fn load_checkpoint<E: Element>(
    path: &Path,
    setup: &TrainerSetup,
) -> Result<(Trainer<E>, serde_json::Value)> {
    let bytes = fs::read(path)?;
    let line_end = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::CheckpointCorrupt("missing version line".into()))?;
    let version_line = std::str::from_utf8(&bytes[..line_end])
        .map_err(|_| Error::CheckpointCorrupt("version line is not UTF-8".into()))?;
    let expected = format!("{MAGIC} {VERSION}");
    if version_line != expected {
        return Err(Error::CheckpointVersion {
            found: version_line.to_string(),
            expected,
        });
    }
    let rest = &bytes[line_end + 1..];
    let header_end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::CheckpointCorrupt("missing header line".into()))?;
    let header: Header = serde_json::from_slice(&rest[..header_end])
        .map_err(|e| Error::CheckpointCorrupt(format!("bad header: {e}")))?;
    let payload_and_sum = &rest[header_end + 1..];
    if payload_and_sum.len() < 4 {
        return Err(Error::CheckpointCorrupt("truncated payload".into()));
    }
    let (payload, sum_bytes) = payload_and_sum.split_at(payload_and_sum.len() - 4);
    let stored = u32::from_le_bytes(sum_bytes.try_into().expect("4 bytes"));
    if crc32fast::hash(payload) != stored {
        return Err(Error::CheckpointCorrupt("checksum mismatch".into()));
    }
    if header.dtype != E::DTYPE {
        return Err(Error::StructuralConflict {
            field: "dtype",
            checkpoint: header.dtype.name().into(),
            runtime: E::DTYPE.name().into(),
        });
    }

    let mut trainer = Trainer::<E>::new(setup.clone())?;
    let runtime = structural_of(&trainer);
    if runtime.n_units != header.structural.n_units {
        return Err(Error::StructuralConflict {
            field: "n_units",
            checkpoint: header.structural.n_units.to_string(),
            runtime: runtime.n_units.to_string(),
        });
    }
    if runtime.steps != header.structural.steps {
        return Err(Error::StructuralConflict {
            field: "steps",
            checkpoint: header.structural.steps.to_string(),
            runtime: runtime.steps.to_string(),
        });
    }
    if runtime.learner_dims != header.structural.learner_dims {
        return Err(Error::StructuralConflict {
            field: "learner_dims",
            checkpoint: format!("{:?}", header.structural.learner_dims),
            runtime: format!("{:?}", runtime.learner_dims),
        });
    }

    // Decode tensors in header order and install them by name.
    let width = E::DTYPE.byte_width();
    let mut offset = 0;
    let mut loaded: Vec<(String, Tensor<E>)> = Vec::with_capacity(header.tensors.len());
    for meta in &header.tensors {
        let n: usize = meta.shape.iter().product();
        let end = offset + n * width;
        if end > payload.len() {
            return Err(Error::CheckpointCorrupt(format!("payload too short for {}", meta.name)));
        }
        let data: Vec<E> =
            payload[offset..end].chunks_exact(width).map(E::from_le_slice).collect();
        offset = end;
        loaded.push((meta.name.clone(), Tensor::new(meta.shape.clone(), data)?));
    }
    if offset != payload.len() {
        return Err(Error::CheckpointCorrupt("trailing bytes in payload".into()));
    }

    let expected_names: Vec<String> =
        state_tensors(&trainer).into_iter().map(|(n, _)| n).collect();
    let loaded_names: Vec<String> = loaded.iter().map(|(n, _)| n.clone()).collect();
    if expected_names != loaded_names {
        return Err(Error::StructuralConflict {
            field: "tensor table",
            checkpoint: loaded_names.join(","),
            runtime: expected_names.join(","),
        });
    }

    let trained = trainer.trained_names();
    for (name, tensor) in loaded {
        if let Some(rest) = name.strip_prefix("opt.m.") {
            let i = index_of(&trained, rest, &name)?;
            trainer.opt.m[i] = tensor.data().to_vec();
        } else if let Some(rest) = name.strip_prefix("opt.v.") {
            let i = index_of(&trained, rest, &name)?;
            trainer.opt.v[i] = tensor.data().to_vec();
        } else {
            install(&mut trainer, &name, tensor)?;
        }
    }
    trainer.iteration = header.iteration;
    trainer.next_task_index = header.next_task_index;
    trainer.opt.step = header.opt_step;
    Ok((trainer, header.config))
}

fn index_of(trained: &[String], name: &str, full: &str) -> Result<usize> {
    trained
        .iter()
        .position(|n| n == name)
        .ok_or_else(|| Error::CheckpointCorrupt(format!("unexpected optimizer slot {full}")))
}

fn install<E: Element>(trainer: &mut Trainer<E>, name: &str, tensor: Tensor<E>) -> Result<()> {
    if let Some(rest) = name.strip_prefix("theta.") {
        let entry = trainer
            .theta
            .entries
            .iter_mut()
            .find(|e| e.name == rest)
            .ok_or_else(|| Error::CheckpointCorrupt(format!("unknown tensor {name}")))?;
        entry.tensor = tensor;
        return Ok(());
    }
    let gen = trainer
        .gen
        .as_mut()
        .ok_or_else(|| Error::CheckpointCorrupt(format!("generator tensor {name} in a run without one")))?;
    match name {
        "gen.w1" => gen.w1 = tensor,
        "gen.w2" => gen.w2 = tensor,
        "gen.w3" => gen.w3 = tensor,
        "gen.b1" => gen.b1 = Some(tensor),
        "gen.b2" => gen.b2 = Some(tensor),
        "gen.b3" => gen.b3 = Some(tensor),
        "gen.post_alpha" => gen.post_alpha = tensor,
        "gen.post_beta" => gen.post_beta = tensor,
        other => {
            let rest = other
                .strip_prefix("gen.decay.")
                .ok_or_else(|| Error::CheckpointCorrupt(format!("unknown tensor {other}")))?;
            let idx = trainer
                .theta
                .entries
                .iter()
                .position(|e| e.name == rest)
                .ok_or_else(|| Error::CheckpointCorrupt(format!("unknown decay tensor {rest}")))?;
            let decay = gen
                .per_param_decay
                .as_mut()
                .ok_or_else(|| Error::CheckpointCorrupt("decay tensor in a run without decay".into()))?;
            decay[idx] = tensor;
        }
    }
    Ok(())
}

/// Serialize a float with 17 significant digits, enough to round-trip f64.
fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Write adaptation traces as CSV: one row per (task, step, unit).
pub fn export_trace(
    traces: &[AdaptationTrace],
    unit_names: &[String],
    path: &Path,
) -> Result<()> {
    if traces.is_empty() {
        return Err(Error::EmptyBatch { op: "export_trace" });
    }
    let mut out = String::from("task_id,step,unit_name,alpha,beta,support_loss\n");
    for (task_id, trace) in traces.iter().enumerate() {
        for rec in &trace.steps {
            for (unit, name) in unit_names.iter().enumerate() {
                out.push_str(&format!(
                    "{task_id},{},{name},{},{},{}\n",
                    rec.step,
                    fmt_float(rec.alpha[unit]),
                    fmt_float(rec.beta[unit]),
                    fmt_float(rec.support_loss),
                ));
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}
