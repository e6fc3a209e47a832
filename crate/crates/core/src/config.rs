//! The on-disk JSON run configuration.
//!
//! One document with `learner`, `update_rule`, `train`, `tasks`, and `io`
//! sections. The schema is strict: unknown keys anywhere are rejected before
//! any compute happens. Serializing a parsed config materializes every
//! default, which is what run directories echo.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inner_loop::UpdateRuleConfig;
use crate::learner::LearnerSpec;
use crate::tasks::{BlobFamily, SinusoidFamily, TaskFamily};
use crate::trainer::{TrainConfig, TrainerSetup};

/// File names a run writes into its output directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    pub log_file: String,
    pub evals_file: String,
    pub report_file: String,
    pub checkpoint_file: String,
    pub resolved_config_file: String,
}

impl Default for IoConfig {
    fn default() -> Self {
        IoConfig {
            log_file: "train_log.csv".into(),
            evals_file: "evals.csv".into(),
            report_file: "report.json".into(),
            checkpoint_file: "checkpoint.alfa".into(),
            resolved_config_file: "config.json".into(),
        }
    }
}

/// Task-family section: a string id plus family-specific fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TasksConfig {
    pub family: String,
    pub k_shot: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_way: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centroid_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_per_class: Option<usize>,
}

impl TasksConfig {
    pub fn to_family(&self) -> Result<TaskFamily> {
        let reject = |fields: &[(&str, bool)]| -> Result<()> {
            for (name, present) in fields {
                if *present {
                    return Err(Error::Config(format!(
                        "tasks.{name} does not apply to family \"{}\"",
                        self.family
                    )));
                }
            }
            Ok(())
        };
        match self.family.as_str() {
            "sinusoid" => {
                reject(&[
                    ("n_way", self.n_way.is_some()),
                    ("input_dim", self.input_dim.is_some()),
                    ("centroid_scale", self.centroid_scale.is_some()),
                    ("noise_scale", self.noise_scale.is_some()),
                    ("query_per_class", self.query_per_class.is_some()),
                ])?;
                Ok(TaskFamily::Sinusoid {
                    ranges: SinusoidFamily::default(),
                    k_shot: self.k_shot,
                    query_size: self.query_size.unwrap_or(100),
                })
            }
            "blobs" => {
                reject(&[("query_size", self.query_size.is_some())])?;
                Ok(TaskFamily::Blobs {
                    blobs: BlobFamily {
                        n_way: self
                            .n_way
                            .ok_or_else(|| Error::Config("tasks.n_way is required for blobs".into()))?,
                        input_dim: self
                            .input_dim
                            .ok_or_else(|| Error::Config("tasks.input_dim is required for blobs".into()))?,
                        centroid_scale: self.centroid_scale.unwrap_or(3.0),
                        noise_scale: self.noise_scale.unwrap_or(1.0),
                        query_per_class: self.query_per_class.unwrap_or(15),
                    },
                    k_shot: self.k_shot,
                })
            }
            other => Err(Error::Config(format!(
                "unknown task family \"{other}\" (registered: sinusoid, blobs)"
            ))),
        }
    }

    pub fn from_family(family: &TaskFamily) -> Self {
        match family {
            TaskFamily::Sinusoid { k_shot, query_size, .. } => TasksConfig {
                family: "sinusoid".into(),
                k_shot: *k_shot,
                query_size: Some(*query_size),
                n_way: None,
                input_dim: None,
                centroid_scale: None,
                noise_scale: None,
                query_per_class: None,
            },
            TaskFamily::Blobs { blobs, k_shot } => TasksConfig {
                family: "blobs".into(),
                k_shot: *k_shot,
                query_size: None,
                n_way: Some(blobs.n_way),
                input_dim: Some(blobs.input_dim),
                centroid_scale: Some(blobs.centroid_scale),
                noise_scale: Some(blobs.noise_scale),
                query_per_class: Some(blobs.query_per_class),
            },
        }
    }
}

/// The whole run configuration document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub learner: LearnerSpec,
    pub update_rule: UpdateRuleConfig,
    pub train: TrainConfig,
    pub tasks: TasksConfig,
    #[serde(default)]
    pub io: IoConfig,
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("schema: {e}")))?;
        cfg.setup()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config file {}: {e}", path.display()))
        })?;
        Self::from_json_str(&text)
    }

    /// Validated conversion into the trainer's setup.
    pub fn setup(&self) -> Result<TrainerSetup> {
        let setup = TrainerSetup {
            learner: self.learner.clone(),
            rule: self.update_rule,
            family: self.tasks.to_family()?,
            train: self.train.clone(),
        };
        setup.validate()?;
        Ok(setup)
    }

    /// The config with every default applied, as pretty JSON.
    pub fn resolved_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
