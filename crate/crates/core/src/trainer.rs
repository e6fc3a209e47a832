//! The outer loop: sample task batches, adapt per task, aggregate query
//! losses, and update the meta-parameters with Adam or SGD.
//!
//! Gradient contributions are always reduced in task-index order, so a run
//! is bitwise deterministic for a given seed no matter how many worker
//! threads adapt tasks concurrently.

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradOpts, Graph, Tensor};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::hypergen::{init_generator, HyperGenerator};
use crate::inner_loop::{adapt, attach_episode, eval_query, AdaptationTrace, UpdateRuleConfig};
use crate::learner::{init_params, LearnerSpec, ParamSet};
use crate::rng::Stream;
use crate::tasks::{Task, TaskFamily};

/// What happens to the learner initialization during meta-training, and
/// whether the per-parameter decay term stands in for a learned prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// Theta sampled once, never updated; decay term enabled.
    RandomFrozen,
    /// Theta updated alongside the generator; decay term enabled.
    RandomJointlyTrained,
    /// Theta updated alongside the generator; no decay term (the trained
    /// initialization carries the prior).
    MamlJointlyTrained,
}

impl InitMode {
    pub fn trains_theta(self) -> bool {
        !matches!(self, InitMode::RandomFrozen)
    }

    pub fn uses_per_param_decay(self) -> bool {
        matches!(self, InitMode::RandomFrozen | InitMode::RandomJointlyTrained)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OuterOptimizer {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub init_mode: InitMode,
    pub meta_batch_size: usize,
    #[serde(default = "default_outer_optimizer")]
    pub outer_optimizer: OuterOptimizer,
    #[serde(default = "default_outer_lr")]
    pub outer_lr: f64,
    #[serde(default = "default_adam_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_adam_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    pub total_iterations: u64,
    /// Clip the summed meta-gradient to this global L2 norm before the
    /// update; 0 disables. Unrolled second-order gradients spike on rare
    /// task draws, and one spike can throw the generator into a region
    /// whose inner loops diverge.
    #[serde(default = "default_clip_norm")]
    pub clip_norm: f64,
    #[serde(default)]
    pub eval_every: u64,
    #[serde(default = "default_eval_tasks")]
    pub eval_tasks: usize,
    pub seed_train: u64,
    pub seed_eval: u64,
    /// Element type for all tensors in the run. 64-bit is the default; the
    /// gradcheck tolerances assume it.
    #[serde(default = "default_precision")]
    pub precision: crate::element::Dtype,
}

fn default_outer_optimizer() -> OuterOptimizer {
    OuterOptimizer::Adam
}
fn default_outer_lr() -> f64 {
    1e-3
}
fn default_adam_beta1() -> f64 {
    0.9
}
fn default_adam_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_eval_tasks() -> usize {
    200
}
fn default_clip_norm() -> f64 {
    10.0
}
fn default_precision() -> crate::element::Dtype {
    crate::element::Dtype::F64
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.meta_batch_size == 0 {
            return Err(Error::Config("meta_batch_size must be >= 1".into()));
        }
        if self.outer_lr <= 0.0 {
            return Err(Error::Config("outer_lr must be positive".into()));
        }
        Ok(())
    }
}

/// Everything that defines a run's identity, independent of precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerSetup {
    pub learner: LearnerSpec,
    pub rule: UpdateRuleConfig,
    pub family: TaskFamily,
    pub train: TrainConfig,
}

impl TrainerSetup {
    pub fn validate(&self) -> Result<()> {
        self.learner.validate()?;
        self.rule.validate()?;
        self.family.validate()?;
        self.train.validate()?;
        let (input_dim, output_dim) = self.family.learner_io();
        if self.learner.input_dim != input_dim || self.learner.output_dim != output_dim {
            return Err(Error::Config(format!(
                "learner dims ({}, {}) do not match the task family's ({input_dim}, {output_dim})",
                self.learner.input_dim, self.learner.output_dim
            )));
        }
        let classification = self.family.is_classification();
        let learner_classifies = matches!(self.learner.kind, crate::learner::LearnerKind::ClassificationMlp);
        if classification != learner_classifies {
            return Err(Error::Config(
                "learner kind does not match the task family (regression vs classification)".into(),
            ));
        }
        Ok(())
    }
}

/// One record per outer iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: u64,
    /// Mean over tasks and inner steps of the support loss.
    pub support_loss: f64,
    /// Mean over the batch of the post-adaptation query loss.
    pub query_loss: f64,
    pub wall_ms: f64,
}

/// Aggregated evaluation over freshly sampled tasks from the eval stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub task_count: usize,
    /// Mean over tasks of the query loss (MSE for regression).
    pub mean_query_loss: f64,
    /// 1.96 * stderr over per-task losses; 0 when only one task.
    pub ci95_half_width: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_accuracy: Option<f64>,
    /// Set when the interval is undefined (single task).
    pub degenerate: bool,
}

/// Result of one adaptation + query evaluation episode.
pub struct EpisodeOutcome<E> {
    pub query_loss: E,
    pub accuracy: Option<f64>,
    pub support_loss_mean: f64,
    pub trace: AdaptationTrace,
    /// Gradient values per trained tensor, in trained-list order. Empty for
    /// evaluation episodes.
    pub grads: Vec<Vec<E>>,
}

/// Names of the meta-parameters the outer loop updates, in update order.
fn trained_names<E: Element>(setup: &TrainerSetup, theta: &ParamSet<E>, gen: Option<&HyperGenerator<E>>) -> Vec<String> {
    let mut names = Vec::new();
    if setup.train.init_mode.trains_theta() {
        for e in &theta.entries {
            names.push(format!("theta.{}", e.name));
        }
    }
    if let Some(gen) = gen {
        let alpha_mode = setup.rule.alpha_mode;
        let beta_mode = setup.rule.beta_mode.as_hyper_mode();
        // An output override bypasses the MLP entirely, leaving its weights
        // outside the differentiable graph.
        let mlp_used = (alpha_mode.is_generated() || beta_mode.is_some_and(|m| m.is_generated()))
            && gen.output_override.is_none();
        if mlp_used {
            names.push("gen.w1".into());
            names.push("gen.w2".into());
            names.push("gen.w3".into());
            if gen.b1.is_some() {
                names.push("gen.b1".into());
                names.push("gen.b2".into());
                names.push("gen.b3".into());
            }
        }
        if alpha_mode.needs_generator() {
            names.push("gen.post_alpha".into());
        }
        if beta_mode.is_some_and(|m| m.needs_generator()) {
            names.push("gen.post_beta".into());
        }
        if gen.per_param_decay.is_some() {
            for e in &theta.entries {
                names.push(format!("gen.decay.{}", e.name));
            }
        }
    }
    names
}

/// Adam moment vectors aligned with the trained-parameter list.
#[derive(Debug, Clone)]
pub struct OptimizerState<E> {
    pub m: Vec<Vec<E>>,
    pub v: Vec<Vec<E>>,
    pub step: u64,
}

impl<E: Element> OptimizerState<E> {
    fn new(sizes: &[usize]) -> Self {
        OptimizerState {
            m: sizes.iter().map(|&n| vec![E::ZERO; n]).collect(),
            v: sizes.iter().map(|&n| vec![E::ZERO; n]).collect(),
            step: 0,
        }
    }
}

/// Meta-training driver. Holds the full mutable state of a run, which is
/// exactly what the checkpoint format serializes.
#[derive(Clone)]
pub struct Trainer<E: Element> {
    pub setup: TrainerSetup,
    pub theta: ParamSet<E>,
    pub gen: Option<HyperGenerator<E>>,
    pub opt: OptimizerState<E>,
    pub iteration: u64,
    pub next_task_index: u64,
}

impl<E: Element> Trainer<E> {
    pub fn new(setup: TrainerSetup) -> Result<Self> {
        setup.validate()?;
        let theta = init_params::<E>(&setup.learner, setup.train.seed_train);
        let gen = if setup.rule.needs_generator() {
            let mut gen = init_generator::<E>(
                theta.n_units(),
                setup.rule.steps,
                setup.train.seed_train,
                setup.rule.generator_config(),
            );
            if setup.train.init_mode.uses_per_param_decay() {
                gen = gen.with_per_param_decay(&theta);
            }
            Some(gen)
        } else {
            None
        };
        let sizes: Vec<usize> = {
            let names = trained_names(&setup, &theta, gen.as_ref());
            let lookup = TensorLookup { theta: &theta, gen: gen.as_ref() };
            names.iter().map(|n| lookup.get(n).expect("trained names resolve").numel()).collect()
        };
        Ok(Trainer {
            setup,
            theta,
            gen,
            opt: OptimizerState::new(&sizes),
            iteration: 0,
            next_task_index: 0,
        })
    }

    pub fn trained_names(&self) -> Vec<String> {
        trained_names(&self.setup, &self.theta, self.gen.as_ref())
    }

    /// Run one task episode against the current meta-parameters.
    pub fn run_episode(&self, task: &Task, want_grads: bool) -> Result<EpisodeOutcome<E>> {
        run_episode(
            &self.setup,
            &self.theta,
            self.gen.as_ref(),
            task,
            want_grads.then(|| self.trained_names()).as_deref(),
        )
    }

    /// One outer iteration over a fresh meta-batch. `threads` caps worker
    /// parallelism; results are reduced in task order regardless.
    pub fn step(&mut self, threads: usize) -> Result<LogRecord> {
        let start = std::time::Instant::now();
        let batch = self.setup.train.meta_batch_size;
        let seed = self.setup.train.seed_train;
        let tasks: Vec<Task> = (0..batch)
            .map(|i| self.setup.family.sample(seed, Stream::TrainTasks, self.next_task_index + i as u64))
            .collect();
        let names = self.trained_names();
        let outcomes = parallel_map(&tasks, threads, |task| {
            run_episode(&self.setup, &self.theta, self.gen.as_ref(), task, Some(&names))
        });

        let mut summed: Vec<Vec<E>> = Vec::new();
        let mut loss_sum = E::ZERO;
        let mut support_sum = 0.0;
        for (i, outcome) in outcomes.into_iter().enumerate() {
            let outcome = outcome.map_err(|e| e.with_task_context(self.iteration, i))?;
            loss_sum = loss_sum + outcome.query_loss;
            support_sum += outcome.support_loss_mean;
            if summed.is_empty() {
                summed = outcome.grads;
            } else {
                for (acc, g) in summed.iter_mut().zip(outcome.grads) {
                    for (a, b) in acc.iter_mut().zip(g) {
                        *a = *a + b;
                    }
                }
            }
        }

        clip_global_norm(&mut summed, self.setup.train.clip_norm);
        self.apply_outer_update(&names, &summed)?;
        self.next_task_index += batch as u64;
        self.iteration += 1;
        Ok(LogRecord {
            iteration: self.iteration,
            support_loss: support_sum / batch as f64,
            query_loss: loss_sum.to_f64() / batch as f64,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    fn apply_outer_update(&mut self, names: &[String], grads: &[Vec<E>]) -> Result<()> {
        self.opt.step += 1;
        let lr = E::from_f64(self.setup.train.outer_lr);
        match self.setup.train.outer_optimizer {
            OuterOptimizer::Sgd => {
                for (i, name) in names.iter().enumerate() {
                    let mut values = self.lookup(name)?.data().to_vec();
                    for (p, &g) in values.iter_mut().zip(&grads[i]) {
                        *p = *p - lr * g;
                    }
                    self.store(name, values)?;
                }
            }
            OuterOptimizer::Adam => {
                let b1 = E::from_f64(self.setup.train.adam_beta1);
                let b2 = E::from_f64(self.setup.train.adam_beta2);
                let eps = E::from_f64(self.setup.train.adam_eps);
                let t = self.opt.step as i32;
                let c1 = E::ONE - E::from_f64(self.setup.train.adam_beta1.powi(t));
                let c2 = E::ONE - E::from_f64(self.setup.train.adam_beta2.powi(t));
                for (i, name) in names.iter().enumerate() {
                    let mut values = self.lookup(name)?.data().to_vec();
                    for (j, (p, &g)) in values.iter_mut().zip(&grads[i]).enumerate() {
                        let m = b1 * self.opt.m[i][j] + (E::ONE - b1) * g;
                        let v = b2 * self.opt.v[i][j] + (E::ONE - b2) * g * g;
                        self.opt.m[i][j] = m;
                        self.opt.v[i][j] = v;
                        let mhat = m / c1;
                        let vhat = v / c2;
                        *p = *p - lr * mhat / (vhat.sqrt() + eps);
                    }
                    self.store(name, values)?;
                }
            }
        }
        Ok(())
    }

    /// Read one meta-parameter tensor by its trained name.
    pub fn meta_param(&self, name: &str) -> Result<&Tensor<E>> {
        self.lookup(name)
    }

    /// Replace one meta-parameter tensor by its trained name.
    pub fn set_meta_param(&mut self, name: &str, tensor: Tensor<E>) -> Result<()> {
        if tensor.shape() != self.lookup(name)?.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_meta_param",
                lhs: tensor.shape().to_vec(),
                rhs: self.lookup(name)?.shape().to_vec(),
            });
        }
        self.store(name, tensor.data().to_vec())
    }

    fn lookup(&self, name: &str) -> Result<&Tensor<E>> {
        TensorLookup { theta: &self.theta, gen: self.gen.as_ref() }
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown meta-parameter {name}")))
    }

    fn store(&mut self, name: &str, values: Vec<E>) -> Result<()> {
        let shape = self.lookup(name)?.shape().to_vec();
        let tensor = Tensor::new(shape, values)?;
        if let Some(rest) = name.strip_prefix("theta.") {
            let entry = self
                .theta
                .entries
                .iter_mut()
                .find(|e| e.name == rest)
                .ok_or_else(|| Error::Config(format!("unknown learner parameter {rest}")))?;
            entry.tensor = tensor;
            return Ok(());
        }
        let gen = self.gen.as_mut().ok_or_else(|| Error::Config("no generator in this run".into()))?;
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
                    .ok_or_else(|| Error::Config(format!("unknown meta-parameter {other}")))?;
                let idx = self
                    .theta
                    .entries
                    .iter()
                    .position(|e| e.name == rest)
                    .ok_or_else(|| Error::Config(format!("unknown decay parameter {rest}")))?;
                let decay = gen
                    .per_param_decay
                    .as_mut()
                    .ok_or_else(|| Error::Config("no per-parameter decay in this run".into()))?;
                decay[idx] = tensor;
            }
        }
        Ok(())
    }

    /// Run to `total_iterations`, reporting one record per iteration and an
    /// evaluation snapshot every `eval_every` iterations.
    pub fn run(
        &mut self,
        threads: usize,
        mut on_record: impl FnMut(&LogRecord),
        mut on_eval: impl FnMut(u64, &EvalReport),
    ) -> Result<()> {
        while self.iteration < self.setup.train.total_iterations {
            let record = self.step(threads)?;
            on_record(&record);
            let every = self.setup.train.eval_every;
            if every > 0 && self.iteration.is_multiple_of(every) && self.iteration < self.setup.train.total_iterations
            {
                let report = self.eval(self.setup.train.eval_tasks, threads)?;
                on_eval(self.iteration, &report);
            }
        }
        Ok(())
    }

    /// Evaluate on `n_tasks` fresh tasks from the eval stream.
    pub fn eval(&self, n_tasks: usize, threads: usize) -> Result<EvalReport> {
        meta_eval(&self.setup, &self.theta, self.gen.as_ref(), n_tasks, threads)
    }
}

struct TensorLookup<'a, E> {
    theta: &'a ParamSet<E>,
    gen: Option<&'a HyperGenerator<E>>,
}

impl<'a, E: Element> TensorLookup<'a, E> {
    fn get(&self, name: &str) -> Option<&'a Tensor<E>> {
        if let Some(rest) = name.strip_prefix("theta.") {
            return self.theta.entries.iter().find(|e| e.name == rest).map(|e| &e.tensor);
        }
        let gen = self.gen?;
        match name {
            "gen.w1" => Some(&gen.w1),
            "gen.w2" => Some(&gen.w2),
            "gen.w3" => Some(&gen.w3),
            "gen.b1" => gen.b1.as_ref(),
            "gen.b2" => gen.b2.as_ref(),
            "gen.b3" => gen.b3.as_ref(),
            "gen.post_alpha" => Some(&gen.post_alpha),
            "gen.post_beta" => Some(&gen.post_beta),
            other => {
                let rest = other.strip_prefix("gen.decay.")?;
                let idx = self.theta.entries.iter().position(|e| e.name == rest)?;
                gen.per_param_decay.as_ref().map(|d| &d[idx])
            }
        }
    }
}

/// Adapt to one task and evaluate the query set. When `grad_names` is given,
/// also differentiate the query loss with respect to those meta-parameters.
pub fn run_episode<E: Element>(
    setup: &TrainerSetup,
    theta: &ParamSet<E>,
    gen: Option<&HyperGenerator<E>>,
    task: &Task,
    grad_names: Option<&[String]>,
) -> Result<EpisodeOutcome<E>> {
    let mut graph = Graph::new();
    let gen_for_rule = if setup.rule.needs_generator() { gen } else { None };
    let leaves = attach_episode(&mut graph, theta, gen_for_rule);
    let sx = graph.var(&task.support.x.to_tensor());
    let sy = task.support.y.to_tensor();

    // Evaluation episodes do not need the meta-graph; dropping it never
    // changes the adapted values, only what is differentiable.
    let mut rule = setup.rule;
    if grad_names.is_none() {
        rule.first_order = true;
    }

    let (adapted, trace) = adapt(&mut graph, &setup.learner, theta, &leaves, &sx, &sy, &rule)?;
    let qx = graph.var(&task.query.x.to_tensor());
    let qy = task.query.y.to_tensor();
    let eval = eval_query(
        &mut graph,
        &setup.learner,
        &adapted,
        &qx,
        &qy,
        task.query.labels.as_deref(),
    )?;
    if !eval.loss.all_finite() {
        return Err(Error::NonFinite { what: "query loss", step: rule.steps });
    }

    let support_loss_mean =
        trace.steps.iter().map(|s| s.support_loss).sum::<f64>() / trace.steps.len().max(1) as f64;

    let grads = match grad_names {
        None => Vec::new(),
        Some(names) => {
            let lookup = EpisodeLookup { theta, leaves: &leaves };
            let wrt: Vec<&Tensor<E>> = names
                .iter()
                .map(|n| {
                    lookup
                        .get(n)
                        .ok_or_else(|| Error::Config(format!("unknown meta-parameter {n}")))
                })
                .collect::<Result<_>>()?;
            let gs = graph.grad(&eval.loss, &wrt, GradOpts::default())?;
            if gs.iter().any(|g| !g.all_finite()) {
                return Err(Error::NonFinite { what: "meta-gradient", step: rule.steps });
            }
            gs.into_iter().map(|g| g.data().to_vec()).collect()
        }
    };

    Ok(EpisodeOutcome {
        query_loss: eval.loss.item(),
        accuracy: eval.accuracy,
        support_loss_mean,
        trace,
        grads,
    })
}

struct EpisodeLookup<'a, E> {
    theta: &'a ParamSet<E>,
    leaves: &'a crate::inner_loop::EpisodeLeaves<E>,
}

impl<'a, E: Element> EpisodeLookup<'a, E> {
    fn get(&self, name: &str) -> Option<&'a Tensor<E>> {
        if let Some(rest) = name.strip_prefix("theta.") {
            let idx = self.theta.entries.iter().position(|e| e.name == rest)?;
            return Some(&self.leaves.theta0[idx]);
        }
        let gen = self.leaves.gen.as_ref()?;
        match name {
            "gen.w1" => Some(&gen.w1),
            "gen.w2" => Some(&gen.w2),
            "gen.w3" => Some(&gen.w3),
            "gen.b1" => gen.b1.as_ref(),
            "gen.b2" => gen.b2.as_ref(),
            "gen.b3" => gen.b3.as_ref(),
            "gen.post_alpha" => Some(&gen.post_alpha),
            "gen.post_beta" => Some(&gen.post_beta),
            other => {
                let rest = other.strip_prefix("gen.decay.")?;
                let idx = self.theta.entries.iter().position(|e| e.name == rest)?;
                gen.per_param_decay.as_ref().map(|d| &d[idx])
            }
        }
    }
}

/// Evaluate `(theta, gen)` on fresh tasks from the eval seed stream.
pub fn meta_eval<E: Element>(
    setup: &TrainerSetup,
    theta: &ParamSet<E>,
    gen: Option<&HyperGenerator<E>>,
    n_tasks: usize,
    threads: usize,
) -> Result<EvalReport> {
    if n_tasks == 0 {
        return Err(Error::Config("meta_eval needs n_tasks >= 1".into()));
    }
    let seed = setup.train.seed_eval;
    let tasks: Vec<Task> =
        (0..n_tasks).map(|i| setup.family.sample(seed, Stream::EvalTasks, i as u64)).collect();
    let outcomes = parallel_map(&tasks, threads, |task| {
        run_episode(setup, theta, gen, task, None)
    });
    let mut losses = Vec::with_capacity(n_tasks);
    let mut accuracies = Vec::new();
    for outcome in outcomes {
        let outcome = outcome?;
        losses.push(outcome.query_loss.to_f64());
        if let Some(a) = outcome.accuracy {
            accuracies.push(a);
        }
    }
    let n = losses.len() as f64;
    let mean = losses.iter().sum::<f64>() / n;
    let (ci, degenerate) = if losses.len() < 2 {
        (0.0, true)
    } else {
        let var = losses.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / (n - 1.0);
        (1.96 * (var / n).sqrt(), false)
    };
    Ok(EvalReport {
        seed,
        task_count: losses.len(),
        mean_query_loss: mean,
        ci95_half_width: ci,
        mean_accuracy: (!accuracies.is_empty())
            .then(|| accuracies.iter().sum::<f64>() / accuracies.len() as f64),
        degenerate,
    })
}

/// Collect adaptation traces over eval tasks, for the trajectory export.
pub fn collect_traces<E: Element>(
    setup: &TrainerSetup,
    theta: &ParamSet<E>,
    gen: Option<&HyperGenerator<E>>,
    n_tasks: usize,
    threads: usize,
) -> Result<Vec<AdaptationTrace>> {
    let seed = setup.train.seed_eval;
    let tasks: Vec<Task> =
        (0..n_tasks).map(|i| setup.family.sample(seed, Stream::EvalTasks, i as u64)).collect();
    parallel_map(&tasks, threads, |task| run_episode(setup, theta, gen, task, None))
        .into_iter()
        .map(|o| o.map(|o| o.trace))
        .collect()
}

/// Scale the gradient set down to a global L2 norm of `clip` when it
/// exceeds it. `clip <= 0` disables.
fn clip_global_norm<E: Element>(grads: &mut [Vec<E>], clip: f64) {
    if clip <= 0.0 {
        return;
    }
    let mut sq = 0.0_f64;
    for g in grads.iter() {
        for v in g {
            let v = v.to_f64();
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > clip {
        let factor = E::from_f64(clip / norm);
        for g in grads.iter_mut() {
            for v in g {
                *v = *v * factor;
            }
        }
    }
}

/// Order-preserving parallel map over a shared immutable snapshot.
fn parallel_map<T: Sync, U: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> U + Sync,
) -> Vec<U> {
    let threads = threads.max(1).min(items.len().max(1));
    if threads <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let mut slots: Vec<Option<U>> = (0..items.len()).map(|_| None).collect();
    let f = &f;
    std::thread::scope(|scope| {
        for (item_chunk, slot_chunk) in items.chunks(chunk).zip(slots.chunks_mut(chunk)) {
            scope.spawn(move || {
                for (item, slot) in item_chunk.iter().zip(slot_chunk.iter_mut()) {
                    *slot = Some(f(item));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("all slots filled")).collect()
}
