//! Fast adaptation: S gradient steps from a given initialization under a
//! configurable update rule.
//!
//! The full adaptive rule updates every parameter tensor as
//! `theta_{j+1} = beta_j (.) theta_j - alpha_j (.) grad_j`, with `alpha_j`
//! and `beta_j` produced per step and per layer unit. Plain SGD
//! (`theta - c * grad`) and every fixed/adaptive, per-step/per-layer
//! ablation variant run through the same loop.

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradOpts, Graph, Tensor};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::hypergen::{expand_to_params, GenLeaves, HyperGenerator};
use crate::learner::{task_loss, LearnerSpec, ParamSet};
use crate::state::{compute_state, mask_state, preprocess_state, StateMode, StatePreprocess};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    Sgd,
    Alfa,
}

/// How one hyperparameter (learning rate or decay) is obtained per step.
///
/// `meta-fixed-*` values are meta-learned but not conditioned on the
/// learning state; `generated-*` values route through the generator MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HyperMode {
    Constant,
    MetaFixedPerStep,
    MetaFixedPerLayer,
    GeneratedPerStep,
    GeneratedPerLayer,
    GeneratedFull,
}

impl HyperMode {
    pub fn is_generated(self) -> bool {
        matches!(
            self,
            HyperMode::GeneratedPerStep | HyperMode::GeneratedPerLayer | HyperMode::GeneratedFull
        )
    }

    pub fn needs_generator(self) -> bool {
        self != HyperMode::Constant
    }

    fn name(self) -> &'static str {
        match self {
            HyperMode::Constant => "constant",
            HyperMode::MetaFixedPerStep => "meta-fixed-per-step",
            HyperMode::MetaFixedPerLayer => "meta-fixed-per-layer",
            HyperMode::GeneratedPerStep => "generated-per-step",
            HyperMode::GeneratedPerLayer => "generated-per-layer",
            HyperMode::GeneratedFull => "generated-full",
        }
    }
}

/// Decay mode: any [`HyperMode`] or off (`beta == 1`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BetaMode {
    Off,
    Constant,
    MetaFixedPerStep,
    MetaFixedPerLayer,
    GeneratedPerStep,
    GeneratedPerLayer,
    GeneratedFull,
}

impl BetaMode {
    pub fn as_hyper_mode(self) -> Option<HyperMode> {
        match self {
            BetaMode::Off => None,
            BetaMode::Constant => Some(HyperMode::Constant),
            BetaMode::MetaFixedPerStep => Some(HyperMode::MetaFixedPerStep),
            BetaMode::MetaFixedPerLayer => Some(HyperMode::MetaFixedPerLayer),
            BetaMode::GeneratedPerStep => Some(HyperMode::GeneratedPerStep),
            BetaMode::GeneratedPerLayer => Some(HyperMode::GeneratedPerLayer),
            BetaMode::GeneratedFull => Some(HyperMode::GeneratedFull),
        }
    }
}

/// Composition of the random-init per-parameter decay term with the
/// generated decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RandomInitBeta {
    Product,
    Replace,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpdateRuleConfig {
    pub rule: Rule,
    pub alpha_mode: HyperMode,
    pub beta_mode: BetaMode,
    #[serde(default = "default_state_mode")]
    pub state_mode: StateMode,
    pub steps: usize,
    #[serde(default = "default_constant_alpha")]
    pub constant_alpha: f64,
    #[serde(default)]
    pub first_order: bool,
    #[serde(default = "default_state_preprocess")]
    pub state_preprocess: StatePreprocess,
    #[serde(default = "default_randominit_beta")]
    pub randominit_beta: RandomInitBeta,
    /// Generator construction knobs; inert for rule=sgd.
    #[serde(default)]
    pub generator_bias: bool,
    #[serde(default = "default_alpha0_init")]
    pub alpha0_init: f64,
    #[serde(default = "default_beta0_init")]
    pub beta0_init: f64,
}

fn default_state_mode() -> StateMode {
    StateMode::Both
}
fn default_constant_alpha() -> f64 {
    0.01
}
fn default_state_preprocess() -> StatePreprocess {
    StatePreprocess::PerEntryStandardize
}
fn default_randominit_beta() -> RandomInitBeta {
    RandomInitBeta::Product
}
fn default_alpha0_init() -> f64 {
    0.01
}
fn default_beta0_init() -> f64 {
    1.0
}

impl UpdateRuleConfig {
    pub fn sgd(steps: usize, constant_alpha: f64) -> Self {
        UpdateRuleConfig {
            rule: Rule::Sgd,
            alpha_mode: HyperMode::Constant,
            beta_mode: BetaMode::Off,
            state_mode: StateMode::Both,
            steps,
            constant_alpha,
            first_order: false,
            state_preprocess: StatePreprocess::None,
            randominit_beta: RandomInitBeta::Product,
            generator_bias: false,
            alpha0_init: default_alpha0_init(),
            beta0_init: default_beta0_init(),
        }
    }

    pub fn generator_config(&self) -> crate::hypergen::GeneratorConfig {
        crate::hypergen::GeneratorConfig {
            bias: self.generator_bias,
            alpha0_init: self.alpha0_init,
            beta0_init: self.beta0_init,
        }
    }

    pub fn alfa(steps: usize) -> Self {
        UpdateRuleConfig {
            rule: Rule::Alfa,
            alpha_mode: HyperMode::GeneratedFull,
            beta_mode: BetaMode::GeneratedFull,
            state_preprocess: StatePreprocess::PerEntryStandardize,
            ..UpdateRuleConfig::sgd(steps, 0.01)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("update rule needs at least one inner step".into()));
        }
        if self.rule == Rule::Sgd
            && (self.alpha_mode != HyperMode::Constant || self.beta_mode != BetaMode::Off)
        {
            return Err(Error::Config(
                "rule=sgd forces alpha-mode=constant and beta-mode=off".into(),
            ));
        }
        Ok(())
    }

    pub fn needs_generator(&self) -> bool {
        self.rule == Rule::Alfa
            && (self.alpha_mode.needs_generator()
                || self.beta_mode.as_hyper_mode().is_some_and(|m| m.needs_generator()))
    }

    fn needs_state(&self) -> bool {
        self.rule == Rule::Alfa
            && (self.alpha_mode.is_generated()
                || self.beta_mode.as_hyper_mode().is_some_and(|m| m.is_generated()))
    }
}

/// Per-step record of what the update actually applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub support_loss: f64,
}

/// Hyperparameter trajectory of one adaptation episode; always `steps` long.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptationTrace {
    pub steps: Vec<StepRecord>,
}

/// Graph-attached leaves for one adaptation episode.
pub struct EpisodeLeaves<E> {
    pub theta0: Vec<Tensor<E>>,
    pub gen: Option<GenLeaves<E>>,
}

/// Attach the initialization and (optionally) the generator to `graph`.
pub fn attach_episode<E: Element>(
    graph: &mut Graph<E>,
    theta0: &ParamSet<E>,
    gen: Option<&HyperGenerator<E>>,
) -> EpisodeLeaves<E> {
    EpisodeLeaves {
        theta0: theta0.attach(graph),
        gen: gen.map(|g| g.attach(graph)),
    }
}

fn require_gen<E>(
    gen: Option<&GenLeaves<E>>,
    mode: HyperMode,
) -> Result<&GenLeaves<E>> {
    gen.ok_or(Error::MissingGenerator { mode: mode.name() })
}

/// Which of the two generated heads and post-multiplier tables to read.
#[derive(Clone, Copy, PartialEq)]
enum Head {
    Alpha,
    Beta,
}

/// Everything one step's hyperparameter selection needs.
struct StepContext<'a, E> {
    gen: Option<&'a GenLeaves<E>>,
    /// Raw generator output for this step, present when any generated mode
    /// is active.
    h: Option<&'a Tensor<E>>,
    n_units: usize,
    step: usize,
}

/// One hyperparameter vector (length N) for the step under `mode`.
fn hyper_vector<E: Element>(
    graph: &mut Graph<E>,
    mode: HyperMode,
    head: Head,
    ctx: &StepContext<'_, E>,
    constant: f64,
) -> Result<Tensor<E>> {
    if mode == HyperMode::Constant {
        return Ok(Tensor::filled(vec![ctx.n_units], E::from_f64(constant)));
    }
    let gen = require_gen(ctx.gen, mode)?;
    let step = ctx.step;
    if step >= gen.steps {
        return Err(Error::StepOutOfRange { step, steps: gen.steps });
    }
    let table = if head == Head::Alpha { gen.post_alpha.clone() } else { gen.post_beta.clone() };
    let flat = graph.reshape(&table, &[gen.steps * gen.n_units])?;
    let head_slice = |graph: &mut Graph<E>, h: &Tensor<E>| -> Result<Tensor<E>> {
        let offset = if head == Head::Alpha { 0 } else { gen.n_units };
        graph.slice(h, offset, gen.n_units)
    };
    match mode {
        HyperMode::Constant => unreachable!("handled above"),
        HyperMode::MetaFixedPerStep => {
            // One shared meta-learned scalar per step.
            let v = graph.slice(&flat, step * gen.n_units, 1)?;
            graph.broadcast_repeat(&v, &[ctx.n_units])
        }
        HyperMode::MetaFixedPerLayer => {
            // One meta-learned value per unit, shared across steps (row 0).
            graph.slice(&flat, 0, gen.n_units)
        }
        HyperMode::GeneratedPerStep => {
            let h = head_slice(graph, ctx.h.expect("generated modes compute the state"))?;
            let m = graph.mean(&h)?;
            let m = graph.reshape(&m, &[1])?;
            let post = graph.slice(&flat, step * gen.n_units, 1)?;
            let v = graph.hadamard(&post, &m)?;
            graph.broadcast_repeat(&v, &[ctx.n_units])
        }
        HyperMode::GeneratedPerLayer => {
            let h = head_slice(graph, ctx.h.expect("generated modes compute the state"))?;
            let post = graph.slice(&flat, 0, gen.n_units)?;
            graph.hadamard(&post, &h)
        }
        HyperMode::GeneratedFull => {
            let h = head_slice(graph, ctx.h.expect("generated modes compute the state"))?;
            let post = graph.slice(&flat, step * gen.n_units, gen.n_units)?;
            graph.hadamard(&post, &h)
        }
    }
}

/// Run S adaptation steps on the support set. Returns the adapted parameter
/// tensors (graph-attached unless everything upstream was detached) and the
/// per-step hyperparameter trace.
pub fn adapt<E: Element>(
    graph: &mut Graph<E>,
    spec: &LearnerSpec,
    params_meta: &ParamSet<E>,
    leaves: &EpisodeLeaves<E>,
    support_x: &Tensor<E>,
    support_y: &Tensor<E>,
    cfg: &UpdateRuleConfig,
) -> Result<(Vec<Tensor<E>>, AdaptationTrace)> {
    cfg.validate()?;
    if support_x.numel() == 0 {
        return Err(Error::EmptyBatch { op: "adapt" });
    }
    if cfg.needs_generator() && leaves.gen.is_none() {
        return Err(Error::MissingGenerator { mode: cfg.alpha_mode.name() });
    }
    let n = params_meta.n_units();
    let mut theta = leaves.theta0.clone();
    let mut trace = AdaptationTrace::default();

    for step in 0..cfg.steps {
        let loss = task_loss(graph, spec, &theta, support_x, support_y)?;
        if !loss.all_finite() {
            return Err(Error::NonFinite { what: "support loss", step });
        }
        let theta_refs: Vec<&Tensor<E>> = theta.iter().collect();
        let grads = graph.grad(
            &loss,
            &theta_refs,
            GradOpts { retain: !cfg.first_order, allow_unreachable: false },
        )?;
        if grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::NonFinite { what: "support gradient", step });
        }

        let (alpha, beta) = match cfg.rule {
            Rule::Sgd => (Tensor::filled(vec![n], E::from_f64(cfg.constant_alpha)), None),
            Rule::Alfa => {
                let h = if cfg.needs_state() {
                    let gen = require_gen(leaves.gen.as_ref(), cfg.alpha_mode)?;
                    let raw = compute_state(graph, params_meta, &theta, &grads)?;
                    let masked = mask_state(graph, &raw, cfg.state_mode)?;
                    let pre = preprocess_state(graph, &masked, cfg.state_preprocess)?;
                    Some(gen.mlp_forward(graph, &pre)?)
                } else {
                    None
                };
                let ctx = StepContext {
                    gen: leaves.gen.as_ref(),
                    h: h.as_ref(),
                    n_units: n,
                    step,
                };
                let alpha =
                    hyper_vector(graph, cfg.alpha_mode, Head::Alpha, &ctx, cfg.constant_alpha)?;
                let beta = match cfg.beta_mode.as_hyper_mode() {
                    None => None,
                    Some(mode) => Some(hyper_vector(graph, mode, Head::Beta, &ctx, 1.0)?),
                };
                (alpha, beta)
            }
        };
        if !alpha.all_finite() || beta.as_ref().is_some_and(|b| !b.all_finite()) {
            return Err(Error::NonFinite { what: "generated hyperparameters", step });
        }

        trace.steps.push(StepRecord {
            step,
            alpha: alpha.to_f64_vec(),
            beta: beta
                .as_ref()
                .map(|b| b.to_f64_vec())
                .unwrap_or_else(|| vec![1.0; n]),
            support_loss: loss.item().to_f64(),
        });

        match cfg.rule {
            Rule::Sgd => {
                let c = E::from_f64(cfg.constant_alpha);
                for (t, g) in theta.iter_mut().zip(&grads) {
                    let step_t = graph.scale(g, c)?;
                    *t = graph.sub(t, &step_t)?;
                }
            }
            Rule::Alfa => {
                let alpha_exp = expand_to_params(graph, &alpha, params_meta)?;
                let beta_exp = match &beta {
                    Some(b) => Some(expand_to_params(graph, b, params_meta)?),
                    None => None,
                };
                let decay = leaves.gen.as_ref().and_then(|g| g.per_param_decay.as_ref());
                for i in 0..theta.len() {
                    let retained = graph.hadamard(&alpha_exp[i], &grads[i])?;
                    let decayed = {
                        let base = match (&beta_exp, decay, cfg.randominit_beta) {
                            // Per-parameter decay replaces the generated one.
                            (_, Some(d), RandomInitBeta::Replace) => {
                                Some(d[i].clone())
                            }
                            (Some(b), Some(d), RandomInitBeta::Product) => {
                                Some(graph.hadamard(&b[i], &d[i])?)
                            }
                            (None, Some(d), RandomInitBeta::Product) => Some(d[i].clone()),
                            (Some(b), None, _) => Some(b[i].clone()),
                            (None, None, _) => None,
                        };
                        match base {
                            Some(b) => graph.hadamard(&b, &theta[i])?,
                            None => theta[i].clone(),
                        }
                    };
                    theta[i] = graph.sub(&decayed, &retained)?;
                }
            }
        }
    }
    Ok((theta, trace))
}

/// Convenience wrapper owning its graph: adapt from detached inputs and
/// return a detached [`ParamSet`].
pub fn adapt_detached<E: Element>(
    spec: &LearnerSpec,
    theta0: &ParamSet<E>,
    gen: Option<&HyperGenerator<E>>,
    support_x: &Tensor<E>,
    support_y: &Tensor<E>,
    cfg: &UpdateRuleConfig,
) -> Result<(ParamSet<E>, AdaptationTrace)> {
    let mut graph = Graph::new();
    let leaves = attach_episode(&mut graph, theta0, gen);
    let sx = graph.var(support_x);
    let sy = graph.var(support_y);
    let (theta, trace) = adapt(&mut graph, spec, theta0, &leaves, &sx, &sy, cfg)?;
    Ok((theta0.with_tensors(theta), trace))
}

/// Query-set evaluation of adapted parameters.
pub struct QueryEval<E> {
    pub loss: Tensor<E>,
    /// Fraction of correctly argmax-classified query rows; classification only.
    pub accuracy: Option<f64>,
}

pub fn eval_query<E: Element>(
    graph: &mut Graph<E>,
    spec: &LearnerSpec,
    adapted: &[Tensor<E>],
    query_x: &Tensor<E>,
    query_y: &Tensor<E>,
    labels: Option<&[usize]>,
) -> Result<QueryEval<E>> {
    if query_x.numel() == 0 {
        return Err(Error::EmptyBatch { op: "eval_query" });
    }
    let loss = task_loss(graph, spec, adapted, query_x, query_y)?;
    let accuracy = match (spec.kind, labels) {
        (crate::learner::LearnerKind::ClassificationMlp, Some(labels)) => {
            let logits = crate::learner::forward(graph, spec, adapted, query_x)?;
            let &[rows, cols] = logits.shape() else { unreachable!("forward returns rank-2") };
            let mut hits = 0usize;
            for (r, &want) in labels.iter().enumerate().take(rows) {
                let row = &logits.data()[r * cols..(r + 1) * cols];
                let mut best = 0;
                for (j, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = j;
                    }
                }
                if best == want {
                    hits += 1;
                }
            }
            Some(hits as f64 / rows as f64)
        }
        _ => None,
    };
    Ok(QueryEval { loss, accuracy })
}
