//! The meta-network that generates per-step, per-layer-unit learning rates
//! and weight-decay coefficients from the reduced learning state.
//!
//! Architecture: a 3-layer MLP, 2N units per layer, ReLU between layers and
//! a raw linear output. The first N outputs multiply onto the learning-rate
//! post-multipliers, the last N onto the decay post-multipliers. With biases
//! disabled (the default) the trainable size is exactly `12N^2 + 2SN`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::learner::ParamSet;
use crate::rng::{Rng, Stream};
use crate::state::LearningState;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Give the MLP bias vectors. Breaks the `12N^2 + 2SN` size contract and
    /// is therefore off by default.
    pub bias: bool,
    /// Fill value for the learning-rate post-multipliers.
    pub alpha0_init: f64,
    /// Fill value for the decay post-multipliers.
    pub beta0_init: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig { bias: false, alpha0_init: 0.01, beta0_init: 1.0 }
    }
}

/// Weights of the generator network plus its post-multipliers.
///
/// Post-multipliers are `S x N`: one meta-learnable value per inner step and
/// layer unit, multiplied onto the generated values to control their range.
#[derive(Debug, Clone)]
pub struct HyperGenerator<E> {
    pub n_units: usize,
    pub steps: usize,
    pub w1: Tensor<E>,
    pub w2: Tensor<E>,
    pub w3: Tensor<E>,
    pub b1: Option<Tensor<E>>,
    pub b2: Option<Tensor<E>>,
    pub b3: Option<Tensor<E>>,
    pub post_alpha: Tensor<E>,
    pub post_beta: Tensor<E>,
    /// Meta-learnable per-parameter decay multipliers (one tensor per learner
    /// parameter, initialized to ones). Present only in random-init mode,
    /// where they stand in for the prior a trained initialization would
    /// carry.
    pub per_param_decay: Option<Vec<Tensor<E>>>,
    /// Test hook: force the MLP output to a constant, so generated values
    /// reduce to the post-multipliers alone.
    pub output_override: Option<f64>,
}

/// Generated hyperparameters for one inner step: one unitless learning rate
/// and one decay multiplier per layer unit. No clamping is applied.
#[derive(Debug, Clone)]
pub struct HyperParamsPerStep<E> {
    pub alpha: Tensor<E>,
    pub beta: Tensor<E>,
}

/// Seeded construction: MLP weights from a truncated normal with fan-in
/// scaling, post-multipliers filled with their init values.
///
/// The output layer carries a positive mean on top of the fan-in noise.
/// Its inputs are ReLU activations (nonnegative), so this starts the
/// generated multipliers near +1 for typical states: learning rates open at
/// roughly `alpha0_init` and decay multipliers near `beta0_init`, instead of
/// random-sign values that scramble the learner on the first inner step.
/// The output for a zero state is still exactly zero.
pub fn init_generator<E: Element>(
    n_units: usize,
    steps: usize,
    seed: u64,
    config: GeneratorConfig,
) -> HyperGenerator<E> {
    assert!(n_units >= 1 && steps >= 1, "generator needs N >= 1 and S >= 1");
    let width = 2 * n_units;
    let mut rng = Rng::derive(seed, Stream::GeneratorInit, 0);
    let std = 1.0 / (width as f64).sqrt();
    let mut mat = |mean: f64, std: f64| {
        let data: Vec<E> = (0..width * width)
            .map(|_| E::from_f64(mean + rng.truncated_normal(std)))
            .collect();
        Tensor::new(vec![width, width], data).expect("sized above")
    };
    let (w1, w2) = (mat(0.0, std), mat(0.0, std));
    // Low noise on the output layer keeps the initial multipliers tight
    // around their positive mean: a unit that happens to start with a small
    // decay multiplier shrinks its tensor by beta^S and goes numerically
    // dead before the outer loop can correct it.
    let w3 = mat(2.0 / width as f64, 0.1 * std);
    let bias = |on: bool| on.then(|| Tensor::zeros(vec![width]));
    HyperGenerator {
        n_units,
        steps,
        w1,
        w2,
        w3,
        b1: bias(config.bias),
        b2: bias(config.bias),
        b3: bias(config.bias),
        post_alpha: Tensor::filled(vec![steps, n_units], E::from_f64(config.alpha0_init)),
        post_beta: Tensor::filled(vec![steps, n_units], E::from_f64(config.beta0_init)),
        per_param_decay: None,
        output_override: None,
    }
}

impl<E: Element> HyperGenerator<E> {
    /// Add the per-parameter decay multipliers for random-init mode,
    /// initialized to ones (no decay beyond the generated one).
    pub fn with_per_param_decay(mut self, params: &ParamSet<E>) -> Self {
        self.per_param_decay = Some(
            params.entries.iter().map(|e| Tensor::filled(e.tensor.shape().to_vec(), E::ONE)).collect(),
        );
        self
    }

    /// Trainable size of the generator itself: MLP weights (plus biases when
    /// enabled) and both post-multiplier tables. Excludes the per-parameter
    /// decay term, which scales with the learner, not with the generator.
    pub fn trainable_param_count(&self) -> usize {
        let mut count = self.w1.numel() + self.w2.numel() + self.w3.numel();
        for b in [&self.b1, &self.b2, &self.b3].into_iter().flatten() {
            count += b.numel();
        }
        count + self.post_alpha.numel() + self.post_beta.numel()
    }

    pub fn per_param_decay_count(&self) -> usize {
        self.per_param_decay
            .as_ref()
            .map(|d| d.iter().map(|t| t.numel()).sum())
            .unwrap_or(0)
    }

    /// Attach all generator tensors to a graph as leaves.
    pub fn attach(&self, graph: &mut Graph<E>) -> GenLeaves<E> {
        GenLeaves {
            n_units: self.n_units,
            steps: self.steps,
            w1: graph.var(&self.w1),
            w2: graph.var(&self.w2),
            w3: graph.var(&self.w3),
            b1: self.b1.as_ref().map(|b| graph.var(b)),
            b2: self.b2.as_ref().map(|b| graph.var(b)),
            b3: self.b3.as_ref().map(|b| graph.var(b)),
            post_alpha: graph.var(&self.post_alpha),
            post_beta: graph.var(&self.post_beta),
            per_param_decay: self
                .per_param_decay
                .as_ref()
                .map(|d| d.iter().map(|t| graph.var(t)).collect()),
            output_override: self.output_override,
        }
    }

    /// One-shot convenience: attach to the graph and generate for `step`.
    pub fn generate(
        &self,
        graph: &mut Graph<E>,
        state: &LearningState<E>,
        step: usize,
    ) -> Result<HyperParamsPerStep<E>> {
        let leaves = self.attach(graph);
        let h = leaves.mlp_forward(graph, state)?;
        leaves.generate_full(graph, &h, step)
    }
}

/// Graph-attached view of a generator for one episode.
pub struct GenLeaves<E> {
    pub n_units: usize,
    pub steps: usize,
    pub w1: Tensor<E>,
    pub w2: Tensor<E>,
    pub w3: Tensor<E>,
    pub b1: Option<Tensor<E>>,
    pub b2: Option<Tensor<E>>,
    pub b3: Option<Tensor<E>>,
    pub post_alpha: Tensor<E>,
    pub post_beta: Tensor<E>,
    pub per_param_decay: Option<Vec<Tensor<E>>>,
    pub output_override: Option<f64>,
}

impl<E: Element> GenLeaves<E> {
    /// Raw MLP output `h` of width 2N: ReLU between layers one/two and
    /// two/three, identity on the output.
    pub fn mlp_forward(&self, graph: &mut Graph<E>, state: &LearningState<E>) -> Result<Tensor<E>> {
        let width = 2 * self.n_units;
        if state.len() != width {
            return Err(Error::StateLength { got: state.len(), expected: width });
        }
        if let Some(v) = self.output_override {
            return Ok(Tensor::filled(vec![width], E::from_f64(v)));
        }
        let mut h = graph.reshape(&state.values, &[1, width])?;
        let layers = [(&self.w1, &self.b1), (&self.w2, &self.b2), (&self.w3, &self.b3)];
        for (i, (w, b)) in layers.into_iter().enumerate() {
            h = graph.matmul(&h, w)?;
            if let Some(b) = b {
                let bt = graph.broadcast_repeat(b, h.shape())?;
                h = graph.add(&h, &bt)?;
            }
            if i < 2 {
                h = graph.relu(&h)?;
            }
        }
        graph.reshape(&h, &[width])
    }

    /// Row `step` of a post-multiplier table as a length-N vector.
    pub fn post_row(
        &self,
        graph: &mut Graph<E>,
        table: &Tensor<E>,
        step: usize,
    ) -> Result<Tensor<E>> {
        if step >= self.steps {
            return Err(Error::StepOutOfRange { step, steps: self.steps });
        }
        let flat = graph.reshape(table, &[self.steps * self.n_units])?;
        graph.slice(&flat, step * self.n_units, self.n_units)
    }

    /// Full generation: `alpha[k] = post_alpha[step, k] * h[k]`,
    /// `beta[k] = post_beta[step, k] * h[N + k]`.
    pub fn generate_full(
        &self,
        graph: &mut Graph<E>,
        h: &Tensor<E>,
        step: usize,
    ) -> Result<HyperParamsPerStep<E>> {
        let n = self.n_units;
        let h_alpha = graph.slice(h, 0, n)?;
        let h_beta = graph.slice(h, n, n)?;
        let a_row = self.post_row(graph, &self.post_alpha, step)?;
        let b_row = self.post_row(graph, &self.post_beta, step)?;
        Ok(HyperParamsPerStep {
            alpha: graph.hadamard(&a_row, &h_alpha)?,
            beta: graph.hadamard(&b_row, &h_beta)?,
        })
    }
}

/// Broadcast per-unit scalars to the full shape of every parameter tensor.
pub fn expand_to_params<E: Element>(
    graph: &mut Graph<E>,
    per_unit: &Tensor<E>,
    params: &ParamSet<E>,
) -> Result<Vec<Tensor<E>>> {
    if per_unit.numel() != params.n_units() {
        return Err(Error::UnitCountMismatch {
            got: per_unit.numel(),
            expected: params.n_units(),
        });
    }
    let mut out = Vec::with_capacity(params.len());
    for entry in &params.entries {
        let v = graph.slice(per_unit, entry.unit, 1)?;
        out.push(graph.broadcast_repeat(&v, entry.tensor.shape())?);
    }
    Ok(out)
}
