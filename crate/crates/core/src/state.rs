//! Reduction of the full learning state (gradients and weights) to the
//! 2N-vector of per-unit means that conditions the hyperparameter generator.
//!
//! Layout convention, fixed because it is an API contract: positions
//! `0..N-1` hold gradient means, positions `N..2N-1` hold weight means.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::learner::ParamSet;

/// Which halves of the state the generator may see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StateMode {
    Both,
    WeightOnly,
    GradientOnly,
}

/// Optional preprocessing of the state vector before it reaches the
/// generator.
///
/// Raw per-unit means scale with the task: sinusoid amplitudes span
/// 0.1..5.0, so support losses (and with them the state) vary by two orders
/// of magnitude across tasks. A generator that is linear in the state turns
/// that spread into unbounded decay multipliers, which diverges inside the
/// episode on the hardest tasks. Standardizing bounds the generator input
/// while keeping its task- and step-dependence, and is the default for that
/// reason; `none` remains available.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StatePreprocess {
    None,
    /// Subtract the mean of the 2N entries and multiply by
    /// `(variance + 1e-8)^(-1/2)`. Fully differentiable, statistics included.
    PerEntryStandardize,
}

/// The reduced conditioning vector, graph-attached so meta-gradients flow
/// through the reduction.
#[derive(Debug, Clone)]
pub struct LearningState<E> {
    pub values: Tensor<E>,
    pub n_units: usize,
}

impl<E: Element> LearningState<E> {
    pub fn len(&self) -> usize {
        self.values.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.values.numel() == 0
    }
}

/// Per-unit mean of a group of tensors: sum of all elements over the total
/// element count, built from graph ops.
fn unit_mean<E: Element>(graph: &mut Graph<E>, tensors: &[&Tensor<E>]) -> Result<Tensor<E>> {
    let total: usize = tensors.iter().map(|t| t.numel()).sum();
    let mut acc: Option<Tensor<E>> = None;
    for t in tensors {
        let s = graph.sum(t)?;
        acc = Some(match acc {
            None => s,
            Some(a) => graph.add(&a, &s)?,
        });
    }
    let acc = acc.expect("unit has at least one tensor");
    graph.scale(&acc, E::ONE / E::from_f64(total as f64))
}

/// Reduce `(params, grads)` to the 2N vector of per-unit means.
///
/// `grads` must align one-to-one with `params.entries`, matching shapes.
pub fn compute_state<E: Element>(
    graph: &mut Graph<E>,
    params: &ParamSet<E>,
    param_tensors: &[Tensor<E>],
    grads: &[Tensor<E>],
) -> Result<LearningState<E>> {
    if grads.len() != params.len() || param_tensors.len() != params.len() {
        return Err(Error::StateLength { got: grads.len(), expected: params.len() });
    }
    for (entry, (p, g)) in params.entries.iter().zip(param_tensors.iter().zip(grads)) {
        if p.shape() != entry.tensor.shape() || g.shape() != entry.tensor.shape() {
            return Err(Error::ShapeMismatch {
                op: "compute_state",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    let n = params.n_units();
    let mut means = Vec::with_capacity(2 * n);
    for source in [grads, param_tensors] {
        for unit in 0..n {
            let members: Vec<&Tensor<E>> = params
                .entries
                .iter()
                .enumerate()
                .filter(|(_, e)| e.unit == unit)
                .map(|(i, _)| &source[i])
                .collect();
            means.push(unit_mean(graph, &members)?);
        }
    }
    let refs: Vec<&Tensor<E>> = means.iter().collect();
    let values = graph.concat(&refs)?;
    Ok(LearningState { values, n_units: n })
}

/// Zero out the excluded half of the state. Masking keeps the generator
/// input width at 2N in every ablation mode.
pub fn mask_state<E: Element>(
    graph: &mut Graph<E>,
    state: &LearningState<E>,
    mode: StateMode,
) -> Result<LearningState<E>> {
    if matches!(mode, StateMode::Both) {
        return Ok(state.clone());
    }
    let n = state.n_units;
    let (grad_half, weight_half) = match mode {
        StateMode::Both => unreachable!(),
        StateMode::WeightOnly => (E::ZERO, E::ONE),
        StateMode::GradientOnly => (E::ONE, E::ZERO),
    };
    let mut mask = vec![grad_half; n];
    mask.extend(std::iter::repeat_n(weight_half, n));
    let mask = Tensor::vector(mask);
    let values = graph.hadamard(&state.values, &mask)?;
    Ok(LearningState { values, n_units: n })
}

/// Apply the configured preprocessing to a (already masked) state.
pub fn preprocess_state<E: Element>(
    graph: &mut Graph<E>,
    state: &LearningState<E>,
    preprocess: StatePreprocess,
) -> Result<LearningState<E>> {
    match preprocess {
        StatePreprocess::None => Ok(state.clone()),
        StatePreprocess::PerEntryStandardize => {
            let mean = graph.mean(&state.values)?;
            let mean_wide = graph.broadcast_repeat(&mean, state.values.shape())?;
            let centered = graph.sub(&state.values, &mean_wide)?;
            let sq = graph.square(&centered)?;
            let var = graph.mean(&sq)?;
            let inv_std = graph.rsqrt_eps(&var, E::from_f64(1e-8))?;
            let inv_wide = graph.broadcast_repeat(&inv_std, state.values.shape())?;
            let values = graph.hadamard(&centered, &inv_wide)?;
            Ok(LearningState { values, n_units: state.n_units })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learner::{init_params, LearnerSpec};

    fn single_unit_set(values: Vec<f64>) -> ParamSet<f64> {
        ParamSet::new(vec![crate::learner::ParamEntry {
            name: "w".into(),
            tensor: Tensor::vector(values),
            unit: 0,
        }])
    }

    #[test]
    fn means_of_constant_tensors() {
        let params = single_unit_set(vec![0.5, 0.5, 0.5, 0.5]);
        let mut g = Graph::new();
        let attached = params.attach(&mut g);
        let grads = vec![g.var(&Tensor::vector(vec![-0.2, -0.2, -0.2, -0.2]))];
        let state = compute_state(&mut g, &params, &attached, &grads).unwrap();
        let v = state.values.to_f64_vec();
        assert!((v[0] + 0.2).abs() < 1e-15);
        assert!((v[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zeros_reduce_to_zero_vector() {
        let spec = LearnerSpec::regression(vec![4], 1, 1); // N = 4 tensors? 2 layers -> 4 entries
        let params = init_params::<f64>(&spec, 0);
        let zeros: Vec<Tensor<f64>> =
            params.entries.iter().map(|e| Tensor::zeros(e.tensor.shape().to_vec())).collect();
        let zero_set = params.with_tensors(zeros.clone());
        let mut g = Graph::new();
        let attached = zero_set.attach(&mut g);
        let grads: Vec<Tensor<f64>> = zeros.iter().map(|t| g.var(t)).collect();
        let state = compute_state(&mut g, &zero_set, &attached, &grads).unwrap();
        assert_eq!(state.len(), 2 * params.n_units());
        assert!(state.values.data().iter().all(|&v| v == 0.0));
    }

    /// Naive summation oracle, no tensor machinery.
    fn oracle_state(params: &ParamSet<f64>, grads: &[Vec<f64>]) -> Vec<f64> {
        let n = params.n_units();
        let mut out = vec![0.0; 2 * n];
        for half in 0..2 {
            for unit in 0..n {
                let mut sum = 0.0;
                let mut count = 0usize;
                for (i, e) in params.entries.iter().enumerate() {
                    if e.unit != unit {
                        continue;
                    }
                    let vals: Vec<f64> =
                        if half == 0 { grads[i].clone() } else { e.tensor.to_f64_vec() };
                    sum += vals.iter().sum::<f64>();
                    count += vals.len();
                }
                out[half * n + unit] = sum / count as f64;
            }
        }
        out
    }

    #[test]
    fn random_state_matches_naive_oracle() {
        let spec = LearnerSpec::regression(vec![3, 2], 2, 1);
        let params = init_params::<f64>(&spec, 9);
        let mut rng = crate::rng::Rng::derive(5, crate::rng::Stream::EvalTasks, 0);
        let grad_vecs: Vec<Vec<f64>> = params
            .entries
            .iter()
            .map(|e| (0..e.tensor.numel()).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .collect();
        let mut g = Graph::new();
        let attached = params.attach(&mut g);
        let grads: Vec<Tensor<f64>> = params
            .entries
            .iter()
            .zip(&grad_vecs)
            .map(|(e, v)| g.var(&Tensor::new(e.tensor.shape().to_vec(), v.clone()).unwrap()))
            .collect();
        let state = compute_state(&mut g, &params, &attached, &grads).unwrap();
        let expected = oracle_state(&params, &grad_vecs);
        for (got, want) in state.values.to_f64_vec().iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn masking_zeroes_the_excluded_half() {
        let state = LearningState {
            values: Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]),
            n_units: 2,
        };
        let mut g = Graph::new();
        let w = mask_state(&mut g, &state, StateMode::WeightOnly).unwrap();
        assert_eq!(w.values.data(), &[0.0, 0.0, 3.0, 4.0]);
        let gr = mask_state(&mut g, &state, StateMode::GradientOnly).unwrap();
        assert_eq!(gr.values.data(), &[1.0, 2.0, 0.0, 0.0]);
        let both = mask_state(&mut g, &state, StateMode::Both).unwrap();
        assert_eq!(both.values.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn state_gradient_is_one_over_unit_size() {
        // d(values[k]) / d(grads[k][i]) = 1 / numel(grads[k]).
        let spec = LearnerSpec::regression(vec![3], 2, 1);
        let params = init_params::<f64>(&spec, 2);
        let mut g = Graph::new();
        let attached = params.attach(&mut g);
        let grads: Vec<Tensor<f64>> = params
            .entries
            .iter()
            .map(|e| g.var(&Tensor::filled(e.tensor.shape().to_vec(), 0.25)))
            .collect();
        let state = compute_state(&mut g, &params, &attached, &grads).unwrap();
        for (k, entry) in params.entries.iter().enumerate() {
            let component = g.slice(&state.values, k, 1).unwrap();
            let scalar = g.sum(&component).unwrap();
            let refs: Vec<&Tensor<f64>> = vec![&grads[k]];
            let d = g
                .grad(&scalar, &refs, crate::autodiff::GradOpts::default())
                .unwrap();
            let want = 1.0 / entry.tensor.numel() as f64;
            for v in d[0].to_f64_vec() {
                assert!((v - want).abs() < 1e-12, "{v} vs {want}");
            }
        }
    }

    #[test]
    fn permuting_within_a_tensor_preserves_its_mean() {
        let params = single_unit_set(vec![1.0, 2.0, 3.0, 4.0]);
        let permuted = single_unit_set(vec![4.0, 1.0, 3.0, 2.0]);
        let mut g = Graph::new();
        let grads = vec![g.var(&Tensor::vector(vec![0.0; 4]))];
        let a = params.attach(&mut g);
        let b = permuted.attach(&mut g);
        let sa = compute_state(&mut g, &params, &a, &grads).unwrap();
        let sb = compute_state(&mut g, &permuted, &b, &grads).unwrap();
        assert_eq!(sa.values.to_f64_vec(), sb.values.to_f64_vec());
    }
}
