//! Purely functional MLP base learners.
//!
//! Parameters are explicit inputs to every operation, so the inner loop can
//! thread adapted parameters through further differentiation. Each named
//! parameter tensor is one "layer unit" for hyperparameter purposes; with
//! [`UnitGranularity::PerWeightTensorOnly`], a bias shares the unit of its
//! layer's weight instead.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::rng::{Rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LearnerKind {
    RegressionMlp,
    ClassificationMlp,
}

/// How parameter tensors map onto hyperparameter units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnitGranularity {
    /// Every parameter tensor (weight or bias) is its own unit.
    #[serde(rename = "per-tensor")]
    PerTensor,
    /// Only weight tensors define units; each bias joins its weight's unit.
    #[serde(rename = "per-weight-tensor-only")]
    PerWeightTensorOnly,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerSpec {
    pub kind: LearnerKind,
    pub hidden: Vec<usize>,
    pub input_dim: usize,
    pub output_dim: usize,
    #[serde(default = "default_units")]
    pub units: UnitGranularity,
}

fn default_units() -> UnitGranularity {
    UnitGranularity::PerTensor
}

impl LearnerSpec {
    /// The small sinusoid-regression preset: two hidden layers of 40 units.
    pub fn sinusoid_2x40() -> Self {
        LearnerSpec::regression(vec![40, 40], 1, 1)
    }

    /// The larger sinusoid-regression preset: three hidden layers of 80 units.
    pub fn sinusoid_3x80() -> Self {
        LearnerSpec::regression(vec![80, 80, 80], 1, 1)
    }

    pub fn regression(hidden: Vec<usize>, input_dim: usize, output_dim: usize) -> Self {
        LearnerSpec {
            kind: LearnerKind::RegressionMlp,
            hidden,
            input_dim,
            output_dim,
            units: UnitGranularity::PerTensor,
        }
    }

    pub fn classification(hidden: Vec<usize>, input_dim: usize, n_classes: usize) -> Self {
        LearnerSpec {
            kind: LearnerKind::ClassificationMlp,
            hidden,
            input_dim,
            output_dim: n_classes,
            units: UnitGranularity::PerTensor,
        }
    }

    /// Layer dimensions, input to output.
    fn dims(&self) -> Vec<usize> {
        let mut d = Vec::with_capacity(self.hidden.len() + 2);
        d.push(self.input_dim);
        d.extend_from_slice(&self.hidden);
        d.push(self.output_dim);
        d
    }

    pub fn n_linear_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("learner dims must be positive".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden sizes must be positive".into()));
        }
        Ok(())
    }
}

/// One named parameter tensor plus the hyperparameter unit it belongs to.
#[derive(Debug, Clone)]
pub struct ParamEntry<E> {
    pub name: String,
    pub tensor: Tensor<E>,
    pub unit: usize,
}

/// Named, ordered parameter collection. Order is fixed for the lifetime of a
/// run; `n_units` is the N of the generator sizing formula.
#[derive(Debug, Clone)]
pub struct ParamSet<E> {
    pub entries: Vec<ParamEntry<E>>,
    n_units: usize,
}

impl<E: Element> ParamSet<E> {
    pub fn new(entries: Vec<ParamEntry<E>>) -> Self {
        let n_units = entries.iter().map(|e| e.unit + 1).max().unwrap_or(0);
        ParamSet { entries, n_units }
    }

    pub fn n_units(&self) -> usize {
        self.n_units
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tensors(&self) -> Vec<Tensor<E>> {
        self.entries.iter().map(|e| e.tensor.clone()).collect()
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.name.as_str()).collect()
    }

    pub fn unit_of(&self, index: usize) -> usize {
        self.entries[index].unit
    }

    /// Attach every entry to `graph` as a leaf, preserving order.
    pub fn attach(&self, graph: &mut Graph<E>) -> Vec<Tensor<E>> {
        self.entries.iter().map(|e| graph.var(&e.tensor)).collect()
    }

    /// Replace tensor values, keeping names and units.
    pub fn with_tensors(&self, tensors: Vec<Tensor<E>>) -> Self {
        assert_eq!(tensors.len(), self.entries.len());
        let entries = self
            .entries
            .iter()
            .zip(tensors)
            .map(|(e, tensor)| ParamEntry {
                name: e.name.clone(),
                tensor: tensor.detached(),
                unit: e.unit,
            })
            .collect();
        ParamSet { entries, n_units: self.n_units }
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// One display name per hyperparameter unit: the first entry that maps
    /// to it.
    pub fn unit_names(&self) -> Vec<String> {
        let mut names = vec![String::new(); self.n_units];
        for e in self.entries.iter().rev() {
            names[e.unit] = e.name.clone();
        }
        names
    }
}

/// Seeded init: weights from a truncated normal with fan-in scaling
/// (`std = 1/sqrt(fan_in)`, cut at two standard deviations), biases zero.
pub fn init_params<E: Element>(spec: &LearnerSpec, seed: u64) -> ParamSet<E> {
    let dims = spec.dims();
    let mut rng = Rng::derive(seed, Stream::LearnerInit, 0);
    let mut entries = Vec::new();
    let mut unit = 0;
    for l in 0..dims.len() - 1 {
        let (fan_in, fan_out) = (dims[l], dims[l + 1]);
        let std = 1.0 / (fan_in as f64).sqrt();
        let w: Vec<E> = (0..fan_in * fan_out)
            .map(|_| E::from_f64(rng.truncated_normal(std)))
            .collect();
        entries.push(ParamEntry {
            name: format!("layer{l}.weight"),
            tensor: Tensor::new(vec![fan_in, fan_out], w).expect("sized above"),
            unit,
        });
        let bias_unit = match spec.units {
            UnitGranularity::PerTensor => {
                unit += 1;
                unit
            }
            UnitGranularity::PerWeightTensorOnly => unit,
        };
        entries.push(ParamEntry {
            name: format!("layer{l}.bias"),
            tensor: Tensor::zeros(vec![fan_out]),
            unit: bias_unit,
        });
        unit = bias_unit + 1;
    }
    ParamSet::new(entries)
}

/// Forward pass over a batch: `x (batch, input_dim) -> (batch, output_dim)`,
/// ReLU between linear layers. Graph-attached when the parameters are.
pub fn forward<E: Element>(
    graph: &mut Graph<E>,
    spec: &LearnerSpec,
    params: &[Tensor<E>],
    x: &Tensor<E>,
) -> Result<Tensor<E>> {
    let n_layers = spec.n_linear_layers();
    assert_eq!(params.len(), 2 * n_layers, "expected weight+bias per layer");
    let &[batch, in_dim] = x.shape() else {
        return Err(Error::InvalidShape {
            op: "forward",
            shape: x.shape().to_vec(),
            reason: "expected (batch, input_dim)".into(),
        });
    };
    if in_dim != spec.input_dim {
        return Err(Error::ShapeMismatch {
            op: "forward",
            lhs: x.shape().to_vec(),
            rhs: vec![batch, spec.input_dim],
        });
    }
    let mut h = x.clone();
    for l in 0..n_layers {
        let w = &params[2 * l];
        let b = &params[2 * l + 1];
        let z = graph.matmul(&h, w)?;
        let bt = graph.broadcast_repeat(b, z.shape())?;
        h = graph.add(&z, &bt)?;
        if l + 1 < n_layers {
            h = graph.relu(&h)?;
        }
    }
    Ok(h)
}

/// Task loss: MSE for regression learners, batch-mean softmax cross-entropy
/// for classification learners. Scalar, graph-attached.
pub fn task_loss<E: Element>(
    graph: &mut Graph<E>,
    spec: &LearnerSpec,
    params: &[Tensor<E>],
    x: &Tensor<E>,
    y: &Tensor<E>,
) -> Result<Tensor<E>> {
    if x.numel() == 0 || y.numel() == 0 {
        return Err(Error::EmptyBatch { op: "task_loss" });
    }
    let pred = forward(graph, spec, params, x)?;
    match spec.kind {
        LearnerKind::RegressionMlp => graph.mse_loss(&pred, y),
        LearnerKind::ClassificationMlp => graph.softmax_cross_entropy(&pred, y),
    }
}
