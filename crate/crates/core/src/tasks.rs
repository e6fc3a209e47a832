//! Seeded task-distribution samplers: sinusoid regression and a synthetic
//! blob-classification family.
//!
//! Samplers are pure functions of `(family, seed, stream, index)`; identical
//! inputs produce identical tasks bitwise. Data stays `f64` here and is
//! converted to the run precision when tensors are built.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::element::Element;
use crate::error::{Error, Result};
use crate::rng::{Rng, Stream};

/// Plain row-major matrix of task data.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len());
        Matrix { rows, cols, data }
    }

    pub fn to_tensor<E: Element>(&self) -> Tensor<E> {
        Tensor::from_f64_slice(vec![self.rows, self.cols], &self.data).expect("sized")
    }
}

/// Input/target pairs for one side (support or query) of a task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskBatch {
    pub x: Matrix,
    /// Regression targets, or one-hot class rows for classification.
    pub y: Matrix,
    /// Class labels, classification only.
    pub labels: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskDescriptor {
    Sinusoid { amplitude: f64, frequency: f64, phase: f64 },
    Blobs { centroids: Vec<Vec<f64>> },
}

/// One few-shot task: disjointly drawn support and query sets from a single
/// underlying function or class layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub support: TaskBatch,
    pub query: TaskBatch,
    pub descriptor: TaskDescriptor,
}

/// `y = A sin(f x + phi)` with parameters drawn from closed intervals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinusoidFamily {
    pub amplitude: (f64, f64),
    pub frequency: (f64, f64),
    pub phase: (f64, f64),
    pub input: (f64, f64),
}

impl Default for SinusoidFamily {
    fn default() -> Self {
        SinusoidFamily {
            amplitude: (0.1, 5.0),
            frequency: (0.8, 1.2),
            phase: (0.0, std::f64::consts::PI),
            input: (-5.0, 5.0),
        }
    }
}

/// Noise-free sinusoid task: `k` support points, `query_size` query points,
/// inputs uniform over the family's input range.
pub fn sample_sinusoid(family: &SinusoidFamily, k: usize, query_size: usize, rng: &mut Rng) -> Task {
    assert!(k >= 1, "k-shot needs k >= 1");
    let amplitude = rng.uniform(family.amplitude.0, family.amplitude.1);
    let frequency = rng.uniform(family.frequency.0, family.frequency.1);
    let phase = rng.uniform(family.phase.0, family.phase.1);
    let mut draw = |count: usize| {
        let mut xs = Vec::with_capacity(count);
        let mut ys = Vec::with_capacity(count);
        for _ in 0..count {
            let x = rng.uniform(family.input.0, family.input.1);
            xs.push(x);
            ys.push(amplitude * (frequency * x + phase).sin());
        }
        TaskBatch {
            x: Matrix::new(count, 1, xs),
            y: Matrix::new(count, 1, ys),
            labels: None,
        }
    };
    let support = draw(k);
    let query = draw(query_size);
    Task {
        support,
        query,
        descriptor: TaskDescriptor::Sinusoid { amplitude, frequency, phase },
    }
}

/// Isotropic Gaussian blobs around per-task random centroids; a desk-scale
/// stand-in for image classification benchmarks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobFamily {
    pub n_way: usize,
    pub input_dim: usize,
    pub centroid_scale: f64,
    pub noise_scale: f64,
    /// Query examples per class.
    #[serde(default = "default_query_per_class")]
    pub query_per_class: usize,
}

fn default_query_per_class() -> usize {
    15
}

/// Balanced `n_way`-way `k`-shot task: exactly `k` support and
/// `query_per_class` query examples per class, class-major order.
pub fn sample_blobs(family: &BlobFamily, k: usize, rng: &mut Rng) -> Task {
    assert!(family.n_way >= 2, "classification needs n_way >= 2");
    assert!(k >= 1, "k-shot needs k >= 1");
    let (n, dim) = (family.n_way, family.input_dim);
    let centroids: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..dim).map(|_| rng.normal() * family.centroid_scale).collect())
        .collect();
    let mut draw = |per_class: usize| {
        let rows = per_class * n;
        let mut x = Vec::with_capacity(rows * dim);
        let mut y = vec![0.0; rows * n];
        let mut labels = Vec::with_capacity(rows);
        for (class, centroid) in centroids.iter().enumerate() {
            for _ in 0..per_class {
                let row = labels.len();
                for &c in centroid {
                    x.push(c + rng.normal() * family.noise_scale);
                }
                y[row * n + class] = 1.0;
                labels.push(class);
            }
        }
        TaskBatch {
            x: Matrix::new(rows, dim, x),
            y: Matrix::new(rows, n, y),
            labels: Some(labels),
        }
    };
    let support = draw(k);
    let query = draw(family.query_per_class);
    Task { support, query, descriptor: TaskDescriptor::Blobs { centroids } }
}

/// Task families addressable by string id in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", deny_unknown_fields)]
pub enum TaskFamily {
    #[serde(rename = "sinusoid")]
    Sinusoid {
        #[serde(default)]
        ranges: SinusoidFamily,
        k_shot: usize,
        #[serde(default = "default_query_size")]
        query_size: usize,
    },
    #[serde(rename = "blobs")]
    Blobs {
        #[serde(flatten)]
        blobs: BlobFamily,
        k_shot: usize,
    },
}

fn default_query_size() -> usize {
    100
}

impl TaskFamily {
    pub fn sinusoid(k_shot: usize) -> Self {
        TaskFamily::Sinusoid { ranges: SinusoidFamily::default(), k_shot, query_size: 100 }
    }

    /// Input and output dims the base learner must expose for this family.
    pub fn learner_io(&self) -> (usize, usize) {
        match self {
            TaskFamily::Sinusoid { .. } => (1, 1),
            TaskFamily::Blobs { blobs, .. } => (blobs.input_dim, blobs.n_way),
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, TaskFamily::Blobs { .. })
    }

    pub fn k_shot(&self) -> usize {
        match self {
            TaskFamily::Sinusoid { k_shot, .. } | TaskFamily::Blobs { k_shot, .. } => *k_shot,
        }
    }

    /// Sample task number `index` of `stream` under `seed`.
    pub fn sample(&self, seed: u64, stream: Stream, index: u64) -> Task {
        let mut rng = Rng::derive(seed, stream, index);
        match self {
            TaskFamily::Sinusoid { ranges, k_shot, query_size } => {
                sample_sinusoid(ranges, *k_shot, *query_size, &mut rng)
            }
            TaskFamily::Blobs { blobs, k_shot } => sample_blobs(blobs, *k_shot, &mut rng),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TaskFamily::Sinusoid { k_shot, query_size, .. } => {
                if *k_shot == 0 || *query_size == 0 {
                    return Err(Error::Config("sinusoid k_shot and query_size must be >= 1".into()));
                }
            }
            TaskFamily::Blobs { blobs, k_shot } => {
                if blobs.n_way < 2 {
                    return Err(Error::Config("blobs n_way must be >= 2".into()));
                }
                if *k_shot == 0 || blobs.query_per_class == 0 || blobs.input_dim == 0 {
                    return Err(Error::Config("blobs sizes must be >= 1".into()));
                }
            }
        }
        Ok(())
    }
}
