//! Finite-difference verification suites.
//!
//! Two groups: per-op checks of the tensor engine, and meta-gradient checks
//! through unrolled inner loops. Central differences are always evaluated by
//! re-running the forward computation on perturbed copies, so the numeric
//! side never touches the backward implementation it is checking.

use crate::autodiff::{GradOpts, Graph, Tensor};
use crate::element::{Dtype, Element};
use crate::error::Result;

use crate::inner_loop::UpdateRuleConfig;
use crate::learner::{task_loss, LearnerSpec};
use crate::rng::{Rng, Stream};
use crate::tasks::TaskFamily;
use crate::trainer::{InitMode, OuterOptimizer, TrainConfig, Trainer, TrainerSetup};

/// Relative error with an absolute floor: `|a - n| / max(1, |a|, |n|)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1.0_f64.max(analytic.abs()).max(numeric.abs())
}

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

fn fd_step(dtype: Dtype) -> f64 {
    match dtype {
        Dtype::F64 => 1e-5,
        Dtype::F32 => 5e-3,
    }
}

fn op_tolerance(dtype: Dtype) -> f64 {
    match dtype {
        Dtype::F64 => 1e-6,
        Dtype::F32 => 1e-3,
    }
}

/// Scalar-valued graph program over a list of input tensors.
type BuildFn<E> = dyn Fn(&mut Graph<E>, &[Tensor<E>]) -> Result<Tensor<E>>;

/// Compare analytic gradients of `build` against central differences on the
/// first `n_check` inputs; returns the worst relative error seen. Inputs
/// past `n_check` are carried along but treated as constants.
fn check_case<E: Element>(
    build: &BuildFn<E>,
    inputs: &[Tensor<E>],
    n_check: usize,
    corrupt: bool,
) -> Result<f64> {
    let mut graph = Graph::new();
    let attached: Vec<Tensor<E>> = inputs.iter().map(|t| graph.var(t)).collect();
    let out = build(&mut graph, &attached)?;
    let refs: Vec<&Tensor<E>> = attached[..n_check].iter().collect();
    let opts = GradOpts { retain: false, allow_unreachable: false };
    let grads = graph.grad(&out, &refs, opts)?;

    let h = fd_step(E::DTYPE);
    let mut worst = 0.0_f64;
    for (i, input) in inputs.iter().take(n_check).enumerate() {
        let base = input.to_f64_vec();
        for j in 0..base.len() {
            let eval = |v: f64| -> Result<f64> {
                let mut data = base.clone();
                data[j] = v;
                let mut tensors: Vec<Tensor<E>> = inputs.to_vec();
                tensors[i] = Tensor::from_f64_slice(input.shape().to_vec(), &data)?;
                let mut g = Graph::new();
                let attached: Vec<Tensor<E>> = tensors.iter().map(|t| g.var(t)).collect();
                Ok(build(&mut g, &attached)?.item().to_f64())
            };
            let numeric = (eval(base[j] + h)? - eval(base[j] - h)?) / (2.0 * h);
            let mut analytic = grads[i].data()[j].to_f64();
            if corrupt {
                analytic = analytic * 1.5 + 1e-3;
            }
            worst = worst.max(rel_err(analytic, numeric));
        }
    }
    Ok(worst)
}

fn rand_tensor<E: Element>(rng: &mut Rng, shape: Vec<usize>, away_from_zero: bool) -> Tensor<E> {
    // Keep activation inputs far enough from the ReLU kink that the central
    // difference cannot cross it.
    let margin = 20.0 * fd_step(E::DTYPE);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| loop {
            let v = rng.uniform(-2.0, 2.0);
            if !away_from_zero || v.abs() > margin {
                return v;
            }
        })
        .collect();
    Tensor::from_f64_slice(shape, &data).expect("sized")
}

fn onehot_rows<E: Element>(rng: &mut Rng, rows: usize, cols: usize) -> Tensor<E> {
    let mut data = vec![0.0; rows * cols];
    for r in 0..rows {
        let c = (rng.next_u64() % cols as u64) as usize;
        data[r * cols + c] = 1.0;
    }
    Tensor::from_f64_slice(vec![rows, cols], &data).expect("sized")
}

/// Per-op finite-difference checks over `trials` randomized inputs each.
/// `corrupt` perturbs the analytic gradient of the named op (negative
/// control for the harness itself).
pub fn run_op_suites<E: Element>(
    seed: u64,
    trials: usize,
    corrupt: Option<&str>,
) -> Result<Vec<SuiteReport>> {
    let tolerance = op_tolerance(E::DTYPE);
    let mut reports = Vec::new();
    type Case<E> = (&'static str, Box<BuildFn<E>>, fn(&mut Rng) -> Vec<Tensor<E>>);
    let cases: Vec<Case<E>> = vec![
        (
            "add",
            Box::new(|g, t| {
                let s = g.add(&t[0], &t[1])?;
                g.mean(&s)
            }),
            |r| vec![rand_tensor(r, vec![3, 2], false), rand_tensor(r, vec![3, 2], false)],
        ),
        (
            "sub",
            Box::new(|g, t| {
                let s = g.sub(&t[0], &t[1])?;
                g.mean(&s)
            }),
            |r| vec![rand_tensor(r, vec![4], false), rand_tensor(r, vec![4], false)],
        ),
        (
            "hadamard",
            Box::new(|g, t| {
                let s = g.hadamard(&t[0], &t[1])?;
                g.sum(&s)
            }),
            |r| vec![rand_tensor(r, vec![2, 3], false), rand_tensor(r, vec![2, 3], false)],
        ),
        (
            "scale",
            Box::new(|g, t| {
                let s = g.scale(&t[0], E::from_f64(-1.7))?;
                g.sum(&s)
            }),
            |r| vec![rand_tensor(r, vec![5], false)],
        ),
        (
            "matmul",
            Box::new(|g, t| {
                let s = g.matmul(&t[0], &t[1])?;
                g.mean(&s)
            }),
            |r| vec![rand_tensor(r, vec![2, 3], false), rand_tensor(r, vec![3, 4], false)],
        ),
        (
            "transpose",
            Box::new(|g, t| {
                let s = g.transpose(&t[0])?;
                let sq = g.square(&s)?;
                g.sum(&sq)
            }),
            |r| vec![rand_tensor(r, vec![3, 2], false)],
        ),
        (
            "relu",
            Box::new(|g, t| {
                let s = g.relu(&t[0])?;
                g.sum(&s)
            }),
            |r| vec![rand_tensor(r, vec![6], true)],
        ),
        (
            "leaky_relu",
            Box::new(|g, t| {
                let s = g.leaky_relu(&t[0])?;
                g.sum(&s)
            }),
            |r| vec![rand_tensor(r, vec![6], true)],
        ),
        (
            "square",
            Box::new(|g, t| {
                let s = g.square(&t[0])?;
                g.mean(&s)
            }),
            |r| vec![rand_tensor(r, vec![2, 2], false)],
        ),
        (
            "mean",
            Box::new(|g, t| g.mean(&t[0])),
            |r| vec![rand_tensor(r, vec![7], false)],
        ),
        (
            "sum",
            Box::new(|g, t| {
                let s = g.square(&t[0])?;
                g.sum(&s)
            }),
            |r| vec![rand_tensor(r, vec![3, 3], false)],
        ),
        (
            "row_sum",
            Box::new(|g, t| {
                let s = g.row_sum(&t[0])?;
                let sq = g.square(&s)?;
                g.sum(&sq)
            }),
            |r| vec![rand_tensor(r, vec![3, 4], false)],
        ),
        (
            "softmax",
            Box::new(|g, t| {
                let s = g.softmax(&t[0])?;
                let sq = g.square(&s)?;
                g.sum(&sq)
            }),
            |r| vec![rand_tensor(r, vec![2, 5], false)],
        ),
        (
            "mse_loss",
            Box::new(|g, t| g.mse_loss(&t[0], &t[1])),
            |r| vec![rand_tensor(r, vec![4, 2], false), rand_tensor(r, vec![4, 2], false)],
        ),
        (
            "softmax_cross_entropy",
            Box::new(|g, t| g.softmax_cross_entropy(&t[0], &t[1].detached())),
            |r| vec![rand_tensor(r, vec![3, 4], false), onehot_rows(r, 3, 4)],
        ),
        (
            "broadcast_repeat",
            Box::new(|g, t| {
                let s = g.broadcast_repeat(&t[0], &[4, 3])?;
                let sq = g.square(&s)?;
                g.sum(&sq)
            }),
            |r| vec![rand_tensor(r, vec![3], false)],
        ),
        (
            "reduce_sum_to",
            Box::new(|g, t| {
                let s = g.reduce_sum_to(&t[0], &[3])?;
                let sq = g.square(&s)?;
                g.sum(&sq)
            }),
            |r| vec![rand_tensor(r, vec![4, 3], false)],
        ),
        (
            "concat",
            Box::new(|g, t| {
                let s = g.concat(&[&t[0], &t[1]])?;
                let sq = g.square(&s)?;
                g.mean(&sq)
            }),
            |r| vec![rand_tensor(r, vec![3], false), rand_tensor(r, vec![2], false)],
        ),
        (
            "slice",
            Box::new(|g, t| {
                let s = g.slice(&t[0], 1, 3)?;
                let sq = g.square(&s)?;
                g.sum(&sq)
            }),
            |r| vec![rand_tensor(r, vec![6], false)],
        ),
        (
            "reshape",
            Box::new(|g, t| {
                let s = g.reshape(&t[0], &[2, 3])?;
                let m = g.row_sum(&s)?;
                let sq = g.square(&m)?;
                g.sum(&sq)
            }),
            |r| vec![rand_tensor(r, vec![6], false)],
        ),
        (
            "rsqrt_eps",
            Box::new(|g, t| {
                // Square first so the argument stays positive under probing.
                let sq = g.square(&t[0])?;
                let s = g.rsqrt_eps(&sq, E::from_f64(1e-2))?;
                g.sum(&s)
            }),
            |r| vec![rand_tensor(r, vec![5], true)],
        ),
        (
            "mlp_loss",
            Box::new(|g, t| {
                // MSE of a 1-4-1 ReLU net against fixed targets; inputs are
                // the four parameter tensors.
                let spec = LearnerSpec::regression(vec![4], 1, 1);
                let x = Tensor::from_f64_slice(vec![3, 1], &[0.4, -1.2, 2.1])?;
                let y = Tensor::from_f64_slice(vec![3, 1], &[0.9, 0.1, -0.4])?;
                let xv = g.var(&x);
                task_loss(g, &spec, t, &xv, &y)
            }),
            |r| loop {
                let params = vec![
                    rand_tensor::<E>(r, vec![1, 4], false),
                    rand_tensor(r, vec![4], true),
                    rand_tensor(r, vec![4, 1], false),
                    rand_tensor(r, vec![1], true),
                ];
                // Reject draws whose hidden pre-activations sit close
                // enough to the ReLU kink for the probe to cross it.
                let margin = 20.0 * fd_step(E::DTYPE);
                let w1 = params[0].to_f64_vec();
                let b1 = params[1].to_f64_vec();
                let clear = [0.4, -1.2, 2.1].iter().all(|&x| {
                    (0..4).all(|j| (x * w1[j] + b1[j]).abs() > margin)
                });
                if clear {
                    return params;
                }
            },
        ),
    ];

    for (name, build, make_inputs) in &cases {
        let mut worst = 0.0_f64;
        for trial in 0..trials {
            let mut rng = Rng::derive(seed, Stream::EvalTasks, trial as u64);
            let inputs = make_inputs(&mut rng);
            // Cross-entropy targets are constants by contract; everything
            // else is differentiable in all inputs.
            let n_check =
                if *name == "softmax_cross_entropy" { 1 } else { inputs.len() };
            worst =
                worst.max(check_case(build.as_ref(), &inputs, n_check, corrupt == Some(*name))?);
        }
        reports.push(SuiteReport { name: format!("op::{name}"), max_rel_err: worst, tolerance });
    }
    Ok(reports)
}

/// Problem sizes for the meta-gradient suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckSize {
    /// 1-4-1 learner, two inner steps.
    Tiny,
    /// 1-8-8-1 learner, three inner steps.
    Small,
}

fn meta_setup(size: CheckSize, seed: u64) -> TrainerSetup {
    let hidden = match size {
        CheckSize::Tiny => vec![4],
        CheckSize::Small => vec![8, 8],
    };
    let steps = match size {
        CheckSize::Tiny => 2,
        CheckSize::Small => 3,
    };
    TrainerSetup {
        learner: LearnerSpec::regression(hidden, 1, 1),
        rule: UpdateRuleConfig::alfa(steps),
        family: TaskFamily::sinusoid(5),
        train: TrainConfig {
            init_mode: InitMode::MamlJointlyTrained,
            meta_batch_size: 1,
            outer_optimizer: OuterOptimizer::Adam,
            outer_lr: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            total_iterations: 0,
            clip_norm: 10.0,
            eval_every: 0,
            eval_tasks: 1,
            seed_train: seed,
            seed_eval: seed,
            precision: crate::element::Dtype::F64,
        },
    }
}

/// Check analytic meta-gradients (with respect to both the generator
/// parameters and the initialization) against central finite differences
/// through the unrolled inner loop, for one seed.
pub fn meta_gradient_check(size: CheckSize, seed: u64, tolerance: f64) -> Result<SuiteReport> {
    let setup = meta_setup(size, seed);
    let trainer = Trainer::<f64>::new(setup.clone())?;
    let task = setup.family.sample(seed, Stream::TrainTasks, 0);
    let outcome = trainer.run_episode(&task, true)?;
    let names = trainer.trained_names();

    let h = 1e-5;
    let mut worst = 0.0_f64;
    for (i, name) in names.iter().enumerate() {
        let tensor = trainer.meta_param(name)?.clone();
        let base = tensor.to_f64_vec();
        for j in 0..base.len() {
            let eval = |v: f64| -> Result<f64> {
                let mut data = base.clone();
                data[j] = v;
                let mut probe = trainer.clone();
                probe.set_meta_param(
                    name,
                    Tensor::from_f64_slice(tensor.shape().to_vec(), &data)?,
                )?;
                // The adapted values do not depend on the meta-graph, so the
                // cheap evaluation path gives the same loss.
                Ok(probe.run_episode(&task, false)?.query_loss)
            };
            let numeric = (eval(base[j] + h)? - eval(base[j] - h)?) / (2.0 * h);
            let analytic = outcome.grads[i][j];
            worst = worst.max(rel_err(analytic, numeric));
        }
    }
    Ok(SuiteReport {
        name: format!("meta::{size:?}::seed{seed}"),
        max_rel_err: worst,
        tolerance,
    })
}

/// The full gradcheck battery the CLI runs: op suites plus meta-gradient
/// checks over a handful of seeds.
pub fn run_all(size: CheckSize, corrupt: Option<&str>) -> Result<Vec<SuiteReport>> {
    let trials = match size {
        CheckSize::Tiny => 25,
        CheckSize::Small => 100,
    };
    let mut reports = run_op_suites::<f64>(1, trials, corrupt)?;
    let seeds: &[u64] = match size {
        CheckSize::Tiny => &[1, 2, 3],
        CheckSize::Small => &[1, 2, 3, 4, 5],
    };
    for &seed in seeds {
        reports.push(meta_gradient_check(size, seed, 1e-4)?);
    }
    Ok(reports)
}
