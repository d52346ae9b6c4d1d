//! Analytic-vs-numeric gradient comparison in `f64`.

use rand::Rng as _;
use serde::Serialize;

use super::{BatchNormMode, Graph, Op, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-4;
/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor so that vanishing gradients are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub op: String,
    pub shapes: Vec<Vec<usize>>,
    pub seed: u64,
    pub max_rel_error: f64,
    pub elements: usize,
    /// Number of times the inputs were redrawn to avoid a kink.
    pub resampled: usize,
    pub passed: bool,
}

/// `|a - b| / max(|a|, |b|, REL_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn draw_inputs(op: &Op, shapes: &[Vec<usize>], rng: &mut rng::Rng) -> Vec<Tensor<f64>> {
    shapes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let n = s.iter().product();
            let mut data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            // Running variance must stay positive.
            if matches!(op, Op::BatchNorm2d { .. }) && i == 4 {
                data.iter_mut().for_each(|v| *v = v.abs() + 0.5);
            }
            Tensor::new(s.clone(), data).expect("shape")
        })
        .collect()
}

/// True when some input sits close enough to a non-differentiable point that
/// a central difference would straddle it.
fn near_kink(op: &Op, inputs: &[Tensor<f64>]) -> bool {
    match op {
        Op::Relu => inputs[0].data().iter().any(|v| v.abs() < 10.0 * FD_STEP),
        _ => false,
    }
}

fn weighted_output(g: &mut Graph<f64>, op: &Op, vars: &[Var], weights: &Tensor<f64>) -> Result<Var> {
    let y = g.apply(op.clone(), vars)?;
    let w = g.constant(weights.clone().reshaped(g.shape(y))?);
    let prod = g.mul(y, w)?;
    g.sum(prod, None)
}

fn loss_value(op: &Op, inputs: &[Tensor<f64>], weights: &Tensor<f64>) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let l = weighted_output(&mut g, op, &vars, weights)?;
    Ok(g.value(l).item())
}

/// Compares analytic gradients of `sum(op(inputs) * R)` for a fixed random
/// `R` against central differences on every input element.
pub fn grad_check(op: &Op, shapes: &[Vec<usize>], seed: u64) -> Result<GradCheckReport> {
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if total > 512 {
        return Err(Error::contract(format!("grad_check limited to 512 elements, got {total}")));
    }
    let mut rng = rng::stream(seed, "gradcheck");
    let mut inputs = draw_inputs(op, shapes, &mut rng);
    let mut resampled = 0;
    while near_kink(op, &inputs) {
        resampled += 1;
        if resampled > 100 {
            return Err(Error::contract("could not draw inputs away from a kink"));
        }
        inputs = draw_inputs(op, shapes, &mut rng);
    }

    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.parameter(t.clone())).collect();
    let y = g.apply(op.clone(), &vars)?;
    let out_len = g.value(y).len();
    let weights = Tensor::from_vec((0..out_len).map(|_| rng.random_range(-1.0..1.0)).collect());
    let loss = {
        let w = g.constant(weights.clone().reshaped(g.shape(y))?);
        let prod = g.mul(y, w)?;
        g.sum(prod, None)?
    };
    let grads = g.backward(loss)?;

    let mut max_err: f64 = 0.0;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            inputs[i].data_mut()[j] = orig + FD_STEP;
            let up = loss_value(op, &inputs, &weights)?;
            inputs[i].data_mut()[j] = orig - FD_STEP;
            let down = loss_value(op, &inputs, &weights)?;
            inputs[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            max_err = max_err.max(relative_error(analytic.data()[j], numeric));
        }
    }
    Ok(GradCheckReport {
        op: op.name().to_string(),
        shapes: shapes.to_vec(),
        seed,
        max_rel_error: max_err,
        elements: total,
        resampled,
        passed: max_err < TOLERANCE,
    })
}

/// One representative configuration for every primitive in the catalog.
pub fn standard_cases() -> Vec<(Op, Vec<Vec<usize>>)> {
    let bn = |mode| Op::BatchNorm2d {
        mode,
        eps: 1e-5,
        momentum: 0.1,
    };
    vec![
        (
            Op::MatMul {
                trans_a: false,
                trans_b: false,
            },
            vec![vec![2, 3], vec![3, 2]],
        ),
        (
            Op::MatMul {
                trans_a: true,
                trans_b: true,
            },
            vec![vec![3, 2], vec![4, 3]],
        ),
        (
            Op::Conv2d {
                stride: 1,
                padding: 1,
            },
            vec![vec![1, 2, 4, 4], vec![3, 2, 3, 3]],
        ),
        (
            Op::Conv2d {
                stride: 2,
                padding: 1,
            },
            vec![vec![2, 2, 5, 5], vec![2, 2, 3, 3]],
        ),
        (Op::Add, vec![vec![2, 3, 4], vec![2, 1, 4]]),
        (Op::Mul, vec![vec![3, 1, 2, 2], vec![3, 4, 2, 2]]),
        (Op::Scale(-1.7), vec![vec![3, 4]]),
        (Op::Sum { axis: None }, vec![vec![2, 3, 2]]),
        (Op::Sum { axis: Some(1) }, vec![vec![2, 3, 2]]),
        (Op::Mean { axis: None }, vec![vec![4, 3]]),
        (Op::Mean { axis: Some(0) }, vec![vec![4, 3]]),
        (Op::Relu, vec![vec![3, 5]]),
        (bn(BatchNormMode::Train), vec![vec![3, 2, 2, 2], vec![2], vec![2], vec![2], vec![2]]),
        (bn(BatchNormMode::Eval), vec![vec![2, 3, 2, 1], vec![3], vec![3], vec![3], vec![3]]),
        (Op::Softmax { axis: 0 }, vec![vec![5]]),
        (Op::Softmax { axis: 1 }, vec![vec![2, 4, 3]]),
        (Op::LogSumExp { axis: 1 }, vec![vec![3, 6]]),
        (Op::L2Normalize { axis: 1, eps: 1e-12 }, vec![vec![2, 4, 3]]),
        (
            Op::IndexSpatial {
                sites: vec![[0, 1, 2], [1, 0, 0], [0, 1, 2]],
            },
            vec![vec![2, 3, 2, 3]],
        ),
        (Op::Reshape { shape: vec![6, 2] }, vec![vec![3, 4]]),
        (
            Op::Narrow {
                axis: 1,
                start: 1,
                len: 2,
            },
            vec![vec![2, 4, 3]],
        ),
        (Op::GatherRows { rows: vec![2, 0, 2] }, vec![vec![3, 4]]),
    ]
}
