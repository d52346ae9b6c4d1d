use super::kernels::{self, axis_split, ConvGeom};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalize with batch statistics and produce updated running statistics.
    Train,
    /// Normalize with the supplied running statistics.
    Eval,
}

/// Primitive operations. Attributes live in the variant.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// `op(a) @ op(b)` for rank-2 operands.
    MatMul { trans_a: bool, trans_b: bool },
    /// NCHW input, OIHW kernel, no bias.
    Conv2d { stride: usize, padding: usize },
    /// Elementwise with equal-rank broadcasting.
    Add,
    Mul,
    Scale(f64),
    Sum { axis: Option<usize> },
    Mean { axis: Option<usize> },
    Relu,
    /// Inputs: `x [N,C,H,W]`, `gamma [C]`, `beta [C]`, `running_mean [C]`,
    /// `running_var [C]`.
    BatchNorm2d {
        mode: BatchNormMode,
        eps: f64,
        momentum: f64,
    },
    Softmax { axis: usize },
    /// Reduces `axis`.
    LogSumExp { axis: usize },
    /// `x / sqrt(sum(x^2) + eps)` along `axis`.
    L2Normalize { axis: usize, eps: f64 },
    /// Picks `[n, row, col]` feature vectors out of an NCHW tensor into `[M, C]`.
    IndexSpatial { sites: Vec<[usize; 3]> },
    Reshape { shape: Vec<usize> },
    Narrow { axis: usize, start: usize, len: usize },
    /// Row lookup on a rank-2 table.
    GatherRows { rows: Vec<usize> },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::MatMul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Relu => "relu",
            Op::BatchNorm2d { .. } => "batchnorm2d",
            Op::Softmax { .. } => "softmax",
            Op::LogSumExp { .. } => "logsumexp",
            Op::L2Normalize { .. } => "l2normalize",
            Op::IndexSpatial { .. } => "index_spatial",
            Op::Reshape { .. } => "reshape",
            Op::Narrow { .. } => "narrow",
            Op::GatherRows { .. } => "gather_rows",
        }
    }
}

#[derive(Debug)]
enum Aux<T> {
    None,
    BatchNorm {
        mean: Vec<T>,
        inv_std: Vec<T>,
        running: Option<(Vec<T>, Vec<T>)>,
    },
}

#[derive(Debug)]
struct Node<T> {
    op: Option<Op>,
    inputs: Vec<Var>,
    value: Tensor<T>,
    requires_grad: bool,
    aux: Aux<T>,
}

/// Single-use tape. Nodes are appended in evaluation order, which is a
/// topological order of the computation.
#[derive(Debug, Default)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: None,
            inputs: Vec::new(),
            value,
            requires_grad,
            aux: Aux::None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn parameter(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Updated `(running_mean, running_var)` of a train-mode batchnorm node.
    pub fn running_stats(&self, v: Var) -> Option<(&[T], &[T])> {
        match &self.nodes[v.0].aux {
            Aux::BatchNorm {
                running: Some((m, s)),
                ..
            } => Some((m, s)),
            _ => None,
        }
    }

    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let arity = match op {
            Op::MatMul { .. } | Op::Conv2d { .. } | Op::Add | Op::Mul => 2,
            Op::BatchNorm2d { .. } => 5,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::contract(format!(
                "{} takes {arity} input(s), got {}",
                op.name(),
                inputs.len()
            )));
        }
        let (value, aux) = {
            let xs: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            forward(&op, &xs)?
        };
        if !value.all_finite() {
            return Err(Error::Numeric {
                op: op.name().to_string(),
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op: Some(op),
            inputs: inputs.to_vec(),
            value,
            requires_grad,
            aux,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(
            Op::MatMul {
                trans_a: false,
                trans_b: false,
            },
            &[a, b],
        )
    }

    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: usize) -> Result<Var> {
        self.apply(Op::Conv2d { stride, padding }, &[x, k])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(Op::Scale(c), &[x])
    }

    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.apply(Op::Sum { axis }, &[x])
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.apply(Op::Mean { axis }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Relu, &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Op::Softmax { axis }, &[x])
    }

    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Op::LogSumExp { axis }, &[x])
    }

    pub fn l2_normalize(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        self.apply(Op::L2Normalize { axis, eps }, &[x])
    }

    pub fn index_spatial(&mut self, x: Var, sites: Vec<[usize; 3]>) -> Result<Var> {
        self.apply(Op::IndexSpatial { sites }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(
            Op::Reshape {
                shape: shape.to_vec(),
            },
            &[x],
        )
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.apply(Op::Narrow { axis, start, len }, &[x])
    }

    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        self.apply(Op::GatherRows { rows }, &[x])
    }

    /// Reverse sweep from a scalar loss. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Err(Error::NoTape);
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape(), T::one()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Some(op) = &node.op else { continue };
            let Some(g) = grads[id].take() else { continue };
            let xs: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let need: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let contributions = backward_op(op, &xs, &node.value, &node.aux, &g, &need);
            for ((input, need), contrib) in node.inputs.iter().zip(&need).zip(contributions) {
                let (true, Some(c)) = (*need, contrib) else { continue };
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(c.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn reduce_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(shape_err(op, shape, &[axis]));
    }
    Ok(())
}

fn forward<T: Real>(op: &Op, xs: &[&Tensor<T>]) -> Result<(Tensor<T>, Aux<T>)> {
    let x = xs[0];
    let out = match op {
        Op::MatMul { trans_a, trans_b } => {
            let (a, b) = (xs[0], xs[1]);
            if a.rank() != 2 || b.rank() != 2 {
                return Err(shape_err("matmul", a.shape(), b.shape()));
            }
            let (m, ka) = if *trans_a {
                (a.shape()[1], a.shape()[0])
            } else {
                (a.shape()[0], a.shape()[1])
            };
            let (kb, n) = if *trans_b {
                (b.shape()[1], b.shape()[0])
            } else {
                (b.shape()[0], b.shape()[1])
            };
            if ka != kb {
                return Err(shape_err("matmul", a.shape(), b.shape()));
            }
            let mut out = vec![T::zero(); m * n];
            T::gemm(m, ka, n, a.data(), *trans_a, b.data(), *trans_b, T::zero(), &mut out);
            Tensor::new(vec![m, n], out)?
        }
        Op::Conv2d { stride, padding } => {
            let g = ConvGeom::new(x.shape(), xs[1].shape(), *stride, *padding)?;
            Tensor::new(g.out_shape(), kernels::conv2d_forward(x.data(), xs[1].data(), &g))?
        }
        Op::Add | Op::Mul => {
            let (a, b) = (xs[0], xs[1]);
            let shape = kernels::broadcast_shape(a.shape(), b.shape())
                .ok_or_else(|| shape_err(op.name(), a.shape(), b.shape()))?;
            let n = shape.iter().product();
            let mut out = vec![T::zero(); n];
            let (ad, bd) = (a.data(), b.data());
            if matches!(op, Op::Add) {
                kernels::for_each_broadcast(a.shape(), b.shape(), &shape, |o, i, j| {
                    out[o] = ad[i] + bd[j]
                });
            } else {
                kernels::for_each_broadcast(a.shape(), b.shape(), &shape, |o, i, j| {
                    out[o] = ad[i] * bd[j]
                });
            }
            Tensor::new(shape, out)?
        }
        Op::Scale(c) => {
            let c = T::of(*c);
            x.map(|v| v * c)
        }
        Op::Sum { axis } | Op::Mean { axis } => {
            let mean = matches!(op, Op::Mean { .. });
            match axis {
                None => {
                    let s: T = x.data().iter().copied().sum();
                    let s = if mean { s / T::of(x.len() as f64) } else { s };
                    Tensor::scalar(s)
                }
                Some(axis) => {
                    check_axis(op.name(), x.shape(), *axis)?;
                    let (outer, len, inner) = axis_split(x.shape(), *axis);
                    let mut out = vec![T::zero(); outer * inner];
                    let d = x.data();
                    for o in 0..outer {
                        for l in 0..len {
                            let row = &d[(o * len + l) * inner..][..inner];
                            for (acc, v) in out[o * inner..][..inner].iter_mut().zip(row) {
                                *acc = *acc + *v;
                            }
                        }
                    }
                    if mean {
                        let inv = T::one() / T::of(len as f64);
                        out.iter_mut().for_each(|v| *v = *v * inv);
                    }
                    Tensor::new(reduce_shape(x.shape(), *axis), out)?
                }
            }
        }
        Op::Relu => x.map(|v| if v > T::zero() { v } else { T::zero() }),
        Op::BatchNorm2d {
            mode,
            eps,
            momentum,
        } => return batchnorm_forward(xs, *mode, *eps, *momentum),
        Op::Softmax { axis } => {
            check_axis("softmax", x.shape(), *axis)?;
            let (outer, len, inner) = axis_split(x.shape(), *axis);
            let mut out = x.data().to_vec();
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |l: usize| (o * len + l) * inner + i;
                    let m = (0..len).map(|l| out[idx(l)]).fold(T::neg_infinity(), T::max);
                    let mut s = T::zero();
                    for l in 0..len {
                        let e = (out[idx(l)] - m).exp();
                        out[idx(l)] = e;
                        s = s + e;
                    }
                    for l in 0..len {
                        out[idx(l)] = out[idx(l)] / s;
                    }
                }
            }
            Tensor::new(x.shape().to_vec(), out)?
        }
        Op::LogSumExp { axis } => {
            check_axis("logsumexp", x.shape(), *axis)?;
            let (outer, len, inner) = axis_split(x.shape(), *axis);
            let d = x.data();
            let mut out = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |l: usize| (o * len + l) * inner + i;
                    let m = (0..len).map(|l| d[idx(l)]).fold(T::neg_infinity(), T::max);
                    let s: T = (0..len).map(|l| (d[idx(l)] - m).exp()).sum();
                    out[o * inner + i] = m + s.ln();
                }
            }
            Tensor::new(reduce_shape(x.shape(), *axis), out)?
        }
        Op::L2Normalize { axis, eps } => {
            check_axis("l2normalize", x.shape(), *axis)?;
            let norms = l2_norms(x, *axis, *eps);
            let (outer, len, inner) = axis_split(x.shape(), *axis);
            let mut out = x.data().to_vec();
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        let k = (o * len + l) * inner + i;
                        out[k] = out[k] / norms[o * inner + i];
                    }
                }
            }
            Tensor::new(x.shape().to_vec(), out)?
        }
        Op::IndexSpatial { sites } => {
            let s = x.shape();
            if s.len() != 4 {
                return Err(shape_err("index_spatial", s, &[4]));
            }
            let (c, h, w) = (s[1], s[2], s[3]);
            let mut out = Vec::with_capacity(sites.len() * c);
            for &[n, r, q] in sites {
                if n >= s[0] || r >= h || q >= w {
                    return Err(shape_err("index_spatial", s, &[n, r, q]));
                }
                for ch in 0..c {
                    out.push(x.data()[((n * c + ch) * h + r) * w + q]);
                }
            }
            Tensor::new(vec![sites.len(), c], out)?
        }
        Op::Reshape { shape } => x.clone().reshaped(shape)?,
        Op::Narrow { axis, start, len } => {
            check_axis("narrow", x.shape(), *axis)?;
            if start + len > x.shape()[*axis] {
                return Err(shape_err("narrow", x.shape(), &[*start, *len]));
            }
            let (outer, full, inner) = axis_split(x.shape(), *axis);
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                out.extend_from_slice(&x.data()[(o * full + start) * inner..][..len * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[*axis] = *len;
            Tensor::new(shape, out)?
        }
        Op::GatherRows { rows } => {
            if x.rank() != 2 {
                return Err(shape_err("gather_rows", x.shape(), &[2]));
            }
            let d = x.shape()[1];
            let mut out = Vec::with_capacity(rows.len() * d);
            for &r in rows {
                if r >= x.shape()[0] {
                    return Err(shape_err("gather_rows", x.shape(), &[r]));
                }
                out.extend_from_slice(&x.data()[r * d..][..d]);
            }
            Tensor::new(vec![rows.len(), d], out)?
        }
    };
    Ok((out, Aux::None))
}

fn l2_norms<T: Real>(x: &Tensor<T>, axis: usize, eps: f64) -> Vec<T> {
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let mut sq = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for l in 0..len {
            for i in 0..inner {
                let v = x.data()[(o * len + l) * inner + i];
                sq[o * inner + i] = sq[o * inner + i] + v * v;
            }
        }
    }
    let eps = T::of(eps);
    sq.into_iter().map(|s| (s + eps).sqrt()).collect()
}

fn batchnorm_forward<T: Real>(
    xs: &[&Tensor<T>],
    mode: BatchNormMode,
    eps: f64,
    momentum: f64,
) -> Result<(Tensor<T>, Aux<T>)> {
    let x = xs[0];
    let s = x.shape();
    if s.len() != 4 || xs[1..].iter().any(|p| p.shape() != [s[1]]) {
        return Err(shape_err("batchnorm2d", s, xs[1].shape()));
    }
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let m = n * hw;
    let (gamma, beta, rmean, rvar) = (xs[1].data(), xs[2].data(), xs[3].data(), xs[4].data());
    let eps_t = T::of(eps);
    let d = x.data();
    let channel = |ch: usize| (0..n).flat_map(move |b| d[(b * c + ch) * hw..][..hw].iter().copied());
    let (mean, var): (Vec<T>, Vec<T>) = match mode {
        BatchNormMode::Train => {
            if m == 0 {
                return Err(shape_err("batchnorm2d", s, &[]));
            }
            (0..c)
                .map(|ch| {
                    let mu = channel(ch).sum::<T>() / T::of(m as f64);
                    let var = channel(ch).map(|v| (v - mu) * (v - mu)).sum::<T>() / T::of(m as f64);
                    (mu, var)
                })
                .unzip()
        }
        BatchNormMode::Eval => (rmean.to_vec(), rvar.to_vec()),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
    let mut out = vec![T::zero(); d.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            let (mu, is, g, bt) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for k in base..base + hw {
                out[k] = g * (d[k] - mu) * is + bt;
            }
        }
    }
    let running = (mode == BatchNormMode::Train).then(|| {
        let mom = T::of(momentum);
        let keep = T::one() - mom;
        let unbias = if m > 1 {
            T::of(m as f64 / (m - 1) as f64)
        } else {
            T::one()
        };
        let rm = (0..c).map(|ch| keep * rmean[ch] + mom * mean[ch]).collect();
        let rv = (0..c).map(|ch| keep * rvar[ch] + mom * var[ch] * unbias).collect();
        (rm, rv)
    });
    Ok((
        Tensor::new(s.to_vec(), out)?,
        Aux::BatchNorm {
            mean,
            inv_std,
            running,
        },
    ))
}

/// Sums `g` (shaped like the broadcast output) down to `target` shape.
fn unbroadcast<T: Real>(g: &Tensor<T>, other: &[usize], target: &[usize]) -> Tensor<T> {
    if g.shape() == target {
        return g.clone();
    }
    let mut out = vec![T::zero(); target.iter().product()];
    let gd = g.data();
    kernels::for_each_broadcast(target, other, g.shape(), |o, i, _| out[i] = out[i] + gd[o]);
    Tensor::new(target.to_vec(), out).expect("target shape")
}

fn backward_op<T: Real>(
    op: &Op,
    xs: &[&Tensor<T>],
    y: &Tensor<T>,
    aux: &Aux<T>,
    g: &Tensor<T>,
    need: &[bool],
) -> Vec<Option<Tensor<T>>> {
    let x = xs[0];
    let like = |data: Vec<T>, t: &Tensor<T>| Tensor::new(t.shape().to_vec(), data).expect("shape");
    match op {
        Op::MatMul { trans_a, trans_b } => {
            let (a, b) = (xs[0], xs[1]);
            let (m, n) = (y.shape()[0], y.shape()[1]);
            let k = if *trans_a { a.shape()[0] } else { a.shape()[1] };
            let da = need[0].then(|| {
                let mut out = vec![T::zero(); a.len()];
                if *trans_a {
                    T::gemm(k, n, m, b.data(), *trans_b, g.data(), true, T::zero(), &mut out);
                } else {
                    T::gemm(m, n, k, g.data(), false, b.data(), !*trans_b, T::zero(), &mut out);
                }
                like(out, a)
            });
            let db = need[1].then(|| {
                let mut out = vec![T::zero(); b.len()];
                if *trans_b {
                    T::gemm(n, m, k, g.data(), true, a.data(), *trans_a, T::zero(), &mut out);
                } else {
                    T::gemm(k, m, n, a.data(), !*trans_a, g.data(), false, T::zero(), &mut out);
                }
                like(out, b)
            });
            vec![da, db]
        }
        Op::Conv2d { stride, padding } => {
            let geom = ConvGeom::new(x.shape(), xs[1].shape(), *stride, *padding).expect("geometry");
            let (dx, dk) =
                kernels::conv2d_backward(x.data(), xs[1].data(), g.data(), &geom, need[0], need[1]);
            vec![dx.map(|d| like(d, x)), dk.map(|d| like(d, xs[1]))]
        }
        Op::Add => {
            let (a, b) = (xs[0], xs[1]);
            vec![
                need[0].then(|| unbroadcast(g, b.shape(), a.shape())),
                need[1].then(|| unbroadcast(g, a.shape(), b.shape())),
            ]
        }
        Op::Mul => {
            let (a, b) = (xs[0], xs[1]);
            let grad_for = |own: &Tensor<T>, other: &Tensor<T>| {
                let mut prod = vec![T::zero(); g.len()];
                let od = other.data();
                let gd = g.data();
                kernels::for_each_broadcast(other.shape(), own.shape(), g.shape(), |o, j, _| {
                    prod[o] = gd[o] * od[j]
                });
                let prod = Tensor::new(g.shape().to_vec(), prod).expect("shape");
                unbroadcast(&prod, other.shape(), own.shape())
            };
            vec![need[0].then(|| grad_for(a, b)), need[1].then(|| grad_for(b, a))]
        }
        Op::Scale(c) => {
            let c = T::of(*c);
            vec![Some(g.map(|v| v * c))]
        }
        Op::Sum { axis } | Op::Mean { axis } => {
            let mean = matches!(op, Op::Mean { .. });
            let out = match axis {
                None => {
                    let mut v = g.item();
                    if mean {
                        v = v / T::of(x.len() as f64);
                    }
                    Tensor::full(x.shape(), v)
                }
                Some(axis) => {
                    let (outer, len, inner) = axis_split(x.shape(), *axis);
                    let scale = if mean {
                        T::one() / T::of(len as f64)
                    } else {
                        T::one()
                    };
                    let mut out = vec![T::zero(); x.len()];
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                out[(o * len + l) * inner + i] = g.data()[o * inner + i] * scale;
                            }
                        }
                    }
                    like(out, x)
                }
            };
            vec![Some(out)]
        }
        Op::Relu => {
            let d = x
                .data()
                .iter()
                .zip(g.data())
                .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                .collect();
            vec![Some(like(d, x))]
        }
        Op::BatchNorm2d { mode, .. } => batchnorm_backward(xs, *mode, aux, g, need),
        Op::Softmax { axis } => {
            let (outer, len, inner) = axis_split(x.shape(), *axis);
            let (yd, gd) = (y.data(), g.data());
            let mut out = vec![T::zero(); x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |l: usize| (o * len + l) * inner + i;
                    let dot: T = (0..len).map(|l| gd[idx(l)] * yd[idx(l)]).sum();
                    for l in 0..len {
                        out[idx(l)] = yd[idx(l)] * (gd[idx(l)] - dot);
                    }
                }
            }
            vec![Some(like(out, x))]
        }
        Op::LogSumExp { axis } => {
            let (outer, len, inner) = axis_split(x.shape(), *axis);
            let (xd, yd, gd) = (x.data(), y.data(), g.data());
            let mut out = vec![T::zero(); x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let r = o * inner + i;
                    for l in 0..len {
                        let k = (o * len + l) * inner + i;
                        out[k] = gd[r] * (xd[k] - yd[r]).exp();
                    }
                }
            }
            vec![Some(like(out, x))]
        }
        Op::L2Normalize { axis, eps } => {
            let norms = l2_norms(x, *axis, *eps);
            let (outer, len, inner) = axis_split(x.shape(), *axis);
            let (yd, gd) = (y.data(), g.data());
            let mut out = vec![T::zero(); x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |l: usize| (o * len + l) * inner + i;
                    let dot: T = (0..len).map(|l| gd[idx(l)] * yd[idx(l)]).sum();
                    let nrm = norms[o * inner + i];
                    for l in 0..len {
                        out[idx(l)] = (gd[idx(l)] - yd[idx(l)] * dot) / nrm;
                    }
                }
            }
            vec![Some(like(out, x))]
        }
        Op::IndexSpatial { sites } => {
            let s = x.shape();
            let (c, h, w) = (s[1], s[2], s[3]);
            let mut out = vec![T::zero(); x.len()];
            for (m, &[n, r, q]) in sites.iter().enumerate() {
                for ch in 0..c {
                    let k = ((n * c + ch) * h + r) * w + q;
                    out[k] = out[k] + g.data()[m * c + ch];
                }
            }
            vec![Some(like(out, x))]
        }
        Op::Reshape { .. } => vec![Some(like(g.data().to_vec(), x))],
        Op::Narrow { axis, start, len } => {
            let (outer, full, inner) = axis_split(x.shape(), *axis);
            let mut out = vec![T::zero(); x.len()];
            for o in 0..outer {
                out[(o * full + start) * inner..][..len * inner]
                    .copy_from_slice(&g.data()[o * len * inner..][..len * inner]);
            }
            vec![Some(like(out, x))]
        }
        Op::GatherRows { rows } => {
            let d = x.shape()[1];
            let mut out = vec![T::zero(); x.len()];
            for (i, &r) in rows.iter().enumerate() {
                for j in 0..d {
                    out[r * d + j] = out[r * d + j] + g.data()[i * d + j];
                }
            }
            vec![Some(like(out, x))]
        }
    }
}

fn batchnorm_backward<T: Real>(
    xs: &[&Tensor<T>],
    mode: BatchNormMode,
    aux: &Aux<T>,
    g: &Tensor<T>,
    need: &[bool],
) -> Vec<Option<Tensor<T>>> {
    let Aux::BatchNorm { mean, inv_std, .. } = aux else {
        unreachable!("batchnorm node without statistics")
    };
    let x = xs[0];
    let s = x.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let m = T::of((n * hw) as f64);
    let (xd, gd, gamma) = (x.data(), g.data(), xs[1].data());
    let xhat = |k: usize, ch: usize| (xd[k] - mean[ch]) * inv_std[ch];
    let offsets = |ch: usize| (0..n).flat_map(move |b| (b * c + ch) * hw..(b * c + ch + 1) * hw);

    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        for k in offsets(ch) {
            dgamma[ch] = dgamma[ch] + gd[k] * xhat(k, ch);
            dbeta[ch] = dbeta[ch] + gd[k];
        }
    }
    let mut dx = vec![T::zero(); x.len()];
    match mode {
        BatchNormMode::Train => {
            // dx = gamma * inv_std / m * (m * g - sum(g) - xhat * sum(g * xhat))
            for ch in 0..c {
                let coef = gamma[ch] * inv_std[ch] / m;
                for k in offsets(ch) {
                    dx[k] = coef * (m * gd[k] - dbeta[ch] - xhat(k, ch) * dgamma[ch]);
                }
            }
        }
        BatchNormMode::Eval => {
            for ch in 0..c {
                for k in offsets(ch) {
                    dx[k] = gd[k] * gamma[ch] * inv_std[ch];
                }
            }
        }
    }
    let (drm, drv) = if mode == BatchNormMode::Eval {
        let mut drm = vec![T::zero(); c];
        let mut drv = vec![T::zero(); c];
        let half = T::of(0.5);
        for ch in 0..c {
            let is3 = inv_std[ch] * inv_std[ch] * inv_std[ch];
            for k in offsets(ch) {
                drm[ch] = drm[ch] - gd[k] * gamma[ch] * inv_std[ch];
                drv[ch] = drv[ch] - gd[k] * gamma[ch] * (xd[k] - mean[ch]) * half * is3;
            }
        }
        (Some(drm), Some(drv))
    } else {
        (None, None)
    };
    let vec_c = |d: Vec<T>| Tensor::new(vec![c], d).expect("shape");
    vec![
        need[0].then(|| Tensor::new(s.to_vec(), dx).expect("shape")),
        need[1].then(|| vec_c(dgamma)),
        need[2].then(|| vec_c(dbeta)),
        drm.filter(|_| need[3]).map(vec_c),
        drv.filter(|_| need[4]).map(vec_c),
    ]
}
