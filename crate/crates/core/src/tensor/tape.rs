use std::collections::HashMap;

use super::kernels::{self, ConvGeom, Grouping, MatmulPlan};
use super::{broadcast_offsets, broadcast_shape, DType, Tensor};
use crate::error::{Error, Result};

pub type NodeId = usize;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(NodeId);

impl Var {
    pub fn id(self) -> NodeId {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Sigmoid,
    /// Negative-side slope; the derivative at exactly zero is the slope.
    LeakyRelu(f64),
    Log,
    Exp,
}

impl Elementwise {
    fn arity(self) -> usize {
        match self {
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul | Elementwise::Div => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    Constant,
    Elementwise(Elementwise),
    Scale(f64),
    Shift(f64),
    Matmul,
    Reduce {
        kind: ReduceKind,
        axes: Vec<usize>,
        keepdim: bool,
    },
    Reshape(Vec<usize>),
    Permute(Vec<usize>),
    Concat(usize),
    /// Softmax over the last axis.
    Softmax,
    Conv3d {
        stride: [usize; 3],
        padding: [usize; 3],
    },
    ConvTranspose3d {
        stride: [usize; 3],
        padding: [usize; 3],
    },
    GroupNorm {
        groups: usize,
        eps: f64,
    },
    /// Normalization with batch statistics (training mode).
    BatchNorm {
        eps: f64,
    },
    /// Elementwise binary cross-entropy of `sigmoid(logits)` against targets.
    BceWithLogits,
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub value: Tensor,
    pub tracked: bool,
}

/// Ordered computation record. Every node's inputs precede it, so replaying
/// nodes in order is a valid forward evaluation.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of tracked leaves, keyed by node id.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.map.get(&v.0)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.map.remove(&v.0)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }
}

fn dtype_of(inputs: &[&Tensor]) -> DType {
    inputs
        .iter()
        .map(|t| t.dtype())
        .fold(DType::F32, DType::promote)
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn conv_dims(x: &Tensor, w: &Tensor, b: &Tensor, transposed: bool) -> Result<(usize, usize, usize)> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 5 || ws.len() != 5 {
        return Err(Error::InvalidShape {
            shape: xs.to_vec(),
            reason: "convolution expects [batch, channel, x, y, z] input and 5-D weights".into(),
        });
    }
    let (c_in_w, c_out) = if transposed { (ws[0], ws[1]) } else { (ws[1], ws[0]) };
    if xs[1] != c_in_w {
        return Err(Error::ChannelMismatch {
            context: if transposed { "transpose_conv3d" } else { "conv3d" }.into(),
            expected: c_in_w,
            actual: xs[1],
        });
    }
    if b.shape() != [c_out] {
        return Err(Error::ShapeMismatch {
            context: "convolution bias".into(),
            expected: vec![c_out],
            actual: b.shape().to_vec(),
        });
    }
    Ok((xs[0], xs[1], c_out))
}

fn sp(shape: &[usize]) -> [usize; 3] {
    [shape[2], shape[3], shape[4]]
}

fn kern(w: &Tensor) -> [usize; 3] {
    sp(w.shape())
}

fn norm_dims(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize, usize)> {
    let xs = x.shape();
    if xs.len() < 3 {
        return Err(Error::InvalidShape {
            shape: xs.to_vec(),
            reason: "normalization expects [batch, channel, spatial...]".into(),
        });
    }
    let c = xs[1];
    for (name, t) in [("gamma", gamma), ("beta", beta)] {
        if t.shape() != [c] {
            return Err(Error::ShapeMismatch {
                context: format!("normalization {name}"),
                expected: vec![c],
                actual: t.shape().to_vec(),
            });
        }
    }
    Ok((xs[0], c, xs[2..].iter().product()))
}

fn reduce_shapes(shape: &[usize], axes: &[usize], keepdim: bool) -> Result<(Vec<usize>, Vec<usize>)> {
    let rank = shape.len();
    let mut seen = vec![false; rank];
    for &a in axes {
        if a >= rank || seen[a] {
            return Err(Error::InvalidAxis {
                axes: axes.to_vec(),
                rank,
            });
        }
        seen[a] = true;
    }
    let kept: Vec<usize> = shape
        .iter()
        .enumerate()
        .map(|(i, &e)| if seen[i] { 1 } else { e })
        .collect();
    let out = if keepdim {
        kept.clone()
    } else {
        let v: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !seen[*i])
            .map(|(_, &e)| e)
            .collect();
        if v.is_empty() {
            vec![1]
        } else {
            v
        }
    };
    Ok((kept, out))
}

fn concat_layout(inputs: &[&Tensor], axis: usize) -> Result<(Vec<usize>, usize)> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::Empty("concat needs at least one input".into()))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::InvalidAxis {
            axes: vec![axis],
            rank,
        });
    }
    let mut out = first.shape().to_vec();
    out[axis] = 0;
    for t in inputs {
        let s = t.shape();
        let compatible = s.len() == rank && (0..rank).all(|d| d == axis || s[d] == first.shape()[d]);
        if !compatible {
            return Err(Error::ShapeMismatch {
                context: format!("concat along axis {axis}"),
                expected: first.shape().to_vec(),
                actual: s.to_vec(),
            });
        }
        out[axis] += s[axis];
    }
    let outer: usize = first.shape()[..axis].iter().product();
    Ok((out, outer))
}

/// Evaluates `op` on concrete input values.
pub(crate) fn compute(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    let dtype = dtype_of(inputs);
    let t = match op {
        Op::Leaf | Op::Constant => inputs[0].clone(),
        Op::Elementwise(kind) => {
            if inputs.len() != kind.arity() {
                return Err(Error::config(format!(
                    "{kind:?} takes {} inputs, got {}",
                    kind.arity(),
                    inputs.len()
                )));
            }
            if kind.arity() == 2 {
                let (a, b) = (inputs[0], inputs[1]);
                let f: fn(f64, f64) -> f64 = match kind {
                    Elementwise::Add => |x, y| x + y,
                    Elementwise::Sub => |x, y| x - y,
                    Elementwise::Mul => |x, y| x * y,
                    _ => |x, y| x / y,
                };
                if a.shape() == b.shape() {
                    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                    Tensor::from_parts(a.shape().to_vec(), data, dtype)
                } else {
                    let shape = broadcast_shape(a.shape(), b.shape())?;
                    let oa = broadcast_offsets(&shape, a.shape());
                    let ob = broadcast_offsets(&shape, b.shape());
                    let data = oa
                        .iter()
                        .zip(&ob)
                        .map(|(&i, &j)| f(a.data()[i], b.data()[j]))
                        .collect();
                    Tensor::from_parts(shape, data, dtype)
                }
            } else {
                let x = inputs[0];
                let data = match *kind {
                    Elementwise::Sigmoid => x.data().iter().map(|&v| sigmoid(v)).collect(),
                    Elementwise::LeakyRelu(s) => {
                        x.data().iter().map(|&v| if v > 0.0 { v } else { s * v }).collect()
                    }
                    Elementwise::Log => x.data().iter().map(|v| v.ln()).collect(),
                    Elementwise::Exp => x.data().iter().map(|v| v.exp()).collect(),
                    _ => unreachable!(),
                };
                Tensor::from_parts(x.shape().to_vec(), data, dtype)
            }
        }
        Op::Scale(c) => inputs[0].map(|v| v * c),
        Op::Shift(c) => inputs[0].map(|v| v + c),
        Op::Matmul => {
            let plan = kernels::matmul_plan(inputs[0].shape(), inputs[1].shape())?;
            let data = kernels::matmul_forward(&plan, inputs[0].data(), inputs[1].data());
            Tensor::from_parts(plan.out_shape, data, dtype)
        }
        Op::Reduce { kind, axes, keepdim } => {
            let x = inputs[0];
            let (kept, out) = reduce_shapes(x.shape(), axes, *keepdim)?;
            let offs = broadcast_offsets(x.shape(), &kept);
            let mut acc = vec![0.0; kept.iter().product()];
            for (&o, &v) in offs.iter().zip(x.data()) {
                acc[o] += v;
            }
            if *kind == ReduceKind::Mean {
                let count = (x.numel() / acc.len()) as f64;
                for a in &mut acc {
                    *a /= count;
                }
            }
            Tensor::from_parts(out, acc, dtype)
        }
        Op::Reshape(shape) => inputs[0].reshape(shape)?,
        Op::Permute(perm) => {
            let x = inputs[0];
            let mut sorted = perm.clone();
            sorted.sort_unstable();
            if sorted != (0..x.rank()).collect::<Vec<_>>() {
                return Err(Error::InvalidAxis {
                    axes: perm.clone(),
                    rank: x.rank(),
                });
            }
            let (data, shape) = kernels::permute(x.data(), x.shape(), perm);
            Tensor::from_parts(shape, data, dtype)
        }
        Op::Concat(axis) => {
            let (shape, outer) = concat_layout(inputs, *axis)?;
            let mut data = Vec::with_capacity(shape.iter().product());
            let chunks: Vec<usize> = inputs.iter().map(|t| t.numel() / outer).collect();
            for o in 0..outer {
                for (t, &c) in inputs.iter().zip(&chunks) {
                    data.extend_from_slice(&t.data()[o * c..(o + 1) * c]);
                }
            }
            Tensor::from_parts(shape, data, dtype)
        }
        Op::Softmax => {
            let x = inputs[0];
            let len = *x.shape().last().unwrap();
            Tensor::from_parts(x.shape().to_vec(), kernels::softmax_last(x.data(), len), dtype)
        }
        Op::Conv3d { stride, padding } => {
            let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
            let (batch, cin, cout) = conv_dims(x, w, b, false)?;
            let g = ConvGeom::forward(sp(x.shape()), kern(w), *stride, *padding)?;
            let data = kernels::conv_forward(x.data(), w.data(), b.data(), batch, cin, cout, &g);
            let mut shape = vec![batch, cout];
            shape.extend_from_slice(&g.out_sp);
            Tensor::from_parts(shape, data, dtype)
        }
        Op::ConvTranspose3d { stride, padding } => {
            let (y, w, b) = (inputs[0], inputs[1], inputs[2]);
            let (batch, c_hi, c_lo) = conv_dims(y, w, b, true)?;
            let g = ConvGeom::transposed(sp(y.shape()), kern(w), *stride, *padding)?;
            let data = kernels::conv_transpose_forward(y.data(), w.data(), b.data(), batch, c_hi, c_lo, &g);
            let mut shape = vec![batch, c_lo];
            shape.extend_from_slice(&g.in_sp);
            Tensor::from_parts(shape, data, dtype)
        }
        Op::GroupNorm { groups, eps } => {
            let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
            let (batch, c, spatial) = norm_dims(x, gamma, beta)?;
            if *groups == 0 || c % groups != 0 {
                return Err(Error::config(format!(
                    "group norm: {c} channels not divisible into {groups} groups"
                )));
            }
            let data = kernels::norm_forward(
                x.data(),
                gamma.data(),
                beta.data(),
                batch,
                c,
                spatial,
                Grouping::Group(*groups),
                *eps,
            );
            Tensor::from_parts(x.shape().to_vec(), data, dtype)
        }
        Op::BatchNorm { eps } => {
            let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
            let (batch, c, spatial) = norm_dims(x, gamma, beta)?;
            let data = kernels::norm_forward(
                x.data(),
                gamma.data(),
                beta.data(),
                batch,
                c,
                spatial,
                Grouping::Batch,
                *eps,
            );
            Tensor::from_parts(x.shape().to_vec(), data, dtype)
        }
        Op::BceWithLogits => {
            let (z, t) = (inputs[0], inputs[1]);
            if z.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    context: "binary cross-entropy".into(),
                    expected: z.shape().to_vec(),
                    actual: t.shape().to_vec(),
                });
            }
            let data = z
                .data()
                .iter()
                .zip(t.data())
                .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
                .collect();
            Tensor::from_parts(z.shape().to_vec(), data, dtype)
        }
    };
    Ok(t)
}

/// Vector-Jacobian products of `op` for each input that needs a gradient.
fn vjp(op: &Op, inputs: &[&Tensor], out: &Tensor, g: &[f64], need: &[bool]) -> Result<Vec<Option<Vec<f64>>>> {
    let mut res: Vec<Option<Vec<f64>>> = vec![None; inputs.len()];
    match op {
        Op::Leaf | Op::Constant => {}
        Op::Elementwise(kind) if kind.arity() == 2 => {
            let (a, b) = (inputs[0], inputs[1]);
            let same = a.shape() == b.shape();
            let n = out.numel();
            let (oa, ob): (Vec<usize>, Vec<usize>) = if same {
                ((0..n).collect(), (0..n).collect())
            } else {
                (
                    broadcast_offsets(out.shape(), a.shape()),
                    broadcast_offsets(out.shape(), b.shape()),
                )
            };
            let (ad, bd) = (a.data(), b.data());
            if need[0] {
                let mut ga = vec![0.0; a.numel()];
                for i in 0..n {
                    ga[oa[i]] += match kind {
                        Elementwise::Add | Elementwise::Sub => g[i],
                        Elementwise::Mul => g[i] * bd[ob[i]],
                        _ => g[i] / bd[ob[i]],
                    };
                }
                res[0] = Some(ga);
            }
            if need[1] {
                let mut gb = vec![0.0; b.numel()];
                for i in 0..n {
                    gb[ob[i]] += match kind {
                        Elementwise::Add => g[i],
                        Elementwise::Sub => -g[i],
                        Elementwise::Mul => g[i] * ad[oa[i]],
                        _ => {
                            let y = bd[ob[i]];
                            -g[i] * ad[oa[i]] / (y * y)
                        }
                    };
                }
                res[1] = Some(gb);
            }
        }
        Op::Elementwise(kind) => {
            if need[0] {
                let x = inputs[0].data();
                let y = out.data();
                let gx = match *kind {
                    Elementwise::Sigmoid => (0..x.len()).map(|i| g[i] * y[i] * (1.0 - y[i])).collect(),
                    Elementwise::LeakyRelu(s) => {
                        (0..x.len()).map(|i| if x[i] > 0.0 { g[i] } else { g[i] * s }).collect()
                    }
                    Elementwise::Log => (0..x.len()).map(|i| g[i] / x[i]).collect(),
                    Elementwise::Exp => (0..x.len()).map(|i| g[i] * y[i]).collect(),
                    _ => unreachable!(),
                };
                res[0] = Some(gx);
            }
        }
        Op::Scale(c) => res[0] = need[0].then(|| g.iter().map(|v| v * c).collect()),
        Op::Shift(_) => res[0] = need[0].then(|| g.to_vec()),
        Op::Matmul => {
            let plan: MatmulPlan = kernels::matmul_plan(inputs[0].shape(), inputs[1].shape())?;
            let (ga, gb) = kernels::matmul_backward(&plan, inputs[0].data(), inputs[1].data(), g, need[0], need[1]);
            res[0] = ga;
            res[1] = gb;
        }
        Op::Reduce { kind, axes, keepdim } => {
            if need[0] {
                let x = inputs[0];
                let (kept, _) = reduce_shapes(x.shape(), axes, *keepdim)?;
                let offs = broadcast_offsets(x.shape(), &kept);
                let scale = match kind {
                    ReduceKind::Sum => 1.0,
                    ReduceKind::Mean => (kept.iter().product::<usize>() as f64) / x.numel() as f64,
                };
                res[0] = Some(offs.iter().map(|&o| g[o] * scale).collect());
            }
        }
        Op::Reshape(_) => res[0] = need[0].then(|| g.to_vec()),
        Op::Permute(perm) => {
            if need[0] {
                let inv = kernels::inverse_permutation(perm);
                res[0] = Some(kernels::permute(g, out.shape(), &inv).0);
            }
        }
        Op::Concat(axis) => {
            let outer: usize = inputs[0].shape()[..*axis].iter().product();
            let chunks: Vec<usize> = inputs.iter().map(|t| t.numel() / outer).collect();
            let total: usize = chunks.iter().sum();
            let mut start = 0;
            for (i, &c) in chunks.iter().enumerate() {
                if need[i] {
                    let mut gi = Vec::with_capacity(inputs[i].numel());
                    for o in 0..outer {
                        gi.extend_from_slice(&g[o * total + start..o * total + start + c]);
                    }
                    res[i] = Some(gi);
                }
                start += c;
            }
        }
        Op::Softmax => {
            if need[0] {
                let len = *out.shape().last().unwrap();
                res[0] = Some(kernels::softmax_last_backward(out.data(), g, len));
            }
        }
        Op::Conv3d { stride, padding } => {
            let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
            let (batch, cin, cout) = conv_dims(x, w, b, false)?;
            let geom = ConvGeom::forward(sp(x.shape()), kern(w), *stride, *padding)?;
            let [gx, gw, gb] = kernels::conv_backward(
                x.data(),
                w.data(),
                g,
                batch,
                cin,
                cout,
                &geom,
                [need[0], need[1], need[2]],
            );
            res = vec![gx, gw, gb];
        }
        Op::ConvTranspose3d { stride, padding } => {
            let (y, w, b) = (inputs[0], inputs[1], inputs[2]);
            let (batch, c_hi, c_lo) = conv_dims(y, w, b, true)?;
            let geom = ConvGeom::transposed(sp(y.shape()), kern(w), *stride, *padding)?;
            let [gy, gw, gb] = kernels::conv_transpose_backward(
                y.data(),
                w.data(),
                g,
                batch,
                c_hi,
                c_lo,
                &geom,
                [need[0], need[1], need[2]],
            );
            res = vec![gy, gw, gb];
        }
        Op::GroupNorm { .. } | Op::BatchNorm { .. } => {
            let (grouping, eps) = match *op {
                Op::GroupNorm { groups, eps } => (Grouping::Group(groups), eps),
                Op::BatchNorm { eps } => (Grouping::Batch, eps),
                _ => unreachable!(),
            };
            let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
            let (batch, c, spatial) = norm_dims(x, gamma, beta)?;
            let (gx, gg, gb) = kernels::norm_backward(x.data(), gamma.data(), g, batch, c, spatial, grouping, eps);
            res = vec![need[0].then_some(gx), need[1].then_some(gg), need[2].then_some(gb)];
        }
        Op::BceWithLogits => {
            let (z, t) = (inputs[0].data(), inputs[1].data());
            if need[0] {
                res[0] = Some((0..z.len()).map(|i| g[i] * (sigmoid(z[i]) - t[i])).collect());
            }
            if need[1] {
                res[1] = Some((0..z.len()).map(|i| -g[i] * z[i]).collect());
            }
        }
    }
    Ok(res)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// Registers a gradient-tracked leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_node(Op::Leaf, vec![], value, true)
    }

    /// Registers an untracked value; it never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(Op::Constant, vec![], value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push_node(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor, tracked: bool) -> Var {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// Evaluates `op` on recorded inputs and appends the result.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let value = {
            let vals: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            compute(&op, &vals)?
        };
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        Ok(self.push_node(op, inputs.iter().map(|v| v.0).collect(), value, tracked))
    }

    pub fn elementwise(&mut self, kind: Elementwise, inputs: &[Var]) -> Result<Var> {
        self.apply(Op::Elementwise(kind), inputs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Mul, &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Div, &[a, b])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sigmoid, &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.elementwise(Elementwise::LeakyRelu(slope), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.elementwise(Elementwise::Log, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.elementwise(Elementwise::Exp, &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(Op::Scale(c), &[x])
    }

    pub fn shift(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(Op::Shift(c), &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Matmul, &[a, b])
    }

    pub fn reduce(&mut self, kind: ReduceKind, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.apply(
            Op::Reduce {
                kind,
                axes: axes.to_vec(),
                keepdim,
            },
            &[x],
        )
    }

    pub fn sum(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(ReduceKind::Sum, x, axes, keepdim)
    }

    pub fn mean(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(ReduceKind::Mean, x, axes, keepdim)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        self.sum(x, &axes, false)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        self.mean(x, &axes, false)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Op::Reshape(shape.to_vec()), &[x])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        self.apply(Op::Permute(perm.to_vec()), &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.apply(Op::Concat(axis), xs)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Softmax, &[x])
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: [usize; 3], padding: [usize; 3]) -> Result<Var> {
        self.apply(Op::Conv3d { stride, padding }, &[x, w, b])
    }

    pub fn conv_transpose3d(&mut self, x: Var, w: Var, b: Var, stride: [usize; 3], padding: [usize; 3]) -> Result<Var> {
        self.apply(Op::ConvTranspose3d { stride, padding }, &[x, w, b])
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        self.apply(Op::GroupNorm { groups, eps }, &[x, gamma, beta])
    }

    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.apply(Op::BatchNorm { eps }, &[x, gamma, beta])
    }

    pub fn bce_with_logits(&mut self, logits: Var, targets: Var) -> Result<Var> {
        self.apply(Op::BceWithLogits, &[logits, targets])
    }

    /// Reverse sweep from `output` seeded with `seed`. Returns gradients for
    /// every tracked leaf reached by the sweep.
    pub fn backward(&self, output: Var, seed: &Tensor) -> Result<Gradients> {
        let out_node = &self.nodes[output.0];
        if seed.shape() != out_node.value.shape() {
            return Err(Error::ShapeMismatch {
                context: "backward seed".into(),
                expected: out_node.value.shape().to_vec(),
                actual: seed.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        if out_node.tracked {
            grads[output.0] = Some(seed.data().to_vec());
        }
        let mut result = Gradients::default();
        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.op == Op::Leaf {
                result
                    .map
                    .insert(id, Tensor::from_parts(node.value.shape().to_vec(), g, node.value.dtype()));
                continue;
            }
            let need: Vec<bool> = node.inputs.iter().map(|&i| self.nodes[i].tracked).collect();
            if !need.iter().any(|&b| b) {
                continue;
            }
            let vals: Vec<&Tensor> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let input_grads = vjp(&node.op, &vals, &node.value, &g, &need)?;
            for (&inp, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[inp].tracked {
                    continue;
                }
                let dtype = self.nodes[inp].value.dtype();
                match grads[inp].as_mut() {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(ig) {
                            *a = dtype.round(*a + v);
                        }
                    }
                    None => {
                        grads[inp] = Some(if dtype == DType::F32 {
                            ig.into_iter().map(|v| dtype.round(v)).collect()
                        } else {
                            ig
                        })
                    }
                }
            }
        }
        Ok(result)
    }

    /// Backward from a single-element output with seed 1.
    pub fn backward_scalar(&self, output: Var) -> Result<Gradients> {
        let v = &self.nodes[output.0].value;
        let seed = Tensor::full(v.shape(), 1.0, v.dtype())?;
        self.backward(output, &seed)
    }

    /// Re-evaluates every node from the recorded leaves and constants.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf | Op::Constant => node.value.clone(),
                _ => {
                    let vals: Vec<&Tensor> = node.inputs.iter().map(|&i| &values[i]).collect();
                    compute(&node.op, &vals)?
                }
            };
            values.push(v);
        }
        Ok(values)
    }
}
