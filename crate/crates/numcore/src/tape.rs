//! Reverse-mode differentiation over a write-once tape.
//!
//! Every operation appends a node holding its value and the recipe for its
//! vector-Jacobian product. Nodes only reference earlier nodes, so the tape
//! order is already a topological order and `backward` is one reverse sweep.

use std::cell::{Ref, RefCell};

use matrixmultiply::dgemm;

use crate::error::{arg_err, shape_err, NumError, Result};
use crate::tensor::Tensor;

/// Inputs to `exp` are clamped here so the output stays finite.
pub const EXP_INPUT_MAX: f64 = 60.0;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Sum(usize),
    Mean(usize),
    Relu(usize),
    Exp(usize),
    Sigmoid(usize),
    Matmul(usize, usize),
    Reshape(usize),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Narrow {
        input: usize,
        axis: usize,
        start: usize,
    },
    SwapLast2(usize),
    GatherRows {
        input: usize,
        rows: Vec<usize>,
    },
    Conv1d {
        input: usize,
        weight: usize,
        bias: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool1d {
        input: usize,
        argmax: Vec<usize>,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    SmoothL1 {
        pred: usize,
        target: Tensor,
    },
    Mse {
        pred: usize,
        target: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-threaded differentiation context.
///
/// Build one per training step; parameter values enter as leaves and
/// their gradients are read back after [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input (a parameter).
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Accumulated gradient of a leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads.borrow().get(v.0).cloned().flatten()
    }

    pub fn zero_grad(&self) {
        self.grads.borrow_mut().iter_mut().for_each(|g| *g = None);
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|&i| nodes[i].requires_grad)
    }

    fn push_op(&self, value: Tensor, op: Op, parents: &[usize]) -> Var {
        let rg = self.needs(parents);
        self.push(value, op, rg)
    }

    // ---- elementwise ----

    fn binary(&self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let nodes = self.nodes.borrow();
        let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
        if x.shape() != y.shape() {
            return shape_err(name, format!("{:?} vs {:?}", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_vec(x.shape().to_vec(), data)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |p, q| p + q)?;
        Ok(self.push_op(out, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |p, q| p - q)?;
        Ok(self.push_op(out, Op::Sub(a.0, b.0), &[a.0, b.0]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |p, q| p * q)?;
        Ok(self.push_op(out, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn scale(&self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|v| v * factor);
        self.push_op(out, Op::Scale(a.0, factor), &[a.0])
    }

    pub fn add_scalar(&self, a: Var, offset: f64) -> Var {
        let out = self.value(a).map(|v| v + offset);
        self.push_op(out, Op::Offset(a.0), &[a.0])
    }

    pub fn relu(&self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push_op(out, Op::Relu(a.0), &[a.0])
    }

    pub fn exp(&self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.min(EXP_INPUT_MAX).exp());
        self.push_op(out, Op::Exp(a.0), &[a.0])
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push_op(out, Op::Sigmoid(a.0), &[a.0])
    }

    // ---- reductions ----

    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push_op(Tensor::scalar(s), Op::Sum(a.0), &[a.0])
    }

    pub fn mean(&self, a: Var) -> Var {
        let (s, n) = {
            let v = self.value(a);
            (v.data().iter().sum::<f64>(), v.len())
        };
        self.push_op(Tensor::scalar(s / n as f64), Op::Mean(a.0), &[a.0])
    }

    // ---- linear algebra and layout ----

    /// `[M, K] x [K, N] -> [M, N]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            if x.ndim() != 2 || y.ndim() != 2 || x.shape()[1] != y.shape()[0] {
                return shape_err("matmul", format!("{:?} x {:?}", x.shape(), y.shape()));
            }
            let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
            let mut out = Tensor::zeros(&[m, n]);
            gemm(m, k, n, x.data(), (k, 1), y.data(), (n, 1), out.data_mut(), 0.0);
            out
        };
        Ok(self.push_op(out, Op::Matmul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push_op(out, Op::Reshape(a.0), &[a.0]))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return arg_err("concat", "no inputs");
        }
        let out = {
            let nodes = self.nodes.borrow();
            let first = nodes[inputs[0].0].value.shape().to_vec();
            if axis >= first.len() {
                return arg_err("concat", format!("axis {axis} out of range for {first:?}"));
            }
            let mut total = 0;
            for v in inputs {
                let s = nodes[v.0].value.shape();
                let compatible = s.len() == first.len()
                    && s.iter().zip(&first).enumerate().all(|(i, (p, q))| i == axis || p == q);
                if !compatible {
                    return shape_err("concat", format!("{first:?} vs {s:?} on axis {axis}"));
                }
                total += s[axis];
            }
            let outer: usize = first[..axis].iter().product();
            let inner: usize = first[axis + 1..].iter().product();
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for v in inputs {
                    let t = &nodes[v.0].value;
                    let block = t.shape()[axis] * inner;
                    data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
                }
            }
            let mut shape = first;
            shape[axis] = total;
            Tensor::from_vec(shape, data)?
        };
        let ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        Ok(self.push_op(out, Op::Concat { inputs: ids.clone(), axis }, &ids))
    }

    /// The sub-range `[start, start + len)` of `axis`.
    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = {
            let t = self.value(a);
            let shape = t.shape();
            if axis >= shape.len() || len == 0 || start + len > shape[axis] {
                return arg_err(
                    "narrow",
                    format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
                );
            }
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let dim = shape[axis];
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * dim + start) * inner;
                data.extend_from_slice(&t.data()[base..base + len * inner]);
            }
            let mut s = shape.to_vec();
            s[axis] = len;
            Tensor::from_vec(s, data)?
        };
        Ok(self.push_op(out, Op::Narrow { input: a.0, axis, start }, &[a.0]))
    }

    /// Swaps the two trailing axes: `[.., A, B] -> [.., B, A]`.
    pub fn swap_last2(&self, a: Var) -> Result<Var> {
        let out = {
            let t = self.value(a);
            if t.ndim() < 2 {
                return shape_err("swap_last2", format!("need >= 2 dims, got {:?}", t.shape()));
            }
            swap_last2(&t)
        };
        Ok(self.push_op(out, Op::SwapLast2(a.0), &[a.0]))
    }

    /// Selects rows of a `[N, K]` tensor; repeated indices are allowed.
    pub fn gather_rows(&self, a: Var, rows: &[usize]) -> Result<Var> {
        let out = {
            let t = self.value(a);
            if t.ndim() != 2 {
                return shape_err("gather_rows", format!("expected [N, K], got {:?}", t.shape()));
            }
            let (n, k) = (t.shape()[0], t.shape()[1]);
            if rows.is_empty() {
                return arg_err("gather_rows", "empty row selection");
            }
            if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
                return arg_err("gather_rows", format!("row {bad} out of range for {n} rows"));
            }
            let mut data = Vec::with_capacity(rows.len() * k);
            for &r in rows {
                data.extend_from_slice(&t.data()[r * k..(r + 1) * k]);
            }
            Tensor::from_vec(vec![rows.len(), k], data)?
        };
        Ok(self.push_op(
            out,
            Op::GatherRows {
                input: a.0,
                rows: rows.to_vec(),
            },
            &[a.0],
        ))
    }

    // ---- convolution and pooling ----

    /// Temporal cross-correlation: `[B, C, T] * [F, C, K] + [F] -> [B, F, T']`
    /// with `T' = (T + 2 * padding - K) / stride + 1`.
    pub fn conv1d(&self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, w, b) = (&nodes[input.0].value, &nodes[weight.0].value, &nodes[bias.0].value);
            let geo = ConvGeometry::new(x.shape(), w.shape(), b.shape(), stride, padding)?;
            conv1d_forward(&geo, x.data(), w.data(), b.data())
        };
        Ok(self.push_op(
            out,
            Op::Conv1d {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
                stride,
                padding,
            },
            &[input.0, weight.0, bias.0],
        ))
    }

    /// Windowed maximum over time. Ties resolve to the lowest index.
    pub fn maxpool1d(&self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (out, argmax) = {
            let x = self.value(input);
            if x.ndim() != 3 {
                return shape_err("maxpool1d", format!("expected [B, C, T], got {:?}", x.shape()));
            }
            if kernel == 0 || stride == 0 {
                return arg_err("maxpool1d", "kernel and stride must be positive");
            }
            let (b, c, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            if kernel > t {
                return arg_err("maxpool1d", format!("kernel {kernel} exceeds length {t}"));
            }
            let t_out = (t - kernel) / stride + 1;
            let mut data = Vec::with_capacity(b * c * t_out);
            let mut argmax = Vec::with_capacity(b * c * t_out);
            for (r, row) in x.data().chunks(t).enumerate() {
                for o in 0..t_out {
                    let s = o * stride;
                    let mut best = s;
                    for i in s + 1..s + kernel {
                        if row[i] > row[best] {
                            best = i;
                        }
                    }
                    data.push(row[best]);
                    argmax.push(r * t + best);
                }
            }
            (Tensor::from_vec(vec![b, c, t_out], data)?, argmax)
        };
        Ok(self.push_op(out, Op::MaxPool1d { input: input.0, argmax }, &[input.0]))
    }

    // ---- losses ----

    /// Mean over rows of `-log softmax(logits)[label]`, `logits: [N, K]`.
    pub fn softmax_cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = {
            let x = self.value(logits);
            if x.ndim() != 2 {
                return shape_err("softmax_cross_entropy", format!("expected [N, K], got {:?}", x.shape()));
            }
            let (n, k) = (x.shape()[0], x.shape()[1]);
            if labels.len() != n {
                return shape_err("softmax_cross_entropy", format!("{n} rows but {} labels", labels.len()));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
                return arg_err("softmax_cross_entropy", format!("label {bad} out of range for {k} classes"));
            }
            let mut probs = Vec::with_capacity(n * k);
            let mut total = 0.0;
            for (row, &label) in x.data().chunks(k).zip(labels) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                let lse = max + sum.ln();
                total += lse - row[label];
                probs.extend(row.iter().map(|v| (v - lse).exp()));
            }
            (total / n as f64, probs)
        };
        Ok(self.push_op(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
            &[logits.0],
        ))
    }

    /// Mean of `0.5 d^2` for `|d| < 1`, `|d| - 0.5` otherwise, `d = pred - target`.
    pub fn smooth_l1(&self, pred: Var, target: &Tensor) -> Result<Var> {
        let loss = {
            let p = self.value(pred);
            if p.len() != target.len() {
                return shape_err("smooth_l1", format!("{:?} vs {:?}", p.shape(), target.shape()));
            }
            let s: f64 = p
                .data()
                .iter()
                .zip(target.data())
                .map(|(a, b)| {
                    let d = (a - b).abs();
                    if d < 1.0 {
                        0.5 * d * d
                    } else {
                        d - 0.5
                    }
                })
                .sum();
            s / p.len() as f64
        };
        Ok(self.push_op(
            Tensor::scalar(loss),
            Op::SmoothL1 {
                pred: pred.0,
                target: target.clone(),
            },
            &[pred.0],
        ))
    }

    /// Mean of squared differences.
    pub fn mse(&self, pred: Var, target: &Tensor) -> Result<Var> {
        let loss = {
            let p = self.value(pred);
            if p.len() != target.len() {
                return shape_err("mse", format!("{:?} vs {:?}", p.shape(), target.shape()));
            }
            let s: f64 = p.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
            s / p.len() as f64
        };
        Ok(self.push_op(
            Tensor::scalar(loss),
            Op::Mse {
                pred: pred.0,
                target: target.clone(),
            },
            &[pred.0],
        ))
    }

    // ---- backward ----

    /// Propagates d(root)/d(node) to every leaf reachable from `root`.
    /// Leaf gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&self, root: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root_shape = nodes[root.0].value.shape();
        if nodes[root.0].value.len() != 1 {
            return Err(NumError::NonScalarRoot(root_shape.to_vec()));
        }
        let mut local: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        local[root.0] = Some(Tensor::ones(root_shape));

        let mut persistent = self.grads.borrow_mut();
        if persistent.len() < nodes.len() {
            persistent.resize(nodes.len(), None);
        }

        for i in (0..=root.0).rev() {
            let Some(g) = local[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut persistent[i] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
                continue;
            }
            let mut send = |target: usize, grad: Tensor| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut local[target] {
                    Some(acc) => acc.add_assign(&grad),
                    slot => *slot = Some(grad),
                }
            };
            propagate(&nodes, node, &g, &mut send);
        }
        Ok(())
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn swap_last2(t: &Tensor) -> Tensor {
    let nd = t.ndim();
    let (a, b) = (t.shape()[nd - 2], t.shape()[nd - 1]);
    let outer = t.len() / (a * b);
    let mut data = vec![0.0; t.len()];
    for o in 0..outer {
        let src = &t.data()[o * a * b..(o + 1) * a * b];
        let dst = &mut data[o * a * b..(o + 1) * a * b];
        for i in 0..a {
            for j in 0..b {
                dst[j * a + i] = src[i * b + j];
            }
        }
    }
    let mut shape = t.shape().to_vec();
    shape.swap(nd - 2, nd - 1);
    Tensor::from_vec(shape, data).expect("same element count")
}

fn propagate(nodes: &[Node], node: &Node, g: &Tensor, send: &mut impl FnMut(usize, Tensor)) {
    let val = |i: usize| &nodes[i].value;
    match &node.op {
        Op::Leaf | Op::Constant => {}
        Op::Add(a, b) => {
            send(*a, g.clone());
            send(*b, g.clone());
        }
        Op::Sub(a, b) => {
            send(*a, g.clone());
            send(*b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            send(*a, zip_map(g, val(*b), |p, q| p * q));
            send(*b, zip_map(g, val(*a), |p, q| p * q));
        }
        Op::Scale(a, f) => send(*a, g.map(|v| v * f)),
        Op::Offset(a) => send(*a, g.clone()),
        Op::Sum(a) => send(*a, Tensor::full(val(*a).shape(), g.item())),
        Op::Mean(a) => {
            let x = val(*a);
            send(*a, Tensor::full(x.shape(), g.item() / x.len() as f64));
        }
        Op::Relu(a) => send(*a, zip_map(g, val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })),
        Op::Exp(a) => {
            let d = g
                .data()
                .iter()
                .zip(node.value.data())
                .zip(val(*a).data())
                .map(|((gv, y), x)| if *x < EXP_INPUT_MAX { gv * y } else { 0.0 })
                .collect();
            send(*a, Tensor::from_vec(g.shape().to_vec(), d).expect("shape"));
        }
        Op::Sigmoid(a) => send(*a, zip_map(g, &node.value, |gv, y| gv * y * (1.0 - y))),
        Op::Matmul(a, b) => {
            let (x, y) = (val(*a), val(*b));
            let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
            if nodes[*a].requires_grad {
                // dA = G B^T
                let mut da = Tensor::zeros(&[m, k]);
                gemm(m, n, k, g.data(), (n, 1), y.data(), (1, n), da.data_mut(), 0.0);
                send(*a, da);
            }
            if nodes[*b].requires_grad {
                // dB = A^T G
                let mut db = Tensor::zeros(&[k, n]);
                gemm(k, m, n, x.data(), (1, k), g.data(), (n, 1), db.data_mut(), 0.0);
                send(*b, db);
            }
        }
        Op::Reshape(a) => send(*a, g.reshape(val(*a).shape().to_vec()).expect("shape")),
        Op::Concat { inputs, axis } => {
            let shape = node.value.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis] * inner;
            let mut offset = 0;
            for &inp in inputs {
                let s = val(inp).shape();
                let block = s[*axis] * inner;
                if nodes[inp].requires_grad {
                    let mut data = Vec::with_capacity(outer * block);
                    for o in 0..outer {
                        let base = o * total + offset;
                        data.extend_from_slice(&g.data()[base..base + block]);
                    }
                    send(inp, Tensor::from_vec(s.to_vec(), data).expect("shape"));
                }
                offset += block;
            }
        }
        Op::Narrow { input, axis, start } => {
            let s = val(*input).shape();
            let outer: usize = s[..*axis].iter().product();
            let inner: usize = s[axis + 1..].iter().product();
            let len = node.value.shape()[*axis];
            let mut d = Tensor::zeros(s);
            for o in 0..outer {
                let dst = (o * s[*axis] + start) * inner;
                let src = o * len * inner;
                d.data_mut()[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
            }
            send(*input, d);
        }
        Op::SwapLast2(a) => send(*a, swap_last2(g)),
        Op::GatherRows { input, rows } => {
            let s = val(*input).shape();
            let k = s[1];
            let mut d = Tensor::zeros(s);
            for (i, &r) in rows.iter().enumerate() {
                let src = &g.data()[i * k..(i + 1) * k];
                for (dst, v) in d.data_mut()[r * k..(r + 1) * k].iter_mut().zip(src) {
                    *dst += v;
                }
            }
            send(*input, d);
        }
        Op::Conv1d {
            input,
            weight,
            bias,
            stride,
            padding,
        } => {
            let (x, w, b) = (val(*input), val(*weight), val(*bias));
            let geo = ConvGeometry::new(x.shape(), w.shape(), b.shape(), *stride, *padding).expect("checked in forward");
            let grads = conv1d_backward(
                &geo,
                x.data(),
                w.data(),
                g.data(),
                nodes[*input].requires_grad,
                nodes[*weight].requires_grad || nodes[*bias].requires_grad,
            );
            if let Some(dx) = grads.input {
                send(*input, Tensor::from_vec(x.shape().to_vec(), dx).expect("shape"));
            }
            if let Some((dw, db)) = grads.params {
                send(*weight, Tensor::from_vec(w.shape().to_vec(), dw).expect("shape"));
                send(*bias, Tensor::from_vec(b.shape().to_vec(), db).expect("shape"));
            }
        }
        Op::MaxPool1d { input, argmax } => {
            let mut d = Tensor::zeros(val(*input).shape());
            for (&src, gv) in argmax.iter().zip(g.data()) {
                d.data_mut()[src] += gv;
            }
            send(*input, d);
        }
        Op::SoftmaxCrossEntropy { logits, labels, probs } => {
            let x = val(*logits);
            let k = x.shape()[1];
            let scale = g.item() / labels.len() as f64;
            let mut d = probs.clone();
            for (row, &label) in d.chunks_mut(k).zip(labels) {
                row[label] -= 1.0;
                row.iter_mut().for_each(|v| *v *= scale);
            }
            send(*logits, Tensor::from_vec(x.shape().to_vec(), d).expect("shape"));
        }
        Op::SmoothL1 { pred, target } => {
            let p = val(*pred);
            let scale = g.item() / p.len() as f64;
            let d = p
                .data()
                .iter()
                .zip(target.data())
                .map(|(a, b)| {
                    let diff = a - b;
                    scale * if diff.abs() < 1.0 { diff } else { diff.signum() }
                })
                .collect();
            send(*pred, Tensor::from_vec(p.shape().to_vec(), d).expect("shape"));
        }
        Op::Mse { pred, target } => {
            let p = val(*pred);
            let scale = 2.0 * g.item() / p.len() as f64;
            let d = p.data().iter().zip(target.data()).map(|(a, b)| scale * (a - b)).collect();
            send(*pred, Tensor::from_vec(p.shape().to_vec(), d).expect("shape"));
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
    Tensor::from_vec(a.shape().to_vec(), data).expect("shape")
}

/// `c = a * b + beta * c` with explicit (row, col) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the slices cover every index reachable from the given strides
    // and dimensions, and `c` does not alias `a` or `b`.
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvGeometry {
    batch: usize,
    in_ch: usize,
    len: usize,
    out_ch: usize,
    kernel: usize,
    out_len: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], w: &[usize], b: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if x.len() != 3 || w.len() != 3 {
            return shape_err("conv1d", format!("input {x:?} and weight {w:?} must be rank 3"));
        }
        if x[1] != w[1] {
            return shape_err(
                "conv1d",
                format!("input has {} channels but weight expects {}", x[1], w[1]),
            );
        }
        if b != [w[0]] {
            return shape_err("conv1d", format!("bias {b:?} does not match {} filters", w[0]));
        }
        if stride == 0 {
            return arg_err("conv1d", "stride must be positive");
        }
        let padded = x[2] + 2 * padding;
        if w[2] > padded {
            return arg_err(
                "conv1d",
                format!("kernel {} longer than padded input {padded}", w[2]),
            );
        }
        Ok(Self {
            batch: x[0],
            in_ch: x[1],
            len: x[2],
            out_ch: w[0],
            kernel: w[2],
            out_len: (padded - w[2]) / stride + 1,
            stride,
            padding,
        })
    }

    /// Unrolls one batch item into a `[C*K, T']` column matrix.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (k, to) = (self.kernel, self.out_len);
        for c in 0..self.in_ch {
            let row = &x[c * self.len..(c + 1) * self.len];
            for kk in 0..k {
                let dst = &mut cols[(c * k + kk) * to..(c * k + kk + 1) * to];
                for (t, d) in dst.iter_mut().enumerate() {
                    let pos = (t * self.stride + kk) as isize - self.padding as isize;
                    *d = if pos >= 0 && (pos as usize) < self.len {
                        row[pos as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let (k, to) = (self.kernel, self.out_len);
        for c in 0..self.in_ch {
            let row = &mut dx[c * self.len..(c + 1) * self.len];
            for kk in 0..k {
                let src = &cols[(c * k + kk) * to..(c * k + kk + 1) * to];
                for (t, v) in src.iter().enumerate() {
                    let pos = (t * self.stride + kk) as isize - self.padding as isize;
                    if pos >= 0 && (pos as usize) < self.len {
                        row[pos as usize] += v;
                    }
                }
            }
        }
    }
}

fn conv1d_forward(geo: &ConvGeometry, x: &[f64], w: &[f64], b: &[f64]) -> Tensor {
    let (f, ck, to) = (geo.out_ch, geo.in_ch * geo.kernel, geo.out_len);
    let mut out = vec![0.0; geo.batch * f * to];
    let mut cols = vec![0.0; ck * to];
    for bi in 0..geo.batch {
        geo.im2col(&x[bi * geo.in_ch * geo.len..(bi + 1) * geo.in_ch * geo.len], &mut cols);
        let dst = &mut out[bi * f * to..(bi + 1) * f * to];
        for (fi, row) in dst.chunks_mut(to).enumerate() {
            row.fill(b[fi]);
        }
        gemm(f, ck, to, w, (ck, 1), &cols, (to, 1), dst, 1.0);
    }
    Tensor::from_vec(vec![geo.batch, f, to], out).expect("shape")
}

struct ConvGrads {
    input: Option<Vec<f64>>,
    params: Option<(Vec<f64>, Vec<f64>)>,
}

fn conv1d_backward(
    geo: &ConvGeometry,
    x: &[f64],
    w: &[f64],
    g: &[f64],
    want_input: bool,
    want_params: bool,
) -> ConvGrads {
    let (f, ck, to) = (geo.out_ch, geo.in_ch * geo.kernel, geo.out_len);
    let in_size = geo.in_ch * geo.len;
    let mut dx = want_input.then(|| vec![0.0; geo.batch * in_size]);
    let mut dw = vec![0.0; if want_params { f * ck } else { 0 }];
    let mut db = vec![0.0; if want_params { f } else { 0 }];
    let mut cols = vec![0.0; ck * to];
    let mut dcols = vec![0.0; if want_input { ck * to } else { 0 }];
    for bi in 0..geo.batch {
        let gb = &g[bi * f * to..(bi + 1) * f * to];
        if want_params {
            geo.im2col(&x[bi * in_size..(bi + 1) * in_size], &mut cols);
            // dW += G cols^T
            gemm(f, to, ck, gb, (to, 1), &cols, (1, to), &mut dw, 1.0);
            for (fi, row) in gb.chunks(to).enumerate() {
                db[fi] += row.iter().sum::<f64>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            // dcols = W^T G
            gemm(ck, f, to, w, (1, ck), gb, (to, 1), &mut dcols, 0.0);
            geo.col2im(&dcols, &mut dx[bi * in_size..(bi + 1) * in_size]);
        }
    }
    ConvGrads {
        input: dx,
        params: want_params.then_some((dw, db)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv1d_hand_example() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 4], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.leaf(t(&[1, 1, 2], &[1.0, 1.0]));
        let b = tape.leaf(t(&[1], &[0.0]));
        let y = tape.conv1d(x, w, b, 2, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 7.0]);
    }

    #[test]
    fn conv1d_identity_kernel() {
        let tape = Tape::new();
        let data: Vec<f64> = (0..12).map(|v| v as f64 * 0.5 - 2.0).collect();
        let x = tape.constant(t(&[1, 3, 4], &data));
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let w = tape.leaf(t(&[3, 3, 1], &eye));
        let b = tape.leaf(Tensor::zeros(&[3]));
        let y = tape.conv1d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn conv1d_base2_preserves_length() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 2, 128]));
        let w = tape.leaf(Tensor::ones(&[3, 2, 9]));
        let b = tape.leaf(Tensor::zeros(&[3]));
        let y = tape.conv1d(x, w, b, 1, 4).unwrap();
        assert_eq!(tape.shape(y), vec![1, 3, 128]);
    }

    #[test]
    fn conv1d_rejects_channel_mismatch() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 2, 8]));
        let w = tape.leaf(Tensor::ones(&[3, 4, 3]));
        let b = tape.leaf(Tensor::zeros(&[3]));
        let err = tape.conv1d(x, w, b, 1, 1).unwrap_err();
        assert!(err.to_string().contains("channels"), "{err}");
    }

    #[test]
    fn maxpool_examples() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 4], &[1.0, 3.0, 2.0, 4.0]));
        let y = tape.maxpool1d(x, 2, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0]);

        let c = tape.constant(Tensor::full(&[1, 2, 128], 0.7));
        let y = tape.maxpool1d(c, 2, 2).unwrap();
        assert_eq!(tape.shape(y), vec![1, 2, 64]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.7));

        assert!(tape.maxpool1d(x, 5, 1).is_err());
    }

    #[test]
    fn maxpool_ties_route_to_lowest_index() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2], &[5.0, 5.0]));
        let y = tape.maxpool1d(x, 2, 2).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn elementwise_values() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]));
        assert_eq!(tape.value(tape.relu(x)).data(), &[0.0, 0.0, 2.0]);
        let z = tape.constant(Tensor::zeros(&[1]));
        assert_eq!(tape.value(tape.exp(z)).item(), 1.0);
        assert_eq!(tape.value(tape.sigmoid(z)).item(), 0.5);
    }

    #[test]
    fn concat_channels() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::ones(&[2, 256, 4]));
        let b = tape.leaf(Tensor::zeros(&[2, 256, 4]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), vec![2, 512, 4]);
        let bad = tape.leaf(Tensor::zeros(&[2, 256, 5]));
        assert!(tape.concat(&[a, bad], 1).is_err());
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[4, 3]));
        let l = tape.softmax_cross_entropy(x, &[0, 1, 2, 0]).unwrap();
        assert!((tape.value(l).item() - 3f64.ln()).abs() < 1e-12);

        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        let l = tape.softmax_cross_entropy(x, &[0, 1]).unwrap();
        assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-12);

        assert!(tape.softmax_cross_entropy(x, &[0, 2]).is_err());
    }

    #[test]
    fn cross_entropy_decreases_in_correct_logit() {
        let mut prev = f64::INFINITY;
        for m in [0.0, 1.0, 5.0, 20.0, 200.0] {
            let tape = Tape::new();
            let x = tape.leaf(t(&[1, 3], &[m, 0.0, 0.0]));
            let l = tape.value(tape.softmax_cross_entropy(x, &[0]).unwrap()).item();
            assert!(l < prev && l.is_finite());
            prev = l;
            // and grows without bound when the magnitude sits on a wrong class
            let tape = Tape::new();
            let x = tape.leaf(t(&[1, 3], &[0.0, m, 0.0]));
            let wrong = tape.value(tape.softmax_cross_entropy(x, &[0]).unwrap()).item();
            assert!(wrong >= m - 1e-9);
        }
    }

    #[test]
    fn smooth_l1_piecewise() {
        let tape = Tape::new();
        let p = tape.leaf(t(&[1], &[0.5]));
        let zero = Tensor::zeros(&[1]);
        assert!((tape.value(tape.smooth_l1(p, &zero).unwrap()).item() - 0.125).abs() < 1e-15);
        let p = tape.leaf(t(&[1], &[3.0]));
        assert!((tape.value(tape.smooth_l1(p, &zero).unwrap()).item() - 2.5).abs() < 1e-15);
        let same = t(&[1], &[3.0]);
        assert_eq!(tape.value(tape.smooth_l1(p, &same).unwrap()).item(), 0.0);
    }

    #[test]
    fn mse_examples() {
        let tape = Tape::new();
        let p = tape.leaf(t(&[1], &[0.0]));
        assert_eq!(tape.value(tape.mse(p, &t(&[1], &[2.0])).unwrap()).item(), 4.0);
        let p = tape.leaf(t(&[2], &[1.0, 1.0]));
        assert_eq!(tape.value(tape.mse(p, &t(&[2], &[0.0, 2.0])).unwrap()).item(), 1.0);
        assert_eq!(tape.value(tape.mse(p, &t(&[2], &[1.0, 1.0])).unwrap()).item(), 0.0);
        assert!(tape.mse(p, &t(&[3], &[1.0, 1.0, 1.0])).is_err());
    }

    #[test]
    fn backward_sum_gives_ones() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 3, 4], 0.3));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn backward_mse_closed_form() {
        let tape = Tape::new();
        let w = tape.leaf(t(&[1], &[1.0]));
        let x = tape.constant(t(&[1], &[2.0]));
        let y = tape.mul(w, x).unwrap();
        let l = tape.mse(y, &Tensor::zeros(&[1])).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap().item(), 8.0);
        // repeated backward accumulates
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap().item(), 16.0);
        tape.zero_grad();
        assert!(tape.grad(w).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2]));
        assert!(matches!(tape.backward(x), Err(NumError::NonScalarRoot(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[3]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).is_none());
    }
}
