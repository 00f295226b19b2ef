use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::kernels::{self, axis_split};
use crate::tensor::Tensor;
use crate::NORM_EPS;

type Id = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Id, b: Id, m: usize, k: usize, n: usize },
    BatchMatMul { a: Id, b: Id, batch: usize, m: usize, k: usize, n: usize },
    Add { a: Id, b: Id },
    Sub { a: Id, b: Id },
    Mul { a: Id, b: Id },
    Scale { x: Id, c: f64 },
    AddScalar { x: Id },
    AddBias { x: Id, b: Id },
    MulBias { x: Id, g: Id },
    Exp { x: Id },
    Log { x: Id },
    Silu { x: Id },
    Softmax { x: Id, axis: usize },
    LogSoftmax { x: Id, axis: usize },
    L2Normalize { x: Id, axis: usize, norms: Vec<f64> },
    RescaleToSum { x: Id, axis: usize, sums: Vec<f64> },
    LayerNorm { x: Id, inv_std: Vec<f64> },
    Sum { x: Id },
    SumAxis { x: Id, axis: usize, scale: f64 },
    Reshape { x: Id },
    Permute { x: Id, perm: Vec<usize> },
    Narrow { x: Id, axis: usize, start: usize },
    Concat { xs: Vec<Id>, axis: usize },
    Diagonal { x: Id },
    Embedding { table: Id, ids: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "bmm",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::AddBias { .. } => "add_bias",
            Op::MulBias { .. } => "mul_bias",
            Op::Exp { .. } => "exp",
            Op::Log { .. } => "log",
            Op::Silu { .. } => "silu",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::RescaleToSum { .. } => "rescale_to_sum",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Sum { .. } => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
            Op::Diagonal { .. } => "diagonal",
            Op::Embedding { .. } => "embedding",
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
    label: Option<String>,
}

/// Records one forward pass. Drop it after [`Tape::backward`].
///
/// Nodes are appended in execution order, so operands always precede their
/// results and a reverse sweep is a valid topological order.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: Id,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let v = self.value();
        write!(f, "Var#{}{:?}", self.id, v.shape())
    }
}

/// Gradients of the tracked leaves, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the leaf does not require gradients or was not reached.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Like [`get`](Self::get) but yields zeros for unreached tracked leaves.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape().to_vec()))
    }
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

    /// Registers a trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            label: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: Id) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: Id) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn result(&self, shape: Vec<usize>, data: Vec<f64>, op: Op, operands: &[Id]) -> Var<'_> {
        let rg = operands.iter().any(|&o| self.requires_grad(o));
        self.push(Tensor::new(shape, data).expect("op produced consistent shape"), op, rg)
    }

    /// First node (in execution order) holding a non-finite value, as
    /// `(index, op name or label)`.
    pub fn first_non_finite(&self) -> Option<(usize, String)> {
        let nodes = self.nodes.borrow();
        nodes.iter().enumerate().find_map(|(i, n)| {
            (!n.value.is_finite()).then(|| {
                let name = n.label.clone().unwrap_or_else(|| n.op.name().to_string());
                (i, name)
            })
        })
    }

    pub fn concat<'t>(&'t self, xs: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = xs
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?
            .value();
        let base = first.shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::Axis {
                op: "concat",
                axis,
                shape: base,
            });
        }
        let values: Vec<Rc<Tensor>> = xs.iter().map(|x| x.value()).collect();
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis];
                data.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ids: Vec<Id> = xs.iter().map(|x| x.id).collect();
        Ok(self.result(shape, data, Op::Concat { xs: ids.clone(), axis }, &ids))
    }

    /// Row lookup `table[ids[i]]`; `table` is `[vocab, width]`.
    pub fn embedding<'t>(&'t self, table: Var<'t>, ids: &[usize]) -> Result<Var<'t>> {
        let t = table.value();
        let (vocab, width) = t.dims2()?;
        let mut data = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::Index {
                    op: "embedding",
                    index: id,
                    limit: vocab,
                });
            }
            data.extend_from_slice(t.row(id));
        }
        Ok(self.result(
            vec![ids.len(), width],
            data,
            Op::Embedding {
                table: table.id,
                ids: ids.to_vec(),
            },
            &[table.id],
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let n_nodes = nodes.len();
        let loss_value = &nodes[loss.id].value;
        if loss_value.numel() != 1 {
            return Err(TensorError::NonScalar {
                shape: loss_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n_nodes];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backward_rule(&nodes, id, &g, &mut grads);
        }

        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, node)| match (&node.op, node.requires_grad, g) {
                (Op::Leaf, true, Some(g)) => Some(
                    Tensor::new(node.value.shape().to_vec(), g).expect("grad matches leaf shape"),
                ),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], id: Id) -> Option<&'g mut [f64]> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
}

fn backward_rule(nodes: &[Node], id: Id, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let out = node.value.data();
    let val = |i: Id| nodes[i].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, m, k, n } => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(ga) = accumulate(grads, nodes, *a) {
                kernels::gemm_nt(g, bv, ga, *m, *n, *k);
            }
            if let Some(gb) = accumulate(grads, nodes, *b) {
                kernels::gemm_tn(av, g, gb, *m, *k, *n);
            }
        }
        Op::BatchMatMul { a, b, batch, m, k, n } => {
            let (av, bv) = (val(*a), val(*b));
            let (sa, sb, so) = (m * k, k * n, m * n);
            if let Some(ga) = accumulate(grads, nodes, *a) {
                for t in 0..*batch {
                    kernels::gemm_nt(
                        &g[t * so..(t + 1) * so],
                        &bv[t * sb..(t + 1) * sb],
                        &mut ga[t * sa..(t + 1) * sa],
                        *m,
                        *n,
                        *k,
                    );
                }
            }
            if let Some(gb) = accumulate(grads, nodes, *b) {
                for t in 0..*batch {
                    kernels::gemm_tn(
                        &av[t * sa..(t + 1) * sa],
                        &g[t * so..(t + 1) * so],
                        &mut gb[t * sb..(t + 1) * sb],
                        *m,
                        *k,
                        *n,
                    );
                }
            }
        }
        Op::Add { a, b } => {
            for (src, sign) in [(*a, 1.0), (*b, 1.0)] {
                if let Some(gs) = accumulate(grads, nodes, src) {
                    gs.iter_mut().zip(g).for_each(|(d, &u)| *d += sign * u);
                }
            }
        }
        Op::Sub { a, b } => {
            for (src, sign) in [(*a, 1.0), (*b, -1.0)] {
                if let Some(gs) = accumulate(grads, nodes, src) {
                    gs.iter_mut().zip(g).for_each(|(d, &u)| *d += sign * u);
                }
            }
        }
        Op::Mul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(ga) = accumulate(grads, nodes, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * bv[i];
                }
            }
            if let Some(gb) = accumulate(grads, nodes, *b) {
                for i in 0..g.len() {
                    gb[i] += g[i] * av[i];
                }
            }
        }
        Op::Scale { x, c } => {
            if let Some(gx) = accumulate(grads, nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(d, &u)| *d += c * u);
            }
        }
        Op::AddScalar { x } | Op::Reshape { x } => {
            if let Some(gx) = accumulate(grads, nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(d, &u)| *d += u);
            }
        }
        Op::AddBias { x, b } => {
            let n = nodes[*b].value.numel();
            if let Some(gx) = accumulate(grads, nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(d, &u)| *d += u);
            }
            if let Some(gb) = accumulate(grads, nodes, *b) {
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(d, &u)| *d += u);
                }
            }
        }
        Op::MulBias { x, g: gain } => {
            let (xv, gv) = (val(*x), val(*gain));
            let n = gv.len();
            if let Some(gx) = accumulate(grads, nodes, *x) {
                for (i, (d, &u)) in gx.iter_mut().zip(g).enumerate() {
                    *d += u * gv[i % n];
                }
            }
            if let Some(gg) = accumulate(grads, nodes, *gain) {
                for (i, &u) in g.iter().enumerate() {
                    gg[i % n] += u * xv[i];
                }
            }
        }
        Op::Exp { x } => {
            if let Some(gx) = accumulate(grads, nodes, *x) {
                for i in 0..g.len() {
                    gx[i] += g[i] * out[i];
                }
            }
        }
        Op::Log { x } => {
            let xv = val(*x);
            if let Some(gx) = accumulate(grads, nodes, *x) {
                for i in 0..g.len() {
                    gx[i] += g[i] / xv[i];
                }
            }
        }
        Op::Silu { x } => {
            let xv = val(*x);
            if let Some(gx) = accumulate(grads, nodes, *x) {
                for i in 0..g.len() {
                    let s = kernels::sigmoid(xv[i]);
                    gx[i] += g[i] * s * (1.0 + xv[i] * (1.0 - s));
                }
            }
        }
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = axis_split(node.value.shape(), *axis);
            if let Some(gx) = accumulate(grads, nodes, *x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| g[idx(k)] * out[idx(k)]).sum();
                        for k in 0..len {
                            gx[idx(k)] += out[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
            }
        }
        Op::LogSoftmax { x, axis } => {
            let (outer, len, inner) = axis_split(node.value.shape(), *axis);
            if let Some(gx) = accumulate(grads, nodes, *x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let total: f64 = (0..len).map(|k| g[idx(k)]).sum();
                        for k in 0..len {
                            gx[idx(k)] += g[idx(k)] - out[idx(k)].exp() * total;
                        }
                    }
                }
            }
        }
        Op::L2Normalize { x, axis, norms } => {
            let (outer, len, inner) = axis_split(node.value.shape(), *axis);
            if let Some(gx) = accumulate(grads, nodes, *x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let norm = norms[o * inner + i];
                        let dot: f64 = (0..len).map(|k| g[idx(k)] * out[idx(k)]).sum();
                        for k in 0..len {
                            gx[idx(k)] += (g[idx(k)] - out[idx(k)] * dot) / norm;
                        }
                    }
                }
            }
        }
        Op::RescaleToSum { x, axis, sums } => {
            let (outer, len, inner) = axis_split(node.value.shape(), *axis);
            if let Some(gx) = accumulate(grads, nodes, *x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let s = sums[o * inner + i];
                        let dot: f64 = (0..len).map(|k| g[idx(k)] * out[idx(k)]).sum();
                        let total = len as f64;
                        for k in 0..len {
                            gx[idx(k)] += (total * g[idx(k)] - dot) / s;
                        }
                    }
                }
            }
        }
        Op::LayerNorm { x, inv_std } => {
            let n = *node.value.shape().last().unwrap();
            if let Some(gx) = accumulate(grads, nodes, *x) {
                for (r, &is) in inv_std.iter().enumerate() {
                    let span = r * n..(r + 1) * n;
                    let (gr, yr) = (&g[span.clone()], &out[span.clone()]);
                    let mean_g = gr.iter().sum::<f64>() / n as f64;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for (j, d) in gx[span].iter_mut().enumerate() {
                        *d += is * (gr[j] - mean_g - yr[j] * mean_gy);
                    }
                }
            }
        }
        Op::Sum { x } => {
            if let Some(gx) = accumulate(grads, nodes, *x) {
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::SumAxis { x, axis, scale } => {
            let (outer, len, inner) = axis_split(nodes[*x].value.shape(), *axis);
            if let Some(gx) = accumulate(grads, nodes, *x) {
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            gx[(o * len + k) * inner + i] += scale * g[o * inner + i];
                        }
                    }
                }
            }
        }
        Op::Permute { x, perm } => {
            if let Some(gx) = accumulate(grads, nodes, *x) {
                let back = kernels::permute(g, node.value.shape(), &kernels::inverse_perm(perm));
                gx.iter_mut().zip(back).for_each(|(d, u)| *d += u);
            }
        }
        Op::Narrow { x, axis, start } => {
            let in_shape = nodes[*x].value.shape();
            let (outer, in_len, inner) = axis_split(in_shape, *axis);
            let len = node.value.shape()[*axis];
            if let Some(gx) = accumulate(grads, nodes, *x) {
                for o in 0..outer {
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    let dst_start = (o * in_len + start) * inner;
                    gx[dst_start..dst_start + len * inner]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, &u)| *d += u);
                }
            }
        }
        Op::Concat { xs, axis } => {
            let (outer, total, inner) = axis_split(node.value.shape(), *axis);
            let mut offset = 0;
            for &src in xs {
                let len = nodes[src].value.shape()[*axis];
                if let Some(gs) = accumulate(grads, nodes, src) {
                    for o in 0..outer {
                        let from = (o * total + offset) * inner;
                        gs[o * len * inner..(o + 1) * len * inner]
                            .iter_mut()
                            .zip(&g[from..from + len * inner])
                            .for_each(|(d, &u)| *d += u);
                    }
                }
                offset += len;
            }
        }
        Op::Diagonal { x } => {
            let n = *node.value.shape().last().unwrap();
            if let Some(gx) = accumulate(grads, nodes, *x) {
                for (t, gt) in g.chunks(n).enumerate() {
                    for (j, &u) in gt.iter().enumerate() {
                        gx[t * n * n + j * n + j] += u;
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            let width = nodes[*table].value.shape()[1];
            if let Some(gt) = accumulate(grads, nodes, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    gt[id * width..(id + 1) * width]
                        .iter_mut()
                        .zip(&g[r * width..(r + 1) * width])
                        .for_each(|(d, &u)| *d += u);
                }
            }
        }
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::Axis {
            op,
            axis,
            shape: shape.to_vec(),
        });
    }
    Ok(())
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Attaches a name used by non-finite diagnostics.
    pub fn labeled(self, label: &str) -> Self {
        self.tape.nodes.borrow_mut()[self.id].label = Some(label.to_string());
        self
    }

    fn unary(&self, op: Op, shape: Vec<usize>, data: Vec<f64>) -> Var<'t> {
        self.tape.result(shape, data, op, &[self.id])
    }

    fn binary(&self, other: Var<'t>, op: Op, shape: Vec<usize>, data: Vec<f64>) -> Var<'t> {
        self.tape.result(shape, data, op, &[self.id, other.id])
    }

    /// `[m,k] · [k,n] -> [m,n]`
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        };
        let ((m, k), (k2, n)) = (a.dims2().map_err(|_| mismatch())?, b.dims2().map_err(|_| mismatch())?);
        if k != k2 {
            return Err(mismatch());
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(a.data(), b.data(), &mut out, m, k, n);
        Ok(self.binary(other, Op::MatMul { a: self.id, b: other.id, m, k, n }, vec![m, n], out))
    }

    /// Batched `[t,m,k] · [t,k,n] -> [t,m,n]`.
    pub fn bmm(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (batch, m, k, n) = match (a.shape(), b.shape()) {
            ([t, m, k], [t2, k2, n]) if t == t2 && k == k2 => (*t, *m, *k, *n),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "bmm",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                })
            }
        };
        let mut out = vec![0.0; batch * m * n];
        for t in 0..batch {
            kernels::gemm_nn(
                &a.data()[t * m * k..(t + 1) * m * k],
                &b.data()[t * k * n..(t + 1) * k * n],
                &mut out[t * m * n..(t + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let op = Op::BatchMatMul {
            a: self.id,
            b: other.id,
            batch,
            m,
            k,
            n,
        };
        Ok(self.binary(other, op, vec![batch, m, n], out))
    }

    /// Matrix transpose of a rank-2 tensor.
    pub fn t(&self) -> Result<Var<'t>> {
        let rank = self.shape().len();
        if rank != 2 {
            return Err(TensorError::Rank {
                op: "transpose",
                expected: 2,
                shape: self.shape(),
            });
        }
        self.permute(&[1, 0])
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Var<'t>> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(TensorError::Rank {
                op: "transpose_last2",
                expected: 2,
                shape: self.shape(),
            });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(&perm)
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let rank = x.rank();
        let mut seen = vec![false; rank];
        for &p in perm {
            if p >= rank || seen[p] {
                return Err(TensorError::Contract(format!(
                    "permute: {perm:?} is not a permutation of rank {rank}"
                )));
            }
            seen[p] = true;
        }
        if perm.len() != rank {
            return Err(TensorError::Contract(format!(
                "permute: {perm:?} is not a permutation of rank {rank}"
            )));
        }
        let data = kernels::permute(x.data(), x.shape(), perm);
        let shape = perm.iter().map(|&p| x.shape()[p]).collect();
        Ok(self.unary(
            Op::Permute {
                x: self.id,
                perm: perm.to_vec(),
            },
            shape,
            data,
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if shape.iter().product::<usize>() != x.numel() {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                len: x.numel(),
            });
        }
        Ok(self.unary(Op::Reshape { x: self.id }, shape.to_vec(), x.data().to_vec()))
    }

    fn zip_with(&self, other: Var<'t>, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape(name, &a, &b)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(self.binary(other, op, a.shape().to_vec(), data))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, "add", Op::Add { a: self.id, b: other.id }, |x, y| x + y)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, "sub", Op::Sub { a: self.id, b: other.id }, |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, "mul", Op::Mul { a: self.id, b: other.id }, |x, y| x * y)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let x = self.value();
        self.unary(Op::Scale { x: self.id, c }, x.shape().to_vec(), x.data().iter().map(|v| v * c).collect())
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let x = self.value();
        self.unary(Op::AddScalar { x: self.id }, x.shape().to_vec(), x.data().iter().map(|v| v + c).collect())
    }

    fn check_last(&self, other: &Tensor, name: &'static str) -> Result<usize> {
        let x = self.value();
        let n = x.shape().last().copied().unwrap_or(0);
        if other.shape() != [n] {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: x.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        Ok(n)
    }

    /// Adds a vector along the last axis of every row.
    pub fn add_bias(&self, bias: Var<'t>) -> Result<Var<'t>> {
        let b = bias.value();
        let n = self.check_last(&b, "add_bias")?;
        let x = self.value();
        let data = x.data().iter().enumerate().map(|(i, v)| v + b.data()[i % n]).collect();
        Ok(self.binary(bias, Op::AddBias { x: self.id, b: bias.id }, x.shape().to_vec(), data))
    }

    /// Multiplies every row by a vector along the last axis.
    pub fn mul_bias(&self, gain: Var<'t>) -> Result<Var<'t>> {
        let g = gain.value();
        let n = self.check_last(&g, "mul_bias")?;
        let x = self.value();
        let data = x.data().iter().enumerate().map(|(i, v)| v * g.data()[i % n]).collect();
        Ok(self.binary(gain, Op::MulBias { x: self.id, g: gain.id }, x.shape().to_vec(), data))
    }

    pub fn exp(&self) -> Var<'t> {
        let x = self.value();
        self.unary(Op::Exp { x: self.id }, x.shape().to_vec(), x.data().iter().map(|v| v.exp()).collect())
    }

    /// Natural log; non-positive entries are rejected.
    pub fn log(&self) -> Result<Var<'t>> {
        let x = self.value();
        if let Some(i) = x.data().iter().position(|&v| v <= 0.0) {
            return Err(TensorError::Degenerate {
                op: "log",
                detail: format!("entry {i} is {}", x.data()[i]),
            });
        }
        Ok(self.unary(Op::Log { x: self.id }, x.shape().to_vec(), x.data().iter().map(|v| v.ln()).collect()))
    }

    /// `x · sigmoid(x)`
    pub fn silu(&self) -> Var<'t> {
        let x = self.value();
        let data = x.data().iter().map(|&v| v * kernels::sigmoid(v)).collect();
        self.unary(Op::Silu { x: self.id }, x.shape().to_vec(), data)
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("softmax", x.shape(), axis)?;
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let xd = x.data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| xd[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (xd[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[idx(k)] /= total;
                }
            }
        }
        Ok(self.unary(Op::Softmax { x: self.id, axis }, x.shape().to_vec(), out))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("log_softmax", x.shape(), axis)?;
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let xd = x.data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| xd[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|k| (xd[idx(k)] - max).exp()).sum::<f64>().ln();
                for k in 0..len {
                    out[idx(k)] = xd[idx(k)] - lse;
                }
            }
        }
        Ok(self.unary(Op::LogSoftmax { x: self.id, axis }, x.shape().to_vec(), out))
    }

    /// Unit Euclidean norm along `axis`. Norms below [`NORM_EPS`] are an error.
    pub fn l2_normalize(&self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("l2_normalize", x.shape(), axis)?;
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let xd = x.data();
        let mut out = vec![0.0; xd.len()];
        let mut norms = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let norm = (0..len).map(|k| xd[idx(k)] * xd[idx(k)]).sum::<f64>().sqrt();
                if !(norm > NORM_EPS) {
                    return Err(TensorError::Degenerate {
                        op: "l2_normalize",
                        detail: format!("norm {norm:e} at slice {} is below {NORM_EPS:e}", o * inner + i),
                    });
                }
                for k in 0..len {
                    out[idx(k)] = xd[idx(k)] / norm;
                }
                norms.push(norm);
            }
        }
        Ok(self.unary(
            Op::L2Normalize {
                x: self.id,
                axis,
                norms,
            },
            x.shape().to_vec(),
            out,
        ))
    }

    /// Rescales each slice along `axis` so that it sums to the slice length.
    pub fn rescale_to_length(&self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("rescale_to_length", x.shape(), axis)?;
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let xd = x.data();
        let mut out = vec![0.0; xd.len()];
        let mut sums = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let s: f64 = (0..len).map(|k| xd[idx(k)]).sum();
                if !(s > 0.0) {
                    return Err(TensorError::Degenerate {
                        op: "rescale_to_length",
                        detail: format!("slice sum {s:e} is not positive"),
                    });
                }
                for k in 0..len {
                    out[idx(k)] = len as f64 * xd[idx(k)] / s;
                }
                sums.push(s);
            }
        }
        Ok(self.unary(Op::RescaleToSum { x: self.id, axis, sums }, x.shape().to_vec(), out))
    }

    /// Zero-mean, unit-variance normalization over the last axis (no affine).
    pub fn layer_norm(&self, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let n = *x.shape().last().ok_or(TensorError::Rank {
            op: "layer_norm",
            expected: 1,
            shape: vec![],
        })?;
        let mut out = vec![0.0; x.numel()];
        let mut inv_std = Vec::with_capacity(x.numel() / n.max(1));
        for (r, row) in x.data().chunks(n).enumerate() {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (j, v) in row.iter().enumerate() {
                out[r * n + j] = (v - mean) * is;
            }
            inv_std.push(is);
        }
        Ok(self.unary(Op::LayerNorm { x: self.id, inv_std }, x.shape().to_vec(), out))
    }

    pub fn sum(&self) -> Var<'t> {
        let total = self.value().data().iter().sum();
        self.unary(Op::Sum { x: self.id }, vec![], vec![total])
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    fn reduce_axis(&self, axis: usize, scale: f64, name: &'static str) -> Result<Var<'t>> {
        let x = self.value();
        check_axis(name, x.shape(), axis)?;
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += x.data()[(o * len + k) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= scale);
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        Ok(self.unary(Op::SumAxis { x: self.id, axis, scale }, shape, out))
    }

    /// Sum over `axis`, which is removed from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(axis, 1.0, "sum_axis")
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        let len = self.shape().get(axis).copied().unwrap_or(1).max(1);
        self.reduce_axis(axis, 1.0 / len as f64, "mean_axis")
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("narrow", x.shape(), axis)?;
        let (outer, in_len, inner) = axis_split(x.shape(), axis);
        if start + len > in_len {
            return Err(TensorError::Index {
                op: "narrow",
                index: start + len,
                limit: in_len,
            });
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * in_len + start) * inner;
            data.extend_from_slice(&x.data()[from..from + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        Ok(self.unary(Op::Narrow { x: self.id, axis, start }, shape, data))
    }

    /// Diagonal of the trailing square matrices: `[..., n, n] -> [..., n]`.
    pub fn diagonal(&self) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        let n = match s {
            [.., a, b] if a == b => *a,
            _ => {
                return Err(TensorError::Contract(format!(
                    "diagonal: trailing axes of {s:?} are not square"
                )))
            }
        };
        let batch = x.numel() / (n * n).max(1);
        let mut data = Vec::with_capacity(batch * n);
        for t in 0..batch {
            for j in 0..n {
                data.push(x.data()[t * n * n + j * n + j]);
            }
        }
        let shape = s[..s.len() - 1].to_vec();
        Ok(self.unary(Op::Diagonal { x: self.id }, shape, data))
    }

    /// Sum of elementwise products, as a scalar.
    pub fn dot(&self, other: Var<'t>) -> Result<Var<'t>> {
        Ok(self.mul(other)?.sum())
    }
}
