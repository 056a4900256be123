use std::collections::BTreeMap;

use crate::kernels;
use crate::{NdError, Real, Result, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Identifier of a trainable parameter registered with [`Graph::param`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Kernel tag for one recorded operation.
///
/// Shape contracts:
/// - `MatMul`: `a [.., m, k]` times `b [k, n]` (shared) or `b [.., k, n]`
///   (same leading dims as `a`). With `trans_b`, `b` is stored as `[.., n, k]`.
/// - `Add`/`Mul`: `b` has the shape of `a` or of a suffix of it (broadcast
///   over the leading axes). `Sub` requires equal shapes.
/// - `Softmax`/`LogSoftmax`/`LayerNorm` act on the last axis; `LayerNorm`
///   takes `(x, gamma, beta)` with `gamma, beta` of shape `[last]`.
/// - `Pick`: `x [b, c]` and one class index per row, output `[b]`.
/// - `Embedding`: table `[v, d]` and indices, output `[len, d]`.
/// - `PairwiseDiff`: `x [n]` to `[n, n]` with `out[i, j] = x[i] - x[j]`.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    MatMul { trans_b: bool },
    Add,
    Sub,
    Mul,
    Scale(f64),
    Relu,
    Gelu,
    Square,
    Log,
    Softmax,
    LogSoftmax,
    LayerNorm { eps: f64 },
    Sum,
    Mean,
    SumAxis(usize),
    MeanAxis(usize),
    Reshape(Vec<usize>),
    Permute(Vec<usize>),
    Concat(usize),
    Slice { axis: usize, start: usize, len: usize },
    Embedding(Vec<usize>),
    Pick(Vec<usize>),
    PairwiseDiff,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Relu => "relu",
            Op::Gelu => "gelu",
            Op::Square => "square",
            Op::Log => "log",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumAxis(_) => "sum_axis",
            Op::MeanAxis(_) => "mean_axis",
            Op::Reshape(_) => "reshape",
            Op::Permute(_) => "permute",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::Embedding(_) => "embedding",
            Op::Pick(_) => "pick",
            Op::PairwiseDiff => "pairwise_diff",
        }
    }
}

struct Node<F> {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor<F>,
    /// Extra forward locals (layer norm keeps normalized input and 1/std).
    saved: Vec<F>,
    param: Option<ParamId>,
    needs_grad: bool,
}

/// Append-only computation tape. Nodes are stored in creation order, which
/// is a topological order by construction.
pub struct Graph<F: Real = f32> {
    nodes: Vec<Node<F>>,
}

/// Gradients of a scalar loss with respect to every registered parameter.
#[derive(Clone, Debug)]
pub struct Gradients<F: Real = f32> {
    grads: BTreeMap<ParamId, Tensor<F>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<F>)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl<F: Real> FromIterator<(ParamId, Tensor<F>)> for Gradients<F> {
    fn from_iter<I: IntoIterator<Item = (ParamId, Tensor<F>)>>(iter: I) -> Self {
        Gradients {
            grads: iter.into_iter().collect(),
        }
    }
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(kernel: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(NdError::shape(kernel, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn suffix_broadcast(kernel: &'static str, a: &[usize], b: &[usize]) -> Result<usize> {
    if b.len() > a.len() || a[a.len() - b.len()..] != *b {
        return Err(NdError::shape(
            kernel,
            format!("{b:?} does not broadcast onto {a:?}"),
        ));
    }
    Ok(b.iter().product())
}

fn last_axis(kernel: &'static str, shape: &[usize]) -> Result<usize> {
    match shape.last() {
        Some(&n) if n > 0 => Ok(n),
        _ => Err(NdError::shape(kernel, format!("needs a non-empty last axis, got {shape:?}"))),
    }
}

fn check_axis(kernel: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(NdError::shape(kernel, format!("axis {axis} out of range for {shape:?}")));
    }
    Ok(())
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    fn push_leaf(&mut self, value: Tensor<F>, param: Option<ParamId>) -> Result<Var> {
        if !value.is_finite() {
            return Err(NdError::NonFinite { kernel: "leaf" });
        }
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            needs_grad: param.is_some(),
            value,
            saved: Vec::new(),
            param,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Result<Var> {
        self.push_leaf(value, None)
    }

    /// Records a trainable parameter; its gradient is reported by `backward`.
    pub fn param(&mut self, id: ParamId, value: Tensor<F>) -> Result<Var> {
        self.push_leaf(value, Some(id))
    }

    /// Runs kernel `op` on `inputs` and appends the result to the tape.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let kernel = op.name();
        let (value, saved) = self.forward(&op, inputs)?;
        if !value.is_finite() {
            return Err(NdError::NonFinite { kernel });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            op,
            inputs: inputs.to_vec(),
            value,
            saved,
            param: None,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn arity(op: &Op, inputs: &[Var]) -> Result<()> {
        let want = match op {
            Op::Leaf => 0,
            Op::MatMul { .. } | Op::Add | Op::Sub | Op::Mul => 2,
            Op::LayerNorm { .. } => 3,
            Op::Concat(_) => {
                if inputs.is_empty() {
                    return Err(NdError::shape("concat", "needs at least one input"));
                }
                return Ok(());
            }
            _ => 1,
        };
        if inputs.len() != want {
            return Err(NdError::shape(
                op.name(),
                format!("expects {want} inputs, got {}", inputs.len()),
            ));
        }
        Ok(())
    }

    fn forward(&self, op: &Op, inputs: &[Var]) -> Result<(Tensor<F>, Vec<F>)> {
        Self::arity(op, inputs)?;
        let kernel = op.name();
        let x = |i: usize| &self.nodes[inputs[i].0].value;
        let out = match op {
            Op::Leaf => return Err(NdError::shape("leaf", "use constant() or param()")),
            Op::MatMul { trans_b } => {
                let (a, b) = (x(0), x(1));
                let (rows, m, k, n, shared) = matmul_dims(a.shape(), b.shape(), *trans_b)?;
                let bt;
                let bdata = if *trans_b {
                    let batch = if shared { 1 } else { rows / m };
                    bt = kernels::transpose(b.data(), batch, n, k);
                    &bt[..]
                } else {
                    b.data()
                };
                let mut c = vec![F::zero(); rows * n];
                kernels::matmul(a.data(), bdata, &mut c, rows, m, k, n, shared);
                let mut shape = a.shape().to_vec();
                *shape.last_mut().unwrap() = n;
                Tensor::new(shape, c)?
            }
            Op::Add | Op::Mul => {
                let (a, b) = (x(0), x(1));
                let blen = suffix_broadcast(kernel, a.shape(), b.shape())?;
                let is_add = matches!(op, Op::Add);
                let mut data = a.data().to_vec();
                if blen > 0 {
                    for chunk in data.chunks_mut(blen) {
                        for (d, &bv) in chunk.iter_mut().zip(b.data()) {
                            if is_add {
                                *d += bv;
                            } else {
                                *d *= bv;
                            }
                        }
                    }
                }
                Tensor::new(a.shape().to_vec(), data)?
            }
            Op::Sub => {
                let (a, b) = (x(0), x(1));
                same_shape(kernel, a.shape(), b.shape())?;
                let data = a.data().iter().zip(b.data()).map(|(&p, &q)| p - q).collect();
                Tensor::new(a.shape().to_vec(), data)?
            }
            Op::Scale(s) => {
                let s = F::of(*s);
                x(0).map(|v| v * s)
            }
            Op::Relu => x(0).map(|v| v.max(F::zero())),
            Op::Gelu => x(0).map(kernels::gelu),
            Op::Square => x(0).map(|v| v * v),
            Op::Log => x(0).map(|v| v.ln()),
            Op::Softmax | Op::LogSoftmax => {
                let a = x(0);
                let n = last_axis(kernel, a.shape())?;
                let mut out = vec![F::zero(); a.numel()];
                if matches!(op, Op::Softmax) {
                    kernels::softmax_rows(a.data(), &mut out, n);
                } else {
                    kernels::log_softmax_rows(a.data(), &mut out, n);
                }
                Tensor::new(a.shape().to_vec(), out)?
            }
            Op::LayerNorm { eps } => {
                let (a, gamma, beta) = (x(0), x(1), x(2));
                let d = last_axis(kernel, a.shape())?;
                same_shape(kernel, gamma.shape(), &[d])?;
                same_shape(kernel, beta.shape(), &[d])?;
                let rows = a.numel() / d;
                let eps = F::of(*eps);
                let inv_d = F::one() / F::of(d as f64);
                let mut out = vec![F::zero(); a.numel()];
                // saved = [xhat (rows*d), rstd (rows)]
                let mut saved = vec![F::zero(); a.numel() + rows];
                let (xhat, rstd) = saved.split_at_mut(a.numel());
                for r in 0..rows {
                    let row = &a.data()[r * d..(r + 1) * d];
                    let mean = row.iter().copied().sum::<F>() * inv_d;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
                    let rs = F::one() / (var + eps).sqrt();
                    rstd[r] = rs;
                    for j in 0..d {
                        let h = (row[j] - mean) * rs;
                        xhat[r * d + j] = h;
                        out[r * d + j] = h * gamma.data()[j] + beta.data()[j];
                    }
                }
                return Ok((Tensor::new(a.shape().to_vec(), out)?, saved));
            }
            Op::Sum | Op::Mean => {
                let a = x(0);
                let total: F = a.data().iter().copied().sum();
                if matches!(op, Op::Mean) {
                    if a.numel() == 0 {
                        return Err(NdError::shape(kernel, "mean of an empty tensor"));
                    }
                    Tensor::scalar(total / F::of(a.numel() as f64))
                } else {
                    Tensor::scalar(total)
                }
            }
            Op::SumAxis(axis) | Op::MeanAxis(axis) => {
                let a = x(0);
                check_axis(kernel, a.shape(), *axis)?;
                let mut data = kernels::sum_axis(a.data(), a.shape(), *axis);
                if matches!(op, Op::MeanAxis(_)) {
                    let len = a.shape()[*axis];
                    if len == 0 {
                        return Err(NdError::shape(kernel, "mean over an empty axis"));
                    }
                    let inv = F::one() / F::of(len as f64);
                    data.iter_mut().for_each(|v| *v *= inv);
                }
                let mut shape = a.shape().to_vec();
                shape.remove(*axis);
                Tensor::new(shape, data)?
            }
            Op::Reshape(shape) => x(0).clone().reshape(shape)?,
            Op::Permute(perm) => {
                let a = x(0);
                let mut sorted = perm.clone();
                sorted.sort_unstable();
                if sorted != (0..a.rank()).collect::<Vec<_>>() {
                    return Err(NdError::shape(
                        kernel,
                        format!("{perm:?} is not a permutation of rank {}", a.rank()),
                    ));
                }
                let (data, shape) = kernels::permute(a.data(), a.shape(), perm);
                Tensor::new(shape, data)?
            }
            Op::Concat(axis) => {
                let first = x(0).shape().to_vec();
                check_axis(kernel, &first, *axis)?;
                let mut total = 0;
                for i in 0..inputs.len() {
                    let s = x(i).shape();
                    let compatible = s.len() == first.len()
                        && s.iter()
                            .zip(&first)
                            .enumerate()
                            .all(|(d, (p, q))| d == *axis || p == q);
                    if !compatible {
                        return Err(NdError::shape(kernel, format!("{first:?} vs {s:?}")));
                    }
                    total += s[*axis];
                }
                let (outer, _, inner) = kernels::split_axis(&first, *axis);
                let mut data = Vec::with_capacity(outer * total * inner);
                for o in 0..outer {
                    for i in 0..inputs.len() {
                        let t = x(i);
                        let block = t.shape()[*axis] * inner;
                        data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
                    }
                }
                let mut shape = first;
                shape[*axis] = total;
                Tensor::new(shape, data)?
            }
            Op::Slice { axis, start, len } => {
                let a = x(0);
                check_axis(kernel, a.shape(), *axis)?;
                if start + len > a.shape()[*axis] {
                    return Err(NdError::shape(
                        kernel,
                        format!("range {start}..{} exceeds axis {axis} of {:?}", start + len, a.shape()),
                    ));
                }
                let (outer, alen, inner) = kernels::split_axis(a.shape(), *axis);
                let mut data = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let base = (o * alen + start) * inner;
                    data.extend_from_slice(&a.data()[base..base + len * inner]);
                }
                let mut shape = a.shape().to_vec();
                shape[*axis] = *len;
                Tensor::new(shape, data)?
            }
            Op::Embedding(indices) => {
                let table = x(0);
                if table.rank() != 2 {
                    return Err(NdError::shape(kernel, format!("table must be 2-D, got {:?}", table.shape())));
                }
                let (v, d) = (table.shape()[0], table.shape()[1]);
                let mut data = Vec::with_capacity(indices.len() * d);
                for &i in indices {
                    if i >= v {
                        return Err(NdError::Index { kernel, index: i, size: v });
                    }
                    data.extend_from_slice(&table.data()[i * d..(i + 1) * d]);
                }
                Tensor::new(vec![indices.len(), d], data)?
            }
            Op::Pick(indices) => {
                let a = x(0);
                if a.rank() != 2 || a.shape()[0] != indices.len() {
                    return Err(NdError::shape(
                        kernel,
                        format!("{:?} with {} indices", a.shape(), indices.len()),
                    ));
                }
                let c = a.shape()[1];
                let mut data = Vec::with_capacity(indices.len());
                for (r, &i) in indices.iter().enumerate() {
                    if i >= c {
                        return Err(NdError::Index { kernel, index: i, size: c });
                    }
                    data.push(a.data()[r * c + i]);
                }
                Tensor::from_vec(data)
            }
            Op::PairwiseDiff => {
                let a = x(0);
                if a.rank() != 1 {
                    return Err(NdError::shape(kernel, format!("needs rank 1, got {:?}", a.shape())));
                }
                let n = a.numel();
                let v = a.data();
                let mut data = Vec::with_capacity(n * n);
                for i in 0..n {
                    for j in 0..n {
                        data.push(v[i] - v[j]);
                    }
                }
                Tensor::new(vec![n, n], data)?
            }
        };
        Ok((out, Vec::new()))
    }

    /// Reverse pass from a scalar `loss`. Every registered parameter gets a
    /// gradient; parameters the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 || !root.value.shape().is_empty() {
            return Err(NdError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(F::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let contributions = self.local_grads(node, &g)?;
            for (input, contribution) in node.inputs.iter().zip(contributions) {
                let Some(c) = contribution else { continue };
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&c),
                    slot @ None => *slot = Some(c),
                }
            }
            // keep the gradient of parameter leaves, drop interior ones
            grads[idx] = None;
        }

        let mut out = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            let Some(id) = node.param else { continue };
            let g = match grads.get_mut(idx).and_then(Option::take) {
                Some(g) => g,
                None => Tensor::zeros(node.value.shape()),
            };
            if !g.is_finite() {
                return Err(NdError::NonFinite { kernel: "backward" });
            }
            match out.get_mut(&id) {
                Some(acc) => Tensor::add_assign(acc, &g),
                None => {
                    out.insert(id, g);
                }
            }
        }
        Ok(Gradients { grads: out })
    }

    /// Vector-Jacobian products of one node, one entry per input.
    fn local_grads(&self, node: &Node<F>, g: &Tensor<F>) -> Result<Vec<Option<Tensor<F>>>> {
        let input = |i: usize| &self.nodes[node.inputs[i].0].value;
        let wants = |i: usize| self.nodes[node.inputs[i].0].needs_grad;
        let y = &node.value;
        let gd = g.data();
        let unary = |data: Vec<F>| -> Result<Vec<Option<Tensor<F>>>> {
            Ok(vec![Some(Tensor::new(input(0).shape().to_vec(), data)?)])
        };
        match &node.op {
            Op::Leaf => Ok(Vec::new()),
            Op::MatMul { trans_b } => {
                let (a, b) = (input(0), input(1));
                let (rows, m, k, n, shared) = matmul_dims(a.shape(), b.shape(), *trans_b)?;
                let batch = rows / m.max(1);
                let mut ga = None;
                let mut gb = None;
                if wants(0) {
                    // dA = dC @ B^T, with B^T [.., n, k]
                    let bt_owned;
                    let bt: &[F] = if *trans_b {
                        b.data()
                    } else {
                        bt_owned = kernels::transpose(b.data(), if shared { 1 } else { batch }, k, n);
                        &bt_owned
                    };
                    let mut da = vec![F::zero(); rows * k];
                    kernels::matmul(gd, bt, &mut da, rows, m, n, k, shared);
                    ga = Some(Tensor::new(a.shape().to_vec(), da)?);
                }
                if wants(1) {
                    if shared {
                        // dB = A^T @ dC over all rows: [k, rows] x [rows, n]
                        let at = kernels::transpose(a.data(), 1, rows, k);
                        let mut db = vec![F::zero(); k * n];
                        kernels::matmul(&at, gd, &mut db, k, k, rows, n, true);
                        if *trans_b {
                            db = kernels::transpose(&db, 1, k, n);
                        }
                        gb = Some(Tensor::new(b.shape().to_vec(), db)?);
                    } else {
                        // per batch: dB_i = A_i^T dC_i  ([k, m] x [m, n])
                        let at = kernels::transpose(a.data(), batch, m, k);
                        let mut db = vec![F::zero(); batch * k * n];
                        kernels::matmul(&at, gd, &mut db, batch * k, k, m, n, false);
                        if *trans_b {
                            db = kernels::transpose(&db, batch, k, n);
                        }
                        gb = Some(Tensor::new(b.shape().to_vec(), db)?);
                    }
                }
                Ok(vec![ga, gb])
            }
            Op::Add | Op::Mul => {
                let (a, b) = (input(0), input(1));
                let blen = b.numel();
                let reps = if blen == 0 { 0 } else { a.numel() / blen };
                let is_add = matches!(node.op, Op::Add);
                let ga = if wants(0) {
                    let data = if is_add {
                        gd.to_vec()
                    } else {
                        gd.iter()
                            .enumerate()
                            .map(|(i, &gv)| gv * b.data()[i % blen])
                            .collect()
                    };
                    Some(Tensor::new(a.shape().to_vec(), data)?)
                } else {
                    None
                };
                let gb = if wants(1) {
                    let mut acc = vec![F::zero(); blen];
                    for r in 0..reps {
                        for j in 0..blen {
                            let gv = gd[r * blen + j];
                            acc[j] += if is_add { gv } else { gv * a.data()[r * blen + j] };
                        }
                    }
                    Some(Tensor::new(b.shape().to_vec(), acc)?)
                } else {
                    None
                };
                Ok(vec![ga, gb])
            }
            Op::Sub => Ok(vec![
                Some(g.clone()),
                Some(g.map(|v| -v)),
            ]),
            Op::Scale(s) => {
                let s = F::of(*s);
                Ok(vec![Some(g.map(|v| v * s))])
            }
            Op::Relu => unary(
                gd.iter()
                    .zip(input(0).data())
                    .map(|(&gv, &xv)| if xv > F::zero() { gv } else { F::zero() })
                    .collect(),
            ),
            Op::Gelu => unary(
                gd.iter()
                    .zip(input(0).data())
                    .map(|(&gv, &xv)| gv * kernels::gelu_grad(xv))
                    .collect(),
            ),
            Op::Square => unary(
                gd.iter()
                    .zip(input(0).data())
                    .map(|(&gv, &xv)| gv * F::of(2.0) * xv)
                    .collect(),
            ),
            Op::Log => unary(
                gd.iter()
                    .zip(input(0).data())
                    .map(|(&gv, &xv)| gv / xv)
                    .collect(),
            ),
            Op::Softmax => {
                let n = *y.shape().last().unwrap();
                let mut dx = vec![F::zero(); y.numel()];
                for ((drow, yrow), grow) in dx.chunks_mut(n).zip(y.data().chunks(n)).zip(gd.chunks(n)) {
                    let dot: F = yrow.iter().zip(grow).map(|(&p, &q)| p * q).sum();
                    for j in 0..n {
                        drow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                unary(dx)
            }
            Op::LogSoftmax => {
                let n = *y.shape().last().unwrap();
                let mut dx = vec![F::zero(); y.numel()];
                for ((drow, yrow), grow) in dx.chunks_mut(n).zip(y.data().chunks(n)).zip(gd.chunks(n)) {
                    let total: F = grow.iter().copied().sum();
                    for j in 0..n {
                        drow[j] = grow[j] - yrow[j].exp() * total;
                    }
                }
                unary(dx)
            }
            Op::LayerNorm { .. } => {
                let (a, gamma) = (input(0), input(1));
                let d = *a.shape().last().unwrap();
                let rows = a.numel() / d;
                let (xhat, rstd) = node.saved.split_at(a.numel());
                let inv_d = F::one() / F::of(d as f64);
                let mut dx = vec![F::zero(); a.numel()];
                let mut dgamma = vec![F::zero(); d];
                let mut dbeta = vec![F::zero(); d];
                let mut dxhat = vec![F::zero(); d];
                for r in 0..rows {
                    let grow = &gd[r * d..(r + 1) * d];
                    let hrow = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = F::zero();
                    let mut mean_dh_h = F::zero();
                    for j in 0..d {
                        dgamma[j] += grow[j] * hrow[j];
                        dbeta[j] += grow[j];
                        dxhat[j] = grow[j] * gamma.data()[j];
                        mean_dh += dxhat[j];
                        mean_dh_h += dxhat[j] * hrow[j];
                    }
                    mean_dh *= inv_d;
                    mean_dh_h *= inv_d;
                    for j in 0..d {
                        dx[r * d + j] = rstd[r] * (dxhat[j] - mean_dh - hrow[j] * mean_dh_h);
                    }
                }
                Ok(vec![
                    Some(Tensor::new(a.shape().to_vec(), dx)?),
                    Some(Tensor::new(vec![d], dgamma)?),
                    Some(Tensor::new(vec![d], dbeta)?),
                ])
            }
            Op::Sum | Op::Mean => {
                let a = input(0);
                let mut v = g.item();
                if matches!(node.op, Op::Mean) {
                    v /= F::of(a.numel() as f64);
                }
                Ok(vec![Some(Tensor::full(a.shape(), v))])
            }
            Op::SumAxis(axis) | Op::MeanAxis(axis) => {
                let a = input(0);
                let scale = if matches!(node.op, Op::MeanAxis(_)) {
                    F::one() / F::of(a.shape()[*axis] as f64)
                } else {
                    F::one()
                };
                unary(kernels::expand_axis(gd, a.shape(), *axis, scale))
            }
            Op::Reshape(_) => unary(gd.to_vec()),
            Op::Permute(perm) => {
                let inv = kernels::inverse_permutation(perm);
                let (data, _) = kernels::permute(gd, y.shape(), &inv);
                unary(data)
            }
            Op::Concat(axis) => {
                let (outer, total, inner) = kernels::split_axis(y.shape(), *axis);
                let mut offset = 0;
                let mut out = Vec::with_capacity(node.inputs.len());
                for i in 0..node.inputs.len() {
                    let t = input(i);
                    let len = t.shape()[*axis];
                    if wants(i) {
                        let mut data = Vec::with_capacity(t.numel());
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            data.extend_from_slice(&gd[base..base + len * inner]);
                        }
                        out.push(Some(Tensor::new(t.shape().to_vec(), data)?));
                    } else {
                        out.push(None);
                    }
                    offset += len;
                }
                Ok(out)
            }
            Op::Slice { axis, start, len } => {
                let a = input(0);
                let (outer, alen, inner) = kernels::split_axis(a.shape(), *axis);
                let mut data = vec![F::zero(); a.numel()];
                for o in 0..outer {
                    let dst = (o * alen + start) * inner;
                    let src = o * len * inner;
                    data[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                unary(data)
            }
            Op::Embedding(indices) => {
                let table = input(0);
                let d = table.shape()[1];
                let mut data = vec![F::zero(); table.numel()];
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..d {
                        data[i * d + j] += gd[r * d + j];
                    }
                }
                unary(data)
            }
            Op::Pick(indices) => {
                let a = input(0);
                let c = a.shape()[1];
                let mut data = vec![F::zero(); a.numel()];
                for (r, &i) in indices.iter().enumerate() {
                    data[r * c + i] = gd[r];
                }
                unary(data)
            }
            Op::PairwiseDiff => {
                let n = input(0).numel();
                let mut data = vec![F::zero(); n];
                for i in 0..n {
                    let mut acc = F::zero();
                    for j in 0..n {
                        acc += gd[i * n + j];
                        acc -= gd[j * n + i];
                    }
                    data[i] = acc;
                }
                unary(data)
            }
        }
    }
}

/// Resolves `(rows, m, k, n, b_shared)` for a matmul, where `rows` is the
/// number of rows of `a` flattened over its leading axes.
fn matmul_dims(a: &[usize], b: &[usize], trans_b: bool) -> Result<(usize, usize, usize, usize, bool)> {
    let bad = || NdError::shape("matmul", format!("{a:?} x {b:?}{}", if trans_b { "^T" } else { "" }));
    if a.len() < 2 || b.len() < 2 {
        return Err(bad());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (bk, n) = if trans_b {
        (b[b.len() - 1], b[b.len() - 2])
    } else {
        (b[b.len() - 2], b[b.len() - 1])
    };
    if bk != k {
        return Err(bad());
    }
    let rows: usize = a[..a.len() - 1].iter().product();
    let shared = b.len() == 2;
    if !shared && (b.len() != a.len() || a[..a.len() - 2] != b[..b.len() - 2]) {
        return Err(bad());
    }
    Ok((rows, m, k, n, shared))
}

/// Convenience wrappers around [`Graph::apply`].
impl<F: Real> Graph<F> {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul { trans_b: false }, &[a, b])
    }

    /// `a @ b^T` over the trailing two axes.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul { trans_b: true }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.apply(Op::Scale(s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Relu, &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Gelu, &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Square, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Log, &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Softmax, &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::LogSoftmax, &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.apply(Op::LayerNorm { eps }, &[x, gamma, beta])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sum, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Mean, &[a])
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Op::SumAxis(axis), &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Op::MeanAxis(axis), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Op::Reshape(shape.to_vec()), &[a])
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        self.apply(Op::Permute(perm.to_vec()), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(Op::Concat(axis), parts)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.apply(Op::Slice { axis, start, len }, &[a])
    }

    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        self.apply(Op::Embedding(indices.to_vec()), &[table])
    }

    pub fn pick(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        self.apply(Op::Pick(indices.to_vec()), &[a])
    }

    pub fn pairwise_diff(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::PairwiseDiff, &[a])
    }

    /// `max(x, 0)`; alias of [`Graph::relu`] used for hinge terms.
    pub fn max_zero(&mut self, a: Var) -> Result<Var> {
        self.relu(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[3], &[0.0, 0.0, 0.0])).unwrap();
        let s = g.softmax(a).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.5])).unwrap();
        let r = g.relu(a).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.5]);
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(ParamId(0), t(&[3], &[0.3, -1.0, 2.0])).unwrap();
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut g = Graph::<f64>::new();
        let x = g.param(ParamId(7), t(&[2], &[1.0, 2.0])).unwrap();
        let sq = g.square(x).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(ParamId(7)).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(ParamId(0), t(&[2], &[1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(x), Err(NdError::NonScalarLoss(_))));
    }

    #[test]
    fn unreachable_params_get_zero_gradients() {
        let mut g = Graph::<f64>::new();
        let x = g.param(ParamId(0), t(&[2], &[1.0, 2.0])).unwrap();
        let _unused = g.param(ParamId(1), t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(ParamId(1)).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn reused_node_accumulates() {
        // loss = sum(x * x) via mul of the same node
        let mut g = Graph::<f64>::new();
        let x = g.param(ParamId(0), t(&[2], &[3.0, -1.0])).unwrap();
        let p = g.mul(x, x).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().data(), &[6.0, -2.0]);
    }

    #[test]
    fn shape_errors_name_the_kernel() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
        assert!(err.to_string().contains("[2, 3]"), "{err}");
        let c = g.constant(Tensor::zeros(&[4])).unwrap();
        assert!(g.sub(a, c).unwrap_err().to_string().contains("sub"));
    }

    #[test]
    fn log_of_zero_surfaces_as_error() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::from_vec(vec![1.0, 0.0])).unwrap();
        assert_eq!(g.log(a).unwrap_err(), NdError::NonFinite { kernel: "log" });
    }

    #[test]
    fn pick_index_out_of_range() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(g.pick(a, &[0, 3]), Err(NdError::Index { .. })));
    }

    #[test]
    fn pairwise_diff_values() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[3], &[1.0, 4.0, 2.0])).unwrap();
        let d = g.pairwise_diff(a).unwrap();
        assert_eq!(g.value(d).data(), &[0.0, -3.0, -1.0, 3.0, 0.0, 2.0, 1.0, -2.0, 0.0]);
    }
}
