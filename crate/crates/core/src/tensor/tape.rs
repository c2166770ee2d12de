use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::kernels::{self, axis_split};
use super::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    ScaleBy(usize, usize),
    Min(usize, usize),
    RowSelect(usize, usize, Vec<bool>),
    Transpose(usize),
    Concat(Vec<usize>, usize),
    MaskedFill(usize, Vec<bool>),
    Slice { x: usize, axis: usize, start: usize },
    Sum(usize),
    Mean(usize),
    Softmax(usize, usize),
    Relu(usize),
    Sigmoid(usize),
    Softplus(usize),
    LayerNorm(usize, Vec<f64>),
    Gather(usize, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::ScaleBy(..) => "scale_by",
            Op::Min(..) => "elementwise_min",
            Op::RowSelect(..) => "row_select",
            Op::Transpose(..) => "transpose",
            Op::Concat(..) => "concat",
            Op::MaskedFill(..) => "masked_fill",
            Op::Slice { .. } => "slice",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Softmax(..) => "softmax",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::LayerNorm(..) => "layer_norm",
            Op::Gather(..) => "gather",
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed operations.
///
/// Every operand of a node was recorded before it, so a reverse sweep over
/// the node list is a valid topological order for backpropagation. A tape
/// is single-owner; concurrent evaluations each build their own.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    checked: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to trainable leaves.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, `None` if `v` is not a trainable leaf.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.idx).and_then(Option::take)
    }
}

impl Tape {
    /// New tape; finiteness checks follow `debug_assertions`.
    pub fn new() -> Self {
        Self::with_checked(cfg!(debug_assertions))
    }

    pub fn with_checked(checked: bool) -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            checked,
        }
    }

    pub fn is_checked(&self) -> bool {
        self.checked
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, t: impl Into<Arc<Tensor>>) -> Var {
        self.leaf(t.into(), true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: impl Into<Arc<Tensor>>) -> Var {
        self.leaf(t.into(), false)
    }

    fn leaf(&mut self, value: Arc<Tensor>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::DetachedTensor(v.idx));
        }
        Ok(v.idx)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.idx].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Tensor> {
        assert_eq!(v.tape, self.id, "variable from another tape");
        Arc::clone(&self.nodes[v.idx].value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op, operands: &[usize]) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        let needs_grad = operands.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Ok(Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn dims2(&self, i: usize) -> Result<(usize, usize)> {
        self.val(i).dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (m, k) = self.dims2(ia)?;
        let (k2, n) = self.dims2(ib)?;
        if k != k2 {
            return Err(Error::shape(format!("matmul {m}×{k} · {k2}×{n}")));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.val(ia).data(), self.val(ib).data(), &mut out, m, k, n);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(ia, ib), &[ia, ib])
    }

    fn same_shape(&self, ia: usize, ib: usize, what: &str) -> Result<()> {
        if self.val(ia).shape() != self.val(ib).shape() {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.val(ia).shape(),
                self.val(ib).shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(ia, ib, op.name())?;
        let data = self
            .val(ia)
            .data()
            .iter()
            .zip(self.val(ib).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.val(ia).shape().to_vec();
        self.push(Tensor::new(&shape, data)?, op, &[ia, ib])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a.idx, b.idx), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a.idx, b.idx), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a.idx, b.idx), |x, y| x * y)
    }

    /// Elementwise minimum. At ties the first argument is selected.
    pub fn elementwise_min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Min(a.idx, b.idx), |x, y| if x <= y { x } else { y })
    }

    /// Adds a `1×n` row to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (ix, ir) = (self.idx(x)?, self.idx(row)?);
        let (m, n) = self.dims2(ix)?;
        if self.val(ir).numel() != n {
            return Err(Error::shape(format!(
                "add_row: {m}×{n} with row of {:?}",
                self.val(ir).shape()
            )));
        }
        let r = self.val(ir).data();
        let data = self
            .val(ix)
            .data()
            .chunks(n)
            .flat_map(|xr| xr.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        self.push(Tensor::new(&[m, n], data)?, Op::AddRow(ix, ir), &[ix, ir])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let ix = self.idx(x)?;
        let t = self.val(ix).map(|v| v * c);
        self.push(t, Op::Scale(ix, c), &[ix])
    }

    /// Multiplies every element of `x` by the single element of `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let (ix, is) = (self.idx(x)?, self.idx(s)?);
        let c = self.val(is).item()?;
        let t = self.val(ix).map(|v| v * c);
        self.push(t, Op::ScaleBy(ix, is), &[ix, is])
    }

    /// Row `i` of the result is row `i` of `a` when `take_a[i]`, else of `b`.
    pub fn row_select(&mut self, a: Var, b: Var, take_a: Vec<bool>) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(ia, ib, "row_select")?;
        let (m, n) = self.dims2(ia)?;
        if take_a.len() != m {
            return Err(Error::LengthMismatch {
                expected: m,
                got: take_a.len(),
            });
        }
        let mut data = Vec::with_capacity(m * n);
        for (i, &ta) in take_a.iter().enumerate() {
            let src = if ta { self.val(ia) } else { self.val(ib) };
            data.extend_from_slice(src.row(i));
        }
        self.push(Tensor::new(&[m, n], data)?, Op::RowSelect(ia, ib, take_a), &[ia, ib])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let (m, n) = self.dims2(ix)?;
        let data = kernels::transpose(self.val(ix).data(), m, n);
        self.push(Tensor::new(&[n, m], data)?, Op::Transpose(ix), &[ix])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let idxs = parts
            .iter()
            .map(|&p| self.idx(p))
            .collect::<Result<Vec<_>>>()?;
        let first = idxs
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let base = self.val(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for &i in &idxs {
            let s = self.val(i).shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape(format!("concat {base:?} with {s:?}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &i in &idxs {
                let len = self.val(i).shape()[axis];
                let chunk = len * inner;
                data.extend_from_slice(&self.val(i).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        self.push(Tensor::new(&shape, data)?, Op::Concat(idxs.clone(), axis), &idxs)
    }

    /// Replaces elements where `mask` is true by `value`; those positions
    /// pass no gradient.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], value: f64) -> Result<Var> {
        let ix = self.idx(x)?;
        if mask.len() != self.val(ix).numel() {
            return Err(Error::LengthMismatch {
                expected: self.val(ix).numel(),
                got: mask.len(),
            });
        }
        let mut t = self.val(ix).clone();
        for (v, &m) in t.data_mut().iter_mut().zip(mask) {
            if m {
                *v = value;
            }
        }
        self.push(t, Op::MaskedFill(ix, mask.to_vec()), &[ix])
    }

    /// Contiguous range `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let shape = self.val(ix).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(Error::shape(format!(
                "slice {start}..{} of extent {}",
                start + len,
                shape[axis]
            )));
        }
        let (outer, full, inner) = axis_split(&shape, axis);
        let src = self.val(ix).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push(
            Tensor::new(&out_shape, data)?,
            Op::Slice { x: ix, axis, start },
            &[ix],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let s = self.val(ix).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(ix), &[ix])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let t = self.val(ix);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mean(ix), &[ix])
    }

    /// Softmax of every slice along `axis`, max-subtracted per slice.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let shape = self.val(ix).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let data = kernels::softmax(self.val(ix).data(), outer, len, inner);
        self.push(Tensor::new(&shape, data)?, Op::Softmax(ix, axis), &[ix])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let t = self.val(ix).map(|v| v.max(0.0));
        self.push(t, Op::Relu(ix), &[ix])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let t = self.val(ix).map(logistic);
        self.push(t, Op::Sigmoid(ix), &[ix])
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let t = self.val(ix).map(|v| v.max(0.0) + (-v.abs()).exp().ln_1p());
        self.push(t, Op::Softplus(ix), &[ix])
    }

    /// Normalizes each slice along the last axis to zero mean, unit variance.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let ix = self.idx(x)?;
        let t = self.val(ix);
        let n = *t.shape().last().unwrap_or(&1);
        let mut inv_std = Vec::with_capacity(t.numel() / n);
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks(n) {
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            out.extend(row.iter().map(|v| (v - mu) * is));
        }
        let shape = t.shape().to_vec();
        self.push(Tensor::new(&shape, out)?, Op::LayerNorm(ix, inv_std), &[ix])
    }

    /// `out[j] = x.flat[index[j]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        let src = self.val(ix).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::InvalidIndex(format!(
                "gather index {bad} into {} elements",
                src.len()
            )));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        self.push(Tensor::new(shape, data)?, Op::Gather(ix, index), &[ix])
    }

    /// Reverse sweep from a scalar `root`; returns gradients of every
    /// trainable leaf.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let ir = self.idx(root)?;
        if self.val(ir).numel() != 1 {
            return Err(Error::NotScalar(self.val(ir).shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; ir + 1];
        grads[ir] = Some(vec![1.0]);

        for i in (0..=ir).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads);
        }

        let mut out = Vec::with_capacity(ir + 1);
        for (i, g) in grads.into_iter().enumerate() {
            let node = &self.nodes[i];
            let is_trainable_leaf = matches!(node.op, Op::Leaf) && node.needs_grad;
            out.push(match (is_trainable_leaf, g) {
                (true, Some(g)) => Some(Tensor::new(node.value.shape(), g)?),
                (true, None) => Some(Tensor::zeros(node.value.shape())),
                _ => None,
            });
        }
        Ok(Gradients {
            tape: self.id,
            grads: out,
        })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], j: usize) -> &'g mut Vec<f64> {
        let n = self.nodes[j].value.numel();
        grads[j].get_or_insert_with(|| vec![0.0; n])
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[i].value;
        let needs = |j: usize| self.nodes[j].needs_grad;

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.val(*a).shape()[0], self.val(*a).shape()[1]);
                let n = self.val(*b).shape()[1];
                if needs(*a) {
                    let ga = self.acc(grads, *a);
                    kernels::matmul_a_bt_acc(g, self.val(*b).data(), ga, m, n, k);
                }
                if needs(*b) {
                    let gb = self.acc(grads, *b);
                    kernels::matmul_at_b_acc(self.val(*a).data(), g, gb, m, k, n);
                }
            }
            Op::Add(a, b) => {
                for (j, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if needs(j) {
                        add_scaled(self.acc(grads, j), g, sign);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (j, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if needs(j) {
                        add_scaled(self.acc(grads, j), g, sign);
                    }
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let bv = self.val(*b).data();
                    for ((o, &gi), &y) in self.acc(grads, *a).iter_mut().zip(g).zip(bv) {
                        *o += gi * y;
                    }
                }
                if needs(*b) {
                    let av = self.val(*a).data();
                    for ((o, &gi), &x) in self.acc(grads, *b).iter_mut().zip(g).zip(av) {
                        *o += gi * x;
                    }
                }
            }
            Op::AddRow(x, r) => {
                if needs(*x) {
                    add_scaled(self.acc(grads, *x), g, 1.0);
                }
                if needs(*r) {
                    let n = self.val(*r).numel();
                    let gr = self.acc(grads, *r);
                    for row in g.chunks(n) {
                        for (o, &v) in gr.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Scale(x, c) => {
                if needs(*x) {
                    add_scaled(self.acc(grads, *x), g, *c);
                }
            }
            Op::ScaleBy(x, s) => {
                let c = self.val(*s).data()[0];
                if needs(*x) {
                    add_scaled(self.acc(grads, *x), g, c);
                }
                if needs(*s) {
                    let d: f64 = g.iter().zip(self.val(*x).data()).map(|(a, b)| a * b).sum();
                    self.acc(grads, *s)[0] += d;
                }
            }
            Op::Min(a, b) => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                if needs(*a) {
                    let ga = self.acc(grads, *a);
                    for k in 0..g.len() {
                        if av[k] <= bv[k] {
                            ga[k] += g[k];
                        }
                    }
                }
                if needs(*b) {
                    let gb = self.acc(grads, *b);
                    for k in 0..g.len() {
                        if av[k] > bv[k] {
                            gb[k] += g[k];
                        }
                    }
                }
            }
            Op::RowSelect(a, b, take_a) => {
                let n = out.shape()[1];
                for (j, want) in [(*a, true), (*b, false)] {
                    if !needs(j) {
                        continue;
                    }
                    let gj = self.acc(grads, j);
                    for (r, &ta) in take_a.iter().enumerate() {
                        if ta == want {
                            for c in r * n..(r + 1) * n {
                                gj[c] += g[c];
                            }
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                if needs(*x) {
                    let (m, n) = (out.shape()[0], out.shape()[1]);
                    let gt = kernels::transpose(g, m, n);
                    add_scaled(self.acc(grads, *x), &gt, 1.0);
                }
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = axis_split(out.shape(), *axis);
                let total_chunk = out.shape()[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = self.val(p).shape()[*axis] * inner;
                    if needs(p) {
                        let gp = self.acc(grads, p);
                        for o in 0..outer {
                            let src = &g[o * total_chunk + offset..o * total_chunk + offset + len];
                            for (d, s) in gp[o * len..(o + 1) * len].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::MaskedFill(x, mask) => {
                if needs(*x) {
                    let gx = self.acc(grads, *x);
                    for k in 0..g.len() {
                        if !mask[k] {
                            gx[k] += g[k];
                        }
                    }
                }
            }
            Op::Slice { x, axis, start } => {
                if needs(*x) {
                    let full_shape = self.val(*x).shape();
                    let (outer, full, inner) = axis_split(full_shape, *axis);
                    let len = out.shape()[*axis];
                    let gx = self.acc(grads, *x);
                    for o in 0..outer {
                        let base = (o * full + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        for (d, s) in gx[base..base + len * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if needs(*x) {
                    for o in self.acc(grads, *x).iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                if needs(*x) {
                    let n = self.val(*x).numel() as f64;
                    for o in self.acc(grads, *x).iter_mut() {
                        *o += g[0] / n;
                    }
                }
            }
            Op::Softmax(x, axis) => {
                if needs(*x) {
                    let (outer, len, inner) = axis_split(out.shape(), *axis);
                    let y = out.data();
                    let gx = self.acc(grads, *x);
                    for o in 0..outer {
                        for c in 0..inner {
                            let idx = |t: usize| (o * len + t) * inner + c;
                            let dot: f64 = (0..len).map(|t| g[idx(t)] * y[idx(t)]).sum();
                            for t in 0..len {
                                gx[idx(t)] += y[idx(t)] * (g[idx(t)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if needs(*x) {
                    let xv = self.val(*x).data();
                    let gx = self.acc(grads, *x);
                    for k in 0..g.len() {
                        if xv[k] > 0.0 {
                            gx[k] += g[k];
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if needs(*x) {
                    let y = out.data();
                    let gx = self.acc(grads, *x);
                    for k in 0..g.len() {
                        gx[k] += g[k] * y[k] * (1.0 - y[k]);
                    }
                }
            }
            Op::Softplus(x) => {
                if needs(*x) {
                    let xv = self.val(*x).data();
                    let gx = self.acc(grads, *x);
                    for k in 0..g.len() {
                        gx[k] += g[k] * logistic(xv[k]);
                    }
                }
            }
            Op::LayerNorm(x, inv_std) => {
                if needs(*x) {
                    let n = *out.shape().last().unwrap_or(&1);
                    let y = out.data();
                    let gx = self.acc(grads, *x);
                    for (r, &is) in inv_std.iter().enumerate() {
                        let span = r * n..(r + 1) * n;
                        let (gr, yr) = (&g[span.clone()], &y[span.clone()]);
                        let mean_g = gr.iter().sum::<f64>() / n as f64;
                        let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for (k, d) in gx[span].iter_mut().enumerate() {
                            *d += is * (gr[k] - mean_g - yr[k] * mean_gy);
                        }
                    }
                }
            }
            Op::Gather(x, index) => {
                if needs(*x) {
                    let gx = self.acc(grads, *x);
                    for (&src, &gv) in index.iter().zip(g) {
                        gx[src] += gv;
                    }
                }
            }
        }
    }
}

fn add_scaled(dst: &mut [f64], src: &[f64], c: f64) {
    if c == 1.0 {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    } else {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += c * s;
        }
    }
}

pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::eye(2));
        let b = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.matmul(i2, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = tape.constant(t(&[1, 1], &[2.0]));
        let b = tape.constant(t(&[1, 1], &[7.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[14.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let x = tape.constant(t(&[2], &[0.0, 2f64.ln()]));
        let y = tape.softmax(x, 0).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 1.0 / 3.0).abs() < 1e-12 && (d[1] - 2.0 / 3.0).abs() < 1e-12);

        let x = tape.constant(t(&[2], &[1000.0, 1000.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_bad_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(
            tape.softmax(x, 2),
            Err(Error::InvalidAxis { axis: 2, rank: 2 })
        ));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let root = tape.sum(sq).unwrap();
        let grads = tape.backward(root).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn foreign_var_is_detached() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.param(Tensor::zeros(&[1]));
        let y = b.param(Tensor::zeros(&[1]));
        assert!(matches!(b.add(x, y), Err(Error::DetachedTensor(_))));
        assert!(matches!(b.backward(x), Err(Error::DetachedTensor(_))));
    }

    #[test]
    fn min_tie_routes_to_first_argument() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[2], &[1.0, 5.0]));
        let b = tape.param(t(&[2], &[1.0, 2.0]));
        let m = tape.elementwise_min(a, b).unwrap();
        let root = tape.sum(m).unwrap();
        let grads = tape.backward(root).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 0.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn checked_mode_flags_overflow() {
        let mut tape = Tape::with_checked(true);
        let x = tape.constant(t(&[1], &[f64::MAX]));
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite("scale"))));

        let mut tape = Tape::with_checked(false);
        let x = tape.constant(t(&[1], &[f64::MAX]));
        assert!(tape.scale(x, 10.0).is_ok());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(t(&[1], &[2.0]));
        let p = tape.param(t(&[1], &[3.0]));
        let y = tape.mul(c, p).unwrap();
        let grads = tape.backward(y).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[2.0]);
    }
}
