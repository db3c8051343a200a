//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every operation on a [`Tape`] evaluates eagerly and appends a node holding
//! its value and the indices of its inputs. Nodes are only ever appended after
//! their inputs, so walking the node list backwards visits each node after all
//! of its consumers and is a valid reverse topological order.
//!
//! Elementwise binary operations broadcast their right operand over leading
//! axes only: the right shape must be a suffix of the left shape.

use std::sync::atomic::{AtomicU64, Ordering};

use super::params::{ParamGrads, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Exp(usize),
    Log(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Elu(usize),
    ClampMin(usize, f64),
    SoftmaxRows(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Conv1d { x: usize, w: usize, padding: usize },
    Transpose(usize),
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    TriSolveLower { l: usize, b: usize },
    Take { a: usize, index: Vec<Option<usize>> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Elu(_) => "elu",
            Op::ClampMin(..) => "clamp_min",
            Op::SoftmaxRows(_) => "softmax_row",
            Op::Concat { .. } => "concat",
            Op::Conv1d { .. } => "conv1d",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "reduce_sum",
            Op::Mean(_) => "reduce_mean",
            Op::TriSolveLower { .. } => "triangular_solve_lower",
            Op::Take { .. } => "take",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Counters collected while recording.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TapeDiagnostics {
    /// Softmax rows with no unmasked column; they evaluate to all zeros.
    pub empty_softmax_rows: usize,
    /// Elements raised to the floor by `clamp_min`.
    pub clamped_values: usize,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    params: Vec<(usize, ParamId)>,
    kink_inputs: Vec<f64>,
    diagnostics: TapeDiagnostics,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: Vec::new(),
            kink_inputs: Vec::new(),
            diagnostics: TapeDiagnostics::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn diagnostics(&self) -> TapeDiagnostics {
        self.diagnostics
    }

    /// Inputs of every kinked activation (relu, leaky relu) in recording order.
    pub fn kink_inputs(&self) -> &[f64] {
        &self.kink_inputs
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.idx(v)].value
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// A differentiable leaf.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// A differentiable leaf whose gradient is routed to `id` by [`Tape::backward`].
    pub fn param(&mut self, id: ParamId, value: Tensor) -> Var {
        let v = self.push_leaf(value, true);
        self.params.push((v.index, id));
        v
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> usize {
        assert!(
            v.tape == self.id && v.index < self.nodes.len(),
            "variable recorded on a different tape"
        );
        v.index
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let value = self.val(ia).matmul(self.val(ib))?;
        self.push(Op::MatMul(ia, ib), value, &[ia, ib])
    }

    fn check_broadcast(&self, op: &'static str, ia: usize, ib: usize) -> Result<()> {
        let (sa, sb) = (self.val(ia).shape(), self.val(ib).shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(op, format!("{sa:?} with {sb:?}")));
        }
        Ok(())
    }

    fn broadcast_binary(
        &mut self,
        a: Var,
        b: Var,
        op: fn(usize, usize) -> Op,
        name: &'static str,
        f: fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        self.check_broadcast(name, ia, ib)?;
        let (va, vb) = (self.val(ia), self.val(ib));
        let period = vb.len().max(1);
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(k, &x)| f(x, vb.data()[k % period]))
            .collect();
        let value = Tensor::new(va.shape(), data)?;
        self.push(op(ia, ib), value, &[ia, ib])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(a, b, Op::Add, "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(a, b, Op::Sub, "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(a, b, Op::Mul, "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ia = self.idx(a);
        let value = self.val(ia).map(|x| x * factor);
        self.push(Op::Scale(ia, factor), value, &[ia])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a);
        let value = self.val(ia).map(f64::exp);
        self.push(Op::Exp(ia), value, &[ia])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a);
        let value = self.val(ia).map(f64::ln);
        self.push(Op::Log(ia), value, &[ia])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a);
        self.kink_inputs.extend_from_slice(self.nodes[ia].value.data());
        let value = self.val(ia).map(|x| x.max(0.0));
        self.push(Op::Relu(ia), value, &[ia])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let ia = self.idx(a);
        self.kink_inputs.extend_from_slice(self.nodes[ia].value.data());
        let value = self
            .val(ia)
            .map(|x| if x > 0.0 { x } else { slope * x });
        self.push(Op::LeakyRelu(ia, slope), value, &[ia])
    }

    /// ELU with unit scale: `x` for `x > 0`, `exp(x) - 1` otherwise.
    pub fn elu(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a);
        let value = self.val(ia).map(elu);
        self.push(Op::Elu(ia), value, &[ia])
    }

    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        let ia = self.idx(a);
        let clamped = self.val(ia).data().iter().filter(|&&x| x < floor).count();
        self.diagnostics.clamped_values += clamped;
        let value = self.val(ia).map(|x| x.max(floor));
        self.push(Op::ClampMin(ia, floor), value, &[ia])
    }

    /// Row-wise softmax of a matrix over the columns where `mask` is true.
    ///
    /// Masked-out columns get weight zero; a row without any unmasked
    /// column is all zeros and counted in [`TapeDiagnostics`].
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let ia = self.idx(a);
        let (rows, cols) = self.val(ia).dims2("softmax_row")?;
        if let Some(m) = mask {
            if m.len() != cols {
                return Err(Error::shape(
                    "softmax_row",
                    format!("mask of {} for {cols} columns", m.len()),
                ));
            }
        }
        let keep = |j: usize| mask.is_none_or(|m| m[j]);
        let x = self.val(ia).data();
        let mut out = vec![0.0; rows * cols];
        let mut empty = 0;
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let max = (0..cols)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                empty += 1;
                continue;
            }
            let o = &mut out[r * cols..(r + 1) * cols];
            let mut total = 0.0;
            for j in (0..cols).filter(|&j| keep(j)) {
                o[j] = (row[j] - max).exp();
                total += o[j];
            }
            for v in o.iter_mut() {
                *v /= total;
            }
        }
        self.diagnostics.empty_softmax_rows += empty;
        let value = Tensor::new(&[rows, cols], out)?;
        self.push(Op::SoftmaxRows(ia), value, &[ia])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&v| self.idx(v)).collect();
        let first = self
            .val(*idx.first().ok_or_else(|| Error::shape("concat", "no inputs"))?)
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {first:?}")));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &i in &idx {
            let s = self.val(i).shape();
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{first:?} with {s:?}")));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &i in &idx {
                let v = self.val(i);
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(&out_shape, data)?;
        self.push(Op::Concat { inputs: idx.clone(), axis }, value, &idx)
    }

    /// Multi-channel 1-D convolution (cross-correlation) along the last axis.
    ///
    /// `x` is `[c_in, rows, len]`, `w` is `[c_out, c_in, width]`; the result is
    /// `[c_out, rows, len + 2 * padding - width + 1]` with zero padding.
    pub fn conv1d(&mut self, x: Var, w: Var, padding: usize) -> Result<Var> {
        let (ix, iw) = (self.idx(x), self.idx(w));
        let (xs, ws) = (self.val(ix).shape(), self.val(iw).shape());
        let (&[c_in, rows, len], &[c_out, w_in, width]) = (xs, ws) else {
            return Err(Error::shape("conv1d", format!("{xs:?} with kernel {ws:?}")));
        };
        if w_in != c_in || len + 2 * padding < width {
            return Err(Error::shape("conv1d", format!("{xs:?} with kernel {ws:?}")));
        }
        let out_len = len + 2 * padding - width + 1;
        let (xv, wv) = (self.val(ix).data(), self.val(iw).data());
        let mut out = vec![0.0; c_out * rows * out_len];
        for o in 0..c_out {
            for i in 0..c_in {
                for k in 0..width {
                    let wk = wv[(o * c_in + i) * width + k];
                    if wk == 0.0 {
                        continue;
                    }
                    for r in 0..rows {
                        let src = &xv[(i * rows + r) * len..(i * rows + r + 1) * len];
                        let dst = &mut out[(o * rows + r) * out_len..(o * rows + r + 1) * out_len];
                        for (l, d) in dst.iter_mut().enumerate() {
                            let p = l + k;
                            if p >= padding && p - padding < len {
                                *d += wk * src[p - padding];
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[c_out, rows, out_len], out)?;
        self.push(Op::Conv1d { x: ix, w: iw, padding }, value, &[ix, iw])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a);
        let value = self.val(ia).transpose()?;
        self.push(Op::Transpose(ia), value, &[ia])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.idx(a);
        let value = self.val(ia).clone().reshaped(shape)?;
        self.push(Op::Reshape(ia), value, &[ia])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a);
        let value = Tensor::scalar(self.val(ia).data().iter().sum());
        self.push(Op::Sum(ia), value, &[ia])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a);
        let n = self.val(ia).len().max(1) as f64;
        let value = Tensor::scalar(self.val(ia).data().iter().sum::<f64>() / n);
        self.push(Op::Mean(ia), value, &[ia])
    }

    /// Solves `L z = b` for a batch of lower-triangular systems.
    ///
    /// `l` is `[batch, d, d]` (entries above the diagonal are ignored), `b` is
    /// `[batch, d]`.
    pub fn triangular_solve_lower(&mut self, l: Var, b: Var) -> Result<Var> {
        let (il, ib) = (self.idx(l), self.idx(b));
        let (ls, bs) = (self.val(il).shape(), self.val(ib).shape());
        let (&[batch, d, d2], &[bb, bd]) = (ls, bs) else {
            return Err(Error::shape("triangular_solve_lower", format!("{ls:?} with {bs:?}")));
        };
        if d != d2 || bb != batch || bd != d {
            return Err(Error::shape("triangular_solve_lower", format!("{ls:?} with {bs:?}")));
        }
        let (lv, bv) = (self.val(il).data(), self.val(ib).data());
        let mut z = vec![0.0; batch * d];
        for n in 0..batch {
            forward_substitute(&lv[n * d * d..(n + 1) * d * d], &bv[n * d..(n + 1) * d], &mut z[n * d..(n + 1) * d], d);
        }
        let value = Tensor::new(&[batch, d], z)?;
        self.push(Op::TriSolveLower { l: il, b: ib }, value, &[il, ib])
    }

    /// Gathers `out[k] = a[index[k]]` (zero for `None`) into a tensor of `shape`.
    pub fn take(&mut self, a: Var, index: Vec<Option<usize>>, shape: &[usize]) -> Result<Var> {
        let ia = self.idx(a);
        let n = self.val(ia).len();
        if index.iter().flatten().any(|&k| k >= n) {
            return Err(Error::shape("take", format!("index out of range for {n} elements")));
        }
        let src = self.val(ia).data();
        let data = index.iter().map(|k| k.map_or(0.0, |k| src[k])).collect();
        let value = Tensor::new(shape, data)?;
        self.push(Op::Take { a: ia, index }, value, &[ia])
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.value(a).dims2("slice_cols")?;
        if start > end || end > cols {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {cols}")));
        }
        let width = end - start;
        let index = (0..rows * width)
            .map(|k| Some((k / width) * cols + start + k % width))
            .collect();
        self.take(a, index, &[rows, width])
    }

    /// Sub-tensor at `i` along the leading axis.
    pub fn select0(&mut self, a: Var, i: usize) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        if shape.is_empty() || i >= shape[0] {
            return Err(Error::shape("select0", format!("index {i} of {shape:?}")));
        }
        let inner: usize = shape[1..].iter().product();
        let index = (i * inner..(i + 1) * inner).map(Some).collect();
        self.take(a, index, &shape[1..])
    }

    /// Stacks equally shaped values along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let mut lifted = Vec::with_capacity(parts.len());
        for &p in parts {
            let mut shape = vec![1];
            shape.extend_from_slice(self.value(p).shape());
            lifted.push(self.reshape(p, &shape)?);
        }
        self.concat(&lifted, 0)
    }

    /// Reverse sweep from a scalar `loss`; returns adjoints of every leaf.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        if loss.tape != self.id || loss.index >= self.nodes.len() {
            return Err(Error::DetachedLoss);
        }
        if self.nodes[loss.index].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss has shape {:?}", self.nodes[loss.index].value.shape()),
            ));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[loss.index] = Some(Tensor::full(self.nodes[loss.index].value.shape(), 1.0));
        for i in (0..=loss.index).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.backprop_node(node, &g, &mut adj)?;
        }
        Ok(Gradients {
            tape: self.id,
            adj,
            params: self.params.clone(),
        })
    }

    /// Accumulates the gradient of `loss` into the slots of `store`.
    ///
    /// Slots are added to, not overwritten: two calls without
    /// [`ParamStore::zero_grad`] in between double the gradient.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        store.accumulate(&grads.param_grads(store.len()))
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                if self.nodes[*a].requires_grad {
                    accumulate(adj, *a, g.matmul(&vb.transpose()?)?);
                }
                if self.nodes[*b].requires_grad {
                    accumulate(adj, *b, va.transpose()?.matmul(g)?);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                if self.nodes[*a].requires_grad {
                    accumulate(adj, *a, g.clone());
                }
                if self.nodes[*b].requires_grad {
                    let mut gb = reduce_leading(g, self.val(*b).shape());
                    if matches!(node.op, Op::Sub(..)) {
                        gb = gb.map(|v| -v);
                    }
                    accumulate(adj, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                let period = vb.len().max(1);
                if self.nodes[*a].requires_grad {
                    let ga = Tensor::from_fn(va.shape(), |k| g.data()[k] * vb.data()[k % period]);
                    accumulate(adj, *a, ga);
                }
                if self.nodes[*b].requires_grad {
                    let prod = Tensor::from_fn(va.shape(), |k| g.data()[k] * va.data()[k]);
                    accumulate(adj, *b, reduce_leading(&prod, vb.shape()));
                }
            }
            Op::Scale(a, c) => accumulate(adj, *a, g.map(|v| v * c)),
            Op::Exp(a) => accumulate(adj, *a, zip_map(g, y, |g, y| g * y)),
            Op::Log(a) => accumulate(adj, *a, zip_map(g, self.val(*a), |g, x| g / x)),
            Op::Relu(a) => accumulate(
                adj,
                *a,
                zip_map(g, self.val(*a), |g, x| if x > 0.0 { g } else { 0.0 }),
            ),
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                accumulate(
                    adj,
                    *a,
                    zip_map(g, self.val(*a), |g, x| if x > 0.0 { g } else { s * g }),
                );
            }
            Op::Elu(a) => {
                let x = self.val(*a);
                let ga = Tensor::from_fn(x.shape(), |k| {
                    let (gk, xk) = (g.data()[k], x.data()[k]);
                    if xk > 0.0 {
                        gk
                    } else {
                        gk * (y.data()[k] + 1.0)
                    }
                });
                accumulate(adj, *a, ga);
            }
            Op::ClampMin(a, floor) => {
                let f = *floor;
                accumulate(
                    adj,
                    *a,
                    zip_map(g, self.val(*a), |g, x| if x >= f { g } else { 0.0 }),
                );
            }
            Op::SoftmaxRows(a) => {
                let (rows, cols) = y.dims2("softmax_row")?;
                let mut ga = vec![0.0; rows * cols];
                for r in 0..rows {
                    let yr = &y.data()[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..cols {
                        ga[r * cols + j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(adj, *a, Tensor::new(&[rows, cols], ga)?);
            }
            Op::Concat { inputs, axis } => {
                let shape = y.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &i in inputs {
                    let s = self.val(i).shape();
                    let chunk = s[*axis] * inner;
                    if self.nodes[i].requires_grad {
                        let mut part = Vec::with_capacity(self.val(i).len());
                        for o in 0..outer {
                            let start = o * total + offset;
                            part.extend_from_slice(&g.data()[start..start + chunk]);
                        }
                        accumulate(adj, i, Tensor::new(s, part)?);
                    }
                    offset += chunk;
                }
            }
            Op::Conv1d { x, w, padding } => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                let (&[c_in, rows, len], &[c_out, _, width]) = (xv.shape(), wv.shape()) else {
                    unreachable!("conv1d shapes validated on record");
                };
                let out_len = y.shape()[2];
                let mut gx = vec![0.0; xv.len()];
                let mut gw = vec![0.0; wv.len()];
                for o in 0..c_out {
                    for i in 0..c_in {
                        for k in 0..width {
                            let wk = wv.data()[(o * c_in + i) * width + k];
                            let mut acc = 0.0;
                            for r in 0..rows {
                                let go = &g.data()[(o * rows + r) * out_len..(o * rows + r + 1) * out_len];
                                let base = (i * rows + r) * len;
                                for (l, &gl) in go.iter().enumerate() {
                                    let p = l + k;
                                    if p >= *padding && p - padding < len {
                                        let src = base + p - padding;
                                        acc += xv.data()[src] * gl;
                                        gx[src] += wk * gl;
                                    }
                                }
                            }
                            gw[(o * c_in + i) * width + k] += acc;
                        }
                    }
                }
                if self.nodes[*x].requires_grad {
                    accumulate(adj, *x, Tensor::new(xv.shape(), gx)?);
                }
                if self.nodes[*w].requires_grad {
                    accumulate(adj, *w, Tensor::new(wv.shape(), gw)?);
                }
            }
            Op::Transpose(a) => accumulate(adj, *a, g.transpose()?),
            Op::Reshape(a) => accumulate(adj, *a, g.clone().reshaped(self.val(*a).shape())?),
            Op::Sum(a) => accumulate(adj, *a, Tensor::full(self.val(*a).shape(), g.item())),
            Op::Mean(a) => {
                let x = self.val(*a);
                let n = x.len().max(1) as f64;
                accumulate(adj, *a, Tensor::full(x.shape(), g.item() / n));
            }
            Op::TriSolveLower { l, b } => {
                let lv = self.val(*l);
                let &[batch, d, _] = lv.shape() else {
                    unreachable!("triangular solve shapes validated on record");
                };
                let mut gb = vec![0.0; batch * d];
                let mut gl = vec![0.0; batch * d * d];
                for n in 0..batch {
                    let lm = &lv.data()[n * d * d..(n + 1) * d * d];
                    let gz = &g.data()[n * d..(n + 1) * d];
                    let z = &y.data()[n * d..(n + 1) * d];
                    let bbar = &mut gb[n * d..(n + 1) * d];
                    back_substitute_transposed(lm, gz, bbar, d);
                    for i in 0..d {
                        for j in 0..=i {
                            gl[n * d * d + i * d + j] = -bbar[i] * z[j];
                        }
                    }
                }
                if self.nodes[*l].requires_grad {
                    accumulate(adj, *l, Tensor::new(lv.shape(), gl)?);
                }
                if self.nodes[*b].requires_grad {
                    accumulate(adj, *b, Tensor::new(self.val(*b).shape(), gb)?);
                }
            }
            Op::Take { a, index } => {
                let mut ga = Tensor::zeros(self.val(*a).shape());
                let buf = ga.data_mut();
                for (k, src) in index.iter().enumerate() {
                    if let Some(s) = src {
                        buf[*s] += g.data()[k];
                    }
                }
                accumulate(adj, *a, ga);
            }
        }
        Ok(())
    }
}

/// Leaf adjoints produced by [`Tape::gradients`].
#[derive(Clone, Debug)]
pub struct Gradients {
    tape: u64,
    adj: Vec<Option<Tensor>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    /// Gradient with respect to a leaf; `None` when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.adj.get(v.index).and_then(Option::as_ref)
    }

    /// Gradients of the parameters bound with [`Tape::param`], in store order.
    pub fn param_grads(&self, param_count: usize) -> ParamGrads {
        let mut out = ParamGrads::empty(param_count);
        for &(node, id) in &self.params {
            if let Some(g) = &self.adj[node] {
                match &mut out.slots[id.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}

pub(crate) fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn accumulate(adj: &mut [Option<Tensor>], i: usize, g: Tensor) {
    match &mut adj[i] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_fn(a.shape(), |k| f(a.data()[k], b.data()[k]))
}

fn reduce_leading(g: &Tensor, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut out = Tensor::zeros(shape);
    let buf = out.data_mut();
    for (k, &v) in g.data().iter().enumerate() {
        buf[k % n.max(1)] += v;
    }
    out
}

/// Solves `L z = b` for one dense row-major `d × d` lower-triangular `L`.
pub(crate) fn forward_substitute(l: &[f64], b: &[f64], z: &mut [f64], d: usize) {
    for i in 0..d {
        let mut s = b[i];
        for j in 0..i {
            s -= l[i * d + j] * z[j];
        }
        z[i] = s / l[i * d + i];
    }
}

/// Solves `Lᵀ x = c`.
fn back_substitute_transposed(l: &[f64], c: &[f64], x: &mut [f64], d: usize) {
    for i in (0..d).rev() {
        let mut s = c[i];
        for j in i + 1..d {
            s -= l[j * d + i] * x[j];
        }
        x[i] = s / l[i * d + i];
    }
}
