//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a define-by-run tape: each op validates shapes, computes its
//! value eagerly, and records its inputs. `backward` walks the tape in
//! reverse, accumulating gradients in a single fixed order so reruns are
//! bit-identical. Ops that a graph cannot express cannot be constructed, so
//! "unsupported op" surfaces at construction time as a shape or argument
//! error rather than during backward.

use crate::kernels;
use crate::optim::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("masked cross entropy requires at least one masked position")]
    EmptyMask,
    #[error("{op}: index {index} out of range ({limit})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("{op}: expected at least one operand")]
    NoOperands { op: &'static str },
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf { param: Option<ParamId> },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    MatmulNt(Var, Var),
    Relu(Var),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var },
    SoftmaxRows(Var),
    CausalSoftmax(Var),
    Gather { table: Var, ids: Vec<u32> },
    SliceRows { x: Var, start: usize, len: usize },
    SliceCols { x: Var, start: usize, len: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Sum(Var),
    MaskedXent {
        logits: Var,
        targets: Vec<u32>,
        mask: Vec<bool>,
    },
}

struct Node<S> {
    op: Op,
    value: Tensor<S>,
    needs_grad: bool,
}

pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Graph<S> {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, op: Op, value: Tensor<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss w.r.t. `v`. `None` when the node
    /// does not require grad or was not reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Constant leaf; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(Op::Leaf { param: None }, t, false)
    }

    /// Free-standing differentiable leaf (inputs in tests, visual patches).
    pub fn input(&mut self, t: Tensor<S>, requires_grad: bool) -> Var {
        self.push(Op::Leaf { param: None }, t, requires_grad)
    }

    /// Leaf bound to a stored parameter. The current value is copied in;
    /// `apply_leaf_grads` routes the gradient back after `backward`.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        let value = store.value(id).clone();
        let rg = store.requires_grad(id);
        self.push(Op::Leaf { param: Some(id) }, value, rg)
    }

    fn shape_err(op: &'static str, detail: String) -> GraphError {
        GraphError::Shape { op, detail }
    }

    fn check_matrix(op: &'static str, t: &Tensor<S>) -> Result<(usize, usize), GraphError> {
        if t.shape().len() != 2 {
            return Err(Self::shape_err(op, format!("expected matrix, got {:?}", t.shape())));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Self::shape_err(
                "add",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let mut out = self.value(a).clone();
        for (o, x) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o = o.add(*x);
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), out, ng))
    }

    /// `[t,d] + [d]`, the bias-broadcast add.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        let (_, d) = Self::check_matrix("add_row", self.value(a))?;
        if self.value(b).shape() != [d] {
            return Err(Self::shape_err(
                "add_row",
                format!("row {:?} vs matrix {:?}", self.value(b).shape(), self.value(a).shape()),
            ));
        }
        let mut out = self.value(a).clone();
        let brow = self.value(b).data().to_vec();
        for r in 0..out.rows() {
            for (o, x) in out.row_mut(r).iter_mut().zip(brow.iter()) {
                *o = o.add(*x);
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::AddRow(a, b), out, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Self::shape_err(
                "mul",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let mut out = self.value(a).clone();
        for (o, x) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o = o.mul(*x);
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), out, ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let s = S::from_f64(c);
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            *o = o.mul(s);
        }
        let ng = self.needs(a);
        self.push(Op::Scale(a, c), out, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        let (m, k) = Self::check_matrix("matmul", self.value(a))?;
        let (k2, n) = Self::check_matrix("matmul", self.value(b))?;
        if k != k2 {
            return Err(Self::shape_err(
                "matmul",
                format!("inner dims {k} vs {k2}"),
            ));
        }
        let mut out = Tensor::zeros(&[m, n]);
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), out.data_mut(), m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul(a, b), out, ng))
    }

    /// `a · bᵀ` with `b` stored row-major `[n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        let (m, k) = Self::check_matrix("matmul_nt", self.value(a))?;
        let (n, k2) = Self::check_matrix("matmul_nt", self.value(b))?;
        if k != k2 {
            return Err(Self::shape_err(
                "matmul_nt",
                format!("inner dims {k} vs {k2}"),
            ));
        }
        let mut out = Tensor::zeros(&[m, n]);
        kernels::matmul_nt_acc(self.value(a).data(), self.value(b).data(), out.data_mut(), m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatmulNt(a, b), out, ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            *o = o.max(S::ZERO);
        }
        let ng = self.needs(a);
        self.push(Op::Relu(a), out, ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            *o = kernels::gelu(*o);
        }
        let ng = self.needs(a);
        self.push(Op::Gelu(a), out, ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, GraphError> {
        let (t, d) = Self::check_matrix("layer_norm", self.value(x))?;
        if self.value(gain).shape() != [d] || self.value(bias).shape() != [d] {
            return Err(Self::shape_err(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} for width {d}",
                    self.value(gain).shape(),
                    self.value(bias).shape()
                ),
            ));
        }
        let mut out = Tensor::zeros(&[t, d]);
        for r in 0..t {
            let mut row = vec![S::ZERO; d];
            kernels::layer_norm_row(
                self.value(x).row(r),
                self.value(gain).data(),
                self.value(bias).data(),
                kernels::LAYER_NORM_EPS,
                &mut row,
            );
            out.row_mut(r).copy_from_slice(&row);
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(Op::LayerNorm { x, gain, bias }, out, ng))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, GraphError> {
        let (t, c) = Self::check_matrix("softmax_rows", self.value(x))?;
        let mut out = self.value(x).clone();
        for r in 0..t {
            kernels::softmax_prefix(out.row_mut(r), c);
        }
        let ng = self.needs(x);
        Ok(self.push(Op::SoftmaxRows(x), out, ng))
    }

    /// Row-wise softmax of a square score matrix where row `i` is restricted
    /// to columns `0..=i`; masked-out entries are exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var, GraphError> {
        let (t, c) = Self::check_matrix("causal_softmax", self.value(x))?;
        if t != c {
            return Err(Self::shape_err(
                "causal_softmax",
                format!("expected square scores, got {t}x{c}"),
            ));
        }
        let mut out = self.value(x).clone();
        for r in 0..t {
            kernels::softmax_prefix(out.row_mut(r), r + 1);
        }
        let ng = self.needs(x);
        Ok(self.push(Op::CausalSoftmax(x), out, ng))
    }

    pub fn gather(&mut self, table: Var, ids: &[u32]) -> Result<Var, GraphError> {
        let (v, d) = Self::check_matrix("gather", self.value(table))?;
        for &id in ids {
            if id as usize >= v {
                return Err(GraphError::IndexOutOfRange {
                    op: "gather",
                    index: id as usize,
                    limit: v,
                });
            }
        }
        let mut out = Tensor::zeros(&[ids.len(), d]);
        for (r, &id) in ids.iter().enumerate() {
            let src = self.value(table).row(id as usize).to_vec();
            out.row_mut(r).copy_from_slice(&src);
        }
        let ng = self.needs(table);
        Ok(self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            out,
            ng,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, GraphError> {
        let (t, d) = Self::check_matrix("slice_rows", self.value(x))?;
        if start + len > t {
            return Err(GraphError::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                limit: t,
            });
        }
        let mut out = Tensor::zeros(&[len, d]);
        for r in 0..len {
            let src = self.value(x).row(start + r).to_vec();
            out.row_mut(r).copy_from_slice(&src);
        }
        let ng = self.needs(x);
        Ok(self.push(Op::SliceRows { x, start, len }, out, ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, GraphError> {
        let (t, d) = Self::check_matrix("slice_cols", self.value(x))?;
        if start + len > d {
            return Err(GraphError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                limit: d,
            });
        }
        let mut out = Tensor::zeros(&[t, len]);
        for r in 0..t {
            let src = &self.value(x).row(r)[start..start + len];
            let src = src.to_vec();
            out.row_mut(r).copy_from_slice(&src);
        }
        let ng = self.needs(x);
        Ok(self.push(Op::SliceCols { x, start, len }, out, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, GraphError> {
        if parts.is_empty() {
            return Err(GraphError::NoOperands { op: "concat_rows" });
        }
        let (_, d) = Self::check_matrix("concat_rows", self.value(parts[0]))?;
        let mut total = 0;
        for &p in parts {
            let (t, dp) = Self::check_matrix("concat_rows", self.value(p))?;
            if dp != d {
                return Err(Self::shape_err(
                    "concat_rows",
                    format!("widths {d} vs {dp}"),
                ));
            }
            total += t;
        }
        let mut out = Tensor::zeros(&[total, d]);
        let mut at = 0;
        for &p in parts {
            for r in 0..self.value(p).rows() {
                let src = self.value(p).row(r).to_vec();
                out.row_mut(at).copy_from_slice(&src);
                at += 1;
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::ConcatRows(parts.to_vec()), out, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, GraphError> {
        if parts.is_empty() {
            return Err(GraphError::NoOperands { op: "concat_cols" });
        }
        let (t, _) = Self::check_matrix("concat_cols", self.value(parts[0]))?;
        let mut width = 0;
        for &p in parts {
            let (tp, dp) = Self::check_matrix("concat_cols", self.value(p))?;
            if tp != t {
                return Err(Self::shape_err(
                    "concat_cols",
                    format!("heights {t} vs {tp}"),
                ));
            }
            width += dp;
        }
        let mut out = Tensor::zeros(&[t, width]);
        let mut at = 0;
        for &p in parts {
            let dp = self.value(p).cols();
            for r in 0..t {
                let src = self.value(p).row(r).to_vec();
                out.row_mut(r)[at..at + dp].copy_from_slice(&src);
            }
            at += dp;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out, ng))
    }

    /// Reduce everything to a single scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let mut acc = S::ZERO;
        for &v in self.value(a).data() {
            acc = acc.add(v);
        }
        let ng = self.needs(a);
        self.push(Op::Sum(a), Tensor::scalar(acc), ng)
    }

    /// Mean negative log-likelihood over the masked rows:
    /// `-(1/Σmask) Σ_{i: mask_i} log softmax(logits_i)[targets_i]`.
    ///
    /// Rows with `mask_i == false` contribute nothing and receive an exactly
    /// zero gradient.
    pub fn masked_xent(
        &mut self,
        logits: Var,
        targets: &[u32],
        mask: &[bool],
    ) -> Result<Var, GraphError> {
        let (t, v) = Self::check_matrix("masked_xent", self.value(logits))?;
        if targets.len() != t || mask.len() != t {
            return Err(Self::shape_err(
                "masked_xent",
                format!(
                    "logits rows {t}, targets {}, mask {}",
                    targets.len(),
                    mask.len()
                ),
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(GraphError::EmptyMask);
        }
        for (i, &tid) in targets.iter().enumerate() {
            if mask[i] && tid as usize >= v {
                return Err(GraphError::IndexOutOfRange {
                    op: "masked_xent",
                    index: tid as usize,
                    limit: v,
                });
            }
        }
        let mut nll = S::ZERO;
        let mut ls = vec![S::ZERO; v];
        for i in 0..t {
            if !mask[i] {
                continue;
            }
            kernels::log_softmax_row(self.value(logits).row(i), &mut ls);
            nll = nll.sub(ls[targets[i] as usize]);
        }
        let loss = nll.div(S::from_f64(count as f64));
        let ng = self.needs(logits);
        Ok(self.push(
            Op::MaskedXent {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
            Tensor::scalar(loss),
            ng,
        ))
    }

    /// Populate gradients for every reachable node that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<(), GraphError> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(GraphError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(S::ONE));

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn ensure<'a>(
        grads: &'a mut [Option<Tensor<S>>],
        nodes: &[Node<S>],
        v: Var,
    ) -> &'a mut Tensor<S> {
        grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape()))
    }

    fn propagate(&self, i: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let nodes = &self.nodes;
        match &nodes[i].op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                for &v in &[*a, *b] {
                    if self.needs(v) {
                        let gv = Self::ensure(grads, nodes, v);
                        for (o, x) in gv.data_mut().iter_mut().zip(g.data()) {
                            *o = o.add(*x);
                        }
                    }
                }
            }
            Op::AddRow(a, b) => {
                if self.needs(*a) {
                    let ga = Self::ensure(grads, nodes, *a);
                    for (o, x) in ga.data_mut().iter_mut().zip(g.data()) {
                        *o = o.add(*x);
                    }
                }
                if self.needs(*b) {
                    let gb = Self::ensure(grads, nodes, *b);
                    for r in 0..g.rows() {
                        for (o, x) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o = o.add(*x);
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bv = nodes[b.0].value.data();
                    let ga = Self::ensure(grads, nodes, *a);
                    for ((o, x), y) in ga.data_mut().iter_mut().zip(g.data()).zip(bv) {
                        *o = o.add(x.mul(*y));
                    }
                }
                if self.needs(*b) {
                    let av = nodes[a.0].value.data();
                    let gb = Self::ensure(grads, nodes, *b);
                    for ((o, x), y) in gb.data_mut().iter_mut().zip(g.data()).zip(av) {
                        *o = o.add(x.mul(*y));
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    let s = S::from_f64(*c);
                    let ga = Self::ensure(grads, nodes, *a);
                    for (o, x) in ga.data_mut().iter_mut().zip(g.data()) {
                        *o = o.add(x.mul(s));
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
                let n = nodes[b.0].value.cols();
                if self.needs(*a) {
                    let bv = nodes[b.0].value.data();
                    let ga = Self::ensure(grads, nodes, *a);
                    kernels::matmul_nt_acc(g.data(), bv, ga.data_mut(), m, n, k);
                }
                if self.needs(*b) {
                    let av = nodes[a.0].value.data();
                    let gb = Self::ensure(grads, nodes, *b);
                    kernels::matmul_tn_acc(av, g.data(), gb.data_mut(), m, k, n);
                }
            }
            Op::MatmulNt(a, b) => {
                let (m, k) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
                let n = nodes[b.0].value.rows();
                if self.needs(*a) {
                    let bv = nodes[b.0].value.data();
                    let ga = Self::ensure(grads, nodes, *a);
                    kernels::matmul_acc(g.data(), bv, ga.data_mut(), m, n, k);
                }
                if self.needs(*b) {
                    let av = nodes[a.0].value.data();
                    let gb = Self::ensure(grads, nodes, *b);
                    kernels::matmul_tn_acc(g.data(), av, gb.data_mut(), m, n, k);
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let av = nodes[a.0].value.data();
                    let ga = Self::ensure(grads, nodes, *a);
                    for ((o, x), v) in ga.data_mut().iter_mut().zip(g.data()).zip(av) {
                        if *v > S::ZERO {
                            *o = o.add(*x);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if self.needs(*a) {
                    let av = nodes[a.0].value.data();
                    let ga = Self::ensure(grads, nodes, *a);
                    for ((o, x), v) in ga.data_mut().iter_mut().zip(g.data()).zip(av) {
                        *o = o.add(x.mul(kernels::gelu_grad(*v)));
                    }
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                let xv = &nodes[x.0].value;
                let gv = &nodes[gain.0].value;
                let (t, d) = (xv.rows(), xv.cols());
                let inv_d = S::from_f64(1.0 / d as f64);
                let mut scratch = vec![S::ZERO; d];
                for r in 0..t {
                    let (mean, inv_std) = kernels::layer_norm_row(
                        xv.row(r),
                        gv.data(),
                        nodes[bias.0].value.data(),
                        kernels::LAYER_NORM_EPS,
                        &mut scratch,
                    );
                    let grow = g.row(r).to_vec();
                    let xhat: Vec<S> = xv
                        .row(r)
                        .iter()
                        .map(|&v| v.sub(mean).mul(inv_std))
                        .collect();
                    if self.needs(*gain) {
                        let gg = Self::ensure(grads, nodes, *gain);
                        for j in 0..d {
                            gg.data_mut()[j] = gg.data_mut()[j].add(grow[j].mul(xhat[j]));
                        }
                    }
                    if self.needs(*bias) {
                        let gb = Self::ensure(grads, nodes, *bias);
                        for j in 0..d {
                            gb.data_mut()[j] = gb.data_mut()[j].add(grow[j]);
                        }
                    }
                    if self.needs(*x) {
                        let mut s1 = S::ZERO;
                        let mut s2 = S::ZERO;
                        let gd: Vec<S> =
                            (0..d).map(|j| gv.data()[j].mul(grow[j])).collect();
                        for j in 0..d {
                            s1 = s1.add(gd[j]);
                            s2 = s2.add(gd[j].mul(xhat[j]));
                        }
                        s1 = s1.mul(inv_d);
                        s2 = s2.mul(inv_d);
                        let gx = Self::ensure(grads, nodes, *x);
                        let gxr = gx.row_mut(r);
                        for j in 0..d {
                            let delta = gd[j].sub(s1).sub(xhat[j].mul(s2)).mul(inv_std);
                            gxr[j] = gxr[j].add(delta);
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) | Op::CausalSoftmax(a) => {
                if self.needs(*a) {
                    let p = &nodes[i].value;
                    let (t, c) = (p.rows(), p.cols());
                    let causal = matches!(nodes[i].op, Op::CausalSoftmax(_));
                    let ga = Self::ensure(grads, nodes, *a);
                    for r in 0..t {
                        let width = if causal { r + 1 } else { c };
                        let prow = p.row(r);
                        let grow = g.row(r);
                        let mut dotgp = S::ZERO;
                        for j in 0..width {
                            dotgp = dotgp.add(grow[j].mul(prow[j]));
                        }
                        let gar = ga.row_mut(r);
                        for j in 0..width {
                            gar[j] = gar[j].add(prow[j].mul(grow[j].sub(dotgp)));
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if self.needs(*table) {
                    let gt = Self::ensure(grads, nodes, *table);
                    for (r, &id) in ids.iter().enumerate() {
                        let grow = g.row(r);
                        let trow = gt.row_mut(id as usize);
                        for (o, x) in trow.iter_mut().zip(grow) {
                            *o = o.add(*x);
                        }
                    }
                }
            }
            Op::SliceRows { x, start, len } => {
                if self.needs(*x) {
                    let gx = Self::ensure(grads, nodes, *x);
                    for r in 0..*len {
                        let grow = g.row(r);
                        let xr = gx.row_mut(start + r);
                        for (o, v) in xr.iter_mut().zip(grow) {
                            *o = o.add(*v);
                        }
                    }
                }
            }
            Op::SliceCols { x, start, len } => {
                if self.needs(*x) {
                    let gx = Self::ensure(grads, nodes, *x);
                    for r in 0..g.rows() {
                        let grow = g.row(r);
                        let xr = gx.row_mut(r);
                        for j in 0..*len {
                            xr[start + j] = xr[start + j].add(grow[j]);
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let rows = nodes[p.0].value.rows();
                    if self.needs(p) {
                        let gp = Self::ensure(grads, nodes, p);
                        for r in 0..rows {
                            let grow = g.row(at + r);
                            for (o, v) in gp.row_mut(r).iter_mut().zip(grow) {
                                *o = o.add(*v);
                            }
                        }
                    }
                    at += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for &p in parts {
                    let cols = nodes[p.0].value.cols();
                    if self.needs(p) {
                        let gp = Self::ensure(grads, nodes, p);
                        for r in 0..g.rows() {
                            let grow = &g.row(r)[at..at + cols];
                            let prow = gp.row_mut(r);
                            for (o, v) in prow.iter_mut().zip(grow) {
                                *o = o.add(*v);
                            }
                        }
                    }
                    at += cols;
                }
            }
            Op::Sum(a) => {
                if self.needs(*a) {
                    let s = g.scalar_value();
                    let ga = Self::ensure(grads, nodes, *a);
                    for o in ga.data_mut() {
                        *o = o.add(s);
                    }
                }
            }
            Op::MaskedXent {
                logits,
                targets,
                mask,
            } => {
                if self.needs(*logits) {
                    let lv = &nodes[logits.0].value;
                    let (t, v) = (lv.rows(), lv.cols());
                    let count = mask.iter().filter(|&&m| m).count();
                    let scale = g.scalar_value().div(S::from_f64(count as f64));
                    let gl = Self::ensure(grads, nodes, *logits);
                    let mut ls = vec![S::ZERO; v];
                    for r in 0..t {
                        if !mask[r] {
                            continue;
                        }
                        kernels::log_softmax_row(lv.row(r), &mut ls);
                        let grow = gl.row_mut(r);
                        for j in 0..v {
                            let mut p = ls[j].exp();
                            if j == targets[r] as usize {
                                p = p.sub(S::ONE);
                            }
                            grow[j] = grow[j].add(p.mul(scale));
                        }
                    }
                }
            }
        }
    }

    /// Accumulate gradients of parameter leaves into the store.
    pub fn apply_leaf_grads(&self, store: &mut ParamStore<S>) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(id) } = node.op {
                if let Some(g) = self.grads.get(i).and_then(|g| g.as_ref()) {
                    store.accumulate_grad(id, g);
                }
            }
        }
    }
}
