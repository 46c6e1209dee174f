//! Define-by-run operation tape.
//!
//! Every primitive appends a node holding its forward value; `backward`
//! walks the nodes in reverse and accumulates vector-Jacobian products into
//! the leaves. Gradient buffers are only allocated along paths that reach a
//! differentiable leaf, so freezing the model weights (binding them as
//! constants) skips the weight-gradient GEMMs entirely during attacks.

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Index of a node on a [`Tape`]. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AddKind {
    Same,
    /// rhs shape equals the trailing dims of lhs; broadcast over leading dims.
    Trailing,
    /// rhs is `[K, 1]` with `K == lhs.shape[0]`; one addend per leading slice.
    Batch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MulKind {
    Same,
    /// rhs is a single element.
    Scalar,
    /// rhs is `[batch]` or `[batch, 1]`; scales each leading slice of lhs.
    Batch,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Bmm { a: NodeId, b: NodeId },
    TransposeLast { a: NodeId },
    Conv2d { input: NodeId, weight: NodeId, stride: usize },
    Deconv2d { input: NodeId, weight: NodeId, stride: usize },
    Add { a: NodeId, b: NodeId, kind: AddKind },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId, kind: MulKind },
    AddScalar { a: NodeId },
    MulScalar { a: NodeId, c: f64 },
    Sigmoid { a: NodeId },
    Tanh { a: NodeId },
    Exp { a: NodeId },
    Log { a: NodeId },
    Square { a: NodeId },
    Neg { a: NodeId },
    Clamp { a: NodeId, lo: f64, hi: f64 },
    Sum { a: NodeId },
    Slice { a: NodeId, axis: usize, start: usize, len: usize },
    Concat { axis: usize, parts: Vec<NodeId> },
    Reshape { a: NodeId },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Ordered record of primitive operations forming a DAG; inputs always
/// precede the operations that consume them.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Record a differentiable leaf; `backward` reports a gradient for it.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(Op::Leaf, t.clone(), true)
    }

    /// Record a non-differentiable input. No gradient buffer is ever
    /// allocated for it or for subgraphs that depend only on constants.
    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        self.push(Op::Leaf, t.clone(), false)
    }

    pub fn constant_owned(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t, false)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn shape_of(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    // ── Linear algebra ──────────────────────────────────────────────

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            m,
            k,
            n,
        );
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Matmul { a, b }, Tensor::new(vec![m, n], data)?, rg))
    }

    /// Batched matmul: `[B,m,k] x [B,k,n] -> [B,m,n]`
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut data = Vec::with_capacity(bt * m * n);
        for t in 0..bt {
            let da = &self.nodes[a.0].value.data()[t * m * k..(t + 1) * m * k];
            let db = &self.nodes[b.0].value.data()[t * k * n..(t + 1) * k * n];
            data.extend_from_slice(&kernels::matmul(da, db, m, k, n));
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Bmm { a, b }, Tensor::new(vec![bt, m, n], data)?, rg))
    }

    /// Swap the last two axes of a rank-3 tensor: `[B,m,n] -> [B,n,m]`
    pub fn transpose_last(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape_of(a);
        if sa.len() != 3 {
            return Err(Error::shape("transpose_last", sa, &[]));
        }
        let (bt, m, n) = (sa[0], sa[1], sa[2]);
        let src = self.nodes[a.0].value.data();
        let mut data = vec![0.0; src.len()];
        for t in 0..bt {
            for i in 0..m {
                for j in 0..n {
                    data[t * m * n + j * m + i] = src[t * m * n + i * n + j];
                }
            }
        }
        let rg = self.requires(a);
        Ok(self.push(
            Op::TransposeLast { a },
            Tensor::new(vec![bt, n, m], data)?,
            rg,
        ))
    }

    /// Valid convolution, no padding: input `[B,Ci,H,W]`, weight
    /// `[Co,Ci,kh,kw]`, output `[B,Co,(H-kh)/s+1,(W-kw)/s+1]`.
    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, stride: usize) -> Result<NodeId> {
        let (si, sw) = (self.shape_of(input), self.shape_of(weight));
        if si.len() != 4 || sw.len() != 4 || si[1] != sw[1] || stride == 0 {
            return Err(Error::shape("conv2d", si, sw));
        }
        let (b, ci, h, w) = (si[0], si[1], si[2], si[3]);
        let (co, kh, kw) = (sw[0], sw[2], sw[3]);
        let ho = kernels::conv_out_extent(h, kh, stride);
        let wo = kernels::conv_out_extent(w, kw, stride);
        let (ho, wo) = match (ho, wo) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => return Err(Error::shape("conv2d", si, sw)),
        };
        let data = kernels::conv2d(
            self.nodes[input.0].value.data(),
            self.nodes[weight.0].value.data(),
            b,
            ci,
            h,
            w,
            co,
            kh,
            kw,
            stride,
        );
        let rg = self.requires(input) || self.requires(weight);
        Ok(self.push(
            Op::Conv2d { input, weight, stride },
            Tensor::new(vec![b, co, ho, wo], data)?,
            rg,
        ))
    }

    /// Transposed convolution (adjoint of [`Tape::conv2d`]): input
    /// `[B,Ci,H,W]`, weight `[Ci,Co,kh,kw]`, output
    /// `[B,Co,(H-1)*s+kh,(W-1)*s+kw]`.
    pub fn deconv2d(&mut self, input: NodeId, weight: NodeId, stride: usize) -> Result<NodeId> {
        let (si, sw) = (self.shape_of(input), self.shape_of(weight));
        if si.len() != 4 || sw.len() != 4 || si[1] != sw[0] || stride == 0 {
            return Err(Error::shape("deconv2d", si, sw));
        }
        let (b, ci, h, w) = (si[0], si[1], si[2], si[3]);
        let (co, kh, kw) = (sw[1], sw[2], sw[3]);
        let data = kernels::deconv2d(
            self.nodes[input.0].value.data(),
            self.nodes[weight.0].value.data(),
            b,
            ci,
            h,
            w,
            co,
            kh,
            kw,
            stride,
        );
        let (ho, wo) = ((h - 1) * stride + kh, (w - 1) * stride + kw);
        let rg = self.requires(input) || self.requires(weight);
        Ok(self.push(
            Op::Deconv2d { input, weight, stride },
            Tensor::new(vec![b, co, ho, wo], data)?,
            rg,
        ))
    }

    // ── Elementwise binary ──────────────────────────────────────────

    /// Elementwise sum. Also accepts a rhs whose shape equals the trailing
    /// dims of the lhs (bias broadcast over leading dims) or `[K, 1]` with
    /// `K == lhs.shape[0]` (one addend per leading slice).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        let kind = if sa == sb {
            AddKind::Same
        } else if sa.len() > sb.len() && &sa[sa.len() - sb.len()..] == sb {
            AddKind::Trailing
        } else if sa.len() >= 2 && sb == [sa[0], 1] {
            AddKind::Batch
        } else {
            return Err(Error::shape("add", sa, sb));
        };
        let da = self.nodes[a.0].value.data();
        let db = self.nodes[b.0].value.data();
        let mut data = da.to_vec();
        match kind {
            AddKind::Same => {
                for (x, y) in data.iter_mut().zip(db) {
                    *x += y;
                }
            }
            AddKind::Trailing => {
                for chunk in data.chunks_mut(db.len()) {
                    for (x, y) in chunk.iter_mut().zip(db) {
                        *x += y;
                    }
                }
            }
            AddKind::Batch => {
                let slice_len = data.len() / db.len();
                for (chunk, y) in data.chunks_mut(slice_len).zip(db) {
                    for x in chunk.iter_mut() {
                        *x += y;
                    }
                }
            }
        }
        let shape = sa.to_vec();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Add { a, b, kind }, Tensor::new(shape, data)?, rg))
    }

    /// Elementwise difference of equally shaped tensors.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa != sb {
            return Err(Error::shape("sub", sa, sb));
        }
        let da = self.nodes[a.0].value.data();
        let db = self.nodes[b.0].value.data();
        let data = da.iter().zip(db).map(|(x, y)| x - y).collect();
        let shape = sa.to_vec();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Sub { a, b }, Tensor::new(shape, data)?, rg))
    }

    /// Elementwise product. The rhs may also be a single element (scales
    /// everything) or `[batch]`/`[batch,1]` (scales each leading slice).
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        let kind = if sa == sb {
            MulKind::Same
        } else if sb.iter().product::<usize>() == 1 {
            MulKind::Scalar
        } else if !sa.is_empty()
            && sb.iter().product::<usize>() == sa[0]
            && (sb.len() == 1 || (sb.len() == 2 && sb[1] == 1))
        {
            MulKind::Batch
        } else {
            return Err(Error::shape("mul", sa, sb));
        };
        let da = self.nodes[a.0].value.data();
        let db = self.nodes[b.0].value.data();
        let mut data = da.to_vec();
        match kind {
            MulKind::Same => {
                for (x, y) in data.iter_mut().zip(db) {
                    *x *= y;
                }
            }
            MulKind::Scalar => {
                let s = db[0];
                for x in data.iter_mut() {
                    *x *= s;
                }
            }
            MulKind::Batch => {
                let slice_len = data.len() / db.len();
                for (chunk, s) in data.chunks_mut(slice_len).zip(db) {
                    for x in chunk.iter_mut() {
                        *x *= s;
                    }
                }
            }
        }
        let shape = sa.to_vec();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Mul { a, b, kind }, Tensor::new(shape, data)?, rg))
    }

    // ── Elementwise unary ───────────────────────────────────────────

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let data = self.nodes[a.0].value.data().iter().map(|x| x + c).collect();
        let shape = self.shape_of(a).to_vec();
        let rg = self.requires(a);
        self.push(Op::AddScalar { a }, Tensor { shape, data }, rg)
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let data = self.nodes[a.0].value.data().iter().map(|x| x * c).collect();
        let shape = self.shape_of(a).to_vec();
        let rg = self.requires(a);
        self.push(Op::MulScalar { a, c }, Tensor { shape, data }, rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, kernels::sigmoid, |id| Op::Sigmoid { a: id })
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.tanh(), |id| Op::Tanh { a: id })
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.exp(), |id| Op::Exp { a: id })
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.ln(), |id| Op::Log { a: id })
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x * x, |id| Op::Square { a: id })
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| -x, |id| Op::Neg { a: id })
    }

    /// Clamp with pass-through gradient inside `[lo, hi]`, zero outside.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(a, |x| x.clamp(lo, hi), |id| Op::Clamp { a: id, lo, hi })
    }

    fn unary(
        &mut self,
        a: NodeId,
        f: impl Fn(f64) -> f64,
        op: impl FnOnce(NodeId) -> Op,
    ) -> NodeId {
        let data = self.nodes[a.0].value.data().iter().map(|&x| f(x)).collect();
        let shape = self.shape_of(a).to_vec();
        let rg = self.requires(a);
        self.push(op(a), Tensor { shape, data }, rg)
    }

    // ── Reductions and shape ops ────────────────────────────────────

    /// Full reduction to a `[1]` tensor.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.nodes[a.0].value.data().iter().sum();
        let rg = self.requires(a);
        self.push(Op::Sum { a }, Tensor::scalar(total), rg)
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let sa = self.shape_of(a).to_vec();
        if axis >= sa.len() || len == 0 || start + len > sa[axis] {
            return Err(Error::invalid(format!(
                "slice [{start}, {start}+{len}) along axis {axis} out of range for shape {sa:?}"
            )));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let src = self.nodes[a.0].value.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * sa[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = sa.clone();
        shape[axis] = len;
        let rg = self.requires(a);
        Ok(self.push(
            Op::Slice { a, axis, start, len },
            Tensor::new(shape, data)?,
            rg,
        ))
    }

    /// Concatenate along `axis`; all other dims must agree.
    pub fn concat(&mut self, axis: usize, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of zero tensors"));
        }
        let first = self.shape_of(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::invalid(format!(
                "concat axis {axis} out of range for shape {first:?}"
            )));
        }
        let mut axis_total = 0;
        for &p in parts {
            let sp = self.shape_of(p);
            if sp.len() != first.len() {
                return Err(Error::shape("concat", &first, sp));
            }
            for (d, (&x, &y)) in sp.iter().zip(first.iter()).enumerate() {
                if d != axis && x != y {
                    return Err(Error::shape("concat", &first, sp));
                }
            }
            axis_total += sp[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let mut data = Vec::with_capacity(outer * axis_total * inner);
        for o in 0..outer {
            for &p in parts {
                let ap = self.shape_of(p)[axis];
                let src = self.nodes[p.0].value.data();
                let base = o * ap * inner;
                data.extend_from_slice(&src[base..base + ap * inner]);
            }
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            Op::Concat {
                axis,
                parts: parts.to_vec(),
            },
            Tensor::new(shape, data)?,
            rg,
        ))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let sa = self.shape_of(a);
        if shape.iter().product::<usize>() != sa.iter().product::<usize>() {
            return Err(Error::shape("reshape", sa, shape));
        }
        let data = self.nodes[a.0].value.data().to_vec();
        let rg = self.requires(a);
        Ok(self.push(Op::Reshape { a }, Tensor::new(shape.to_vec(), data)?, rg))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar node; returns the gradient of it with
    /// respect to every differentiable leaf (same shape as the leaf).
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out_node = &self.nodes[output.0];
        if out_node.value.len() != 1 {
            return Err(Error::NonScalarOutput(out_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if out_node.requires_grad {
            grads[output.0] = Some(vec![1.0]);
        }
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.accumulate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    /// Propagate `g` (gradient at node `idx`) into the node's inputs.
    fn accumulate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let ensure = |grads: &mut [Option<Vec<f64>>], id: NodeId, tape: &Tape| -> bool {
            if !tape.requires(id) {
                return false;
            }
            if grads[id.0].is_none() {
                grads[id.0] = Some(vec![0.0; tape.nodes[id.0].value.len()]);
            }
            true
        };
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let sa = self.shape_of(*a);
                let (m, k) = (sa[0], sa[1]);
                let n = self.shape_of(*b)[1];
                if ensure(grads, *a, self) {
                    let db = self.nodes[b.0].value.data();
                    kernels::matmul_nt_acc(g, db, m, n, k, grads[a.0].as_mut().unwrap());
                }
                if ensure(grads, *b, self) {
                    let da = self.nodes[a.0].value.data();
                    kernels::matmul_tn_acc(da, g, m, k, n, grads[b.0].as_mut().unwrap());
                }
            }
            Op::Bmm { a, b } => {
                let sa = self.shape_of(*a).to_vec();
                let (bt, m, k) = (sa[0], sa[1], sa[2]);
                let n = self.shape_of(*b)[2];
                if ensure(grads, *a, self) {
                    let db = self.nodes[b.0].value.data();
                    let ga = grads[a.0].as_mut().unwrap();
                    for t in 0..bt {
                        kernels::matmul_nt_acc(
                            &g[t * m * n..(t + 1) * m * n],
                            &db[t * k * n..(t + 1) * k * n],
                            m,
                            n,
                            k,
                            &mut ga[t * m * k..(t + 1) * m * k],
                        );
                    }
                }
                if ensure(grads, *b, self) {
                    let da = self.nodes[a.0].value.data();
                    let gb = grads[b.0].as_mut().unwrap();
                    for t in 0..bt {
                        kernels::matmul_tn_acc(
                            &da[t * m * k..(t + 1) * m * k],
                            &g[t * m * n..(t + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut gb[t * k * n..(t + 1) * k * n],
                        );
                    }
                }
            }
            Op::TransposeLast { a } => {
                if ensure(grads, *a, self) {
                    let sa = self.shape_of(*a);
                    let (bt, m, n) = (sa[0], sa[1], sa[2]);
                    let ga = grads[a.0].as_mut().unwrap();
                    for t in 0..bt {
                        for i in 0..m {
                            for j in 0..n {
                                ga[t * m * n + i * n + j] += g[t * m * n + j * m + i];
                            }
                        }
                    }
                }
            }
            Op::Conv2d { input, weight, stride } => {
                let si = self.shape_of(*input).to_vec();
                let sw = self.shape_of(*weight).to_vec();
                let (b, ci, h, w) = (si[0], si[1], si[2], si[3]);
                let (co, kh, kw) = (sw[0], sw[2], sw[3]);
                if ensure(grads, *input, self) {
                    kernels::conv2d_grad_input(
                        g,
                        self.nodes[weight.0].value.data(),
                        b,
                        ci,
                        h,
                        w,
                        co,
                        kh,
                        kw,
                        *stride,
                        grads[input.0].as_mut().unwrap(),
                    );
                }
                if ensure(grads, *weight, self) {
                    kernels::conv2d_grad_weight(
                        g,
                        self.nodes[input.0].value.data(),
                        b,
                        ci,
                        h,
                        w,
                        co,
                        kh,
                        kw,
                        *stride,
                        grads[weight.0].as_mut().unwrap(),
                    );
                }
            }
            Op::Deconv2d { input, weight, stride } => {
                let si = self.shape_of(*input).to_vec();
                let sw = self.shape_of(*weight).to_vec();
                let (b, ci, h, w) = (si[0], si[1], si[2], si[3]);
                let (co, kh, kw) = (sw[1], sw[2], sw[3]);
                if ensure(grads, *input, self) {
                    kernels::deconv2d_grad_input(
                        g,
                        self.nodes[weight.0].value.data(),
                        b,
                        ci,
                        h,
                        w,
                        co,
                        kh,
                        kw,
                        *stride,
                        grads[input.0].as_mut().unwrap(),
                    );
                }
                if ensure(grads, *weight, self) {
                    kernels::deconv2d_grad_weight(
                        g,
                        self.nodes[input.0].value.data(),
                        b,
                        ci,
                        h,
                        w,
                        co,
                        kh,
                        kw,
                        *stride,
                        grads[weight.0].as_mut().unwrap(),
                    );
                }
            }
            Op::Add { a, b, kind } => {
                if ensure(grads, *a, self) {
                    let ga = grads[a.0].as_mut().unwrap();
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if ensure(grads, *b, self) {
                    let gb = grads[b.0].as_mut().unwrap();
                    match kind {
                        AddKind::Same => {
                            for (x, y) in gb.iter_mut().zip(g) {
                                *x += y;
                            }
                        }
                        AddKind::Trailing => {
                            for chunk in g.chunks(gb.len()) {
                                for (x, y) in gb.iter_mut().zip(chunk) {
                                    *x += y;
                                }
                            }
                        }
                        AddKind::Batch => {
                            let slice_len = g.len() / gb.len();
                            for (x, chunk) in gb.iter_mut().zip(g.chunks(slice_len)) {
                                *x += chunk.iter().sum::<f64>();
                            }
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                if ensure(grads, *a, self) {
                    let ga = grads[a.0].as_mut().unwrap();
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if ensure(grads, *b, self) {
                    let gb = grads[b.0].as_mut().unwrap();
                    for (x, y) in gb.iter_mut().zip(g) {
                        *x -= y;
                    }
                }
            }
            Op::Mul { a, b, kind } => {
                let da = self.nodes[a.0].value.data();
                let db = self.nodes[b.0].value.data();
                if ensure(grads, *a, self) {
                    let ga = grads[a.0].as_mut().unwrap();
                    match kind {
                        MulKind::Same => {
                            for i in 0..ga.len() {
                                ga[i] += g[i] * db[i];
                            }
                        }
                        MulKind::Scalar => {
                            let s = db[0];
                            for i in 0..ga.len() {
                                ga[i] += g[i] * s;
                            }
                        }
                        MulKind::Batch => {
                            let slice_len = ga.len() / db.len();
                            for (t, s) in db.iter().enumerate() {
                                for i in 0..slice_len {
                                    ga[t * slice_len + i] += g[t * slice_len + i] * s;
                                }
                            }
                        }
                    }
                }
                if ensure(grads, *b, self) {
                    let gb = grads[b.0].as_mut().unwrap();
                    match kind {
                        MulKind::Same => {
                            for i in 0..gb.len() {
                                gb[i] += g[i] * da[i];
                            }
                        }
                        MulKind::Scalar => {
                            let mut acc = 0.0;
                            for i in 0..da.len() {
                                acc += g[i] * da[i];
                            }
                            gb[0] += acc;
                        }
                        MulKind::Batch => {
                            let slice_len = da.len() / gb.len();
                            for (t, out) in gb.iter_mut().enumerate() {
                                let mut acc = 0.0;
                                for i in 0..slice_len {
                                    acc += g[t * slice_len + i] * da[t * slice_len + i];
                                }
                                *out += acc;
                            }
                        }
                    }
                }
            }
            Op::AddScalar { a } => {
                if ensure(grads, *a, self) {
                    let ga = grads[a.0].as_mut().unwrap();
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
            Op::MulScalar { a, c } => {
                if ensure(grads, *a, self) {
                    let ga = grads[a.0].as_mut().unwrap();
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += c * y;
                    }
                }
            }
            Op::Sigmoid { a } => {
                if ensure(grads, *a, self) {
                    let y = node.value.data();
                    let ga = grads[a.0].as_mut().unwrap();
                    for i in 0..ga.len() {
                        ga[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::Tanh { a } => {
                if ensure(grads, *a, self) {
                    let y = node.value.data();
                    let ga = grads[a.0].as_mut().unwrap();
                    for i in 0..ga.len() {
                        ga[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                }
            }
            Op::Exp { a } => {
                if ensure(grads, *a, self) {
                    let y = node.value.data();
                    let ga = grads[a.0].as_mut().unwrap();
                    for i in 0..ga.len() {
                        ga[i] += g[i] * y[i];
                    }
                }
            }
            Op::Log { a } => {
                if ensure(grads, *a, self) {
                    let x = self.nodes[a.0].value.data();
                    let ga = grads[a.0].as_mut().unwrap();
                    for i in 0..ga.len() {
                        ga[i] += g[i] / x[i];
                    }
                }
            }
            Op::Square { a } => {
                if ensure(grads, *a, self) {
                    let x = self.nodes[a.0].value.data();
                    let ga = grads[a.0].as_mut().unwrap();
                    for i in 0..ga.len() {
                        ga[i] += g[i] * 2.0 * x[i];
                    }
                }
            }
            Op::Neg { a } => {
                if ensure(grads, *a, self) {
                    let ga = grads[a.0].as_mut().unwrap();
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x -= y;
                    }
                }
            }
            Op::Clamp { a, lo, hi } => {
                if ensure(grads, *a, self) {
                    let x = self.nodes[a.0].value.data();
                    let ga = grads[a.0].as_mut().unwrap();
                    for i in 0..ga.len() {
                        if x[i] >= *lo && x[i] <= *hi {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            Op::Sum { a } => {
                if ensure(grads, *a, self) {
                    let ga = grads[a.0].as_mut().unwrap();
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                }
            }
            Op::Slice { a, axis, start, len } => {
                if ensure(grads, *a, self) {
                    let sa = self.shape_of(*a).to_vec();
                    let outer: usize = sa[..*axis].iter().product();
                    let inner: usize = sa[*axis + 1..].iter().product();
                    let ga = grads[a.0].as_mut().unwrap();
                    for o in 0..outer {
                        let dst = (o * sa[*axis] + start) * inner;
                        let src = o * len * inner;
                        for i in 0..len * inner {
                            ga[dst + i] += g[src + i];
                        }
                    }
                }
            }
            Op::Concat { axis, parts } => {
                let first = self.shape_of(parts[0]).to_vec();
                let outer: usize = first[..*axis].iter().product();
                let inner: usize = first[*axis + 1..].iter().product();
                let total_axis: usize = parts.iter().map(|&p| self.shape_of(p)[*axis]).sum();
                let mut offset = 0;
                for &p in parts {
                    let ap = self.shape_of(p)[*axis];
                    if ensure(grads, p, self) {
                        let gp = grads[p.0].as_mut().unwrap();
                        for o in 0..outer {
                            let src = (o * total_axis + offset) * inner;
                            let dst = o * ap * inner;
                            for i in 0..ap * inner {
                                gp[dst + i] += g[src + i];
                            }
                        }
                    }
                    offset += ap;
                }
            }
            Op::Reshape { a } => {
                if ensure(grads, *a, self) {
                    let ga = grads[a.0].as_mut().unwrap();
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
        }
    }
}

/// Result of a backward sweep: per-node gradients keyed by [`NodeId`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `id`, shaped like the node's value.
    /// Detached nodes (not on any path to the output) get zeros.
    pub fn wrt(&self, id: NodeId) -> Tensor {
        let shape = self.shapes[id.0].clone();
        match &self.grads[id.0] {
            Some(g) => Tensor {
                shape,
                data: g.clone(),
            },
            None => Tensor::zeros(&shape),
        }
    }

    /// Whether the backward sweep reached `id` at all. A `false` here means
    /// the node was detached from the differentiated output.
    pub fn reached(&self, id: NodeId) -> bool {
        self.grads[id.0].is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use approx::assert_abs_diff_eq;

    #[test]
    fn matmul_shape_rule() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = tape.constant(&Tensor::filled(&[3, 4], 1.0));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 4]);
        assert_eq!(tape.value(c).data()[0], 6.0);
        assert_eq!(tape.value(c).data()[4], 15.0);
    }

    #[test]
    fn matmul_shape_mismatch_names_primitive() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::filled(&[2, 3], 1.0));
        let b = tape.constant(&Tensor::filled(&[4, 2], 1.0));
        match tape.matmul(a, b) {
            Err(Error::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 2]);
            }
            other => panic!("expected shape mismatch, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(&[5]));
        let y = tape.sigmoid(x);
        for &v in tape.value(y).data() {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn conv2d_shape_rule_8x8_k2_s2() {
        // floor((8 - 2) / 2) + 1 = 4
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::filled(&[1, 1, 8, 8], 1.0));
        let w = tape.constant(&Tensor::filled(&[4, 1, 2, 2], 0.25));
        let y = tape.conv2d(x, w, 2).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 4, 4, 4]);
        for &v in tape.value(y).data() {
            assert_abs_diff_eq!(v, 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn deconv2d_inverts_conv_shape() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::filled(&[1, 3, 4, 4], 1.0));
        let w = tape.constant(&Tensor::filled(&[3, 2, 2, 2], 1.0));
        let y = tape.deconv2d(x, w, 2).unwrap();
        // (4 - 1) * 2 + 2 = 8
        assert_eq!(tape.value(y).shape(), &[1, 2, 8, 8]);
    }

    #[test]
    fn backward_of_square_at_three_is_six() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(3.0));
        let y = tape.square(x);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.wrt(x).data(), &[6.0]);
    }

    #[test]
    fn backward_of_sum_sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[5]));
        let s = tape.sigmoid(x);
        let out = tape.sum(s);
        let grads = tape.backward(out).unwrap();
        for &g in grads.wrt(x).data() {
            assert_eq!(g, 0.25);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[3]));
        let y = tape.square(x);
        match tape.backward(y) {
            Err(Error::NonScalarOutput(shape)) => assert_eq!(shape, vec![3]),
            other => panic!("expected NonScalarOutput, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn detached_leaf_gets_zero_gradient_and_flag() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(2.0));
        let detached = tape.leaf(&Tensor::scalar(5.0));
        let y = tape.square(x);
        let grads = tape.backward(y).unwrap();
        assert!(grads.reached(x));
        assert!(!grads.reached(detached));
        assert_eq!(grads.wrt(detached).data(), &[0.0]);
    }

    #[test]
    fn constants_do_not_accumulate_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(2.0));
        let c = tape.constant(&Tensor::scalar(3.0));
        let p = tape.mul(x, c).unwrap();
        let out = tape.sum(p);
        let grads = tape.backward(out).unwrap();
        assert_eq!(grads.wrt(x).data(), &[3.0]);
        assert!(!grads.reached(c));
    }

    #[test]
    fn slice_and_concat_are_inverse() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::new(vec![2, 4], (0..8).map(f64::from).collect()).unwrap());
        let a = tape.slice(x, 1, 0, 2).unwrap();
        let b = tape.slice(x, 1, 2, 2).unwrap();
        let back = tape.concat(1, &[a, b]).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(x).data());
        assert_eq!(tape.value(back).shape(), &[2, 4]);
    }

    #[test]
    fn add_broadcasts_bias_over_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(&[3, 2]));
        let b = tape.constant(&Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        let y = tape.add(x, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -1.0, 1.0, -1.0, 1.0, -1.0]);
    }

    #[test]
    fn add_batch_column_broadcasts_per_row() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(&[2, 3]));
        let b = tape.constant(&Tensor::new(vec![2, 1], vec![5.0, 7.0]).unwrap());
        let y = tape.add(x, b).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 5.0, 5.0, 7.0, 7.0, 7.0]);
    }

    #[test]
    fn linearity_of_backward() {
        // backward(a*f + b*g) == a*backward(f) + b*backward(g)
        let point = Tensor::new(vec![4], vec![0.3, -0.7, 1.1, 0.2]).unwrap();
        let (a, b) = (2.5, -1.25);

        let grad_of = |build: &dyn Fn(&mut Tape, NodeId) -> NodeId| -> Vec<f64> {
            let mut tape = Tape::new();
            let x = tape.leaf(&point);
            let out = build(&mut tape, x);
            tape.backward(out).unwrap().wrt(x).into_data()
        };

        let f = |tape: &mut Tape, x: NodeId| {
            let s = tape.sigmoid(x);
            tape.sum(s)
        };
        let g = |tape: &mut Tape, x: NodeId| {
            let s = tape.square(x);
            tape.sum(s)
        };
        let combined = grad_of(&|tape, x| {
            let fs = f(tape, x);
            let gs = g(tape, x);
            let af = tape.mul_scalar(fs, a);
            let bg = tape.mul_scalar(gs, b);
            tape.add(af, bg).unwrap()
        });
        let gf = grad_of(&f);
        let gg = grad_of(&g);
        for i in 0..point.len() {
            assert_abs_diff_eq!(combined[i], a * gf[i] + b * gg[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn forward_backward_is_bit_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(&Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap());
            let w = tape.leaf(&Tensor::new(vec![3, 2], vec![0.7, -0.1, 0.2, 0.9, -0.5, 0.3]).unwrap());
            let h = tape.matmul(x, w).unwrap();
            let s = tape.tanh(h);
            let out = tape.sum(s);
            let grads = tape.backward(out).unwrap();
            (
                tape.value(out).item().to_bits(),
                grads
                    .wrt(w)
                    .data()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }
}
