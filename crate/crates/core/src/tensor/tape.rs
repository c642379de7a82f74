//! Reverse-mode autodiff tape over whole-tensor operations.
//!
//! The tape is an append-only list of nodes; node inputs always precede the
//! node, so a reverse walk is a valid topological order. Values are immutable
//! [`Tensor`]s; each node stores `Arc` handles to whatever its backward rule
//! needs. Gradients accumulate additively at fan-out.
//!
//! The tape is confined to one thread. Parallel training runs one tape per
//! worker over shared read-only parameters and reduces gradients in a fixed
//! order outside the tape.

use std::sync::Arc;

use super::{matmul_nt_raw, matmul_raw, matmul_tn_raw, strides_of, Reduction, Tensor};
use crate::error::{Error, Result};

pub type NodeId = usize;

/// Recorded operand: optional producing node plus the value itself.
#[derive(Clone)]
pub struct Src {
    pub id: Option<NodeId>,
    pub shape: Vec<usize>,
    pub data: Arc<Vec<f64>>,
}

impl Src {
    fn of(t: &Tensor) -> Src {
        Src {
            id: t.tape_id,
            shape: t.shape().to_vec(),
            data: t.data_arc(),
        }
    }
}

/// Custom differentiable operation (used for the structured layers whose
/// forward/backward pairs are cheaper hand-written than composed).
pub trait TapeOp: Send + Sync {
    fn name(&self) -> &'static str;
    /// Returns (output shape, output data, saved buffers for backward).
    fn forward(&self, inputs: &[Src]) -> (Vec<usize>, Vec<f64>, Vec<Arc<Vec<f64>>>);
    /// Returns one gradient buffer per input (None to skip), each matching
    /// that input's element count.
    fn backward(
        &self,
        inputs: &[Src],
        saved: &[Arc<Vec<f64>>],
        out_shape: &[usize],
        grad_out: &[f64],
    ) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    Add(Src, Src),
    Sub(Src, Src),
    MulElem(Src, Src),
    Scale(Src, f64),
    Matmul(Src, Src),
    /// `a * b^T` with `a: m x k`, `b: n x k`.
    MatmulNT(Src, Src),
    Relu(Src),
    /// Saves the output probabilities.
    SoftmaxRows(Src, Arc<Vec<f64>>),
    Concat {
        mode0: usize,
        parts: Vec<Src>,
    },
    Slice {
        src: Src,
        mode0: usize,
        start: usize,
    },
    Reduce {
        src: Src,
        mode0: usize,
        how: Reduction,
        /// Flat argmax offsets for Max, one per output element.
        argmax: Option<Arc<Vec<usize>>>,
    },
    SumAll(Src),
    Permute {
        src: Src,
        perm: Vec<usize>,
    },
    Reshape(Src),
    AddRowBroadcast(Src, Src),
    GatherRows {
        src: Src,
        indices: Arc<Vec<usize>>,
    },
    /// Per-chunk standardization with learnable gain and bias; saves the
    /// standardized values and reciprocal spreads.
    ChunkNorm {
        src: Src,
        gain: Src,
        bias: Src,
        chunk: usize,
        xhat: Arc<Vec<f64>>,
        inv_sigma: Arc<Vec<f64>>,
    },
    CrossEntropy {
        logits: Src,
        label: usize,
        probs: Arc<Vec<f64>>,
    },
    Custom {
        op: Arc<dyn TapeOp>,
        inputs: Vec<Src>,
        saved: Vec<Arc<Vec<f64>>>,
    },
}

struct Node {
    op: Op,
    out_shape: Vec<usize>,
}

/// Gradients produced by [`Tape::backward`], keyed by tape node id.
pub struct GradMap {
    grads: Vec<Option<Tensor>>,
}

impl GradMap {
    pub fn by_id(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn grad(&self, t: &Tensor) -> Option<&Tensor> {
        t.tape_id.and_then(|id| self.by_id(id))
    }
}

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

    fn push(&mut self, op: Op, out_shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        let mut t = Tensor::from_parts(out_shape.clone(), data);
        let id = self.nodes.len();
        self.nodes.push(Node { op, out_shape });
        t.tape_id = Some(id);
        t.requires_grad = true;
        t
    }

    fn push_shared(&mut self, op: Op, out_shape: Vec<usize>, data: Arc<Vec<f64>>) -> Tensor {
        let id = self.nodes.len();
        self.nodes.push(Node { op, out_shape: out_shape.clone() });
        Tensor {
            shape: out_shape,
            data,
            requires_grad: true,
            tape_id: Some(id),
        }
    }

    fn tracked(inputs: &[&Tensor]) -> bool {
        inputs.iter().any(|t| t.tape_id.is_some())
    }

    /// Register a leaf value. Only leaves with `requires_grad` are recorded;
    /// everything else participates as a constant.
    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Tensor {
        if !requires_grad {
            let mut c = t.clone();
            c.tape_id = None;
            c.requires_grad = false;
            return c;
        }
        let mut out = t.clone();
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            out_shape: t.shape().to_vec(),
        });
        out.tape_id = Some(id);
        out.requires_grad = true;
        out
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape(), b.shape(), "add shape mismatch");
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        if !Self::tracked(&[a, b]) {
            return Tensor::from_parts(a.shape().to_vec(), data);
        }
        self.push(Op::Add(Src::of(a), Src::of(b)), a.shape().to_vec(), data)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        if !Self::tracked(&[a, b]) {
            return Tensor::from_parts(a.shape().to_vec(), data);
        }
        self.push(Op::Sub(Src::of(a), Src::of(b)), a.shape().to_vec(), data)
    }

    pub fn mul_elem(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        if !Self::tracked(&[a, b]) {
            return Tensor::from_parts(a.shape().to_vec(), data);
        }
        self.push(Op::MulElem(Src::of(a), Src::of(b)), a.shape().to_vec(), data)
    }

    /// Mask-driven dropout: a plain elementwise product with a constant,
    /// externally supplied mask so training stays reproducible.
    pub fn dropout(&mut self, a: &Tensor, mask: &Tensor) -> Tensor {
        assert!(mask.tape_id.is_none(), "dropout mask must be a constant");
        self.mul_elem(a, mask)
    }

    pub fn scale(&mut self, a: &Tensor, c: f64) -> Tensor {
        let data = a.data().iter().map(|x| x * c).collect();
        if !Self::tracked(&[a]) {
            return Tensor::from_parts(a.shape().to_vec(), data);
        }
        self.push(Op::Scale(Src::of(a), c), a.shape().to_vec(), data)
    }

    pub fn neg(&mut self, a: &Tensor) -> Tensor {
        self.scale(a, -1.0)
    }

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.rank(), 2, "matmul lhs must be a matrix");
        assert_eq!(b.rank(), 2, "matmul rhs must be a matrix");
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let (k2, n) = (b.shape()[0], b.shape()[1]);
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let data = matmul_raw(a.data(), b.data(), m, k, n);
        if !Self::tracked(&[a, b]) {
            return Tensor::from_parts(vec![m, n], data);
        }
        self.push(Op::Matmul(Src::of(a), Src::of(b)), vec![m, n], data)
    }

    /// `a * b^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.rank(), 2, "matmul_nt lhs must be a matrix");
        assert_eq!(b.rank(), 2, "matmul_nt rhs must be a matrix");
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let (n, k2) = (b.shape()[0], b.shape()[1]);
        assert_eq!(k, k2, "matmul_nt inner dimension mismatch");
        let data = matmul_nt_raw(a.data(), b.data(), m, k, n);
        if !Self::tracked(&[a, b]) {
            return Tensor::from_parts(vec![m, n], data);
        }
        self.push(Op::MatmulNT(Src::of(a), Src::of(b)), vec![m, n], data)
    }

    pub fn relu(&mut self, a: &Tensor) -> Tensor {
        let data = a.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        if !Self::tracked(&[a]) {
            return Tensor::from_parts(a.shape().to_vec(), data);
        }
        self.push(Op::Relu(Src::of(a)), a.shape().to_vec(), data)
    }

    /// Row-wise softmax of a matrix, stabilized by per-row max subtraction.
    pub fn softmax_rows(&mut self, a: &Tensor) -> Tensor {
        assert_eq!(a.rank(), 2, "softmax_rows wants a matrix");
        let (rows, cols) = (a.shape()[0], a.shape()[1]);
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &a.data()[r * cols..(r + 1) * cols];
            let out = &mut data[r * cols..(r + 1) * cols];
            softmax_into(row, out);
        }
        if !Self::tracked(&[a]) {
            return Tensor::from_parts(vec![rows, cols], data);
        }
        let probs = Arc::new(data.clone());
        self.push(Op::SoftmaxRows(Src::of(a), probs), vec![rows, cols], data)
    }

    pub fn concat(&mut self, mode: usize, parts: &[&Tensor]) -> Tensor {
        let value = Tensor::concat(mode, parts).expect("concat shapes");
        if !Self::tracked(parts) {
            return value;
        }
        let srcs = parts.iter().map(|t| Src::of(t)).collect();
        let shape = value.shape().to_vec();
        let data = value.data().to_vec();
        self.push(Op::Concat { mode0: mode - 1, parts: srcs }, shape, data)
    }

    pub fn slice_mode(&mut self, a: &Tensor, mode: usize, start: usize, len: usize) -> Tensor {
        let value = a.slice_mode(mode, start, len).expect("slice bounds");
        if !Self::tracked(&[a]) {
            return value;
        }
        let shape = value.shape().to_vec();
        let data = value.data().to_vec();
        self.push(
            Op::Slice { src: Src::of(a), mode0: mode - 1, start },
            shape,
            data,
        )
    }

    pub fn reduce(&mut self, a: &Tensor, mode: usize, how: Reduction) -> Tensor {
        let value = a.reduce(mode, how).expect("reduce mode");
        if !Self::tracked(&[a]) {
            return value;
        }
        let argmax = match how {
            Reduction::Max => Some(Arc::new(argmax_offsets(a, mode - 1))),
            _ => None,
        };
        let shape = value.shape().to_vec();
        let data = value.data().to_vec();
        self.push(
            Op::Reduce { src: Src::of(a), mode0: mode - 1, how, argmax },
            shape,
            data,
        )
    }

    pub fn sum_all(&mut self, a: &Tensor) -> Tensor {
        let s: f64 = a.data().iter().sum();
        if !Self::tracked(&[a]) {
            return Tensor::scalar(s);
        }
        self.push(Op::SumAll(Src::of(a)), vec![], vec![s])
    }

    pub fn mean_all(&mut self, a: &Tensor) -> Tensor {
        let n = a.len().max(1) as f64;
        let s = self.sum_all(a);
        self.scale(&s, 1.0 / n)
    }

    pub fn permute_modes(&mut self, a: &Tensor, perm: &[usize]) -> Tensor {
        let value = a.permute_modes(perm).expect("valid permutation");
        if !Self::tracked(&[a]) {
            return value;
        }
        let shape = value.shape().to_vec();
        let data = value.data().to_vec();
        self.push(Op::Permute { src: Src::of(a), perm: perm.to_vec() }, shape, data)
    }

    pub fn reshape(&mut self, a: &Tensor, shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, a.len(), "reshape element count mismatch");
        if !Self::tracked(&[a]) {
            return a.reshape(shape).expect("checked above");
        }
        // Same layout: share the buffer, record only the metadata change.
        self.push_shared(Op::Reshape(Src::of(a)), shape.to_vec(), a.data_arc())
    }

    /// Mode-`m` matricization on the tape (permute-to-front plus reshape).
    pub fn matricize(&mut self, a: &Tensor, mode: usize) -> Tensor {
        let r = a.rank();
        assert!(mode >= 1 && mode <= r, "mode {mode} out of range for rank {r}");
        let rows = a.shape()[mode - 1];
        let cols = a.len() / rows.max(1);
        let perm = front_perm(mode, r);
        let moved = self.permute_modes(a, &perm);
        self.reshape(&moved, &[rows, cols])
    }

    pub fn dematricize(&mut self, m: &Tensor, mode: usize, shape: &[usize]) -> Tensor {
        let r = shape.len();
        assert!(mode >= 1 && mode <= r, "mode {mode} out of range for rank {r}");
        let mut fronted = Vec::with_capacity(r);
        fronted.push(shape[mode - 1]);
        for (d, &s) in shape.iter().enumerate() {
            if d != mode - 1 {
                fronted.push(s);
            }
        }
        let cube = self.reshape(m, &fronted);
        let perm = front_perm(mode, r);
        // front_perm scatters axis `mode-1` to the front; applying it to the
        // fronted cube scatters axes back to their home positions.
        let inverse = invert_perm(&perm);
        let restored = self.permute_modes(&cube, &inverse);
        debug_assert_eq!(restored.shape(), shape);
        restored
    }

    /// Select rows of a matrix by index, in order (repeats allowed).
    pub fn gather_rows(&mut self, a: &Tensor, indices: Arc<Vec<usize>>) -> Tensor {
        assert_eq!(a.rank(), 2, "gather_rows wants a matrix");
        let (rows, cols) = (a.shape()[0], a.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &r in indices.iter() {
            assert!(r < rows, "gather row {r} out of range");
            data.extend_from_slice(&a.data()[r * cols..(r + 1) * cols]);
        }
        let shape = vec![indices.len(), cols];
        if !Self::tracked(&[a]) {
            return Tensor::from_parts(shape, data);
        }
        self.push(Op::GatherRows { src: Src::of(a), indices }, shape, data)
    }

    /// Standardize every contiguous `chunk`-wide slice of `a` to zero mean
    /// and unit spread, then apply a learnable per-channel gain and bias
    /// (both of width `chunk`). The usual transformer normalization; chunks
    /// let block-stacked channels normalize per block.
    pub fn chunk_norm(&mut self, a: &Tensor, gain: &Tensor, bias: &Tensor, chunk: usize) -> Tensor {
        assert!(chunk > 0 && a.len() % chunk == 0, "chunk must divide the element count");
        assert_eq!(gain.len(), chunk, "gain width");
        assert_eq!(bias.len(), chunk, "bias width");
        const EPS: f64 = 1e-8;
        let groups = a.len() / chunk;
        let mut xhat = vec![0.0; a.len()];
        let mut inv_sigma = vec![0.0; groups];
        let mut out = vec![0.0; a.len()];
        for gidx in 0..groups {
            let x = &a.data()[gidx * chunk..(gidx + 1) * chunk];
            let mean = x.iter().sum::<f64>() / chunk as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / chunk as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            inv_sigma[gidx] = inv;
            let xh = &mut xhat[gidx * chunk..(gidx + 1) * chunk];
            let o = &mut out[gidx * chunk..(gidx + 1) * chunk];
            for c in 0..chunk {
                xh[c] = (x[c] - mean) * inv;
                o[c] = xh[c] * gain.data()[c] + bias.data()[c];
            }
        }
        if !Self::tracked(&[a, gain, bias]) {
            return Tensor::from_parts(a.shape().to_vec(), out);
        }
        self.push(
            Op::ChunkNorm {
                src: Src::of(a),
                gain: Src::of(gain),
                bias: Src::of(bias),
                chunk,
                xhat: Arc::new(xhat),
                inv_sigma: Arc::new(inv_sigma),
            },
            a.shape().to_vec(),
            out,
        )
    }

    /// `a[i, j] + bias[j]` for every row `i`.
    pub fn add_row_broadcast(&mut self, a: &Tensor, bias: &Tensor) -> Tensor {
        assert_eq!(a.rank(), 2, "add_row_broadcast wants a matrix");
        assert_eq!(bias.rank(), 1, "bias must be a vector");
        let (m, n) = (a.shape()[0], a.shape()[1]);
        assert_eq!(bias.len(), n, "bias width mismatch");
        let mut data = a.data().to_vec();
        for r in 0..m {
            for c in 0..n {
                data[r * n + c] += bias.data()[c];
            }
        }
        if !Self::tracked(&[a, bias]) {
            return Tensor::from_parts(vec![m, n], data);
        }
        self.push(Op::AddRowBroadcast(Src::of(a), Src::of(bias)), vec![m, n], data)
    }

    /// Affine map on row vectors: `x * w + b`.
    pub fn affine(&mut self, x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
        let y = self.matmul(x, w);
        self.add_row_broadcast(&y, b)
    }

    /// Stable cross-entropy of a logit vector against a class index.
    pub fn cross_entropy(&mut self, logits: &Tensor, label: usize) -> Result<Tensor> {
        let k = logits.len();
        if label >= k {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {k} classes"
            )));
        }
        let mut probs = vec![0.0; k];
        softmax_into(logits.data(), &mut probs);
        let max = logits.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max
            + logits.data().iter().map(|&v| super::math::exp64(v - max)).sum::<f64>().ln();
        let loss = lse - logits.data()[label];
        if !Self::tracked(&[logits]) {
            return Ok(Tensor::scalar(loss));
        }
        Ok(self.push(
            Op::CrossEntropy { logits: Src::of(logits), label, probs: Arc::new(probs) },
            vec![],
            vec![loss],
        ))
    }

    /// Record a custom operation.
    pub fn custom(&mut self, op: Arc<dyn TapeOp>, inputs: &[&Tensor]) -> Tensor {
        let srcs: Vec<Src> = inputs.iter().map(|t| Src::of(t)).collect();
        let (shape, data, saved) = op.forward(&srcs);
        if !Self::tracked(inputs) {
            return Tensor::from_parts(shape, data);
        }
        self.push(Op::Custom { op, inputs: srcs, saved }, shape, data)
    }

    /// Reverse pass from a scalar loss. Returns gradients for every tracked
    /// node that the loss depends on.
    pub fn backward(&self, loss: &Tensor) -> Result<GradMap> {
        let loss_id = loss.tape_id.ok_or(Error::DetachedTape)?;
        if loss_id >= self.nodes.len() {
            return Err(Error::DetachedTape);
        }
        if loss.len() != 1 {
            return Err(Error::NonScalarLoss);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss_id] = Some(vec![1.0]);

        for id in (0..=loss_id).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let out = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                g.map(|buf| Tensor::from_parts(self.nodes[id].out_shape.clone(), buf))
            })
            .collect();
        Ok(GradMap { grads: out })
    }

    fn propagate(&self, id: NodeId, g: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        fn acc(grads: &mut Vec<Option<Vec<f64>>>, src: &Src, contrib: &[f64]) {
            let Some(sid) = src.id else { return };
            let slot = grads[sid].get_or_insert_with(|| vec![0.0; contrib.len()]);
            debug_assert_eq!(slot.len(), contrib.len());
            for (dst, v) in slot.iter_mut().zip(contrib) {
                *dst += v;
            }
        }
        /// Accumulate an owned contribution, moving it into an empty slot.
        fn acc_owned(grads: &mut Vec<Option<Vec<f64>>>, src: &Src, contrib: Vec<f64>) {
            let Some(sid) = src.id else { return };
            match &mut grads[sid] {
                slot @ None => *slot = Some(contrib),
                Some(slot) => {
                    debug_assert_eq!(slot.len(), contrib.len());
                    for (dst, v) in slot.iter_mut().zip(contrib) {
                        *dst += v;
                    }
                }
            }
        }
        fn acc_with(
            grads: &mut Vec<Option<Vec<f64>>>,
            src: &Src,
            len: usize,
            f: impl FnOnce(&mut [f64]),
        ) {
            let Some(sid) = src.id else { return };
            let slot = grads[sid].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        }

        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, a, g);
                acc(grads, b, g);
            }
            Op::Sub(a, b) => {
                acc(grads, a, g);
                acc_with(grads, b, g.len(), |slot| {
                    for (dst, v) in slot.iter_mut().zip(g) {
                        *dst -= v;
                    }
                });
            }
            Op::MulElem(a, b) => {
                acc_with(grads, a, g.len(), |slot| {
                    for ((dst, v), y) in slot.iter_mut().zip(g).zip(b.data.iter()) {
                        *dst += v * y;
                    }
                });
                acc_with(grads, b, g.len(), |slot| {
                    for ((dst, v), x) in slot.iter_mut().zip(g).zip(a.data.iter()) {
                        *dst += v * x;
                    }
                });
            }
            Op::Scale(a, c) => {
                acc_with(grads, a, g.len(), |slot| {
                    for (dst, v) in slot.iter_mut().zip(g) {
                        *dst += v * c;
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (m, k) = (a.shape[0], a.shape[1]);
                let n = b.shape[1];
                if a.id.is_some() {
                    let da = matmul_nt_raw(g, &b.data, m, n, k);
                    acc_owned(grads, a, da);
                }
                if b.id.is_some() {
                    let db = matmul_tn_raw(&a.data, g, k, m, n);
                    acc_owned(grads, b, db);
                }
            }
            Op::MatmulNT(a, b) => {
                let (m, k) = (a.shape[0], a.shape[1]);
                let n = b.shape[0];
                if a.id.is_some() {
                    let da = matmul_raw(g, &b.data, m, n, k);
                    acc_owned(grads, a, da);
                }
                if b.id.is_some() {
                    let db = matmul_tn_raw(g, &a.data, n, m, k);
                    acc_owned(grads, b, db);
                }
            }
            Op::Relu(a) => {
                acc_with(grads, a, g.len(), |slot| {
                    for ((dst, v), x) in slot.iter_mut().zip(g).zip(a.data.iter()) {
                        if *x > 0.0 {
                            *dst += v;
                        }
                    }
                });
            }
            Op::SoftmaxRows(a, probs) => {
                let cols = node.out_shape[1];
                acc_with(grads, a, g.len(), |slot| {
                    for r in 0..node.out_shape[0] {
                        let p = &probs[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = p.iter().zip(gr).map(|(x, y)| x * y).sum();
                        let out = &mut slot[r * cols..(r + 1) * cols];
                        for ((dst, &pi), &gi) in out.iter_mut().zip(p).zip(gr) {
                            *dst += pi * (gi - dot);
                        }
                    }
                });
            }
            Op::Concat { mode0, parts } => {
                let m = *mode0;
                let out_shape = &node.out_shape;
                let outer: usize = out_shape[..m].iter().product();
                let inner: usize = out_shape[m + 1..].iter().product();
                let total_mid = out_shape[m];
                let mut mid_off = 0;
                for p in parts {
                    let mid = p.shape[m];
                    if p.id.is_some() {
                        let mut contrib = vec![0.0; p.shape.iter().product()];
                        for o in 0..outer {
                            let src_start = (o * total_mid + mid_off) * inner;
                            let dst_start = o * mid * inner;
                            contrib[dst_start..dst_start + mid * inner]
                                .copy_from_slice(&g[src_start..src_start + mid * inner]);
                        }
                        acc(grads, p, &contrib);
                    }
                    mid_off += mid;
                }
            }
            Op::Slice { src, mode0, start } => {
                let m = *mode0;
                let in_shape = &src.shape;
                let outer: usize = in_shape[..m].iter().product();
                let inner: usize = in_shape[m + 1..].iter().product();
                let len = node.out_shape[m];
                acc_with(grads, src, in_shape.iter().product(), |slot| {
                    for o in 0..outer {
                        let dst_base = (o * in_shape[m] + start) * inner;
                        let src_base = o * len * inner;
                        for i in 0..len * inner {
                            slot[dst_base + i] += g[src_base + i];
                        }
                    }
                });
            }
            Op::Reduce { src, mode0, how, argmax } => {
                let m = *mode0;
                let in_shape = &src.shape;
                let extent = in_shape[m];
                let outer: usize = in_shape[..m].iter().product();
                let inner: usize = in_shape[m + 1..].iter().product();
                acc_with(grads, src, in_shape.iter().product(), |slot| match how {
                    Reduction::Sum => {
                        for o in 0..outer {
                            for k in 0..extent {
                                let base = (o * extent + k) * inner;
                                for i in 0..inner {
                                    slot[base + i] += g[o * inner + i];
                                }
                            }
                        }
                    }
                    Reduction::Mean => {
                        let inv = 1.0 / extent as f64;
                        for o in 0..outer {
                            for k in 0..extent {
                                let base = (o * extent + k) * inner;
                                for i in 0..inner {
                                    slot[base + i] += g[o * inner + i] * inv;
                                }
                            }
                        }
                    }
                    Reduction::Max => {
                        let idx = argmax.as_ref().expect("argmax saved for max-reduce");
                        for (out_pos, &flat) in idx.iter().enumerate() {
                            slot[flat] += g[out_pos];
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                acc_with(grads, a, a.shape.iter().product(), |slot| {
                    for dst in slot.iter_mut() {
                        *dst += g[0];
                    }
                });
            }
            Op::Permute { src, perm } => {
                // Output position perm[k] carries input axis k, so gradient
                // flows back through the inverse rearrangement.
                let out_strides = strides_of(&node.out_shape);
                let in_shape = &src.shape;
                acc_with(grads, src, in_shape.iter().product(), |slot| {
                    let r = in_shape.len();
                    let mut idx = vec![0usize; r];
                    for dst in slot.iter_mut() {
                        let mut off = 0;
                        for (k, &p) in perm.iter().enumerate() {
                            off += idx[k] * out_strides[p - 1];
                        }
                        *dst += g[off];
                        for d in (0..r).rev() {
                            idx[d] += 1;
                            if idx[d] < in_shape[d] {
                                break;
                            }
                            idx[d] = 0;
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                acc(grads, a, g);
            }
            Op::AddRowBroadcast(a, bias) => {
                acc(grads, a, g);
                let n = bias.shape[0];
                acc_with(grads, bias, n, |slot| {
                    for (pos, v) in g.iter().enumerate() {
                        slot[pos % n] += v;
                    }
                });
            }
            Op::ChunkNorm { src, gain, bias, chunk, xhat, inv_sigma } => {
                let chunk = *chunk;
                let groups = xhat.len() / chunk;
                if src.id.is_some() {
                    acc_with(grads, src, xhat.len(), |slot| {
                        for gi in 0..groups {
                            let xh = &xhat[gi * chunk..(gi + 1) * chunk];
                            let go = &g[gi * chunk..(gi + 1) * chunk];
                            // d xhat = g * gain; remove its mean and its
                            // projection onto xhat, then rescale.
                            let mut mean_d = 0.0;
                            let mut mean_dx = 0.0;
                            for c in 0..chunk {
                                let d = go[c] * gain.data[c];
                                mean_d += d;
                                mean_dx += d * xh[c];
                            }
                            mean_d /= chunk as f64;
                            mean_dx /= chunk as f64;
                            let inv = inv_sigma[gi];
                            let dst = &mut slot[gi * chunk..(gi + 1) * chunk];
                            for c in 0..chunk {
                                let d = go[c] * gain.data[c];
                                dst[c] += (d - mean_d - xh[c] * mean_dx) * inv;
                            }
                        }
                    });
                }
                if gain.id.is_some() {
                    acc_with(grads, gain, chunk, |slot| {
                        for gi in 0..groups {
                            let xh = &xhat[gi * chunk..(gi + 1) * chunk];
                            let go = &g[gi * chunk..(gi + 1) * chunk];
                            for c in 0..chunk {
                                slot[c] += go[c] * xh[c];
                            }
                        }
                    });
                }
                if bias.id.is_some() {
                    acc_with(grads, bias, chunk, |slot| {
                        for gi in 0..groups {
                            let go = &g[gi * chunk..(gi + 1) * chunk];
                            for c in 0..chunk {
                                slot[c] += go[c];
                            }
                        }
                    });
                }
            }
            Op::GatherRows { src, indices } => {
                let cols = src.shape[1];
                acc_with(grads, src, src.shape.iter().product(), |slot| {
                    for (out_row, &r) in indices.iter().enumerate() {
                        let dst = &mut slot[r * cols..(r + 1) * cols];
                        let srcg = &g[out_row * cols..(out_row + 1) * cols];
                        for (d, v) in dst.iter_mut().zip(srcg) {
                            *d += v;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, label, probs } => {
                acc_with(grads, logits, probs.len(), |slot| {
                    for (c, dst) in slot.iter_mut().enumerate() {
                        let indicator = if c == *label { 1.0 } else { 0.0 };
                        *dst += g[0] * (probs[c] - indicator);
                    }
                });
            }
            Op::Custom { op, inputs, saved } => {
                let contribs = op.backward(inputs, saved, &node.out_shape, g);
                assert_eq!(contribs.len(), inputs.len(), "{} backward arity", op.name());
                for (src, contrib) in inputs.iter().zip(contribs) {
                    if let Some(c) = contrib {
                        acc_owned(grads, src, c);
                    }
                }
            }
        }
    }
}

/// Numerically stabilized softmax of one row.
pub fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = super::math::exp64(v - max);
        *o = e;
        sum += e;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

fn argmax_offsets(a: &Tensor, mode0: usize) -> Vec<usize> {
    let shape = a.shape();
    let extent = shape[mode0];
    let outer: usize = shape[..mode0].iter().product();
    let inner: usize = shape[mode0 + 1..].iter().product();
    let mut idx = vec![0usize; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let mut best = f64::NEG_INFINITY;
            let mut best_off = 0;
            for k in 0..extent {
                let off = (o * extent + k) * inner + i;
                let v = a.data()[off];
                if v > best {
                    best = v;
                    best_off = off;
                }
            }
            idx[o * inner + i] = best_off;
        }
    }
    idx
}

/// Permutation (1-based, scatter convention) that moves `mode` to the front
/// while keeping the other modes in ascending order.
fn front_perm(mode: usize, rank: usize) -> Vec<usize> {
    let mut perm = vec![0usize; rank];
    perm[mode - 1] = 1;
    let mut next = 2;
    for (d, p) in perm.iter_mut().enumerate() {
        if d != mode - 1 {
            *p = next;
            next += 1;
        }
    }
    perm
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (k, &p) in perm.iter().enumerate() {
        inv[p - 1] = k + 1;
    }
    inv
}
