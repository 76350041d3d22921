//! Reverse-mode tape.
//!
//! A [`Graph`] borrows a [`ParamSet`] for the duration of one forward pass
//! and records every operation. Parameter values are read in place, never
//! copied. Every node is viewed as a row-major `rows × cols` matrix; vectors
//! are `1 × n`.

use std::collections::HashMap;

use super::{dropout_mask, Gradients, ParamId, ParamSet, Rng, Tensor};
use crate::error::{Error, Result};
use crate::ner_head::crf::CrfView;
use crate::scalar::{axpy, dot, log_sum_exp, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<T> {
    Param(usize),
    Constant,
    Gather { src: NodeId, idx: Vec<usize>, frozen_row: Option<usize> },
    Unfold { src: NodeId, width: usize },
    MatMulNt { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    AddBias { a: NodeId, bias: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: T },
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    MaxRows { a: NodeId, argmax: Vec<usize> },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols { a: NodeId, start: usize },
    SliceRows { a: NodeId, start: usize },
    SoftmaxXent { logits: NodeId, targets: Vec<usize>, probs: Vec<T> },
    LogSumExpRows { a: NodeId, probs: Vec<T> },
    Sum(NodeId),
    CrfNll { em: NodeId, trans: NodeId, start: Option<NodeId>, stop: Option<NodeId>, grad: CrfGradBufs<T> },
}

#[derive(Debug)]
struct CrfGradBufs<T> {
    em: Vec<T>,
    trans: Vec<T>,
    start: Option<Vec<T>>,
    stop: Option<Vec<T>>,
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Param(_) => "param",
            Op::Constant => "constant",
            Op::Gather { .. } => "gather_rows",
            Op::Unfold { .. } => "unfold",
            Op::MatMulNt { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::AddBias { .. } => "add_bias",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::MaxRows { .. } => "max_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::SoftmaxXent { .. } => "softmax_cross_entropy",
            Op::LogSumExpRows { .. } => "log_sum_exp",
            Op::Sum(_) => "sum",
            Op::CrfNll { .. } => "crf_nll",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    rows: usize,
    cols: usize,
    value: Vec<T>,
    op: Op<T>,
}

pub struct Graph<'p, T: Scalar> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<usize, NodeId>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamSet<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<T>, op: Op<T>) -> NodeId {
        debug_assert!(matches!(op, Op::Param(_)) || value.len() == rows * cols);
        self.nodes.push(Node { rows, cols, value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        let node = &self.nodes[id.0];
        match node.op {
            Op::Param(p) => self.params.get(ParamId(p)).data(),
            _ => &node.value,
        }
    }

    /// `(rows, cols)` of a node.
    pub fn dims(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn scalar(&self, id: NodeId) -> T {
        let v = self.value(id);
        assert_eq!(v.len(), 1, "node is not a scalar");
        v[0]
    }

    pub fn to_tensor(&self, id: NodeId) -> Tensor<T> {
        let (r, c) = self.dims(id);
        Tensor::new([r, c], self.value(id).to_vec()).expect("node dims are valid")
    }

    /// Leaf for a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id.0) {
            return n;
        }
        let t = self.params.get(id);
        let node = self.push(t.rows(), t.cols(), Vec::new(), Op::Param(id.0));
        self.param_nodes.insert(id.0, node);
        node
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<T>) -> NodeId {
        assert_eq!(data.len(), rows * cols, "constant: data does not match {rows}x{cols}");
        self.push(rows, cols, data, Op::Constant)
    }

    /// Row lookup (embedding gather). Rows equal to `frozen_row` receive no
    /// gradient.
    pub fn gather_rows(&mut self, src: NodeId, idx: &[usize], frozen_row: Option<usize>) -> NodeId {
        let (rows, cols) = self.dims(src);
        let table = self.value(src);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &r in idx {
            assert!(r < rows, "gather_rows: index {r} out of range {rows}");
            out.extend_from_slice(&table[r * cols..(r + 1) * cols]);
        }
        let op = Op::Gather {
            src,
            idx: idx.to_vec(),
            frozen_row,
        };
        self.push(idx.len(), cols, out, op)
    }

    /// Sliding windows of `width` consecutive rows, flattened so that column
    /// `c * width + j` holds `src[i + j][c]`.
    pub fn unfold(&mut self, src: NodeId, width: usize) -> NodeId {
        let (len, dim) = self.dims(src);
        assert!(width >= 1 && width <= len, "unfold: width {width} on {len} rows");
        let x = self.value(src);
        let positions = len - width + 1;
        let mut out = vec![T::zero(); positions * dim * width];
        for i in 0..positions {
            let row = &mut out[i * dim * width..(i + 1) * dim * width];
            for j in 0..width {
                let src_row = &x[(i + j) * dim..(i + j + 1) * dim];
                for (c, &v) in src_row.iter().enumerate() {
                    row[c * width + j] = v;
                }
            }
        }
        self.push(positions, dim * width, out, Op::Unfold { src, width })
    }

    /// `a · bᵀ` for `a: m × k`, `b: n × k`. Weight matrices stored as
    /// `[out × in]` therefore act as `x Wᵀ`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let ar = &av[i * k..(i + 1) * k];
            out.extend(bv.chunks_exact(k).map(|br| dot(ar, br)));
        }
        self.push(m, n, out, Op::MatMulNt { a, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.dims(a), self.dims(b), "add: shape mismatch");
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let (r, c) = self.dims(a);
        self.push(r, c, out, Op::Add { a, b })
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let bv = self.value(bias);
        assert_eq!(bv.len(), c, "add_bias: bias length");
        let out = self
            .value(a)
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(bv).map(|(&x, &b)| x + b))
            .collect();
        self.push(r, c, out, Op::AddBias { a, bias })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.dims(a), self.dims(b), "mul: shape mismatch");
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let (r, c) = self.dims(a);
        self.push(r, c, out, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let (r, cols) = self.dims(a);
        self.push(r, cols, out, Op::Scale { a, c })
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(T) -> T, op: Op<T>) -> NodeId {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let (r, c) = self.dims(a);
        self.push(r, c, out, op)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, T::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| T::one() / (T::one() + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    /// Column-wise max over all rows; ties resolve to the first row.
    pub fn max_rows(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let v = self.value(a);
        let mut best = v[..c].to_vec();
        let mut argmax = vec![0usize; c];
        for i in 1..r {
            for (j, &x) in v[i * c..(i + 1) * c].iter().enumerate() {
                if x > best[j] {
                    best[j] = x;
                    argmax[j] = i;
                }
            }
        }
        self.push(1, c, best, Op::MaxRows { a, argmax })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.dims(parts[0]).0;
        let total: usize = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.dims(p).0, rows, "concat_cols: row mismatch");
                self.dims(p).1
            })
            .sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let c = self.dims(p).1;
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        self.push(rows, total, out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat of nothing");
        let cols = self.dims(parts[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            assert_eq!(self.dims(p).1, cols, "concat_rows: column mismatch");
            rows += self.dims(p).0;
            out.extend_from_slice(self.value(p));
        }
        self.push(rows, cols, out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (r, c) = self.dims(a);
        assert!(start + len <= c && len > 0, "slice_cols out of range");
        let v = self.value(a);
        let out = (0..r).flat_map(|i| v[i * c + start..i * c + start + len].iter().copied()).collect();
        self.push(r, len, out, Op::SliceCols { a, start })
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (r, c) = self.dims(a);
        assert!(start + len <= r && len > 0, "slice_rows out of range");
        let out = self.value(a)[start * c..(start + len) * c].to_vec();
        self.push(len, c, out, Op::SliceRows { a, start })
    }

    /// Summed softmax cross-entropy: `Σ_r logsumexp(row_r) - row_r[target_r]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let (r, c) = self.dims(logits);
        assert_eq!(r, targets.len(), "one target per row");
        let v = self.value(logits);
        let mut probs = Vec::with_capacity(r * c);
        let mut loss = T::zero();
        for (row, &y) in v.chunks_exact(c).zip(targets) {
            assert!(y < c, "target {y} out of range {c}");
            let lse = log_sum_exp(row);
            loss += lse - row[y];
            probs.extend(row.iter().map(|&x| (x - lse).exp()));
        }
        let op = Op::SoftmaxXent {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        self.push(1, 1, vec![loss], op)
    }

    /// Row-wise log-sum-exp, producing an `rows × 1` column.
    pub fn log_sum_exp_rows(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let v = self.value(a);
        let mut out = Vec::with_capacity(r);
        let mut probs = Vec::with_capacity(r * c);
        for row in v.chunks_exact(c) {
            let lse = log_sum_exp(row);
            out.push(lse);
            probs.extend(row.iter().map(|&x| (x - lse).exp()));
        }
        self.push(r, 1, out, Op::LogSumExpRows { a, probs })
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).iter().copied().sum();
        self.push(1, 1, vec![s], Op::Sum(a))
    }

    /// Inverted dropout as a product with a sampled constant mask.
    pub fn dropout(&mut self, x: NodeId, p: f64, training: bool, rng: &mut Rng) -> NodeId {
        assert!((0.0..1.0).contains(&p), "dropout probability must be in [0, 1)");
        if !training || p == 0.0 {
            return x;
        }
        let (r, c) = self.dims(x);
        let mask = self.constant(r, c, dropout_mask(r * c, p, rng));
        self.mul(x, mask)
    }

    /// Negative CRF log-likelihood `log Z - s(d, y)` of one sentence.
    /// `em` is `n × tags`, `trans` is `tags × tags`.
    pub fn crf_nll(
        &mut self,
        em: NodeId,
        trans: NodeId,
        boundaries: Option<(NodeId, NodeId)>,
        tags: &[usize],
    ) -> NodeId {
        let (_, t) = self.dims(em);
        assert_eq!(self.dims(trans), (t, t), "crf_nll: transitions must be tags x tags");
        let mut view = CrfView::new(self.value(trans), t);
        if let Some((s, e)) = boundaries {
            view = view.with_boundaries(self.value(s), self.value(e));
        }
        let g = view.nll_with_grad(self.value(em), tags);
        let op = Op::CrfNll {
            em,
            trans,
            start: boundaries.map(|b| b.0),
            stop: boundaries.map(|b| b.1),
            grad: CrfGradBufs {
                em: g.d_emissions,
                trans: g.d_trans,
                start: g.d_start,
                stop: g.d_stop,
            },
        };
        self.push(1, 1, vec![g.nll], op)
    }

    /// Reverse sweep from a scalar node. The graph is left intact, so this
    /// may be called more than once.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.dims(loss) != (1, 1) {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got {:?}",
                self.dims(loss)
            )));
        }
        if !self.scalar(loss).is_finite() {
            return Err(Error::Numeric {
                op: self.nodes[loss.0].op.name(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients::with_len(self.params.len());

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric { op: node.op.name() });
            }
            self.vjp(node, &g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn vjp(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>], out: &mut Gradients<T>) {
        macro_rules! acc {
            ($id:expr) => {
                slot(grads, &self.nodes, $id)
            };
        }
        match &node.op {
            Op::Param(p) => out.add(*p, g),
            Op::Constant => {}
            Op::Gather { src, idx, frozen_row } => {
                let cols = node.cols;
                let gs = acc!(*src);
                for (r, &row) in idx.iter().enumerate() {
                    if Some(row) == *frozen_row {
                        continue;
                    }
                    axpy(T::one(), &g[r * cols..(r + 1) * cols], &mut gs[row * cols..(row + 1) * cols]);
                }
            }
            Op::Unfold { src, width } => {
                let dim = self.nodes[src.0].cols;
                let w = *width;
                let gs = acc!(*src);
                for i in 0..node.rows {
                    let row = &g[i * dim * w..(i + 1) * dim * w];
                    for j in 0..w {
                        let dst = &mut gs[(i + j) * dim..(i + j + 1) * dim];
                        for (c, d) in dst.iter_mut().enumerate() {
                            *d += row[c * w + j];
                        }
                    }
                }
            }
            Op::MatMulNt { a, b } => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).0;
                let av = self.value(*a);
                let bv = self.value(*b);
                {
                    let ga = acc!(*a);
                    for i in 0..m {
                        let gar = &mut ga[i * k..(i + 1) * k];
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij != T::zero() {
                                axpy(gij, &bv[j * k..(j + 1) * k], gar);
                            }
                        }
                    }
                }
                let gb = acc!(*b);
                for i in 0..m {
                    let ar = &av[i * k..(i + 1) * k];
                    for j in 0..n {
                        let gij = g[i * n + j];
                        if gij != T::zero() {
                            axpy(gij, ar, &mut gb[j * k..(j + 1) * k]);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                axpy(T::one(), g, acc!(*a));
                axpy(T::one(), g, acc!(*b));
            }
            Op::AddBias { a, bias } => {
                axpy(T::one(), g, acc!(*a));
                let gb = acc!(*bias);
                for row in g.chunks_exact(node.cols) {
                    axpy(T::one(), row, gb);
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                for ((d, &gi), &y) in acc!(*a).iter_mut().zip(g).zip(bv) {
                    *d += gi * y;
                }
                for ((d, &gi), &x) in acc!(*b).iter_mut().zip(g).zip(av) {
                    *d += gi * x;
                }
            }
            Op::Scale { a, c } => axpy(*c, g, acc!(*a)),
            Op::Tanh(a) => {
                for ((d, &gi), &y) in acc!(*a).iter_mut().zip(g).zip(&node.value) {
                    *d += gi * (T::one() - y * y);
                }
            }
            Op::Sigmoid(a) => {
                for ((d, &gi), &y) in acc!(*a).iter_mut().zip(g).zip(&node.value) {
                    *d += gi * y * (T::one() - y);
                }
            }
            Op::Relu(a) => {
                for ((d, &gi), &y) in acc!(*a).iter_mut().zip(g).zip(&node.value) {
                    if y > T::zero() {
                        *d += gi;
                    }
                }
            }
            Op::MaxRows { a, argmax } => {
                let c = node.cols;
                let ga = acc!(*a);
                for (j, &r) in argmax.iter().enumerate() {
                    ga[r * c + j] += g[j];
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.cols;
                let mut off = 0;
                for &p in parts {
                    let c = self.dims(p).1;
                    let gp = acc!(p);
                    for r in 0..node.rows {
                        axpy(T::one(), &g[r * total + off..r * total + off + c], &mut gp[r * c..(r + 1) * c]);
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].rows * self.nodes[p.0].cols;
                    axpy(T::one(), &g[off..off + n], acc!(p));
                    off += n;
                }
            }
            Op::SliceCols { a, start } => {
                let c = self.dims(*a).1;
                let len = node.cols;
                let ga = acc!(*a);
                for r in 0..node.rows {
                    axpy(T::one(), &g[r * len..(r + 1) * len], &mut ga[r * c + start..r * c + start + len]);
                }
            }
            Op::SliceRows { a, start } => {
                let c = node.cols;
                let ga = acc!(*a);
                axpy(T::one(), g, &mut ga[start * c..(start + node.rows) * c]);
            }
            Op::SoftmaxXent { logits, targets, probs } => {
                let c = self.dims(*logits).1;
                let gl = acc!(*logits);
                axpy(g[0], probs, gl);
                for (r, &y) in targets.iter().enumerate() {
                    gl[r * c + y] -= g[0];
                }
            }
            Op::LogSumExpRows { a, probs } => {
                let c = self.dims(*a).1;
                let ga = acc!(*a);
                for (r, &gr) in g.iter().enumerate() {
                    axpy(gr, &probs[r * c..(r + 1) * c], &mut ga[r * c..(r + 1) * c]);
                }
            }
            Op::Sum(a) => {
                for d in acc!(*a).iter_mut() {
                    *d += g[0];
                }
            }
            Op::CrfNll {
                em,
                trans,
                start,
                stop,
                grad,
            } => {
                axpy(g[0], &grad.em, acc!(*em));
                axpy(g[0], &grad.trans, acc!(*trans));
                if let (Some(s), Some(gs)) = (start, &grad.start) {
                    axpy(g[0], gs, acc!(*s));
                }
                if let (Some(s), Some(gs)) = (stop, &grad.stop) {
                    axpy(g[0], gs, acc!(*s));
                }
            }
        }
    }
}

fn slot<'a, T: Scalar>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], id: NodeId) -> &'a mut Vec<T> {
    let len = nodes[id.0].rows * nodes[id.0].cols;
    grads[id.0].get_or_insert_with(|| vec![T::zero(); len])
}
