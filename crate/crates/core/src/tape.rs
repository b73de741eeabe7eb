//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of a forward pass as a node; values are
//! computed eagerly and `backward` walks the nodes in reverse to accumulate
//! gradients for all parameters that contributed to a scalar output. The op
//! set is exactly what the model needs; each op's gradient is covered by a
//! finite-difference test below.

use crate::params::{Grads, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(u32);

/// Pair index used by [`Tape::layout_bias`] to mark positions without layout.
pub const NO_PAIR: u32 = u32::MAX;

enum Op<S> {
    Param(ParamId),
    Constant,
    /// Rows of a parameter table selected by id, e.g. embedding lookup.
    EmbedRows { table: ParamId, ids: Vec<u32> },
    MatMul { a: NodeId, b: NodeId },
    /// `a @ b.T`
    MatMulNT { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    SliceCols { a: NodeId, start: usize },
    ConcatCols { parts: Vec<NodeId> },
    ConcatRows { parts: Vec<NodeId> },
    GatherRows { a: NodeId, rows: Vec<u32> },
    /// Columnwise max over the selected rows; `argmax[c]` is the winning row.
    MaxPoolRows { a: NodeId, argmax: Vec<u32> },
    PickElems { a: NodeId, at: Vec<(u32, u32)> },
    Add { a: NodeId, b: NodeId },
    /// Broadcast-add of a 1×n row to every row of `a`.
    AddRow { a: NodeId, row: NodeId },
    Scale { a: NodeId, c: S },
    MulConst { a: NodeId, c: Tensor<S> },
    AddConst { a: NodeId },
    Gelu { a: NodeId },
    SoftmaxRows { a: NodeId },
    LogSoftmaxRows { a: NodeId },
    LayerNorm {
        a: NodeId,
        gain: ParamId,
        bias: ParamId,
        xhat: Tensor<S>,
        inv_std: Vec<S>,
    },
    /// `B[i][j] = H[hidx] + V[vidx]`, zero (and no gradient) on `NO_PAIR`.
    LayoutBias {
        h: ParamId,
        v: ParamId,
        hidx: Vec<u32>,
        vidx: Vec<u32>,
    },
    /// Scalar `sum_i w[i] * flat(a)[i]`.
    WeightedSum { a: NodeId, w: Vec<S> },
    /// Scalar `sum_i c[i] * parts[i]` over 1×1 nodes.
    AddScaled { parts: Vec<(NodeId, S)> },
}

struct Node<S> {
    value: Option<Tensor<S>>, // None for Param nodes: resolved via the store
    op: Op<S>,
}

/// Records a forward computation over a parameter store.
pub struct Tape<'p, S> {
    params: &'p ParamStore<S>,
    nodes: Vec<Node<S>>,
}

impl<'p, S: Scalar> Tape<'p, S> {
    pub fn new(params: &'p ParamStore<S>) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        let node = &self.nodes[id.0 as usize];
        match &node.value {
            Some(t) => t,
            None => match node.op {
                Op::Param(pid) => self.params.get(pid),
                _ => unreachable!("only parameter nodes borrow their value"),
            },
        }
    }

    fn push(&mut self, value: Option<Tensor<S>>, op: Op<S>) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node { value, op });
        id
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.push(None, Op::Param(id))
    }

    pub fn constant(&mut self, t: Tensor<S>) -> NodeId {
        self.push(Some(t), Op::Constant)
    }

    pub fn embed_rows(&mut self, table: ParamId, ids: &[u32]) -> NodeId {
        let tab = self.params.get(table);
        let cols = tab.cols();
        let mut out = Tensor::zeros(ids.len(), cols);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tab.row(id as usize));
        }
        self.push(
            Some(out),
            Op::EmbedRows {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(Some(v), Op::MatMul { a, b })
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_nt(self.value(b));
        self.push(Some(v), Op::MatMulNT { a, b })
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(Some(v), Op::Transpose { a })
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let src = self.value(a);
        let mut out = Tensor::zeros(src.rows(), len);
        for r in 0..src.rows() {
            out.row_mut(r).copy_from_slice(&src.row(r)[start..start + len]);
        }
        self.push(Some(out), Op::SliceCols { a, start })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + t.cols()].copy_from_slice(t.row(r));
            }
            offset += t.cols();
        }
        self.push(
            Some(out),
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let total: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut out = Tensor::zeros(total, cols);
        let mut r0 = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows col mismatch");
            for r in 0..t.rows() {
                out.row_mut(r0 + r).copy_from_slice(t.row(r));
            }
            r0 += t.rows();
        }
        self.push(
            Some(out),
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        )
    }

    pub fn gather_rows(&mut self, a: NodeId, rows: &[u32]) -> NodeId {
        let src = self.value(a);
        let mut out = Tensor::zeros(rows.len(), src.cols());
        for (r, &i) in rows.iter().enumerate() {
            out.row_mut(r).copy_from_slice(src.row(i as usize));
        }
        self.push(
            Some(out),
            Op::GatherRows {
                a,
                rows: rows.to_vec(),
            },
        )
    }

    pub fn max_pool_rows(&mut self, a: NodeId, rows: &[u32]) -> NodeId {
        assert!(!rows.is_empty(), "max pool over empty row set");
        let src = self.value(a);
        let cols = src.cols();
        let mut out = Tensor::zeros(1, cols);
        let mut argmax = vec![0u32; cols];
        out.row_mut(0).copy_from_slice(src.row(rows[0] as usize));
        argmax.fill(rows[0]);
        for &i in &rows[1..] {
            let row = src.row(i as usize);
            let best = out.row_mut(0);
            for c in 0..cols {
                if row[c] > best[c] {
                    best[c] = row[c];
                    argmax[c] = i;
                }
            }
        }
        self.push(Some(out), Op::MaxPoolRows { a, argmax })
    }

    pub fn pick_elems(&mut self, a: NodeId, at: &[(u32, u32)]) -> NodeId {
        let src = self.value(a);
        let mut out = Tensor::zeros(1, at.len());
        for (k, &(r, c)) in at.iter().enumerate() {
            *out.at_mut(0, k) = src.at(r as usize, c as usize);
        }
        self.push(Some(out), Op::PickElems { a, at: at.to_vec() })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_inplace(self.value(b));
        self.push(Some(v), Op::Add { a, b })
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let src = self.value(a);
        let r = self.value(row);
        assert_eq!(r.rows(), 1);
        assert_eq!(r.cols(), src.cols());
        let mut out = src.clone();
        for i in 0..out.rows() {
            for (x, y) in out.row_mut(i).iter_mut().zip(r.row(0)) {
                *x += *y;
            }
        }
        self.push(Some(out), Op::AddRow { a, row })
    }

    pub fn scale(&mut self, a: NodeId, c: S) -> NodeId {
        let mut v = self.value(a).clone();
        v.scale_inplace(c);
        self.push(Some(v), Op::Scale { a, c })
    }

    pub fn mul_const(&mut self, a: NodeId, c: Tensor<S>) -> NodeId {
        let src = self.value(a);
        assert_eq!(src.shape(), c.shape());
        let mut out = src.clone();
        for (x, y) in out.data_mut().iter_mut().zip(c.data()) {
            *x *= *y;
        }
        self.push(Some(out), Op::MulConst { a, c })
    }

    pub fn add_const(&mut self, a: NodeId, c: &Tensor<S>) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_inplace(c);
        self.push(Some(v), Op::AddConst { a })
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(gelu);
        self.push(Some(v), Op::Gelu { a })
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).softmax_rows();
        self.push(Some(v), Op::SoftmaxRows { a })
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let src = self.value(a);
        let mut out = src.clone();
        for r in 0..out.rows() {
            let ls = crate::tensor::log_softmax_slice(src.row(r));
            out.row_mut(r).copy_from_slice(&ls);
        }
        self.push(Some(out), Op::LogSoftmaxRows { a })
    }

    pub fn layer_norm(&mut self, a: NodeId, gain: ParamId, bias: ParamId, eps: S) -> NodeId {
        let src = self.value(a);
        let g = self.params.get(gain);
        let b = self.params.get(bias);
        let n = src.cols();
        assert_eq!(g.cols(), n);
        assert_eq!(b.cols(), n);
        let n_s = S::from_f64_lossy(n as f64);
        let mut out = Tensor::zeros(src.rows(), n);
        let mut xhat = Tensor::zeros(src.rows(), n);
        let mut inv_std = Vec::with_capacity(src.rows());
        for r in 0..src.rows() {
            let row = src.row(r);
            let mut mean = S::zero();
            for &x in row {
                mean += x;
            }
            mean = mean / n_s;
            let mut var = S::zero();
            for &x in row {
                let d = x - mean;
                var += d * d;
            }
            var = var / n_s;
            let inv = S::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for c in 0..n {
                let xh = (row[c] - mean) * inv;
                *xhat.at_mut(r, c) = xh;
                *out.at_mut(r, c) = g.at(0, c) * xh + b.at(0, c);
            }
        }
        self.push(
            Some(out),
            Op::LayerNorm {
                a,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Builds a matrix of trainable layout biases from integer distance
    /// indices; entries with [`NO_PAIR`] are zero and receive no gradient.
    pub fn layout_bias(
        &mut self,
        h: ParamId,
        v: ParamId,
        rows: usize,
        cols: usize,
        hidx: Vec<u32>,
        vidx: Vec<u32>,
    ) -> NodeId {
        assert_eq!(hidx.len(), rows * cols);
        assert_eq!(vidx.len(), rows * cols);
        let ht = self.params.get(h);
        let vt = self.params.get(v);
        let mut out = Tensor::zeros(rows, cols);
        for (k, slot) in out.data_mut().iter_mut().enumerate() {
            if hidx[k] != NO_PAIR {
                *slot = ht.at(hidx[k] as usize, 0) + vt.at(vidx[k] as usize, 0);
            }
        }
        self.push(Some(out), Op::LayoutBias { h, v, hidx, vidx })
    }

    pub fn weighted_sum(&mut self, a: NodeId, w: Vec<S>) -> NodeId {
        let src = self.value(a);
        assert_eq!(src.len(), w.len());
        let mut acc = S::zero();
        for (x, wi) in src.data().iter().zip(&w) {
            acc += *x * *wi;
        }
        self.push(Some(Tensor::scalar_value(acc)), Op::WeightedSum { a, w })
    }

    pub fn add_scaled(&mut self, parts: &[(NodeId, S)]) -> NodeId {
        let mut acc = S::zero();
        for &(p, c) in parts {
            acc += self.value(p).item() * c;
        }
        self.push(
            Some(Tensor::scalar_value(acc)),
            Op::AddScaled {
                parts: parts.to_vec(),
            },
        )
    }

    /// Negative log-likelihood of class `index` under a 1×n logits row.
    pub fn nll(&mut self, logits_row: NodeId, index: usize) -> NodeId {
        let ls = self.log_softmax_rows(logits_row);
        let pick = self.pick_elems(ls, &[(0, index as u32)]);
        self.scale(pick, -S::one())
    }

    /// Accumulates gradients of `root` (a 1×1 node) into every contributing
    /// parameter.
    pub fn backward(&self, root: NodeId) -> Grads<S> {
        assert_eq!(
            self.value(root).shape(),
            (1, 1),
            "backward root must be scalar"
        );
        let mut grads = Grads::zeros_like(self.params);
        let mut node_grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        node_grads[root.0 as usize] = Some(Tensor::scalar_value(S::one()));

        for idx in (0..=root.0 as usize).rev() {
            let Some(g) = node_grads[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Param(pid) => {
                    grads.accumulate(*pid, self.params.get(*pid).shape(), &g);
                }
                Op::Constant => {}
                Op::EmbedRows { table, ids } => {
                    let shape = self.params.get(*table).shape();
                    let slot = grads.slot_mut(*table, shape);
                    for (r, &id) in ids.iter().enumerate() {
                        for (dst, src) in
                            slot.row_mut(id as usize).iter_mut().zip(g.row(r))
                        {
                            *dst += *src;
                        }
                    }
                }
                Op::MatMul { a, b } => {
                    let ga = g.matmul_nt(self.value(*b));
                    let gb = self.value(*a).matmul_tn(&g);
                    acc_node(&mut node_grads, *a, ga);
                    acc_node(&mut node_grads, *b, gb);
                }
                Op::MatMulNT { a, b } => {
                    let ga = g.matmul(self.value(*b));
                    let gb = g.matmul_tn(self.value(*a));
                    acc_node(&mut node_grads, *a, ga);
                    acc_node(&mut node_grads, *b, gb);
                }
                Op::Transpose { a } => {
                    acc_node(&mut node_grads, *a, g.transpose());
                }
                Op::SliceCols { a, start } => {
                    let src_shape = self.value(*a).shape();
                    let mut ga = Tensor::zeros(src_shape.0, src_shape.1);
                    for r in 0..g.rows() {
                        ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc_node(&mut node_grads, *a, ga);
                }
                Op::ConcatCols { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let cols = self.value(p).cols();
                        let mut gp = Tensor::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        acc_node(&mut node_grads, p, gp);
                        offset += cols;
                    }
                }
                Op::ConcatRows { parts } => {
                    let mut r0 = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        let mut gp = Tensor::zeros(rows, g.cols());
                        for r in 0..rows {
                            gp.row_mut(r).copy_from_slice(g.row(r0 + r));
                        }
                        acc_node(&mut node_grads, p, gp);
                        r0 += rows;
                    }
                }
                Op::GatherRows { a, rows } => {
                    let src_shape = self.value(*a).shape();
                    let mut ga = Tensor::zeros(src_shape.0, src_shape.1);
                    for (r, &i) in rows.iter().enumerate() {
                        for (dst, src) in ga.row_mut(i as usize).iter_mut().zip(g.row(r)) {
                            *dst += *src;
                        }
                    }
                    acc_node(&mut node_grads, *a, ga);
                }
                Op::MaxPoolRows { a, argmax, .. } => {
                    let src_shape = self.value(*a).shape();
                    let mut ga = Tensor::zeros(src_shape.0, src_shape.1);
                    for (c, &r) in argmax.iter().enumerate() {
                        *ga.at_mut(r as usize, c) += g.at(0, c);
                    }
                    acc_node(&mut node_grads, *a, ga);
                }
                Op::PickElems { a, at } => {
                    let src_shape = self.value(*a).shape();
                    let mut ga = Tensor::zeros(src_shape.0, src_shape.1);
                    for (k, &(r, c)) in at.iter().enumerate() {
                        *ga.at_mut(r as usize, c as usize) += g.at(0, k);
                    }
                    acc_node(&mut node_grads, *a, ga);
                }
                Op::Add { a, b } => {
                    acc_node(&mut node_grads, *a, g.clone());
                    acc_node(&mut node_grads, *b, g);
                }
                Op::AddRow { a, row } => {
                    let mut grow = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (dst, src) in grow.row_mut(0).iter_mut().zip(g.row(r)) {
                            *dst += *src;
                        }
                    }
                    acc_node(&mut node_grads, *row, grow);
                    acc_node(&mut node_grads, *a, g);
                }
                Op::Scale { a, c } => {
                    let mut ga = g;
                    ga.scale_inplace(*c);
                    acc_node(&mut node_grads, *a, ga);
                }
                Op::MulConst { a, c } => {
                    let mut ga = g;
                    for (x, y) in ga.data_mut().iter_mut().zip(c.data()) {
                        *x *= *y;
                    }
                    acc_node(&mut node_grads, *a, ga);
                }
                Op::AddConst { a } => {
                    acc_node(&mut node_grads, *a, g);
                }
                Op::Gelu { a } => {
                    let x = self.value(*a);
                    let mut ga = g;
                    for (gi, &xi) in ga.data_mut().iter_mut().zip(x.data()) {
                        *gi *= gelu_grad(xi);
                    }
                    acc_node(&mut node_grads, *a, ga);
                }
                Op::SoftmaxRows { a } => {
                    let y = self.value(NodeId(idx as u32)).clone();
                    let mut ga = g;
                    for r in 0..ga.rows() {
                        let mut dot = S::zero();
                        for (gi, yi) in ga.row(r).iter().zip(y.row(r)) {
                            dot += *gi * *yi;
                        }
                        for (gi, yi) in ga.row_mut(r).iter_mut().zip(y.row(r)) {
                            *gi = *yi * (*gi - dot);
                        }
                    }
                    acc_node(&mut node_grads, *a, ga);
                }
                Op::LogSoftmaxRows { a } => {
                    let y = self.value(NodeId(idx as u32)).clone();
                    let mut ga = g;
                    for r in 0..ga.rows() {
                        let mut sum = S::zero();
                        for gi in ga.row(r) {
                            sum += *gi;
                        }
                        for (gi, yi) in ga.row_mut(r).iter_mut().zip(y.row(r)) {
                            *gi -= yi.exp() * sum;
                        }
                    }
                    acc_node(&mut node_grads, *a, ga);
                }
                Op::LayerNorm {
                    a,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gshape = self.params.get(*gain).shape();
                    let bshape = self.params.get(*bias).shape();
                    let n = g.cols();
                    let n_s = S::from_f64_lossy(n as f64);
                    {
                        let gslot = grads.slot_mut(*gain, gshape);
                        for r in 0..g.rows() {
                            for c in 0..n {
                                *gslot.at_mut(0, c) += g.at(r, c) * xhat.at(r, c);
                            }
                        }
                    }
                    {
                        let bslot = grads.slot_mut(*bias, bshape);
                        for r in 0..g.rows() {
                            for c in 0..n {
                                *bslot.at_mut(0, c) += g.at(r, c);
                            }
                        }
                    }
                    let gain_t = self.params.get(*gain);
                    let mut ga = Tensor::zeros(g.rows(), n);
                    for r in 0..g.rows() {
                        let mut mean_dxh = S::zero();
                        let mut mean_dxh_xh = S::zero();
                        for c in 0..n {
                            let dxh = g.at(r, c) * gain_t.at(0, c);
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xhat.at(r, c);
                        }
                        mean_dxh = mean_dxh / n_s;
                        mean_dxh_xh = mean_dxh_xh / n_s;
                        for c in 0..n {
                            let dxh = g.at(r, c) * gain_t.at(0, c);
                            *ga.at_mut(r, c) =
                                inv_std[r] * (dxh - mean_dxh - xhat.at(r, c) * mean_dxh_xh);
                        }
                    }
                    acc_node(&mut node_grads, *a, ga);
                }
                Op::LayoutBias { h, v, hidx, vidx } => {
                    let hshape = self.params.get(*h).shape();
                    let vshape = self.params.get(*v).shape();
                    {
                        let hslot = grads.slot_mut(*h, hshape);
                        for (k, &gi) in g.data().iter().enumerate() {
                            if hidx[k] != NO_PAIR {
                                *hslot.at_mut(hidx[k] as usize, 0) += gi;
                            }
                        }
                    }
                    let vslot = grads.slot_mut(*v, vshape);
                    for (k, &gi) in g.data().iter().enumerate() {
                        if vidx[k] != NO_PAIR {
                            *vslot.at_mut(vidx[k] as usize, 0) += gi;
                        }
                    }
                }
                Op::WeightedSum { a, w } => {
                    let src_shape = self.value(*a).shape();
                    let g0 = g.item();
                    let mut ga = Tensor::zeros(src_shape.0, src_shape.1);
                    for (dst, wi) in ga.data_mut().iter_mut().zip(w) {
                        *dst = g0 * *wi;
                    }
                    acc_node(&mut node_grads, *a, ga);
                }
                Op::AddScaled { parts } => {
                    let g0 = g.item();
                    for &(p, c) in parts {
                        acc_node(&mut node_grads, p, Tensor::scalar_value(g0 * c));
                    }
                }
            }
        }
        grads
    }
}

fn acc_node<S: Scalar>(node_grads: &mut [Option<Tensor<S>>], id: NodeId, delta: Tensor<S>) {
    match &mut node_grads[id.0 as usize] {
        Some(t) => t.add_inplace(&delta),
        slot @ None => *slot = Some(delta),
    }
}

/// Tanh-approximated GELU, the standard transformer feed-forward activation.
pub fn gelu<S: Scalar>(x: S) -> S {
    let c = S::from_f64_lossy(0.797_884_560_802_865_4); // sqrt(2/pi)
    let k = S::from_f64_lossy(0.044715);
    let half = S::from_f64_lossy(0.5);
    half * x * (S::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::from_f64_lossy(0.797_884_560_802_865_4);
    let k = S::from_f64_lossy(0.044715);
    let half = S::from_f64_lossy(0.5);
    let three = S::from_f64_lossy(3.0);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + three * k * x * x)
}
