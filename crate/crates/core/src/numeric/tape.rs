//! A small reverse-mode tape over rank-2 tensors.
//!
//! Batched activations are stored as `[groups · rows_per_group, width]`
//! matrices; ops that need the batch structure (attention, modulated norm,
//! per-item gates, token concatenation) take the group count explicitly.
//! Nodes are appended in evaluation order, so reverse index order is a valid
//! topological order for the backward sweep.

use super::kernels::{self, attention_head_backward, attention_head_forward};
use super::tensor::{gemm, MatMut, MatRef, Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, T),
    MulGroups { x: Var, g: Var, rows_per_group: usize },
    ModLn { x: Var, scale: Var, shift: Var, rows_per_group: usize, xhat: Vec<T>, inv_std: Vec<T> },
    Silu(Var),
    Gelu(Var),
    Attention { q: Var, k: Var, v: Var, groups: usize, heads: usize, probs: Vec<T> },
    ConcatGroups { a: Var, b: Var, groups: usize },
    SliceGroups { x: Var, groups: usize, start: usize },
    SliceCols { x: Var, start: usize },
    GatherRows { table: Var, idx: Vec<usize> },
    ScatterRows { x: Var, idx: Vec<usize> },
    Mse { pred: Var, target: Vec<T> },
    WeightedSum { x: Var, w: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients indexed by node. `None` for nodes that do not require grad.
pub struct Grads<T> {
    bufs: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.bufs.get(v.0).and_then(|b| b.as_deref())
    }
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        let t = as_matrix(t);
        self.push(t, Op::Leaf, true)
    }

    /// A leaf with no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let t = as_matrix(t);
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor<T>, trainable: bool) -> Var {
        if trainable {
            self.param(t)
        } else {
            self.constant(t)
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.cols(), bv.rows(), "matmul {:?} x {:?}", av.shape(), bv.shape());
        let (m, n) = (av.rows(), bv.cols());
        let mut out = Tensor::zeros(&[m, n]);
        gemm(T::one(), av.as_mat(), bv.as_mat(), T::zero(), MatMut::new(out.data_mut(), m, n));
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let bv = self.nodes[b.0].value.data();
        let c = xv.cols();
        assert_eq!(bv.len(), c, "bias width");
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &bb) in row.iter_mut().zip(bv) {
                *o = *o + bb;
            }
        }
        let rg = self.rg(&[x, b]);
        self.push(out, Op::AddBias(x, b), rg)
    }

    /// `x·w + b` with `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_bias(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.shape(), bv.shape(), "add shape");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_vec(av.shape(), data).unwrap();
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.shape(), bv.shape(), "sub shape");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::from_vec(av.shape(), data).unwrap();
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.nodes[x.0].value.map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// Elementwise product of `x: [G·N, D]` with the per-group row `g: [G, D]`.
    pub fn mul_groups(&mut self, x: Var, g: Var) -> Var {
        let (xv, gv) = (&self.nodes[x.0].value, &self.nodes[g.0].value);
        let d = xv.cols();
        assert_eq!(gv.cols(), d, "gate width");
        let groups = gv.rows();
        assert_eq!(xv.rows() % groups, 0, "gate groups");
        let rpg = xv.rows() / groups;
        let mut out = xv.clone();
        for (r, row) in out.data_mut().chunks_mut(d).enumerate() {
            let gr = &gv.data()[(r / rpg) * d..(r / rpg + 1) * d];
            for (o, &s) in row.iter_mut().zip(gr) {
                *o = *o * s;
            }
        }
        let rg = self.rg(&[x, g]);
        self.push(out, Op::MulGroups { x, g, rows_per_group: rpg }, rg)
    }

    /// Modulated layer norm; `scale`/`shift` are `[G, D]`.
    pub fn mod_ln(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let (xv, sv, hv) =
            (&self.nodes[x.0].value, &self.nodes[scale.0].value, &self.nodes[shift.0].value);
        let d = xv.cols();
        assert!(sv.cols() == d && hv.cols() == d, "modulation width");
        let groups = sv.rows();
        assert_eq!(hv.rows(), groups);
        let rows = xv.rows();
        assert_eq!(rows % groups.max(1), 0, "modulation groups");
        let rpg = if groups == 0 { 1 } else { (rows / groups).max(1) };
        let mut y = Tensor::zeros(xv.shape());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        kernels::mod_ln_forward(
            xv.data(),
            sv.data(),
            hv.data(),
            d,
            rpg,
            y.data_mut(),
            &mut xhat,
            &mut inv_std,
        );
        let rg = self.rg(&[x, scale, shift]);
        self.push(y, Op::ModLn { x, scale, shift, rows_per_group: rpg, xhat, inv_std }, rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.map(kernels::silu);
        let rg = self.rg(&[x]);
        self.push(out, Op::Silu(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.map(kernels::gelu);
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Multi-head attention per group. `q: [G·Nq, D]`, `k, v: [G·Nk, D]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, groups: usize, heads: usize) -> Var {
        let (qv, kv, vv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        let d = qv.cols();
        assert!(kv.cols() == d && vv.cols() == d, "attention width");
        assert_eq!(kv.rows(), vv.rows(), "attention key/value rows");
        assert_eq!(d % heads, 0, "heads must divide width");
        let nq = qv.rows() / groups;
        let nk = kv.rows() / groups;
        assert!(nk >= 1, "attention needs at least one key");
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut out = Tensor::zeros(&[groups * nq, d]);
        let mut probs = vec![T::zero(); groups * heads * nq * nk];
        for g in 0..groups {
            for h in 0..heads {
                let qs = &qv.data()[g * nq * d..(g + 1) * nq * d];
                let ks = &kv.data()[g * nk * d..(g + 1) * nk * d];
                let vs = &vv.data()[g * nk * d..(g + 1) * nk * d];
                let p = &mut probs[(g * heads + h) * nq * nk..(g * heads + h + 1) * nq * nk];
                let os = &mut out.data_mut()[g * nq * d..(g + 1) * nq * d];
                attention_head_forward(
                    MatRef::col_block(qs, nq, d, h * dh, dh),
                    MatRef::col_block(ks, nk, d, h * dh, dh),
                    MatRef::col_block(vs, nk, d, h * dh, dh),
                    scale,
                    p,
                    MatMut::col_block(os, nq, d, h * dh, dh),
                );
            }
        }
        let rg = self.rg(&[q, k, v]);
        self.push(out, Op::Attention { q, k, v, groups, heads, probs }, rg)
    }

    /// Per group, stack the rows of `a` then the rows of `b`.
    pub fn concat_groups(&mut self, a: Var, b: Var, groups: usize) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let d = av.cols();
        assert_eq!(bv.cols(), d, "concat width");
        let (na, nb) = (av.rows() / groups, bv.rows() / groups);
        let mut data = Vec::with_capacity((na + nb) * groups * d);
        for g in 0..groups {
            data.extend_from_slice(&av.data()[g * na * d..(g + 1) * na * d]);
            data.extend_from_slice(&bv.data()[g * nb * d..(g + 1) * nb * d]);
        }
        let out = Tensor::from_vec(&[groups * (na + nb), d], data).unwrap();
        let rg = self.rg(&[a, b]);
        self.push(out, Op::ConcatGroups { a, b, groups }, rg)
    }

    /// Per group, rows `[start, start+len)`.
    pub fn slice_groups(&mut self, x: Var, groups: usize, start: usize, len: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let d = xv.cols();
        let n = xv.rows() / groups;
        assert!(start + len <= n, "slice_groups range");
        let mut data = Vec::with_capacity(groups * len * d);
        for g in 0..groups {
            data.extend_from_slice(&xv.data()[(g * n + start) * d..(g * n + start + len) * d]);
        }
        let out = Tensor::from_vec(&[groups * len, d], data).unwrap();
        let rg = self.rg(&[x]);
        self.push(out, Op::SliceGroups { x, groups, start }, rg)
    }

    /// Columns `[start, start+len)`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let c = xv.cols();
        assert!(start + len <= c, "slice_cols range");
        let mut data = Vec::with_capacity(xv.rows() * len);
        for row in xv.data().chunks(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let out = Tensor::from_vec(&[xv.rows(), len], data).unwrap();
        let rg = self.rg(&[x]);
        self.push(out, Op::SliceCols { x, start }, rg)
    }

    /// Row lookup `table[idx[i]]`.
    pub fn gather_rows(&mut self, table: Var, idx: Vec<usize>) -> Var {
        let tv = &self.nodes[table.0].value;
        let d = tv.cols();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in &idx {
            assert!(i < tv.rows(), "gather index {i} out of range {}", tv.rows());
            data.extend_from_slice(&tv.data()[i * d..(i + 1) * d]);
        }
        let out = Tensor::from_vec(&[idx.len(), d], data).unwrap();
        let rg = self.rg(&[table]);
        self.push(out, Op::GatherRows { table, idx }, rg)
    }

    /// Adjoint of `gather_rows`: a `[rows, D]` zero matrix with `x[i]` added at row `idx[i]`.
    pub fn scatter_rows(&mut self, x: Var, idx: Vec<usize>, rows: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let d = xv.cols();
        assert_eq!(idx.len(), xv.rows(), "scatter index count");
        let mut out = Tensor::zeros(&[rows, d]);
        for (r, &i) in idx.iter().enumerate() {
            assert!(i < rows, "scatter index {i} out of range {rows}");
            add_into(&mut out.data_mut()[i * d..(i + 1) * d], &xv.data()[r * d..(r + 1) * d]);
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::ScatterRows { x, idx }, rg)
    }

    /// Mean squared error against a constant target; scalar output.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>) -> Var {
        let pv = &self.nodes[pred.0].value;
        assert_eq!(pv.len(), target.len(), "mse length");
        let mut acc = T::zero();
        for (&a, &b) in pv.data().iter().zip(target.data()) {
            let e = a - b;
            acc = acc + e * e;
        }
        let n = T::from_usize(pv.len().max(1)).unwrap();
        let out = Tensor::from_vec(&[1, 1], vec![acc / n]).unwrap();
        let rg = self.rg(&[pred]);
        self.push(out, Op::Mse { pred, target: target.data().to_vec() }, rg)
    }

    /// `Σ w ⊙ x`; scalar output.
    pub fn weighted_sum(&mut self, x: Var, w: &Tensor<T>) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.len(), w.len(), "weighted_sum length");
        let mut acc = T::zero();
        for (&a, &b) in xv.data().iter().zip(w.data()) {
            acc = acc + a * b;
        }
        let out = Tensor::from_vec(&[1, 1], vec![acc]).unwrap();
        let rg = self.rg(&[x]);
        self.push(out, Op::WeightedSum { x, w: w.data().to_vec() }, rg)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward needs a scalar");
        let mut bufs: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        bufs[loss.0] = Some(vec![T::one()]);
        let mut scratch = Vec::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = bufs[i].take() else { continue };
            self.backprop_node(node, &dy, &mut bufs, &mut scratch);
            bufs[i] = Some(dy);
        }
        // Intermediate grads are not part of the contract; keep leaves only.
        for (i, b) in bufs.iter_mut().enumerate() {
            if !matches!(self.nodes[i].op, Op::Leaf) {
                *b = None;
            }
        }
        Grads { bufs }
    }

    fn buf<'b>(&self, bufs: &'b mut [Option<Vec<T>>], v: Var) -> Option<&'b mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(bufs[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        dy: &[T],
        bufs: &mut [Option<Vec<T>>],
        scratch: &mut Vec<T>,
    ) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, n) = (av.rows(), bv.cols());
                let dy = MatRef::new(dy, m, n);
                if let Some(da) = self.buf(bufs, *a) {
                    gemm(T::one(), dy, bv.as_mat().t(), T::one(), MatMut::new(da, m, av.cols()));
                }
                if let Some(db) = self.buf(bufs, *b) {
                    gemm(T::one(), av.as_mat().t(), dy, T::one(), MatMut::new(db, bv.rows(), n));
                }
            }
            Op::AddBias(x, b) => {
                if let Some(dx) = self.buf(bufs, *x) {
                    add_into(dx, dy);
                }
                if let Some(db) = self.buf(bufs, *b) {
                    let c = db.len();
                    for row in dy.chunks(c) {
                        add_into(db, row);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.buf(bufs, *a) {
                    add_into(da, dy);
                }
                if let Some(db) = self.buf(bufs, *b) {
                    add_into(db, dy);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.buf(bufs, *a) {
                    add_into(da, dy);
                }
                if let Some(db) = self.buf(bufs, *b) {
                    for (o, &g) in db.iter_mut().zip(dy) {
                        *o = *o - g;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(dx) = self.buf(bufs, *x) {
                    for (o, &g) in dx.iter_mut().zip(dy) {
                        *o = *o + g * *c;
                    }
                }
            }
            Op::MulGroups { x, g, rows_per_group } => {
                let (xv, gv) = (self.value(*x), self.value(*g));
                let d = xv.cols();
                if let Some(dx) = self.buf(bufs, *x) {
                    for r in 0..xv.rows() {
                        let gr = &gv.data()[(r / rows_per_group) * d..];
                        for j in 0..d {
                            dx[r * d + j] = dx[r * d + j] + dy[r * d + j] * gr[j];
                        }
                    }
                }
                if let Some(dg) = self.buf(bufs, *g) {
                    for r in 0..xv.rows() {
                        let base = (r / rows_per_group) * d;
                        for j in 0..d {
                            dg[base + j] = dg[base + j] + dy[r * d + j] * xv.data()[r * d + j];
                        }
                    }
                }
            }
            Op::ModLn { x, scale, shift, rows_per_group, xhat, inv_std } => {
                let d = self.value(*x).cols();
                let sv = self.value(*scale).data().to_vec();
                // Buffers are moved out so the kernel can hold all three mutably.
                let mut dx = self.buf(bufs, *x).map(std::mem::take);
                let mut dsc = self.buf(bufs, *scale).map(std::mem::take);
                let mut dsh = self.buf(bufs, *shift).map(std::mem::take);
                kernels::mod_ln_backward(
                    dy,
                    xhat,
                    inv_std,
                    &sv,
                    d,
                    *rows_per_group,
                    dx.as_deref_mut(),
                    dsc.as_deref_mut(),
                    dsh.as_deref_mut(),
                );
                restore(bufs, *x, dx);
                restore(bufs, *scale, dsc);
                restore(bufs, *shift, dsh);
            }
            Op::Silu(x) => {
                let xv = self.value(*x);
                if let Some(dx) = self.buf(bufs, *x) {
                    for ((o, &g), &v) in dx.iter_mut().zip(dy).zip(xv.data()) {
                        *o = *o + g * kernels::silu_grad(v);
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                if let Some(dx) = self.buf(bufs, *x) {
                    for ((o, &g), &v) in dx.iter_mut().zip(dy).zip(xv.data()) {
                        *o = *o + g * kernels::gelu_grad(v);
                    }
                }
            }
            Op::Attention { q, k, v, groups, heads, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = qv.cols();
                let nq = qv.rows() / groups;
                let nk = kv.rows() / groups;
                let dh = d / heads;
                let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
                let mut dq = self.buf(bufs, *q).map(std::mem::take);
                let mut dk = self.buf(bufs, *k).map(std::mem::take);
                let mut dv = self.buf(bufs, *v).map(std::mem::take);
                for g in 0..*groups {
                    for h in 0..*heads {
                        let qs = &qv.data()[g * nq * d..(g + 1) * nq * d];
                        let ks = &kv.data()[g * nk * d..(g + 1) * nk * d];
                        let vs = &vv.data()[g * nk * d..(g + 1) * nk * d];
                        let dys = &dy[g * nq * d..(g + 1) * nq * d];
                        let p = &probs[(g * heads + h) * nq * nk..(g * heads + h + 1) * nq * nk];
                        attention_head_backward(
                            MatRef::col_block(qs, nq, d, h * dh, dh),
                            MatRef::col_block(ks, nk, d, h * dh, dh),
                            MatRef::col_block(vs, nk, d, h * dh, dh),
                            p,
                            MatRef::col_block(dys, nq, d, h * dh, dh),
                            scale,
                            scratch,
                            dq.as_mut().map(|b| {
                                MatMut::col_block(&mut b[g * nq * d..(g + 1) * nq * d], nq, d, h * dh, dh)
                            }),
                            dk.as_mut().map(|b| {
                                MatMut::col_block(&mut b[g * nk * d..(g + 1) * nk * d], nk, d, h * dh, dh)
                            }),
                            dv.as_mut().map(|b| {
                                MatMut::col_block(&mut b[g * nk * d..(g + 1) * nk * d], nk, d, h * dh, dh)
                            }),
                        );
                    }
                }
                restore(bufs, *q, dq);
                restore(bufs, *k, dk);
                restore(bufs, *v, dv);
            }
            Op::ConcatGroups { a, b, groups } => {
                let d = self.value(*a).cols();
                let na = self.value(*a).rows() / groups;
                let nb = self.value(*b).rows() / groups;
                if let Some(da) = self.buf(bufs, *a) {
                    for g in 0..*groups {
                        let src = &dy[g * (na + nb) * d..(g * (na + nb) + na) * d];
                        add_into(&mut da[g * na * d..(g + 1) * na * d], src);
                    }
                }
                if let Some(db) = self.buf(bufs, *b) {
                    for g in 0..*groups {
                        let src = &dy[(g * (na + nb) + na) * d..(g + 1) * (na + nb) * d];
                        add_into(&mut db[g * nb * d..(g + 1) * nb * d], src);
                    }
                }
            }
            Op::SliceGroups { x, groups, start } => {
                let xv = self.value(*x);
                let d = xv.cols();
                let n = xv.rows() / groups;
                let len = node.value.rows() / groups;
                if let Some(dx) = self.buf(bufs, *x) {
                    for g in 0..*groups {
                        let dst = &mut dx[(g * n + start) * d..(g * n + start + len) * d];
                        add_into(dst, &dy[g * len * d..(g + 1) * len * d]);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let c = self.value(*x).cols();
                let len = node.value.cols();
                if let Some(dx) = self.buf(bufs, *x) {
                    for (r, row) in dy.chunks(len).enumerate() {
                        add_into(&mut dx[r * c + start..r * c + start + len], row);
                    }
                }
            }
            Op::GatherRows { table, idx } => {
                let d = self.value(*table).cols();
                if let Some(dt) = self.buf(bufs, *table) {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut dt[i * d..(i + 1) * d], &dy[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::ScatterRows { x, idx } => {
                let d = node.value.cols();
                if let Some(dx) = self.buf(bufs, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut dx[r * d..(r + 1) * d], &dy[i * d..(i + 1) * d]);
                    }
                }
            }
            Op::Mse { pred, target } => {
                let pv = self.value(*pred);
                let n = T::from_usize(pv.len().max(1)).unwrap();
                let c = dy[0] * T::lit(2.0) / n;
                if let Some(dp) = self.buf(bufs, *pred) {
                    for ((o, &a), &b) in dp.iter_mut().zip(pv.data()).zip(target) {
                        *o = *o + c * (a - b);
                    }
                }
            }
            Op::WeightedSum { x, w } => {
                if let Some(dx) = self.buf(bufs, *x) {
                    for (o, &wv) in dx.iter_mut().zip(w) {
                        *o = *o + dy[0] * wv;
                    }
                }
            }
        }
    }
}

fn as_matrix<T: Real>(t: Tensor<T>) -> Tensor<T> {
    match t.rank() {
        2 => t,
        0 | 1 => {
            let n = t.len();
            t.reshape(&[1, n]).unwrap()
        }
        _ => {
            let c = t.cols();
            let r = t.len() / c.max(1);
            t.reshape(&[r, c]).unwrap()
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (o, &g) in dst.iter_mut().zip(src) {
        *o = *o + g;
    }
}

fn restore<T>(bufs: &mut [Option<Vec<T>>], v: Var, b: Option<Vec<T>>) {
    if let Some(b) = b {
        bufs[v.0] = Some(b);
    }
}
