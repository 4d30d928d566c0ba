//! Dynamically recorded computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and `backward` is a single reverse sweep.

use std::borrow::Cow;

use super::kernels;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Silu(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<T>,
    },
    Rope {
        x: Var,
        positions: Vec<usize>,
        n_heads: usize,
        base: f64,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        probs: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    MergeRows {
        parts: Vec<(Var, Vec<usize>)>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        scale: T,
        probs: Vec<T>,
    },
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recording of primitive tensor operations.
///
/// Leaves may borrow their values (parameters) for the graph's lifetime.
pub struct Graph<'a, T: Scalar = f32> {
    nodes: Vec<Node<'a, T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`; exactly zero when `v` is not on any path to the loss.
    pub fn get(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn has(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

impl<'a, T: Scalar> Default for Graph<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
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

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf borrowing its value, typically a model parameter.
    pub fn param(&mut self, value: &'a Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var], name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("{name} produced a non-finite value")));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(Error::Dimension(format!("{what} must be a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul lhs")?;
        let (k2, n) = self.matrix_dims(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions disagree: [{m},{k}] x [{k2},{n}]"
            )));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), &[a, b], "matmul")
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push(t, Op::Add(a, b), &[a, b], "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push(t, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x * s).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push(t, Op::Scale(a, s), &[a], "scale")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &x| acc + x);
        self.push(Tensor::scalar(s), Op::Sum(a), &[a], "sum")
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| kernels::silu(x)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push(t, Op::Silu(a), &[a], "silu")
    }

    /// Row-wise RMS normalization followed by an elementwise gain.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: T) -> Result<Var> {
        let vx = self.value(x);
        let vg = self.value(gain);
        let cols = vx.cols();
        if vg.len() != cols {
            return Err(Error::Dimension(format!(
                "rmsnorm gain has {} entries but rows have {cols}",
                vg.len()
            )));
        }
        let rows = vx.rows();
        let mut out = vec![T::zero(); vx.len()];
        let mut inv_rms = Vec::with_capacity(rows);
        for r in 0..rows {
            inv_rms.push(kernels::rmsnorm_row(
                vx.row(r),
                vg.data(),
                eps,
                &mut out[r * cols..(r + 1) * cols],
            ));
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        self.push(t, Op::RmsNorm { x, gain, inv_rms }, &[x, gain], "rmsnorm")
    }

    /// Rotary position encoding of row `i` at absolute position `positions[i]`.
    pub fn rope(&mut self, x: Var, positions: &[usize], n_heads: usize, base: f64) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(x, "rope input")?;
        if rows != positions.len() {
            return Err(Error::Dimension(format!(
                "rope got {} positions for {rows} rows",
                positions.len()
            )));
        }
        check_heads(cols, n_heads)?;
        if !(cols / n_heads).is_multiple_of(2) {
            return Err(Error::Config(format!("head width {} must be even for rope", cols / n_heads)));
        }
        let mut t = self.value(x).clone();
        for (r, &p) in positions.iter().enumerate() {
            kernels::rope_row(t.row_mut(r), p, n_heads, base, false);
        }
        let op = Op::Rope {
            x,
            positions: positions.to_vec(),
            n_heads,
            base,
        };
        self.push(t, op, &[x], "rope")
    }

    /// Multi-head scaled dot-product attention where row `t` attends to rows `0..=t`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, n_heads: usize) -> Result<Var> {
        let (tq, d) = self.matrix_dims(q, "attention q")?;
        let (tk, dk) = self.matrix_dims(k, "attention k")?;
        let (tv, dv) = self.matrix_dims(v, "attention v")?;
        if tq != tk || tq != tv || d != dk || d != dv {
            return Err(Error::Dimension(format!(
                "attention q/k/v shapes disagree: [{tq},{d}] [{tk},{dk}] [{tv},{dv}]"
            )));
        }
        check_heads(d, n_heads)?;
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![T::zero(); tq * d];
        let mut probs = vec![T::zero(); n_heads * tq * tq];
        let mut scratch = Vec::new();
        for t in 0..tq {
            let stride = tq * tq;
            let base = t * tq;
            attend_row(
                vq.row(t),
                vk.data(),
                vv.data(),
                t,
                n_heads,
                &mut out[t * d..(t + 1) * d],
                &mut probs[base..],
                stride,
                &mut scratch,
            );
        }
        let op = Op::Attention {
            q,
            k,
            v,
            n_heads,
            probs,
        };
        self.push(Tensor::matrix(tq, d, out)?, op, &[q, k, v], "attention")
    }

    /// Row lookup `table[ids[i]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (n, d) = self.matrix_dims(table, "embedding table")?;
        let vt = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= n {
                return Err(Error::Index(format!("embedding id {id} outside table of {n} rows")));
            }
            out.extend_from_slice(vt.row(id));
        }
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        self.push(Tensor::matrix(ids.len(), d, out)?, op, &[table], "embedding")
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = self.matrix_dims(x, "gather input")?;
        let vx = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(Error::Index(format!("row {r} outside [0,{n})")));
            }
            out.extend_from_slice(vx.row(r));
        }
        let op = Op::GatherRows {
            x,
            rows: rows.to_vec(),
        };
        self.push(Tensor::matrix(rows.len(), d, out)?, op, &[x], "gather_rows")
    }

    /// Inverse of a partition into `gather_rows` parts: row `idx[j]` of the output
    /// is row `j` of the part. Every output row must be written exactly once.
    pub fn merge_rows(&mut self, parts: &[(Var, &[usize])], n_rows: usize) -> Result<Var> {
        let mut d = None;
        let mut covered = vec![false; n_rows];
        for (v, idx) in parts {
            let (r, c) = self.matrix_dims(*v, "merge part")?;
            if r != idx.len() {
                return Err(Error::Dimension(format!(
                    "merge part has {r} rows but {} indices",
                    idx.len()
                )));
            }
            if *d.get_or_insert(c) != c {
                return Err(Error::Dimension("merge parts differ in width".into()));
            }
            for &i in idx.iter() {
                if i >= n_rows || covered[i] {
                    return Err(Error::Index(format!("merge row {i} out of range or duplicated")));
                }
                covered[i] = true;
            }
        }
        if covered.iter().any(|c| !c) {
            return Err(Error::Index("merge leaves rows unassigned".into()));
        }
        let d = d.unwrap_or(0);
        let mut out = vec![T::zero(); n_rows * d];
        for (v, idx) in parts {
            let vp = self.value(*v);
            for (j, &i) in idx.iter().enumerate() {
                out[i * d..(i + 1) * d].copy_from_slice(vp.row(j));
            }
        }
        let inputs: Vec<Var> = parts.iter().map(|(v, _)| *v).collect();
        let op = Op::MergeRows {
            parts: parts.iter().map(|(v, i)| (*v, i.to_vec())).collect(),
        };
        self.push(Tensor::matrix(n_rows, d, out)?, op, &inputs, "merge_rows")
    }

    /// Mean over masked rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let count = mask.iter().filter(|&&m| m).count();
        let scale = if count == 0 {
            T::zero()
        } else {
            T::one() / T::of(count as f64)
        };
        self.cross_entropy_scaled(logits, targets, mask, scale)
    }

    /// `scale * sum` over masked rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy_scaled(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
        scale: T,
    ) -> Result<Var> {
        let (n, width) = self.matrix_dims(logits, "cross entropy logits")?;
        if targets.len() != n || mask.len() != n {
            return Err(Error::Dimension(format!(
                "cross entropy needs one target and mask bit per row: {n} rows, {} targets, {} mask bits",
                targets.len(),
                mask.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= width) {
            return Err(Error::Index(format!("target {bad} outside logits width {width}")));
        }
        let vl = self.value(logits);
        let mut probs = vec![T::zero(); n * width];
        let mut total = T::zero();
        for r in 0..n {
            if !mask[r] {
                continue;
            }
            let row = vl.row(r);
            let lse = kernels::log_sum_exp(row);
            for (p, &x) in probs[r * width..(r + 1) * width].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
            total += lse - row[targets[r]];
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            mask: mask.to_vec(),
            scale,
            probs,
        };
        self.push(Tensor::scalar(total * scale), op, &[logits], "cross_entropy")
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Dimension("backward needs a scalar loss".into()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(
            self.value(loss).shape().to_vec(),
            vec![T::one()],
        )?);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        // Only leaves keep gradients; interior nodes are dropped.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if self.wants(*a) {
                    let da = kernels::matmul_grad_a(g.data(), vb.data(), m, k, n);
                    self.accumulate(grads, *a, Tensor::matrix(m, k, da)?);
                }
                if self.wants(*b) {
                    let db = kernels::matmul_grad_b(va.data(), g.data(), m, k, n);
                    self.accumulate(grads, *b, Tensor::matrix(k, n, db)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(va.shape().to_vec(), d)?);
                }
                if self.wants(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(vb.shape().to_vec(), d)?);
                }
            }
            Op::Scale(a, s) => {
                let d = g.data().iter().map(|&x| x * *s).collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Sum(a) => {
                let va = self.value(*a);
                self.accumulate(grads, *a, Tensor::full(va.shape(), g.item()));
            }
            Op::Silu(a) => {
                let va = self.value(*a);
                let d = va
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gy)| {
                        let s = kernels::sigmoid(x);
                        gy * (s + x * s * (T::one() - s))
                    })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(va.shape().to_vec(), d)?);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (vx, vg) = (self.value(*x), self.value(*gain));
                let cols = vx.cols();
                let rows = vx.rows();
                let mut dx = vec![T::zero(); vx.len()];
                let mut dgain = vec![T::zero(); cols];
                let nf = T::of(cols as f64);
                for r in 0..rows {
                    let xr = vx.row(r);
                    let gr = g.row(r);
                    let inv = inv_rms[r];
                    let mut dot = T::zero();
                    for c in 0..cols {
                        let nrm = xr[c] * inv;
                        let dn = gr[c] * vg.data()[c];
                        dot += dn * nrm;
                        dgain[c] += gr[c] * nrm;
                    }
                    let mean = dot / nf;
                    for c in 0..cols {
                        let nrm = xr[c] * inv;
                        let dn = gr[c] * vg.data()[c];
                        dx[r * cols + c] = inv * (dn - nrm * mean);
                    }
                }
                if self.wants(*x) {
                    self.accumulate(grads, *x, Tensor::new(vx.shape().to_vec(), dx)?);
                }
                if self.wants(*gain) {
                    self.accumulate(grads, *gain, Tensor::new(vg.shape().to_vec(), dgain)?);
                }
            }
            Op::Rope {
                x,
                positions,
                n_heads,
                base,
            } => {
                let mut d = g.clone();
                for (r, &p) in positions.iter().enumerate() {
                    kernels::rope_row(d.row_mut(r), p, *n_heads, *base, true);
                }
                self.accumulate(grads, *x, d);
            }
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                probs,
            } => {
                let (dq, dk, dv) = attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    g,
                    *n_heads,
                    probs,
                )?;
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let vt = self.value(*table);
                    let mut d = Tensor::zeros(vt.shape());
                    for (r, &id) in ids.iter().enumerate() {
                        for (a, &b) in d.row_mut(id).iter_mut().zip(g.row(r)) {
                            *a += b;
                        }
                    }
                    self.accumulate(grads, *table, d);
                }
            }
            Op::GatherRows { x, rows } => {
                if self.wants(*x) {
                    let mut d = Tensor::zeros(self.value(*x).shape());
                    for (j, &r) in rows.iter().enumerate() {
                        for (a, &b) in d.row_mut(r).iter_mut().zip(g.row(j)) {
                            *a += b;
                        }
                    }
                    self.accumulate(grads, *x, d);
                }
            }
            Op::MergeRows { parts } => {
                let d = g.cols();
                for (v, idx) in parts {
                    if !self.wants(*v) {
                        continue;
                    }
                    let mut out = Vec::with_capacity(idx.len() * d);
                    for &i in idx {
                        out.extend_from_slice(g.row(i));
                    }
                    self.accumulate(grads, *v, Tensor::matrix(idx.len(), d, out)?);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                scale,
                probs,
            } => {
                let vl = self.value(*logits);
                let width = vl.cols();
                let up = g.item() * *scale;
                let mut d = vec![T::zero(); vl.len()];
                for r in 0..vl.rows() {
                    if !mask[r] {
                        continue;
                    }
                    let drow = &mut d[r * width..(r + 1) * width];
                    for (o, &p) in drow.iter_mut().zip(&probs[r * width..(r + 1) * width]) {
                        *o = p * up;
                    }
                    drow[targets[r]] -= up;
                }
                self.accumulate(grads, *logits, Tensor::new(vl.shape().to_vec(), d)?);
            }
        }
        Ok(())
    }
}

fn check_heads(width: usize, n_heads: usize) -> Result<()> {
    if n_heads == 0 || !width.is_multiple_of(n_heads) {
        return Err(Error::Config(format!(
            "model width {width} is not divisible by {n_heads} heads"
        )));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn attend_row<T: Scalar>(
    q: &[T],
    keys: &[T],
    values: &[T],
    t: usize,
    n_heads: usize,
    out: &mut [T],
    probs: &mut [T],
    stride: usize,
    scratch: &mut Vec<T>,
) {
    kernels::attend_query(q, keys, values, t, n_heads, out, Some((probs, stride)), scratch);
}

fn attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    dout: &Tensor<T>,
    n_heads: usize,
    probs: &[T],
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (tn, d) = (q.shape()[0], q.shape()[1]);
    let hd = d / n_heads;
    let scale = T::one() / T::of(hd as f64).sqrt();
    let mut dq = vec![T::zero(); tn * d];
    let mut dk = vec![T::zero(); tn * d];
    let mut dv = vec![T::zero(); tn * d];
    let mut dp = vec![T::zero(); tn];
    for h in 0..n_heads {
        let cols = h * hd..(h + 1) * hd;
        for t in 0..tn {
            let p = &probs[h * tn * tn + t * tn..h * tn * tn + t * tn + t + 1];
            let go = &dout.row(t)[cols.clone()];
            let mut weighted = T::zero();
            for j in 0..=t {
                let vj = &v.row(j)[cols.clone()];
                dp[j] = kernels::dot(go, vj);
                weighted += p[j] * dp[j];
                for (a, &b) in dv[j * d + h * hd..j * d + (h + 1) * hd].iter_mut().zip(go) {
                    *a += p[j] * b;
                }
            }
            let qt = &q.row(t)[cols.clone()];
            for j in 0..=t {
                let ds = p[j] * (dp[j] - weighted) * scale;
                if ds == T::zero() {
                    continue;
                }
                let kj = &k.row(j)[cols.clone()];
                for (a, &b) in dq[t * d + h * hd..t * d + (h + 1) * hd].iter_mut().zip(kj) {
                    *a += ds * b;
                }
                for (a, &b) in dk[j * d + h * hd..j * d + (h + 1) * hd].iter_mut().zip(qt) {
                    *a += ds * b;
                }
            }
        }
    }
    Ok((
        Tensor::matrix(tn, d, dq)?,
        Tensor::matrix(tn, d, dk)?,
        Tensor::matrix(tn, d, dv)?,
    ))
}
