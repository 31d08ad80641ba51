//! Reverse-mode automatic differentiation over a flat tape.
//!
//! The transformer forward pass is written once, as tape operations; training
//! runs the tape in recording mode and calls [`Tape::backward`], while
//! inference runs the same builders with recording off (values are computed,
//! no history is kept). This guarantees the gradients tested against finite
//! differences belong to exactly the forward pass the sampler uses.
//!
//! Gradient work is pruned by need: a node "needs grad" iff any of its inputs
//! does, and backward only produces gradients for needed inputs. During
//! LoRA-only training this skips every matmul that would only produce
//! gradients for frozen weights.
//!
//! Attention is a single fused op with a hand-derived backward (softmax
//! weights are saved from the forward pass):
//!
//! ```text
//! dV = Wᵀ·dO,   dW = dO·Vᵀ,
//! dS = W ⊙ (dW − rowsum(dW ⊙ W)),
//! dQ = scale·dS·K,   dK = scale·dSᵀ·Q.
//! ```

use std::sync::Arc;

use crate::attention::{gather_head, mha_forward, scatter_head};
use crate::error::{CoreError, Result};
use crate::rope::{rotate_buffer, RopeTable};
use crate::scalar::Scalar;
use crate::tensor::{mm_nn, mm_nt, mm_tn, sigmoid, Tensor};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T: Scalar> {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    /// `[n×d] + [d]` broadcast over rows.
    AddRow(Var, Var),
    /// `[n×d] ⊙ [d]` broadcast over rows.
    MulRow(Var, Var),
    /// Non-affine layer norm over the trailing dimension.
    LayerNorm(Var, T),
    Silu(Var),
    /// Pairwise rotation by a precomputed table, per head.
    Rope(Var, Arc<RopeTable<T>>, usize),
    /// Fused multihead attention; `weights` are the saved softmax rows
    /// stacked `[heads·n_q, n_k]` (empty when no input needs gradients).
    Attention { q: Var, k: Var, v: Var, heads: usize, scale: T, weights: Vec<T> },
    ConcatRows(Var, Var),
    SliceCols(Var, usize, usize),
    /// Gathers rows of a `[vocab×d]` table (the table is the differentiable input).
    GatherRows(Var, Vec<usize>),
    /// `out.flat[i] = in.flat[table[i]]` under a new shape (layout permutation).
    Reindex(Var, Arc<Vec<usize>>),
    Reshape(Var),
    /// Sum of squares, yielding a `[1]` scalar.
    SumSq(Var),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    needs: bool,
    op: Op<T>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`]. Only leaf
/// gradients are retained; intermediate gradients are freed during the pass.
pub struct Grads<T: Scalar> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Removes and returns the gradient for `v`, if any was produced.
    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.slots[v.0].take()
    }

    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.slots[v.0].as_ref()
    }
}

/// Flat computation tape. Create with recording on for training, off for
/// inference (same builders, no history).
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    recording: bool,
}

impl<T: Scalar> Tape<T> {
    pub fn new(recording: bool) -> Self {
        Tape { nodes: Vec::new(), recording }
    }

    pub fn recording(&self) -> bool {
        self.recording
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

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs: bool) -> Var {
        if self.recording {
            self.nodes.push(Node { value, needs, op });
        } else {
            self.nodes.push(Node { value, needs: false, op: Op::Leaf });
        }
        Var(self.nodes.len() - 1)
    }

    /// Inserts an input tensor. `trainable` marks it as a gradient target.
    pub fn leaf(&mut self, value: Tensor<T>, trainable: bool) -> Var {
        let needs = trainable && self.recording;
        self.nodes.push(Node { value, needs, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Matmul(a, b), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).scale(c);
        let needs = self.needs(x);
        self.push(value, Op::Scale(x, c), needs)
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let value = self.value(x).add_row(self.value(row))?;
        let needs = self.needs(x) || self.needs(row);
        Ok(self.push(value, Op::AddRow(x, row), needs))
    }

    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let value = self.value(x).mul_row(self.value(row))?;
        let needs = self.needs(x) || self.needs(row);
        Ok(self.push(value, Op::MulRow(x, row), needs))
    }

    pub fn layer_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        let value = self.value(x).layer_norm_rows(eps)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::LayerNorm(x, eps), needs))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).silu();
        let needs = self.needs(x);
        self.push(value, Op::Silu(x), needs)
    }

    /// Rotary embedding of `x [n × heads·head_dim]` by a shared table.
    pub fn rope(&mut self, x: Var, table: &Arc<RopeTable<T>>, heads: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = (xv.dim(0), xv.dim(1));
        if xv.ndim() != 2 || n != table.n_tokens() || d != heads * 2 * table.half_dim() {
            return Err(CoreError::Shape(format!(
                "rope expects [{}, {}], got {:?}",
                table.n_tokens(),
                heads * 2 * table.half_dim(),
                xv.shape()
            )));
        }
        let out = rotate_buffer(xv.data(), table, n, heads, false);
        let value = Tensor::new(&[n, d], out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Rope(x, Arc::clone(table), heads), needs))
    }

    /// Fused multihead attention over flat `[n, heads·head_dim]` inputs with
    /// pre-softmax scale `1/√head_dim`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.ndim() != 2 || kv.ndim() != 2 || vv.ndim() != 2 {
            return Err(CoreError::Shape("attention inputs must be 2-D".into()));
        }
        let d = qv.dim(1);
        if heads == 0 || d % heads != 0 || kv.dim(1) != d || vv.dim(1) != d || kv.dim(0) != vv.dim(0)
        {
            return Err(CoreError::Shape(format!(
                "attention shapes inconsistent: q {:?}, k {:?}, v {:?}, heads {heads}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            )));
        }
        let (n_q, n_k) = (qv.dim(0), kv.dim(0));
        let hd = d / heads;
        let scale = T::one() / T::of((hd as f64).sqrt());
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        let keep = self.recording && needs;
        let (out, weights) =
            mha_forward(qv.data(), kv.data(), vv.data(), n_q, n_k, heads, hd, scale, keep);
        let value = Tensor::new(&[n_q, d], out)?;
        Ok(self.push(value, Op::Attention { q, k, v, heads, scale, weights }, needs))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).concat_rows(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::ConcatRows(a, b), needs))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).slice_cols(start, len)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::SliceCols(x, start, len), needs))
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let value = self.value(table).gather_rows(ids)?;
        let needs = self.needs(table);
        Ok(self.push(value, Op::GatherRows(table, ids.to_vec()), needs))
    }

    pub fn reindex(&mut self, x: Var, table: &Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reindex(table, shape)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reindex(x, Arc::clone(table)), needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), needs))
    }

    pub fn sum_sq(&mut self, x: Var) -> Var {
        let mut acc = T::zero();
        for &v in self.value(x).data() {
            acc = acc + v * v;
        }
        let needs = self.needs(x);
        self.push(Tensor::scalar(acc), Op::SumSq(x), needs)
    }

    /// Reverse pass from a scalar root. Produces gradients only for nodes on
    /// a path from a trainable leaf to the root.
    pub fn backward(&self, root: Var) -> Result<Grads<T>> {
        if !self.recording {
            return Err(CoreError::Invalid("backward on a non-recording tape".into()));
        }
        if self.value(root).numel() != 1 {
            return Err(CoreError::Invalid(format!(
                "backward root must be scalar, got {:?}",
                self.value(root).shape()
            )));
        }
        let mut slots: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.needs(root) {
            // Nothing trainable feeds the root; all gradients are zero/absent.
            return Ok(Grads { slots });
        }
        slots[root.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=root.0).rev() {
            if slots[idx].is_none() || !self.nodes[idx].needs {
                continue;
            }
            let g = slots[idx].take().unwrap();
            self.backward_node(idx, &g, &mut slots)?;
            // Only leaf gradients are kept for callers; intermediate
            // gradients are dropped as soon as they have been propagated.
            if matches!(self.nodes[idx].op, Op::Leaf) {
                slots[idx] = Some(g);
            }
        }
        Ok(Grads { slots })
    }

    fn accum(&self, slots: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) -> Result<()> {
        slots[v.0] = Some(match slots[v.0].take() {
            Some(existing) => existing.add(&delta)?,
            None => delta,
        });
        Ok(())
    }

    fn backward_node(
        &self,
        idx: usize,
        g: &Tensor<T>,
        slots: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                if self.needs(*a) {
                    let da = g.matmul_nt(self.value(*b))?;
                    self.accum(slots, *a, da)?;
                }
                if self.needs(*b) {
                    let db = self.value(*a).matmul_tn(g)?;
                    self.accum(slots, *b, db)?;
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    self.accum(slots, *a, g.clone())?;
                }
                if self.needs(*b) {
                    self.accum(slots, *b, g.clone())?;
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    self.accum(slots, *a, g.clone())?;
                }
                if self.needs(*b) {
                    self.accum(slots, *b, g.scale(-T::one()))?;
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accum(slots, *a, g.mul(self.value(*b))?)?;
                }
                if self.needs(*b) {
                    self.accum(slots, *b, g.mul(self.value(*a))?)?;
                }
            }
            Op::Scale(x, c) => {
                if self.needs(*x) {
                    self.accum(slots, *x, g.scale(*c))?;
                }
            }
            Op::AddRow(x, row) => {
                if self.needs(*x) {
                    self.accum(slots, *x, g.clone())?;
                }
                if self.needs(*row) {
                    self.accum(slots, *row, g.sum_rows()?)?;
                }
            }
            Op::MulRow(x, row) => {
                if self.needs(*x) {
                    self.accum(slots, *x, g.mul_row(self.value(*row))?)?;
                }
                if self.needs(*row) {
                    self.accum(slots, *row, g.mul(self.value(*x))?.sum_rows()?)?;
                }
            }
            Op::LayerNorm(x, eps) => {
                if self.needs(*x) {
                    self.accum(slots, *x, layer_norm_backward(self.value(*x), g, *eps)?)?;
                }
            }
            Op::Silu(x) => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &gy)| {
                            let s = sigmoid(x);
                            gy * s * (T::one() + x * (T::one() - s))
                        })
                        .collect();
                    self.accum(slots, *x, Tensor::new(xv.shape(), data)?)?;
                }
            }
            Op::Rope(x, table, heads) => {
                if self.needs(*x) {
                    let n = g.dim(0);
                    let out = rotate_buffer(g.data(), table, n, *heads, true);
                    self.accum(slots, *x, Tensor::new(g.shape(), out)?)?;
                }
            }
            Op::Attention { q, k, v, heads, scale, weights } => {
                self.attention_backward(*q, *k, *v, *heads, *scale, weights, g, slots)?;
            }
            Op::ConcatRows(a, b) => {
                let ra = self.value(*a).dim(0);
                let rb = self.value(*b).dim(0);
                if self.needs(*a) {
                    self.accum(slots, *a, g.slice_rows(0, ra)?)?;
                }
                if self.needs(*b) {
                    self.accum(slots, *b, g.slice_rows(ra, rb)?)?;
                }
            }
            Op::SliceCols(x, start, len) => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let (n, d) = (xv.dim(0), xv.dim(1));
                    let mut out = vec![T::zero(); n * d];
                    for i in 0..n {
                        out[i * d + start..i * d + start + len]
                            .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                    }
                    self.accum(slots, *x, Tensor::new(&[n, d], out)?)?;
                }
            }
            Op::GatherRows(table, ids) => {
                if self.needs(*table) {
                    let tv = self.value(*table);
                    let (rows, d) = (tv.dim(0), tv.dim(1));
                    let mut out = vec![T::zero(); rows * d];
                    for (pos, &id) in ids.iter().enumerate() {
                        let src = &g.data()[pos * d..(pos + 1) * d];
                        let dst = &mut out[id * d..(id + 1) * d];
                        for c in 0..d {
                            dst[c] = dst[c] + src[c];
                        }
                    }
                    self.accum(slots, *table, Tensor::new(&[rows, d], out)?)?;
                }
            }
            Op::Reindex(x, table) => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let mut out = vec![T::zero(); xv.numel()];
                    for (i, &src) in table.iter().enumerate() {
                        out[src] = out[src] + g.data()[i];
                    }
                    self.accum(slots, *x, Tensor::new(xv.shape(), out)?)?;
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    self.accum(slots, *x, g.reshape(self.value(*x).shape())?)?;
                }
            }
            Op::SumSq(x) => {
                if self.needs(*x) {
                    let g0 = g.data()[0];
                    self.accum(slots, *x, self.value(*x).scale((T::one() + T::one()) * g0))?;
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: T,
        weights: &[T],
        g: &Tensor<T>,
        slots: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n_q, d) = (qv.dim(0), qv.dim(1));
        let n_k = kv.dim(0);
        let hd = d / heads;
        let (need_q, need_k, need_v) = (self.needs(q), self.needs(k), self.needs(v));
        let mut dq = if need_q { vec![T::zero(); n_q * d] } else { Vec::new() };
        let mut dk = if need_k { vec![T::zero(); n_k * d] } else { Vec::new() };
        let mut dv = if need_v { vec![T::zero(); n_k * d] } else { Vec::new() };
        let mut gh = vec![T::zero(); n_q * hd];
        let mut qh = vec![T::zero(); n_q * hd];
        let mut kh = vec![T::zero(); n_k * hd];
        let mut vh = vec![T::zero(); n_k * hd];
        for h in 0..heads {
            let w_h = &weights[h * n_q * n_k..(h + 1) * n_q * n_k];
            gather_head(g.data(), &mut gh, n_q, heads, hd, h);
            if need_v {
                let dvh = mm_tn(w_h, &gh, n_q, n_k, hd);
                scatter_head(&dvh, &mut dv, n_k, heads, hd, h);
            }
            if need_q || need_k {
                gather_head(vv.data(), &mut vh, n_k, heads, hd, h);
                let mut ds = mm_nt(&gh, &vh, n_q, hd, n_k); // dW
                // dS = W ⊙ (dW − rowsum(dW ⊙ W))
                for i in 0..n_q {
                    let wr = &w_h[i * n_k..(i + 1) * n_k];
                    let dr = &mut ds[i * n_k..(i + 1) * n_k];
                    let mut dot = T::zero();
                    for j in 0..n_k {
                        dot = dot + dr[j] * wr[j];
                    }
                    for j in 0..n_k {
                        dr[j] = wr[j] * (dr[j] - dot);
                    }
                }
                if need_q {
                    gather_head(kv.data(), &mut kh, n_k, heads, hd, h);
                    let mut dqh = mm_nn(&ds, &kh, n_q, n_k, hd);
                    for x in dqh.iter_mut() {
                        *x = *x * scale;
                    }
                    scatter_head(&dqh, &mut dq, n_q, heads, hd, h);
                }
                if need_k {
                    gather_head(qv.data(), &mut qh, n_q, heads, hd, h);
                    let mut dkh = mm_tn(&ds, &qh, n_q, n_k, hd);
                    for x in dkh.iter_mut() {
                        *x = *x * scale;
                    }
                    scatter_head(&dkh, &mut dk, n_k, heads, hd, h);
                }
            }
        }
        if need_q {
            self.accum(slots, q, Tensor::new(&[n_q, d], dq)?)?;
        }
        if need_k {
            self.accum(slots, k, Tensor::new(&[n_k, d], dk)?)?;
        }
        if need_v {
            self.accum(slots, v, Tensor::new(&[n_k, d], dv)?)?;
        }
        Ok(())
    }
}

fn layer_norm_backward<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let d = *x.shape().last().unwrap();
    let dn = T::of(d as f64);
    let mut out = vec![T::zero(); x.numel()];
    for (row_idx, (xr, gr)) in x.data().chunks(d).zip(g.data().chunks(d)).enumerate() {
        let mut mean = T::zero();
        for &v in xr {
            mean = mean + v;
        }
        mean = mean / dn;
        let mut var = T::zero();
        for &v in xr {
            let c = v - mean;
            var = var + c * c;
        }
        var = var / dn;
        let inv = T::one() / (var + eps).sqrt();
        // y = (x − μ)·inv; dx = inv·(g − mean(g) − y·mean(g⊙y))
        let mut mean_g = T::zero();
        let mut mean_gy = T::zero();
        for j in 0..d {
            let y = (xr[j] - mean) * inv;
            mean_g = mean_g + gr[j];
            mean_gy = mean_gy + gr[j] * y;
        }
        mean_g = mean_g / dn;
        mean_gy = mean_gy / dn;
        let o = &mut out[row_idx * d..(row_idx + 1) * d];
        for j in 0..d {
            let y = (xr[j] - mean) * inv;
            o[j] = inv * (gr[j] - mean_g - y * mean_gy);
        }
    }
    Tensor::new(x.shape(), out)
}
