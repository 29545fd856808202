//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Node ids are
//! assigned in creation order, and every operation refers only to earlier
//! nodes, so walking the ids backwards is a valid reverse topological order
//! and each node is visited exactly once.

use std::cell::RefCell;

use rand::Rng;
use rayon::prelude::*;

use super::kernels::{matmul_nn, matmul_nt, matmul_tn, transpose};
use super::{Element, Tensor};
use crate::error::{shape_err, Error, Result};

const ROPE_BASE: f64 = 10_000.0;

enum Op<T: Element> {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Transpose(usize),
    Add {
        a: usize,
        b: usize,
        b_broadcast: bool,
    },
    Mul {
        a: usize,
        b: usize,
        b_broadcast: bool,
    },
    Scale(usize, T),
    Gelu(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<u32>,
        mask: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
    Sum(usize),
    Embedding {
        table: usize,
        ids: Vec<u32>,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    Rope {
        x: usize,
        n_heads: usize,
        seq_len: usize,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        n_heads: usize,
        seq_len: usize,
        probs: Vec<Vec<T>>,
    },
    Dropout {
        x: usize,
        mask: Vec<T>,
    },
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations for a single forward/backward pass.
///
/// Not `Sync`: a graph belongs to one worker for its whole lifetime.
pub struct Graph<T: Element = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Element = f32> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A constant input: no gradient flows into it.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf whose gradient is reported by backward.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Tensor<T> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

/// Sums `g` (length `reps * n`) down to length `n`.
fn reduce_broadcast<T: Element>(g: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n];
    for chunk in g.chunks(n) {
        for (o, &x) in out.iter_mut().zip(chunk) {
            *o += x;
        }
    }
    out
}

fn gelu_parts<T: Element>(x: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044_715);
    let half = T::of(0.5);
    let three = T::of(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let value = half * x * (T::one() + t);
    let deriv =
        half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x);
    (value, deriv)
}

fn rope_angle(pos: usize, i: usize, head_dim: usize) -> f64 {
    pos as f64 * ROPE_BASE.powf(-2.0 * i as f64 / head_dim as f64)
}

/// Rotates pairs `(i, i + head_dim/2)` of every head by the position angle;
/// `sign = -1` applies the inverse rotation.
fn rope_apply<T: Element>(
    x: &[T],
    cols: usize,
    n_heads: usize,
    seq_len: usize,
    sign: f64,
) -> Vec<T> {
    let head_dim = cols / n_heads;
    let half = head_dim / 2;
    let mut out = x.to_vec();
    for (r, row) in out.chunks_mut(cols).enumerate() {
        let pos = r % seq_len;
        for i in 0..half {
            let (s, c) = (sign * rope_angle(pos, i, head_dim)).sin_cos();
            let (s, c) = (T::of(s), T::of(c));
            for h in 0..n_heads {
                let a = h * head_dim + i;
                let b = a + half;
                let (x1, x2) = (row[a], row[b]);
                row[a] = x1 * c - x2 * s;
                row[b] = x1 * s + x2 * c;
            }
        }
    }
    out
}

/// Gathers the `(seq, head)` block of a `[N×D]` matrix into a contiguous `[L×dh]` buffer.
fn gather_head<T: Element>(
    x: &[T],
    cols: usize,
    seq: usize,
    head: usize,
    seq_len: usize,
    head_dim: usize,
) -> Vec<T> {
    let mut out = Vec::with_capacity(seq_len * head_dim);
    for i in 0..seq_len {
        let row = (seq * seq_len + i) * cols + head * head_dim;
        out.extend_from_slice(&x[row..row + head_dim]);
    }
    out
}

fn scatter_head<T: Element>(
    dst: &mut [T],
    block: &[T],
    cols: usize,
    seq: usize,
    head: usize,
    seq_len: usize,
    head_dim: usize,
) {
    for i in 0..seq_len {
        let row = (seq * seq_len + i) * cols + head * head_dim;
        dst[row..row + head_dim].copy_from_slice(&block[i * head_dim..(i + 1) * head_dim]);
    }
}

/// Causal attention for one head of one sequence. Returns `(output, probs)`,
/// with `probs` stored as a dense `[L×L]` lower-triangular matrix.
fn attention_head_forward<T: Element>(
    q: &[T],
    k: &[T],
    v: &[T],
    seq_len: usize,
    head_dim: usize,
    scale: T,
) -> (Vec<T>, Vec<T>) {
    // Full score matrix through GEMM; entries above the diagonal become
    // exact zeros, so later positions never leak into earlier rows.
    let mut probs = vec![T::zero(); seq_len * seq_len];
    matmul_nt(q, k, &mut probs, seq_len, head_dim, seq_len);
    for (i, row) in probs.chunks_mut(seq_len).enumerate() {
        let (live, masked) = row.split_at_mut(i + 1);
        masked.iter_mut().for_each(|p| *p = T::zero());
        let mut max = T::neg_infinity();
        for p in live.iter_mut() {
            *p *= scale;
            max = max.max(*p);
        }
        let mut total = T::zero();
        for p in live.iter_mut() {
            *p = (*p - max).exp();
            total += *p;
        }
        live.iter_mut().for_each(|p| *p = *p / total);
    }
    let mut out = vec![T::zero(); seq_len * head_dim];
    matmul_nn(&probs, v, &mut out, seq_len, seq_len, head_dim);
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_head_backward<T: Element>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    seq_len: usize,
    head_dim: usize,
    scale: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut ds = vec![T::zero(); seq_len * seq_len];
    matmul_nt(dout, v, &mut ds, seq_len, head_dim, seq_len);
    for (i, (row, prow)) in ds
        .chunks_mut(seq_len)
        .zip(probs.chunks(seq_len))
        .enumerate()
    {
        let weighted: T = row[..=i]
            .iter()
            .zip(&prow[..=i])
            .map(|(&d, &p)| d * p)
            .sum();
        for (j, d) in row.iter_mut().enumerate() {
            *d = if j <= i {
                prow[j] * (*d - weighted) * scale
            } else {
                T::zero()
            };
        }
    }
    let mut dq = vec![T::zero(); seq_len * head_dim];
    let mut dk = vec![T::zero(); seq_len * head_dim];
    let mut dv = vec![T::zero(); seq_len * head_dim];
    matmul_nn(&ds, k, &mut dq, seq_len, seq_len, head_dim);
    matmul_tn(&ds, q, &mut dk, seq_len, seq_len, head_dim);
    matmul_tn(probs, dout, &mut dv, seq_len, seq_len, head_dim);
    (dq, dk, dv)
}

impl<'g, T: Element> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor<T> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn same_graph(&self, other: &Var<'g, T>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "variables belong to different graphs"
        );
    }

    fn emit(&self, value: Tensor<T>, op: Op<T>, parents: &[usize]) -> Var<'g, T> {
        let rg = self.graph.requires(parents);
        self.graph.push(value, op, rg)
    }

    /// `self[m×k] · other[k×n]`
    pub fn matmul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(&other);
        let (a, b) = (self.value(), other.value());
        let (m, k) = a.dims2()?;
        let (k2, n) = b.dims2()?;
        if k != k2 {
            return shape_err("matmul", a.shape(), b.shape());
        }
        let mut out = vec![T::zero(); m * n];
        matmul_nn(a.data(), b.data(), &mut out, m, k, n);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.emit(value, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    /// `self[m×k] · other[n×k]ᵀ`, the layout of a linear layer with weight `[out×in]`.
    pub fn matmul_t(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.same_graph(&other);
        let (a, b) = (self.value(), other.value());
        let (m, k) = a.dims2()?;
        let (n, k2) = b.dims2()?;
        if k != k2 {
            return shape_err("matmul_t", a.shape(), b.shape());
        }
        let mut out = vec![T::zero(); m * n];
        matmul_nt(a.data(), b.data(), &mut out, m, k, n);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.emit(value, Op::MatMulT(self.id, other.id), &[self.id, other.id]))
    }

    pub fn transpose(self) -> Result<Var<'g, T>> {
        let value = self.value().transpose()?;
        Ok(self.emit(value, Op::Transpose(self.id), &[self.id]))
    }

    /// Orders the operands so the second one is the broadcast side.
    fn broadcast_pair(
        self,
        other: Var<'g, T>,
        op: &'static str,
    ) -> Result<(Var<'g, T>, Var<'g, T>, bool)> {
        self.same_graph(&other);
        let (sa, sb) = (self.shape(), other.shape());
        if sa == sb {
            Ok((self, other, false))
        } else if is_suffix(&sb, &sa) {
            Ok((self, other, true))
        } else if is_suffix(&sa, &sb) {
            Ok((other, self, true))
        } else {
            shape_err(op, &sa, &sb)
        }
    }

    fn broadcast_apply(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let bn = b.len();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b.data()[i % bn]))
            .collect();
        Tensor::new(a.shape(), data).expect("shape preserved")
    }

    /// Elementwise sum; a trailing-suffix shape broadcasts over the other operand.
    #[allow(clippy::should_implement_trait)]
    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b, b_broadcast) = self.broadcast_pair(other, "add")?;
        let value = Self::broadcast_apply(&a.value(), &b.value(), |x, y| x + y);
        Ok(a.emit(
            value,
            Op::Add {
                a: a.id,
                b: b.id,
                b_broadcast,
            },
            &[a.id, b.id],
        ))
    }

    /// Elementwise product with the same broadcasting rule as [`Var::add`].
    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b, b_broadcast) = self.broadcast_pair(other, "mul")?;
        let value = Self::broadcast_apply(&a.value(), &b.value(), |x, y| x * y);
        Ok(a.emit(
            value,
            Op::Mul {
                a: a.id,
                b: b.id,
                b_broadcast,
            },
            &[a.id, b.id],
        ))
    }

    pub fn scale(self, c: T) -> Var<'g, T> {
        let value = self.value().scale(c);
        self.emit(value, Op::Scale(self.id, c), &[self.id])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Var<'g, T> {
        let value = self.value().map(|x| gelu_parts(x).0);
        self.emit(value, Op::Gelu(self.id), &[self.id])
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(self, gain: Var<'g, T>, bias: Var<'g, T>, eps: f64) -> Result<Var<'g, T>> {
        self.same_graph(&gain);
        self.same_graph(&bias);
        let x = self.value();
        let d = x.last_dim();
        if gain.shape() != [d] || bias.shape() != [d] {
            return shape_err("layer_norm", x.shape(), &gain.shape());
        }
        if eps <= 0.0 {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let (g, b) = (gain.value(), bias.value());
        let rows = x.len() / d;
        let dn = T::of(d as f64);
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); x.len()];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let inv = T::one() / (var + T::of(eps)).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let value = Tensor::new(x.shape(), out)?;
        Ok(self.emit(
            value,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
            &[self.id, gain.id, bias.id],
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `self[T×V]`, over positions where `mask` is true.
    pub fn softmax_cross_entropy(self, targets: &[u32], mask: &[bool]) -> Result<Var<'g, T>> {
        let logits = self.value();
        let (rows, vocab) = logits.dims2()?;
        if targets.len() != rows || mask.len() != rows {
            return shape_err(
                "softmax_cross_entropy",
                logits.shape(),
                &[targets.len(), mask.len()],
            );
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::TokenRange { id: bad, vocab });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Degenerate(
                "every position of the loss mask is false".into(),
            ));
        }
        let mut probs = vec![T::zero(); rows * vocab];
        let mut total = 0.0f64;
        for r in (0..rows).filter(|&r| mask[r]) {
            let row = logits.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            let prow = &mut probs[r * vocab..(r + 1) * vocab];
            for (p, &l) in prow.iter_mut().zip(row) {
                *p = (l - max).exp();
                z += *p;
            }
            for p in prow.iter_mut() {
                *p = *p / z;
            }
            let log_z = max + z.ln();
            total += (log_z - row[targets[r] as usize]).as_f64();
        }
        let value = Tensor::scalar(T::of(total / count as f64));
        Ok(self.emit(
            value,
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            &[self.id],
        ))
    }

    pub fn sum(self) -> Var<'g, T> {
        let total = self.value().data().iter().copied().sum::<T>();
        self.emit(Tensor::scalar(total), Op::Sum(self.id), &[self.id])
    }

    /// Row lookup into an embedding table `self[V×d]`.
    pub fn embedding(self, ids: &[u32]) -> Result<Var<'g, T>> {
        let table = self.value();
        let (vocab, d) = table.dims2()?;
        if ids.is_empty() {
            return Err(Error::Degenerate("embedding lookup of zero ids".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= vocab {
                return Err(Error::TokenRange { id, vocab });
            }
            out.extend_from_slice(table.row(id as usize));
        }
        let value = Tensor::new(&[ids.len(), d], out)?;
        Ok(self.emit(
            value,
            Op::Embedding {
                table: self.id,
                ids: ids.to_vec(),
            },
            &[self.id],
        ))
    }

    /// Columns `start..start+len` of a rank-2 value.
    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let (rows, cols) = x.dims2()?;
        if len == 0 || start + len > cols {
            return shape_err("slice_cols", x.shape(), &[start, len]);
        }
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&x.row(r)[start..start + len]);
        }
        let value = Tensor::new(&[rows, len], out)?;
        Ok(self.emit(value, Op::SliceCols { x: self.id, start }, &[self.id]))
    }

    /// Rotary position encoding over `[N×D]` rows holding whole sequences of
    /// `seq_len` positions, split into `n_heads` heads.
    pub fn rope(self, n_heads: usize, seq_len: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let (rows, cols) = x.dims2()?;
        if n_heads == 0
            || !cols.is_multiple_of(n_heads)
            || !(cols / n_heads).is_multiple_of(2)
            || seq_len == 0
            || !rows.is_multiple_of(seq_len)
        {
            return shape_err("rope", x.shape(), &[n_heads, seq_len]);
        }
        let value = Tensor::new(x.shape(), rope_apply(x.data(), cols, n_heads, seq_len, 1.0))?;
        Ok(self.emit(
            value,
            Op::Rope {
                x: self.id,
                n_heads,
                seq_len,
            },
            &[self.id],
        ))
    }

    /// Multi-head causal self-attention. `self` holds the queries; all three
    /// inputs are `[N×D]` with `N` a multiple of `seq_len`.
    pub fn causal_attention(
        self,
        keys: Var<'g, T>,
        values: Var<'g, T>,
        n_heads: usize,
        seq_len: usize,
    ) -> Result<Var<'g, T>> {
        self.same_graph(&keys);
        self.same_graph(&values);
        let (q, k, v) = (self.value(), keys.value(), values.value());
        let (rows, cols) = q.dims2()?;
        if k.shape() != q.shape() || v.shape() != q.shape() {
            return shape_err("causal_attention", q.shape(), k.shape());
        }
        if n_heads == 0 || cols % n_heads != 0 || seq_len == 0 || rows % seq_len != 0 {
            return shape_err("causal_attention", q.shape(), &[n_heads, seq_len]);
        }
        let head_dim = cols / n_heads;
        let n_seq = rows / seq_len;
        let scale = T::of(1.0 / (head_dim as f64).sqrt());
        let blocks: Vec<(Vec<T>, Vec<T>)> = (0..n_seq * n_heads)
            .into_par_iter()
            .map(|bh| {
                let (b, h) = (bh / n_heads, bh % n_heads);
                let qh = gather_head(q.data(), cols, b, h, seq_len, head_dim);
                let kh = gather_head(k.data(), cols, b, h, seq_len, head_dim);
                let vh = gather_head(v.data(), cols, b, h, seq_len, head_dim);
                attention_head_forward(&qh, &kh, &vh, seq_len, head_dim, scale)
            })
            .collect();
        let mut out = vec![T::zero(); rows * cols];
        let mut probs = Vec::with_capacity(blocks.len());
        for (bh, (o, p)) in blocks.into_iter().enumerate() {
            scatter_head(
                &mut out,
                &o,
                cols,
                bh / n_heads,
                bh % n_heads,
                seq_len,
                head_dim,
            );
            probs.push(p);
        }
        let value = Tensor::new(q.shape(), out)?;
        Ok(self.emit(
            value,
            Op::Attention {
                q: self.id,
                k: keys.id,
                v: values.id,
                n_heads,
                seq_len,
                probs,
            },
            &[self.id, keys.id, values.id],
        ))
    }

    /// Inverted dropout: zeroes entries with probability `p` and rescales
    /// survivors by `1/(1-p)`. `p = 0` returns `self` unchanged.
    pub fn dropout<R: Rng + ?Sized>(self, p: f64, rng: &mut R) -> Result<Var<'g, T>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Contract(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if p == 0.0 {
            return Ok(self);
        }
        let x = self.value();
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..x.len())
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        self.dropout_with_mask(mask)
    }

    /// Dropout with an explicit multiplicative mask.
    pub fn dropout_with_mask(self, mask: Vec<T>) -> Result<Var<'g, T>> {
        let x = self.value();
        if mask.len() != x.len() {
            return shape_err("dropout", x.shape(), &[mask.len()]);
        }
        let data = x.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let value = Tensor::new(x.shape(), data)?;
        Ok(self.emit(value, Op::Dropout { x: self.id, mask }, &[self.id]))
    }

    /// Reverse pass from a scalar. Gradients are reported for every leaf
    /// created with [`Graph::param`]; leaves off the path read as zero.
    pub fn backward(self) -> Result<Gradients<T>> {
        let nodes = self.graph.nodes.borrow();
        let n = self.id + 1;
        if !nodes[self.id].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar, got shape {:?}",
                nodes[self.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[self.id] = Some(vec![T::one()]);

        let accumulate = |grads: &mut Vec<Option<Vec<T>>>, id: usize, g: Vec<T>| {
            if !nodes[id].requires_grad {
                return;
            }
            match &mut grads[id] {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                slot => *slot = Some(g),
            }
        };

        for id in (0..n).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let value = &node.value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k) = av.dims2()?;
                    let (_, nn) = bv.dims2()?;
                    if nodes[*a].requires_grad {
                        let mut da = vec![T::zero(); m * k];
                        matmul_nt(&g, bv.data(), &mut da, m, nn, k);
                        accumulate(&mut grads, *a, da);
                    }
                    if nodes[*b].requires_grad {
                        let mut db = vec![T::zero(); k * nn];
                        matmul_tn(av.data(), &g, &mut db, m, k, nn);
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::MatMulT(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k) = av.dims2()?;
                    let (nn, _) = bv.dims2()?;
                    if nodes[*a].requires_grad {
                        let mut da = vec![T::zero(); m * k];
                        matmul_nn(&g, bv.data(), &mut da, m, nn, k);
                        accumulate(&mut grads, *a, da);
                    }
                    if nodes[*b].requires_grad {
                        let mut db = vec![T::zero(); nn * k];
                        matmul_tn(&g, av.data(), &mut db, m, nn, k);
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Transpose(a) => {
                    let (m, nn) = value.dims2()?;
                    accumulate(&mut grads, *a, transpose(&g, m, nn));
                }
                Op::Add { a, b, b_broadcast } => {
                    if *b_broadcast {
                        let bn = nodes[*b].value.len();
                        accumulate(&mut grads, *b, reduce_broadcast(&g, bn));
                    } else {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul { a, b, b_broadcast } => {
                    let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
                    let bn = bv.len();
                    if nodes[*a].requires_grad {
                        let da = g.iter().enumerate().map(|(i, &x)| x * bv[i % bn]).collect();
                        accumulate(&mut grads, *a, da);
                    }
                    if nodes[*b].requires_grad {
                        let prod: Vec<T> = g.iter().zip(av).map(|(&x, &y)| x * y).collect();
                        let db = if *b_broadcast {
                            reduce_broadcast(&prod, bn)
                        } else {
                            prod
                        };
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, g.iter().map(|&x| x * *c).collect());
                }
                Op::Gelu(a) => {
                    let xs = nodes[*a].value.data();
                    let da = g
                        .iter()
                        .zip(xs)
                        .map(|(&gi, &x)| gi * gelu_parts(x).1)
                        .collect();
                    accumulate(&mut grads, *a, da);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let d = value.last_dim();
                    let gv = nodes[*gain].value.data();
                    let mut dgain = vec![T::zero(); d];
                    let mut dbias = vec![T::zero(); d];
                    let mut dx = vec![T::zero(); g.len()];
                    let dn = T::of(d as f64);
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for j in 0..d {
                            dgain[j] += gr[j] * hr[j];
                            dbias[j] += gr[j];
                            let dh = gr[j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[j];
                        }
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            dx[r * d + j] = inv / dn * (dn * dh - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gain, dgain);
                    accumulate(&mut grads, *bias, dbias);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    mask,
                    probs,
                    count,
                } => {
                    let vocab = nodes[*logits].value.last_dim();
                    let coef = g[0] / T::of(*count as f64);
                    let mut dl = vec![T::zero(); probs.len()];
                    for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                        let row = &mut dl[r * vocab..(r + 1) * vocab];
                        for (o, &p) in row.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                            *o = p * coef;
                        }
                        row[targets[r] as usize] -= coef;
                    }
                    accumulate(&mut grads, *logits, dl);
                }
                Op::Sum(a) => {
                    accumulate(&mut grads, *a, vec![g[0]; nodes[*a].value.len()]);
                }
                Op::Embedding { table, ids } => {
                    let tv = &nodes[*table].value;
                    let d = tv.last_dim();
                    let mut dt = vec![T::zero(); tv.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut dt[id as usize * d..(id as usize + 1) * d];
                        for (o, &x) in dst.iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::SliceCols { x, start } => {
                    let (rows, cols) = nodes[*x].value.dims2()?;
                    let len = value.last_dim();
                    let mut dx = vec![T::zero(); rows * cols];
                    for r in 0..rows {
                        dx[r * cols + start..r * cols + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Rope {
                    x,
                    n_heads,
                    seq_len,
                } => {
                    let cols = value.last_dim();
                    accumulate(
                        &mut grads,
                        *x,
                        rope_apply(&g, cols, *n_heads, *seq_len, -1.0),
                    );
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    n_heads,
                    seq_len,
                    probs,
                } => {
                    let (qv, kv, vv) = (&nodes[*q].value, &nodes[*k].value, &nodes[*v].value);
                    let (rows, cols) = qv.dims2()?;
                    let (n_heads, seq_len) = (*n_heads, *seq_len);
                    let head_dim = cols / n_heads;
                    let scale = T::of(1.0 / (head_dim as f64).sqrt());
                    let blocks: Vec<_> = probs
                        .par_iter()
                        .enumerate()
                        .map(|(bh, p)| {
                            let (b, h) = (bh / n_heads, bh % n_heads);
                            let qh = gather_head(qv.data(), cols, b, h, seq_len, head_dim);
                            let kh = gather_head(kv.data(), cols, b, h, seq_len, head_dim);
                            let vh = gather_head(vv.data(), cols, b, h, seq_len, head_dim);
                            let dout = gather_head(&g, cols, b, h, seq_len, head_dim);
                            attention_head_backward(
                                &qh, &kh, &vh, p, &dout, seq_len, head_dim, scale,
                            )
                        })
                        .collect();
                    let mut dq = vec![T::zero(); rows * cols];
                    let mut dk = vec![T::zero(); rows * cols];
                    let mut dv = vec![T::zero(); rows * cols];
                    for (bh, (bq, bk, bv)) in blocks.into_iter().enumerate() {
                        let (b, h) = (bh / n_heads, bh % n_heads);
                        scatter_head(&mut dq, &bq, cols, b, h, seq_len, head_dim);
                        scatter_head(&mut dk, &bk, cols, b, h, seq_len, head_dim);
                        scatter_head(&mut dv, &bv, cols, b, h, seq_len, head_dim);
                    }
                    accumulate(&mut grads, *q, dq);
                    accumulate(&mut grads, *k, dk);
                    accumulate(&mut grads, *v, dv);
                }
                Op::Dropout { x, mask } => {
                    accumulate(
                        &mut grads,
                        *x,
                        g.iter().zip(mask).map(|(&a, &m)| a * m).collect(),
                    );
                }
            }
        }

        let shapes = nodes[..n]
            .iter()
            .map(|nd| nd.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Gradients produced by [`Var::backward`].
pub struct Gradients<T: Element = f32> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient with respect to `var`; all zeros if no path reached it.
    pub fn get(&self, var: Var<'_, T>) -> Tensor<T> {
        match self.grads.get(var.id).and_then(Option::as_ref) {
            Some(g) => {
                Tensor::new(&self.shapes[var.id], g.clone()).expect("gradient matches value shape")
            }
            None => {
                let shape = var.shape();
                let n = shape.iter().product();
                Tensor::new(&shape, vec![T::zero(); n])
                    .unwrap_or_else(|_| Tensor::scalar(T::zero()))
            }
        }
    }

    /// Whether any gradient reached `var`.
    pub fn reached(&self, var: Var<'_, T>) -> bool {
        self.grads.get(var.id).is_some_and(Option::is_some)
    }
}
