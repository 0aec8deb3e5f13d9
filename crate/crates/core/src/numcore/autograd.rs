//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] borrows a [`ParamSet`]; `param(name)` inserts a leaf whose
//! gradient is reported by [`Graph::backward`] only when the parameter is
//! trainable. Frozen parameters and constants never receive gradients, and
//! nodes that depend only on them are skipped during the backward sweep.
//!
//! Matrices are row-major; several ops work on *segmented* row blocks, where
//! a tensor of `sum(segments)` rows holds independent sequences (frames of a
//! clip, captions of a batch) stacked vertically.

use std::collections::HashMap;

use super::ops::{gelu, gelu_grad, log_sum_exp, row_moments, softmax_in_place};
use super::params::{Gradients, ParamSet};
use super::tensor::{gemm_into, Tensor};
use crate::error::{ensure_arg, MovError, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(String),
    MatMul(Var, Var),
    /// `A · Bᵀ`
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    /// matrix + row vector broadcast over rows
    AddRow(Var, Var),
    /// `(B·n) x d` plus an `n x d` table repeated over the B blocks
    AddBlock(Var, Var),
    WeightedSum(Vec<(Var, f64)>),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        q_seg: Vec<usize>,
        kv_seg: Vec<usize>,
        /// softmax weights, concatenated per (segment, head)
        probs: Vec<f64>,
    },
    MeanSegments(Var, Vec<usize>),
    PrependRow {
        x: Var,
        row: Var,
        seg: Vec<usize>,
    },
    FirstOfSegments(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    L2NormalizeRows(Var, Vec<f64>),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Computation tape bound to one parameter set.
pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_vars: HashMap<String, Var>,
}

fn seg_offsets(seg: &[usize]) -> Vec<usize> {
    let mut offs = Vec::with_capacity(seg.len());
    let mut acc = 0;
    for &s in seg {
        offs.push(acc);
        acc += s;
    }
    offs
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf for a named parameter; repeated calls return the same node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(name) {
            return Ok(v);
        }
        let p = self.params.get(name)?;
        let v = self.push(p.value.clone(), Op::Param(name.to_string()), p.trainable);
        self.param_vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).expect_matrix("matmul lhs")?;
        let (k2, n) = self.value(b).expect_matrix("matmul rhs")?;
        ensure_arg!(k == k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm_into(
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            m,
            k,
            n,
            0.0,
        );
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ` where `a: m x k`, `b: n x k`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).expect_matrix("matmul_bt lhs")?;
        let (n, k2) = self.value(b).expect_matrix("matmul_bt rhs")?;
        ensure_arg!(k == k2, "matmul_bt inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm_into(
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            &mut out,
            m,
            k,
            n,
            0.0,
        );
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulBt(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose2()?;
        let ng = self.any_grad(&[a]);
        Ok(self.push(t, Op::Transpose(a), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).add(self.value(b))?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    /// Adds a bias vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).cols();
        ensure_arg!(
            self.value(bias).numel() == d,
            "bias length {} vs {d} columns",
            self.value(bias).numel()
        );
        let mut t = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for i in 0..t.rows() {
            for (o, bb) in t.row_mut(i).iter_mut().zip(&b) {
                *o += bb;
            }
        }
        let ng = self.any_grad(&[x, bias]);
        Ok(self.push(t, Op::AddRow(x, bias), ng))
    }

    /// Adds an `n x d` table to each consecutive block of `n` rows of `x`.
    pub fn add_block(&mut self, x: Var, table: Var) -> Result<Var> {
        let (n, d) = self.value(table).expect_matrix("add_block table")?;
        let xv = self.value(x);
        ensure_arg!(
            xv.cols() == d && xv.rows() % n == 0,
            "add_block: {:?} is not a stack of {n}x{d} blocks",
            xv.shape()
        );
        let mut t = xv.clone();
        let tb = self.value(table).data();
        for (i, o) in t.data_mut().iter_mut().enumerate() {
            *o += tb[i % (n * d)];
        }
        let ng = self.any_grad(&[x, table]);
        Ok(self.push(t, Op::AddBlock(x, table), ng))
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        ensure_arg!(!terms.is_empty(), "weighted_sum of nothing");
        let mut acc = self.value(terms[0].0).scale(terms[0].1);
        for &(v, w) in &terms[1..] {
            acc = acc.add(&self.value(v).scale(w))?;
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let ng = self.any_grad(&vars);
        Ok(self.push(acc, Op::WeightedSum(terms.to_vec()), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.weighted_sum(&[(x, s)])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(gelu);
        let ng = self.any_grad(&[x]);
        self.push(t, Op::Gelu(x), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (rows, d) = (xv.rows(), xv.cols());
        ensure_arg!(
            self.value(gain).numel() == d && self.value(bias).numel() == d,
            "layer_norm gain/bias vs {d} columns"
        );
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        for i in 0..rows {
            let (mean, inv) = row_moments(xv.row(i), eps);
            inv_std[i] = inv;
            for (j, x) in xv.row(i).iter().enumerate() {
                xhat[i * d + j] = (x - mean) * inv;
            }
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, h)| h * g[i % d] + b[i % d])
            .collect();
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Scaled dot-product attention, independently per segment and head.
    ///
    /// `q` has `sum(q_seg)` rows and `k`/`v` have `sum(kv_seg)` rows; segment
    /// `s` of the queries attends only to segment `s` of the keys.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        q_seg: &[usize],
        kv_seg: &[usize],
    ) -> Result<Var> {
        let d = self.value(q).cols();
        ensure_arg!(heads > 0 && d % heads == 0, "dim {d} not divisible by {heads} heads");
        ensure_arg!(
            self.value(k).cols() == d && self.value(v).cols() == d,
            "attention q/k/v width mismatch"
        );
        ensure_arg!(
            q_seg.len() == kv_seg.len() && !q_seg.is_empty(),
            "attention segment count mismatch"
        );
        ensure_arg!(
            q_seg.iter().sum::<usize>() == self.value(q).rows()
                && kv_seg.iter().sum::<usize>() == self.value(k).rows()
                && self.value(k).rows() == self.value(v).rows(),
            "attention segments do not cover the inputs"
        );
        ensure_arg!(kv_seg.iter().all(|&n| n > 0), "empty key segment");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![0.0; self.value(q).numel()];
        let mut probs = Vec::new();
        let (qo, ko) = (seg_offsets(q_seg), seg_offsets(kv_seg));
        for s in 0..q_seg.len() {
            let (nq, nk) = (q_seg[s], kv_seg[s]);
            for h in 0..heads {
                let c0 = h * dh;
                let base = probs.len();
                probs.resize(base + nq * nk, 0.0);
                let p = &mut probs[base..];
                for i in 0..nq {
                    let qi = &qd[(qo[s] + i) * d + c0..(qo[s] + i) * d + c0 + dh];
                    let row = &mut p[i * nk..(i + 1) * nk];
                    for (j, r) in row.iter_mut().enumerate() {
                        let kj = &kd[(ko[s] + j) * d + c0..(ko[s] + j) * d + c0 + dh];
                        *r = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    softmax_in_place(row, 1.0);
                    let o = &mut out[(qo[s] + i) * d + c0..(qo[s] + i) * d + c0 + dh];
                    for (j, &w) in row.iter().enumerate() {
                        let vj = &vd[(ko[s] + j) * d + c0..(ko[s] + j) * d + c0 + dh];
                        for (oc, vc) in o.iter_mut().zip(vj) {
                            *oc += w * vc;
                        }
                    }
                }
            }
        }
        let t = Tensor::new(self.value(q).shape().to_vec(), out)?;
        let ng = self.any_grad(&[q, k, v]);
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                heads,
                q_seg: q_seg.to_vec(),
                kv_seg: kv_seg.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Attention weights recorded by an attention node, per (segment, head),
    /// row-major `n_q x n_kv`.
    pub fn attention_weights(&self, att: Var) -> Option<Vec<Vec<f64>>> {
        match &self.nodes[att.0].op {
            Op::Attention {
                heads,
                q_seg,
                kv_seg,
                probs,
                ..
            } => {
                let mut out = Vec::new();
                let mut off = 0;
                for s in 0..q_seg.len() {
                    for _ in 0..*heads {
                        let n = q_seg[s] * kv_seg[s];
                        out.push(probs[off..off + n].to_vec());
                        off += n;
                    }
                }
                Some(out)
            }
            _ => None,
        }
    }

    /// Mean over the rows of each segment: `sum(seg) x d` to `len(seg) x d`.
    pub fn mean_segments(&mut self, x: Var, seg: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        ensure_arg!(
            seg.iter().sum::<usize>() == xv.rows() && seg.iter().all(|&n| n > 0),
            "mean_segments: segments do not cover {} rows",
            xv.rows()
        );
        let d = xv.cols();
        let mut out = vec![0.0; seg.len() * d];
        for (s, off) in seg_offsets(seg).into_iter().enumerate() {
            for i in 0..seg[s] {
                for (o, v) in out[s * d..(s + 1) * d].iter_mut().zip(xv.row(off + i)) {
                    *o += v;
                }
            }
            for o in &mut out[s * d..(s + 1) * d] {
                *o /= seg[s] as f64;
            }
        }
        let t = Tensor::new(vec![seg.len(), d], out)?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(t, Op::MeanSegments(x, seg.to_vec()), ng))
    }

    /// Inserts `row` (length d) before every segment of `x`.
    pub fn prepend_row(&mut self, x: Var, row: Var, seg: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        ensure_arg!(self.value(row).numel() == d, "prepend_row width mismatch");
        ensure_arg!(
            seg.iter().sum::<usize>() == xv.rows(),
            "prepend_row segments mismatch"
        );
        let r = self.value(row).data();
        let mut out = Vec::with_capacity((xv.rows() + seg.len()) * d);
        for (s, off) in seg_offsets(seg).into_iter().enumerate() {
            out.extend_from_slice(r);
            out.extend_from_slice(&xv.data()[off * d..(off + seg[s]) * d]);
        }
        let t = Tensor::new(vec![xv.rows() + seg.len(), d], out)?;
        let ng = self.any_grad(&[x, row]);
        Ok(self.push(
            t,
            Op::PrependRow {
                x,
                row,
                seg: seg.to_vec(),
            },
            ng,
        ))
    }

    /// First row of every segment.
    pub fn first_of_segments(&mut self, x: Var, seg: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        ensure_arg!(
            seg.iter().sum::<usize>() == xv.rows(),
            "first_of_segments mismatch"
        );
        let d = xv.cols();
        let mut out = Vec::with_capacity(seg.len() * d);
        for off in seg_offsets(seg) {
            out.extend_from_slice(xv.row(off));
        }
        let t = Tensor::new(vec![seg.len(), d], out)?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(t, Op::FirstOfSegments(x, seg.to_vec()), ng))
    }

    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, d) = tv.expect_matrix("gather_rows")?;
        ensure_arg!(!idx.is_empty(), "gather_rows with no indices");
        ensure_arg!(
            idx.iter().all(|&i| i < rows),
            "gather_rows index out of range ({rows} rows)"
        );
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(tv.row(i));
        }
        let t = Tensor::new(vec![idx.len(), d], out)?;
        let ng = self.any_grad(&[table]);
        Ok(self.push(t, Op::GatherRows(table, idx.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x).slice_rows(start, len)?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(t, Op::SliceRows(x, start), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<Tensor> = parts.iter().map(|p| self.value(*p).clone()).collect();
        let t = Tensor::vstack(&tensors)?;
        let ng = self.any_grad(parts);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut t = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for i in 0..xv.rows() {
            let n = xv.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(n > 0.0 && n.is_finite()) {
                return Err(MovError::invalid("l2 normalisation of a zero-norm row"));
            }
            norms.push(n);
            for o in t.row_mut(i) {
                *o /= n;
            }
        }
        let ng = self.any_grad(&[x]);
        Ok(self.push(t, Op::L2NormalizeRows(x, norms), ng))
    }

    /// Mean softmax cross-entropy over rows of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, p) = lv.expect_matrix("cross_entropy logits")?;
        ensure_arg!(labels.len() == rows, "{} labels for {rows} rows", labels.len());
        ensure_arg!(
            labels.iter().all(|&y| y < p),
            "label out of range for {p} classes"
        );
        ensure_arg!(lv.is_finite(), "cross_entropy: non-finite logits");
        let mut loss = 0.0;
        let mut probs = lv.data().to_vec();
        for (i, &y) in labels.iter().enumerate() {
            let row = lv.row(i);
            loss += log_sum_exp(row) - row[y];
            softmax_in_place(&mut probs[i * p..(i + 1) * p], 1.0);
        }
        let t = Tensor::new(vec![1], vec![loss / rows as f64])?;
        let ng = self.any_grad(&[logits]);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar output; returns gradients of trainable parameters.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        ensure_arg!(
            self.value(out).numel() == 1,
            "backward needs a scalar output, got {:?}",
            self.value(out).shape()
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Tensor::full(self.value(out).shape(), 1.0));
        let mut result = Gradients::new();

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(name) => {
                    if !gy.is_finite() {
                        return Err(MovError::invalid(format!("non-finite gradient for `{name}`")));
                    }
                    result.insert(name.clone(), gy);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                    let n = self.value(*b).cols();
                    if self.requires_grad(*a) {
                        let mut ga = vec![0.0; m * k];
                        gemm_into(gy.data(), false, self.value(*b).data(), true, &mut ga, m, n, k, 0.0);
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.requires_grad(*b) {
                        let mut gb = vec![0.0; k * n];
                        gemm_into(self.value(*a).data(), true, gy.data(), false, &mut gb, k, m, n, 0.0);
                        self.acc(&mut grads, *b, gb);
                    }
                }
                Op::MatMulBt(a, b) => {
                    let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                    let n = self.value(*b).rows();
                    if self.requires_grad(*a) {
                        let mut ga = vec![0.0; m * k];
                        gemm_into(gy.data(), false, self.value(*b).data(), false, &mut ga, m, n, k, 0.0);
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.requires_grad(*b) {
                        let mut gb = vec![0.0; n * k];
                        gemm_into(gy.data(), true, self.value(*a).data(), false, &mut gb, n, m, k, 0.0);
                        self.acc(&mut grads, *b, gb);
                    }
                }
                Op::Transpose(a) => {
                    let g = gy.transpose2()?;
                    self.acc(&mut grads, *a, g.into_data());
                }
                Op::Add(a, b) => {
                    if self.requires_grad(*a) {
                        self.acc(&mut grads, *a, gy.data().to_vec());
                    }
                    if self.requires_grad(*b) {
                        self.acc(&mut grads, *b, gy.data().to_vec());
                    }
                }
                Op::AddRow(x, bias) => {
                    if self.requires_grad(*x) {
                        self.acc(&mut grads, *x, gy.data().to_vec());
                    }
                    if self.requires_grad(*bias) {
                        let d = gy.cols();
                        let mut gb = vec![0.0; d];
                        for i in 0..gy.rows() {
                            for (o, g) in gb.iter_mut().zip(gy.row(i)) {
                                *o += g;
                            }
                        }
                        self.acc(&mut grads, *bias, gb);
                    }
                }
                Op::AddBlock(x, table) => {
                    if self.requires_grad(*x) {
                        self.acc(&mut grads, *x, gy.data().to_vec());
                    }
                    if self.requires_grad(*table) {
                        let n = self.value(*table).numel();
                        let mut gt = vec![0.0; n];
                        for (i, g) in gy.data().iter().enumerate() {
                            gt[i % n] += g;
                        }
                        self.acc(&mut grads, *table, gt);
                    }
                }
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        if self.requires_grad(v) {
                            self.acc(&mut grads, v, gy.data().iter().map(|g| g * w).collect());
                        }
                    }
                }
                Op::Gelu(x) => {
                    let g = gy
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(g, &xv)| g * gelu_grad(xv))
                        .collect();
                    self.acc(&mut grads, *x, g);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let d = gy.cols();
                    let rows = gy.rows();
                    let gain_v = self.value(*gain).data();
                    if self.requires_grad(*gain) {
                        let mut gg = vec![0.0; d];
                        for (i, g) in gy.data().iter().enumerate() {
                            gg[i % d] += g * xhat[i];
                        }
                        self.acc(&mut grads, *gain, gg);
                    }
                    if self.requires_grad(*bias) {
                        let mut gb = vec![0.0; d];
                        for (i, g) in gy.data().iter().enumerate() {
                            gb[i % d] += g;
                        }
                        self.acc(&mut grads, *bias, gb);
                    }
                    if self.requires_grad(*x) {
                        let mut gx = vec![0.0; rows * d];
                        for r in 0..rows {
                            let gyr = gy.row(r);
                            let xh = &xhat[r * d..(r + 1) * d];
                            let dxhat: Vec<f64> =
                                gyr.iter().zip(gain_v).map(|(g, w)| g * w).collect();
                            let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                            let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>()
                                / d as f64;
                            for j in 0..d {
                                gx[r * d + j] = inv_std[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                            }
                        }
                        self.acc(&mut grads, *x, gx);
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    q_seg,
                    kv_seg,
                    probs,
                } => {
                    let (gq, gk, gv) =
                        self.attention_backward(&gy, *q, *k, *v, *heads, q_seg, kv_seg, probs);
                    if self.requires_grad(*q) {
                        self.acc(&mut grads, *q, gq);
                    }
                    if self.requires_grad(*k) {
                        self.acc(&mut grads, *k, gk);
                    }
                    if self.requires_grad(*v) {
                        self.acc(&mut grads, *v, gv);
                    }
                }
                Op::MeanSegments(x, seg) => {
                    let d = gy.cols();
                    let mut gx = Vec::with_capacity(self.value(*x).numel());
                    for (s, &n) in seg.iter().enumerate() {
                        for _ in 0..n {
                            gx.extend(gy.row(s).iter().map(|g| g / n as f64));
                        }
                    }
                    debug_assert_eq!(gx.len(), seg.iter().sum::<usize>() * d);
                    self.acc(&mut grads, *x, gx);
                }
                Op::PrependRow { x, row, seg } => {
                    let d = gy.cols();
                    let mut gx = Vec::with_capacity(self.value(*x).numel());
                    let mut grow = vec![0.0; d];
                    let mut r = 0;
                    for &n in seg {
                        for (o, g) in grow.iter_mut().zip(gy.row(r)) {
                            *o += g;
                        }
                        gx.extend_from_slice(&gy.data()[(r + 1) * d..(r + 1 + n) * d]);
                        r += n + 1;
                    }
                    if self.requires_grad(*x) {
                        self.acc(&mut grads, *x, gx);
                    }
                    if self.requires_grad(*row) {
                        self.acc(&mut grads, *row, grow);
                    }
                }
                Op::FirstOfSegments(x, seg) => {
                    let d = gy.cols();
                    let mut gx = vec![0.0; self.value(*x).numel()];
                    for (s, off) in seg_offsets(seg).into_iter().enumerate() {
                        gx[off * d..(off + 1) * d].copy_from_slice(gy.row(s));
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::GatherRows(table, idx) => {
                    let d = gy.cols();
                    let mut gt = vec![0.0; self.value(*table).numel()];
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, g) in gt[i * d..(i + 1) * d].iter_mut().zip(gy.row(r)) {
                            *o += g;
                        }
                    }
                    self.acc(&mut grads, *table, gt);
                }
                Op::SliceRows(x, start) => {
                    let d = gy.cols();
                    let mut gx = vec![0.0; self.value(*x).numel()];
                    gx[start * d..start * d + gy.numel()].copy_from_slice(gy.data());
                    self.acc(&mut grads, *x, gx);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.value(*p).numel();
                        if self.requires_grad(*p) {
                            self.acc(&mut grads, *p, gy.data()[off..off + n].to_vec());
                        }
                        off += n;
                    }
                }
                Op::L2NormalizeRows(x, norms) => {
                    let y = &node.value;
                    let d = gy.cols();
                    let mut gx = vec![0.0; gy.numel()];
                    for r in 0..gy.rows() {
                        let yr = y.row(r);
                        let gr = gy.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            gx[r * d + j] = (gr[j] - yr[j] * dot) / norms[r];
                        }
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let p = self.value(*logits).cols();
                    let rows = labels.len() as f64;
                    let scale = gy.data()[0] / rows;
                    let mut gl: Vec<f64> = probs.iter().map(|x| x * scale).collect();
                    for (i, &y) in labels.iter().enumerate() {
                        gl[i * p + y] -= scale;
                    }
                    self.acc(&mut grads, *logits, gl);
                }
            }
        }
        Ok(result)
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Vec<f64>) {
        match &mut grads[v.0] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(&g) {
                    *a += b;
                }
            }
            slot @ None => {
                let shape = self.value(v).shape().to_vec();
                *slot = Some(Tensor::new(shape, g).expect("gradient shape matches value"));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        gy: &Tensor,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        q_seg: &[usize],
        kv_seg: &[usize],
        probs: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let d = gy.cols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let god = gy.data();
        let mut gq = vec![0.0; qd.len()];
        let mut gk = vec![0.0; kd.len()];
        let mut gv = vec![0.0; vd.len()];
        let (qo, ko) = (seg_offsets(q_seg), seg_offsets(kv_seg));
        let mut poff = 0;
        for s in 0..q_seg.len() {
            let (nq, nk) = (q_seg[s], kv_seg[s]);
            for h in 0..heads {
                let c0 = h * dh;
                let p = &probs[poff..poff + nq * nk];
                poff += nq * nk;
                let mut ds = vec![0.0; nk];
                for i in 0..nq {
                    let qrow = (qo[s] + i) * d + c0;
                    let go = &god[qrow..qrow + dh];
                    let prow = &p[i * nk..(i + 1) * nk];
                    // dP = dO · Vᵀ, accumulate dV = Pᵀ · dO
                    let mut dot = 0.0;
                    for j in 0..nk {
                        let vrow = (ko[s] + j) * d + c0;
                        let vj = &vd[vrow..vrow + dh];
                        let dp: f64 = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                        ds[j] = dp;
                        dot += prow[j] * dp;
                        for (gvc, goc) in gv[vrow..vrow + dh].iter_mut().zip(go) {
                            *gvc += prow[j] * goc;
                        }
                    }
                    for j in 0..nk {
                        ds[j] = prow[j] * (ds[j] - dot) * scale;
                    }
                    for j in 0..nk {
                        let krow = (ko[s] + j) * d + c0;
                        let w = ds[j];
                        if w == 0.0 {
                            continue;
                        }
                        for c in 0..dh {
                            gq[qrow + c] += w * kd[krow + c];
                            gk[krow + c] += w * qd[qrow + c];
                        }
                    }
                }
            }
        }
        (gq, gk, gv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::params::ParamSet;

    fn finite_diff(f: &dyn Fn(&ParamSet) -> f64, params: &ParamSet, name: &str) -> Vec<f64> {
        let h = 1e-6;
        let n = params.value(name).unwrap().numel();
        (0..n)
            .map(|i| {
                let mut p = params.clone();
                p.get_mut(name).unwrap().value.data_mut()[i] += h;
                let fp = f(&p);
                p.get_mut(name).unwrap().value.data_mut()[i] -= 2.0 * h;
                let fm = f(&p);
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    fn seeded(shape: &[usize], salt: f64) -> Tensor {
        Tensor::from_fn(shape, |i| ((i as f64 + 1.0) * 0.618 + salt).sin())
    }

    #[test]
    fn every_op_backward_matches_central_difference() {
        let mut ps = ParamSet::new();
        ps.insert("x", seeded(&[6, 4], 0.1), true);
        ps.insert("w", seeded(&[4, 4], 0.7), true);
        ps.insert("b", seeded(&[4], 1.3), true);
        ps.insert("g", seeded(&[4], 2.1).map(|v| 1.0 + 0.3 * v), true);
        ps.insert("cls", seeded(&[1, 4], 0.9), true);
        ps.insert("pos", seeded(&[4, 4], 0.4), true);
        ps.insert("frozen", seeded(&[4, 4], 3.3), false);

        let loss = |p: &ParamSet| -> Result<(f64, Gradients)> {
            let mut g = Graph::new(p);
            let x = g.param("x")?;
            let w = g.param("w")?;
            let b = g.param("b")?;
            let gain = g.param("g")?;
            let cls = g.param("cls")?;
            let pos = g.param("pos")?;
            let fz = g.param("frozen")?;
            let h = g.matmul(x, w)?;
            let h = g.add_row(h, b)?;
            let h = g.gelu(h);
            let h = g.layer_norm(h, gain, b, 1e-5)?;
            let h = g.prepend_row(h, cls, &[3, 3])?;
            let h = g.add_block(h, pos)?;
            let k = g.matmul(h, fz)?;
            let a = g.attention(h, k, h, 2, &[4, 4], &[4, 4])?;
            let cross = g.attention(a, h, k, 2, &[3, 5], &[4, 4])?;
            let t = g.transpose(cross)?;
            let tt = g.transpose(t)?;
            let m = g.mean_segments(tt, &[3, 5])?;
            let first = g.first_of_segments(a, &[4, 4])?;
            let both = g.concat_rows(&[m, first])?;
            let both = g.slice_rows(both, 1, 3)?;
            let gathered = g.gather_rows(both, &[0, 2, 2, 1])?;
            let n = g.l2_normalize_rows(gathered)?;
            let tab = g.l2_normalize_rows(pos)?;
            let logits = g.matmul_bt(n, tab)?;
            let logits = g.scale(logits, 3.0)?;
            let ce = g.cross_entropy(logits, &[0, 3, 1, 2])?;
            let s = g.add(ce, ce)?;
            let out = g.weighted_sum(&[(s, 0.7), (ce, 0.2)])?;
            let val = g.value(out).data()[0];
            Ok((val, g.backward(out)?))
        };
        let (_, grads) = loss(&ps).unwrap();
        assert!(!grads.contains_key("frozen"));
        for name in ["x", "w", "b", "g", "cls", "pos"] {
            let num = finite_diff(&|p| loss(p).unwrap().0, &ps, name);
            let ana = grads[name].data();
            for (a, n) in ana.iter().zip(&num) {
                assert!(
                    (a - n).abs() / n.abs().max(1.0) < 1e-6,
                    "{name}: analytic {a} vs numeric {n}"
                );
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let ps = ParamSet::new();
        let mut g = Graph::new(&ps);
        let q = g.constant(seeded(&[5, 8], 0.2));
        let k = g.constant(seeded(&[7, 8], 0.5));
        let a = g.attention(q, k, k, 4, &[2, 3], &[3, 4]).unwrap();
        for (i, w) in g.attention_weights(a).unwrap().iter().enumerate() {
            let nk = if i < 4 { 3 } else { 4 };
            for row in w.chunks(nk) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
