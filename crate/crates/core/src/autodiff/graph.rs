//! Tape of tensor operations with reverse-mode differentiation.
//!
//! Every op appends a node whose value is computed eagerly, so node indices
//! are already a topological order. [`Graph::backward`] walks the tape once in
//! reverse and accumulates gradients into the parents of each node.

use super::tensor::{Mask, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What to do with a softmax row or masked reduction that has no valid entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmptyRows {
    Error,
    /// Emit zeros (and pass no gradient) for the empty row.
    Zero,
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    ScaleRows {
        x: Var,
        scale: Var,
    },
    Affine {
        x: Var,
        scale: f64,
    },
    Sigmoid(Var),
    Relu(Var),
    Ln(Var),
    Exp(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// `out[o, i] = sum_l weights[o, l] * x[o, l, i]`
    Reduce {
        x: Var,
        len: usize,
        inner: usize,
        weights: Vec<f64>,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        chunks: Vec<usize>,
    },
    SliceLast {
        x: Var,
        start: usize,
        cols: usize,
    },
    Reshape(Var),
    Cosine {
        x: Var,
        n: usize,
        d: usize,
        norms: Vec<f64>,
    },
    LogSumExp {
        x: Var,
        mask: Option<Vec<bool>>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Norms below this are treated as zero vectors by [`Graph::cosine_pairwise`].
pub const COSINE_ZERO_NORM: f64 = 1e-12;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; exactly zero when `v` does not reach the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf (a parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// `a[.., k] x b[k, n] -> [.., n]`; leading axes of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let k = sb[0];
        let n = sb[1];
        let rows = self.value(a).numel() / k;
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let mut out = vec![0.0; rows * n];
        gemm(
            (rows, k, n),
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            0.0,
            &mut out,
            (n as isize, 1),
        );
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b }, rg))
    }

    /// Per-batch product `a[B, m, k] x b[B, k, n]`, or `a x b^T` for `b[B, n, k]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("batch_matmul", sa, sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if transpose_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::shape("batch_matmul", sa, sb));
        }
        // Plain sequential dot products: the blocks are small, and a fixed
        // summation order keeps zero-weight padding terms exact no-ops.
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                let ab = &av[i * m * k..(i + 1) * m * k];
                let bb = &bv[i * k * n..(i + 1) * k * n];
                let ob = &mut out[i * m * n..(i + 1) * m * n];
                for r in 0..m {
                    let arow = &ab[r * k..(r + 1) * k];
                    for c in 0..n {
                        let mut acc = 0.0;
                        if transpose_b {
                            let brow = &bb[c * k..(c + 1) * k];
                            for (x, y) in arow.iter().zip(brow) {
                                acc += x * y;
                            }
                        } else {
                            for (j, x) in arow.iter().enumerate() {
                                acc += x * bb[j * n + c];
                            }
                        }
                        ob[r * n + c] = acc;
                    }
                }
            }
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![batch, m, n], out)?,
            Op::BatchMatMul { a, b, transpose_b },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let shape = self.shape(a).to_vec();
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b), rg))
    }

    /// `x[.., n] + bias[n]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(Error::shape("add_bias", sx, sb));
        }
        let bv = self.value(bias).data();
        let n = bv.len();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv[i % n])
            .collect();
        let shape = sx.to_vec();
        let rg = self.needs(&[x, bias]);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddBias { x, bias }, rg))
    }

    /// Multiplies each trailing-axis row of `x` by the matching entry of `scale`.
    pub fn scale_rows(&mut self, x: Var, scale: Var) -> Result<Var> {
        let cols = self.value(x).last_dim();
        let rows = self.value(x).numel() / cols.max(1);
        if self.value(scale).numel() != rows {
            return Err(Error::shape("scale_rows", self.shape(x), self.shape(scale)));
        }
        let sv = self.value(scale).data();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * sv[i / cols])
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs(&[x, scale]);
        Ok(self.push(Tensor::new(shape, data)?, Op::ScaleRows { x, scale }, rg))
    }

    /// Elementwise `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let t = map(self.value(x), |v| scale * v + shift);
        let rg = self.needs(&[x]);
        self.push(t, Op::Affine { x, scale }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = map(self.value(x), sigmoid);
        let rg = self.needs(&[x]);
        self.push(t, Op::Sigmoid(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = map(self.value(x), |v| v.max(0.0));
        let rg = self.needs(&[x]);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.value(x).data().iter().find(|v| **v <= 0.0) {
            return Err(Error::NonFinite(format!("ln of non-positive value {v}")));
        }
        let t = map(self.value(x), f64::ln);
        let rg = self.needs(&[x]);
        Ok(self.push(t, Op::Ln(x), rg))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = map(self.value(x), f64::exp);
        let rg = self.needs(&[x]);
        self.push(t, Op::Exp(x), rg)
    }

    /// Clamp to `[lo, hi]`; gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let t = map(self.value(x), |v| v.clamp(lo, hi));
        let rg = self.needs(&[x]);
        self.push(t, Op::Clamp { x, lo, hi }, rg)
    }

    /// Softmax over the trailing axis, stabilized by row-max subtraction.
    ///
    /// Masked entries are excluded from the normalizer and come out as exact
    /// zeros.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&Mask>, empty: EmptyRows) -> Result<Var> {
        let xv = self.value(x);
        if let Some(m) = mask {
            if m.shape() != xv.shape() {
                return Err(Error::shape("softmax mask", xv.shape(), m.shape()));
            }
        }
        let cols = xv.last_dim();
        let rows = xv.numel() / cols.max(1);
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = xv.row(r);
            let valid = |j: usize| mask.is_none_or(|m| m.row(r)[j]);
            let max = (0..cols)
                .filter(|&j| valid(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                match empty {
                    EmptyRows::Error => {
                        return Err(Error::DegenerateMask(format!(
                            "softmax row {r} has no unmasked entry"
                        )))
                    }
                    EmptyRows::Zero => continue,
                }
            }
            let o = &mut out[r * cols..(r + 1) * cols];
            let mut sum = 0.0;
            for j in 0..cols {
                if valid(j) {
                    o[j] = (row[j] - max).exp();
                    sum += o[j];
                }
            }
            for v in o.iter_mut() {
                *v /= sum;
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(x), rg))
    }

    /// Layer normalization over the trailing axis with learned gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xv = self.value(x);
        let rows = xv.numel() / d;
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut normalized = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                normalized[r * d + j] = xh;
                out[r * d + j] = gv[j] * xh + bv[j];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    /// Sum over `axis`, optionally restricted to positions where `mask` (shape
    /// `x.shape[..=axis]`) is true.
    pub fn sum_axis(&mut self, x: Var, axis: usize, mask: Option<&Mask>) -> Result<Var> {
        self.reduce(x, axis, mask, false, EmptyRows::Zero)
    }

    /// Mean over `axis`; with a mask, divides by the count of valid positions only.
    pub fn mean_axis(
        &mut self,
        x: Var,
        axis: usize,
        mask: Option<&Mask>,
        empty: EmptyRows,
    ) -> Result<Var> {
        self.reduce(x, axis, mask, true, empty)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, vec![n])?;
        self.sum_axis(flat, 0, None)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, vec![n])?;
        self.mean_axis(flat, 0, None, EmptyRows::Error)
    }

    fn reduce(
        &mut self,
        x: Var,
        axis: usize,
        mask: Option<&Mask>,
        mean: bool,
        empty: EmptyRows,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("reduce axis", &shape, &[axis]));
        }
        if let Some(m) = mask {
            if m.shape() != &shape[..=axis] {
                return Err(Error::shape("reduce mask", &shape, m.shape()));
            }
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut weights = vec![0.0; outer * len];
        for o in 0..outer {
            let valid = |l: usize| mask.is_none_or(|m| m.bits()[o * len + l]);
            let count = (0..len).filter(|&l| valid(l)).count();
            if count == 0 {
                if mean && empty == EmptyRows::Error {
                    return Err(Error::DegenerateMask(format!(
                        "mean over axis {axis} of {shape:?} has no valid position"
                    )));
                }
                continue;
            }
            let w = if mean { 1.0 / count as f64 } else { 1.0 };
            for l in 0..len {
                if valid(l) {
                    weights[o * len + l] = w;
                }
            }
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let w = weights[o * len + l];
                if w == 0.0 {
                    continue;
                }
                let src = &xv[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (dst, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += w * s;
                }
            }
        }
        let mut out_shape = shape[..axis].to_vec();
        out_shape.extend_from_slice(&shape[axis + 1..]);
        let rg = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Reduce {
                x,
                len,
                inner,
                weights,
            },
            rg,
        ))
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Config("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat axis", &base, &[axis]));
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut total = 0;
        let mut chunks = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len() || s[..axis] != base[..axis] || s[axis + 1..] != base[axis + 1..]
            {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
            chunks.push(s[axis] * inner);
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &c) in parts.iter().zip(&chunks) {
                out.extend_from_slice(&self.value(*p).data()[o * c..(o + 1) * c]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.needs(parts);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                chunks,
            },
            rg,
        ))
    }

    /// Columns `start..start + len` of the trailing axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let cols = self.value(x).last_dim();
        if start + len > cols {
            return Err(Error::shape("slice_last", self.shape(x), &[start, len]));
        }
        let rows = self.value(x).numel() / cols;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv[r * cols + start..r * cols + start + len]);
        }
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().expect("rank >= 1") = len;
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::SliceLast { x, start, cols }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.needs(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Pairwise cosine similarity of the rows of `x[.., N, d]`, giving `[.., N, N]`.
    ///
    /// Any pair involving a zero vector has similarity 0.
    pub fn cosine_pairwise(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("cosine_pairwise", &shape, &[]));
        }
        let n = shape[shape.len() - 2];
        let d = shape[shape.len() - 1];
        let xv = self.value(x).data();
        let groups = xv.len() / (n * d).max(1);
        let norms: Vec<f64> = xv
            .chunks(d.max(1))
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let mut out = vec![0.0; groups * n * n];
        for g in 0..groups {
            for i in 0..n {
                let ni = norms[g * n + i];
                if ni < COSINE_ZERO_NORM {
                    continue;
                }
                let ri = &xv[(g * n + i) * d..(g * n + i + 1) * d];
                for j in 0..n {
                    let nj = norms[g * n + j];
                    if nj < COSINE_ZERO_NORM {
                        continue;
                    }
                    let rj = &xv[(g * n + j) * d..(g * n + j + 1) * d];
                    out[(g * n + i) * n + j] = dot(ri, rj) / (ni * nj);
                }
            }
        }
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        out_shape.push(n);
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Cosine { x, n, d, norms }, rg))
    }

    /// `log sum exp` over the trailing axis, optionally over masked entries only.
    pub fn logsumexp(&mut self, x: Var, mask: Option<&Mask>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(m) = mask {
            if m.shape() != xv.shape() {
                return Err(Error::shape("logsumexp mask", xv.shape(), m.shape()));
            }
        }
        let cols = xv.last_dim();
        let rows = xv.numel() / cols.max(1);
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let valid = |j: usize| mask.is_none_or(|m| m.row(r)[j]);
            let max = (0..cols)
                .filter(|&j| valid(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateMask(format!("logsumexp row {r} is empty")));
            }
            let s: f64 = (0..cols)
                .filter(|&j| valid(j))
                .map(|j| (row[j] - max).exp())
                .sum();
            out.push(max + s.ln());
        }
        let shape = xv.shape()[..xv.rank().saturating_sub(1)].to_vec();
        let rg = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LogSumExp {
                x,
                mask: mask.map(|m| m.bits().to_vec()),
            },
            rg,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::shape("backward (loss must be scalar)", lv.shape(), &[]));
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite(format!("loss = {}", lv.item())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        macro_rules! acc {
            ($v:expr) => {
                slot(grads, &self.nodes, $v)
            };
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let sb = self.nodes[b.0].value.shape();
                let (k, n) = (sb[0], sb[1]);
                let rows = av.len() / k;
                if wants(*a) {
                    // dA = G B^T
                    gemm((rows, n, k), g, (n as isize, 1), bv, (1, n as isize), 1.0, acc!(*a), (k as isize, 1));
                }
                if wants(*b) {
                    // dB = A^T G
                    gemm((k, rows, n), av, (1, k as isize), g, (n as isize, 1), 1.0, acc!(*b), (n as isize, 1));
                }
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let sa = self.nodes[a.0].value.shape();
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (av, bv) = (val(*a), val(*b));
                // Strides of B^T as seen through the effective (k x n) operand.
                let bt_strides = if *transpose_b { (k as isize, 1) } else { (1, n as isize) };
                let db_strides = if *transpose_b { (1, k as isize) } else { (n as isize, 1) };
                for i in 0..batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    if wants(*a) {
                        let da = &mut acc!(*a)[i * m * k..(i + 1) * m * k];
                        gemm((m, n, k), gi, (n as isize, 1), &bv[i * k * n..(i + 1) * k * n], bt_strides, 1.0, da, (k as isize, 1));
                    }
                    if wants(*b) {
                        let db = &mut acc!(*b)[i * k * n..(i + 1) * k * n];
                        gemm((k, m, n), &av[i * m * k..(i + 1) * m * k], (1, k as isize), gi, (n as isize, 1), 1.0, db, db_strides);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        add_into(acc!(v), g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = val(*b);
                    for ((d, gi), bi) in acc!(*a).iter_mut().zip(g).zip(bv) {
                        *d += gi * bi;
                    }
                }
                if wants(*b) {
                    let av = val(*a);
                    for ((d, gi), ai) in acc!(*b).iter_mut().zip(g).zip(av) {
                        *d += gi * ai;
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if wants(*x) {
                    add_into(acc!(*x), g);
                }
                if wants(*bias) {
                    let db = acc!(*bias);
                    let n = db.len();
                    for (i, gi) in g.iter().enumerate() {
                        db[i % n] += gi;
                    }
                }
            }
            Op::ScaleRows { x, scale } => {
                let cols = self.nodes[x.0].value.last_dim();
                if wants(*x) {
                    let sv = val(*scale);
                    for (i, (d, gi)) in acc!(*x).iter_mut().zip(g).enumerate() {
                        *d += gi * sv[i / cols];
                    }
                }
                if wants(*scale) {
                    let xv = val(*x);
                    let ds = acc!(*scale);
                    for (i, (gi, xi)) in g.iter().zip(xv).enumerate() {
                        ds[i / cols] += gi * xi;
                    }
                }
            }
            Op::Affine { x, scale } => {
                for (d, gi) in acc!(*x).iter_mut().zip(g) {
                    *d += gi * scale;
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                for ((d, gi), yi) in acc!(*x).iter_mut().zip(g).zip(y) {
                    *d += gi * yi * (1.0 - yi);
                }
            }
            Op::Relu(x) => {
                let xv = val(*x);
                for ((d, gi), xi) in acc!(*x).iter_mut().zip(g).zip(xv) {
                    if *xi > 0.0 {
                        *d += gi;
                    }
                }
            }
            Op::Ln(x) => {
                let xv = val(*x);
                for ((d, gi), xi) in acc!(*x).iter_mut().zip(g).zip(xv) {
                    *d += gi / xi;
                }
            }
            Op::Exp(x) => {
                let y = node.value.data();
                for ((d, gi), yi) in acc!(*x).iter_mut().zip(g).zip(y) {
                    *d += gi * yi;
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = val(*x);
                for ((d, gi), xi) in acc!(*x).iter_mut().zip(g).zip(xv) {
                    if xi >= lo && xi <= hi {
                        *d += gi;
                    }
                }
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let cols = y.last_dim();
                let dx = acc!(*x);
                for r in 0..y.numel() / cols.max(1) {
                    let yr = y.row(r);
                    let gr = &g[r * cols..(r + 1) * cols];
                    let s = dot(yr, gr);
                    for j in 0..cols {
                        dx[r * cols + j] += yr[j] * (gr[j] - s);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let d = node.value.last_dim();
                let rows = inv_std.len();
                let gv = val(*gamma);
                if wants(*gamma) {
                    let dg = acc!(*gamma);
                    for (i, (gi, xh)) in g.iter().zip(normalized).enumerate() {
                        dg[i % d] += gi * xh;
                    }
                }
                if wants(*beta) {
                    let db = acc!(*beta);
                    for (i, gi) in g.iter().enumerate() {
                        db[i % d] += gi;
                    }
                }
                if wants(*x) {
                    let dx = acc!(*x);
                    let mut dxh = vec![0.0; d];
                    for r in 0..rows {
                        let xh = &normalized[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxh[j] = g[r * d + j] * gv[j];
                        }
                        let mean_d = dxh.iter().sum::<f64>() / d as f64;
                        let mean_dx = dot(&dxh, xh) / d as f64;
                        for j in 0..d {
                            dx[r * d + j] += inv_std[r] * (dxh[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Reduce {
                x,
                len,
                inner,
                weights,
            } => {
                let dx = acc!(*x);
                let (len, inner) = (*len, *inner);
                for (ol, &w) in weights.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let o = ol / len;
                    let src = &g[o * inner..(o + 1) * inner];
                    for (d, s) in dx[ol * inner..(ol + 1) * inner].iter_mut().zip(src) {
                        *d += w * s;
                    }
                }
            }
            Op::Concat {
                parts,
                outer,
                chunks,
            } => {
                let total: usize = chunks.iter().sum();
                let mut offset = 0;
                for (p, &c) in parts.iter().zip(chunks) {
                    if wants(*p) {
                        let dp = acc!(*p);
                        for o in 0..*outer {
                            add_into(
                                &mut dp[o * c..(o + 1) * c],
                                &g[o * total + offset..o * total + offset + c],
                            );
                        }
                    }
                    offset += c;
                }
            }
            Op::SliceLast { x, start, cols } => {
                let len = node.value.last_dim();
                let dx = acc!(*x);
                for r in 0..g.len() / len.max(1) {
                    add_into(
                        &mut dx[r * cols + start..r * cols + start + len],
                        &g[r * len..(r + 1) * len],
                    );
                }
            }
            Op::Reshape(x) => add_into(acc!(*x), g),
            Op::Cosine { x, n, d, norms } => {
                let (n, d) = (*n, *d);
                let xv = val(*x);
                let y = node.value.data();
                let dx = acc!(*x);
                for grp in 0..norms.len() / n.max(1) {
                    for i in 0..n {
                        let ni = norms[grp * n + i];
                        if ni < COSINE_ZERO_NORM {
                            continue;
                        }
                        let ri = grp * n + i;
                        for j in 0..n {
                            let nj = norms[grp * n + j];
                            if nj < COSINE_ZERO_NORM {
                                continue;
                            }
                            let rj = grp * n + j;
                            let gij = g[ri * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let s = y[ri * n + j];
                            // d s / d x_i = x_j / (|x_i||x_j|) - s x_i / |x_i|^2, and symmetrically.
                            for c in 0..d {
                                let xi = xv[ri * d + c];
                                let xj = xv[rj * d + c];
                                dx[ri * d + c] += gij * (xj / (ni * nj) - s * xi / (ni * ni));
                                dx[rj * d + c] += gij * (xi / (ni * nj) - s * xj / (nj * nj));
                            }
                        }
                    }
                }
            }
            Op::LogSumExp { x, mask } => {
                let xt = &self.nodes[x.0].value;
                let cols = xt.last_dim();
                let y = node.value.data();
                let dx = acc!(*x);
                for (r, (&yr, &gr)) in y.iter().zip(g).enumerate() {
                    let row = xt.row(r);
                    for j in 0..cols {
                        if mask.as_ref().is_none_or(|m| m[r * cols + j]) {
                            dx[r * cols + j] += gr * (row[j] - yr).exp();
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
        .expect("same shape")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
    let n = nodes[v.0].value.numel();
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `c = a * b + beta * c` for an `(m, k, n)` problem with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    (m, k, n): (usize, usize, usize),
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // Safety: slices cover every index the strides address (checked above for
    // the dense layouts used in this module).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}
