//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its value and the information its
//! backward rule needs. Node ids are assigned in execution order, so the tape
//! is already a topological order and `backward` simply walks it in reverse.

use std::collections::HashMap;

use super::dense::{numel, Tensor};
use super::kernels::{self, gemm, PoolKind};
use crate::error::{HctError, Result};
use crate::params::{ParamId, ParamStore};

/// Floor applied to norms before dividing.
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// `out[i] = x[index[i]]`, or zero where `index[i] == usize::MAX`.
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        a_batched: bool,
        b_batched: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    MulConst {
        x: Var,
        factor: Vec<f64>,
    },
    Softmax {
        x: Var,
        cols: usize,
    },
    LogSoftmax {
        x: Var,
        cols: usize,
    },
    Gelu {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cols: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    DwConv3d {
        x: Var,
        kernel: Var,
        dims: [usize; 3],
        kdims: [usize; 3],
        channels: usize,
    },
    Pool {
        x: Var,
        dims: [usize; 3],
        stride: [usize; 3],
        channels: usize,
        kind: PoolKind,
        argmax: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
        widths: Vec<usize>,
    },
    ConcatRows {
        xs: Vec<Var>,
    },
    L2Normalize {
        x: Var,
        cols: usize,
        norms: Vec<f64>,
    },
    MeanRows {
        x: Var,
        cols: usize,
    },
    Sum {
        x: Var,
    },
    PickRows {
        x: Var,
        cols: usize,
        index: Vec<usize>,
    },
    BceWithLogits {
        x: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    /// Persistent accumulator, used by leaves only.
    grad: Option<Vec<f64>>,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn dim_err(msg: impl Into<String>) -> HctError {
    HctError::Dimension(msg.into())
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { shape, value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; it receives gradients iff the tensor requires them.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        let shape = t.shape().to_vec();
        self.nodes.push(Node { shape, value: t.into_data(), op: Op::Leaf, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// Binds a stored parameter, reusing the leaf if it was already bound.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.tensor(id);
        let leaf = Tensor::new(t.shape().to_vec(), t.data().to_vec())
            .expect("stored parameters are well formed")
            .with_requires_grad(!store.is_frozen(id));
        let v = self.leaf(leaf);
        self.params.insert(id, v);
        v
    }

    /// Parameter bindings made through [`Graph::param`].
    pub fn param_bindings(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&p, &v)| (p, v))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("graph values are well formed")
    }

    /// Accumulated gradient of a leaf after one or more backward passes.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.grad = None);
    }

    pub fn check_finite(&self, v: Var) -> Result<()> {
        if self.value(v).iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(HctError::Numerical(format!("non-finite value in node {} of shape {:?}", v.0, self.shape(v))))
        }
    }

    // ---------------------------------------------------------------- ops

    /// `out[i] = x[index[i]]`; `usize::MAX` entries produce zeros.
    pub fn gather(&mut self, x: Var, shape: Vec<usize>, index: Vec<usize>) -> Result<Var> {
        if numel(&shape) != index.len() || shape.contains(&0) {
            return Err(dim_err(format!("gather output shape {shape:?} does not match {} indices", index.len())));
        }
        let src = self.value(x);
        let mut value = Vec::with_capacity(index.len());
        for &i in &index {
            if i == usize::MAX {
                value.push(0.0);
            } else if i < src.len() {
                value.push(src[i]);
            } else {
                return Err(dim_err(format!("gather index {i} out of range for {:?}", self.shape(x))));
            }
        }
        Ok(self.push(shape, value, Op::Gather { x, index }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() || shape.contains(&0) || shape.is_empty() {
            return Err(dim_err(format!("cannot reshape {:?} into {shape:?}", self.shape(x))));
        }
        let value = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), value, Op::Reshape { x }, &[x]))
    }

    /// Matrix product over the last two axes. Leading batch axes must match,
    /// or one operand may be a plain matrix broadcast over the other's batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(dim_err(format!("matmul needs rank >= 2 operands, got {sa:?} and {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(dim_err(format!("matmul inner extents differ: {sa:?} x {sb:?}")));
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let (batch_shape, a_batched, b_batched) = if ba == bb {
            (ba.to_vec(), !ba.is_empty(), !bb.is_empty())
        } else if bb.is_empty() {
            (ba.to_vec(), true, false)
        } else if ba.is_empty() {
            (bb.to_vec(), false, true)
        } else {
            return Err(dim_err(format!("matmul batch extents not broadcastable: {sa:?} x {sb:?}")));
        };
        let batch: usize = batch_shape.iter().product();
        let mut out = vec![0.0; batch * m * n];
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        if a_batched && !b_batched {
            gemm(batch * m, k, n, av, (k, 1), bv, (n, 1), &mut out, false);
        } else {
            for p in 0..batch {
                let ao = if a_batched { p * m * k } else { 0 };
                let bo = if b_batched { p * k * n } else { 0 };
                gemm(m, k, n, &av[ao..], (k, 1), &bv[bo..], (n, 1), &mut out[p * m * n..], false);
            }
        }
        let mut shape = batch_shape;
        shape.extend([m, n]);
        let op = Op::MatMul { a, b, batch, m, k, n, a_batched, b_batched };
        Ok(self.push(shape, out, op, &[a, b]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(dim_err(format!("transpose needs rank >= 2, got {s:?}")));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = numel(&s[..s.len() - 2]);
        let mut index = Vec::with_capacity(batch * r * c);
        for p in 0..batch {
            for j in 0..c {
                for i in 0..r {
                    index.push(p * r * c + i * c + j);
                }
            }
        }
        let mut shape = s[..s.len() - 2].to_vec();
        shape.extend([c, r]);
        self.gather(x, shape, index)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(format!("{what}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        Ok(self.push(self.shape(a).to_vec(), value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), value, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `[C]` vector to every row of a `[.., C]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap();
        if self.shape(bias) != [c] {
            return Err(dim_err(format!(
                "bias of shape {:?} cannot broadcast over {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let bv = self.value(bias);
        let value = self.value(x).iter().enumerate().map(|(i, v)| v + bv[i % c]).collect();
        Ok(self.push(self.shape(x).to_vec(), value, Op::AddBias { x, bias }, &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).iter().map(|v| v * factor).collect();
        self.push(self.shape(x).to_vec(), value, Op::Scale { x, factor }, &[x])
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, x: Var, factor: &[f64]) -> Result<Var> {
        if factor.len() != self.value(x).len() {
            return Err(dim_err(format!("constant of length {} for tensor {:?}", factor.len(), self.shape(x))));
        }
        let value = self.value(x).iter().zip(factor).map(|(a, b)| a * b).collect();
        let op = Op::MulConst { x, factor: factor.to_vec() };
        Ok(self.push(self.shape(x).to_vec(), value, op, &[x]))
    }

    /// Max-stabilized softmax over the last axis. `keep` masks columns out
    /// (probability exactly zero); a row with every column masked is all zero.
    pub fn softmax_rows(&mut self, x: Var, keep: Option<&[bool]>) -> Result<Var> {
        let cols = *self.shape(x).last().unwrap();
        if let Some(k) = keep {
            if k.len() != cols {
                return Err(dim_err(format!("softmax mask of length {} for rows of width {cols}", k.len())));
            }
        }
        let xv = self.value(x);
        let mut value = vec![0.0; xv.len()];
        for (row, out) in xv.chunks_exact(cols).zip(value.chunks_exact_mut(cols)) {
            let kept = |j: usize| keep.is_none_or(|k| k[j]);
            let max = (0..cols).filter(|&j| kept(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for j in 0..cols {
                if kept(j) {
                    out[j] = (row[j] - max).exp();
                    total += out[j];
                }
            }
            out.iter_mut().for_each(|v| *v /= total);
        }
        Ok(self.push(self.shape(x).to_vec(), value, Op::Softmax { x, cols }, &[x]))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let cols = *self.shape(x).last().unwrap();
        let xv = self.value(x);
        let mut value = vec![0.0; xv.len()];
        for (row, out) in xv.chunks_exact(cols).zip(value.chunks_exact_mut(cols)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.iter_mut().zip(row).for_each(|(o, v)| *o = v - lse);
        }
        self.push(self.shape(x).to_vec(), value, Op::LogSoftmax { x, cols }, &[x])
    }

    /// Tanh-approximated GELU, see [`kernels::gelu_scalar`].
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| kernels::gelu_scalar(v)).collect();
        self.push(self.shape(x).to_vec(), value, Op::Gelu { x }, &[x])
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let cols = *self.shape(x).last().unwrap();
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return Err(dim_err(format!(
                "layer norm affine shapes {:?}/{:?} for rows of width {cols}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let rows = xv.len() / cols;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut value = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..cols {
                let h = (row[j] - mean) * rs;
                xhat[r * cols + j] = h;
                value[r * cols + j] = h * gv[j] + bv[j];
            }
        }
        let op = Op::LayerNorm { x, gamma, beta, cols, xhat, rstd };
        Ok(self.push(self.shape(x).to_vec(), value, op, &[x, gamma, beta]))
    }

    /// Depth-wise 3D convolution of `[t, h, w, c]` with a `[kt, kh, kw, c]`
    /// kernel, zero "same" padding. Kernel extents must be odd.
    pub fn depthwise_conv3d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 4 || ks.len() != 4 || xs[3] != ks[3] {
            return Err(dim_err(format!("depthwise conv expects [t,h,w,c] and [kt,kh,kw,c], got {xs:?} and {ks:?}")));
        }
        if ks[..3].iter().any(|k| k % 2 == 0) {
            return Err(HctError::Config(format!("depthwise conv kernel extents must be odd, got {ks:?}")));
        }
        let dims = [xs[0], xs[1], xs[2]];
        let kdims = [ks[0], ks[1], ks[2]];
        let value = kernels::dwconv3d(self.value(x), dims, self.value(kernel), kdims, xs[3]);
        let op = Op::DwConv3d { x, kernel, dims, kdims, channels: xs[3] };
        Ok(self.push(xs, value, op, &[x, kernel]))
    }

    /// Window pooling of `[l, h, m, c]` with window equal to the stride
    /// (ceil mode).
    pub fn pool_st(&mut self, x: Var, stride: [usize; 3], kind: PoolKind) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(dim_err(format!("pooling expects [l,h,m,c], got {xs:?}")));
        }
        if stride.contains(&0) {
            return Err(HctError::Config(format!("pooling strides must be >= 1, got {stride:?}")));
        }
        let dims = [xs[0], xs[1], xs[2]];
        let (value, argmax) = kernels::pool3d(self.value(x), dims, xs[3], stride, kind);
        let shape = vec![
            kernels::pooled_extent(dims[0], stride[0]),
            kernels::pooled_extent(dims[1], stride[1]),
            kernels::pooled_extent(dims[2], stride[2]),
            xs[3],
        ];
        let op = Op::Pool { x, dims, stride, channels: xs[3], kind, argmax };
        Ok(self.push(shape, value, op, &[x]))
    }

    /// Concatenates along the last axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(dim_err("concat of zero tensors"));
        };
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            if s[..s.len() - 1] != lead[..] {
                return Err(dim_err(format!("concat extents differ: {:?} vs {:?}", self.shape(first), s)));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows = numel(&lead);
        let mut value = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in xs.iter().zip(&widths) {
                value.extend_from_slice(&self.value(v)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        Ok(self.push(shape, value, Op::Concat { xs: xs.to_vec(), widths }, xs))
    }

    /// Channels `lo..hi` of the last axis.
    pub fn slice_channels(&mut self, x: Var, lo: usize, hi: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let c = *s.last().unwrap();
        if lo >= hi || hi > c {
            return Err(dim_err(format!("channel slice {lo}..{hi} out of range for {s:?}")));
        }
        let rows = numel(&s[..s.len() - 1]);
        let w = hi - lo;
        let index = (0..rows).flat_map(|r| (lo..hi).map(move |j| r * c + j)).collect();
        let mut shape = s[..s.len() - 1].to_vec();
        shape.push(w);
        self.gather(x, shape, index)
    }

    /// Concatenates along the first axis.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(dim_err("row concat of zero tensors"));
        };
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut value = Vec::new();
        for &v in xs {
            let s = self.shape(v);
            if s[1..] != tail[..] {
                return Err(dim_err(format!("row concat extents differ: {:?} vs {s:?}", self.shape(first))));
            }
            rows += s[0];
            value.extend_from_slice(self.value(v));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        Ok(self.push(shape, value, Op::ConcatRows { xs: xs.to_vec() }, xs))
    }

    /// Rows `lo..hi` of the first axis.
    pub fn rows(&mut self, x: Var, lo: usize, hi: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if lo >= hi || hi > s[0] {
            return Err(dim_err(format!("row range {lo}..{hi} out of range for {s:?}")));
        }
        let inner = numel(&s[1..]);
        let mut shape = s.clone();
        shape[0] = hi - lo;
        self.gather(x, shape, (lo * inner..hi * inner).collect())
    }

    /// Zero-pads the first axis up to `total` rows.
    pub fn pad_rows(&mut self, x: Var, total: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if total < s[0] {
            return Err(dim_err(format!("cannot pad {s:?} down to {total} rows")));
        }
        let inner = numel(&s[1..]);
        let have = s[0] * inner;
        let index = (0..total * inner).map(|i| if i < have { i } else { usize::MAX }).collect();
        let mut shape = s;
        shape[0] = total;
        self.gather(x, shape, index)
    }

    /// Divides each row (last axis) by `max(norm, NORM_EPS)`.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let cols = *self.shape(x).last().unwrap();
        let xv = self.value(x);
        let mut norms = Vec::with_capacity(xv.len() / cols);
        let mut value = vec![0.0; xv.len()];
        for (row, out) in xv.chunks_exact(cols).zip(value.chunks_exact_mut(cols)) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
            norms.push(n);
            out.iter_mut().zip(row).for_each(|(o, v)| *o = v / n);
        }
        let op = Op::L2Normalize { x, cols, norms };
        self.push(self.shape(x).to_vec(), value, op, &[x])
    }

    /// Mean over every axis but the last: `[.., C] -> [C]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let cols = *self.shape(x).last().unwrap();
        let xv = self.value(x);
        let rows = xv.len() / cols;
        let mut value = vec![0.0; cols];
        for row in xv.chunks_exact(cols) {
            value.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
        value.iter_mut().for_each(|v| *v /= rows as f64);
        self.push(vec![cols], value, Op::MeanRows { x, cols }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().sum();
        self.push(vec![1], vec![total], Op::Sum { x }, &[x])
    }

    /// `out[r] = x[r, index[r]]` for a `[R, S]` tensor.
    pub fn pick_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || index.len() != s[0] {
            return Err(dim_err(format!("pick of {} indices from {s:?}", index.len())));
        }
        let cols = s[1];
        if let Some(&bad) = index.iter().find(|&&i| i >= cols) {
            return Err(dim_err(format!("pick index {bad} out of range for width {cols}")));
        }
        let value = index.iter().enumerate().map(|(r, &j)| self.value(x)[r * cols + j]).collect();
        let op = Op::PickRows { x, cols, index: index.to_vec() };
        Ok(self.push(vec![s[0]], value, op, &[x]))
    }

    /// `sum_i w_i * bce(sigmoid(x_i), t_i)` in the log-sum-exp stable form.
    pub fn bce_with_logits(&mut self, x: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
        let n = self.value(x).len();
        if targets.len() != n || weights.len() != n {
            return Err(dim_err(format!(
                "bce over {n} logits with {} targets and {} weights",
                targets.len(),
                weights.len()
            )));
        }
        let total = self
            .value(x)
            .iter()
            .zip(targets)
            .zip(weights)
            .map(|((&z, &t), &w)| w * (z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()))
            .sum();
        let op = Op::BceWithLogits { x, targets: targets.to_vec(), weights: weights.to_vec() };
        Ok(self.push(vec![1], vec![total], op, &[x]))
    }

    // ----------------------------------------------------------- backward

    /// Reverse-mode pass from a scalar loss. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(HctError::Usage(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        self.backward_with_seeds(&[(loss, vec![1.0])])
    }

    /// Reverse-mode pass seeded with explicit output gradients.
    pub fn backward_with_seeds(&mut self, seeds: &[(Var, Vec<f64>)]) -> Result<()> {
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        let mut top = 0;
        for (v, g) in seeds {
            if g.len() != self.value(*v).len() {
                return Err(dim_err(format!("seed gradient of length {} for {:?}", g.len(), self.shape(*v))));
            }
            accumulate(&mut grads, &self.nodes, *v, |d| d.iter_mut().zip(g).for_each(|(a, b)| *a += b));
            top = top.max(v.0 + 1);
        }
        for i in (0..top).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !g.iter().all(|v| v.is_finite()) {
                return Err(HctError::Numerical(format!(
                    "non-finite gradient at node {i} of shape {:?}",
                    self.nodes[i].shape
                )));
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
            } else {
                backprop(&self.nodes, i, &g, &mut grads);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
    f(slot);
}

fn backprop(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[i];
    match &node.op {
        Op::Leaf => unreachable!(),
        Op::Gather { x, index } => accumulate(grads, nodes, *x, |d| {
            for (o, &src) in index.iter().enumerate() {
                if src != usize::MAX {
                    d[src] += g[o];
                }
            }
        }),
        Op::Reshape { x } => accumulate(grads, nodes, *x, |d| add_into(d, g)),
        &Op::MatMul { a, b, batch, m, k, n, a_batched, b_batched } => {
            let av = &nodes[a.0].value;
            let bv = &nodes[b.0].value;
            // dA = G · Bᵀ
            accumulate(grads, nodes, a, |d| {
                if a_batched && !b_batched {
                    gemm(batch * m, n, k, g, (n, 1), bv, (1, n), d, true);
                } else {
                    for p in 0..batch {
                        let ao = if a_batched { p * m * k } else { 0 };
                        let bo = if b_batched { p * k * n } else { 0 };
                        gemm(m, n, k, &g[p * m * n..], (n, 1), &bv[bo..], (1, n), &mut d[ao..], true);
                    }
                }
            });
            // dB = Aᵀ · G
            accumulate(grads, nodes, b, |d| {
                if a_batched && !b_batched {
                    gemm(k, batch * m, n, av, (1, k), g, (n, 1), d, true);
                } else {
                    for p in 0..batch {
                        let ao = if a_batched { p * m * k } else { 0 };
                        let bo = if b_batched { p * k * n } else { 0 };
                        gemm(k, m, n, &av[ao..], (1, k), &g[p * m * n..], (n, 1), &mut d[bo..], true);
                    }
                }
            });
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, |d| add_into(d, g));
            accumulate(grads, nodes, *b, |d| add_into(d, g));
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, |d| add_into(d, g));
            accumulate(grads, nodes, *b, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            accumulate(grads, nodes, *a, |d| d.iter_mut().zip(g).zip(bv).for_each(|((x, y), z)| *x += y * z));
            accumulate(grads, nodes, *b, |d| d.iter_mut().zip(g).zip(av).for_each(|((x, y), z)| *x += y * z));
        }
        Op::AddBias { x, bias } => {
            accumulate(grads, nodes, *x, |d| add_into(d, g));
            accumulate(grads, nodes, *bias, |d| {
                let c = d.len();
                g.chunks_exact(c).for_each(|row| add_into(d, row));
            });
        }
        Op::Scale { x, factor } => {
            accumulate(grads, nodes, *x, |d| d.iter_mut().zip(g).for_each(|(a, b)| *a += b * factor))
        }
        Op::MulConst { x, factor } => {
            accumulate(grads, nodes, *x, |d| d.iter_mut().zip(g).zip(factor).for_each(|((a, b), f)| *a += b * f))
        }
        Op::Softmax { x, cols } => {
            let y = &node.value;
            accumulate(grads, nodes, *x, |d| {
                for ((dr, gr), yr) in d.chunks_exact_mut(*cols).zip(g.chunks_exact(*cols)).zip(y.chunks_exact(*cols)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..*cols {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            })
        }
        Op::LogSoftmax { x, cols } => {
            let y = &node.value;
            accumulate(grads, nodes, *x, |d| {
                for ((dr, gr), yr) in d.chunks_exact_mut(*cols).zip(g.chunks_exact(*cols)).zip(y.chunks_exact(*cols)) {
                    let total: f64 = gr.iter().sum();
                    for j in 0..*cols {
                        dr[j] += gr[j] - yr[j].exp() * total;
                    }
                }
            })
        }
        Op::Gelu { x } => {
            let xv = &nodes[x.0].value;
            accumulate(grads, nodes, *x, |d| {
                d.iter_mut().zip(g).zip(xv).for_each(|((a, b), &v)| *a += b * kernels::gelu_grad_scalar(v))
            })
        }
        Op::LayerNorm { x, gamma, beta, cols, xhat, rstd } => {
            let c = *cols;
            let gv = &nodes[gamma.0].value;
            accumulate(grads, nodes, *x, |d| {
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = &g[r * c..(r + 1) * c];
                    let hr = &xhat[r * c..(r + 1) * c];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..c {
                        let dh = gr[j] * gv[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                    }
                    mean_dh /= c as f64;
                    mean_dh_h /= c as f64;
                    for j in 0..c {
                        let dh = gr[j] * gv[j];
                        d[r * c + j] += rs * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
            });
            accumulate(grads, nodes, *gamma, |d| {
                for (gr, hr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    d.iter_mut().zip(gr).zip(hr).for_each(|((a, b), h)| *a += b * h);
                }
            });
            accumulate(grads, nodes, *beta, |d| g.chunks_exact(c).for_each(|gr| add_into(d, gr)));
        }
        &Op::DwConv3d { x, kernel, dims, kdims, channels } => {
            let xv = &nodes[x.0].value;
            let kv = &nodes[kernel.0].value;
            let mut dx = nodes[x.0].requires_grad.then(|| vec![0.0; xv.len()]);
            let mut dk = nodes[kernel.0].requires_grad.then(|| vec![0.0; kv.len()]);
            kernels::dwconv3d_backward(g, xv, dims, kv, kdims, channels, dx.as_deref_mut(), dk.as_deref_mut());
            if let Some(dx) = dx {
                accumulate(grads, nodes, x, |d| add_into(d, &dx));
            }
            if let Some(dk) = dk {
                accumulate(grads, nodes, kernel, |d| add_into(d, &dk));
            }
        }
        Op::Pool { x, dims, stride, channels, kind, argmax } => accumulate(grads, nodes, *x, |d| match kind {
            PoolKind::Avg => kernels::avg_pool3d_backward(g, *dims, *channels, *stride, d),
            PoolKind::Max => argmax.iter().zip(g).for_each(|(&src, b)| d[src] += b),
        }),
        Op::Concat { xs, widths } => {
            let total: usize = widths.iter().sum();
            let rows = g.len() / total;
            let mut offset = 0;
            for (&v, &w) in xs.iter().zip(widths) {
                accumulate(grads, nodes, v, |d| {
                    for r in 0..rows {
                        add_into(&mut d[r * w..(r + 1) * w], &g[r * total + offset..r * total + offset + w]);
                    }
                });
                offset += w;
            }
        }
        Op::ConcatRows { xs } => {
            let mut offset = 0;
            for &v in xs {
                let len = nodes[v.0].value.len();
                accumulate(grads, nodes, v, |d| add_into(d, &g[offset..offset + len]));
                offset += len;
            }
        }
        Op::L2Normalize { x, cols, norms } => {
            let y = &node.value;
            accumulate(grads, nodes, *x, |d| {
                for (r, &n) in norms.iter().enumerate() {
                    let (gr, yr) = (&g[r * cols..(r + 1) * cols], &y[r * cols..(r + 1) * cols]);
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    let dr = &mut d[r * cols..(r + 1) * cols];
                    if n > NORM_EPS {
                        for j in 0..*cols {
                            dr[j] += (gr[j] - yr[j] * dot) / n;
                        }
                    } else {
                        for j in 0..*cols {
                            dr[j] += gr[j] / n;
                        }
                    }
                }
            })
        }
        Op::MeanRows { x, cols } => {
            let rows = nodes[x.0].value.len() / cols;
            let inv = 1.0 / rows as f64;
            accumulate(grads, nodes, *x, |d| {
                for dr in d.chunks_exact_mut(*cols) {
                    dr.iter_mut().zip(g).for_each(|(a, b)| *a += b * inv);
                }
            })
        }
        Op::Sum { x } => accumulate(grads, nodes, *x, |d| d.iter_mut().for_each(|a| *a += g[0])),
        Op::PickRows { x, cols, index } => accumulate(grads, nodes, *x, |d| {
            for (r, &j) in index.iter().enumerate() {
                d[r * cols + j] += g[r];
            }
        }),
        Op::BceWithLogits { x, targets, weights } => {
            let xv = &nodes[x.0].value;
            accumulate(grads, nodes, *x, |d| {
                for (((a, &z), &t), &w) in d.iter_mut().zip(xv).zip(targets).zip(weights) {
                    *a += g[0] * w * (sigmoid(z) - t);
                }
            })
        }
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    d.iter_mut().zip(g).for_each(|(a, b)| *a += b);
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
