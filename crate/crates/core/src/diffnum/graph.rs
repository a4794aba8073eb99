//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is built fresh for every forward pass. Leaves are either
//! constants or trainable inputs (`requires_grad`); every operation whose
//! inputs include a trainable node records what its backward rule needs.
//! [`Graph::backward`] walks the tape in reverse once, accumulating
//! gradients into every reachable node.

use super::kernels::{self, ConvDims, Window};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics produced by a train-mode batch norm, for the caller to
/// fold into its running buffers.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased per-channel variance.
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Conv {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        dims: ConvDims,
    },
    ConvTranspose {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        dims: ConvDims,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        /// Batch statistics were used (train mode), so the mean and variance
        /// depend on the input.
        batch_stats: bool,
        channels: usize,
        spatial: usize,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Dense {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Reshape(NodeId),
    Concat(Vec<NodeId>),
    Slice {
        x: NodeId,
        start: usize,
    },
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Dot(NodeId, NodeId),
    Mse(NodeId, NodeId),
    MeanAbsDiff(NodeId, NodeId),
    SoftAssign {
        z: NodeId,
        mu: NodeId,
        alpha: f64,
    },
    Kl {
        target: Tensor,
        p: NodeId,
    },
}

/// Recorded computation.
#[derive(Default)]
pub struct Graph {
    values: Vec<Tensor>,
    grads: Vec<Option<Tensor>>,
    requires: Vec<bool>,
    ops: Vec<Op>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> NodeId {
        let id = NodeId(self.values.len());
        self.values.push(value);
        self.grads.push(None);
        self.requires.push(requires_grad);
        // Ops that no trainable input reaches never run backward.
        self.ops.push(if requires_grad { op } else { Op::Leaf });
        id
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, false, Op::Leaf)
    }

    /// Leaf that receives gradients.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.requires[id.0]
    }

    /// Gradient accumulated by the last [`backward`](Self::backward); zero for
    /// trainable nodes the loss does not reach, `None` for constants.
    pub fn grad(&self, id: NodeId) -> Option<Tensor> {
        if !self.requires[id.0] {
            return None;
        }
        Some(
            self.grads[id.0]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(self.values[id.0].shape())),
        )
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn any(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.requires[id.0])
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.values[id.0].shape()
    }

    fn expect_rank(&self, id: NodeId, rank: usize, ctx: &str) -> Result<()> {
        if self.shape(id).len() != rank {
            return Err(Error::invalid(format!(
                "{ctx}: expected a rank-{rank} input, got shape {:?}",
                self.shape(id)
            )));
        }
        Ok(())
    }

    /// 2-D cross-correlation. `x`: n×cin×h×w, `w`: cout×cin×k×k, `b`: cout.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        self.expect_rank(x, 4, "conv")?;
        self.expect_rank(w, 4, "conv weight")?;
        let &[n, cin, h, wd] = self.shape(x) else { unreachable!() };
        let &[cout, wcin, k, k2] = self.shape(w) else { unreachable!() };
        if wcin != cin || k != k2 {
            return Err(Error::shape("conv", &[cout, cin, k, k], self.shape(w)));
        }
        if self.shape(b) != [cout] {
            return Err(Error::shape("conv bias", &[cout], self.shape(b)));
        }
        let win = Window { kernel: k, stride, padding };
        let (Some(oh), Some(ow)) = (win.conv_out(h), win.conv_out(wd)) else {
            return Err(Error::invalid(format!("conv: {k}x{k} kernel does not fit input {:?}", self.shape(x))));
        };
        let dims = ConvDims { batch: n, in_ch: cin, out_ch: cout, h, w: wd, oh, ow, win };
        let out = kernels::conv2d_forward(&dims, self.values[x.0].data(), self.values[w.0].data(), self.values[b.0].data());
        let req = self.any(&[x, w, b]);
        Ok(self.push(Tensor::new(vec![n, cout, oh, ow], out)?, req, Op::Conv { x, w, b, dims }))
    }

    /// Transposed convolution. `w`: cin×cout×k×k (the layout of the
    /// convolution it transposes), `b`: cout.
    #[allow(clippy::too_many_arguments)]
    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<NodeId> {
        self.expect_rank(x, 4, "conv_transpose")?;
        self.expect_rank(w, 4, "conv_transpose weight")?;
        let &[n, cin, h, wd] = self.shape(x) else { unreachable!() };
        let &[wcin, cout, k, k2] = self.shape(w) else { unreachable!() };
        if wcin != cin || k != k2 {
            return Err(Error::shape("conv_transpose", &[cin, cout, k, k], self.shape(w)));
        }
        if self.shape(b) != [cout] {
            return Err(Error::shape("conv_transpose bias", &[cout], self.shape(b)));
        }
        if output_padding >= stride.max(1) {
            return Err(Error::invalid("conv_transpose: output padding must be smaller than stride"));
        }
        let win = Window { kernel: k, stride, padding };
        let (Some(oh), Some(ow)) = (win.transpose_out(h, output_padding), win.transpose_out(wd, output_padding)) else {
            return Err(Error::invalid(format!("conv_transpose: geometry invalid for input {:?}", self.shape(x))));
        };
        // Forward convolution view: big (cout×oh×ow) -> small (cin×h×w).
        let dims = ConvDims { batch: n, in_ch: cout, out_ch: cin, h: oh, w: ow, oh: h, ow: wd, win };
        let out = kernels::conv_transpose_forward(&dims, self.values[x.0].data(), self.values[w.0].data(), self.values[b.0].data());
        let req = self.any(&[x, w, b]);
        Ok(self.push(Tensor::new(vec![n, cout, oh, ow], out)?, req, Op::ConvTranspose { x, w, b, dims }))
    }

    /// Batch normalization over every axis but the channel axis (axis 1).
    /// With `running = Some((mean, var))` the given statistics are used
    /// (eval mode); otherwise batch statistics are computed and returned.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(NodeId, Option<BatchStats>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::invalid(format!("batch_norm: input needs a channel axis, got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm scale/shift", &[c], self.shape(gamma)));
        }
        let xs = self.values[x.0].data();
        let (mean, var, stats) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::shape("batch_norm running stats", &[c], &[m.len()]));
                }
                (m.to_vec(), v.to_vec(), None)
            }
            None => {
                let count = n * spatial;
                if count < 2 {
                    return Err(Error::invalid("batch_norm: train mode needs more than one value per channel"));
                }
                let (m, v) = kernels::channel_moments(xs, n, c, spatial);
                let unbiased = v.iter().map(|v| v * count as f64 / (count - 1) as f64).collect();
                (m.clone(), v, Some(BatchStats { mean: m, var: unbiased }))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.values[gamma.0].data();
        let bt = self.values[beta.0].data();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * spatial;
                for i in off..off + spatial {
                    let xh = (xs[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let req = self.any(&[x, gamma, beta]);
        let batch_stats = stats.is_some();
        let id = self.push(
            Tensor::new(shape, out)?,
            req,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats, channels: c, spatial },
        );
        Ok((id, stats))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.values[x.0].clone();
        let shape = v.shape().to_vec();
        let data = v.into_data().into_iter().map(|v| v.max(0.0)).collect();
        let req = self.any(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, req, Op::Relu(x)))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.values[x.0].clone();
        let shape = v.shape().to_vec();
        let data = v.into_data().into_iter().map(sigmoid).collect();
        let req = self.any(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, req, Op::Sigmoid(x)))
    }

    pub fn max_pool2d(&mut self, x: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        self.expect_rank(x, 4, "max_pool")?;
        let &[n, c, h, w] = self.shape(x) else { unreachable!() };
        let win = Window { kernel, stride, padding: 0 };
        let (Some(oh), Some(ow)) = (win.conv_out(h), win.conv_out(w)) else {
            return Err(Error::invalid(format!("max_pool: window does not fit input {:?}", self.shape(x))));
        };
        let (out, argmax) = kernels::max_pool_forward(self.values[x.0].data(), n * c, h, w, win, oh, ow);
        let req = self.any(&[x]);
        Ok(self.push(Tensor::new(vec![n, c, oh, ow], out)?, req, Op::MaxPool { x, argmax }))
    }

    /// Affine map `x·wᵀ + b`; `x`: n×in, `w`: out×in, `b`: out.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.expect_rank(x, 2, "dense")?;
        let &[n, fin] = self.shape(x) else { unreachable!() };
        let &[fout, wfin] = self.shape(w) else {
            return Err(Error::invalid(format!("dense: weight must be rank 2, got {:?}", self.shape(w))));
        };
        if wfin != fin {
            return Err(Error::shape("dense", &[fout, fin], self.shape(w)));
        }
        if self.shape(b) != [fout] {
            return Err(Error::shape("dense bias", &[fout], self.shape(b)));
        }
        let mut out = vec![0.0; n * fout];
        kernels::matmul(n, fin, fout, self.values[x.0].data(), false, self.values[w.0].data(), true, &mut out, false);
        let bias = self.values[b.0].data();
        for row in out.chunks_mut(fout) {
            row.iter_mut().zip(bias).for_each(|(o, b)| *o += b);
        }
        let req = self.any(&[x, w, b]);
        Ok(self.push(Tensor::new(vec![n, fout], out)?, req, Op::Dense { x, w, b }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.values[x.0].clone().reshape(shape)?;
        let req = self.any(&[x]);
        Ok(self.push(v, req, Op::Reshape(x)))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            if self.shape(*p)[1..] != tail[..] {
                return Err(Error::shape("concat", &tail, &self.shape(*p)[1..]));
            }
            n += self.shape(*p)[0];
            data.extend_from_slice(self.values[p.0].data());
        }
        let mut shape = vec![n];
        shape.extend(tail);
        let req = self.any(parts);
        Ok(self.push(Tensor::new(shape, data)?, req, Op::Concat(parts.to_vec())))
    }

    /// Rows `start..start+len` of the leading axis.
    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = &self.values[x.0];
        if start + len > v.batch() {
            return Err(Error::invalid(format!("slice {start}..{} out of range for {:?}", start + len, v.shape())));
        }
        let r = v.row_len();
        let mut shape = v.shape().to_vec();
        shape[0] = len;
        let data = v.data()[start * r..(start + len) * r].to_vec();
        let req = self.any(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, req, Op::Slice { x, start }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let data = self.values[a.0].data().iter().zip(self.values[b.0].data()).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let req = self.any(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, req, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let v = &self.values[x.0];
        let data = v.data().iter().map(|a| a * factor).collect();
        let shape = v.shape().to_vec();
        let req = self.any(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, req, Op::Scale(x, factor)))
    }

    /// `Σ a ⊙ b` as a scalar.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.values[a.0].dot(&self.values[b.0])?;
        let req = self.any(&[a, b]);
        Ok(self.push(Tensor::scalar(s), req, Op::Dot(a, b)))
    }

    /// Mean of squared elementwise differences.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mse", self.shape(a), self.shape(b)));
        }
        let s = mse_value(self.values[a.0].data(), self.values[b.0].data());
        let req = self.any(&[a, b]);
        Ok(self.push(Tensor::scalar(s), req, Op::Mse(a, b)))
    }

    /// Mean of absolute elementwise differences.
    pub fn mean_abs_diff(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mean_abs_diff", self.shape(a), self.shape(b)));
        }
        let s = mean_abs_diff_value(self.values[a.0].data(), self.values[b.0].data());
        let req = self.any(&[a, b]);
        Ok(self.push(Tensor::scalar(s), req, Op::MeanAbsDiff(a, b)))
    }

    /// Student-t soft assignment of embeddings `z` (n×d) to centers `mu`
    /// (K×d), normalized per row.
    pub fn soft_assign(&mut self, z: NodeId, mu: NodeId, alpha: f64) -> Result<NodeId> {
        let p = soft_assign_value(&self.values[z.0], &self.values[mu.0], alpha)?;
        let req = self.any(&[z, mu]);
        Ok(self.push(p, req, Op::SoftAssign { z, mu, alpha }))
    }

    /// `Σ t·ln(t/p)` against a constant target.
    pub fn kl_div(&mut self, target: &Tensor, p: NodeId) -> Result<NodeId> {
        let s = kl_value(target, &self.values[p.0])?;
        let req = self.any(&[p]);
        Ok(self.push(Tensor::scalar(s), req, Op::Kl { target: target.clone(), p }))
    }

    fn accumulate(grads: &mut [Option<Tensor>], requires: &[bool], id: NodeId, shape: &[usize], delta: Vec<f64>) {
        if !requires[id.0] {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => g.data_mut().iter_mut().zip(delta).for_each(|(a, d)| *a += d),
            slot @ None => {
                *slot = Some(Tensor::new(shape.to_vec(), delta).expect("gradient matches value shape"));
            }
        }
    }

    /// Populates gradients of every node reachable from the scalar `loss`.
    /// Gradients from earlier calls are discarded.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.values[loss.0].len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        if !self.requires[loss.0] {
            return Ok(());
        }
        let shape = self.values[loss.0].shape().to_vec();
        self.grads[loss.0] = Some(Tensor::new(shape, vec![1.0])?);

        let values = &self.values;
        let requires = &self.requires;
        let grads = &mut self.grads;
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let g = gout.data();
            let shp = |id: NodeId| values[id.0].shape();
            match &self.ops[idx] {
                Op::Leaf => {}
                Op::Conv { x, w, b, dims } => {
                    let r = kernels::conv2d_backward(dims, values[x.0].data(), values[w.0].data(), g);
                    Self::accumulate(grads, requires, *x, shp(*x), r.x);
                    Self::accumulate(grads, requires, *w, shp(*w), r.weight);
                    Self::accumulate(grads, requires, *b, shp(*b), r.bias);
                }
                Op::ConvTranspose { x, w, b, dims } => {
                    let r = kernels::conv_transpose_backward(dims, values[x.0].data(), values[w.0].data(), g);
                    Self::accumulate(grads, requires, *x, shp(*x), r.x);
                    Self::accumulate(grads, requires, *w, shp(*w), r.weight);
                    Self::accumulate(grads, requires, *b, shp(*b), r.bias);
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats, channels, spatial } => {
                    let (c, sp) = (*channels, *spatial);
                    let n = g.len() / (c * sp);
                    let gm = values[gamma.0].data();
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * sp;
                            for i in off..off + sp {
                                dgamma[ch] += g[i] * xhat[i];
                                dbeta[ch] += g[i];
                            }
                        }
                    }
                    let mut dx = vec![0.0; g.len()];
                    let m = (n * sp) as f64;
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * sp;
                            let k = gm[ch] * inv_std[ch];
                            for i in off..off + sp {
                                dx[i] = if *batch_stats {
                                    k * (g[i] - dbeta[ch] / m - xhat[i] * dgamma[ch] / m)
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                    Self::accumulate(grads, requires, *x, shp(*x), dx);
                    Self::accumulate(grads, requires, *gamma, shp(*gamma), dgamma);
                    Self::accumulate(grads, requires, *beta, shp(*beta), dbeta);
                }
                Op::Relu(x) => {
                    let dx = values[x.0].data().iter().zip(g).map(|(v, g)| if *v > 0.0 { *g } else { 0.0 }).collect();
                    Self::accumulate(grads, requires, *x, shp(*x), dx);
                }
                Op::Sigmoid(x) => {
                    let y = values[idx].data();
                    let dx = y.iter().zip(g).map(|(y, g)| g * y * (1.0 - y)).collect();
                    Self::accumulate(grads, requires, *x, shp(*x), dx);
                }
                Op::MaxPool { x, argmax } => {
                    let mut dx = vec![0.0; values[x.0].len()];
                    for (&i, gv) in argmax.iter().zip(g) {
                        dx[i] += gv;
                    }
                    Self::accumulate(grads, requires, *x, shp(*x), dx);
                }
                Op::Dense { x, w, b } => {
                    let &[n, fin] = shp(*x) else { unreachable!() };
                    let fout = shp(*w)[0];
                    let mut dx = vec![0.0; n * fin];
                    kernels::matmul(n, fout, fin, g, false, values[w.0].data(), false, &mut dx, false);
                    let mut dw = vec![0.0; fout * fin];
                    kernels::matmul(fout, n, fin, g, true, values[x.0].data(), false, &mut dw, false);
                    let mut db = vec![0.0; fout];
                    for row in g.chunks(fout) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                    Self::accumulate(grads, requires, *x, shp(*x), dx);
                    Self::accumulate(grads, requires, *w, shp(*w), dw);
                    Self::accumulate(grads, requires, *b, shp(*b), db);
                }
                Op::Reshape(x) => Self::accumulate(grads, requires, *x, shp(*x), g.to_vec()),
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = values[p.0].len();
                        Self::accumulate(grads, requires, *p, shp(*p), g[off..off + len].to_vec());
                        off += len;
                    }
                }
                Op::Slice { x, start } => {
                    let r = values[x.0].row_len();
                    let mut dx = vec![0.0; values[x.0].len()];
                    dx[start * r..start * r + g.len()].copy_from_slice(g);
                    Self::accumulate(grads, requires, *x, shp(*x), dx);
                }
                Op::Add(a, b) => {
                    Self::accumulate(grads, requires, *a, shp(*a), g.to_vec());
                    Self::accumulate(grads, requires, *b, shp(*b), g.to_vec());
                }
                Op::Scale(x, f) => {
                    Self::accumulate(grads, requires, *x, shp(*x), g.iter().map(|v| v * f).collect());
                }
                Op::Dot(a, b) => {
                    let s = g[0];
                    let da = values[b.0].data().iter().map(|v| v * s).collect();
                    let db = values[a.0].data().iter().map(|v| v * s).collect();
                    Self::accumulate(grads, requires, *a, shp(*a), da);
                    Self::accumulate(grads, requires, *b, shp(*b), db);
                }
                Op::Mse(a, b) => {
                    let (va, vb) = (values[a.0].data(), values[b.0].data());
                    let k = 2.0 * g[0] / va.len() as f64;
                    let da: Vec<f64> = va.iter().zip(vb).map(|(x, y)| k * (x - y)).collect();
                    let db = da.iter().map(|v| -v).collect();
                    Self::accumulate(grads, requires, *a, shp(*a), da);
                    Self::accumulate(grads, requires, *b, shp(*b), db);
                }
                Op::MeanAbsDiff(a, b) => {
                    let (va, vb) = (values[a.0].data(), values[b.0].data());
                    let k = g[0] / va.len() as f64;
                    let da: Vec<f64> = va.iter().zip(vb).map(|(x, y)| k * sign(x - y)).collect();
                    let db = da.iter().map(|v| -v).collect();
                    Self::accumulate(grads, requires, *a, shp(*a), da);
                    Self::accumulate(grads, requires, *b, shp(*b), db);
                }
                Op::SoftAssign { z, mu, alpha } => {
                    let (dz, dmu) = soft_assign_backward(&values[z.0], &values[mu.0], &values[idx], g, *alpha);
                    Self::accumulate(grads, requires, *z, shp(*z), dz);
                    Self::accumulate(grads, requires, *mu, shp(*mu), dmu);
                }
                Op::Kl { target, p } => {
                    let s = g[0];
                    let dp = target
                        .data()
                        .iter()
                        .zip(values[p.0].data())
                        .map(|(t, p)| if *t > 0.0 { -s * t / p } else { 0.0 })
                        .collect();
                    Self::accumulate(grads, requires, *p, shp(*p), dp);
                }
            }
            grads[idx] = Some(gout);
        }
        Ok(())
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn mse_value(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

pub(crate) fn mean_abs_diff_value(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

pub(crate) fn soft_assign_value(z: &Tensor, mu: &Tensor, alpha: f64) -> Result<Tensor> {
    if z.shape().len() != 2 || mu.shape().len() != 2 {
        return Err(Error::invalid(format!(
            "soft_assign: embeddings {:?} and centers {:?} must be matrices",
            z.shape(),
            mu.shape()
        )));
    }
    let (n, d) = (z.shape()[0], z.shape()[1]);
    let k = mu.shape()[0];
    if mu.shape()[1] != d {
        return Err(Error::shape("soft_assign centers", &[k, d], mu.shape()));
    }
    if k < 2 {
        return Err(Error::invalid(format!("soft_assign needs at least 2 centers, got {k}")));
    }
    if !(alpha > 0.0) {
        return Err(Error::invalid(format!("soft_assign: alpha must be positive, got {alpha}")));
    }
    let expo = -(alpha + 1.0) / 2.0;
    let mut out = vec![0.0; n * k];
    let mut logq = vec![0.0; k];
    for i in 0..n {
        let zi = z.row(i);
        for (j, lq) in logq.iter_mut().enumerate() {
            let d2: f64 = zi.iter().zip(mu.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            *lq = expo * (d2 / alpha).ln_1p();
        }
        let max = logq.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let row = &mut out[i * k..(i + 1) * k];
        let mut total = 0.0;
        for (r, lq) in row.iter_mut().zip(&logq) {
            *r = (lq - max).exp();
            total += *r;
        }
        row.iter_mut().for_each(|r| *r /= total);
    }
    Tensor::new(vec![n, k], out)
}

fn soft_assign_backward(z: &Tensor, mu: &Tensor, p: &Tensor, g: &[f64], alpha: f64) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (z.shape()[0], z.shape()[1]);
    let k = mu.shape()[0];
    let mut dz = vec![0.0; n * d];
    let mut dmu = vec![0.0; k * d];
    for i in 0..n {
        let pi = p.row(i);
        let gi = &g[i * k..(i + 1) * k];
        let inner: f64 = pi.iter().zip(gi).map(|(p, g)| p * g).sum();
        let zi = z.row(i);
        for j in 0..k {
            let mj = mu.row(j);
            let d2: f64 = zi.iter().zip(mj).map(|(a, b)| (a - b) * (a - b)).sum();
            // d(log p_ij)/d(d2) via the softmax of log-kernels.
            let dlogq = pi[j] * (gi[j] - inner);
            let coef = dlogq * (-(alpha + 1.0) / (alpha + d2));
            for t in 0..d {
                let diff = zi[t] - mj[t];
                dz[i * d + t] += coef * diff;
                dmu[j * d + t] -= coef * diff;
            }
        }
    }
    (dz, dmu)
}

pub(crate) fn kl_value(target: &Tensor, p: &Tensor) -> Result<f64> {
    if target.shape() != p.shape() {
        return Err(Error::shape("kl", target.shape(), p.shape()));
    }
    let mut s = 0.0;
    for (idx, (t, q)) in target.data().iter().zip(p.data()).enumerate() {
        if *t > 0.0 {
            if *q <= 0.0 {
                return Err(Error::Numeric(format!(
                    "kl divergence is infinite: target {t} against zero probability at flat index {idx}"
                )));
            }
            s += t * (t / q).ln();
        }
    }
    Ok(s)
}
