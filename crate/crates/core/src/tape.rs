//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! A forward pass records one node per operation; inputs always precede
//! outputs, so a single reverse sweep visits every node exactly once.
//! Nodes own their activations. Ops save only what their gradient needs
//! (normalized values, gate sigmoids, softmax probabilities); plain inputs
//! are read back from the producing node.
//!
//! Tapes are single-threaded and short-lived: one per forward/backward
//! pass. [`Value`] handles are tagged with the owning tape's epoch and
//! panic if used against another tape.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{shape_err, Error, Result};
use crate::store::{ParamId, ParamStore};
use crate::tensor::{strides, Tensor};

static TAPE_EPOCH: AtomicU64 = AtomicU64::new(1);

/// Handle to a value on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value {
    idx: usize,
    epoch: u64,
}

/// Batch-norm running statistics plus the normalization constants.
#[derive(Debug, Clone)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BnState {
    /// Fresh state: mean 0, var 1, momentum 0.1, eps 1e-5.
    pub fn new(channels: usize) -> Self {
        BnState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

enum Op {
    Leaf,
    Add,
    Mul,
    Scale(f64),
    AddBias,
    Matmul { m: usize, k: usize, n: usize },
    Bmm { batch: usize, m: usize, k: usize, n: usize },
    SwapAxes { ax0: usize, ax1: usize },
    Reshape,
    Concat { axis: usize },
    Narrow { axis: usize, start: usize },
    BroadcastBatch { copies: usize },
    Patchify { ph: usize, pw: usize },
    LayerNorm { xhat: Vec<f64>, rstd: Vec<f64> },
    BatchNorm { training: bool, xhat: Vec<f64>, rstd: Vec<f64> },
    Glu { sig: Vec<f64> },
    DepthwiseConv { ksize: usize, pad_left: usize },
    Relu,
    Sigmoid,
    Gelu,
    Swish { sig: Vec<f64> },
    SoftmaxRows,
    Sum,
    Mean,
    CrossEntropy { labels: Vec<usize>, probs: Vec<f64> },
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    shape: Vec<usize>,
    data: Vec<f64>,
    needs_grad: bool,
    source: Option<ParamId>,
}

/// Append-only computation record; replayed in reverse by [`Tape::backward`].
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: BTreeMap<ParamId, usize>,
    epoch: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: BTreeMap::new(),
            epoch: TAPE_EPOCH.fetch_add(1, Ordering::Relaxed),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn chk(&self, v: Value) -> usize {
        assert_eq!(
            v.epoch, self.epoch,
            "value belongs to tape epoch {} but this tape is epoch {}",
            v.epoch, self.epoch
        );
        v.idx
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, shape: Vec<usize>, data: Vec<f64>) -> Value {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        let idx = self.nodes.len();
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            data,
            needs_grad,
            source: None,
        });
        Value { idx, epoch: self.epoch }
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        let i = self.chk(v);
        &self.nodes[i].shape
    }

    pub fn data(&self, v: Value) -> &[f64] {
        let i = self.chk(v);
        &self.nodes[i].data
    }

    /// Scalar payload of a one-element value.
    pub fn scalar(&self, v: Value) -> f64 {
        let i = self.chk(v);
        assert_eq!(self.nodes[i].data.len(), 1, "value is not a scalar");
        self.nodes[i].data[0]
    }

    /// Gradient of a value after [`Tape::backward`]; `None` when the value
    /// was not reached or does not require gradients.
    pub fn grad(&self, v: Value) -> Option<&[f64]> {
        let i = self.chk(v);
        self.grads.get(i).and_then(|g| g.as_deref())
    }

    // ── Leaves ───────────────────────────────────────────────────────

    /// Untracked constant leaf.
    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<Value> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err(
                "constant",
                format!("shape {:?} vs {} elements", shape, data.len()),
            ));
        }
        Ok(self.push(Op::Leaf, vec![], shape.to_vec(), data))
    }

    /// Leaf from a tensor; tracked when the tensor requires gradients.
    pub fn leaf(&mut self, t: &Tensor) -> Value {
        let v = self
            .constant(t.data().to_vec(), t.shape())
            .expect("tensor shape is consistent by construction");
        self.nodes[v.idx].needs_grad = t.requires_grad();
        v
    }

    /// Leaf bound to a store entry; tracked when the entry is trainable.
    /// Repeated registration of the same id returns the same node, so a
    /// parameter used twice accumulates one gradient.
    pub fn param(&mut self, store: &ParamStore, id: &str) -> Result<Value> {
        if let Some(&idx) = self.params.get(id) {
            return Ok(Value { idx, epoch: self.epoch });
        }
        let t = store.tensor(id)?;
        let v = self.constant(t.data().to_vec(), t.shape())?;
        self.nodes[v.idx].needs_grad = store.is_trainable(id);
        self.nodes[v.idx].source = Some(id.to_string());
        self.params.insert(id.to_string(), v.idx);
        Ok(v)
    }

    // ── Elementwise and affine ───────────────────────────────────────

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        let (ia, ib) = (self.chk(a), self.chk(b));
        if self.nodes[ia].shape != self.nodes[ib].shape {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", self.nodes[ia].shape, self.nodes[ib].shape),
            ));
        }
        let data = zip_map(&self.nodes[ia].data, &self.nodes[ib].data, |x, y| x + y);
        let shape = self.nodes[ia].shape.clone();
        Ok(self.push(Op::Add, vec![ia, ib], shape, data))
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (ia, ib) = (self.chk(a), self.chk(b));
        if self.nodes[ia].shape != self.nodes[ib].shape {
            return Err(shape_err(
                "mul",
                format!("{:?} vs {:?}", self.nodes[ia].shape, self.nodes[ib].shape),
            ));
        }
        let data = zip_map(&self.nodes[ia].data, &self.nodes[ib].data, |x, y| x * y);
        let shape = self.nodes[ia].shape.clone();
        Ok(self.push(Op::Mul, vec![ia, ib], shape, data))
    }

    pub fn scale(&mut self, x: Value, c: f64) -> Value {
        let i = self.chk(x);
        let data = self.nodes[i].data.iter().map(|&v| c * v).collect();
        let shape = self.nodes[i].shape.clone();
        self.push(Op::Scale(c), vec![i], shape, data)
    }

    /// `x + bias` with the bias broadcast over all leading axes.
    pub fn add_bias(&mut self, x: Value, bias: Value) -> Result<Value> {
        let (ix, ib) = (self.chk(x), self.chk(bias));
        let d = match self.nodes[ix].shape.last() {
            Some(&d) => d,
            None => return Err(shape_err("add_bias", "scalar input".into())),
        };
        if self.nodes[ib].shape != [d] {
            return Err(shape_err(
                "add_bias",
                format!("x {:?} vs bias {:?}", self.nodes[ix].shape, self.nodes[ib].shape),
            ));
        }
        let bias_data = &self.nodes[ib].data;
        let mut data = self.nodes[ix].data.clone();
        for row in data.chunks_mut(d) {
            for (o, &b) in row.iter_mut().zip(bias_data.iter()) {
                *o += b;
            }
        }
        let shape = self.nodes[ix].shape.clone();
        Ok(self.push(Op::AddBias, vec![ix, ib], shape, data))
    }

    // ── Matrix products ──────────────────────────────────────────────

    /// `a @ b` where `b` is `[k, n]` and `a` is `[..., k]` with rank >= 2;
    /// the leading axes of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (ia, ib) = (self.chk(a), self.chk(b));
        let ashape = &self.nodes[ia].shape;
        let bshape = &self.nodes[ib].shape;
        if ashape.len() < 2 || bshape.len() != 2 || ashape[ashape.len() - 1] != bshape[0] {
            return Err(shape_err(
                "matmul",
                format!("lhs {ashape:?} vs rhs {bshape:?}"),
            ));
        }
        let k = bshape[0];
        let n = bshape[1];
        let m = self.nodes[ia].data.len() / k;
        let mut data = vec![0.0; m * n];
        mm_acc(&self.nodes[ia].data, &self.nodes[ib].data, m, k, n, &mut data);
        let mut shape = ashape[..ashape.len() - 1].to_vec();
        shape.push(n);
        Ok(self.push(Op::Matmul { m, k, n }, vec![ia, ib], shape, data))
    }

    /// Batched matmul: `a [..., m, k] @ b [..., k, n]` with identical
    /// leading axes.
    pub fn bmm(&mut self, a: Value, b: Value) -> Result<Value> {
        let (ia, ib) = (self.chk(a), self.chk(b));
        let ashape = &self.nodes[ia].shape;
        let bshape = &self.nodes[ib].shape;
        let ra = ashape.len();
        let rb = bshape.len();
        if ra < 3 || ra != rb || ashape[..ra - 2] != bshape[..rb - 2] || ashape[ra - 1] != bshape[rb - 2]
        {
            return Err(shape_err("bmm", format!("lhs {ashape:?} vs rhs {bshape:?}")));
        }
        let m = ashape[ra - 2];
        let k = ashape[ra - 1];
        let n = bshape[rb - 1];
        let batch: usize = ashape[..ra - 2].iter().product();
        let mut data = vec![0.0; batch * m * n];
        for bi in 0..batch {
            mm_acc(
                &self.nodes[ia].data[bi * m * k..(bi + 1) * m * k],
                &self.nodes[ib].data[bi * k * n..(bi + 1) * k * n],
                m,
                k,
                n,
                &mut data[bi * m * n..(bi + 1) * m * n],
            );
        }
        let mut shape = ashape[..ra - 2].to_vec();
        shape.push(m);
        shape.push(n);
        Ok(self.push(Op::Bmm { batch, m, k, n }, vec![ia, ib], shape, data))
    }

    // ── Shape manipulation ───────────────────────────────────────────

    pub fn swap_axes(&mut self, x: Value, ax0: usize, ax1: usize) -> Result<Value> {
        let i = self.chk(x);
        let shape = &self.nodes[i].shape;
        if ax0 >= shape.len() || ax1 >= shape.len() {
            return Err(shape_err(
                "swap_axes",
                format!("axes ({ax0}, {ax1}) out of range for {shape:?}"),
            ));
        }
        let mut out_shape = shape.clone();
        out_shape.swap(ax0, ax1);
        let data = permute_two_axes(&self.nodes[i].data, shape, ax0, ax1);
        Ok(self.push(Op::SwapAxes { ax0, ax1 }, vec![i], out_shape, data))
    }

    pub fn reshape(&mut self, x: Value, new_shape: &[usize]) -> Result<Value> {
        let i = self.chk(x);
        let numel: usize = new_shape.iter().product();
        if numel != self.nodes[i].data.len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {:?}", self.nodes[i].shape, new_shape),
            ));
        }
        let data = self.nodes[i].data.clone();
        Ok(self.push(Op::Reshape, vec![i], new_shape.to_vec(), data))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Value], axis: usize) -> Result<Value> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no inputs".into()));
        }
        let idxs: Vec<usize> = parts.iter().map(|&v| self.chk(v)).collect();
        let first = &self.nodes[idxs[0]].shape;
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} for shape {first:?}")));
        }
        let mut axis_total = 0usize;
        for &i in &idxs {
            let s = &self.nodes[i].shape;
            if s.len() != first.len()
                || s.iter()
                    .zip(first.iter())
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(shape_err(
                    "concat",
                    format!("{:?} vs {:?} along axis {axis}", s, first),
                ));
            }
            axis_total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let mut data = vec![0.0; outer * axis_total * inner];
        for o in 0..outer {
            let mut written = 0usize;
            for &i in &idxs {
                let len = self.nodes[i].shape[axis];
                let src = &self.nodes[i].data[o * len * inner..(o + 1) * len * inner];
                let dst_start = (o * axis_total + written) * inner;
                data[dst_start..dst_start + len * inner].copy_from_slice(src);
                written += len;
            }
        }
        Ok(self.push(Op::Concat { axis }, idxs, out_shape, data))
    }

    /// Slice of `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Value, axis: usize, start: usize, len: usize) -> Result<Value> {
        let i = self.chk(x);
        let shape = &self.nodes[i].shape;
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err(
                "narrow",
                format!("axis {axis} range {start}..{} for shape {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src = &self.nodes[i].data[(o * full + start) * inner..(o * full + start + len) * inner];
            data[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
        }
        Ok(self.push(Op::Narrow { axis, start }, vec![i], out_shape, data))
    }

    /// Replicates `x` along a new leading axis of extent `copies`.
    pub fn broadcast_batch(&mut self, x: Value, copies: usize) -> Result<Value> {
        if copies == 0 {
            return Err(shape_err("broadcast_batch", "zero copies".into()));
        }
        let i = self.chk(x);
        let n = self.nodes[i].data.len();
        let mut data = Vec::with_capacity(n * copies);
        for _ in 0..copies {
            data.extend_from_slice(&self.nodes[i].data);
        }
        let mut shape = vec![copies];
        shape.extend_from_slice(&self.nodes[i].shape);
        Ok(self.push(Op::BroadcastBatch { copies }, vec![i], shape, data))
    }

    /// Rearranges `[B, F, T]` into `[B, N, ph*pw]` patch rows; the patch
    /// grid is row-major over (F/ph, T/pw), each patch flattened row-major.
    pub fn patchify(&mut self, x: Value, ph: usize, pw: usize) -> Result<Value> {
        let i = self.chk(x);
        let shape = &self.nodes[i].shape;
        if shape.len() != 3 || ph == 0 || pw == 0 || shape[1] % ph != 0 || shape[2] % pw != 0 {
            return Err(shape_err(
                "patchify",
                format!("input {shape:?} with patch {ph}x{pw}"),
            ));
        }
        let (b, f, t) = (shape[0], shape[1], shape[2]);
        let (gf, gt) = (f / ph, t / pw);
        let n = gf * gt;
        let p = ph * pw;
        let src = &self.nodes[i].data;
        let mut data = vec![0.0; b * n * p];
        for bi in 0..b {
            for gi in 0..gf {
                for gj in 0..gt {
                    let patch = gi * gt + gj;
                    for pi in 0..ph {
                        for pj in 0..pw {
                            let dst = ((bi * n + patch) * p) + pi * pw + pj;
                            let srci = (bi * f + gi * ph + pi) * t + gj * pw + pj;
                            data[dst] = src[srci];
                        }
                    }
                }
            }
        }
        Ok(self.push(Op::Patchify { ph, pw }, vec![i], vec![b, n, p], data))
    }

    // ── Normalization ────────────────────────────────────────────────

    /// Per-row (last axis) normalization followed by `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Value, gamma: Value, beta: Value, eps: f64) -> Result<Value> {
        let (ix, ig, ib) = (self.chk(x), self.chk(gamma), self.chk(beta));
        let d = match self.nodes[ix].shape.last() {
            Some(&d) if d >= 1 => d,
            _ => return Err(shape_err("layer_norm", "input must have a last axis".into())),
        };
        if self.nodes[ig].shape != [d] || self.nodes[ib].shape != [d] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    self.nodes[ix].shape, self.nodes[ig].shape, self.nodes[ib].shape
                ),
            ));
        }
        let rows = self.nodes[ix].data.len() / d;
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut data = vec![0.0; rows * d];
        let g = &self.nodes[ig].data;
        let bt = &self.nodes[ib].data;
        for r in 0..rows {
            let row = &self.nodes[ix].data[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                data[r * d + j] = g[j] * xh + bt[j];
            }
        }
        let shape = self.nodes[ix].shape.clone();
        Ok(self.push(Op::LayerNorm { xhat, rstd }, vec![ix, ig, ib], shape, data))
    }

    /// Channel-wise batch norm over `[B, N, c]`. Training mode normalizes
    /// with batch statistics and folds them into `state`'s running values
    /// (unbiased variance, PyTorch convention); eval mode normalizes with
    /// the running values.
    pub fn batch_norm1d(
        &mut self,
        x: Value,
        gamma: Value,
        beta: Value,
        state: &mut BnState,
        training: bool,
    ) -> Result<Value> {
        let (ix, ig, ib) = (self.chk(x), self.chk(gamma), self.chk(beta));
        let shape = self.nodes[ix].shape.clone();
        if shape.len() != 3 {
            return Err(shape_err("batch_norm1d", format!("expected [B, N, c], got {shape:?}")));
        }
        let c = shape[2];
        if self.nodes[ig].shape != [c] || self.nodes[ib].shape != [c] || state.channels() != c {
            return Err(shape_err(
                "batch_norm1d",
                format!("channels {c} vs gamma {:?} / state {}", self.nodes[ig].shape, state.channels()),
            ));
        }
        let m = shape[0] * shape[1];
        let src = &self.nodes[ix].data;
        let (mean, var): (Vec<f64>, Vec<f64>) = if training {
            let mut mean = vec![0.0; c];
            for row in src.chunks(c) {
                for (j, &v) in row.iter().enumerate() {
                    mean[j] += v;
                }
            }
            for mj in mean.iter_mut() {
                *mj /= m as f64;
            }
            let mut var = vec![0.0; c];
            for row in src.chunks(c) {
                for (j, &v) in row.iter().enumerate() {
                    let d = v - mean[j];
                    var[j] += d * d;
                }
            }
            for vj in var.iter_mut() {
                *vj /= m as f64;
            }
            (mean, var)
        } else {
            (state.running_mean.clone(), state.running_var.clone())
        };
        let rstd: Vec<f64> = var.iter().map(|&v| 1.0 / (v + state.eps).sqrt()).collect();
        let g = &self.nodes[ig].data;
        let bt = &self.nodes[ib].data;
        let mut xhat = vec![0.0; src.len()];
        let mut data = vec![0.0; src.len()];
        for (r, row) in src.chunks(c).enumerate() {
            for j in 0..c {
                let xh = (row[j] - mean[j]) * rstd[j];
                xhat[r * c + j] = xh;
                data[r * c + j] = g[j] * xh + bt[j];
            }
        }
        if training {
            let mom = state.momentum;
            let unbias = if m > 1 { m as f64 / (m as f64 - 1.0) } else { 1.0 };
            for j in 0..c {
                state.running_mean[j] = (1.0 - mom) * state.running_mean[j] + mom * mean[j];
                state.running_var[j] = (1.0 - mom) * state.running_var[j] + mom * var[j] * unbias;
            }
        }
        Ok(self.push(Op::BatchNorm { training, xhat, rstd }, vec![ix, ig, ib], shape, data))
    }

    // ── Gates, convolution, activations ──────────────────────────────

    /// Gated linear unit over the last axis: splits channels into halves
    /// `(a, b)` and returns `a * sigmoid(b)`.
    pub fn glu(&mut self, x: Value) -> Result<Value> {
        let i = self.chk(x);
        let shape = &self.nodes[i].shape;
        let two_r = match shape.last() {
            Some(&c) if c % 2 == 0 && c > 0 => c,
            _ => {
                return Err(shape_err(
                    "glu",
                    format!("last axis must be even and positive, got {shape:?}"),
                ))
            }
        };
        let r = two_r / 2;
        let rows = self.nodes[i].data.len() / two_r;
        let mut sig = vec![0.0; rows * r];
        let mut data = vec![0.0; rows * r];
        for row in 0..rows {
            let src = &self.nodes[i].data[row * two_r..(row + 1) * two_r];
            for j in 0..r {
                let s = sigmoid(src[r + j]);
                sig[row * r + j] = s;
                data[row * r + j] = src[j] * s;
            }
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = r;
        Ok(self.push(Op::Glu { sig }, vec![i], out_shape, data))
    }

    /// Per-channel 1-D convolution along the sequence axis with "same"
    /// zero padding (left pad floor((k-1)/2)). Accepts `[N, c]` or
    /// `[B, N, c]`; `w` is `[c, k]`, `bias` is `[c]`.
    pub fn depthwise_conv1d(&mut self, x: Value, w: Value, bias: Value) -> Result<Value> {
        let (ix, iw, ib) = (self.chk(x), self.chk(w), self.chk(bias));
        let shape = self.nodes[ix].shape.clone();
        let (bsz, n, c) = match shape.len() {
            2 => (1, shape[0], shape[1]),
            3 => (shape[0], shape[1], shape[2]),
            _ => return Err(shape_err("depthwise_conv1d", format!("expected rank 2 or 3, got {shape:?}"))),
        };
        let wshape = &self.nodes[iw].shape;
        if wshape.len() != 2 || wshape[0] != c || wshape[1] == 0 {
            return Err(Error::Config(format!(
                "depthwise kernel must be [channels={c}, k>=1], got {wshape:?}"
            )));
        }
        let ksize = wshape[1];
        if self.nodes[ib].shape != [c] {
            return Err(shape_err(
                "depthwise_conv1d",
                format!("bias {:?} vs channels {c}", self.nodes[ib].shape),
            ));
        }
        let pad_left = (ksize - 1) / 2;
        let src = &self.nodes[ix].data;
        let wdat = &self.nodes[iw].data;
        let bdat = &self.nodes[ib].data;
        let mut data = vec![0.0; src.len()];
        for b in 0..bsz {
            let base = b * n * c;
            for pos in 0..n {
                for ch in 0..c {
                    let mut acc = bdat[ch];
                    for j in 0..ksize {
                        let t = pos as isize + j as isize - pad_left as isize;
                        if t >= 0 && (t as usize) < n {
                            acc += src[base + t as usize * c + ch] * wdat[ch * ksize + j];
                        }
                    }
                    data[base + pos * c + ch] = acc;
                }
            }
        }
        Ok(self.push(Op::DepthwiseConv { ksize, pad_left }, vec![ix, iw, ib], shape, data))
    }

    pub fn relu(&mut self, x: Value) -> Value {
        let i = self.chk(x);
        let data = self.nodes[i].data.iter().map(|&v| v.max(0.0)).collect();
        let shape = self.nodes[i].shape.clone();
        self.push(Op::Relu, vec![i], shape, data)
    }

    pub fn sigmoid(&mut self, x: Value) -> Value {
        let i = self.chk(x);
        let data = self.nodes[i].data.iter().map(|&v| sigmoid(v)).collect();
        let shape = self.nodes[i].shape.clone();
        self.push(Op::Sigmoid, vec![i], shape, data)
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, x: Value) -> Value {
        let i = self.chk(x);
        let data = self.nodes[i].data.iter().map(|&v| gelu(v)).collect();
        let shape = self.nodes[i].shape.clone();
        self.push(Op::Gelu, vec![i], shape, data)
    }

    /// `x * sigmoid(x)`.
    pub fn swish(&mut self, x: Value) -> Value {
        let i = self.chk(x);
        let sig: Vec<f64> = self.nodes[i].data.iter().map(|&v| sigmoid(v)).collect();
        let data = self.nodes[i].data.iter().zip(sig.iter()).map(|(&v, &s)| v * s).collect();
        let shape = self.nodes[i].shape.clone();
        self.push(Op::Swish { sig }, vec![i], shape, data)
    }

    /// Softmax over the last axis; each row sums to 1.
    pub fn softmax_rows(&mut self, x: Value) -> Result<Value> {
        let i = self.chk(x);
        let d = match self.nodes[i].shape.last() {
            Some(&d) if d >= 1 => d,
            _ => return Err(shape_err("softmax_rows", "input must have a last axis".into())),
        };
        let mut data = self.nodes[i].data.clone();
        for row in data.chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let shape = self.nodes[i].shape.clone();
        Ok(self.push(Op::SoftmaxRows, vec![i], shape, data))
    }

    // ── Reductions and loss ──────────────────────────────────────────

    pub fn sum(&mut self, x: Value) -> Value {
        let i = self.chk(x);
        let s = self.nodes[i].data.iter().sum();
        self.push(Op::Sum, vec![i], vec![], vec![s])
    }

    pub fn mean(&mut self, x: Value) -> Value {
        let i = self.chk(x);
        let n = self.nodes[i].data.len() as f64;
        let s = self.nodes[i].data.iter().sum::<f64>() / n;
        self.push(Op::Mean, vec![i], vec![], vec![s])
    }

    /// Mean cross-entropy of `logits [B, C]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Value, labels: &[usize]) -> Result<Value> {
        let i = self.chk(logits);
        let shape = &self.nodes[i].shape;
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(shape_err(
                "cross_entropy",
                format!("logits {shape:?} vs {} labels", labels.len()),
            ));
        }
        let (b, c) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Contract(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for (bi, label) in labels.iter().enumerate() {
            let row = &self.nodes[i].data[bi * c..(bi + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[bi * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                probs[bi * c + j] /= sum;
            }
            loss -= probs[bi * c + label].ln();
        }
        loss /= b as f64;
        Ok(self.push(
            Op::CrossEntropy { labels: labels.to_vec(), probs },
            vec![i],
            vec![],
            vec![loss],
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients land on tape values
    /// (see [`Tape::grad`]); use [`Tape::write_grads`] to move parameter
    /// gradients into a store.
    pub fn backward(&mut self, loss: Value) -> Result<()> {
        let li = self.chk(loss);
        if self.nodes[li].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[li].shape
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[li].needs_grad {
            return Ok(());
        }
        self.grads[li] = Some(vec![1.0]);
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        for i in (0..=li).rev() {
            if !nodes[i].needs_grad || grads[i].is_none() {
                continue;
            }
            let g = grads[i].take().expect("grad present");
            backprop_node(nodes, grads, i, &g);
            grads[i] = Some(g);
        }
        Ok(())
    }

    /// Copies gradients of registered trainable parameters into the store.
    /// Frozen parameters are left untouched (no gradient allocated).
    pub fn write_grads(&self, store: &mut ParamStore) -> Result<()> {
        for (id, &idx) in &self.params {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            if let Some(Some(g)) = self.grads.get(idx) {
                store.tensor_mut(id)?.set_grad(g.clone());
            }
        }
        Ok(())
    }

    /// Gradient for a registered parameter, if any was computed.
    pub fn param_grad(&self, id: &str) -> Option<&[f64]> {
        let &idx = self.params.get(id)?;
        self.grads.get(idx).and_then(|g| g.as_deref())
    }
}

// ── Backward dispatch ────────────────────────────────────────────────

fn backprop_node(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let inputs = &nodes[i].inputs;
    let wants = |j: usize| nodes[inputs[j]].needs_grad;
    macro_rules! sink {
        ($j:expr) => {
            grads[inputs[$j]].get_or_insert_with(|| vec![0.0; nodes[inputs[$j]].data.len()])
        };
    }
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add => {
            for j in 0..2 {
                if wants(j) {
                    axpy(sink!(j), g, 1.0);
                }
            }
        }
        Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            if wants(0) {
                let bd = &nodes[b].data;
                let dst = sink!(0);
                for ((o, &gv), &bv) in dst.iter_mut().zip(g).zip(bd) {
                    *o += gv * bv;
                }
            }
            if wants(1) {
                let ad = &nodes[a].data;
                let dst = sink!(1);
                for ((o, &gv), &av) in dst.iter_mut().zip(g).zip(ad) {
                    *o += gv * av;
                }
            }
        }
        Op::Scale(c) => {
            if wants(0) {
                axpy(sink!(0), g, *c);
            }
        }
        Op::AddBias => {
            if wants(0) {
                axpy(sink!(0), g, 1.0);
            }
            if wants(1) {
                let d = nodes[inputs[1]].data.len();
                let dst = sink!(1);
                for row in g.chunks(d) {
                    for (o, &gv) in dst.iter_mut().zip(row) {
                        *o += gv;
                    }
                }
            }
        }
        Op::Matmul { m, k, n } => {
            let (a, b) = (inputs[0], inputs[1]);
            if wants(0) {
                mm_bt_acc(g, &nodes[b].data, *m, *k, *n, sink!(0));
            }
            if wants(1) {
                mm_at_acc(&nodes[a].data, g, *m, *k, *n, sink!(1));
            }
        }
        Op::Bmm { batch, m, k, n } => {
            let (a, b) = (inputs[0], inputs[1]);
            let (mk, kn, mn) = (m * k, k * n, m * n);
            if wants(0) {
                let bd = &nodes[b].data;
                let dst = sink!(0);
                for bi in 0..*batch {
                    mm_bt_acc(
                        &g[bi * mn..(bi + 1) * mn],
                        &bd[bi * kn..(bi + 1) * kn],
                        *m,
                        *k,
                        *n,
                        &mut dst[bi * mk..(bi + 1) * mk],
                    );
                }
            }
            if wants(1) {
                let ad = &nodes[a].data;
                let dst = sink!(1);
                for bi in 0..*batch {
                    mm_at_acc(
                        &ad[bi * mk..(bi + 1) * mk],
                        &g[bi * mn..(bi + 1) * mn],
                        *m,
                        *k,
                        *n,
                        &mut dst[bi * kn..(bi + 1) * kn],
                    );
                }
            }
        }
        Op::SwapAxes { ax0, ax1 } => {
            if wants(0) {
                let back = permute_two_axes(g, &nodes[i].shape, *ax0, *ax1);
                axpy(sink!(0), &back, 1.0);
            }
        }
        Op::Reshape => {
            if wants(0) {
                axpy(sink!(0), g, 1.0);
            }
        }
        Op::Concat { axis } => {
            let out_shape = &nodes[i].shape;
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[*axis + 1..].iter().product();
            let total = out_shape[*axis];
            let mut offset = 0usize;
            for (j, &inp) in inputs.iter().enumerate() {
                let len = nodes[inp].shape[*axis];
                if wants(j) {
                    let dst = sink!(j);
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        for (d, &s) in dst[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                offset += len;
            }
        }
        Op::Narrow { axis, start } => {
            if wants(0) {
                let in_shape = &nodes[inputs[0]].shape;
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[*axis + 1..].iter().product();
                let full = in_shape[*axis];
                let len = nodes[i].shape[*axis];
                let dst = sink!(0);
                for o in 0..outer {
                    let d = &mut dst[(o * full + start) * inner..(o * full + start + len) * inner];
                    let s = &g[o * len * inner..(o + 1) * len * inner];
                    for (dv, &sv) in d.iter_mut().zip(s) {
                        *dv += sv;
                    }
                }
            }
        }
        Op::BroadcastBatch { copies } => {
            if wants(0) {
                let n = nodes[inputs[0]].data.len();
                let dst = sink!(0);
                for ci in 0..*copies {
                    for (d, &s) in dst.iter_mut().zip(&g[ci * n..(ci + 1) * n]) {
                        *d += s;
                    }
                }
            }
        }
        Op::Patchify { ph, pw } => {
            if wants(0) {
                let in_shape = &nodes[inputs[0]].shape;
                let (b, f, t) = (in_shape[0], in_shape[1], in_shape[2]);
                let (gf, gt) = (f / ph, t / pw);
                let (n, p) = (gf * gt, ph * pw);
                let dst = sink!(0);
                for bi in 0..b {
                    for gi in 0..gf {
                        for gj in 0..gt {
                            let patch = gi * gt + gj;
                            for pi in 0..*ph {
                                for pj in 0..*pw {
                                    let srci = ((bi * n + patch) * p) + pi * pw + pj;
                                    let dsti = (bi * f + gi * ph + pi) * t + gj * pw + pj;
                                    dst[dsti] += g[srci];
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::LayerNorm { xhat, rstd } => {
            let d = *nodes[i].shape.last().unwrap();
            let rows = xhat.len() / d;
            let gamma = &nodes[inputs[1]].data;
            if wants(0) {
                let dst = sink!(0);
                for r in 0..rows {
                    let gy = &g[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut mg = 0.0;
                    let mut mgx = 0.0;
                    for j in 0..d {
                        let gj = gy[j] * gamma[j];
                        mg += gj;
                        mgx += gj * xh[j];
                    }
                    mg /= d as f64;
                    mgx /= d as f64;
                    for j in 0..d {
                        let gj = gy[j] * gamma[j];
                        dst[r * d + j] += (gj - mg - xh[j] * mgx) * rstd[r];
                    }
                }
            }
            if wants(1) {
                let dst = sink!(1);
                for r in 0..rows {
                    for j in 0..d {
                        dst[j] += g[r * d + j] * xhat[r * d + j];
                    }
                }
            }
            if wants(2) {
                let dst = sink!(2);
                for r in 0..rows {
                    for j in 0..d {
                        dst[j] += g[r * d + j];
                    }
                }
            }
        }
        Op::BatchNorm { training, xhat, rstd } => {
            let c = *nodes[i].shape.last().unwrap();
            let m = xhat.len() / c;
            let gamma = &nodes[inputs[1]].data;
            if wants(0) {
                let dst = sink!(0);
                if *training {
                    let mut mg = vec![0.0; c];
                    let mut mgx = vec![0.0; c];
                    for r in 0..m {
                        for j in 0..c {
                            let gj = g[r * c + j] * gamma[j];
                            mg[j] += gj;
                            mgx[j] += gj * xhat[r * c + j];
                        }
                    }
                    for j in 0..c {
                        mg[j] /= m as f64;
                        mgx[j] /= m as f64;
                    }
                    for r in 0..m {
                        for j in 0..c {
                            let gj = g[r * c + j] * gamma[j];
                            dst[r * c + j] += (gj - mg[j] - xhat[r * c + j] * mgx[j]) * rstd[j];
                        }
                    }
                } else {
                    for r in 0..m {
                        for j in 0..c {
                            dst[r * c + j] += g[r * c + j] * gamma[j] * rstd[j];
                        }
                    }
                }
            }
            if wants(1) {
                let dst = sink!(1);
                for r in 0..m {
                    for j in 0..c {
                        dst[j] += g[r * c + j] * xhat[r * c + j];
                    }
                }
            }
            if wants(2) {
                let dst = sink!(2);
                for r in 0..m {
                    for j in 0..c {
                        dst[j] += g[r * c + j];
                    }
                }
            }
        }
        Op::Glu { sig } => {
            if wants(0) {
                let r = *nodes[i].shape.last().unwrap();
                let two_r = 2 * r;
                let rows = sig.len() / r;
                let x = &nodes[inputs[0]].data;
                let dst = sink!(0);
                for row in 0..rows {
                    for j in 0..r {
                        let s = sig[row * r + j];
                        let a = x[row * two_r + j];
                        let gv = g[row * r + j];
                        dst[row * two_r + j] += gv * s;
                        dst[row * two_r + r + j] += gv * a * s * (1.0 - s);
                    }
                }
            }
        }
        Op::DepthwiseConv { ksize, pad_left } => {
            let shape = &nodes[i].shape;
            let (bsz, n, c) = match shape.len() {
                2 => (1, shape[0], shape[1]),
                _ => (shape[0], shape[1], shape[2]),
            };
            let x = &nodes[inputs[0]].data;
            let w = &nodes[inputs[1]].data;
            if wants(0) {
                let dst = sink!(0);
                for b in 0..bsz {
                    let base = b * n * c;
                    for pos in 0..n {
                        for ch in 0..c {
                            let gv = g[base + pos * c + ch];
                            for j in 0..*ksize {
                                let t = pos as isize + j as isize - *pad_left as isize;
                                if t >= 0 && (t as usize) < n {
                                    dst[base + t as usize * c + ch] += gv * w[ch * ksize + j];
                                }
                            }
                        }
                    }
                }
            }
            if wants(1) {
                let dst = sink!(1);
                for b in 0..bsz {
                    let base = b * n * c;
                    for pos in 0..n {
                        for ch in 0..c {
                            let gv = g[base + pos * c + ch];
                            for j in 0..*ksize {
                                let t = pos as isize + j as isize - *pad_left as isize;
                                if t >= 0 && (t as usize) < n {
                                    dst[ch * ksize + j] += gv * x[base + t as usize * c + ch];
                                }
                            }
                        }
                    }
                }
            }
            if wants(2) {
                let dst = sink!(2);
                for b in 0..bsz {
                    let base = b * n * c;
                    for pos in 0..n {
                        for ch in 0..c {
                            dst[ch] += g[base + pos * c + ch];
                        }
                    }
                }
            }
        }
        Op::Relu => {
            if wants(0) {
                let x = &nodes[inputs[0]].data;
                let dst = sink!(0);
                for ((o, &gv), &xv) in dst.iter_mut().zip(g).zip(x) {
                    if xv > 0.0 {
                        *o += gv;
                    }
                }
            }
        }
        Op::Sigmoid => {
            if wants(0) {
                let y = &nodes[i].data;
                let dst = sink!(0);
                for ((o, &gv), &yv) in dst.iter_mut().zip(g).zip(y) {
                    *o += gv * yv * (1.0 - yv);
                }
            }
        }
        Op::Gelu => {
            if wants(0) {
                let x = &nodes[inputs[0]].data;
                let dst = sink!(0);
                for ((o, &gv), &xv) in dst.iter_mut().zip(g).zip(x) {
                    *o += gv * gelu_deriv(xv);
                }
            }
        }
        Op::Swish { sig } => {
            if wants(0) {
                let x = &nodes[inputs[0]].data;
                let dst = sink!(0);
                for (j, (o, &gv)) in dst.iter_mut().zip(g).enumerate() {
                    let s = sig[j];
                    *o += gv * s * (1.0 + x[j] * (1.0 - s));
                }
            }
        }
        Op::SoftmaxRows => {
            if wants(0) {
                let d = *nodes[i].shape.last().unwrap();
                let p = &nodes[i].data;
                let dst = sink!(0);
                for r in 0..p.len() / d {
                    let pr = &p[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let dot: f64 = pr.iter().zip(gr).map(|(&pv, &gv)| pv * gv).sum();
                    for j in 0..d {
                        dst[r * d + j] += pr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::Sum => {
            if wants(0) {
                axpy_scalar(sink!(0), g[0]);
            }
        }
        Op::Mean => {
            if wants(0) {
                let n = nodes[inputs[0]].data.len() as f64;
                axpy_scalar(sink!(0), g[0] / n);
            }
        }
        Op::CrossEntropy { labels, probs } => {
            if wants(0) {
                let b = labels.len();
                let c = probs.len() / b;
                let scale = g[0] / b as f64;
                let dst = sink!(0);
                for (bi, &label) in labels.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == label { 1.0 } else { 0.0 };
                        dst[bi * c + j] += scale * (probs[bi * c + j] - onehot);
                    }
                }
            }
        }
    }
}

// ── Kernels and scalar math ──────────────────────────────────────────

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
}

fn axpy(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

fn axpy_scalar(dst: &mut [f64], c: f64) {
    for d in dst.iter_mut() {
        *d += c;
    }
}

/// `out += a @ b` for row-major `a [m, k]`, `b [k, n]`.
fn mm_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a^T @ dc` for `a [m, k]`, `dc [m, n]`, `out [k, n]`.
fn mm_at_acc(a: &[f64], dc: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &dc[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &cv) in orow.iter_mut().zip(crow) {
                *o += av * cv;
            }
        }
    }
}

/// `out += dc @ b^T` for `dc [m, n]`, `b [k, n]`, `out [m, k]`.
fn mm_bt_acc(dc: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let crow = &dc[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (&cv, &bv) in crow.iter().zip(brow) {
                acc += cv * bv;
            }
            *o += acc;
        }
    }
}

fn permute_two_axes(data: &[f64], shape: &[usize], ax0: usize, ax1: usize) -> Vec<f64> {
    if ax0 == ax1 {
        return data.to_vec();
    }
    let in_strides = strides(shape);
    let mut out_shape = shape.to_vec();
    out_shape.swap(ax0, ax1);
    let out_strides = strides(&out_shape);
    let rank = shape.len();
    let mut out = vec![0.0; data.len()];
    let mut idx = vec![0usize; rank];
    for &v in data {
        // map input multi-index to output flat offset (axes swapped)
        let mut off = 0;
        for d in 0..rank {
            let od = if d == ax0 {
                ax1
            } else if d == ax1 {
                ax0
            } else {
                d
            };
            off += idx[d] * out_strides[od];
        }
        out[off] = v;
        // increment row-major multi-index
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    let _ = in_strides;
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_COEF: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    let s = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (s * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let s = (2.0 / std::f64::consts::PI).sqrt();
    let inner = s * (x + GELU_COEF * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * s * (1.0 + 3.0 * GELU_COEF * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tape_with(data: Vec<f64>, shape: &[usize]) -> (Tape, Value) {
        let mut tape = Tape::new();
        let v = tape.constant(data, shape).unwrap();
        (tape, v)
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let eye = tape.constant(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let a = tape.constant(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let c = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.data(c), &[1.0, 2.0, 3.0, 4.0]);

        let x = tape.constant(vec![1.0, 2.0], &[1, 2]).unwrap();
        let y = tape.constant(vec![3.0, 4.0], &[2, 1]).unwrap();
        let z = tape.matmul(x, y).unwrap();
        assert_eq!(tape.data(z), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![0.0; 6], &[2, 3]).unwrap();
        let b = tape.constant(vec![0.0; 8], &[2, 4]).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 4]"), "{msg}");
    }

    #[test]
    fn layer_norm_closed_forms() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![5.0, 5.0, 5.0], &[1, 3]).unwrap();
        let g = tape.constant(vec![1.0; 3], &[3]).unwrap();
        let b = tape.constant(vec![0.0; 3], &[3]).unwrap();
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        for &v in tape.data(y) {
            assert!(v.abs() < 1e-12);
        }

        let x2 = tape.constant(vec![1.0, 3.0], &[1, 2]).unwrap();
        let g2 = tape.constant(vec![1.0; 2], &[2]).unwrap();
        let b2 = tape.constant(vec![0.0; 2], &[2]).unwrap();
        let y2 = tape.layer_norm(x2, g2, b2, 0.0).unwrap();
        assert!((tape.data(y2)[0] + 1.0).abs() < 1e-12);
        assert!((tape.data(y2)[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn glu_closed_forms() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2.0, 0.0], &[1, 2]).unwrap();
        let y = tape.glu(x).unwrap();
        assert!((tape.data(y)[0] - 1.0).abs() < 1e-15);

        let x2 = tape.constant(vec![3.0, 100.0], &[1, 2]).unwrap();
        let y2 = tape.glu(x2).unwrap();
        assert!((tape.data(y2)[0] - 3.0).abs() < 1e-12);

        let odd = tape.constant(vec![1.0, 2.0, 3.0], &[1, 3]).unwrap();
        assert!(tape.glu(odd).is_err());
    }

    #[test]
    fn depthwise_conv_hand_case_and_identity() {
        // k=1, w=1, bias=0 is the identity
        let mut tape = Tape::new();
        let x = tape.constant(vec![1.0, -2.0, 0.5], &[3, 1]).unwrap();
        let w = tape.constant(vec![1.0], &[1, 1]).unwrap();
        let b = tape.constant(vec![0.0], &[1]).unwrap();
        let y = tape.depthwise_conv1d(x, w, b).unwrap();
        assert_eq!(tape.data(y), &[1.0, -2.0, 0.5]);

        // x=[1,2,3], w=[1,1,1] -> [3,6,5]
        let x2 = tape.constant(vec![1.0, 2.0, 3.0], &[3, 1]).unwrap();
        let w2 = tape.constant(vec![1.0, 1.0, 1.0], &[1, 3]).unwrap();
        let y2 = tape.depthwise_conv1d(x2, w2, b).unwrap();
        assert_eq!(tape.data(y2), &[3.0, 6.0, 5.0]);
    }

    #[test]
    fn depthwise_conv_kernel_wider_than_input_is_allowed() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1.0, 1.0], &[2, 1]).unwrap();
        let w = tape.constant(vec![1.0; 5], &[1, 5]).unwrap();
        let b = tape.constant(vec![0.0], &[1]).unwrap();
        let y = tape.depthwise_conv1d(x, w, b).unwrap();
        assert_eq!(tape.shape(y), &[2, 1]);
        assert_eq!(tape.data(y), &[2.0, 2.0]);
    }

    #[test]
    fn swish_relu_values() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![0.0, -3.0], &[2]).unwrap();
        let s = tape.swish(x);
        assert_eq!(tape.data(s)[0], 0.0);
        let r = tape.relu(x);
        assert_eq!(tape.data(r), &[0.0, 0.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let (mut tape, x) = tape_with(vec![0.3, -1.5, 2.0, 4.0, 0.0, -2.0], &[2, 3]);
        let p = tape.softmax_rows(x).unwrap();
        for row in tape.data(p).chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_training_normalizes_and_updates_running_stats() {
        let mut tape = Tape::new();
        // two samples, one time step, one channel: values 1 and 3
        let x = tape.constant(vec![1.0, 3.0], &[2, 1, 1]).unwrap();
        let g = tape.constant(vec![1.0], &[1]).unwrap();
        let b = tape.constant(vec![0.0], &[1]).unwrap();
        let mut state = BnState::new(1);
        state.eps = 0.0;
        let y = tape.batch_norm1d(x, g, b, &mut state, true).unwrap();
        let out = tape.data(y);
        let mean: f64 = out.iter().sum::<f64>() / 2.0;
        let var: f64 = out.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / 2.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-10);
        // momentum 0.1 from (0, 1): mean 0.1 * 2.0, var 0.9 + 0.1 * unbiased(= 2.0)
        assert!((state.running_mean[0] - 0.2).abs() < 1e-12);
        assert!((state.running_var[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_eval_with_default_stats_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![0.4, -1.2, 2.5, 0.0], &[2, 2, 1]).unwrap();
        let g = tape.constant(vec![1.0], &[1]).unwrap();
        let b = tape.constant(vec![0.0], &[1]).unwrap();
        let mut state = BnState::new(1);
        state.eps = 0.0;
        let y = tape.batch_norm1d(x, g, b, &mut state, false).unwrap();
        assert_eq!(tape.data(y), &[0.4, -1.2, 2.5, 0.0]);
    }

    #[test]
    fn backward_of_sum_product_is_other_factor() {
        let mut tape = Tape::new();
        let mut xt = Tensor::new(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        xt.set_requires_grad(true);
        let x = tape.leaf(&xt);
        let y = tape.constant(vec![4.0, 5.0, 6.0], &[3]).unwrap();
        let p = tape.mul(x, y).unwrap();
        let loss = tape.sum(p);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0, 5.0, 6.0]);
        assert!(tape.grad(y).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let mut xt = Tensor::new(vec![1.0, 2.0], &[2]).unwrap();
        xt.set_requires_grad(true);
        let x = tape.leaf(&xt);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn frozen_param_receives_no_grad() {
        let mut store = ParamStore::new();
        store
            .insert("w", Tensor::new(vec![2.0], &[1]).unwrap(), crate::store::ParamRole::Weight)
            .unwrap();
        store
            .insert("t", Tensor::new(vec![3.0], &[1]).unwrap(), crate::store::ParamRole::Weight)
            .unwrap();
        store.mark_trainable("t").unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let t = tape.param(&store, "t").unwrap();
        let p = tape.mul(w, t).unwrap();
        let loss = tape.sum(p);
        tape.backward(loss).unwrap();
        tape.write_grads(&mut store).unwrap();
        assert!(store.tensor("w").unwrap().grad().is_none());
        assert_eq!(store.tensor("t").unwrap().grad().unwrap(), &[2.0]);
    }

    #[test]
    fn param_registered_twice_shares_one_node() {
        let mut store = ParamStore::new();
        store
            .insert("w", Tensor::new(vec![1.5], &[1]).unwrap(), crate::store::ParamRole::Weight)
            .unwrap();
        store.mark_trainable("w").unwrap();
        let mut tape = Tape::new();
        let a = tape.param(&store, "w").unwrap();
        let b = tape.param(&store, "w").unwrap();
        assert_eq!(a, b);
        // loss = w * w, dloss/dw = 2w = 3.0
        let p = tape.mul(a, b).unwrap();
        let loss = tape.sum(p);
        tape.backward(loss).unwrap();
        assert_eq!(tape.param_grad("w").unwrap(), &[3.0]);
    }

    #[test]
    fn swap_axes_roundtrip_and_concat_narrow() {
        let mut tape = Tape::new();
        let x = tape
            .constant((0..24).map(|v| v as f64).collect(), &[2, 3, 4])
            .unwrap();
        let y = tape.swap_axes(x, 1, 2).unwrap();
        assert_eq!(tape.shape(y), &[2, 4, 3]);
        let z = tape.swap_axes(y, 1, 2).unwrap();
        assert_eq!(tape.data(z), tape.data(x));

        let a = tape.constant(vec![1.0, 2.0], &[1, 2]).unwrap();
        let b = tape.constant(vec![3.0, 4.0, 5.0, 6.0], &[2, 2]).unwrap();
        let cat = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.shape(cat), &[3, 2]);
        assert_eq!(tape.data(cat), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mid = tape.narrow(cat, 0, 1, 2).unwrap();
        assert_eq!(tape.data(mid), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_c() {
        let mut tape = Tape::new();
        let logits = tape.constant(vec![0.0; 6], &[2, 3]).unwrap();
        let loss = tape.cross_entropy(logits, &[0, 2]).unwrap();
        assert!((tape.scalar(loss) - 3.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "tape epoch")]
    fn stale_handle_panics() {
        let mut t1 = Tape::new();
        let v = t1.constant(vec![1.0], &[1]).unwrap();
        let t2 = Tape::new();
        let _ = t2.data(v);
    }
}
