//! Reverse-mode differentiation over a small, closed set of dense ops.
//!
//! A [`Tape`] records every op eagerly as it is applied; [`Tape::backward`]
//! then walks the records in reverse and scatters parameter gradients into a
//! flat vector laid out like the [`ParameterVector`] the parameters came from.
//! Tensors are row-major `f64` buffers; the leading axis is always the batch.

use crate::error::{Error, Result};
use crate::params::{ParameterVector, Segment};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows along the batch axis.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Elements per batch row.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Statistics used by a batch-norm node.
pub enum BnMode<'a> {
    /// Normalize with the statistics of the current batch (differentiated).
    Batch,
    /// Normalize with fixed per-channel mean and variance (treated as
    /// constants).
    Fixed { mean: &'a [f64], var: &'a [f64] },
}

#[derive(Debug)]
enum Op {
    Input,
    Param { offset: usize },
    MatMulT { x: NodeId, w: NodeId },
    AddBias { x: NodeId, b: NodeId },
    Conv2d { x: NodeId, w: NodeId, pad: usize },
    Tanh { x: NodeId },
    Relu { x: NodeId },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        batch_stats: bool,
        mean: Vec<f64>,
        var: Vec<f64>,
        inv_std: Vec<f64>,
        xhat: Vec<f64>,
    },
    Flatten { x: NodeId },
    SoftmaxCrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Vec<f64> },
    HalfSquaredError { pred: NodeId, targets: Vec<f64> },
    Mean { x: NodeId },
    Scale { x: NodeId, c: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// (channels, spatial size) of an `[n, c, ...]` tensor.
fn channel_dims(shape: &[usize]) -> Result<(usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::Shape(format!("expected [n, c, ...], got {shape:?}")));
    }
    Ok((shape[1], shape[2..].iter().product()))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Input, false)
    }

    pub fn param(&mut self, params: &ParameterVector, segment: &Segment) -> NodeId {
        let value = Tensor {
            shape: segment.shape.clone(),
            data: params.values()[segment.range()].to_vec(),
        };
        self.push(value, Op::Param { offset: segment.offset }, true)
    }

    /// `x · wᵀ` for `x: [n, i]`, `w: [o, i]`.
    pub fn matmul_t(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.shape.len() != 2 || wv.shape.len() != 2 || xv.shape[1] != wv.shape[1] {
            return Err(Error::Shape(format!(
                "matmul of {:?} with transposed {:?}",
                xv.shape, wv.shape
            )));
        }
        let (n, i, o) = (xv.shape[0], xv.shape[1], wv.shape[0]);
        let mut out = vec![0.0; n * o];
        for r in 0..n {
            let xr = &xv.data[r * i..(r + 1) * i];
            for c in 0..o {
                let wr = &wv.data[c * i..(c + 1) * i];
                out[r * o + c] = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
            }
        }
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(Tensor { shape: vec![n, o], data: out }, Op::MatMulT { x, w }, needs))
    }

    /// Adds `b[c]` along channel axis 1.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(b));
        let (c, sp) = channel_dims(&xv.shape)?;
        if bv.len() != c {
            return Err(Error::Shape(format!("bias of {} for {c} channels", bv.len())));
        }
        let mut out = xv.data.clone();
        for (k, v) in out.iter_mut().enumerate() {
            *v += bv.data[(k / sp) % c];
        }
        let shape = xv.shape.clone();
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(Tensor { shape, data: out }, Op::AddBias { x, b }, needs))
    }

    /// Stride-1 "same" convolution: `x: [n, c, h, w]`, `w: [o, c, k, k]`, k odd.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.shape.len() != 4 || wv.shape.len() != 4 || xv.shape[1] != wv.shape[1] || wv.shape[2] != wv.shape[3] || wv.shape[2] % 2 == 0 {
            return Err(Error::Shape(format!("conv2d of {:?} with {:?}", xv.shape, wv.shape)));
        }
        let [n, c, h, wd] = [xv.shape[0], xv.shape[1], xv.shape[2], xv.shape[3]];
        let (o, k) = (wv.shape[0], wv.shape[2]);
        let pad = k / 2;
        let mut out = vec![0.0; n * o * h * wd];
        for i in 0..n {
            for oc in 0..o {
                let obase = (i * o + oc) * h * wd;
                for ic in 0..c {
                    let xbase = (i * c + ic) * h * wd;
                    let wbase = (oc * c + ic) * k * k;
                    for ky in 0..k {
                        for kx in 0..k {
                            let wk = wv.data[wbase + ky * k + kx];
                            for y in 0..h {
                                let yy = y + ky;
                                if yy < pad || yy - pad >= h {
                                    continue;
                                }
                                let yy = yy - pad;
                                for xx in 0..wd {
                                    let xs = xx + kx;
                                    if xs < pad || xs - pad >= wd {
                                        continue;
                                    }
                                    out[obase + y * wd + xx] += wk * xv.data[xbase + yy * wd + xs - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(
            Tensor { shape: vec![n, o, h, wd], data: out },
            Op::Conv2d { x, w, pad },
            needs,
        ))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let t = Tensor { shape: xv.shape.clone(), data: xv.data.iter().map(|v| v.tanh()).collect() };
        let needs = self.needs(x);
        self.push(t, Op::Tanh { x }, needs)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let t = Tensor { shape: xv.shape.clone(), data: xv.data.iter().map(|v| v.max(0.0)).collect() };
        let needs = self.needs(x);
        self.push(t, Op::Relu { x }, needs)
    }

    /// Per-channel normalization over the batch and spatial axes, followed by
    /// an affine `gamma·x̂ + beta`. Variances are population variances.
    pub fn batch_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, mode: BnMode<'_>, eps: f64) -> Result<NodeId> {
        let xv = self.value(x);
        let (c, sp) = channel_dims(&xv.shape)?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::Shape(format!("batch-norm affine size mismatch for {c} channels")));
        }
        let n = xv.rows();
        let count = (n * sp) as f64;
        let idx = |i: usize, ch: usize, s: usize| (i * c + ch) * sp + s;
        let (mean, var, batch_stats) = match mode {
            BnMode::Batch => {
                if n * sp == 0 {
                    return Err(Error::Empty("batch for batch-norm statistics"));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for i in 0..n {
                        for p in 0..sp {
                            s += xv.data[idx(i, ch, p)];
                        }
                    }
                    let m = s / count;
                    let mut q = 0.0;
                    for i in 0..n {
                        for p in 0..sp {
                            let d = xv.data[idx(i, ch, p)] - m;
                            q += d * d;
                        }
                    }
                    mean[ch] = m;
                    var[ch] = q / count;
                }
                (mean, var, true)
            }
            BnMode::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::Shape(format!("batch-norm statistics for {} channels, expected {c}", mean.len())));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (&self.value(gamma).data, &self.value(beta).data);
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for (k, v) in xv.data.iter().enumerate() {
            let ch = (k / sp) % c;
            xhat[k] = (v - mean[ch]) * inv_std[ch];
            out[k] = g[ch] * xhat[k] + b[ch];
        }
        let shape = xv.shape.clone();
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::BatchNorm { x, gamma, beta, batch_stats, mean, var, inv_std, xhat },
            needs,
        ))
    }

    /// Mean and variance a batch-norm node normalized with.
    pub fn bn_stats(&self, id: NodeId) -> Option<(&[f64], &[f64])> {
        match &self.nodes[id.0].op {
            Op::BatchNorm { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    /// Reshape `[n, ...]` to `[n, prod(...)]`.
    pub fn flatten(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let t = Tensor { shape: vec![xv.rows(), xv.row_len()], data: xv.data.clone() };
        let needs = self.needs(x);
        self.push(t, Op::Flatten { x }, needs)
    }

    /// Per-example `logsumexp(z) − z_label` for `logits: [n, k]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let zv = self.value(logits);
        if zv.shape.len() != 2 || zv.shape[0] != labels.len() {
            return Err(Error::Shape(format!("logits {:?} for {} labels", zv.shape, labels.len())));
        }
        let (n, k) = (zv.shape[0], zv.shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Shape(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = vec![0.0; n * k];
        let mut losses = vec![0.0; n];
        for r in 0..n {
            let z = &zv.data[r * k..(r + 1) * k];
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = z.iter().map(|v| (v - m).exp()).sum();
            let lse = m + sum.ln();
            for j in 0..k {
                probs[r * k + j] = (z[j] - lse).exp();
            }
            losses[r] = lse - z[labels[r]];
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor { shape: vec![n], data: losses },
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs },
            needs,
        ))
    }

    /// Per-example `½‖pred − target‖²` for `pred: [n, k]`, `targets` of length `n·k`.
    pub fn half_squared_error(&mut self, pred: NodeId, targets: &[f64]) -> Result<NodeId> {
        let pv = self.value(pred);
        if pv.shape.len() != 2 || pv.len() != targets.len() {
            return Err(Error::Shape(format!("predictions {:?} for {} targets", pv.shape, targets.len())));
        }
        let (n, k) = (pv.shape[0], pv.shape[1]);
        let losses = (0..n)
            .map(|r| {
                (0..k)
                    .map(|j| {
                        let d = pv.data[r * k + j] - targets[r * k + j];
                        0.5 * d * d
                    })
                    .sum()
            })
            .collect();
        let needs = self.needs(pred);
        Ok(self.push(
            Tensor { shape: vec![n], data: losses },
            Op::HalfSquaredError { pred, targets: targets.to_vec() },
            needs,
        ))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let m = xv.data.iter().sum::<f64>() / xv.len() as f64;
        let needs = self.needs(x);
        self.push(Tensor::scalar(m), Op::Mean { x }, needs)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let xv = self.value(x);
        let t = Tensor { shape: xv.shape.clone(), data: xv.data.iter().map(|v| c * v).collect() };
        let needs = self.needs(x);
        self.push(t, Op::Scale { x, c }, needs)
    }

    /// Gradient of the scalar `root` with respect to every parameter leaf,
    /// scattered into a vector of length `d`.
    pub fn backward(&self, root: NodeId, d: usize) -> Result<Vec<f64>> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::Shape(format!("backward from non-scalar {:?}", rv.shape)));
        }
        if !rv.is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        let mut out = vec![0.0; d];

        for id in (0..=root.0).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input => {}
                Op::Param { offset } => {
                    let end = offset + dy.len();
                    if end > d {
                        return Err(Error::Shape(format!("parameter leaf [{offset}, {end}) beyond d = {d}")));
                    }
                    for (o, g) in out[*offset..end].iter_mut().zip(&dy) {
                        *o += g;
                    }
                }
                Op::MatMulT { x, w } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (n, i, o) = (xv.shape[0], xv.shape[1], wv.shape[0]);
                    if self.needs(*x) {
                        let mut dx = vec![0.0; n * i];
                        for r in 0..n {
                            for c in 0..o {
                                let g = dy[r * o + c];
                                if g == 0.0 {
                                    continue;
                                }
                                for j in 0..i {
                                    dx[r * i + j] += g * wv.data[c * i + j];
                                }
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.needs(*w) {
                        let mut dw = vec![0.0; o * i];
                        for r in 0..n {
                            for c in 0..o {
                                let g = dy[r * o + c];
                                for j in 0..i {
                                    dw[c * i + j] += g * xv.data[r * i + j];
                                }
                            }
                        }
                        accumulate(&mut grads, *w, dw);
                    }
                }
                Op::AddBias { x, b } => {
                    let (c, sp) = channel_dims(&node.value.shape)?;
                    if self.needs(*b) {
                        let mut db = vec![0.0; c];
                        for (k, g) in dy.iter().enumerate() {
                            db[(k / sp) % c] += g;
                        }
                        accumulate(&mut grads, *b, db);
                    }
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, dy);
                    }
                }
                Op::Conv2d { x, w, pad } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let [n, c, h, wd] = [xv.shape[0], xv.shape[1], xv.shape[2], xv.shape[3]];
                    let (o, k, pad) = (wv.shape[0], wv.shape[2], *pad);
                    let mut dw = vec![0.0; wv.len()];
                    let mut dx = if self.needs(*x) { Some(vec![0.0; xv.len()]) } else { None };
                    for i in 0..n {
                        for oc in 0..o {
                            let obase = (i * o + oc) * h * wd;
                            for ic in 0..c {
                                let xbase = (i * c + ic) * h * wd;
                                let wbase = (oc * c + ic) * k * k;
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let wk = wv.data[wbase + ky * k + kx];
                                        let mut acc = 0.0;
                                        for y in 0..h {
                                            let yy = y + ky;
                                            if yy < pad || yy - pad >= h {
                                                continue;
                                            }
                                            let yy = yy - pad;
                                            for xx in 0..wd {
                                                let xs = xx + kx;
                                                if xs < pad || xs - pad >= wd {
                                                    continue;
                                                }
                                                let g = dy[obase + y * wd + xx];
                                                let xi = xbase + yy * wd + xs - pad;
                                                acc += g * xv.data[xi];
                                                if let Some(dx) = dx.as_mut() {
                                                    dx[xi] += g * wk;
                                                }
                                            }
                                        }
                                        dw[wbase + ky * k + kx] += acc;
                                    }
                                }
                            }
                        }
                    }
                    if self.needs(*w) {
                        accumulate(&mut grads, *w, dw);
                    }
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Tanh { x } => {
                    let dx = dy.iter().zip(&node.value.data).map(|(g, t)| g * (1.0 - t * t)).collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::Relu { x } => {
                    let xv = self.value(*x);
                    let dx = dy.iter().zip(&xv.data).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::BatchNorm { x, gamma, beta, batch_stats, inv_std, xhat, .. } => {
                    let (c, sp) = channel_dims(&node.value.shape)?;
                    let n = node.value.rows();
                    let count = (n * sp) as f64;
                    let g = &self.value(*gamma).data;
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for (k, d) in dy.iter().enumerate() {
                        let ch = (k / sp) % c;
                        dgamma[ch] += d * xhat[k];
                        dbeta[ch] += d;
                    }
                    if self.needs(*x) {
                        let mut dx = vec![0.0; dy.len()];
                        for (k, d) in dy.iter().enumerate() {
                            let ch = (k / sp) % c;
                            dx[k] = if *batch_stats {
                                g[ch] * inv_std[ch] / count * (count * d - dbeta[ch] - xhat[k] * dgamma[ch])
                            } else {
                                g[ch] * inv_std[ch] * d
                            };
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.needs(*gamma) {
                        accumulate(&mut grads, *gamma, dgamma);
                    }
                    if self.needs(*beta) {
                        accumulate(&mut grads, *beta, dbeta);
                    }
                }
                Op::Flatten { x } => accumulate(&mut grads, *x, dy),
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let k = self.value(*logits).shape[1];
                    let mut dz = probs.clone();
                    for (r, &l) in labels.iter().enumerate() {
                        dz[r * k + l] -= 1.0;
                        for v in &mut dz[r * k..(r + 1) * k] {
                            *v *= dy[r];
                        }
                    }
                    accumulate(&mut grads, *logits, dz);
                }
                Op::HalfSquaredError { pred, targets } => {
                    let pv = self.value(*pred);
                    let k = pv.shape[1];
                    let dp = pv
                        .data
                        .iter()
                        .zip(targets)
                        .enumerate()
                        .map(|(j, (p, t))| (p - t) * dy[j / k])
                        .collect();
                    accumulate(&mut grads, *pred, dp);
                }
                Op::Mean { x } => {
                    let n = self.value(*x).len();
                    accumulate(&mut grads, *x, vec![dy[0] / n as f64; n]);
                }
                Op::Scale { x, c } => {
                    let dx = dy.iter().map(|g| c * g).collect();
                    accumulate(&mut grads, *x, dx);
                }
            }
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, g: Vec<f64>) {
    match &mut grads[id.0] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
