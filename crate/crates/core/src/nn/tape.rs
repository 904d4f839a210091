//! Eager tape-based reverse-mode automatic differentiation.
//!
//! Each op computes its value immediately and records a backward recipe on
//! the tape. Nodes are created in topological order, so backpropagation is
//! a single reverse sweep. Every op output is checked for NaN/Inf and
//! reports the offending layer by label.
//!
//! Reductions inside batch norm, layer norm, and softmax accumulate in f64
//! regardless of the storage type, so 32-bit training stays consistent with
//! the 64-bit gradient checks.

use super::scalar::Scalar;
use crate::error::{Error, Result};

/// Probability floor used by the loss ops before taking a log.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: TensorId, w: TensorId, b: TensorId, pad: usize },
    BatchNorm { x: TensorId, gamma: TensorId, beta: TensorId, mean: Vec<f64>, var: Vec<f64>, eps: f64, training: bool },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, eps: f64 },
    Relu { x: TensorId },
    Gelu { x: TensorId },
    MatMul { x: TensorId, w: TensorId },
    BatMatMulNT { a: TensorId, b: TensorId },
    BatMatMulNN { a: TensorId, b: TensorId },
    SoftmaxRows { x: TensorId },
    Add { a: TensorId, b: TensorId },
    AddBias { x: TensorId, b: TensorId },
    AddRow { x: TensorId, r: TensorId },
    Scale { x: TensorId, c: f64 },
    ExtractPatches { x: TensorId, p: usize },
    ConcatToken { tok: TensorId, x: TensorId },
    SliceRows { x: TensorId, from: usize, to: usize },
    CeLossMean { probs: TensorId, targets: Vec<usize> },
    KlLossMean { student: TensorId, teacher: Vec<f64> },
    AffineCombine { a: TensorId, b: TensorId, alpha: f64 },
    DotConst { x: TensorId, weights: Vec<f64> },
    _Marker(std::marker::PhantomData<T>),
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    label: String,
    needs_grad: bool,
}

/// Gradients of one backward sweep, indexed by tensor id.
pub struct Gradients<T> {
    by_node: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: TensorId) -> Option<&[T]> {
        self.by_node[id.0].as_deref()
    }
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tape<T> {
    /// `grad_enabled = false` builds a pure inference graph: no node is
    /// marked differentiable and `backward` refuses to run.
    pub fn new(grad_enabled: bool) -> Self {
        Self { nodes: Vec::with_capacity(64), grad_enabled }
    }

    pub fn leaf(
        &mut self,
        shape: &[usize],
        value: Vec<T>,
        label: impl Into<String>,
        requires_grad: bool,
    ) -> Result<TensorId> {
        debug_assert_eq!(numel(shape), value.len());
        let needs_grad = requires_grad && self.grad_enabled;
        self.push(shape.to_vec(), value, Op::Leaf, label.into(), needs_grad)
    }

    pub fn value(&self, id: TensorId) -> &[T] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Batch statistics recorded by a training-mode batch-norm node.
    pub fn bn_batch_stats(&self, id: TensorId) -> Option<(&[f64], &[f64])> {
        match &self.nodes[id.0].op {
            Op::BatchNorm { mean, var, training: true, .. } => Some((mean, var)),
            _ => None,
        }
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        value: Vec<T>,
        op: Op<T>,
        label: String,
        needs_grad: bool,
    ) -> Result<TensorId> {
        if !value.iter().all(|x| x.is_finite()) {
            return Err(Error::numerical(format!(
                "non-finite values produced by '{label}'"
            )));
        }
        self.nodes.push(Node { shape, value, op, label, needs_grad });
        Ok(TensorId(self.nodes.len() - 1))
    }

    fn child_needs(&self, parents: &[TensorId]) -> bool {
        self.grad_enabled && parents.iter().any(|&p| self.needs(p))
    }

    // -- elementwise ---------------------------------------------------------

    pub fn relu(&mut self, x: TensorId, label: impl Into<String>) -> Result<TensorId> {
        let value: Vec<T> = self.value(x).iter().map(|&v| v.max(T::zero())).collect();
        let needs = self.child_needs(&[x]);
        self.push(self.shape(x).to_vec(), value, Op::Relu { x }, label.into(), needs)
    }

    pub fn gelu(&mut self, x: TensorId, label: impl Into<String>) -> Result<TensorId> {
        let value: Vec<T> = self
            .value(x)
            .iter()
            .map(|&v| T::from_f64(gelu_f64(v.as_f64())))
            .collect();
        let needs = self.child_needs(&[x]);
        self.push(self.shape(x).to_vec(), value, Op::Gelu { x }, label.into(), needs)
    }

    pub fn scale(&mut self, x: TensorId, c: f64, label: impl Into<String>) -> Result<TensorId> {
        let cc = T::from_f64(c);
        let value: Vec<T> = self.value(x).iter().map(|&v| v * cc).collect();
        let needs = self.child_needs(&[x]);
        self.push(self.shape(x).to_vec(), value, Op::Scale { x, c }, label.into(), needs)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId, label: impl Into<String>) -> Result<TensorId> {
        debug_assert_eq!(self.shape(a), self.shape(b));
        let value: Vec<T> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let needs = self.child_needs(&[a, b]);
        self.push(self.shape(a).to_vec(), value, Op::Add { a, b }, label.into(), needs)
    }

    /// `x + bias` broadcasting `bias` over all leading dims (last dim match).
    pub fn add_bias(&mut self, x: TensorId, b: TensorId, label: impl Into<String>) -> Result<TensorId> {
        let m = *self.shape(x).last().expect("rank >= 1");
        debug_assert_eq!(self.shape(b), &[m]);
        let bias = self.value(b);
        let value: Vec<T> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[i % m])
            .collect();
        let needs = self.child_needs(&[x, b]);
        self.push(self.shape(x).to_vec(), value, Op::AddBias { x, b }, label.into(), needs)
    }

    /// `[B, N, D] + [N, D]`, broadcasting over the batch dim.
    pub fn add_row(&mut self, x: TensorId, r: TensorId, label: impl Into<String>) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let per_batch = numel(&self.shape(r).to_vec());
        debug_assert_eq!(numel(&shape) % per_batch, 0);
        let row = self.value(r);
        let value: Vec<T> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + row[i % per_batch])
            .collect();
        let needs = self.child_needs(&[x, r]);
        self.push(shape, value, Op::AddRow { x, r }, label.into(), needs)
    }

    // -- convolution and normalization ---------------------------------------

    /// 2-D convolution, stride 1, zero padding `pad`, channel-last layout:
    /// `x [B,H,W,Ci] * w [Co,Kh,Kw,Ci] + b [Co] -> [B,Ho,Wo,Co]`.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        pad: usize,
        label: impl Into<String>,
    ) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (bsz, h, wd, ci) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, kh, kw) = (ws[0], ws[1], ws[2]);
        debug_assert_eq!(ws[3], ci);
        let ho = h + 2 * pad + 1 - kh;
        let wo = wd + 2 * pad + 1 - kw;
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let mut out = vec![T::zero(); bsz * ho * wo * co];
        for bi in 0..bsz {
            for oy in 0..ho {
                for ox in 0..wo {
                    let obase = ((bi * ho + oy) * wo + ox) * co;
                    for c in 0..co {
                        let mut acc = bv[c];
                        for ky in 0..kh {
                            let iy = oy + ky;
                            if iy < pad || iy >= h + pad {
                                continue;
                            }
                            let iy = iy - pad;
                            for kx in 0..kw {
                                let ix = ox + kx;
                                if ix < pad || ix >= wd + pad {
                                    continue;
                                }
                                let ix = ix - pad;
                                let xbase = ((bi * h + iy) * wd + ix) * ci;
                                let wbase = ((c * kh + ky) * kw + kx) * ci;
                                let mut dot = T::zero();
                                for k in 0..ci {
                                    dot = dot + xv[xbase + k] * wv[wbase + k];
                                }
                                acc = acc + dot;
                            }
                        }
                        out[obase + c] = acc;
                    }
                }
            }
        }
        let needs = self.child_needs(&[x, w, b]);
        self.push(
            vec![bsz, ho, wo, co],
            out,
            Op::Conv2d { x, w, b, pad },
            label.into(),
            needs,
        )
    }

    /// Training-mode batch norm over the last (channel) dim of `x`:
    /// normalizes with the batch mean/variance (biased), then scales and
    /// shifts. Batch statistics are recorded on the node for running-stat
    /// updates.
    pub fn batch_norm_train(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
        label: impl Into<String>,
    ) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().expect("rank >= 1");
        let rows = numel(&shape) / c;
        let xv = self.value(x);
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for r in 0..rows {
            for k in 0..c {
                mean[k] += xv[r * c + k].as_f64();
            }
        }
        for m in &mut mean {
            *m /= rows as f64;
        }
        for r in 0..rows {
            for k in 0..c {
                let d = xv[r * c + k].as_f64() - mean[k];
                var[k] += d * d;
            }
        }
        for v in &mut var {
            *v /= rows as f64;
        }
        let value = bn_apply(xv, self.value(gamma), self.value(beta), &mean, &var, eps);
        let needs = self.child_needs(&[x, gamma, beta]);
        self.push(
            shape,
            value,
            Op::BatchNorm { x, gamma, beta, mean, var, eps, training: true },
            label.into(),
            needs,
        )
    }

    /// Inference-mode batch norm using frozen running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
        label: impl Into<String>,
    ) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let value = bn_apply(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            eps,
        );
        let needs = self.child_needs(&[x, gamma, beta]);
        self.push(
            shape,
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                var: running_var.to_vec(),
                eps,
                training: false,
            },
            label.into(),
            needs,
        )
    }

    /// Layer norm over the last dim with learned scale and shift.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
        label: impl Into<String>,
    ) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("rank >= 1");
        let rows = numel(&shape) / d;
        let xv = self.value(x);
        let g = self.value(gamma);
        let bt = self.value(beta);
        let mut value = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mut mu = 0.0f64;
            for v in row {
                mu += v.as_f64();
            }
            mu /= d as f64;
            let mut vv = 0.0f64;
            for v in row {
                let dd = v.as_f64() - mu;
                vv += dd * dd;
            }
            vv /= d as f64;
            let inv = 1.0 / (vv + eps).sqrt();
            for k in 0..d {
                let xhat = (row[k].as_f64() - mu) * inv;
                value[r * d + k] = T::from_f64(xhat) * g[k] + bt[k];
            }
        }
        let needs = self.child_needs(&[x, gamma, beta]);
        self.push(shape, value, Op::LayerNorm { x, gamma, beta, eps }, label.into(), needs)
    }

    // -- linear algebra -------------------------------------------------------

    /// `x [..., K] @ w [K, M] -> [..., M]` with a shared weight matrix.
    pub fn matmul(&mut self, x: TensorId, w: TensorId, label: impl Into<String>) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let k = ws[0];
        let m = ws[1];
        debug_assert_eq!(*xs.last().unwrap(), k);
        let rows = numel(&xs) / k;
        let xv = self.value(x);
        let wv = self.value(w);
        let mut out = vec![T::zero(); rows * m];
        for r in 0..rows {
            let xrow = &xv[r * k..(r + 1) * k];
            let orow = &mut out[r * m..(r + 1) * m];
            for (kk, &xk) in xrow.iter().enumerate() {
                let wrow = &wv[kk * m..(kk + 1) * m];
                for (o, &wm) in orow.iter_mut().zip(wrow) {
                    *o = *o + xk * wm;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = m;
        let needs = self.child_needs(&[x, w]);
        self.push(shape, out, Op::MatMul { x, w }, label.into(), needs)
    }

    /// `a [B,N,K] @ b^T` per batch with `b [B,M,K] -> [B,N,M]`.
    pub fn bat_matmul_nt(
        &mut self,
        a: TensorId,
        b: TensorId,
        label: impl Into<String>,
    ) -> Result<TensorId> {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        let (bsz, n, k) = (ash[0], ash[1], ash[2]);
        let m = bsh[1];
        debug_assert_eq!(bsh[0], bsz);
        debug_assert_eq!(bsh[2], k);
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![T::zero(); bsz * n * m];
        for bi in 0..bsz {
            for i in 0..n {
                let arow = &av[(bi * n + i) * k..(bi * n + i + 1) * k];
                for j in 0..m {
                    let brow = &bv[(bi * m + j) * k..(bi * m + j + 1) * k];
                    let mut acc = T::zero();
                    for kk in 0..k {
                        acc = acc + arow[kk] * brow[kk];
                    }
                    out[(bi * n + i) * m + j] = acc;
                }
            }
        }
        let needs = self.child_needs(&[a, b]);
        self.push(vec![bsz, n, m], out, Op::BatMatMulNT { a, b }, label.into(), needs)
    }

    /// `a [B,N,M] @ b [B,M,K] -> [B,N,K]` per batch.
    pub fn bat_matmul_nn(
        &mut self,
        a: TensorId,
        b: TensorId,
        label: impl Into<String>,
    ) -> Result<TensorId> {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        let (bsz, n, m) = (ash[0], ash[1], ash[2]);
        let k = bsh[2];
        debug_assert_eq!(bsh[0], bsz);
        debug_assert_eq!(bsh[1], m);
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![T::zero(); bsz * n * k];
        for bi in 0..bsz {
            for i in 0..n {
                let orow_base = (bi * n + i) * k;
                for j in 0..m {
                    let aij = av[(bi * n + i) * m + j];
                    let brow = &bv[(bi * m + j) * k..(bi * m + j + 1) * k];
                    let orow = &mut out[orow_base..orow_base + k];
                    for (o, &bb) in orow.iter_mut().zip(brow) {
                        *o = *o + aij * bb;
                    }
                }
            }
        }
        let needs = self.child_needs(&[a, b]);
        self.push(vec![bsz, n, k], out, Op::BatMatMulNN { a, b }, label.into(), needs)
    }

    /// Row-wise softmax over the last dim, stabilized by the row max; the
    /// normalizing sum accumulates in f64.
    pub fn softmax_rows(&mut self, x: TensorId, label: impl Into<String>) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("rank >= 1");
        let rows = numel(&shape) / d;
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v.as_f64()));
            let mut sum = 0.0f64;
            for (k, &v) in row.iter().enumerate() {
                let e = (v.as_f64() - mx).exp();
                sum += e;
                out[r * d + k] = T::from_f64(e);
            }
            let inv = T::from_f64(1.0 / sum);
            for k in 0..d {
                out[r * d + k] = out[r * d + k] * inv;
            }
        }
        let needs = self.child_needs(&[x]);
        self.push(shape, out, Op::SoftmaxRows { x }, label.into(), needs)
    }

    // -- reshaping ------------------------------------------------------------

    /// Splits `[B, s, s, C]` into non-overlapping `p x p` patches and
    /// flattens each to `p*p*C`: output `[B, N, p*p*C]` with `N = (s/p)^2`,
    /// patches ordered row-major.
    pub fn extract_patches(
        &mut self,
        x: TensorId,
        p: usize,
        label: impl Into<String>,
    ) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let (bsz, s, c) = (xs[0], xs[1], xs[3]);
        debug_assert_eq!(xs[1], xs[2]);
        if s % p != 0 {
            return Err(Error::config(format!(
                "window size {s} is not divisible by patch size {p}"
            )));
        }
        let g = s / p;
        let n = g * g;
        let plen = p * p * c;
        let xv = self.value(x);
        let mut out = vec![T::zero(); bsz * n * plen];
        for bi in 0..bsz {
            for py in 0..g {
                for px in 0..g {
                    let patch = py * g + px;
                    for dy in 0..p {
                        let src = ((bi * s + py * p + dy) * s + px * p) * c;
                        let dst = (bi * n + patch) * plen + dy * p * c;
                        out[dst..dst + p * c].copy_from_slice(&xv[src..src + p * c]);
                    }
                }
            }
        }
        let needs = self.child_needs(&[x]);
        self.push(vec![bsz, n, plen], out, Op::ExtractPatches { x, p }, label.into(), needs)
    }

    /// Prepends a learned token to every batch row:
    /// `tok [D], x [B,N,D] -> [B,N+1,D]`.
    pub fn concat_token(
        &mut self,
        tok: TensorId,
        x: TensorId,
        label: impl Into<String>,
    ) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let (bsz, n, d) = (xs[0], xs[1], xs[2]);
        debug_assert_eq!(self.shape(tok), &[d]);
        let tv = self.value(tok);
        let xv = self.value(x);
        let mut out = vec![T::zero(); bsz * (n + 1) * d];
        for bi in 0..bsz {
            let base = bi * (n + 1) * d;
            out[base..base + d].copy_from_slice(tv);
            out[base + d..base + (n + 1) * d].copy_from_slice(&xv[bi * n * d..(bi + 1) * n * d]);
        }
        let needs = self.child_needs(&[tok, x]);
        self.push(vec![bsz, n + 1, d], out, Op::ConcatToken { tok, x }, label.into(), needs)
    }

    /// Keeps token rows `from..to` of `[B, N, D]`.
    pub fn slice_rows(
        &mut self,
        x: TensorId,
        from: usize,
        to: usize,
        label: impl Into<String>,
    ) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let (bsz, n, d) = (xs[0], xs[1], xs[2]);
        debug_assert!(from < to && to <= n);
        let keep = to - from;
        let xv = self.value(x);
        let mut out = vec![T::zero(); bsz * keep * d];
        for bi in 0..bsz {
            let src = (bi * n + from) * d;
            out[bi * keep * d..(bi + 1) * keep * d].copy_from_slice(&xv[src..src + keep * d]);
        }
        let needs = self.child_needs(&[x]);
        self.push(vec![bsz, keep, d], out, Op::SliceRows { x, from, to }, label.into(), needs)
    }

    // -- losses ---------------------------------------------------------------

    /// Mean over the batch of `-(1/M) * ln p[target]`, with probabilities
    /// clamped to `[1e-12, 1]` before the log.
    pub fn ce_loss_mean(
        &mut self,
        probs: TensorId,
        targets: &[usize],
        label: impl Into<String>,
    ) -> Result<TensorId> {
        let shape = self.shape(probs).to_vec();
        let m = *shape.last().expect("rank >= 1");
        let bsz = numel(&shape) / m;
        debug_assert_eq!(bsz, targets.len());
        let pv = self.value(probs);
        let mut acc = 0.0f64;
        for (bi, &t) in targets.iter().enumerate() {
            let p = pv[bi * m + t].as_f64().clamp(PROB_CLAMP, 1.0);
            acc -= p.ln() / m as f64;
        }
        let value = vec![T::from_f64(acc / bsz as f64)];
        let needs = self.child_needs(&[probs]);
        self.push(
            vec![1],
            value,
            Op::CeLossMean { probs, targets: targets.to_vec() },
            label.into(),
            needs,
        )
    }

    /// Mean over the batch of `sum_i t_i (ln t_i - ln s_i)` with the teacher
    /// distribution held constant. Zero teacher mass contributes zero.
    pub fn kl_loss_mean(
        &mut self,
        student: TensorId,
        teacher: &[f64],
        label: impl Into<String>,
    ) -> Result<TensorId> {
        let shape = self.shape(student).to_vec();
        let m = *shape.last().expect("rank >= 1");
        let bsz = numel(&shape) / m;
        debug_assert_eq!(teacher.len(), bsz * m);
        let sv = self.value(student);
        let mut acc = 0.0f64;
        for i in 0..bsz * m {
            let t = teacher[i];
            if t > 0.0 {
                let s = sv[i].as_f64().clamp(PROB_CLAMP, 1.0);
                acc += t * (t.clamp(PROB_CLAMP, 1.0).ln() - s.ln());
            }
        }
        let value = vec![T::from_f64(acc / bsz as f64)];
        let needs = self.child_needs(&[student]);
        self.push(
            vec![1],
            value,
            Op::KlLossMean { student, teacher: teacher.to_vec() },
            label.into(),
            needs,
        )
    }

    /// `alpha * a + (1 - alpha) * b` for scalar nodes.
    pub fn affine_combine(
        &mut self,
        a: TensorId,
        b: TensorId,
        alpha: f64,
        label: impl Into<String>,
    ) -> Result<TensorId> {
        debug_assert_eq!(numel(self.shape(a)), 1);
        debug_assert_eq!(numel(self.shape(b)), 1);
        let v = alpha * self.value(a)[0].as_f64() + (1.0 - alpha) * self.value(b)[0].as_f64();
        let needs = self.child_needs(&[a, b]);
        self.push(vec![1], vec![T::from_f64(v)], Op::AffineCombine { a, b, alpha }, label.into(), needs)
    }

    /// Fixed-weight linear functional producing a scalar; used to reduce
    /// tensor outputs for gradient probing.
    pub fn dot_const(
        &mut self,
        x: TensorId,
        weights: &[f64],
        label: impl Into<String>,
    ) -> Result<TensorId> {
        debug_assert_eq!(numel(self.shape(x)), weights.len());
        let v: f64 = self
            .value(x)
            .iter()
            .zip(weights)
            .map(|(&a, &w)| a.as_f64() * w)
            .sum();
        let needs = self.child_needs(&[x]);
        self.push(
            vec![1],
            vec![T::from_f64(v)],
            Op::DotConst { x, weights: weights.to_vec() },
            label.into(),
            needs,
        )
    }

    // -- backward -------------------------------------------------------------

    /// Reverse sweep from a scalar loss node. Returns per-node gradients for
    /// every differentiable node.
    pub fn backward(&self, loss: TensorId) -> Result<Gradients<T>> {
        if !self.grad_enabled {
            return Err(Error::validation("backward called on an inference tape"));
        }
        if numel(self.shape(loss)) != 1 {
            return Err(Error::validation("backward requires a scalar loss"));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { by_node: grads })
    }

    fn grad_slot<'a>(
        &self,
        grads: &'a mut [Option<Vec<T>>],
        id: TensorId,
    ) -> Option<&'a mut Vec<T>> {
        if !self.needs(id) {
            return None;
        }
        let len = self.nodes[id.0].value.len();
        Some(grads[id.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::_Marker(_) => {}

            Op::Relu { x } => {
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for (k, (&go, &xi)) in g.iter().zip(self.value(*x)).enumerate() {
                        if xi > T::zero() {
                            dx[k] = dx[k] + go;
                        }
                    }
                }
            }

            Op::Gelu { x } => {
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for (k, (&go, &xi)) in g.iter().zip(self.value(*x)).enumerate() {
                        dx[k] = dx[k] + go * T::from_f64(gelu_grad_f64(xi.as_f64()));
                    }
                }
            }

            Op::Scale { x, c } => {
                if let Some(dx) = self.grad_slot(grads, *x) {
                    let cc = T::from_f64(*c);
                    for (d, &go) in dx.iter_mut().zip(g) {
                        *d = *d + go * cc;
                    }
                }
            }

            Op::Add { a, b } => {
                for id in [a, b] {
                    if let Some(d) = self.grad_slot(grads, *id) {
                        for (dd, &go) in d.iter_mut().zip(g) {
                            *dd = *dd + go;
                        }
                    }
                }
            }

            Op::AddBias { x, b } => {
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for (dd, &go) in dx.iter_mut().zip(g) {
                        *dd = *dd + go;
                    }
                }
                let m = self.nodes[b.0].value.len();
                if let Some(db) = self.grad_slot(grads, *b) {
                    for (k, &go) in g.iter().enumerate() {
                        db[k % m] = db[k % m] + go;
                    }
                }
            }

            Op::AddRow { x, r } => {
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for (dd, &go) in dx.iter_mut().zip(g) {
                        *dd = *dd + go;
                    }
                }
                let per = self.nodes[r.0].value.len();
                if let Some(dr) = self.grad_slot(grads, *r) {
                    for (k, &go) in g.iter().enumerate() {
                        dr[k % per] = dr[k % per] + go;
                    }
                }
            }

            Op::Conv2d { x, w, b, pad } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (bsz, h, wd, ci) = (xs[0], xs[1], xs[2], xs[3]);
                let (co, kh, kw) = (ws[0], ws[1], ws[2]);
                let os = self.shape(TensorId(i));
                let (ho, wo) = (os[1], os[2]);
                let pad = *pad;
                let xv = self.value(*x);
                let wv = self.value(*w);
                if let Some(db) = self.grad_slot(grads, *b) {
                    for (k, &go) in g.iter().enumerate() {
                        db[k % co] = db[k % co] + go;
                    }
                }
                if self.needs(*w) {
                    let dw = self.grad_slot(grads, *w).expect("slot");
                    for bi in 0..bsz {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let obase = ((bi * ho + oy) * wo + ox) * co;
                                for ky in 0..kh {
                                    let iy = oy + ky;
                                    if iy < pad || iy >= h + pad {
                                        continue;
                                    }
                                    let iy = iy - pad;
                                    for kx in 0..kw {
                                        let ix = ox + kx;
                                        if ix < pad || ix >= wd + pad {
                                            continue;
                                        }
                                        let ix = ix - pad;
                                        let xbase = ((bi * h + iy) * wd + ix) * ci;
                                        for c in 0..co {
                                            let go = g[obase + c];
                                            let wbase = ((c * kh + ky) * kw + kx) * ci;
                                            for k in 0..ci {
                                                dw[wbase + k] = dw[wbase + k] + go * xv[xbase + k];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if self.needs(*x) {
                    let dx = self.grad_slot(grads, *x).expect("slot");
                    for bi in 0..bsz {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let obase = ((bi * ho + oy) * wo + ox) * co;
                                for ky in 0..kh {
                                    let iy = oy + ky;
                                    if iy < pad || iy >= h + pad {
                                        continue;
                                    }
                                    let iy = iy - pad;
                                    for kx in 0..kw {
                                        let ix = ox + kx;
                                        if ix < pad || ix >= wd + pad {
                                            continue;
                                        }
                                        let ix = ix - pad;
                                        let xbase = ((bi * h + iy) * wd + ix) * ci;
                                        for c in 0..co {
                                            let go = g[obase + c];
                                            let wbase = ((c * kh + ky) * kw + kx) * ci;
                                            for k in 0..ci {
                                                dx[xbase + k] = dx[xbase + k] + go * wv[wbase + k];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }

            Op::BatchNorm { x, gamma, beta, mean, var, eps, training } => {
                let c = *self.shape(*x).last().unwrap();
                let rows = self.nodes[x.0].value.len() / c;
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
                // Per-channel reductions in f64.
                let mut sum_g = vec![0.0f64; c];
                let mut sum_gx = vec![0.0f64; c];
                for r in 0..rows {
                    for k in 0..c {
                        let go = g[r * c + k].as_f64();
                        let xhat = (xv[r * c + k].as_f64() - mean[k]) * inv_std[k];
                        sum_g[k] += go;
                        sum_gx[k] += go * xhat;
                    }
                }
                if let Some(dbeta) = self.grad_slot(grads, *beta) {
                    for k in 0..c {
                        dbeta[k] = dbeta[k] + T::from_f64(sum_g[k]);
                    }
                }
                if let Some(dgamma) = self.grad_slot(grads, *gamma) {
                    for k in 0..c {
                        dgamma[k] = dgamma[k] + T::from_f64(sum_gx[k]);
                    }
                }
                if self.needs(*x) {
                    let dx = self.grad_slot(grads, *x).expect("slot");
                    let n = rows as f64;
                    for r in 0..rows {
                        for k in 0..c {
                            let go = g[r * c + k].as_f64();
                            let xhat = (xv[r * c + k].as_f64() - mean[k]) * inv_std[k];
                            let d = if *training {
                                gv[k].as_f64()
                                    * inv_std[k]
                                    * (go - sum_g[k] / n - xhat * sum_gx[k] / n)
                            } else {
                                gv[k].as_f64() * inv_std[k] * go
                            };
                            dx[r * c + k] = dx[r * c + k] + T::from_f64(d);
                        }
                    }
                }
            }

            Op::LayerNorm { x, gamma, beta, eps } => {
                let d = *self.shape(*x).last().unwrap();
                let rows = self.nodes[x.0].value.len() / d;
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let mut dgamma = vec![0.0f64; d];
                let mut dbeta = vec![0.0f64; d];
                let needs_x = self.needs(*x);
                let mut dx_acc = if needs_x { vec![0.0f64; xv.len()] } else { Vec::new() };
                for r in 0..rows {
                    let row = &xv[r * d..(r + 1) * d];
                    let mut mu = 0.0f64;
                    for v in row {
                        mu += v.as_f64();
                    }
                    mu /= d as f64;
                    let mut vv = 0.0f64;
                    for v in row {
                        let dd = v.as_f64() - mu;
                        vv += dd * dd;
                    }
                    vv /= d as f64;
                    let inv = 1.0 / (vv + eps).sqrt();
                    let mut sum_dxhat = 0.0f64;
                    let mut sum_dxhat_xhat = 0.0f64;
                    for k in 0..d {
                        let go = g[r * d + k].as_f64();
                        let xhat = (row[k].as_f64() - mu) * inv;
                        dgamma[k] += go * xhat;
                        dbeta[k] += go;
                        let dxhat = go * gv[k].as_f64();
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    if needs_x {
                        for k in 0..d {
                            let go = g[r * d + k].as_f64();
                            let xhat = (row[k].as_f64() - mu) * inv;
                            let dxhat = go * gv[k].as_f64();
                            dx_acc[r * d + k] = inv
                                * (dxhat
                                    - sum_dxhat / d as f64
                                    - xhat * sum_dxhat_xhat / d as f64);
                        }
                    }
                }
                if let Some(dg) = self.grad_slot(grads, *gamma) {
                    for k in 0..d {
                        dg[k] = dg[k] + T::from_f64(dgamma[k]);
                    }
                }
                if let Some(db) = self.grad_slot(grads, *beta) {
                    for k in 0..d {
                        db[k] = db[k] + T::from_f64(dbeta[k]);
                    }
                }
                if needs_x {
                    let dx = self.grad_slot(grads, *x).expect("slot");
                    for (dd, &a) in dx.iter_mut().zip(&dx_acc) {
                        *dd = *dd + T::from_f64(a);
                    }
                }
            }

            Op::MatMul { x, w } => {
                let k = self.shape(*w)[0];
                let m = self.shape(*w)[1];
                let rows = self.nodes[x.0].value.len() / k;
                let xv = self.value(*x);
                let wv = self.value(*w);
                if self.needs(*x) {
                    let dx = self.grad_slot(grads, *x).expect("slot");
                    for r in 0..rows {
                        for kk in 0..k {
                            let wrow = &wv[kk * m..(kk + 1) * m];
                            let grow = &g[r * m..(r + 1) * m];
                            let mut acc = T::zero();
                            for (gg, ww) in grow.iter().zip(wrow) {
                                acc = acc + *gg * *ww;
                            }
                            dx[r * k + kk] = dx[r * k + kk] + acc;
                        }
                    }
                }
                if self.needs(*w) {
                    let dw = self.grad_slot(grads, *w).expect("slot");
                    for r in 0..rows {
                        let grow = &g[r * m..(r + 1) * m];
                        for kk in 0..k {
                            let xk = xv[r * k + kk];
                            let dwrow = &mut dw[kk * m..(kk + 1) * m];
                            for (dd, &gg) in dwrow.iter_mut().zip(grow) {
                                *dd = *dd + xk * gg;
                            }
                        }
                    }
                }
            }

            Op::BatMatMulNT { a, b } => {
                let ash = self.shape(*a);
                let (bsz, n, k) = (ash[0], ash[1], ash[2]);
                let m = self.shape(*b)[1];
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.needs(*a) {
                    let da = self.grad_slot(grads, *a).expect("slot");
                    for bi in 0..bsz {
                        for ii in 0..n {
                            for j in 0..m {
                                let go = g[(bi * n + ii) * m + j];
                                let brow = &bv[(bi * m + j) * k..(bi * m + j + 1) * k];
                                let darow = &mut da[(bi * n + ii) * k..(bi * n + ii + 1) * k];
                                for (dd, &bb) in darow.iter_mut().zip(brow) {
                                    *dd = *dd + go * bb;
                                }
                            }
                        }
                    }
                }
                if self.needs(*b) {
                    let db = self.grad_slot(grads, *b).expect("slot");
                    for bi in 0..bsz {
                        for ii in 0..n {
                            let arow = &av[(bi * n + ii) * k..(bi * n + ii + 1) * k];
                            for j in 0..m {
                                let go = g[(bi * n + ii) * m + j];
                                let dbrow = &mut db[(bi * m + j) * k..(bi * m + j + 1) * k];
                                for (dd, &aa) in dbrow.iter_mut().zip(arow) {
                                    *dd = *dd + go * aa;
                                }
                            }
                        }
                    }
                }
            }

            Op::BatMatMulNN { a, b } => {
                let ash = self.shape(*a);
                let (bsz, n, m) = (ash[0], ash[1], ash[2]);
                let k = self.shape(*b)[2];
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.needs(*a) {
                    let da = self.grad_slot(grads, *a).expect("slot");
                    for bi in 0..bsz {
                        for ii in 0..n {
                            let grow = &g[(bi * n + ii) * k..(bi * n + ii + 1) * k];
                            for j in 0..m {
                                let brow = &bv[(bi * m + j) * k..(bi * m + j + 1) * k];
                                let mut acc = T::zero();
                                for (gg, bb) in grow.iter().zip(brow) {
                                    acc = acc + *gg * *bb;
                                }
                                da[(bi * n + ii) * m + j] = da[(bi * n + ii) * m + j] + acc;
                            }
                        }
                    }
                }
                if self.needs(*b) {
                    let db = self.grad_slot(grads, *b).expect("slot");
                    for bi in 0..bsz {
                        for ii in 0..n {
                            let grow = &g[(bi * n + ii) * k..(bi * n + ii + 1) * k];
                            for j in 0..m {
                                let aij = av[(bi * n + ii) * m + j];
                                let dbrow = &mut db[(bi * m + j) * k..(bi * m + j + 1) * k];
                                for (dd, &gg) in dbrow.iter_mut().zip(grow) {
                                    *dd = *dd + aij * gg;
                                }
                            }
                        }
                    }
                }
            }

            Op::SoftmaxRows { x } => {
                if self.needs(*x) {
                    let d = *self.shape(*x).last().unwrap();
                    let rows = self.nodes[x.0].value.len() / d;
                    let yv = &self.nodes[i].value;
                    let dx = self.grad_slot(grads, *x).expect("slot");
                    for r in 0..rows {
                        let mut dot = 0.0f64;
                        for k in 0..d {
                            dot += g[r * d + k].as_f64() * yv[r * d + k].as_f64();
                        }
                        for k in 0..d {
                            let y = yv[r * d + k].as_f64();
                            let go = g[r * d + k].as_f64();
                            dx[r * d + k] = dx[r * d + k] + T::from_f64(y * (go - dot));
                        }
                    }
                }
            }

            Op::ExtractPatches { x, p } => {
                if self.needs(*x) {
                    let p = *p;
                    let xs = self.shape(*x);
                    let (bsz, s, c) = (xs[0], xs[1], xs[3]);
                    let gsz = s / p;
                    let n = gsz * gsz;
                    let plen = p * p * c;
                    let dx = self.grad_slot(grads, *x).expect("slot");
                    for bi in 0..bsz {
                        for py in 0..gsz {
                            for px in 0..gsz {
                                let patch = py * gsz + px;
                                for dy in 0..p {
                                    let dst = ((bi * s + py * p + dy) * s + px * p) * c;
                                    let src = (bi * n + patch) * plen + dy * p * c;
                                    for k in 0..p * c {
                                        dx[dst + k] = dx[dst + k] + g[src + k];
                                    }
                                }
                            }
                        }
                    }
                }
            }

            Op::ConcatToken { tok, x } => {
                let d = self.nodes[tok.0].value.len();
                let xs = self.shape(*x);
                let (bsz, n) = (xs[0], xs[1]);
                if let Some(dt) = self.grad_slot(grads, *tok) {
                    for bi in 0..bsz {
                        let base = bi * (n + 1) * d;
                        for k in 0..d {
                            dt[k] = dt[k] + g[base + k];
                        }
                    }
                }
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for bi in 0..bsz {
                        let base = bi * (n + 1) * d + d;
                        for k in 0..n * d {
                            dx[bi * n * d + k] = dx[bi * n * d + k] + g[base + k];
                        }
                    }
                }
            }

            Op::SliceRows { x, from, to } => {
                if self.needs(*x) {
                    let xs = self.shape(*x);
                    let (bsz, n, d) = (xs[0], xs[1], xs[2]);
                    let keep = to - from;
                    let dx = self.grad_slot(grads, *x).expect("slot");
                    for bi in 0..bsz {
                        let dst = (bi * n + from) * d;
                        let src = bi * keep * d;
                        for k in 0..keep * d {
                            dx[dst + k] = dx[dst + k] + g[src + k];
                        }
                    }
                }
            }

            Op::CeLossMean { probs, targets } => {
                if self.needs(*probs) {
                    let m = *self.shape(*probs).last().unwrap();
                    let bsz = targets.len();
                    let pv = self.value(*probs);
                    let go = g[0].as_f64();
                    let dp = self.grad_slot(grads, *probs).expect("slot");
                    for (bi, &t) in targets.iter().enumerate() {
                        let p = pv[bi * m + t].as_f64();
                        if (PROB_CLAMP..=1.0).contains(&p) {
                            let d = -go / (m as f64 * bsz as f64 * p);
                            dp[bi * m + t] = dp[bi * m + t] + T::from_f64(d);
                        }
                    }
                }
            }

            Op::KlLossMean { student, teacher } => {
                if self.needs(*student) {
                    let m = *self.shape(*student).last().unwrap();
                    let bsz = self.nodes[student.0].value.len() / m;
                    let sv = self.value(*student);
                    let go = g[0].as_f64();
                    let ds = self.grad_slot(grads, *student).expect("slot");
                    for idx in 0..bsz * m {
                        let t = teacher[idx];
                        if t > 0.0 {
                            let s = sv[idx].as_f64();
                            if (PROB_CLAMP..=1.0).contains(&s) {
                                let d = -go * t / (s * bsz as f64);
                                ds[idx] = ds[idx] + T::from_f64(d);
                            }
                        }
                    }
                }
            }

            Op::AffineCombine { a, b, alpha } => {
                if let Some(da) = self.grad_slot(grads, *a) {
                    da[0] = da[0] + g[0] * T::from_f64(*alpha);
                }
                if let Some(db) = self.grad_slot(grads, *b) {
                    db[0] = db[0] + g[0] * T::from_f64(1.0 - *alpha);
                }
            }

            Op::DotConst { x, weights } => {
                if let Some(dx) = self.grad_slot(grads, *x) {
                    let go = g[0];
                    for (dd, &w) in dx.iter_mut().zip(weights) {
                        *dd = *dd + go * T::from_f64(w);
                    }
                }
            }
        }
    }
}

fn bn_apply<T: Scalar>(
    xv: &[T],
    gamma: &[T],
    beta: &[T],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Vec<T> {
    let c = gamma.len();
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    xv.iter()
        .enumerate()
        .map(|(idx, &x)| {
            let k = idx % c;
            let xhat = (x.as_f64() - mean[k]) * inv_std[k];
            T::from_f64(xhat) * gamma[k] + beta[k]
        })
        .collect()
}

/// tanh-form GELU.
fn gelu_f64(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

fn gelu_grad_f64(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    const A: f64 = 0.044715;
    let inner = C * (x + A * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    type Builder = dyn Fn(&mut Tape<f64>, &[TensorId]) -> TensorId;

    /// Central finite-difference check of `d loss / d inputs` against the
    /// tape's reverse sweep, probing random coordinates.
    fn grad_check(inputs: &[(Vec<usize>, Vec<f64>)], build: &Builder, probes: usize, seed: u64) {
        let run = |values: &[Vec<f64>]| -> f64 {
            let mut tape = Tape::<f64>::new(true);
            let ids: Vec<TensorId> = inputs
                .iter()
                .zip(values)
                .enumerate()
                .map(|(k, ((shape, _), v))| {
                    tape.leaf(shape, v.clone(), format!("in{k}"), true).unwrap()
                })
                .collect();
            let loss = build(&mut tape, &ids);
            tape.value(loss)[0]
        };

        let mut tape = Tape::<f64>::new(true);
        let ids: Vec<TensorId> = inputs
            .iter()
            .enumerate()
            .map(|(k, (shape, v))| tape.leaf(shape, v.clone(), format!("in{k}"), true).unwrap())
            .collect();
        let loss = build(&mut tape, &ids);
        let grads = tape.backward(loss).unwrap();

        let mut rng = crate::seed::stream(seed, &[0xf00d]);
        let base: Vec<Vec<f64>> = inputs.iter().map(|(_, v)| v.clone()).collect();
        for _ in 0..probes {
            let which = rng.random_range(0..inputs.len());
            let coord = rng.random_range(0..base[which].len());
            let h = 1e-5 * base[which][coord].abs().max(1.0);
            let mut plus = base.clone();
            plus[which][coord] += h;
            let mut minus = base.clone();
            minus[which][coord] -= h;
            let numeric = (run(&plus) - run(&minus)) / (2.0 * h);
            let analytic = grads.get(ids[which]).expect("gradient present")[coord];
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            let rel = (analytic - numeric).abs() / denom;
            assert!(
                rel < 1e-4,
                "input {which} coord {coord}: analytic {analytic:.8e} vs numeric {numeric:.8e} (rel {rel:.2e})"
            );
        }
    }

    fn rand_vec(n: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = crate::seed::stream(1, &[1]);
        let w = rand_vec(4 * 3 * 3 * 2, &mut rng);
        let x = rand_vec(2 * 5 * 5 * 2, &mut rng);
        let b = rand_vec(4, &mut rng);
        let weights = rand_vec(2 * 5 * 5 * 4, &mut rng);
        grad_check(
            &[
                (vec![2, 5, 5, 2], x),
                (vec![4, 3, 3, 2], w),
                (vec![4], b),
            ],
            &move |tape, ids| {
                let y = tape.conv2d(ids[0], ids[1], ids[2], 1, "conv").unwrap();
                tape.dot_const(y, &weights, "reduce").unwrap()
            },
            20,
            2,
        );
    }

    #[test]
    fn batch_norm_train_gradients() {
        let mut rng = crate::seed::stream(2, &[1]);
        let x = rand_vec(6 * 3, &mut rng);
        let gamma = rand_vec(3, &mut rng);
        let beta = rand_vec(3, &mut rng);
        let weights = rand_vec(6 * 3, &mut rng);
        grad_check(
            &[(vec![6, 3], x), (vec![3], gamma), (vec![3], beta)],
            &move |tape, ids| {
                let y = tape
                    .batch_norm_train(ids[0], ids[1], ids[2], 1e-5, "bn")
                    .unwrap();
                tape.dot_const(y, &weights, "reduce").unwrap()
            },
            20,
            3,
        );
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = crate::seed::stream(3, &[1]);
        let x = rand_vec(4 * 6, &mut rng);
        let gamma = rand_vec(6, &mut rng);
        let beta = rand_vec(6, &mut rng);
        let weights = rand_vec(4 * 6, &mut rng);
        grad_check(
            &[(vec![4, 6], x), (vec![6], gamma), (vec![6], beta)],
            &move |tape, ids| {
                let y = tape.layer_norm(ids[0], ids[1], ids[2], 1e-6, "ln").unwrap();
                tape.dot_const(y, &weights, "reduce").unwrap()
            },
            20,
            4,
        );
    }

    #[test]
    fn softmax_and_matmul_gradients() {
        let mut rng = crate::seed::stream(4, &[1]);
        let x = rand_vec(3 * 4, &mut rng);
        let w = rand_vec(4 * 5, &mut rng);
        let weights = rand_vec(3 * 5, &mut rng);
        grad_check(
            &[(vec![3, 4], x), (vec![4, 5], w)],
            &move |tape, ids| {
                let y = tape.matmul(ids[0], ids[1], "mm").unwrap();
                let s = tape.softmax_rows(y, "softmax").unwrap();
                tape.dot_const(s, &weights, "reduce").unwrap()
            },
            20,
            5,
        );
    }

    #[test]
    fn attention_chain_gradients() {
        // Full scores -> scale -> softmax -> weighted-value chain.
        let mut rng = crate::seed::stream(5, &[1]);
        let (b, n, d) = (2, 4, 3);
        let p = rand_vec(b * n * d, &mut rng);
        let wq = rand_vec(d * d, &mut rng);
        let wk = rand_vec(d * d, &mut rng);
        let wv = rand_vec(d * d, &mut rng);
        let weights = rand_vec(b * n * d, &mut rng);
        grad_check(
            &[
                (vec![b, n, d], p),
                (vec![d, d], wq),
                (vec![d, d], wk),
                (vec![d, d], wv),
            ],
            &move |tape, ids| {
                let q = tape.matmul(ids[0], ids[1], "q").unwrap();
                let k = tape.matmul(ids[0], ids[2], "k").unwrap();
                let v = tape.matmul(ids[0], ids[3], "v").unwrap();
                let scores = tape.bat_matmul_nt(q, k, "scores").unwrap();
                let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt(), "scale").unwrap();
                let attn = tape.softmax_rows(scaled, "softmax").unwrap();
                let out = tape.bat_matmul_nn(attn, v, "attnv").unwrap();
                tape.dot_const(out, &weights, "reduce").unwrap()
            },
            20,
            6,
        );
    }

    #[test]
    fn gelu_relu_patch_token_gradients() {
        let mut rng = crate::seed::stream(6, &[1]);
        let x = rand_vec(1 * 4 * 4 * 2, &mut rng);
        let tok = rand_vec(8, &mut rng);
        let pos = rand_vec(4 * 8, &mut rng);
        let weights = rand_vec(5 * 8, &mut rng);
        grad_check(
            &[(vec![1, 4, 4, 2], x), (vec![8], tok), (vec![4, 8], pos)],
            &move |tape, ids| {
                let patches = tape.extract_patches(ids[0], 2, "patches").unwrap();
                let act = tape.gelu(patches, "gelu").unwrap();
                let seq = tape.concat_token(ids[1], act, "cls").unwrap();
                // +pos on the patch rows only (shape [4,8] vs seq [1,5,8]):
                // apply to sliced rows then re-reduce both pieces.
                let body = tape.slice_rows(seq, 1, 5, "body").unwrap();
                let body = tape.add_row(body, ids[2], "pos").unwrap();
                let head = tape.slice_rows(seq, 0, 1, "head").unwrap();
                let r1 = tape.dot_const(body, &weights[8..], "r1").unwrap();
                let r2 = tape.dot_const(head, &weights[..8], "r2").unwrap();
                tape.affine_combine(r1, r2, 0.3, "mix").unwrap()
            },
            20,
            7,
        );
    }

    #[test]
    fn loss_gradients() {
        let mut rng = crate::seed::stream(7, &[1]);
        let logits = rand_vec(4 * 3, &mut rng);
        let teacher = vec![
            0.7, 0.2, 0.1, //
            0.1, 0.8, 0.1, //
            0.3, 0.3, 0.4, //
            0.25, 0.5, 0.25,
        ];
        let targets = vec![0usize, 1, 2, 1];
        grad_check(
            &[(vec![4, 3], logits)],
            &move |tape, ids| {
                let probs = tape.softmax_rows(ids[0], "softmax").unwrap();
                let ce = tape.ce_loss_mean(probs, &targets, "ce").unwrap();
                let kl = tape.kl_loss_mean(probs, &teacher, "kl").unwrap();
                tape.affine_combine(kl, ce, 0.7, "combined").unwrap()
            },
            20,
            8,
        );
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut tape = Tape::<f64>::new(false);
        let x = tape
            .leaf(&[2, 4], vec![0.3, -1.0, 2.0, 0.1, 5.0, 5.0, 5.0, 5.0], "x", false)
            .unwrap();
        let s = tape.softmax_rows(x, "softmax").unwrap();
        for r in 0..2 {
            let sum: f64 = tape.value(s)[r * 4..(r + 1) * 4].iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
        // Constant shift by 100 leaves the distribution unchanged.
        let shifted: Vec<f64> = tape.value(x).iter().map(|v| v + 100.0).collect();
        let x2 = tape.leaf(&[2, 4], shifted, "x2", false).unwrap();
        let s2 = tape.softmax_rows(x2, "softmax2").unwrap();
        for k in 0..8 {
            assert!((tape.value(s)[k] - tape.value(s2)[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_norm_normalizes_batch_statistics() {
        let mut rng = crate::seed::stream(8, &[1]);
        let rows = 64;
        let c = 3;
        let x: Vec<f64> = (0..rows * c)
            .map(|i| rng.random_range(-2.0..2.0) + (i % c) as f64)
            .collect();
        let mut tape = Tape::<f64>::new(false);
        let xid = tape.leaf(&[rows, c], x, "x", false).unwrap();
        let gamma = tape.leaf(&[c], vec![1.0; c], "gamma", false).unwrap();
        let beta = tape.leaf(&[c], vec![0.0; c], "beta", false).unwrap();
        let y = tape.batch_norm_train(xid, gamma, beta, 1e-5, "bn").unwrap();
        for k in 0..c {
            let col: Vec<f64> = (0..rows).map(|r| tape.value(y)[r * c + k]).collect();
            let mean: f64 = col.iter().sum::<f64>() / rows as f64;
            let var: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / rows as f64;
            assert!(mean.abs() < 1e-5, "channel {k} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "channel {k} var {var}");
        }
    }

    #[test]
    fn nan_inputs_name_the_layer() {
        let mut tape = Tape::<f64>::new(false);
        let x = tape.leaf(&[2], vec![1.0, 2.0], "x", false).unwrap();
        let y = tape.scale(x, f64::NAN, "conv2").unwrap_err();
        assert!(y.to_string().contains("conv2"), "{y}");
    }

    #[test]
    fn backward_rejected_on_inference_tape() {
        let mut tape = Tape::<f64>::new(false);
        let x = tape.leaf(&[1], vec![1.0], "x", true).unwrap();
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn attention_with_zero_query_is_uniform_mean() {
        // W^Q = 0 makes all scores zero: softmax is uniform over keys and
        // every output row equals the mean of the value-projected tokens.
        let mut rng = crate::seed::stream(9, &[1]);
        let (n, d) = (5, 3);
        let p = rand_vec(n * d, &mut rng);
        let wv = rand_vec(d * d, &mut rng);
        let mut tape = Tape::<f64>::new(false);
        let pid = tape.leaf(&[1, n, d], p.clone(), "p", false).unwrap();
        let wq = tape.leaf(&[d, d], vec![0.0; d * d], "wq", false).unwrap();
        let wk = tape.leaf(&[d, d], rand_vec(d * d, &mut rng), "wk", false).unwrap();
        let wvid = tape.leaf(&[d, d], wv.clone(), "wv", false).unwrap();
        let q = tape.matmul(pid, wq, "q").unwrap();
        let k = tape.matmul(pid, wk, "k").unwrap();
        let v = tape.matmul(pid, wvid, "v").unwrap();
        let scores = tape.bat_matmul_nt(q, k, "scores").unwrap();
        let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt(), "scale").unwrap();
        let attn = tape.softmax_rows(scaled, "softmax").unwrap();
        let out = tape.bat_matmul_nn(attn, v, "attnv").unwrap();

        for w in tape.value(attn) {
            assert!((w - 1.0 / n as f64).abs() < 1e-12);
        }
        let vvals = tape.value(v).to_vec();
        let mut mean = vec![0.0f64; d];
        for i in 0..n {
            for k in 0..d {
                mean[k] += vvals[i * d + k] / n as f64;
            }
        }
        for i in 0..n {
            for k in 0..d {
                assert!((tape.value(out)[i * d + k] - mean[k]).abs() < 1e-12);
            }
        }
    }
}
