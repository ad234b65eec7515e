//! Reverse-mode differentiation over a linear tape.
//!
//! Forward calls compute values immediately and record one node per op.
//! `backward` replays the tape in reverse, accumulating vector-Jacobian
//! products into every leaf registered with `requires_grad`. Each tape is
//! confined to one thread of control; heavy kernels (matmul, conv) fan out
//! internally over disjoint output regions, so gradients are bit-identical
//! across runs.
//!
//! Subgradient conventions: relu and clamp propagate zero exactly at their
//! kinks; max-pool and reduce-max break ties toward the first (row-major)
//! index.

use rayon::prelude::*;

use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value stored on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

struct Node {
    value: Tensor,
    needs_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    AddRowVec(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        padding: usize,
    },
    Relu(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    LogSoftmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
    L1Norm(Var),
    L2NormSq(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Gather {
        x: Var,
        index: usize,
    },
    RemoveIndex {
        x: Var,
        index: usize,
    },
    ReduceMax {
        x: Var,
        argmax: usize,
    },
    StraightThrough(Var),
}

/// Gradients of a scalar loss with respect to tape leaves.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a variable. `None` for variables that do not require
    /// grad; zero-filled for requires-grad leaves the loss never reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

/// Records a computation and replays it backwards.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

// Kernels below this many multiply-accumulates stay single threaded.
const PAR_THRESHOLD: usize = 1 << 15;

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Register a leaf. The tensor is snapshotted; its `requires_grad` flag
    /// decides whether gradients flow to it.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.clone(), t.requires_grad(), Op::Leaf)
    }

    /// Register a leaf that never receives gradient, regardless of flags.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        let mut t = t.clone();
        t.set_requires_grad(false);
        self.push(t, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    // ── Element-wise ──────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, ng, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, ng, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, ng, Op::Mul(a, b)))
    }

    pub fn scalar_mul(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| c * x);
        let ng = self.needs(a);
        self.push(t, ng, Op::ScalarMul(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x + c);
        let ng = self.needs(a);
        self.push(t, ng, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let ng = self.needs(a);
        self.push(t, ng, Op::Relu(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let t = self.value(a).map(|x| x.max(lo).min(hi));
        let ng = self.needs(a);
        self.push(t, ng, Op::Clamp { x: a, lo, hi })
    }

    // ── Linear algebra ────────────────────────────────────────────

    /// [n,k] x [k,m] -> [n,m]
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; n * m];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let t = Tensor::new(vec![n, m], out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, ng, Op::MatMul(a, b)))
    }

    /// Adds a length-m vector to every row of an [n,m] matrix.
    pub fn add_row_vec(&mut self, m: Var, v: Var) -> Result<Var> {
        let (sm, sv) = (self.value(m).shape(), self.value(v).shape());
        if sm.len() != 2 || sv.len() != 1 || sm[1] != sv[0] {
            return Err(Error::ShapeMismatch {
                op: "add_row_vec",
                lhs: sm.to_vec(),
                rhs: sv.to_vec(),
            });
        }
        let cols = sm[1];
        let vd = self.value(v).data().to_vec();
        let mut out = self.value(m).data().to_vec();
        for row in out.chunks_mut(cols) {
            for (o, b) in row.iter_mut().zip(vd.iter()) {
                *o += b;
            }
        }
        let t = Tensor::new(sm.to_vec(), out)?;
        let ng = self.needs(m) || self.needs(v);
        Ok(self.push(t, ng, Op::AddRowVec(m, v)))
    }

    /// 2-D convolution, stride 1, zero padding.
    /// x: [n, c_in, h, w], w: [c_out, c_in, kh, kw], bias: [c_out].
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.value(x).shape(), self.value(w).shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let (n, c_in, h, wdt) = (sx[0], sx[1], sx[2], sx[3]);
        let (c_out, kh, kw) = (sw[0], sw[2], sw[3]);
        if let Some(b) = bias {
            let sb = self.value(b).shape();
            if sb != [c_out] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: sb.to_vec(),
                    rhs: vec![c_out],
                });
            }
        }
        if h + 2 * padding < kh || wdt + 2 * padding < kw {
            return Err(Error::InvalidShape {
                op: "conv2d",
                shape: sx.to_vec(),
                reason: format!("kernel {kh}x{kw} larger than padded input"),
            });
        }
        let ho = h + 2 * padding - kh + 1;
        let wo = wdt + 2 * padding - kw + 1;

        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd: Option<Vec<f64>> = bias.map(|b| self.value(b).data().to_vec());

        let mut out = vec![0.0; n * c_out * ho * wo];
        let per_example = c_out * ho * wo;
        // For each (ki, kj) tap, the valid output columns form one
        // contiguous span, so the inner loop is a slice AXPY.
        let work = |ni: usize, chunk: &mut [f64]| {
            let x_base = ni * c_in * h * wdt;
            for oc in 0..c_out {
                let och = oc * ho * wo;
                if let Some(b) = bd.as_ref() {
                    chunk[och..och + ho * wo].fill(b[oc]);
                }
                for ic in 0..c_in {
                    let x_ch = x_base + ic * h * wdt;
                    let w_ch = (oc * c_in + ic) * kh * kw;
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let wv = wd[w_ch + ki * kw + kj];
                            if wv == 0.0 {
                                continue;
                            }
                            let ow_lo = padding.saturating_sub(kj);
                            let ow_hi = (wdt + padding - kj).min(wo);
                            if ow_lo >= ow_hi {
                                continue;
                            }
                            for oh in 0..ho {
                                let ih = (oh + ki).wrapping_sub(padding);
                                if ih >= h {
                                    continue;
                                }
                                let orow = och + oh * wo;
                                let xrow = x_ch + ih * wdt + (ow_lo + kj - padding);
                                let (dst, src) = (
                                    &mut chunk[orow + ow_lo..orow + ow_hi],
                                    &xd[xrow..xrow + (ow_hi - ow_lo)],
                                );
                                for (o, &xv) in dst.iter_mut().zip(src) {
                                    *o += wv * xv;
                                }
                            }
                        }
                    }
                }
            }
        };
        if n * per_example * c_in * kh * kw > PAR_THRESHOLD {
            out.par_chunks_mut(per_example)
                .enumerate()
                .for_each(|(ni, chunk)| work(ni, chunk));
        } else {
            for (ni, chunk) in out.chunks_mut(per_example).enumerate() {
                work(ni, chunk);
            }
        }
        let t = Tensor::new(vec![n, c_out, ho, wo], out)?;
        let ng = self.needs(x) || self.needs(w) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(t, ng, Op::Conv2d { x, w, bias, padding }))
    }

    /// 2x2 max pooling with stride 2. Height and width must be even.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let sx = self.value(x).shape();
        if sx.len() != 4 || sx[2] % 2 != 0 || sx[3] % 2 != 0 {
            return Err(Error::InvalidShape {
                op: "max_pool2",
                shape: sx.to_vec(),
                reason: "expected [n,c,h,w] with even h and w".into(),
            });
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (ho, wo) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * c * ho * wo];
        let mut argmax = vec![0u32; n * c * ho * wo];
        for nc in 0..n * c {
            let base = nc * h * w;
            let obase = nc * ho * wo;
            for oh in 0..ho {
                for ow in 0..wo {
                    let i0 = base + (2 * oh) * w + 2 * ow;
                    // Row-major first index wins ties.
                    let cand = [i0, i0 + 1, i0 + w, i0 + w + 1];
                    let mut best = cand[0];
                    for &i in &cand[1..] {
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                    out[obase + oh * wo + ow] = xd[best];
                    argmax[obase + oh * wo + ow] = best as u32;
                }
            }
        }
        let t = Tensor::new(vec![n, c, ho, wo], out)?;
        let ng = self.needs(x);
        Ok(self.push(t, ng, Op::MaxPool2 { x, argmax }))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).reshaped(shape)?;
        let ng = self.needs(a);
        Ok(self.push(t, ng, Op::Reshape(a)))
    }

    // ── Reductions ────────────────────────────────────────────────

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), ng, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s: f64 = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s / n), ng, Op::Mean(a))
    }

    /// Sum of absolute values.
    pub fn l1_norm(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|x| x.abs()).sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), ng, Op::L1Norm(a))
    }

    /// Sum of squares.
    pub fn l2_norm_sq(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|x| x * x).sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), ng, Op::L2NormSq(a))
    }

    /// Maximum element of a 1-D tensor; first index wins ties.
    pub fn reduce_max(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.shape().len() != 1 {
            return Err(Error::InvalidShape {
                op: "reduce_max",
                shape: v.shape().to_vec(),
                reason: "expected 1-D input".into(),
            });
        }
        let am = crate::autodiff::tensor::argmax(v.data());
        let val = v.data()[am];
        let ng = self.needs(a);
        Ok(self.push(Tensor::scalar(val), ng, Op::ReduceMax { x: a, argmax: am }))
    }

    /// Single element of a flat tensor as a scalar.
    pub fn gather(&mut self, a: Var, index: usize) -> Result<Var> {
        let v = self.value(a);
        if index >= v.numel() {
            return Err(Error::InvalidArgument(format!(
                "gather index {index} out of range for {} elements",
                v.numel()
            )));
        }
        let val = v.data()[index];
        let ng = self.needs(a);
        Ok(self.push(Tensor::scalar(val), ng, Op::Gather { x: a, index }))
    }

    /// 1-D tensor with the element at `index` removed.
    pub fn remove_index(&mut self, a: Var, index: usize) -> Result<Var> {
        let v = self.value(a);
        if v.shape().len() != 1 || index >= v.numel() || v.numel() < 2 {
            return Err(Error::InvalidArgument(format!(
                "remove_index {index} invalid for shape {:?}",
                v.shape()
            )));
        }
        let mut data = Vec::with_capacity(v.numel() - 1);
        data.extend_from_slice(&v.data()[..index]);
        data.extend_from_slice(&v.data()[index + 1..]);
        let t = Tensor::from_vec(data);
        let ng = self.needs(a);
        Ok(self.push(t, ng, Op::RemoveIndex { x: a, index }))
    }

    // ── Probabilistic heads ───────────────────────────────────────

    /// Softmax over the last axis, max-subtracted for stability.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let cols = *v.shape().last().unwrap();
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(cols) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        let t = Tensor::new(v.shape().to_vec(), data).unwrap();
        let ng = self.needs(a);
        self.push(t, ng, Op::Softmax(a))
    }

    /// Log-softmax over the last axis, max-subtracted for stability.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let cols = *v.shape().last().unwrap();
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(cols) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln() + mx;
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let t = Tensor::new(v.shape().to_vec(), data).unwrap();
        let ng = self.needs(a);
        self.push(t, ng, Op::LogSoftmax(a))
    }

    /// Mean cross-entropy of logits against integer labels.
    /// Logits may be [c] with one label or [n,c] with n labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        let (rows, cols) = match v.shape() {
            [c] => (1usize, *c),
            [n, c] => (*n, *c),
            s => {
                return Err(Error::InvalidShape {
                    op: "cross_entropy",
                    shape: s.to_vec(),
                    reason: "expected [c] or [n,c] logits".into(),
                })
            }
        };
        if labels.len() != rows {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy: {} labels for {} rows",
                labels.len(),
                rows
            )));
        }
        for &l in labels {
            if l >= cols {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    num_classes: cols,
                });
            }
        }
        let mut total = 0.0;
        for (row, &label) in v.data().chunks(cols).zip(labels.iter()) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln() + mx;
            total += lse - row[label];
        }
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(total / rows as f64),
            ng,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Output with an externally computed value whose backward pass is the
    /// identity. Used to route gradients through non-differentiable input
    /// transforms (squeezers, nearest-neighbor warps).
    pub fn straight_through(&mut self, x: Var, value: Tensor) -> Result<Var> {
        if value.shape() != self.value(x).shape() {
            return Err(Error::ShapeMismatch {
                op: "straight_through",
                lhs: self.value(x).shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        let ng = self.needs(x);
        Ok(self.push(value, ng, Op::StraightThrough(x)))
    }

    // ── Backward ──────────────────────────────────────────────────

    /// Gradients of a scalar loss with respect to every requires-grad leaf.
    /// Leaves the loss never reached get zero gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            // Keep the buffer for result extraction on leaves.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }

        let mut out = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            if node.needs_grad && matches!(node.op, Op::Leaf) {
                let data = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                out.push(Some(Tensor::new(node.value.shape().to_vec(), data).unwrap()));
            } else {
                out.push(None);
            }
        }
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(buf) => {
                for (b, d) in buf.iter_mut().zip(delta.iter()) {
                    *b += d;
                }
            }
            None => grads[v.0] = Some(delta.to_vec()),
        }
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g);
                self.accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g);
                if self.needs(*b) {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    self.accumulate(grads, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bd = self.value(*b).data();
                    let d: Vec<f64> = g.iter().zip(bd).map(|(gi, bi)| gi * bi).collect();
                    self.accumulate(grads, *a, &d);
                }
                if self.needs(*b) {
                    let ad = self.value(*a).data();
                    let d: Vec<f64> = g.iter().zip(ad).map(|(gi, ai)| gi * ai).collect();
                    self.accumulate(grads, *b, &d);
                }
            }
            Op::ScalarMul(a, c) => {
                if self.needs(*a) {
                    let d: Vec<f64> = g.iter().map(|gi| gi * c).collect();
                    self.accumulate(grads, *a, &d);
                }
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g),
            Op::MatMul(a, b) => self.backward_matmul(*a, *b, g, grads),
            Op::AddRowVec(m, v) => {
                self.accumulate(grads, *m, g);
                if self.needs(*v) {
                    let cols = self.value(*v).numel();
                    let mut d = vec![0.0; cols];
                    for row in g.chunks(cols) {
                        for (di, gi) in d.iter_mut().zip(row.iter()) {
                            *di += gi;
                        }
                    }
                    self.accumulate(grads, *v, &d);
                }
            }
            Op::Conv2d { x, w, bias, padding } => {
                self.backward_conv2d(i, *x, *w, *bias, *padding, g, grads)
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let xd = self.value(*a).data();
                    let d: Vec<f64> = g
                        .iter()
                        .zip(xd)
                        .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                        .collect();
                    self.accumulate(grads, *a, &d);
                }
            }
            Op::Clamp { x, lo, hi } => {
                if self.needs(*x) {
                    let xd = self.value(*x).data();
                    let d: Vec<f64> = g
                        .iter()
                        .zip(xd)
                        .map(|(gi, xi)| if *xi > *lo && *xi < *hi { *gi } else { 0.0 })
                        .collect();
                    self.accumulate(grads, *x, &d);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if self.needs(*x) {
                    let mut d = vec![0.0; self.value(*x).numel()];
                    for (gi, &src) in g.iter().zip(argmax.iter()) {
                        d[src as usize] += gi;
                    }
                    self.accumulate(grads, *x, &d);
                }
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g),
            Op::Sum(a) => {
                if self.needs(*a) {
                    let d = vec![g[0]; self.value(*a).numel()];
                    self.accumulate(grads, *a, &d);
                }
            }
            Op::Mean(a) => {
                if self.needs(*a) {
                    let n = self.value(*a).numel();
                    let d = vec![g[0] / n as f64; n];
                    self.accumulate(grads, *a, &d);
                }
            }
            Op::Softmax(a) => {
                if self.needs(*a) {
                    let s = self.nodes[i].value.data();
                    let cols = *self.nodes[i].value.shape().last().unwrap();
                    let mut d = vec![0.0; s.len()];
                    for r in 0..s.len() / cols {
                        let row = &s[r * cols..(r + 1) * cols];
                        let grow = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = row.iter().zip(grow).map(|(si, gi)| si * gi).sum();
                        for c in 0..cols {
                            d[r * cols + c] = row[c] * (grow[c] - dot);
                        }
                    }
                    self.accumulate(grads, *a, &d);
                }
            }
            Op::LogSoftmax(a) => {
                if self.needs(*a) {
                    let ls = self.nodes[i].value.data();
                    let cols = *self.nodes[i].value.shape().last().unwrap();
                    let mut d = vec![0.0; ls.len()];
                    for r in 0..ls.len() / cols {
                        let row = &ls[r * cols..(r + 1) * cols];
                        let grow = &g[r * cols..(r + 1) * cols];
                        let gsum: f64 = grow.iter().sum();
                        for c in 0..cols {
                            d[r * cols + c] = grow[c] - row[c].exp() * gsum;
                        }
                    }
                    self.accumulate(grads, *a, &d);
                }
            }
            Op::CrossEntropy { logits, labels } => {
                if self.needs(*logits) {
                    let v = self.value(*logits);
                    let cols = *v.shape().last().unwrap();
                    let rows = labels.len();
                    let scale = g[0] / rows as f64;
                    let mut d = vec![0.0; v.numel()];
                    for (r, (row, &label)) in
                        v.data().chunks(cols).zip(labels.iter()).enumerate()
                    {
                        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let mut sum = 0.0;
                        for (c, &x) in row.iter().enumerate() {
                            let e = (x - mx).exp();
                            d[r * cols + c] = e;
                            sum += e;
                        }
                        for c in 0..cols {
                            d[r * cols + c] /= sum;
                        }
                        d[r * cols + label] -= 1.0;
                        for c in 0..cols {
                            d[r * cols + c] *= scale;
                        }
                    }
                    self.accumulate(grads, *logits, &d);
                }
            }
            Op::L1Norm(a) => {
                if self.needs(*a) {
                    let xd = self.value(*a).data();
                    let d: Vec<f64> = xd
                        .iter()
                        .map(|&x| {
                            if x > 0.0 {
                                g[0]
                            } else if x < 0.0 {
                                -g[0]
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    self.accumulate(grads, *a, &d);
                }
            }
            Op::L2NormSq(a) => {
                if self.needs(*a) {
                    let xd = self.value(*a).data();
                    let d: Vec<f64> = xd.iter().map(|&x| 2.0 * x * g[0]).collect();
                    self.accumulate(grads, *a, &d);
                }
            }
            Op::Gather { x, index } => {
                if self.needs(*x) {
                    let mut d = vec![0.0; self.value(*x).numel()];
                    d[*index] = g[0];
                    self.accumulate(grads, *x, &d);
                }
            }
            Op::RemoveIndex { x, index } => {
                if self.needs(*x) {
                    let n = self.value(*x).numel();
                    let mut d = vec![0.0; n];
                    d[..*index].copy_from_slice(&g[..*index]);
                    d[index + 1..].copy_from_slice(&g[*index..]);
                    self.accumulate(grads, *x, &d);
                }
            }
            Op::ReduceMax { x, argmax } => {
                if self.needs(*x) {
                    let mut d = vec![0.0; self.value(*x).numel()];
                    d[*argmax] = g[0];
                    self.accumulate(grads, *x, &d);
                }
            }
            Op::StraightThrough(x) => self.accumulate(grads, *x, g),
        }
    }

    fn backward_matmul(&self, a: Var, b: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        if self.needs(a) {
            // dA = g @ B^T : [n,m] x [m,k]
            let bd = self.value(b).data();
            let mut d = vec![0.0; n * k];
            let work = |row: usize, chunk: &mut [f64]| {
                for kk in 0..k {
                    let mut acc = 0.0;
                    for mm in 0..m {
                        acc += g[row * m + mm] * bd[kk * m + mm];
                    }
                    chunk[kk] = acc;
                }
            };
            if n * k * m > PAR_THRESHOLD {
                d.par_chunks_mut(k).enumerate().for_each(|(r, c)| work(r, c));
            } else {
                for (r, c) in d.chunks_mut(k).enumerate() {
                    work(r, c);
                }
            }
            self.accumulate(grads, a, &d);
        }
        if self.needs(b) {
            // dB = A^T @ g : [k,n] x [n,m]
            let ad = self.value(a).data();
            let mut d = vec![0.0; k * m];
            let work = |kk: usize, chunk: &mut [f64]| {
                for nn in 0..n {
                    let av = ad[nn * k + kk];
                    if av == 0.0 {
                        continue;
                    }
                    for mm in 0..m {
                        chunk[mm] += av * g[nn * m + mm];
                    }
                }
            };
            if n * k * m > PAR_THRESHOLD {
                d.par_chunks_mut(m).enumerate().for_each(|(kk, c)| work(kk, c));
            } else {
                for (kk, c) in d.chunks_mut(m).enumerate() {
                    work(kk, c);
                }
            }
            self.accumulate(grads, b, &d);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_conv2d(
        &self,
        node: usize,
        x: Var,
        w: Var,
        bias: Option<Var>,
        padding: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let sx = self.value(x).shape().to_vec();
        let sw = self.value(w).shape().to_vec();
        let so = self.nodes[node].value.shape().to_vec();
        let (n, c_in, h, wdt) = (sx[0], sx[1], sx[2], sx[3]);
        let (c_out, kh, kw) = (sw[0], sw[2], sw[3]);
        let (ho, wo) = (so[2], so[3]);
        let xd = self.value(x).data();
        let wd = self.value(w).data();

        if self.needs(x) {
            let mut d = vec![0.0; xd.len()];
            let per_example = c_in * h * wdt;
            let work = |ni: usize, chunk: &mut [f64]| {
                for oc in 0..c_out {
                    let g_ch = (ni * c_out + oc) * ho * wo;
                    for ic in 0..c_in {
                        let x_ch = ic * h * wdt;
                        let w_ch = (oc * c_in + ic) * kh * kw;
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let wv = wd[w_ch + ki * kw + kj];
                                if wv == 0.0 {
                                    continue;
                                }
                                let ow_lo = padding.saturating_sub(kj);
                                let ow_hi = (wdt + padding - kj).min(wo);
                                if ow_lo >= ow_hi {
                                    continue;
                                }
                                for oh in 0..ho {
                                    let ih = (oh + ki).wrapping_sub(padding);
                                    if ih >= h {
                                        continue;
                                    }
                                    let grow = g_ch + oh * wo;
                                    let xrow = x_ch + ih * wdt + (ow_lo + kj - padding);
                                    let dst = &mut chunk[xrow..xrow + (ow_hi - ow_lo)];
                                    let src = &g[grow + ow_lo..grow + ow_hi];
                                    for (o, &gv) in dst.iter_mut().zip(src) {
                                        *o += wv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            };
            if n * c_out * ho * wo * c_in * kh * kw > PAR_THRESHOLD {
                d.par_chunks_mut(per_example)
                    .enumerate()
                    .for_each(|(ni, chunk)| work(ni, chunk));
            } else {
                for (ni, chunk) in d.chunks_mut(per_example).enumerate() {
                    work(ni, chunk);
                }
            }
            self.accumulate(grads, x, &d);
        }

        if self.needs(w) {
            let mut d = vec![0.0; wd.len()];
            let per_oc = c_in * kh * kw;
            let work = |oc: usize, chunk: &mut [f64]| {
                for ni in 0..n {
                    let g_ch = (ni * c_out + oc) * ho * wo;
                    let x_base = ni * c_in * h * wdt;
                    for ic in 0..c_in {
                        let x_ch = x_base + ic * h * wdt;
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let ow_lo = padding.saturating_sub(kj);
                                let ow_hi = (wdt + padding - kj).min(wo);
                                if ow_lo >= ow_hi {
                                    continue;
                                }
                                let mut acc = 0.0;
                                for oh in 0..ho {
                                    let ih = (oh + ki).wrapping_sub(padding);
                                    if ih >= h {
                                        continue;
                                    }
                                    let grow = g_ch + oh * wo;
                                    let xrow = x_ch + ih * wdt + (ow_lo + kj - padding);
                                    let gs = &g[grow + ow_lo..grow + ow_hi];
                                    let xs = &xd[xrow..xrow + (ow_hi - ow_lo)];
                                    for (&gv, &xv) in gs.iter().zip(xs) {
                                        acc += gv * xv;
                                    }
                                }
                                chunk[(ic * kh + ki) * kw + kj] += acc;
                            }
                        }
                    }
                }
            };
            if n * c_out * ho * wo * per_oc > PAR_THRESHOLD {
                d.par_chunks_mut(per_oc)
                    .enumerate()
                    .for_each(|(oc, chunk)| work(oc, chunk));
            } else {
                for (oc, chunk) in d.chunks_mut(per_oc).enumerate() {
                    work(oc, chunk);
                }
            }
            self.accumulate(grads, w, &d);
        }

        if let Some(b) = bias {
            if self.needs(b) {
                let mut d = vec![0.0; c_out];
                for ni in 0..n {
                    for (oc, di) in d.iter_mut().enumerate() {
                        let g_ch = (ni * c_out + oc) * ho * wo;
                        *di += g[g_ch..g_ch + ho * wo].iter().sum::<f64>();
                    }
                }
                self.accumulate(grads, b, &d);
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    let work = |row: usize, chunk: &mut [f64]| {
        let arow = &a[row * k..(row + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * m..(kk + 1) * m];
            for (o, &bv) in chunk.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    };
    if n * k * m > PAR_THRESHOLD {
        out.par_chunks_mut(m)
            .enumerate()
            .for_each(|(row, chunk)| work(row, chunk));
    } else {
        for (row, chunk) in out.chunks_mut(m).enumerate() {
            work(row, chunk);
        }
    }
}
