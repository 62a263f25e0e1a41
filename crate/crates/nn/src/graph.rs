//! Tape of recorded operations and its reverse sweep.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and [`Graph::backward`] simply walks it in reverse.
//! Operations that own parameters refer to them by [`ParamId`]; their
//! gradients are only produced when the graph tracks parameters, which lets
//! guide evaluation (gradient with respect to the input only) skip the
//! weight-gradient products.

use crate::real::matmul;
use crate::{NnError, ParamId, ParamStore, Real, Result, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Affine { x: NodeId, w: ParamId, b: Option<ParamId> },
    Conv1d { x: NodeId, w: ParamId, b: ParamId, kernel: usize, cols: Vec<T> },
    LayerNorm { x: NodeId, gain: ParamId, bias: ParamId, mean: Vec<T>, rstd: Vec<T> },
    Mish { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    AddTime { x: NodeId, e: NodeId },
    Reshape { x: NodeId },
    Sum { x: NodeId },
    Mean { x: NodeId },
    ScaleShift { x: NodeId, scale: T },
    Mse { pred: NodeId, target: Vec<T> },
    BceLogits { logits: NodeId, targets: Vec<T> },
    SoftmaxXent { logits: NodeId, targets: Vec<usize> },
    LogSoftmax { x: NodeId },
    SelectSum { x: NodeId, class: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by one backward sweep.
pub struct Gradients<T> {
    nodes: Vec<Option<Vec<T>>>,
    params: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a leaf created with `requires_grad`.
    pub fn node(&self, id: NodeId) -> Option<&[T]> {
        self.nodes.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.get(id.0).and_then(|g| g.as_deref())
    }
}

pub struct Graph<'p, T: Real> {
    params: &'p ParamStore<T>,
    track_params: bool,
    nodes: Vec<Node<T>>,
}

fn shape_err(op: &'static str, detail: String) -> NnError {
    NnError::Shape { op, detail }
}

/// Mish activation `x·tanh(softplus(x))` in double precision.
pub fn mish_scalar(x: f64) -> f64 {
    let mut out = [0.0];
    f64::mish_slice(&[x], &mut out);
    out[0]
}

impl<'p, T: Real> Graph<'p, T> {
    /// Graph whose backward sweep also yields parameter gradients.
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { params, track_params: true, nodes: Vec::new() }
    }

    /// Graph treating every parameter as a constant.
    pub fn frozen(params: &'p ParamStore<T>) -> Self {
        Self { params, track_params: false, nodes: Vec::new() }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, id: NodeId) -> Result<&Node<T>> {
        self.nodes.get(id.0).ok_or(NnError::UnknownNode(id.0))
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor<T>> {
        Ok(&self.node(id)?.value)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// `y = x·W + b` over the last dimension; `W` has shape `[in, out]`.
    pub fn affine(&mut self, x: NodeId, w: ParamId, b: Option<ParamId>) -> Result<NodeId> {
        let xv = &self.node(x)?.value;
        let wshape = self.params.shape(w);
        if wshape.len() != 2 || xv.last_dim() != wshape[0] {
            return Err(shape_err("affine", format!("x {:?} · W {:?}", xv.shape(), wshape)));
        }
        let (din, dout) = (wshape[0], wshape[1]);
        let rows = xv.numel() / din;
        let mut out = vec![T::zero(); rows * dout];
        if let Some(b) = b {
            let bv = self.params.value(b);
            if bv.len() != dout {
                return Err(shape_err("affine", format!("bias {} vs out {dout}", bv.len())));
            }
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv);
            }
        }
        matmul(rows, din, dout, xv.data(), false, self.params.value(w), false, &mut out, b.is_some());
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let needs = self.needs(&[x]) || self.track_params;
        Ok(self.push(Tensor::new(&shape, out)?, Op::Affine { x, w, b }, needs))
    }

    /// Same-padded cross-correlation over the time axis of `[B, H, Cin]`
    /// with kernel `W: [k, Cin, Cout]` (k odd) and bias `[Cout]`.
    pub fn conv1d(&mut self, x: NodeId, w: ParamId, b: ParamId) -> Result<NodeId> {
        let xv = &self.node(x)?.value;
        let ws = self.params.shape(w);
        if xv.shape().len() != 3 || ws.len() != 3 || ws[1] != xv.shape()[2] || ws[0] % 2 == 0 {
            return Err(shape_err("conv1d", format!("x {:?} * W {:?}", xv.shape(), ws)));
        }
        let (bsz, h, cin) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (kernel, cout) = (ws[0], ws[2]);
        if self.params.value(b).len() != cout {
            return Err(shape_err("conv1d", "bias length".into()));
        }
        let pad = (kernel - 1) / 2;
        let kc = kernel * cin;
        let mut cols = vec![T::zero(); bsz * h * kc];
        let xd = xv.data();
        for bi in 0..bsz {
            for t in 0..h {
                let row = &mut cols[(bi * h + t) * kc..(bi * h + t + 1) * kc];
                for j in 0..kernel {
                    let src = t as isize + j as isize - pad as isize;
                    if src < 0 || src >= h as isize {
                        continue;
                    }
                    let s = (bi * h + src as usize) * cin;
                    row[j * cin..(j + 1) * cin].copy_from_slice(&xd[s..s + cin]);
                }
            }
        }
        let rows = bsz * h;
        let mut out = vec![T::zero(); rows * cout];
        let bv = self.params.value(b);
        for row in out.chunks_mut(cout) {
            row.copy_from_slice(bv);
        }
        matmul(rows, kc, cout, &cols, false, self.params.value(w), false, &mut out, true);
        let needs = self.needs(&[x]) || self.track_params;
        let value = Tensor::new(&[bsz, h, cout], out)?;
        Ok(self.push(value, Op::Conv1d { x, w, b, kernel, cols }, needs))
    }

    /// Normalization over the last dimension with learnable gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: ParamId, bias: ParamId) -> Result<NodeId> {
        let xv = &self.node(x)?.value;
        let c = xv.last_dim();
        if self.params.value(gain).len() != c || self.params.value(bias).len() != c {
            return Err(shape_err("layer_norm", format!("features {c}")));
        }
        let rows = xv.numel() / c;
        let g = self.params.value(gain);
        let bb = self.params.value(bias);
        let mut out = vec![T::zero(); xv.numel()];
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        for (r, xr) in xv.data().chunks(c).enumerate() {
            let m = xr.iter().map(|v| v.f64()).sum::<f64>() / c as f64;
            let var = xr.iter().map(|v| (v.f64() - m).powi(2)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            let (mt, rst) = (T::of(m), T::of(rs));
            for (i, &v) in xr.iter().enumerate() {
                out[r * c + i] = (v - mt) * rst * g[i] + bb[i];
            }
            mean.push(mt);
            rstd.push(rst);
        }
        let value = Tensor::new(xv.shape(), out)?;
        let needs = self.needs(&[x]) || self.track_params;
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, mean, rstd }, needs))
    }

    pub fn mish(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = &self.node(x)?.value;
        let mut out = vec![T::zero(); xv.numel()];
        T::mish_slice(xv.data(), &mut out);
        let value = Tensor::new(xv.shape(), out)?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::Mish { x }, needs))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        if av.shape() != bv.shape() {
            return Err(shape_err(op, format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(av.shape(), out)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, needs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(av.shape(), out)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mul { a, b }, needs))
    }

    /// Broadcast-adds a per-sample vector `e: [B, C]` to every time step of
    /// `x: [B, H, C]`.
    pub fn add_time(&mut self, x: NodeId, e: NodeId) -> Result<NodeId> {
        let (xv, ev) = (&self.node(x)?.value, &self.node(e)?.value);
        let xs = xv.shape();
        if xs.len() != 3 || ev.shape() != [xs[0], xs[2]] {
            return Err(shape_err("add_time", format!("{:?} + {:?}", xs, ev.shape())));
        }
        let (bsz, h, c) = (xs[0], xs[1], xs[2]);
        let mut out = xv.data().to_vec();
        let ed = ev.data();
        for bi in 0..bsz {
            let eb = &ed[bi * c..(bi + 1) * c];
            for t in 0..h {
                let row = &mut out[(bi * h + t) * c..(bi * h + t + 1) * c];
                for (o, &v) in row.iter_mut().zip(eb) {
                    *o += v;
                }
            }
        }
        let value = Tensor::new(xs, out)?;
        let needs = self.needs(&[x, e]);
        Ok(self.push(value, Op::AddTime { x, e }, needs))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.node(x)?.value.clone().reshaped(shape)?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::Reshape { x }, needs))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s: f64 = self.node(x)?.value.data().iter().map(|v| v.f64()).sum();
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(T::of(s)), Op::Sum { x }, needs))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = &self.node(x)?.value;
        let s: f64 = xv.data().iter().map(|v| v.f64()).sum::<f64>() / xv.numel().max(1) as f64;
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(T::of(s)), Op::Mean { x }, needs))
    }

    /// `y = scale·x + shift` with constant coefficients.
    pub fn scale_shift(&mut self, x: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        let xv = &self.node(x)?.value;
        let (sc, sh) = (T::of(scale), T::of(shift));
        let out = xv.data().iter().map(|&v| v * sc + sh).collect();
        let value = Tensor::new(xv.shape(), out)?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::ScaleShift { x, scale: sc }, needs))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: NodeId, target: &[T]) -> Result<NodeId> {
        let pv = &self.node(pred)?.value;
        if pv.numel() != target.len() {
            return Err(shape_err("mse", format!("{} vs {}", pv.numel(), target.len())));
        }
        let s: f64 = pv.data().iter().zip(target).map(|(&p, &t)| (p.f64() - t.f64()).powi(2)).sum();
        let loss = s / target.len().max(1) as f64;
        let needs = self.needs(&[pred]);
        let op = Op::Mse { pred, target: target.to_vec() };
        Ok(self.push(Tensor::scalar(T::of(loss)), op, needs))
    }

    /// Mean binary cross-entropy on logits, targets in [0, 1].
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &[T]) -> Result<NodeId> {
        let lv = &self.node(logits)?.value;
        if lv.numel() != targets.len() {
            return Err(shape_err("bce_with_logits", format!("{} vs {}", lv.numel(), targets.len())));
        }
        let s: f64 = lv
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &t)| {
                let (z, t) = (z.f64(), t.f64());
                z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
            })
            .sum();
        let loss = s / targets.len().max(1) as f64;
        let needs = self.needs(&[logits]);
        let op = Op::BceLogits { logits, targets: targets.to_vec() };
        Ok(self.push(Tensor::scalar(T::of(loss)), op, needs))
    }

    /// Mean softmax cross-entropy over rows of `[.., C]` logits.
    pub fn softmax_xent(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let lv = &self.node(logits)?.value;
        let c = lv.last_dim();
        if lv.numel() / c != targets.len() || targets.iter().any(|&t| t >= c) {
            return Err(shape_err("softmax_xent", format!("{:?} vs {} targets", lv.shape(), targets.len())));
        }
        let mut s = 0.0;
        for (row, &t) in lv.data().chunks(c).zip(targets) {
            let m = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v.f64() - m).exp()).sum::<f64>().ln();
            s += lse - row[t].f64();
        }
        let loss = s / targets.len().max(1) as f64;
        let needs = self.needs(&[logits]);
        let op = Op::SoftmaxXent { logits, targets: targets.to_vec() };
        Ok(self.push(Tensor::scalar(T::of(loss)), op, needs))
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = &self.node(x)?.value;
        let c = xv.last_dim();
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(c) {
            let m = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v.f64() - m).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| T::of(v.f64() - lse)));
        }
        let value = Tensor::new(xv.shape(), out)?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::LogSoftmax { x }, needs))
    }

    /// For `x: [B, M, C]` returns `y: [B]` with `y[b] = Σ_m x[b, m, class]`.
    pub fn select_sum(&mut self, x: NodeId, class: usize) -> Result<NodeId> {
        let xv = &self.node(x)?.value;
        let s = xv.shape();
        if s.len() != 3 || class >= s[2] {
            return Err(shape_err("select_sum", format!("{s:?} class {class}")));
        }
        let (bsz, m, c) = (s[0], s[1], s[2]);
        let d = xv.data();
        let out = (0..bsz)
            .map(|b| T::of((0..m).map(|i| d[(b * m + i) * c + class].f64()).sum::<f64>()))
            .collect();
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::new(&[bsz], out)?, Op::SelectSum { x, class }, needs))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let root = self.node(loss)?;
        if root.value.numel() != 1 {
            return Err(NnError::NotScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pgrads: Vec<Option<Vec<T>>> = (0..self.params.len()).map(|_| None).collect();
        if !root.needs_grad {
            return Ok(Gradients { nodes: grads, params: pgrads });
        }
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads, &mut pgrads);
        }
        Ok(Gradients { nodes: grads, params: pgrads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], id: NodeId) -> Option<&'g mut Vec<T>> {
        let node = &self.nodes[id.0];
        if !node.needs_grad {
            return None;
        }
        Some(grads[id.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]))
    }

    fn pslot<'g>(&self, pgrads: &'g mut [Option<Vec<T>>], id: ParamId) -> Option<&'g mut Vec<T>> {
        if !self.track_params {
            return None;
        }
        let n = self.params.value(id).len();
        Some(pgrads[id.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        pgrads: &mut [Option<Vec<T>>],
    ) {
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let xv = &self.nodes[x.0].value;
                let ws = self.params.shape(*w);
                let (din, dout) = (ws[0], ws[1]);
                let rows = xv.numel() / din;
                if let Some(dw) = self.pslot(pgrads, *w) {
                    matmul(din, rows, dout, xv.data(), true, g, false, dw, true);
                }
                if let Some(b) = b {
                    if let Some(db) = self.pslot(pgrads, *b) {
                        for row in g.chunks(dout) {
                            for (acc, &v) in db.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    matmul(rows, dout, din, g, false, self.params.value(*w), true, dx, true);
                }
            }
            Op::Conv1d { x, w, b, kernel, cols } => {
                let xs = self.nodes[x.0].value.shape();
                let (bsz, h, cin) = (xs[0], xs[1], xs[2]);
                let cout = self.params.shape(*w)[2];
                let kc = kernel * cin;
                let rows = bsz * h;
                if let Some(dw) = self.pslot(pgrads, *w) {
                    matmul(kc, rows, cout, cols, true, g, false, dw, true);
                }
                if let Some(db) = self.pslot(pgrads, *b) {
                    for row in g.chunks(cout) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
                if self.nodes[x.0].needs_grad {
                    let mut dcols = vec![T::zero(); rows * kc];
                    matmul(rows, cout, kc, g, false, self.params.value(*w), true, &mut dcols, false);
                    let pad = (kernel - 1) / 2;
                    let dx = self.slot(grads, *x).expect("needs_grad checked");
                    for bi in 0..bsz {
                        for t in 0..h {
                            let row = &dcols[(bi * h + t) * kc..(bi * h + t + 1) * kc];
                            for j in 0..*kernel {
                                let src = t as isize + j as isize - pad as isize;
                                if src < 0 || src >= h as isize {
                                    continue;
                                }
                                let s = (bi * h + src as usize) * cin;
                                for (acc, &v) in dx[s..s + cin].iter_mut().zip(&row[j * cin..(j + 1) * cin]) {
                                    *acc += v;
                                }
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, mean, rstd } => {
                let xv = &self.nodes[x.0].value;
                let c = xv.last_dim();
                let gv = self.params.value(*gain);
                let xhat = |r: usize, i: usize| (xv.data()[r * c + i] - mean[r]) * rstd[r];
                if let Some(dg) = self.pslot(pgrads, *gain) {
                    for (r, gr) in g.chunks(c).enumerate() {
                        for i in 0..c {
                            dg[i] += gr[i] * xhat(r, i);
                        }
                    }
                }
                if let Some(db) = self.pslot(pgrads, *bias) {
                    for gr in g.chunks(c) {
                        for (acc, &v) in db.iter_mut().zip(gr) {
                            *acc += v;
                        }
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let cf = T::of(c as f64);
                    for (r, gr) in g.chunks(c).enumerate() {
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for i in 0..c {
                            let d = gr[i] * gv[i];
                            sum_d += d;
                            sum_dx += d * xhat(r, i);
                        }
                        let (md, mdx) = (sum_d / cf, sum_dx / cf);
                        for i in 0..c {
                            let d = gr[i] * gv[i];
                            dx[r * c + i] += rstd[r] * (d - md - xhat(r, i) * mdx);
                        }
                    }
                }
            }
            Op::Mish { x } => {
                let xv = &self.nodes[x.0].value;
                if let Some(dx) = self.slot(grads, *x) {
                    T::mish_grad_slice(xv.data(), g, dx);
                }
            }
            Op::Add { a, b } => {
                for id in [a, b] {
                    if let Some(d) = self.slot(grads, *id) {
                        for (acc, &v) in d.iter_mut().zip(g) {
                            *acc += v;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                if let Some(da) = self.slot(grads, *a) {
                    for ((acc, &gv), &v) in da.iter_mut().zip(g).zip(bv) {
                        *acc += gv * v;
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for ((acc, &gv), &v) in db.iter_mut().zip(g).zip(av) {
                        *acc += gv * v;
                    }
                }
            }
            Op::AddTime { x, e } => {
                let xs = self.nodes[x.0].value.shape();
                let (bsz, h, c) = (xs[0], xs[1], xs[2]);
                if let Some(dx) = self.slot(grads, *x) {
                    for (acc, &v) in dx.iter_mut().zip(g) {
                        *acc += v;
                    }
                }
                if let Some(de) = self.slot(grads, *e) {
                    for bi in 0..bsz {
                        for t in 0..h {
                            let row = &g[(bi * h + t) * c..(bi * h + t + 1) * c];
                            for (acc, &v) in de[bi * c..(bi + 1) * c].iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(dx) = self.slot(grads, *x) {
                    for (acc, &v) in dx.iter_mut().zip(g) {
                        *acc += v;
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().for_each(|acc| *acc += g[0]);
                }
            }
            Op::Mean { x } => {
                let n = T::of(self.nodes[x.0].value.numel() as f64);
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().for_each(|acc| *acc += g[0] / n);
                }
            }
            Op::ScaleShift { x, scale } => {
                if let Some(dx) = self.slot(grads, *x) {
                    for (acc, &v) in dx.iter_mut().zip(g) {
                        *acc += v * *scale;
                    }
                }
            }
            Op::Mse { pred, target } => {
                let pv = self.nodes[pred.0].value.data();
                let scale = g[0] * T::of(2.0 / target.len().max(1) as f64);
                if let Some(dp) = self.slot(grads, *pred) {
                    for ((acc, &p), &t) in dp.iter_mut().zip(pv).zip(target) {
                        *acc += scale * (p - t);
                    }
                }
            }
            Op::BceLogits { logits, targets } => {
                let lv = self.nodes[logits.0].value.data();
                let scale = g[0] / T::of(targets.len().max(1) as f64);
                if let Some(dl) = self.slot(grads, *logits) {
                    for ((acc, &z), &t) in dl.iter_mut().zip(lv).zip(targets) {
                        let sig = T::one() / (T::one() + (-z).exp());
                        *acc += scale * (sig - t);
                    }
                }
            }
            Op::SoftmaxXent { logits, targets } => {
                let lv = &self.nodes[logits.0].value;
                let c = lv.last_dim();
                let scale = g[0].f64() / targets.len().max(1) as f64;
                if let Some(dl) = self.slot(grads, *logits) {
                    for (r, (row, &t)) in lv.data().chunks(c).zip(targets).enumerate() {
                        let m = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|v| (v.f64() - m).exp()).sum();
                        for i in 0..c {
                            let p = (row[i].f64() - m).exp() / z;
                            let onehot = if i == t { 1.0 } else { 0.0 };
                            dl[r * c + i] += T::of(scale * (p - onehot));
                        }
                    }
                }
            }
            Op::LogSoftmax { x } => {
                let yv = &node.value;
                let c = yv.last_dim();
                if let Some(dx) = self.slot(grads, *x) {
                    for (r, (yr, gr)) in yv.data().chunks(c).zip(g.chunks(c)).enumerate() {
                        let gs: T = gr.iter().copied().sum();
                        for i in 0..c {
                            dx[r * c + i] += gr[i] - yr[i].exp() * gs;
                        }
                    }
                }
            }
            Op::SelectSum { x, class } => {
                let s = self.nodes[x.0].value.shape();
                let (bsz, m, c) = (s[0], s[1], s[2]);
                if let Some(dx) = self.slot(grads, *x) {
                    for b in 0..bsz {
                        for i in 0..m {
                            dx[(b * m + i) * c + class] += g[b];
                        }
                    }
                }
            }
        }
    }
}
