//! Operation tape for reverse-mode differentiation.
//!
//! Every primitive appends one node holding its output value and enough of
//! its inputs to run the vector-Jacobian product later. `backward` replays
//! the tape in reverse and returns gradients for the leaves that asked for
//! them. Nodes that no gradient-requiring leaf feeds into are never visited
//! by the reverse sweep.

use crate::element::Element;
use crate::error::{Result, TapeError};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pointwise {
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    L1,
    Bce,
}

/// Clamp applied to BCE predictions before taking logs.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cout: usize },
    ConvT { x: Var, w: Var, b: Var, geom: ConvGeom, cin: usize },
    MaxPool { x: Var, arg: Vec<u32> },
    Upsample { x: Var },
    Pointwise { x: Var, kind: Pointwise },
    ConcatChannels { a: Var, b: Var },
    SliceChannels { x: Var, start: usize },
    ConcatBatch { parts: Vec<Var> },
    SliceBatch { x: Var, start: usize },
    LinComb { parts: Vec<(Var, f64)> },
    Mul { a: Var, b: Var },
    Sum { x: Var, scale: f64 },
    GlobalAvgPool { x: Var },
    Reshape { x: Var },
    Loss { pred: Var, target: Var, kind: LossKind },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// Single-writer record of a forward computation.
#[derive(Debug)]
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(TapeError::shape(op, a, b));
    }
    Ok(())
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TapeError::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records an input. Leaves with `requires_grad` receive a gradient
    /// from [`Tape::backward`] (zero when the loss does not depend on them).
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    /// Same values, cut off from the graph: nothing downstream of the
    /// result propagates gradient into the producers of `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let [n, cin, h, wd] = self.value(x).dims4("conv2d")?;
        let [cout, wcin, kh, kw] = self.value(w).dims4("conv2d")?;
        if wcin != cin || self.shape(b) != [cout] {
            return Err(TapeError::shape("conv2d", self.shape(x), self.shape(w)));
        }
        if stride == 0 {
            return Err(TapeError::InvalidArgument("conv2d: stride must be at least 1".into()));
        }
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(TapeError::shape("conv2d", self.shape(x), self.shape(w)));
        }
        let geom = ConvGeom {
            c: cin,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(self.value(x).data(), n, self.value(w).data(), self.value(b).data(), cout, &geom);
        let value = Tensor::new(&[n, cout, geom.oh, geom.ow], out)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push("conv2d", value, Op::Conv2d { x, w, b, geom, cout }, needs)
    }

    /// Transposed convolution without padding. `w` has conv2d layout
    /// `[c_x, c_out, kh, kw]` read as the adjoint map, so
    /// `<conv2d(x, w), y> == <x, conv_transpose2d(y, w)>`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let [n, cin, h, wd] = self.value(x).dims4("conv_transpose2d")?;
        let [wcin, cout, kh, kw] = self.value(w).dims4("conv_transpose2d")?;
        if wcin != cin || self.shape(b) != [cout] {
            return Err(TapeError::shape("conv_transpose2d", self.shape(x), self.shape(w)));
        }
        if stride == 0 {
            return Err(TapeError::InvalidArgument("conv_transpose2d: stride must be at least 1".into()));
        }
        let (oh, ow) = ((h - 1) * stride + kh, (wd - 1) * stride + kw);
        let geom = ConvGeom { c: cout, h: oh, w: ow, kh, kw, stride, pad: 0, oh: h, ow: wd };
        let out = kernels::conv_t_forward(self.value(x).data(), n, cin, self.value(w).data(), self.value(b).data(), &geom);
        let value = Tensor::new(&[n, cout, oh, ow], out)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push("conv_transpose2d", value, Op::ConvT { x, w, b, geom, cin }, needs)
    }

    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("maxpool2x2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TapeError::InvalidArgument(format!(
                "maxpool2x2: spatial size {h}x{w} must be even"
            )));
        }
        let (out, arg) = kernels::maxpool_forward(self.value(x).data(), n * c, h, w);
        let value = Tensor::new(&[n, c, h / 2, w / 2], out)?;
        let needs = self.needs(x);
        self.push("maxpool2x2", value, Op::MaxPool { x, arg }, needs)
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("upsample_nearest2x")?;
        let out = kernels::upsample2x_forward(self.value(x).data(), n * c, h, w);
        let value = Tensor::new(&[n, c, 2 * h, 2 * w], out)?;
        let needs = self.needs(x);
        self.push("upsample_nearest2x", value, Op::Upsample { x }, needs)
    }

    pub fn pointwise(&mut self, kind: Pointwise, x: Var) -> Result<Var> {
        let value = match kind {
            Pointwise::Relu => self.value(x).map(|v| if v > T::zero() { v } else { T::zero() }),
            Pointwise::Sigmoid => self.value(x).map(sigmoid),
        };
        let needs = self.needs(x);
        let name = match kind {
            Pointwise::Relu => "relu",
            Pointwise::Sigmoid => "sigmoid",
        };
        self.push(name, value, Op::Pointwise { x, kind }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.pointwise(Pointwise::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.pointwise(Pointwise::Sigmoid, x)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, h, w] = self.value(a).dims4("concat_channels")?;
        let [nb, cb, hb, wb] = self.value(b).dims4("concat_channels")?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(TapeError::shape("concat_channels", self.shape(a), self.shape(b)));
        }
        let (sa, sb) = (ca * h * w, cb * h * w);
        let mut out = Vec::with_capacity(n * (sa + sb));
        for bi in 0..n {
            out.extend_from_slice(&self.value(a).data()[bi * sa..(bi + 1) * sa]);
            out.extend_from_slice(&self.value(b).data()[bi * sb..(bi + 1) * sb]);
        }
        let value = Tensor::new(&[n, ca + cb, h, w], out)?;
        let needs = self.needs(a) || self.needs(b);
        self.push("concat_channels", value, Op::ConcatChannels { a, b }, needs)
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("slice_channels")?;
        if start + len > c || len == 0 {
            return Err(TapeError::InvalidArgument(format!(
                "slice_channels: range {start}..{} outside {c} channels",
                start + len
            )));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * len * plane);
        for bi in 0..n {
            let base = (bi * c + start) * plane;
            out.extend_from_slice(&self.value(x).data()[base..base + len * plane]);
        }
        let value = Tensor::new(&[n, len, h, w], out)?;
        let needs = self.needs(x);
        self.push("slice_channels", value, Op::SliceChannels { x, start }, needs)
    }

    /// Concatenates along the leading (batch) dimension.
    pub fn concat_batch(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TapeError::InvalidArgument("concat_batch: no inputs".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(TapeError::shape("concat_batch", self.shape(*first), s));
            }
            lead += s[0];
            out.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let value = Tensor::new(&shape, out)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push("concat_batch", value, Op::ConcatBatch { parts: parts.to_vec() }, needs)
    }

    pub fn slice_batch(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || start + len > shape[0] || len == 0 {
            return Err(TapeError::InvalidArgument(format!(
                "slice_batch: range {start}..{} outside shape {shape:?}",
                start + len
            )));
        }
        let row: usize = shape[1..].iter().product();
        let out = self.value(x).data()[start * row..(start + len) * row].to_vec();
        let mut new_shape = shape.clone();
        new_shape[0] = len;
        let value = Tensor::new(&new_shape, out)?;
        let needs = self.needs(x);
        self.push("slice_batch", value, Op::SliceBatch { x, start }, needs)
    }

    /// `sum_i c_i * x_i` over same-shape inputs.
    pub fn lincomb(&mut self, parts: &[(Var, f64)]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TapeError::InvalidArgument("lincomb: no inputs".into()))?;
        let shape = self.shape(first.0).to_vec();
        let mut acc = vec![T::zero(); self.value(first.0).numel()];
        for &(v, c) in parts {
            same_shape("lincomb", &shape, self.shape(v))?;
            let c = T::lit(c);
            for (a, &x) in acc.iter_mut().zip(self.value(v).data()) {
                *a = *a + c * x;
            }
        }
        let value = Tensor::new(&shape, acc)?;
        let needs = parts.iter().any(|&(v, _)| self.needs(v));
        self.push("lincomb", value, Op::LinComb { parts: parts.to_vec() }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.lincomb(&[(a, 1.0), (b, 1.0)])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.lincomb(&[(a, 1.0), (b, -1.0)])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.lincomb(&[(x, c)])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(self.shape(a), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push("mul", value, Op::Mul { a, b }, needs)
    }

    fn reduce(&mut self, x: Var, scale: f64, name: &'static str) -> Result<Var> {
        let total: f64 = self.value(x).data().iter().map(|v| v.f64()).sum();
        let value = Tensor::scalar(T::lit(total * scale));
        let needs = self.needs(x);
        self.push(name, value, Op::Sum { x, scale }, needs)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, 1.0, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel().max(1) as f64;
        self.reduce(x, 1.0 / n, "mean")
    }

    /// `[n, c, h, w] -> [n, c, 1, 1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("global_avg_pool")?;
        let plane = h * w;
        let inv = 1.0 / plane as f64;
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|ch| T::lit(ch.iter().map(|v| v.f64()).sum::<f64>() * inv))
            .collect();
        let value = Tensor::new(&[n, c, 1, 1], data)?;
        let needs = self.needs(x);
        self.push("global_avg_pool", value, Op::GlobalAvgPool { x }, needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let needs = self.needs(x);
        self.push("reshape", value, Op::Reshape { x }, needs)
    }

    /// Mean-reduced scalar loss. BCE clamps `pred` into
    /// `[BCE_CLAMP, 1 - BCE_CLAMP]` before taking logs.
    pub fn scalar_loss(&mut self, kind: LossKind, pred: Var, target: Var) -> Result<Var> {
        let name = match kind {
            LossKind::L1 => "l1_loss",
            LossKind::Bce => "bce_loss",
        };
        same_shape(name, self.shape(pred), self.shape(target))?;
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let n = p.len().max(1) as f64;
        let total: f64 = match kind {
            LossKind::L1 => p.iter().zip(t).map(|(a, b)| (a.f64() - b.f64()).abs()).sum(),
            LossKind::Bce => p
                .iter()
                .zip(t)
                .map(|(a, b)| {
                    let q = clamp_prob(a.f64());
                    let y = b.f64();
                    -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
                })
                .sum(),
        };
        let value = Tensor::scalar(T::lit(total / n));
        let needs = self.needs(pred) || self.needs(target);
        self.push(name, value, Op::Loss { pred, target, kind }, needs)
    }

    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.scalar_loss(LossKind::L1, pred, target)
    }

    pub fn bce_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.scalar_loss(LossKind::Bce, pred, target)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(TapeError::NotScalar { shape: shape.to_vec() });
        }
        self.backward_with(loss, Tensor::full(shape, T::one()))
    }

    /// Reverse sweep seeded with an arbitrary output cotangent.
    pub fn backward_with(&self, out: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        same_shape("backward", self.shape(out), seed.shape())?;
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(out.0 + 1, || None);
        if self.needs(out) {
            grads[out.0] = Some(seed.into_data());
        }
        let mut leaves: Vec<Option<Tensor<T>>> = Vec::new();
        leaves.resize_with(self.nodes.len(), || None);

        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                if matches!(node.op, Op::Leaf) {
                    leaves[i] = Some(Tensor::zeros(node.value.shape()));
                }
                continue;
            };
            self.vjp(i, g, &mut grads, &mut leaves)?;
        }
        for (i, node) in self.nodes.iter().enumerate().skip(out.0 + 1) {
            if node.needs_grad && matches!(node.op, Op::Leaf) {
                leaves[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { leaves })
    }

    fn vjp(
        &self,
        i: usize,
        g: Vec<T>,
        grads: &mut [Option<Vec<T>>],
        leaves: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let need = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, d: Vec<T>| accumulate(grads, v, d);
        match &node.op {
            Op::Leaf => {
                leaves[i] = Some(Tensor::new(node.value.shape(), g)?);
            }
            Op::Conv2d { x, w, b, geom, cout } => {
                let n = self.shape(*x)[0];
                let r = kernels::conv2d_backward(val(*x), n, val(*w), *cout, geom, &g, (need(*x), need(*w), need(*b)));
                if let Some(d) = r.dx {
                    acc(*x, d);
                }
                if let Some(d) = r.dw {
                    acc(*w, d);
                }
                if let Some(d) = r.db {
                    acc(*b, d);
                }
            }
            Op::ConvT { x, w, b, geom, cin } => {
                let n = self.shape(*x)[0];
                let r = kernels::conv_t_backward(val(*x), n, *cin, val(*w), geom, &g, (need(*x), need(*w), need(*b)));
                if let Some(d) = r.dx {
                    acc(*x, d);
                }
                if let Some(d) = r.dw {
                    acc(*w, d);
                }
                if let Some(d) = r.db {
                    acc(*b, d);
                }
            }
            Op::MaxPool { x, arg } => {
                let mut d = vec![T::zero(); self.nodes[x.0].value.numel()];
                for (&a, &gv) in arg.iter().zip(&g) {
                    d[a as usize] = d[a as usize] + gv;
                }
                acc(*x, d);
            }
            Op::Upsample { x } => {
                let [n, c, h, w] = self.nodes[x.0].value.dims4("upsample_nearest2x")?;
                acc(*x, kernels::upsample2x_backward(&g, n * c, h, w));
            }
            Op::Pointwise { x, kind } => {
                let out = node.value.data();
                let mut d = g;
                match kind {
                    Pointwise::Relu => {
                        for (dv, &o) in d.iter_mut().zip(out) {
                            if o <= T::zero() {
                                *dv = T::zero();
                            }
                        }
                    }
                    Pointwise::Sigmoid => {
                        for (dv, &o) in d.iter_mut().zip(out) {
                            *dv = *dv * o * (T::one() - o);
                        }
                    }
                }
                acc(*x, d);
            }
            Op::ConcatChannels { a, b } => {
                let [n, ca, h, w] = self.nodes[a.0].value.dims4("concat_channels")?;
                let cb = self.shape(*b)[1];
                let (sa, sb) = (ca * h * w, cb * h * w);
                if need(*a) {
                    let mut d = Vec::with_capacity(n * sa);
                    for bi in 0..n {
                        d.extend_from_slice(&g[bi * (sa + sb)..bi * (sa + sb) + sa]);
                    }
                    acc(*a, d);
                }
                if need(*b) {
                    let mut d = Vec::with_capacity(n * sb);
                    for bi in 0..n {
                        d.extend_from_slice(&g[bi * (sa + sb) + sa..(bi + 1) * (sa + sb)]);
                    }
                    acc(*b, d);
                }
            }
            Op::SliceChannels { x, start } => {
                let [n, c, h, w] = self.nodes[x.0].value.dims4("slice_channels")?;
                let len = node.value.shape()[1];
                let plane = h * w;
                let mut d = vec![T::zero(); n * c * plane];
                for bi in 0..n {
                    let base = (bi * c + start) * plane;
                    d[base..base + len * plane].copy_from_slice(&g[bi * len * plane..(bi + 1) * len * plane]);
                }
                acc(*x, d);
            }
            Op::ConcatBatch { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.numel();
                    if need(p) {
                        acc(p, g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::SliceBatch { x, start } => {
                let src = &self.nodes[x.0].value;
                let row: usize = src.shape()[1..].iter().product();
                let mut d = vec![T::zero(); src.numel()];
                d[start * row..start * row + g.len()].copy_from_slice(&g);
                acc(*x, d);
            }
            Op::LinComb { parts } => {
                for &(v, c) in parts {
                    if need(v) {
                        let c = T::lit(c);
                        acc(v, g.iter().map(|&x| c * x).collect());
                    }
                }
            }
            Op::Mul { a, b } => {
                if need(*a) {
                    acc(*a, g.iter().zip(val(*b)).map(|(&x, &y)| x * y).collect());
                }
                if need(*b) {
                    acc(*b, g.iter().zip(val(*a)).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::Sum { x, scale } => {
                let s = g[0] * T::lit(*scale);
                acc(*x, vec![s; self.nodes[x.0].value.numel()]);
            }
            Op::GlobalAvgPool { x } => {
                let [_, _, h, w] = self.nodes[x.0].value.dims4("global_avg_pool")?;
                let inv = T::lit(1.0 / (h * w) as f64);
                let mut d = Vec::with_capacity(g.len() * h * w);
                for &gv in &g {
                    d.extend(std::iter::repeat(gv * inv).take(h * w));
                }
                acc(*x, d);
            }
            Op::Reshape { x } => acc(*x, g),
            Op::Loss { pred, target, kind } => {
                let p = val(*pred);
                let t = val(*target);
                let scale = g[0].f64() / p.len().max(1) as f64;
                let (dp, dt): (Vec<T>, Vec<T>) = match kind {
                    LossKind::L1 => p
                        .iter()
                        .zip(t)
                        .map(|(&a, &b)| {
                            let s = sign(a.f64() - b.f64()) * scale;
                            (T::lit(s), T::lit(-s))
                        })
                        .unzip(),
                    LossKind::Bce => p
                        .iter()
                        .zip(t)
                        .map(|(&a, &b)| {
                            let raw = a.f64();
                            let q = clamp_prob(raw);
                            let y = b.f64();
                            let dq = if raw == q { (q - y) / (q * (1.0 - q)) } else { 0.0 };
                            let dy = -(q.ln() - (1.0 - q).ln());
                            (T::lit(dq * scale), T::lit(dy * scale))
                        })
                        .unzip(),
                };
                if need(*pred) {
                    acc(*pred, dp);
                }
                if need(*target) {
                    acc(*target, dt);
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Element>(grads: &mut [Option<Vec<T>>], v: Var, d: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(d) {
                *e = *e + x;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
}

fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Gradients of the leaves that requested them.
#[derive(Debug)]
pub struct Gradients<T: Element = f32> {
    leaves: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of a leaf recorded with `requires_grad`, `None` for
    /// constants and intermediate values.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.leaves.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv2d_sums_ones() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let w = tape.constant(Tensor::ones(&[1, 1, 2, 2]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y), &Tensor::full(&[1, 1, 2, 2], 4.0));
    }

    #[test]
    fn zero_kernel_gives_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, -2.0, 3.0, 5.0]));
        let w = tape.constant(Tensor::zeros(&[2, 1, 1, 1]));
        let b = tape.constant(t(&[2], &[0.0, 0.5]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0, 0.0, 0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn conv2d_rejects_channel_mismatch_naming_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f32>::zeros(&[1, 2, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let err = tape.conv2d(x, w, b, 1, 1).unwrap_err().to_string();
        assert!(err.contains("[1, 2, 4, 4]") && err.contains("[1, 3, 3, 3]"), "{err}");
    }

    #[test]
    fn conv_transpose_tiles() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 2, 2]));
        let w = tape.constant(Tensor::ones(&[1, 1, 2, 2]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv_transpose2d(x, w, b, 2).unwrap();
        assert_eq!(tape.value(y), &Tensor::ones(&[1, 1, 4, 4]));

        let z = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let b2 = tape.constant(t(&[1], &[0.25]));
        let y2 = tape.conv_transpose2d(z, w, b2, 2).unwrap();
        assert_eq!(tape.value(y2), &Tensor::full(&[1, 1, 4, 4], 0.25));
    }

    #[test]
    fn maxpool_window_and_ties() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
        let y = tape.maxpool2x2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);

        let c = tape.leaf(Tensor::full(&[1, 1, 2, 4], 7.0), true);
        let yc = tape.maxpool2x2(c).unwrap();
        assert_eq!(tape.value(yc).data(), &[7.0, 7.0]);
        let s = tape.sum(yc).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(c).unwrap().data(), &[1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_rejects_odd() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f32>::zeros(&[1, 1, 3, 4]));
        assert!(tape.maxpool2x2(x).is_err());
    }

    #[test]
    fn upsample_replicates_and_sums_back() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 1, 1], 5.0), true);
        let y = tape.upsample_nearest2x(x).unwrap();
        assert_eq!(tape.value(y), &Tensor::full(&[1, 1, 2, 2], 5.0));
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn pool_after_upsample_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, -3.0, 0.5, 9.0]));
        let up = tape.upsample_nearest2x(x).unwrap();
        let down = tape.maxpool2x2(up).unwrap();
        assert_eq!(tape.value(down), tape.value(x));
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 2.0, 0.0]), true);
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 2.0, 0.0]);
        let s = tape.sum(r).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);

        let mut tape = Tape::new();
        let z = tape.leaf(t(&[1], &[0.0]), true);
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5]);
        let total = tape.sum(s).unwrap();
        let g = tape.backward(total).unwrap();
        assert_eq!(g.get(z).unwrap().data(), &[0.25]);
    }

    #[test]
    fn concat_then_slice_recovers_inputs() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_fn(&[1, 2, 4, 4], |i| i as f32));
        let b = tape.constant(Tensor::from_fn(&[1, 3, 4, 4], |i| -(i as f32)));
        let c = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.shape(c), &[1, 5, 4, 4]);
        let a2 = tape.slice_channels(c, 0, 2).unwrap();
        let b2 = tape.slice_channels(c, 2, 3).unwrap();
        assert_eq!(tape.value(a2), tape.value(a));
        assert_eq!(tape.value(b2), tape.value(b));
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::<f32>::zeros(&[1, 2, 4, 4]));
        let b = tape.constant(Tensor::zeros(&[1, 3, 2, 4]));
        assert!(matches!(tape.concat_channels(a, b), Err(TapeError::ShapeMismatch { .. })));
    }

    #[test]
    fn loss_values() {
        let mut tape = Tape::new();
        let p = tape.constant(t(&[2], &[0.5, 0.5]));
        let y = tape.constant(t(&[2], &[0.0, 1.0]));
        let l1 = tape.l1_loss(p, y).unwrap();
        assert_eq!(tape.value(l1).item().unwrap(), 0.5);
        let same = tape.l1_loss(p, p).unwrap();
        assert_eq!(tape.value(same).item().unwrap(), 0.0);
        let bce = tape.bce_loss(p, y).unwrap();
        assert!((tape.value(bce).item().unwrap() as f64 - std::f64::consts::LN_2).abs() < 1e-6);
        let bad = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.l1_loss(p, bad).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(tape.backward(x), Err(TapeError::NotScalar { .. })));
    }

    #[test]
    fn sum_grad_is_ones_and_unused_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f32), true);
        let unused = tape.leaf(Tensor::<f32>::ones(&[4]), true);
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor::ones(&[2, 3]));
        assert_eq!(g.get(unused).unwrap(), &Tensor::zeros(&[4]));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let w = tape.leaf(t(&[3], &[0.5, -1.0, 2.0]), true);
        let d = tape.detach(x);
        assert_eq!(tape.value(d), tape.value(x));
        let prod = tape.mul(d, w).unwrap();
        let s = tape.sum(prod).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0, 2.0, 3.0]);
        assert!(g.get(x).unwrap().data().iter().all(|v| v.to_bits() == 0));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1], &[f32::MAX]));
        assert!(matches!(tape.lincomb(&[(x, 10.0)]), Err(TapeError::NonFinite { .. })));
    }

    #[test]
    fn primitives_stay_finite_on_bounded_inputs() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 1, 4, 4], |i| -10.0 + 20.0 * i as f32 / 15.0));
        let s = tape.sigmoid(x).unwrap();
        let ones = tape.constant(Tensor::ones(&[1, 1, 4, 4]));
        let zeros = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
        assert!(tape.bce_loss(s, ones).is_ok());
        assert!(tape.bce_loss(s, zeros).is_ok());
    }
}
