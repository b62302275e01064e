//! Reverse-mode differentiation over a recorded tape.
//!
//! Every operation appends a node holding its output value and enough saved
//! state to apply its adjoint. Nodes are only ever created from existing
//! nodes, so the tape is already in topological order and [`Graph::backward`]
//! walks it back to front.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{matmul_acc, matmul_into, Real, Tensor};

/// Epsilon added to the channel norm in [`Graph::l2_rescale`].
pub const L2_EPS: f64 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum UpsampleMode {
    #[default]
    Nearest,
    Bilinear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub const fn new(stride: usize, pad: usize, dilation: usize) -> Self {
        ConvSpec { stride, pad, dilation }
    }

    /// Stride 1 with padding that preserves the spatial extent of a `k×k`
    /// kernel.
    pub const fn same(k: usize) -> Self {
        ConvSpec { stride: 1, pad: k / 2, dilation: 1 }
    }
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cols: Vec<T> },
    Relu { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: T },
    Upsample2x { x: Var, mode: UpsampleMode },
    MaxPool2x { x: Var, arg: Vec<u32> },
    L2Rescale { x: Var, gamma: Var, norms: Vec<T>, eps: T },
    Softmax { x: Var, group: usize },
    LogSoftmax { x: Var, group: usize },
    GroupMax { x: Var, arg: Vec<u32> },
    Slice { x: Var, start: usize },
    Crop { x: Var },
    Concat { parts: Vec<Var> },
    SmoothL1 { x: Var },
    Sum { x: Var },
}

/// A recorded computation.
///
/// Single-threaded: one graph per forward/backward pass.
pub struct Graph<T: Real> {
    values: Vec<Tensor<T>>,
    grads: Vec<Option<Vec<T>>>,
    ops: Vec<Op<T>>,
    requires: Vec<bool>,
    consumed: bool,
    checked: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            grads: Vec::new(),
            ops: Vec::new(),
            requires: Vec::new(),
            consumed: false,
            checked: false,
        }
    }

    /// In checked mode every operation verifies its output is finite.
    pub fn set_checked(&mut self, on: bool) {
        self.checked = on;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// A differentiable input (parameter or input under test).
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Gradient of the last [`Graph::backward`] call with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.values[v.0].shape().to_vec(), g.clone()))
    }

    fn push(&mut self, t: Tensor<T>, op: Op<T>, requires: bool) -> Var {
        self.values.push(t);
        self.grads.push(None);
        self.ops.push(op);
        self.requires.push(requires);
        Var(self.values.len() - 1)
    }

    fn record(&mut self, t: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.consumed {
            return Err(Error::contract("graph already consumed by backward"));
        }
        if self.checked && !t.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value produced by node {} ({})",
                self.values.len(),
                op_name(&op)
            )));
        }
        let requires = inputs.iter().any(|v| self.requires[v.0]);
        Ok(self.push(t, op, requires))
    }

    fn dims4(&self, v: Var) -> Result<(usize, usize, usize, usize)> {
        self.values[v.0].dims4()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.values[a.0].shape(), self.values[b.0].shape());
        if sa != sb {
            return Err(Error::dim(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    /// 2-D convolution. `w` is `O × C × kh × kw`; `b`, when given, has `O`
    /// entries.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let (n, c, h, wd) = self.dims4(x)?;
        let (o, wc, kh, kw) = self.dims4(w)?;
        if wc != c {
            return Err(Error::dim(format!("conv2d: input has {c} channels, kernel expects {wc}")));
        }
        if spec.stride == 0 || spec.dilation == 0 {
            return Err(Error::dim("conv2d: stride and dilation must be at least 1"));
        }
        if let Some(b) = b {
            if self.values[b.0].numel() != o {
                return Err(Error::dim(format!(
                    "conv2d: bias has {} entries, expected {o}",
                    self.values[b.0].numel()
                )));
            }
        }
        let out_h = kernels::conv_out(h, kh, spec.stride, spec.pad, spec.dilation);
        let out_w = kernels::conv_out(wd, kw, spec.stride, spec.pad, spec.dilation);
        let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
            return Err(Error::dim(format!("conv2d: {kh}×{kw} kernel does not fit {h}×{wd} input")));
        };
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: wd,
            kh,
            kw,
            stride: spec.stride,
            pad: spec.pad,
            dilation: spec.dilation,
            out_h,
            out_w,
        };
        let (k, p) = (geom.rows(), geom.cols());
        let xs = self.values[x.0].data();
        let ws = self.values[w.0].data();
        let mut out = vec![T::zero(); n * o * p];
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); n * k * p] };
        for i in 0..n {
            let img = &xs[i * c * h * wd..(i + 1) * c * h * wd];
            let y = &mut out[i * o * p..(i + 1) * o * p];
            if let Some(b) = b {
                for (row, &bv) in y.chunks_exact_mut(p).zip(self.values[b.0].data()) {
                    row.fill(bv);
                }
            }
            if geom.is_pointwise() {
                matmul_acc(o, k, p, ws, false, img, false, y);
            } else {
                let col = &mut cols[i * k * p..(i + 1) * k * p];
                kernels::im2col(&geom, img, col);
                matmul_acc(o, k, p, ws, false, col, false, y);
            }
        }
        let t = Tensor::from_parts(vec![n, o, out_h, out_w], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.record(t, Op::Conv2d { x, w, b, geom, cols }, &inputs)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let src = &self.values[x.0];
        let data = src.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let t = Tensor::from_parts(src.shape().to_vec(), data);
        self.record(t, Op::Relu { x }, &[x])
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        let data = va.data().iter().zip(vb.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_parts(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_with(a, b, |p, q| p + q);
        self.record(t, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_with(a, b, |p, q| p - q);
        self.record(t, Op::Sub { a, b }, &[a, b])
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_with(a, b, |p, q| p * q);
        self.record(t, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let src = &self.values[x.0];
        let t = Tensor::from_parts(src.shape().to_vec(), src.data().iter().map(|&v| v * factor).collect());
        self.record(t, Op::Scale { x, factor }, &[x])
    }

    /// Doubles both spatial extents.
    pub fn upsample2x(&mut self, x: Var, mode: UpsampleMode) -> Result<Var> {
        let (n, c, h, w) = self.dims4(x)?;
        let (oh, ow) = (2 * h, 2 * w);
        let src = self.values[x.0].data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        for (plane, dst) in src.chunks_exact(h * w).zip(out.chunks_exact_mut(oh * ow)) {
            match mode {
                UpsampleMode::Nearest => {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            dst[oy * ow + ox] = plane[(oy / 2) * w + ox / 2];
                        }
                    }
                }
                UpsampleMode::Bilinear => {
                    for oy in 0..oh {
                        let (y0, y1, fy) = kernels::bilinear_taps(oy, h);
                        for ox in 0..ow {
                            let (x0, x1, fx) = kernels::bilinear_taps(ox, w);
                            let (fy, fx) = (T::lit(fy), T::lit(fx));
                            let top = plane[y0 * w + x0] * (T::one() - fx) + plane[y0 * w + x1] * fx;
                            let bot = plane[y1 * w + x0] * (T::one() - fx) + plane[y1 * w + x1] * fx;
                            dst[oy * ow + ox] = top * (T::one() - fy) + bot * fy;
                        }
                    }
                }
            }
        }
        let t = Tensor::from_parts(vec![n, c, oh, ow], out);
        self.record(t, Op::Upsample2x { x, mode }, &[x])
    }

    /// 2×2 max pooling with stride 2 (odd trailing rows/columns dropped).
    pub fn maxpool2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.dims4(x)?;
        if h < 2 || w < 2 {
            return Err(Error::dim(format!("maxpool2x: input {h}×{w} is smaller than the window")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.values[x.0].data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        let mut arg = vec![0u32; n * c * oh * ow];
        for ((plane, dst), a) in src
            .chunks_exact(h * w)
            .zip(out.chunks_exact_mut(oh * ow))
            .zip(arg.chunks_exact_mut(oh * ow))
        {
            kernels::maxpool2x_plane(plane, h, w, dst, a);
        }
        let t = Tensor::from_parts(vec![n, c, oh, ow], out);
        self.record(t, Op::MaxPool2x { x, arg }, &[x])
    }

    /// Normalises the channel vector at every spatial position to unit L2
    /// norm (plus `eps`), then multiplies channel `c` by `gamma[c]`.
    pub fn l2_rescale(&mut self, x: Var, gamma: Var, eps: T) -> Result<Var> {
        let (n, c, h, w) = self.dims4(x)?;
        if self.values[gamma.0].numel() != c {
            return Err(Error::dim(format!(
                "l2_rescale: gamma has {} entries for {c} channels",
                self.values[gamma.0].numel()
            )));
        }
        let hw = h * w;
        let src = self.values[x.0].data();
        let g = self.values[gamma.0].data();
        let mut norms = vec![T::zero(); n * hw];
        let mut out = vec![T::zero(); src.len()];
        for i in 0..n {
            let base = i * c * hw;
            for p in 0..hw {
                let sq: T = (0..c).map(|ch| src[base + ch * hw + p].powi(2)).sum();
                let norm = sq.sqrt() + eps;
                norms[i * hw + p] = norm;
                for ch in 0..c {
                    out[base + ch * hw + p] = g[ch] * src[base + ch * hw + p] / norm;
                }
            }
        }
        let t = Tensor::from_parts(vec![n, c, h, w], out);
        self.record(t, Op::L2Rescale { x, gamma, norms, eps }, &[x, gamma])
    }

    fn check_group(&self, x: Var, group: usize) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = self.dims4(x)?;
        if group == 0 || c % group != 0 {
            return Err(Error::dim(format!("channel group of {group} does not divide {c} channels")));
        }
        Ok((n, c, h * w))
    }

    /// Softmax across each consecutive run of `group` channels.
    pub fn softmax_channels(&mut self, x: Var, group: usize) -> Result<Var> {
        let (n, c, hw) = self.check_group(x, group)?;
        let out = grouped_softmax(self.values[x.0].data(), n, c, hw, group, false);
        let t = Tensor::from_parts(self.values[x.0].shape().to_vec(), out);
        self.record(t, Op::Softmax { x, group }, &[x])
    }

    /// Log-softmax across each consecutive run of `group` channels.
    pub fn log_softmax_channels(&mut self, x: Var, group: usize) -> Result<Var> {
        let (n, c, hw) = self.check_group(x, group)?;
        let out = grouped_softmax(self.values[x.0].data(), n, c, hw, group, true);
        let t = Tensor::from_parts(self.values[x.0].shape().to_vec(), out);
        self.record(t, Op::LogSoftmax { x, group }, &[x])
    }

    /// Per-position maximum over channels `start..start + len`; the result has
    /// a single channel. Gradient flows only to the winning channel (lowest
    /// index on ties).
    pub fn channel_group_max(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.dims4(x)?;
        if len == 0 || start + len > c {
            return Err(Error::dim(format!(
                "channel group {start}..{} invalid for {c} channels",
                start + len
            )));
        }
        let hw = h * w;
        let src = self.values[x.0].data();
        let mut out = vec![T::zero(); n * hw];
        let mut arg = vec![0u32; n * hw];
        for i in 0..n {
            for p in 0..hw {
                let mut best = start;
                for ch in start + 1..start + len {
                    if src[(i * c + ch) * hw + p] > src[(i * c + best) * hw + p] {
                        best = ch;
                    }
                }
                out[i * hw + p] = src[(i * c + best) * hw + p];
                arg[i * hw + p] = best as u32;
            }
        }
        let t = Tensor::from_parts(vec![n, 1, h, w], out);
        self.record(t, Op::GroupMax { x, arg }, &[x])
    }

    /// Top-left `h × w` window of every plane.
    pub fn crop_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (n, c, ih, iw) = self.dims4(x)?;
        if h == 0 || w == 0 || h > ih || w > iw {
            return Err(Error::dim(format!("crop {h}×{w} invalid for {ih}×{iw} planes")));
        }
        let src = self.values[x.0].data();
        let mut out = Vec::with_capacity(n * c * h * w);
        for p in 0..n * c {
            for r in 0..h {
                let base = (p * ih + r) * iw;
                out.extend_from_slice(&src[base..base + w]);
            }
        }
        let t = Tensor::from_parts(vec![n, c, h, w], out);
        self.record(t, Op::Crop { x }, &[x])
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = self.dims4(x)?;
        if len == 0 || start + len > c {
            return Err(Error::dim(format!("channel slice {start}..{} invalid for {c} channels", start + len)));
        }
        let hw = h * w;
        let src = self.values[x.0].data();
        let mut out = Vec::with_capacity(n * len * hw);
        for i in 0..n {
            out.extend_from_slice(&src[(i * c + start) * hw..(i * c + start + len) * hw]);
        }
        let t = Tensor::from_parts(vec![n, len, h, w], out);
        self.record(t, Op::Slice { x, start }, &[x])
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat of zero tensors"));
        };
        let (n, _, h, w) = self.dims4(first)?;
        let mut total = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.dims4(p)?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::dim(format!(
                    "concat: {pn}×{ph}×{pw} does not match {n}×{h}×{w}"
                )));
            }
            total += pc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total * hw);
        for i in 0..n {
            for &p in parts {
                let pc = self.values[p.0].shape()[1];
                out.extend_from_slice(&self.values[p.0].data()[i * pc * hw..(i + 1) * pc * hw]);
            }
        }
        let t = Tensor::from_parts(vec![n, total, h, w], out);
        self.record(t, Op::Concat { parts: parts.to_vec() }, parts)
    }

    /// Element-wise smooth-L1: `0.5·d²` for `|d| < 1`, `|d| − 0.5` otherwise.
    pub fn smooth_l1(&mut self, x: Var) -> Result<Var> {
        let src = &self.values[x.0];
        let data = src.data().iter().map(|&d| smooth_l1(d)).collect();
        let t = Tensor::from_parts(src.shape().to_vec(), data);
        self.record(t, Op::SmoothL1 { x }, &[x])
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.values[x.0].sum());
        self.record(t, Op::Sum { x }, &[x])
    }

    /// Populates gradients for every differentiable leaf reachable from
    /// `loss`. Intermediate adjoints are released as soon as they have been
    /// propagated, and the tape is consumed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::contract("backward called twice on the same graph"));
        }
        if self.values[loss.0].numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        self.consumed = true;
        for g in self.grads.iter_mut() {
            *g = None;
        }
        if !self.requires[loss.0] {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let op = core::mem::replace(&mut self.ops[i], Op::Leaf);
            if matches!(op, Op::Leaf) {
                continue;
            }
            let Some(dy) = self.grads[i].take() else { continue };
            self.apply_adjoint(i, op, &dy);
        }
        self.ops.clear();
        Ok(())
    }

    fn acc(&mut self, v: Var) -> Option<&mut [T]> {
        if !self.requires[v.0] {
            return None;
        }
        let n = self.values[v.0].numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]).as_mut_slice())
    }

    fn apply_adjoint(&mut self, node: usize, op: Op<T>, dy: &[T]) {
        match op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom, cols } => self.conv_adjoint(x, w, b, &geom, &cols, dy),
            Op::Relu { x } => {
                let mask: Vec<bool> = self.values[x.0].data().iter().map(|&v| v > T::zero()).collect();
                if let Some(g) = self.acc(x) {
                    for ((gi, &d), m) in g.iter_mut().zip(dy).zip(mask) {
                        if m {
                            *gi += d;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(g) = self.acc(v) {
                        g.iter_mut().zip(dy).for_each(|(gi, &d)| *gi += d);
                    }
                }
            }
            Op::Sub { a, b } => {
                if let Some(g) = self.acc(a) {
                    g.iter_mut().zip(dy).for_each(|(gi, &d)| *gi += d);
                }
                if let Some(g) = self.acc(b) {
                    g.iter_mut().zip(dy).for_each(|(gi, &d)| *gi -= d);
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.values[a.0].data().to_vec(), self.values[b.0].data().to_vec());
                if let Some(g) = self.acc(a) {
                    for ((gi, &d), &q) in g.iter_mut().zip(dy).zip(&vb) {
                        *gi += d * q;
                    }
                }
                if let Some(g) = self.acc(b) {
                    for ((gi, &d), &p) in g.iter_mut().zip(dy).zip(&va) {
                        *gi += d * p;
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(g) = self.acc(x) {
                    g.iter_mut().zip(dy).for_each(|(gi, &d)| *gi += d * factor);
                }
            }
            Op::Upsample2x { x, mode } => {
                let (_, _, h, w) = self.values[x.0].dims4().expect("rank checked in forward");
                let (oh, ow) = (2 * h, 2 * w);
                if let Some(g) = self.acc(x) {
                    for (gp, dp) in g.chunks_exact_mut(h * w).zip(dy.chunks_exact(oh * ow)) {
                        match mode {
                            UpsampleMode::Nearest => {
                                for oy in 0..oh {
                                    for ox in 0..ow {
                                        gp[(oy / 2) * w + ox / 2] += dp[oy * ow + ox];
                                    }
                                }
                            }
                            UpsampleMode::Bilinear => {
                                for oy in 0..oh {
                                    let (y0, y1, fy) = kernels::bilinear_taps(oy, h);
                                    for ox in 0..ow {
                                        let (x0, x1, fx) = kernels::bilinear_taps(ox, w);
                                        let (fy, fx) = (T::lit(fy), T::lit(fx));
                                        let d = dp[oy * ow + ox];
                                        gp[y0 * w + x0] += d * (T::one() - fy) * (T::one() - fx);
                                        gp[y0 * w + x1] += d * (T::one() - fy) * fx;
                                        gp[y1 * w + x0] += d * fy * (T::one() - fx);
                                        gp[y1 * w + x1] += d * fy * fx;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::MaxPool2x { x, arg } => {
                let (_, _, h, w) = self.values[x.0].dims4().expect("rank checked in forward");
                let out_plane = (h / 2) * (w / 2);
                if let Some(g) = self.acc(x) {
                    for ((gp, dp), ap) in
                        g.chunks_exact_mut(h * w).zip(dy.chunks_exact(out_plane)).zip(arg.chunks_exact(out_plane))
                    {
                        for (&d, &a) in dp.iter().zip(ap) {
                            gp[a as usize] += d;
                        }
                    }
                }
            }
            Op::L2Rescale { x, gamma, norms, eps } => {
                let (n, c, h, w) = self.values[x.0].dims4().expect("rank checked in forward");
                let hw = h * w;
                let xs = self.values[x.0].data().to_vec();
                let gs = self.values[gamma.0].data().to_vec();
                if let Some(gg) = self.acc(gamma) {
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * hw;
                            let mut s = T::zero();
                            for p in 0..hw {
                                s += dy[base + p] * xs[base + p] / norms[i * hw + p];
                            }
                            gg[ch] += s;
                        }
                    }
                }
                if let Some(gx) = self.acc(x) {
                    for i in 0..n {
                        for p in 0..hw {
                            let norm = norms[i * hw + p];
                            let raw = norm - eps;
                            let mut dot = T::zero();
                            for ch in 0..c {
                                let idx = (i * c + ch) * hw + p;
                                dot += gs[ch] * dy[idx] * xs[idx];
                            }
                            let coeff = if raw > T::zero() { dot / (norm * norm * raw) } else { T::zero() };
                            for ch in 0..c {
                                let idx = (i * c + ch) * hw + p;
                                gx[idx] += gs[ch] * dy[idx] / norm - coeff * xs[idx];
                            }
                        }
                    }
                }
            }
            Op::Softmax { x, group } => {
                let (n, c, h, w) = self.values[x.0].dims4().expect("rank checked in forward");
                let y = self.values[node].data().to_vec();
                let hw = h * w;
                if let Some(g) = self.acc(x) {
                    for i in 0..n {
                        for g0 in (0..c).step_by(group) {
                            for p in 0..hw {
                                let idx = |ch: usize| (i * c + ch) * hw + p;
                                let dot: T = (g0..g0 + group).map(|ch| y[idx(ch)] * dy[idx(ch)]).sum();
                                for ch in g0..g0 + group {
                                    g[idx(ch)] += y[idx(ch)] * (dy[idx(ch)] - dot);
                                }
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax { x, group } => {
                let (n, c, h, w) = self.values[x.0].dims4().expect("rank checked in forward");
                let y = self.values[node].data().to_vec();
                let hw = h * w;
                if let Some(g) = self.acc(x) {
                    for i in 0..n {
                        for g0 in (0..c).step_by(group) {
                            for p in 0..hw {
                                let idx = |ch: usize| (i * c + ch) * hw + p;
                                let total: T = (g0..g0 + group).map(|ch| dy[idx(ch)]).sum();
                                for ch in g0..g0 + group {
                                    g[idx(ch)] += dy[idx(ch)] - y[idx(ch)].exp() * total;
                                }
                            }
                        }
                    }
                }
            }
            Op::GroupMax { x, arg } => {
                let (_, c, h, w) = self.values[x.0].dims4().expect("rank checked in forward");
                let hw = h * w;
                if let Some(g) = self.acc(x) {
                    for (j, (&d, &a)) in dy.iter().zip(&arg).enumerate() {
                        let (i, p) = (j / hw, j % hw);
                        g[(i * c + a as usize) * hw + p] += d;
                    }
                }
            }
            Op::Slice { x, start } => {
                let (n, c, h, w) = self.values[x.0].dims4().expect("rank checked in forward");
                let len = self.values[node].shape()[1];
                let hw = h * w;
                if let Some(g) = self.acc(x) {
                    for i in 0..n {
                        let dst = &mut g[(i * c + start) * hw..(i * c + start + len) * hw];
                        let src = &dy[i * len * hw..(i + 1) * len * hw];
                        dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::Crop { x } => {
                let (n, c, ih, iw) = self.values[x.0].dims4().expect("rank checked in forward");
                let (_, _, h, w) = self.values[node].dims4().expect("rank checked in forward");
                if let Some(g) = self.acc(x) {
                    for p in 0..n * c {
                        for r in 0..h {
                            let dst = &mut g[(p * ih + r) * iw..(p * ih + r) * iw + w];
                            let src = &dy[(p * h + r) * w..(p * h + r + 1) * w];
                            dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                        }
                    }
                }
            }
            Op::Concat { parts } => {
                let (n, total, h, w) = self.values[node].dims4().expect("rank checked in forward");
                let hw = h * w;
                let mut offset = 0;
                for p in parts {
                    let pc = self.values[p.0].shape()[1];
                    if let Some(g) = self.acc(p) {
                        for i in 0..n {
                            let src = &dy[(i * total + offset) * hw..(i * total + offset + pc) * hw];
                            let dst = &mut g[i * pc * hw..(i + 1) * pc * hw];
                            dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                        }
                    }
                    offset += pc;
                }
            }
            Op::SmoothL1 { x } => {
                let xs = self.values[x.0].data().to_vec();
                if let Some(g) = self.acc(x) {
                    for ((gi, &d), &v) in g.iter_mut().zip(dy).zip(&xs) {
                        *gi += d * smooth_l1_grad(v);
                    }
                }
            }
            Op::Sum { x } => {
                let d = dy[0];
                if let Some(g) = self.acc(x) {
                    g.iter_mut().for_each(|gi| *gi += d);
                }
            }
        }
    }

    fn conv_adjoint(&mut self, x: Var, w: Var, b: Option<Var>, geom: &ConvGeom, cols: &[T], dy: &[T]) {
        let (n, c, h, wd) = self.values[x.0].dims4().expect("rank checked in forward");
        let o = self.values[w.0].shape()[0];
        let (k, p) = (geom.rows(), geom.cols());
        if let Some(b) = b {
            if let Some(gb) = self.acc(b) {
                for i in 0..n {
                    for (ch, row) in dy[i * o * p..(i + 1) * o * p].chunks_exact(p).enumerate() {
                        gb[ch] += row.iter().copied().sum::<T>();
                    }
                }
            }
        }
        if self.requires[w.0] {
            let xs = self.values[x.0].data();
            let nw = self.values[w.0].numel();
            let gw = self.grads[w.0].get_or_insert_with(|| vec![T::zero(); nw]);
            for i in 0..n {
                let dyi = &dy[i * o * p..(i + 1) * o * p];
                let col = if geom.is_pointwise() {
                    &xs[i * c * h * wd..(i + 1) * c * h * wd]
                } else {
                    &cols[i * k * p..(i + 1) * k * p]
                };
                // dW (o×k) += dY (o×p) · colsᵀ (p×k)
                matmul_acc(o, p, k, dyi, false, col, true, gw.as_mut_slice());
            }
        }
        if self.requires[x.0] {
            let ws = self.values[w.0].data();
            let nx = self.values[x.0].numel();
            let gx = self.grads[x.0].get_or_insert_with(|| vec![T::zero(); nx]);
            let mut dcol = vec![T::zero(); k * p];
            for i in 0..n {
                let dyi = &dy[i * o * p..(i + 1) * o * p];
                let gxi = &mut gx[i * c * h * wd..(i + 1) * c * h * wd];
                if geom.is_pointwise() {
                    matmul_acc(k, o, p, ws, true, dyi, false, gxi);
                } else {
                    matmul_into(k, o, p, ws, true, dyi, false, &mut dcol);
                    kernels::col2im_acc(geom, &dcol, gxi);
                }
            }
        }
    }
}

fn grouped_softmax<T: Real>(src: &[T], n: usize, c: usize, hw: usize, group: usize, log: bool) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for i in 0..n {
        for g0 in (0..c).step_by(group) {
            for p in 0..hw {
                let idx = |ch: usize| (i * c + ch) * hw + p;
                let m = (g0..g0 + group).map(|ch| src[idx(ch)]).fold(T::neg_infinity(), T::max);
                let z: T = (g0..g0 + group).map(|ch| (src[idx(ch)] - m).exp()).sum();
                let lz = z.ln();
                for ch in g0..g0 + group {
                    let v = src[idx(ch)] - m - lz;
                    out[idx(ch)] = if log { v } else { v.exp() };
                }
            }
        }
    }
    out
}

/// `0.5·d²` for `|d| < 1`, `|d| − 0.5` otherwise.
pub fn smooth_l1<T: Real>(d: T) -> T {
    let a = d.abs();
    if a < T::one() {
        T::lit(0.5) * d * d
    } else {
        a - T::lit(0.5)
    }
}

/// Derivative of [`smooth_l1`]; at `|d| = 1` both branches agree on `±1`.
pub fn smooth_l1_grad<T: Real>(d: T) -> T {
    if d.abs() < T::one() {
        d
    } else {
        d.signum()
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Conv2d { .. } => "conv2d",
        Op::Relu { .. } => "relu",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::Scale { .. } => "scale",
        Op::Upsample2x { .. } => "upsample2x",
        Op::MaxPool2x { .. } => "maxpool2x",
        Op::L2Rescale { .. } => "l2_rescale",
        Op::Softmax { .. } => "softmax_channels",
        Op::LogSoftmax { .. } => "log_softmax_channels",
        Op::GroupMax { .. } => "channel_group_max",
        Op::Slice { .. } => "slice_channels",
        Op::Crop { .. } => "crop_spatial",
        Op::Concat { .. } => "concat_channels",
        Op::SmoothL1 { .. } => "smooth_l1",
        Op::Sum { .. } => "sum",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_scales_with_pointwise_kernel() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = g.constant(t(&[1, 1, 1, 1], &[2.0]));
        let b = g.constant(t(&[1], &[0.0]));
        let y = g.conv2d(x, w, Some(b), ConvSpec::new(1, 0, 1)).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 3, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_same_padding_keeps_extent() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 4, 4], 1.0));
        let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, w, None, ConvSpec::same(3)).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 4, 4]);
        // corner sees a 2×2 window, centre a full 3×3
        assert_eq!(g.value(y).at4(0, 0, 0, 0), 4.0);
        assert_eq!(g.value(y).at4(0, 0, 1, 1), 9.0);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let err = g.conv2d(x, w, None, ConvSpec::same(3)).unwrap_err();
        assert!(matches!(err, Error::Dimension(ref m) if m.contains("2 channels")));
    }

    #[test]
    fn identity_pointwise_conv_is_identity() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..2 * 3 * 4 * 5).map(|i| (i as f64).sin()).collect();
        let x = g.constant(t(&[2, 3, 4, 5], &data));
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let w = g.constant(t(&[3, 3, 1, 1], &eye));
        let b = g.constant(Tensor::zeros(&[3]));
        let y = g.conv2d(x, w, Some(b), ConvSpec::new(1, 0, 1)).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn group_max_routes_gradient_to_argmax() {
        let mut g = Graph::new();
        let x = g.param(t(&[1, 5, 1, 1], &[5.0, 0.2, 0.9, 0.4, 7.0]));
        let m = g.channel_group_max(x, 1, 3).unwrap();
        assert_eq!(g.value(m).data(), &[0.9]);
        let s = g.sum(m).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn group_max_rejects_bad_groups() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 4, 1, 1]));
        assert!(g.channel_group_max(x, 0, 0).is_err());
        assert!(g.channel_group_max(x, 2, 3).is_err());
    }

    #[test]
    fn l2_rescale_three_four_five() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2, 1, 1], &[3.0, 4.0]));
        let gamma = g.constant(t(&[2], &[1.0, 1.0]));
        let y = g.l2_rescale(x, gamma, 0.0).unwrap();
        assert_eq!(g.value(y).data(), &[0.6, 0.8]);
    }

    #[test]
    fn nearest_upsample_repeats_blocks() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.upsample2x(x, UpsampleMode::Nearest).unwrap();
        #[rustfmt::skip]
        let expect = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(g.value(y).data(), &expect);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[2, 2], 0.5));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn relu_subgradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[-1.0, 2.0]));
        let r = g.relu(x).unwrap();
        let s = g.sum(r).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar_and_consumes() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[2, 2], 1.0));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Contract(_))));
        assert!(g.relu(x).is_err());
    }

    #[test]
    fn shared_input_accumulates() {
        let mut g = Graph::new();
        let x = g.param(t(&[1], &[3.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn smooth_l1_values_and_slopes() {
        assert_eq!(smooth_l1(0.0f64), 0.0);
        assert_eq!(smooth_l1(1.0f64), 0.5);
        assert_eq!(smooth_l1(0.999_999_999f64) - 0.5 < 1e-8, true);
        assert_eq!(smooth_l1_grad(2.0f64), 1.0);
        assert_eq!(smooth_l1_grad(0.4f64), 0.4);
        assert_eq!(smooth_l1_grad(-3.0f64), -1.0);
    }

    #[test]
    fn checked_mode_flags_non_finite() {
        let mut g = Graph::new();
        g.set_checked(true);
        let x = g.constant(t(&[1], &[f64::INFINITY]));
        let err = g.scale(x, 0.0).unwrap_err();
        assert!(matches!(err, Error::Numeric(ref m) if m.contains("scale")));
    }

    #[test]
    fn softmax_pairs_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 4, 1, 2], &[0.0, 1.0, 2.0, -1.0, 3.0, 3.0, 0.5, 0.25]));
        let y = g.softmax_channels(x, 2).unwrap();
        let v = g.value(y);
        for p in 0..2 {
            for g0 in [0, 2] {
                let s = v.at4(0, g0, 0, p) + v.at4(0, g0 + 1, 0, p);
                assert!((s - 1.0).abs() < 1e-15);
            }
        }
        assert!(g.softmax_channels(x, 3).is_err());
    }
}
