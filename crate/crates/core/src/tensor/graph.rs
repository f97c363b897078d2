use std::collections::HashMap;
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::{gemm, ParamGrads, ParamId, ParamStore, Real, Tensor};
use crate::error::{DvpError, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    MulScalar(Var, Var),
    AddScalar(Var, Var),
    MulSamples(Var, Var),
    /// Keeps `sigmoid(x)` for the backward pass.
    Silu(Var, Vec<T>),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Sigmoid(Var),
    Square(Var),
    Clamp(Var, T, T),
    Sum(Var),
    Mean(Var),
    SumPerSample(Var),
    Matmul(Var, Var),
    Conv2d(Var, Var, ConvGeom),
    AddChannelBias(Var, Var),
    AddSampleChannel(Var, Var),
    AvgPool(Var, usize),
    Upsample(Var, usize),
    Concat(Vec<Var>),
    SliceChannels(Var, usize),
    BroadcastBatch(Var),
    Sandwich(Var, Rc<Tensor<T>>, Rc<Tensor<T>>),
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of operations recorded during one forward pass.
///
/// Nodes are appended in evaluation order, so the tape is already a
/// topological order and [`Graph::backward`] simply walks it in reverse.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    grads: HashMap<usize, Tensor<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims4(op: &'static str, s: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *s {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(DvpError::dim(op, format!("expected NCHW tensor, got {s:?}"))),
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grads: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input that takes no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input that accumulates a gradient on [`Graph::backward`].
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).tensor.clone());
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node, widened to f64.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item().as_f64()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v.0)
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    /// Gradients of every parameter of `store`, zeros for those not reached.
    pub fn param_grads(&self, store: &ParamStore<T>) -> ParamGrads<T> {
        let mut out = ParamGrads::zeros_like(store);
        for (&id, &v) in &self.params {
            if let Some(g) = self.grads.get(&v.0) {
                out.grads[id.0] = g.clone();
            }
        }
        out
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(DvpError::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn scalar_operand(&self, op: &'static str, s: Var) -> Result<T> {
        if self.value(s).len() != 1 {
            return Err(DvpError::dim(
                op,
                format!("expected one-element operand, got {:?}", self.shape(s)),
            ));
        }
        Ok(self.value(s).item())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// Multiply by a fixed constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    /// Add a fixed constant.
    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        self.unary(a, |x| x + c, Op::AddConst(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `x * s` for a one-element `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.scalar_operand("mul_scalar", s)?;
        let t = self.value(x).map(|v| v * sv);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(t, Op::MulScalar(x, s), rg))
    }

    /// `x + s` for a one-element `s`.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.scalar_operand("add_scalar", s)?;
        let t = self.value(x).map(|v| v + sv);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(t, Op::AddScalar(x, s), rg))
    }

    /// Row-wise scaling: `out[n, ..] = x[n, ..] * s[n]`.
    pub fn mul_samples(&mut self, x: Var, s: Var) -> Result<Var> {
        let xs = self.shape(x);
        let n = *xs.first().ok_or_else(|| DvpError::dim("mul_samples", "scalar x"))?;
        if self.shape(s) != [n] {
            return Err(DvpError::dim(
                "mul_samples",
                format!("x {xs:?} with scales {:?}", self.shape(s)),
            ));
        }
        let inner = self.value(x).len() / n.max(1);
        let sv = self.value(s).data().to_vec();
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sv[i / inner])
            .collect();
        let t = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(t, Op::MulSamples(x, s), rg))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let sg: Vec<T> = va.data().iter().map(|&x| sigmoid(x)).collect();
        let data = va.data().iter().zip(&sg).map(|(&x, &s)| x * s).collect();
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(a);
        self.push(t, Op::Silu(a, sg), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), Op::Log(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the range.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::from_f64(lo), T::from_f64(hi));
        self.unary(a, |x| x.max(lo).min(hi), Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(t, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::scalar(v.sum() / T::from_f64(v.len().max(1) as f64));
        let rg = self.rg(a);
        self.push(t, Op::Mean(a), rg)
    }

    /// Reduce every axis but the leading one: `[N, ..] -> [N]`.
    pub fn sum_per_sample(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let n = *v
            .shape()
            .first()
            .ok_or_else(|| DvpError::dim("sum_per_sample", "scalar input"))?;
        let inner = if n == 0 { 0 } else { v.len() / n };
        let data = (0..n)
            .map(|i| v.data()[i * inner..(i + 1) * inner].iter().copied().sum())
            .collect();
        let t = Tensor::from_parts(vec![n], data);
        let rg = self.rg(a);
        Ok(self.push(t, Op::SumPerSample(a), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, k2, n) = match (self.shape(a), self.shape(b)) {
            (&[m, k], &[k2, n]) => (m, k, k2, n),
            (sa, sb) => {
                return Err(DvpError::dim(
                    "matmul",
                    format!("expected 2-D operands, got {sa:?} and {sb:?}"),
                ))
            }
        };
        if k != k2 {
            return Err(DvpError::dim("matmul", format!("inner extents {k} vs {k2}")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::Matmul(a, b), rg))
    }

    /// "Same" cross-correlation with zero padding. `x` is `[c_in, h, w]` or
    /// `[n, c_in, h, w]`, `k` is `[c_out, c_in, kh, kw]` with odd kernel sides.
    pub fn conv2d(&mut self, x: Var, k: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (n, c_in, h, w, batched) = match xs[..] {
            [c, h, w] => (1, c, h, w, false),
            [n, c, h, w] => (n, c, h, w, true),
            _ => return Err(DvpError::dim("conv2d", format!("input shape {xs:?}"))),
        };
        let (c_out, kc, kh, kw) = dims4("conv2d", self.shape(k))?;
        if kc != c_in {
            return Err(DvpError::dim(
                "conv2d",
                format!("kernel expects {kc} input channels, input has {c_in}"),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(DvpError::dim("conv2d", format!("kernel {kh}x{kw} is not odd")));
        }
        let geom = ConvGeom {
            n,
            c_in,
            c_out,
            h,
            w,
            kh,
            kw,
        };
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(k).data(), &geom);
        let shape = if batched {
            vec![n, c_out, h, w]
        } else {
            vec![c_out, h, w]
        };
        let rg = self.rg(x) || self.rg(k);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Conv2d(x, k, geom), rg))
    }

    /// `x[:, c, ..] + b[c]` for `x` of shape `[N, C, ..]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || self.shape(b) != [xs[1]] {
            return Err(DvpError::dim(
                "add_channel_bias",
                format!("x {xs:?} with bias {:?}", self.shape(b)),
            ));
        }
        let c = xs[1];
        let inner: usize = xs[2..].iter().product();
        let bv = self.value(b).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for (j, chunk) in data.chunks_mut(inner.max(1)).enumerate() {
            let bias = bv[j % c];
            chunk.iter_mut().for_each(|v| *v += bias);
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Tensor::from_parts(xs, data), Op::AddChannelBias(x, b), rg))
    }

    /// `x[n, c, ..] + b[n, c]`.
    pub fn add_sample_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || self.shape(b) != [xs[0], xs[1]] {
            return Err(DvpError::dim(
                "add_sample_channel",
                format!("x {xs:?} with bias {:?}", self.shape(b)),
            ));
        }
        let inner: usize = xs[2..].iter().product();
        let bv = self.value(b).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for (j, chunk) in data.chunks_mut(inner.max(1)).enumerate() {
            let bias = bv[j];
            chunk.iter_mut().for_each(|v| *v += bias);
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Tensor::from_parts(xs, data), Op::AddSampleChannel(x, b), rg))
    }

    /// Non-overlapping `s x s` average pooling over the two trailing axes.
    pub fn avg_pool2d(&mut self, x: Var, s: usize) -> Result<Var> {
        let (n, c, h, w) = dims4("avg_pool2d", self.shape(x))?;
        if s == 0 || h % s != 0 || w % s != 0 {
            return Err(DvpError::dim("avg_pool2d", format!("{h}x{w} not divisible by {s}")));
        }
        let out = kernels::avg_pool_forward(self.value(x).data(), n * c, h, w, s);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![n, c, h / s, w / s], out),
            Op::AvgPool(x, s),
            rg,
        ))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, s: usize) -> Result<Var> {
        let (n, c, h, w) = dims4("upsample_nearest", self.shape(x))?;
        if s == 0 {
            return Err(DvpError::dim("upsample_nearest", "factor 0"));
        }
        let out = kernels::upsample_forward(self.value(x).data(), n * c, h, w, s);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![n, c, h * s, w * s], out),
            Op::Upsample(x, s),
            rg,
        ))
    }

    /// Concatenate NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| DvpError::dim("concat_channels", "no inputs"))?;
        let (n, _, h, w) = dims4("concat_channels", self.shape(*first))?;
        let mut c_total = 0;
        for &v in xs {
            let (vn, vc, vh, vw) = dims4("concat_channels", self.shape(v))?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(DvpError::dim(
                    "concat_channels",
                    format!("{:?} vs {:?}", self.shape(v), self.shape(*first)),
                ));
            }
            c_total += vc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * c_total * hw);
        for s in 0..n {
            for &v in xs {
                let c = self.shape(v)[1];
                out.extend_from_slice(&self.value(v).data()[s * c * hw..(s + 1) * c * hw]);
            }
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::from_parts(vec![n, c_total, h, w], out),
            Op::Concat(xs.to_vec()),
            rg,
        ))
    }

    /// Channels `start..start + len` of an NCHW tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, h, w) = dims4("slice_channels", self.shape(x))?;
        if start + len > c {
            return Err(DvpError::dim(
                "slice_channels",
                format!("{start}..{} of {c} channels", start + len),
            ));
        }
        let hw = h * w;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * hw);
        for s in 0..n {
            out.extend_from_slice(&src[(s * c + start) * hw..(s * c + start + len) * hw]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![n, len, h, w], out),
            Op::SliceChannels(x, start),
            rg,
        ))
    }

    /// Repeat a tensor `n` times along a new leading axis.
    pub fn broadcast_batch(&mut self, x: Var, n: usize) -> Var {
        let v = self.value(x);
        let mut data = Vec::with_capacity(v.len() * n);
        for _ in 0..n {
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![n];
        shape.extend_from_slice(v.shape());
        let rg = self.rg(x);
        self.push(Tensor::from_parts(shape, data), Op::BroadcastBatch(x), rg)
    }

    /// Per `h x w` plane: `left * plane * right`, with `left: [oh, h]` and
    /// `right: [w, ow]` fixed matrices.
    pub fn sandwich(&mut self, x: Var, left: Rc<Tensor<T>>, right: Rc<Tensor<T>>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(DvpError::dim("sandwich", format!("input {xs:?}")));
        }
        let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let (oh, lh, rw, ow) = match (left.shape(), right.shape()) {
            (&[oh, lh], &[rw, ow]) => (oh, lh, rw, ow),
            _ => return Err(DvpError::dim("sandwich", "factors must be matrices")),
        };
        if lh != h || rw != w {
            return Err(DvpError::dim(
                "sandwich",
                format!("plane {h}x{w} with factors {:?} and {:?}", left.shape(), right.shape()),
            ));
        }
        let planes = self.value(x).len() / (h * w).max(1);
        let out = kernels::sandwich_forward(
            self.value(x).data(),
            planes,
            (h, w),
            left.data(),
            right.data(),
            (oh, ow),
        );
        let mut shape = xs;
        let r = shape.len();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Sandwich(x, left, right), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Reverse sweep from a one-element root. Gradients of leaves accumulate
    /// across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(DvpError::usage(format!(
                "backward from non-scalar root of shape {:?}",
                self.shape(root)
            )));
        }
        let mut cot: Vec<Option<Vec<T>>> = vec![None; root.0 + 1];
        cot[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = cot[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match self.grads.get_mut(&i) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(&g) {
                            *a += *b;
                        }
                    }
                    None => {
                        let t = Tensor::from_parts(node.value.shape().to_vec(), g);
                        self.grads.insert(i, t);
                    }
                }
                continue;
            }
            self.backprop_node(i, &g, &mut cot);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], cot: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let out = nodes[i].value.data();
        // Accumulate into the cotangent slot of `v` if it needs a gradient.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = cot[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
            f(slot);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for ((s, &g), &y) in s.iter_mut().zip(g).zip(vb) {
                        *s += g * y;
                    }
                });
                acc(*b, &mut |s| {
                    for ((s, &g), &x) in s.iter_mut().zip(g).zip(va) {
                        *s += g * x;
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g * *c));
            }
            Op::AddConst(a) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g));
            }
            Op::MulScalar(x, sc) => {
                let sv = val(*sc)[0];
                let vx = val(*x);
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g * sv));
                acc(*sc, &mut |s| {
                    s[0] += g.iter().zip(vx).map(|(&g, &x)| g * x).sum::<T>();
                });
            }
            Op::AddScalar(x, sc) => {
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g));
                acc(*sc, &mut |s| s[0] += g.iter().copied().sum::<T>());
            }
            Op::MulSamples(x, sc) => {
                let sv = val(*sc);
                let vx = val(*x);
                let inner = vx.len() / sv.len().max(1);
                acc(*x, &mut |s| {
                    for (j, (s, &g)) in s.iter_mut().zip(g).enumerate() {
                        *s += g * sv[j / inner];
                    }
                });
                acc(*sc, &mut |s| {
                    for (j, (&g, &x)) in g.iter().zip(vx).enumerate() {
                        s[j / inner] += g * x;
                    }
                });
            }
            Op::Silu(a, sg) => {
                let va = val(*a);
                acc(*a, &mut |s| {
                    for (((s, &g), &x), &sg) in s.iter_mut().zip(g).zip(va).zip(sg) {
                        *s += g * sg * (T::one() + x * (T::one() - sg));
                    }
                });
            }
            Op::Exp(a) => {
                acc(*a, &mut |s| {
                    for ((s, &g), &y) in s.iter_mut().zip(g).zip(out) {
                        *s += g * y;
                    }
                });
            }
            Op::Log(a) => {
                let va = val(*a);
                acc(*a, &mut |s| {
                    for ((s, &g), &x) in s.iter_mut().zip(g).zip(va) {
                        *s += g / x;
                    }
                });
            }
            Op::Softplus(a) => {
                let va = val(*a);
                acc(*a, &mut |s| {
                    for ((s, &g), &x) in s.iter_mut().zip(g).zip(va) {
                        *s += g * sigmoid(x);
                    }
                });
            }
            Op::Sigmoid(a) => {
                acc(*a, &mut |s| {
                    for ((s, &g), &y) in s.iter_mut().zip(g).zip(out) {
                        *s += g * y * (T::one() - y);
                    }
                });
            }
            Op::Square(a) => {
                let va = val(*a);
                let two = T::from_f64(2.0);
                acc(*a, &mut |s| {
                    for ((s, &g), &x) in s.iter_mut().zip(g).zip(va) {
                        *s += g * two * x;
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let va = val(*a);
                acc(*a, &mut |s| {
                    for ((s, &g), &x) in s.iter_mut().zip(g).zip(va) {
                        if x >= *lo && x <= *hi {
                            *s += g;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += g[0]));
            }
            Op::Mean(a) => {
                let n = T::from_f64(nodes[a.0].value.len().max(1) as f64);
                acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += g[0] / n));
            }
            Op::SumPerSample(a) => {
                let inner = nodes[a.0].value.len() / g.len().max(1);
                acc(*a, &mut |s| {
                    for (j, s) in s.iter_mut().enumerate() {
                        *s += g[j / inner];
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| gemm(m, n, k, g, false, vb, true, s, true));
                acc(*b, &mut |s| gemm(k, m, n, va, true, g, false, s, true));
            }
            Op::Conv2d(x, k, geom) => {
                let (vx, vk) = (val(*x), val(*k));
                let need_x = nodes[x.0].requires_grad;
                let need_k = nodes[k.0].requires_grad;
                // Both slots live in `cot`; take them out to satisfy the borrow checker.
                let mut gx = need_x.then(|| {
                    cot[x.0]
                        .take()
                        .unwrap_or_else(|| vec![T::zero(); vx.len()])
                });
                let mut gk = need_k.then(|| {
                    cot[k.0]
                        .take()
                        .unwrap_or_else(|| vec![T::zero(); vk.len()])
                });
                kernels::conv2d_backward(vx, vk, g, geom, gx.as_deref_mut(), gk.as_deref_mut());
                if let Some(gx) = gx {
                    cot[x.0] = Some(gx);
                }
                if let Some(gk) = gk {
                    cot[k.0] = Some(gk);
                }
            }
            Op::AddChannelBias(x, b) => {
                let xs = nodes[x.0].value.shape();
                let c = xs[1];
                let inner: usize = xs[2..].iter().product();
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g));
                acc(*b, &mut |s| {
                    for (j, chunk) in g.chunks(inner.max(1)).enumerate() {
                        s[j % c] += chunk.iter().copied().sum::<T>();
                    }
                });
            }
            Op::AddSampleChannel(x, b) => {
                let xs = nodes[x.0].value.shape();
                let inner: usize = xs[2..].iter().product();
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g));
                acc(*b, &mut |s| {
                    for (j, chunk) in g.chunks(inner.max(1)).enumerate() {
                        s[j] += chunk.iter().copied().sum::<T>();
                    }
                });
            }
            Op::AvgPool(x, f) => {
                let xs = nodes[x.0].value.shape();
                let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                acc(*x, &mut |s| kernels::avg_pool_backward(g, s, planes, h, w, *f));
            }
            Op::Upsample(x, f) => {
                let xs = nodes[x.0].value.shape();
                let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                acc(*x, &mut |s| kernels::upsample_backward(g, s, planes, h, w, *f));
            }
            Op::Concat(parts) => {
                let os = nodes[i].value.shape();
                let (n, c_total, hw) = (os[0], os[1], os[2] * os[3]);
                let mut offset = 0;
                for &p in parts {
                    let c = nodes[p.0].value.shape()[1];
                    acc(p, &mut |s| {
                        for smp in 0..n {
                            let src = &g[(smp * c_total + offset) * hw..(smp * c_total + offset + c) * hw];
                            let dst = &mut s[smp * c * hw..(smp + 1) * c * hw];
                            dst.iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                        }
                    });
                    offset += c;
                }
            }
            Op::SliceChannels(x, start) => {
                let xs = nodes[x.0].value.shape();
                let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let len = nodes[i].value.shape()[1];
                acc(*x, &mut |s| {
                    for smp in 0..n {
                        let dst = &mut s[(smp * c + start) * hw..(smp * c + start + len) * hw];
                        let src = &g[smp * len * hw..(smp + 1) * len * hw];
                        dst.iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                    }
                });
            }
            Op::BroadcastBatch(x) => {
                let inner = nodes[x.0].value.len();
                acc(*x, &mut |s| {
                    for chunk in g.chunks(inner.max(1)) {
                        s.iter_mut().zip(chunk).for_each(|(d, &v)| *d += v);
                    }
                });
            }
            Op::Sandwich(x, left, right) => {
                let xs = nodes[x.0].value.shape();
                let r = xs.len();
                let (h, w) = (xs[r - 2], xs[r - 1]);
                let (oh, ow) = (left.shape()[0], right.shape()[1]);
                let planes = nodes[x.0].value.len() / (h * w).max(1);
                acc(*x, &mut |s| {
                    kernels::sandwich_backward(g, s, planes, (h, w), left.data(), right.data(), (oh, ow))
                });
            }
            Op::Reshape(x) => {
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g));
            }
        }
    }
}
