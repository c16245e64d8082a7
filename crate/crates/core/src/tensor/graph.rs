use std::collections::HashMap;

use super::{ParamGrads, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(String),
    Affine {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        padding: usize,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Abs(NodeId),
    Softmax {
        x: NodeId,
        axis: usize,
    },
    MaxPool2d {
        x: NodeId,
        argmax: Vec<usize>,
    },
    GlobalMaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    TopRMean {
        x: NodeId,
        per_channel: usize,
        selected: Vec<usize>,
    },
    Mul(NodeId, NodeId),
    Add(NodeId, NodeId),
    ScaleShift {
        x: NodeId,
        scale: f64,
    },
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    Mean {
        x: NodeId,
        axis: usize,
    },
    Sum(NodeId),
    Reshape(NodeId),
    LnClamped {
        x: NodeId,
        eps: f64,
    },
    Bce {
        p: NodeId,
        target: Vec<f64>,
        eps: f64,
    },
}

impl Op {
    fn label(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Affine { .. } => "affine",
            Op::MatMul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Abs(_) => "abs",
            Op::Softmax { .. } => "softmax",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::GlobalMaxPool { .. } => "global_max_pool",
            Op::TopRMean { .. } => "top_r_mean",
            Op::Mul(..) => "mul",
            Op::Add(..) => "add",
            Op::ScaleShift { .. } => "scale_shift",
            Op::Concat { .. } => "concat",
            Op::Mean { .. } => "mean",
            Op::Sum(_) => "sum",
            Op::Reshape(_) => "reshape",
            Op::LnClamped { .. } => "ln_clamped",
            Op::Bce { .. } => "bce",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Define-by-run computation tape.
///
/// Nodes are evaluated as they are recorded and stored in insertion order,
/// which is also a valid topological order, so evaluation is pure and
/// reproducible: the same calls with the same inputs yield bit-identical
/// values.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, NodeId>,
    outputs: HashMap<String, NodeId>,
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// Number of entries kept by top-`fraction` pooling over `n` values:
/// `ceil(fraction * n)`, at least one.
pub fn top_count(fraction: f64, n: usize) -> usize {
    let raw = (fraction * n as f64 - 1e-9).ceil();
    (raw.max(1.0) as usize).min(n)
}

/// Indices of the `count` largest values; ties resolved towards the smaller index.
pub fn top_indices(values: &[f64], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(count);
    order
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Registers `id` under `name` so callers can fetch it with [`Graph::output`].
    pub fn set_output(&mut self, name: impl Into<String>, id: NodeId) {
        self.outputs.insert(name.into(), id);
    }

    pub fn output(&self, name: &str) -> Option<&Tensor> {
        self.outputs.get(name).map(|&id| self.value(id))
    }

    /// Human-readable name of a recorded node, such as `conv2d#3` or `param(fusion.weight)#7`.
    pub fn node_label(&self, id: NodeId) -> String {
        match &self.nodes[id.0].op {
            Op::Param(name) => format!("param({name})#{}", id.0),
            op => format!("{}#{}", op.label(), id.0),
        }
    }

    fn node_name(&self, op: &str) -> String {
        format!("{op}#{}", self.nodes.len())
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value, needs_grad });
        id
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// Every discrete choice made while evaluating the tape: input contents,
    /// ReLU/abs signs, pooling argmaxes, top-r selections and active clamps.
    /// Two evaluations with equal signatures lie on the same smooth piece of
    /// the loss, so finite differences between them are free of kinks.
    pub fn branch_signature(&self) -> Vec<u64> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Input => {
                    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
                    for v in node.value.data() {
                        h = (h ^ v.to_bits()).wrapping_mul(0x0000_0100_0000_01b3);
                    }
                    sig.push(h);
                }
                Op::Relu(x) | Op::Abs(x) => sig.extend(self.value(*x).data().iter().map(|&v| u64::from(v > 0.0))),
                Op::MaxPool2d { argmax, .. } | Op::GlobalMaxPool { argmax, .. } => {
                    sig.extend(argmax.iter().map(|&i| i as u64))
                }
                Op::TopRMean { selected, .. } => {
                    let mut sel = selected.clone();
                    sel.sort_unstable();
                    sig.extend(sel.into_iter().map(|i| i as u64));
                }
                Op::LnClamped { x, eps } => sig.extend(self.value(*x).data().iter().map(|&v| u64::from(v >= *eps))),
                Op::Bce { p, eps, .. } => sig.extend(
                    self.value(*p)
                        .data()
                        .iter()
                        .map(|&v| u64::from(v >= *eps) | u64::from(1.0 - v >= *eps) << 1),
                ),
                _ => {}
            }
        }
        sig
    }

    /// Records an external input. Non-finite values are rejected.
    pub fn input(&mut self, name: &str, tensor: Tensor) -> Result<NodeId> {
        if !tensor.is_finite() {
            return Err(Error::NonFinite(format!("input `{name}`")));
        }
        let id = self.push(Op::Input, tensor, false);
        self.outputs.insert(name.to_string(), id);
        Ok(id)
    }

    /// Records a constant that never receives gradient.
    pub fn constant(&mut self, tensor: Tensor) -> NodeId {
        self.push(Op::Input, tensor, false)
    }

    /// Brings a parameter from `store` onto the tape (once per name).
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let t = store.require(name)?;
        if !t.is_finite() {
            return Err(Error::NonFinite(format!("parameter `{name}`")));
        }
        let id = self.push(Op::Param(name.to_string()), t.clone(), true);
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    /// `x · w + b` with `x: [in]` or `[m, in]`, `w: [in, out]`, `b: [out]`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let name = self.node_name("affine");
        let (xs, ws, bs) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        let (m, din, vector_in) = match xs.as_slice() {
            [d] => (1, *d, true),
            [m, d] => (*m, *d, false),
            _ => return Err(Error::shape(name, format!("input must be rank 1 or 2, got {xs:?}"))),
        };
        if ws.len() != 2 || ws[0] != din {
            return Err(Error::shape(
                name,
                format!("weight {ws:?} incompatible with input {xs:?}"),
            ));
        }
        let dout = ws[1];
        if bs != [dout] {
            return Err(Error::shape(name, format!("bias {bs:?} must be [{dout}]")));
        }
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; m * dout];
        for i in 0..m {
            let row = &mut out[i * dout..(i + 1) * dout];
            row.copy_from_slice(bv);
            for k in 0..din {
                let xik = xv[i * din + k];
                let wrow = &wv[k * dout..(k + 1) * dout];
                for (o, wko) in row.iter_mut().zip(wrow) {
                    *o += xik * wko;
                }
            }
        }
        let shape = if vector_in { vec![dout] } else { vec![m, dout] };
        let value = Tensor::new(shape, out)?;
        let ng = self.needs(&[x, w, b]);
        Ok(self.push(Op::Affine { x, w, b }, value, ng))
    }

    /// Matrix product of `a: [m, k]` and `b: [k, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let name = self.node_name("matmul");
        let (s_a, s_b) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if s_a.len() != 2 || s_b.len() != 2 || s_a[1] != s_b[0] {
            return Err(Error::shape(name, format!("cannot multiply {s_a:?} by {s_b:?}")));
        }
        let (m, k, n) = (s_a[0], s_a[1], s_b[1]);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                for j in 0..n {
                    out[i * n + j] += aip * bv[p * n + j];
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(Op::MatMul { a, b }, value, ng))
    }

    /// Direct 2-D convolution. `x: [C, H, W]`, `w: [O, C, kh, kw]`, `b: [O]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let name = self.node_name("conv2d");
        let (xs, ws, bs) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if xs.len() != 3 || ws.len() != 4 {
            return Err(Error::shape(
                name,
                format!("expected [C,H,W] input and [O,C,kh,kw] weight, got {xs:?} and {ws:?}"),
            ));
        }
        let (c, h, wd) = (xs[0], xs[1], xs[2]);
        let (o, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wc != c {
            return Err(Error::shape(
                name,
                format!("weight expects {wc} input channels, input has {c}"),
            ));
        }
        if bs != [o] {
            return Err(Error::shape(name, format!("bias {bs:?} must be [{o}]")));
        }
        if stride == 0 || h + 2 * padding < kh || wd + 2 * padding < kw {
            return Err(Error::shape(
                name,
                format!("kernel {kh}x{kw} does not fit input {h}x{wd} with padding {padding}"),
            ));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (wd + 2 * padding - kw) / stride + 1;
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; o * oh * ow];
        for oc in 0..o {
            let plane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
            plane.iter_mut().for_each(|v| *v = bv[oc]);
            for ic in 0..c {
                let xin = &xv[ic * h * wd..(ic + 1) * h * wd];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv_ = wv[((oc * c + ic) * kh + ky) * kw + kx];
                        conv_accumulate(
                            plane,
                            xin,
                            wv_,
                            ConvGeom {
                                h,
                                w: wd,
                                oh,
                                ow,
                                stride,
                                padding,
                                ky,
                                kx,
                            },
                        );
                    }
                }
            }
        }
        let value = Tensor::new(vec![o, oh, ow], out)?;
        let ng = self.needs(&[x, w, b]);
        Ok(self.push(
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            },
            value,
            ng,
        ))
    }

    fn unary(&mut self, x: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let ng = self.needs(&[x]);
        self.push(op, value, ng)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    /// `scale * x + shift`, elementwise.
    pub fn scale_shift(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        self.unary(x, Op::ScaleShift { x, scale }, |v| scale * v + shift)
    }

    /// `ln(max(x, eps))`; zero gradient where the clamp is active.
    pub fn ln_clamped(&mut self, x: NodeId, eps: f64) -> NodeId {
        self.unary(x, Op::LnClamped { x, eps }, |v| v.max(eps).ln())
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let name = self.node_name("softmax");
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(name, format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| xv[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (xv[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[idx(k)] /= total;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let ng = self.needs(&[x]);
        Ok(self.push(Op::Softmax { x, axis }, value, ng))
    }

    /// Non-overlapping-or-strided max pooling over `[C, H, W]`.
    pub fn max_pool2d(&mut self, x: NodeId, size: usize, stride: usize) -> Result<NodeId> {
        let name = self.node_name("max_pool2d");
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || size == 0 || stride == 0 || shape[1] < size || shape[2] < size {
            return Err(Error::shape(
                name,
                format!("cannot pool {shape:?} with window {size}, stride {stride}"),
            ));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let (oh, ow) = ((h - size) / stride + 1, (w - size) / stride + 1);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for dy in 0..size {
                        for dx in 0..size {
                            let idx = (ch * h + oy * stride + dy) * w + ox * stride + dx;
                            if xv[idx] > best {
                                best = xv[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
        let value = Tensor::new(vec![c, oh, ow], out)?;
        let ng = self.needs(&[x]);
        Ok(self.push(Op::MaxPool2d { x, argmax }, value, ng))
    }

    /// Per-channel maximum over all trailing dimensions: `[C, ...] -> [C]`.
    pub fn global_max_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let name = self.node_name("global_max_pool");
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape(
                name,
                format!("need a channel axis plus spatial axes, got {shape:?}"),
            ));
        }
        let c = shape[0];
        let per: usize = shape[1..].iter().product();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(c);
        let mut argmax = Vec::with_capacity(c);
        for ch in 0..c {
            let slice = &xv[ch * per..(ch + 1) * per];
            let mut best_idx = 0;
            for (i, &v) in slice.iter().enumerate() {
                if v > slice[best_idx] {
                    best_idx = i;
                }
            }
            out.push(slice[best_idx]);
            argmax.push(ch * per + best_idx);
        }
        let value = Tensor::new(vec![c], out)?;
        let ng = self.needs(&[x]);
        Ok(self.push(Op::GlobalMaxPool { x, argmax }, value, ng))
    }

    /// Per-channel mean of the `ceil(fraction * n)` largest entries: `[C, ...] -> [C]`.
    pub fn top_r_mean(&mut self, x: NodeId, fraction: f64) -> Result<NodeId> {
        let name = self.node_name("top_r_mean");
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape(
                name,
                format!("need a channel axis plus spatial axes, got {shape:?}"),
            ));
        }
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "{name}: pooling fraction {fraction} outside (0, 1]"
            )));
        }
        let c = shape[0];
        let per: usize = shape[1..].iter().product();
        let count = top_count(fraction, per);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(c);
        let mut selected = Vec::with_capacity(c * count);
        for ch in 0..c {
            let slice = &xv[ch * per..(ch + 1) * per];
            let top = top_indices(slice, count);
            out.push(top.iter().map(|&i| slice[i]).sum::<f64>() / count as f64);
            selected.extend(top.into_iter().map(|i| ch * per + i));
        }
        let value = Tensor::new(vec![c], out)?;
        let ng = self.needs(&[x]);
        Ok(self.push(
            Op::TopRMean {
                x,
                per_channel: count,
                selected,
            },
            value,
            ng,
        ))
    }

    fn binary_same_shape(&mut self, a: NodeId, b: NodeId, label: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            let name = self.node_name(label);
            return Err(Error::shape(
                name,
                format!("operands {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(Op::Mul(a, b), value, ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(Op::Add(a, b), value, ng))
    }

    /// Sums any number of same-shaped nodes.
    pub fn add_all(&mut self, terms: &[NodeId]) -> Result<NodeId> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::invalid("add_all needs at least one term"))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let name = self.node_name("concat");
        let first = inputs.first().ok_or_else(|| Error::shape(name.clone(), "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(name, format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &id in inputs {
            let s = self.shape(id);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    name,
                    format!("cannot concatenate {s:?} with {base:?} on axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &id in inputs {
                let len = self.shape(id)[axis];
                let v = self.value(id).data();
                out.extend_from_slice(&v[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        let ng = self.needs(inputs);
        Ok(self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            value,
            ng,
        ))
    }

    /// Mean over one axis; the axis is removed (a rank-1 input yields `[1]`).
    pub fn mean(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let name = self.node_name("mean");
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(name, format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += xv[(o * len + k) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        let mut new_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|&(d, _)| d != axis)
            .map(|(_, &s)| s)
            .collect();
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let value = Tensor::new(new_shape, out)?;
        let ng = self.needs(&[x]);
        Ok(self.push(Op::Mean { x, axis }, value, ng))
    }

    /// Sum of all entries as a `[1]` tensor.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total = self.value(x).data().iter().sum();
        let ng = self.needs(&[x]);
        self.push(Op::Sum(x), Tensor::scalar(total), ng)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let name = self.node_name("reshape");
        let value = self
            .value(x)
            .reshape(shape.clone())
            .map_err(|_| Error::shape(name, format!("cannot reshape {:?} into {shape:?}", self.shape(x))))?;
        let ng = self.needs(&[x]);
        Ok(self.push(Op::Reshape(x), value, ng))
    }

    /// Elementwise binary cross-entropy against fixed targets. Both log
    /// arguments are clamped below at `eps`, which bounds `p` to `[eps, 1 - eps]`
    /// wherever it matters while leaving exact predictions with zero loss.
    pub fn bce(&mut self, p: NodeId, target: &[f64], eps: f64) -> Result<NodeId> {
        let name = self.node_name("bce");
        if self.value(p).numel() != target.len() {
            return Err(Error::shape(
                name,
                format!("{} predictions vs {} targets", self.value(p).numel(), target.len()),
            ));
        }
        let data = self
            .value(p)
            .data()
            .iter()
            .zip(target)
            .map(|(&pv, &t)| bce_value(t, pv, eps))
            .collect();
        let value = Tensor::new(self.shape(p).to_vec(), data)?;
        let ng = self.needs(&[p]);
        Ok(self.push(
            Op::Bce {
                p,
                target: target.to_vec(),
                eps,
            },
            value,
            ng,
        ))
    }

    /// Reverse pass from the scalar `loss`. Returns one gradient per
    /// parameter in `store`; parameters the loss does not reach get zeros.
    pub fn backward(&self, loss: NodeId, store: &ParamStore) -> Result<ParamGrads> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(Error::NotScalar(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let Op::Param(_) = node.op {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }

        let mut out = ParamGrads::zeros_like(store);
        for (name, &id) in &self.params {
            if id.0 > loss.0 {
                continue;
            }
            if let (Some(Some(g)), Some(dst)) = (grads.get(id.0), out.get_mut(name)) {
                dst.data_mut().copy_from_slice(g);
            }
        }
        Ok(out)
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Affine { x, w, b } => {
                let xs = self.shape(*x);
                let (m, din) = if xs.len() == 1 { (1, xs[0]) } else { (xs[0], xs[1]) };
                let dout = self.shape(*w)[1];
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if self.nodes[x.0].needs_grad {
                    let dx = self.grad_buf(grads, *x);
                    for i in 0..m {
                        for k in 0..din {
                            let wrow = &wv[k * dout..(k + 1) * dout];
                            let grow = &g[i * dout..(i + 1) * dout];
                            dx[i * din + k] += wrow.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                if self.nodes[w.0].needs_grad {
                    let dw = self.grad_buf(grads, *w);
                    for i in 0..m {
                        let grow = &g[i * dout..(i + 1) * dout];
                        for k in 0..din {
                            let xik = xv[i * din + k];
                            for (d, gv) in dw[k * dout..(k + 1) * dout].iter_mut().zip(grow) {
                                *d += xik * gv;
                            }
                        }
                    }
                }
                if self.nodes[b.0].needs_grad {
                    let db = self.grad_buf(grads, *b);
                    for i in 0..m {
                        for (d, gv) in db.iter_mut().zip(&g[i * dout..(i + 1) * dout]) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.nodes[a.0].needs_grad {
                    let da = self.grad_buf(grads, *a);
                    for i in 0..m {
                        for p in 0..k {
                            da[i * k + p] += (0..n).map(|j| g[i * n + j] * bv[p * n + j]).sum::<f64>();
                        }
                    }
                }
                if self.nodes[b.0].needs_grad {
                    let db = self.grad_buf(grads, *b);
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            for j in 0..n {
                                db[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (c, h, wd) = (xs[0], xs[1], xs[2]);
                let (o, kh, kw) = (ws[0], ws[2], ws[3]);
                let ys = node.value.shape();
                let (oh, ow) = (ys[1], ys[2]);
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if self.nodes[x.0].needs_grad {
                    let dx = self.grad_buf(grads, *x);
                    for oc in 0..o {
                        let gplane = &g[oc * oh * ow..(oc + 1) * oh * ow];
                        for ic in 0..c {
                            let dxin = &mut dx[ic * h * wd..(ic + 1) * h * wd];
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let wv_ = wv[((oc * c + ic) * kh + ky) * kw + kx];
                                    conv_scatter(
                                        dxin,
                                        gplane,
                                        wv_,
                                        ConvGeom {
                                            h,
                                            w: wd,
                                            oh,
                                            ow,
                                            stride: *stride,
                                            padding: *padding,
                                            ky,
                                            kx,
                                        },
                                    );
                                }
                            }
                        }
                    }
                }
                if self.nodes[w.0].needs_grad {
                    let dw = self.grad_buf(grads, *w);
                    for oc in 0..o {
                        let gplane = &g[oc * oh * ow..(oc + 1) * oh * ow];
                        for ic in 0..c {
                            let xin = &xv[ic * h * wd..(ic + 1) * h * wd];
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    dw[((oc * c + ic) * kh + ky) * kw + kx] += conv_correlate(
                                        gplane,
                                        xin,
                                        ConvGeom {
                                            h,
                                            w: wd,
                                            oh,
                                            ow,
                                            stride: *stride,
                                            padding: *padding,
                                            ky,
                                            kx,
                                        },
                                    );
                                }
                            }
                        }
                    }
                }
                if self.nodes[b.0].needs_grad {
                    let db = self.grad_buf(grads, *b);
                    for oc in 0..o {
                        db[oc] += g[oc * oh * ow..(oc + 1) * oh * ow].iter().sum::<f64>();
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx = self.grad_buf(grads, *x);
                for i in 0..g.len() {
                    if xv[i] > 0.0 {
                        dx[i] += g[i];
                    }
                }
            }
            Op::Sigmoid(x) => {
                let dx = self.grad_buf(grads, *x);
                for i in 0..g.len() {
                    dx[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
            Op::Tanh(x) => {
                let dx = self.grad_buf(grads, *x);
                for i in 0..g.len() {
                    dx[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                let dx = self.grad_buf(grads, *x);
                for i in 0..g.len() {
                    let s = if xv[i] > 0.0 {
                        1.0
                    } else if xv[i] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    dx[i] += g[i] * s;
                }
            }
            Op::ScaleShift { x, scale } => {
                let dx = self.grad_buf(grads, *x);
                for i in 0..g.len() {
                    dx[i] += g[i] * scale;
                }
            }
            Op::LnClamped { x, eps } => {
                let xv = self.value(*x).data();
                let dx = self.grad_buf(grads, *x);
                for i in 0..g.len() {
                    if xv[i] >= *eps {
                        dx[i] += g[i] / xv[i];
                    }
                }
            }
            Op::Bce { p, target, eps } => {
                let pv = self.value(*p).data();
                let dp = self.grad_buf(grads, *p);
                for i in 0..g.len() {
                    let (pi, t) = (pv[i], target[i]);
                    if pi >= *eps {
                        dp[i] -= g[i] * t / pi;
                    }
                    if 1.0 - pi >= *eps {
                        dp[i] += g[i] * (1.0 - t) / (1.0 - pi);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let dx = self.grad_buf(grads, *x);
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                        for k in 0..len {
                            dx[idx(k)] += y[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
            }
            Op::MaxPool2d { x, argmax } | Op::GlobalMaxPool { x, argmax } => {
                let dx = self.grad_buf(grads, *x);
                for (gv, &src) in g.iter().zip(argmax) {
                    dx[src] += gv;
                }
            }
            Op::TopRMean {
                x,
                per_channel,
                selected,
            } => {
                let dx = self.grad_buf(grads, *x);
                for (ch, chunk) in selected.chunks(*per_channel).enumerate() {
                    let share = g[ch] / *per_channel as f64;
                    for &src in chunk {
                        dx[src] += share;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    let bv = self.value(*b).data();
                    let da = self.grad_buf(grads, *a);
                    for i in 0..g.len() {
                        da[i] += g[i] * bv[i];
                    }
                }
                if self.nodes[b.0].needs_grad {
                    let av = self.value(*a).data();
                    let db = self.grad_buf(grads, *b);
                    for i in 0..g.len() {
                        db[i] += g[i] * av[i];
                    }
                }
            }
            Op::Add(a, b) => {
                for id in [a, b] {
                    if self.nodes[id.0].needs_grad {
                        let d = self.grad_buf(grads, *id);
                        for i in 0..g.len() {
                            d[i] += g[i];
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for id in inputs {
                    let len = self.shape(*id)[*axis];
                    if self.nodes[id.0].needs_grad {
                        let d = self.grad_buf(grads, *id);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            for (dv, gv) in d[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                                *dv += gv;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Mean { x, axis } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                let dx = self.grad_buf(grads, *x);
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            dx[(o * len + k) * inner + i] += g[o * inner + i] / len as f64;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let dx = self.grad_buf(grads, *x);
                dx.iter_mut().for_each(|v| *v += g[0]);
            }
            Op::Reshape(x) => {
                let dx = self.grad_buf(grads, *x);
                for i in 0..g.len() {
                    dx[i] += g[i];
                }
            }
        }
    }

    fn grad_buf<'a>(&self, grads: &'a mut [Option<Vec<f64>>], id: NodeId) -> &'a mut Vec<f64> {
        let n = self.value(id).numel();
        grads[id.0].get_or_insert_with(|| vec![0.0; n])
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
    ky: usize,
    kx: usize,
}

impl ConvGeom {
    /// Output columns whose input column `ox*stride + kx - padding` is in range.
    fn col_range(&self) -> (usize, usize) {
        let lo = self.padding.saturating_sub(self.kx).div_ceil(self.stride);
        let hi_excl = (self.w + self.padding).saturating_sub(self.kx);
        let hi = hi_excl.div_ceil(self.stride).min(self.ow);
        (lo, hi.max(lo))
    }

    fn input_row(&self, oy: usize) -> Option<usize> {
        let iy = oy * self.stride + self.ky;
        (iy >= self.padding && iy - self.padding < self.h).then(|| iy - self.padding)
    }
}

fn conv_accumulate(out: &mut [f64], xin: &[f64], weight: f64, geo: ConvGeom) {
    let (lo, hi) = geo.col_range();
    for oy in 0..geo.oh {
        let Some(iy) = geo.input_row(oy) else {
            continue;
        };
        let orow = &mut out[oy * geo.ow..(oy + 1) * geo.ow];
        let irow = &xin[iy * geo.w..(iy + 1) * geo.w];
        if geo.stride == 1 {
            let shift = lo + geo.kx - geo.padding;
            for (o, i) in orow[lo..hi].iter_mut().zip(&irow[shift..shift + (hi - lo)]) {
                *o += weight * i;
            }
        } else {
            for ox in lo..hi {
                orow[ox] += weight * irow[ox * geo.stride + geo.kx - geo.padding];
            }
        }
    }
}

fn conv_scatter(dxin: &mut [f64], gplane: &[f64], weight: f64, geo: ConvGeom) {
    let (lo, hi) = geo.col_range();
    for oy in 0..geo.oh {
        let Some(iy) = geo.input_row(oy) else {
            continue;
        };
        let grow = &gplane[oy * geo.ow..(oy + 1) * geo.ow];
        let drow = &mut dxin[iy * geo.w..(iy + 1) * geo.w];
        if geo.stride == 1 {
            let shift = lo + geo.kx - geo.padding;
            for (d, gv) in drow[shift..shift + (hi - lo)].iter_mut().zip(&grow[lo..hi]) {
                *d += weight * gv;
            }
        } else {
            for ox in lo..hi {
                drow[ox * geo.stride + geo.kx - geo.padding] += weight * grow[ox];
            }
        }
    }
}

fn conv_correlate(gplane: &[f64], xin: &[f64], geo: ConvGeom) -> f64 {
    let (lo, hi) = geo.col_range();
    let mut acc = 0.0;
    for oy in 0..geo.oh {
        let Some(iy) = geo.input_row(oy) else {
            continue;
        };
        let grow = &gplane[oy * geo.ow..(oy + 1) * geo.ow];
        let irow = &xin[iy * geo.w..(iy + 1) * geo.w];
        if geo.stride == 1 {
            let shift = lo + geo.kx - geo.padding;
            acc += grow[lo..hi]
                .iter()
                .zip(&irow[shift..shift + (hi - lo)])
                .map(|(a, b)| a * b)
                .sum::<f64>();
        } else {
            for ox in lo..hi {
                acc += grow[ox] * irow[ox * geo.stride + geo.kx - geo.padding];
            }
        }
    }
    acc
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of target `t` against probability `p`, log arguments clamped below at `eps`.
pub fn bce_value(t: f64, p: f64, eps: f64) -> f64 {
    -(t * p.max(eps).ln() + (1.0 - t) * (1.0 - p).max(eps).ln())
}
