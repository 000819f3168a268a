//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value and enough context to
//! run its adjoint. Nodes are appended in execution order, so walking the
//! node list backwards is a valid reverse topological order.
//!
//! Lifecycle: a tape records exactly one forward pass. [`Tape::backward`]
//! may be called once; a second call is an error and a fresh tape must be
//! recorded for the next step.

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) struct ConvCache {
    pub x: Var,
    pub w: Var,
    pub bias: Option<Var>,
    pub geom: ConvGeom,
    pub batch: usize,
    pub out_channels: usize,
    /// Unfolded input, one `patch_len x out_len` block per batch item.
    /// Empty for pointwise convolutions, which read the input directly.
    pub cols: Vec<f64>,
}

#[derive(Debug)]
pub(crate) struct BnCache {
    pub x: Var,
    pub gamma: Var,
    pub beta: Var,
    pub channels: usize,
    pub batch: usize,
    pub spatial: usize,
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub train: bool,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Matmul(Var, Var),
    AddRowBias(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    ClampMin(Var, f64),
    Softmax {
        x: Var,
        outer: usize,
        axis: usize,
        inner: usize,
    },
    Sum(Var),
    Mean(Var),
    SumAxis {
        x: Var,
        outer: usize,
        axis: usize,
        inner: usize,
    },
    Concat {
        parts: Vec<(Var, usize)>,
        outer: usize,
        inner: usize,
    },
    Slice {
        x: Var,
        outer: usize,
        axis: usize,
        start: usize,
        len: usize,
        inner: usize,
    },
    Reshape(Var),
    Conv2d(Box<ConvCache>),
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample2d {
        x: Var,
        factor: usize,
    },
    BatchNorm(Box<BnCache>),
    GlobalAvgPool(Var),
    BroadcastSpatial {
        x: Var,
        spatial: usize,
    },
    StraightThrough(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records one forward pass for reverse-mode accumulation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, suitable for running-average updates.
    pub var: Vec<f64>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a tensor; it is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Result<Var> {
        let rg = tensor.requires_grad();
        self.push_raw(tensor, Op::Leaf, rg, "leaf")
    }

    /// Adds a trainable tensor.
    pub fn param(&mut self, tensor: Tensor) -> Result<Var> {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Adds an untracked tensor.
    pub fn constant(&mut self, tensor: Tensor) -> Result<Var> {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_raw(&mut self, value: Tensor, op: Op, rg: bool, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        if self.backward_done {
            return Err(Error::Tape("cannot record onto a tape after backward".into()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad: rg,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var], name: &'static str) -> Result<Var> {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(Tensor::from_parts(shape, data), op, rg, name)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("operand shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        self.push(self.shape(a).to_vec(), data, op, &[a, b], name)
    }

    fn map(&mut self, a: Var, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        self.push(self.shape(a).to_vec(), data, op, &[a], name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Div(a, b), "div", |x, y| x / y)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map(a, Op::AddScalar(a), "add_scalar", |x| x + s)
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map(a, Op::MulScalar(a, s), "mul_scalar", |x| x * s)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Sigmoid(a), "sigmoid", sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Tanh(a), "tanh", f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Relu(a), "relu", |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Exp(a), "exp", f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Log(a), "log", f64::ln)
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Result<Var> {
        self.map(a, Op::ClampMin(a, lo), "clamp_min", |x| x.max(lo))
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("cannot multiply {:?} by {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            self.data(a),
            kernels::row_major(k),
            self.data(b),
            kernels::row_major(n),
            0.0,
            &mut out,
        );
        self.push(vec![m, n], out, Op::Matmul(a, b), &[a, b], "matmul")
    }

    /// `[m,n] + [n]` broadcast over rows.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sa.len() != 2 || sb != [sa[1]] {
            return Err(Error::shape("add_row_bias", format!("bias {:?} does not fit {:?}", sb, sa)));
        }
        let n = sa[1];
        let b = self.data(bias);
        let data = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + b[i % n])
            .collect();
        self.push(sa.to_vec(), data, Op::AddRowBias(a, bias), &[a, bias], "add_row_bias")
    }

    fn split_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let s = self.shape(a);
        if axis >= s.len() {
            return Err(Error::shape(op, format!("axis {} out of range for {:?}", axis, s)));
        }
        Ok((s[..axis].iter().product(), s[axis], s[axis + 1..].iter().product()))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.split_axis("softmax", a, axis)?;
        let x = self.data(a);
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| x[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (x[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[idx(k)] /= z;
                }
            }
        }
        let op = Op::Softmax {
            x: a,
            outer,
            axis: len,
            inner,
        };
        self.push(self.shape(a).to_vec(), out, op, &[a], "softmax")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(a), &[a], "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.data(a);
        if x.is_empty() {
            return Err(Error::shape("mean", "mean of an empty tensor"));
        }
        let m = x.iter().sum::<f64>() / x.len() as f64;
        self.push(vec![1], vec![m], Op::Mean(a), &[a], "mean")
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.split_axis("sum_axis", a, axis)?;
        let x = self.data(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += x[(o * len + k) * inner + i];
                }
            }
        }
        let mut shape = self.shape(a).to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let op = Op::SumAxis {
            x: a,
            outer,
            axis: len,
            inner,
        };
        self.push(shape, out, op, &[a], "sum_axis")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no operands"))?;
        let (outer, _, inner) = self.split_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} does not match {:?} off axis {}", s, base, axis),
                ));
            }
            lens.push((p, s[axis]));
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &(p, len) in &lens {
                let x = self.data(p);
                out.extend_from_slice(&x[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let op = Op::Concat {
            parts: lens,
            outer,
            inner,
        };
        self.push(shape, out, op, parts, "concat")
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (outer, src, inner) = self.split_axis("slice", a, axis)?;
        if start + len > src {
            return Err(Error::shape(
                "slice",
                format!("range {}..{} exceeds axis length {}", start, start + len, src),
            ));
        }
        let x = self.data(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * src + start) * inner;
            out.extend_from_slice(&x[from..from + len * inner]);
        }
        let mut shape = self.shape(a).to_vec();
        shape[axis] = len;
        let op = Op::Slice {
            x: a,
            outer,
            axis: src,
            start,
            len,
            inner,
        };
        self.push(shape, out, op, &[a], "slice")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape(a), shape),
            ));
        }
        let data = self.data(a).to_vec();
        self.push(shape.to_vec(), data, Op::Reshape(a), &[a], "reshape")
    }

    /// Cross-correlation of `[N,C,H,W]` with `[O,C,kh,kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        pad: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expected 4-d input and kernel, got {:?} and {:?}", sx, sw),
            ));
        }
        let [n, c, h, wd] = [sx[0], sx[1], sx[2], sx[3]];
        let [o, kc, kh, kw] = [sw[0], sw[1], sw[2], sw[3]];
        if kc != c {
            return Err(Error::shape(
                "conv2d",
                format!("kernel expects {} input channels, input has {}", kc, c),
            ));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        if kh > h + 2 * pad.0 || kw > wd + 2 * pad.1 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {}x{} larger than padded input {}x{}", kh, kw, h + 2 * pad.0, wd + 2 * pad.1),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} does not match {} output channels", self.shape(b), o),
                ));
            }
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: wd,
            kh,
            kw,
            pad,
            stride,
            out_h: (h + 2 * pad.0 - kh) / stride.0 + 1,
            out_w: (wd + 2 * pad.1 - kw) / stride.1 + 1,
        };
        let (pl, ol) = (geom.patch_len(), geom.out_len());
        let in_len = c * h * wd;
        let pointwise = geom.is_pointwise();
        let mut cols = if pointwise { Vec::new() } else { vec![0.0; n * pl * ol] };
        let mut out = vec![0.0; n * o * ol];
        {
            let xd = self.data(x);
            let wdata = self.data(w);
            for b in 0..n {
                let src: &[f64] = if pointwise {
                    &xd[b * in_len..(b + 1) * in_len]
                } else {
                    let block = &mut cols[b * pl * ol..(b + 1) * pl * ol];
                    kernels::im2col(&geom, &xd[b * in_len..(b + 1) * in_len], block);
                    block
                };
                let dst = &mut out[b * o * ol..(b + 1) * o * ol];
                kernels::gemm(o, pl, ol, wdata, kernels::row_major(pl), src, kernels::row_major(ol), 0.0, dst);
            }
            if let Some(bv) = bias {
                let bd = self.data(bv);
                for (i, chunk) in out.chunks_mut(ol).enumerate() {
                    let add = bd[i % o];
                    chunk.iter_mut().for_each(|v| *v += add);
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        let cache = ConvCache {
            x,
            w,
            bias,
            geom,
            batch: n,
            out_channels: o,
            cols,
        };
        self.push(vec![n, o, geom.out_h, geom.out_w], out, Op::Conv2d(Box::new(cache)), &inputs, "conv2d")
    }

    /// Non-overlapping `k x k` max pooling over `[N,C,H,W]`.
    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || k == 0 || s[2] % k != 0 || s[3] % k != 0 {
            return Err(Error::shape(
                "max_pool2d",
                format!("{:?} not divisible into {}x{} windows", s, k, k),
            ));
        }
        let (oh, ow) = (s[2] / k, s[3] / k);
        let planes = s[0] * s[1];
        let xd = self.data(x);
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * s[2] * s[3];
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + i * k * s[3] + j * k;
                    for di in 0..k {
                        for dj in 0..k {
                            let idx = base + (i * k + di) * s[3] + j * k + dj;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        self.push(vec![s[0], s[1], oh, ow], out, Op::MaxPool2d { x, argmax }, &[x], "max_pool2d")
    }

    /// Nearest-neighbour upsampling of `[N,C,H,W]` by an integer factor.
    pub fn upsample2d(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || factor == 0 {
            return Err(Error::shape("upsample2d", format!("bad input {:?} or factor {}", s, factor)));
        }
        let (h, w) = (s[2] * factor, s[3] * factor);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(s[0] * s[1] * h * w);
        for p in 0..s[0] * s[1] {
            let plane = &xd[p * s[2] * s[3]..(p + 1) * s[2] * s[3]];
            for i in 0..h {
                let row = &plane[(i / factor) * s[3]..(i / factor + 1) * s[3]];
                for j in 0..w {
                    out.push(row[j / factor]);
                }
            }
        }
        self.push(vec![s[0], s[1], h, w], out, Op::Upsample2d { x, factor }, &[x], "upsample2d")
    }

    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(Error::shape("batch_norm", format!("need [N,C,...], got {:?}", s)));
        }
        let c = s[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!("affine parameters must have shape [{}]", c),
            ));
        }
        Ok((s[0], c, s[2..].iter().product()))
    }

    /// Training-mode batch norm: normalizes with the batch statistics of
    /// each channel (biased variance) and reports them for running averages.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (n, c, sp) = self.bn_dims(x, gamma, beta)?;
        let count = n * sp;
        let xd = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        let at = |bi: usize, ch: usize, k: usize| (bi * c + ch) * sp + k;
        for ch in 0..c {
            let mut s = 0.0;
            for bi in 0..n {
                for k in 0..sp {
                    s += xd[at(bi, ch, k)];
                }
            }
            mean[ch] = s / count as f64;
            let mut v = 0.0;
            for bi in 0..n {
                for k in 0..sp {
                    let d = xd[at(bi, ch, k)] - mean[ch];
                    v += d * d;
                }
            }
            var[ch] = v / count as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for bi in 0..n {
            for ch in 0..c {
                for k in 0..sp {
                    let i = at(bi, ch, k);
                    xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + b[ch];
                }
            }
        }
        let unbiased = var
            .iter()
            .map(|v| if count > 1 { v * count as f64 / (count - 1) as f64 } else { *v })
            .collect();
        let cache = BnCache {
            x,
            gamma,
            beta,
            channels: c,
            batch: n,
            spatial: sp,
            xhat,
            inv_std,
            train: true,
        };
        let shape = self.shape(x).to_vec();
        let v = self.push(shape, out, Op::BatchNorm(Box::new(cache)), &[x, gamma, beta], "batch_norm")?;
        Ok((v, BatchStats { mean, var: unbiased }))
    }

    /// Evaluation-mode batch norm using stored running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (n, c, sp) = self.bn_dims(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batch_norm", "running statistics length mismatch"));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xd = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for bi in 0..n {
            for ch in 0..c {
                for k in 0..sp {
                    let i = (bi * c + ch) * sp + k;
                    xhat[i] = (xd[i] - running_mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + b[ch];
                }
            }
        }
        let cache = BnCache {
            x,
            gamma,
            beta,
            channels: c,
            batch: n,
            spatial: sp,
            xhat,
            inv_std,
            train: false,
        };
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::BatchNorm(Box::new(cache)), &[x, gamma, beta], "batch_norm")
    }

    /// `[N,C,H,W] -> [N,C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] * s[3] == 0 {
            return Err(Error::shape("global_avg_pool", format!("need non-empty [N,C,H,W], got {:?}", s)));
        }
        let sp = s[2] * s[3];
        let out = self
            .data(x)
            .chunks(sp)
            .map(|c| c.iter().sum::<f64>() / sp as f64)
            .collect();
        self.push(vec![s[0], s[1]], out, Op::GlobalAvgPool(x), &[x], "global_avg_pool")
    }

    /// `[N,C] -> [N,C,H,W]` by repeating each entry over the spatial grid.
    pub fn broadcast_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("broadcast_spatial", format!("need [N,C], got {:?}", s)));
        }
        let sp = h * w;
        let out = self
            .data(x)
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, sp))
            .collect();
        self.push(vec![s[0], s[1], h, w], out, Op::BroadcastSpatial { x, spatial: sp }, &[x], "broadcast_spatial")
    }

    /// Hard one-hot of the last-axis argmax on the forward pass; identity
    /// gradient on the backward pass.
    pub fn straight_through(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let last = *s.last().ok_or_else(|| Error::shape("straight_through", "scalar input"))?;
        let mut out = vec![0.0; self.value(x).len()];
        for (row, dst) in self.data(x).chunks(last).zip(out.chunks_mut(last)) {
            dst[argmax(row)] = 1.0;
        }
        self.push(s, out, Op::StraightThrough(x), &[x], "straight_through")
    }

    /// Reverse-mode accumulation from a one-element `loss`. Gradients are
    /// stored on every tracked node and read back with [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Tape(
                "backward already ran on this tape; record a new forward pass".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut finished: Vec<(usize, Vec<f64>)> = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let mut acc = Accum {
                nodes: &self.nodes,
                grads: &mut grads,
            };
            acc.propagate(i, &g);
            finished.push((i, g));
        }
        for (i, g) in finished {
            self.nodes[i].value.set_grad(g);
        }
        Ok(())
    }
}

struct Accum<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl<'a> Accum<'a> {
    fn slot(&mut self, v: Var) -> Option<&mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn val(&self, v: Var) -> &'a [f64] {
        let nodes: &'a [Node] = self.nodes;
        nodes[v.0].value.data()
    }

    fn each(&mut self, v: Var, g: &[f64], f: impl Fn(usize, f64) -> f64) {
        if let Some(s) = self.slot(v) {
            for (i, (d, &gi)) in s.iter_mut().zip(g).enumerate() {
                *d += f(i, gi);
            }
        }
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let nodes = self.nodes;
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.each(*a, g, |_, gi| gi);
                self.each(*b, g, |_, gi| gi);
            }
            Op::Sub(a, b) => {
                self.each(*a, g, |_, gi| gi);
                self.each(*b, g, |_, gi| -gi);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                self.each(*a, g, |k, gi| gi * bv[k]);
                self.each(*b, g, |k, gi| gi * av[k]);
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                self.each(*a, g, |k, gi| gi / bv[k]);
                self.each(*b, g, |k, gi| -gi * av[k] / (bv[k] * bv[k]));
            }
            Op::AddScalar(a) => self.each(*a, g, |_, gi| gi),
            Op::MulScalar(a, s) => self.each(*a, g, |_, gi| gi * s),
            Op::Matmul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.val(*a), self.val(*b));
                if let Some(da) = self.slot(*a) {
                    kernels::gemm(m, n, k, g, kernels::row_major(n), bv, kernels::transposed(n), 1.0, da);
                }
                if let Some(db) = self.slot(*b) {
                    kernels::gemm(k, m, n, av, kernels::transposed(k), g, kernels::row_major(n), 1.0, db);
                }
            }
            Op::AddRowBias(a, bias) => {
                self.each(*a, g, |_, gi| gi);
                let n = nodes[bias.0].value.len();
                if let Some(db) = self.slot(*bias) {
                    for (k, gi) in g.iter().enumerate() {
                        db[k % n] += gi;
                    }
                }
            }
            Op::Sigmoid(a) => self.each(*a, g, |k, gi| gi * out[k] * (1.0 - out[k])),
            Op::Tanh(a) => self.each(*a, g, |k, gi| gi * (1.0 - out[k] * out[k])),
            Op::Relu(a) => {
                let av = self.val(*a);
                self.each(*a, g, |k, gi| if av[k] > 0.0 { gi } else { 0.0 });
            }
            Op::Exp(a) => self.each(*a, g, |k, gi| gi * out[k]),
            Op::Log(a) => {
                let av = self.val(*a);
                self.each(*a, g, |k, gi| gi / av[k]);
            }
            Op::ClampMin(a, lo) => {
                let av = self.val(*a);
                self.each(*a, g, |k, gi| if av[k] > *lo { gi } else { 0.0 });
            }
            Op::Softmax { x, outer, axis, inner } => {
                let (outer, len, inner) = (*outer, *axis, *inner);
                if let Some(dx) = self.slot(*x) {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let idx = |k: usize| (o * len + k) * inner + ii;
                            let dot: f64 = (0..len).map(|k| g[idx(k)] * out[idx(k)]).sum();
                            for k in 0..len {
                                dx[idx(k)] += out[idx(k)] * (g[idx(k)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(d) = self.slot(*a) {
                    d.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mean(a) => {
                let n = nodes[a.0].value.len();
                let s = g[0] / n as f64;
                if let Some(d) = self.slot(*a) {
                    d.iter_mut().for_each(|v| *v += s);
                }
            }
            Op::SumAxis { x, outer, axis, inner } => {
                let (outer, len, inner) = (*outer, *axis, *inner);
                if let Some(dx) = self.slot(*x) {
                    for o in 0..outer {
                        for k in 0..len {
                            for ii in 0..inner {
                                dx[(o * len + k) * inner + ii] += g[o * inner + ii];
                            }
                        }
                    }
                }
            }
            Op::Concat { parts, outer, inner } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(p, len) in parts {
                    if let Some(dp) = self.slot(p) {
                        for o in 0..*outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            for (d, s) in dp[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice {
                x,
                outer,
                axis,
                start,
                len,
                inner,
            } => {
                if let Some(dx) = self.slot(*x) {
                    for o in 0..*outer {
                        let from = (o * axis + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        for (d, s) in dx[from..from + len * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Reshape(a) => self.each(*a, g, |_, gi| gi),
            Op::Conv2d(cache) => self.conv_backward(cache, g),
            Op::MaxPool2d { x, argmax } => {
                if let Some(dx) = self.slot(*x) {
                    for (&src, gi) in argmax.iter().zip(g) {
                        dx[src] += gi;
                    }
                }
            }
            Op::Upsample2d { x, factor } => {
                let s = nodes[x.0].value.shape();
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (h * factor, w * factor);
                if let Some(dx) = self.slot(*x) {
                    for p in 0..s[0] * s[1] {
                        for i in 0..oh {
                            for j in 0..ow {
                                dx[p * h * w + (i / factor) * w + j / factor] += g[p * oh * ow + i * ow + j];
                            }
                        }
                    }
                }
            }
            Op::BatchNorm(cache) => self.bn_backward(cache, g),
            Op::GlobalAvgPool(x) => {
                let s = nodes[x.0].value.shape();
                let sp = s[2] * s[3];
                if let Some(dx) = self.slot(*x) {
                    for (k, d) in dx.iter_mut().enumerate() {
                        *d += g[k / sp] / sp as f64;
                    }
                }
            }
            Op::BroadcastSpatial { x, spatial } => {
                if let Some(dx) = self.slot(*x) {
                    for (k, chunk) in g.chunks(*spatial).enumerate() {
                        dx[k] += chunk.iter().sum::<f64>();
                    }
                }
            }
            Op::StraightThrough(x) => self.each(*x, g, |_, gi| gi),
        }
    }

    fn conv_backward(&mut self, cache: &ConvCache, g: &[f64]) {
        let geom = cache.geom;
        let (pl, ol, o, n) = (geom.patch_len(), geom.out_len(), cache.out_channels, cache.batch);
        let in_len = geom.channels * geom.height * geom.width;
        let xd = self.val(cache.x);
        let wd = self.val(cache.w);
        let pointwise = geom.is_pointwise();
        if let Some(b) = cache.bias {
            if let Some(db) = self.slot(b) {
                for (k, chunk) in g.chunks(ol).enumerate() {
                    db[k % o] += chunk.iter().sum::<f64>();
                }
            }
        }
        if let Some(dw) = self.slot(cache.w) {
            for b in 0..n {
                let cols = if pointwise {
                    &xd[b * in_len..(b + 1) * in_len]
                } else {
                    &cache.cols[b * pl * ol..(b + 1) * pl * ol]
                };
                let gb = &g[b * o * ol..(b + 1) * o * ol];
                kernels::gemm(o, ol, pl, gb, kernels::row_major(ol), cols, kernels::transposed(ol), 1.0, dw);
            }
        }
        if let Some(dx) = self.slot(cache.x) {
            let mut dcols = vec![0.0; pl * ol];
            for b in 0..n {
                let gb = &g[b * o * ol..(b + 1) * o * ol];
                let dxb = &mut dx[b * in_len..(b + 1) * in_len];
                if pointwise {
                    kernels::gemm(pl, o, ol, wd, kernels::transposed(pl), gb, kernels::row_major(ol), 1.0, dxb);
                } else {
                    kernels::gemm(pl, o, ol, wd, kernels::transposed(pl), gb, kernels::row_major(ol), 0.0, &mut dcols);
                    kernels::col2im_add(&geom, &dcols, dxb);
                }
            }
        }
    }

    fn bn_backward(&mut self, cache: &BnCache, g: &[f64]) {
        let (n, c, sp) = (cache.batch, cache.channels, cache.spatial);
        let at = |bi: usize, ch: usize, k: usize| (bi * c + ch) * sp + k;
        let gamma = self.val(cache.gamma).to_vec();
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for bi in 0..n {
            for ch in 0..c {
                for k in 0..sp {
                    let i = at(bi, ch, k);
                    dgamma[ch] += g[i] * cache.xhat[i];
                    dbeta[ch] += g[i];
                }
            }
        }
        if let Some(dx) = self.slot(cache.x) {
            let m = (n * sp) as f64;
            for ch in 0..c {
                let inv = cache.inv_std[ch];
                if cache.train {
                    // dxhat = g * gamma; sums over the channel's batch.
                    let s1 = dbeta[ch] * gamma[ch];
                    let s2 = dgamma[ch] * gamma[ch];
                    for bi in 0..n {
                        for k in 0..sp {
                            let i = at(bi, ch, k);
                            let dxhat = g[i] * gamma[ch];
                            dx[i] += inv / m * (m * dxhat - s1 - cache.xhat[i] * s2);
                        }
                    }
                } else {
                    for bi in 0..n {
                        for k in 0..sp {
                            let i = at(bi, ch, k);
                            dx[i] += g[i] * gamma[ch] * inv;
                        }
                    }
                }
            }
        }
        if let Some(dg) = self.slot(cache.gamma) {
            dg.iter_mut().zip(&dgamma).for_each(|(d, v)| *d += v);
        }
        if let Some(db) = self.slot(cache.beta) {
            db.iter_mut().zip(&dbeta).for_each(|(d, v)| *d += v);
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Index of the first maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}
