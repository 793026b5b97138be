//! Eager reverse-mode autodiff tape.
//!
//! Every op evaluates immediately and appends a node to the tape, so node
//! order is a topological order by construction. [`Graph::backward`] walks the
//! tape once in reverse, starting from a scalar loss.

use crate::tensor::{channel_moments, gemm, ConvGeometry, Result, Tensor, TensorError};

/// Denominator floor for [`Graph::l2_normalize`]: norms below it are clamped.
pub const NORM_EPS: f64 = 1e-6;

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        padding: usize,
    },
    AvgPool2(Var),
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ChannelMean(Var),
    ChannelStd(Var),
    L2Normalize { input: Var, axis: usize },
    Softmax(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    SumLastAxis(Var),
    Gather(Var, Vec<usize>),
    Reshape(Var),
    Detach,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient for `var`, or zeros of `like`'s shape when nothing reached it.
    pub fn get_or_zeros(&self, var: Var, like: &Tensor) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn finite(op: &'static str, t: Tensor) -> Result<Tensor> {
    if t.all_finite() {
        Ok(t)
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() == rank {
        Ok(())
    } else {
        Err(TensorError::InvalidShape {
            op,
            shape: t.shape().to_vec(),
            reason: format!("expected rank {rank}"),
        })
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn conv_geometry(input: &Tensor, kernel: &Tensor, padding: usize) -> Result<ConvGeometry> {
    expect_rank("conv2d", input, 4)?;
    expect_rank("conv2d", kernel, 4)?;
    let (i, k) = (input.shape(), kernel.shape());
    if i[1] != k[1] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: i.to_vec(),
            rhs: k.to_vec(),
        });
    }
    let (ph, pw) = (i[2] + 2 * padding, i[3] + 2 * padding);
    if ph < k[2] || pw < k[3] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: i.to_vec(),
            rhs: k.to_vec(),
        });
    }
    Ok(ConvGeometry {
        channels: i[1],
        height: i[2],
        width: i[3],
        kernel_h: k[2],
        kernel_w: k[3],
        padding,
        out_h: ph - k[2] + 1,
        out_w: pw - k[3] + 1,
    })
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

    fn node(&self, var: Var) -> Result<&Node> {
        self.nodes.get(var.0).ok_or(TensorError::UnknownNode(var.0))
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn try_value(&self, var: Var) -> Result<&Tensor> {
        self.node(var).map(|n| &n.value)
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Adds an input tensor. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        let value = finite("leaf", value)?;
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        expect_rank("matmul", ta, 2)?;
        expect_rank("matmul", tb, 2)?;
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        if tb.shape()[0] != k {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let value = finite("matmul", Tensor::new(vec![m, n], out)?)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = &self.node(a)?.value;
        expect_rank("transpose", t, 2)?;
        let value = transpose2(t);
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    /// Stride-1 convolution of `[B, C, H, W]` by `[O, C, kh, kw]` with
    /// `padding` zeros on every border, plus an optional `[O]` bias.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, padding: usize) -> Result<Var> {
        let (x, w) = (&self.node(input)?.value, &self.node(kernel)?.value);
        let geo = conv_geometry(x, w, padding)?;
        let (batch, out_c) = (x.shape()[0], w.shape()[0]);
        if let Some(b) = bias {
            let bt = &self.node(b)?.value;
            if bt.shape() != [out_c] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: w.shape().to_vec(),
                    rhs: bt.shape().to_vec(),
                });
            }
        }
        let (patch, ohw) = (geo.patch_len(), geo.out_len());
        let in_len = geo.channels * geo.height * geo.width;
        let mut cols = vec![0.0; patch * ohw];
        let mut out = vec![0.0; batch * out_c * ohw];
        for (sample, dst) in x.data().chunks_exact(in_len).zip(out.chunks_exact_mut(out_c * ohw)) {
            geo.im2col(sample, &mut cols);
            gemm(out_c, patch, ohw, w.data(), false, &cols, false, dst, false);
            if let Some(b) = bias {
                for (plane, &bv) in dst.chunks_exact_mut(ohw).zip(self.nodes[b.0].value.data()) {
                    plane.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let value = finite(
            "conv2d",
            Tensor::new(vec![batch, out_c, geo.out_h, geo.out_w], out)?,
        )?;
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                padding,
            },
            rg,
        ))
    }

    /// 2×2 average pooling with stride 2 over the last two axes of `[B, C, H, W]`.
    pub fn avg_pool2(&mut self, input: Var) -> Result<Var> {
        let x = &self.node(input)?.value;
        expect_rank("avg_pool2", x, 4)?;
        let s = x.shape();
        if s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(TensorError::InvalidShape {
                op: "avg_pool2",
                shape: s.to_vec(),
                reason: "spatial dimensions must be even".into(),
            });
        }
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(x.len() / 4);
        for plane in x.data().chunks_exact(h * w) {
            for oy in 0..oh {
                for ox in 0..ow {
                    let r0 = 2 * oy * w + 2 * ox;
                    let r1 = r0 + w;
                    out.push(0.25 * (plane[r0] + plane[r0 + 1] + plane[r1] + plane[r1 + 1]));
                }
            }
        }
        let value = Tensor::new(vec![s[0], s[1], oh, ow], out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::AvgPool2(input), rg))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let value = self.node(input)?.value.map(|v| v.max(0.0));
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Relu(input), rg))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        same_shape(name, ta, tb)?;
        let value = finite(name, ta.zip_map(tb, f))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.node(b)?.value.data().contains(&0.0) {
            return Err(TensorError::ZeroDenominator { op: "div" });
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Adds a `[N]` vector to every trailing row of a `[..., N]` tensor.
    pub fn add_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (x, b) = (&self.node(input)?.value, &self.node(bias)?.value);
        let n = *x.shape().last().unwrap_or(&0);
        if b.shape() != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: x.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut value = x.clone();
        for row in value.data_mut().chunks_exact_mut(n) {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        let value = finite("add_bias", value)?;
        let rg = self.any_grad(&[input, bias]);
        Ok(self.push(value, Op::AddBias(input, bias), rg))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let value = finite("scale", self.node(input)?.value.map(|v| v * factor))?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Scale(input, factor), rg))
    }

    pub fn add_scalar(&mut self, input: Var, offset: f64) -> Result<Var> {
        let value = finite("add_scalar", self.node(input)?.value.map(|v| v + offset))?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::AddScalar(input), rg))
    }

    fn moments_input(&self, op: &'static str, input: Var) -> Result<&Tensor> {
        let x = &self.node(input)?.value;
        expect_rank(op, x, 4)?;
        Ok(x)
    }

    /// Spatial mean per channel: `[B, C, H, W]` → `[B, C]`.
    pub fn channel_mean(&mut self, input: Var) -> Result<Var> {
        let x = self.moments_input("channel_mean", input)?;
        let (mean, _) = channel_moments(x);
        let value = Tensor::new(x.shape()[..2].to_vec(), mean)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::ChannelMean(input), rg))
    }

    /// Spatial population standard deviation per channel: `[B, C, H, W]` → `[B, C]`.
    pub fn channel_std(&mut self, input: Var) -> Result<Var> {
        let x = self.moments_input("channel_std", input)?;
        let (_, std) = channel_moments(x);
        let value = Tensor::new(x.shape()[..2].to_vec(), std)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::ChannelStd(input), rg))
    }

    /// Divides each vector along `axis` of a rank-2 tensor by its L2 norm,
    /// clamped below at [`NORM_EPS`].
    pub fn l2_normalize(&mut self, input: Var, axis: usize) -> Result<Var> {
        let x = &self.node(input)?.value;
        expect_rank("l2_normalize", x, 2)?;
        if axis > 1 {
            return Err(TensorError::InvalidArgument(format!(
                "l2_normalize: axis {axis} out of range for rank 2"
            )));
        }
        let norms = axis_norms(x, axis);
        let (rows, cols) = (x.shape()[0], x.shape()[1]);
        let mut out = x.data().to_vec();
        for r in 0..rows {
            for c in 0..cols {
                let n = if axis == 1 { norms[r] } else { norms[c] };
                out[r * cols + c] /= n.max(NORM_EPS);
            }
        }
        let value = finite("l2_normalize", Tensor::new(x.shape().to_vec(), out)?)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::L2Normalize { input, axis }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let x = &self.node(input)?.value;
        let n = *x.shape().last().unwrap_or(&1);
        let mut out = x.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        let value = finite("softmax", Tensor::new(x.shape().to_vec(), out)?)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Softmax(input), rg))
    }

    pub fn log(&mut self, input: Var) -> Result<Var> {
        let x = &self.node(input)?.value;
        if x.data().iter().any(|&v| v <= 0.0) {
            return Err(TensorError::NonFinite { op: "log" });
        }
        let value = finite("log", x.map(f64::ln))?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Log(input), rg))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let value = finite("sum", Tensor::scalar(self.node(input)?.value.sum()))?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Sum(input), rg))
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let x = &self.node(input)?.value;
        let value = Tensor::scalar(x.sum() / x.len() as f64);
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Mean(input), rg))
    }

    /// Sums the last axis away; a rank-1 input reduces to a one-element tensor.
    pub fn sum_last_axis(&mut self, input: Var) -> Result<Var> {
        let x = &self.node(input)?.value;
        let n = *x.shape().last().unwrap_or(&1);
        let data: Vec<f64> = x.data().chunks_exact(n).map(|r| r.iter().sum()).collect();
        let shape = if x.rank() > 1 {
            x.shape()[..x.rank() - 1].to_vec()
        } else {
            vec![1]
        };
        let value = finite("sum_last_axis", Tensor::new(shape, data)?)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::SumLastAxis(input), rg))
    }

    /// Picks `input[i, index[i]]` from a `[B, K]` tensor.
    pub fn gather(&mut self, input: Var, index: &[usize]) -> Result<Var> {
        let x = &self.node(input)?.value;
        expect_rank("gather", x, 2)?;
        let (rows, k) = (x.shape()[0], x.shape()[1]);
        if index.len() != rows || index.iter().any(|&i| i >= k) {
            return Err(TensorError::InvalidArgument(format!(
                "gather: {} indices into shape {:?}",
                index.len(),
                x.shape()
            )));
        }
        let data = index.iter().enumerate().map(|(r, &i)| x.data()[r * k + i]).collect();
        let value = Tensor::new(vec![rows], data)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Gather(input, index.to_vec()), rg))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let x = &self.node(input)?.value;
        let value = x.reshape(shape).map_err(|_| TensorError::ShapeMismatch {
            op: "reshape",
            lhs: x.shape().to_vec(),
            rhs: shape.to_vec(),
        })?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Reshape(input), rg))
    }

    /// Identity in value; gradients never pass through the returned node.
    pub fn detach(&mut self, input: Var) -> Result<Var> {
        let value = self.node(input)?.value.clone();
        Ok(self.push(value, Op::Detach, false))
    }

    /// Backpropagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.node(loss)?;
        if !root.value.is_scalar() {
            return Err(TensorError::NotScalar {
                shape: root.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(root.value.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, tb.data(), true, &mut ga, false);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], ga)?);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, g.data(), false, &mut gb, false);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], gb)?);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, transpose2(g)),
            Op::Conv2d {
                input,
                kernel,
                bias,
                padding,
            } => {
                let (x, w) = (self.value(*input), self.value(*kernel));
                let geo = conv_geometry(x, w, *padding)?;
                let out_c = w.shape()[0];
                let (patch, ohw) = (geo.patch_len(), geo.out_len());
                let in_len = geo.channels * geo.height * geo.width;
                let need_x = self.requires_grad(*input);
                let need_w = self.requires_grad(*kernel);
                let mut gw = vec![0.0; w.len()];
                let mut gx = if need_x { vec![0.0; x.len()] } else { Vec::new() };
                let mut cols = vec![0.0; patch * ohw];
                let mut gcols = vec![0.0; patch * ohw];
                for (s, (sample, gout)) in x
                    .data()
                    .chunks_exact(in_len)
                    .zip(g.data().chunks_exact(out_c * ohw))
                    .enumerate()
                {
                    if need_w {
                        geo.im2col(sample, &mut cols);
                        gemm(out_c, ohw, patch, gout, false, &cols, true, &mut gw, true);
                    }
                    if need_x {
                        gemm(patch, out_c, ohw, w.data(), true, gout, false, &mut gcols, false);
                        geo.col2im(&gcols, &mut gx[s * in_len..(s + 1) * in_len]);
                    }
                }
                if need_w {
                    self.accumulate(grads, *kernel, Tensor::new(w.shape().to_vec(), gw)?);
                }
                if need_x {
                    self.accumulate(grads, *input, Tensor::new(x.shape().to_vec(), gx)?);
                }
                if let Some(b) = bias {
                    let mut gb = vec![0.0; out_c];
                    for gout in g.data().chunks_exact(out_c * ohw) {
                        for (acc, plane) in gb.iter_mut().zip(gout.chunks_exact(ohw)) {
                            *acc += plane.iter().sum::<f64>();
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![out_c], gb)?);
                }
            }
            Op::AvgPool2(a) => {
                let x = self.value(*a);
                let (h, w) = (x.shape()[2], x.shape()[3]);
                let (oh, ow) = (h / 2, w / 2);
                let mut gx = vec![0.0; x.len()];
                for (dst, src) in gx.chunks_exact_mut(h * w).zip(g.data().chunks_exact(oh * ow)) {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let v = 0.25 * src[oy * ow + ox];
                            let r0 = 2 * oy * w + 2 * ox;
                            dst[r0] += v;
                            dst[r0 + 1] += v;
                            dst[r0 + w] += v;
                            dst[r0 + w + 1] += v;
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), gx)?);
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let gx = g.zip_map(x, |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, *a, gx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, g.zip_map(tb, |gv, bv| gv * bv));
                self.accumulate(grads, *b, g.zip_map(ta, |gv, av| gv * av));
            }
            Op::Div(a, b) => {
                let tb = self.value(*b);
                self.accumulate(grads, *a, g.zip_map(tb, |gv, bv| gv / bv));
                if self.requires_grad(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let q = out.zip_map(tb, |ov, bv| ov / bv);
                    self.accumulate(grads, *b, g.zip_map(&q, |gv, qv| -gv * qv));
                }
            }
            Op::AddBias(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*b) {
                    let n = self.value(*b).len();
                    let mut gb = vec![0.0; n];
                    for row in g.data().chunks_exact(n) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![n], gb)?);
                }
            }
            Op::Scale(a, factor) => self.accumulate(grads, *a, g.map(|v| v * factor)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::ChannelMean(a) => {
                let x = self.value(*a);
                let hw = x.shape()[2] * x.shape()[3];
                let mut gx = vec![0.0; x.len()];
                for (dst, &gv) in gx.chunks_exact_mut(hw).zip(g.data()) {
                    dst.fill(gv / hw as f64);
                }
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), gx)?);
            }
            Op::ChannelStd(a) => {
                let x = self.value(*a);
                let hw = x.shape()[2] * x.shape()[3];
                let (mean, _) = channel_moments(x);
                let mut gx = vec![0.0; x.len()];
                for (i, (dst, src)) in gx
                    .chunks_exact_mut(hw)
                    .zip(x.data().chunks_exact(hw))
                    .enumerate()
                {
                    let sigma = out.data()[i];
                    // zero subgradient at a constant channel
                    if sigma == 0.0 {
                        continue;
                    }
                    let coef = g.data()[i] / (hw as f64 * sigma);
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d = coef * (v - mean[i]);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), gx)?);
            }
            Op::L2Normalize { input, axis } => {
                let x = self.value(*input);
                let norms = axis_norms(x, *axis);
                let (rows, cols) = (x.shape()[0], x.shape()[1]);
                let idx = |r: usize, c: usize| r * cols + c;
                let mut gx = vec![0.0; x.len()];
                let (outer, inner) = if *axis == 1 { (rows, cols) } else { (cols, rows) };
                for o in 0..outer {
                    let at = |i: usize| if *axis == 1 { idx(o, i) } else { idx(i, o) };
                    let n = norms[o];
                    if n > NORM_EPS {
                        let dot: f64 = (0..inner).map(|i| out.data()[at(i)] * g.data()[at(i)]).sum();
                        for i in 0..inner {
                            gx[at(i)] = (g.data()[at(i)] - out.data()[at(i)] * dot) / n;
                        }
                    } else {
                        for i in 0..inner {
                            gx[at(i)] = g.data()[at(i)] / NORM_EPS;
                        }
                    }
                }
                self.accumulate(grads, *input, Tensor::new(x.shape().to_vec(), gx)?);
            }
            Op::Softmax(a) => {
                let n = *out.shape().last().unwrap_or(&1);
                let mut gx = vec![0.0; out.len()];
                for ((dst, y), gr) in gx
                    .chunks_exact_mut(n)
                    .zip(out.data().chunks_exact(n))
                    .zip(g.data().chunks_exact(n))
                {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in dst.iter_mut().zip(y).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(out.shape().to_vec(), gx)?);
            }
            Op::Log(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(x, |gv, xv| gv / xv));
            }
            Op::Sum(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, Tensor::full(x.shape(), g.data()[0]));
            }
            Op::Mean(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, Tensor::full(x.shape(), g.data()[0] / x.len() as f64));
            }
            Op::SumLastAxis(a) => {
                let x = self.value(*a);
                let n = *x.shape().last().unwrap_or(&1);
                let mut gx = vec![0.0; x.len()];
                for (dst, &gv) in gx.chunks_exact_mut(n).zip(g.data()) {
                    dst.fill(gv);
                }
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), gx)?);
            }
            Op::Gather(a, index) => {
                let x = self.value(*a);
                let k = x.shape()[1];
                let mut gx = vec![0.0; x.len()];
                for (r, (&i, &gv)) in index.iter().zip(g.data()).enumerate() {
                    gx[r * k + i] = gv;
                }
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), gx)?);
            }
            Op::Reshape(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, g.reshape(x.shape())?);
            }
        }
        Ok(())
    }
}

fn transpose2(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out).expect("transpose preserves length")
}

/// L2 norms of the vectors along `axis` of a rank-2 tensor.
fn axis_norms(t: &Tensor, axis: usize) -> Vec<f64> {
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    if axis == 1 {
        t.data()
            .chunks_exact(cols)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    } else {
        (0..cols)
            .map(|c| {
                (0..rows)
                    .map(|r| t.data()[r * cols + c].powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Central-difference gradient check of a scalar-valued graph closure.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)` over every
/// coordinate of every input tensor.
pub fn finite_diff_check<F>(f: F, point: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(TensorError::InvalidArgument(format!(
            "finite_diff_check: step must be positive, got {h}"
        )));
    }
    let eval = |inputs: &[Tensor], grad: bool| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars = inputs
            .iter()
            .map(|t| g.leaf(t.clone(), grad))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        if !g.value(out).is_scalar() {
            return Err(TensorError::NotScalar {
                shape: g.value(out).shape().to_vec(),
            });
        }
        Ok((g, vars, out))
    };
    let (graph, vars, out) = eval(point, true)?;
    let grads = graph.backward(out)?;
    let mut worst: f64 = 0.0;
    let mut probe = point.to_vec();
    for (t, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, &point[t]);
        for i in 0..point[t].len() {
            let base = point[t].data()[i];
            probe[t].data_mut()[i] = base + h;
            let (gp, _, op) = eval(&probe, false)?;
            let plus = gp.value(op).item()?;
            probe[t].data_mut()[i] = base - h;
            let (gm, _, om) = eval(&probe, false)?;
            let minus = gm.value(om).item()?;
            probe[t].data_mut()[i] = base;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0.0, 0.0])).unwrap();
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn conv_center_of_ones_is_nine() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0)).unwrap();
        let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0)).unwrap();
        let y = g.conv2d(x, w, None, 1).unwrap();
        let out = g.value(y);
        assert_eq!(out.shape(), &[1, 1, 3, 3]);
        assert_eq!(out.data()[4], 9.0);
        // corners only see a 2x2 window
        assert_eq!(out.data()[0], 4.0);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
        assert!(err.to_string().contains("[2, 3]"), "{err}");
    }

    #[test]
    fn division_by_zero_is_rejected() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0])).unwrap();
        let b = g.constant(t(&[2], &[1.0, 0.0])).unwrap();
        assert_eq!(g.div(a, b), Err(TensorError::ZeroDenominator { op: "div" }));
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0])).unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn detached_factor_is_a_constant() {
        let mut g = Graph::new();
        let x = g.param(t(&[1], &[3.0])).unwrap();
        let d = g.detach(x).unwrap();
        let p = g.mul(d, x).unwrap();
        let loss = g.sum(p).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0]);
    }

    #[test]
    fn kl_gradient_vanishes_at_the_target() {
        let mut g = Graph::new();
        let logits = g.param(t(&[2], &[0.0, 0.0])).unwrap();
        let target = g.constant(t(&[2], &[0.5, 0.5])).unwrap();
        let s = g.softmax(logits).unwrap();
        let ls = g.log(s).unwrap();
        let lt = g.log(target).unwrap();
        let diff = g.sub(lt, ls).unwrap();
        let w = g.mul(target, diff).unwrap();
        let kl = g.sum(w).unwrap();
        let grads = g.backward(kl).unwrap();
        assert_eq!(grads.get(logits).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_nodes() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(x), Err(TensorError::NotScalar { .. })));
        let other = Graph::new();
        assert_eq!(other.backward(x).unwrap_err(), TensorError::UnknownNode(0));
    }

    #[test]
    fn finite_diff_on_simple_closures() {
        let sq = |g: &mut Graph, v: &[Var]| {
            let p = g.mul(v[0], v[0])?;
            g.sum(p)
        };
        let err = finite_diff_check(sq, &[t(&[2], &[1.0, 2.0])], 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");

        let constant = |g: &mut Graph, _: &[Var]| g.constant(Tensor::scalar(4.2));
        let err = finite_diff_check(constant, &[t(&[3], &[1.0, 2.0, 3.0])], 1e-5).unwrap();
        assert!(err.abs() < 1e-10);

        let identity = |_: &mut Graph, v: &[Var]| Ok(v[0]);
        assert!(matches!(
            finite_diff_check(identity, &[t(&[2], &[1.0, 2.0])], 1e-5),
            Err(TensorError::NotScalar { .. })
        ));
    }

    #[test]
    fn l2_normalize_guards_zero_vectors() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[0.0, 0.0, 3.0, 4.0])).unwrap();
        let y = g.l2_normalize(x, 1).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.6, 0.8]);
        let cols = g.l2_normalize(x, 0).unwrap();
        assert_eq!(g.value(cols).data(), &[0.0, 0.0, 1.0, 1.0]);
    }
}
