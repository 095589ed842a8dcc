//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Operations append nodes to a [`Graph`]; every node owns its output
//! [`Tensor`]. `backward` seeds a scalar node with gradient 1 and walks the
//! tape once in reverse, accumulating additively into each parent so fan-out
//! is handled naturally. Nodes reference only earlier nodes, so the tape is
//! topologically ordered by construction.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid_argument, shape_mismatch, Error, Result};
use crate::losses::JaccardOp;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        dilation: usize,
    },
    InstanceNorm {
        input: Var,
        scale: Var,
        shift: Var,
        // per-channel statistics saved by the forward pass
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu {
        input: Var,
    },
    Add {
        lhs: Var,
        rhs: Var,
    },
    ScalarMul {
        input: Var,
        factor: f64,
    },
    WeightedSum {
        input: Var,
        coeffs: Vec<f64>,
    },
    ReduceMean {
        input: Var,
    },
    SoftmaxChannels {
        input: Var,
    },
    Jaccard(JaccardOp),
}

pub(crate) struct Node {
    pub out: Tensor,
    pub op: Op,
    pub requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Enter a tensor as a graph input.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad;
        self.push(tensor, Op::Leaf, requires_grad)
    }

    /// Output tensor of a node.
    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].out
    }

    /// Gradient of the backward seed w.r.t. this node, if one was populated.
    pub fn grad(&self, var: Var) -> Option<&[f64]> {
        self.nodes[var.0].out.grad.as_deref()
    }

    pub(crate) fn push(&mut self, out: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut out = out;
        out.requires_grad = requires_grad;
        self.nodes.push(Node {
            out,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Dilated 2D cross-correlation with zero padding chosen so spatial size
    /// is preserved. `input` is `[Cin,H,W]`, `kernel` is `[Cout,Cin,k,k]`
    /// with odd `k`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, dilation: usize) -> Result<Var> {
        let ishape = self.value(input).shape().to_vec();
        let kshape = self.value(kernel).shape().to_vec();
        if ishape.len() != 3 {
            return Err(shape_mismatch(
                "conv2d",
                format!("input must be [Cin,H,W], got {ishape:?}"),
            ));
        }
        if kshape.len() != 4 || kshape[2] != kshape[3] {
            return Err(shape_mismatch(
                "conv2d",
                format!("kernel must be [Cout,Cin,k,k], got {kshape:?}"),
            ));
        }
        if kshape[1] != ishape[0] {
            return Err(shape_mismatch(
                "conv2d",
                format!(
                    "kernel expects {} input channels, image has {}",
                    kshape[1], ishape[0]
                ),
            ));
        }
        if kshape[2] % 2 == 0 {
            return Err(invalid_argument(
                "conv2d",
                format!("kernel size {} must be odd", kshape[2]),
            ));
        }
        if dilation < 1 {
            return Err(invalid_argument(
                "conv2d",
                format!("dilation {dilation} must be >= 1"),
            ));
        }
        let (h, w) = (ishape[1], ishape[2]);
        let out_data = conv2d_forward(
            self.value(input).data(),
            ishape[0],
            h,
            w,
            self.value(kernel).data(),
            kshape[0],
            kshape[2],
            dilation,
        );
        let out = Tensor::new(vec![kshape[0], h, w], out_data)?;
        let requires_grad = self.req(input) || self.req(kernel);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                dilation,
            },
            requires_grad,
        ))
    }

    /// Per-channel standardization over the spatial dimensions followed by a
    /// learned affine map. A constant channel maps to the shift value.
    pub fn instance_norm(&mut self, input: Var, scale: Var, shift: Var, eps: f64) -> Result<Var> {
        let ishape = self.value(input).shape().to_vec();
        if ishape.len() != 3 {
            return Err(shape_mismatch(
                "instance_norm",
                format!("input must be [C,H,W], got {ishape:?}"),
            ));
        }
        let (c, h, w) = (ishape[0], ishape[1], ishape[2]);
        if h * w < 2 {
            return Err(invalid_argument(
                "instance_norm",
                format!("spatial size {h}x{w} must hold at least 2 values"),
            ));
        }
        if self.value(scale).shape() != [c] || self.value(shift).shape() != [c] {
            return Err(shape_mismatch(
                "instance_norm",
                format!(
                    "scale/shift must both be [{c}], got {:?} and {:?}",
                    self.value(scale).shape(),
                    self.value(shift).shape()
                ),
            ));
        }
        if !(eps > 0.0) {
            return Err(invalid_argument(
                "instance_norm",
                format!("eps {eps} must be > 0"),
            ));
        }
        let (out_data, mean, inv_std) = instance_norm_forward(
            self.value(input).data(),
            c,
            h * w,
            self.value(scale).data(),
            self.value(shift).data(),
            eps,
        );
        let out = Tensor::new(ishape, out_data)?;
        let requires_grad = self.req(input) || self.req(scale) || self.req(shift);
        Ok(self.push(
            out,
            Op::InstanceNorm {
                input,
                scale,
                shift,
                mean,
                inv_std,
            },
            requires_grad,
        ))
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is taken as 0.
    pub fn relu(&mut self, input: Var) -> Var {
        let src = self.value(input);
        let data = src
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect();
        let out = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let requires_grad = self.req(input);
        self.push(out, Op::Relu { input }, requires_grad)
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        if self.value(lhs).shape() != self.value(rhs).shape() {
            return Err(shape_mismatch(
                "add",
                format!(
                    "{:?} vs {:?}",
                    self.value(lhs).shape(),
                    self.value(rhs).shape()
                ),
            ));
        }
        let data = self
            .value(lhs)
            .data()
            .iter()
            .zip(self.value(rhs).data())
            .map(|(a, b)| a + b)
            .collect();
        let out = Tensor::new(self.value(lhs).shape().to_vec(), data)?;
        let requires_grad = self.req(lhs) || self.req(rhs);
        Ok(self.push(out, Op::Add { lhs, rhs }, requires_grad))
    }

    pub fn scalar_mul(&mut self, input: Var, factor: f64) -> Result<Var> {
        if !factor.is_finite() {
            return Err(invalid_argument(
                "scalar_mul",
                format!("factor {factor} must be finite"),
            ));
        }
        let src = self.value(input);
        let data = src.data().iter().map(|&v| factor * v).collect();
        let out = Tensor::new(src.shape().to_vec(), data)?;
        let requires_grad = self.req(input);
        Ok(self.push(out, Op::ScalarMul { input, factor }, requires_grad))
    }

    /// Scalar dot product with a constant coefficient vector.
    pub fn weighted_sum(&mut self, input: Var, coeffs: Vec<f64>) -> Result<Var> {
        let src = self.value(input);
        if coeffs.len() != src.numel() {
            return Err(shape_mismatch(
                "weighted_sum",
                format!("{} coefficients vs {} elements", coeffs.len(), src.numel()),
            ));
        }
        let value: f64 = src.data().iter().zip(&coeffs).map(|(x, c)| x * c).sum();
        let out = Tensor::scalar(value);
        let requires_grad = self.req(input);
        Ok(self.push(out, Op::WeightedSum { input, coeffs }, requires_grad))
    }

    /// Mean over all elements, as a scalar node.
    pub fn reduce_mean(&mut self, input: Var) -> Var {
        let src = self.value(input);
        let n = src.numel() as f64;
        let value: f64 = src.data().iter().sum::<f64>() / n;
        let out = Tensor::scalar(value);
        let requires_grad = self.req(input);
        self.push(out, Op::ReduceMean { input }, requires_grad)
    }

    /// Softmax over the channel axis of a `[C,H,W]` tensor; every pixel
    /// column of the output sums to 1.
    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        let ishape = self.value(input).shape().to_vec();
        if ishape.len() != 3 {
            return Err(shape_mismatch(
                "softmax_channels",
                format!("input must be [C,H,W], got {ishape:?}"),
            ));
        }
        let (c, plane) = (ishape[0], ishape[1] * ishape[2]);
        let out_data = softmax_channels_forward(self.value(input).data(), c, plane);
        let out = Tensor::new(ishape, out_data)?;
        let requires_grad = self.req(input);
        Ok(self.push(out, Op::SoftmaxChannels { input }, requires_grad))
    }

    /// Reverse pass from a scalar seed. Every reachable node whose tensor
    /// requires gradients receives `d(seed)/d(node)` in its grad slot;
    /// accumulation is additive across fan-out.
    pub fn backward(&mut self, seed: Var) -> Result<()> {
        if !self.nodes[seed.0].out.is_scalar() {
            return Err(Error::NonScalarSeed {
                shape: self.nodes[seed.0].out.shape().to_vec(),
            });
        }
        if self.backward_done {
            return Err(Error::BackwardAlreadyRun);
        }
        self.backward_done = true;

        // Restrict the reverse sweep to ancestors of the seed.
        let mut needed = vec![false; self.nodes.len()];
        needed[seed.0] = true;
        for i in (0..=seed.0).rev() {
            if !needed[i] {
                continue;
            }
            for parent in op_parents(&self.nodes[i].op) {
                needed[parent.0] = true;
            }
        }

        self.nodes[seed.0].out.grad_mut()[0] += 1.0;

        for i in (0..=seed.0).rev() {
            if !needed[i] || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(out_grad) = self.nodes[i].out.grad.clone() else {
                continue;
            };
            self.dispatch_backward(i, &out_grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, var: Var, contribution: &[f64]) {
        let slot = self.nodes[var.0].out.grad_mut();
        for (g, c) in slot.iter_mut().zip(contribution) {
            *g += c;
        }
    }

    fn dispatch_backward(&mut self, index: usize, g: &[f64]) {
        match &self.nodes[index].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                dilation,
            } => {
                let (input, kernel, dilation) = (*input, *kernel, *dilation);
                let ishape = self.value(input).shape();
                let kshape = self.value(kernel).shape();
                let (cin, h, w) = (ishape[0], ishape[1], ishape[2]);
                let (cout, k) = (kshape[0], kshape[2]);
                if self.req(input) {
                    let gi = conv2d_backward_input(
                        g,
                        self.value(kernel).data(),
                        cin,
                        h,
                        w,
                        cout,
                        k,
                        dilation,
                    );
                    self.accumulate(input, &gi);
                }
                if self.req(kernel) {
                    let gk = conv2d_backward_kernel(
                        g,
                        self.value(input).data(),
                        cin,
                        h,
                        w,
                        cout,
                        k,
                        dilation,
                    );
                    self.accumulate(kernel, &gk);
                }
            }
            Op::InstanceNorm {
                input,
                scale,
                shift,
                mean,
                inv_std,
            } => {
                let (input, scale, shift) = (*input, *scale, *shift);
                let (mean, inv_std) = (mean.clone(), inv_std.clone());
                let c = self.value(scale).numel();
                let plane = self.value(input).numel() / c;
                let (gi, gs, gb) = instance_norm_backward(
                    g,
                    self.value(input).data(),
                    self.value(scale).data(),
                    c,
                    plane,
                    &mean,
                    &inv_std,
                );
                if self.req(input) {
                    self.accumulate(input, &gi);
                }
                if self.req(scale) {
                    self.accumulate(scale, &gs);
                }
                if self.req(shift) {
                    self.accumulate(shift, &gb);
                }
            }
            Op::Relu { input } => {
                let input = *input;
                if self.req(input) {
                    let contrib: Vec<f64> = self.nodes[index]
                        .out
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&y, &gy)| if y > 0.0 { gy } else { 0.0 })
                        .collect();
                    self.accumulate(input, &contrib);
                }
            }
            Op::Add { lhs, rhs } => {
                let (lhs, rhs) = (*lhs, *rhs);
                if self.req(lhs) {
                    self.accumulate(lhs, g);
                }
                if self.req(rhs) {
                    self.accumulate(rhs, g);
                }
            }
            Op::ScalarMul { input, factor } => {
                let (input, factor) = (*input, *factor);
                if self.req(input) {
                    let contrib: Vec<f64> = g.iter().map(|&gy| factor * gy).collect();
                    self.accumulate(input, &contrib);
                }
            }
            Op::WeightedSum { input, coeffs } => {
                let input = *input;
                if self.req(input) {
                    let contrib: Vec<f64> = coeffs.iter().map(|&c| c * g[0]).collect();
                    self.accumulate(input, &contrib);
                }
            }
            Op::ReduceMean { input } => {
                let input = *input;
                if self.req(input) {
                    let n = self.value(input).numel();
                    let share = g[0] / n as f64;
                    let contrib = vec![share; n];
                    self.accumulate(input, &contrib);
                }
            }
            Op::SoftmaxChannels { input } => {
                let input = *input;
                if self.req(input) {
                    let shape = self.value(input).shape();
                    let (c, plane) = (shape[0], shape[1] * shape[2]);
                    let contrib =
                        softmax_channels_backward(g, self.nodes[index].out.data(), c, plane);
                    self.accumulate(input, &contrib);
                }
            }
            Op::Jaccard(op) => {
                let op = op.clone();
                let (pred, target) = (op.pred, op.target);
                if self.req(pred) {
                    let contrib =
                        op.input_grad(g[0], self.value(pred).data(), self.value(target).data());
                    self.accumulate(pred, &contrib);
                }
                if self.req(target) {
                    let contrib =
                        op.input_grad(g[0], self.value(target).data(), self.value(pred).data());
                    self.accumulate(target, &contrib);
                }
            }
        }
    }
}

fn op_parents(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => Vec::new(),
        Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
        Op::InstanceNorm {
            input,
            scale,
            shift,
            ..
        } => vec![*input, *scale, *shift],
        Op::Relu { input }
        | Op::ScalarMul { input, .. }
        | Op::WeightedSum { input, .. }
        | Op::ReduceMean { input }
        | Op::SoftmaxChannels { input } => vec![*input],
        Op::Add { lhs, rhs } => vec![*lhs, *rhs],
        Op::Jaccard(op) => vec![op.pred, op.target],
    }
}

// ---------------------------------------------------------------------------
// Kernels. Convolution loops are arranged so the innermost loop runs over
// contiguous row slices; per output element, contributions accumulate in
// (ci, ky, kx) order, which an accumulator-based oracle reproduces exactly.
// ---------------------------------------------------------------------------

struct TapRange {
    dy: isize,
    dx: isize,
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
}

fn tap_range(h: usize, w: usize, k: usize, ky: usize, kx: usize, dilation: usize) -> TapRange {
    let r = (k / 2) as isize;
    let d = dilation as isize;
    let dy = (ky as isize - r) * d;
    let dx = (kx as isize - r) * d;
    let y0 = (-dy).max(0) as usize;
    let y1 = (h as isize - dy).clamp(0, h as isize) as usize;
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx).clamp(0, w as isize) as usize;
    TapRange {
        dy,
        dx,
        y0,
        y1,
        x0,
        x1,
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kernel: &[f64],
    cout: usize,
    k: usize,
    dilation: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; cout * h * w];
    for o in 0..cout {
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let t = tap_range(h, w, k, ky, kx, dilation);
                    if t.y0 >= t.y1 || t.x0 >= t.x1 {
                        continue;
                    }
                    let wgt = kernel[((o * cin + ci) * k + ky) * k + kx];
                    for y in t.y0..t.y1 {
                        let iy = (y as isize + t.dy) as usize;
                        let ob = (o * h + y) * w;
                        let ib = ((ci * h + iy) * w) as isize + t.dx;
                        let orow = &mut out[ob + t.x0..ob + t.x1];
                        let irow =
                            &input[(ib + t.x0 as isize) as usize..(ib + t.x1 as isize) as usize];
                        for (a, b) in orow.iter_mut().zip(irow) {
                            *a += wgt * *b;
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_input(
    out_grad: &[f64],
    kernel: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    dilation: usize,
) -> Vec<f64> {
    let mut gin = vec![0.0; cin * h * w];
    for o in 0..cout {
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let t = tap_range(h, w, k, ky, kx, dilation);
                    if t.y0 >= t.y1 || t.x0 >= t.x1 {
                        continue;
                    }
                    let wgt = kernel[((o * cin + ci) * k + ky) * k + kx];
                    for y in t.y0..t.y1 {
                        let iy = (y as isize + t.dy) as usize;
                        let ob = (o * h + y) * w;
                        let ib = ((ci * h + iy) * w) as isize + t.dx;
                        let grow = &out_grad[ob + t.x0..ob + t.x1];
                        let irow =
                            &mut gin[(ib + t.x0 as isize) as usize..(ib + t.x1 as isize) as usize];
                        for (a, b) in irow.iter_mut().zip(grow) {
                            *a += wgt * *b;
                        }
                    }
                }
            }
        }
    }
    gin
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_kernel(
    out_grad: &[f64],
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    dilation: usize,
) -> Vec<f64> {
    let mut gker = vec![0.0; cout * cin * k * k];
    for o in 0..cout {
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let t = tap_range(h, w, k, ky, kx, dilation);
                    if t.y0 >= t.y1 || t.x0 >= t.x1 {
                        continue;
                    }
                    let mut acc = 0.0;
                    for y in t.y0..t.y1 {
                        let iy = (y as isize + t.dy) as usize;
                        let ob = (o * h + y) * w;
                        let ib = ((ci * h + iy) * w) as isize + t.dx;
                        let grow = &out_grad[ob + t.x0..ob + t.x1];
                        let irow =
                            &input[(ib + t.x0 as isize) as usize..(ib + t.x1 as isize) as usize];
                        for (a, b) in grow.iter().zip(irow) {
                            acc += a * b;
                        }
                    }
                    gker[((o * cin + ci) * k + ky) * k + kx] = acc;
                }
            }
        }
    }
    gker
}

fn instance_norm_forward(
    input: &[f64],
    c: usize,
    plane: usize,
    scale: &[f64],
    shift: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; input.len()];
    let mut means = vec![0.0; c];
    let mut inv_stds = vec![0.0; c];
    let n = plane as f64;
    for ch in 0..c {
        let xs = &input[ch * plane..(ch + 1) * plane];
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / crate::math::sqrt(var + eps);
        let (g, b) = (scale[ch], shift[ch]);
        for (o, &x) in out[ch * plane..(ch + 1) * plane].iter_mut().zip(xs) {
            *o = (x - mean) * inv_std * g + b;
        }
        means[ch] = mean;
        inv_stds[ch] = inv_std;
    }
    (out, means, inv_stds)
}

fn instance_norm_backward(
    out_grad: &[f64],
    input: &[f64],
    scale: &[f64],
    c: usize,
    plane: usize,
    mean: &[f64],
    inv_std: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gin = vec![0.0; input.len()];
    let mut gscale = vec![0.0; c];
    let mut gshift = vec![0.0; c];
    let n = plane as f64;
    for ch in 0..c {
        let xs = &input[ch * plane..(ch + 1) * plane];
        let gy = &out_grad[ch * plane..(ch + 1) * plane];
        let (m, is) = (mean[ch], inv_std[ch]);
        let mut sum_gy = 0.0;
        let mut sum_gy_xhat = 0.0;
        for (&g, &x) in gy.iter().zip(xs) {
            sum_gy += g;
            sum_gy_xhat += g * (x - m) * is;
        }
        gshift[ch] = sum_gy;
        gscale[ch] = sum_gy_xhat;
        let k = scale[ch] * is;
        let mean_gy = sum_gy / n;
        let mean_gy_xhat = sum_gy_xhat / n;
        for ((o, &g), &x) in gin[ch * plane..(ch + 1) * plane].iter_mut().zip(gy).zip(xs) {
            let xhat = (x - m) * is;
            *o = k * (g - mean_gy - xhat * mean_gy_xhat);
        }
    }
    (gin, gscale, gshift)
}

fn softmax_channels_forward(input: &[f64], c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; input.len()];
    for p in 0..plane {
        let mut max = f64::NEG_INFINITY;
        for ch in 0..c {
            max = max.max(input[ch * plane + p]);
        }
        let mut sum = 0.0;
        for ch in 0..c {
            let e = crate::math::exp(input[ch * plane + p] - max);
            out[ch * plane + p] = e;
            sum += e;
        }
        for ch in 0..c {
            out[ch * plane + p] /= sum;
        }
    }
    out
}

fn softmax_channels_backward(out_grad: &[f64], out: &[f64], c: usize, plane: usize) -> Vec<f64> {
    let mut gin = vec![0.0; out.len()];
    for p in 0..plane {
        let mut dot = 0.0;
        for ch in 0..c {
            dot += out_grad[ch * plane + p] * out[ch * plane + p];
        }
        for ch in 0..c {
            let i = ch * plane + p;
            gin[i] = out[i] * (out_grad[i] - dot);
        }
    }
    gin
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leafg(g: &mut Graph, shape: Vec<usize>, data: Vec<f64>) -> Var {
        g.leaf(Tensor::new(shape, data).unwrap().with_requires_grad())
    }

    #[test]
    fn linear_chain_grad() {
        // y = 2x at x = 3 -> dy/dx = 2
        let mut g = Graph::new();
        let x = leafg(&mut g, vec![], vec![3.0]);
        let y = g.scalar_mul(x, 2.0).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0]);
        assert_eq!(g.value(y).scalar_value().unwrap(), 6.0);
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x + x at x = 3 -> dy/dx = 2
        let mut g = Graph::new();
        let x = leafg(&mut g, vec![], vec![3.0]);
        let y = g.add(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_seed() {
        let mut g = Graph::new();
        let x = leafg(&mut g, vec![2], vec![1.0, 2.0]);
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(Error::NonScalarSeed { .. })));
    }

    #[test]
    fn backward_runs_once() {
        let mut g = Graph::new();
        let x = leafg(&mut g, vec![], vec![1.0]);
        let y = g.scalar_mul(x, 1.0).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.backward(y), Err(Error::BackwardAlreadyRun));
    }

    #[test]
    fn relu_definition_and_subgradient() {
        let mut g = Graph::new();
        let x = leafg(&mut g, vec![3], vec![-1.0, 0.0, 2.0]);
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.reduce_mean(y);
        g.backward(s).unwrap();
        // subgradient at 0 is 0
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0 / 3.0]);
    }

    #[test]
    fn identity_shaped_kernel_doubles() {
        // all-ones 1x3x3 input, 1x1x1x1 kernel of 2 -> all twos
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 3, 3], vec![1.0; 9]).unwrap());
        let k = leafg(&mut g, vec![1, 1, 1, 1], vec![2.0]);
        let y = g.conv2d(x, k, 1).unwrap();
        assert_eq!(g.value(y).data(), &[2.0; 9]);
    }

    #[test]
    fn dilated_kernel_sees_holes() {
        // [0,0,1,0,0] * [1,1,1] at dilation 2 -> [1,0,1,0,1]
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 1, 5], vec![0.0, 0.0, 1.0, 0.0, 0.0]).unwrap());
        let k = g.leaf(Tensor::new(vec![1, 1, 1, 3], vec![1.0, 1.0, 1.0]).unwrap());
        assert!(g.conv2d(x, k, 2).is_err(), "non-square kernel rejected");
        let k = g.leaf(
            Tensor::new(vec![1, 1, 3, 3], {
                // middle row [1,1,1], zero elsewhere: acts as the 1-D kernel on a 1-row image
                let mut v = vec![0.0; 9];
                v[3] = 1.0;
                v[4] = 1.0;
                v[5] = 1.0;
                v
            })
            .unwrap(),
        );
        let y = g.conv2d(x, k, 2).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn conv_rejects_bad_args() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2, 3, 3], vec![0.0; 18]).unwrap());
        let k_wrong_cin = g.leaf(Tensor::new(vec![1, 1, 3, 3], vec![0.0; 9]).unwrap());
        assert!(g.conv2d(x, k_wrong_cin, 1).is_err());
        let k_even = g.leaf(Tensor::new(vec![1, 2, 2, 2], vec![0.0; 8]).unwrap());
        assert!(g.conv2d(x, k_even, 1).is_err());
        let k_ok = g.leaf(Tensor::new(vec![1, 2, 3, 3], vec![0.0; 18]).unwrap());
        assert!(g.conv2d(x, k_ok, 0).is_err());
    }

    #[test]
    fn conv_matches_naive_accumulation_bitwise() {
        // Each output pixel accumulates its taps in (cin, ky, kx) order, so a
        // scalar loop over the same order must agree to the last bit. This
        // pins the summation order documented on conv2d.
        use rand::Rng;
        use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let cases = [
            (1usize, 1usize, 5usize, 4usize, 3usize, 1usize),
            (2, 3, 6, 7, 3, 1),
            (3, 2, 9, 8, 3, 2),
            (2, 2, 7, 7, 1, 1),
            (1, 4, 8, 5, 5, 2),
        ];
        for (cin, cout, h, w, k, dilation) in cases {
            let input: Vec<f64> = (0..cin * h * w)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let kernel: Vec<f64> = (0..cout * cin * k * k)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let mut g = Graph::new();
            let x = g.leaf(Tensor::new(vec![cin, h, w], input.clone()).unwrap());
            let kv = g.leaf(Tensor::new(vec![cout, cin, k, k], kernel.clone()).unwrap());
            let y = g.conv2d(x, kv, dilation).unwrap();
            let got = g.value(y).data();

            let half = ((k / 2) * dilation) as isize;
            for o in 0..cout {
                for py in 0..h {
                    for px in 0..w {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = py as isize + (ky * dilation) as isize - half;
                                    let ix = px as isize + (kx * dilation) as isize - half;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += kernel[((o * cin + ci) * k + ky) * k + kx]
                                        * input[(ci * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                        let out = got[(o * h + py) * w + px];
                        assert_eq!(
                            out.to_bits(),
                            acc.to_bits(),
                            "({o},{py},{px}) cin={cin} k={k} dilation={dilation}: {out} vs {acc}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn instance_norm_standardizes() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let scale = g.leaf(Tensor::new(vec![1], vec![1.0]).unwrap());
        let shift = g.leaf(Tensor::new(vec![1], vec![0.0]).unwrap());
        let y = g.instance_norm(x, scale, shift, 1e-5).unwrap();
        let out = g.value(y).data();
        let mean: f64 = out.iter().sum::<f64>() / 4.0;
        let var: f64 = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!(
            (var - 1.0).abs() < 1e-4,
            "variance {var} should be 1 within eps"
        );
    }

    #[test]
    fn instance_norm_constant_channel_maps_to_shift() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 1, 4], vec![5.0; 4]).unwrap());
        let scale = g.leaf(Tensor::new(vec![1], vec![3.0]).unwrap());
        let shift = g.leaf(Tensor::new(vec![1], vec![-2.0]).unwrap());
        let y = g.instance_norm(x, scale, shift, 1e-5).unwrap();
        for &v in g.value(y).data() {
            assert!((v - -2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn instance_norm_zero_scale_gives_shift() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let scale = g.leaf(Tensor::new(vec![1], vec![0.0]).unwrap());
        let shift = g.leaf(Tensor::new(vec![1], vec![0.5]).unwrap());
        let y = g.instance_norm(x, scale, shift, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.5; 4]);
    }

    #[test]
    fn softmax_is_a_distribution() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2, 1, 1], vec![0.0, 0.0]).unwrap());
        let y = g.softmax_channels(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }
}
