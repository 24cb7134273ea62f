use std::sync::Arc;

use crate::error::Result;

use super::tensor::Tensor;

/// Primitive operation recorded on a graph node, with the attributes its
/// backward rule needs. Operands live on the node itself.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    Offset(f64),
    Exp,
    Log,
    Sqrt,
    Square,
    Abs,
    Relu,
    LeakyRelu(f64),
    MatMul,
    Transpose,
    Conv2d {
        stride: usize,
        padding: usize,
    },
    Conv2dInputGrad {
        stride: usize,
        padding: usize,
        input_shape: Vec<usize>,
    },
    Conv2dKernelGrad {
        stride: usize,
        padding: usize,
        kernel_shape: Vec<usize>,
    },
    Sum,
    BroadcastTo {
        shape: Vec<usize>,
    },
    SumTo {
        shape: Vec<usize>,
    },
    Softmax {
        axis: usize,
    },
    LogSoftmax {
        axis: usize,
    },
    Reshape {
        shape: Vec<usize>,
    },
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        len: usize,
    },
    PadAxis {
        axis: usize,
        start: usize,
        total: usize,
    },
    IndexSelect {
        indices: Arc<Vec<usize>>,
    },
    IndexAdd {
        indices: Arc<Vec<usize>>,
        rows: usize,
    },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::Offset(_) => "offset",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::Square => "square",
            Op::Abs => "abs",
            Op::Relu => "relu",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Conv2d { .. } => "conv2d",
            Op::Conv2dInputGrad { .. } => "conv2d_input_grad",
            Op::Conv2dKernelGrad { .. } => "conv2d_kernel_grad",
            Op::Sum => "sum",
            Op::BroadcastTo { .. } => "broadcast_to",
            Op::SumTo { .. } => "sum_to",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Reshape { .. } => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::PadAxis { .. } => "pad_axis",
            Op::IndexSelect { .. } => "index_select",
            Op::IndexAdd { .. } => "index_add",
        }
    }

    /// Vector-Jacobian products for the operands flagged in `needs`.
    ///
    /// Every rule is written with differentiable tensor operations, so when
    /// grad mode is on the returned gradients are themselves graph-linked.
    pub(crate) fn backward(
        &self,
        inputs: &[Tensor],
        out: &Tensor,
        g: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let want = |i: usize| needs.get(i).copied().unwrap_or(false);
        let x = &inputs[0];
        let one = |t: Result<Tensor>| -> Result<Vec<Option<Tensor>>> { Ok(vec![Some(t?)]) };
        match self {
            Op::Add => Ok(vec![Some(g.clone()), Some(g.clone())]),
            Op::Sub => Ok(vec![Some(g.clone()), want(1).then(|| g.neg())]),
            Op::Mul => {
                let y = &inputs[1];
                Ok(vec![
                    if want(0) { Some(g.mul(y)?) } else { None },
                    if want(1) { Some(g.mul(x)?) } else { None },
                ])
            }
            Op::Div => {
                let y = &inputs[1];
                Ok(vec![
                    if want(0) { Some(g.div(y)?) } else { None },
                    if want(1) { Some(g.mul(out)?.div(y)?.neg()) } else { None },
                ])
            }
            Op::Neg => one(Ok(g.neg())),
            Op::Scale(c) => one(Ok(g.scale(*c))),
            Op::Offset(_) => one(Ok(g.clone())),
            Op::Exp => one(g.mul(out)),
            Op::Log => one(g.div(x)),
            Op::Sqrt => one(g.div(&out.scale(2.0))),
            Op::Square => one(g.mul(&x.scale(2.0))),
            Op::Abs => one(g.mul(&step_mask(x, |v| v.signum() * f64::from(u8::from(v != 0.0)))?)),
            Op::Relu => one(g.mul(&step_mask(x, |v| if v > 0.0 { 1.0 } else { 0.0 })?)),
            Op::LeakyRelu(slope) => {
                let s = *slope;
                one(g.mul(&step_mask(x, |v| if v > 0.0 { 1.0 } else { s })?))
            }
            Op::MatMul => {
                let y = &inputs[1];
                Ok(vec![
                    if want(0) { Some(g.matmul(&y.transpose()?)?) } else { None },
                    if want(1) { Some(x.transpose()?.matmul(g)?) } else { None },
                ])
            }
            Op::Transpose => one(g.transpose()),
            Op::Conv2d { stride, padding } => {
                let k = &inputs[1];
                Ok(vec![
                    if want(0) {
                        Some(g.conv2d_input_grad(k, x.shape(), *stride, *padding)?)
                    } else {
                        None
                    },
                    if want(1) {
                        Some(x.conv2d_kernel_grad(g, k.shape(), *stride, *padding)?)
                    } else {
                        None
                    },
                ])
            }
            Op::Conv2dInputGrad { stride, padding, .. } => {
                // inputs: (grad_out, kernel); g has the input-map shape
                let (gy, k) = (&inputs[0], &inputs[1]);
                Ok(vec![
                    if want(0) { Some(g.conv2d(k, *stride, *padding)?) } else { None },
                    if want(1) {
                        Some(g.conv2d_kernel_grad(gy, k.shape(), *stride, *padding)?)
                    } else {
                        None
                    },
                ])
            }
            Op::Conv2dKernelGrad { stride, padding, .. } => {
                // inputs: (input map, grad_out); g has the kernel shape
                let (xm, gy) = (&inputs[0], &inputs[1]);
                Ok(vec![
                    if want(0) {
                        Some(gy.conv2d_input_grad(g, xm.shape(), *stride, *padding)?)
                    } else {
                        None
                    },
                    if want(1) { Some(xm.conv2d(g, *stride, *padding)?) } else { None },
                ])
            }
            Op::Sum | Op::SumTo { .. } => one(g.broadcast_to(x.shape())),
            Op::BroadcastTo { .. } => one(g.sum_to(x.shape())),
            Op::Softmax { axis } => {
                let gy = g.mul(out)?;
                one(out.mul(&g.sub(&gy.sum_axis_keep(*axis)?)?))
            }
            Op::LogSoftmax { axis } => {
                let p = x.softmax(*axis)?;
                one(g.sub(&p.mul(&g.sum_axis_keep(*axis)?)?))
            }
            Op::Reshape { .. } => one(g.reshape(x.shape())),
            Op::Concat { axis } => {
                let mut start = 0;
                let mut grads = Vec::with_capacity(inputs.len());
                for (i, part) in inputs.iter().enumerate() {
                    let len = part.shape()[*axis];
                    grads.push(if want(i) { Some(g.slice(*axis, start, len)?) } else { None });
                    start += len;
                }
                Ok(grads)
            }
            Op::Slice { axis, start, .. } => one(g.pad_axis(*axis, *start, x.shape()[*axis])),
            Op::PadAxis { axis, start, .. } => one(g.slice(*axis, *start, x.shape()[*axis])),
            Op::IndexSelect { indices } => one(g.index_add(indices, x.shape()[0])),
            Op::IndexAdd { indices, .. } => one(g.index_select(indices)),
        }
    }
}

/// Constant tensor of `f(x)` used as a locally constant derivative factor.
fn step_mask(x: &Tensor, f: impl Fn(f64) -> f64) -> Result<Tensor> {
    Tensor::new(x.data().iter().map(|&v| f(v)).collect(), x.shape())
}
