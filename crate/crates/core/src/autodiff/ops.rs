use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};

use super::kernels::{self, ConvGeom};
use super::op::Op;
use super::tensor::{numel, Tensor};

fn unary(x: &Tensor, op: Op, f: impl Fn(f64) -> f64) -> Tensor {
    let data = x.data().iter().map(|&v| f(v)).collect();
    Tensor::from_op(data, x.shape().to_vec(), op, vec![x.clone()])
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::invalid(op, format!("axis {axis} out of range for shape {shape:?}")));
    }
    Ok(())
}

impl Tensor {
    /// Applies `f` elementwise after broadcasting both operands to a common shape.
    fn binary(&self, other: &Tensor, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape() != other.shape() {
            let shape = kernels::broadcast_shape(self.shape(), other.shape())
                .ok_or_else(|| Error::shape(name, &[self.shape(), other.shape()]))?;
            let a = self.broadcast_to(&shape)?;
            let b = other.broadcast_to(&shape)?;
            return a.binary(&b, name, op, f);
        }
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor::from_op(data, self.shape().to_vec(), op, vec![self.clone(), other.clone()]))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", Op::Sub, |a, b| a - b)
    }

    /// Elementwise product; a channel mask `[C]` reshaped to `[C,1,1]`
    /// broadcasts over an `[N,C,H,W]` feature map.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", Op::Mul, |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        if other.data().iter().any(|&v| v == 0.0) {
            return Err(Error::invalid("div", "division by zero"));
        }
        self.binary(other, "div", Op::Div, |a, b| a / b)
    }

    pub fn neg(&self) -> Tensor {
        unary(self, Op::Neg, |v| -v)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        unary(self, Op::Scale(c), |v| v * c)
    }

    pub fn offset(&self, c: f64) -> Tensor {
        unary(self, Op::Offset(c), |v| v + c)
    }

    pub fn exp(&self) -> Tensor {
        unary(self, Op::Exp, f64::exp)
    }

    pub fn log(&self) -> Result<Tensor> {
        if self.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::invalid("log", "argument must be positive"));
        }
        Ok(unary(self, Op::Log, f64::ln))
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        if self.data().iter().any(|&v| v < 0.0) {
            return Err(Error::invalid("sqrt", "argument must be non-negative"));
        }
        Ok(unary(self, Op::Sqrt, f64::sqrt))
    }

    pub fn square(&self) -> Tensor {
        unary(self, Op::Square, |v| v * v)
    }

    pub fn abs(&self) -> Tensor {
        unary(self, Op::Abs, f64::abs)
    }

    pub fn relu(&self) -> Tensor {
        unary(self, Op::Relu, |v| v.max(0.0))
    }

    /// `(x)_+`, the hinge used by the triplet margin.
    pub fn max_with_zero(&self) -> Tensor {
        self.relu()
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        unary(self, Op::LeakyRelu(slope), move |v| if v > 0.0 { v } else { slope * v })
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(Error::shape("matmul", &[a, b]));
        }
        let data = kernels::matmul(self.data(), other.data(), a[0], a[1], b[1]);
        Ok(Tensor::from_op(data, vec![a[0], b[1]], Op::MatMul, vec![self.clone(), other.clone()]))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::shape("transpose", &[s]));
        }
        let data = kernels::transpose(self.data(), s[0], s[1]);
        Ok(Tensor::from_op(data, vec![s[1], s[0]], Op::Transpose, vec![self.clone()]))
    }

    fn conv_geom(op: &'static str, x: &[usize], k: &[usize], stride: usize, padding: usize) -> Result<ConvGeom> {
        ConvGeom::new(x, k, stride, padding).ok_or_else(|| Error::shape(op, &[x, k]))
    }

    /// NCHW input, OIHW kernel, no bias.
    pub fn conv2d(&self, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        let g = Self::conv_geom("conv2d", self.shape(), kernel.shape(), stride, padding)?;
        let data = g.forward(self.data(), kernel.data());
        Ok(Tensor::from_op(
            data,
            g.output_shape(),
            Op::Conv2d { stride, padding },
            vec![self.clone(), kernel.clone()],
        ))
    }

    /// Gradient of `<g, conv2d(x, k)>` with respect to `x`, where `self` is `g`.
    pub fn conv2d_input_grad(&self, kernel: &Tensor, input_shape: &[usize], stride: usize, padding: usize) -> Result<Tensor> {
        let g = Self::conv_geom("conv2d_input_grad", input_shape, kernel.shape(), stride, padding)?;
        if self.shape() != g.output_shape().as_slice() {
            return Err(Error::shape("conv2d_input_grad", &[self.shape(), &g.output_shape()]));
        }
        let data = g.input_grad(self.data(), kernel.data());
        Ok(Tensor::from_op(
            data,
            g.input_shape(),
            Op::Conv2dInputGrad {
                stride,
                padding,
                input_shape: input_shape.to_vec(),
            },
            vec![self.clone(), kernel.clone()],
        ))
    }

    /// Gradient of `<g, conv2d(x, k)>` with respect to `k`, where `self` is `x`.
    pub fn conv2d_kernel_grad(&self, grad_out: &Tensor, kernel_shape: &[usize], stride: usize, padding: usize) -> Result<Tensor> {
        let g = Self::conv_geom("conv2d_kernel_grad", self.shape(), kernel_shape, stride, padding)?;
        if grad_out.shape() != g.output_shape().as_slice() {
            return Err(Error::shape("conv2d_kernel_grad", &[grad_out.shape(), &g.output_shape()]));
        }
        let data = g.kernel_grad(self.data(), grad_out.data());
        Ok(Tensor::from_op(
            data,
            g.kernel_shape(),
            Op::Conv2dKernelGrad {
                stride,
                padding,
                kernel_shape: kernel_shape.to_vec(),
            },
            vec![self.clone(), grad_out.clone()],
        ))
    }

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::from_op(vec![s], Vec::new(), Op::Sum, vec![self.clone()])
    }

    pub fn mean(&self) -> Tensor {
        self.sum().scale(1.0 / self.numel() as f64)
    }

    /// Sum along `axis`, keeping it with length 1.
    pub fn sum_axis_keep(&self, axis: usize) -> Result<Tensor> {
        check_axis("sum_axis", self.shape(), axis)?;
        let mut shape = self.shape().to_vec();
        shape[axis] = 1;
        self.sum_to(&shape)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        if !kernels::broadcastable_to(self.shape(), shape) {
            return Err(Error::shape("broadcast_to", &[self.shape(), shape]));
        }
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let data = kernels::broadcast_to(self.data(), self.shape(), shape);
        Ok(Tensor::from_op(
            data,
            shape.to_vec(),
            Op::BroadcastTo { shape: shape.to_vec() },
            vec![self.clone()],
        ))
    }

    /// Sums broadcast dimensions away so the result has `shape`; adjoint of
    /// [`Tensor::broadcast_to`].
    pub fn sum_to(&self, shape: &[usize]) -> Result<Tensor> {
        if !kernels::broadcastable_to(shape, self.shape()) {
            return Err(Error::shape("sum_to", &[self.shape(), shape]));
        }
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let data = kernels::sum_to(self.data(), self.shape(), shape);
        Ok(Tensor::from_op(data, shape.to_vec(), Op::SumTo { shape: shape.to_vec() }, vec![self.clone()]))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        check_axis("softmax", self.shape(), axis)?;
        let data = kernels::softmax(self.data(), self.shape(), axis, false);
        Ok(Tensor::from_op(data, self.shape().to_vec(), Op::Softmax { axis }, vec![self.clone()]))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        check_axis("log_softmax", self.shape(), axis)?;
        let data = kernels::softmax(self.data(), self.shape(), axis, true);
        Ok(Tensor::from_op(data, self.shape().to_vec(), Op::LogSoftmax { axis }, vec![self.clone()]))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", &[self.shape(), shape]));
        }
        if self.shape() == shape {
            return Ok(self.clone());
        }
        Ok(Tensor::from_op(
            self.data().to_vec(),
            shape.to_vec(),
            Op::Reshape { shape: shape.to_vec() },
            vec![self.clone()],
        ))
    }

    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        check_axis("concat", first.shape(), axis)?;
        for p in parts {
            let same = p.ndim() == first.ndim()
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(Error::shape("concat", &[first.shape(), p.shape()]));
            }
        }
        let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let (outer, _, inner) = kernels::axis_split(&shape, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape()[axis] * inner;
                data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(Tensor::from_op(data, shape, Op::Concat { axis }, parts.to_vec()))
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        check_axis("slice", self.shape(), axis)?;
        if len == 0 || start + len > self.shape()[axis] {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{} outside axis of length {}", start + len, self.shape()[axis]),
            ));
        }
        let (outer, full, inner) = kernels::axis_split(self.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op(data, shape, Op::Slice { axis, start, len }, vec![self.clone()]))
    }

    /// Embeds `self` at `start` along `axis` into zeros of length `total`;
    /// adjoint of [`Tensor::slice`].
    pub fn pad_axis(&self, axis: usize, start: usize, total: usize) -> Result<Tensor> {
        check_axis("pad_axis", self.shape(), axis)?;
        let len = self.shape()[axis];
        if start + len > total {
            return Err(Error::invalid("pad_axis", "embedding exceeds target length"));
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = total;
        let (outer, _, inner) = kernels::axis_split(&shape, axis);
        let mut data = vec![0.0; numel(&shape)];
        for o in 0..outer {
            let dst = (o * total + start) * inner;
            let src = o * len * inner;
            data[dst..dst + len * inner].copy_from_slice(&self.data()[src..src + len * inner]);
        }
        Ok(Tensor::from_op(data, shape, Op::PadAxis { axis, start, total }, vec![self.clone()]))
    }

    /// Gathers rows (entries along axis 0).
    pub fn index_select(&self, indices: &[usize]) -> Result<Tensor> {
        if self.ndim() == 0 || indices.is_empty() {
            return Err(Error::invalid("index_select", "needs a non-scalar tensor and at least one index"));
        }
        let rows = self.shape()[0];
        let row_len = self.numel() / rows;
        let mut data = Vec::with_capacity(indices.len() * row_len);
        for &i in indices {
            if i >= rows {
                return Err(Error::invalid("index_select", format!("index {i} out of range for {rows} rows")));
            }
            data.extend_from_slice(&self.data()[i * row_len..(i + 1) * row_len]);
        }
        let mut shape = self.shape().to_vec();
        shape[0] = indices.len();
        Ok(Tensor::from_op(
            data,
            shape,
            Op::IndexSelect {
                indices: Arc::new(indices.to_vec()),
            },
            vec![self.clone()],
        ))
    }

    /// Scatter-adds row `k` of `self` into row `indices[k]` of a zero tensor
    /// with `rows` rows; adjoint of [`Tensor::index_select`].
    pub fn index_add(&self, indices: &[usize], rows: usize) -> Result<Tensor> {
        if self.ndim() == 0 || self.shape()[0] != indices.len() {
            return Err(Error::invalid("index_add", "one index per row required"));
        }
        let row_len = self.numel() / indices.len();
        let mut data = vec![0.0; rows * row_len];
        for (k, &i) in indices.iter().enumerate() {
            if i >= rows {
                return Err(Error::invalid("index_add", format!("index {i} out of range for {rows} rows")));
            }
            for j in 0..row_len {
                data[i * row_len + j] += self.data()[k * row_len + j];
            }
        }
        let mut shape = self.shape().to_vec();
        shape[0] = rows;
        Ok(Tensor::from_op(
            data,
            shape,
            Op::IndexAdd {
                indices: Arc::new(indices.to_vec()),
                rows,
            },
            vec![self.clone()],
        ))
    }

    pub fn l1_norm(&self) -> Tensor {
        self.abs().sum()
    }

    pub fn l2_norm(&self) -> Result<Tensor> {
        self.square().sum().sqrt()
    }

    pub fn euclidean_distance(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::shape("euclidean_distance", &[self.shape(), other.shape()]));
        }
        self.sub(other)?.l2_norm()
    }

    /// `[N,C,H,W] -> [N,C]` mean over spatial positions.
    pub fn spatial_average_pool(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::shape("spatial_average_pool", &[s]));
        }
        let (n, c, area) = (s[0], s[1], s[2] * s[3]);
        Ok(self.sum_to(&[n, c, 1, 1])?.reshape(&[n, c])?.scale(1.0 / area as f64))
    }

    /// Inverted dropout: in train mode each entry is kept with probability
    /// `keep` and rescaled by `1/keep`; otherwise the identity.
    pub fn dropout<R: Rng + ?Sized>(&self, keep: f64, train: bool, rng: &mut R) -> Result<Tensor> {
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(Error::invalid("dropout", format!("keep probability {keep} outside (0, 1]")));
        }
        if !train || keep == 1.0 {
            return Ok(self.clone());
        }
        let mask: Vec<f64> = (0..self.numel())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.mul(&Tensor::new(mask, self.shape())?)
    }
}
