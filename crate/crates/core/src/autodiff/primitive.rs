use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Named entry point over the operation set, with explicit attributes.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    MatMul,
    Conv2d { stride: usize, padding: usize },
    Add,
    Sub,
    Mul,
    Div,
    Relu,
    LeakyRelu { slope: f64 },
    Softmax { axis: usize },
    LogSoftmax { axis: usize },
    Log,
    Exp,
    Sqrt,
    Square,
    Sum,
    Mean,
    L1Norm,
    L2Norm,
    EuclideanDistance,
    MaxWithZero,
    SpatialAveragePool,
    Concat { axis: usize },
    Reshape { shape: Vec<usize> },
    Dropout { keep: f64, train: bool, seed: u64 },
}

impl Primitive {
    /// Looks a primitive up by name with default attributes.
    pub fn by_name(name: &str) -> Result<Self> {
        Ok(match name {
            "matmul" => Primitive::MatMul,
            "conv2d" => Primitive::Conv2d { stride: 1, padding: 0 },
            "add" => Primitive::Add,
            "sub" => Primitive::Sub,
            "mul" => Primitive::Mul,
            "div" => Primitive::Div,
            "relu" => Primitive::Relu,
            "leaky_relu" => Primitive::LeakyRelu { slope: 0.01 },
            "softmax" => Primitive::Softmax { axis: 0 },
            "log_softmax" => Primitive::LogSoftmax { axis: 0 },
            "log" => Primitive::Log,
            "exp" => Primitive::Exp,
            "sqrt" => Primitive::Sqrt,
            "square" => Primitive::Square,
            "sum" => Primitive::Sum,
            "mean" => Primitive::Mean,
            "l1_norm" => Primitive::L1Norm,
            "l2_norm" => Primitive::L2Norm,
            "euclidean_distance" => Primitive::EuclideanDistance,
            "max_with_zero" => Primitive::MaxWithZero,
            "spatial_average_pool" => Primitive::SpatialAveragePool,
            "concat" => Primitive::Concat { axis: 0 },
            "dropout" => Primitive::Dropout {
                keep: 1.0,
                train: false,
                seed: 0,
            },
            other => return Err(Error::UnsupportedOp(other.to_string())),
        })
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::MatMul
            | Primitive::Conv2d { .. }
            | Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::Div
            | Primitive::EuclideanDistance => Some(2),
            Primitive::Concat { .. } => None,
            _ => Some(1),
        }
    }

    pub fn apply(&self, inputs: &[Tensor]) -> Result<Tensor> {
        if let Some(n) = self.arity() {
            if inputs.len() != n {
                return Err(Error::invalid("forward_primitive", format!("{self:?} takes {n} inputs, got {}", inputs.len())));
            }
        }
        let x = inputs.first().ok_or_else(|| Error::invalid("forward_primitive", "no inputs"))?;
        let y = || &inputs[1];
        match self {
            Primitive::MatMul => x.matmul(y()),
            Primitive::Conv2d { stride, padding } => x.conv2d(y(), *stride, *padding),
            Primitive::Add => x.add(y()),
            Primitive::Sub => x.sub(y()),
            Primitive::Mul => x.mul(y()),
            Primitive::Div => x.div(y()),
            Primitive::Relu => Ok(x.relu()),
            Primitive::LeakyRelu { slope } => Ok(x.leaky_relu(*slope)),
            Primitive::Softmax { axis } => x.softmax(*axis),
            Primitive::LogSoftmax { axis } => x.log_softmax(*axis),
            Primitive::Log => x.log(),
            Primitive::Exp => Ok(x.exp()),
            Primitive::Sqrt => x.sqrt(),
            Primitive::Square => Ok(x.square()),
            Primitive::Sum => Ok(x.sum()),
            Primitive::Mean => Ok(x.mean()),
            Primitive::L1Norm => Ok(x.l1_norm()),
            Primitive::L2Norm => x.l2_norm(),
            Primitive::EuclideanDistance => x.euclidean_distance(y()),
            Primitive::MaxWithZero => Ok(x.max_with_zero()),
            Primitive::SpatialAveragePool => x.spatial_average_pool(),
            Primitive::Concat { axis } => Tensor::concat(inputs, *axis),
            Primitive::Reshape { shape } => x.reshape(shape),
            Primitive::Dropout { keep, train, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                x.dropout(*keep, *train, &mut rng)
            }
        }
    }
}

/// Applies `kind` to `inputs`.
pub fn forward_primitive(kind: &Primitive, inputs: &[Tensor]) -> Result<Tensor> {
    kind.apply(inputs)
}
