use crate::tensor::DType;

use super::{Op, Padding};

/// Static dtype and shape of a node output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorType {
    pub dtype: DType,
    pub shape: Vec<usize>,
}

impl TensorType {
    fn new(dtype: DType, shape: Vec<usize>) -> Self {
        TensorType { dtype, shape }
    }
}

/// Output extent of a sliding window along one spatial axis.
pub(crate) fn window_out(input: usize, window: usize, stride: usize, padding: Padding) -> Option<usize> {
    match padding {
        Padding::Valid => (input >= window).then(|| (input - window) / stride + 1),
        Padding::Same => (input > 0).then(|| input.div_ceil(stride)),
    }
}

/// Leading padding for SAME; total padding is split with the extra cell at the end.
pub(crate) fn same_pad_before(input: usize, window: usize, stride: usize) -> usize {
    let out = input.div_ceil(stride);
    let needed = ((out - 1) * stride + window).saturating_sub(input);
    needed / 2
}

pub(crate) fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>, String> {
    if a == b {
        return Ok(a.to_vec());
    }
    if a.is_empty() {
        return Ok(b.to_vec());
    }
    if b.is_empty() {
        return Ok(a.to_vec());
    }
    if a.len() != b.len() {
        return Err(format!("cannot broadcast {a:?} with {b:?}"));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(format!("cannot broadcast {a:?} with {b:?}")),
        })
        .collect()
}

fn require_float(t: &TensorType, what: &str) -> Result<(), String> {
    if t.dtype.is_float() {
        Ok(())
    } else {
        Err(format!("{what} requires a float input, got {}", t.dtype))
    }
}

fn same_dtype(a: &TensorType, b: &TensorType) -> Result<DType, String> {
    if a.dtype == b.dtype {
        Ok(a.dtype)
    } else {
        Err(format!("dtype mismatch: {} vs {}", a.dtype, b.dtype))
    }
}

fn require_rank(t: &TensorType, rank: usize, what: &str) -> Result<(), String> {
    if t.shape.len() == rank {
        Ok(())
    } else {
        Err(format!(
            "{what} requires rank {rank}, got shape {:?}",
            t.shape
        ))
    }
}

fn drop_axis(t: &TensorType, axis: usize) -> Result<Vec<usize>, String> {
    if axis >= t.shape.len() {
        return Err(format!("axis {axis} out of range for shape {:?}", t.shape));
    }
    let mut shape = t.shape.clone();
    shape.remove(axis);
    Ok(shape)
}

pub(crate) fn resolve_reshape(from: &[usize], target: &[i64]) -> Result<Vec<usize>, String> {
    let n: usize = from.iter().product();
    let known: usize = target
        .iter()
        .filter(|&&d| d >= 0)
        .map(|&d| d as usize)
        .product();
    let shape: Vec<usize> = if target.contains(&-1) {
        if known == 0 || !n.is_multiple_of(known) {
            return Err(format!("cannot reshape {from:?} to {target:?}"));
        }
        target
            .iter()
            .map(|&d| if d == -1 { n / known } else { d as usize })
            .collect()
    } else {
        target.iter().map(|&d| d as usize).collect()
    };
    if shape.iter().product::<usize>() != n {
        return Err(format!("cannot reshape {from:?} to {target:?}"));
    }
    Ok(shape)
}

pub(super) fn infer(op: &Op, inputs: &[&TensorType]) -> Result<TensorType, String> {
    match op {
        Op::Const(t) => Ok(TensorType::new(t.dtype(), t.shape().to_vec())),
        Op::Placeholder { dtype, shape } => Ok(TensorType::new(*dtype, shape.clone())),
        Op::Add | Op::Sub | Op::Mul => {
            let dtype = same_dtype(inputs[0], inputs[1])?;
            if dtype == DType::Bool {
                return Err("arithmetic on Bool".into());
            }
            Ok(TensorType::new(
                dtype,
                broadcast_shapes(&inputs[0].shape, &inputs[1].shape)?,
            ))
        }
        Op::Equal => {
            same_dtype(inputs[0], inputs[1])?;
            Ok(TensorType::new(
                DType::Bool,
                broadcast_shapes(&inputs[0].shape, &inputs[1].shape)?,
            ))
        }
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            require_float(a, "MatMul")?;
            let dtype = same_dtype(a, b)?;
            require_rank(a, 2, "MatMul")?;
            require_rank(b, 2, "MatMul")?;
            if a.shape[1] != b.shape[0] {
                return Err(format!(
                    "MatMul shape mismatch: {:?} x {:?}",
                    a.shape, b.shape
                ));
            }
            Ok(TensorType::new(dtype, vec![a.shape[0], b.shape[1]]))
        }
        Op::BiasAdd => {
            let (x, bias) = (inputs[0], inputs[1]);
            require_float(x, "BiasAdd")?;
            let dtype = same_dtype(x, bias)?;
            require_rank(bias, 1, "BiasAdd bias")?;
            match x.shape.last() {
                Some(&c) if c == bias.shape[0] => Ok(TensorType::new(dtype, x.shape.clone())),
                _ => Err(format!(
                    "BiasAdd bias {:?} does not match last axis of {:?}",
                    bias.shape, x.shape
                )),
            }
        }
        Op::Conv2D { strides, padding } => {
            let (x, k) = (inputs[0], inputs[1]);
            require_float(x, "Conv2D")?;
            let dtype = same_dtype(x, k)?;
            require_rank(x, 4, "Conv2D input")?;
            require_rank(k, 4, "Conv2D kernel")?;
            if k.shape[2] != x.shape[3] {
                return Err(format!(
                    "Conv2D kernel {:?} expects {} input channels, input {:?} has {}",
                    k.shape, k.shape[2], x.shape, x.shape[3]
                ));
            }
            let oh = window_out(x.shape[1], k.shape[0], strides[0], *padding);
            let ow = window_out(x.shape[2], k.shape[1], strides[1], *padding);
            match (oh, ow) {
                (Some(oh), Some(ow)) => {
                    Ok(TensorType::new(dtype, vec![x.shape[0], oh, ow, k.shape[3]]))
                }
                _ => Err(format!(
                    "Conv2D kernel {:?} larger than input {:?}",
                    k.shape, x.shape
                )),
            }
        }
        Op::MaxPool {
            window,
            strides,
            padding,
        } => {
            let x = inputs[0];
            require_float(x, "MaxPool")?;
            require_rank(x, 4, "MaxPool input")?;
            let oh = window_out(x.shape[1], window[0], strides[0], *padding);
            let ow = window_out(x.shape[2], window[1], strides[1], *padding);
            match (oh, ow) {
                (Some(oh), Some(ow)) => Ok(TensorType::new(
                    x.dtype,
                    vec![x.shape[0], oh, ow, x.shape[3]],
                )),
                _ => Err(format!(
                    "MaxPool window {window:?} larger than input {:?}",
                    x.shape
                )),
            }
        }
        Op::ReLU | Op::Sigmoid => {
            require_float(inputs[0], "activation")?;
            Ok(inputs[0].clone())
        }
        Op::Softmax => {
            require_float(inputs[0], "Softmax")?;
            if inputs[0].shape.is_empty() {
                return Err("Softmax requires rank >= 1".into());
            }
            Ok(inputs[0].clone())
        }
        Op::Mean { axis } => {
            require_float(inputs[0], "Mean")?;
            Ok(TensorType::new(inputs[0].dtype, drop_axis(inputs[0], *axis)?))
        }
        Op::Reshape { shape } => Ok(TensorType::new(
            inputs[0].dtype,
            resolve_reshape(&inputs[0].shape, shape)?,
        )),
        Op::ArgMax { axis } => {
            if inputs[0].dtype == DType::Bool {
                return Err("ArgMax on Bool".into());
            }
            Ok(TensorType::new(DType::I64, drop_axis(inputs[0], *axis)?))
        }
    }
}
