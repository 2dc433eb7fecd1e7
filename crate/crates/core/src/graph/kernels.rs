//! Reference kernels for every operator.
//!
//! Kernels assume statically checked inputs (the graph validated dtypes and
//! shapes) but still refuse mismatched data instead of panicking. Reductions
//! accumulate in ascending index order so golden outputs are reproducible.
//! NaN propagates through every float kernel; `ArgMax` treats NaN as the
//! maximum and returns its first occurrence.

use num_traits::Float;
use thiserror::Error;

use crate::tensor::{element_count, unravel_index, Tensor, TensorData};

use super::shape::{broadcast_shapes, resolve_reshape, same_pad_before, window_out};
use super::{Op, Padding};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{op}: {message}")]
pub struct KernelError {
    pub op: &'static str,
    pub message: String,
}

fn err(op: &'static str, message: impl Into<String>) -> KernelError {
    KernelError {
        op,
        message: message.into(),
    }
}

fn build(op: &'static str, shape: Vec<usize>, data: TensorData) -> Result<Tensor, KernelError> {
    Tensor::new(shape, data).map_err(|e| err(op, e.to_string()))
}

/// Evaluate a non-source operator.
pub fn eval(op: &Op, inputs: &[&Tensor]) -> Result<Tensor, KernelError> {
    match op {
        Op::Const(t) => Ok(t.clone()),
        Op::Placeholder { .. } => Err(err("Placeholder", "placeholders are fed, not evaluated")),
        Op::Add => arith(inputs[0], inputs[1], "Add", add::<f32>, add::<f64>, i64::wrapping_add),
        Op::Sub => arith(inputs[0], inputs[1], "Sub", sub::<f32>, sub::<f64>, i64::wrapping_sub),
        Op::Mul => arith(inputs[0], inputs[1], "Mul", mul::<f32>, mul::<f64>, i64::wrapping_mul),
        Op::Equal => equal(inputs[0], inputs[1]),
        Op::MatMul => matmul(inputs[0], inputs[1]),
        Op::BiasAdd => bias_add(inputs[0], inputs[1]),
        Op::Conv2D { strides, padding } => conv2d(inputs[0], inputs[1], *strides, *padding),
        Op::MaxPool {
            window,
            strides,
            padding,
        } => max_pool(inputs[0], *window, *strides, *padding),
        Op::ReLU => float_map(inputs[0], "ReLU", relu::<f32>, relu::<f64>),
        Op::Sigmoid => float_map(inputs[0], "Sigmoid", sigmoid::<f32>, sigmoid::<f64>),
        Op::Softmax => softmax(inputs[0]),
        Op::Mean { axis } => mean(inputs[0], *axis),
        Op::Reshape { shape } => {
            let target = resolve_reshape(inputs[0].shape(), shape).map_err(|m| err("Reshape", m))?;
            inputs[0]
                .reshaped(target)
                .map_err(|e| err("Reshape", e.to_string()))
        }
        Op::ArgMax { axis } => argmax(inputs[0], *axis),
    }
}

fn relu<T: Float>(x: T) -> T {
    if x < T::zero() {
        T::zero()
    } else {
        x
    }
}

fn sigmoid<T: Float>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn float_map(
    t: &Tensor,
    op: &'static str,
    f32_fn: fn(f32) -> f32,
    f64_fn: fn(f64) -> f64,
) -> Result<Tensor, KernelError> {
    let data = match t.data() {
        TensorData::F32(v) => TensorData::F32(v.iter().map(|&x| f32_fn(x)).collect()),
        TensorData::F64(v) => TensorData::F64(v.iter().map(|&x| f64_fn(x)).collect()),
        _ => return Err(err(op, format!("unsupported dtype {}", t.dtype()))),
    };
    build(op, t.shape().to_vec(), data)
}

fn add<T: Float>(a: T, b: T) -> T {
    a + b
}

fn sub<T: Float>(a: T, b: T) -> T {
    a - b
}

fn mul<T: Float>(a: T, b: T) -> T {
    a * b
}

/// Strides for mapping an output coordinate onto a broadcast operand.
fn broadcast_strides(shape: &[usize], out_rank: usize) -> Vec<usize> {
    if shape.is_empty() {
        return vec![0; out_rank];
    }
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for (i, &d) in shape.iter().enumerate().rev() {
        strides[i] = if d == 1 { 0 } else { acc };
        acc *= d;
    }
    strides
}

fn zip_broadcast<T: Copy, U>(
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(T, T) -> U,
) -> Vec<U> {
    if a_shape == b_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let n = element_count(out_shape);
    let sa = broadcast_strides(a_shape, out_shape.len());
    let sb = broadcast_strides(b_shape, out_shape.len());
    (0..n)
        .map(|i| {
            let coords = unravel_index(out_shape, i);
            let ia: usize = coords.iter().zip(&sa).map(|(c, s)| c * s).sum();
            let ib: usize = coords.iter().zip(&sb).map(|(c, s)| c * s).sum();
            f(a[ia], b[ib])
        })
        .collect()
}

fn arith(
    a: &Tensor,
    b: &Tensor,
    op: &'static str,
    f32_fn: fn(f32, f32) -> f32,
    f64_fn: fn(f64, f64) -> f64,
    i64_fn: fn(i64, i64) -> i64,
) -> Result<Tensor, KernelError> {
    let shape = broadcast_shapes(a.shape(), b.shape()).map_err(|m| err(op, m))?;
    let data = match (a.data(), b.data()) {
        (TensorData::F32(x), TensorData::F32(y)) => {
            TensorData::F32(zip_broadcast(x, a.shape(), y, b.shape(), &shape, f32_fn))
        }
        (TensorData::F64(x), TensorData::F64(y)) => {
            TensorData::F64(zip_broadcast(x, a.shape(), y, b.shape(), &shape, f64_fn))
        }
        (TensorData::I64(x), TensorData::I64(y)) => {
            TensorData::I64(zip_broadcast(x, a.shape(), y, b.shape(), &shape, i64_fn))
        }
        _ => {
            return Err(err(
                op,
                format!("unsupported dtypes {} and {}", a.dtype(), b.dtype()),
            ))
        }
    };
    build(op, shape, data)
}

fn equal(a: &Tensor, b: &Tensor) -> Result<Tensor, KernelError> {
    let shape = broadcast_shapes(a.shape(), b.shape()).map_err(|m| err("Equal", m))?;
    let out = match (a.data(), b.data()) {
        (TensorData::F32(x), TensorData::F32(y)) => {
            zip_broadcast(x, a.shape(), y, b.shape(), &shape, |p, q| p == q)
        }
        (TensorData::F64(x), TensorData::F64(y)) => {
            zip_broadcast(x, a.shape(), y, b.shape(), &shape, |p, q| p == q)
        }
        (TensorData::I64(x), TensorData::I64(y)) => {
            zip_broadcast(x, a.shape(), y, b.shape(), &shape, |p, q| p == q)
        }
        (TensorData::Bool(x), TensorData::Bool(y)) => {
            zip_broadcast(x, a.shape(), y, b.shape(), &shape, |p, q| p == q)
        }
        _ => {
            return Err(err(
                "Equal",
                format!("dtype mismatch {} vs {}", a.dtype(), b.dtype()),
            ))
        }
    };
    build("Equal", shape, TensorData::Bool(out))
}

fn matmul_t<T: Float>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            let mut acc = T::zero();
            for p in 0..k {
                acc = acc + a[i * k + p] * b[p * n + j];
            }
            out.push(acc);
        }
    }
    out
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, KernelError> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(err("MatMul", format!("shape mismatch {sa:?} x {sb:?}")));
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let data = match (a.data(), b.data()) {
        (TensorData::F32(x), TensorData::F32(y)) => TensorData::F32(matmul_t(x, y, m, k, n)),
        (TensorData::F64(x), TensorData::F64(y)) => TensorData::F64(matmul_t(x, y, m, k, n)),
        _ => return Err(err("MatMul", "unsupported dtypes")),
    };
    build("MatMul", vec![m, n], data)
}

fn bias_add(x: &Tensor, bias: &Tensor) -> Result<Tensor, KernelError> {
    let c = *x.shape().last().unwrap_or(&0);
    if bias.shape() != [c] || c == 0 && !x.is_empty() {
        return Err(err(
            "BiasAdd",
            format!("bias {:?} vs input {:?}", bias.shape(), x.shape()),
        ));
    }
    fn add<T: Float>(x: &[T], b: &[T], c: usize) -> Vec<T> {
        x.iter().enumerate().map(|(i, &v)| v + b[i % c]).collect()
    }
    let data = match (x.data(), bias.data()) {
        (TensorData::F32(v), TensorData::F32(b)) => TensorData::F32(add(v, b, c)),
        (TensorData::F64(v), TensorData::F64(b)) => TensorData::F64(add(v, b, c)),
        _ => return Err(err("BiasAdd", "unsupported dtypes")),
    };
    build("BiasAdd", x.shape().to_vec(), data)
}

struct Window {
    out: usize,
    pad: usize,
}

fn window(input: usize, size: usize, stride: usize, padding: Padding) -> Option<Window> {
    let out = window_out(input, size, stride, padding)?;
    let pad = match padding {
        Padding::Valid => 0,
        Padding::Same => same_pad_before(input, size, stride),
    };
    Some(Window { out, pad })
}

/// Input position for output `o` and window offset `k`, or `None` in the padding.
fn source(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
    let pos = (o * stride + k).checked_sub(pad)?;
    (pos < extent).then_some(pos)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_t<T: Float>(
    x: &[T],
    k: &[T],
    [n, h, w, cin]: [usize; 4],
    [kh, kw, cout]: [usize; 3],
    rows: &Window,
    cols: &Window,
    strides: [usize; 2],
) -> Vec<T> {
    let mut out = Vec::with_capacity(n * rows.out * cols.out * cout);
    for b in 0..n {
        for oy in 0..rows.out {
            for ox in 0..cols.out {
                for co in 0..cout {
                    let mut acc = T::zero();
                    for ky in 0..kh {
                        let Some(iy) = source(oy, ky, strides[0], rows.pad, h) else {
                            continue;
                        };
                        for kx in 0..kw {
                            let Some(ix) = source(ox, kx, strides[1], cols.pad, w) else {
                                continue;
                            };
                            for ci in 0..cin {
                                let xv = x[((b * h + iy) * w + ix) * cin + ci];
                                let kv = k[((ky * kw + kx) * cin + ci) * cout + co];
                                acc = acc + xv * kv;
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

fn conv2d(
    x: &Tensor,
    k: &Tensor,
    strides: [usize; 2],
    padding: Padding,
) -> Result<Tensor, KernelError> {
    let (xs, ks) = (x.shape(), k.shape());
    if xs.len() != 4 || ks.len() != 4 || ks[2] != xs[3] {
        return Err(err("Conv2D", format!("input {xs:?} kernel {ks:?}")));
    }
    let rows = window(xs[1], ks[0], strides[0], padding);
    let cols = window(xs[2], ks[1], strides[1], padding);
    let (Some(rows), Some(cols)) = (rows, cols) else {
        return Err(err("Conv2D", "kernel larger than input"));
    };
    let dims = [xs[0], xs[1], xs[2], xs[3]];
    let kdims = [ks[0], ks[1], ks[3]];
    let data = match (x.data(), k.data()) {
        (TensorData::F32(a), TensorData::F32(b)) => {
            TensorData::F32(conv2d_t(a, b, dims, kdims, &rows, &cols, strides))
        }
        (TensorData::F64(a), TensorData::F64(b)) => {
            TensorData::F64(conv2d_t(a, b, dims, kdims, &rows, &cols, strides))
        }
        _ => return Err(err("Conv2D", "unsupported dtypes")),
    };
    build("Conv2D", vec![xs[0], rows.out, cols.out, ks[3]], data)
}

fn max_pool_t<T: Float>(
    x: &[T],
    [n, h, w, c]: [usize; 4],
    size: [usize; 2],
    rows: &Window,
    cols: &Window,
    strides: [usize; 2],
) -> Vec<T> {
    let mut out = Vec::with_capacity(n * rows.out * cols.out * c);
    for b in 0..n {
        for oy in 0..rows.out {
            for ox in 0..cols.out {
                for ch in 0..c {
                    let mut m = T::neg_infinity();
                    for ky in 0..size[0] {
                        let Some(iy) = source(oy, ky, strides[0], rows.pad, h) else {
                            continue;
                        };
                        for kx in 0..size[1] {
                            let Some(ix) = source(ox, kx, strides[1], cols.pad, w) else {
                                continue;
                            };
                            let v = x[((b * h + iy) * w + ix) * c + ch];
                            if v > m || v.is_nan() {
                                m = v;
                            }
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    out
}

fn max_pool(
    x: &Tensor,
    size: [usize; 2],
    strides: [usize; 2],
    padding: Padding,
) -> Result<Tensor, KernelError> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(err("MaxPool", format!("input {xs:?}")));
    }
    let rows = window(xs[1], size[0], strides[0], padding);
    let cols = window(xs[2], size[1], strides[1], padding);
    let (Some(rows), Some(cols)) = (rows, cols) else {
        return Err(err("MaxPool", "window larger than input"));
    };
    let dims = [xs[0], xs[1], xs[2], xs[3]];
    let data = match x.data() {
        TensorData::F32(a) => TensorData::F32(max_pool_t(a, dims, size, &rows, &cols, strides)),
        TensorData::F64(a) => TensorData::F64(max_pool_t(a, dims, size, &rows, &cols, strides)),
        _ => return Err(err("MaxPool", "unsupported dtype")),
    };
    build("MaxPool", vec![xs[0], rows.out, cols.out, xs[3]], data)
}

fn softmax_t<T: Float>(x: &[T], last: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(last) {
        let mut m = row[0];
        for &v in &row[1..] {
            if v > m || v.is_nan() {
                m = v;
            }
        }
        let exps: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let mut sum = T::zero();
        for &e in &exps {
            sum = sum + e;
        }
        out.extend(exps.into_iter().map(|e| e / sum));
    }
    out
}

fn softmax(x: &Tensor) -> Result<Tensor, KernelError> {
    let last = match x.shape().last() {
        Some(&d) => d,
        None => return Err(err("Softmax", "rank-0 input")),
    };
    let data = if last == 0 {
        x.data().clone()
    } else {
        match x.data() {
            TensorData::F32(v) => TensorData::F32(softmax_t(v, last)),
            TensorData::F64(v) => TensorData::F64(softmax_t(v, last)),
            _ => return Err(err("Softmax", "unsupported dtype")),
        }
    };
    build("Softmax", x.shape().to_vec(), data)
}

/// (outer, axis extent, inner) split of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

fn mean_t<T: Float>(x: &[T], (outer, n, inner): (usize, usize, usize)) -> Vec<T> {
    let count = T::from(n).unwrap();
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let mut acc = T::zero();
            for a in 0..n {
                acc = acc + x[(o * n + a) * inner + i];
            }
            out.push(acc / count);
        }
    }
    out
}

fn mean(x: &Tensor, axis: usize) -> Result<Tensor, KernelError> {
    if axis >= x.rank() {
        return Err(err("Mean", format!("axis {axis} out of range")));
    }
    let split = split_axis(x.shape(), axis);
    let data = match x.data() {
        TensorData::F32(v) => TensorData::F32(mean_t(v, split)),
        TensorData::F64(v) => TensorData::F64(mean_t(v, split)),
        _ => return Err(err("Mean", "unsupported dtype")),
    };
    build("Mean", reduced_shape(x.shape(), axis), data)
}

/// First index of the maximum; `is_nan` marks values that win outright.
fn argmax_t<T: Copy + PartialOrd>(
    x: &[T],
    (outer, n, inner): (usize, usize, usize),
    is_nan: impl Fn(T) -> bool,
) -> Vec<i64> {
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| x[(o * n + a) * inner + i];
            let mut best = 0;
            if !is_nan(at(0)) {
                for a in 1..n {
                    let v = at(a);
                    if is_nan(v) {
                        best = a;
                        break;
                    }
                    if v > at(best) {
                        best = a;
                    }
                }
            }
            out.push(best as i64);
        }
    }
    out
}

fn argmax(x: &Tensor, axis: usize) -> Result<Tensor, KernelError> {
    if axis >= x.rank() {
        return Err(err("ArgMax", format!("axis {axis} out of range")));
    }
    let split = split_axis(x.shape(), axis);
    if split.1 == 0 {
        return Err(err("ArgMax", "empty reduction axis"));
    }
    let out = match x.data() {
        TensorData::F32(v) => argmax_t(v, split, f32::is_nan),
        TensorData::F64(v) => argmax_t(v, split, f64::is_nan),
        TensorData::I64(v) => argmax_t(v, split, |_| false),
        TensorData::Bool(_) => return Err(err("ArgMax", "unsupported dtype Bool")),
    };
    build("ArgMax", reduced_shape(x.shape(), axis), TensorData::I64(out))
}
