//! Reference operator implementations written from the definitions, plus
//! random case generation. Shared by the acceptance harness and op tests.
#![allow(dead_code)]

use graphfi_core::graph::{Feeds, Graph, Node, Op, Padding};
use graphfi_core::tensor::{unravel_index, DType, Tensor, TensorData};
use num_traits::Float;
use rand::Rng;

/// Run `op` once on constant inputs.
pub fn eval_op(op: Op, args: &[Tensor]) -> Result<Tensor, String> {
    let mut nodes = Vec::new();
    let mut ids = Vec::new();
    for (i, a) in args.iter().enumerate() {
        let id = format!("in{i}");
        nodes.push(Node::new(&id, Op::Const(a.clone()), &[]));
        ids.push(id);
    }
    let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
    nodes.push(Node::new("out", op, &refs));
    let g = Graph::new(nodes, vec!["out".into()]).map_err(|e| e.to_string())?;
    g.execute(&Feeds::new(), None)
        .map(|mut e| e.outputs.remove(0))
        .map_err(|e| e.to_string())
}

/// Values as f64, whatever the dtype.
pub fn values(t: &Tensor) -> Vec<f64> {
    t.to_f64_vec()
}

/// Strided offset of `coords` in a row-major `shape`.
pub fn offset(shape: &[usize], coords: &[usize]) -> usize {
    let mut stride = 1;
    let mut off = 0;
    for (c, d) in coords.iter().zip(shape).rev() {
        off += c * stride;
        stride *= d;
    }
    off
}

/// Broadcast read: extent-1 axes and rank-0 tensors repeat.
fn read_broadcast<T: Copy>(data: &[T], shape: &[usize], coords: &[usize]) -> T {
    if shape.is_empty() {
        return data[0];
    }
    let c: Vec<usize> = coords
        .iter()
        .zip(shape)
        .map(|(&c, &d)| if d == 1 { 0 } else { c })
        .collect();
    data[offset(shape, &c)]
}

fn out_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    if a.is_empty() {
        return b.to_vec();
    }
    if b.is_empty() {
        return a.to_vec();
    }
    a.iter().zip(b).map(|(&x, &y)| x.max(y)).collect()
}

pub fn ref_binary<T: Copy, U>(
    a: &[T],
    sa: &[usize],
    b: &[T],
    sb: &[usize],
    f: impl Fn(T, T) -> U,
) -> (Vec<usize>, Vec<U>) {
    let shape = out_shape(sa, sb);
    let n: usize = shape.iter().product();
    let out = (0..n)
        .map(|i| {
            let c = unravel_index(&shape, i);
            f(read_broadcast(a, sa, &c), read_broadcast(b, sb, &c))
        })
        .collect();
    (shape, out)
}

pub fn ref_matmul<T: Float>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = T::zero();
            for p in 0..k {
                s = s + a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// Explicit zero padding, then a plain sliding window.
pub fn ref_conv2d<T: Float>(
    x: &[T],
    xs: [usize; 4],
    k: &[T],
    ks: [usize; 4],
    strides: [usize; 2],
    padding: Padding,
) -> (Vec<usize>, Vec<T>) {
    let [n, h, w, ci] = xs;
    let [kh, kw, _, co] = ks;
    let (oh, ow, pt, pl) = out_geometry(h, w, kh, kw, strides, padding);
    let mut out = Vec::new();
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for o in 0..co {
                    let mut s = T::zero();
                    for dy in 0..kh {
                        for dx in 0..kw {
                            for c in 0..ci {
                                let y = (oy * strides[0] + dy) as isize - pt as isize;
                                let xx = (ox * strides[1] + dx) as isize - pl as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                let v = x[offset(&xs, &[b, y as usize, xx as usize, c])];
                                s = s + v * k[offset(&ks, &[dy, dx, c, o])];
                            }
                        }
                    }
                    out.push(s);
                }
            }
        }
    }
    (vec![n, oh, ow, co], out)
}

/// (out h, out w, pad top, pad left). SAME puts the odd padding cell last.
fn out_geometry(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    strides: [usize; 2],
    padding: Padding,
) -> (usize, usize, usize, usize) {
    match padding {
        Padding::Valid => ((h - kh) / strides[0] + 1, (w - kw) / strides[1] + 1, 0, 0),
        Padding::Same => {
            let oh = h.div_ceil(strides[0]);
            let ow = w.div_ceil(strides[1]);
            let ph = ((oh - 1) * strides[0] + kh).saturating_sub(h);
            let pw = ((ow - 1) * strides[1] + kw).saturating_sub(w);
            (oh, ow, ph / 2, pw / 2)
        }
    }
}

/// Padding cells never win.
pub fn ref_max_pool<T: Float>(
    x: &[T],
    xs: [usize; 4],
    window: [usize; 2],
    strides: [usize; 2],
    padding: Padding,
) -> (Vec<usize>, Vec<T>) {
    let [n, h, w, c] = xs;
    let (oh, ow, pt, pl) = out_geometry(h, w, window[0], window[1], strides, padding);
    let mut out = Vec::new();
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut cells = Vec::new();
                    for dy in 0..window[0] {
                        for dx in 0..window[1] {
                            let y = (oy * strides[0] + dy) as isize - pt as isize;
                            let xx = (ox * strides[1] + dx) as isize - pl as isize;
                            if y >= 0 && xx >= 0 && y < h as isize && xx < w as isize {
                                cells.push(x[offset(&xs, &[b, y as usize, xx as usize, ch])]);
                            }
                        }
                    }
                    out.push(cells.into_iter().fold(T::neg_infinity(), T::max));
                }
            }
        }
    }
    (vec![n, oh, ow, c], out)
}

pub fn ref_softmax<T: Float>(x: &[T], last: usize) -> Vec<T> {
    x.chunks(last)
        .flat_map(|row| {
            let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let e: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
            let s = e.iter().fold(T::zero(), |a, &b| a + b);
            e.into_iter().map(move |v| v / s)
        })
        .collect()
}

/// Reduce along `axis` by gathering each output's slice explicitly.
pub fn ref_reduce<T: Copy, U>(
    x: &[T],
    shape: &[usize],
    axis: usize,
    f: impl Fn(&[T]) -> U,
) -> (Vec<usize>, Vec<U>) {
    let mut out_shape = shape.to_vec();
    out_shape.remove(axis);
    let n: usize = out_shape.iter().product();
    let out = (0..n)
        .map(|i| {
            let oc = unravel_index(&out_shape, i);
            let slice: Vec<T> = (0..shape[axis])
                .map(|a| {
                    let mut c = oc.clone();
                    c.insert(axis, a);
                    x[offset(shape, &c)]
                })
                .collect();
            f(&slice)
        })
        .collect();
    (out_shape, out)
}

pub fn ref_mean<T: Float>(s: &[T]) -> T {
    s.iter().fold(T::zero(), |a, &b| a + b) / T::from(s.len()).unwrap()
}

/// First maximal index.
pub fn ref_argmax(s: &[f64]) -> i64 {
    let mut best = 0;
    for (i, &v) in s.iter().enumerate() {
        if v > s[best] {
            best = i;
        }
    }
    best as i64
}

/// `a` and `b` agree to `rel` relative error (exact for equal bit patterns,
/// NaN matches NaN).
pub fn close(a: f64, b: f64, rel: f64) -> bool {
    if a == b || (a.is_nan() && b.is_nan()) {
        return true;
    }
    (a - b).abs() <= rel * a.abs().max(b.abs())
}

pub fn random_f(rng: &mut impl Rng, dtype: DType, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    match dtype {
        DType::F32 => Tensor::from_f32(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-2.0f32..2.0)).collect(),
        )
        .unwrap(),
        DType::F64 => Tensor::from_f64(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-2.0f64..2.0)).collect(),
        )
        .unwrap(),
        DType::I64 => Tensor::from_i64(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-5i64..5)).collect(),
        )
        .unwrap(),
        DType::Bool => Tensor::from_bool(
            shape.to_vec(),
            (0..n).map(|_| rng.random_bool(0.5)).collect(),
        )
        .unwrap(),
    }
}

pub fn random_shape(rng: &mut impl Rng, rank: usize, max: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.random_range(1..=max)).collect()
}

/// Tensor with the given data converted to `t`'s float dtype.
pub fn same_float(t: &Tensor, shape: Vec<usize>, v: Vec<f64>) -> Tensor {
    match t.dtype() {
        DType::F32 => Tensor::from_f32(shape, v.into_iter().map(|x| x as f32).collect()).unwrap(),
        _ => Tensor::from_f64(shape, v).unwrap(),
    }
}

/// Apply a float oracle at the tensor's own precision.
pub fn with_float<R>(
    t: &Tensor,
    f32_fn: impl FnOnce(&[f32]) -> R,
    f64_fn: impl FnOnce(&[f64]) -> R,
) -> R {
    match t.data() {
        TensorData::F32(v) => f32_fn(v),
        TensorData::F64(v) => f64_fn(v),
        _ => panic!("float tensor expected"),
    }
}

fn float_dtype(rng: &mut impl Rng) -> DType {
    if rng.random_bool(0.5) {
        DType::F32
    } else {
        DType::F64
    }
}

fn compare_float(kind: &str, got: &Tensor, shape: &[usize], want: &[f64]) -> Result<(), String> {
    if got.shape() != shape {
        return Err(format!("{kind}: shape {:?}, expected {shape:?}", got.shape()));
    }
    for (i, (&a, &b)) in values(got).iter().zip(want).enumerate() {
        if !close(a, b, 1e-6) {
            return Err(format!("{kind}: element {i} is {a}, expected {b}"));
        }
    }
    Ok(())
}

fn compare_exact(kind: &str, got: &Tensor, want: &Tensor) -> Result<(), String> {
    if got != want {
        return Err(format!("{kind}: {got:?} != {want:?}"));
    }
    Ok(())
}

/// Shapes that broadcast with `base`: itself, a scalar, or ones in places.
fn partner_shape(rng: &mut impl Rng, base: &[usize]) -> Vec<usize> {
    match rng.random_range(0..3) {
        0 => base.to_vec(),
        1 => vec![],
        _ => base
            .iter()
            .map(|&d| if rng.random_bool(0.5) { 1 } else { d })
            .collect(),
    }
}

/// One randomized case of `kind` checked against the reference.
pub fn op_case(kind: graphfi_core::OpKind, rng: &mut impl Rng) -> Result<(), String> {
    use graphfi_core::OpKind as K;
    let name = kind.name();
    match kind {
        K::Const | K::Placeholder => {
            let dt = [DType::F32, DType::F64, DType::I64, DType::Bool][rng.random_range(0..4)];
            let rank = rng.random_range(0..4);
            let shape = random_shape(rng, rank, 4);
            let t = random_f(rng, dt, &shape);
            let got = if kind == K::Const {
                eval_op(Op::Const(t.clone()), &[])?
            } else {
                let g = Graph::new(
                    vec![Node::new(
                        "p",
                        Op::Placeholder {
                            dtype: dt,
                            shape: t.shape().to_vec(),
                        },
                        &[],
                    )],
                    vec!["p".into()],
                )
                .map_err(|e| e.to_string())?;
                let feeds: Feeds = [("p".to_string(), t.clone())].into();
                g.execute(&feeds, None).map_err(|e| e.to_string())?.outputs.remove(0)
            };
            compare_exact(name, &got, &t)
        }
        K::Add | K::Sub | K::Mul => {
            let dt = [DType::F32, DType::F64, DType::I64][rng.random_range(0..3)];
            let rank = rng.random_range(1..4);
            let sa = random_shape(rng, rank, 4);
            let sb = partner_shape(rng, &sa);
            let (sa, sb) = if rng.random_bool(0.5) { (sa, sb) } else { (sb, sa) };
            let a = random_f(rng, dt, &sa);
            let b = random_f(rng, dt, &sb);
            let op = match kind {
                K::Add => Op::Add,
                K::Sub => Op::Sub,
                _ => Op::Mul,
            };
            let got = eval_op(op, &[a.clone(), b.clone()])?;
            if dt == DType::I64 {
                let f = |x: i64, y: i64| match kind {
                    K::Add => x.wrapping_add(y),
                    K::Sub => x.wrapping_sub(y),
                    _ => x.wrapping_mul(y),
                };
                let (shape, v) = ref_binary(a.as_i64().unwrap(), &sa, b.as_i64().unwrap(), &sb, f);
                compare_exact(name, &got, &Tensor::from_i64(shape, v).unwrap())
            } else {
                let f = |x: f64, y: f64| match kind {
                    K::Add => x + y,
                    K::Sub => x - y,
                    _ => x * y,
                };
                let (shape, v) = ref_binary(&values(&a), &sa, &values(&b), &sb, f);
                compare_float(name, &got, &shape, &v)
            }
        }
        K::Equal => {
            let dt = [DType::F32, DType::I64, DType::Bool][rng.random_range(0..3)];
            let rank = rng.random_range(1..4);
            let sa = random_shape(rng, rank, 4);
            let sb = partner_shape(rng, &sa);
            // Small value ranges so equal pairs are common.
            let mk = |rng: &mut dyn rand::RngCore, s: &[usize]| {
                let n: usize = s.iter().product();
                match dt {
                    DType::F32 => Tensor::from_f32(
                        s.to_vec(),
                        (0..n).map(|_| rng.random_range(0..3) as f32 * 0.5).collect(),
                    )
                    .unwrap(),
                    DType::I64 => {
                        Tensor::from_i64(s.to_vec(), (0..n).map(|_| rng.random_range(0..3)).collect())
                            .unwrap()
                    }
                    _ => Tensor::from_bool(s.to_vec(), (0..n).map(|_| rng.random_bool(0.5)).collect())
                        .unwrap(),
                }
            };
            let a = mk(rng, &sa);
            let b = mk(rng, &sb);
            let got = eval_op(Op::Equal, &[a.clone(), b.clone()])?;
            let (shape, v) = ref_binary(&values(&a), &sa, &values(&b), &sb, |x, y| x == y);
            compare_exact(name, &got, &Tensor::from_bool(shape, v).unwrap())
        }
        K::MatMul => {
            let dt = float_dtype(rng);
            let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..5));
            let a = random_f(rng, dt, &[m, k]);
            let b = random_f(rng, dt, &[k, n]);
            let got = eval_op(Op::MatMul, &[a.clone(), b.clone()])?;
            let want = with_float(
                &a,
                |x| values(&Tensor::from_f32(vec![m, n], ref_matmul(x, b.as_f32().unwrap(), m, k, n)).unwrap()),
                |x| ref_matmul(x, b.as_f64().unwrap(), m, k, n),
            );
            compare_float(name, &got, &[m, n], &want)
        }
        K::BiasAdd => {
            let dt = float_dtype(rng);
            let rank = rng.random_range(1..4);
            let s = random_shape(rng, rank, 4);
            let c = *s.last().unwrap();
            let x = random_f(rng, dt, &s);
            let b = random_f(rng, dt, &[c]);
            let got = eval_op(Op::BiasAdd, &[x.clone(), b.clone()])?;
            let bv = values(&b);
            let want: Vec<f64> = values(&x)
                .iter()
                .enumerate()
                .map(|(i, v)| v + bv[i % c])
                .collect();
            compare_float(name, &got, &s, &want)
        }
        K::Conv2D => {
            let dt = float_dtype(rng);
            let padding = if rng.random_bool(0.5) { Padding::Same } else { Padding::Valid };
            let (h, w) = (rng.random_range(1..7), rng.random_range(1..7));
            let (kh, kw) = (rng.random_range(1..=h.min(3)), rng.random_range(1..=w.min(3)));
            let (ci, co) = (rng.random_range(1..4), rng.random_range(1..4));
            let strides = [rng.random_range(1..3), rng.random_range(1..3)];
            let xs = [rng.random_range(1..3), h, w, ci];
            let ks = [kh, kw, ci, co];
            let x = random_f(rng, dt, &xs);
            let k = random_f(rng, dt, &ks);
            let got = eval_op(Op::Conv2D { strides, padding }, &[x.clone(), k.clone()])?;
            let (shape, want) = with_float(
                &x,
                |xv| {
                    let (s, v) = ref_conv2d(xv, xs, k.as_f32().unwrap(), ks, strides, padding);
                    (s, v.into_iter().map(f64::from).collect())
                },
                |xv| ref_conv2d(xv, xs, k.as_f64().unwrap(), ks, strides, padding),
            );
            compare_float(name, &got, &shape, &want)
        }
        K::MaxPool => {
            let dt = float_dtype(rng);
            let padding = if rng.random_bool(0.5) { Padding::Same } else { Padding::Valid };
            let (h, w) = (rng.random_range(1..7), rng.random_range(1..7));
            let window = [rng.random_range(1..=h.min(3)), rng.random_range(1..=w.min(3))];
            let strides = [rng.random_range(1..3), rng.random_range(1..3)];
            let xs = [1, h, w, rng.random_range(1..4)];
            let x = random_f(rng, dt, &xs);
            let got = eval_op(
                Op::MaxPool {
                    window,
                    strides,
                    padding,
                },
                std::slice::from_ref(&x),
            )?;
            let (shape, want) = ref_max_pool(&values(&x), xs, window, strides, padding);
            compare_float(name, &got, &shape, &want)
        }
        K::ReLU | K::Sigmoid => {
            let dt = float_dtype(rng);
            let rank = rng.random_range(0..4);
            let s = random_shape(rng, rank, 4);
            let x = random_f(rng, dt, &s);
            let op = if kind == K::ReLU { Op::ReLU } else { Op::Sigmoid };
            let got = eval_op(op, std::slice::from_ref(&x))?;
            let want: Vec<f64> = values(&x)
                .into_iter()
                .map(|v| if kind == K::ReLU { v.max(0.0) } else { 1.0 / (1.0 + (-v).exp()) })
                .collect();
            compare_float(name, &got, &s, &want)
        }
        K::Softmax => {
            let dt = float_dtype(rng);
            let rank = rng.random_range(1..4);
            let s = random_shape(rng, rank, 5);
            let x = random_f(rng, dt, &s);
            let got = eval_op(Op::Softmax, std::slice::from_ref(&x))?;
            compare_float(name, &got, &s, &ref_softmax(&values(&x), *s.last().unwrap()))
        }
        K::Mean => {
            let dt = float_dtype(rng);
            let rank = rng.random_range(1..4);
            let s = random_shape(rng, rank, 4);
            let axis = rng.random_range(0..rank);
            let x = random_f(rng, dt, &s);
            let got = eval_op(Op::Mean { axis }, std::slice::from_ref(&x))?;
            let (shape, want) = with_float(
                &x,
                |v| {
                    let (sh, r) = ref_reduce(v, &s, axis, ref_mean);
                    (sh, r.into_iter().map(f64::from).collect())
                },
                |v| ref_reduce(v, &s, axis, ref_mean),
            );
            compare_float(name, &got, &shape, &want)
        }
        K::Reshape => {
            let dt = [DType::F32, DType::F64, DType::I64, DType::Bool][rng.random_range(0..4)];
            let rank = rng.random_range(1..4);
            let s = random_shape(rng, rank, 4);
            let n: usize = s.iter().product();
            let x = random_f(rng, dt, &s);
            let (target, shape): (Vec<i64>, Vec<usize>) = if rng.random_bool(0.5) {
                (vec![-1], vec![n])
            } else {
                (vec![1, n as i64], vec![1, n])
            };
            let got = eval_op(Op::Reshape { shape: target }, std::slice::from_ref(&x))?;
            compare_exact(name, &got, &x.reshaped(shape).unwrap())
        }
        K::ArgMax => {
            let dt = [DType::F32, DType::F64, DType::I64][rng.random_range(0..3)];
            let rank = rng.random_range(1..4);
            let s = random_shape(rng, rank, 5);
            let axis = rng.random_range(0..rank);
            let x = random_f(rng, dt, &s);
            let got = eval_op(Op::ArgMax { axis }, std::slice::from_ref(&x))?;
            let (shape, want) = ref_reduce(&values(&x), &s, axis, ref_argmax);
            compare_exact(name, &got, &Tensor::from_i64(shape, want).unwrap())
        }
    }
}
