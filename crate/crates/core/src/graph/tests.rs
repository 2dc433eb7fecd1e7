use std::collections::HashMap;

use super::*;
use crate::tensor::{DType, Tensor};

fn f32t(shape: &[usize], v: &[f32]) -> Tensor {
    Tensor::from_f32(shape.to_vec(), v.to_vec()).unwrap()
}

fn placeholder(id: &str, shape: &[usize]) -> Node {
    Node::new(
        id,
        Op::Placeholder {
            dtype: DType::F32,
            shape: shape.to_vec(),
        },
        &[],
    )
}

fn add_graph() -> Graph {
    Graph::new(
        vec![
            placeholder("a", &[2, 3]),
            placeholder("b", &[2, 3]),
            Node::new("sum", Op::Add, &["a", "b"]),
        ],
        vec!["sum".into()],
    )
    .unwrap()
}

fn single_op(op: Op, a: Tensor, b: Option<Tensor>) -> Tensor {
    let mut nodes = vec![Node::new("a", Op::Const(a), &[])];
    let mut inputs = vec!["a"];
    if let Some(b) = b {
        nodes.push(Node::new("b", Op::Const(b), &[]));
        inputs.push("b");
    }
    nodes.push(Node::new("out", op, &inputs));
    let g = Graph::new(nodes, vec!["out".into()]).unwrap();
    g.execute(&Feeds::new(), None).unwrap().outputs.remove(0)
}

#[test]
fn well_formed_graph_validates() {
    let g = add_graph();
    assert_eq!(g.len(), 3);
    assert_eq!(g.output_ids(), vec!["sum"]);
}

#[test]
fn dangling_input_is_named() {
    let err = Graph::new(
        vec![
            placeholder("x", &[1, 2]),
            Node::new("y", Op::MatMul, &["x", "w1"]),
        ],
        vec!["y".into()],
    )
    .unwrap_err();
    assert!(err.0.iter().any(|e| matches!(
        e,
        GraphError::DanglingInput { input, .. } if input == "w1"
    )));
    assert!(err.to_string().contains("w1"));
}

#[test]
fn matmul_shape_mismatch() {
    let err = Graph::new(
        vec![
            placeholder("a", &[2, 3]),
            placeholder("b", &[2, 3]),
            Node::new("mm", Op::MatMul, &["a", "b"]),
        ],
        vec!["mm".into()],
    )
    .unwrap_err();
    assert!(matches!(&err.0[0], GraphError::Shape { node, .. } if node == "mm"));
}

#[test]
fn cycles_arity_and_sources_rejected() {
    let err = Graph::new(
        vec![
            Node::new("p", Op::ReLU, &["q"]),
            Node::new("q", Op::ReLU, &["p"]),
        ],
        vec!["p".into()],
    )
    .unwrap_err();
    assert!(matches!(&err.0[0], GraphError::Cycle(_)));

    let err = Graph::new(
        vec![placeholder("a", &[1]), Node::new("r", Op::ReLU, &["a", "a"])],
        vec!["r".into()],
    )
    .unwrap_err();
    assert!(matches!(
        &err.0[0],
        GraphError::Arity {
            expected: 1,
            actual: 2,
            ..
        }
    ));

    let mut p = placeholder("a", &[1]);
    p.injectable = true;
    let err = Graph::new(vec![p], vec!["a".into()]).unwrap_err();
    assert_eq!(err.0, vec![GraphError::InjectableSource("a".into())]);
}

#[test]
fn topo_order_puts_inputs_first() {
    let g = Graph::new(
        vec![
            Node::new("out", Op::ReLU, &["mid"]),
            Node::new("mid", Op::Sigmoid, &["x"]),
            placeholder("x", &[2]),
        ],
        vec!["out".into()],
    )
    .unwrap();
    assert_eq!(g.topo_order().collect::<Vec<_>>(), vec!["x", "mid", "out"]);
}

#[test]
fn shape_inference_examples() {
    let shapes = infer_shapes(&add_graph(), &HashMap::new()).unwrap();
    assert_eq!(shapes["sum"], vec![2, 3]);

    let conv = Graph::new(
        vec![
            placeholder("x", &[1, 4, 4, 1]),
            Node::new("k", Op::Const(Tensor::zeros(DType::F32, vec![2, 2, 1, 1])), &[]),
            Node::new(
                "c",
                Op::Conv2D {
                    strides: [1, 1],
                    padding: Padding::Valid,
                },
                &["x", "k"],
            ),
        ],
        vec!["c".into()],
    )
    .unwrap();
    // (4 - 2) / 1 + 1 = 3
    assert_eq!(
        infer_shapes(&conv, &HashMap::new()).unwrap()["c"],
        vec![1, 3, 3, 1]
    );

    let am = Graph::new(
        vec![
            placeholder("x", &[5, 10]),
            Node::new("am", Op::ArgMax { axis: 1 }, &["x"]),
        ],
        vec!["am".into()],
    )
    .unwrap();
    assert_eq!(infer_shapes(&am, &HashMap::new()).unwrap()["am"], vec![5]);
    assert_eq!(am.node_type(1).dtype, DType::I64);

    let fed: HashMap<String, Vec<usize>> = [("x".to_string(), vec![3, 10])].into();
    assert_eq!(infer_shapes(&am, &fed).unwrap()["am"], vec![3]);
}

#[test]
fn matmul_identity() {
    let a = f32t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let eye = f32t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
    assert_eq!(single_op(Op::MatMul, a.clone(), Some(eye)), a);
}

#[test]
fn softmax_symmetry() {
    let out = single_op(Op::Softmax, f32t(&[2], &[0.0, 0.0]), None);
    assert_eq!(out.as_f32().unwrap(), &[0.5, 0.5]);
}

/// Sliding-window sum written directly from the definition.
fn brute_conv_valid(x: &[f32], h: usize, w: usize, k: &[f32], kh: usize, kw: usize) -> Vec<f32> {
    let mut out = Vec::new();
    for oy in 0..=h - kh {
        for ox in 0..=w - kw {
            let mut s = 0.0;
            for dy in 0..kh {
                for dx in 0..kw {
                    s += x[(oy + dy) * w + ox + dx] * k[dy * kw + dx];
                }
            }
            out.push(s);
        }
    }
    out
}

#[test]
fn conv_all_ones() {
    let expected = brute_conv_valid(&[1.0; 9], 3, 3, &[1.0; 4], 2, 2);
    assert_eq!(expected, vec![4.0; 4]);
    let out = single_op(
        Op::Conv2D {
            strides: [1, 1],
            padding: Padding::Valid,
        },
        f32t(&[1, 3, 3, 1], &[1.0; 9]),
        Some(f32t(&[2, 2, 1, 1], &[1.0; 4])),
    );
    assert_eq!(out.shape(), &[1, 2, 2, 1]);
    assert_eq!(out.as_f32().unwrap(), expected.as_slice());
}

#[test]
fn argmax_and_equal_semantics() {
    let x = f32t(&[2, 3], &[1.0, 3.0, 3.0, f32::NAN, 0.0, f32::NAN]);
    let am = single_op(Op::ArgMax { axis: 1 }, x, None);
    // Ties resolve to the lowest index; NaN wins at its first occurrence.
    assert_eq!(am.as_i64().unwrap(), &[1, 0]);

    let eq = single_op(
        Op::Equal,
        f32t(&[3], &[1.0, 2.0, f32::NAN]),
        Some(f32t(&[3], &[1.0, 0.0, f32::NAN])),
    );
    assert_eq!(eq.as_bool().unwrap(), &[true, false, false]);
}

#[test]
fn mean_relu_sigmoid_reshape() {
    let x = f32t(&[2, 2], &[1.0, -2.0, 3.0, 4.0]);
    let m = single_op(Op::Mean { axis: 0 }, x.clone(), None);
    assert_eq!(m.as_f32().unwrap(), &[2.0, 1.0]);
    let r = single_op(Op::ReLU, x.clone(), None);
    assert_eq!(r.as_f32().unwrap(), &[1.0, 0.0, 3.0, 4.0]);
    let s = single_op(Op::Sigmoid, f32t(&[1], &[0.0]), None);
    assert_eq!(s.as_f32().unwrap(), &[0.5]);
    let rs = single_op(Op::Reshape { shape: vec![-1] }, x, None);
    assert_eq!(rs.shape(), &[4]);
}

#[test]
fn scalar_broadcast() {
    let out = single_op(Op::Mul, f32t(&[3], &[1.0, 2.0, 3.0]), Some(Tensor::scalar_f32(2.0)));
    assert_eq!(out.as_f32().unwrap(), &[2.0, 4.0, 6.0]);
}

#[test]
fn instance_counts() {
    let g = Graph::new(
        vec![
            placeholder("x", &[2, 2]),
            Node::new("a1", Op::Add, &["x", "x"]),
            Node::new("a2", Op::Add, &["a1", "x"]),
            Node::new("mm", Op::MatMul, &["a2", "x"]),
        ],
        vec!["mm".into()],
    )
    .unwrap();
    let feeds: Feeds = [("x".to_string(), f32t(&[2, 2], &[1.0; 4]))].into();
    let run = g.execute(&feeds, None).unwrap();
    let counts = count_instances(&run.trace);
    assert_eq!(counts, [(OpKind::Add, 2), (OpKind::MatMul, 1)].into());
    let again = g.execute(&feeds, None).unwrap();
    assert_eq!(count_instances(&again.trace), counts);
    assert_eq!(run.trace.entries[2].instance, Some(1));

    let only = Graph::new(vec![placeholder("x", &[1])], vec!["x".into()]).unwrap();
    let feeds: Feeds = [("x".to_string(), f32t(&[1], &[1.0]))].into();
    assert!(count_instances(&only.execute(&feeds, None).unwrap().trace).is_empty());
}

#[test]
fn feed_errors() {
    let g = add_graph();
    let mut feeds: Feeds = [("a".to_string(), f32t(&[2, 3], &[0.0; 6]))].into();
    assert!(matches!(
        g.execute(&feeds, None),
        Err(ExecError::MissingFeed(p)) if p == "b"
    ));
    feeds.insert("b".into(), f32t(&[3, 2], &[0.0; 6]));
    assert!(matches!(
        g.execute(&feeds, None),
        Err(ExecError::FeedMismatch { .. })
    ));
}

struct Passthrough(usize);

impl Interceptor for Passthrough {
    fn intercept(&mut self, _: &Site<'_>, _: &Tensor) -> Result<Option<Tensor>, BoxError> {
        self.0 += 1;
        Ok(None)
    }
}

struct WrongShape;

impl Interceptor for WrongShape {
    fn intercept(&mut self, _: &Site<'_>, _: &Tensor) -> Result<Option<Tensor>, BoxError> {
        Ok(Some(Tensor::scalar_f32(0.0)))
    }
}

#[test]
fn interceptor_transparency_and_contract() {
    let g = add_graph();
    let feeds: Feeds = [
        ("a".to_string(), f32t(&[2, 3], &[1.5; 6])),
        ("b".to_string(), f32t(&[2, 3], &[-0.25; 6])),
    ]
    .into();
    let golden = g.execute(&feeds, None).unwrap();
    let mut pass = Passthrough(0);
    let hooked = g.execute(&feeds, Some(&mut pass)).unwrap();
    assert_eq!(pass.0, 1);
    assert_eq!(golden.outputs, hooked.outputs);
    assert_eq!(golden.trace, hooked.trace);
    assert!(matches!(
        g.execute(&feeds, Some(&mut WrongShape)),
        Err(ExecError::Contract { .. })
    ));
}

#[test]
fn op_kind_parsing() {
    assert_eq!("matmul".parse::<OpKind>().unwrap(), OpKind::MatMul);
    assert_eq!("Conv2D".parse::<OpKind>().unwrap(), OpKind::Conv2D);
    assert!("Tanh".parse::<OpKind>().is_err());
}
