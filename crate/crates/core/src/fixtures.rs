//! Small seeded networks with synthetic weights and inputs.
//!
//! Every builder is deterministic. The files under `fixtures/` in this crate
//! are exactly what [`write_fixture`] produces for these builders.
//!
//! | name           | input          | output                 |
//! |----------------|----------------|------------------------|
//! | tiny-mlp       | `x` [1, 8]     | label of 4 classes     |
//! | tiny-cnn       | `x` [1, 8, 8, 1] | label of 4 classes   |
//! | tiny-regressor | `x` [1, 6]     | angle in degrees [1, 1] |
//! | rnn4           | `x0`..`x3` [1, 4] | label of 3 classes  |
//!
//! Inputs are rejection-sampled so that the golden top-1 probability leads
//! the runner-up by at least [`MIN_MARGIN`].

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::campaign::SdcCriterion;
use crate::graph::{Feeds, Graph, Node, Op, Padding};
use crate::model_io::{save_feeds, save_model, ModelIoError};
use crate::tensor::{DType, Tensor};

pub const INPUTS_PER_FIXTURE: usize = 10;
pub const MIN_MARGIN: f32 = 0.2;

pub struct Fixture {
    pub name: &'static str,
    pub graph: Graph,
    pub inputs: Vec<Feeds>,
    pub criterion: SdcCriterion,
}

pub fn all() -> Vec<Fixture> {
    vec![tiny_mlp(), tiny_cnn(), tiny_regressor(), rnn4()]
}

pub fn by_name(name: &str) -> Option<Fixture> {
    match name {
        "tiny-mlp" => Some(tiny_mlp()),
        "tiny-cnn" => Some(tiny_cnn()),
        "tiny-regressor" => Some(tiny_regressor()),
        "rnn4" => Some(rnn4()),
        _ => None,
    }
}

/// Uniform in `[-scale, scale)`.
fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n).map(|_| (rng.random::<f32>() * 2.0 - 1.0) * scale).collect();
    Tensor::from_f32(shape.to_vec(), v).unwrap()
}

/// Variance-preserving scale for a layer with `fan_in` inputs, times `gain`.
fn weights(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, gain: f32) -> Tensor {
    uniform(rng, shape, gain * (6.0 / fan_in as f32).sqrt())
}

fn konst(id: &str, t: Tensor) -> Node {
    Node::new(id, Op::Const(t), &[])
}

fn input(id: &str, shape: &[usize]) -> Node {
    Node::new(
        id,
        Op::Placeholder {
            dtype: DType::F32,
            shape: shape.to_vec(),
        },
        &[],
    )
}

/// Draw inputs until `count` of them give a confident golden prediction.
fn confident_inputs<F>(g: &Graph, probs_node: &str, rng: &mut ChaCha8Rng, mut draw: F) -> Vec<Feeds>
where
    F: FnMut(&mut ChaCha8Rng) -> Feeds,
{
    let probs_at = g.node_index(probs_node).expect("probability node");
    let mut out = Vec::with_capacity(INPUTS_PER_FIXTURE);
    for _ in 0..10_000 {
        let feeds = draw(rng);
        let exec = g.execute(&feeds, None).expect("fixture executes");
        let mut p = exec.values[probs_at].as_f32().unwrap().to_vec();
        p.sort_by(|a, b| b.total_cmp(a));
        if p[0] - p[1] >= MIN_MARGIN {
            out.push(feeds);
            if out.len() == INPUTS_PER_FIXTURE {
                return out;
            }
        }
    }
    panic!("could not find confident inputs for {probs_node}");
}

pub fn tiny_mlp() -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6d6c70);
    let nodes = vec![
        input("x", &[1, 8]),
        konst("w1", weights(&mut rng, &[8, 16], 8, 1.0)),
        konst("b1", uniform(&mut rng, &[16], 0.1)),
        konst("w2", weights(&mut rng, &[16, 4], 16, 3.0)),
        konst("b2", uniform(&mut rng, &[4], 0.1)),
        Node::new("fc1", Op::MatMul, &["x", "w1"]),
        Node::new("fc1_bias", Op::BiasAdd, &["fc1", "b1"]),
        Node::new("relu1", Op::ReLU, &["fc1_bias"]),
        Node::new("fc2", Op::MatMul, &["relu1", "w2"]),
        Node::new("logits", Op::BiasAdd, &["fc2", "b2"]),
        Node::new("probs", Op::Softmax, &["logits"]),
        Node::new("label", Op::ArgMax { axis: 1 }, &["probs"]),
    ];
    let graph = Graph::new(nodes, vec!["label".into()]).expect("tiny-mlp is well formed");
    let inputs = confident_inputs(&graph, "probs", &mut rng, |r| {
        [("x".to_string(), uniform(r, &[1, 8], 1.0))].into()
    });
    Fixture {
        name: "tiny-mlp",
        graph,
        inputs,
        criterion: SdcCriterion::ClassMismatch,
    }
}

pub fn tiny_cnn() -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(0x636e6e);
    let nodes = vec![
        input("x", &[1, 8, 8, 1]),
        konst("mean", Tensor::scalar_f32(0.5)),
        konst("k1", weights(&mut rng, &[3, 3, 1, 4], 9, 1.0)),
        konst("c1", uniform(&mut rng, &[4], 0.1)),
        konst("k2", weights(&mut rng, &[3, 3, 4, 8], 36, 1.0)),
        konst("c2", uniform(&mut rng, &[8], 0.1)),
        konst("w", weights(&mut rng, &[32, 4], 32, 3.0)),
        konst("b", uniform(&mut rng, &[4], 0.1)),
        Node::new("centered", Op::Sub, &["x", "mean"]).not_injectable(),
        Node::new(
            "conv1",
            Op::Conv2D {
                strides: [1, 1],
                padding: Padding::Same,
            },
            &["centered", "k1"],
        ),
        Node::new("conv1_bias", Op::BiasAdd, &["conv1", "c1"]),
        Node::new("relu1", Op::ReLU, &["conv1_bias"]),
        Node::new(
            "pool1",
            Op::MaxPool {
                window: [2, 2],
                strides: [2, 2],
                padding: Padding::Valid,
            },
            &["relu1"],
        ),
        Node::new(
            "conv2",
            Op::Conv2D {
                strides: [1, 1],
                padding: Padding::Valid,
            },
            &["pool1", "k2"],
        ),
        Node::new("conv2_bias", Op::BiasAdd, &["conv2", "c2"]),
        Node::new("relu2", Op::ReLU, &["conv2_bias"]),
        Node::new("flat", Op::Reshape { shape: vec![1, -1] }, &["relu2"]),
        Node::new("fc", Op::MatMul, &["flat", "w"]),
        Node::new("logits", Op::BiasAdd, &["fc", "b"]),
        Node::new("probs", Op::Softmax, &["logits"]),
        Node::new("label", Op::ArgMax { axis: 1 }, &["probs"]),
    ];
    let graph = Graph::new(nodes, vec!["label".into()]).expect("tiny-cnn is well formed");
    let inputs = confident_inputs(&graph, "probs", &mut rng, |r| {
        let img = uniform(r, &[1, 8, 8, 1], 0.5);
        let shifted: Vec<f32> = img.as_f32().unwrap().iter().map(|v| v + 0.5).collect();
        [(
            "x".to_string(),
            Tensor::from_f32(vec![1, 8, 8, 1], shifted).unwrap(),
        )]
        .into()
    });
    Fixture {
        name: "tiny-cnn",
        graph,
        inputs,
        criterion: SdcCriterion::ClassMismatch,
    }
}

pub fn tiny_regressor() -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(0x726567);
    let nodes = vec![
        input("x", &[1, 6]),
        konst("mean", Tensor::scalar_f32(0.5)),
        konst("w1", weights(&mut rng, &[6, 12], 6, 1.0)),
        konst("b1", uniform(&mut rng, &[12], 0.1)),
        konst("w2", weights(&mut rng, &[12, 1], 12, 0.5)),
        konst("b2", uniform(&mut rng, &[1], 0.1)),
        konst("degrees", Tensor::scalar_f32(45.0)),
        Node::new("centered", Op::Sub, &["x", "mean"]).not_injectable(),
        Node::new("fc1", Op::MatMul, &["centered", "w1"]),
        Node::new("fc1_bias", Op::BiasAdd, &["fc1", "b1"]),
        Node::new("relu1", Op::ReLU, &["fc1_bias"]),
        Node::new("fc2", Op::MatMul, &["relu1", "w2"]),
        Node::new("fc2_bias", Op::BiasAdd, &["fc2", "b2"]),
        Node::new("angle", Op::Mul, &["fc2_bias", "degrees"]),
    ];
    let graph = Graph::new(nodes, vec!["angle".into()]).expect("tiny-regressor is well formed");
    let inputs = (0..INPUTS_PER_FIXTURE)
        .map(|_| {
            let x = uniform(&mut rng, &[1, 6], 0.5);
            let v: Vec<f32> = x.as_f32().unwrap().iter().map(|v| v + 0.5).collect();
            [("x".to_string(), Tensor::from_f32(vec![1, 6], v).unwrap())].into()
        })
        .collect();
    Fixture {
        name: "tiny-regressor",
        graph,
        inputs,
        criterion: SdcCriterion::RegressionThreshold(15.0),
    }
}

pub const RNN_STEPS: usize = 4;

pub fn rnn4() -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(0x726e6e);
    let mut nodes = vec![
        konst("h0", Tensor::zeros(DType::F32, vec![1, 8])),
        konst("wx", weights(&mut rng, &[4, 8], 4, 1.0)),
        konst("wh", weights(&mut rng, &[8, 8], 8, 1.0)),
        konst("bh", uniform(&mut rng, &[8], 0.1)),
        konst("wo", weights(&mut rng, &[8, 3], 8, 4.0)),
        konst("bo", uniform(&mut rng, &[3], 0.1)),
    ];
    let mut h = "h0".to_string();
    for t in 0..RNN_STEPS {
        let x = format!("x{t}");
        let (xw, hw, sum, pre, ht) = (
            format!("xw{t}"),
            format!("hw{t}"),
            format!("sum{t}"),
            format!("pre{t}"),
            format!("h{}", t + 1),
        );
        nodes.push(input(&x, &[1, 4]));
        nodes.push(Node::new(&xw, Op::MatMul, &[&x, "wx"]));
        nodes.push(Node::new(&hw, Op::MatMul, &[&h, "wh"]));
        nodes.push(Node::new(&sum, Op::Add, &[&xw, &hw]));
        nodes.push(Node::new(&pre, Op::BiasAdd, &[&sum, "bh"]));
        nodes.push(Node::new(&ht, Op::Sigmoid, &[&pre]));
        h = ht;
    }
    nodes.push(Node::new("out", Op::MatMul, &[&h, "wo"]));
    nodes.push(Node::new("logits", Op::BiasAdd, &["out", "bo"]));
    nodes.push(Node::new("probs", Op::Softmax, &["logits"]));
    nodes.push(Node::new("label", Op::ArgMax { axis: 1 }, &["probs"]));
    let graph = Graph::new(nodes, vec!["label".into()]).expect("rnn4 is well formed");
    let inputs = confident_inputs(&graph, "probs", &mut rng, |r| {
        (0..RNN_STEPS)
            .map(|t| (format!("x{t}"), uniform(r, &[1, 4], 1.0)))
            .collect()
    });
    Fixture {
        name: "rnn4",
        graph,
        inputs,
        criterion: SdcCriterion::ClassMismatch,
    }
}

/// Root of the shipped fixture files.
pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

/// `<dir>/<name>/{graph.gfi, weights.gfiw, inputs/inN.gfiw}`.
pub fn fixture_paths(dir: &Path, name: &str) -> (PathBuf, PathBuf, Vec<PathBuf>) {
    let root = dir.join(name);
    let inputs = (0..INPUTS_PER_FIXTURE)
        .map(|i| root.join("inputs").join(format!("in{i}.gfiw")))
        .collect();
    (root.join("graph.gfi"), root.join("weights.gfiw"), inputs)
}

pub fn write_fixture(f: &Fixture, dir: &Path) -> Result<(), ModelIoError> {
    let (graph, weights, inputs) = fixture_paths(dir, f.name);
    let inputs_dir = dir.join(f.name).join("inputs");
    std::fs::create_dir_all(&inputs_dir).map_err(|source| ModelIoError::Io {
        path: inputs_dir.clone(),
        source,
    })?;
    save_model(&f.graph, &graph, &weights)?;
    for (feeds, path) in f.inputs.iter().zip(inputs) {
        save_feeds(feeds, &path)?;
    }
    Ok(())
}
