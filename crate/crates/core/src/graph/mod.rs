//! Dataflow graph IR and its interpreter.
//!
//! A [`Graph`] is immutable once built: construction sorts nodes
//! topologically, checks arity and attributes, and runs static type/shape
//! inference. Execution lives in [`exec`]; the per-node injection seam is
//! the [`Interceptor`] trait.

mod exec;
pub mod kernels;
mod shape;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{DType, Tensor};

pub use exec::{
    count_instances, BoxError, ExecError, Execution, ExecutionTrace, Feeds, Interceptor, Site,
    TraceEntry,
};
pub use shape::TensorType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    Const,
    Placeholder,
    Add,
    Sub,
    Mul,
    MatMul,
    BiasAdd,
    Conv2D,
    MaxPool,
    ReLU,
    Sigmoid,
    Softmax,
    Mean,
    Reshape,
    ArgMax,
    Equal,
}

impl OpKind {
    pub const ALL: [OpKind; 16] = [
        OpKind::Const,
        OpKind::Placeholder,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::MatMul,
        OpKind::BiasAdd,
        OpKind::Conv2D,
        OpKind::MaxPool,
        OpKind::ReLU,
        OpKind::Sigmoid,
        OpKind::Softmax,
        OpKind::Mean,
        OpKind::Reshape,
        OpKind::ArgMax,
        OpKind::Equal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Const => "Const",
            OpKind::Placeholder => "Placeholder",
            OpKind::Add => "Add",
            OpKind::Sub => "Sub",
            OpKind::Mul => "Mul",
            OpKind::MatMul => "MatMul",
            OpKind::BiasAdd => "BiasAdd",
            OpKind::Conv2D => "Conv2D",
            OpKind::MaxPool => "MaxPool",
            OpKind::ReLU => "ReLU",
            OpKind::Sigmoid => "Sigmoid",
            OpKind::Softmax => "Softmax",
            OpKind::Mean => "Mean",
            OpKind::Reshape => "Reshape",
            OpKind::ArgMax => "ArgMax",
            OpKind::Equal => "Equal",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            OpKind::Const | OpKind::Placeholder => 0,
            OpKind::MaxPool
            | OpKind::ReLU
            | OpKind::Sigmoid
            | OpKind::Softmax
            | OpKind::Mean
            | OpKind::Reshape
            | OpKind::ArgMax => 1,
            OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::MatMul
            | OpKind::BiasAdd
            | OpKind::Conv2D
            | OpKind::Equal => 2,
        }
    }

    /// Sources carry no computed output and are never injection targets.
    pub fn is_source(self) -> bool {
        matches!(self, OpKind::Const | OpKind::Placeholder)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown operator {0:?}")]
pub struct UnknownOp(pub String);

impl FromStr for OpKind {
    type Err = UnknownOp;

    /// Case-insensitive.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let wanted = s.trim();
        OpKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(wanted))
            .ok_or_else(|| UnknownOp(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Padding {
    Valid,
    Same,
}

impl Padding {
    pub fn name(self) -> &'static str {
        match self {
            Padding::Valid => "VALID",
            Padding::Same => "SAME",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "VALID" => Some(Padding::Valid),
            "SAME" => Some(Padding::Same),
            _ => None,
        }
    }
}

/// An operator together with its attributes.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Const(Tensor),
    Placeholder { dtype: DType, shape: Vec<usize> },
    Add,
    Sub,
    Mul,
    MatMul,
    BiasAdd,
    /// NHWC input, HWIO kernel.
    Conv2D { strides: [usize; 2], padding: Padding },
    /// NHWC input.
    MaxPool {
        window: [usize; 2],
        strides: [usize; 2],
        padding: Padding,
    },
    ReLU,
    Sigmoid,
    /// Normalizes along the last axis.
    Softmax,
    /// Reduces `axis` away.
    Mean { axis: usize },
    /// At most one extent may be `-1` (inferred).
    Reshape { shape: Vec<i64> },
    ArgMax { axis: usize },
    Equal,
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Const(_) => OpKind::Const,
            Op::Placeholder { .. } => OpKind::Placeholder,
            Op::Add => OpKind::Add,
            Op::Sub => OpKind::Sub,
            Op::Mul => OpKind::Mul,
            Op::MatMul => OpKind::MatMul,
            Op::BiasAdd => OpKind::BiasAdd,
            Op::Conv2D { .. } => OpKind::Conv2D,
            Op::MaxPool { .. } => OpKind::MaxPool,
            Op::ReLU => OpKind::ReLU,
            Op::Sigmoid => OpKind::Sigmoid,
            Op::Softmax => OpKind::Softmax,
            Op::Mean { .. } => OpKind::Mean,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::ArgMax { .. } => OpKind::ArgMax,
            Op::Equal => OpKind::Equal,
        }
    }

    fn check_attrs(&self) -> Result<(), String> {
        match self {
            Op::Conv2D { strides, .. } if strides.contains(&0) => {
                Err("strides must be positive".into())
            }
            Op::MaxPool {
                window, strides, ..
            } if window.contains(&0) || strides.contains(&0) => {
                Err("window and strides must be positive".into())
            }
            Op::Reshape { shape } => {
                if shape.iter().filter(|&&d| d == -1).count() > 1 {
                    return Err("at most one -1 extent".into());
                }
                if shape.iter().any(|&d| d < -1) {
                    return Err(format!("invalid target shape {shape:?}"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: String,
    pub op: Op,
    pub inputs: Vec<String>,
    /// Eligible for fault injection. Always false for sources; experimenters
    /// also clear it for input-preprocessing nodes.
    pub injectable: bool,
}

impl Node {
    /// Node with the default injectability for its kind.
    pub fn new(id: impl Into<String>, op: Op, inputs: &[&str]) -> Self {
        let injectable = !op.kind().is_source();
        Node {
            id: id.into(),
            op,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            injectable,
        }
    }

    pub fn not_injectable(mut self) -> Self {
        self.injectable = false;
        self
    }

    pub fn kind(&self) -> OpKind {
        self.op.kind()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("duplicate node id {0:?}")]
    DuplicateId(String),
    #[error("node {node:?} references missing input {input:?}")]
    DanglingInput { node: String, input: String },
    #[error("cycle through node {0:?}")]
    Cycle(String),
    #[error("node {node:?}: {kind} takes {expected} inputs, got {actual}")]
    Arity {
        node: String,
        kind: OpKind,
        expected: usize,
        actual: usize,
    },
    #[error("node {node:?}: bad attributes: {message}")]
    Attr { node: String, message: String },
    #[error("node {node:?}: {message}")]
    Shape { node: String, message: String },
    #[error("node {0:?}: sources cannot be injectable")]
    InjectableSource(String),
    #[error("unknown output {0:?}")]
    UnknownOutput(String),
    #[error("graph has no outputs")]
    NoOutputs,
}

impl GraphError {
    /// The node a diagnostic refers to, when it refers to one.
    pub fn node(&self) -> Option<&str> {
        match self {
            GraphError::DuplicateId(n)
            | GraphError::Cycle(n)
            | GraphError::InjectableSource(n)
            | GraphError::UnknownOutput(n) => Some(n),
            GraphError::DanglingInput { node, .. }
            | GraphError::Arity { node, .. }
            | GraphError::Attr { node, .. }
            | GraphError::Shape { node, .. } => Some(node),
            GraphError::NoOutputs => None,
        }
    }
}

/// Every problem found while validating a graph.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct Diagnostics(pub Vec<GraphError>);

impl fmt::Display for Diagnostics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

/// Validated, topologically ordered dataflow graph.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    index: HashMap<String, usize>,
    input_idx: Vec<Vec<usize>>,
    outputs: Vec<usize>,
    types: Vec<TensorType>,
}

impl Graph {
    /// Build and validate. `nodes` may be in any order; ties in the
    /// topological sort keep the given order.
    pub fn new(nodes: Vec<Node>, outputs: Vec<String>) -> Result<Self, Diagnostics> {
        let order = check_structure(&nodes, &outputs).map_err(Diagnostics)?;

        let mut slots: Vec<Option<Node>> = nodes.into_iter().map(Some).collect();
        let nodes: Vec<Node> = order.iter().map(|&i| slots[i].take().unwrap()).collect();
        let index: HashMap<String, usize> = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.clone(), i))
            .collect();
        let input_idx: Vec<Vec<usize>> = nodes
            .iter()
            .map(|n| n.inputs.iter().map(|i| index[i]).collect())
            .collect();
        let outputs: Vec<usize> = outputs.iter().map(|o| index[o]).collect();

        let types = infer_types(&nodes, &input_idx, &HashMap::new()).map_err(Diagnostics)?;
        Ok(Graph {
            nodes,
            index,
            input_idx,
            outputs,
            types,
        })
    }

    /// Nodes in topological order.
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.index.get(id).map(|&i| &self.nodes[i])
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn topo_order(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().map(|n| n.id.as_str())
    }

    pub fn output_ids(&self) -> Vec<&str> {
        self.outputs
            .iter()
            .map(|&i| self.nodes[i].id.as_str())
            .collect()
    }



    /// Topological positions of node `i`'s inputs.
    pub fn input_positions(&self, i: usize) -> &[usize] {
        &self.input_idx[i]
    }

    /// Statically inferred dtype and shape of node `i`.
    pub fn node_type(&self, i: usize) -> &TensorType {
        &self.types[i]
    }

    pub fn placeholders(&self) -> impl Iterator<Item = (&str, DType, &[usize])> {
        self.nodes.iter().filter_map(|n| match &n.op {
            Op::Placeholder { dtype, shape } => Some((n.id.as_str(), *dtype, shape.as_slice())),
            _ => None,
        })
    }

    /// Const nodes in topological order.
    pub fn constants(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.nodes.iter().filter_map(|n| match &n.op {
            Op::Const(t) => Some((n.id.as_str(), t)),
            _ => None,
        })
    }

    /// Static per-kind count of injectable nodes.
    pub fn injectable_kinds(&self) -> BTreeMap<OpKind, usize> {
        let mut counts = BTreeMap::new();
        for n in self.nodes.iter().filter(|n| n.injectable) {
            *counts.entry(n.kind()).or_insert(0) += 1;
        }
        counts
    }
}

/// Check a node list without building a graph. Collects every diagnostic.
pub fn validate(nodes: &[Node], outputs: &[String]) -> Result<(), Diagnostics> {
    Graph::new(nodes.to_vec(), outputs.to_vec()).map(|_| ())
}

/// Static shapes of every node given placeholder feed shapes. Placeholders
/// missing from `feed_shapes` use their declared shape.
pub fn infer_shapes(
    g: &Graph,
    feed_shapes: &HashMap<String, Vec<usize>>,
) -> Result<BTreeMap<String, Vec<usize>>, Diagnostics> {
    let types = infer_types(&g.nodes, &g.input_idx, feed_shapes).map_err(Diagnostics)?;
    Ok(g
        .nodes
        .iter()
        .zip(types)
        .map(|(n, t)| (n.id.clone(), t.shape))
        .collect())
}

fn infer_types(
    nodes: &[Node],
    input_idx: &[Vec<usize>],
    feed_shapes: &HashMap<String, Vec<usize>>,
) -> Result<Vec<TensorType>, Vec<GraphError>> {
    let mut types: Vec<Option<TensorType>> = Vec::with_capacity(nodes.len());
    let mut errors = Vec::new();
    for (i, node) in nodes.iter().enumerate() {
        let inputs: Option<Vec<&TensorType>> =
            input_idx[i].iter().map(|&j| types[j].as_ref()).collect();
        // Upstream failure already reported.
        let Some(inputs) = inputs else {
            types.push(None);
            continue;
        };
        let inferred = match (&node.op, feed_shapes.get(&node.id)) {
            (Op::Placeholder { dtype, .. }, Some(shape)) => Ok(TensorType {
                dtype: *dtype,
                shape: shape.clone(),
            }),
            _ => shape::infer(&node.op, &inputs),
        };
        match inferred {
            Ok(t) => types.push(Some(t)),
            Err(message) => {
                errors.push(GraphError::Shape {
                    node: node.id.clone(),
                    message,
                });
                types.push(None);
            }
        }
    }
    if errors.is_empty() {
        Ok(types.into_iter().map(Option::unwrap).collect())
    } else {
        Err(errors)
    }
}

/// Structural checks plus a stable topological sort. Returns the order as
/// indices into `nodes`.
fn check_structure(nodes: &[Node], outputs: &[String]) -> Result<Vec<usize>, Vec<GraphError>> {
    let mut errors = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for (i, n) in nodes.iter().enumerate() {
        if index.insert(n.id.as_str(), i).is_some() {
            errors.push(GraphError::DuplicateId(n.id.clone()));
        }
    }
    for n in nodes {
        let kind = n.kind();
        if n.inputs.len() != kind.arity() {
            errors.push(GraphError::Arity {
                node: n.id.clone(),
                kind,
                expected: kind.arity(),
                actual: n.inputs.len(),
            });
        }
        for input in &n.inputs {
            if !index.contains_key(input.as_str()) {
                errors.push(GraphError::DanglingInput {
                    node: n.id.clone(),
                    input: input.clone(),
                });
            }
        }
        if let Err(message) = n.op.check_attrs() {
            errors.push(GraphError::Attr {
                node: n.id.clone(),
                message,
            });
        }
        if n.injectable && kind.is_source() {
            errors.push(GraphError::InjectableSource(n.id.clone()));
        }
    }
    if outputs.is_empty() {
        errors.push(GraphError::NoOutputs);
    }
    for o in outputs {
        if !index.contains_key(o.as_str()) {
            errors.push(GraphError::UnknownOutput(o.clone()));
        }
    }
    if !errors.is_empty() {
        return Err(errors);
    }

    // Kahn's algorithm; the ready set is ordered by original position.
    let mut indegree: Vec<usize> = nodes.iter().map(|n| n.inputs.len()).collect();
    let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
    for (i, n) in nodes.iter().enumerate() {
        for input in &n.inputs {
            consumers[index[input.as_str()]].push(i);
        }
    }
    let mut ready: BTreeSet<usize> =
        (0..nodes.len()).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &c in &consumers[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.insert(c);
            }
        }
    }
    if order.len() != nodes.len() {
        let stuck = (0..nodes.len()).find(|&i| indegree[i] > 0).unwrap();
        return Err(vec![GraphError::Cycle(nodes[stuck].id.clone())]);
    }
    Ok(order)
}

#[cfg(test)]
mod tests;
