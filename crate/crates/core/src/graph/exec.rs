use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::tensor::Tensor;

use super::kernels::{self, KernelError};
use super::{Graph, Node, Op, OpKind};

/// Placeholder id to fed tensor.
pub type Feeds = BTreeMap<String, Tensor>;

pub type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("missing feed for placeholder {0:?}")]
    MissingFeed(String),
    #[error("feed {0:?} does not name a placeholder")]
    UnknownFeed(String),
    #[error("feed {placeholder:?}: expected {expected}, got {actual}")]
    FeedMismatch {
        placeholder: String,
        expected: String,
        actual: String,
    },
    #[error("node {node:?}: {source}")]
    Kernel {
        node: String,
        #[source]
        source: KernelError,
    },
    #[error("node {node:?}: interceptor failed: {source}")]
    Interceptor {
        node: String,
        #[source]
        source: BoxError,
    },
    #[error("node {node:?}: interceptor contract violated: {message}")]
    Contract { node: String, message: String },
}

/// Where an interceptor is being consulted.
#[derive(Debug, Clone, Copy)]
pub struct Site<'a> {
    /// Position in topological order.
    pub index: usize,
    pub node: &'a Node,
    /// Dynamic instance of this op kind among injectable nodes in this run.
    pub instance: usize,
}

impl Site<'_> {
    pub fn kind(&self) -> OpKind {
        self.node.kind()
    }
}

/// Post-operator hook. Called once for each injectable node right after its
/// output is computed; a returned tensor replaces the output downstream and
/// must keep dtype and shape.
pub trait Interceptor {
    fn intercept(&mut self, site: &Site<'_>, output: &Tensor) -> Result<Option<Tensor>, BoxError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceEntry {
    /// Position in topological order.
    pub node: usize,
    pub kind: OpKind,
    /// Injectable dynamic-instance index; `None` for non-injectable nodes.
    pub instance: Option<usize>,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ExecutionTrace {
    pub entries: Vec<TraceEntry>,
}

impl ExecutionTrace {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Dynamic instance counts per op kind, restricted to injectable nodes.
pub fn count_instances(trace: &ExecutionTrace) -> BTreeMap<OpKind, usize> {
    let mut counts = BTreeMap::new();
    for e in trace.entries.iter().filter(|e| e.instance.is_some()) {
        *counts.entry(e.kind).or_insert(0) += 1;
    }
    counts
}

#[derive(Debug, Clone)]
pub struct Execution {
    pub outputs: Vec<Tensor>,
    pub trace: ExecutionTrace,
    /// Every node's (possibly replaced) output, in topological order.
    pub values: Vec<Tensor>,
}

impl Graph {
    /// Run the graph once. Without an interceptor this is the golden run.
    pub fn execute(
        &self,
        feeds: &Feeds,
        mut interceptor: Option<&mut dyn Interceptor>,
    ) -> Result<Execution, ExecError> {
        self.check_feeds(feeds)?;
        let mut values: Vec<Tensor> = Vec::with_capacity(self.len());
        let mut trace = ExecutionTrace {
            entries: Vec::with_capacity(self.len()),
        };
        let mut instances = [0usize; OpKind::ALL.len()];

        for (i, node) in self.nodes.iter().enumerate() {
            let mut out = match &node.op {
                Op::Placeholder { .. } => feeds[&node.id].clone(),
                Op::Const(t) => t.clone(),
                op => {
                    let args: Vec<&Tensor> =
                        self.input_idx[i].iter().map(|&j| &values[j]).collect();
                    kernels::eval(op, &args).map_err(|source| ExecError::Kernel {
                        node: node.id.clone(),
                        source,
                    })?
                }
            };
            let kind = node.kind();
            let instance = if node.injectable {
                let slot = &mut instances[kind as usize];
                let instance = *slot;
                *slot += 1;
                if let Some(hook) = interceptor.as_deref_mut() {
                    let site = Site {
                        index: i,
                        node,
                        instance,
                    };
                    let replacement =
                        hook.intercept(&site, &out)
                            .map_err(|source| ExecError::Interceptor {
                                node: node.id.clone(),
                                source,
                            })?;
                    if let Some(rep) = replacement {
                        if rep.dtype() != out.dtype() || rep.shape() != out.shape() {
                            return Err(ExecError::Contract {
                                node: node.id.clone(),
                                message: format!(
                                    "replacement {} {:?} for output {} {:?}",
                                    rep.dtype(),
                                    rep.shape(),
                                    out.dtype(),
                                    out.shape()
                                ),
                            });
                        }
                        out = rep;
                    }
                }
                Some(instance)
            } else {
                None
            };
            trace.entries.push(TraceEntry {
                node: i,
                kind,
                instance,
                shape: out.shape().to_vec(),
            });
            values.push(out);
        }

        let outputs = self.outputs.iter().map(|&i| values[i].clone()).collect();
        Ok(Execution {
            outputs,
            trace,
            values,
        })
    }

    fn check_feeds(&self, feeds: &Feeds) -> Result<(), ExecError> {
        for (id, dtype, shape) in self.placeholders() {
            let Some(t) = feeds.get(id) else {
                return Err(ExecError::MissingFeed(id.to_string()));
            };
            if t.dtype() != dtype || t.shape() != shape {
                return Err(ExecError::FeedMismatch {
                    placeholder: id.to_string(),
                    expected: format!("{dtype} {shape:?}"),
                    actual: format!("{} {:?}", t.dtype(), t.shape()),
                });
            }
        }
        for id in feeds.keys() {
            match self.node(id) {
                Some(n) if n.kind() == OpKind::Placeholder => {}
                _ => return Err(ExecError::UnknownFeed(id.clone())),
            }
        }
        Ok(())
    }
}
