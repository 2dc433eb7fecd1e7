//! Model bundles on disk.
//!
//! A bundle is two files:
//!
//! * a graph document (`.gfi`), JSON listing nodes as
//!   `{id, op, inputs, attrs, injectable}` plus the output ids;
//! * a weights blob (`.gfiw`) holding every `Const` tensor.
//!
//! Weights layout, all integers little-endian:
//!
//! ```text
//! "GFIW" | version u16 | entry count u32
//! per entry: id length u16 | id (UTF-8) | dtype code u8 | rank u8
//!            | extents u32 * rank | raw little-endian elements
//! CRC-32 (IEEE) of every preceding byte, u32
//! ```
//!
//! Dtype codes: 0 F32, 1 F64, 2 I64, 3 Bool (one byte, 0 or 1). The same
//! blob format carries input feeds, keyed by placeholder id.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::graph::{Diagnostics, Feeds, Graph, Node, Op, OpKind, Padding};
use crate::tensor::{element_count, DType, Tensor, TensorData};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"GFIW";
pub const WEIGHTS_VERSION: u16 = 1;
const GRAPH_FORMAT: &str = "graphfi-graph";
const GRAPH_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("graph document parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("graph document: {0}")]
    Document(String),
    #[error("node {node:?}: {message}")]
    Attr { node: String, message: String },
    #[error("invalid graph: {0}")]
    Graph(#[from] Diagnostics),
    #[error("weights: bad magic, expected \"GFIW\"")]
    BadMagic,
    #[error("weights: unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("weights: truncated at offset {0}")]
    Truncated(usize),
    #[error("weights: checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("weights: {0} trailing bytes after last entry")]
    TrailingBytes(usize),
    #[error("weights entry at offset {offset}: {message}")]
    Entry { offset: usize, message: String },
    #[error("weights: duplicate entry {0:?}")]
    DuplicateEntry(String),
    #[error("weights: no entry for Const node {0:?}")]
    MissingWeight(String),
    #[error("weights: entry {0:?} matches no Const node")]
    ExtraWeight(String),
    #[error("weights: entry {id:?} is {actual}, graph declares {expected}")]
    WeightMismatch {
        id: String,
        expected: String,
        actual: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModelIoError + '_ {
    move |source| ModelIoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Weights blob
// ---------------------------------------------------------------------------

pub fn encode_weights<'a, I>(entries: I) -> Vec<u8>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let entries: Vec<_> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (id, t) in entries {
        out.extend_from_slice(&(id.len() as u16).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        out.push(t.dtype().code());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match t.data() {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::Bool(v) => out.extend(v.iter().map(|&b| b as u8)),
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelIoError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(ModelIoError::Truncated(self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], ModelIoError> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn u8(&mut self) -> Result<u8, ModelIoError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ModelIoError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32, ModelIoError> {
        Ok(u32::from_le_bytes(self.array()?))
    }
}

/// Decode a weights blob. Entries come back in file order.
pub fn decode_weights(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, ModelIoError> {
    if bytes.len() < 4 || &bytes[..4] != WEIGHTS_MAGIC {
        return Err(ModelIoError::BadMagic);
    }
    if bytes.len() < 14 {
        return Err(ModelIoError::Truncated(bytes.len()));
    }
    let (payload, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(ModelIoError::Checksum { stored, computed });
    }

    let mut r = Reader {
        bytes: payload,
        pos: 4,
    };
    let version = r.u16()?;
    if version != WEIGHTS_VERSION {
        return Err(ModelIoError::UnsupportedVersion(version));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let offset = r.pos;
        let entry_err = |message: String| ModelIoError::Entry { offset, message };
        let id_len = r.u16()? as usize;
        let id = std::str::from_utf8(r.take(id_len)?)
            .map_err(|e| entry_err(format!("id is not UTF-8: {e}")))?
            .to_string();
        let code = r.u8()?;
        let dtype =
            DType::from_code(code).ok_or_else(|| entry_err(format!("unknown dtype code {code}")))?;
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n = element_count(&shape);
        let raw = r.take(n.checked_mul(dtype.byte_width()).ok_or(ModelIoError::Truncated(r.pos))?)?;
        let data = match dtype {
            DType::F32 => TensorData::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::I64 => TensorData::I64(
                raw.chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::Bool => TensorData::Bool(
                raw.iter()
                    .map(|&b| match b {
                        0 => Ok(false),
                        1 => Ok(true),
                        _ => Err(entry_err(format!("bool byte {b:#04x}"))),
                    })
                    .collect::<Result<_, _>>()?,
            ),
        };
        let t = Tensor::new(shape, data).map_err(|e| entry_err(e.to_string()))?;
        entries.push((id, t));
    }
    if r.pos != payload.len() {
        return Err(ModelIoError::TrailingBytes(payload.len() - r.pos));
    }
    Ok(entries)
}

// ---------------------------------------------------------------------------
// Graph document
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphDoc {
    format: String,
    version: u32,
    nodes: Vec<NodeDoc>,
    outputs: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeDoc {
    id: String,
    op: String,
    #[serde(default)]
    inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    attrs: BTreeMap<String, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    injectable: Option<bool>,
}

struct Attrs<'a> {
    node: &'a str,
    map: &'a BTreeMap<String, Value>,
}

impl Attrs<'_> {
    fn err(&self, message: impl Into<String>) -> ModelIoError {
        ModelIoError::Attr {
            node: self.node.to_string(),
            message: message.into(),
        }
    }

    fn only(&self, allowed: &[&str]) -> Result<(), ModelIoError> {
        match self.map.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(self.err(format!("unexpected attribute {k:?}"))),
            None => Ok(()),
        }
    }

    fn get(&self, key: &str) -> Result<&Value, ModelIoError> {
        self.map
            .get(key)
            .ok_or_else(|| self.err(format!("missing attribute {key:?}")))
    }

    fn usize(&self, key: &str) -> Result<usize, ModelIoError> {
        self.get(key)?
            .as_u64()
            .map(|v| v as usize)
            .ok_or_else(|| self.err(format!("{key} must be a non-negative integer")))
    }

    fn usize_list(&self, key: &str) -> Result<Vec<usize>, ModelIoError> {
        let bad = || self.err(format!("{key} must be a list of non-negative integers"));
        self.get(key)?
            .as_array()
            .ok_or_else(bad)?
            .iter()
            .map(|v| v.as_u64().map(|x| x as usize).ok_or_else(bad))
            .collect()
    }

    fn pair(&self, key: &str) -> Result<[usize; 2], ModelIoError> {
        let v = self.usize_list(key)?;
        v.try_into()
            .map_err(|_| self.err(format!("{key} must have two entries")))
    }

    fn i64_list(&self, key: &str) -> Result<Vec<i64>, ModelIoError> {
        let bad = || self.err(format!("{key} must be a list of integers"));
        self.get(key)?
            .as_array()
            .ok_or_else(bad)?
            .iter()
            .map(|v| v.as_i64().ok_or_else(bad))
            .collect()
    }

    fn dtype(&self) -> Result<DType, ModelIoError> {
        let s = self
            .get("dtype")?
            .as_str()
            .ok_or_else(|| self.err("dtype must be a string"))?;
        DType::parse(s).ok_or_else(|| self.err(format!("unknown dtype {s:?}")))
    }

    fn padding(&self) -> Result<Padding, ModelIoError> {
        let s = self
            .get("padding")?
            .as_str()
            .ok_or_else(|| self.err("padding must be a string"))?;
        Padding::parse(s).ok_or_else(|| self.err(format!("padding must be VALID or SAME, got {s:?}")))
    }
}

/// Declared dtype/shape of a Const node, to be matched with its weight entry.
struct ConstDecl {
    dtype: DType,
    shape: Vec<usize>,
}

fn node_from_doc(doc: &NodeDoc) -> Result<(Node, Option<ConstDecl>), ModelIoError> {
    let kind: OpKind = doc.op.parse().map_err(|_| ModelIoError::Attr {
        node: doc.id.clone(),
        message: format!("unknown operator {:?}", doc.op),
    })?;
    let a = Attrs {
        node: &doc.id,
        map: &doc.attrs,
    };
    let mut decl = None;
    let op = match kind {
        OpKind::Const => {
            a.only(&["dtype", "shape"])?;
            let dtype = a.dtype()?;
            let shape = a.usize_list("shape")?;
            // Placeholder value until the weights are attached.
            let op = Op::Const(Tensor::zeros(dtype, shape.clone()));
            decl = Some(ConstDecl { dtype, shape });
            op
        }
        OpKind::Placeholder => {
            a.only(&["dtype", "shape"])?;
            Op::Placeholder {
                dtype: a.dtype()?,
                shape: a.usize_list("shape")?,
            }
        }
        OpKind::Conv2D => {
            a.only(&["strides", "padding"])?;
            Op::Conv2D {
                strides: a.pair("strides")?,
                padding: a.padding()?,
            }
        }
        OpKind::MaxPool => {
            a.only(&["window", "strides", "padding"])?;
            Op::MaxPool {
                window: a.pair("window")?,
                strides: a.pair("strides")?,
                padding: a.padding()?,
            }
        }
        OpKind::Mean => {
            a.only(&["axis"])?;
            Op::Mean {
                axis: a.usize("axis")?,
            }
        }
        OpKind::ArgMax => {
            a.only(&["axis"])?;
            Op::ArgMax {
                axis: a.usize("axis")?,
            }
        }
        OpKind::Reshape => {
            a.only(&["shape"])?;
            Op::Reshape {
                shape: a.i64_list("shape")?,
            }
        }
        simple => {
            a.only(&[])?;
            match simple {
                OpKind::Add => Op::Add,
                OpKind::Sub => Op::Sub,
                OpKind::Mul => Op::Mul,
                OpKind::MatMul => Op::MatMul,
                OpKind::BiasAdd => Op::BiasAdd,
                OpKind::ReLU => Op::ReLU,
                OpKind::Sigmoid => Op::Sigmoid,
                OpKind::Softmax => Op::Softmax,
                OpKind::Equal => Op::Equal,
                _ => unreachable!("attributed kinds handled above"),
            }
        }
    };
    let injectable = doc.injectable.unwrap_or(!kind.is_source());
    Ok((
        Node {
            id: doc.id.clone(),
            op,
            inputs: doc.inputs.clone(),
            injectable,
        },
        decl,
    ))
}

fn node_to_doc(node: &Node) -> NodeDoc {
    let mut attrs = BTreeMap::new();
    match &node.op {
        Op::Const(t) => {
            attrs.insert("dtype".into(), json!(t.dtype().name()));
            attrs.insert("shape".into(), json!(t.shape()));
        }
        Op::Placeholder { dtype, shape } => {
            attrs.insert("dtype".into(), json!(dtype.name()));
            attrs.insert("shape".into(), json!(shape));
        }
        Op::Conv2D { strides, padding } => {
            attrs.insert("strides".into(), json!(strides));
            attrs.insert("padding".into(), json!(padding.name()));
        }
        Op::MaxPool {
            window,
            strides,
            padding,
        } => {
            attrs.insert("window".into(), json!(window));
            attrs.insert("strides".into(), json!(strides));
            attrs.insert("padding".into(), json!(padding.name()));
        }
        Op::Mean { axis } | Op::ArgMax { axis } => {
            attrs.insert("axis".into(), json!(axis));
        }
        Op::Reshape { shape } => {
            attrs.insert("shape".into(), json!(shape));
        }
        _ => {}
    }
    NodeDoc {
        id: node.id.clone(),
        op: node.kind().name().to_string(),
        inputs: node.inputs.clone(),
        attrs,
        injectable: Some(node.injectable),
    }
}

/// Render the graph document (pretty JSON, topological node order).
pub fn graph_to_doc(g: &Graph) -> String {
    let doc = GraphDoc {
        format: GRAPH_FORMAT.into(),
        version: GRAPH_VERSION,
        nodes: g.nodes().iter().map(node_to_doc).collect(),
        outputs: g.output_ids().into_iter().map(String::from).collect(),
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("graph document serializes");
    s.push('\n');
    s
}

/// Weights blob for all Const nodes, in topological order.
pub fn graph_weights(g: &Graph) -> Vec<u8> {
    encode_weights(g.constants())
}

/// Build a graph from in-memory document text and weights bytes.
pub fn load_model_from(doc_text: &str, weights: &[u8]) -> Result<Graph, ModelIoError> {
    let doc: GraphDoc = serde_json::from_str(doc_text).map_err(|e| ModelIoError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    if doc.format != GRAPH_FORMAT {
        return Err(ModelIoError::Document(format!(
            "format is {:?}, expected {GRAPH_FORMAT:?}",
            doc.format
        )));
    }
    if doc.version != GRAPH_VERSION {
        return Err(ModelIoError::Document(format!(
            "unsupported version {}",
            doc.version
        )));
    }

    let mut by_id: HashMap<String, Tensor> = HashMap::new();
    for (id, t) in decode_weights(weights)? {
        if by_id.insert(id.clone(), t).is_some() {
            return Err(ModelIoError::DuplicateEntry(id));
        }
    }

    let mut nodes = Vec::with_capacity(doc.nodes.len());
    for nd in &doc.nodes {
        let (mut node, decl) = node_from_doc(nd)?;
        if let Some(decl) = decl {
            let t = by_id
                .remove(&node.id)
                .ok_or_else(|| ModelIoError::MissingWeight(node.id.clone()))?;
            if t.dtype() != decl.dtype || t.shape() != decl.shape.as_slice() {
                return Err(ModelIoError::WeightMismatch {
                    id: node.id.clone(),
                    expected: format!("{} {:?}", decl.dtype, decl.shape),
                    actual: format!("{} {:?}", t.dtype(), t.shape()),
                });
            }
            node.op = Op::Const(t);
        }
        nodes.push(node);
    }
    if let Some(extra) = by_id.keys().min() {
        return Err(ModelIoError::ExtraWeight(extra.clone()));
    }
    Ok(Graph::new(nodes, doc.outputs)?)
}

pub fn load_model(graph_path: &Path, weights_path: &Path) -> Result<Graph, ModelIoError> {
    let text = std::fs::read_to_string(graph_path).map_err(io_err(graph_path))?;
    let bytes = std::fs::read(weights_path).map_err(io_err(weights_path))?;
    load_model_from(&text, &bytes)
}

/// Write both files, each via a temporary file renamed into place.
pub fn save_model(g: &Graph, graph_path: &Path, weights_path: &Path) -> Result<(), ModelIoError> {
    write_atomic(weights_path, &graph_weights(g))?;
    write_atomic(graph_path, graph_to_doc(g).as_bytes())
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ModelIoError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| ModelIoError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

pub fn decode_feeds(bytes: &[u8]) -> Result<Feeds, ModelIoError> {
    let mut feeds = Feeds::new();
    for (id, t) in decode_weights(bytes)? {
        if feeds.insert(id.clone(), t).is_some() {
            return Err(ModelIoError::DuplicateEntry(id));
        }
    }
    Ok(feeds)
}

pub fn load_feeds(path: &Path) -> Result<Feeds, ModelIoError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_feeds(&bytes)
}

pub fn save_feeds(feeds: &Feeds, path: &Path) -> Result<(), ModelIoError> {
    write_atomic(path, &encode_weights(feeds.iter().map(|(k, v)| (k.as_str(), v))))
}
