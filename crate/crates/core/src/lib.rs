//! Fault injection for tensor dataflow graphs.
//!
//! Operator outputs of a graph are corrupted at run time according to a
//! configured fault type and injection mode, and campaigns of such runs are
//! compared against golden (fault-free) runs to measure silent data
//! corruption (SDC) rates.
//!
//! Layers, bottom-up:
//! - [`tensor`]: values and bit-exact corruption primitives
//! - [`graph`]: the dataflow IR, shape inference and the interpreter
//! - [`model_io`]: graph documents and the binary weights format
//! - [`config`]: the YAML campaign configuration
//! - [`injection`]: planning and applying faults through the interpreter's
//!   interception seam
//! - [`campaign`]: golden runs, parallel campaigns and SDC statistics
//! - [`cli`]: the `graphfi` command line

pub mod campaign;
pub mod cli;
pub mod config;
pub mod fixtures;
pub mod graph;
pub mod injection;
pub mod model_io;
pub mod rng;
pub mod tensor;

pub use graph::{Feeds, Graph, Node, Op, OpKind, Padding};
pub use tensor::{DType, Tensor, TensorData};
