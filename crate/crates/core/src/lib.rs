//! Edge-inference toolchain for a seven-class smart waste bin: graph IR,
//! optimization passes, quantization, execution, model builders, data
//! handling, metrics, the bin control policy and power budgeting.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod binctl;
pub mod data;
pub mod eval;
pub mod exec;
pub mod format;
pub mod graph;
pub mod labels;
pub mod passes;
pub mod power;
pub mod quant;
pub mod zoo;
pub mod tensor;

pub use exec::{plan, run, ExecError, ExecPath, ExecutionPlan};
pub use graph::{Graph, GraphBuilder, Op, OpKind};
pub use labels::WasteClass;
pub use tensor::{DType, QuantParams, Tensor};
