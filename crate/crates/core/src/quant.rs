//! Post-training quantization to f16 or i8.
//!
//! Weights are quantized symmetrically per tensor; activations get asymmetric
//! per-tensor parameters from calibration ranges. Conv and dense biases stay
//! f32 in the graph and are folded into the i32 accumulator at run time.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::exec::{plan, ExecError, ExecPath};
use crate::graph::{infer_shapes, Graph, GraphError, NodeId, Op};
use crate::tensor::{DType, QuantParams, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    F16,
    I8,
}

impl FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f16" => Ok(Scheme::F16),
            "i8" | "int8" => Ok(Scheme::I8),
            other => Err(format!("unknown scheme {other:?} (expected f16|i8)")),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::F16 => "f16",
            Scheme::I8 => "i8",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TensorStats {
    pub min: f32,
    pub max: f32,
    pub samples: usize,
}

impl TensorStats {
    fn of(values: &[f32]) -> Self {
        let (min, max) = values
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        TensorStats { min, max, samples: 1 }
    }

    pub fn merge(self, other: TensorStats) -> TensorStats {
        TensorStats {
            min: self.min.min(other.min),
            max: self.max.max(other.max),
            samples: self.samples + other.samples,
        }
    }
}

/// Running activation ranges keyed by node id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub tensors: BTreeMap<NodeId, TensorStats>,
}

impl CalibrationStats {
    pub fn get(&self, id: NodeId) -> Option<&TensorStats> {
        self.tensors.get(&id)
    }

    /// Elementwise union of two sets of ranges; associative and commutative.
    pub fn merge(mut self, other: &CalibrationStats) -> CalibrationStats {
        for (&id, &s) in &other.tensors {
            self.tensors
                .entry(id)
                .and_modify(|e| *e = e.merge(s))
                .or_insert(s);
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QuantError {
    #[error("calibration needs at least one input")]
    EmptyDataset,
    #[error("no calibration statistics for node {0} ({1})")]
    MissingStats(NodeId, String),
    #[error("graph is already quantized")]
    AlreadyQuantized,
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QuantDiagnostic {
    /// Range collapsed to a single value; scale forced to 1.
    DegenerateRange { node: NodeId, name: String, value: f32 },
}

impl fmt::Display for QuantDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QuantDiagnostic::DegenerateRange { node, name, value } => {
                write!(f, "node {node} ({name}) has the constant range {value}; using scale 1")
            }
        }
    }
}

fn degenerate(value: f32) -> QuantParams {
    QuantParams {
        scale: 1.0,
        zero_point: (f64::from(value).round().clamp(-128.0, 127.0)) as i32,
    }
}

/// Min/max of every computed tensor over `dataset`, by reference execution.
pub fn calibrate(graph: &Graph, dataset: &[Tensor]) -> Result<CalibrationStats, QuantError> {
    if dataset.is_empty() {
        return Err(QuantError::EmptyDataset);
    }
    let annotated;
    let g = if graph.nodes().iter().all(|n| n.shape.is_some()) {
        graph
    } else {
        annotated = infer_shapes(graph)?;
        &annotated
    };
    let p = plan(g, ExecPath::Reference)?;
    let mut stats = CalibrationStats::default();
    for x in dataset {
        let mut one = CalibrationStats::default();
        p.run_observed(x, |node, t| {
            one.tensors.insert(node.id, TensorStats::of(&t.to_f32()));
        })?;
        stats = stats.merge(&one);
    }
    Ok(stats)
}

/// Symmetric i8 copy of a weight tensor. All-zero tensors get scale 1.
pub fn quantize_weight(t: &Tensor) -> (Tensor, bool) {
    let max_abs = t.to_f32().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    match QuantParams::symmetric(max_abs) {
        Some(q) => (t.quantize_with(q), false),
        None => (t.quantize_with(degenerate(0.0)), true),
    }
}

/// Convert a float graph. `stats` is required for i8 and must cover every
/// computed node except softmax outputs, which stay f32.
pub fn quantize(
    graph: &Graph,
    stats: Option<&CalibrationStats>,
    scheme: Scheme,
) -> Result<(Graph, Vec<QuantDiagnostic>), QuantError> {
    if graph.weights().values().any(|t| t.dtype() != DType::F32) || graph.nodes().iter().any(|n| n.quant.is_some()) {
        return Err(QuantError::AlreadyQuantized);
    }
    let mut diags = Vec::new();
    let (mut nodes, mut weights, inputs, outputs, meta) = graph.clone().into_parts();
    match scheme {
        Scheme::F16 => {
            for t in weights.values_mut() {
                *t = t.to_f16_tensor();
            }
        }
        Scheme::I8 => {
            let biases: HashSet<NodeId> = nodes
                .iter()
                .filter(|n| matches!(n.op, Op::Conv2D(_) | Op::DepthwiseConv2D(_) | Op::Dense { .. }))
                .filter_map(|n| n.inputs.get(2).copied())
                .collect();
            for n in &nodes {
                if let (Op::Const, false) = (&n.op, biases.contains(&n.id)) {
                    let t = weights.get_mut(&n.id).expect("const has a tensor");
                    let (q, degenerate) = quantize_weight(t);
                    if degenerate {
                        diags.push(QuantDiagnostic::DegenerateRange {
                            node: n.id,
                            name: n.name.clone(),
                            value: 0.0,
                        });
                    }
                    *t = q;
                }
            }
            let stats = stats.ok_or(QuantError::MissingStats(
                graph.inputs().first().copied().unwrap_or_default(),
                "input".into(),
            ))?;
            let order = graph.topo_order()?;
            for pos in order {
                let n = &nodes[pos];
                let q = match n.op {
                    Op::Const | Op::Softmax => None,
                    Op::Reshape { .. } => {
                        let src = n.inputs[0];
                        nodes.iter().find(|m| m.id == src).and_then(|m| m.quant)
                    }
                    _ => {
                        let s = stats
                            .get(n.id)
                            .ok_or_else(|| QuantError::MissingStats(n.id, n.name.clone()))?;
                        Some(QuantParams::asymmetric(s.min, s.max).unwrap_or_else(|| {
                            diags.push(QuantDiagnostic::DegenerateRange {
                                node: n.id,
                                name: n.name.clone(),
                                value: s.min,
                            });
                            degenerate(s.min)
                        }))
                    }
                };
                nodes[pos].quant = q;
            }
        }
    }
    Ok((Graph::from_parts(nodes, weights, inputs, outputs, meta), diags))
}

/// Back to f32: every stored value becomes `scale * (q - zero_point)` (or its
/// f16 value) and activation parameters are dropped.
pub fn dequantize(graph: &Graph) -> Graph {
    let (mut nodes, mut weights, inputs, outputs, meta) = graph.clone().into_parts();
    for t in weights.values_mut() {
        if t.dtype() != DType::F32 {
            *t = t.to_f32_tensor();
        }
    }
    for n in &mut nodes {
        n.quant = None;
    }
    Graph::from_parts(nodes, weights, inputs, outputs, meta)
}
