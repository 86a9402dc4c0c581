//! Graph execution: a strictly sequential reference interpreter and an
//! optimized path sharing one planner.

pub mod kernels;
pub mod optimized;
pub mod reference;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::graph::{infer_shapes, Graph, GraphError, Node, NodeId, Op, OpKind};
use crate::tensor::{num_elements, DType, QuantParams, Tensor, TensorError};

use kernels::{PoolKind, Requantizer, WindowGeometry};
use reference::QOperand;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecPath {
    #[serde(alias = "ref")]
    Reference,
    #[serde(alias = "opt")]
    Optimized,
}

impl fmt::Display for ExecPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExecPath::Reference => "ref",
            ExecPath::Optimized => "opt",
        })
    }
}

impl FromStr for ExecPath {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ref" | "reference" => Ok(ExecPath::Reference),
            "opt" | "optimized" => Ok(ExecPath::Optimized),
            other => Err(format!("unknown execution path {other:?} (expected ref|opt)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExecError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dtype mismatch: {0}")]
    DTypeMismatch(String),
    #[error("operator {0} cannot be executed directly")]
    UnsupportedOp(OpKind),
    #[error("node {0} has no shape annotation; run infer_shapes first")]
    MissingShapes(NodeId),
    #[error("node {node} ({name}): {source}")]
    Node {
        node: NodeId,
        name: String,
        #[source]
        source: Box<ExecError>,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Topological schedule plus liveness-derived activation sizes for one graph.
#[derive(Debug, Clone)]
pub struct ExecutionPlan<'g> {
    graph: &'g Graph,
    /// Node positions in execution order.
    order: Vec<usize>,
    /// Per node position: last step at which its value is read.
    last_use: Vec<usize>,
    /// Per node position: activation bytes (0 for constants).
    buffer_bytes: Vec<usize>,
    peak_activation_bytes: usize,
    path: ExecPath,
    parallel: bool,
}

fn activation_dtype(graph: &Graph, node: &Node) -> DType {
    match (&node.op, node.quant) {
        (_, Some(_)) => DType::I8,
        (Op::Reshape { .. }, None) => node
            .inputs
            .first()
            .and_then(|&i| graph.node(i))
            .map_or(DType::F32, |n| activation_dtype(graph, n)),
        _ => DType::F32,
    }
}

/// Plan a shape-annotated graph. The optimized path runs single-threaded.
pub fn plan(graph: &Graph, path: ExecPath) -> Result<ExecutionPlan<'_>, ExecError> {
    plan_with(graph, path, false)
}

/// Plan with intra-op parallelism in the optimized path (ignored for the
/// reference path).
pub fn plan_with(graph: &Graph, path: ExecPath, parallel: bool) -> Result<ExecutionPlan<'_>, ExecError> {
    let order = graph.topo_order()?;
    let nodes = graph.nodes();
    let mut step_of = vec![0usize; nodes.len()];
    for (step, &pos) in order.iter().enumerate() {
        step_of[pos] = step;
    }
    let mut last_use: Vec<usize> = step_of.clone();
    for &pos in &order {
        for &inp in &nodes[pos].inputs {
            let src = graph.position(inp).ok_or(GraphError::NoSuchNode(inp))?;
            last_use[src] = last_use[src].max(step_of[pos]);
        }
    }
    for &out in graph.outputs() {
        let p = graph.position(out).ok_or(GraphError::NoSuchNode(out))?;
        last_use[p] = usize::MAX;
    }
    let mut buffer_bytes = vec![0usize; nodes.len()];
    for (pos, n) in nodes.iter().enumerate() {
        if matches!(n.op, Op::Const) {
            continue;
        }
        let shape = n.shape.as_ref().ok_or(ExecError::MissingShapes(n.id))?;
        buffer_bytes[pos] = num_elements(shape) * activation_dtype(graph, n).size_bytes();
    }
    let mut live = 0usize;
    let mut peak = 0usize;
    let mut frees: Vec<Vec<usize>> = vec![Vec::new(); order.len()];
    for &pos in &order {
        if last_use[pos] != usize::MAX {
            frees[last_use[pos]].push(pos);
        }
    }
    for (step, &pos) in order.iter().enumerate() {
        live += buffer_bytes[pos];
        peak = peak.max(live);
        for &p in &frees[step] {
            live -= buffer_bytes[p];
        }
    }
    Ok(ExecutionPlan {
        graph,
        order,
        last_use,
        buffer_bytes,
        peak_activation_bytes: peak,
        path,
        parallel: parallel && path == ExecPath::Optimized,
    })
}

impl<'g> ExecutionPlan<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn path(&self) -> ExecPath {
        self.path
    }

    pub fn is_parallel(&self) -> bool {
        self.parallel
    }

    /// Node ids in execution order.
    pub fn order(&self) -> Vec<NodeId> {
        self.order.iter().map(|&p| self.graph.nodes()[p].id).collect()
    }

    /// Activation buffer size of each node in execution order.
    pub fn buffer_sizes(&self) -> Vec<(NodeId, usize)> {
        self.order
            .iter()
            .map(|&p| (self.graph.nodes()[p].id, self.buffer_bytes[p]))
            .collect()
    }

    /// Step (index into [`ExecutionPlan::order`]) of the last read of each
    /// node's value; `usize::MAX` for graph outputs.
    pub fn last_use(&self, id: NodeId) -> Option<usize> {
        self.graph.position(id).map(|p| self.last_use[p])
    }

    pub fn peak_activation_bytes(&self) -> usize {
        self.peak_activation_bytes
    }

    pub fn run(&self, input: &Tensor) -> Result<Tensor, ExecError> {
        self.run_observed(input, |_, _| {})
    }

    /// Run, handing each computed (non-constant) node output to `observe`.
    pub fn run_observed(&self, input: &Tensor, mut observe: impl FnMut(&Node, &Tensor)) -> Result<Tensor, ExecError> {
        let graph = self.graph;
        let nodes = graph.nodes();
        let expected = graph
            .input_shape()
            .ok_or_else(|| ExecError::ShapeMismatch("graph has no input".into()))?;
        if input.dtype() != DType::F32 {
            return Err(ExecError::DTypeMismatch(format!("graph input expects f32, got {}", input.dtype())));
        }
        if input.shape() != expected {
            return Err(ExecError::ShapeMismatch(format!(
                "graph input expects {expected:?}, got {:?}",
                input.shape()
            )));
        }
        let mut values: Vec<Option<Tensor>> = vec![None; nodes.len()];
        for (step, &pos) in self.order.iter().enumerate() {
            let node = &nodes[pos];
            let out = match &node.op {
                Op::Const => continue,
                Op::Input { .. } => match node.quant {
                    Some(q) => input.quantize_with(q),
                    None => input.clone(),
                },
                op => {
                    let ins = node
                        .inputs
                        .iter()
                        .map(|&id| {
                            let p = graph.position(id).ok_or(GraphError::NoSuchNode(id))?;
                            match &nodes[p].op {
                                Op::Const => graph.weight(id).ok_or(GraphError::NoSuchNode(id)),
                                _ => values[p].as_ref().ok_or(GraphError::NoSuchNode(id)),
                            }
                        })
                        .collect::<Result<Vec<&Tensor>, GraphError>>()?;
                    eval(op, &ins, node.quant, self.path, self.parallel).map_err(|e| ExecError::Node {
                        node: node.id,
                        name: node.name.clone(),
                        source: Box::new(e),
                    })?
                }
            };
            observe(node, &out);
            values[pos] = Some(out);
            for &inp in &node.inputs {
                if let Some(p) = graph.position(inp) {
                    if self.last_use[p] == step {
                        values[p] = None;
                    }
                }
            }
        }
        let out_id = *graph
            .outputs()
            .first()
            .ok_or_else(|| ExecError::ShapeMismatch("graph has no output".into()))?;
        let p = graph.position(out_id).ok_or(GraphError::NoSuchNode(out_id))?;
        let out = match values[p].take() {
            Some(t) => t,
            None => graph.weight(out_id).cloned().ok_or(GraphError::NoSuchNode(out_id))?,
        };
        Ok(match out.dtype() {
            DType::F32 => out,
            _ => out.to_f32_tensor(),
        })
    }
}

/// Execute a graph on one input. Shapes are inferred when missing.
pub fn run(graph: &Graph, input: &Tensor, path: ExecPath) -> Result<Tensor, ExecError> {
    if graph.nodes().iter().all(|n| n.shape.is_some()) {
        plan(graph, path)?.run(input)
    } else {
        let annotated = infer_shapes(graph)?;
        plan(&annotated, path)?.run(input)
    }
}

/// Evaluate one operator on f32 (or quantized) inputs.
pub fn run_op(op: &Op, inputs: &[&Tensor], path: ExecPath) -> Result<Tensor, ExecError> {
    eval(op, inputs, None, path, false)
}

/// Evaluate one operator producing an i8 output with `out_quant`. Conv and
/// dense layers use integer arithmetic when their input and weight are i8.
pub fn run_op_quantized(op: &Op, inputs: &[&Tensor], out_quant: QuantParams, path: ExecPath) -> Result<Tensor, ExecError> {
    eval(op, inputs, Some(out_quant), path, false)
}

fn finish(shape: Vec<usize>, data: Vec<f32>, out_quant: Option<QuantParams>) -> Result<Tensor, ExecError> {
    let t = Tensor::from_f32(shape, data)?;
    Ok(match out_quant {
        Some(q) => t.quantize_with(q),
        None => t,
    })
}

fn expect_inputs(inputs: &[&Tensor], min: usize, max: usize) -> Result<(), ExecError> {
    if inputs.len() < min || inputs.len() > max {
        return Err(ExecError::ShapeMismatch(format!(
            "expected {min}..={max} inputs, got {}",
            inputs.len()
        )));
    }
    Ok(())
}

fn quantized_operands<'a>(x: &'a Tensor, w: &'a Tensor) -> Option<(QOperand<'a>, QOperand<'a>, QuantParams, QuantParams)> {
    let (xq, wq) = (x.quant()?, w.quant()?);
    Some((
        QOperand {
            data: x.as_i8()?,
            zero_point: xq.zero_point,
        },
        QOperand {
            data: w.as_i8()?,
            zero_point: wq.zero_point,
        },
        xq,
        wq,
    ))
}

fn eval(op: &Op, inputs: &[&Tensor], out_quant: Option<QuantParams>, path: ExecPath, parallel: bool) -> Result<Tensor, ExecError> {
    let optimized = path == ExecPath::Optimized;
    match op {
        Op::Input { .. } | Op::Const => Err(ExecError::UnsupportedOp(op.kind())),
        Op::Conv2D(a) | Op::DepthwiseConv2D(a) => {
            expect_inputs(inputs, 2, 3)?;
            let (x, w) = (inputs[0], inputs[1]);
            let depthwise = matches!(op, Op::DepthwiseConv2D(_));
            let ws = w.shape();
            if ws.len() != 4 || ws[0] != a.kernel[0] || ws[1] != a.kernel[1] {
                return Err(ExecError::ShapeMismatch(format!("weight {ws:?} vs kernel {:?}", a.kernel)));
            }
            let g = WindowGeometry::new(x.shape(), a.kernel, a.stride, a.padding)?;
            if ws[2] != g.channels || (depthwise && ws[3] != 1) {
                return Err(ExecError::ShapeMismatch(format!("weight {ws:?} vs input {:?}", x.shape())));
            }
            let out_c = if depthwise { g.channels } else { ws[3] };
            let bias = inputs.get(2).map(|b| b.to_f32());
            if let Some(b) = &bias {
                if b.len() != out_c {
                    return Err(ExecError::ShapeMismatch(format!("bias has {} entries, expected {out_c}", b.len())));
                }
            }
            if let (Some(oq), Some((xo, wo, xq, wq))) = (out_quant, quantized_operands(x, w)) {
                let rq = Requantizer::new(xq, wq, oq, a.activation);
                let bq = bias.as_ref().map(|b| rq.quantize_bias(b));
                let bq = bq.as_deref();
                let data = match (depthwise, optimized) {
                    (false, false) => reference::conv2d_i8(xo, wo, bq, &g, out_c, &rq),
                    (false, true) => optimized::conv2d_i8(xo, wo, bq, &g, out_c, &rq, parallel),
                    (true, false) => reference::depthwise_i8(xo, wo, bq, &g, &rq),
                    (true, true) => optimized::depthwise_i8(xo, wo, bq, &g, &rq),
                };
                return Ok(Tensor::from_i8(g.out_shape(out_c), data, oq)?);
            }
            let (xf, wf) = (x.to_f32(), w.to_f32());
            let b = bias.as_deref();
            let data = match (depthwise, optimized) {
                (false, false) => reference::conv2d(&xf, &wf, b, &g, out_c, a.activation),
                (false, true) => optimized::conv2d(&xf, &wf, b, &g, out_c, a.activation, parallel),
                (true, false) => reference::depthwise(&xf, &wf, b, &g, a.activation),
                (true, true) => optimized::depthwise(&xf, &wf, b, &g, a.activation, parallel),
            };
            finish(g.out_shape(out_c), data, out_quant)
        }
        Op::Dense { activation } => {
            expect_inputs(inputs, 2, 3)?;
            let (x, w) = (inputs[0], inputs[1]);
            let ws = w.shape();
            let batch = *x.shape().first().unwrap_or(&1);
            if ws.len() != 2 || x.len() != batch * ws[0] {
                return Err(ExecError::ShapeMismatch(format!("dense weight {ws:?} vs input {:?}", x.shape())));
            }
            let out = ws[1];
            let bias = inputs.get(2).map(|b| b.to_f32());
            if let (Some(oq), Some((xo, wo, xq, wq))) = (out_quant, quantized_operands(x, w)) {
                let rq = Requantizer::new(xq, wq, oq, *activation);
                let bq = bias.as_ref().map(|b| rq.quantize_bias(b));
                let data = if optimized {
                    optimized::dense_i8(xo, wo, bq.as_deref(), batch, out, &rq, parallel)
                } else {
                    reference::dense_i8(xo, wo, bq.as_deref(), batch, out, &rq)
                };
                return Ok(Tensor::from_i8(vec![batch, out], data, oq)?);
            }
            let (xf, wf) = (x.to_f32(), w.to_f32());
            let data = if optimized {
                optimized::dense(&xf, &wf, bias.as_deref(), batch, out, *activation, parallel)
            } else {
                reference::dense(&xf, &wf, bias.as_deref(), batch, out, *activation)
            };
            finish(vec![batch, out], data, out_quant)
        }
        Op::BatchNorm { epsilon } => {
            expect_inputs(inputs, 5, 5)?;
            let x = inputs[0];
            let p: Vec<_> = inputs[1..].iter().map(|t| t.to_f32()).collect();
            let c = p[0].len();
            if x.shape().last() != Some(&c) || p.iter().any(|v| v.len() != c) {
                return Err(ExecError::ShapeMismatch(format!("batch-norm over {c} channels, input {:?}", x.shape())));
            }
            let data = kernels::batch_norm(&x.to_f32(), &p[0], &p[1], &p[2], &p[3], *epsilon);
            finish(x.shape().to_vec(), data, out_quant)
        }
        Op::ReLU | Op::ReLU6 | Op::HardSwish | Op::HardSigmoid => {
            expect_inputs(inputs, 1, 1)?;
            let f: fn(f32) -> f32 = match op {
                Op::ReLU => |v| v.max(0.0),
                Op::ReLU6 => |v| v.clamp(0.0, 6.0),
                Op::HardSwish => |v| v * (v + 3.0).clamp(0.0, 6.0) / 6.0,
                _ => kernels::hard_sigmoid,
            };
            let x = inputs[0];
            finish(x.shape().to_vec(), kernels::unary(&x.to_f32(), f), out_quant)
        }
        Op::AvgPool(p) | Op::MaxPool(p) => {
            expect_inputs(inputs, 1, 1)?;
            let x = inputs[0];
            let g = WindowGeometry::new(x.shape(), p.window, p.stride, p.padding)?;
            let kind = if matches!(op, Op::AvgPool(_)) { PoolKind::Avg } else { PoolKind::Max };
            finish(g.out_shape(g.channels), kernels::pool(&x.to_f32(), &g, kind), out_quant)
        }
        Op::GlobalAvgPool => {
            expect_inputs(inputs, 1, 1)?;
            let x = inputs[0];
            let s = x.shape();
            if s.len() != 4 {
                return Err(ExecError::ShapeMismatch(format!("expected NHWC input, got {s:?}")));
            }
            finish(vec![s[0], 1, 1, s[3]], kernels::global_avg_pool(&x.to_f32(), s), out_quant)
        }
        Op::Softmax => {
            expect_inputs(inputs, 1, 1)?;
            let x = inputs[0];
            let last = *x.shape().last().unwrap_or(&1);
            finish(x.shape().to_vec(), kernels::softmax(&x.to_f32(), last), out_quant)
        }
        Op::Add | Op::Mul => {
            expect_inputs(inputs, 2, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            let f: fn(f32, f32) -> f32 = if matches!(op, Op::Add) { |x, y| x + y } else { |x, y| x * y };
            let (data, shape) = kernels::broadcast_binary(&a.to_f32(), a.shape(), &b.to_f32(), b.shape(), f)?;
            finish(shape, data, out_quant)
        }
        Op::Pad { pads } => {
            expect_inputs(inputs, 1, 1)?;
            let x = inputs[0];
            if x.shape().len() != 4 {
                return Err(ExecError::ShapeMismatch(format!("expected NHWC input, got {:?}", x.shape())));
            }
            let (data, shape) = kernels::pad(&x.to_f32(), x.shape(), *pads);
            finish(shape, data, out_quant)
        }
        Op::Resize { size } => {
            expect_inputs(inputs, 1, 1)?;
            let x = inputs[0];
            let s = x.shape();
            if s.len() != 4 {
                return Err(ExecError::ShapeMismatch(format!("expected NHWC input, got {s:?}")));
            }
            let data = kernels::resize_bilinear(&x.to_f32(), s, size[0], size[1]);
            finish(vec![s[0], size[0], size[1], s[3]], data, out_quant)
        }
        Op::Reshape { shape } => {
            expect_inputs(inputs, 1, 1)?;
            Ok(inputs[0].clone().reshaped(shape.clone())?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{ConvAttrs, GraphBuilder, Padding, PoolAttrs};

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::from_f32(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn operator_definitions() {
        for path in [ExecPath::Reference, ExecPath::Optimized] {
            let s = run_op(&Op::Softmax, &[&t(&[1, 2], &[0.0, 0.0])], path).unwrap();
            assert_eq!(s.as_f32().unwrap(), &[0.5, 0.5]);
            let r6 = run_op(&Op::ReLU6, &[&t(&[1], &[7.0])], path).unwrap();
            assert_eq!(r6.as_f32().unwrap(), &[6.0]);
            let hs = run_op(&Op::HardSwish, &[&t(&[1], &[3.0])], path).unwrap();
            assert_eq!(hs.as_f32().unwrap(), &[3.0]);
            let pool = Op::AvgPool(PoolAttrs {
                window: [2, 2],
                stride: [2, 2],
                padding: Padding::Valid,
            });
            let p = run_op(&pool, &[&t(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0])], path).unwrap();
            assert_eq!(p.as_f32().unwrap(), &[2.5]);
            let conv = Op::Conv2D(ConvAttrs::new(3, 1, Padding::Valid));
            let c = run_op(&conv, &[&t(&[1, 3, 3, 1], &[1.0; 9]), &t(&[3, 3, 1, 1], &[1.0; 9])], path).unwrap();
            assert_eq!(c.shape(), &[1, 1, 1, 1]);
            assert_eq!(c.as_f32().unwrap(), &[9.0]);
        }
    }

    #[test]
    fn const_and_input_are_not_runnable() {
        assert_eq!(run_op(&Op::Const, &[], ExecPath::Reference).unwrap_err(), ExecError::UnsupportedOp(OpKind::Const));
    }

    fn chain() -> Graph {
        let mut b = GraphBuilder::new("chain");
        let x = b.input("x", &[1, 4, 4, 2]);
        let r = b.op("relu", Op::ReLU, &[x]);
        let g = b.op("gap", Op::GlobalAvgPool, &[r]);
        b.output(g);
        infer_shapes(&b.finish()).unwrap()
    }

    #[test]
    fn linear_plan_keeps_listed_order_and_peak() {
        let g = chain();
        let p = plan(&g, ExecPath::Reference).unwrap();
        assert_eq!(p.order(), vec![0, 1, 2]);
        // input (128 B) + relu (128 B) live together; gap is 8 B
        assert_eq!(p.peak_activation_bytes(), 256);
    }

    #[test]
    fn input_checks() {
        let g = chain();
        let bad_shape = Tensor::zeros(vec![1, 4, 4, 3]);
        assert!(matches!(run(&g, &bad_shape, ExecPath::Reference), Err(ExecError::ShapeMismatch(_))));
        let q = QuantParams::new(1.0, 0).unwrap();
        let int = Tensor::from_i8(vec![1, 4, 4, 2], vec![0; 32], q).unwrap();
        assert!(matches!(run(&g, &int, ExecPath::Reference), Err(ExecError::DTypeMismatch(_))));
    }

    #[test]
    fn plan_twice_is_identical() {
        let g = chain();
        let p = plan(&g, ExecPath::Optimized).unwrap();
        let x = Tensor::from_f32(vec![1, 4, 4, 2], (0..32).map(|i| i as f32 - 10.0).collect()).unwrap();
        assert_eq!(p.run(&x).unwrap().to_le_bytes(), p.run(&x).unwrap().to_le_bytes());
    }
}
