//! Graph rewrites for accelerator deployment: constant folding, conv/batch-norm
//! fusion, activation fusion, operator replacement, and a target checker.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::exec::{run_op, ExecError, ExecPath};
use crate::graph::{
    infer_shapes, window_padding, Activation, ConvAttrs, Graph, GraphError, Node, NodeId, Op, OpKind, Padding,
    PoolAttrs,
};
use crate::tensor::Tensor;

/// Decimal megabyte, the unit model sizes are quoted in.
pub const MB: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetProfile {
    pub name: String,
    /// Square and non-square kernel sizes `[k_h, k_w]`; `None` allows any.
    pub allowed_kernel_sizes: Option<BTreeSet<[usize; 2]>>,
    pub max_model_bytes: Option<usize>,
    /// `(width, height)`.
    pub max_input_resolution: Option<(usize, usize)>,
    pub accelerated_ops: BTreeSet<OpKind>,
}

impl TargetProfile {
    /// Kendryte K210 KPU: 1x1 and 3x3 kernels, 6 MB of model memory,
    /// 320x240 input, conv/batch-norm/activation/pooling in hardware.
    pub fn k210() -> Self {
        use OpKind::*;
        TargetProfile {
            name: "k210".into(),
            allowed_kernel_sizes: Some([[1, 1], [3, 3]].into_iter().collect()),
            max_model_bytes: Some(6 * MB),
            max_input_resolution: Some((320, 240)),
            accelerated_ops: [
                Conv2D,
                DepthwiseConv2D,
                BatchNorm,
                ReLU,
                ReLU6,
                HardSwish,
                HardSigmoid,
                AvgPool,
                MaxPool,
            ]
            .into_iter()
            .collect(),
        }
    }

    /// No restrictions; every operator runs natively.
    pub fn generic() -> Self {
        use OpKind::*;
        TargetProfile {
            name: "generic".into(),
            allowed_kernel_sizes: None,
            max_model_bytes: None,
            max_input_resolution: None,
            accelerated_ops: [
                Conv2D,
                DepthwiseConv2D,
                Dense,
                BatchNorm,
                ReLU,
                ReLU6,
                HardSwish,
                HardSigmoid,
                AvgPool,
                MaxPool,
                GlobalAvgPool,
                Softmax,
                Add,
                Mul,
                Pad,
                Resize,
                Reshape,
            ]
            .into_iter()
            .collect(),
        }
    }

    pub fn kernel_allowed(&self, kernel: [usize; 2]) -> bool {
        self.allowed_kernel_sizes.as_ref().is_none_or(|s| s.contains(&kernel))
    }

    fn accelerates(&self, kind: OpKind) -> bool {
        matches!(kind, OpKind::Input | OpKind::Const) || self.accelerated_ops.contains(&kind)
    }
}

impl FromStr for TargetProfile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "k210" => Ok(TargetProfile::k210()),
            "generic" => Ok(TargetProfile::generic()),
            other => Err(format!("unknown target {other:?} (expected k210|generic)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassReport {
    pub pass: String,
    pub nodes_before: usize,
    pub nodes_after: usize,
    pub removed: usize,
    pub added: usize,
    /// Rewrites performed: folded nodes, fusions, replacements.
    pub fused: usize,
    pub diagnostics: Vec<String>,
}

impl PassReport {
    fn new(pass: &str, before: &Graph, after: &Graph, fused: usize, diagnostics: Vec<String>) -> Self {
        let old: HashSet<NodeId> = before.nodes().iter().map(|n| n.id).collect();
        let new: HashSet<NodeId> = after.nodes().iter().map(|n| n.id).collect();
        PassReport {
            pass: pass.into(),
            nodes_before: old.len(),
            nodes_after: new.len(),
            removed: old.difference(&new).count(),
            added: new.difference(&old).count(),
            fused,
            diagnostics,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PassError {
    #[error("node {node} ({name}): batch-norm input is not a single-use, activation-free convolution")]
    NonAffinePattern { node: NodeId, name: String },
    #[error("node {node} ({name}) cannot be replaced for this target: {detail}")]
    Unreplaceable { node: NodeId, name: String, detail: String },
    #[error("folding node {node} failed: {source}")]
    ExecFailure {
        node: NodeId,
        #[source]
        source: ExecError,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pass {
    Fold,
    FuseConvBn,
    FuseActivation,
    Replace,
}

impl Pass {
    pub const PIPELINE: [Pass; 4] = [Pass::Fold, Pass::FuseConvBn, Pass::FuseActivation, Pass::Replace];

    /// Parse a comma list such as `fold,fuse,replace`; `fuse` expands to both
    /// fusion passes.
    pub fn parse_list(s: &str) -> Result<Vec<Pass>, String> {
        let mut out = Vec::new();
        for item in s.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "fold" => out.push(Pass::Fold),
                "fuse" => out.extend([Pass::FuseConvBn, Pass::FuseActivation]),
                "fuse_conv_bn" | "fuse-conv-bn" => out.push(Pass::FuseConvBn),
                "fuse_activation" | "fuse-activation" => out.push(Pass::FuseActivation),
                "replace" => out.push(Pass::Replace),
                other => return Err(format!("unknown pass {other:?} (expected fold|fuse|replace)")),
            }
        }
        Ok(out)
    }
}

impl fmt::Display for Pass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pass::Fold => "fold_constants",
            Pass::FuseConvBn => "fuse_conv_bn",
            Pass::FuseActivation => "fuse_activation",
            Pass::Replace => "replace_ops",
        })
    }
}

/// Run `passes` in order.
pub fn optimize(graph: &Graph, passes: &[Pass], profile: &TargetProfile) -> Result<(Graph, Vec<PassReport>), PassError> {
    let mut g = graph.clone();
    let mut reports = Vec::with_capacity(passes.len());
    for p in passes {
        let (next, report) = match p {
            Pass::Fold => fold_constants(&g)?,
            Pass::FuseConvBn => fuse_conv_bn(&g)?,
            Pass::FuseActivation => fuse_activation(&g)?,
            Pass::Replace => replace_ops(&g, profile)?,
        };
        g = next;
        reports.push(report);
    }
    Ok((g, reports))
}

fn annotated(g: &Graph) -> bool {
    g.nodes().iter().all(|n| n.shape.is_some())
}

/// Point every use of `from` (node inputs and graph outputs) at `to`.
fn redirect(nodes: &mut [Node], outputs: &mut [NodeId], from: NodeId, to: NodeId) {
    for n in nodes.iter_mut() {
        for i in n.inputs.iter_mut() {
            if *i == from {
                *i = to;
            }
        }
    }
    for o in outputs.iter_mut() {
        if *o == from {
            *o = to;
        }
    }
}

/// Reassemble, prune dead nodes, restore topological order and, when the
/// original was annotated, shapes.
fn finish(
    nodes: Vec<Node>,
    weights: BTreeMap<NodeId, Tensor>,
    inputs: Vec<NodeId>,
    outputs: Vec<NodeId>,
    meta: crate::graph::Metadata,
    shapes: bool,
) -> Result<Graph, PassError> {
    let g = Graph::from_parts(nodes, weights, inputs, outputs, meta).pruned().sorted()?;
    Ok(if shapes { infer_shapes(&g)? } else { g })
}

/// Replace every node whose inputs are all constants with the constant it
/// computes (reference kernels), then drop constants nobody reads.
pub fn fold_constants(graph: &Graph) -> Result<(Graph, PassReport), PassError> {
    let order = graph.topo_order()?;
    let (mut nodes, mut weights, inputs, outputs, meta) = graph.clone().into_parts();
    let mut folded = 0;
    for pos in order {
        let n = &nodes[pos];
        if matches!(n.op, Op::Input { .. } | Op::Const) || n.inputs.is_empty() {
            continue;
        }
        if !n.inputs.iter().all(|i| weights.contains_key(i)) {
            continue;
        }
        let ins: Vec<&Tensor> = n.inputs.iter().map(|i| &weights[i]).collect();
        let value = run_op(&n.op, &ins, ExecPath::Reference).map_err(|source| PassError::ExecFailure { node: n.id, source })?;
        let n = &mut nodes[pos];
        weights.insert(n.id, value);
        n.op = Op::Const;
        n.inputs.clear();
        folded += 1;
    }
    let out = finish(nodes, weights, inputs, outputs, meta, annotated(graph))?;
    let report = PassReport::new("fold_constants", graph, &out, folded, Vec::new());
    Ok((out, report))
}

fn is_conv(op: &Op) -> bool {
    matches!(op, Op::Conv2D(_) | Op::DepthwiseConv2D(_))
}

/// Fold each batch normalization that directly follows a convolution into the
/// convolution's weights and bias.
pub fn fuse_conv_bn(graph: &Graph) -> Result<(Graph, PassReport), PassError> {
    let (mut nodes, mut weights, inputs, mut outputs, meta) = graph.clone().into_parts();
    let mut next = graph.next_id();
    let mut fused = 0;
    let bn_ids: Vec<NodeId> = nodes
        .iter()
        .filter(|n| matches!(n.op, Op::BatchNorm { .. }))
        .map(|n| n.id)
        .collect();
    for bn_id in bn_ids {
        let index: HashMap<NodeId, usize> = nodes.iter().enumerate().map(|(p, n)| (n.id, p)).collect();
        let bn = &nodes[index[&bn_id]];
        let Op::BatchNorm { epsilon } = bn.op else { unreachable!() };
        let conv_pos = index[&bn.inputs[0]];
        if !is_conv(&nodes[conv_pos].op) {
            continue;
        }
        let conv = &nodes[conv_pos];
        let uses = nodes.iter().flat_map(|n| &n.inputs).filter(|&&i| i == conv.id).count()
            + outputs.iter().filter(|&&o| o == conv.id).count();
        let act = conv.op.conv_attrs().map(|a| a.activation);
        if uses != 1 || act != Some(Activation::None) {
            return Err(PassError::NonAffinePattern {
                node: bn.id,
                name: bn.name.clone(),
            });
        }
        let p: Vec<Vec<f32>> = bn.inputs[1..].iter().map(|i| weights[i].to_f32().into_owned()).collect();
        let (gamma, beta, mean, var) = (&p[0], &p[1], &p[2], &p[3]);
        let scale: Vec<f32> = gamma
            .iter()
            .zip(var)
            .map(|(&g, &v)| (f64::from(g) / (f64::from(v) + f64::from(epsilon)).sqrt()) as f32)
            .collect();
        let c = scale.len();
        let w = &weights[&conv.inputs[1]];
        // the output channel is the fastest-varying weight index for both HWIO
        // and depthwise [kh, kw, C, 1]
        let new_w: Vec<f32> = w.to_f32().iter().enumerate().map(|(i, &v)| v * scale[i % c]).collect();
        let old_b: Vec<f32> = match conv.inputs.get(2) {
            Some(b) => weights[b].to_f32().into_owned(),
            None => vec![0.0; c],
        };
        let new_b: Vec<f32> = (0..c).map(|k| beta[k] + (old_b[k] - mean[k]) * scale[k]).collect();
        let new_w = Tensor::from_f32(w.shape().to_vec(), new_w).map_err(ExecError::from).map_err(|source| {
            PassError::ExecFailure { node: bn_id, source }
        })?;
        let (w_id, b_id) = (next, next + 1);
        next += 2;
        let conv_name = conv.name.clone();
        let conv_id = conv.id;
        weights.insert(w_id, new_w);
        weights.insert(b_id, Tensor::from_f32(vec![c], new_b).expect("bias length matches"));
        let x = conv.inputs[0];
        nodes[conv_pos].inputs = vec![x, w_id, b_id];
        nodes.insert(conv_pos, Node::new(b_id, format!("{conv_name}/fused_bias"), Op::Const, vec![]));
        nodes.insert(conv_pos, Node::new(w_id, format!("{conv_name}/fused_weight"), Op::Const, vec![]));
        redirect(&mut nodes, &mut outputs, bn_id, conv_id);
        nodes.retain(|n| n.id != bn_id);
        fused += 1;
    }
    let out = finish(nodes, weights, inputs, outputs, meta, annotated(graph))?;
    let report = PassReport::new("fuse_conv_bn", graph, &out, fused, Vec::new());
    Ok((out, report))
}

fn fusable_activation(op: &Op) -> Option<Activation> {
    match op {
        Op::ReLU => Some(Activation::Relu),
        Op::ReLU6 => Some(Activation::Relu6),
        Op::HardSwish => Some(Activation::Hswish),
        _ => None,
    }
}

/// Absorb ReLU/ReLU6/HardSwish into the fused-activation slot of the conv or
/// dense node feeding it. Fires only when the producer's output and the
/// activation's output each have a single consumer.
pub fn fuse_activation(graph: &Graph) -> Result<(Graph, PassReport), PassError> {
    let (mut nodes, weights, inputs, mut outputs, meta) = graph.clone().into_parts();
    let mut fused = 0;
    let act_ids: Vec<NodeId> = nodes
        .iter()
        .filter(|n| fusable_activation(&n.op).is_some())
        .map(|n| n.id)
        .collect();
    for act_id in act_ids {
        let uses = |nodes: &[Node], outputs: &[NodeId], id: NodeId| {
            nodes.iter().flat_map(|n| &n.inputs).filter(|&&i| i == id).count()
                + outputs.iter().filter(|&&o| o == id).count()
        };
        let Some(act_pos) = nodes.iter().position(|n| n.id == act_id) else { continue };
        let act = fusable_activation(&nodes[act_pos].op).expect("filtered above");
        let src = nodes[act_pos].inputs[0];
        let Some(src_pos) = nodes.iter().position(|n| n.id == src) else { continue };
        if uses(&nodes, &outputs, src) != 1 || uses(&nodes, &outputs, act_id) > 1 {
            continue;
        }
        let slot = match &mut nodes[src_pos].op {
            Op::Conv2D(a) | Op::DepthwiseConv2D(a) => &mut a.activation,
            Op::Dense { activation } => activation,
            _ => continue,
        };
        if *slot != Activation::None {
            continue;
        }
        *slot = act;
        redirect(&mut nodes, &mut outputs, act_id, src);
        nodes.remove(act_pos);
        fused += 1;
    }
    let out = finish(nodes, weights, inputs, outputs, meta, annotated(graph))?;
    let report = PassReport::new("fuse_activation", graph, &out, fused, Vec::new());
    Ok((out, report))
}

/// Rewrite operators the target cannot execute into supported equivalents:
///
/// | pattern | replacement |
/// |---|---|
/// | Dense over `[N,1,1,C]` | 1x1 Conv2D + Reshape |
/// | GlobalAvgPool | AvgPool with a full-extent window |
/// | conv with kernel up to 3x3 not allowed | explicit Pad + zero-extended 3x3 valid conv |
///
/// Anything else outside the accelerated set is tagged host-fallback. Kernels
/// without a catalog entry fail with [`PassError::Unreplaceable`].
pub fn replace_ops(graph: &Graph, profile: &TargetProfile) -> Result<(Graph, PassReport), PassError> {
    let g = if annotated(graph) { graph.clone() } else { infer_shapes(graph)? };
    let order = g.topo_order()?;
    let (mut nodes, mut weights, inputs, outputs, meta) = g.clone().into_parts();
    let shape_of: HashMap<NodeId, Vec<usize>> = nodes
        .iter()
        .map(|n| (n.id, n.shape.clone().expect("annotated")))
        .collect();
    let mut next = g.next_id();
    let mut fresh = || {
        next += 1;
        next - 1
    };
    let mut replaced = 0;
    let mut diagnostics = Vec::new();
    // (position to insert before, node) pairs, applied after the scan
    let mut inserts: Vec<(NodeId, Node)> = Vec::new();
    for pos in order {
        let n = &nodes[pos];
        let kind = n.kind();
        match &n.op {
            Op::Conv2D(a) | Op::DepthwiseConv2D(a) if !profile.kernel_allowed(a.kernel) => {
                if a.kernel[0] > 3 || a.kernel[1] > 3 || !profile.kernel_allowed([3, 3]) {
                    return Err(PassError::Unreplaceable {
                        node: n.id,
                        name: n.name.clone(),
                        detail: format!("{kind} with {}x{} kernel", a.kernel[0], a.kernel[1]),
                    });
                }
                let x_shape = &shape_of[&n.inputs[0]];
                let (top, bottom) = window_padding(x_shape[1], a.kernel[0], a.stride[0], a.padding);
                let (left, right) = window_padding(x_shape[2], a.kernel[1], a.stride[1], a.padding);
                let pads = [top, bottom + 3 - a.kernel[0], left, right + 3 - a.kernel[1]];
                let w = &weights[&n.inputs[1]];
                let ws = w.shape().to_vec();
                let wf = w.to_f32();
                let inner = ws[2] * ws[3];
                let mut ext = vec![0.0f32; 9 * inner];
                for ky in 0..ws[0] {
                    for kx in 0..ws[1] {
                        let src = (ky * ws[1] + kx) * inner;
                        let dst = (ky * 3 + kx) * inner;
                        ext[dst..dst + inner].copy_from_slice(&wf[src..src + inner]);
                    }
                }
                let (name, id, x) = (n.name.clone(), n.id, n.inputs[0]);
                let pad_id = fresh();
                let w_id = fresh();
                weights.insert(w_id, Tensor::from_f32(vec![3, 3, ws[2], ws[3]], ext).expect("extended kernel"));
                inserts.push((id, Node::new(pad_id, format!("{name}/pad"), Op::Pad { pads }, vec![x])));
                inserts.push((id, Node::new(w_id, format!("{name}/weight3x3"), Op::Const, vec![])));
                let n = &mut nodes[pos];
                let attrs = n.op.conv_attrs().expect("conv");
                let new_attrs = ConvAttrs {
                    kernel: [3, 3],
                    padding: Padding::Valid,
                    ..*attrs
                };
                n.op = match n.op {
                    Op::Conv2D(_) => Op::Conv2D(new_attrs),
                    _ => Op::DepthwiseConv2D(new_attrs),
                };
                n.inputs[0] = pad_id;
                n.inputs[1] = w_id;
                diagnostics.push(format!("{name}: {}x{} kernel zero-extended to 3x3", ws[0], ws[1]));
                replaced += 1;
            }
            Op::Dense { activation } if !profile.accelerates(kind) => {
                let x_shape = &shape_of[&n.inputs[0]];
                let rank4_point = x_shape.len() == 4 && x_shape[1] == 1 && x_shape[2] == 1;
                if rank4_point && profile.kernel_allowed([1, 1]) && profile.accelerates(OpKind::Conv2D) {
                    let (name, id, act) = (n.name.clone(), n.id, *activation);
                    let out_shape = shape_of[&id].clone();
                    let w = &weights[&n.inputs[1]];
                    let ws = w.shape().to_vec();
                    let w4 = w.clone().reshaped(vec![1, 1, ws[0], ws[1]]).expect("same element count");
                    let conv_id = fresh();
                    let w_id = fresh();
                    weights.insert(w_id, w4);
                    let mut conv_inputs = vec![n.inputs[0], w_id];
                    conv_inputs.extend(n.inputs.get(2));
                    let mut attrs = ConvAttrs::new(1, 1, Padding::Valid);
                    attrs.activation = act;
                    inserts.push((id, Node::new(w_id, format!("{name}/weight1x1"), Op::Const, vec![])));
                    inserts.push((id, Node::new(conv_id, format!("{name}/conv1x1"), Op::Conv2D(attrs), conv_inputs)));
                    let n = &mut nodes[pos];
                    n.op = Op::Reshape { shape: out_shape };
                    n.inputs = vec![conv_id];
                    n.host_fallback = !profile.accelerates(OpKind::Reshape);
                    replaced += 1;
                } else {
                    nodes[pos].host_fallback = true;
                }
            }
            Op::GlobalAvgPool if !profile.accelerates(kind) => {
                let x_shape = &shape_of[&n.inputs[0]];
                if profile.accelerates(OpKind::AvgPool) {
                    nodes[pos].op = Op::AvgPool(PoolAttrs {
                        window: [x_shape[1], x_shape[2]],
                        stride: [1, 1],
                        padding: Padding::Valid,
                    });
                    replaced += 1;
                } else {
                    nodes[pos].host_fallback = true;
                }
            }
            _ if !profile.accelerates(kind) => nodes[pos].host_fallback = true,
            _ => {}
        }
    }
    for (before, node) in inserts {
        let at = nodes.iter().position(|n| n.id == before).expect("anchor exists");
        nodes.insert(at, node);
    }
    let out = finish(nodes, weights, inputs, outputs, meta, true)?;
    let report = PassReport::new("replace_ops", &g, &out, replaced, diagnostics);
    Ok((out, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    KernelSize { node: NodeId, name: String, kernel: [usize; 2] },
    ModelSize { weight_bytes: usize, limit: usize },
    InputResolution { width: usize, height: usize, max_width: usize, max_height: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::KernelSize { node, name, kernel } => {
                write!(f, "node {node} ({name}) uses unsupported {}x{} kernel", kernel[0], kernel[1])
            }
            Violation::ModelSize { weight_bytes, limit } => {
                write!(f, "weights take {weight_bytes} bytes, limit is {limit}")
            }
            Violation::InputResolution {
                width,
                height,
                max_width,
                max_height,
            } => write!(f, "input {width}x{height} exceeds {max_width}x{max_height}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeployReport {
    pub target: String,
    pub fits: bool,
    pub weight_bytes: usize,
    pub violations: Vec<Violation>,
    /// Nodes tagged to run on the host CPU.
    pub host_fallback: Vec<String>,
}

/// Check kernel sizes, weight bytes and input resolution against `profile`.
pub fn check_target(graph: &Graph, profile: &TargetProfile) -> DeployReport {
    let mut violations = Vec::new();
    for n in graph.nodes() {
        if let Some(a) = n.op.conv_attrs() {
            if !profile.kernel_allowed(a.kernel) {
                violations.push(Violation::KernelSize {
                    node: n.id,
                    name: n.name.clone(),
                    kernel: a.kernel,
                });
            }
        }
    }
    let weight_bytes = graph.weight_bytes();
    if let Some(limit) = profile.max_model_bytes {
        if weight_bytes > limit {
            violations.push(Violation::ModelSize { weight_bytes, limit });
        }
    }
    if let (Some((max_width, max_height)), Some(s)) = (profile.max_input_resolution, graph.input_shape()) {
        if s.len() == 4 && (s[2] > max_width || s[1] > max_height) {
            violations.push(Violation::InputResolution {
                width: s[2],
                height: s[1],
                max_width,
                max_height,
            });
        }
    }
    DeployReport {
        target: profile.name.clone(),
        fits: violations.is_empty(),
        weight_bytes,
        violations,
        host_fallback: graph.nodes().iter().filter(|n| n.host_fallback).map(|n| n.name.clone()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::run;
    use crate::graph::GraphBuilder;

    fn t(shape: &[usize], v: &[f32]) -> Tensor {
        Tensor::from_f32(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn add_of_constants_folds() {
        let mut b = GraphBuilder::new("fold");
        let _x = b.input("x", &[1]);
        let two = b.constant("two", Tensor::scalar(2.0));
        let three = b.constant("three", Tensor::scalar(3.0));
        let sum = b.op("sum", Op::Add, &[two, three]);
        b.output(sum);
        let (g, r) = fold_constants(&b.finish()).unwrap();
        assert_eq!(g.nodes().len(), 2);
        assert!(matches!(g.node(sum).unwrap().op, Op::Const));
        assert_eq!(g.weight(sum).unwrap().as_f32().unwrap(), &[5.0]);
        assert_eq!((r.removed, r.fused), (2, 1));
    }

    #[test]
    fn fold_without_constants_is_identity() {
        let mut b = GraphBuilder::new("id");
        let x = b.input("x", &[1, 4]);
        let y = b.op("relu", Op::ReLU, &[x]);
        b.output(y);
        let g = b.finish();
        let (out, r) = fold_constants(&g).unwrap();
        assert_eq!(out, g);
        assert_eq!(r.removed, 0);
    }

    fn conv_bn(gamma: f32, beta: f32, eps: f32) -> Graph {
        let mut b = GraphBuilder::new("cbn");
        let x = b.input("x", &[1, 2, 2, 1]);
        let c = b.conv2d("c", x, t(&[1, 1, 1, 1], &[1.0]), None, ConvAttrs::new(1, 1, Padding::Same));
        let bn = b.batch_norm("bn", c, [t(&[1], &[gamma]), t(&[1], &[beta]), t(&[1], &[0.0]), t(&[1], &[1.0])], eps);
        b.output(bn);
        b.finish()
    }

    fn conv_params(g: &Graph) -> (Vec<f32>, Vec<f32>) {
        let conv = g.nodes().iter().find(|n| matches!(n.op, Op::Conv2D(_))).unwrap();
        (
            g.weight(conv.inputs[1]).unwrap().to_f32().into_owned(),
            g.weight(conv.inputs[2]).unwrap().to_f32().into_owned(),
        )
    }

    #[test]
    fn identity_batch_norm_fuses_to_unchanged_weights() {
        let (g, r) = fuse_conv_bn(&conv_bn(1.0, 0.0, 0.0)).unwrap();
        assert_eq!(conv_params(&g), (vec![1.0], vec![0.0]));
        assert!(!g.nodes().iter().any(|n| matches!(n.op, Op::BatchNorm { .. })));
        assert_eq!(r.fused, 1);
        assert_eq!(r.nodes_after, r.nodes_before - r.removed + r.added);
    }

    #[test]
    fn scaled_batch_norm_substitutes() {
        let (g, _) = fuse_conv_bn(&conv_bn(2.0, 1.0, 0.0)).unwrap();
        assert_eq!(conv_params(&g), (vec![2.0], vec![1.0]));
    }

    #[test]
    fn shared_conv_output_is_not_affine() {
        let mut b = GraphBuilder::new("shared");
        let x = b.input("x", &[1, 2, 2, 1]);
        let c = b.conv2d("c", x, t(&[1, 1, 1, 1], &[1.0]), None, ConvAttrs::new(1, 1, Padding::Same));
        let ones = || t(&[1], &[1.0]);
        let bn = b.batch_norm("bn", c, [ones(), ones(), ones(), ones()], 0.0);
        let sum = b.op("sum", Op::Add, &[bn, c]);
        b.output(sum);
        assert!(matches!(fuse_conv_bn(&b.finish()), Err(PassError::NonAffinePattern { .. })));
    }

    #[test]
    fn conv_relu6_fuses() {
        let mut b = GraphBuilder::new("act");
        let x = b.input("x", &[1, 2, 2, 1]);
        let c = b.conv2d("c", x, t(&[1, 1, 1, 1], &[1.0]), None, ConvAttrs::new(1, 1, Padding::Same));
        let r = b.op("r", Op::ReLU6, &[c]);
        b.output(r);
        let (g, rep) = fuse_activation(&b.finish()).unwrap();
        assert_eq!(rep.removed, 1);
        assert_eq!(g.node(c).unwrap().op.conv_attrs().unwrap().activation, Activation::Relu6);
        assert_eq!(g.outputs(), &[c]);
    }

    #[test]
    fn relu_with_two_consumers_is_kept() {
        let mut b = GraphBuilder::new("act");
        let x = b.input("x", &[1, 2, 2, 1]);
        let c = b.conv2d("c", x, t(&[1, 1, 1, 1], &[1.0]), None, ConvAttrs::new(1, 1, Padding::Same));
        let r = b.op("r", Op::ReLU, &[c]);
        let s = b.op("s", Op::Add, &[r, r]);
        b.output(s);
        let g = b.finish();
        let (out, rep) = fuse_activation(&g).unwrap();
        assert_eq!(rep.fused, 0);
        assert_eq!(out, g);
    }

    fn dense_head() -> Graph {
        let mut b = GraphBuilder::new("head");
        let x = b.input("x", &[1, 3, 3, 4]);
        let p = b.op("gap", Op::GlobalAvgPool, &[x]);
        let w: Vec<f32> = (0..12).map(|i| i as f32 * 0.1 - 0.5).collect();
        let d = b.dense("fc", p, t(&[4, 3], &w), Some(t(&[3], &[0.1, 0.2, 0.3])));
        let s = b.op("softmax", Op::Softmax, &[d]);
        b.output(s);
        infer_shapes(&b.finish()).unwrap()
    }

    #[test]
    fn dense_head_becomes_pointwise_conv() {
        let g = dense_head();
        let (out, rep) = replace_ops(&g, &TargetProfile::k210()).unwrap();
        assert_eq!(rep.fused, 2);
        assert!(out.nodes().iter().all(|n| !matches!(n.op, Op::Dense { .. } | Op::GlobalAvgPool)));
        assert!(out.nodes().iter().any(|n| matches!(n.op, Op::Softmax) && n.host_fallback));
        let x = Tensor::from_f32(vec![1, 3, 3, 4], (0..36).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
        let a = run(&g, &x, ExecPath::Reference).unwrap();
        let b = run(&out, &x, ExecPath::Reference).unwrap();
        for (p, q) in a.as_f32().unwrap().iter().zip(b.as_f32().unwrap()) {
            assert!((p - q).abs() <= 1e-6);
        }
    }

    #[test]
    fn conforming_graph_is_unchanged() {
        let g = dense_head();
        let (out, _) = replace_ops(&g, &TargetProfile::generic()).unwrap();
        assert_eq!(out, g);
    }

    #[test]
    fn small_kernels_are_zero_extended() {
        let mut b = GraphBuilder::new("k2");
        let x = b.input("x", &[1, 5, 5, 2]);
        let w: Vec<f32> = (0..16).map(|i| (i as f32 * 0.7).cos()).collect();
        let y = b.conv2d("c", x, t(&[2, 2, 2, 2], &w), None, ConvAttrs::new(2, 2, Padding::Same));
        b.output(y);
        let g = infer_shapes(&b.finish()).unwrap();
        let (out, _) = replace_ops(&g, &TargetProfile::k210()).unwrap();
        assert!(check_target(&out, &TargetProfile::k210()).fits);
        assert_eq!(out.output_shape(), g.output_shape());
        let x = Tensor::from_f32(vec![1, 5, 5, 2], (0..50).map(|i| (i as f32).sqrt()).collect()).unwrap();
        let a = run(&g, &x, ExecPath::Reference).unwrap();
        let b = run(&out, &x, ExecPath::Reference).unwrap();
        for (p, q) in a.as_f32().unwrap().iter().zip(b.as_f32().unwrap()) {
            assert!((p - q).abs() <= 1e-5);
        }
    }

    #[test]
    fn large_kernels_are_unreplaceable() {
        let mut b = GraphBuilder::new("k5");
        let x = b.input("x", &[1, 8, 8, 2]);
        let y = b.depthwise("dw5", x, Tensor::zeros(vec![5, 5, 2, 1]), None, ConvAttrs::new(5, 1, Padding::Same));
        b.output(y);
        match replace_ops(&b.finish(), &TargetProfile::k210()) {
            Err(PassError::Unreplaceable { name, .. }) => assert_eq!(name, "dw5"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn resolution_limit() {
        let mut b = GraphBuilder::new("big");
        let x = b.input("x", &[1, 288, 352, 3]);
        let y = b.op("r", Op::ReLU, &[x]);
        b.output(y);
        let rep = check_target(&b.finish(), &TargetProfile::k210());
        assert!(!rep.fits);
        assert!(matches!(rep.violations.as_slice(), [Violation::InputResolution { width: 352, height: 288, .. }]));
    }

    #[test]
    fn pass_list_parsing() {
        assert_eq!(Pass::parse_list("fold,fuse,replace").unwrap(), Pass::PIPELINE.to_vec());
        assert!(Pass::parse_list("fold,bogus").is_err());
    }
}
