//! Graph IR: typed operator nodes over a constant weight store.
//!
//! Weights live in `Const` nodes; a convolution's inputs are
//! `[activation, weight, bias?]`. Activations are NHWC and conv weights HWIO
//! (`[kh, kw, in, out]`; depthwise uses `[kh, kw, channels, 1]`).

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::tensor::{num_elements, QuantParams, Tensor};

pub type NodeId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    None,
    Relu,
    Relu6,
    Hswish,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::None => x,
            Activation::Relu => x.max(0.0),
            Activation::Relu6 => x.clamp(0.0, 6.0),
            Activation::Hswish => x * (x + 3.0).clamp(0.0, 6.0) / 6.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvAttrs {
    /// (height, width)
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub padding: Padding,
    #[serde(default)]
    pub activation: Activation,
}

impl ConvAttrs {
    pub fn new(k: usize, stride: usize, padding: Padding) -> Self {
        ConvAttrs {
            kernel: [k, k],
            stride: [stride, stride],
            padding,
            activation: Activation::None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolAttrs {
    pub window: [usize; 2],
    pub stride: [usize; 2],
    pub padding: Padding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Op {
    Input { shape: Vec<usize> },
    Const,
    Conv2D(ConvAttrs),
    DepthwiseConv2D(ConvAttrs),
    Dense {
        #[serde(default)]
        activation: Activation,
    },
    BatchNorm { epsilon: f32 },
    ReLU,
    ReLU6,
    HardSwish,
    HardSigmoid,
    AvgPool(PoolAttrs),
    MaxPool(PoolAttrs),
    GlobalAvgPool,
    Softmax,
    Add,
    Mul,
    /// Spatial zero padding: [top, bottom, left, right].
    Pad { pads: [usize; 4] },
    /// Bilinear resize (half-pixel centers) to `[height, width]`.
    Resize { size: [usize; 2] },
    Reshape { shape: Vec<usize> },
}

/// Attribute-free operator tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    Input,
    Const,
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
}

impl OpKind {
    pub fn is_activation(self) -> bool {
        matches!(self, OpKind::ReLU | OpKind::ReLU6 | OpKind::HardSwish | OpKind::HardSigmoid)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Input { .. } => OpKind::Input,
            Op::Const => OpKind::Const,
            Op::Conv2D(_) => OpKind::Conv2D,
            Op::DepthwiseConv2D(_) => OpKind::DepthwiseConv2D,
            Op::Dense { .. } => OpKind::Dense,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::ReLU => OpKind::ReLU,
            Op::ReLU6 => OpKind::ReLU6,
            Op::HardSwish => OpKind::HardSwish,
            Op::HardSigmoid => OpKind::HardSigmoid,
            Op::AvgPool(_) => OpKind::AvgPool,
            Op::MaxPool(_) => OpKind::MaxPool,
            Op::GlobalAvgPool => OpKind::GlobalAvgPool,
            Op::Softmax => OpKind::Softmax,
            Op::Add => OpKind::Add,
            Op::Mul => OpKind::Mul,
            Op::Pad { .. } => OpKind::Pad,
            Op::Resize { .. } => OpKind::Resize,
            Op::Reshape { .. } => OpKind::Reshape,
        }
    }

    pub fn conv_attrs(&self) -> Option<&ConvAttrs> {
        match self {
            Op::Conv2D(a) | Op::DepthwiseConv2D(a) => Some(a),
            _ => None,
        }
    }

    /// Number of inputs accepted: (min, max).
    fn arity(&self) -> (usize, usize) {
        match self {
            Op::Input { .. } | Op::Const => (0, 0),
            Op::Conv2D(_) | Op::DepthwiseConv2D(_) | Op::Dense { .. } => (2, 3),
            Op::BatchNorm { .. } => (5, 5),
            Op::Add | Op::Mul => (2, 2),
            _ => (1, 1),
        }
    }

    /// Input positions that must be fed by `Const` nodes.
    pub fn const_input_range(&self) -> std::ops::Range<usize> {
        match self {
            Op::Conv2D(_) | Op::DepthwiseConv2D(_) | Op::Dense { .. } => 1..3,
            Op::BatchNorm { .. } => 1..5,
            _ => 0..0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub name: String,
    pub op: Op,
    pub inputs: Vec<NodeId>,
    /// Output shape, filled by [`infer_shapes`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<Vec<usize>>,
    /// Activation quantization of this node's output (i8 graphs).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quant: Option<QuantParams>,
    /// Executed on the host CPU rather than the accelerator.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub host_fallback: bool,
}

impl Node {
    pub fn new(id: NodeId, name: impl Into<String>, op: Op, inputs: Vec<NodeId>) -> Self {
        Node {
            id,
            name: name.into(),
            op,
            inputs,
            shape: None,
            quant: None,
            host_fallback: false,
        }
    }

    pub fn kind(&self) -> OpKind {
        self.op.kind()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub name: String,
    #[serde(default)]
    pub class_labels: Vec<String>,
}

/// A DAG of operator nodes plus the tensors of its `Const` nodes.
///
/// Graphs are not mutated in place by passes; every rewrite produces a new
/// graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    nodes: Vec<Node>,
    weights: BTreeMap<NodeId, Tensor>,
    inputs: Vec<NodeId>,
    outputs: Vec<NodeId>,
    metadata: Metadata,
    index: HashMap<NodeId, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize, thiserror::Error)]
pub enum Diagnostic {
    #[error("node {node} references missing input {missing}")]
    DanglingInput { node: NodeId, missing: NodeId },
    #[error("graph contains a cycle")]
    CycleDetected,
    #[error("duplicate node id {0}")]
    DuplicateId(NodeId),
    #[error("graph input/output {0} does not exist")]
    UnknownEndpoint(NodeId),
    #[error("classifier graphs need exactly one input, found {0}")]
    InputCount(usize),
    #[error("classifier graphs need exactly one output, found {0}")]
    OutputCount(usize),
    #[error("graph input {0} is not an Input node")]
    NotAnInput(NodeId),
    #[error("node {node}: expected {min}..={max} inputs, found {found}")]
    Arity {
        node: NodeId,
        min: usize,
        max: usize,
        found: usize,
    },
    #[error("const node {0} has no tensor")]
    MissingWeight(NodeId),
    #[error("node {node}: input {input} must be a constant")]
    NonConstParameter { node: NodeId, input: NodeId },
    #[error("node {node}: {detail}")]
    WeightShape { node: NodeId, detail: String },
    #[error("node {node}: {detail}")]
    BadAttribute { node: NodeId, detail: String },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("shape mismatch at node {node} ({name}): {detail}")]
    ShapeMismatch {
        node: NodeId,
        name: String,
        detail: String,
    },
    #[error("bad attribute at node {node}: {detail}")]
    UnknownAttribute { node: NodeId, detail: String },
    #[error("graph is structurally invalid: {0:?}")]
    Invalid(Vec<Diagnostic>),
    #[error("graph contains a cycle")]
    CycleDetected,
    #[error("no node with id {0}")]
    NoSuchNode(NodeId),
}

impl Graph {
    /// Assemble a graph without validating it. Use [`validate`] before relying
    /// on structural invariants.
    pub fn from_parts(
        nodes: Vec<Node>,
        weights: BTreeMap<NodeId, Tensor>,
        inputs: Vec<NodeId>,
        outputs: Vec<NodeId>,
        metadata: Metadata,
    ) -> Self {
        let mut index = HashMap::with_capacity(nodes.len());
        for (pos, n) in nodes.iter().enumerate() {
            index.entry(n.id).or_insert(pos);
        }
        Graph {
            nodes,
            weights,
            inputs,
            outputs,
            metadata,
            index,
        }
    }

    #[allow(clippy::type_complexity)]
    pub fn into_parts(
        self,
    ) -> (Vec<Node>, BTreeMap<NodeId, Tensor>, Vec<NodeId>, Vec<NodeId>, Metadata) {
        (self.nodes, self.weights, self.inputs, self.outputs, self.metadata)
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.index.get(&id).map(|&i| &self.nodes[i])
    }

    pub fn position(&self, id: NodeId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn weights(&self) -> &BTreeMap<NodeId, Tensor> {
        &self.weights
    }

    pub fn weight(&self, id: NodeId) -> Option<&Tensor> {
        self.weights.get(&id)
    }

    pub fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[NodeId] {
        &self.outputs
    }

    pub fn metadata(&self) -> &Metadata {
        &self.metadata
    }

    pub fn set_metadata(&mut self, metadata: Metadata) {
        self.metadata = metadata;
    }

    pub fn input_shape(&self) -> Option<&[usize]> {
        let id = *self.inputs.first()?;
        match &self.node(id)?.op {
            Op::Input { shape } => Some(shape),
            _ => None,
        }
    }

    pub fn output_shape(&self) -> Option<&[usize]> {
        self.node(*self.outputs.first()?)?.shape.as_deref()
    }

    pub fn is_const(&self, id: NodeId) -> bool {
        matches!(self.node(id).map(|n| &n.op), Some(Op::Const))
    }

    pub fn next_id(&self) -> NodeId {
        self.nodes.iter().map(|n| n.id + 1).max().unwrap_or(0)
    }

    /// Consumer node ids for every node, in node order.
    pub fn consumers(&self) -> HashMap<NodeId, Vec<NodeId>> {
        let mut map: HashMap<NodeId, Vec<NodeId>> = HashMap::new();
        for n in &self.nodes {
            for &i in &n.inputs {
                map.entry(i).or_default().push(n.id);
            }
        }
        map
    }

    /// Number of uses of `id`, counting each appearance as a graph output.
    pub fn use_count(&self, id: NodeId) -> usize {
        let as_input: usize = self
            .nodes
            .iter()
            .map(|n| n.inputs.iter().filter(|&&i| i == id).count())
            .sum();
        as_input + self.outputs.iter().filter(|&&o| o == id).count()
    }

    pub fn param_count(&self) -> usize {
        self.weights.values().map(Tensor::len).sum()
    }

    pub fn weight_bytes(&self) -> usize {
        self.weights.values().map(Tensor::byte_size).sum()
    }

    /// Stable topological order as positions into [`Graph::nodes`]: among ready
    /// nodes the earliest listed goes first, so an already sorted node list is
    /// returned unchanged.
    pub fn topo_order(&self) -> Result<Vec<usize>, GraphError> {
        let n = self.nodes.len();
        let mut indegree = vec![0usize; n];
        let mut users: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (pos, node) in self.nodes.iter().enumerate() {
            for &inp in &node.inputs {
                let src = self.position(inp).ok_or(GraphError::NoSuchNode(inp))?;
                indegree[pos] += 1;
                users[src].push(pos);
            }
        }
        let mut ready: BinaryHeap<Reverse<usize>> =
            (0..n).filter(|&i| indegree[i] == 0).map(Reverse).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(Reverse(pos)) = ready.pop() {
            order.push(pos);
            for &u in &users[pos] {
                indegree[u] -= 1;
                if indegree[u] == 0 {
                    ready.push(Reverse(u));
                }
            }
        }
        if order.len() != n {
            return Err(GraphError::CycleDetected);
        }
        Ok(order)
    }

    /// Copy of the graph whose single output is `id`, with nodes that no
    /// longer contribute removed.
    pub fn with_output(&self, id: NodeId) -> Result<Graph, GraphError> {
        if self.node(id).is_none() {
            return Err(GraphError::NoSuchNode(id));
        }
        let mut g = self.clone();
        g.outputs = vec![id];
        Ok(g.pruned())
    }

    /// Drop nodes (other than graph inputs) that do not reach an output.
    pub fn pruned(self) -> Graph {
        let mut live: HashSet<NodeId> = HashSet::new();
        let mut stack: Vec<NodeId> = self.outputs.clone();
        while let Some(id) = stack.pop() {
            if live.insert(id) {
                if let Some(n) = self.node(id) {
                    stack.extend(&n.inputs);
                }
            }
        }
        live.extend(self.inputs.iter().copied());
        let (nodes, mut weights, inputs, outputs, metadata) = self.into_parts();
        let nodes: Vec<Node> = nodes.into_iter().filter(|n| live.contains(&n.id)).collect();
        weights.retain(|id, _| live.contains(id));
        Graph::from_parts(nodes, weights, inputs, outputs, metadata)
    }

    /// Nodes in a stable topological order (useful after rewrites that
    /// append nodes out of order).
    pub fn sorted(self) -> Result<Graph, GraphError> {
        let order = self.topo_order()?;
        let (nodes, weights, inputs, outputs, metadata) = self.into_parts();
        let mut slots: Vec<Option<Node>> = nodes.into_iter().map(Some).collect();
        let nodes = order.into_iter().map(|p| slots[p].take().unwrap()).collect();
        Ok(Graph::from_parts(nodes, weights, inputs, outputs, metadata))
    }
}

/// Incremental graph construction with fresh sequential ids.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    weights: BTreeMap<NodeId, Tensor>,
    inputs: Vec<NodeId>,
    outputs: Vec<NodeId>,
    metadata: Metadata,
    next: NodeId,
}

impl GraphBuilder {
    pub fn new(name: impl Into<String>) -> Self {
        GraphBuilder {
            metadata: Metadata {
                name: name.into(),
                class_labels: Vec::new(),
            },
            ..Default::default()
        }
    }

    pub fn labels(&mut self, labels: Vec<String>) -> &mut Self {
        self.metadata.class_labels = labels;
        self
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> NodeId {
        let id = self.op(name, Op::Input { shape: shape.to_vec() }, &[]);
        self.inputs.push(id);
        id
    }

    pub fn constant(&mut self, name: &str, tensor: Tensor) -> NodeId {
        let id = self.op(name, Op::Const, &[]);
        self.weights.insert(id, tensor);
        id
    }

    pub fn op(&mut self, name: &str, op: Op, inputs: &[NodeId]) -> NodeId {
        let id = self.next;
        self.next += 1;
        self.nodes.push(Node::new(id, name, op, inputs.to_vec()));
        id
    }

    pub fn conv2d(
        &mut self,
        name: &str,
        x: NodeId,
        weight: Tensor,
        bias: Option<Tensor>,
        attrs: ConvAttrs,
    ) -> NodeId {
        let inputs = self.params(name, x, weight, bias);
        self.op(name, Op::Conv2D(attrs), &inputs)
    }

    pub fn depthwise(
        &mut self,
        name: &str,
        x: NodeId,
        weight: Tensor,
        bias: Option<Tensor>,
        attrs: ConvAttrs,
    ) -> NodeId {
        let inputs = self.params(name, x, weight, bias);
        self.op(name, Op::DepthwiseConv2D(attrs), &inputs)
    }

    pub fn dense(&mut self, name: &str, x: NodeId, weight: Tensor, bias: Option<Tensor>) -> NodeId {
        let inputs = self.params(name, x, weight, bias);
        self.op(
            name,
            Op::Dense {
                activation: Activation::None,
            },
            &inputs,
        )
    }

    /// BatchNorm with parameters `[gamma, beta, mean, variance]`.
    pub fn batch_norm(&mut self, name: &str, x: NodeId, params: [Tensor; 4], epsilon: f32) -> NodeId {
        let [g, b, m, v] = params;
        let ids = [
            self.constant(&format!("{name}/gamma"), g),
            self.constant(&format!("{name}/beta"), b),
            self.constant(&format!("{name}/mean"), m),
            self.constant(&format!("{name}/variance"), v),
        ];
        self.op(name, Op::BatchNorm { epsilon }, &[x, ids[0], ids[1], ids[2], ids[3]])
    }

    fn params(&mut self, name: &str, x: NodeId, weight: Tensor, bias: Option<Tensor>) -> Vec<NodeId> {
        let mut inputs = vec![x, self.constant(&format!("{name}/weight"), weight)];
        if let Some(b) = bias {
            inputs.push(self.constant(&format!("{name}/bias"), b));
        }
        inputs
    }

    pub fn output(&mut self, id: NodeId) -> &mut Self {
        self.outputs.push(id);
        self
    }

    pub fn finish(self) -> Graph {
        Graph::from_parts(self.nodes, self.weights, self.inputs, self.outputs, self.metadata)
    }
}

/// Output extent of a sliding window. `None` when a valid window does not fit.
pub fn window_output_extent(input: usize, k: usize, stride: usize, padding: Padding) -> Option<usize> {
    if k == 0 || stride == 0 || input == 0 {
        return None;
    }
    match padding {
        Padding::Same => Some(input.div_ceil(stride)),
        Padding::Valid => (input >= k).then(|| (input - k) / stride + 1),
    }
}

/// (before, after) padding for one axis. Same-padding puts the odd cell
/// after (bottom/right).
pub fn window_padding(input: usize, k: usize, stride: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Valid => (0, 0),
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(input);
            (total / 2, total - total / 2)
        }
    }
}

/// Numpy-style broadcast of two shapes aligned at the trailing axis.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Structural validation. An empty result means the graph is a DAG whose ids
/// all resolve and whose parameter tensors agree with node attributes.
pub fn validate(graph: &Graph) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    let mut seen = HashSet::new();
    for n in graph.nodes() {
        if !seen.insert(n.id) {
            diags.push(Diagnostic::DuplicateId(n.id));
        }
    }
    let mut dangling = false;
    for n in graph.nodes() {
        for &i in &n.inputs {
            if graph.node(i).is_none() {
                diags.push(Diagnostic::DanglingInput {
                    node: n.id,
                    missing: i,
                });
                dangling = true;
            }
        }
    }
    for &e in graph.inputs().iter().chain(graph.outputs()) {
        if graph.node(e).is_none() {
            diags.push(Diagnostic::UnknownEndpoint(e));
        }
    }
    if graph.inputs().len() != 1 {
        diags.push(Diagnostic::InputCount(graph.inputs().len()));
    }
    if graph.outputs().len() != 1 {
        diags.push(Diagnostic::OutputCount(graph.outputs().len()));
    }
    for &i in graph.inputs() {
        if let Some(n) = graph.node(i) {
            if !matches!(n.op, Op::Input { .. }) {
                diags.push(Diagnostic::NotAnInput(i));
            }
        }
    }
    if !dangling && graph.topo_order().is_err() {
        diags.push(Diagnostic::CycleDetected);
    }
    for n in graph.nodes() {
        check_node(graph, n, &mut diags);
    }
    diags
}

fn check_node(graph: &Graph, n: &Node, diags: &mut Vec<Diagnostic>) {
    let (min, max) = n.op.arity();
    if n.inputs.len() < min || n.inputs.len() > max {
        diags.push(Diagnostic::Arity {
            node: n.id,
            min,
            max,
            found: n.inputs.len(),
        });
        return;
    }
    if matches!(n.op, Op::Const) && graph.weight(n.id).is_none() {
        diags.push(Diagnostic::MissingWeight(n.id));
    }
    let range = n.op.const_input_range();
    let mut params: Vec<&Tensor> = Vec::new();
    for &i in n.inputs.iter().skip(range.start).take(range.len()) {
        match graph.weight(i) {
            Some(t) if graph.is_const(i) => params.push(t),
            _ => {
                if graph.node(i).is_some() {
                    diags.push(Diagnostic::NonConstParameter { node: n.id, input: i });
                }
                return;
            }
        }
    }
    let bad = |detail: String| Diagnostic::WeightShape { node: n.id, detail };
    let bad_attr = |detail: &str| Diagnostic::BadAttribute {
        node: n.id,
        detail: detail.to_string(),
    };
    match &n.op {
        Op::Conv2D(a) | Op::DepthwiseConv2D(a) => {
            if a.kernel.contains(&0) || a.stride.contains(&0) {
                diags.push(bad_attr("kernel and stride must be positive"));
                return;
            }
            let w = params[0].shape();
            let depthwise = matches!(n.op, Op::DepthwiseConv2D(_));
            if w.len() != 4 || w[0] != a.kernel[0] || w[1] != a.kernel[1] || (depthwise && w[3] != 1) {
                diags.push(bad(format!(
                    "weight shape {w:?} does not match kernel {:?}{}",
                    a.kernel,
                    if depthwise { " (depthwise expects [kh,kw,C,1])" } else { "" }
                )));
                return;
            }
            let out_ch = if depthwise { w[2] } else { w[3] };
            if let Some(b) = params.get(1) {
                if b.shape() != [out_ch] {
                    diags.push(bad(format!("bias shape {:?}, expected [{out_ch}]", b.shape())));
                }
            }
        }
        Op::Dense { .. } => {
            let w = params[0].shape();
            if w.len() != 2 {
                diags.push(bad(format!("dense weight must be [in,out], got {w:?}")));
                return;
            }
            if let Some(b) = params.get(1) {
                if b.shape() != [w[1]] {
                    diags.push(bad(format!("bias shape {:?}, expected [{}]", b.shape(), w[1])));
                }
            }
        }
        Op::BatchNorm { epsilon } => {
            if !(*epsilon >= 0.0) {
                diags.push(bad_attr("epsilon must be non-negative"));
            }
            let c = params[0].shape();
            if c.len() != 1 || params.iter().any(|p| p.shape() != c) {
                diags.push(bad("batch-norm parameters must be equal-length vectors".into()));
            }
        }
        Op::AvgPool(p) | Op::MaxPool(p) => {
            if p.window.contains(&0) || p.stride.contains(&0) {
                diags.push(bad_attr("window and stride must be positive"));
            }
        }
        Op::Resize { size } => {
            if size.contains(&0) {
                diags.push(bad_attr("resize target must be positive"));
            }
        }
        Op::Reshape { shape } | Op::Input { shape } if shape.is_empty() || shape.contains(&0) => {
            diags.push(bad_attr("shape extents must be positive"));
        }
        _ => {}
    }
}

/// Annotate every node with its output shape. Idempotent.
pub fn infer_shapes(graph: &Graph) -> Result<Graph, GraphError> {
    let diags = validate(graph);
    if !diags.is_empty() {
        return Err(GraphError::Invalid(diags));
    }
    let order = graph.topo_order()?;
    let mut shapes: HashMap<NodeId, Vec<usize>> = HashMap::with_capacity(graph.nodes().len());
    for pos in order {
        let n = &graph.nodes()[pos];
        let ins: Vec<&[usize]> = n.inputs.iter().map(|i| shapes[i].as_slice()).collect();
        let s = node_output_shape(graph, n, &ins)?;
        shapes.insert(n.id, s);
    }
    let (mut nodes, weights, inputs, outputs, metadata) = graph.clone().into_parts();
    for n in &mut nodes {
        n.shape = shapes.remove(&n.id);
    }
    Ok(Graph::from_parts(nodes, weights, inputs, outputs, metadata))
}

fn node_output_shape(graph: &Graph, n: &Node, ins: &[&[usize]]) -> Result<Vec<usize>, GraphError> {
    let mismatch = |detail: String| GraphError::ShapeMismatch {
        node: n.id,
        name: n.name.clone(),
        detail,
    };
    let nhwc = |s: &[usize]| -> Result<[usize; 4], GraphError> {
        <[usize; 4]>::try_from(s).map_err(|_| mismatch(format!("expected NHWC input, got {s:?}")))
    };
    let window = |inp: [usize; 4], k: [usize; 2], st: [usize; 2], pad: Padding| {
        let oh = window_output_extent(inp[1], k[0], st[0], pad);
        let ow = window_output_extent(inp[2], k[1], st[1], pad);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(mismatch(format!("window {k:?} does not fit input {inp:?}"))),
        }
    };
    Ok(match &n.op {
        Op::Input { shape } => shape.clone(),
        Op::Const => graph.weight(n.id).map(|t| t.shape().to_vec()).unwrap_or_default(),
        Op::Conv2D(a) | Op::DepthwiseConv2D(a) => {
            let x = nhwc(ins[0])?;
            let w = ins[1];
            let depthwise = matches!(n.op, Op::DepthwiseConv2D(_));
            if w[2] != x[3] {
                return Err(mismatch(format!(
                    "weight expects {} input channels, activation has {}",
                    w[2], x[3]
                )));
            }
            let (oh, ow) = window(x, a.kernel, a.stride, a.padding)?;
            vec![x[0], oh, ow, if depthwise { x[3] } else { w[3] }]
        }
        Op::Dense { .. } => {
            let x = ins[0];
            let w = ins[1];
            let features: usize = x.iter().skip(1).product();
            if x.is_empty() || features != w[0] {
                return Err(mismatch(format!("dense expects {} features, input is {x:?}", w[0])));
            }
            vec![x[0], w[1]]
        }
        Op::BatchNorm { .. } => {
            let x = ins[0];
            if x.last() != Some(&ins[1][0]) {
                return Err(mismatch(format!("batch-norm over {} channels, input {x:?}", ins[1][0])));
            }
            x.to_vec()
        }
        Op::ReLU | Op::ReLU6 | Op::HardSwish | Op::HardSigmoid | Op::Softmax => ins[0].to_vec(),
        Op::AvgPool(p) | Op::MaxPool(p) => {
            let x = nhwc(ins[0])?;
            let (oh, ow) = window(x, p.window, p.stride, p.padding)?;
            vec![x[0], oh, ow, x[3]]
        }
        Op::GlobalAvgPool => {
            let x = nhwc(ins[0])?;
            vec![x[0], 1, 1, x[3]]
        }
        Op::Add | Op::Mul => broadcast_shapes(ins[0], ins[1])
            .ok_or_else(|| mismatch(format!("cannot broadcast {:?} with {:?}", ins[0], ins[1])))?,
        Op::Pad { pads } => {
            let x = nhwc(ins[0])?;
            vec![x[0], x[1] + pads[0] + pads[1], x[2] + pads[2] + pads[3], x[3]]
        }
        Op::Resize { size } => {
            let x = nhwc(ins[0])?;
            vec![x[0], size[0], size[1], x[3]]
        }
        Op::Reshape { shape } => {
            if num_elements(shape) != num_elements(ins[0]) {
                return Err(mismatch(format!("cannot reshape {:?} to {shape:?}", ins[0])));
            }
            shape.clone()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_graph(input: [usize; 4], k: usize, stride: usize, pad: Padding, filters: usize) -> Graph {
        let mut b = GraphBuilder::new("conv");
        let x = b.input("x", &input);
        let w = Tensor::zeros(vec![k, k, input[3], filters]);
        let y = b.conv2d("conv", x, w, None, ConvAttrs::new(k, stride, pad));
        b.output(y);
        b.finish()
    }

    #[test]
    fn stem_conv_halves_resolution() {
        let g = infer_shapes(&conv_graph([1, 224, 224, 3], 3, 2, Padding::Same, 32)).unwrap();
        assert_eq!(g.output_shape().unwrap(), &[1, 112, 112, 32]);
    }

    #[test]
    fn global_pool_and_resize_shapes() {
        let mut b = GraphBuilder::new("t");
        let x = b.input("x", &[1, 7, 7, 1024]);
        let y = b.op("gap", Op::GlobalAvgPool, &[x]);
        b.output(y);
        let g = infer_shapes(&b.finish()).unwrap();
        assert_eq!(g.output_shape().unwrap(), &[1, 1, 1, 1024]);

        // 512 wide by 384 high, resized to 224x224
        let mut b = GraphBuilder::new("t");
        let x = b.input("x", &[1, 384, 512, 3]);
        let y = b.op("resize", Op::Resize { size: [224, 224] }, &[x]);
        b.output(y);
        let g = infer_shapes(&b.finish()).unwrap();
        assert_eq!(g.output_shape().unwrap(), &[1, 224, 224, 3]);
    }

    #[test]
    fn infer_shapes_is_idempotent() {
        let g = infer_shapes(&conv_graph([1, 9, 9, 2], 3, 2, Padding::Valid, 4)).unwrap();
        assert_eq!(infer_shapes(&g).unwrap(), g);
    }

    #[test]
    fn channel_mismatch_names_node() {
        let mut b = GraphBuilder::new("t");
        let x = b.input("x", &[1, 8, 8, 3]);
        let y = b.conv2d("bad", x, Tensor::zeros(vec![1, 1, 4, 2]), None, ConvAttrs::new(1, 1, Padding::Same));
        b.output(y);
        match infer_shapes(&b.finish()) {
            Err(GraphError::ShapeMismatch { node, name, .. }) => {
                assert_eq!(node, y);
                assert_eq!(name, "bad");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dangling_input_is_reported() {
        let mut b = GraphBuilder::new("t");
        let x = b.input("x", &[1, 4]);
        let y = b.op("relu", Op::ReLU, &[x]);
        b.output(y);
        let (mut nodes, w, i, o, m) = b.finish().into_parts();
        nodes[1].inputs = vec![99];
        let g = Graph::from_parts(nodes, w, i, o, m);
        assert_eq!(validate(&g), vec![Diagnostic::DanglingInput { node: y, missing: 99 }]);
    }

    #[test]
    fn two_node_cycle_is_reported() {
        let nodes = vec![
            Node::new(0, "x", Op::Input { shape: vec![1, 4] }, vec![]),
            Node::new(1, "a", Op::Add, vec![0, 2]),
            Node::new(2, "b", Op::ReLU, vec![1]),
        ];
        let g = Graph::from_parts(nodes, BTreeMap::new(), vec![0], vec![2], Metadata::default());
        assert_eq!(validate(&g), vec![Diagnostic::CycleDetected]);
    }

    #[test]
    fn weight_kernel_mismatch() {
        let mut b = GraphBuilder::new("t");
        let x = b.input("x", &[1, 8, 8, 3]);
        let y = b.conv2d("c", x, Tensor::zeros(vec![5, 5, 3, 2]), None, ConvAttrs::new(3, 1, Padding::Same));
        b.output(y);
        let d = validate(&b.finish());
        assert!(matches!(d.as_slice(), [Diagnostic::WeightShape { .. }]), "{d:?}");
    }

    #[test]
    fn multi_output_rejected() {
        let mut b = GraphBuilder::new("t");
        let x = b.input("x", &[1, 4]);
        let y = b.op("r", Op::ReLU, &[x]);
        let z = b.op("s", Op::Softmax, &[x]);
        b.output(y).output(z);
        assert_eq!(validate(&b.finish()), vec![Diagnostic::OutputCount(2)]);
    }

    #[test]
    fn topo_order_diamond() {
        let mut b = GraphBuilder::new("t");
        let x = b.input("x", &[1, 4]);
        let l = b.op("l", Op::ReLU, &[x]);
        let r = b.op("r", Op::ReLU6, &[x]);
        let j = b.op("j", Op::Add, &[l, r]);
        b.output(j);
        let g = b.finish();
        let order = g.topo_order().unwrap();
        let pos = |id| order.iter().position(|&p| g.nodes()[p].id == id).unwrap();
        assert!(pos(l) < pos(j) && pos(r) < pos(j));
    }

    #[test]
    fn broadcast() {
        assert_eq!(broadcast_shapes(&[1, 4, 4, 8], &[1, 1, 1, 8]), Some(vec![1, 4, 4, 8]));
        assert_eq!(broadcast_shapes(&[2, 3], &[1]), Some(vec![2, 3]));
        assert_eq!(broadcast_shapes(&[2, 3], &[2]), None);
    }

    #[test]
    fn same_padding_extra_cell_goes_after() {
        assert_eq!(window_padding(224, 3, 2, Padding::Same), (0, 1));
        assert_eq!(window_padding(7, 3, 1, Padding::Same), (1, 1));
        assert_eq!(window_padding(8, 2, 1, Padding::Same), (0, 1));
        assert_eq!(window_padding(5, 5, 2, Padding::Same), (2, 2));
    }

    #[test]
    fn pruned_keeps_only_live_nodes() {
        let mut b = GraphBuilder::new("t");
        let x = b.input("x", &[1, 4]);
        let dead = b.constant("dead", Tensor::scalar(1.0));
        let y = b.op("r", Op::ReLU, &[x]);
        b.output(y);
        let g = b.finish().pruned();
        assert!(g.node(dead).is_none());
        assert!(g.weights().is_empty());
        assert_eq!(g.nodes().len(), 2);
    }
}
