//! MobileNet builders with seeded He-uniform weights.
//!
//! Layer schedules follow the canonical published V1 and V3 (Large/Small)
//! tables, including the conventions of the common Keras implementations:
//! bias-free convolutions followed by batch normalization (epsilon 1e-3),
//! channel counts `int(c * alpha)` for V1 and rounded to multiples of 8 for
//! V3. The classifier head is global average pooling, a dense layer and
//! softmax.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::format;
use crate::graph::{ConvAttrs, Graph, GraphBuilder, NodeId, Op, Padding, PoolAttrs};
use crate::labels::bin_labels;
use crate::tensor::{DType, Tensor};

const BN_EPSILON: f32 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    MobilenetV1,
    MobilenetV3Large,
    MobilenetV3Small,
}

impl FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mobilenet_v1" => Ok(Family::MobilenetV1),
            "mobilenet_v3_large" => Ok(Family::MobilenetV3Large),
            "mobilenet_v3_small" => Ok(Family::MobilenetV3Small),
            other => Err(format!(
                "unknown family {other:?} (expected mobilenet_v1|mobilenet_v3_large|mobilenet_v3_small)"
            )),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::MobilenetV1 => "mobilenet_v1",
            Family::MobilenetV3Large => "mobilenet_v3_large",
            Family::MobilenetV3Small => "mobilenet_v3_small",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub alpha: f32,
    /// `(width, height)` of the graph input.
    pub input_resolution: (usize, usize),
    pub num_classes: usize,
    /// Bilinear resize applied before the backbone, `(width, height)`.
    pub resize_front: Option<(usize, usize)>,
}

impl ModelSpec {
    pub fn new(family: Family, alpha: f32, width: usize, height: usize, num_classes: usize) -> Self {
        ModelSpec {
            family,
            alpha,
            input_resolution: (width, height),
            num_classes,
            resize_front: None,
        }
    }

    pub fn with_resize(mut self, width: usize, height: usize) -> Self {
        self.resize_front = Some((width, height));
        self
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ZooError {
    #[error("unsupported width multiplier {0} (expected 0.25, 0.5, 0.75 or 1.0)")]
    UnsupportedAlpha(f32),
    #[error("a classifier needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("resolution {0}x{1} is too small")]
    BadResolution(usize, usize),
}

/// Round to a multiple of 8, never dropping more than 10%.
pub fn make_divisible(v: f64) -> usize {
    let divisor = 8.0f64;
    let mut new_v = divisor.max(((v + divisor / 2.0) / divisor).floor() * divisor);
    if new_v < 0.9 * v {
        new_v += divisor;
    }
    new_v as usize
}

struct Net<'a> {
    b: GraphBuilder,
    rng: ChaCha8Rng,
    channels: usize,
    _spec: &'a ModelSpec,
}

impl Net<'_> {
    fn he_uniform(&mut self, shape: Vec<usize>, fan_in: usize) -> Tensor {
        let limit = (6.0 / fan_in as f64).sqrt() as f32;
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-limit..limit)).collect();
        Tensor::from_f32(shape, data).expect("shape matches")
    }

    fn bn(&mut self, name: &str, x: NodeId, c: usize) -> NodeId {
        let ones = || Tensor::from_f32(vec![c], vec![1.0; c]).expect("vector");
        let zeros = || Tensor::zeros(vec![c]);
        self.b.batch_norm(&format!("{name}_bn"), x, [ones(), zeros(), zeros(), ones()], BN_EPSILON)
    }

    fn act(&mut self, name: &str, x: NodeId, op: Op) -> NodeId {
        let suffix = match op {
            Op::ReLU => "relu",
            Op::ReLU6 => "relu6",
            Op::HardSwish => "hswish",
            _ => "hsigmoid",
        };
        self.b.op(&format!("{name}_{suffix}"), op, &[x])
    }

    /// Convolution (optionally biased) without normalization.
    fn conv(&mut self, name: &str, x: NodeId, k: usize, stride: usize, out: usize, bias: bool) -> NodeId {
        let cin = self.channels;
        let w = self.he_uniform(vec![k, k, cin, out], k * k * cin);
        let b = bias.then(|| Tensor::zeros(vec![out]));
        self.channels = out;
        self.b.conv2d(name, x, w, b, ConvAttrs::new(k, stride, Padding::Same))
    }

    fn conv_bn(&mut self, name: &str, x: NodeId, k: usize, stride: usize, out: usize) -> NodeId {
        let y = self.conv(name, x, k, stride, out, false);
        self.bn(name, y, out)
    }

    fn depthwise_bn(&mut self, name: &str, x: NodeId, k: usize, stride: usize) -> NodeId {
        let c = self.channels;
        let w = self.he_uniform(vec![k, k, c, 1], k * k);
        let y = self.b.depthwise(name, x, w, None, ConvAttrs::new(k, stride, Padding::Same));
        self.bn(name, y, c)
    }

    fn head(&mut self, x: NodeId, classes: usize) -> NodeId {
        let c = self.channels;
        let p = self.b.op("global_pool", Op::GlobalAvgPool, &[x]);
        let w = self.he_uniform(vec![c, classes], c);
        let d = self.b.dense("predictions", p, w, Some(Tensor::zeros(vec![classes])));
        self.b.op("softmax", Op::Softmax, &[d])
    }
}

const V1_BLOCKS: [(usize, usize); 13] = [
    (64, 1),
    (128, 2),
    (128, 1),
    (256, 2),
    (256, 1),
    (512, 2),
    (512, 1),
    (512, 1),
    (512, 1),
    (512, 1),
    (512, 1),
    (1024, 2),
    (1024, 1),
];

fn mobilenet_v1(net: &mut Net, x: NodeId, alpha: f32) -> NodeId {
    let ch = |c: usize| (c as f32 * alpha) as usize;
    let y = net.conv_bn("conv1", x, 3, 2, ch(32));
    let mut y = net.act("conv1", y, Op::ReLU6);
    for (i, &(filters, stride)) in V1_BLOCKS.iter().enumerate() {
        let id = i + 1;
        let dw = format!("conv_dw_{id}");
        let z = net.depthwise_bn(&dw, y, 3, stride);
        let z = net.act(&dw, z, Op::ReLU6);
        let pw = format!("conv_pw_{id}");
        let z = net.conv_bn(&pw, z, 1, 1, ch(filters));
        y = net.act(&pw, z, Op::ReLU6);
    }
    y
}

#[derive(Clone, Copy)]
struct V3Block {
    expansion: f64,
    filters: usize,
    kernel: usize,
    stride: usize,
    se: bool,
    hswish: bool,
}

const fn blk(expansion: f64, filters: usize, kernel: usize, stride: usize, se: bool, hswish: bool) -> V3Block {
    V3Block {
        expansion,
        filters,
        kernel,
        stride,
        se,
        hswish,
    }
}

const V3_LARGE: [V3Block; 15] = [
    blk(1.0, 16, 3, 1, false, false),
    blk(4.0, 24, 3, 2, false, false),
    blk(3.0, 24, 3, 1, false, false),
    blk(3.0, 40, 5, 2, true, false),
    blk(3.0, 40, 5, 1, true, false),
    blk(3.0, 40, 5, 1, true, false),
    blk(6.0, 80, 3, 2, false, true),
    blk(2.5, 80, 3, 1, false, true),
    blk(2.3, 80, 3, 1, false, true),
    blk(2.3, 80, 3, 1, false, true),
    blk(6.0, 112, 3, 1, true, true),
    blk(6.0, 112, 3, 1, true, true),
    blk(6.0, 160, 5, 2, true, true),
    blk(6.0, 160, 5, 1, true, true),
    blk(6.0, 160, 5, 1, true, true),
];

const V3_SMALL: [V3Block; 11] = [
    blk(1.0, 16, 3, 2, true, false),
    blk(72.0 / 16.0, 24, 3, 2, false, false),
    blk(88.0 / 24.0, 24, 3, 1, false, false),
    blk(4.0, 40, 5, 2, true, true),
    blk(6.0, 40, 5, 1, true, true),
    blk(6.0, 40, 5, 1, true, true),
    blk(3.0, 48, 5, 1, true, true),
    blk(3.0, 48, 5, 1, true, true),
    blk(6.0, 96, 5, 2, true, true),
    blk(6.0, 96, 5, 1, true, true),
    blk(6.0, 96, 5, 1, true, true),
];

fn squeeze_excite(net: &mut Net, name: &str, x: NodeId) -> NodeId {
    let c = net.channels;
    let p = net.b.op(&format!("{name}/squeeze_excite/pool"), Op::GlobalAvgPool, &[x]);
    let s = net.conv(&format!("{name}/squeeze_excite/conv"), p, 1, 1, make_divisible(c as f64 * 0.25), true);
    let s = net.act(&format!("{name}/squeeze_excite"), s, Op::ReLU);
    let e = net.conv(&format!("{name}/squeeze_excite/conv_1"), s, 1, 1, c, true);
    let e = net.act(&format!("{name}/squeeze_excite"), e, Op::HardSigmoid);
    net.b.op(&format!("{name}/squeeze_excite/mul"), Op::Mul, &[x, e])
}

fn mobilenet_v3(net: &mut Net, x: NodeId, alpha: f32, blocks: &[V3Block]) -> NodeId {
    let y = net.conv_bn("conv", x, 3, 2, 16);
    let mut y = net.act("conv", y, Op::HardSwish);
    for (i, blk) in blocks.iter().enumerate() {
        let name = if i == 0 { "expanded_conv".to_string() } else { format!("expanded_conv_{i}") };
        let act = if blk.hswish { Op::HardSwish } else { Op::ReLU };
        let shortcut = y;
        let in_ch = net.channels;
        let expanded = make_divisible(in_ch as f64 * blk.expansion);
        let filters = make_divisible(blk.filters as f64 * f64::from(alpha));
        let mut z = y;
        if i > 0 {
            let e = format!("{name}/expand");
            z = net.conv_bn(&e, z, 1, 1, expanded);
            z = net.act(&e, z, act.clone());
        }
        let d = format!("{name}/depthwise");
        z = net.depthwise_bn(&d, z, blk.kernel, blk.stride);
        z = net.act(&d, z, act.clone());
        if blk.se {
            z = squeeze_excite(net, &name, z);
        }
        z = net.conv_bn(&format!("{name}/project"), z, 1, 1, filters);
        if blk.stride == 1 && in_ch == filters {
            z = net.b.op(&format!("{name}/add"), Op::Add, &[shortcut, z]);
        }
        y = z;
    }
    let last = make_divisible(net.channels as f64 * 6.0);
    let y = net.conv_bn("conv_1", y, 1, 1, last);
    net.act("conv_1", y, Op::HardSwish)
}

/// Build a classifier graph. Identical spec and seed give identical weights.
pub fn build(spec: &ModelSpec, seed: u64) -> Result<Graph, ZooError> {
    if ![0.25, 0.5, 0.75, 1.0].contains(&spec.alpha) {
        return Err(ZooError::UnsupportedAlpha(spec.alpha));
    }
    if spec.num_classes < 2 {
        return Err(ZooError::TooFewClasses(spec.num_classes));
    }
    let (w, h) = spec.input_resolution;
    let (bw, bh) = spec.resize_front.unwrap_or((w, h));
    if w < 8 || h < 8 || bw < 32 || bh < 32 {
        return Err(ZooError::BadResolution(bw.min(w), bh.min(h)));
    }
    let mut net = Net {
        b: GraphBuilder::new(format!("{}_{}_{}x{}", spec.family, spec.alpha, w, h)),
        rng: ChaCha8Rng::seed_from_u64(seed),
        channels: 3,
        _spec: spec,
    };
    let labels = if spec.num_classes == bin_labels().len() {
        bin_labels()
    } else {
        (0..spec.num_classes).map(|i| format!("class_{i}")).collect()
    };
    net.b.labels(labels);
    let mut x = net.b.input("input", &[1, h, w, 3]);
    if let Some((tw, th)) = spec.resize_front {
        x = net.b.op("resize", Op::Resize { size: [th, tw] }, &[x]);
    }
    let features = match spec.family {
        Family::MobilenetV1 => mobilenet_v1(&mut net, x, spec.alpha),
        Family::MobilenetV3Large => mobilenet_v3(&mut net, x, spec.alpha, &V3_LARGE),
        Family::MobilenetV3Small => mobilenet_v3(&mut net, x, spec.alpha, &V3_SMALL),
    };
    let out = net.head(features, spec.num_classes);
    net.b.output(out);
    Ok(net.b.finish())
}

pub fn param_count(graph: &Graph) -> usize {
    graph.param_count()
}

/// Parameters stored in the classifier head (dense weights and bias).
pub fn head_param_count(graph: &Graph) -> usize {
    graph
        .nodes()
        .iter()
        .filter(|n| matches!(n.op, Op::Dense { .. }))
        .flat_map(|n| &n.inputs[1..])
        .filter_map(|&i| graph.weight(i))
        .map(Tensor::len)
        .sum()
}

/// Bytes of a model file holding every parameter as `dtype`: parameter data
/// plus the manifest and framing of the saved graph.
pub fn estimate_file_size(graph: &Graph, dtype: DType) -> usize {
    let overhead = format::encode(graph)
        .map(|b| b.len() - graph.weight_bytes())
        .unwrap_or(0);
    graph.param_count() * dtype.size_bytes() + overhead
}

/// Small random classifier used as a pass and executor test corpus. Graphs
/// mix convolutions (1x1, 2x2, 3x3), depthwise convolutions, batch norm,
/// activations, residual adds, squeeze-excite gates, pooling, padding and a
/// foldable constant branch, and always end in a dense+softmax head.
pub fn random_graph(seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = rng.gen_range(5..=10usize);
    let w = rng.gen_range(5..=10usize);
    let c = rng.gen_range(1..=4usize);
    let spec = ModelSpec::new(Family::MobilenetV1, 1.0, w, h, 2);
    let mut net = Net {
        b: GraphBuilder::new(format!("random_{seed}")),
        rng: ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15),
        channels: c,
        _spec: &spec,
    };
    let mut x = net.b.input("input", &[1, h, w, c]);
    let (mut hh, mut ww) = (h, w);
    let acts = [Op::ReLU, Op::ReLU6, Op::HardSwish];
    let blocks = rng.gen_range(2..=5);
    for i in 0..blocks {
        let name = format!("b{i}");
        match rng.gen_range(0..7) {
            0 | 1 => {
                let k = [1, 2, 3][rng.gen_range(0..3)];
                let stride = if hh > 3 && ww > 3 { rng.gen_range(1..=2) } else { 1 };
                let out = rng.gen_range(2..=6);
                let y = net.conv_bn(&name, x, k, stride, out);
                x = net.act(&name, y, acts[rng.gen_range(0..3)].clone());
                hh = hh.div_ceil(stride);
                ww = ww.div_ceil(stride);
            }
            2 => {
                let y = net.depthwise_bn(&name, x, 3, 1);
                x = net.act(&name, y, acts[rng.gen_range(0..3)].clone());
            }
            3 => {
                let ch = net.channels;
                let y = net.conv_bn(&name, x, 3, 1, ch);
                let y = net.act(&name, y, Op::ReLU);
                x = net.b.op(&format!("{name}_add"), Op::Add, &[x, y]);
            }
            4 => {
                x = squeeze_excite(&mut net, &name, x);
            }
            5 => {
                let ch = net.channels;
                let a: Vec<f32> = (0..ch).map(|_| net.rng.gen_range(-1.0..1.0)).collect();
                let bvals: Vec<f32> = (0..ch).map(|_| net.rng.gen_range(-1.0..1.0)).collect();
                let a = net.b.constant(&format!("{name}_a"), Tensor::from_f32(vec![ch], a).expect("vec"));
                let bb = net.b.constant(&format!("{name}_b"), Tensor::from_f32(vec![ch], bvals).expect("vec"));
                let m = net.b.op(&format!("{name}_const_mul"), Op::Mul, &[a, bb]);
                x = net.b.op(&format!("{name}_shift"), Op::Add, &[x, m]);
            }
            _ => {
                if hh >= 4 && ww >= 4 {
                    let pool = PoolAttrs {
                        window: [2, 2],
                        stride: [2, 2],
                        padding: Padding::Valid,
                    };
                    let op = if rng.gen_bool(0.5) { Op::MaxPool(pool) } else { Op::AvgPool(pool) };
                    x = net.b.op(&format!("{name}_pool"), op, &[x]);
                    hh /= 2;
                    ww /= 2;
                } else {
                    x = net.b.op(&format!("{name}_pad"), Op::Pad { pads: [1, 0, 0, 1] }, &[x]);
                    hh += 1;
                    ww += 1;
                }
            }
        }
    }
    let classes = rng.gen_range(2..=7);
    let out = net.head(x, classes);
    net.b.output(out);
    net.b.finish()
}
