//! Naive oracles and helpers shared by the integration tests.
#![allow(dead_code)]

use std::collections::HashMap;

use edgebin_core::graph::{infer_shapes, Graph, Padding};
use edgebin_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_f32(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

pub fn annotate(g: &Graph) -> Graph {
    infer_shapes(g).unwrap()
}

/// (out, pad_before) for one spatial axis, written out from the padding rules.
pub fn axis(input: usize, k: usize, s: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Valid => ((input - k) / s + 1, 0),
        Padding::Same => {
            let out = input.div_ceil(s);
            let need = ((out - 1) * s + k) as i64 - input as i64;
            (out, need.max(0) as usize / 2)
        }
    }
}

pub struct Nhwc<'a> {
    pub data: &'a [f32],
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Nhwc<'_> {
    /// Zero outside the image.
    pub fn at(&self, y: i64, x: i64, ch: usize) -> Option<f64> {
        if y < 0 || x < 0 || y >= self.h as i64 || x >= self.w as i64 {
            None
        } else {
            Some(self.data[(y as usize * self.w + x as usize) * self.c + ch] as f64)
        }
    }
}

/// Direct sliding-window convolution, HWIO weights, batch 1.
pub fn conv2d(
    x: &Nhwc,
    w: &[f32],
    k: (usize, usize),
    cout: usize,
    stride: usize,
    padding: Padding,
    bias: Option<&[f32]>,
) -> (Vec<f64>, [usize; 4]) {
    let (oh, pt) = axis(x.h, k.0, stride, padding);
    let (ow, pl) = axis(x.w, k.1, stride, padding);
    let mut out = Vec::new();
    for oy in 0..oh {
        for ox in 0..ow {
            for co in 0..cout {
                let mut acc = bias.map_or(0.0, |b| b[co] as f64);
                for ky in 0..k.0 {
                    for kx in 0..k.1 {
                        for ci in 0..x.c {
                            let y = (oy * stride + ky) as i64 - pt as i64;
                            let xx = (ox * stride + kx) as i64 - pl as i64;
                            if let Some(v) = x.at(y, xx, ci) {
                                acc += v * w[((ky * k.1 + kx) * x.c + ci) * cout + co] as f64;
                            }
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    (out, [1, oh, ow, cout])
}

/// Per-channel sliding window, weights `[kh, kw, C, 1]`.
pub fn depthwise(x: &Nhwc, w: &[f32], k: (usize, usize), stride: usize, padding: Padding, bias: Option<&[f32]>) -> Vec<f64> {
    let (oh, pt) = axis(x.h, k.0, stride, padding);
    let (ow, pl) = axis(x.w, k.1, stride, padding);
    let mut out = Vec::new();
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..x.c {
                let mut acc = bias.map_or(0.0, |b| b[ch] as f64);
                for ky in 0..k.0 {
                    for kx in 0..k.1 {
                        let y = (oy * stride + ky) as i64 - pt as i64;
                        let xx = (ox * stride + kx) as i64 - pl as i64;
                        if let Some(v) = x.at(y, xx, ch) {
                            acc += v * w[(ky * k.1 + kx) * x.c + ch] as f64;
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

pub fn dense(x: &[f32], w: &[f32], bias: Option<&[f32]>, cout: usize) -> Vec<f64> {
    let cin = x.len();
    (0..cout)
        .map(|o| bias.map_or(0.0, |b| b[o] as f64) + (0..cin).map(|i| x[i] as f64 * w[i * cout + o] as f64).sum::<f64>())
        .collect()
}

/// Pools over in-image taps only.
pub fn pool(x: &Nhwc, k: usize, stride: usize, padding: Padding, max: bool) -> Vec<f64> {
    let (oh, pt) = axis(x.h, k, stride, padding);
    let (ow, pl) = axis(x.w, k, stride, padding);
    let mut out = Vec::new();
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..x.c {
                let taps: Vec<f64> = (0..k * k)
                    .filter_map(|t| {
                        let y = (oy * stride + t / k) as i64 - pt as i64;
                        let xx = (ox * stride + t % k) as i64 - pl as i64;
                        x.at(y, xx, ch)
                    })
                    .collect();
                out.push(if max {
                    taps.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                } else {
                    taps.iter().sum::<f64>() / taps.len() as f64
                });
            }
        }
    }
    out
}

/// Closed-form half-pixel bilinear sample with edge clamping.
pub fn bilinear(x: &Nhwc, oh: usize, ow: usize) -> Vec<f64> {
    let src = |o: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::new();
    for oy in 0..oh {
        let (y0, y1, fy) = src(oy, oh, x.h);
        for ox in 0..ow {
            let (x0, x1, fx) = src(ox, ow, x.w);
            for ch in 0..x.c {
                let v = |y: usize, xx: usize| x.at(y as i64, xx as i64, ch).unwrap();
                let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
                let bottom = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

/// Brute-force peak of live activation bytes: at each step, the sum over
/// every value produced so far that is still read at this step or later
/// (or is a graph output).
pub fn brute_force_peak(order: &[u32], sizes: &[(u32, usize)], g: &Graph) -> usize {
    let step_of: HashMap<u32, usize> = order.iter().enumerate().map(|(s, &id)| (id, s)).collect();
    let size_of: HashMap<u32, usize> = sizes.iter().copied().collect();
    let last_read: HashMap<u32, usize> = order
        .iter()
        .map(|&id| {
            let last = if g.outputs().contains(&id) {
                usize::MAX
            } else {
                g.nodes()
                    .iter()
                    .filter(|n| n.inputs.contains(&id))
                    .map(|n| step_of[&n.id])
                    .max()
                    .unwrap_or(step_of[&id])
            };
            (id, last)
        })
        .collect();
    (0..order.len())
        .map(|step| {
            order[..=step]
                .iter()
                .filter(|id| last_read[*id] >= step)
                .map(|id| size_of[id])
                .sum::<usize>()
        })
        .max()
        .unwrap_or(0)
}
