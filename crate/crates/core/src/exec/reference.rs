//! Naive direct kernels. These define the semantics the optimized path is
//! checked against; they are deliberately plain loops.

use crate::graph::Activation;

use super::kernels::{Requantizer, WindowGeometry};

/// Direct convolution. `w` is HWIO `[k_h, k_w, channels, out_c]`.
pub fn conv2d(
    x: &[f32],
    w: &[f32],
    bias: Option<&[f32]>,
    g: &WindowGeometry,
    out_c: usize,
    act: Activation,
) -> Vec<f32> {
    let cin = g.channels;
    let mut out = vec![0.0f32; g.out_pixels() * out_c];
    for n in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                for oc in 0..out_c {
                    let mut acc = 0.0f32;
                    for ky in 0..g.k_h {
                        let Some(iy) = g.in_y(oy, ky) else { continue };
                        for kx in 0..g.k_w {
                            let Some(ix) = g.in_x(ox, kx) else { continue };
                            for ic in 0..cin {
                                let xv = x[((n * g.in_h + iy) * g.in_w + ix) * cin + ic];
                                let wv = w[((ky * g.k_w + kx) * cin + ic) * out_c + oc];
                                acc += xv * wv;
                            }
                        }
                    }
                    if let Some(b) = bias {
                        acc += b[oc];
                    }
                    out[((n * g.out_h + oy) * g.out_w + ox) * out_c + oc] = act.apply(acc);
                }
            }
        }
    }
    out
}

/// Direct depthwise convolution, multiplier 1. `w` is `[k_h, k_w, channels, 1]`.
pub fn depthwise(x: &[f32], w: &[f32], bias: Option<&[f32]>, g: &WindowGeometry, act: Activation) -> Vec<f32> {
    let c = g.channels;
    let mut out = vec![0.0f32; g.out_pixels() * c];
    for n in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                for ch in 0..c {
                    let mut acc = 0.0f32;
                    for ky in 0..g.k_h {
                        let Some(iy) = g.in_y(oy, ky) else { continue };
                        for kx in 0..g.k_w {
                            let Some(ix) = g.in_x(ox, kx) else { continue };
                            acc += x[((n * g.in_h + iy) * g.in_w + ix) * c + ch] * w[(ky * g.k_w + kx) * c + ch];
                        }
                    }
                    if let Some(b) = bias {
                        acc += b[ch];
                    }
                    out[((n * g.out_h + oy) * g.out_w + ox) * c + ch] = act.apply(acc);
                }
            }
        }
    }
    out
}

/// `x` is `[batch, features]`, `w` is `[features, out]`.
pub fn dense(x: &[f32], w: &[f32], bias: Option<&[f32]>, batch: usize, out: usize, act: Activation) -> Vec<f32> {
    let features = x.len() / batch;
    let mut y = vec![0.0f32; batch * out];
    for n in 0..batch {
        for o in 0..out {
            let mut acc = 0.0f32;
            for i in 0..features {
                acc += x[n * features + i] * w[i * out + o];
            }
            if let Some(b) = bias {
                acc += b[o];
            }
            y[n * out + o] = act.apply(acc);
        }
    }
    y
}

/// Integer parameters of one quantized operand.
#[derive(Debug, Clone, Copy)]
pub struct QOperand<'a> {
    pub data: &'a [i8],
    pub zero_point: i32,
}

pub fn conv2d_i8(
    x: QOperand<'_>,
    w: QOperand<'_>,
    bias: Option<&[i32]>,
    g: &WindowGeometry,
    out_c: usize,
    rq: &Requantizer,
) -> Vec<i8> {
    let cin = g.channels;
    let mut out = vec![0i8; g.out_pixels() * out_c];
    for n in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                for oc in 0..out_c {
                    let mut acc: i32 = bias.map_or(0, |b| b[oc]);
                    for ky in 0..g.k_h {
                        let Some(iy) = g.in_y(oy, ky) else { continue };
                        for kx in 0..g.k_w {
                            let Some(ix) = g.in_x(ox, kx) else { continue };
                            for ic in 0..cin {
                                let xv = i32::from(x.data[((n * g.in_h + iy) * g.in_w + ix) * cin + ic]) - x.zero_point;
                                let wv = i32::from(w.data[((ky * g.k_w + kx) * cin + ic) * out_c + oc]) - w.zero_point;
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((n * g.out_h + oy) * g.out_w + ox) * out_c + oc] = rq.apply(acc);
                }
            }
        }
    }
    out
}

pub fn depthwise_i8(x: QOperand<'_>, w: QOperand<'_>, bias: Option<&[i32]>, g: &WindowGeometry, rq: &Requantizer) -> Vec<i8> {
    let c = g.channels;
    let mut out = vec![0i8; g.out_pixels() * c];
    for n in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                for ch in 0..c {
                    let mut acc: i32 = bias.map_or(0, |b| b[ch]);
                    for ky in 0..g.k_h {
                        let Some(iy) = g.in_y(oy, ky) else { continue };
                        for kx in 0..g.k_w {
                            let Some(ix) = g.in_x(ox, kx) else { continue };
                            let xv = i32::from(x.data[((n * g.in_h + iy) * g.in_w + ix) * c + ch]) - x.zero_point;
                            let wv = i32::from(w.data[(ky * g.k_w + kx) * c + ch]) - w.zero_point;
                            acc += xv * wv;
                        }
                    }
                    out[((n * g.out_h + oy) * g.out_w + ox) * c + ch] = rq.apply(acc);
                }
            }
        }
    }
    out
}

pub fn dense_i8(x: QOperand<'_>, w: QOperand<'_>, bias: Option<&[i32]>, batch: usize, out: usize, rq: &Requantizer) -> Vec<i8> {
    let features = x.data.len() / batch;
    let mut y = vec![0i8; batch * out];
    for n in 0..batch {
        for o in 0..out {
            let mut acc: i32 = bias.map_or(0, |b| b[o]);
            for i in 0..features {
                acc += (i32::from(x.data[n * features + i]) - x.zero_point) * (i32::from(w.data[i * out + o]) - w.zero_point);
            }
            y[n * out + o] = rq.apply(acc);
        }
    }
    y
}
