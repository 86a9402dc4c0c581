//! Geometry, requantization, and the operators whose single implementation
//! serves both execution paths (pooling, elementwise, softmax, resize, pad).

use crate::graph::{broadcast_shapes, window_output_extent, window_padding, Activation, Padding};
use crate::tensor::QuantParams;

use super::ExecError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub channels: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl WindowGeometry {
    pub fn new(
        x_shape: &[usize],
        window: [usize; 2],
        stride: [usize; 2],
        padding: Padding,
    ) -> Result<Self, ExecError> {
        let [batch, in_h, in_w, channels] = <[usize; 4]>::try_from(x_shape)
            .map_err(|_| ExecError::ShapeMismatch(format!("expected NHWC input, got {x_shape:?}")))?;
        let out = |i, k, s| window_output_extent(i, k, s, padding);
        let (Some(out_h), Some(out_w)) = (out(in_h, window[0], stride[0]), out(in_w, window[1], stride[1])) else {
            return Err(ExecError::ShapeMismatch(format!(
                "window {window:?} stride {stride:?} does not fit input {x_shape:?}"
            )));
        };
        Ok(WindowGeometry {
            batch,
            in_h,
            in_w,
            channels,
            k_h: window[0],
            k_w: window[1],
            stride_h: stride[0],
            stride_w: stride[1],
            pad_top: window_padding(in_h, window[0], stride[0], padding).0,
            pad_left: window_padding(in_w, window[1], stride[1], padding).0,
            out_h,
            out_w,
        })
    }

    /// Input row for output row `oy` and kernel row `ky`, if inside the image.
    #[inline]
    pub fn in_y(&self, oy: usize, ky: usize) -> Option<usize> {
        (oy * self.stride_h + ky).checked_sub(self.pad_top).filter(|&y| y < self.in_h)
    }

    #[inline]
    pub fn in_x(&self, ox: usize, kx: usize) -> Option<usize> {
        (ox * self.stride_w + kx).checked_sub(self.pad_left).filter(|&x| x < self.in_w)
    }

    pub fn out_pixels(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    pub fn out_shape(&self, out_c: usize) -> Vec<usize> {
        vec![self.batch, self.out_h, self.out_w, out_c]
    }
}

/// Maps an i32 accumulator (in units of `in_scale`) to the output i8 domain,
/// applying the fused activation on the real value. Rounds half away from zero.
#[derive(Debug, Clone, Copy)]
pub struct Requantizer {
    pub in_scale: f64,
    pub out: QuantParams,
    pub activation: Activation,
}

impl Requantizer {
    pub fn new(input: QuantParams, weight: QuantParams, out: QuantParams, activation: Activation) -> Self {
        Requantizer {
            in_scale: f64::from(input.scale) * f64::from(weight.scale),
            out,
            activation,
        }
    }

    /// Bias in accumulator units.
    pub fn quantize_bias(&self, bias: &[f32]) -> Vec<i32> {
        bias.iter()
            .map(|&b| (f64::from(b) / self.in_scale).round().clamp(i32::MIN as f64, i32::MAX as f64) as i32)
            .collect()
    }

    #[inline]
    pub fn apply(&self, acc: i32) -> i8 {
        let real = f64::from(acc) * self.in_scale;
        let a = match self.activation {
            Activation::None => real,
            Activation::Relu => real.max(0.0),
            Activation::Relu6 => real.clamp(0.0, 6.0),
            Activation::Hswish => real * (real + 3.0).clamp(0.0, 6.0) / 6.0,
        };
        let q = (a / f64::from(self.out.scale)).round() + f64::from(self.out.zero_point);
        q.clamp(-128.0, 127.0) as i8
    }
}

pub fn batch_norm(x: &[f32], gamma: &[f32], beta: &[f32], mean: &[f32], var: &[f32], eps: f32) -> Vec<f32> {
    let c = gamma.len();
    x.chunks_exact(c)
        .flat_map(|row| {
            (0..c).map(move |i| (row[i] - mean[i]) / (var[i] + eps).sqrt() * gamma[i] + beta[i])
        })
        .collect()
}

pub fn hard_sigmoid(x: f32) -> f32 {
    (x + 3.0).clamp(0.0, 6.0) / 6.0
}

pub fn unary(x: &[f32], f: impl Fn(f32) -> f32) -> Vec<f32> {
    x.iter().map(|&v| f(v)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

/// Average pooling divides by the number of in-image cells under the window.
pub fn pool(x: &[f32], g: &WindowGeometry, kind: PoolKind) -> Vec<f32> {
    let c = g.channels;
    let mut out = Vec::with_capacity(g.out_pixels() * c);
    let mut acc = vec![0.0f32; c];
    for n in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let init = if kind == PoolKind::Avg { 0.0 } else { f32::NEG_INFINITY };
                acc.iter_mut().for_each(|a| *a = init);
                let mut count = 0usize;
                for ky in 0..g.k_h {
                    let Some(iy) = g.in_y(oy, ky) else { continue };
                    for kx in 0..g.k_w {
                        let Some(ix) = g.in_x(ox, kx) else { continue };
                        let base = ((n * g.in_h + iy) * g.in_w + ix) * c;
                        let px = &x[base..base + c];
                        match kind {
                            PoolKind::Avg => acc.iter_mut().zip(px).for_each(|(a, &v)| *a += v),
                            PoolKind::Max => acc.iter_mut().zip(px).for_each(|(a, &v)| *a = a.max(v)),
                        }
                        count += 1;
                    }
                }
                match kind {
                    PoolKind::Avg => out.extend(acc.iter().map(|&a| a / count as f32)),
                    PoolKind::Max => out.extend_from_slice(&acc),
                }
            }
        }
    }
    out
}

pub fn global_avg_pool(x: &[f32], shape: &[usize]) -> Vec<f32> {
    let (n, hw, c) = (shape[0], shape[1] * shape[2], shape[3]);
    let mut out = vec![0.0f32; n * c];
    for b in 0..n {
        let acc = &mut out[b * c..(b + 1) * c];
        for p in 0..hw {
            let base = (b * hw + p) * c;
            acc.iter_mut().zip(&x[base..base + c]).for_each(|(a, &v)| *a += v);
        }
        acc.iter_mut().for_each(|a| *a /= hw as f32);
    }
    out
}

/// Softmax over the last axis.
pub fn softmax(x: &[f32], last: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(last) {
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let start = out.len();
        out.extend(row.iter().map(|&v| (v - m).exp()));
        let sum: f32 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|v| *v /= sum);
    }
    out
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Elementwise binary op with trailing-axis broadcasting.
pub fn broadcast_binary(
    a: &[f32],
    a_shape: &[usize],
    b: &[f32],
    b_shape: &[usize],
    f: impl Fn(f32, f32) -> f32,
) -> Result<(Vec<f32>, Vec<usize>), ExecError> {
    let out_shape = broadcast_shapes(a_shape, b_shape)
        .ok_or_else(|| ExecError::ShapeMismatch(format!("cannot broadcast {a_shape:?} with {b_shape:?}")))?;
    if a_shape == b_shape {
        return Ok((a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(), out_shape));
    }
    let rank = out_shape.len();
    let expand = |s: &[usize]| -> Vec<usize> {
        let mut full = vec![1; rank - s.len()];
        full.extend_from_slice(s);
        let st = strides(&full);
        full.iter().zip(st).map(|(&d, s)| if d == 1 { 0 } else { s }).collect()
    };
    let (sa, sb) = (expand(a_shape), expand(b_shape));
    let total: usize = out_shape.iter().product();
    let mut idx = vec![0usize; rank];
    let mut out = Vec::with_capacity(total);
    for _ in 0..total {
        let oa: usize = idx.iter().zip(&sa).map(|(i, s)| i * s).sum();
        let ob: usize = idx.iter().zip(&sb).map(|(i, s)| i * s).sum();
        out.push(f(a[oa], b[ob]));
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok((out, out_shape))
}

pub fn pad(x: &[f32], shape: &[usize], pads: [usize; 4]) -> (Vec<f32>, Vec<usize>) {
    let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h + pads[0] + pads[1], w + pads[2] + pads[3]);
    let mut out = vec![0.0f32; n * oh * ow * c];
    for b in 0..n {
        for y in 0..h {
            let src = ((b * h + y) * w) * c;
            let dst = ((b * oh + y + pads[0]) * ow + pads[2]) * c;
            out[dst..dst + w * c].copy_from_slice(&x[src..src + w * c]);
        }
    }
    (out, vec![n, oh, ow, c])
}

/// Source sample positions for half-pixel-centred bilinear resizing along one
/// axis: (lower index, upper index, fraction).
fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f32)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, (src - lo as f64) as f32)
        })
        .collect()
}

/// Bilinear resize of an NHWC buffer, half-pixel centres (not corner aligned),
/// edge-clamped.
pub fn resize_bilinear(x: &[f32], shape: &[usize], out_h: usize, out_w: usize) -> Vec<f32> {
    let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let ys = bilinear_taps(h, out_h);
    let xs = bilinear_taps(w, out_w);
    let mut out = Vec::with_capacity(n * out_h * out_w * c);
    let at = |b: usize, y: usize, xx: usize, ch: usize| x[((b * h + y) * w + xx) * c + ch];
    for b in 0..n {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                for ch in 0..c {
                    let top = lerp(at(b, y0, x0, ch), at(b, y0, x1, ch), fx);
                    let bottom = lerp(at(b, y1, x0, ch), at(b, y1, x1, ch), fx);
                    out.push(lerp(top, bottom, fy));
                }
            }
        }
    }
    out
}

#[inline]
pub fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + (b - a) * t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn avg_pool_2x2() {
        let g = WindowGeometry::new(&[1, 2, 2, 1], [2, 2], [2, 2], Padding::Valid).unwrap();
        assert_eq!(pool(&[1.0, 2.0, 3.0, 4.0], &g, PoolKind::Avg), vec![2.5]);
        assert_eq!(pool(&[1.0, 2.0, 3.0, 4.0], &g, PoolKind::Max), vec![4.0]);
    }

    #[test]
    fn same_avg_pool_ignores_padding() {
        let g = WindowGeometry::new(&[1, 1, 2, 1], [1, 3], [1, 1], Padding::Same).unwrap();
        assert_eq!(pool(&[2.0, 4.0], &g, PoolKind::Avg), vec![3.0, 3.0]);
    }

    #[test]
    fn softmax_of_equal_logits() {
        assert_eq!(softmax(&[0.0, 0.0], 2), vec![0.5, 0.5]);
    }

    #[test]
    fn per_channel_broadcast() {
        let (out, shape) =
            broadcast_binary(&[1.0, 2.0, 3.0, 4.0], &[1, 2, 1, 2], &[10.0, 100.0], &[1, 1, 1, 2], |a, b| a * b)
                .unwrap();
        assert_eq!(shape, vec![1, 2, 1, 2]);
        assert_eq!(out, vec![10.0, 200.0, 30.0, 400.0]);
    }

    #[test]
    fn pad_places_block() {
        let (out, shape) = pad(&[1.0], &[1, 1, 1, 1], [1, 0, 0, 1]);
        assert_eq!(shape, vec![1, 2, 2, 1]);
        assert_eq!(out, vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn requantizer_rounds_half_away_from_zero() {
        let one = QuantParams::new(1.0, 0).unwrap();
        let half = QuantParams::new(0.5, 0).unwrap();
        let r = Requantizer::new(half, one, one, Activation::None);
        assert_eq!(r.apply(1), 1); // 0.5 -> 1
        assert_eq!(r.apply(-1), -1); // -0.5 -> -1
        assert_eq!(r.apply(3), 2); // 1.5 -> 2
        assert_eq!(r.apply(1000), 127);
        let relu = Requantizer::new(half, one, one, Activation::Relu);
        assert_eq!(relu.apply(-7), 0);
    }
}
