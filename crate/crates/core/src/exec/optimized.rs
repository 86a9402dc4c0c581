//! Fast kernels: im2col + cache-blocked GEMM for convolutions and dense
//! layers, channel-vectorized depthwise convolution, and integer i8 variants.
//!
//! Every output element accumulates its products in the same k-order as the
//! reference kernels, so f32 results agree with them up to the sign of zero.

use std::borrow::Cow;
use std::ops::{AddAssign, Mul};

use crate::graph::Activation;

use super::kernels::{Requantizer, WindowGeometry};
use super::reference::QOperand;

const N_BLOCK: usize = 256;
const K_BLOCK: usize = 128;
#[cfg(feature = "parallel")]
const ROWS_PER_TASK: usize = 32;

/// Unfold input patches into rows of `[k_h * k_w * channels]`, ordered
/// (ky, kx, channel). Out-of-image taps are `fill`.
fn im2col<T: Copy, U: Copy>(x: &[T], g: &WindowGeometry, fill: U, map: impl Fn(T) -> U) -> Vec<U> {
    let c = g.channels;
    let k = g.k_h * g.k_w * c;
    let mut cols = Vec::with_capacity(g.out_pixels() * k);
    for n in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                for ky in 0..g.k_h {
                    let iy = g.in_y(oy, ky);
                    for kx in 0..g.k_w {
                        match (iy, g.in_x(ox, kx)) {
                            (Some(iy), Some(ix)) => {
                                let base = ((n * g.in_h + iy) * g.in_w + ix) * c;
                                cols.extend(x[base..base + c].iter().map(|&v| map(v)));
                            }
                            _ => cols.extend(std::iter::repeat_n(fill, c)),
                        }
                    }
                }
            }
        }
    }
    cols
}

fn is_pointwise(g: &WindowGeometry) -> bool {
    g.k_h == 1 && g.k_w == 1 && g.stride_h == 1 && g.stride_w == 1 && g.pad_top == 0 && g.pad_left == 0
}

/// `c += a * b` for a row-major `rows x k` by `k x n` product. Blocking is over
/// n and k; each element still sees k in increasing order.
fn gemm_rows<T>(a: &[T], b: &[T], c: &mut [T], k: usize, n: usize)
where
    T: Copy + Mul<Output = T> + AddAssign,
{
    let rows = c.len() / n;
    for n0 in (0..n).step_by(N_BLOCK) {
        let n1 = (n0 + N_BLOCK).min(n);
        for k0 in (0..k).step_by(K_BLOCK) {
            let k1 = (k0 + K_BLOCK).min(k);
            for i in 0..rows {
                let crow = &mut c[i * n + n0..i * n + n1];
                let arow = &a[i * k..(i + 1) * k];
                for kk in k0..k1 {
                    let av = arow[kk];
                    let brow = &b[kk * n + n0..kk * n + n1];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
    }
}

fn gemm<T>(a: &[T], b: &[T], c: &mut [T], k: usize, n: usize, parallel: bool)
where
    T: Copy + Mul<Output = T> + AddAssign + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        c.par_chunks_mut(ROWS_PER_TASK * n)
            .zip(a.par_chunks(ROWS_PER_TASK * k))
            .for_each(|(cc, aa)| gemm_rows(aa, b, cc, k, n));
        return;
    }
    let _ = parallel;
    gemm_rows(a, b, c, k, n);
}

fn epilogue(out: &mut [f32], bias: Option<&[f32]>, n: usize, act: Activation) {
    for row in out.chunks_exact_mut(n) {
        if let Some(b) = bias {
            row.iter_mut().zip(b).for_each(|(v, &bb)| *v += bb);
        }
        if act != Activation::None {
            row.iter_mut().for_each(|v| *v = act.apply(*v));
        }
    }
}

pub fn conv2d(
    x: &[f32],
    w: &[f32],
    bias: Option<&[f32]>,
    g: &WindowGeometry,
    out_c: usize,
    act: Activation,
    parallel: bool,
) -> Vec<f32> {
    let k = g.k_h * g.k_w * g.channels;
    let cols: Cow<[f32]> = if is_pointwise(g) {
        Cow::Borrowed(x)
    } else {
        Cow::Owned(im2col(x, g, 0.0f32, |v| v))
    };
    let mut out = vec![0.0f32; g.out_pixels() * out_c];
    gemm(&cols, w, &mut out, k, out_c, parallel);
    epilogue(&mut out, bias, out_c, act);
    out
}

fn depthwise_rows(
    x: &[f32],
    w: &[f32],
    bias: Option<&[f32]>,
    g: &WindowGeometry,
    act: Activation,
    first_row: usize,
    out: &mut [f32],
) {
    let c = g.channels;
    let row_len = g.out_w * c;
    for (r, orow) in out.chunks_exact_mut(row_len).enumerate() {
        let row = first_row + r;
        let (n, oy) = (row / g.out_h, row % g.out_h);
        for ox in 0..g.out_w {
            let acc = &mut orow[ox * c..(ox + 1) * c];
            for ky in 0..g.k_h {
                let Some(iy) = g.in_y(oy, ky) else { continue };
                for kx in 0..g.k_w {
                    let Some(ix) = g.in_x(ox, kx) else { continue };
                    let base = ((n * g.in_h + iy) * g.in_w + ix) * c;
                    let wr = &w[(ky * g.k_w + kx) * c..(ky * g.k_w + kx + 1) * c];
                    for ((a, &xv), &wv) in acc.iter_mut().zip(&x[base..base + c]).zip(wr) {
                        *a += xv * wv;
                    }
                }
            }
            if let Some(b) = bias {
                acc.iter_mut().zip(b).for_each(|(v, &bb)| *v += bb);
            }
            if act != Activation::None {
                acc.iter_mut().for_each(|v| *v = act.apply(*v));
            }
        }
    }
}

pub fn depthwise(
    x: &[f32],
    w: &[f32],
    bias: Option<&[f32]>,
    g: &WindowGeometry,
    act: Activation,
    parallel: bool,
) -> Vec<f32> {
    let row_len = g.out_w * g.channels;
    let mut out = vec![0.0f32; g.out_pixels() * g.channels];
    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        out.par_chunks_mut(row_len * 8)
            .enumerate()
            .for_each(|(i, chunk)| depthwise_rows(x, w, bias, g, act, i * 8, chunk));
        return out;
    }
    let _ = (parallel, row_len);
    depthwise_rows(x, w, bias, g, act, 0, &mut out);
    out
}

pub fn dense(
    x: &[f32],
    w: &[f32],
    bias: Option<&[f32]>,
    batch: usize,
    out: usize,
    act: Activation,
    parallel: bool,
) -> Vec<f32> {
    let features = x.len() / batch;
    let mut y = vec![0.0f32; batch * out];
    gemm(x, w, &mut y, features, out, parallel);
    epilogue(&mut y, bias, out, act);
    y
}

fn widen(w: QOperand<'_>) -> Vec<i32> {
    w.data.iter().map(|&v| i32::from(v) - w.zero_point).collect()
}

fn requantize_rows(acc: &[i32], bias: Option<&[i32]>, n: usize, rq: &Requantizer) -> Vec<i8> {
    acc.chunks_exact(n)
        .flat_map(|row| {
            row.iter()
                .enumerate()
                .map(move |(j, &a)| rq.apply(a + bias.map_or(0, |b| b[j])))
        })
        .collect()
}

pub fn conv2d_i8(
    x: QOperand<'_>,
    w: QOperand<'_>,
    bias: Option<&[i32]>,
    g: &WindowGeometry,
    out_c: usize,
    rq: &Requantizer,
    parallel: bool,
) -> Vec<i8> {
    let k = g.k_h * g.k_w * g.channels;
    let zx = x.zero_point;
    let cols = im2col(x.data, g, 0i32, |v| i32::from(v) - zx);
    let wk = widen(w);
    let mut acc = vec![0i32; g.out_pixels() * out_c];
    gemm(&cols, &wk, &mut acc, k, out_c, parallel);
    requantize_rows(&acc, bias, out_c, rq)
}

pub fn depthwise_i8(x: QOperand<'_>, w: QOperand<'_>, bias: Option<&[i32]>, g: &WindowGeometry, rq: &Requantizer) -> Vec<i8> {
    let c = g.channels;
    let wk = widen(w);
    let mut acc = vec![0i32; g.out_pixels() * c];
    for (p, a) in acc.chunks_exact_mut(c).enumerate() {
        let (n, rest) = (p / (g.out_h * g.out_w), p % (g.out_h * g.out_w));
        let (oy, ox) = (rest / g.out_w, rest % g.out_w);
        for ky in 0..g.k_h {
            let Some(iy) = g.in_y(oy, ky) else { continue };
            for kx in 0..g.k_w {
                let Some(ix) = g.in_x(ox, kx) else { continue };
                let base = ((n * g.in_h + iy) * g.in_w + ix) * c;
                let wr = &wk[(ky * g.k_w + kx) * c..(ky * g.k_w + kx + 1) * c];
                for ((av, &xv), &wv) in a.iter_mut().zip(&x.data[base..base + c]).zip(wr) {
                    *av += (i32::from(xv) - x.zero_point) * wv;
                }
            }
        }
    }
    requantize_rows(&acc, bias, c, rq)
}

pub fn dense_i8(
    x: QOperand<'_>,
    w: QOperand<'_>,
    bias: Option<&[i32]>,
    batch: usize,
    out: usize,
    rq: &Requantizer,
    parallel: bool,
) -> Vec<i8> {
    let features = x.data.len() / batch;
    let xa: Vec<i32> = x.data.iter().map(|&v| i32::from(v) - x.zero_point).collect();
    let wk = widen(w);
    let mut acc = vec![0i32; batch * out];
    gemm(&xa, &wk, &mut acc, features, out, parallel);
    requantize_rows(&acc, bias, out, rq)
}
