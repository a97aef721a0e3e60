//! Minimal dense/conv primitives with hand-written backward passes.
//!
//! Everything is generic over the scalar so that training runs in f32 while
//! gradient-check tests instantiate the exact same code in f64.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;
use core::iter::Sum;
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

pub trait Scalar:
    Float + AddAssign + SubAssign + MulAssign + DivAssign + Sum + Debug + Default + Send + Sync + 'static
{
}

impl<T> Scalar for T where
    T: Float + AddAssign + SubAssign + MulAssign + DivAssign + Sum + Debug + Default + Send + Sync + 'static
{
}

/// Shorthand for lossy constant conversion.
#[inline]
pub fn sc<F: Scalar>(x: f64) -> F {
    F::from(x).expect("scalar conversion")
}

pub const LN_EPS: f64 = 1e-5;

/// 3x3 convolution, stride 2, padding 1. `input` is [ic][h][w] channel-major,
/// output [oc][h/2][w/2]. Weights are [oc][ic][3][3], bias [oc].
pub fn conv3x3s2_fwd<F: Scalar>(
    input: &[F],
    ic: usize,
    hw: usize,
    w: &[F],
    b: &[F],
    oc: usize,
    out: &mut [F],
) {
    let ohw = hw / 2;
    debug_assert_eq!(input.len(), ic * hw * hw);
    debug_assert_eq!(out.len(), oc * ohw * ohw);
    for o in 0..oc {
        let wo = &w[o * ic * 9..(o + 1) * ic * 9];
        let out_plane = &mut out[o * ohw * ohw..(o + 1) * ohw * ohw];
        for v in out_plane.iter_mut() {
            *v = b[o];
        }
        for i in 0..ic {
            let wk = &wo[i * 9..i * 9 + 9];
            let in_plane = &input[i * hw * hw..(i + 1) * hw * hw];
            for oy in 0..ohw {
                let iy0 = 2 * oy; // input rows iy0-1 .. iy0+1
                for ky in 0..3usize {
                    let iy = (iy0 + ky).wrapping_sub(1);
                    if iy >= hw {
                        continue;
                    }
                    let row = &in_plane[iy * hw..(iy + 1) * hw];
                    let wrow = &wk[ky * 3..ky * 3 + 3];
                    let orow = &mut out_plane[oy * ohw..(oy + 1) * ohw];
                    for ox in 0..ohw {
                        let ix0 = 2 * ox;
                        let mut acc = F::zero();
                        for kx in 0..3usize {
                            let ix = (ix0 + kx).wrapping_sub(1);
                            if ix < hw {
                                acc += wrow[kx] * row[ix];
                            }
                        }
                        orow[ox] += acc;
                    }
                }
            }
        }
    }
}

/// Backward of `conv3x3s2_fwd`. Accumulates into `dw`/`db`, overwrites `dinput`.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3s2_bwd<F: Scalar>(
    input: &[F],
    ic: usize,
    hw: usize,
    w: &[F],
    oc: usize,
    dout: &[F],
    dw: &mut [F],
    db: &mut [F],
    dinput: &mut [F],
) {
    let ohw = hw / 2;
    for v in dinput.iter_mut() {
        *v = F::zero();
    }
    for o in 0..oc {
        let dout_plane = &dout[o * ohw * ohw..(o + 1) * ohw * ohw];
        for &g in dout_plane.iter() {
            db[o] += g;
        }
        for i in 0..ic {
            let wk = &w[(o * ic + i) * 9..(o * ic + i) * 9 + 9];
            let dwk_base = (o * ic + i) * 9;
            let in_plane = &input[i * hw * hw..(i + 1) * hw * hw];
            let din_plane = &mut dinput[i * hw * hw..(i + 1) * hw * hw];
            for oy in 0..ohw {
                let iy0 = 2 * oy;
                for ky in 0..3usize {
                    let iy = (iy0 + ky).wrapping_sub(1);
                    if iy >= hw {
                        continue;
                    }
                    for ox in 0..ohw {
                        let g = dout_plane[oy * ohw + ox];
                        if g == F::zero() {
                            continue;
                        }
                        let ix0 = 2 * ox;
                        for kx in 0..3usize {
                            let ix = (ix0 + kx).wrapping_sub(1);
                            if ix < hw {
                                dw[dwk_base + ky * 3 + kx] += g * in_plane[iy * hw + ix];
                                din_plane[iy * hw + ix] += g * wk[ky * 3 + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cache of layer-norm statistics needed for the backward pass.
#[derive(Debug, Clone)]
pub struct LnCache<F> {
    pub inv_std: F,
    pub normalized: Vec<F>,
}

/// Layer normalization over the whole slice, with one gain/bias per channel
/// (`channels` groups of equal size). For plain vectors use
/// `channels == x.len()` to get a per-feature affine.
pub fn layernorm_fwd<F: Scalar>(x: &[F], gain: &[F], bias: &[F], channels: usize, out: &mut [F]) -> LnCache<F> {
    let n = x.len();
    let group = n / channels;
    let nf = sc::<F>(n as f64);
    let mut mean = F::zero();
    for &v in x {
        mean += v;
    }
    mean /= nf;
    let mut var = F::zero();
    for &v in x {
        let d = v - mean;
        var += d * d;
    }
    var /= nf;
    let inv_std = (var + sc::<F>(LN_EPS)).sqrt().recip();
    let mut normalized = vec![F::zero(); n];
    for c in 0..channels {
        for j in 0..group {
            let idx = c * group + j;
            let xh = (x[idx] - mean) * inv_std;
            normalized[idx] = xh;
            out[idx] = gain[c] * xh + bias[c];
        }
    }
    LnCache { inv_std, normalized }
}

/// Backward of `layernorm_fwd`. Accumulates into `dgain`/`dbias`, overwrites `dx`.
pub fn layernorm_bwd<F: Scalar>(
    cache: &LnCache<F>,
    gain: &[F],
    channels: usize,
    dout: &[F],
    dgain: &mut [F],
    dbias: &mut [F],
    dx: &mut [F],
) {
    let n = dout.len();
    let group = n / channels;
    let nf = sc::<F>(n as f64);
    // dxh and its two reductions over the whole normalization group
    let mut sum_dxh = F::zero();
    let mut sum_dxh_xh = F::zero();
    for c in 0..channels {
        for j in 0..group {
            let idx = c * group + j;
            let xh = cache.normalized[idx];
            let dy = dout[idx];
            dgain[c] += dy * xh;
            dbias[c] += dy;
            let dxh = dy * gain[c];
            dx[idx] = dxh; // stash
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh;
        }
    }
    let mean_dxh = sum_dxh / nf;
    let mean_dxh_xh = sum_dxh_xh / nf;
    for idx in 0..n {
        let xh = cache.normalized[idx];
        dx[idx] = cache.inv_std * (dx[idx] - mean_dxh - xh * mean_dxh_xh);
    }
}

/// y = W x + b with W stored row-major [rows][cols].
pub fn linear_fwd<F: Scalar>(x: &[F], w: &[F], b: &[F], rows: usize, cols: usize, out: &mut [F]) {
    debug_assert_eq!(x.len(), cols);
    for r in 0..rows {
        let wr = &w[r * cols..(r + 1) * cols];
        let mut acc = b[r];
        for c in 0..cols {
            acc += wr[c] * x[c];
        }
        out[r] = acc;
    }
}

/// Backward of `linear_fwd`. Accumulates into `dw`/`db`, overwrites `dx`.
pub fn linear_bwd<F: Scalar>(
    x: &[F],
    w: &[F],
    rows: usize,
    cols: usize,
    dout: &[F],
    dw: &mut [F],
    db: &mut [F],
    dx: &mut [F],
) {
    for v in dx.iter_mut() {
        *v = F::zero();
    }
    for r in 0..rows {
        let g = dout[r];
        db[r] += g;
        let wr = &w[r * cols..(r + 1) * cols];
        let dwr = &mut dw[r * cols..(r + 1) * cols];
        for c in 0..cols {
            dwr[c] += g * x[c];
            dx[c] += g * wr[c];
        }
    }
}

pub fn relu_fwd<F: Scalar>(x: &mut [F]) {
    for v in x.iter_mut() {
        if *v < F::zero() {
            *v = F::zero();
        }
    }
}

/// Mask the upstream gradient by the forward *output* (post-ReLU) sign.
pub fn relu_bwd<F: Scalar>(out: &[F], dgrad: &mut [F]) {
    for (v, g) in out.iter().zip(dgrad.iter_mut()) {
        if *v <= F::zero() {
            *g = F::zero();
        }
    }
}

/// Standard normal via Box-Muller; consumes two uniforms per pair.
pub fn normal_sample<F: Scalar, R: rand::Rng>(rng: &mut R) -> F {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    sc::<F>((-2.0 * u1.ln()).sqrt() * (core::f64::consts::TAU * u2).cos())
}
