//! Dense-layer kernels.
//!
//! Every output element is computed by the same fixed sequence of
//! floating-point operations no matter how rows are batched or how many
//! threads run, so a single-row forward pass matches the same row inside a
//! large batch bit for bit, and results do not depend on the worker count.

use rayon::prelude::*;

/// Below this many multiply-adds a kernel runs on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[r, j] = bias[j] + x[r, :] · weight[j, :]`, with `weight` stored
/// `out_dim × in_dim` row-major.
pub(crate) fn affine_forward(
    x: &[f64],
    in_dim: usize,
    weight: &[f64],
    bias: &[f64],
    out: &mut [f64],
) {
    let out_dim = bias.len();
    debug_assert_eq!(weight.len(), out_dim * in_dim);
    let rows = x.len() / in_dim;
    debug_assert_eq!(out.len(), rows * out_dim);
    let row = |(xr, or): (&[f64], &mut [f64])| {
        for (j, o) in or.iter_mut().enumerate() {
            *o = bias[j] + dot(xr, &weight[j * in_dim..(j + 1) * in_dim]);
        }
    };
    if rows * in_dim * out_dim >= PAR_THRESHOLD && rows > 1 {
        x.par_chunks(in_dim)
            .zip(out.par_chunks_mut(out_dim))
            .for_each(row);
    } else {
        x.chunks(in_dim).zip(out.chunks_mut(out_dim)).for_each(row);
    }
}

/// Gradient of an affine layer.
///
/// Given `delta[r, j] = dL/dout[r, j]`, overwrites `d_weight`, `d_bias` and
/// (when requested) `d_x`. Sums over rows run in row order.
#[allow(clippy::too_many_arguments)]
pub(crate) fn affine_backward(
    x: &[f64],
    in_dim: usize,
    weight: &[f64],
    delta: &[f64],
    out_dim: usize,
    d_weight: &mut [f64],
    d_bias: &mut [f64],
    d_x: Option<&mut [f64]>,
) {
    let rows = delta.len() / out_dim;
    let big = rows * in_dim * out_dim >= PAR_THRESHOLD;

    let weight_row = |(j, dw): (usize, &mut [f64])| {
        dw.fill(0.0);
        for r in 0..rows {
            let g = delta[r * out_dim + j];
            if g != 0.0 {
                axpy(g, &x[r * in_dim..(r + 1) * in_dim], dw);
            }
        }
    };
    if big && out_dim > 1 {
        d_weight
            .par_chunks_mut(in_dim)
            .enumerate()
            .for_each(weight_row);
    } else {
        d_weight.chunks_mut(in_dim).enumerate().for_each(weight_row);
    }

    for (j, db) in d_bias.iter_mut().enumerate() {
        let mut s = 0.0;
        for r in 0..rows {
            s += delta[r * out_dim + j];
        }
        *db = s;
    }

    if let Some(d_x) = d_x {
        let input_row = |(dr, dxr): (&[f64], &mut [f64])| {
            dxr.fill(0.0);
            for (j, &g) in dr.iter().enumerate() {
                if g != 0.0 {
                    axpy(g, &weight[j * in_dim..(j + 1) * in_dim], dxr);
                }
            }
        };
        if big && rows > 1 {
            delta
                .par_chunks(out_dim)
                .zip(d_x.par_chunks_mut(in_dim))
                .for_each(input_row);
        } else {
            delta
                .chunks(out_dim)
                .zip(d_x.chunks_mut(in_dim))
                .for_each(input_row);
        }
    }
}
