//! 3x3 convolution, stride 1, zero padding 1 (shape preserving).

use crate::error::{Error, Result};
use crate::init::{he_std, standard_normal};
use ndarray::{Array1, Array2, Array4, ArrayView3, Axis};
use rand_chacha::ChaCha20Rng;

/// Weights are stored as a `(c_out, c_in * 9)` matrix so the forward pass is
/// one matrix product against the unrolled input patches.
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    c_in: usize,
    c_out: usize,
}

/// Unrolled input patches kept for the backward pass, one matrix per image.
pub struct ConvCache {
    cols: Vec<Array2<f64>>,
    h: usize,
    w: usize,
}

impl Conv3x3 {
    pub fn new(c_in: usize, c_out: usize, rng: &mut ChaCha20Rng) -> Self {
        let std = he_std(c_in * 9);
        let w = Array2::from_shape_fn((c_out, c_in * 9), |_| standard_normal(rng) * std);
        Conv3x3 {
            w,
            b: Array1::zeros(c_out),
            c_in,
            c_out,
        }
    }

    /// Same shapes, all parameters zero; the gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Conv3x3 {
            w: Array2::zeros(self.w.dim()),
            b: Array1::zeros(self.b.len()),
            c_in: self.c_in,
            c_out: self.c_out,
        }
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn forward(&self, x: &Array4<f64>) -> Result<(Array4<f64>, ConvCache)> {
        let (batch, c_in, h, w) = x.dim();
        if c_in != self.c_in {
            return Err(Error::invalid(format!(
                "conv expects {} input channels, got {c_in}",
                self.c_in
            )));
        }
        let mut out = Array4::zeros((batch, self.c_out, h, w));
        let mut cols = Vec::with_capacity(batch);
        for i in 0..batch {
            let col = im2col(x.index_axis(Axis(0), i), h, w);
            let mut y = self.w.dot(&col);
            for (mut row, &bias) in y.rows_mut().into_iter().zip(self.b.iter()) {
                row += bias;
            }
            for c in 0..self.c_out {
                for yy in 0..h {
                    for xx in 0..w {
                        out[[i, c, yy, xx]] = y[[c, yy * w + xx]];
                    }
                }
            }
            cols.push(col);
        }
        Ok((out, ConvCache { cols, h, w }))
    }

    /// Accumulate parameter gradients into `grads` and return the input
    /// gradient.
    pub fn backward(
        &self,
        cache: &ConvCache,
        dy: &Array4<f64>,
        grads: &mut Conv3x3,
    ) -> Array4<f64> {
        let (batch, c_out, h, w) = dy.dim();
        debug_assert_eq!(c_out, self.c_out);
        debug_assert_eq!((h, w), (cache.h, cache.w));
        let hw = h * w;
        let mut dx = Array4::zeros((batch, self.c_in, h, w));
        for i in 0..batch {
            let mut dy_mat = Array2::zeros((c_out, hw));
            for c in 0..c_out {
                for yy in 0..h {
                    for xx in 0..w {
                        dy_mat[[c, yy * w + xx]] = dy[[i, c, yy, xx]];
                    }
                }
            }
            grads.w += &dy_mat.dot(&cache.cols[i].t());
            grads.b += &dy_mat.sum_axis(Axis(1));
            let dcol = self.w.t().dot(&dy_mat);
            col2im_into(&dcol, self.c_in, h, w, &mut dx, i);
        }
        dx
    }
}

/// Unroll 3x3 neighborhoods (zero padded) into a `(c_in * 9, h * w)` matrix.
/// Row `c * 9 + k` holds channel `c` at kernel offset `k`, offsets scanned
/// row-major from the top-left of the window.
fn im2col(x: ArrayView3<'_, f64>, h: usize, w: usize) -> Array2<f64> {
    let c_in = x.dim().0;
    let mut col = Array2::zeros((c_in * 9, h * w));
    for c in 0..c_in {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = c * 9 + ky * 3 + kx;
                for yy in 0..h {
                    let sy = yy as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        col[[row, yy * w + xx]] = x[[c, sy as usize, sx as usize]];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add the unrolled gradient back onto image `i` of `dx`.
fn col2im_into(
    dcol: &Array2<f64>,
    c_in: usize,
    h: usize,
    w: usize,
    dx: &mut Array4<f64>,
    i: usize,
) {
    for c in 0..c_in {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = c * 9 + ky * 3 + kx;
                for yy in 0..h {
                    let sy = yy as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        dx[[i, c, sy as usize, sx as usize]] += dcol[[row, yy * w + xx]];
                    }
                }
            }
        }
    }
}
