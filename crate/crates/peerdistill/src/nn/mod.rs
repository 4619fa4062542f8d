//! Minimal convolutional building blocks with hand-written backward passes.
//!
//! Everything is plain `f64` on `ndarray`, single-threaded and deterministic.
//! Image activations use the layout `(batch, channels, height, width)`.
//! Layers accumulate parameter gradients into a zeroed clone of themselves,
//! which lets a shared stem collect contributions from several branches.

mod conv;
mod linear;
mod pool;

pub use conv::{Conv3x3, ConvCache};
pub use linear::Linear;
pub use pool::{maxpool2_backward, maxpool2_forward, PoolCache};

use ndarray::{Array, Array1, Array2, Array4, Dimension, Zip};

/// Norms this small are treated as zero when normalizing rows.
const NORM_FLOOR: f64 = 1e-12;

pub fn relu<D: Dimension>(x: &Array<f64, D>) -> Array<f64, D> {
    x.mapv(|v| if v > 0.0 { v } else { 0.0 })
}

/// Gradient through the rectifier, masked by the forward output.
pub fn relu_grad<D: Dimension>(y: &Array<f64, D>, dy: &Array<f64, D>) -> Array<f64, D> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(y).for_each(|d, &o| {
        if o <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

/// Global average pooling: mean over the spatial extent of each channel.
pub fn gap_forward(x: &Array4<f64>) -> Array2<f64> {
    let (b, c, h, w) = x.dim();
    let scale = 1.0 / (h * w) as f64;
    let mut out = Array2::zeros((b, c));
    for i in 0..b {
        for ch in 0..c {
            let mut acc = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    acc += x[[i, ch, y, xx]];
                }
            }
            out[[i, ch]] = acc * scale;
        }
    }
    out
}

pub fn gap_backward(h: usize, w: usize, dy: &Array2<f64>) -> Array4<f64> {
    let (b, c) = dy.dim();
    let scale = 1.0 / (h * w) as f64;
    let mut dx = Array4::zeros((b, c, h, w));
    for i in 0..b {
        for ch in 0..c {
            let g = dy[[i, ch]] * scale;
            for y in 0..h {
                for xx in 0..w {
                    dx[[i, ch, y, xx]] = g;
                }
            }
        }
    }
    dx
}

/// Normalize each row onto the unit sphere. Returns the normalized rows and
/// the original norms (needed by the backward pass).
pub fn l2norm_forward(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let (b, d) = x.dim();
    let mut out = Array2::zeros((b, d));
    let mut norms = Array1::zeros(b);
    for i in 0..b {
        let norm = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
        norms[i] = norm;
        for j in 0..d {
            out[[i, j]] = x[[i, j]] / norm;
        }
    }
    (out, norms)
}

/// Backward through row normalization: project out the radial component and
/// rescale, `dx = (dv - (dv . v) v) / norm`.
pub fn l2norm_backward(v: &Array2<f64>, norms: &Array1<f64>, dv: &Array2<f64>) -> Array2<f64> {
    let (b, d) = v.dim();
    let mut dx = Array2::zeros((b, d));
    for i in 0..b {
        let mut radial = 0.0;
        for j in 0..d {
            radial += dv[[i, j]] * v[[i, j]];
        }
        for j in 0..d {
            dx[[i, j]] = (dv[[i, j]] - radial * v[[i, j]]) / norms[i];
        }
    }
    dx
}
