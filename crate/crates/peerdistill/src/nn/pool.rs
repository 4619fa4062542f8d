//! 2x2 max pooling with stride 2.

use crate::error::{Error, Result};
use ndarray::Array4;

/// Winning position within each 2x2 window (0..4, row-major), kept so the
/// backward pass can route gradients.
pub struct PoolCache {
    argmax: Array4<u8>,
    in_h: usize,
    in_w: usize,
}

/// Halve the spatial extent, taking the max of each 2x2 window. Ties go to
/// the first position in row-major scan order.
pub fn maxpool2_forward(x: &Array4<f64>) -> Result<(Array4<f64>, PoolCache)> {
    let (b, c, h, w) = x.dim();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!(
            "pooling needs even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array4::zeros((b, c, oh, ow));
    let mut argmax = Array4::zeros((b, c, oh, ow));
    for i in 0..b {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_k = 0u8;
                    for k in 0..4u8 {
                        let yy = oy * 2 + (k / 2) as usize;
                        let xx = ox * 2 + (k % 2) as usize;
                        let v = x[[i, ch, yy, xx]];
                        if v > best {
                            best = v;
                            best_k = k;
                        }
                    }
                    out[[i, ch, oy, ox]] = best;
                    argmax[[i, ch, oy, ox]] = best_k;
                }
            }
        }
    }
    Ok((
        out,
        PoolCache {
            argmax,
            in_h: h,
            in_w: w,
        },
    ))
}

pub fn maxpool2_backward(cache: &PoolCache, dy: &Array4<f64>) -> Array4<f64> {
    let (b, c, oh, ow) = dy.dim();
    let mut dx = Array4::zeros((b, c, cache.in_h, cache.in_w));
    for i in 0..b {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let k = cache.argmax[[i, ch, oy, ox]];
                    let yy = oy * 2 + (k / 2) as usize;
                    let xx = ox * 2 + (k % 2) as usize;
                    dx[[i, ch, yy, xx]] += dy[[i, ch, oy, ox]];
                }
            }
        }
    }
    dx
}
