//! Fully connected layer.

use crate::init::{he_std, standard_normal};
use ndarray::{Array1, Array2, Axis};
use rand_chacha::ChaCha20Rng;

#[derive(Debug, Clone)]
pub struct Linear {
    /// `(out_dim, in_dim)`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha20Rng) -> Self {
        let std = he_std(in_dim);
        Linear {
            w: Array2::from_shape_fn((out_dim, in_dim), |_| standard_normal(rng) * std),
            b: Array1::zeros(out_dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Linear {
            w: Array2::zeros(self.w.dim()),
            b: Array1::zeros(self.b.len()),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    /// `y = x w^T + b` for a `(batch, in_dim)` input. The caller keeps `x`
    /// around as the backward cache.
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w.t());
        for (mut row, _) in y.rows_mut().into_iter().zip(0..) {
            row += &self.b;
        }
        y
    }

    /// Accumulate parameter gradients into `grads` and return `dx`.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grads: &mut Linear) -> Array2<f64> {
        grads.w += &dy.t().dot(x);
        grads.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w)
    }
}
