//! Random initialization helpers shared by layers and memory banks.

use rand::Rng;

/// One draw from the standard normal via Box-Muller. Uses only the uniform
/// source so the stream stays identical across platforms.
pub(crate) fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

/// Scale for rectifier-friendly weight init: sqrt(2 / fan_in).
pub(crate) fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}
