//! Sinusoidal timestep embedding.

use ndarray::Array1;

/// Classic transformer-style sinusoidal features for an integer timestep.
///
/// `dim` must be even: element 2i is `sin(t·ω_i)`, element 2i+1 is
/// `cos(t·ω_i)` with `ω_i = 10000^(−2i/dim)`.
pub fn sinusoidal_embedding(t: usize, dim: usize) -> Array1<f64> {
    assert!(dim % 2 == 0, "embedding dim must be even");
    let mut out = Array1::zeros(dim);
    let half = dim / 2;
    for i in 0..half {
        let omega = 10000f64.powf(-(2.0 * i as f64) / dim as f64);
        let angle = t as f64 * omega;
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    out
}
