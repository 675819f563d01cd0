//! Sinusoidal timestep embedding.

/// Interleaved (sin, cos) embedding of an integer timestep.
///
/// Frequencies are geometrically spaced so the slowest period covers the
/// full range 1..=t_total; `dim` must be even.
pub fn time_embedding(t: usize, dim: usize, t_total: usize) -> Vec<f64> {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even and positive, got {dim}");
    let half = dim / 2;
    let span = (2 * t_total.max(1)) as f64;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let omega = if half == 1 {
            1.0
        } else {
            span.powf(k as f64 / (half - 1) as f64)
        };
        let phase = t as f64 / omega;
        out.push(phase.sin());
        out.push(phase.cos());
    }
    out
}
