//! Discrete diffusion branch over binary lattices.
//!
//! The forward chain flips bits with probability governed by the shared
//! schedule: each step samples Bernoulli((1−β_t)·x_{t−1} + β_t/2). The
//! reverse chain predicts a soft x̂0 probability and realizes the reverse
//! transition as the analytic two-outcome posterior, so strided sampling
//! stays exact via cumulative transition ratios.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::lattice::{assert_same_shape, MaskLattice};
use crate::schedule::NoiseSchedule;

/// Clamp applied inside logarithms of the BCE loss.
pub const LOG_CLAMP: f64 = 1e-7;

/// Lattice of fair coin flips, the terminal prior of the chain.
pub fn sample_prior(height: usize, width: usize, rng: &mut ChaCha8Rng) -> MaskLattice {
    let mut l = MaskLattice::zeros(height, width);
    for v in l.as_mut_slice() {
        *v = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
    }
    l
}

/// Independent Bernoulli draws with per-pixel success probabilities.
pub fn sample_from_prob(prob: &MaskLattice, rng: &mut ChaCha8Rng) -> MaskLattice {
    debug_assert!(prob.is_probability());
    let mut l = MaskLattice::zeros(prob.height(), prob.width());
    for (v, &p) in l.as_mut_slice().iter_mut().zip(prob.as_slice()) {
        *v = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
    }
    l
}

/// One forward corruption step of a binary lattice.
pub fn forward_step(
    x_prev: &MaskLattice,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> MaskLattice {
    assert!(x_prev.is_binary(), "forward_step requires a binary lattice");
    let beta = sched.beta(t);
    let prob = x_prev.map(|x| (1.0 - beta) * x + beta / 2.0);
    sample_from_prob(&prob, rng)
}

/// Closed-form marginal success probability after t steps:
/// ᾱ_t·x0 + (1−ᾱ_t)/2 per pixel.
pub fn forward_marginal_prob(x0: &MaskLattice, t: usize, sched: &NoiseSchedule) -> MaskLattice {
    assert!(x0.is_binary(), "forward_marginal_prob requires a binary lattice");
    let ab = sched.alpha_bar(t);
    x0.map(|x| ab * x + (1.0 - ab) / 2.0)
}

/// Two-outcome Bayes posterior P(x_s = 1 | x_t, x̂0) for a transition with
/// cumulative survival coefficient `a` (product of (1−β) over the skipped
/// steps) and a soft x̂0 prior marginalized to timestep s.
fn posterior_with_coeff(x_t_bit: f64, x0_prob: f64, a: f64, ab_s: f64) -> f64 {
    debug_assert!(x_t_bit == 0.0 || x_t_bit == 1.0);
    // prior on x_s under the soft x̂0: mixture of the two marginals
    let m = ab_s * x0_prob + (1.0 - ab_s) / 2.0;
    // transition likelihood q(x_t = b | x_s = v) = a·[v == b] + (1−a)/2
    let like = |v: f64| {
        if x_t_bit == v {
            (1.0 + a) / 2.0
        } else {
            (1.0 - a) / 2.0
        }
    };
    let num1 = like(1.0) * m;
    let num0 = like(0.0) * (1.0 - m);
    let norm = num1 + num0;
    assert!(norm > 0.0, "degenerate posterior normalizer");
    num1 / norm
}

/// Posterior probability of the previous bit for an adjacent step (t ≥ 2).
pub fn posterior_prob(x_t_bit: f64, x0_prob: f64, t: usize, sched: &NoiseSchedule) -> f64 {
    assert!(t >= 2, "adjacent posterior needs t >= 2, got {t}");
    assert!((0.0..=1.0).contains(&x0_prob));
    posterior_with_coeff(x_t_bit, x0_prob, 1.0 - sched.beta(t), sched.alpha_bar(t - 1))
}

/// Posterior probability across a strided jump t → t_prev (1 ≤ t_prev < t),
/// using the cumulative transition ᾱ_t / ᾱ_{t_prev}.
pub fn posterior_prob_strided(
    x_t_bit: f64,
    x0_prob: f64,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> f64 {
    assert!(t_prev >= 1 && t_prev < t, "strided posterior needs 1 <= t_prev < t");
    assert!((0.0..=1.0).contains(&x0_prob));
    let a = sched.alpha_bar(t) / sched.alpha_bar(t_prev);
    posterior_with_coeff(x_t_bit, x0_prob, a, sched.alpha_bar(t_prev))
}

/// One reverse step. For t ≥ 2 each pixel is sampled from the adjacent
/// posterior; at t = 1 the prediction is decoded by a hard 0.5 threshold.
pub fn reverse_step(
    x_t: &MaskLattice,
    x0_prob_hat: &MaskLattice,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> MaskLattice {
    assert_same_shape(x_t, x0_prob_hat);
    assert!(x_t.is_binary(), "reverse_step requires a binary state");
    if t == 1 {
        return crate::fusion::binarize(x0_prob_hat, 0.5);
    }
    let prob = x_t.zip_map(x0_prob_hat, |b, p0| posterior_prob(b, p0, t, sched));
    sample_from_prob(&prob, rng)
}

/// Strided reverse step t → t_prev; `t_prev = 0` decodes by threshold.
pub fn reverse_step_strided(
    x_t: &MaskLattice,
    x0_prob_hat: &MaskLattice,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> MaskLattice {
    assert_same_shape(x_t, x0_prob_hat);
    assert!(x_t.is_binary(), "reverse_step_strided requires a binary state");
    assert!(t_prev < t, "strided step must move backward");
    if t_prev == 0 {
        return crate::fusion::binarize(x0_prob_hat, 0.5);
    }
    let prob =
        x_t.zip_map(x0_prob_hat, |b, p0| posterior_prob_strided(b, p0, t, t_prev, sched));
    sample_from_prob(&prob, rng)
}

/// Binary cross entropy between the mask and predicted probabilities,
/// averaged over pixels, with predictions clamped away from {0, 1}.
pub fn bce_loss(x0: &MaskLattice, x0_prob_hat: &MaskLattice) -> f64 {
    assert_same_shape(x0, x0_prob_hat);
    let n = x0.len() as f64;
    x0.as_slice()
        .iter()
        .zip(x0_prob_hat.as_slice())
        .map(|(&y, &p)| {
            let p = p.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}

/// KL divergence of per-pixel Bernoulli(p) to the fair coin, averaged over
/// pixels: p·ln(2p) + (1−p)·ln(2(1−p)), with 0·ln 0 := 0.
pub fn kl_prior(p: &MaskLattice) -> f64 {
    debug_assert!(p.is_probability());
    let term = |q: f64| if q == 0.0 { 0.0 } else { q * (2.0 * q).ln() };
    p.as_slice().iter().map(|&q| term(q) + term(1.0 - q)).sum::<f64>() / p.len() as f64
}
