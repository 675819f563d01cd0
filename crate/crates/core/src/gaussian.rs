//! Continuous diffusion branch: forward corruption, reverse denoising from
//! predicted noise, deterministic strided sampling, and the branch losses.
//!
//! States live on `MaskLattice`; all functions are pure, with randomness
//! entering only through explicitly passed noise lattices or generators.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::lattice::{assert_same_shape, MaskLattice};
use crate::schedule::NoiseSchedule;

/// Reverse-transition parameters: per-pixel mean with a shared scalar
/// variance (the diagonal covariance is constant across pixels here).
#[derive(Debug, Clone)]
pub struct ReverseParams {
    pub mean: MaskLattice,
    pub variance: f64,
}

/// Lattice of independent standard-normal draws.
pub fn sample_standard_normal(height: usize, width: usize, rng: &mut ChaCha8Rng) -> MaskLattice {
    let mut l = MaskLattice::zeros(height, width);
    for v in l.as_mut_slice() {
        *v = rng.sample(StandardNormal);
    }
    l
}

/// Closed-form forward marginal: √(ᾱ_t)·x0 + √(1−ᾱ_t)·noise.
pub fn forward_marginal(
    x0: &MaskLattice,
    t: usize,
    sched: &NoiseSchedule,
    noise: &MaskLattice,
) -> MaskLattice {
    assert_same_shape(x0, noise);
    let ab = sched.alpha_bar(t);
    let (signal, spread) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(noise, |x, n| signal * x + spread * n)
}

/// Single forward step: √(1−β_t)·x_{t−1} + √(β_t)·noise.
pub fn forward_step(
    x_prev: &MaskLattice,
    t: usize,
    sched: &NoiseSchedule,
    noise: &MaskLattice,
) -> MaskLattice {
    assert_same_shape(x_prev, noise);
    let beta = sched.beta(t);
    let (keep, spread) = ((1.0 - beta).sqrt(), beta.sqrt());
    x_prev.zip_map(noise, |x, n| keep * x + spread * n)
}

/// Reverse-transition parameters from a predicted noise lattice, using the
/// standard noise-to-posterior mapping with variance fixed to
/// β̃_t = β_t (1−ᾱ_{t−1}) / (1−ᾱ_t), zero at t=1.
pub fn posterior_from_eps(
    x_t: &MaskLattice,
    eps_hat: &MaskLattice,
    t: usize,
    sched: &NoiseSchedule,
) -> ReverseParams {
    assert_same_shape(x_t, eps_hat);
    let beta = sched.beta(t);
    let ab = sched.alpha_bar(t);
    let inv_sqrt_alpha = 1.0 / (1.0 - beta).sqrt();
    let eps_coef = beta / (1.0 - ab).sqrt();
    let mean = x_t.zip_map(eps_hat, |x, e| inv_sqrt_alpha * (x - eps_coef * e));
    ReverseParams { mean, variance: sched.posterior_variance(t) }
}

/// One ancestral reverse step: posterior mean plus √variance scaled noise.
/// At t=1 the variance is zero and the step is deterministic.
pub fn ancestral_step(
    x_t: &MaskLattice,
    eps_hat: &MaskLattice,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> MaskLattice {
    let params = posterior_from_eps(x_t, eps_hat, t, sched);
    if params.variance == 0.0 {
        return params.mean;
    }
    let sigma = params.variance.sqrt();
    let noise = sample_standard_normal(x_t.height(), x_t.width(), rng);
    params.mean.zip_map(&noise, |m, n| m + sigma * n)
}

/// Deterministic strided reverse step.
///
/// Reconstructs x̂0 = (x_t − √(1−ᾱ_t)·ε̂) / √(ᾱ_t) and re-noises it to
/// timestep `t_next`; with `t_next = 0` the reconstruction is returned
/// directly.
pub fn ddim_step(
    x_t: &MaskLattice,
    eps_hat: &MaskLattice,
    t: usize,
    t_next: usize,
    sched: &NoiseSchedule,
) -> MaskLattice {
    assert_same_shape(x_t, eps_hat);
    assert!(t_next < t, "ddim step must move backward: t_next {t_next} >= t {t}");
    let ab = sched.alpha_bar(t);
    let (sig, spr) = (ab.sqrt(), (1.0 - ab).sqrt());
    let x0_hat = x_t.zip_map(eps_hat, |x, e| (x - spr * e) / sig);
    if t_next == 0 {
        return x0_hat;
    }
    let ab_next = sched.alpha_bar(t_next);
    let (sig_n, spr_n) = (ab_next.sqrt(), (1.0 - ab_next).sqrt());
    x0_hat.zip_map(eps_hat, |x0, e| sig_n * x0 + spr_n * e)
}

/// Mean squared error between true and predicted noise.
pub fn eps_loss(eps_true: &MaskLattice, eps_hat: &MaskLattice) -> f64 {
    assert_same_shape(eps_true, eps_hat);
    let n = eps_true.len() as f64;
    eps_true
        .as_slice()
        .iter()
        .zip(eps_hat.as_slice())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        / n
}

/// KL divergence of N(mean, variance·I) to the standard normal, averaged
/// over pixels: ½(σ² + μ² − 1 − ln σ²).
pub fn kl_prior(params: &ReverseParams) -> f64 {
    let s2 = params.variance;
    assert!(s2 > 0.0, "kl_prior requires positive variance, got {s2}");
    let base = 0.5 * (s2 - 1.0 - s2.ln());
    let mean_sq = params.mean.as_slice().iter().map(|&m| m * m).sum::<f64>()
        / params.mean.len() as f64;
    base + 0.5 * mean_sq
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, STREAM_DATA};

    fn sched() -> NoiseSchedule {
        NoiseSchedule::linear(100, 1e-3, 0.2).unwrap()
    }

    #[test]
    fn marginal_with_zero_noise_scales_x0() {
        let s = sched();
        let x0 = MaskLattice::from_vec(2, 2, vec![1.0, 0.0, 1.0, 1.0]);
        let zero = MaskLattice::zeros(2, 2);
        for t in [1, 17, 100] {
            let out = forward_marginal(&x0, t, &s, &zero);
            let scale = s.alpha_bar(t).sqrt();
            for (o, x) in out.as_slice().iter().zip(x0.as_slice()) {
                assert!((o - scale * x).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn marginal_at_t1_matches_single_step_algebra() {
        let s = sched();
        let x0 = MaskLattice::from_vec(1, 2, vec![1.0, 0.0]);
        let noise = MaskLattice::from_vec(1, 2, vec![0.3, -1.1]);
        let marg = forward_marginal(&x0, 1, &s, &noise);
        let step = forward_step(&x0, 1, &s, &noise);
        for (a, b) in marg.as_slice().iter().zip(step.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn step_with_degenerate_beta_is_identity() {
        let s = NoiseSchedule::from_betas(vec![0.0, 0.1]).unwrap();
        let x = MaskLattice::from_vec(1, 3, vec![0.2, -0.4, 1.0]);
        let noise = MaskLattice::from_vec(1, 3, vec![1.0, 2.0, 3.0]);
        let out = forward_step(&x, 1, &s, &noise);
        assert_eq!(out.as_slice(), x.as_slice());
    }

    #[test]
    fn marginal_moments_match_monte_carlo() {
        // oracle: empirical mean/variance over many draws
        let s = sched();
        let x0 = MaskLattice::from_vec(1, 2, vec![1.0, 0.0]);
        let t = 40;
        let n = 100_000usize;
        let mut rng = substream(3, STREAM_DATA);
        let mut sum = [0.0f64; 2];
        let mut sumsq = [0.0f64; 2];
        for _ in 0..n {
            let noise = sample_standard_normal(1, 2, &mut rng);
            let xt = forward_marginal(&x0, t, &s, &noise);
            for (i, &v) in xt.as_slice().iter().enumerate() {
                sum[i] += v;
                sumsq[i] += v * v;
            }
        }
        let ab = s.alpha_bar(t);
        let var_true = 1.0 - ab;
        for i in 0..2 {
            let mean = sum[i] / n as f64;
            let var = sumsq[i] / n as f64 - mean * mean;
            let mean_true = ab.sqrt() * x0.as_slice()[i];
            let se_mean = var_true.sqrt() / (n as f64).sqrt();
            let se_var = var_true * (2.0 / n as f64).sqrt();
            assert!((mean - mean_true).abs() < 4.0 * se_mean, "mean off at pixel {i}");
            assert!((var - var_true).abs() < 4.0 * se_var, "variance off at pixel {i}");
        }
    }

    #[test]
    fn composed_steps_match_marginal_in_moments() {
        // oracle: chain composition against the closed-form marginal
        let s = NoiseSchedule::linear(8, 0.02, 0.3).unwrap();
        let x0 = MaskLattice::from_vec(1, 1, vec![1.0]);
        let k = 8;
        let n = 10_000usize;
        let mut rng = substream(5, STREAM_DATA);
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let mut x = x0.clone();
            for t in 1..=k {
                let noise = sample_standard_normal(1, 1, &mut rng);
                x = forward_step(&x, t, &s, &noise);
            }
            let v = x.get(0, 0);
            sum += v;
            sumsq += v * v;
        }
        let ab = s.alpha_bar(k);
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let var_true = 1.0 - ab;
        let se_mean = var_true.sqrt() / (n as f64).sqrt();
        let se_var = var_true * (2.0 / n as f64).sqrt();
        assert!((mean - ab.sqrt()).abs() < 4.0 * se_mean);
        assert!((var - var_true).abs() < 4.0 * se_var);
    }

    #[test]
    fn posterior_variance_zero_at_t1_and_mean_is_reconstruction() {
        let s = sched();
        let x0 = MaskLattice::from_vec(1, 2, vec![1.0, 0.0]);
        let eps = MaskLattice::from_vec(1, 2, vec![0.7, -0.2]);
        let x1 = forward_marginal(&x0, 1, &s, &eps);
        let params = posterior_from_eps(&x1, &eps, 1, &s);
        assert_eq!(params.variance, 0.0);
        for (m, x) in params.mean.as_slice().iter().zip(x0.as_slice()) {
            assert!((m - x).abs() < 1e-12, "t=1 mean should reconstruct x0");
        }
    }

    #[test]
    fn posterior_mean_matches_closed_form_posterior() {
        // oracle: q(x_{t-1}|x_t,x0) mean via the two-coefficient formula
        let s = sched();
        let mut rng = substream(9, STREAM_DATA);
        for t in [2usize, 10, 55, 100] {
            let x0 = MaskLattice::from_fn(2, 2, |_, _| if rng.random::<f64>() < 0.5 { 0.0 } else { 1.0 });
            let eps = sample_standard_normal(2, 2, &mut rng);
            let x_t = forward_marginal(&x0, t, &s, &eps);
            let params = posterior_from_eps(&x_t, &eps, t, &s);
            let ab = s.alpha_bar(t);
            let ab_prev = s.alpha_bar_or_one(t - 1);
            let beta = s.beta(t);
            let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
            let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
            for i in 0..4 {
                let expected = c0 * x0.as_slice()[i] + ct * x_t.as_slice()[i];
                assert!(
                    (params.mean.as_slice()[i] - expected).abs() < 1e-12,
                    "posterior mean mismatch at t={t}"
                );
            }
        }
    }

    #[test]
    fn posterior_is_linear_in_inputs() {
        let s = sched();
        let zeros = MaskLattice::zeros(2, 2);
        let params = posterior_from_eps(&zeros, &zeros, 5, &s);
        assert!(params.mean.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ddim_terminal_step_returns_reconstruction() {
        let s = sched();
        let x0 = MaskLattice::from_vec(1, 2, vec![1.0, 0.0]);
        let eps = MaskLattice::from_vec(1, 2, vec![-0.4, 0.9]);
        let t = 30;
        let x_t = forward_marginal(&x0, t, &s, &eps);
        let out = ddim_step(&x_t, &eps, t, 0, &s);
        for (o, x) in out.as_slice().iter().zip(x0.as_slice()) {
            assert!((o - x).abs() < 1e-12);
        }
    }

    #[test]
    fn ddim_consecutive_step_recovers_marginal_state() {
        // oracle: substitute the marginal form and simplify
        let s = sched();
        let x0 = MaskLattice::from_vec(1, 2, vec![1.0, 0.0]);
        let eps = MaskLattice::from_vec(1, 2, vec![0.25, -1.5]);
        for t in [2usize, 40, 100] {
            let x_t = forward_marginal(&x0, t, &s, &eps);
            let stepped = ddim_step(&x_t, &eps, t, t - 1, &s);
            let expected = forward_marginal(&x0, t - 1, &s, &eps);
            for (a, b) in stepped.as_slice().iter().zip(expected.as_slice()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ddim_zero_noise_trajectory_returns_x0() {
        let s = sched();
        let x0 = MaskLattice::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let zero = MaskLattice::zeros(2, 2);
        let mut x = forward_marginal(&x0, 100, &s, &zero);
        let taus = [100usize, 75, 50, 25, 0];
        for win in taus.windows(2) {
            x = ddim_step(&x, &zero, win[0], win[1], &s);
        }
        for (a, b) in x.as_slice().iter().zip(x0.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    #[should_panic(expected = "move backward")]
    fn ddim_forward_step_panics() {
        let s = sched();
        let x = MaskLattice::zeros(1, 1);
        let _ = ddim_step(&x, &x.clone(), 5, 5, &s);
    }

    #[test]
    fn eps_loss_examples() {
        let a = MaskLattice::from_vec(2, 2, vec![0.1, -0.2, 0.5, 1.0]);
        assert_eq!(eps_loss(&a, &a), 0.0);
        let shifted = a.map(|v| v + 0.3);
        assert!((eps_loss(&a, &shifted) - 0.09).abs() < 1e-15);
    }

    #[test]
    fn eps_loss_matches_brute_force() {
        let mut rng = substream(21, STREAM_DATA);
        let a = sample_standard_normal(3, 5, &mut rng);
        let b = sample_standard_normal(3, 5, &mut rng);
        let mut acc = 0.0;
        for i in 0..15 {
            let d = a.as_slice()[i] - b.as_slice()[i];
            acc += d * d;
        }
        assert!((eps_loss(&a, &b) - acc / 15.0).abs() < 1e-15);
    }

    #[test]
    fn eps_loss_nonnegative_zero_iff_equal() {
        let mut rng = substream(22, STREAM_DATA);
        for _ in 0..20 {
            let a = sample_standard_normal(2, 3, &mut rng);
            let b = sample_standard_normal(2, 3, &mut rng);
            let l = eps_loss(&a, &b);
            assert!(l > 0.0 || a.as_slice() == b.as_slice());
        }
    }

    #[test]
    fn kl_prior_closed_forms() {
        let standard = ReverseParams { mean: MaskLattice::zeros(2, 2), variance: 1.0 };
        assert_eq!(kl_prior(&standard), 0.0);
        let unit_mean = ReverseParams { mean: MaskLattice::filled(2, 2, 1.0), variance: 1.0 };
        assert!((kl_prior(&unit_mean) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_prior_matches_quadrature() {
        // oracle: Simpson integration of the KL integrand
        let mu = 0.7;
        let s2 = 0.4f64;
        let params = ReverseParams { mean: MaskLattice::filled(1, 1, mu), variance: s2 };
        let analytic = kl_prior(&params);

        let sigma = s2.sqrt();
        let (lo, hi) = (mu - 12.0 * sigma - 12.0, mu + 12.0 * sigma + 12.0);
        let steps = 200_000usize; // even
        let h = (hi - lo) / steps as f64;
        let integrand = |x: f64| {
            let p = (-0.5 * (x - mu) * (x - mu) / s2).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
            let log_ratio = -0.5 * (x - mu) * (x - mu) / s2 - sigma.ln()
                - (-0.5 * x * x);
            p * log_ratio
        };
        let mut acc = integrand(lo) + integrand(hi);
        for i in 1..steps {
            let x = lo + i as f64 * h;
            acc += integrand(x) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        let numeric = acc * h / 3.0;
        assert!(
            (analytic - numeric).abs() < 1e-6,
            "kl {analytic} vs quadrature {numeric}"
        );
    }

    #[test]
    #[should_panic(expected = "positive variance")]
    fn kl_prior_rejects_nonpositive_variance() {
        let p = ReverseParams { mean: MaskLattice::zeros(1, 1), variance: 0.0 };
        let _ = kl_prior(&p);
    }

    #[test]
    fn oracle_reverse_chain_reconstructs_x0() {
        // drive the deterministic reverse chain with the exact noise
        let s = sched();
        let mut rng = substream(31, STREAM_DATA);
        for _ in 0..4 {
            let x0 = MaskLattice::from_fn(8, 8, |_, _| if rng.random::<f64>() < 0.4 { 1.0 } else { 0.0 });
            let eps = sample_standard_normal(8, 8, &mut rng);
            let mut x = forward_marginal(&x0, 100, &s, &eps);
            let mut t = 100usize;
            while t > 0 {
                let t_next = t.saturating_sub(10);
                x = ddim_step(&x, &eps, t, t_next, &s);
                t = t_next;
            }
            for (a, b) in x.as_slice().iter().zip(x0.as_slice()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
