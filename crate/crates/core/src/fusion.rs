//! STAPLE fusion of multiple binary rater masks.
//!
//! Expectation-maximization over a latent true mask: the E-step computes
//! the per-pixel posterior that the true label is foreground, the M-step
//! re-estimates each rater's sensitivity and specificity. Iterates until
//! the posterior stops moving or the iteration cap is reached.

use crate::lattice::{assert_same_shape, MaskLattice};

/// Foreground prior for the latent truth: one scalar or a per-pixel map.
#[derive(Debug, Clone)]
pub enum StaplePrior {
    Scalar(f64),
    PerPixel(MaskLattice),
}

/// Fusion output: posterior foreground probabilities plus per-rater
/// performance estimates.
#[derive(Debug, Clone)]
pub struct StapleResult {
    pub fused_prob: MaskLattice,
    pub sensitivities: Vec<f64>,
    pub specificities: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Observed-data log-likelihood after each EM iteration.
    pub loglik_trace: Vec<f64>,
}

const RATE_CLAMP: f64 = 1e-6;
const INITIAL_RATE: f64 = 0.95;

/// Hard threshold: pixel = 1 iff prob ≥ threshold.
pub fn binarize(prob: &MaskLattice, threshold: f64) -> MaskLattice {
    assert!(threshold > 0.0 && threshold < 1.0, "threshold must lie in (0,1)");
    prob.map(|p| if p >= threshold { 1.0 } else { 0.0 })
}

/// Fuses two or more binary rater masks by STAPLE EM.
pub fn staple_fuse(
    masks: &[MaskLattice],
    prior: StaplePrior,
    tol: f64,
    max_iter: usize,
) -> StapleResult {
    assert!(masks.len() >= 2, "staple_fuse needs at least 2 raters");
    for m in masks {
        assert_same_shape(&masks[0], m);
        assert!(m.is_binary(), "staple_fuse requires binary masks");
    }
    let npix = masks[0].len();
    let prior_at = |i: usize| -> f64 {
        match &prior {
            StaplePrior::Scalar(g) => {
                assert!(*g > 0.0 && *g < 1.0, "scalar prior must lie in (0,1)");
                *g
            }
            StaplePrior::PerPixel(map) => {
                assert_same_shape(&masks[0], map);
                let g = map.as_slice()[i];
                assert!(g > 0.0 && g < 1.0, "per-pixel prior must lie in (0,1)");
                g
            }
        }
    };

    let n_raters = masks.len();
    let mut sens = vec![INITIAL_RATE; n_raters];
    let mut spec = vec![INITIAL_RATE; n_raters];

    // E-step; also returns the observed-data log-likelihood.
    let e_step = |sens: &[f64], spec: &[f64], w: &mut [f64]| -> f64 {
        let mut loglik = 0.0;
        for i in 0..npix {
            let mut fg = prior_at(i);
            let mut bg = 1.0 - prior_at(i);
            for (j, m) in masks.iter().enumerate() {
                let d = m.as_slice()[i];
                if d == 1.0 {
                    fg *= sens[j];
                    bg *= 1.0 - spec[j];
                } else {
                    fg *= 1.0 - sens[j];
                    bg *= spec[j];
                }
            }
            let norm = fg + bg;
            w[i] = fg / norm;
            loglik += norm.ln();
        }
        loglik
    };

    let mut w = vec![0.0f64; npix];
    let mut loglik_trace = Vec::new();
    loglik_trace.push(e_step(&sens, &spec, &mut w));

    let mut iterations = 0;
    let mut converged = false;
    for it in 1..=max_iter {
        // M-step: re-estimate rater performance from the posterior weights.
        let w_sum: f64 = w.iter().sum();
        let w_comp_sum = npix as f64 - w_sum;
        for (j, m) in masks.iter().enumerate() {
            let mut hit = 0.0;
            let mut rej = 0.0;
            for (i, &d) in m.as_slice().iter().enumerate() {
                if d == 1.0 {
                    hit += w[i];
                } else {
                    rej += 1.0 - w[i];
                }
            }
            if w_sum > 0.0 {
                sens[j] = (hit / w_sum).clamp(RATE_CLAMP, 1.0 - RATE_CLAMP);
            }
            if w_comp_sum > 0.0 {
                spec[j] = (rej / w_comp_sum).clamp(RATE_CLAMP, 1.0 - RATE_CLAMP);
            }
        }

        let mut w_new = vec![0.0f64; npix];
        loglik_trace.push(e_step(&sens, &spec, &mut w_new));
        let delta = w
            .iter()
            .zip(&w_new)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        w = w_new;
        iterations = it;
        if delta < tol {
            converged = true;
            break;
        }
    }

    let (h, wd) = masks[0].shape();
    StapleResult {
        fused_prob: MaskLattice::from_vec(h, wd, w),
        sensitivities: sens,
        specificities: spec,
        iterations,
        converged,
        loglik_trace,
    }
}
