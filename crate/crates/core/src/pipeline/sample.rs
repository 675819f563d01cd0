//! Dual-chain reverse sampling and mask fusion.
//!
//! Conditioning features are extracted once per image and reused across
//! timesteps. Both chains walk the same timestep subsequence: the Gaussian
//! branch takes deterministic strided steps (or ancestral ones), the
//! Bernoulli branch samples the exact strided posterior. Terminal branch
//! outputs are thresholded at 0.5 and fused by STAPLE.

use rand_chacha::ChaCha8Rng;

use crate::bernoulli;
use crate::config::{NoiseMode, SamplerMode, TrainingConfig};
use crate::fusion::{binarize, staple_fuse, StaplePrior};
use crate::gaussian;
use crate::lattice::MaskLattice;
use crate::nn::{self, ConditioningFeatures, ModelParams, NetConfig};
use crate::schedule::NoiseSchedule;

/// Per-step prediction source for the reverse chains.
pub trait Denoiser: Sync {
    fn eps(&self, x_t: &MaskLattice, cond: &ConditioningFeatures, t: usize) -> MaskLattice;
    fn x0_prob(&self, x_t: &MaskLattice, cond: &ConditioningFeatures, t: usize) -> MaskLattice;
}

/// The learned twin network.
pub struct ModelDenoiser<'a> {
    pub params: &'a ModelParams,
    pub net: &'a NetConfig,
    pub t_total: usize,
}

impl Denoiser for ModelDenoiser<'_> {
    fn eps(&self, x_t: &MaskLattice, cond: &ConditioningFeatures, t: usize) -> MaskLattice {
        nn::gaussian_eps(x_t, cond, t, self.t_total, self.params, self.net)
    }

    fn x0_prob(&self, x_t: &MaskLattice, cond: &ConditioningFeatures, t: usize) -> MaskLattice {
        nn::bernoulli_prob(x_t, cond, t, self.t_total, self.params, self.net)
    }
}

/// Ground-truth oracle: returns the noise implied by the known mask and
/// the mask itself as the x̂0 probability.
pub struct OracleDenoiser {
    pub x0: MaskLattice,
    pub sched: NoiseSchedule,
}

impl Denoiser for OracleDenoiser {
    fn eps(&self, x_t: &MaskLattice, _cond: &ConditioningFeatures, t: usize) -> MaskLattice {
        let ab = self.sched.alpha_bar(t);
        let (sig, spr) = (ab.sqrt(), (1.0 - ab).sqrt());
        x_t.zip_map(&self.x0, |xt, x0| (xt - sig * x0) / spr)
    }

    fn x0_prob(&self, _x_t: &MaskLattice, _cond: &ConditioningFeatures, _t: usize) -> MaskLattice {
        self.x0.clone()
    }
}

/// Fixed-output predictor for degenerate test cases.
pub struct ConstDenoiser {
    pub eps_value: f64,
    pub prob_value: f64,
}

impl Denoiser for ConstDenoiser {
    fn eps(&self, x_t: &MaskLattice, _cond: &ConditioningFeatures, _t: usize) -> MaskLattice {
        MaskLattice::filled(x_t.height(), x_t.width(), self.eps_value)
    }

    fn x0_prob(&self, x_t: &MaskLattice, _cond: &ConditioningFeatures, _t: usize) -> MaskLattice {
        MaskLattice::filled(x_t.height(), x_t.width(), self.prob_value)
    }
}

/// Sampling output: fused mask plus the per-branch intermediates.
#[derive(Debug, Clone)]
pub struct SegmentationSample {
    pub final_mask: MaskLattice,
    pub gaussian_masks: Vec<MaskLattice>,
    pub bernoulli_masks: Vec<MaskLattice>,
    /// Present when at least two raters were fused.
    pub fused_prob: Option<MaskLattice>,
}

/// Descending timestep pairs (t, t_next) ending at (·, 0).
pub fn timestep_pairs(t_total: usize, stride: usize, sampler: SamplerMode) -> Vec<(usize, usize)> {
    let stride = match sampler {
        SamplerMode::Ddpm => 1,
        SamplerMode::Ddim => stride.max(1),
    };
    let mut taus = Vec::new();
    let mut t = t_total;
    while t > 0 {
        taus.push(t);
        t = t.saturating_sub(stride);
    }
    taus.push(0);
    taus.windows(2).map(|w| (w[0], w[1])).collect()
}

/// Runs the full dual-chain sampler for one image with a trained model.
pub fn sample_segmentation(
    image: &MaskLattice,
    params: &ModelParams,
    cfg: &TrainingConfig,
    rng: &mut ChaCha8Rng,
) -> crate::error::Result<SegmentationSample> {
    let (sched_g, sched_b) = cfg.schedules()?;
    let fuse = cfg.conditioner == crate::config::ConditionerMode::Mfcm;
    let cond = nn::mfcm_forward(image, params, &cfg.net, fuse);
    let den = ModelDenoiser { params, net: &cfg.net, t_total: cfg.t_steps };
    Ok(sample_with(&den, &cond, image.shape(), cfg, &sched_g, &sched_b, rng))
}

/// Generic sampler core shared by the model, oracle, and tests.
pub fn sample_with(
    den: &dyn Denoiser,
    cond: &ConditioningFeatures,
    shape: (usize, usize),
    cfg: &TrainingConfig,
    sched_g: &NoiseSchedule,
    sched_b: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> SegmentationSample {
    let (h, w) = shape;
    let pairs = timestep_pairs(cfg.t_steps, cfg.stride, cfg.sampler);
    let run_gaussian = cfg.noise != NoiseMode::Bernoulli;
    let run_bernoulli = cfg.noise != NoiseMode::Gaussian;

    let mut gaussian_masks = Vec::new();
    let mut bernoulli_masks = Vec::new();
    for _ in 0..cfg.ensemble {
        if run_gaussian {
            let mut x = gaussian::sample_standard_normal(h, w, rng);
            for &(t, t_next) in &pairs {
                let eps_hat = den.eps(&x, cond, t);
                x = match cfg.sampler {
                    SamplerMode::Ddim => gaussian::ddim_step(&x, &eps_hat, t, t_next, sched_g),
                    SamplerMode::Ddpm => {
                        if t_next == 0 {
                            // final ancestral step has zero variance
                            gaussian::posterior_from_eps(&x, &eps_hat, t, sched_g).mean
                        } else {
                            gaussian::ancestral_step(&x, &eps_hat, t, sched_g, rng)
                        }
                    }
                };
            }
            gaussian_masks.push(binarize(&x, 0.5));
        }
        if run_bernoulli {
            let mut x = bernoulli::sample_prior(h, w, rng);
            for &(t, t_next) in &pairs {
                let prob_hat = den.x0_prob(&x, cond, t);
                x = bernoulli::reverse_step_strided(&x, &prob_hat, t, t_next, sched_b, rng);
            }
            bernoulli_masks.push(x);
        }
    }

    let mut raters: Vec<MaskLattice> = Vec::new();
    raters.extend(gaussian_masks.iter().cloned());
    raters.extend(bernoulli_masks.iter().cloned());
    let (final_mask, fused_prob) = if raters.len() >= 2 {
        let prior = (raters.iter().map(|m| m.mean()).sum::<f64>() / raters.len() as f64)
            .clamp(1e-6, 1.0 - 1e-6);
        let res = staple_fuse(&raters, StaplePrior::Scalar(prior), 1e-6, 100);
        (binarize(&res.fused_prob, 0.5), Some(res.fused_prob))
    } else {
        // single-rater degenerate rule: no fusion with a missing rater
        (raters[0].clone(), None)
    };

    SegmentationSample { final_mask, gaussian_masks, bernoulli_masks, fused_prob }
}
