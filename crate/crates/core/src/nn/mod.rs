//! Conditioned twin denoiser with hand-written reverse-mode gradients.

pub mod denoiser;
pub mod embedding;
pub mod mfcm;
pub mod params;
pub mod tape;
pub mod tensor;

pub use params::{Init, ModelParams, Seg, SegmentBuilder, SegmentIndex};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;

use crate::error::{Error, Result};
use crate::lattice::MaskLattice;

/// Network shape hyperparameters. These are desk-scale defaults, not a
/// claim about any particular reference architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    /// Channels at full resolution in each denoiser branch.
    pub base_channels: usize,
    /// Channels at the two reduced resolutions.
    pub mid_channels: usize,
    /// Channels per conditioner stream.
    pub cond_channels: usize,
    /// Cross-resolution exchange stages in the conditioner.
    pub cond_stages: usize,
    /// Conditioner streams; the denoiser consumes the first three scales.
    pub scales: usize,
    /// Width of the sinusoidal time embedding (even).
    pub time_dim: usize,
    /// Replace the coarsest gate with true single-head cross-attention.
    pub cross_attention: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            base_channels: 8,
            mid_channels: 16,
            cond_channels: 8,
            cond_stages: 2,
            scales: 3,
            time_dim: 32,
            cross_attention: false,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales < 3 {
            return Err(Error::Config("net needs at least 3 conditioning scales".into()));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::Config("time_dim must be even and >= 2".into()));
        }
        if self.base_channels == 0
            || self.mid_channels == 0
            || self.cond_channels == 0
            || self.cond_stages == 0
        {
            return Err(Error::Config("channel and stage counts must be positive".into()));
        }
        Ok(())
    }

    /// Full parameter layout: shared conditioner plus both branches.
    pub fn layout(&self) -> SegmentIndex {
        let mut b = SegmentBuilder::new();
        mfcm::register(&mut b, self);
        denoiser::register(&mut b, self, denoiser::GAUSSIAN_PREFIX);
        denoiser::register(&mut b, self, denoiser::BERNOULLI_PREFIX);
        b.build()
    }
}

/// Conditioning features extracted from an image, detached from any tape.
#[derive(Debug, Clone)]
pub struct ConditioningFeatures {
    /// Per-scale feature maps; `scales[k]` has resolution H/2^k × W/2^k.
    pub scales: Vec<Tensor>,
    /// Full-resolution logistic projection, values in [0, 1].
    pub scc_out: MaskLattice,
}

/// Per-timestep twin outputs.
#[derive(Debug, Clone)]
pub struct DenoiserOutput {
    /// Gaussian-branch noise estimate (unbounded reals).
    pub eps_hat: MaskLattice,
    /// Bernoulli-branch x̂0 probability (logistic output).
    pub x0_prob_hat: MaskLattice,
}

/// Runs the conditioner on an image and detaches the results.
pub fn mfcm_forward(
    image: &MaskLattice,
    params: &ModelParams,
    cfg: &NetConfig,
    fuse: bool,
) -> ConditioningFeatures {
    let mut tape = Tape::new(params.values());
    let img = tape.input(Tensor::from_lattice(image));
    let nodes = mfcm::forward(&mut tape, params, cfg, img, fuse);
    ConditioningFeatures {
        scales: nodes.scales.iter().map(|&id| tape.value(id).clone()).collect(),
        scc_out: tape.value(nodes.scc).to_lattice(),
    }
}

/// Runs both branches on their noisy inputs at timestep `t`.
pub fn denoise(
    x_t_gaussian: &MaskLattice,
    x_t_bernoulli: &MaskLattice,
    cond: &ConditioningFeatures,
    t: usize,
    t_total: usize,
    params: &ModelParams,
    cfg: &NetConfig,
) -> DenoiserOutput {
    DenoiserOutput {
        eps_hat: gaussian_eps(x_t_gaussian, cond, t, t_total, params, cfg),
        x0_prob_hat: bernoulli_prob(x_t_bernoulli, cond, t, t_total, params, cfg),
    }
}

/// Gaussian branch alone: predicted noise for the current state.
pub fn gaussian_eps(
    x_t: &MaskLattice,
    cond: &ConditioningFeatures,
    t: usize,
    t_total: usize,
    params: &ModelParams,
    cfg: &NetConfig,
) -> MaskLattice {
    run_branch(denoiser::GAUSSIAN_PREFIX, x_t, cond, t, t_total, params, cfg, false)
}

/// Bernoulli branch alone: predicted x̂0 probability for the current state.
pub fn bernoulli_prob(
    x_t: &MaskLattice,
    cond: &ConditioningFeatures,
    t: usize,
    t_total: usize,
    params: &ModelParams,
    cfg: &NetConfig,
) -> MaskLattice {
    run_branch(denoiser::BERNOULLI_PREFIX, x_t, cond, t, t_total, params, cfg, true)
}

#[allow(clippy::too_many_arguments)]
fn run_branch(
    prefix: &str,
    x_t: &MaskLattice,
    cond: &ConditioningFeatures,
    t: usize,
    t_total: usize,
    params: &ModelParams,
    cfg: &NetConfig,
    squash: bool,
) -> MaskLattice {
    let emb = embedding::time_embedding(t, cfg.time_dim, t_total);
    let mut tape = Tape::new(params.values());
    let noisy = tape.input(Tensor::from_lattice(x_t));
    let cond_ids: Vec<NodeId> = cond.scales.iter().map(|s| tape.input(s.clone())).collect();
    let head = denoiser::forward(&mut tape, params, cfg, prefix, noisy, &cond_ids, &emb);
    let out = if squash { tape.sigmoid(head) } else { head };
    tape.value(out).to_lattice()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, STREAM_INIT};
    use rand::Rng;

    fn jittered_params(cfg: &NetConfig, seed: u64) -> ModelParams {
        let mut rng = substream(seed, STREAM_INIT);
        let mut p = ModelParams::init(cfg.layout(), &mut rng);
        for v in p.values_mut() {
            *v += rng.random_range(-0.02..0.02);
        }
        p
    }

    fn random_lattice(h: usize, w: usize, rng: &mut rand_chacha::ChaCha8Rng) -> MaskLattice {
        MaskLattice::from_fn(h, w, |_, _| rng.random_range(-1.0..1.0))
    }

    fn tiny_cfg() -> NetConfig {
        NetConfig {
            base_channels: 3,
            mid_channels: 4,
            cond_channels: 3,
            cond_stages: 1,
            scales: 3,
            time_dim: 8,
            cross_attention: false,
        }
    }

    #[test]
    fn zero_initialized_heads_give_known_outputs() {
        let cfg = NetConfig::default();
        let mut rng = substream(1, STREAM_INIT);
        let params = ModelParams::init(cfg.layout(), &mut rng);
        let image = random_lattice(16, 16, &mut rng).map(|v| v.abs().min(1.0));
        let cond = mfcm_forward(&image, &params, &cfg, true);
        let xg = random_lattice(16, 16, &mut rng);
        let xb = xg.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let out = denoise(&xg, &xb, &cond, 5, 100, &params, &cfg);
        assert!(out.eps_hat.as_slice().iter().all(|&v| v == 0.0));
        assert!(out.x0_prob_hat.as_slice().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn scc_is_half_on_zero_image() {
        let cfg = NetConfig::default();
        let mut rng = substream(2, STREAM_INIT);
        let params = jittered_params(&cfg, 2);
        let _ = &mut rng;
        let image = MaskLattice::zeros(8, 8);
        let cond = mfcm_forward(&image, &params, &cfg, true);
        // zero image and zero biases keep every pre-activation at zero
        let zero_bias_params = {
            let mut p = params.clone();
            for e in p.index().entries().to_vec() {
                if e.name.ends_with(".b") {
                    let seg = p.seg(&e.name);
                    p.values_mut()[seg.off..seg.off + seg.len].fill(0.0);
                }
            }
            p
        };
        let cond0 = mfcm_forward(&image, &zero_bias_params, &cfg, true);
        assert!(cond0.scc_out.as_slice().iter().all(|&v| v == 0.5));
        let _ = cond;
    }

    #[test]
    fn conditioner_scale_shapes_follow_halving() {
        let cfg = NetConfig::default();
        let params = jittered_params(&cfg, 3);
        let image = MaskLattice::zeros(32, 32);
        let cond = mfcm_forward(&image, &params, &cfg, true);
        assert_eq!(cond.scales.len(), 3);
        assert_eq!((cond.scales[0].h, cond.scales[0].w), (32, 32));
        assert_eq!((cond.scales[1].h, cond.scales[1].w), (16, 16));
        assert_eq!((cond.scales[2].h, cond.scales[2].w), (8, 8));
        assert_eq!(cond.scc_out.shape(), (32, 32));
    }

    #[test]
    fn fusion_flag_changes_outputs() {
        let cfg = NetConfig::default();
        let params = jittered_params(&cfg, 4);
        let mut rng = substream(4, STREAM_INIT);
        let image = random_lattice(16, 16, &mut rng).map(|v| 0.5 + 0.4 * v);
        let fused = mfcm_forward(&image, &params, &cfg, true);
        let plain = mfcm_forward(&image, &params, &cfg, false);
        let differ = fused.scales[0]
            .data
            .iter()
            .zip(&plain.scales[0].data)
            .any(|(a, b)| (a - b).abs() > 1e-12);
        assert!(differ, "fusion exchange should matter on random input");
    }

    #[test]
    fn output_shapes_match_inputs_across_sizes() {
        let cfg = tiny_cfg();
        let params = jittered_params(&cfg, 5);
        let mut rng = substream(5, STREAM_INIT);
        for side in [8usize, 16, 32] {
            let image = random_lattice(side, side, &mut rng);
            let cond = mfcm_forward(&image, &params, &cfg, true);
            let xg = random_lattice(side, side, &mut rng);
            let xb = xg.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            let out = denoise(&xg, &xb, &cond, 3, 50, &params, &cfg);
            assert_eq!(out.eps_hat.shape(), (side, side));
            assert_eq!(out.x0_prob_hat.shape(), (side, side));
            assert!(out.x0_prob_hat.is_probability());
        }
    }

    #[test]
    fn twin_branches_are_isolated() {
        let cfg = tiny_cfg();
        let params = jittered_params(&cfg, 6);
        let mut rng = substream(6, STREAM_INIT);
        let image = random_lattice(8, 8, &mut rng);
        let cond = mfcm_forward(&image, &params, &cfg, true);
        let xg = random_lattice(8, 8, &mut rng);
        let xb = xg.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let before = denoise(&xg, &xb, &cond, 2, 50, &params, &cfg);

        let mut perturbed = params.clone();
        for e in perturbed.index().entries().to_vec() {
            if e.name.starts_with("gnem.") {
                let seg = perturbed.seg(&e.name);
                for v in &mut perturbed.values_mut()[seg.off..seg.off + seg.len] {
                    *v += 0.37;
                }
            }
        }
        let after = denoise(&xg, &xb, &cond, 2, 50, &perturbed, &cfg);
        assert_eq!(
            before.x0_prob_hat.as_slice(),
            after.x0_prob_hat.as_slice(),
            "perturbing the gaussian branch must not touch the bernoulli output"
        );
        assert_ne!(before.eps_hat.as_slice(), after.eps_hat.as_slice());
    }

    #[test]
    fn branch_segments_are_disjoint_by_prefix() {
        let cfg = NetConfig::default();
        let layout = cfg.layout();
        let mut total = 0usize;
        for e in layout.entries() {
            let known = ["mfcm.", "gnem.", "bnem."]
                .iter()
                .filter(|p| e.name.starts_with(*p))
                .count();
            assert_eq!(known, 1, "segment {} must belong to exactly one owner", e.name);
            total += e.len;
        }
        assert_eq!(total, layout.total_len());
        assert!(layout.total_len() < 100_000, "parameter budget exceeded");
    }

    #[test]
    fn denoise_is_deterministic() {
        let cfg = tiny_cfg();
        let params = jittered_params(&cfg, 7);
        let mut rng = substream(7, STREAM_INIT);
        let image = random_lattice(8, 8, &mut rng);
        let cond = mfcm_forward(&image, &params, &cfg, true);
        let xg = random_lattice(8, 8, &mut rng);
        let xb = xg.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let a = denoise(&xg, &xb, &cond, 9, 50, &params, &cfg);
        let b = denoise(&xg, &xb, &cond, 9, 50, &params, &cfg);
        assert_eq!(a.eps_hat.as_slice(), b.eps_hat.as_slice());
        assert_eq!(a.x0_prob_hat.as_slice(), b.x0_prob_hat.as_slice());
    }

    #[test]
    fn gradcheck_full_branch_with_conditioner() {
        // mandatory gate: analytic vs central-difference gradients through
        // conditioner, gates, attention, and both heads
        let cfg = tiny_cfg();
        let params = jittered_params(&cfg, 8);
        let mut rng = substream(8, STREAM_INIT);
        let image = random_lattice(8, 8, &mut rng).map(|v| 0.5 + 0.4 * v);
        let xg = random_lattice(8, 8, &mut rng);
        let xb = xg.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let mask = MaskLattice::from_fn(8, 8, |_, _| if rng.random::<f64>() < 0.4 { 1.0 } else { 0.0 });
        let emb = embedding::time_embedding(7, cfg.time_dim, 50);

        let eval = |vals: &[f64]| -> f64 {
            let p = ModelParams::from_parts(params.index().clone(), vals.to_vec());
            let mut tape = Tape::new(p.values());
            let img = tape.input(Tensor::from_lattice(&image));
            let nodes = mfcm::forward(&mut tape, &p, &cfg, img, true);
            let ng = tape.input(Tensor::from_lattice(&xg));
            let nb = tape.input(Tensor::from_lattice(&xb));
            let gh = denoiser::forward(&mut tape, &p, &cfg, "gnem", ng, &nodes.scales, &emb);
            let bh = denoiser::forward(&mut tape, &p, &cfg, "bnem", nb, &nodes.scales, &emb);
            let bp = tape.sigmoid(bh);
            let target = Tensor::from_lattice(&mask);
            let lg = tape.mse_mean(gh, &target);
            let lb = tape.bce_mean(bp, &target);
            let lscc = tape.mse_mean(nodes.scc, &target);
            let root = tape.scalar_sum(vec![(lg, 1.0), (lb, 1.0), (lscc, 0.1)]);
            tape.value(root).scalar_value()
        };

        let mut grads = params.zero_grad();
        {
            let p = params.clone();
            let mut tape = Tape::new(p.values());
            let img = tape.input(Tensor::from_lattice(&image));
            let nodes = mfcm::forward(&mut tape, &p, &cfg, img, true);
            let ng = tape.input(Tensor::from_lattice(&xg));
            let nb = tape.input(Tensor::from_lattice(&xb));
            let gh = denoiser::forward(&mut tape, &p, &cfg, "gnem", ng, &nodes.scales, &emb);
            let bh = denoiser::forward(&mut tape, &p, &cfg, "bnem", nb, &nodes.scales, &emb);
            let bp = tape.sigmoid(bh);
            let target = Tensor::from_lattice(&mask);
            let lg = tape.mse_mean(gh, &target);
            let lb = tape.bce_mean(bp, &target);
            let lscc = tape.mse_mean(nodes.scc, &target);
            let root = tape.scalar_sum(vec![(lg, 1.0), (lb, 1.0), (lscc, 0.1)]);
            tape.backward(root, &mut grads);
        }

        let mut coords: Vec<usize> = (0..params.len()).collect();
        // deterministic subsample to keep the unit test quick
        coords.retain(|&i| i % 17 == 3);
        let step = 1e-4;
        for &i in coords.iter().take(220) {
            let mut vals = params.values().to_vec();
            let orig = vals[i];
            vals[i] = orig + step;
            let plus = eval(&vals);
            vals[i] = orig - step;
            let minus = eval(&vals);
            let numeric = (plus - minus) / (2.0 * step);
            let rel = (grads[i] - numeric).abs() / (grads[i].abs() + numeric.abs()).max(1e-6);
            assert!(
                rel <= 1e-4,
                "coordinate {i}: analytic {} vs numeric {numeric} (rel {rel})",
                grads[i]
            );
        }
    }

    #[test]
    fn cross_attention_variant_runs_and_differs() {
        let mut cfg = tiny_cfg();
        let params_gate = jittered_params(&cfg, 9);
        cfg.cross_attention = true;
        let params_x = jittered_params(&cfg, 9);
        let mut rng = substream(9, STREAM_INIT);
        let image = random_lattice(8, 8, &mut rng);
        let xg = random_lattice(8, 8, &mut rng);
        let cond_x = mfcm_forward(&image, &params_x, &cfg, true);
        let out = gaussian_eps(&xg, &cond_x, 4, 50, &params_x, &cfg);
        assert_eq!(out.shape(), (8, 8));
        let _ = params_gate;
    }

    #[test]
    fn validate_rejects_bad_configs() {
        let mut cfg = NetConfig::default();
        cfg.scales = 2;
        assert!(cfg.validate().is_err());
        let mut cfg = NetConfig::default();
        cfg.time_dim = 9;
        assert!(cfg.validate().is_err());
        assert!(NetConfig::default().validate().is_ok());
    }
}
