//! Training: per-step composite loss, exact gradients, and decoupled
//! weight-decay updates with first/second-moment adaptation.
//!
//! All per-step randomness (batch indices, timesteps, noises, flips) is
//! drawn sequentially from the train stream before any parallel work, so
//! runs are bit-reproducible and resumable from a saved stream position.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bernoulli;
use crate::config::{ConditionerMode, NoiseMode, TrainingConfig};
use crate::error::{Error, Result};
use crate::gaussian;
use crate::lattice::MaskLattice;
use crate::nn::{self, denoiser, embedding, mfcm, ModelParams, Tape, Tensor};
use crate::pipeline::data::SampleRecord;
use crate::pipeline::loss::{total_loss, LossParts};
use crate::rng::{substream, RngState, STREAM_INIT, STREAM_TRAIN};
use crate::schedule::NoiseSchedule;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First/second moment buffers for the update rule.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub steps: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], steps: 0 }
    }
}

/// Everything mutable across training steps.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    pub opt: AdamState,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    /// Fresh state: parameters from the init stream, train stream at zero.
    pub fn new(cfg: &TrainingConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init_rng = substream(cfg.seed, STREAM_INIT);
        let params = ModelParams::init(cfg.net.layout(), &mut init_rng);
        let n = params.len();
        Ok(TrainState {
            params,
            opt: AdamState::new(n),
            step: 0,
            rng: substream(cfg.seed, STREAM_TRAIN),
        })
    }

    pub fn rng_state(&self, cfg: &TrainingConfig) -> RngState {
        RngState::capture(cfg.seed, STREAM_TRAIN, &self.rng)
    }
}

/// Result of one optimization step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub parts: LossParts,
    pub total: f64,
    /// Batch-averaged gradient, in parameter layout.
    pub gradient: Vec<f64>,
}

struct SampleDraw {
    image: MaskLattice,
    mask: MaskLattice,
    t: usize,
    eps: Option<MaskLattice>,
    bits: Option<MaskLattice>,
}

/// One optimization step over an explicit batch.
pub fn train_step(
    batch: &[&SampleRecord],
    state: &mut TrainState,
    cfg: &TrainingConfig,
    scheds: &(NoiseSchedule, NoiseSchedule),
) -> Result<StepOutput> {
    assert!(!batch.is_empty(), "train_step needs a non-empty batch");
    let draws = draw_batch(batch, state, cfg, scheds);
    apply_draws(&draws, state, cfg, scheds)
}

fn draw_batch(
    batch: &[&SampleRecord],
    state: &mut TrainState,
    cfg: &TrainingConfig,
    scheds: &(NoiseSchedule, NoiseSchedule),
) -> Vec<SampleDraw> {
    let run_gaussian = cfg.noise != NoiseMode::Bernoulli;
    let run_bernoulli = cfg.noise != NoiseMode::Gaussian;
    batch
        .iter()
        .map(|record| {
            let t = state.rng.random_range(1..=cfg.t_steps);
            let flip = cfg.hflip && state.rng.random::<f64>() < 0.5;
            let (image, mask) = if flip {
                (record.image.hflip(), record.mask.hflip())
            } else {
                (record.image.clone(), record.mask.clone())
            };
            let eps = run_gaussian.then(|| {
                gaussian::sample_standard_normal(mask.height(), mask.width(), &mut state.rng)
            });
            let bits = run_bernoulli.then(|| {
                let prob = bernoulli::forward_marginal_prob(&mask, t, &scheds.1);
                bernoulli::sample_from_prob(&prob, &mut state.rng)
            });
            SampleDraw { image, mask, t, eps, bits }
        })
        .collect()
}

fn apply_draws(
    draws: &[SampleDraw],
    state: &mut TrainState,
    cfg: &TrainingConfig,
    scheds: &(NoiseSchedule, NoiseSchedule),
) -> Result<StepOutput> {
    let per_sample: Vec<(LossParts, Vec<f64>)> = draws
        .par_iter()
        .map(|draw| sample_loss_and_grad(draw, &state.params, cfg, scheds))
        .collect();

    let n = draws.len() as f64;
    let mut gradient = state.params.zero_grad();
    let mut parts = LossParts::default();
    for (p, g) in &per_sample {
        parts.gaussian += p.gaussian / n;
        parts.bernoulli += p.bernoulli / n;
        parts.kl_gaussian += p.kl_gaussian / n;
        parts.kl_bernoulli += p.kl_bernoulli / n;
        parts.scc += p.scc / n;
        for (acc, &gi) in gradient.iter_mut().zip(g) {
            *acc += gi / n;
        }
    }

    let lambdas = cfg.effective_lambdas();
    let total = total_loss(&parts, &lambdas)?;

    // decoupled weight decay with bias-corrected moment adaptation
    state.opt.steps += 1;
    let k = state.opt.steps as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(k);
    let bc2 = 1.0 - ADAM_BETA2.powi(k);
    let lr = cfg.learning_rate;
    let wd = cfg.weight_decay;
    let values = state.params.values_mut();
    for i in 0..values.len() {
        let g = gradient[i];
        state.opt.m[i] = ADAM_BETA1 * state.opt.m[i] + (1.0 - ADAM_BETA1) * g;
        state.opt.v[i] = ADAM_BETA2 * state.opt.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.opt.m[i] / bc1;
        let v_hat = state.opt.v[i] / bc2;
        values[i] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + wd * values[i]);
    }

    Ok(StepOutput { parts, total, gradient })
}

/// Builds the composite-loss tape for one sample and runs backward.
fn sample_loss_and_grad(
    draw: &SampleDraw,
    params: &ModelParams,
    cfg: &TrainingConfig,
    scheds: &(NoiseSchedule, NoiseSchedule),
) -> (LossParts, Vec<f64>) {
    let lambdas = cfg.effective_lambdas();
    let fuse = cfg.conditioner == ConditionerMode::Mfcm;
    let emb = embedding::time_embedding(draw.t, cfg.net.time_dim, cfg.t_steps);
    let mask_tensor = Tensor::from_lattice(&draw.mask);

    let mut tape = Tape::new(params.values());
    let image = tape.input(Tensor::from_lattice(&draw.image));
    let cond = mfcm::forward(&mut tape, params, &cfg.net, image, fuse);

    let mut parts = LossParts::default();
    let mut terms: Vec<(nn::NodeId, f64)> = Vec::new();

    if let Some(eps) = &draw.eps {
        let sched = &scheds.0;
        let x_t = gaussian::forward_marginal(&draw.mask, draw.t, sched, eps);
        let x_t_node = tape.input(Tensor::from_lattice(&x_t));
        let eps_hat = denoiser::forward(
            &mut tape,
            params,
            &cfg.net,
            denoiser::GAUSSIAN_PREFIX,
            x_t_node,
            &cond.scales,
            &emb,
        );
        let l_g = tape.mse_mean(eps_hat, &Tensor::from_lattice(eps));
        parts.gaussian = tape.value(l_g).scalar_value();
        terms.push((l_g, lambdas[0]));

        if lambdas[2] > 0.0 {
            // reverse-transition mean as a function of the predicted noise;
            // the KL regularizer uses the always-positive step variance
            let beta = sched.beta(draw.t);
            let ab = sched.alpha_bar(draw.t);
            let c_x = 1.0 / (1.0 - beta).sqrt();
            let c_e = beta / ((1.0 - ab).sqrt() * (1.0 - beta).sqrt());
            let mu = tape.lincomb(vec![(x_t_node, c_x), (eps_hat, -c_e)]);
            let l_klg = tape.gauss_kl_mean(mu, beta);
            parts.kl_gaussian = tape.value(l_klg).scalar_value();
            terms.push((l_klg, lambdas[2]));
        }
    }

    if let Some(bits) = &draw.bits {
        let bits_node = tape.input(Tensor::from_lattice(bits));
        let head = denoiser::forward(
            &mut tape,
            params,
            &cfg.net,
            denoiser::BERNOULLI_PREFIX,
            bits_node,
            &cond.scales,
            &emb,
        );
        let prob = tape.sigmoid(head);
        let l_b = tape.bce_mean(prob, &mask_tensor);
        parts.bernoulli = tape.value(l_b).scalar_value();
        terms.push((l_b, lambdas[1]));

        if lambdas[3] > 0.0 {
            let l_klb = tape.bern_kl_mean(prob);
            parts.kl_bernoulli = tape.value(l_klb).scalar_value();
            terms.push((l_klb, lambdas[3]));
        }
    }

    if lambdas[4] > 0.0 {
        let l_scc = tape.mse_mean(cond.scc, &mask_tensor);
        parts.scc = tape.value(l_scc).scalar_value();
        terms.push((l_scc, lambdas[4]));
    }

    let root = tape.scalar_sum(terms);
    let mut grads = params.zero_grad();
    tape.backward(root, &mut grads);
    (parts, grads)
}

/// Advances training until the global step counter reaches `target_step`,
/// sampling batches with replacement. `sink` fires exactly when the global
/// step is a multiple of `log_interval`, so logs from an interrupted run
/// plus its resume concatenate to the uninterrupted log bytewise.
/// Numerical failures are tagged with the step index.
pub fn train_loop(
    dataset: &[SampleRecord],
    state: &mut TrainState,
    cfg: &TrainingConfig,
    target_step: u64,
    sink: &mut dyn FnMut(u64, &LossParts, f64),
) -> Result<()> {
    assert!(!dataset.is_empty(), "training needs a non-empty dataset");
    let scheds = cfg.schedules()?;
    while state.step < target_step {
        let batch: Vec<&SampleRecord> = (0..cfg.batch_size)
            .map(|_| &dataset[state.rng.random_range(0..dataset.len())])
            .collect();
        let out = train_step(&batch, state, cfg, &scheds).map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("step {}: {msg}", state.step + 1)),
            other => other,
        })?;
        state.step += 1;
        if state.step % cfg.log_interval as u64 == 0 {
            sink(state.step, &out.parts, out.total);
        }
    }
    Ok(())
}
