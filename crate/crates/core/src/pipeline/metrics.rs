//! Dice metric and dataset evaluation.

use rayon::prelude::*;
use std::time::Instant;

use crate::config::TrainingConfig;
use crate::error::Result;
use crate::lattice::{assert_same_shape, MaskLattice};
use crate::nn::{self, ModelParams};
use crate::pipeline::data::SampleRecord;
use crate::pipeline::sample::{sample_with, Denoiser, ModelDenoiser, OracleDenoiser};
use crate::rng::{substream, STREAM_SAMPLE_BASE};

/// Overlap score 2|a∩b| / (|a|+|b|); two empty masks score 1.
pub fn dice(a: &MaskLattice, b: &MaskLattice) -> f64 {
    assert_same_shape(a, b);
    assert!(a.is_binary() && b.is_binary(), "dice needs binary masks");
    let mut inter = 0.0;
    let mut total = 0.0;
    for (&x, &y) in a.as_slice().iter().zip(b.as_slice()) {
        inter += x * y;
        total += x + y;
    }
    if total == 0.0 {
        1.0
    } else {
        2.0 * inter / total
    }
}

/// Evaluation outcome; timing is reported separately from the scores so
/// callers can keep deterministic artifacts free of wall-clock noise.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub dice_scores: Vec<f64>,
    pub mean_dice: f64,
    pub seconds_total: f64,
    pub seconds_per_image: f64,
}

/// Scores the model (or the ground-truth oracle, when configured) on every
/// record, with one independent sampling stream per record.
pub fn evaluate(
    dataset: &[SampleRecord],
    params: &ModelParams,
    cfg: &TrainingConfig,
) -> Result<EvalReport> {
    assert!(!dataset.is_empty(), "evaluate needs a non-empty dataset");
    let (sched_g, sched_b) = cfg.schedules()?;
    let fuse = cfg.conditioner == crate::config::ConditionerMode::Mfcm;
    let start = Instant::now();
    let dice_scores: Vec<f64> = dataset
        .par_iter()
        .enumerate()
        .map(|(idx, record)| {
            let mut rng = substream(cfg.seed, STREAM_SAMPLE_BASE + idx as u64);
            let cond = nn::mfcm_forward(&record.image, params, &cfg.net, fuse);
            let sample = if cfg.oracle_denoiser {
                let den = OracleDenoiser { x0: record.mask.clone(), sched: sched_g.clone() };
                sample_with(&den, &cond, record.image.shape(), cfg, &sched_g, &sched_b, &mut rng)
            } else {
                let den = ModelDenoiser { params, net: &cfg.net, t_total: cfg.t_steps };
                sample_with(&den, &cond, record.image.shape(), cfg, &sched_g, &sched_b, &mut rng)
            };
            dice(&sample.final_mask, &record.mask)
        })
        .collect();
    let seconds_total = start.elapsed().as_secs_f64();
    let mean_dice = dice_scores.iter().sum::<f64>() / dice_scores.len() as f64;
    Ok(EvalReport {
        mean_dice,
        seconds_per_image: seconds_total / dice_scores.len() as f64,
        seconds_total,
        dice_scores,
    })
}

/// Scores an arbitrary denoiser; used by tests and degenerate cases.
pub fn evaluate_with_denoiser(
    dataset: &[SampleRecord],
    den: &dyn Denoiser,
    params: &ModelParams,
    cfg: &TrainingConfig,
) -> Result<EvalReport> {
    assert!(!dataset.is_empty(), "evaluate needs a non-empty dataset");
    let (sched_g, sched_b) = cfg.schedules()?;
    let fuse = cfg.conditioner == crate::config::ConditionerMode::Mfcm;
    let start = Instant::now();
    let dice_scores: Vec<f64> = dataset
        .par_iter()
        .enumerate()
        .map(|(idx, record)| {
            let mut rng = substream(cfg.seed, STREAM_SAMPLE_BASE + idx as u64);
            let cond = nn::mfcm_forward(&record.image, params, &cfg.net, fuse);
            let sample =
                sample_with(den, &cond, record.image.shape(), cfg, &sched_g, &sched_b, &mut rng);
            dice(&sample.final_mask, &record.mask)
        })
        .collect();
    let seconds_total = start.elapsed().as_secs_f64();
    let mean_dice = dice_scores.iter().sum::<f64>() / dice_scores.len() as f64;
    Ok(EvalReport {
        mean_dice,
        seconds_per_image: seconds_total / dice_scores.len() as f64,
        seconds_total,
        dice_scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::data::synth_dataset;
    use crate::pipeline::sample::ConstDenoiser;
    use crate::rng::STREAM_DATA;

    #[test]
    fn dice_examples() {
        let a = MaskLattice::from_vec(2, 2, vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(dice(&a, &a), 1.0);
        let b = MaskLattice::from_vec(2, 2, vec![0.0, 0.0, 1.0, 1.0]);
        assert_eq!(dice(&a, &b), 0.0);
        let c = MaskLattice::from_vec(2, 4, vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let d = MaskLattice::from_vec(2, 4, vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(dice(&c, &d), 0.5);
        let empty = MaskLattice::zeros(3, 3);
        assert_eq!(dice(&empty, &empty), 1.0);
    }

    #[test]
    fn dice_symmetry_and_range() {
        let mut rng = crate::rng::substream(81, STREAM_DATA);
        use rand::Rng;
        for _ in 0..50 {
            let a = MaskLattice::from_fn(4, 4, |_, _| if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 });
            let b = MaskLattice::from_fn(4, 4, |_, _| if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 });
            let d1 = dice(&a, &b);
            assert_eq!(d1, dice(&b, &a));
            assert!((0.0..=1.0).contains(&d1));
        }
    }

    #[test]
    fn oracle_evaluation_scores_one() {
        let mut cfg = TrainingConfig::default();
        cfg.t_steps = 50;
        cfg.stride = 10;
        cfg.beta_min = 1e-3;
        cfg.beta_max = 0.2;
        cfg.oracle_denoiser = true;
        cfg.net.base_channels = 2;
        cfg.net.mid_channels = 2;
        cfg.net.cond_channels = 2;
        cfg.net.cond_stages = 1;
        let mut rng = crate::rng::substream(0, crate::rng::STREAM_INIT);
        let params = ModelParams::init(cfg.net.layout(), &mut rng);
        let data = synth_dataset(4, 16, 11);
        let report = evaluate(&data, &params, &cfg).unwrap();
        assert_eq!(report.mean_dice, 1.0);
        assert!(report.dice_scores.iter().all(|&d| d == 1.0));
    }

    #[test]
    fn empty_prediction_scores_zero() {
        let mut cfg = TrainingConfig::default();
        cfg.t_steps = 20;
        cfg.stride = 5;
        cfg.beta_min = 1e-3;
        cfg.beta_max = 0.2;
        cfg.noise = crate::config::NoiseMode::Bernoulli;
        cfg.net.base_channels = 2;
        cfg.net.mid_channels = 2;
        cfg.net.cond_channels = 2;
        cfg.net.cond_stages = 1;
        let mut rng = crate::rng::substream(0, crate::rng::STREAM_INIT);
        let params = ModelParams::init(cfg.net.layout(), &mut rng);
        let data = synth_dataset(3, 16, 12);
        // x̂0 probability pinned to 0 decodes to an empty mask everywhere
        let den = ConstDenoiser { eps_value: 0.0, prob_value: 0.0 };
        let report = evaluate_with_denoiser(&data, &den, &params, &cfg).unwrap();
        assert_eq!(report.mean_dice, 0.0);
    }

    #[test]
    fn per_sample_scores_average_to_mean() {
        let mut cfg = TrainingConfig::default();
        cfg.t_steps = 30;
        cfg.stride = 10;
        cfg.beta_min = 1e-3;
        cfg.beta_max = 0.2;
        cfg.oracle_denoiser = true;
        cfg.net.base_channels = 2;
        cfg.net.mid_channels = 2;
        cfg.net.cond_channels = 2;
        cfg.net.cond_stages = 1;
        let mut rng = crate::rng::substream(0, crate::rng::STREAM_INIT);
        let params = ModelParams::init(cfg.net.layout(), &mut rng);
        let data = synth_dataset(7, 16, 13);
        let report = evaluate(&data, &params, &cfg).unwrap();
        let mean = report.dice_scores.iter().sum::<f64>() / report.dice_scores.len() as f64;
        assert!((report.mean_dice - mean).abs() < 1e-12);
    }
}
