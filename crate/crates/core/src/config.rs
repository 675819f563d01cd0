//! Run configuration: typed values behind a flat key=value text format.
//!
//! The file format is line-oriented UTF-8: `key=value`, `#` comments,
//! blank lines ignored. Unknown keys are rejected with the offending line
//! number. Rendering is canonical (fixed key order), so parse→render is a
//! fixed point and configs embedded in checkpoints round-trip bytewise.

use crate::error::{Error, Result};
use crate::nn::NetConfig;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    Gaussian,
    Bernoulli,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditionerMode {
    /// Independent streams, no cross-resolution exchange.
    Plain,
    /// Full multi-scale fusion conditioning.
    Mfcm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// Only the two noise-estimation terms.
    Base,
    /// Adds the two prior-KL regularizers.
    Kl,
    /// Adds the spatial coherence term as well.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerMode {
    /// Ancestral sampling over the full chain.
    Ddpm,
    /// Deterministic strided sampling.
    Ddim,
}

/// Everything a training or sampling run needs, minus the dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub seed: u64,
    pub t_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Optional separate schedule endpoints for the Bernoulli chain.
    pub bernoulli_beta_min: Option<f64>,
    pub bernoulli_beta_max: Option<f64>,
    /// Weights of the five loss terms, in order: Gaussian, Bernoulli,
    /// Gaussian KL, Bernoulli KL, spatial coherence.
    pub lambdas: [f64; 5],
    pub train_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub noise: NoiseMode,
    pub conditioner: ConditionerMode,
    pub loss: LossMode,
    pub sampler: SamplerMode,
    /// Timestep stride for the strided sampler.
    pub stride: usize,
    /// Reverse-chain samples per branch fed into fusion.
    pub ensemble: usize,
    /// Random horizontal flip augmentation during training.
    pub hflip: bool,
    /// Replace the learned denoiser with the ground-truth oracle at
    /// evaluation time (test plumbing).
    pub oracle_denoiser: bool,
    pub log_interval: usize,
    /// Checkpoint every n steps; 0 writes only the final checkpoint.
    pub checkpoint_interval: usize,
    pub net: NetConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            seed: 0,
            t_steps: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
            bernoulli_beta_min: None,
            bernoulli_beta_max: None,
            lambdas: [1.0, 1.0, 0.01, 0.01, 0.1],
            train_steps: 2000,
            batch_size: 8,
            learning_rate: 5e-5,
            weight_decay: 1e-4,
            noise: NoiseMode::Both,
            conditioner: ConditionerMode::Mfcm,
            loss: LossMode::Full,
            sampler: SamplerMode::Ddim,
            stride: 50,
            ensemble: 1,
            hflip: false,
            oracle_denoiser: false,
            log_interval: 10,
            checkpoint_interval: 0,
            net: NetConfig::default(),
        }
    }
}

impl TrainingConfig {
    /// Loss weights after applying the ablation flags.
    pub fn effective_lambdas(&self) -> [f64; 5] {
        let mut l = self.lambdas;
        match self.loss {
            LossMode::Base => {
                l[2] = 0.0;
                l[3] = 0.0;
                l[4] = 0.0;
            }
            LossMode::Kl => l[4] = 0.0,
            LossMode::Full => {}
        }
        match self.noise {
            NoiseMode::Gaussian => {
                l[1] = 0.0;
                l[3] = 0.0;
            }
            NoiseMode::Bernoulli => {
                l[0] = 0.0;
                l[2] = 0.0;
            }
            NoiseMode::Both => {}
        }
        l
    }

    /// Schedules for the two chains; shared unless overridden.
    pub fn schedules(&self) -> Result<(NoiseSchedule, NoiseSchedule)> {
        let gaussian = NoiseSchedule::linear(self.t_steps, self.beta_min, self.beta_max)?;
        let bernoulli = match (self.bernoulli_beta_min, self.bernoulli_beta_max) {
            (None, None) => gaussian.clone(),
            (lo, hi) => NoiseSchedule::linear(
                self.t_steps,
                lo.unwrap_or(self.beta_min),
                hi.unwrap_or(self.beta_max),
            )?,
        };
        Ok((gaussian, bernoulli))
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.schedules()?;
        if self.lambdas.iter().any(|&l| l < 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        if self.ensemble == 0 {
            return Err(Error::Config("ensemble must be positive".into()));
        }
        if self.log_interval == 0 {
            return Err(Error::Config("log_interval must be positive".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        Ok(())
    }
}

impl std::str::FromStr for NoiseMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gaussian" => Ok(NoiseMode::Gaussian),
            "bernoulli" => Ok(NoiseMode::Bernoulli),
            "both" => Ok(NoiseMode::Both),
            _ => Err(format!("invalid noise mode '{s}' (gaussian|bernoulli|both)")),
        }
    }
}

impl std::str::FromStr for ConditionerMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "plain" => Ok(ConditionerMode::Plain),
            "mfcm" => Ok(ConditionerMode::Mfcm),
            _ => Err(format!("invalid conditioner '{s}' (plain|mfcm)")),
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "base" => Ok(LossMode::Base),
            "kl" => Ok(LossMode::Kl),
            "full" => Ok(LossMode::Full),
            _ => Err(format!("invalid loss mode '{s}' (base|kl|full)")),
        }
    }
}

impl std::str::FromStr for SamplerMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ddpm" => Ok(SamplerMode::Ddpm),
            "ddim" => Ok(SamplerMode::Ddim),
            _ => Err(format!("invalid sampler '{s}' (ddpm|ddim)")),
        }
    }
}

fn noise_mode_str(m: NoiseMode) -> &'static str {
    match m {
        NoiseMode::Gaussian => "gaussian",
        NoiseMode::Bernoulli => "bernoulli",
        NoiseMode::Both => "both",
    }
}

fn conditioner_str(m: ConditionerMode) -> &'static str {
    match m {
        ConditionerMode::Plain => "plain",
        ConditionerMode::Mfcm => "mfcm",
    }
}

fn loss_str(m: LossMode) -> &'static str {
    match m {
        LossMode::Base => "base",
        LossMode::Kl => "kl",
        LossMode::Full => "full",
    }
}

fn sampler_str(m: SamplerMode) -> &'static str {
    match m {
        SamplerMode::Ddpm => "ddpm",
        SamplerMode::Ddim => "ddim",
    }
}

/// Canonical text form: fixed key order, one key per line.
pub fn render_config(cfg: &TrainingConfig) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        s.push_str(k);
        s.push('=');
        s.push_str(&v);
        s.push('\n');
    };
    kv("seed", cfg.seed.to_string());
    kv("t_steps", cfg.t_steps.to_string());
    kv("beta_min", cfg.beta_min.to_string());
    kv("beta_max", cfg.beta_max.to_string());
    if let Some(v) = cfg.bernoulli_beta_min {
        kv("bernoulli_beta_min", v.to_string());
    }
    if let Some(v) = cfg.bernoulli_beta_max {
        kv("bernoulli_beta_max", v.to_string());
    }
    for (i, l) in cfg.lambdas.iter().enumerate() {
        kv(&format!("lambda{}", i + 1), l.to_string());
    }
    kv("train_steps", cfg.train_steps.to_string());
    kv("batch_size", cfg.batch_size.to_string());
    kv("learning_rate", cfg.learning_rate.to_string());
    kv("weight_decay", cfg.weight_decay.to_string());
    kv("noise", noise_mode_str(cfg.noise).to_string());
    kv("conditioner", conditioner_str(cfg.conditioner).to_string());
    kv("loss", loss_str(cfg.loss).to_string());
    kv("sampler", sampler_str(cfg.sampler).to_string());
    kv("stride", cfg.stride.to_string());
    kv("ensemble", cfg.ensemble.to_string());
    kv("hflip", cfg.hflip.to_string());
    kv("oracle_denoiser", cfg.oracle_denoiser.to_string());
    kv("log_interval", cfg.log_interval.to_string());
    kv("checkpoint_interval", cfg.checkpoint_interval.to_string());
    kv("base_channels", cfg.net.base_channels.to_string());
    kv("mid_channels", cfg.net.mid_channels.to_string());
    kv("cond_channels", cfg.net.cond_channels.to_string());
    kv("cond_stages", cfg.net.cond_stages.to_string());
    kv("scales", cfg.net.scales.to_string());
    kv("time_dim", cfg.net.time_dim.to_string());
    kv("cross_attention", cfg.net.cross_attention.to_string());
    s
}

/// Parses key=value text over the defaults, then validates.
pub fn parse_config(text: &str) -> Result<TrainingConfig> {
    let mut cfg = TrainingConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let lineno = lineno + 1;
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: lineno,
            msg: format!("expected key=value, got '{line}'"),
        })?;
        let key = key.trim();
        let value = value.trim();
        apply_key(&mut cfg, key, value).map_err(|msg| Error::Parse { line: lineno, msg })?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn apply_key(cfg: &mut TrainingConfig, key: &str, value: &str) -> std::result::Result<(), String> {
    fn num<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
        value.parse::<T>().map_err(|_| format!("invalid value '{value}' for key '{key}'"))
    }
    match key {
        "seed" => cfg.seed = num(key, value)?,
        "t_steps" => cfg.t_steps = num(key, value)?,
        "beta_min" => cfg.beta_min = num(key, value)?,
        "beta_max" => cfg.beta_max = num(key, value)?,
        "bernoulli_beta_min" => cfg.bernoulli_beta_min = Some(num(key, value)?),
        "bernoulli_beta_max" => cfg.bernoulli_beta_max = Some(num(key, value)?),
        "lambda1" => cfg.lambdas[0] = num(key, value)?,
        "lambda2" => cfg.lambdas[1] = num(key, value)?,
        "lambda3" => cfg.lambdas[2] = num(key, value)?,
        "lambda4" => cfg.lambdas[3] = num(key, value)?,
        "lambda5" => cfg.lambdas[4] = num(key, value)?,
        "train_steps" => cfg.train_steps = num(key, value)?,
        "batch_size" => cfg.batch_size = num(key, value)?,
        "learning_rate" => cfg.learning_rate = num(key, value)?,
        "weight_decay" => cfg.weight_decay = num(key, value)?,
        "noise" => cfg.noise = value.parse()?,
        "conditioner" => cfg.conditioner = value.parse()?,
        "loss" => cfg.loss = value.parse()?,
        "sampler" => cfg.sampler = value.parse()?,
        "stride" => cfg.stride = num(key, value)?,
        "ensemble" => cfg.ensemble = num(key, value)?,
        "hflip" => cfg.hflip = num(key, value)?,
        "oracle_denoiser" => cfg.oracle_denoiser = num(key, value)?,
        "log_interval" => cfg.log_interval = num(key, value)?,
        "checkpoint_interval" => cfg.checkpoint_interval = num(key, value)?,
        "base_channels" => cfg.net.base_channels = num(key, value)?,
        "mid_channels" => cfg.net.mid_channels = num(key, value)?,
        "cond_channels" => cfg.net.cond_channels = num(key, value)?,
        "cond_stages" => cfg.net.cond_stages = num(key, value)?,
        "scales" => cfg.net.scales = num(key, value)?,
        "time_dim" => cfg.net.time_dim = num(key, value)?,
        "cross_attention" => cfg.net.cross_attention = num(key, value)?,
        _ => return Err(format!("unknown key '{key}'")),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_pin_published_values() {
        let cfg = TrainingConfig::default();
        assert_eq!(cfg.lambdas, [1.0, 1.0, 0.01, 0.01, 0.1]);
        assert_eq!(cfg.learning_rate, 5e-5);
        assert_eq!(cfg.t_steps, 1000);
        assert_eq!(cfg.sampler, SamplerMode::Ddim);
        assert_eq!(cfg.stride, 50);
        assert_eq!(cfg.beta_min, 1e-4);
        assert_eq!(cfg.beta_max, 0.02);
    }

    #[test]
    fn render_parse_is_canonical_fixed_point() {
        let mut cfg = TrainingConfig::default();
        cfg.seed = 99;
        cfg.lambdas[4] = 0.25;
        cfg.noise = NoiseMode::Gaussian;
        cfg.bernoulli_beta_min = Some(2e-4);
        cfg.bernoulli_beta_max = Some(0.03);
        let text = render_config(&cfg);
        let parsed = parse_config(&text).unwrap();
        assert_eq!(parsed, cfg);
        assert_eq!(render_config(&parsed), text);
    }

    #[test]
    fn unknown_key_names_line() {
        let err = parse_config("seed=1\nbogus_key=2\n").unwrap_err();
        match err {
            Error::Parse { line, msg } => {
                assert_eq!(line, 2);
                assert!(msg.contains("bogus_key"));
            }
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn bad_value_names_key() {
        let err = parse_config("batch_size=many\n").unwrap_err();
        match err {
            Error::Parse { line, msg } => {
                assert_eq!(line, 1);
                assert!(msg.contains("batch_size"));
            }
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let cfg = parse_config("# a comment\n\nseed=5\n  t_steps = 100  \n").unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.t_steps, 100);
    }

    #[test]
    fn ablation_flags_zero_the_right_weights() {
        let mut cfg = TrainingConfig::default();
        cfg.loss = LossMode::Base;
        assert_eq!(cfg.effective_lambdas(), [1.0, 1.0, 0.0, 0.0, 0.0]);
        cfg.loss = LossMode::Kl;
        assert_eq!(cfg.effective_lambdas(), [1.0, 1.0, 0.01, 0.01, 0.0]);
        cfg.loss = LossMode::Full;
        cfg.noise = NoiseMode::Gaussian;
        assert_eq!(cfg.effective_lambdas(), [1.0, 0.0, 0.01, 0.0, 0.1]);
        cfg.noise = NoiseMode::Bernoulli;
        assert_eq!(cfg.effective_lambdas(), [0.0, 1.0, 0.0, 0.01, 0.1]);
    }

    #[test]
    fn separate_bernoulli_schedule_honored() {
        let mut cfg = TrainingConfig::default();
        cfg.bernoulli_beta_min = Some(5e-4);
        cfg.bernoulli_beta_max = Some(0.05);
        let (g, b) = cfg.schedules().unwrap();
        assert_eq!(g.beta(1), 1e-4);
        assert_eq!(b.beta(1), 5e-4);
        assert_eq!(b.beta(1000), 0.05);
    }

    #[test]
    fn validate_rejects_bad_values() {
        let mut cfg = TrainingConfig::default();
        cfg.lambdas[0] = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainingConfig::default();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainingConfig::default();
        cfg.beta_max = 1.5;
        assert!(cfg.validate().is_err());
    }
}
