//! Command-line front end: dataset generation, training, evaluation, and
//! ablation sweeps, all byte-reproducible from a single seed.

mod svg;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use dnseg::checkpoint::{self, Checkpoint};
use dnseg::config::{
    parse_config, ConditionerMode, LossMode, NoiseMode, SamplerMode, TrainingConfig,
};
use dnseg::pgm;
use dnseg::pipeline::{
    evaluate, synth_dataset_with, train_loop, EvalReport, LossParts, SampleRecord, SynthOptions,
    TrainState,
};

#[derive(Parser)]
#[command(name = "dnseg", version, about = "Dual-noise diffusion segmentation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic image/mask dataset.
    GenData {
        /// Number of records.
        #[arg(long)]
        n: usize,
        /// Image side length (divisible by 4).
        #[arg(long, default_value_t = 32)]
        side: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Noise-free sanity mode: image = smoothed mask.
        #[arg(long, default_value_t = false)]
        clean: bool,
    },
    /// Train a model on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path to write (and to resume from).
        #[arg(long)]
        out: PathBuf,
        /// Config file (key=value lines); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from the checkpoint at --out.
        #[arg(long, default_value_t = false)]
        resume: bool,
        /// Target total step count (overrides the config).
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Loss log file (comma-separated); stdout when omitted.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        noise: Option<NoiseMode>,
        #[arg(long)]
        conditioner: Option<ConditionerMode>,
        #[arg(long)]
        loss: Option<LossMode>,
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sampler stride override.
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Sample only one branch of a dual-noise model.
        #[arg(long)]
        noise: Option<NoiseMode>,
        /// Deterministic report file; stdout when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Optional per-sample Dice histogram (SVG).
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Train and evaluate the ablation grid along the given axes.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated subset of: steps, conditioner, loss, noise.
        #[arg(long, default_value = "")]
        axes: String,
        #[arg(long)]
        out: PathBuf,
        /// Held-out directory; defaults to an 80/20 split of --data.
        #[arg(long)]
        eval_data: Option<PathBuf>,
    },
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::GenData { n, side, seed, out, clean } => cmd_gen_data(n, side, seed, &out, clean),
        Cmd::Train { data, out, config, resume, steps, seed, log, noise, conditioner, loss, stride } => {
            cmd_train(TrainArgs {
                data,
                out,
                config,
                resume,
                steps,
                seed,
                log,
                noise,
                conditioner,
                loss,
                stride,
            })
        }
        Cmd::Eval { data, checkpoint, stride, seed, noise, report, plot } => {
            cmd_eval(&data, &checkpoint, stride, seed, noise, report.as_deref(), plot.as_deref())
        }
        Cmd::Ablate { data, config, axes, out, eval_data } => {
            cmd_ablate(&data, config.as_deref(), &axes, &out, eval_data.as_deref())
        }
    }
}

fn cmd_gen_data(n: usize, side: usize, seed: u64, out: &Path, clean: bool) -> Result<()> {
    if n == 0 {
        bail!("--n must be at least 1");
    }
    if side < 8 || side % 4 != 0 {
        bail!("--side must be >= 8 and divisible by 4");
    }
    let records = synth_dataset_with(n, side, seed, SynthOptions { clean });
    pgm::write_dataset(out, &records, seed, clean)
        .with_context(|| format!("writing dataset to {}", out.display()))?;
    println!("wrote {n} records ({side}x{side}) to {}", out.display());
    Ok(())
}

struct TrainArgs {
    data: PathBuf,
    out: PathBuf,
    config: Option<PathBuf>,
    resume: bool,
    steps: Option<u64>,
    seed: Option<u64>,
    log: Option<PathBuf>,
    noise: Option<NoiseMode>,
    conditioner: Option<ConditionerMode>,
    loss: Option<LossMode>,
    stride: Option<usize>,
}

fn load_config(path: Option<&Path>) -> Result<TrainingConfig> {
    match path {
        Some(p) => {
            let text =
                fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            Ok(parse_config(&text)?)
        }
        None => Ok(TrainingConfig::default()),
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let dataset = pgm::read_dataset(&args.data)
        .with_context(|| format!("loading dataset from {}", args.data.display()))?;
    if dataset.is_empty() {
        bail!("dataset at {} is empty", args.data.display());
    }

    let (cfg, mut state) = if args.resume {
        let ck = checkpoint::load(&args.out)
            .with_context(|| format!("resuming from {}", args.out.display()))?;
        let mut cfg = ck.config.clone();
        if let Some(s) = args.steps {
            cfg.train_steps = s as usize;
        }
        let state = TrainState {
            params: ck.params,
            opt: ck.opt,
            step: ck.step,
            rng: ck.rng.restore(),
        };
        (cfg, state)
    } else {
        let mut cfg = load_config(args.config.as_deref())?;
        if let Some(s) = args.seed {
            cfg.seed = s;
        }
        if let Some(s) = args.steps {
            cfg.train_steps = s as usize;
        }
        if let Some(m) = args.noise {
            cfg.noise = m;
        }
        if let Some(m) = args.conditioner {
            cfg.conditioner = m;
        }
        if let Some(m) = args.loss {
            cfg.loss = m;
        }
        if let Some(s) = args.stride {
            cfg.stride = s;
        }
        cfg.validate()?;
        let state = TrainState::new(&cfg)?;
        (cfg, state)
    };

    let mut log_file = match &args.log {
        Some(path) => {
            let fresh = !args.resume || !path.exists();
            let mut opts = fs::OpenOptions::new();
            opts.create(true);
            if fresh {
                opts.write(true).truncate(true);
            } else {
                opts.append(true);
            }
            let mut f =
                opts.open(path).with_context(|| format!("opening log {}", path.display()))?;
            if fresh {
                writeln!(f, "step,L_G,L_B,L_KLG,L_KLB,L_SCC,total")?;
            }
            Some(f)
        }
        None => {
            if !args.resume {
                println!("step,L_G,L_B,L_KLG,L_KLB,L_SCC,total");
            }
            None
        }
    };

    let target = cfg.train_steps as u64;
    let mut log_error: Option<std::io::Error> = None;
    {
        let mut sink = |step: u64, parts: &LossParts, total: f64| {
            let line = format!(
                "{step},{},{},{},{},{},{total}",
                parts.gaussian, parts.bernoulli, parts.kl_gaussian, parts.kl_bernoulli, parts.scc
            );
            match &mut log_file {
                Some(f) => {
                    if let Err(e) = writeln!(f, "{line}") {
                        log_error.get_or_insert(e);
                    }
                }
                None => println!("{line}"),
            }
        };

        let interval = cfg.checkpoint_interval as u64;
        if interval > 0 {
            while state.step < target {
                let next = (state.step + interval).min(target);
                train_loop(&dataset, &mut state, &cfg, next, &mut sink)?;
                save_checkpoint(&args.out, &cfg, &state)?;
            }
        } else {
            train_loop(&dataset, &mut state, &cfg, target, &mut sink)?;
        }
    }
    if let Some(e) = log_error {
        return Err(e).context("writing loss log");
    }

    save_checkpoint(&args.out, &cfg, &state)?;
    println!(
        "trained to step {} ({} parameters); checkpoint at {}",
        state.step,
        state.params.len(),
        args.out.display()
    );
    Ok(())
}

fn save_checkpoint(path: &Path, cfg: &TrainingConfig, state: &TrainState) -> Result<()> {
    let ck = Checkpoint {
        config: cfg.clone(),
        step: state.step,
        rng: state.rng_state(cfg),
        params: state.params.clone(),
        opt: state.opt.clone(),
    };
    checkpoint::save(path, &ck).with_context(|| format!("writing checkpoint {}", path.display()))
}

fn render_report(cfg: &TrainingConfig, report: &EvalReport) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "sampler={}\n",
        match cfg.sampler {
            SamplerMode::Ddim => "ddim",
            SamplerMode::Ddpm => "ddpm",
        }
    ));
    s.push_str(&format!("stride={}\n", cfg.stride));
    s.push_str(&format!("t_steps={}\n", cfg.t_steps));
    s.push_str(&format!("seed={}\n", cfg.seed));
    s.push_str(&format!(
        "noise={}\n",
        match cfg.noise {
            NoiseMode::Gaussian => "gaussian",
            NoiseMode::Bernoulli => "bernoulli",
            NoiseMode::Both => "both",
        }
    ));
    s.push_str(&format!("count={}\n", report.dice_scores.len()));
    s.push_str("sample,dice\n");
    for (i, d) in report.dice_scores.iter().enumerate() {
        s.push_str(&format!("{i},{d}\n"));
    }
    s.push_str(&format!("mean_dice={}\n", report.mean_dice));
    s
}

fn cmd_eval(
    data: &Path,
    ckpt_path: &Path,
    stride: Option<usize>,
    seed: Option<u64>,
    noise: Option<NoiseMode>,
    report_path: Option<&Path>,
    plot_path: Option<&Path>,
) -> Result<()> {
    let ck = checkpoint::load(ckpt_path)
        .with_context(|| format!("loading checkpoint {}", ckpt_path.display()))?;
    let mut cfg = ck.config;
    if let Some(s) = stride {
        cfg.stride = s;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(m) = noise {
        cfg.noise = m;
    }
    let dataset = pgm::read_dataset(data)
        .with_context(|| format!("loading dataset from {}", data.display()))?;
    if dataset.is_empty() {
        bail!("dataset at {} is empty", data.display());
    }

    let report = evaluate(&dataset, &ck.params, &cfg)?;
    let text = render_report(&cfg, &report);
    match report_path {
        Some(p) => fs::write(p, &text).with_context(|| format!("writing report {}", p.display()))?,
        None => print!("{text}"),
    }
    if let Some(p) = plot_path {
        let svg = svg::histogram_svg(&report.dice_scores, 20, "per-sample dice");
        fs::write(p, svg).with_context(|| format!("writing plot {}", p.display()))?;
    }
    // wall-clock stays out of the deterministic report
    println!(
        "mean_dice={} images={} seconds_per_image={:.3}",
        report.mean_dice,
        report.dice_scores.len(),
        report.seconds_per_image
    );
    Ok(())
}

const STEP_MULTIPLIERS: [(f64, &str); 6] = [
    (0.25, "0.25x"),
    (0.5, "0.5x"),
    (0.75, "0.75x"),
    (1.0, "1x"),
    (1.25, "1.25x"),
    (1.5, "1.5x"),
];

fn cmd_ablate(
    data: &Path,
    config: Option<&Path>,
    axes: &str,
    out: &Path,
    eval_data: Option<&Path>,
) -> Result<()> {
    let base = load_config(config)?;
    let mut selected: Vec<&str> = Vec::new();
    for axis in axes.split(',').map(str::trim).filter(|a| !a.is_empty()) {
        match axis {
            "steps" | "conditioner" | "loss" | "noise" => {
                if !selected.contains(&axis) {
                    selected.push(axis);
                }
            }
            other => bail!("unknown ablation axis '{other}' (steps|conditioner|loss|noise)"),
        }
    }

    let full = pgm::read_dataset(data)
        .with_context(|| format!("loading dataset from {}", data.display()))?;
    let (train_set, eval_set): (Vec<SampleRecord>, Vec<SampleRecord>) = match eval_data {
        Some(dir) => (full, pgm::read_dataset(dir)?),
        None => {
            let n_eval = (full.len() / 5).max(1);
            if full.len() <= n_eval {
                bail!("dataset too small to split; provide --eval-data");
            }
            let split = full.len() - n_eval;
            let mut train = full;
            let eval = train.split_off(split);
            (train, eval)
        }
    };

    // per-axis variant lists, cartesian in a fixed axis order
    let mut variants: Vec<(String, TrainingConfig)> = vec![(String::new(), base.clone())];
    for axis in ["steps", "conditioner", "loss", "noise"] {
        if !selected.contains(&axis) {
            continue;
        }
        let mut next = Vec::new();
        for (label, cfg) in &variants {
            match axis {
                "steps" => {
                    for (mult, tag) in STEP_MULTIPLIERS {
                        let mut c = cfg.clone();
                        c.train_steps = (((cfg.train_steps as f64) * mult).round() as usize).max(1);
                        next.push((join_label(label, &format!("steps={tag}")), c));
                    }
                }
                "conditioner" => {
                    for (mode, tag) in
                        [(ConditionerMode::Plain, "plain"), (ConditionerMode::Mfcm, "mfcm")]
                    {
                        let mut c = cfg.clone();
                        c.conditioner = mode;
                        next.push((join_label(label, &format!("conditioner={tag}")), c));
                    }
                }
                "loss" => {
                    for (mode, tag) in
                        [(LossMode::Base, "base"), (LossMode::Kl, "kl"), (LossMode::Full, "full")]
                    {
                        let mut c = cfg.clone();
                        c.loss = mode;
                        next.push((join_label(label, &format!("loss={tag}")), c));
                    }
                }
                "noise" => {
                    for (mode, tag) in [
                        (NoiseMode::Gaussian, "gaussian"),
                        (NoiseMode::Bernoulli, "bernoulli"),
                        (NoiseMode::Both, "both"),
                    ] {
                        let mut c = cfg.clone();
                        c.noise = mode;
                        next.push((join_label(label, &format!("noise={tag}")), c));
                    }
                }
                _ => unreachable!(),
            }
        }
        variants = next;
    }

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut summary = String::from("variant,mean_dice\n");
    for (label, cfg) in &variants {
        let label = if label.is_empty() { "baseline" } else { label };
        let mut state = TrainState::new(cfg)?;
        train_loop(&train_set, &mut state, cfg, cfg.train_steps as u64, &mut |_, _, _| {})?;
        let report = evaluate(&eval_set, &state.params, cfg)?;
        println!("{label}: mean_dice={}", report.mean_dice);
        summary.push_str(&format!("{label},{}\n", report.mean_dice));
    }
    let summary_path = out.join("summary.csv");
    fs::write(&summary_path, summary)
        .with_context(|| format!("writing {}", summary_path.display()))?;
    println!("summary written to {}", summary_path.display());
    Ok(())
}

fn join_label(prefix: &str, part: &str) -> String {
    if prefix.is_empty() {
        part.to_string()
    } else {
        format!("{prefix}|{part}")
    }
}
