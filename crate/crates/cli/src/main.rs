//! `contour-refine`: generate synthetic data, train the denoiser, refine
//! contours, evaluate them and run ablation sweeps.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 training
//! divergence.

mod commands;
mod config;
mod overlay;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use contour_refine::contour_ops::Thinning;
use contour_refine::data::Split;
use contour_refine::diffusion::InitMode;
use contour_refine::metrics::ChamferMode;
use contour_refine::pipeline::ReverseMode;
use contour_refine::training::DiceMode;

use config::{AblationAxis, RunConfig};

/// An error caused by the invocation rather than the computation.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser)]
#[command(
    name = "contour-refine",
    version,
    about = "Discrete-diffusion contour refinement"
)]
struct Cli {
    /// Worker threads; 1 makes every run bit-reproducible.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Config file (TOML); flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with degraded guide masks.
    Generate(GenerateArgs),
    /// Train the denoiser.
    Train(TrainArgs),
    /// Refine contours with a trained model and write overlays.
    Infer(InferArgs),
    /// Score refined and guide contours against the ground truth.
    Eval(EvalArgs),
    /// Run an ablation sweep.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct OutArgs {
    /// Output directory (default: $CONTOUR_REFINE_OUTPUT/<command> or runs/<command>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    out: OutArgs,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_eval: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Guide-mask degradation severity in [0, 1].
    #[arg(long)]
    severity: Option<f64>,
    #[arg(long)]
    translucency: Option<f64>,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset directory or manifest file.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    n_categories: Option<usize>,
    /// Diffusion length T.
    #[arg(long)]
    timesteps: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    ema_tau: Option<f64>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long, value_parser = parse_dice_mode)]
    dice_mode: Option<DiceMode>,
    #[arg(long)]
    train_seed: Option<u64>,
}

#[derive(Args)]
struct InferFlags {
    /// Reverse steps S.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Decode threshold (default n_categories / 2 - 1).
    #[arg(long)]
    threshold: Option<usize>,
    /// Reverse process: simplified or standard.
    #[arg(long)]
    reverse: Option<ReverseMode>,
    #[arg(long, value_parser = parse_init)]
    init: Option<InitMode>,
    #[arg(long)]
    infer_seed: Option<u64>,
    /// Keep only the longest closed contour.
    #[arg(long)]
    pick_longest_closed: Option<bool>,
    #[arg(long)]
    close_radius: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, value_parser = parse_thinning)]
    thinning: Option<Thinning>,
    /// Split to run on.
    #[arg(long, value_parser = parse_split)]
    split: Option<Split>,
}

#[derive(Args)]
struct EvalFlags {
    /// F1 tolerance in pixels (default ceil(10 * size / 352)).
    #[arg(long)]
    tolerance: Option<f64>,
    /// Seeded inference repetitions; more than one reports t intervals.
    #[arg(long)]
    runs: Option<usize>,
    /// Confidence level of the intervals.
    #[arg(long)]
    level: Option<f64>,
    #[arg(long, value_parser = parse_chamfer)]
    chamfer_mode: Option<ChamferMode>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    out: OutArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from the state saved in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    out: OutArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint file or training directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    infer: InferFlags,
    /// Truncation mask PNG, or a directory of `<id>.png` masks.
    #[arg(long)]
    trunc_mask: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    out: OutArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    infer: InferFlags,
    #[command(flatten)]
    eval: EvalFlags,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    out: OutArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Trained model for the steps and reverse axes; trained on the spot when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    axis: Option<AblationAxis>,
    /// Comma-separated leg values (default depends on the axis).
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<usize>>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    infer: InferFlags,
    #[command(flatten)]
    eval: EvalFlags,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_dice_mode(s: &str) -> Result<DiceMode, String> {
    match s {
        "joint" => Ok(DiceMode::Joint),
        "per-channel" => Ok(DiceMode::PerChannel),
        _ => Err(format!("expected joint or per-channel, got {s:?}")),
    }
}

fn parse_init(s: &str) -> Result<InitMode, String> {
    match s {
        "uniform" => Ok(InitMode::Uniform),
        "absorbing" => Ok(InitMode::Absorbing),
        _ => Err(format!("expected uniform or absorbing, got {s:?}")),
    }
}

fn parse_thinning(s: &str) -> Result<Thinning, String> {
    match s {
        "zhang-suen" => Ok(Thinning::ZhangSuen),
        "guo-hall" => Ok(Thinning::GuoHall),
        _ => Err(format!("expected zhang-suen or guo-hall, got {s:?}")),
    }
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "eval" => Ok(Split::Eval),
        _ => Err(format!("expected train or eval, got {s:?}")),
    }
}

fn parse_chamfer(s: &str) -> Result<ChamferMode, String> {
    match s {
        "sum" => Ok(ChamferMode::Sum),
        "mean" => Ok(ChamferMode::Mean),
        "squared-sum" => Ok(ChamferMode::SquaredSum),
        _ => Err(format!("expected sum, mean or squared-sum, got {s:?}")),
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl ModelArgs {
    /// Applies the flags; reports whether any architecture-defining value
    /// was given explicitly.
    fn apply(&self, c: &mut RunConfig) -> bool {
        set(&mut c.train.n_categories, self.n_categories);
        set(&mut c.train.timesteps, self.timesteps);
        set(&mut c.train.image_size, self.image_size);
        if self.n_categories.is_some() {
            // Re-derive the decode threshold from the new category count.
            c.inference.threshold = None;
        }
        self.n_categories.is_some() || self.timesteps.is_some()
    }
}

impl TrainFlags {
    fn apply(&self, c: &mut RunConfig) {
        set(&mut c.model.base_channels, self.base_channels);
        set(&mut c.train.epochs, self.epochs);
        set(&mut c.train.learning_rate, self.lr);
        set(&mut c.train.batch_size, self.batch_size);
        set(&mut c.train.grad_clip_norm, self.grad_clip);
        set(&mut c.train.ema_tau, self.ema_tau);
        set(&mut c.train.eval_every, self.eval_every);
        set(&mut c.train.dice_mode, self.dice_mode);
        set(&mut c.train.seed, self.train_seed);
    }
}

impl InferFlags {
    fn apply(&self, c: &mut RunConfig) {
        set(&mut c.inference.steps, self.steps);
        set(&mut c.inference.alpha, self.alpha);
        if self.threshold.is_some() {
            c.inference.threshold = self.threshold;
        }
        set(&mut c.inference.reverse, self.reverse);
        set(&mut c.inference.init, self.init);
        set(&mut c.inference.seed, self.infer_seed);
        set(
            &mut c.postprocess.pick_longest_closed,
            self.pick_longest_closed,
        );
        set(&mut c.postprocess.close_radius, self.close_radius);
        set(&mut c.postprocess.sigma, self.sigma);
        set(&mut c.postprocess.thinning, self.thinning);
        set(&mut c.eval.split, self.split);
    }
}

impl EvalFlags {
    fn apply(&self, c: &mut RunConfig) {
        if self.tolerance.is_some() {
            c.eval.tolerance = self.tolerance;
        }
        set(&mut c.eval.runs, self.runs);
        set(&mut c.eval.level, self.level);
        set(&mut c.eval.chamfer_mode, self.chamfer_mode);
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let from_file = cli.config.is_some();
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    if let Some(n) = cfg.threads {
        if n == 0 {
            anyhow::bail!(Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }

    match cli.command {
        Command::Generate(a) => {
            cfg.command = "generate".into();
            let g = &mut cfg.generate;
            set(&mut g.n_train, a.n_train);
            set(&mut g.n_eval, a.n_eval);
            set(&mut g.size, a.size);
            set(&mut g.seed, a.seed);
            set(&mut g.severity, a.severity);
            set(&mut g.translucency, a.translucency);
            cfg.train.image_size = cfg.generate.size;
            let out = commands::output_dir(
                a.out.out.as_deref().or(cfg.paths.out.as_deref()),
                "generate",
            );
            cfg.paths.out = Some(out.clone());
            cfg.resolve()?;
            commands::generate(&cfg, &out, a.out.force)
        }
        Command::Train(a) => {
            cfg.command = "train".into();
            set(&mut cfg.paths.data, a.data.data.map(Some));
            a.model.apply(&mut cfg);
            a.train.apply(&mut cfg);
            set(&mut cfg.train.seed, a.seed);
            let out =
                commands::output_dir(a.out.out.as_deref().or(cfg.paths.out.as_deref()), "train");
            cfg.paths.out = Some(out.clone());
            cfg.resolve()?;
            commands::train(&cfg, &out, a.out.force, a.resume)
        }
        Command::Infer(a) => {
            cfg.command = "infer".into();
            set(&mut cfg.paths.data, a.data.data.map(Some));
            set(&mut cfg.paths.checkpoint, a.checkpoint.map(Some));
            set(&mut cfg.paths.trunc_mask, a.trunc_mask.map(Some));
            let explicit = a.model.apply(&mut cfg) || from_file;
            a.infer.apply(&mut cfg);
            let out =
                commands::output_dir(a.out.out.as_deref().or(cfg.paths.out.as_deref()), "infer");
            cfg.paths.out = Some(out.clone());
            commands::infer(&mut cfg, &out, a.out.force, explicit)
        }
        Command::Eval(a) => {
            cfg.command = "eval".into();
            set(&mut cfg.paths.data, a.data.data.map(Some));
            set(&mut cfg.paths.checkpoint, a.checkpoint.map(Some));
            let explicit = a.model.apply(&mut cfg) || from_file;
            a.infer.apply(&mut cfg);
            a.eval.apply(&mut cfg);
            let out =
                commands::output_dir(a.out.out.as_deref().or(cfg.paths.out.as_deref()), "eval");
            cfg.paths.out = Some(out.clone());
            commands::eval(&mut cfg, &out, a.out.force, explicit)
        }
        Command::Ablate(a) => {
            cfg.command = "ablate".into();
            set(&mut cfg.paths.data, a.data.data.map(Some));
            set(&mut cfg.paths.checkpoint, a.checkpoint.map(Some));
            set(&mut cfg.ablate.axis, a.axis);
            set(&mut cfg.ablate.values, a.values);
            let explicit = a.model.apply(&mut cfg) || from_file;
            a.train.apply(&mut cfg);
            a.infer.apply(&mut cfg);
            a.eval.apply(&mut cfg);
            set(&mut cfg.train.seed, a.seed);
            let out =
                commands::output_dir(a.out.out.as_deref().or(cfg.paths.out.as_deref()), "ablate");
            cfg.paths.out = Some(out.clone());
            commands::ablate(&mut cfg, &out, a.out.force, explicit)
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if commands::is_divergence(e) {
        3
    } else if e.chain().any(|c| c.downcast_ref::<Usage>().is_some()) {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
