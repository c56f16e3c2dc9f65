use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ssim, train_step, TrainConfig, TrainExample, TrainState};
use crate::contour_ops::{gaussian_blur, postprocess, PostprocessOptions};
use crate::data::{assemble_condition, contour_from_mask, resize_nearest, Sample};
use crate::denoiser::checkpoint::{read_container, write_container, ArrayEntry};
use crate::denoiser::{save_checkpoint, CheckpointMeta, DenoiserConfig, DenoiserModel};
use crate::diffusion::{run_inference, InferenceConfig};
use crate::error::{ensure, Error, Result};
use crate::grid::{BinaryImage, ConditionStack, GrayImage};
use crate::metrics::{boundary_f1, PointSet};
use crate::rng::{derive_seed, rng_for, stream};

pub const MODEL_FILE: &str = "model.ckpt";
pub const EMA_FILE: &str = "ema.ckpt";
pub const BEST_EMA_FILE: &str = "best_ema.ckpt";
pub const STATE_FILE: &str = "state.ckpt";
pub const LOG_FILE: &str = "train_log.ndjson";

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: usize,
    /// Seconds since the run started, including earlier sessions.
    pub wall_time: f64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub val_ssim: Option<f64>,
    pub val_f1: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from `state.ckpt` in the output directory when present.
    pub resume: bool,
    /// Stop (with everything saved) once this many steps are complete.
    pub stop_after: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps: u64,
    pub best_step: Option<u64>,
    pub model: PathBuf,
    pub ema: PathBuf,
    pub best_ema: PathBuf,
    pub log: PathBuf,
    /// Whether the run stopped early because of `stop_after`.
    pub interrupted: bool,
}

/// A validation sample: conditioning, a blurred target raster for SSIM and
/// the thin ground-truth contour for F1.
#[derive(Debug, Clone)]
pub struct ValExample {
    pub condition: ConditionStack,
    pub soft_target: GrayImage,
    pub gt_contour: BinaryImage,
}

impl ValExample {
    pub fn from_sample(sample: &Sample, cfg: &TrainConfig) -> Result<Self> {
        let size = cfg.image_size;
        let mask = resize_nearest(&sample.gt_mask, size, size);
        let with_id = |e: Error| Error::Dataset(format!("sample {:?}: {e}", sample.id));
        let target = contour_from_mask(&mask, cfg.target_thickness).map_err(with_id)?;
        Ok(Self {
            condition: assemble_condition(sample, size)?,
            soft_target: gaussian_blur(&target.to_gray(), 1.0)?,
            gt_contour: contour_from_mask(&mask, 1).map_err(with_id)?,
        })
    }
}

/// Mean SSIM and boundary F1 of a model's predictions on `val`. The SSIM
/// input is the soft contour map: per pixel, the largest probability among
/// categories above the decode threshold.
pub fn validate(model: &DenoiserModel<f32>, val: &[ValExample], cfg: &TrainConfig) -> Result<(f64, f64)> {
    ensure!(!val.is_empty(), InvalidArgument, "empty validation set");
    let icfg = InferenceConfig::new(cfg.timesteps, cfg.val_steps, cfg.n_categories);
    let opts = PostprocessOptions::default();
    let scores = val
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut icfg = icfg.clone();
            icfg.seed = derive_seed(cfg.seed, &[stream::SAMPLE, i as u64]);
            icfg.init = cfg.val_init;
            let out = run_inference(model, &ex.condition, &icfg)?;
            let n = out.state.n_categories();
            let soft: Vec<f64> = out
                .state
                .pixels()
                .map(|px| px[icfg.threshold + 1..n].iter().cloned().fold(0.0, f64::max))
                .collect();
            let soft = GrayImage::from_vec(out.state.height(), out.state.width(), soft)?;
            let s = ssim(&soft, &ex.soft_target)?;
            let contour = postprocess(&out.decoded, &opts, None)?.contour;
            let f1 = boundary_f1(
                &PointSet::from_image(&contour),
                &PointSet::from_image(&ex.gt_contour),
                cfg.val_tolerance,
            )?;
            Ok((s, f1))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = scores.len() as f64;
    Ok((
        scores.iter().map(|s| s.0).sum::<f64>() / n,
        scores.iter().map(|s| s.1).sum::<f64>() / n,
    ))
}

#[derive(Debug, Serialize, Deserialize)]
struct StateExtra {
    step: u64,
    adam_t: u64,
    history: Vec<(u64, f64)>,
    best: Option<(u64, f64)>,
    elapsed: f64,
    train_config: TrainConfig,
}

const STATE_ARRAYS: [&str; 4] = ["params", "ema", "adam_m", "adam_v"];

/// Writes everything needed to continue training bit-exactly.
pub fn save_train_state(path: &Path, state: &TrainState, cfg: &TrainConfig) -> Result<()> {
    let n = state.model.param_count();
    let data: [&[f32]; 4] = [state.model.params(), &state.ema, &state.optimizer.m, &state.optimizer.v];
    let arrays: Vec<(ArrayEntry, &[f32])> = STATE_ARRAYS
        .iter()
        .zip(data)
        .map(|(name, d)| (ArrayEntry { name: name.to_string(), shape: vec![n] }, d))
        .collect();
    let extra = StateExtra {
        step: state.step,
        adam_t: state.optimizer.t,
        history: state.history.clone(),
        best: state.best,
        elapsed: state.elapsed,
        train_config: cfg.clone(),
    };
    let extra = serde_json::to_value(&extra).map_err(|e| Error::Serialization(e.to_string()))?;
    let meta = CheckpointMeta {
        step: state.step,
        ema: false,
        label: Some("train-state".into()),
    };
    write_container(path, state.model.config(), &meta, &arrays, extra)
}

/// Reads a state written by [`save_train_state`] together with the training
/// config it was produced under.
pub fn load_train_state(path: &Path) -> Result<(TrainState, TrainConfig)> {
    let c = read_container(path)?;
    let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
    let extra: StateExtra =
        serde_json::from_value(c.extra).map_err(|e| bad(format!("not a training state: {e}")))?;
    ensure!(
        c.arrays.len() == STATE_ARRAYS.len() && c.arrays.iter().zip(STATE_ARRAYS).all(|((e, _), n)| e.name == n),
        Checkpoint,
        "{}: unexpected arrays in training state",
        path.display()
    );
    let mut arrays = c.arrays.into_iter().map(|(_, d)| d);
    let mut next = || arrays.next().expect("length checked");
    let model = DenoiserModel::from_params(c.config, next())?;
    let mut state = TrainState::new(model, &extra.train_config);
    state.ema = next();
    state.optimizer.m = next();
    state.optimizer.v = next();
    let n = state.model.param_count();
    ensure!(
        state.ema.len() == n && state.optimizer.m.len() == n && state.optimizer.v.len() == n,
        Checkpoint,
        "{}: array sizes disagree",
        path.display()
    );
    state.optimizer.t = extra.adam_t;
    state.step = extra.step;
    state.history = extra.history;
    state.best = extra.best;
    state.elapsed = extra.elapsed;
    Ok((state, extra.train_config))
}

fn save_model(path: &Path, config: &DenoiserConfig, params: &[f32], meta: CheckpointMeta) -> Result<()> {
    let model = DenoiserModel::from_params(config.clone(), params.to_vec())?;
    save_checkpoint(path, &model, &meta)
}

/// Fields that may differ between an interrupted run and its resumption.
fn same_run(a: &TrainConfig, b: &TrainConfig) -> bool {
    let strip = |c: &TrainConfig| TrainConfig { epochs: 0, ..c.clone() };
    strip(a) == strip(b)
}

/// Keeps only log records up to `step`, so a resumed run continues the log
/// where its state left off.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    let Ok(f) = File::open(path) else { return Ok(()) };
    let mut kept = String::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        match serde_json::from_str::<LogRecord>(&line) {
            Ok(r) if r.step <= step => {
                kept.push_str(&line);
                kept.push('\n');
            }
            _ => {}
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Runs `epochs x ceil(N / batch)` steps. Every `eval_every` steps (and at
/// the end) the EMA weights are validated, the model and EMA checkpoints are
/// written, and the best-EMA pick is updated. On divergence the last good
/// state is saved before the error is returned.
pub fn train(
    cfg: &TrainConfig,
    model_config: &DenoiserConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    out_dir: &Path,
    opts: &TrainOptions,
    progress: &mut dyn FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    cfg.check_model(model_config)?;
    ensure!(!train_set.is_empty(), Dataset, "empty training set");
    ensure!(!val_set.is_empty(), Dataset, "empty validation set");
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let examples = train_set
        .par_iter()
        .map(|s| TrainExample::from_sample(s, cfg))
        .collect::<Result<Vec<_>>>()?;
    let val = val_set
        .par_iter()
        .map(|s| ValExample::from_sample(s, cfg))
        .collect::<Result<Vec<_>>>()?;
    let process = cfg.process()?;

    let paths = TrainOutcome {
        steps: 0,
        best_step: None,
        model: out_dir.join(MODEL_FILE),
        ema: out_dir.join(EMA_FILE),
        best_ema: out_dir.join(BEST_EMA_FILE),
        log: out_dir.join(LOG_FILE),
        interrupted: false,
    };
    let state_path = out_dir.join(STATE_FILE);

    let mut state = if opts.resume && state_path.exists() {
        let (state, saved) = load_train_state(&state_path)?;
        ensure!(
            same_run(&saved, cfg),
            InvalidArgument,
            "{} was written with a different training config",
            state_path.display()
        );
        ensure!(
            state.model.config() == model_config,
            InvalidArgument,
            "{} was written with a different denoiser config",
            state_path.display()
        );
        truncate_log(&paths.log, state.step)?;
        state
    } else {
        if paths.log.exists() {
            fs::remove_file(&paths.log).map_err(|e| Error::io(&paths.log, e))?;
        }
        TrainState::new(DenoiserModel::new(model_config.clone(), cfg.seed)?, cfg)
    };

    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&paths.log)
        .map_err(|e| Error::io(&paths.log, e))?;

    let per_epoch = examples.len().div_ceil(cfg.batch_size);
    let total = (cfg.epochs * per_epoch) as u64;
    let started = Instant::now();
    let base_elapsed = state.elapsed;
    let mut interrupted = false;

    let save_all = |state: &TrainState, label: &str| -> Result<()> {
        let meta = |ema| CheckpointMeta { step: state.step, ema, label: Some(label.to_string()) };
        save_model(&paths.model, model_config, state.model.params(), meta(false))?;
        save_model(&paths.ema, model_config, &state.ema, meta(true))?;
        save_train_state(&state_path, state, cfg)
    };

    'epochs: for epoch in 0..cfg.epochs {
        if ((epoch + 1) * per_epoch) as u64 <= state.step {
            continue;
        }
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, &[stream::SHUFFLE, epoch as u64]));
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if ((epoch * per_epoch + b) as u64) < state.step {
                continue;
            }
            if opts.stop_after.is_some_and(|s| state.step >= s) {
                interrupted = true;
                break 'epochs;
            }
            let batch: Vec<&TrainExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let stats = match train_step(&mut state, &batch, &process, cfg) {
                Ok(s) => s,
                Err(e @ Error::Divergence(_)) => {
                    state.elapsed = base_elapsed + started.elapsed().as_secs_f64();
                    save_all(&state, "last-good")?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };

            let mut record = LogRecord {
                step: state.step,
                epoch,
                wall_time: 0.0,
                loss: stats.loss,
                lr: cfg.learning_rate,
                grad_norm: stats.grad_norm,
                val_ssim: None,
                val_f1: None,
            };
            if state.step % cfg.eval_every == 0 || state.step == total {
                let ema_model = state.ema_model();
                let (s, f1) = validate(&ema_model, &val, cfg)?;
                record.val_ssim = Some(s);
                record.val_f1 = Some(f1);
                if state.record_eval(s, cfg.ema_window) {
                    let meta = CheckpointMeta { step: state.step, ema: true, label: Some("best-ema".into()) };
                    save_checkpoint(&paths.best_ema, &ema_model, &meta)?;
                }
                state.elapsed = base_elapsed + started.elapsed().as_secs_f64();
                save_all(&state, "periodic")?;
            }
            record.wall_time = base_elapsed + started.elapsed().as_secs_f64();
            let line = serde_json::to_string(&record).map_err(|e| Error::Serialization(e.to_string()))?;
            writeln!(log, "{line}").map_err(|e| Error::io(&paths.log, e))?;
            progress(&record);
        }
    }

    state.elapsed = base_elapsed + started.elapsed().as_secs_f64();
    save_all(&state, if interrupted { "interrupted" } else { "final" })?;
    if state.best.is_none() && !interrupted {
        // Too few evaluations for a full window: fall back to the final EMA.
        let meta = CheckpointMeta { step: state.step, ema: true, label: Some("best-ema-fallback".into()) };
        save_model(&paths.best_ema, model_config, &state.ema, meta)?;
    }
    Ok(TrainOutcome {
        steps: state.step,
        best_step: state.best.map(|b| b.0),
        interrupted,
        ..paths
    })
}
