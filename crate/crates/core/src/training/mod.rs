//! Training: Gumbel-softmax corruption of clean targets, the DICE objective
//! on sigmoid scores, AdamW with global-norm clipping, an EMA copy of the
//! weights, and SSIM-based selection of the best EMA snapshot.

mod run;
mod ssim;

pub use run::{
    load_train_state, save_train_state, train, validate, LogRecord, TrainOptions, TrainOutcome, ValExample,
    BEST_EMA_FILE, EMA_FILE, LOG_FILE, MODEL_FILE, STATE_FILE,
};
pub use ssim::{ssim, SSIM_WINDOW};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{assemble_condition, make_target, Sample};
use crate::denoiser::{DenoiserConfig, DenoiserModel};
use crate::diffusion::{
    forward_marginal, gumbel_softmax_with_rng, DiffusionProcess, NoiseSchedule, DEFAULT_BETA_END,
    DEFAULT_BETA_START, InitMode,
};
use crate::error::{ensure, Error, Result};
use crate::grid::{CategoricalGrid, ConditionStack};
use crate::nn::{Float, Tensor};
use crate::rng::{derive_seed, rng_for, stream};

/// How the DICE sums are taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiceMode {
    /// One sum over every pixel-category element.
    #[default]
    Joint,
    /// DICE per category, then averaged.
    PerChannel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub grad_clip_norm: f64,
    pub ema_tau: f64,
    pub epochs: usize,
    /// Diffusion length `T`.
    pub timesteps: usize,
    pub n_categories: usize,
    pub dice_epsilon: f64,
    pub dice_mode: DiceMode,
    pub seed: u64,
    /// Validation period in optimizer steps.
    pub eval_every: u64,
    /// Number of consecutive evaluations averaged when picking the best EMA.
    pub ema_window: usize,
    pub gumbel_temperature: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Side length samples are resized to.
    pub image_size: usize,
    pub target_thickness: usize,
    /// Reverse steps used for validation predictions.
    pub val_steps: usize,
    pub val_tolerance: f64,
    /// Reverse-process initialization used for validation predictions.
    pub val_init: InitMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 15,
            grad_clip_norm: 200.0,
            ema_tau: 0.98,
            epochs: 30,
            timesteps: 100,
            n_categories: 8,
            dice_epsilon: 1e-6,
            dice_mode: DiceMode::Joint,
            seed: 0,
            eval_every: 20,
            ema_window: 5,
            gumbel_temperature: 1.0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            image_size: 64,
            target_thickness: 2,
            val_steps: 10,
            val_tolerance: 3.0,
            val_init: InitMode::Uniform,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("grad_clip_norm", self.grad_clip_norm),
            ("dice_epsilon", self.dice_epsilon),
            ("gumbel_temperature", self.gumbel_temperature),
            ("adam_epsilon", self.adam_epsilon),
        ];
        for (name, v) in positive {
            ensure!(v > 0.0 && v.is_finite(), InvalidArgument, "{name} must be positive, got {v}");
        }
        let counts = [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("timesteps", self.timesteps),
            ("ema_window", self.ema_window),
            ("image_size", self.image_size),
            ("target_thickness", self.target_thickness),
            ("val_steps", self.val_steps),
        ];
        for (name, v) in counts {
            ensure!(v >= 1, InvalidArgument, "{name} must be at least 1");
        }
        ensure!(self.eval_every >= 1, InvalidArgument, "eval_every must be at least 1");
        ensure!(self.n_categories >= 2, InvalidArgument, "need at least 2 categories");
        ensure!(
            self.ema_tau > 0.0 && self.ema_tau < 1.0,
            InvalidArgument,
            "ema_tau must be in (0, 1), got {}",
            self.ema_tau
        );
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            ensure!((0.0..1.0).contains(&b), InvalidArgument, "{name} must be in [0, 1), got {b}");
        }
        ensure!(
            self.weight_decay >= 0.0 && self.weight_decay.is_finite(),
            InvalidArgument,
            "weight_decay must be non-negative"
        );
        ensure!(self.val_tolerance >= 0.0, InvalidArgument, "val_tolerance must be non-negative");
        ensure!(
            self.val_steps <= self.timesteps,
            InvalidArgument,
            "val_steps {} exceeds T={}",
            self.val_steps,
            self.timesteps
        );
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }

    /// Absorbing-state process at the top (contour) category.
    pub fn process(&self) -> Result<DiffusionProcess> {
        DiffusionProcess::new(&self.schedule()?, self.n_categories, self.n_categories - 1)
    }

    /// Checks that a denoiser config agrees on categories and `T`.
    pub fn check_model(&self, model: &DenoiserConfig) -> Result<()> {
        ensure!(
            model.n_categories == self.n_categories && model.timesteps == self.timesteps,
            InvalidArgument,
            "denoiser has n={} T={}, training uses n={} T={}",
            model.n_categories,
            model.timesteps,
            self.n_categories,
            self.timesteps
        );
        Ok(())
    }
}

/// DICE loss and its gradient with respect to `p`. `channel` maps an
/// element index to its category.
fn dice_parts(
    p: &[f64],
    g: &[f64],
    n_channels: usize,
    channel: impl Fn(usize) -> usize,
    eps: f64,
    mode: DiceMode,
) -> (f64, Vec<f64>) {
    let groups = match mode {
        DiceMode::Joint => 1,
        DiceMode::PerChannel => n_channels,
    };
    let group = |i: usize| if groups == 1 { 0 } else { channel(i) };
    let mut inter = vec![0.0; groups];
    let mut denom = vec![eps; groups];
    for (i, (&pi, &gi)) in p.iter().zip(g).enumerate() {
        let k = group(i);
        inter[k] += pi * gi;
        denom[k] += pi + gi;
    }
    let loss = (0..groups)
        .map(|k| 1.0 - (2.0 * inter[k] + eps) / denom[k])
        .sum::<f64>()
        / groups as f64;
    let grad = p
        .iter()
        .zip(g)
        .enumerate()
        .map(|(i, (_, &gi))| {
            let k = group(i);
            -(2.0 * gi * denom[k] - (2.0 * inter[k] + eps)) / (denom[k] * denom[k]) / groups as f64
        })
        .collect();
    (loss, grad)
}

/// `1 - (2 Σ p g + ε) / (Σ p + Σ g + ε)` with the sums over every
/// pixel-category element.
pub fn dice_loss(pred: &CategoricalGrid, target: &CategoricalGrid, epsilon: f64) -> Result<f64> {
    dice_loss_with(pred, target, epsilon, DiceMode::Joint)
}

pub fn dice_loss_with(pred: &CategoricalGrid, target: &CategoricalGrid, epsilon: f64, mode: DiceMode) -> Result<f64> {
    ensure!(
        pred.same_shape(target),
        ShapeMismatch,
        "prediction and target shapes differ"
    );
    ensure!(epsilon > 0.0, InvalidArgument, "dice epsilon must be positive");
    ensure!(
        pred.values().iter().all(|v| (0.0..=1.0).contains(v)),
        InvalidArgument,
        "dice predictions must lie in [0, 1]"
    );
    let n = pred.n_categories();
    Ok(dice_parts(pred.values(), target.values(), n, |i| i % n, epsilon, mode).0)
}

/// Mean over pixels of `-Σ_k g_k log p_k`.
pub fn simple_nll_loss(pred_logprobs: &CategoricalGrid, target: &CategoricalGrid) -> Result<f64> {
    ensure!(
        pred_logprobs.same_shape(target),
        ShapeMismatch,
        "prediction and target shapes differ"
    );
    let total: f64 = pred_logprobs
        .pixels()
        .zip(target.pixels())
        .map(|(lp, g)| -lp.iter().zip(g).filter(|(_, &gk)| gk != 0.0).map(|(&l, &gk)| gk * l).sum::<f64>())
        .sum();
    Ok(total / pred_logprobs.n_pixels() as f64)
}

/// `θ̂ ← τ θ̂ + (1 - τ) θ`.
pub fn ema_update(ema: &mut [f32], params: &[f32], tau: f64) -> Result<()> {
    ensure!(
        ema.len() == params.len(),
        ShapeMismatch,
        "EMA has {} values, parameters {}",
        ema.len(),
        params.len()
    );
    ensure!((0.0..=1.0).contains(&tau), InvalidArgument, "tau must be in [0, 1], got {tau}");
    for (e, &p) in ema.iter_mut().zip(params) {
        *e = (tau * *e as f64 + (1.0 - tau) * p as f64) as f32;
    }
    Ok(())
}

pub fn global_norm(grads: &[f32]) -> f64 {
    grads.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut [f32], max_norm: f64) -> Result<f64> {
    ensure!(
        max_norm > 0.0 && max_norm.is_finite(),
        InvalidArgument,
        "grad_clip_norm must be positive, got {max_norm}"
    );
    let norm = global_norm(grads);
    if norm > max_norm {
        // Aim slightly inside the ball so single-precision rounding of the
        // scaled entries cannot push the norm back over.
        let scale = max_norm / norm * (1.0 - 1e-6);
        grads.iter_mut().for_each(|g| *g = (*g as f64 * scale) as f32);
    }
    Ok(norm)
}

/// AdamW: bias-corrected moment estimates and decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl AdamW {
    pub fn new(n_params: usize, cfg: &TrainConfig) -> Self {
        Self {
            learning_rate: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.adam_epsilon,
            weight_decay: cfg.weight_decay,
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    /// One update; `decay[i]` selects which parameters are decayed.
    pub fn step(&mut self, params: &mut [f32], grads: &[f32], decay: &[bool]) -> Result<()> {
        let n = params.len();
        ensure!(
            grads.len() == n && decay.len() == n && self.m.len() == n,
            ShapeMismatch,
            "optimizer sizes differ: {} params, {} grads, {} mask, {} moments",
            n,
            grads.len(),
            decay.len(),
            self.m.len()
        );
        self.t += 1;
        let (b1, b2, lr) = (self.beta1, self.beta2, self.learning_rate);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let wd = lr * self.weight_decay;
        params
            .par_iter_mut()
            .zip(self.m.par_iter_mut())
            .zip(self.v.par_iter_mut())
            .zip(grads.par_iter().zip(decay))
            .for_each(|(((p, m), v), (&g, &d))| {
                let g = g as f64;
                let mf = b1 * *m as f64 + (1.0 - b1) * g;
                let vf = b2 * *v as f64 + (1.0 - b2) * g * g;
                *m = mf as f32;
                *v = vf as f32;
                let mut x = *p as f64;
                if d {
                    x -= wd * x;
                }
                x -= lr * (mf / c1) / ((vf / c2).sqrt() + self.epsilon);
                *p = x as f32;
            });
        Ok(())
    }
}

/// Last step of the `window` consecutive evaluations with the highest mean
/// score; ties go to the earliest window.
pub fn select_best_ema(history: &[(u64, f64)], window: usize) -> Result<u64> {
    ensure!(window >= 1, InvalidArgument, "window must be at least 1");
    ensure!(
        history.len() >= window,
        InvalidArgument,
        "need at least {window} evaluations, have {}",
        history.len()
    );
    let mut best: Option<(f64, u64)> = None;
    for w in history.windows(window) {
        let mean = w.iter().map(|&(_, s)| s).sum::<f64>() / window as f64;
        if best.map_or(true, |(b, _)| mean > b) {
            best = Some((mean, w[window - 1].0));
        }
    }
    Ok(best.expect("at least one window").1)
}

/// A clean target and its conditioning, prepared once per sample.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub target: CategoricalGrid,
    pub condition: ConditionStack,
    /// Target in channel-major order, matching the model's score layout.
    target_chw: Vec<f64>,
}

impl TrainExample {
    pub fn new(target: CategoricalGrid, condition: ConditionStack) -> Result<Self> {
        ensure!(
            target.height() == condition.height() && target.width() == condition.width(),
            ShapeMismatch,
            "target {}x{} vs condition {}x{}",
            target.height(),
            target.width(),
            condition.height(),
            condition.width()
        );
        let target_chw = target.to_channels_f32().into_iter().map(f64::from).collect();
        Ok(Self { target, condition, target_chw })
    }

    pub fn from_sample(sample: &Sample, cfg: &TrainConfig) -> Result<Self> {
        let target = make_target(sample, cfg.image_size, cfg.target_thickness, cfg.n_categories)?;
        Self::new(target, assemble_condition(sample, cfg.image_size)?)
    }
}

/// DICE of `sigmoid(f(x_t, c, t))` against the target together with its
/// parameter gradient. Dropout is active when `dropout_seed` is given.
pub fn dice_objective<T: Float>(
    model: &DenoiserModel<T>,
    xt: &CategoricalGrid,
    example: &TrainExample,
    t: usize,
    epsilon: f64,
    mode: DiceMode,
    dropout_seed: Option<u64>,
) -> Result<(f64, Vec<T>)> {
    let input = model.assemble_input(xt, &example.condition)?;
    let (logits, trace) = model.forward(&input, t, dropout_seed, true)?;
    let trace = trace.expect("trace requested");
    let probs: Vec<f64> = logits
        .data
        .iter()
        .map(|z| 1.0 / (1.0 + (-z.to_f64().unwrap_or(f64::NAN)).exp()))
        .collect();
    ensure!(
        probs.len() == example.target_chw.len(),
        ShapeMismatch,
        "model scores have {} values, target {}",
        probs.len(),
        example.target_chw.len()
    );
    let hw = logits.hw();
    let (loss, dp) = dice_parts(&probs, &example.target_chw, logits.c, |i| i / hw, epsilon, mode);
    let dz: Vec<T> = dp.iter().zip(&probs).map(|(&d, &p)| T::of(d * p * (1.0 - p))).collect();
    let d_logits = Tensor::from_vec(logits.c, logits.h, logits.w, dz);
    let mut grads = vec![T::zero(); model.param_count()];
    model.backward(&trace, &d_logits, &mut grads);
    Ok((loss, grads))
}

/// Draws `t ~ U{1..T}` and the relaxed corruption `x_t` for one batch slot.
pub fn corrupt(
    example: &TrainExample,
    process: &DiffusionProcess,
    cfg: &TrainConfig,
    step: u64,
    slot: u64,
) -> Result<(usize, CategoricalGrid)> {
    let t = rng_for(cfg.seed, &[stream::TIMESTEP, step, slot]).gen_range(1..=process.len());
    let marginal = forward_marginal(&example.target, process.cumulative(t))?;
    let mut rng = rng_for(cfg.seed, &[stream::CORRUPTION, step, slot]);
    let xt = gumbel_softmax_with_rng(&marginal, cfg.gumbel_temperature, &mut rng)?;
    Ok((t, xt))
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    /// Completed optimizer steps.
    pub step: u64,
    pub model: DenoiserModel<f32>,
    pub ema: Vec<f32>,
    pub optimizer: AdamW,
    /// `(step, validation SSIM)` of every evaluation so far.
    pub history: Vec<(u64, f64)>,
    /// Current best-EMA pick and its window mean.
    pub best: Option<(u64, f64)>,
    /// Wall-clock seconds spent in earlier sessions.
    pub elapsed: f64,
}

impl TrainState {
    pub fn new(model: DenoiserModel<f32>, cfg: &TrainConfig) -> Self {
        let ema = model.params().to_vec();
        let optimizer = AdamW::new(model.param_count(), cfg);
        Self {
            step: 0,
            model,
            ema,
            optimizer,
            history: Vec::new(),
            best: None,
            elapsed: 0.0,
        }
    }

    pub fn ema_model(&self) -> DenoiserModel<f32> {
        DenoiserModel::from_params(self.model.config().clone(), self.ema.clone()).expect("EMA matches the model")
    }

    /// Records an evaluation and reports whether it made the current step
    /// the best-EMA pick.
    pub fn record_eval(&mut self, score: f64, window: usize) -> bool {
        self.history.push((self.step, score));
        if self.history.len() < window {
            return false;
        }
        let tail = &self.history[self.history.len() - window..];
        let mean = tail.iter().map(|&(_, s)| s).sum::<f64>() / window as f64;
        if self.best.map_or(true, |(_, b)| mean > b) {
            self.best = Some((self.step, mean));
            true
        } else {
            false
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// One optimizer step on `batch`. Per-sample gradients are computed in
/// parallel and summed in batch order, so the result does not depend on the
/// thread count. The state is left untouched when the loss or gradients
/// are not finite.
pub fn train_step(
    state: &mut TrainState,
    batch: &[&TrainExample],
    process: &DiffusionProcess,
    cfg: &TrainConfig,
) -> Result<StepStats> {
    ensure!(!batch.is_empty(), InvalidArgument, "empty batch");
    ensure!(
        cfg.grad_clip_norm > 0.0,
        InvalidArgument,
        "grad_clip_norm must be positive, got {}",
        cfg.grad_clip_norm
    );
    ensure!(
        process.len() == cfg.timesteps && process.n_categories() == cfg.n_categories,
        ShapeMismatch,
        "process has T={} n={}, config T={} n={}",
        process.len(),
        process.n_categories(),
        cfg.timesteps,
        cfg.n_categories
    );
    let step = state.step;
    let model = &state.model;
    let per_sample = batch
        .par_iter()
        .enumerate()
        .map(|(slot, ex)| {
            let (t, xt) = corrupt(ex, process, cfg, step, slot as u64)?;
            let dropout = derive_seed(cfg.seed, &[stream::DROPOUT, step, slot as u64]);
            dice_objective(model, &xt, ex, t, cfg.dice_epsilon, cfg.dice_mode, Some(dropout))
        })
        .collect::<Vec<Result<_>>>();

    let scale = 1.0 / batch.len() as f32;
    let mut grads = vec![0f32; model.param_count()];
    let mut loss = 0.0;
    for r in per_sample {
        let (l, g) = r.map_err(|e| match e {
            Error::Divergence(m) => Error::Divergence(format!("step {step}: {m}")),
            other => other,
        })?;
        loss += l;
        for (a, b) in grads.iter_mut().zip(g) {
            *a += b * scale;
        }
    }
    loss /= batch.len() as f64;
    ensure!(loss.is_finite(), Divergence, "non-finite loss {loss} at step {step}");
    let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip_norm)?;
    ensure!(grad_norm.is_finite(), Divergence, "non-finite gradient norm at step {step}");

    let decay = state.model.layout().decay_mask();
    state.optimizer.step(state.model.params_mut(), &grads, &decay)?;
    ema_update(&mut state.ema, state.model.params(), cfg.ema_tau)?;
    state.step += 1;
    Ok(StepStats { loss, grad_norm })
}

#[cfg(test)]
mod tests;
