//! Reverse-process loops: the deterministic sharpen-and-feed-back sampler and
//! the exact-posterior ancestral sampler.

use serde::{Deserialize, Serialize};

use super::{
    absorbing_init, posterior_between, sample_categorical, simplified_reverse_step,
    softmax_grid, threshold_decode, uniform_init, DiffusionProcess,
};
use crate::error::{ensure, Result};
use crate::grid::{BinaryImage, CategoricalGrid, ConditionStack};
use crate::rng;

/// Anything that maps `(x_t, condition, t)` to raw per-category `x_0` scores.
pub trait X0Predictor: Sync {
    fn n_categories(&self) -> usize;

    fn predict_x0(
        &self,
        xt: &CategoricalGrid,
        condition: &ConditionStack,
        t: usize,
    ) -> Result<CategoricalGrid>;
}

/// How `x_T` is initialized before the reverse loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    /// One-hot draws from the uniform categorical.
    #[default]
    Uniform,
    /// Every pixel at the absorbing category.
    Absorbing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    /// Total diffusion timesteps `T` the model was trained with.
    pub timesteps: usize,
    /// Number of reverse steps `S`.
    pub steps: usize,
    /// Sharpening temperature of the simplified reverse step.
    pub alpha: f64,
    pub threshold: usize,
    pub seed: u64,
    pub init: InitMode,
}

impl InferenceConfig {
    pub fn new(timesteps: usize, steps: usize, n_categories: usize) -> Self {
        Self {
            timesteps,
            steps,
            alpha: 0.01,
            threshold: super::default_threshold(n_categories),
            seed: 0,
            init: InitMode::Uniform,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InferenceOutput {
    pub decoded: BinaryImage,
    /// Final per-pixel distribution that was decoded.
    pub state: CategoricalGrid,
    /// Posterior pixels that fell back to uniform (standard reverse only).
    pub unreachable: usize,
}

/// `S` strictly decreasing timesteps from `T` down to `1`, evenly spaced and
/// rounded to the nearest integer.
pub fn inference_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    ensure!(steps >= 1, InvalidArgument, "need at least one inference step");
    ensure!(
        steps <= total,
        InvalidArgument,
        "cannot take {steps} steps from a {total}-step schedule"
    );
    if steps == 1 {
        ensure!(
            total == 1,
            InvalidArgument,
            "a single step cannot start at T={total} and end at 1"
        );
        return Ok(vec![1]);
    }
    let span = (total - 1) as f64 / (steps - 1) as f64;
    let taus: Vec<usize> = (0..steps)
        .map(|i| total - (i as f64 * span).round() as usize)
        .collect();
    ensure!(
        taus.windows(2).all(|w| w[0] > w[1]),
        InvalidArgument,
        "timestep spacing produced duplicates"
    );
    Ok(taus)
}

/// Timesteps actually visited: a one-step run evaluates the model once at
/// `T`, otherwise the endpoint-pinned schedule.
fn visited_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 1 {
        ensure!(total >= 1, InvalidArgument, "empty schedule");
        Ok(vec![total])
    } else {
        inference_timesteps(total, steps)
    }
}

fn initial_state(
    condition: &ConditionStack,
    n: usize,
    init: InitMode,
    seed: u64,
) -> Result<CategoricalGrid> {
    let (h, w) = (condition.height(), condition.width());
    match init {
        InitMode::Uniform => uniform_init(h, w, n, seed),
        InitMode::Absorbing => absorbing_init(h, w, n, n - 1),
    }
}

/// Deterministic reverse loop: initialize `x_T`, then for each visited `t`
/// predict `x_0` from `(condition, x_t)` and replace `x_t` with the sharpened
/// softmax of the prediction. The final state is threshold-decoded.
pub fn run_inference(
    model: &dyn X0Predictor,
    condition: &ConditionStack,
    config: &InferenceConfig,
) -> Result<InferenceOutput> {
    let n = model.n_categories();
    let taus = visited_timesteps(config.timesteps, config.steps)?;
    let mut state = initial_state(condition, n, config.init, config.seed)?;
    for &t in &taus {
        let logits = model.predict_x0(&state, condition, t)?;
        state = simplified_reverse_step(&logits, config.alpha)?;
    }
    let decoded = threshold_decode(&state, config.threshold)?;
    Ok(InferenceOutput {
        decoded,
        state,
        unreachable: 0,
    })
}

/// Ancestral sampling with the exact posterior: between visited timesteps
/// the next state is drawn from `q(x_s | x_t, x̂_0)` where `x̂_0` is the
/// softmax of the model scores. The last prediction is decoded directly.
pub fn run_standard_inference(
    model: &dyn X0Predictor,
    condition: &ConditionStack,
    process: &DiffusionProcess,
    config: &InferenceConfig,
) -> Result<InferenceOutput> {
    let n = model.n_categories();
    ensure!(
        process.n_categories() == n,
        ShapeMismatch,
        "process has {} categories, model {}",
        process.n_categories(),
        n
    );
    ensure!(
        config.timesteps == process.len(),
        InvalidArgument,
        "config T={} but process has {} steps",
        config.timesteps,
        process.len()
    );
    let taus = visited_timesteps(config.timesteps, config.steps)?;
    let mut rng = rng::rng_for(config.seed, &[rng::stream::POSTERIOR]);
    let mut state = initial_state(condition, n, config.init, config.seed)?;
    let mut unreachable = 0;
    let mut x0 = state.clone();
    for (i, &t) in taus.iter().enumerate() {
        let logits = model.predict_x0(&state, condition, t)?;
        x0 = softmax_grid(&logits);
        if let Some(&s) = taus.get(i + 1) {
            let post = posterior_between(&state, &x0, process, t, s)?;
            unreachable += post.unreachable;
            state = sample_categorical(&post.grid, &mut rng);
        }
    }
    let decoded = threshold_decode(&x0, config.threshold)?;
    Ok(InferenceOutput {
        decoded,
        state: x0,
        unreachable,
    })
}
