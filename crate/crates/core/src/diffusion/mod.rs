//! Absorbing-state categorical diffusion.
//!
//! Forward corruption multiplies one-hot pixel states by row-stochastic
//! transition matrices `Q_t` whose only off-diagonal mass moves into an
//! absorbing category. `Q̄_t = Q_1 ... Q_t` gives the marginal after `t`
//! steps. Two reverse processes are provided: the exact Bayes posterior and
//! the deterministic sharpen-and-feed-back loop used for inference.

mod sampler;

pub use sampler::{
    inference_timesteps, run_inference, run_standard_inference, InferenceConfig,
    InferenceOutput, InitMode, X0Predictor,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::grid::{BinaryImage, CategoricalGrid};
use crate::rng;

/// Probabilities are clamped to this floor before taking logs in the
/// Gumbel-softmax corruption.
pub const GUMBEL_LOG_FLOOR: f64 = 1e-12;

pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// The sequence `β_1..β_T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear interpolation from `beta_start` (t = 1) to `beta_end` (t = T).
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        ensure!(steps >= 1, InvalidArgument, "schedule needs at least one step");
        ensure!(
            beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0,
            InvalidArgument,
            "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        );
        let betas = if steps == 1 {
            vec![beta_start]
        } else {
            let span = (steps - 1) as f64;
            (0..steps)
                .map(|i| beta_start + i as f64 / span * (beta_end - beta_start))
                .collect()
        };
        Ok(Self { betas })
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        ensure!(!betas.is_empty(), InvalidArgument, "empty beta schedule");
        ensure!(
            betas.iter().all(|&b| b > 0.0 && b < 1.0),
            InvalidArgument,
            "every beta must lie in (0, 1)"
        );
        Ok(Self { betas })
    }

    /// Number of diffusion timesteps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `β_t` for `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `∏_{s <= t} (1 - β_s)`, the probability of not yet being absorbed.
    pub fn survival(&self, t: usize) -> f64 {
        self.betas[..t].iter().map(|b| 1.0 - b).product()
    }
}

/// Row-stochastic `n x n` matrix, `entries[i][j] = q(x_t = j | x_{t-1} = i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    n: usize,
    absorbing_index: usize,
    entries: Vec<f64>,
}

impl TransitionMatrix {
    pub fn identity(n: usize, absorbing_index: usize) -> Self {
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            entries[i * n + i] = 1.0;
        }
        Self {
            n,
            absorbing_index,
            entries,
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, absorbing_index: usize) -> Result<Self> {
        let n = rows.len();
        ensure!(
            rows.iter().all(|r| r.len() == n),
            ShapeMismatch,
            "transition matrix must be square"
        );
        ensure!(absorbing_index < n, InvalidArgument, "absorbing index out of range");
        Ok(Self {
            n,
            absorbing_index,
            entries: rows.into_iter().flatten().collect(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn absorbing_index(&self) -> usize {
        self.absorbing_index
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.n..(i + 1) * self.n]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.entries.chunks(self.n).map(|r| r.to_vec()).collect()
    }

    /// `self · other`.
    pub fn matmul(&self, other: &TransitionMatrix) -> TransitionMatrix {
        let n = self.n;
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let a = self.entries[i * n + k];
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    entries[i * n + j] += a * other.entries[k * n + j];
                }
            }
        }
        TransitionMatrix {
            n,
            absorbing_index: self.absorbing_index,
            entries,
        }
    }

    /// Row vector times matrix: `v · Q`.
    pub fn left_mul(&self, v: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, &vi) in v.iter().enumerate() {
            if vi == 0.0 {
                continue;
            }
            for (o, &q) in out.iter_mut().zip(self.row(i)) {
                *o += vi * q;
            }
        }
    }

    /// Largest `|row sum - 1|` over all rows.
    pub fn max_row_sum_error(&self) -> f64 {
        self.entries
            .chunks(self.n)
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Single-step absorbing transition `[[diag(1-β), β], [0, 1]]` with the
/// absorbing column placed at `absorbing_index`.
pub fn transition_matrix(beta: f64, n: usize, absorbing_index: usize) -> Result<TransitionMatrix> {
    ensure!(n >= 2, InvalidArgument, "need at least two categories, got {n}");
    ensure!(
        beta > 0.0 && beta < 1.0,
        InvalidArgument,
        "beta must lie in (0, 1), got {beta}"
    );
    ensure!(
        absorbing_index < n,
        InvalidArgument,
        "absorbing index {absorbing_index} out of range for n={n}"
    );
    let mut entries = vec![0.0; n * n];
    for i in 0..n {
        if i == absorbing_index {
            entries[i * n + i] = 1.0;
        } else {
            entries[i * n + i] = 1.0 - beta;
            entries[i * n + absorbing_index] = beta;
        }
    }
    Ok(TransitionMatrix {
        n,
        absorbing_index,
        entries,
    })
}

/// `Q̄_t = Q_1 · Q_2 ··· Q_t` by iterated multiplication, absorbing at `n - 1`.
pub fn cumulative_transition(
    schedule: &NoiseSchedule,
    t: usize,
    n: usize,
) -> Result<TransitionMatrix> {
    cumulative_transition_with(schedule, t, n, n.saturating_sub(1))
}

pub fn cumulative_transition_with(
    schedule: &NoiseSchedule,
    t: usize,
    n: usize,
    absorbing_index: usize,
) -> Result<TransitionMatrix> {
    ensure!(
        t >= 1 && t <= schedule.len(),
        InvalidArgument,
        "t={t} outside [1, {}]",
        schedule.len()
    );
    let mut acc = transition_matrix(schedule.beta(1), n, absorbing_index)?;
    for s in 2..=t {
        acc = acc.matmul(&transition_matrix(schedule.beta(s), n, absorbing_index)?);
    }
    Ok(acc)
}

/// Precomputed single-step and cumulative matrices for one process.
#[derive(Debug, Clone)]
pub struct DiffusionProcess {
    n: usize,
    absorbing_index: usize,
    steps: Vec<TransitionMatrix>,
    cumulative: Vec<TransitionMatrix>,
}

impl DiffusionProcess {
    pub fn new(schedule: &NoiseSchedule, n: usize, absorbing_index: usize) -> Result<Self> {
        let steps = schedule
            .betas()
            .iter()
            .map(|&b| transition_matrix(b, n, absorbing_index))
            .collect::<Result<Vec<_>>>()?;
        Self::from_matrices(steps)
    }

    /// Builds a process from arbitrary per-step matrices (all `n x n`).
    pub fn from_matrices(steps: Vec<TransitionMatrix>) -> Result<Self> {
        ensure!(!steps.is_empty(), InvalidArgument, "process needs at least one step");
        let n = steps[0].n();
        let absorbing_index = steps[0].absorbing_index();
        ensure!(
            steps.iter().all(|q| q.n() == n),
            ShapeMismatch,
            "all transition matrices must share n"
        );
        let mut cumulative = Vec::with_capacity(steps.len());
        let mut acc = steps[0].clone();
        cumulative.push(acc.clone());
        for q in &steps[1..] {
            acc = acc.matmul(q);
            cumulative.push(acc.clone());
        }
        Ok(Self {
            n,
            absorbing_index,
            steps,
            cumulative,
        })
    }

    pub fn n_categories(&self) -> usize {
        self.n
    }

    pub fn absorbing_index(&self) -> usize {
        self.absorbing_index
    }

    /// Number of timesteps `T`.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `Q_t`, `1 <= t <= T`.
    pub fn step(&self, t: usize) -> &TransitionMatrix {
        &self.steps[t - 1]
    }

    /// `Q̄_t`, `1 <= t <= T`.
    pub fn cumulative(&self, t: usize) -> &TransitionMatrix {
        &self.cumulative[t - 1]
    }

    /// `Q_{s+1} ··· Q_t`, the transition from time `s` to time `t > s`.
    pub fn between(&self, s: usize, t: usize) -> TransitionMatrix {
        let mut acc = self.steps[s].clone();
        for q in &self.steps[s + 1..t] {
            acc = acc.matmul(q);
        }
        acc
    }
}

/// Per-pixel `x_0 · Q̄`, the corruption marginal before sampling.
pub fn forward_marginal(x0: &CategoricalGrid, qbar: &TransitionMatrix) -> Result<CategoricalGrid> {
    ensure!(
        x0.n_categories() == qbar.n(),
        ShapeMismatch,
        "grid has {} categories, matrix is {}x{}",
        x0.n_categories(),
        qbar.n(),
        qbar.n()
    );
    let mut out = CategoricalGrid::zeros(x0.height(), x0.width(), x0.n_categories());
    for p in 0..x0.n_pixels() {
        qbar.left_mul(x0.pixel(p), out.pixel_mut(p));
    }
    Ok(out)
}

/// Standard Gumbel draw `-ln(-ln u)`.
#[inline]
fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // u in (0, 1): gen::<f64>() is [0, 1), reflect 0 away.
    let u: f64 = rng.gen();
    let u = if u <= 0.0 { f64::MIN_POSITIVE } else { u };
    -(-u.ln()).ln()
}

/// Relaxed categorical sample `softmax((log p + g) / temperature)` with a
/// seeded generator.
pub fn gumbel_softmax(
    probs: &CategoricalGrid,
    temperature: f64,
    seed: u64,
) -> Result<CategoricalGrid> {
    let mut rng = rng::rng_for(seed, &[rng::stream::CORRUPTION]);
    gumbel_softmax_with_rng(probs, temperature, &mut rng)
}

pub fn gumbel_softmax_with_rng<R: Rng + ?Sized>(
    probs: &CategoricalGrid,
    temperature: f64,
    rng: &mut R,
) -> Result<CategoricalGrid> {
    ensure!(
        temperature > 0.0 && temperature.is_finite(),
        InvalidArgument,
        "temperature must be positive, got {temperature}"
    );
    let mut out = probs.clone();
    for px in out.values_mut().chunks_exact_mut(probs.n_categories()) {
        for v in px.iter_mut() {
            *v = (v.max(GUMBEL_LOG_FLOOR).ln() + gumbel(rng)) / temperature;
        }
        softmax_in_place(px);
    }
    Ok(out)
}

/// Hard categorical sample per pixel, returned one-hot.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &CategoricalGrid, rng: &mut R) -> CategoricalGrid {
    let n = probs.n_categories();
    let mut out = CategoricalGrid::zeros(probs.height(), probs.width(), n);
    for p in 0..probs.n_pixels() {
        let px = probs.pixel(p);
        let total: f64 = px.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        let mut chosen = n - 1;
        for (k, &v) in px.iter().enumerate() {
            if u < v {
                chosen = k;
                break;
            }
            u -= v;
        }
        // Guard against landing on a zero-mass trailing category by rounding.
        if px[chosen] == 0.0 {
            chosen = px
                .iter()
                .rposition(|&v| v > 0.0)
                .unwrap_or(chosen);
        }
        out.pixel_mut(p)[chosen] = 1.0;
    }
    out
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Result of the exact reverse posterior.
#[derive(Debug, Clone)]
pub struct Posterior {
    pub grid: CategoricalGrid,
    /// Pixels whose normalizer vanished (`x_t` unreachable from `x_0`); they
    /// were set to the uniform distribution.
    pub unreachable: usize,
}

/// Exact `q(x_{t-1} | x_t, x_0) ∝ (x_t Q_t^T) ⊙ (x_0 Q̄_{t-1})`.
///
/// At `t = 1` the posterior is `x_0` itself and is returned unchanged.
pub fn posterior_reverse(
    xt: &CategoricalGrid,
    x0: &CategoricalGrid,
    process: &DiffusionProcess,
    t: usize,
) -> Result<Posterior> {
    ensure!(
        t >= 1 && t <= process.len(),
        InvalidArgument,
        "t={t} outside [1, {}]",
        process.len()
    );
    posterior_between(xt, x0, process, t, t - 1)
}

/// Posterior over the state at time `s < t` given `x_t` and `x_0`:
/// `∝ (x_t (Q_{s+1}···Q_t)^T) ⊙ (x_0 Q̄_s)` with `Q̄_0 = I`. With `s = 0` the
/// result is `x_0` (normalized per pixel).
pub fn posterior_between(
    xt: &CategoricalGrid,
    x0: &CategoricalGrid,
    process: &DiffusionProcess,
    t: usize,
    s: usize,
) -> Result<Posterior> {
    xt.check_same_shape(x0, "posterior inputs")?;
    ensure!(
        xt.n_categories() == process.n_categories(),
        ShapeMismatch,
        "grid has {} categories, process has {}",
        xt.n_categories(),
        process.n_categories()
    );
    ensure!(
        s < t && t <= process.len(),
        InvalidArgument,
        "need s < t <= T, got s={s}, t={t}"
    );
    let n = xt.n_categories();
    let mut out = CategoricalGrid::zeros(xt.height(), xt.width(), n);
    let mut unreachable = 0;

    if s == 0 {
        for p in 0..xt.n_pixels() {
            let src = x0.pixel(p);
            let total: f64 = src.iter().sum();
            let dst = out.pixel_mut(p);
            if total > 0.0 {
                dst.iter_mut().zip(src).for_each(|(d, &v)| *d = v / total);
            } else {
                dst.iter_mut().for_each(|d| *d = 1.0 / n as f64);
                unreachable += 1;
            }
        }
        return Ok(Posterior {
            grid: out,
            unreachable,
        });
    }

    let jump = process.between(s, t);
    let qbar_s = process.cumulative(s);
    let mut from_x0 = vec![0.0; n];
    for p in 0..xt.n_pixels() {
        let xt_px = xt.pixel(p);
        qbar_s.left_mul(x0.pixel(p), &mut from_x0);
        let dst = out.pixel_mut(p);
        let mut total = 0.0;
        for j in 0..n {
            // (x_t · jump^T)[j] = Σ_k jump[j][k] x_t[k]
            let back: f64 = jump.row(j).iter().zip(xt_px).map(|(q, x)| q * x).sum();
            dst[j] = back * from_x0[j];
            total += dst[j];
        }
        if total > 0.0 {
            dst.iter_mut().for_each(|d| *d /= total);
        } else {
            dst.iter_mut().for_each(|d| *d = 1.0 / n as f64);
            unreachable += 1;
        }
    }
    Ok(Posterior {
        grid: out,
        unreachable,
    })
}

/// `softmax(logits / alpha)` per pixel.
pub fn simplified_reverse_step(x0_logits: &CategoricalGrid, alpha: f64) -> Result<CategoricalGrid> {
    ensure!(
        alpha > 0.0 && alpha.is_finite(),
        InvalidArgument,
        "alpha must be positive, got {alpha}"
    );
    let mut out = x0_logits.clone();
    let n = out.n_categories();
    for px in out.values_mut().chunks_exact_mut(n) {
        px.iter_mut().for_each(|v| *v /= alpha);
        softmax_in_place(px);
    }
    Ok(out)
}

/// Plain per-pixel softmax of raw scores.
pub fn softmax_grid(logits: &CategoricalGrid) -> CategoricalGrid {
    let mut out = logits.clone();
    let n = out.n_categories();
    for px in out.values_mut().chunks_exact_mut(n) {
        softmax_in_place(px);
    }
    out
}

/// One-hot draw from `Categorical(1/n)` at every pixel.
pub fn uniform_init(height: usize, width: usize, n: usize, seed: u64) -> Result<CategoricalGrid> {
    ensure!(n >= 2, InvalidArgument, "need at least two categories, got {n}");
    let mut rng = rng::rng_for(seed, &[rng::stream::INIT]);
    let cats: Vec<usize> = (0..height * width).map(|_| rng.gen_range(0..n)).collect();
    CategoricalGrid::one_hot(height, width, n, &cats)
}

/// Every pixel one-hot at the absorbing category (the `T -> ∞` limit of the
/// forward process).
pub fn absorbing_init(
    height: usize,
    width: usize,
    n: usize,
    absorbing_index: usize,
) -> Result<CategoricalGrid> {
    ensure!(absorbing_index < n, InvalidArgument, "absorbing index out of range");
    CategoricalGrid::one_hot(height, width, n, &vec![absorbing_index; height * width])
}

/// A pixel is on iff its argmax category is strictly above `threshold`;
/// argmax ties go to the lower category.
pub fn threshold_decode(grid: &CategoricalGrid, threshold: usize) -> Result<BinaryImage> {
    ensure!(
        threshold < grid.n_categories(),
        InvalidArgument,
        "threshold {threshold} must be below n={}",
        grid.n_categories()
    );
    let bits = grid.argmax().into_iter().map(|k| k > threshold).collect();
    BinaryImage::from_vec(grid.height(), grid.width(), bits)
}

/// Default decode threshold `n / 2 - 1`.
pub fn default_threshold(n_categories: usize) -> usize {
    (n_categories / 2).saturating_sub(1)
}
