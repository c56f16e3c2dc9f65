//! End-to-end refinement: condition a trained denoiser on an image and its
//! guide mask, run the reverse process, decode and post-process, and score
//! the result against the ground-truth contour.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contour_ops::{postprocess, PostprocessOptions};
use crate::data::{assemble_condition, contour_from_mask, resize_nearest, Sample};
use crate::diffusion::{
    run_inference, run_standard_inference, DiffusionProcess, InferenceConfig, InferenceOutput, X0Predictor,
};
use crate::error::{ensure, Result};
use crate::grid::BinaryImage;
use crate::metrics::{evaluate_dataset_with, ChamferMode, MetricsReport};
use crate::rng::{derive_seed, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReverseMode {
    /// Deterministic sharpen-and-feed-back loop.
    #[default]
    Simplified,
    /// Ancestral sampling with the exact posterior.
    Standard,
}

impl std::str::FromStr for ReverseMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "simplified" | "simp" => Ok(Self::Simplified),
            "standard" | "std" => Ok(Self::Standard),
            _ => Err(format!("unknown reverse process {s:?} (expected simplified or standard)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineConfig {
    pub image_size: usize,
    pub inference: InferenceConfig,
    pub reverse: ReverseMode,
    pub postprocess: PostprocessOptions,
}

#[derive(Debug, Clone)]
pub struct Refined {
    /// Threshold-decoded model output before post-processing.
    pub decoded: BinaryImage,
    pub contour: BinaryImage,
    /// Post-processing fell back to an open contour.
    pub flagged: bool,
}

/// Per-sample inference seed, so results do not depend on evaluation order.
pub fn sample_seed(seed: u64, run: u64, index: u64) -> u64 {
    derive_seed(seed, &[stream::SAMPLE, run, index])
}

/// Refines one sample at `image_size x image_size`. `process` is required
/// for the standard reverse mode.
pub fn refine(
    model: &dyn X0Predictor,
    process: Option<&DiffusionProcess>,
    sample: &Sample,
    cfg: &RefineConfig,
    trunc: Option<&BinaryImage>,
) -> Result<Refined> {
    let condition = assemble_condition(sample, cfg.image_size)?;
    let out: InferenceOutput = match cfg.reverse {
        ReverseMode::Simplified => run_inference(model, &condition, &cfg.inference)?,
        ReverseMode::Standard => {
            let process = process.ok_or_else(|| {
                crate::Error::InvalidArgument("the standard reverse process needs the diffusion schedule".into())
            })?;
            run_standard_inference(model, &condition, process, &cfg.inference)?
        }
    };
    let trunc = trunc.map(|t| resize_nearest(t, cfg.image_size, cfg.image_size));
    let post = postprocess(&out.decoded, &cfg.postprocess, trunc.as_ref())?;
    Ok(Refined {
        decoded: out.decoded,
        contour: post.contour,
        flagged: post.flagged,
    })
}

/// Refines every sample with seeds `sample_seed(cfg.inference.seed, run, i)`.
pub fn refine_all(
    model: &dyn X0Predictor,
    process: Option<&DiffusionProcess>,
    samples: &[Sample],
    cfg: &RefineConfig,
    run: u64,
) -> Result<Vec<Refined>> {
    samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut c = cfg.clone();
            c.inference.seed = sample_seed(cfg.inference.seed, run, i as u64);
            refine(model, process, s, &c, None)
        })
        .collect()
}

/// Thin ground-truth contour at `size x size`.
pub fn gt_contour(sample: &Sample, size: usize) -> Result<BinaryImage> {
    contour_from_mask(&resize_nearest(&sample.gt_mask, size, size), 1)
}

/// The unrefined baseline: the thin outer contour of the guide mask, or an
/// empty image when the guide is empty.
pub fn guide_contour(sample: &Sample, size: usize) -> Result<BinaryImage> {
    let mask = resize_nearest(&sample.guide_mask, size, size);
    if mask.is_empty() {
        return Ok(mask);
    }
    contour_from_mask(&mask, 1)
}

/// Scores predicted contours against the samples' ground truth.
pub fn score(
    preds: &[BinaryImage],
    samples: &[Sample],
    size: usize,
    tolerance: f64,
    mode: ChamferMode,
) -> Result<MetricsReport> {
    ensure!(
        preds.len() == samples.len(),
        ShapeMismatch,
        "{} predictions for {} samples",
        preds.len(),
        samples.len()
    );
    let gts = samples.par_iter().map(|s| gt_contour(s, size)).collect::<Result<Vec<_>>>()?;
    evaluate_dataset_with(preds, &gts, tolerance, mode)
}

/// Metric tolerance scaled from 10 px at 352 px to `size`.
pub fn default_tolerance(size: usize) -> f64 {
    (10.0 * size as f64 / 352.0).ceil()
}
