//! Boundary metrics (tolerance F1, Hausdorff, Chamfer) over contour pixel
//! sets, and t-distribution confidence intervals across evaluation runs.

mod index;
mod report;

pub use index::{NearestIndex, BRUTE_FORCE_MAX};
pub use report::{aggregate_runs, ImageRecord, MetricSummary, MetricsReport};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{ensure, Result};
use crate::grid::BinaryImage;

/// Sorted, deduplicated `(row, col)` pixel coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PointSet {
    points: Vec<(usize, usize)>,
}

impl PointSet {
    pub fn new(mut points: Vec<(usize, usize)>) -> Self {
        points.sort_unstable();
        points.dedup();
        Self { points }
    }

    pub fn from_image(img: &BinaryImage) -> Self {
        // Raster order is already sorted and unique.
        Self { points: img.on_pixels() }
    }

    pub fn points(&self) -> &[(usize, usize)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Squared nearest-neighbour distance from every point of `from` to `to`.
fn directed_sq(from: &PointSet, to: &PointSet) -> Vec<u64> {
    let index = NearestIndex::new(to);
    from.points()
        .iter()
        .map(|&p| index.nearest_sq(p).expect("nonempty target set"))
        .collect()
}

fn ensure_nonempty(a: &PointSet, b: &PointSet) -> Result<()> {
    ensure!(
        !a.is_empty() && !b.is_empty(),
        InvalidArgument,
        "distance between point sets of sizes {} and {} is undefined",
        a.len(),
        b.len()
    );
    Ok(())
}

/// Tolerance-matched F1: a point counts as matched when some point of the
/// other set lies within `tolerance` (Euclidean, inclusive).
pub fn boundary_f1(pred: &PointSet, gt: &PointSet, tolerance: f64) -> Result<f64> {
    ensure!(tolerance >= 0.0, InvalidArgument, "tolerance must be non-negative, got {tolerance}");
    match (pred.is_empty(), gt.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let tol_sq = tolerance * tolerance;
    let matched = |from: &PointSet, to: &PointSet| {
        directed_sq(from, to).into_iter().filter(|&d| d as f64 <= tol_sq).count() as f64 / from.len() as f64
    };
    let precision = matched(pred, gt);
    let recall = matched(gt, pred);
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

/// Exact symmetric Hausdorff distance.
pub fn hausdorff(a: &PointSet, b: &PointSet) -> Result<f64> {
    ensure_nonempty(a, b)?;
    let ab = directed_sq(a, b).into_iter().max().unwrap_or(0);
    let ba = directed_sq(b, a).into_iter().max().unwrap_or(0);
    Ok((ab.max(ba) as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChamferMode {
    /// Sum of nearest-neighbour distances in both directions.
    #[default]
    Sum,
    /// Mean distance in each direction, summed.
    Mean,
    /// Sum of squared nearest-neighbour distances in both directions.
    SquaredSum,
}

/// Symmetric Chamfer distance in the default (sum of Euclidean distances)
/// form.
pub fn chamfer(a: &PointSet, b: &PointSet) -> Result<f64> {
    chamfer_with(a, b, ChamferMode::Sum)
}

pub fn chamfer_with(a: &PointSet, b: &PointSet, mode: ChamferMode) -> Result<f64> {
    ensure_nonempty(a, b)?;
    let side = |from: &PointSet, to: &PointSet| {
        let d = directed_sq(from, to);
        match mode {
            ChamferMode::Sum => d.iter().map(|&v| (v as f64).sqrt()).sum::<f64>(),
            ChamferMode::Mean => d.iter().map(|&v| (v as f64).sqrt()).sum::<f64>() / d.len() as f64,
            ChamferMode::SquaredSum => d.iter().map(|&v| v as f64).sum::<f64>(),
        }
    };
    Ok(side(a, b) + side(b, a))
}

/// Sample mean and the half-width of its two-sided t confidence interval.
pub fn t_confidence_interval(samples: &[f64], level: f64) -> Result<(f64, f64)> {
    ensure!(samples.len() >= 2, InvalidArgument, "need at least 2 samples, got {}", samples.len());
    ensure!(level > 0.0 && level < 1.0, InvalidArgument, "confidence level must be in (0, 1), got {level}");
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, t_quantile((1.0 + level) / 2.0, n - 1.0)? * (var / n).sqrt()))
}

/// Quantile of Student's t distribution with `df` degrees of freedom.
pub fn t_quantile(p: f64, df: f64) -> Result<f64> {
    let dist = StudentsT::new(0.0, 1.0, df)
        .map_err(|e| crate::Error::InvalidArgument(format!("t distribution with {df} dof: {e}")))?;
    Ok(dist.inverse_cdf(p))
}

/// Metrics of one prediction against its ground truth. Distances are `None`
/// when either set is empty.
pub fn image_metrics(pred: &BinaryImage, gt: &BinaryImage, tolerance: f64, mode: ChamferMode) -> Result<ImageRecord> {
    ensure!(
        pred.same_shape(gt),
        ShapeMismatch,
        "prediction {}x{} vs ground truth {}x{}",
        pred.height(),
        pred.width(),
        gt.height(),
        gt.width()
    );
    let (p, g) = (PointSet::from_image(pred), PointSet::from_image(gt));
    let f1 = boundary_f1(&p, &g, tolerance)?;
    let (hausdorff, chamfer) = if p.is_empty() || g.is_empty() {
        (None, None)
    } else {
        (Some(hausdorff(&p, &g)?), Some(chamfer_with(&p, &g, mode)?))
    };
    Ok(ImageRecord { run: 0, index: 0, f1, hausdorff, chamfer })
}

/// Per-image metrics and their means over an aligned dataset. Images whose
/// prediction (or ground truth) is empty score F1 as defined by
/// [`boundary_f1`] and are left out of the distance means.
pub fn evaluate_dataset(preds: &[BinaryImage], gts: &[BinaryImage], tolerance: f64) -> Result<MetricsReport> {
    evaluate_dataset_with(preds, gts, tolerance, ChamferMode::Sum)
}

pub fn evaluate_dataset_with(
    preds: &[BinaryImage],
    gts: &[BinaryImage],
    tolerance: f64,
    mode: ChamferMode,
) -> Result<MetricsReport> {
    ensure!(
        preds.len() == gts.len(),
        InvalidArgument,
        "{} predictions for {} ground truths",
        preds.len(),
        gts.len()
    );
    let records = preds
        .par_iter()
        .zip(gts)
        .enumerate()
        .map(|(i, (p, g))| {
            let mut r = image_metrics(p, g, tolerance, mode)?;
            r.index = i;
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_records(records, tolerance, mode))
}
