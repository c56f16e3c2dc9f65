use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{t_confidence_interval, ChamferMode};
use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub run: usize,
    pub index: usize,
    pub f1: f64,
    pub hausdorff: Option<f64>,
    pub chamfer: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricSummary {
    /// Mean over the contributing per-image values; `None` if there are none.
    pub mean: Option<f64>,
    /// Half-width of the confidence interval over per-run means, present
    /// only with at least two runs.
    pub ci_half_width: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tolerance: f64,
    pub chamfer_mode: ChamferMode,
    pub n_runs: usize,
    pub n_images: usize,
    /// Records left out of the distance means because a set was empty.
    pub excluded: usize,
    pub confidence_level: Option<f64>,
    pub f1: MetricSummary,
    pub hausdorff: MetricSummary,
    pub chamfer: MetricSummary,
    pub per_image: Vec<ImageRecord>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl MetricsReport {
    /// Single-run report over `records`.
    pub fn from_records(records: Vec<ImageRecord>, tolerance: f64, chamfer_mode: ChamferMode) -> Self {
        let summary = |f: fn(&ImageRecord) -> Option<f64>| MetricSummary {
            mean: mean(records.iter().filter_map(f)),
            ci_half_width: None,
        };
        Self {
            tolerance,
            chamfer_mode,
            n_runs: 1,
            n_images: records.len(),
            excluded: records.iter().filter(|r| r.hausdorff.is_none()).count(),
            confidence_level: None,
            f1: summary(|r| Some(r.f1)),
            hausdorff: summary(|r| r.hausdorff),
            chamfer: summary(|r| r.chamfer),
            per_image: records,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Serialization(e.to_string()))
    }

    /// `key: value` lines with the aggregate figures.
    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.6}"));
        let mut s = String::new();
        let _ = writeln!(s, "tolerance: {}", self.tolerance);
        let _ = writeln!(s, "chamfer_mode: {:?}", self.chamfer_mode);
        let _ = writeln!(s, "n_runs: {}", self.n_runs);
        let _ = writeln!(s, "n_images: {}", self.n_images);
        let _ = writeln!(s, "excluded: {}", self.excluded);
        if let Some(level) = self.confidence_level {
            let _ = writeln!(s, "confidence_level: {level}");
        }
        for (name, m) in [("f1", &self.f1), ("hausdorff", &self.hausdorff), ("chamfer", &self.chamfer)] {
            let _ = writeln!(s, "{name}: {}", fmt(m.mean));
            let _ = writeln!(s, "{name}_ci: {}", fmt(m.ci_half_width));
        }
        s
    }

    pub fn table_header() -> &'static str {
        "method,dataset,f1,f1_ci,hausdorff,hausdorff_ci,chamfer,chamfer_ci,n_runs,excluded"
    }

    /// One CSV row under [`MetricsReport::table_header`]; missing values are
    /// left blank.
    pub fn table_row(&self, method: &str, dataset: &str) -> String {
        let f = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:.4}"));
        format!(
            "{method},{dataset},{},{},{},{},{},{},{},{}",
            f(self.f1.mean),
            f(self.f1.ci_half_width),
            f(self.hausdorff.mean),
            f(self.hausdorff.ci_half_width),
            f(self.chamfer.mean),
            f(self.chamfer.ci_half_width),
            self.n_runs,
            self.excluded
        )
    }
}

/// Merges independent evaluation runs. Means are taken over all per-image
/// records; confidence half-widths come from the per-run means.
pub fn aggregate_runs(runs: &[MetricsReport], level: f64) -> Result<MetricsReport> {
    ensure!(!runs.is_empty(), InvalidArgument, "no runs to aggregate");
    let first = &runs[0];
    ensure!(
        runs.iter().all(|r| r.tolerance == first.tolerance && r.chamfer_mode == first.chamfer_mode),
        InvalidArgument,
        "runs were evaluated with different settings"
    );
    let mut records = Vec::new();
    let mut next_run = 0;
    for report in runs {
        let mut ids: Vec<usize> = report.per_image.iter().map(|r| r.run).collect();
        ids.sort_unstable();
        ids.dedup();
        let remap: BTreeMap<usize, usize> = ids.iter().enumerate().map(|(i, &id)| (id, next_run + i)).collect();
        records.extend(report.per_image.iter().map(|r| ImageRecord { run: remap[&r.run], ..r.clone() }));
        next_run += report.n_runs.max(ids.len());
    }
    let mut out = MetricsReport::from_records(records, first.tolerance, first.chamfer_mode);
    out.n_runs = next_run;
    out.n_images = out.per_image.len();
    out.confidence_level = Some(level);
    let ci = |f: fn(&ImageRecord) -> Option<f64>| -> Result<Option<f64>> {
        let run_means: Vec<f64> = (0..next_run)
            .filter_map(|run| mean(out.per_image.iter().filter(|r| r.run == run).filter_map(f)))
            .collect();
        if run_means.len() < 2 {
            return Ok(None);
        }
        Ok(Some(t_confidence_interval(&run_means, level)?.1))
    };
    out.f1.ci_half_width = ci(|r| Some(r.f1))?;
    out.hausdorff.ci_half_width = ci(|r| r.hausdorff)?;
    out.chamfer.ci_half_width = ci(|r| r.chamfer)?;
    Ok(out)
}
