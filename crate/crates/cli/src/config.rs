//! The resolved run configuration: defaults, then an optional config file,
//! then command-line overrides. Every command writes the result to its
//! output directory so a run can be repeated from that file alone.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use contour_refine::contour_ops::PostprocessOptions;
use contour_refine::data::{Split, SynthConfig};
use contour_refine::denoiser::DenoiserConfig;
use contour_refine::diffusion::{default_threshold, InferenceConfig, InitMode};
use contour_refine::metrics::ChamferMode;
use contour_refine::pipeline::{default_tolerance, RefineConfig, ReverseMode};
use contour_refine::training::TrainConfig;
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;
pub const CONFIG_FILE: &str = "config.toml";
/// Default output root when `--out` is not given.
pub const OUTPUT_ENV: &str = "CONTOUR_REFINE_OUTPUT";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub trunc_mask: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateSection {
    pub n_train: usize,
    pub n_eval: usize,
    pub seed: u64,
    pub size: usize,
    pub translucency: f64,
    pub severity: f64,
}

impl Default for GenerateSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        Self {
            n_train: 200,
            n_eval: 40,
            seed: 7,
            size: s.size,
            translucency: s.translucency,
            severity: s.severity,
        }
    }
}

impl GenerateSection {
    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            size: self.size,
            translucency: self.translucency,
            severity: self.severity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceSection {
    pub steps: usize,
    pub alpha: f64,
    /// Decode threshold; `n_categories / 2 - 1` when unset.
    pub threshold: Option<usize>,
    pub reverse: ReverseMode,
    pub init: InitMode,
    pub seed: u64,
}

impl Default for InferenceSection {
    fn default() -> Self {
        Self {
            steps: 10,
            alpha: 0.01,
            threshold: None,
            reverse: ReverseMode::Simplified,
            init: InitMode::Uniform,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// Boundary-F1 tolerance in pixels; scaled from 10 px at 352 px when unset.
    pub tolerance: Option<f64>,
    pub chamfer_mode: ChamferMode,
    pub runs: usize,
    pub level: f64,
    pub split: Split,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            tolerance: None,
            chamfer_mode: ChamferMode::Sum,
            runs: 1,
            level: 0.95,
            split: Split::Eval,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum AblationAxis {
    Steps,
    Categories,
    Reverse,
    DatasetSize,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::Steps => "steps",
            Self::Categories => "categories",
            Self::Reverse => "reverse",
            Self::DatasetSize => "dataset-size",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblateSection {
    pub axis: AblationAxis,
    /// Leg values; the axis default when empty.
    pub values: Vec<usize>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            axis: AblationAxis::Steps,
            values: Vec::new(),
        }
    }
}

impl AblateSection {
    pub fn legs(&self) -> Vec<usize> {
        if !self.values.is_empty() {
            return self.values.clone();
        }
        match self.axis {
            AblationAxis::Steps => vec![1, 2, 4, 8, 16],
            AblationAxis::Categories => vec![2, 5, 8, 11],
            AblationAxis::Reverse => vec![0, 1],
            AblationAxis::DatasetSize => vec![50, 100, 200],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub version: u32,
    /// Command that produced this file.
    pub command: String,
    pub threads: Option<usize>,
    pub paths: Paths,
    pub generate: GenerateSection,
    pub model: DenoiserConfig,
    pub train: TrainConfig,
    pub inference: InferenceSection,
    pub postprocess: PostprocessOptions,
    pub eval: EvalSection,
    pub ablate: AblateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            command: String::new(),
            threads: None,
            paths: Paths::default(),
            generate: GenerateSection::default(),
            model: DenoiserConfig::default(),
            train: TrainConfig::default(),
            inference: InferenceSection::default(),
            postprocess: PostprocessOptions::default(),
            eval: EvalSection::default(),
            ablate: AblateSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if cfg.version != CONFIG_VERSION {
            bail!(crate::Usage(format!(
                "{}: unsupported config version {} (expected {CONFIG_VERSION})",
                path.display(),
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(CONFIG_FILE);
        let text = toml::to_string(self).context("serializing the resolved config")?;
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    /// Fills derived values and makes the model and training sections agree
    /// on categories, `T` and image size.
    pub fn resolve(&mut self) -> Result<()> {
        self.version = CONFIG_VERSION;
        self.model.n_categories = self.train.n_categories;
        self.model.timesteps = self.train.timesteps;
        if self.inference.threshold.is_none() {
            self.inference.threshold = Some(default_threshold(self.train.n_categories));
        }
        if self.eval.tolerance.is_none() {
            self.eval.tolerance = Some(default_tolerance(self.train.image_size));
        }
        let usage = |e: contour_refine::Error| anyhow::Error::new(crate::Usage(e.to_string()));
        self.model.validate().map_err(usage)?;
        self.train.validate().map_err(usage)?;
        self.generate.synth().validate().map_err(usage)?;
        let threshold = self.threshold();
        if threshold >= self.train.n_categories {
            bail!(crate::Usage(format!(
                "threshold {threshold} must be below n_categories {}",
                self.train.n_categories
            )));
        }
        if self.inference.steps == 0 || self.inference.steps > self.train.timesteps {
            bail!(crate::Usage(format!(
                "steps must be in 1..={}, got {}",
                self.train.timesteps, self.inference.steps
            )));
        }
        if !(self.inference.alpha > 0.0) {
            bail!(crate::Usage("alpha must be positive".into()));
        }
        if self.eval.runs == 0 {
            bail!(crate::Usage("runs must be at least 1".into()));
        }
        if !(self.eval.level > 0.0 && self.eval.level < 1.0) {
            bail!(crate::Usage(format!(
                "level must be in (0, 1), got {}",
                self.eval.level
            )));
        }
        if self.postprocess.close_radius == 0 {
            bail!(crate::Usage("close radius must be at least 1".into()));
        }
        Ok(())
    }

    pub fn threshold(&self) -> usize {
        self.inference
            .threshold
            .unwrap_or_else(|| default_threshold(self.train.n_categories))
    }

    pub fn tolerance(&self) -> f64 {
        self.eval
            .tolerance
            .unwrap_or_else(|| default_tolerance(self.train.image_size))
    }

    pub fn refine_config(&self) -> RefineConfig {
        let mut inference = InferenceConfig::new(
            self.train.timesteps,
            self.inference.steps,
            self.train.n_categories,
        );
        inference.alpha = self.inference.alpha;
        inference.threshold = self.threshold();
        inference.seed = self.inference.seed;
        inference.init = self.inference.init;
        RefineConfig {
            image_size: self.train.image_size,
            inference,
            reverse: self.inference.reverse,
            postprocess: self.postprocess.clone(),
        }
    }

    /// Adopts the architecture stored in a checkpoint. Fails when the user
    /// asked for a different category count or `T`.
    pub fn adopt_model(&mut self, model: &DenoiserConfig, explicit: bool) -> Result<()> {
        if explicit
            && (model.n_categories != self.train.n_categories
                || model.timesteps != self.train.timesteps)
        {
            bail!(crate::Usage(format!(
                "checkpoint has n_categories={} T={}, config asks for n_categories={} T={}",
                model.n_categories, model.timesteps, self.train.n_categories, self.train.timesteps
            )));
        }
        self.model = model.clone();
        self.train.n_categories = model.n_categories;
        self.train.timesteps = model.timesteps;
        Ok(())
    }
}
