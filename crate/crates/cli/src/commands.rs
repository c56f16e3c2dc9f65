use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use contour_refine::data::{
    generate_synthetic_dataset, load_dataset, read_mask_png, resize_bilinear, write_mask_png,
    Dataset, Sample, Split, MANIFEST_FILE,
};
use contour_refine::denoiser::{load_checkpoint, DenoiserModel};
use contour_refine::diffusion::DiffusionProcess;
use contour_refine::metrics::{aggregate_runs, MetricsReport};
use contour_refine::pipeline::{
    gt_contour, guide_contour, refine, refine_all, sample_seed, score, ReverseMode,
};
use contour_refine::training::{self, TrainOptions, BEST_EMA_FILE};
use contour_refine::{BinaryImage, Error};
use serde::Serialize;

use crate::config::{AblationAxis, RunConfig, OUTPUT_ENV};
use crate::overlay::write_overlay;
use crate::Usage;

/// `--out` if given, otherwise `$CONTOUR_REFINE_OUTPUT/<command>` or
/// `runs/<command>`.
pub fn output_dir(out: Option<&Path>, command: &str) -> PathBuf {
    match out {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(OUTPUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(command),
    }
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force`.
pub fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .next()
            .is_some();
        if non_empty && !force {
            bail!(Usage(format!(
                "output directory {} is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn data_manifest(cfg: &RunConfig) -> Result<PathBuf> {
    let Some(data) = &cfg.paths.data else {
        bail!(Usage("--data is required".into()));
    };
    Ok(if data.is_dir() {
        data.join(MANIFEST_FILE)
    } else {
        data.clone()
    })
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let path = data_manifest(cfg)?;
    load_dataset(&path).with_context(|| format!("loading dataset {}", path.display()))
}

fn split_samples(ds: &Dataset, split: Split) -> Result<Vec<Sample>> {
    let s: Vec<Sample> = ds.split(split).into_iter().cloned().collect();
    if s.is_empty() {
        bail!(Usage(format!(
            "dataset {} has no {} samples",
            ds.manifest.root.display(),
            split.as_str()
        )));
    }
    Ok(s)
}

/// A training directory resolves to its best-EMA checkpoint.
fn checkpoint_path(cfg: &RunConfig) -> Result<PathBuf> {
    let Some(p) = &cfg.paths.checkpoint else {
        bail!(Usage("--checkpoint is required".into()));
    };
    Ok(if p.is_dir() {
        p.join(BEST_EMA_FILE)
    } else {
        p.clone()
    })
}

fn load_model(cfg: &mut RunConfig, explicit: bool) -> Result<DenoiserModel> {
    let path = checkpoint_path(cfg)?;
    let (model, _) =
        load_checkpoint(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    cfg.adopt_model(model.config(), explicit)?;
    Ok(model)
}

fn process_for(cfg: &RunConfig) -> Result<Option<DiffusionProcess>> {
    Ok(match cfg.inference.reverse {
        ReverseMode::Simplified => None,
        ReverseMode::Standard => Some(cfg.train.process()?),
    })
}

pub fn generate(cfg: &RunConfig, out: &Path, force: bool) -> Result<()> {
    prepare_dir(out, force)?;
    if force {
        for d in ["images", "masks", "guides"] {
            let p = out.join(d);
            if p.is_dir() {
                fs::remove_dir_all(&p).with_context(|| format!("removing {}", p.display()))?;
            }
        }
    }
    let g = &cfg.generate;
    let manifest = generate_synthetic_dataset(out, &g.synth(), g.seed, g.n_train, g.n_eval)?;
    cfg.write(out)?;
    eprintln!(
        "generated {} train / {} eval samples",
        manifest.count(Split::Train),
        manifest.count(Split::Eval)
    );
    println!("{}", out.join(MANIFEST_FILE).display());
    Ok(())
}

pub fn train(cfg: &RunConfig, out: &Path, force: bool, resume: bool) -> Result<()> {
    if !resume {
        prepare_dir(out, force)?;
    } else {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    }
    let ds = load_data(cfg)?;
    let tr = split_samples(&ds, Split::Train)?;
    let va = split_samples(&ds, Split::Eval)?;
    cfg.write(out)?;
    let opts = TrainOptions {
        resume,
        stop_after: None,
    };
    let outcome = training::train(
        &cfg.train,
        &cfg.model,
        &tr,
        &va,
        out,
        &opts,
        &mut |r| match (r.val_ssim, r.val_f1) {
            (Some(s), Some(f)) => eprintln!(
                "step {:>5}  loss {:.4}  val ssim {:.4}  val f1 {:.4}  {:.0}s",
                r.step, r.loss, s, f, r.wall_time
            ),
            _ => {}
        },
    )?;
    eprintln!(
        "finished {} steps, best EMA at step {:?}",
        outcome.steps, outcome.best_step
    );
    println!("{}", outcome.best_ema.display());
    Ok(())
}

/// Truncation masks: a single PNG applied to every sample, or a directory
/// holding `<id>.png` per sample.
fn trunc_mask(cfg: &RunConfig, id: &str) -> Result<Option<BinaryImage>> {
    let Some(p) = &cfg.paths.trunc_mask else {
        return Ok(None);
    };
    let file = if p.is_dir() {
        p.join(format!("{id}.png"))
    } else {
        p.clone()
    };
    if p.is_dir() && !file.exists() {
        return Ok(None);
    }
    Ok(Some(read_mask_png(&file).with_context(|| {
        format!("reading truncation mask {}", file.display())
    })?))
}

#[derive(Serialize)]
struct InferRecord<'a> {
    id: &'a str,
    contour_pixels: usize,
    flagged: bool,
}

pub fn infer(cfg: &mut RunConfig, out: &Path, force: bool, explicit_model: bool) -> Result<()> {
    let model = load_model(cfg, explicit_model)?;
    cfg.resolve()?;
    prepare_dir(out, force)?;
    let ds = load_data(cfg)?;
    let samples = split_samples(&ds, cfg.eval.split)?;
    let process = process_for(cfg)?;
    let rcfg = cfg.refine_config();
    let size = cfg.train.image_size;
    for d in ["contours", "overlays"] {
        fs::create_dir_all(out.join(d))
            .with_context(|| format!("creating {}", out.join(d).display()))?;
    }
    cfg.write(out)?;
    let mut records = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let mut c = rcfg.clone();
        c.inference.seed = sample_seed(rcfg.inference.seed, 0, i as u64);
        let trunc = trunc_mask(cfg, &s.id)?;
        let r = refine(&model, process.as_ref(), s, &c, trunc.as_ref())?;
        write_mask_png(
            &out.join("contours").join(format!("{}.png", s.id)),
            &r.contour,
        )?;
        let image = resize_bilinear(&s.image, size, size);
        write_overlay(
            &out.join("overlays").join(format!("{}.png", s.id)),
            &image,
            &guide_contour(s, size)?,
            &r.contour,
            &gt_contour(s, size)?,
        )?;
        records.push((s.id.clone(), r.contour.count(), r.flagged));
    }
    let summary: Vec<InferRecord> = records
        .iter()
        .map(|(id, n, f)| InferRecord {
            id,
            contour_pixels: *n,
            flagged: *f,
        })
        .collect();
    let path = out.join("infer.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)?)
        .with_context(|| format!("writing {}", path.display()))?;
    eprintln!(
        "refined {} samples ({} flagged open)",
        records.len(),
        records.iter().filter(|r| r.2).count()
    );
    println!("{}", out.display());
    Ok(())
}

/// Refined-contour metrics over `runs` seeded inference passes.
fn evaluate_model(
    model: &DenoiserModel,
    cfg: &RunConfig,
    samples: &[Sample],
    runs: usize,
) -> Result<MetricsReport> {
    let process = process_for(cfg)?;
    let rcfg = cfg.refine_config();
    let mut reports = Vec::with_capacity(runs);
    for run in 0..runs {
        let refined = refine_all(model, process.as_ref(), samples, &rcfg, run as u64)?;
        let preds: Vec<BinaryImage> = refined.into_iter().map(|r| r.contour).collect();
        reports.push(score(
            &preds,
            samples,
            cfg.train.image_size,
            cfg.tolerance(),
            cfg.eval.chamfer_mode,
        )?);
    }
    if runs == 1 {
        Ok(reports.pop().expect("one run"))
    } else {
        Ok(aggregate_runs(&reports, cfg.eval.level)?)
    }
}

fn guide_report(cfg: &RunConfig, samples: &[Sample]) -> Result<MetricsReport> {
    let size = cfg.train.image_size;
    let preds = samples
        .iter()
        .map(|s| guide_contour(s, size))
        .collect::<contour_refine::Result<Vec<_>>>()?;
    Ok(score(
        &preds,
        samples,
        size,
        cfg.tolerance(),
        cfg.eval.chamfer_mode,
    )?)
}

fn write_report(out: &Path, name: &str, report: &MetricsReport) -> Result<()> {
    let json = out.join(format!("{name}.json"));
    fs::write(&json, report.to_json()?).with_context(|| format!("writing {}", json.display()))?;
    let txt = out.join(format!("{name}.txt"));
    fs::write(&txt, report.to_text()).with_context(|| format!("writing {}", txt.display()))?;
    Ok(())
}

pub fn eval(cfg: &mut RunConfig, out: &Path, force: bool, explicit_model: bool) -> Result<()> {
    let model = load_model(cfg, explicit_model)?;
    cfg.resolve()?;
    prepare_dir(out, force)?;
    let ds = load_data(cfg)?;
    let samples = split_samples(&ds, cfg.eval.split)?;
    cfg.write(out)?;
    let refined = evaluate_model(&model, cfg, &samples, cfg.eval.runs)?;
    let guide = guide_report(cfg, &samples)?;
    write_report(out, "metrics", &refined)?;
    write_report(out, "guide_metrics", &guide)?;
    let dataset = ds.manifest.root.display().to_string();
    let table = format!(
        "{}\n{}\n{}\n",
        MetricsReport::table_header(),
        refined.table_row("refined", &dataset),
        guide.table_row("guide", &dataset)
    );
    let path = out.join("table.csv");
    fs::write(&path, &table).with_context(|| format!("writing {}", path.display()))?;
    print!("{table}");
    Ok(())
}

#[derive(Debug, Serialize)]
struct Leg {
    axis: &'static str,
    value: String,
    f1: Option<f64>,
    hausdorff: Option<f64>,
    chamfer: Option<f64>,
    excluded: Option<usize>,
    train_seconds: Option<f64>,
    infer_seconds_per_image: Option<f64>,
    error: Option<String>,
}

fn leg_value(axis: AblationAxis, v: usize) -> String {
    match axis {
        AblationAxis::Reverse if v == 0 => "simplified".into(),
        AblationAxis::Reverse => "standard".into(),
        _ => v.to_string(),
    }
}

/// Trains a model for one leg inside `dir`.
fn train_leg(
    cfg: &RunConfig,
    tr: &[Sample],
    va: &[Sample],
    dir: &Path,
) -> Result<(DenoiserModel, f64)> {
    let start = Instant::now();
    let outcome = training::train(
        &cfg.train,
        &cfg.model,
        tr,
        va,
        dir,
        &TrainOptions::default(),
        &mut |_| {},
    )?;
    let (model, _) = load_checkpoint(&outcome.best_ema)?;
    Ok((model, start.elapsed().as_secs_f64()))
}

fn run_leg(
    cfg: &RunConfig,
    axis: AblationAxis,
    value: usize,
    shared: Option<&DenoiserModel>,
    ds: &Dataset,
    out: &Path,
) -> Result<(MetricsReport, Option<f64>, f64)> {
    let mut leg = cfg.clone();
    match axis {
        AblationAxis::Steps => leg.inference.steps = value,
        AblationAxis::Reverse => {
            leg.inference.reverse = if value == 0 {
                ReverseMode::Simplified
            } else {
                ReverseMode::Standard
            }
        }
        AblationAxis::Categories => {
            leg.train.n_categories = value;
            leg.inference.threshold = None;
        }
        AblationAxis::DatasetSize => {}
    }
    leg.resolve()?;
    let va = split_samples(ds, Split::Eval)?;
    let (owned, train_seconds) = match shared {
        Some(_) => (None, None),
        None => {
            let mut tr = split_samples(ds, Split::Train)?;
            if axis == AblationAxis::DatasetSize {
                if value > tr.len() {
                    bail!(
                        "requested {value} training samples, dataset has {}",
                        tr.len()
                    );
                }
                tr.truncate(value);
            }
            let dir = out.join(format!("{}-{}", axis.name(), leg_value(axis, value)));
            let (m, secs) = train_leg(&leg, &tr, &va, &dir)?;
            (Some(m), Some(secs))
        }
    };
    let model = shared.or(owned.as_ref()).expect("a model");
    let start = Instant::now();
    let report = evaluate_model(model, &leg, &va, 1)?;
    let per_image = start.elapsed().as_secs_f64() / va.len() as f64;
    Ok((report, train_seconds, per_image))
}

pub fn ablate(cfg: &mut RunConfig, out: &Path, force: bool, explicit_model: bool) -> Result<()> {
    let axis = cfg.ablate.axis;
    let shared_axis = matches!(axis, AblationAxis::Steps | AblationAxis::Reverse);
    prepare_dir(out, force)?;
    let ds = load_data(cfg)?;
    let shared = if shared_axis {
        if cfg.paths.checkpoint.is_some() {
            Some(load_model(cfg, explicit_model)?)
        } else {
            cfg.resolve()?;
            let tr = split_samples(&ds, Split::Train)?;
            let va = split_samples(&ds, Split::Eval)?;
            eprintln!("training the shared model");
            Some(train_leg(cfg, &tr, &va, &out.join("model"))?.0)
        }
    } else {
        None
    };
    cfg.resolve()?;
    cfg.write(out)?;

    let mut legs = Vec::new();
    for value in cfg.ablate.legs() {
        let name = leg_value(axis, value);
        eprintln!("{} = {name}", axis.name());
        let leg = match run_leg(cfg, axis, value, shared.as_ref(), &ds, out) {
            Ok((r, train_seconds, per_image)) => Leg {
                axis: axis.name(),
                value: name,
                f1: r.f1.mean,
                hausdorff: r.hausdorff.mean,
                chamfer: r.chamfer.mean,
                excluded: Some(r.excluded),
                train_seconds,
                infer_seconds_per_image: Some(per_image),
                error: None,
            },
            Err(e) => {
                eprintln!("  failed: {e:#}");
                Leg {
                    axis: axis.name(),
                    value: name,
                    f1: None,
                    hausdorff: None,
                    chamfer: None,
                    excluded: None,
                    train_seconds: None,
                    infer_seconds_per_image: None,
                    error: Some(format!("{e:#}")),
                }
            }
        };
        legs.push(leg);
    }

    let fmt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.4}"));
    let mut table = format!(
        "{},f1,hausdorff,chamfer,excluded,train_s,infer_s_per_image,error\n",
        axis.name()
    );
    for l in &legs {
        table.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            l.value,
            fmt(l.f1),
            fmt(l.hausdorff),
            fmt(l.chamfer),
            l.excluded.map_or_else(String::new, |x| x.to_string()),
            fmt(l.train_seconds),
            fmt(l.infer_seconds_per_image),
            l.error.as_deref().unwrap_or("").replace(',', ";")
        ));
    }
    let csv = out.join(format!("ablation_{}.csv", axis.name()));
    fs::write(&csv, &table).with_context(|| format!("writing {}", csv.display()))?;
    let json = out.join(format!("ablation_{}.json", axis.name()));
    fs::write(&json, serde_json::to_string_pretty(&legs)?)
        .with_context(|| format!("writing {}", json.display()))?;
    print!("{table}");
    Ok(())
}

/// Whether an error chain carries a training divergence.
pub fn is_divergence(e: &anyhow::Error) -> bool {
    e.chain()
        .any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::Divergence(_))))
}
