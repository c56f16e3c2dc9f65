use std::collections::VecDeque;
use std::f64::consts::TAU;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::io::{save_dataset, DatasetManifest, GeneratorInfo};
use super::{Sample, Split};
use crate::error::{ensure, Result};
use crate::grid::{BinaryImage, GrayImage};
use crate::rng::{derive_seed, rng_for, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub size: usize,
    /// 0 renders crisp opaque shapes; 1 soft, see-through ones.
    pub translucency: f64,
    /// Guide-mask degradation severity.
    pub severity: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 64,
            translucency: 0.3,
            severity: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.size >= 32, InvalidArgument, "image size must be at least 32, got {}", self.size);
        ensure!(
            (0.0..=1.0).contains(&self.translucency),
            InvalidArgument,
            "translucency must be in [0, 1], got {}",
            self.translucency
        );
        ensure!(
            (0.0..=1.0).contains(&self.severity),
            InvalidArgument,
            "severity must be in [0, 1], got {}",
            self.severity
        );
        Ok(())
    }
}

/// Sum of a few random plane waves; smooth, zero-mean texture.
struct Waves(Vec<(f64, f64, f64, f64)>);

impl Waves {
    fn new(rng: &mut ChaCha8Rng, count: usize, min_period: f64, max_period: f64, amplitude: f64) -> Self {
        Self(
            (0..count)
                .map(|_| {
                    let period = rng.gen_range(min_period..max_period);
                    let angle = rng.gen_range(0.0..TAU);
                    let (fy, fx) = (angle.sin() / period, angle.cos() / period);
                    (fy, fx, rng.gen_range(0.0..TAU), amplitude * rng.gen_range(0.5..1.0))
                })
                .collect(),
        )
    }

    fn at(&self, y: f64, x: f64) -> f64 {
        self.0.iter().map(|&(fy, fx, ph, a)| a * (TAU * (fy * y + fx * x) + ph).sin()).sum()
    }
}

/// Star-shaped blob: an ellipse whose radius is modulated by a few low
/// harmonics.
struct Blob {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    rot: f64,
    harmonics: Vec<(f64, f64)>,
}

impl Blob {
    fn random(rng: &mut ChaCha8Rng, size: f64) -> Self {
        let a = size * rng.gen_range(0.16..0.30);
        let b = a * rng.gen_range(0.6..1.0);
        let margin = a * 1.3 + 2.0;
        Self {
            cy: rng.gen_range(margin..size - margin),
            cx: rng.gen_range(margin..size - margin),
            a,
            b,
            rot: rng.gen_range(0.0..TAU),
            harmonics: (2..=4).map(|_| (rng.gen_range(0.0..0.09), rng.gen_range(0.0..TAU))).collect(),
        }
    }

    /// Approximate signed distance in pixels (negative inside).
    fn signed_distance(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let rho = (dy * dy + dx * dx).sqrt();
        let phi = dy.atan2(dx) - self.rot;
        let (s, c) = phi.sin_cos();
        let ellipse = self.a * self.b / ((self.b * c).powi(2) + (self.a * s).powi(2)).sqrt();
        let wobble: f64 = self
            .harmonics
            .iter()
            .enumerate()
            .map(|(k, &(amp, ph))| amp * ((k + 2) as f64 * phi + ph).cos())
            .sum();
        rho - ellipse * (1.0 + wobble)
    }
}

/// One synthetic image and its ground-truth mask, determined by
/// `(seed, index)`. Pixel values are quantized to 8 bits.
pub fn synth_sample(cfg: &SynthConfig, seed: u64, index: u64) -> (GrayImage, BinaryImage) {
    let mut rng = rng_for(seed, &[stream::SYNTH, index]);
    let size = cfg.size as f64;
    let blob = Blob::random(&mut rng, size);
    let scale = size / 64.0;
    let background = Waves::new(&mut rng, 4, 20.0 * scale, 60.0 * scale, 0.03);
    let bg_level: f64 = rng.gen_range(0.25..0.6);
    let contrast = rng.gen_range(0.3..0.45) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let fg_level = (bg_level + contrast).clamp(0.05, 0.95);
    let opacity = 1.0 - 0.6 * cfg.translucency;
    let softness = 0.25 + 3.0 * cfg.translucency * scale;
    let grain: Vec<f64> = (0..cfg.size * cfg.size).map(|_| rng.gen_range(-0.02..0.02)).collect();

    let n = cfg.size;
    let mut values = vec![0.0; n * n];
    let mut bits = vec![false; n * n];
    for r in 0..n {
        for c in 0..n {
            let (y, x) = (r as f64, c as f64);
            let d = blob.signed_distance(y, x);
            let alpha = opacity / (1.0 + (d / softness).exp());
            let bg = bg_level + background.at(y, x);
            let v = bg + alpha * (fg_level - bg) + grain[r * n + c];
            values[r * n + c] = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
            bits[r * n + c] = d <= 0.0;
        }
    }
    (
        GrayImage::from_vec(n, n, values).expect("square buffer"),
        BinaryImage::from_vec(n, n, bits).expect("square buffer"),
    )
}

/// Train then eval samples; sample `i` (counting across both splits) uses
/// generator index `i` and guide seed `(seed, DEGRADE, i)`.
pub fn generate_samples(cfg: &SynthConfig, seed: u64, n_train: usize, n_eval: usize) -> Result<Vec<Sample>> {
    cfg.validate()?;
    ensure!(n_train + n_eval >= 1, InvalidArgument, "need at least one sample");
    Ok((0..n_train + n_eval)
        .into_par_iter()
        .map(|i| {
            let (image, gt_mask) = synth_sample(cfg, seed, i as u64);
            let guide_mask = degrade_mask(&gt_mask, cfg.severity, derive_seed(seed, &[stream::DEGRADE, i as u64]));
            let (split, local) = if i < n_train { (Split::Train, i) } else { (Split::Eval, i - n_train) };
            Sample {
                id: format!("{}-{local:04}", split.as_str()),
                split,
                image,
                gt_mask,
                guide_mask,
            }
        })
        .collect())
}

/// Generates and saves a dataset under `root`.
pub fn generate_synthetic_dataset(
    root: &Path,
    cfg: &SynthConfig,
    seed: u64,
    n_train: usize,
    n_eval: usize,
) -> Result<DatasetManifest> {
    let samples = generate_samples(cfg, seed, n_train, n_eval)?;
    save_dataset(
        &samples,
        root,
        seed,
        Some(GeneratorInfo {
            size: cfg.size,
            translucency: cfg.translucency,
            severity: cfg.severity,
        }),
    )
}

/// Simulates an imperfect detector: a smooth elastic warp of the mask,
/// a random disk erosion or dilation, and dropped boundary pixels, all
/// scaled by `severity`. Only the largest 8-connected component is kept.
pub fn degrade_mask(mask: &BinaryImage, severity: f64, seed: u64) -> BinaryImage {
    let severity = severity.clamp(0.0, 1.0);
    if severity == 0.0 || mask.is_empty() {
        return mask.clone();
    }
    let mut rng = rng_for(seed, &[stream::DEGRADE]);
    let (h, w) = (mask.height(), mask.width());
    let scale = h.max(w) as f64 / 64.0;

    let amp = severity * 10.0 * scale;
    let warp_y = Waves::new(&mut rng, 3, 24.0 * scale, 48.0 * scale, amp / 3f64.sqrt());
    let warp_x = Waves::new(&mut rng, 3, 24.0 * scale, 48.0 * scale, amp / 3f64.sqrt());
    let mut out = BinaryImage::from_fn(h, w, |r, c| {
        let (y, x) = (r as f64, c as f64);
        let sy = (y + warp_y.at(y, x)).round() as isize;
        let sx = (x + warp_x.at(y, x)).round() as isize;
        mask.get_signed(sy, sx)
    });

    let radius = (severity * 4.0 * scale * rng.gen_range(0.5..1.0)).round() as isize;
    let grow = rng.gen_bool(0.5);
    if radius > 0 {
        out = disk_morph(&out, radius, grow);
    }

    let drop = rng.gen_range(0.0..=severity * 0.2);
    let boundary: Vec<(usize, usize)> = out
        .on_pixels()
        .into_iter()
        .filter(|&(r, c)| {
            let (r, c) = (r as isize, c as isize);
            [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|&(dr, dc)| !out.get_signed(r + dr, c + dc))
        })
        .collect();
    for (r, c) in boundary {
        if rng.gen_bool(drop) {
            out.set(r, c, false);
        }
    }

    let kept = largest_component(&out);
    if kept.is_empty() {
        mask.clone()
    } else {
        kept
    }
}

fn disk_morph(b: &BinaryImage, radius: isize, grow: bool) -> BinaryImage {
    let offsets: Vec<(isize, isize)> = (-radius..=radius)
        .flat_map(|dy| (-radius..=radius).map(move |dx| (dy, dx)))
        .filter(|&(dy, dx)| dy * dy + dx * dx <= radius * radius)
        .collect();
    BinaryImage::from_fn(b.height(), b.width(), |r, c| {
        let (r, c) = (r as isize, c as isize);
        if grow {
            offsets.iter().any(|&(dy, dx)| b.get_signed(r + dy, c + dx))
        } else {
            offsets.iter().all(|&(dy, dx)| {
                let (y, x) = (r + dy, c + dx);
                // Outside the image counts as foreground so shapes touching
                // the border are not eaten from it.
                y < 0 || x < 0 || y >= b.height() as isize || x >= b.width() as isize || b.get_signed(y, x)
            })
        }
    })
}

/// Largest 8-connected component; ties go to the first in raster order.
pub fn largest_component(b: &BinaryImage) -> BinaryImage {
    let (h, w) = (b.height(), b.width());
    let mut label = vec![usize::MAX; h * w];
    let mut best: (usize, usize) = (0, usize::MAX);
    let mut sizes = Vec::new();
    for start in 0..h * w {
        if !b.bits()[start] || label[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let mut count = 0;
        let mut queue = VecDeque::from([start]);
        label[start] = id;
        while let Some(i) = queue.pop_front() {
            count += 1;
            let (r, c) = ((i / w) as isize, (i % w) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (y, x) = (r + dr, c + dc);
                    if b.get_signed(y, x) {
                        let j = y as usize * w + x as usize;
                        if label[j] == usize::MAX {
                            label[j] = id;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
        sizes.push(count);
        if best.1 == usize::MAX || count > best.0 {
            best = (count, id);
        }
    }
    BinaryImage::from_vec(h, w, label.iter().map(|&l| l == best.1 && l != usize::MAX).collect()).expect("same shape")
}
