use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{degrade_mask, Sample, Split};
use crate::error::{ensure, Error, Result};
use crate::grid::{BinaryImage, GrayImage};
use crate::rng::{derive_seed, stream};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub image: String,
    pub gt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guide: Option<String>,
}

/// How a dataset was generated; used to rebuild guides that are not on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorInfo {
    pub size: usize,
    pub translucency: f64,
    pub severity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorInfo>,
    pub entries: Vec<ManifestEntry>,
    /// Directory holding the manifest; file paths are relative to it.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest =
            toml::from_str(&text).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        ensure!(
            m.version == MANIFEST_VERSION,
            Dataset,
            "{}: unsupported manifest version {}",
            path.display(),
            m.version
        );
        let mut seen = HashSet::new();
        for e in &m.entries {
            ensure!(seen.insert(e.id.as_str()), Dataset, "duplicate sample id {:?}", e.id);
        }
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn write(&self) -> Result<PathBuf> {
        let path = self.root.join(MANIFEST_FILE);
        let text = toml::to_string(self).map_err(|e| Error::Serialization(e.to_string()))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Loaded samples together with their manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }
}

/// Writes samples as PNGs under `root/{images,masks,guides}` plus a manifest.
pub fn save_dataset(samples: &[Sample], root: &Path, seed: u64, generator: Option<GeneratorInfo>) -> Result<DatasetManifest> {
    let mut seen = HashSet::new();
    for s in samples {
        ensure!(seen.insert(s.id.as_str()), Dataset, "duplicate sample id {:?}", s.id);
        s.validate()?;
    }
    for dir in ["images", "masks", "guides"] {
        let d = root.join(dir);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let entries = samples
        .par_iter()
        .map(|s| {
            let entry = ManifestEntry {
                id: s.id.clone(),
                split: s.split,
                image: format!("images/{}.png", s.id),
                gt: format!("masks/{}.png", s.id),
                guide: Some(format!("guides/{}.png", s.id)),
            };
            write_gray_png(&root.join(&entry.image), &s.image)?;
            write_mask_png(&root.join(&entry.gt), &s.gt_mask)?;
            write_mask_png(&root.join(entry.guide.as_ref().expect("set above")), &s.guide_mask)?;
            Ok(entry)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        seed,
        generator,
        entries,
        root: root.to_path_buf(),
    };
    manifest.write()?;
    Ok(manifest)
}

/// Loads every entry of the manifest at `path`. Entries without a guide file
/// get one by degrading the ground truth with the generator's severity.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest = DatasetManifest::read(path)?;
    let samples = manifest
        .entries
        .par_iter()
        .enumerate()
        .map(|(i, e)| load_entry(&manifest, i, e))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, samples })
}

fn load_entry(m: &DatasetManifest, index: usize, e: &ManifestEntry) -> Result<Sample> {
    let image = with_id(&e.id, "image", read_gray_png(&m.root.join(&e.image)))?;
    let gt_mask = with_id(&e.id, "ground truth", read_mask_png(&m.root.join(&e.gt)))?;
    let guide_mask = match &e.guide {
        Some(g) => with_id(&e.id, "guide", read_mask_png(&m.root.join(g)))?,
        None => {
            let severity = m.generator.as_ref().map_or(0.0, |g| g.severity);
            degrade_mask(&gt_mask, severity, derive_seed(m.seed, &[stream::DEGRADE, index as u64]))
        }
    };
    let s = Sample {
        id: e.id.clone(),
        split: e.split,
        image,
        gt_mask,
        guide_mask,
    };
    with_id(&e.id, "dimensions", s.validate())?;
    Ok(s)
}

fn with_id<T>(id: &str, what: &str, r: Result<T>) -> Result<T> {
    r.map_err(|err| Error::Dataset(format!("sample {id:?}: {what}: {err}")))
}

pub fn write_gray_png(path: &Path, img: &GrayImage) -> Result<()> {
    let bytes: Vec<u8> = img.values().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    write_png(path, img.width(), img.height(), png::ColorType::Grayscale, png::BitDepth::Eight, &bytes)
}

pub fn write_mask_png(path: &Path, mask: &BinaryImage) -> Result<()> {
    let (h, w) = (mask.height(), mask.width());
    let stride = w.div_ceil(8);
    let mut bytes = vec![0u8; stride * h];
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) {
                bytes[r * stride + c / 8] |= 0x80 >> (c % 8);
            }
        }
    }
    write_png(path, w, h, png::ColorType::Grayscale, png::BitDepth::One, &bytes)
}

/// Writes RGB 8-bit pixels, row-major, three bytes per pixel.
pub fn write_rgb_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    ensure!(rgb.len() == width * height * 3, ShapeMismatch, "rgb buffer size");
    write_png(path, width, height, png::ColorType::Rgb, png::BitDepth::Eight, rgb)
}

fn write_png(path: &Path, w: usize, h: usize, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<()> {
    let img_err = |e: png::EncodingError| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(img_err)?;
    writer.write_image_data(data).map_err(img_err)?;
    writer.finish().map_err(img_err)
}

/// Decoded 8-bit samples: `(height, width, channels, data)`; 1-bit
/// grayscale is expanded to 0/255.
fn read_png(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let img_err = |message: String| Error::Image {
        path: path.to_path_buf(),
        message,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = png::Decoder::new(BufReader::new(file))
        .read_info()
        .map_err(|e| img_err(e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| img_err(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(img_err("indexed colour is not supported".into())),
    };
    let data = match (info.bit_depth, channels) {
        (png::BitDepth::Eight, _) => (0..h)
            .flat_map(|r| buf[r * info.line_size..r * info.line_size + w * channels].to_vec())
            .collect(),
        (png::BitDepth::One, 1) => (0..h)
            .flat_map(|r| {
                let row = &buf[r * info.line_size..];
                (0..w).map(move |c| if row[c / 8] & (0x80 >> (c % 8)) != 0 { 255 } else { 0 })
            })
            .collect(),
        (d, _) => return Err(img_err(format!("unsupported bit depth {d:?}"))),
    };
    Ok((h, w, channels, data))
}

/// Reads a PNG as grayscale in `[0, 1]`; colour images are converted with
/// Rec. 601 luma weights and alpha is ignored.
pub fn read_gray_png(path: &Path) -> Result<GrayImage> {
    let (h, w, ch, data) = read_png(path)?;
    let values = data
        .chunks_exact(ch)
        .map(|px| match ch {
            1 | 2 => px[0] as f64 / 255.0,
            _ => (0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64) / 255.0,
        })
        .collect();
    GrayImage::from_vec(h, w, values)
}

/// Reads a PNG mask; any pixel with first-channel value above half is set.
pub fn read_mask_png(path: &Path) -> Result<BinaryImage> {
    let (h, w, ch, data) = read_png(path)?;
    BinaryImage::from_vec(h, w, data.chunks_exact(ch).map(|px| px[0] >= 128).collect())
}
