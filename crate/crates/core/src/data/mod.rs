//! Synthetic translucent-shape datasets, guide-mask degradation, dataset IO,
//! and assembly of model conditions and training targets.

mod io;
mod synth;

pub use io::{
    load_dataset, read_gray_png, read_mask_png, save_dataset, write_gray_png, write_mask_png, write_rgb_png, Dataset,
    DatasetManifest, GeneratorInfo, ManifestEntry, MANIFEST_FILE, MANIFEST_VERSION,
};
pub use synth::{degrade_mask, generate_samples, generate_synthetic_dataset, largest_component, synth_sample, SynthConfig};

use serde::{Deserialize, Serialize};

use crate::contour_ops::{longest_contour, rasterize_contour, trace_contours};
use crate::error::{ensure, Error, Result};
use crate::grid::{BinaryImage, CategoricalGrid, ConditionStack, GrayImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub split: Split,
    pub image: GrayImage,
    pub gt_mask: BinaryImage,
    pub guide_mask: BinaryImage,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        for (name, m) in [("ground truth", &self.gt_mask), ("guide", &self.guide_mask)] {
            ensure!(
                m.height() == h && m.width() == w,
                ShapeMismatch,
                "{name} mask {}x{} vs image {h}x{w} in sample {:?}",
                m.height(),
                m.width(),
                self.id
            );
        }
        Ok(())
    }
}

/// Bilinear resize with pixel-centre alignment; edges are clamped.
pub fn resize_bilinear(img: &GrayImage, height: usize, width: usize) -> GrayImage {
    let (h, w) = (img.height(), img.width());
    if (h, w) == (height, width) {
        return img.clone();
    }
    let coord = |d: usize, src: usize, dst: usize| {
        let s = ((d as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(src - 1), s - i0 as f64)
    };
    let cols: Vec<_> = (0..width).map(|x| coord(x, w, width)).collect();
    GrayImage::from_fn(height, width, |y, x| {
        let (y0, y1, fy) = coord(y, h, height);
        let (x0, x1, fx) = cols[x];
        let top = img.get(y0, x0) * (1.0 - fx) + img.get(y0, x1) * fx;
        let bottom = img.get(y1, x0) * (1.0 - fx) + img.get(y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Nearest-neighbour resize (pixel-centre sampling).
pub fn resize_nearest(mask: &BinaryImage, height: usize, width: usize) -> BinaryImage {
    let (h, w) = (mask.height(), mask.width());
    if (h, w) == (height, width) {
        return mask.clone();
    }
    let src = |d: usize, s: usize, dd: usize| (((d as f64 + 0.5) * s as f64 / dd as f64) as usize).min(s - 1);
    BinaryImage::from_fn(height, width, |y, x| mask.get(src(y, h, height), src(x, w, width)))
}

/// Resizes the image (bilinear) and guide mask (nearest) to `size x size`
/// and stacks them as `[image, mask]`.
pub fn assemble_condition(sample: &Sample, size: usize) -> Result<ConditionStack> {
    ensure!(size >= 1, InvalidArgument, "condition size must be positive");
    sample.validate()?;
    let image = resize_bilinear(&sample.image, size, size);
    let mask = resize_nearest(&sample.guide_mask, size, size);
    ConditionStack::from_image_and_mask(&image, &mask)
}

/// Longest traced border of `mask` at `thickness`; errors on an empty mask.
pub fn contour_from_mask(mask: &BinaryImage, thickness: usize) -> Result<BinaryImage> {
    let contours = trace_contours(mask);
    let longest = longest_contour(&contours).map_err(|_| Error::Dataset("mask has no foreground".into()))?;
    rasterize_contour(longest, mask.height(), mask.width(), thickness)
}

/// Ground-truth contour at `size x size`, one-hot with contour pixels in
/// the top category and background in category 0.
pub fn make_target(sample: &Sample, size: usize, thickness: usize, n_categories: usize) -> Result<CategoricalGrid> {
    ensure!(n_categories >= 2, InvalidArgument, "need at least 2 categories, got {n_categories}");
    let mask = resize_nearest(&sample.gt_mask, size, size);
    let contour = contour_from_mask(&mask, thickness)
        .map_err(|e| Error::Dataset(format!("sample {:?}: {e}", sample.id)))?;
    let labels: Vec<usize> = contour.bits().iter().map(|&b| if b { n_categories - 1 } else { 0 }).collect();
    CategoricalGrid::one_hot(size, size, n_categories, &labels)
}

#[cfg(test)]
mod tests;
