//! Raster containers shared by every stage: categorical state grids, binary
//! rasters, grayscale images and the conditioning stack fed to the denoiser.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Per-pixel categorical state, stored pixel-major (`H x W x N`).
///
/// Holds either one-hot states, probability distributions, or raw network
/// scores depending on where in the pipeline it sits.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalGrid {
    height: usize,
    width: usize,
    n_categories: usize,
    values: Vec<f64>,
}

impl CategoricalGrid {
    pub fn zeros(height: usize, width: usize, n_categories: usize) -> Self {
        Self {
            height,
            width,
            n_categories,
            values: vec![0.0; height * width * n_categories],
        }
    }

    pub fn from_vec(
        height: usize,
        width: usize,
        n_categories: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        ensure!(
            values.len() == height * width * n_categories,
            ShapeMismatch,
            "expected {}x{}x{} values, got {}",
            height,
            width,
            n_categories,
            values.len()
        );
        Ok(Self {
            height,
            width,
            n_categories,
            values,
        })
    }

    /// One-hot grid from a per-pixel category index map (row-major).
    pub fn one_hot(
        height: usize,
        width: usize,
        n_categories: usize,
        categories: &[usize],
    ) -> Result<Self> {
        ensure!(
            categories.len() == height * width,
            ShapeMismatch,
            "category map has {} entries for a {}x{} grid",
            categories.len(),
            height,
            width
        );
        let mut grid = Self::zeros(height, width, n_categories);
        for (pixel, &k) in categories.iter().enumerate() {
            ensure!(
                k < n_categories,
                InvalidArgument,
                "category {k} out of range for n={n_categories}"
            );
            grid.values[pixel * n_categories + k] = 1.0;
        }
        Ok(grid)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_categories(&self) -> usize {
        self.n_categories
    }

    pub fn n_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        let n = self.n_categories;
        &self.values[index * n..(index + 1) * n]
    }

    pub fn pixel_mut(&mut self, index: usize) -> &mut [f64] {
        let n = self.n_categories;
        &mut self.values[index * n..(index + 1) * n]
    }

    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        self.pixel(row * self.width + col)
    }

    pub fn pixels(&self) -> std::slice::ChunksExact<'_, f64> {
        self.values.chunks_exact(self.n_categories)
    }

    pub fn same_shape(&self, other: &CategoricalGrid) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.n_categories == other.n_categories
    }

    pub(crate) fn check_same_shape(&self, other: &CategoricalGrid, what: &str) -> Result<()> {
        ensure!(
            self.same_shape(other),
            ShapeMismatch,
            "{what}: {}x{}x{} vs {}x{}x{}",
            self.height,
            self.width,
            self.n_categories,
            other.height,
            other.width,
            other.n_categories
        );
        Ok(())
    }

    /// Index of the largest entry per pixel; ties resolve to the lower index.
    pub fn argmax(&self) -> Vec<usize> {
        self.pixels()
            .map(|p| {
                let mut best = 0;
                for (k, &v) in p.iter().enumerate().skip(1) {
                    if v > p[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }

    /// True when every pixel is a distribution within `tol`.
    pub fn is_distribution(&self, tol: f64) -> bool {
        self.pixels().all(|p| {
            p.iter().all(|&v| v >= 0.0 && v.is_finite())
                && (p.iter().sum::<f64>() - 1.0).abs() <= tol
        })
    }

    pub fn is_one_hot(&self) -> bool {
        self.pixels().all(|p| {
            p.iter().filter(|&&v| v == 1.0).count() == 1
                && p.iter().all(|&v| v == 0.0 || v == 1.0)
        })
    }

    /// Channel-major copy (`N x H x W`) in single precision.
    pub fn to_channels_f32(&self) -> Vec<f32> {
        let (n, hw) = (self.n_categories, self.n_pixels());
        let mut out = vec![0f32; n * hw];
        for (p, px) in self.pixels().enumerate() {
            for (k, &v) in px.iter().enumerate() {
                out[k * hw + p] = v as f32;
            }
        }
        out
    }

    /// Builds a grid from channel-major (`N x H x W`) data.
    pub fn from_channels<T: Copy + Into<f64>>(
        height: usize,
        width: usize,
        n_categories: usize,
        channels: &[T],
    ) -> Result<Self> {
        let hw = height * width;
        ensure!(
            channels.len() == hw * n_categories,
            ShapeMismatch,
            "channel buffer has {} values for {}x{}x{}",
            channels.len(),
            n_categories,
            height,
            width
        );
        let mut grid = Self::zeros(height, width, n_categories);
        for k in 0..n_categories {
            for p in 0..hw {
                grid.values[p * n_categories + k] = channels[k * hw + p].into();
            }
        }
        Ok(grid)
    }
}

/// Binary raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryImage {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryImage {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        ensure!(
            bits.len() == height * width,
            ShapeMismatch,
            "expected {} bits for {}x{}, got {}",
            height * width,
            height,
            width,
            bits.len()
        );
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                bits.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            bits,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn bits_mut(&mut self) -> &mut [bool] {
        &mut self.bits
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    /// Out-of-bounds coordinates read as background.
    #[inline]
    pub fn get_signed(&self, row: isize, col: isize) -> bool {
        row >= 0
            && col >= 0
            && (row as usize) < self.height
            && (col as usize) < self.width
            && self.bits[row as usize * self.width + col as usize]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Foreground pixel coordinates in raster order.
    pub fn on_pixels(&self) -> Vec<(usize, usize)> {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| (i / self.width, i % self.width))
            .collect()
    }

    pub fn same_shape(&self, other: &BinaryImage) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn is_subset_of(&self, other: &BinaryImage) -> bool {
        self.same_shape(other) && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            height: self.height,
            width: self.width,
            values: self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }
}

/// Single-channel image with values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrayImage {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        ensure!(
            values.len() == height * width,
            ShapeMismatch,
            "expected {} values for {}x{}, got {}",
            height * width,
            height,
            width,
            values.len()
        );
        ensure!(
            values.iter().all(|v| v.is_finite()),
            InvalidArgument,
            "gray image contains non-finite values"
        );
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            values,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.values[row * self.width + col] = value;
    }

    pub fn threshold(&self, level: f64) -> BinaryImage {
        BinaryImage {
            height: self.height,
            width: self.width,
            bits: self.values.iter().map(|&v| v >= level).collect(),
        }
    }

    pub fn same_shape(&self, other: &GrayImage) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Conditioning channels for the denoiser: image channels followed by the
/// guide-mask channel, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionStack {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ConditionStack {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(
            data.len() == channels * height * width,
            ShapeMismatch,
            "condition buffer has {} values for {}x{}x{}",
            data.len(),
            channels,
            height,
            width
        );
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// Stacks a grayscale image and a mask into a two-channel condition.
    pub fn from_image_and_mask(image: &GrayImage, mask: &BinaryImage) -> Result<Self> {
        if image.height() != mask.height() || image.width() != mask.width() {
            return Err(Error::ShapeMismatch(format!(
                "image {}x{} vs mask {}x{}",
                image.height(),
                image.width(),
                mask.height(),
                mask.width()
            )));
        }
        let mut data: Vec<f32> = image.values().iter().map(|&v| v as f32).collect();
        data.extend(mask.bits().iter().map(|&b| if b { 1.0f32 } else { 0.0 }));
        Self::new(2, image.height(), image.width(), data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, index: usize) -> &[f32] {
        let hw = self.height * self.width;
        &self.data[index * hw..(index + 1) * hw]
    }

    /// The last channel, interpreted as the guide mask.
    pub fn guide_mask(&self) -> BinaryImage {
        let bits = self.channel(self.channels - 1).iter().map(|&v| v >= 0.5).collect();
        BinaryImage {
            height: self.height,
            width: self.width,
            bits,
        }
    }
}
