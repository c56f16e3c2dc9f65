//! Mask-to-contour derivation, target rasterization, and the post-processing
//! chain that turns a decoded contour map into one thin closed curve.

mod morphology;
mod trace;

pub use morphology::{dilate, erode, gaussian_blur, is_simple_point, morph_close, skeletonize, Thinning};
pub use trace::{is_closed_loop, longest_contour, trace_contours, Contour};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::grid::{BinaryImage, GrayImage};

/// Minimum traced length for a border to count as a closed loop.
pub const MIN_CLOSED_LEN: usize = 8;

/// Draws every contour pixel dilated by a disk of diameter `thickness`.
/// Odd diameters are centred on the pixel, even ones on its lower-right
/// corner, so thickness 2 stamps a 2x2 block. Pixels falling outside the
/// raster are clipped.
pub fn rasterize_contour(contour: &Contour, height: usize, width: usize, thickness: usize) -> Result<BinaryImage> {
    ensure!(thickness >= 1, InvalidArgument, "thickness must be at least 1");
    for &(r, c) in &contour.points {
        ensure!(
            r < height && c < width,
            InvalidArgument,
            "contour point ({r}, {c}) outside {height}x{width}"
        );
    }
    let offsets = disk_offsets(thickness);
    let mut out = BinaryImage::new(height, width);
    for &(r, c) in &contour.points {
        for &(dr, dc) in &offsets {
            let (rr, cc) = (r as isize + dr, c as isize + dc);
            if rr >= 0 && cc >= 0 && (rr as usize) < height && (cc as usize) < width {
                out.set(rr as usize, cc as usize, true);
            }
        }
    }
    Ok(out)
}

fn disk_offsets(thickness: usize) -> Vec<(isize, isize)> {
    let t = thickness as isize;
    let centre = if thickness % 2 == 0 { 0.5 } else { 0.0 };
    let r2 = (thickness as f64 / 2.0).powi(2);
    let mut out = Vec::new();
    for dr in -t..=t {
        for dc in -t..=t {
            let (y, x) = (dr as f64 - centre, dc as f64 - centre);
            if y * y + x * x <= r2 + 1e-12 {
                out.push((dr, dc));
            }
        }
    }
    out
}

/// Longest traced border of `mask` rasterized at `thickness`; empty when the
/// mask is empty.
pub fn mask_contour(mask: &BinaryImage, thickness: usize) -> Result<BinaryImage> {
    let contours = trace_contours(mask);
    match longest_contour(&contours) {
        Ok(c) => rasterize_contour(c, mask.height(), mask.width(), thickness),
        Err(_) => Ok(BinaryImage::new(mask.height(), mask.width())),
    }
}

/// Result of [`longest_closed_contour`].
#[derive(Debug, Clone, PartialEq)]
pub struct ContourSelection {
    pub image: BinaryImage,
    /// No closed loop was found; `image` holds the longest open border (or
    /// nothing for an empty input).
    pub flagged: bool,
}

/// Keeps the longest closed traced border, re-rasterized at thickness 1,
/// falling back to the longest open border with `flagged` set.
pub fn longest_closed_contour(b: &BinaryImage) -> ContourSelection {
    let contours = trace_contours(b);
    let (h, w) = (b.height(), b.width());
    let closed: Vec<Contour> = contours.iter().filter(|c| c.closed).cloned().collect();
    let (pick, flagged) = match longest_contour(&closed) {
        Ok(c) => (Some(c), false),
        Err(_) => (longest_contour(&contours).ok(), true),
    };
    let image = match pick {
        Some(c) => rasterize_contour(c, h, w, 1).expect("traced points are in bounds"),
        None => BinaryImage::new(h, w),
    };
    ContourSelection { image, flagged }
}

/// Elementwise AND.
pub fn truncate_with_mask(contour: &BinaryImage, trunc: &BinaryImage) -> Result<BinaryImage> {
    ensure!(
        contour.same_shape(trunc),
        ShapeMismatch,
        "contour {}x{} vs truncation mask {}x{}",
        contour.height(),
        contour.width(),
        trunc.height(),
        trunc.width()
    );
    let bits = contour.bits().iter().zip(trunc.bits()).map(|(&a, &b)| a && b).collect();
    BinaryImage::from_vec(contour.height(), contour.width(), bits)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostprocessOptions {
    pub sigma: f64,
    pub close_radius: usize,
    pub pick_longest_closed: bool,
    /// Thin again after closing so the output stays one pixel wide.
    pub reskeletonize: bool,
    pub thinning: Thinning,
}

impl Default for PostprocessOptions {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            close_radius: 1,
            pick_longest_closed: false,
            reskeletonize: false,
            thinning: Thinning::ZhangSuen,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PostprocessOutput {
    pub contour: BinaryImage,
    /// The output is empty, or no closed loop was available to pick.
    pub flagged: bool,
}

/// Blur, re-threshold at 0.5, skeletonize, close, then optionally keep the
/// longest closed loop and truncate.
pub fn postprocess(
    decoded: &BinaryImage,
    opts: &PostprocessOptions,
    trunc: Option<&BinaryImage>,
) -> Result<PostprocessOutput> {
    postprocess_gray(&decoded.to_gray(), opts, trunc)
}

/// [`postprocess`] starting from a soft contour map in `[0, 1]`.
pub fn postprocess_gray(
    map: &GrayImage,
    opts: &PostprocessOptions,
    trunc: Option<&BinaryImage>,
) -> Result<PostprocessOutput> {
    ensure!(opts.close_radius >= 1, InvalidArgument, "close radius must be at least 1");
    let blurred = gaussian_blur(map, opts.sigma)?;
    let thin = skeletonize(&blurred.threshold(0.5), opts.thinning);
    let mut out = morph_close(&thin, opts.close_radius)?;
    if opts.reskeletonize {
        out = skeletonize(&out, opts.thinning);
    }
    let mut flagged = false;
    if opts.pick_longest_closed {
        let sel = longest_closed_contour(&out);
        out = sel.image;
        flagged = sel.flagged;
    }
    if let Some(t) = trunc {
        out = truncate_with_mask(&out, t)?;
    }
    flagged |= out.is_empty();
    Ok(PostprocessOutput { contour: out, flagged })
}

#[cfg(test)]
mod tests;
