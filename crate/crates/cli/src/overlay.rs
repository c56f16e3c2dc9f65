use std::path::Path;

use anyhow::Result;
use contour_refine::data::write_rgb_png;
use contour_refine::{BinaryImage, GrayImage};

const GUIDE: [u8; 3] = [255, 64, 64];
const REFINED: [u8; 3] = [64, 230, 64];
const TRUTH: [u8; 3] = [64, 160, 255];

fn panel(image: &GrayImage, contour: &BinaryImage, color: [u8; 3], out: &mut Vec<u8>) {
    for (&v, &on) in image.values().iter().zip(contour.bits()) {
        if on {
            out.extend_from_slice(&color);
        } else {
            let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            out.extend_from_slice(&[g, g, g]);
        }
    }
}

/// Three panels stacked top to bottom: guide contour, refined contour and
/// ground truth, each drawn over the image.
pub fn write_overlay(
    path: &Path,
    image: &GrayImage,
    guide: &BinaryImage,
    refined: &BinaryImage,
    truth: &BinaryImage,
) -> Result<()> {
    let (h, w) = (image.height(), image.width());
    let mut rgb = Vec::with_capacity(3 * h * w * 3);
    panel(image, guide, GUIDE, &mut rgb);
    panel(image, refined, REFINED, &mut rgb);
    panel(image, truth, TRUTH, &mut rgb);
    write_rgb_png(path, w, 3 * h, &rgb)?;
    Ok(())
}
