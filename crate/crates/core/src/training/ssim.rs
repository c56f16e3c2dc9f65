use crate::error::{ensure, Result};
use crate::grid::GrayImage;

pub const SSIM_WINDOW: usize = 7;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Summed-area table with a zero first row and column.
fn integral(h: usize, w: usize, f: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut s = vec![0.0; (h + 1) * (w + 1)];
    for r in 0..h {
        let mut row = 0.0;
        for c in 0..w {
            row += f(r * w + c);
            s[(r + 1) * (w + 1) + c + 1] = s[r * (w + 1) + c + 1] + row;
        }
    }
    s
}

fn window_sum(s: &[f64], w: usize, r: usize, c: usize, k: usize) -> f64 {
    let stride = w + 1;
    s[(r + k) * stride + c + k] - s[r * stride + c + k] - s[(r + k) * stride + c] + s[r * stride + c]
}

/// Structural similarity with a 7x7 uniform window on unit dynamic range:
/// the per-window index uses sample (co)variances and is averaged over
/// every window that fits inside the image.
pub fn ssim(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    ensure!(
        a.same_shape(b),
        ShapeMismatch,
        "ssim inputs are {}x{} and {}x{}",
        a.height(),
        a.width(),
        b.height(),
        b.width()
    );
    let (h, w) = (a.height(), a.width());
    let k = SSIM_WINDOW;
    ensure!(h >= k && w >= k, InvalidArgument, "images must be at least {k}x{k}, got {h}x{w}");
    let (x, y) = (a.values(), b.values());
    let sx = integral(h, w, |i| x[i]);
    let sy = integral(h, w, |i| y[i]);
    let sxx = integral(h, w, |i| x[i] * x[i]);
    let syy = integral(h, w, |i| y[i] * y[i]);
    let sxy = integral(h, w, |i| x[i] * y[i]);
    let n = (k * k) as f64;
    let unbias = n / (n - 1.0);
    let mut total = 0.0;
    for r in 0..=h - k {
        for c in 0..=w - k {
            let mx = window_sum(&sx, w, r, c, k) / n;
            let my = window_sum(&sy, w, r, c, k) / n;
            let vx = (window_sum(&sxx, w, r, c, k) / n - mx * mx) * unbias;
            let vy = (window_sum(&syy, w, r, c, k) / n - my * my) * unbias;
            let cxy = (window_sum(&sxy, w, r, c, k) / n - mx * my) * unbias;
            total += ((2.0 * mx * my + C1) * (2.0 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2));
        }
    }
    Ok(total / ((h - k + 1) * (w - k + 1)) as f64)
}
