use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::grid::{BinaryImage, GrayImage};

/// Maps an out-of-range index into `0..n` by half-sample symmetric
/// reflection (`d c b a | a b c d | d c b a`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let m = i.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|j| (-(j * j) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with radius `ceil(3 sigma)`, a normalized kernel,
/// and reflect padding.
pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> Result<GrayImage> {
    ensure!(sigma > 0.0 && sigma.is_finite(), InvalidArgument, "sigma must be positive, got {sigma}");
    let (h, w) = (img.height(), img.width());
    if h == 0 || w == 0 {
        return Ok(img.clone());
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let src = img.values();
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, &kv)| kv * row[reflect(x as isize + j as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, &kv)| kv * tmp[reflect(y as isize + j as isize - r, h) * w + x])
                .sum();
        }
    }
    GrayImage::from_vec(h, w, out)
}

/// 1-D running "any" over a window of half-width `r` along rows or columns;
/// positions outside the image count as background.
fn any_window(bits: &[bool], h: usize, w: usize, r: usize, along_rows: bool) -> Vec<bool> {
    let (outer, inner) = if along_rows { (h, w) } else { (w, h) };
    let idx = |o: usize, i: usize| if along_rows { o * w + i } else { i * w + o };
    let mut out = vec![false; h * w];
    let mut prefix = vec![0usize; inner + 1];
    for o in 0..outer {
        for i in 0..inner {
            prefix[i + 1] = prefix[i] + bits[idx(o, i)] as usize;
        }
        for i in 0..inner {
            let lo = i.saturating_sub(r);
            let hi = (i + r + 1).min(inner);
            out[idx(o, i)] = prefix[hi] > prefix[lo];
        }
    }
    out
}

/// Dilation by a `(2r+1)^2` square; outside the image is background.
pub fn dilate(b: &BinaryImage, r: usize) -> BinaryImage {
    let (h, w) = (b.height(), b.width());
    let rows = any_window(b.bits(), h, w, r, true);
    let both = any_window(&rows, h, w, r, false);
    BinaryImage::from_vec(h, w, both).expect("same shape")
}

/// Erosion by a `(2r+1)^2` square; outside the image is foreground, so
/// the border does not eat into shapes touching it.
pub fn erode(b: &BinaryImage, r: usize) -> BinaryImage {
    let (h, w) = (b.height(), b.width());
    let inv = BinaryImage::from_vec(h, w, b.bits().iter().map(|&v| !v).collect()).expect("same shape");
    let d = dilate(&inv, r);
    BinaryImage::from_vec(h, w, d.bits().iter().map(|&v| !v).collect()).expect("same shape")
}

/// Dilation followed by erosion with a `(2r+1)^2` square, computed as on an
/// unbounded background-filled plane and cropped back.
pub fn morph_close(b: &BinaryImage, radius: usize) -> Result<BinaryImage> {
    ensure!(radius >= 1, InvalidArgument, "closing radius must be at least 1");
    let (h, w) = (b.height(), b.width());
    let (ph, pw) = (h + 2 * radius, w + 2 * radius);
    let padded = BinaryImage::from_fn(ph, pw, |r, c| {
        r >= radius && c >= radius && r < h + radius && c < w + radius && b.get(r - radius, c - radius)
    });
    let closed = erode(&dilate(&padded, radius), radius);
    Ok(BinaryImage::from_fn(h, w, |r, c| closed.get(r + radius, c + radius)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Thinning {
    #[default]
    ZhangSuen,
    GuoHall,
}

/// Neighbours `p2..p9` in the usual thinning order: N, NE, E, SE, S, SW, W, NW.
const RING: [(isize, isize); 8] = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)];

fn ring(b: &BinaryImage, r: usize, c: usize) -> [bool; 8] {
    RING.map(|(dr, dc)| b.get_signed(r as isize + dr, c as isize + dc))
}

/// Whether removing `(r, c)` preserves 8-connected foreground and
/// 4-connected background topology in its 3x3 neighbourhood.
pub fn is_simple_point(b: &BinaryImage, r: usize, c: usize) -> bool {
    let n = ring(b, r, c);
    let fg_components = count_components(&n, true, |i, j| {
        let (a, b) = (RING[i], RING[j]);
        (a.0 - b.0).abs() <= 1 && (a.1 - b.1).abs() <= 1
    }, |_| true);
    if fg_components != 1 {
        return false;
    }
    // Background components that touch a 4-neighbour of the centre.
    let bg_components = count_components(&n, false, |i, j| {
        let (a, b) = (RING[i], RING[j]);
        (a.0 - b.0).abs() + (a.1 - b.1).abs() == 1
    }, |i| i % 2 == 0);
    bg_components == 1
}

fn count_components(
    ring: &[bool; 8],
    value: bool,
    adjacent: impl Fn(usize, usize) -> bool,
    counts: impl Fn(usize) -> bool,
) -> usize {
    let mut label = [usize::MAX; 8];
    let mut n = 0;
    for s in 0..8 {
        if ring[s] != value || label[s] != usize::MAX {
            continue;
        }
        let mut stack = vec![s];
        label[s] = n;
        while let Some(i) = stack.pop() {
            for j in 0..8 {
                if ring[j] == value && label[j] == usize::MAX && adjacent(i, j) {
                    label[j] = n;
                    stack.push(j);
                }
            }
        }
        n += 1;
    }
    (0..n)
        .filter(|&l| (0..8).any(|i| label[i] == l && counts(i)))
        .count()
}

fn zhang_suen_candidate(n: &[bool; 8], pass: usize) -> bool {
    let (p2, p4, p6, p8) = (n[0], n[2], n[4], n[6]);
    let count = n.iter().filter(|&&v| v).count();
    let transitions = (0..8).filter(|&i| !n[i] && n[(i + 1) % 8]).count();
    if !(2..=6).contains(&count) || transitions != 1 {
        return false;
    }
    if pass == 0 {
        !(p2 && p4 && p6) && !(p4 && p6 && p8)
    } else {
        !(p2 && p4 && p8) && !(p2 && p6 && p8)
    }
}

fn guo_hall_candidate(n: &[bool; 8], pass: usize) -> bool {
    let [p2, p3, p4, p5, p6, p7, p8, p9] = n.map(|v| v as u8);
    let c = ((p2 == 0) as u8 & (p3 | p4))
        + ((p4 == 0) as u8 & (p5 | p6))
        + ((p6 == 0) as u8 & (p7 | p8))
        + ((p8 == 0) as u8 & (p9 | p2));
    let n1 = (p9 | p2) + (p3 | p4) + (p5 | p6) + (p7 | p8);
    let n2 = (p2 | p3) + (p4 | p5) + (p6 | p7) + (p8 | p9);
    let nn = n1.min(n2);
    let m = if pass == 0 {
        (p6 | p7 | (p9 == 0) as u8) & p8
    } else {
        (p2 | p3 | (p5 == 0) as u8) & p4
    };
    c == 1 && (2..=3).contains(&nn) && m == 0
}

fn removable(b: &BinaryImage, r: usize, c: usize) -> bool {
    let n = ring(b, r, c);
    n.iter().filter(|&&v| v).count() >= 2 && is_simple_point(b, r, c)
}

/// Two-subiteration thinning to a one-pixel-wide skeleton. Candidates of
/// each subiteration are deleted in raster order, each re-checked as a
/// simple point so that thin diagonal strokes and 2x2 blocks are never
/// erased; leftover 2x2 blocks are then broken at a simple non-end pixel.
/// Iterates to a fixpoint, so the result is idempotent.
pub fn skeletonize(b: &BinaryImage, method: Thinning) -> BinaryImage {
    let mut img = b.clone();
    let (h, w) = (img.height(), img.width());
    loop {
        loop {
            let mut changed = false;
            for pass in 0..2 {
                let mut candidates = Vec::new();
                for r in 0..h {
                    for c in 0..w {
                        if !img.get(r, c) {
                            continue;
                        }
                        let n = ring(&img, r, c);
                        let hit = match method {
                            Thinning::ZhangSuen => zhang_suen_candidate(&n, pass),
                            Thinning::GuoHall => guo_hall_candidate(&n, pass),
                        };
                        if hit {
                            candidates.push((r, c));
                        }
                    }
                }
                for (r, c) in candidates {
                    if is_simple_point(&img, r, c) {
                        img.set(r, c, false);
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        if !break_blocks(&mut img) {
            return img;
        }
    }
}

/// Removes one simple pixel from each fully set 2x2 block; reports whether
/// anything changed.
fn break_blocks(img: &mut BinaryImage) -> bool {
    let (h, w) = (img.height(), img.width());
    let mut changed = false;
    for r in 0..h.saturating_sub(1) {
        for c in 0..w.saturating_sub(1) {
            let block = [(r, c), (r, c + 1), (r + 1, c), (r + 1, c + 1)];
            if !block.iter().all(|&(y, x)| img.get(y, x)) {
                continue;
            }
            if let Some(&(y, x)) = block.iter().find(|&&(y, x)| removable(img, y, x)) {
                img.set(y, x, false);
                changed = true;
            }
        }
    }
    changed
}
