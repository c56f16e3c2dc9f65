use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::MIN_CLOSED_LEN;
use crate::error::{Error, Result};
use crate::grid::BinaryImage;

/// Ordered 8-connected chain of `(row, col)` pixels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contour {
    pub points: Vec<(usize, usize)>,
    pub closed: bool,
}

impl Contour {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Clockwise on screen (rows grow downwards), starting east.
const DIRS: [(isize, isize); 8] = [(0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1)];

fn dir_index(from: (usize, usize), to: (isize, isize)) -> usize {
    let d = (to.0 - from.0 as isize, to.1 - from.1 as isize);
    DIRS.iter().position(|&x| x == d).expect("neighbouring pixel")
}

fn step(p: (usize, usize), k: usize) -> (isize, isize) {
    (p.0 as isize + DIRS[k].0, p.1 as isize + DIRS[k].1)
}

/// Outer border of every 8-connected component, traced by border following
/// from the component's first pixel in raster order. Components are
/// returned in raster order of those pixels.
pub fn trace_contours(mask: &BinaryImage) -> Vec<Contour> {
    let (h, w) = (mask.height(), mask.width());
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) || seen[r * w + c] {
                continue;
            }
            mark_component(mask, (r, c), &mut seen);
            let points = follow_border(mask, (r, c));
            let closed = is_closed_loop(&points, h, w);
            out.push(Contour { points, closed });
        }
    }
    out
}

fn mark_component(mask: &BinaryImage, start: (usize, usize), seen: &mut [bool]) {
    let w = mask.width();
    let mut queue = VecDeque::from([start]);
    seen[start.0 * w + start.1] = true;
    while let Some(p) = queue.pop_front() {
        for k in 0..8 {
            let (r, c) = step(p, k);
            if mask.get_signed(r, c) && !seen[r as usize * w + c as usize] {
                seen[r as usize * w + c as usize] = true;
                queue.push_back((r as usize, c as usize));
            }
        }
    }
}

/// Suzuki-Abe outer border following with 8-connectivity. `start` must have
/// a background pixel to its west.
fn follow_border(mask: &BinaryImage, start: (usize, usize)) -> Vec<(usize, usize)> {
    let on = |p: (isize, isize)| mask.get_signed(p.0, p.1);
    // Clockwise search around the start, beginning at its west neighbour.
    let west = 4;
    let first = (0..8).map(|i| (west + i) % 8).find(|&k| on(step(start, k)));
    let Some(k1) = first else {
        return vec![start];
    };
    let p1 = step(start, k1);
    let p1 = (p1.0 as usize, p1.1 as usize);
    let mut prev = (p1.0 as isize, p1.1 as isize);
    let mut cur = start;
    let mut points = Vec::new();
    loop {
        // Counter-clockwise from the element after `prev`.
        let kp = dir_index(cur, prev);
        let next = (1..=8)
            .map(|i| (kp + 8 - i) % 8)
            .find(|&k| on(step(cur, k)))
            .expect("a component with two pixels has a neighbour");
        let np = step(cur, next);
        let np = (np.0 as usize, np.1 as usize);
        points.push(cur);
        if np == start && cur == p1 {
            break;
        }
        prev = (cur.0 as isize, cur.1 as isize);
        cur = np;
    }
    points
}

/// A traced chain is a closed loop when it is long enough, its ends touch,
/// and its pixels enclose at least one other pixel.
pub fn is_closed_loop(points: &[(usize, usize)], height: usize, width: usize) -> bool {
    if points.len() < MIN_CLOSED_LEN {
        return false;
    }
    let (a, b) = (points[0], points[points.len() - 1]);
    if a.0.abs_diff(b.0) > 1 || a.1.abs_diff(b.1) > 1 {
        return false;
    }
    encloses_pixel(points, height, width)
}

/// Flood-fills the outside (4-connected, with a one-pixel frame) and checks
/// whether anything off the curve is left unreached.
fn encloses_pixel(points: &[(usize, usize)], height: usize, width: usize) -> bool {
    let (h, w) = (height + 2, width + 2);
    let mut wall = vec![false; h * w];
    for &(r, c) in points {
        wall[(r + 1) * w + c + 1] = true;
    }
    let mut reached = vec![false; h * w];
    let mut stack = vec![0usize];
    reached[0] = true;
    while let Some(i) = stack.pop() {
        let (r, c) = (i / w, i % w);
        let mut visit = |j: usize| {
            if !wall[j] && !reached[j] {
                reached[j] = true;
                stack.push(j);
            }
        };
        if r > 0 {
            visit(i - w);
        }
        if r + 1 < h {
            visit(i + w);
        }
        if c > 0 {
            visit(i - 1);
        }
        if c + 1 < w {
            visit(i + 1);
        }
    }
    wall.iter().zip(&reached).any(|(&wl, &re)| !wl && !re)
}

/// Contour with the most points; ties go to the earliest.
pub fn longest_contour(contours: &[Contour]) -> Result<&Contour> {
    let mut best: Option<&Contour> = None;
    for c in contours {
        if best.map_or(true, |b| c.len() > b.len()) {
            best = Some(c);
        }
    }
    best.ok_or_else(|| Error::InvalidArgument("no contours to choose from".into()))
}
