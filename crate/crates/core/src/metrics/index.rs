use std::collections::HashMap;

use super::PointSet;

/// Point sets at or below this size are searched exhaustively.
pub const BRUTE_FORCE_MAX: usize = 256;

const CELL: i64 = 8;

/// Exact nearest-neighbour queries over integer pixel coordinates. Distances
/// are returned squared so results agree bit-for-bit across strategies.
pub enum NearestIndex<'a> {
    Brute(&'a [(usize, usize)]),
    Grid(GridIndex),
}

pub struct GridIndex {
    cells: HashMap<(i64, i64), Vec<(i64, i64)>>,
    min_cell: (i64, i64),
    max_cell: (i64, i64),
}

impl<'a> NearestIndex<'a> {
    pub fn new(set: &'a PointSet) -> Self {
        if set.len() <= BRUTE_FORCE_MAX {
            NearestIndex::Brute(set.points())
        } else {
            NearestIndex::Grid(GridIndex::new(set.points()))
        }
    }

    /// Forces the grid strategy regardless of size.
    pub fn grid(set: &'a PointSet) -> Self {
        NearestIndex::Grid(GridIndex::new(set.points()))
    }

    /// Forces exhaustive search regardless of size.
    pub fn brute(set: &'a PointSet) -> Self {
        NearestIndex::Brute(set.points())
    }

    /// Squared distance to the nearest indexed point, `None` when empty.
    pub fn nearest_sq(&self, p: (usize, usize)) -> Option<u64> {
        match self {
            NearestIndex::Brute(points) => points.iter().map(|&q| dist_sq(p, q)).min(),
            NearestIndex::Grid(g) => g.nearest_sq(p),
        }
    }
}

pub(crate) fn dist_sq(a: (usize, usize), b: (usize, usize)) -> u64 {
    let dy = a.0.abs_diff(b.0) as u64;
    let dx = a.1.abs_diff(b.1) as u64;
    dy * dy + dx * dx
}

impl GridIndex {
    fn new(points: &[(usize, usize)]) -> Self {
        let mut cells: HashMap<(i64, i64), Vec<(i64, i64)>> = HashMap::new();
        let mut min_cell = (i64::MAX, i64::MAX);
        let mut max_cell = (i64::MIN, i64::MIN);
        for &(r, c) in points {
            let p = (r as i64, c as i64);
            let key = (p.0.div_euclid(CELL), p.1.div_euclid(CELL));
            min_cell = (min_cell.0.min(key.0), min_cell.1.min(key.1));
            max_cell = (max_cell.0.max(key.0), max_cell.1.max(key.1));
            cells.entry(key).or_default().push(p);
        }
        Self { cells, min_cell, max_cell }
    }

    fn nearest_sq(&self, p: (usize, usize)) -> Option<u64> {
        if self.cells.is_empty() {
            return None;
        }
        let q = (p.0 as i64, p.1 as i64);
        let home = (q.0.div_euclid(CELL), q.1.div_euclid(CELL));
        // Rings beyond this radius hold no cells at all.
        let max_ring = [
            (home.0 - self.min_cell.0).abs(),
            (home.0 - self.max_cell.0).abs(),
            (home.1 - self.min_cell.1).abs(),
            (home.1 - self.max_cell.1).abs(),
        ]
        .into_iter()
        .max()
        .unwrap_or(0);
        let mut best: Option<u64> = None;
        for ring in 0..=max_ring {
            // Every point in ring `ring + 1` or further is at least
            // `ring * CELL` away along one axis.
            for key in ring_cells(home, ring) {
                if let Some(pts) = self.cells.get(&key) {
                    for &(r, c) in pts {
                        let d = ((r - q.0).pow(2) + (c - q.1).pow(2)) as u64;
                        best = Some(best.map_or(d, |b| b.min(d)));
                    }
                }
            }
            if let Some(b) = best {
                let reach = (ring * CELL) as u64;
                if b <= reach * reach {
                    break;
                }
            }
        }
        best
    }
}

fn ring_cells(home: (i64, i64), ring: i64) -> Vec<(i64, i64)> {
    if ring == 0 {
        return vec![home];
    }
    let mut out = Vec::with_capacity(8 * ring as usize);
    for d in -ring..=ring {
        out.push((home.0 - ring, home.1 + d));
        out.push((home.0 + ring, home.1 + d));
    }
    for d in -ring + 1..ring {
        out.push((home.0 + d, home.1 - ring));
        out.push((home.0 + d, home.1 + ring));
    }
    out
}
