//! Exact k-nearest-neighbour search over a uniform grid.
//!
//! Candidates are ordered by `(squared distance, index)`, so equal distances
//! resolve to the smaller point index. The brute-force scan in
//! [`brute_force_knn`] uses the same key and serves as the oracle.

use std::collections::BinaryHeap;

use crate::error::{Error, Result};

/// Identifier of the tie-break rule baked into every index.
pub const TIE_BREAK_ASCENDING_INDEX: &str = "squared-distance-then-ascending-index";

/// Target average occupancy per grid cell.
const POINTS_PER_CELL: f64 = 4.0;
const MAX_CELLS_PER_AXIS: usize = 256;

#[inline]
fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Order key: squared distance bits (monotone for non-negative floats) then index.
#[inline]
fn key(d2: f64, i: u32) -> (u64, u32) {
    (d2.to_bits(), i)
}

#[derive(Debug, Clone)]
pub struct NeighborIndex {
    points: Vec<[f64; 3]>,
    origin: [f64; 3],
    cell: f64,
    dims: [usize; 3],
    /// CSR layout: points of cell `c` are `order[start[c]..start[c + 1]]`, ascending index.
    start: Vec<u32>,
    order: Vec<u32>,
    pub tie_break: &'static str,
}

impl NeighborIndex {
    pub fn build(points: &[[f64; 3]]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyPoints);
        }
        if points.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Invalid("non-finite point coordinate".into()));
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let ext: Vec<f64> = (0..3).map(|a| (hi[a] - lo[a]).max(1e-9)).collect();
        let volume = ext[0] * ext[1] * ext[2];
        let mut cell = (volume * POINTS_PER_CELL / points.len() as f64).cbrt();
        // flat or degenerate clouds: fall back to an area/length based size
        let max_ext = ext.iter().cloned().fold(0.0, f64::max);
        if !(cell > max_ext * 1e-6) {
            cell = max_ext / (points.len() as f64).sqrt().max(1.0);
        }
        let mut dims = [0usize; 3];
        for a in 0..3 {
            let mut d = (ext[a] / cell).floor() as usize + 1;
            if d > MAX_CELLS_PER_AXIS {
                d = MAX_CELLS_PER_AXIS;
            }
            dims[a] = d;
        }
        // keep cells cubic; grow the cell if any axis hit the cap
        for a in 0..3 {
            cell = cell.max(ext[a] / (dims[a] as f64 - 0.5).max(0.5));
        }
        for a in 0..3 {
            dims[a] = ((ext[a] / cell).floor() as usize + 1).min(MAX_CELLS_PER_AXIS);
        }
        let ncell = dims[0] * dims[1] * dims[2];
        let mut counts = vec![0u32; ncell + 1];
        let cell_of: Vec<usize> = points
            .iter()
            .map(|p| {
                let mut c = [0usize; 3];
                for a in 0..3 {
                    c[a] = (((p[a] - lo[a]) / cell).floor() as isize).clamp(0, dims[a] as isize - 1) as usize;
                }
                (c[2] * dims[1] + c[1]) * dims[0] + c[0]
            })
            .collect();
        for &c in &cell_of {
            counts[c + 1] += 1;
        }
        for c in 0..ncell {
            counts[c + 1] += counts[c];
        }
        let mut fill = counts.clone();
        let mut order = vec![0u32; points.len()];
        for (i, &c) in cell_of.iter().enumerate() {
            order[fill[c] as usize] = i as u32;
            fill[c] += 1;
        }
        Ok(NeighborIndex {
            points: points.to_vec(),
            origin: lo,
            cell,
            dims,
            start: counts,
            order,
            tie_break: TIE_BREAK_ASCENDING_INDEX,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    fn cell_coord(&self, q: &[f64; 3]) -> [isize; 3] {
        let mut c = [0isize; 3];
        for a in 0..3 {
            let x = ((q[a] - self.origin[a]) / self.cell).floor();
            c[a] = x.clamp(-1e9, 1e9) as isize;
        }
        c
    }

    /// The `k` nearest points to `q`, nearest first.
    pub fn knn(&self, q: &[f64; 3], k: usize) -> Result<Vec<u32>> {
        let n = self.points.len();
        if k > n {
            return Err(Error::TooManyNeighbours { k, n });
        }
        if k == 0 {
            return Ok(Vec::new());
        }
        let c = self.cell_coord(q);
        let dims = [self.dims[0] as isize, self.dims[1] as isize, self.dims[2] as isize];
        let mut heap: BinaryHeap<(u64, u32)> = BinaryHeap::with_capacity(k + 1);
        let mut r: isize = 0;
        loop {
            self.visit_shell(q, c, r, dims, k, &mut heap);
            let lo = [c[0] - r, c[1] - r, c[2] - r];
            let hi = [c[0] + r, c[1] + r, c[2] + r];
            let covers = (0..3).all(|a| lo[a] <= 0 && hi[a] >= dims[a] - 1);
            if covers {
                break;
            }
            if heap.len() == k {
                // distance from q to the outside of the visited block of cells
                let mut gap = f64::INFINITY;
                for a in 0..3 {
                    let lower = self.origin[a] + lo[a] as f64 * self.cell;
                    let upper = self.origin[a] + (hi[a] + 1) as f64 * self.cell;
                    if lo[a] > 0 {
                        gap = gap.min(q[a] - lower);
                    }
                    if hi[a] < dims[a] - 1 {
                        gap = gap.min(upper - q[a]);
                    }
                }
                let worst = f64::from_bits(heap.peek().expect("full heap").0);
                // shave a little off the gap so rounding can only cost an extra shell
                let gap = gap - 1e-9 * self.cell;
                if gap > 0.0 && gap * gap > worst {
                    break;
                }
            }
            r += 1;
        }
        let mut out = heap.into_sorted_vec();
        out.truncate(k);
        Ok(out.into_iter().map(|(_, i)| i).collect())
    }

    fn visit_shell(&self, q: &[f64; 3], c: [isize; 3], r: isize, dims: [isize; 3], k: usize, heap: &mut BinaryHeap<(u64, u32)>) {
        let range = |a: usize| ((c[a] - r).max(0), (c[a] + r).min(dims[a] - 1));
        let (x0, x1) = range(0);
        let (y0, y1) = range(1);
        let (z0, z1) = range(2);
        for z in z0..=z1 {
            let zface = (z - c[2]).abs() == r;
            for y in y0..=y1 {
                let yface = zface || (y - c[1]).abs() == r;
                let mut x = x0;
                while x <= x1 {
                    let on_shell = yface || (x - c[0]).abs() == r;
                    if on_shell {
                        let cell = ((z * dims[1] + y) * dims[0] + x) as usize;
                        for &i in &self.order[self.start[cell] as usize..self.start[cell + 1] as usize] {
                            let kk = key(sq_dist(q, &self.points[i as usize]), i);
                            if heap.len() < k {
                                heap.push(kk);
                            } else if kk < *heap.peek().expect("non-empty heap") {
                                heap.pop();
                                heap.push(kk);
                            }
                        }
                        x += 1;
                    } else {
                        // jump across the interior to the far face
                        x = c[0] + r;
                    }
                }
            }
        }
    }
}

/// O(N) scan returning the `k` nearest points to `q`, nearest first.
pub fn brute_force_knn(points: &[[f64; 3]], q: &[f64; 3], k: usize) -> Result<Vec<u32>> {
    let n = points.len();
    if n == 0 {
        return Err(Error::EmptyPoints);
    }
    if k > n {
        return Err(Error::TooManyNeighbours { k, n });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut keys: Vec<(u64, u32)> = points.iter().enumerate().map(|(i, p)| key(sq_dist(q, p), i as u32)).collect();
    keys.select_nth_unstable(k - 1);
    keys.truncate(k);
    keys.sort_unstable();
    Ok(keys.into_iter().map(|(_, i)| i).collect())
}
