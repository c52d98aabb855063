//! Spatial ordering and neighbor search over sky positions.
//!
//! Positions are (ra, dec) in degrees on the flat tangent plane used by the
//! image WCS, so distances are Euclidean in degrees.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
#[allow(unused_imports)] // shadowed by inherent methods whenever std is linked
use num_traits::Float;

/// Cells per axis of the Morton quantization grid.
pub const MORTON_GRID: u32 = 1 << 16;

/// Interleave the bits of `x` and `y`, `x` in the least significant slot.
pub fn morton_code(x: u32, y: u32) -> u64 {
    fn spread(v: u32) -> u64 {
        let mut v = v as u64 & 0xffff_ffff;
        v = (v | (v << 16)) & 0x0000_ffff_0000_ffff;
        v = (v | (v << 8)) & 0x00ff_00ff_00ff_00ff;
        v = (v | (v << 4)) & 0x0f0f_0f0f_0f0f_0f0f;
        v = (v | (v << 2)) & 0x3333_3333_3333_3333;
        v = (v | (v << 1)) & 0x5555_5555_5555_5555;
        v
    }
    spread(x) | (spread(y) << 1)
}

/// Morton codes of `positions` quantized over their bounding box.
pub fn morton_keys(positions: &[[f64; 2]]) -> Vec<u64> {
    if positions.is_empty() {
        return Vec::new();
    }
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in positions {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let q = |v: f64, k: usize| -> u32 {
        let span = hi[k] - lo[k];
        if span <= 0.0 {
            return 0;
        }
        let t = ((v - lo[k]) / span * MORTON_GRID as f64).floor();
        (t.max(0.0) as u32).min(MORTON_GRID - 1)
    };
    positions.iter().map(|p| morton_code(q(p[0], 0), q(p[1], 1))).collect()
}

/// Permutation sorting `positions` into Z-order; ties keep input order.
pub fn spatial_order(positions: &[[f64; 2]]) -> Vec<usize> {
    let keys = morton_keys(positions);
    let mut idx: Vec<usize> = (0..positions.len()).collect();
    idx.sort_by_key(|&i| keys[i]);
    idx
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
    dx * dx + dy * dy
}

/// Uniform-grid index for fixed-radius queries.
#[derive(Clone, Debug)]
pub struct NeighborIndex {
    positions: Vec<[f64; 2]>,
    cell: f64,
    cells: BTreeMap<(i64, i64), Vec<usize>>,
}

impl NeighborIndex {
    /// `cell` is the grid spacing in degrees; queries are fastest with radii
    /// near it. Non-positive or non-finite spacing falls back to one cell.
    pub fn new(positions: &[[f64; 2]], cell: f64) -> Self {
        let cell = if cell.is_finite() && cell > 0.0 { cell } else { f64::INFINITY };
        let mut cells: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
        for (i, p) in positions.iter().enumerate() {
            cells.entry(Self::key(p, cell)).or_default().push(i);
        }
        Self { positions: positions.to_vec(), cell, cells }
    }

    fn key(p: &[f64; 2], cell: f64) -> (i64, i64) {
        if cell.is_infinite() {
            return (0, 0);
        }
        ((p[0] / cell).floor() as i64, (p[1] / cell).floor() as i64)
    }

    /// Indices within `radius` of `center`, ascending.
    pub fn within(&self, center: [f64; 2], radius: f64) -> Vec<usize> {
        let r2 = radius * radius;
        let mut out = Vec::new();
        if self.cell.is_infinite() {
            out.extend((0..self.positions.len()).filter(|&i| dist2(self.positions[i], center) <= r2));
            return out;
        }
        let reach = (radius / self.cell).ceil() as i64;
        let (cx, cy) = Self::key(&center, self.cell);
        for gx in cx - reach..=cx + reach {
            for gy in cy - reach..=cy + reach {
                if let Some(v) = self.cells.get(&(gx, gy)) {
                    out.extend(v.iter().copied().filter(|&i| dist2(self.positions[i], center) <= r2));
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Entries within `radius` of entry `i`, excluding `i` itself.
    pub fn neighbors(&self, i: usize, radius: f64) -> Vec<usize> {
        let mut v = self.within(self.positions[i], radius);
        v.retain(|&j| j != i);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_by_two_z_order() {
        let pts = [[0.0, 0.0], [1.0, 1.0], [0.0, 1.0], [1.0, 0.0]];
        let order = spatial_order(&pts);
        let sorted: Vec<[f64; 2]> = order.iter().map(|&i| pts[i]).collect();
        assert_eq!(sorted, vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
    }

    #[test]
    fn single_and_empty() {
        assert_eq!(spatial_order(&[[3.0, 4.0]]), vec![0]);
        assert!(spatial_order(&[]).is_empty());
    }

    #[test]
    fn ties_are_stable() {
        let pts = [[1.0, 1.0], [0.0, 0.0], [1.0, 1.0], [0.0, 0.0]];
        assert_eq!(spatial_order(&pts), vec![1, 3, 0, 2]);
    }

    #[test]
    fn morton_code_bits() {
        assert_eq!(morton_code(1, 0), 1);
        assert_eq!(morton_code(0, 1), 2);
        assert_eq!(morton_code(0xffff, 0xffff), 0xffff_ffff);
        assert_eq!(morton_code(0b101, 0b011), 0b011011);
    }

    #[test]
    fn index_matches_all_pairs_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<[f64; 2]> = (0..5000).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect();
        let radius = 0.02;
        let idx = NeighborIndex::new(&pts, radius);
        for i in (0..pts.len()).step_by(7) {
            let brute: Vec<usize> =
                (0..pts.len()).filter(|&j| j != i && dist2(pts[i], pts[j]) <= radius * radius).collect();
            assert_eq!(idx.neighbors(i, radius), brute);
        }
    }

    #[test]
    fn pair_one_arcsecond_apart() {
        let a = [10.0, 5.0];
        let b = [10.0 + 1.0 / 3600.0, 5.0];
        let far = [11.0, 5.0];
        let idx = NeighborIndex::new(&[a, b, far], 5.0 / 3600.0);
        assert_eq!(idx.neighbors(0, 5.0 / 3600.0), vec![1]);
        assert_eq!(idx.neighbors(1, 5.0 / 3600.0), vec![0]);
        assert!(idx.neighbors(2, 5.0 / 3600.0).is_empty());
    }

    #[test]
    fn z_order_keeps_neighbors_close() {
        use crate::sky::{sample_catalog, ClusterConfig, Prior, SkyRegion};
        let region = SkyRegion { ra: (0.0, 1.0), dec: (0.0, 1.0) };
        let clusters = ClusterConfig { weight: 0.8, count: 30, sigma: 0.02 };
        let cat = sample_catalog(&Prior::default(), &region, 10_000, &clusters, 5).unwrap();
        let pts: Vec<[f64; 2]> = cat.iter().map(|s| s.position).collect();
        // Mean |rank(i) - rank(nearest(i))| under a given ordering.
        let nearest: Vec<usize> = {
            let idx = NeighborIndex::new(&pts, 0.01);
            (0..pts.len())
                .map(|i| {
                    let mut r = 0.01;
                    loop {
                        let v = idx.neighbors(i, r);
                        if let Some(&j) = v.iter().min_by(|&&a, &&b| dist2(pts[a], pts[i]).total_cmp(&dist2(pts[b], pts[i]))) {
                            break j;
                        }
                        r *= 2.0;
                    }
                })
                .collect()
        };
        let spread = |order: &[usize]| {
            let mut rank = vec![0usize; order.len()];
            for (k, &i) in order.iter().enumerate() {
                rank[i] = k;
            }
            (0..order.len()).map(|i| rank[i].abs_diff(rank[nearest[i]]) as f64).sum::<f64>() / order.len() as f64
        };
        let z = spread(&spatial_order(&pts));
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut perm: Vec<usize> = (0..pts.len()).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let random = spread(&perm);
        assert!(4.0 * z <= random, "z-order {z}, random {random}");
    }
}
