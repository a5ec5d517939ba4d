//! Spatial aggregation over uncertainty-augmented maps: sphere queries
//! backed by a uniform grid, and the fixed-length region featurizer.
//!
//! The grid is an accelerator only; every query enumerates exactly the
//! primitives a linear scan would.

use crate::gaussians::GaussianMap;
use nalgebra::Vector3;
use std::collections::HashMap;

/// Uniform grid over 3D points. Cells hold point indices in insertion
/// order; sphere enumeration walks the covered cell range in a fixed
/// order, so results are deterministic.
#[derive(Debug, Clone)]
pub struct GridIndex {
    cell: f64,
    cells: HashMap<(i64, i64, i64), Vec<usize>>,
}

impl GridIndex {
    pub fn build(points: &[Vector3<f64>], cell: f64) -> Self {
        assert!(cell > 0.0);
        let mut cells: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, cell)).or_default().push(i);
        }
        GridIndex { cell, cells }
    }

    fn key(p: &Vector3<f64>, cell: f64) -> (i64, i64, i64) {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    }

    /// Visit `(index, distance)` for every point with `|p - center| <= radius`.
    pub fn for_each_in_sphere(
        &self,
        points: &[Vector3<f64>],
        center: Vector3<f64>,
        radius: f64,
        mut f: impl FnMut(usize, f64),
    ) {
        let lo = Self::key(&(center - Vector3::repeat(radius)), self.cell);
        let hi = Self::key(&(center + Vector3::repeat(radius)), self.cell);
        for cx in lo.0..=hi.0 {
            for cy in lo.1..=hi.1 {
                for cz in lo.2..=hi.2 {
                    if let Some(ids) = self.cells.get(&(cx, cy, cz)) {
                        for &i in ids {
                            let d = (points[i] - center).norm();
                            if d <= radius {
                                f(i, d);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Aggregate of the primitives inside a query region.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ValueQueryResult {
    pub count: usize,
    pub mean_ug: f64,
    pub mean_us: f64,
    pub mean_ua: f64,
    /// Opacity-weighted mean semantic embedding.
    pub sem_centroid: [f64; 3],
    /// Sum of opacities in the region.
    pub occupancy: f64,
}

impl ValueQueryResult {
    /// Region contained no primitives; means are defined as 0.
    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

/// A map frozen behind a spatial index for repeated region queries.
#[derive(Debug, Clone)]
pub struct ValueMapIndex {
    positions: Vec<Vector3<f64>>,
    grid: GridIndex,
    pub map: GaussianMap,
}

/// Default aggregation radius around candidate waypoints, meters.
pub const DEFAULT_QUERY_RADIUS: f64 = 0.75;

impl ValueMapIndex {
    pub fn new(map: GaussianMap) -> Self {
        Self::with_cell(map, DEFAULT_QUERY_RADIUS)
    }

    pub fn with_cell(map: GaussianMap, cell: f64) -> Self {
        let positions: Vec<Vector3<f64>> = map.primitives.iter().map(|p| p.mu_f64()).collect();
        let grid = GridIndex::build(&positions, cell);
        ValueMapIndex {
            positions,
            grid,
            map,
        }
    }

    pub fn query_sphere(&self, center: Vector3<f64>, radius: f64) -> ValueQueryResult {
        assert!(radius > 0.0, "query radius must be positive");
        let mut r = ValueQueryResult::default();
        self.grid
            .for_each_in_sphere(&self.positions, center, radius, |i, _| {
                let p = &self.map.primitives[i];
                r.count += 1;
                r.mean_ug += f64::from(p.ug);
                r.mean_us += f64::from(p.us);
                r.mean_ua += f64::from(p.ua);
                let a = f64::from(p.alpha);
                for k in 0..3 {
                    r.sem_centroid[k] += a * f64::from(p.s[k]);
                }
                r.occupancy += a;
            });
        if r.count > 0 {
            let n = r.count as f64;
            r.mean_ug /= n;
            r.mean_us /= n;
            r.mean_ua /= n;
            if r.occupancy > 0.0 {
                for k in 0..3 {
                    r.sem_centroid[k] /= r.occupancy;
                }
            }
        }
        r
    }
}

/// Brute-force reference for `query_sphere`.
pub fn query_sphere_scan(map: &GaussianMap, center: Vector3<f64>, radius: f64) -> ValueQueryResult {
    let mut r = ValueQueryResult::default();
    for p in &map.primitives {
        if (p.mu_f64() - center).norm() <= radius {
            r.count += 1;
            r.mean_ug += f64::from(p.ug);
            r.mean_us += f64::from(p.us);
            r.mean_ua += f64::from(p.ua);
            let a = f64::from(p.alpha);
            for k in 0..3 {
                r.sem_centroid[k] += a * f64::from(p.s[k]);
            }
            r.occupancy += a;
        }
    }
    if r.count > 0 {
        let n = r.count as f64;
        r.mean_ug /= n;
        r.mean_us /= n;
        r.mean_ua /= n;
        if r.occupancy > 0.0 {
            for k in 0..3 {
                r.sem_centroid[k] /= r.occupancy;
            }
        }
    }
    r
}

/// Running min/max used to normalize uncertainty means.
#[derive(Debug, Clone, Copy)]
pub struct UncertaintyNorms {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for UncertaintyNorms {
    fn default() -> Self {
        UncertaintyNorms {
            min: [f64::INFINITY; 3],
            max: [f64::NEG_INFINITY; 3],
        }
    }
}

impl UncertaintyNorms {
    pub fn observe(&mut self, result: &ValueQueryResult) {
        if result.is_empty() {
            return;
        }
        for (k, v) in [result.mean_ug, result.mean_us, result.mean_ua]
            .into_iter()
            .enumerate()
        {
            self.min[k] = self.min[k].min(v);
            self.max[k] = self.max[k].max(v);
        }
    }

    fn normalize(&self, k: usize, v: f64) -> f64 {
        let span = self.max[k] - self.min[k];
        if !span.is_finite() || span <= 0.0 {
            return 0.0;
        }
        ((v - self.min[k]) / span).clamp(0.0, 1.0)
    }
}

/// Length-7 region feature: occupancy, semantic centroid, and the three
/// min-max-normalized uncertainty means (normalized slots lie in [0,1]).
pub fn featurize(result: &ValueQueryResult, norms: &UncertaintyNorms) -> [f64; 7] {
    [
        result.occupancy,
        result.sem_centroid[0],
        result.sem_centroid[1],
        result.sem_centroid[2],
        norms.normalize(0, result.mean_ug),
        norms.normalize(1, result.mean_us),
        norms.normalize(2, result.mean_ua),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussians::GaussianPrimitive;
    use rand::Rng;

    fn random_map(n: usize, seed: u64) -> GaussianMap {
        let mut rng = crate::rng::rng_for(seed, "value-map-test");
        GaussianMap {
            primitives: (0..n)
                .map(|_| GaussianPrimitive {
                    mu: [0.0; 3].map(|_| rng.gen_range(-3.0f32..3.0)),
                    e: [0.05; 3],
                    r: [1.0, 0.0, 0.0, 0.0],
                    alpha: rng.gen_range(0.0f32..1.0),
                    c: [0.5; 3],
                    s: [0.0; 3].map(|_| rng.gen_range(-1.0f32..1.0)),
                    ug: rng.gen_range(0.0f32..2.0),
                    us: rng.gen_range(0.0f32..2.0),
                    ua: rng.gen_range(-200.0f32..50.0),
                })
                .collect(),
            source_frames: 0,
        }
    }

    #[test]
    fn whole_scene_radius_counts_everything() {
        let map = random_map(200, 1);
        let idx = ValueMapIndex::new(map.clone());
        let r = idx.query_sphere(Vector3::zeros(), 100.0);
        assert_eq!(r.count, map.len());
    }

    #[test]
    fn empty_region_flagged() {
        let map = random_map(50, 2);
        let idx = ValueMapIndex::new(map);
        let r = idx.query_sphere(Vector3::new(500.0, 0.0, 0.0), 0.5);
        assert!(r.is_empty());
        assert_eq!(r.mean_ug, 0.0);
        assert_eq!(r.occupancy, 0.0);
    }

    #[test]
    fn grid_matches_brute_force() {
        let map = random_map(400, 3);
        let idx = ValueMapIndex::new(map.clone());
        let mut rng = crate::rng::rng_for(4, "value-map-query");
        for _ in 0..300 {
            let center = Vector3::new(
                rng.gen_range(-3.5..3.5),
                rng.gen_range(-3.5..3.5),
                rng.gen_range(-3.5..3.5),
            );
            let radius = rng.gen_range(0.05..2.5);
            let a = idx.query_sphere(center, radius);
            let b = query_sphere_scan(&map, center, radius);
            assert_eq!(a, b, "center {center:?} radius {radius}");
        }
    }

    #[test]
    fn featurize_extremes_and_midpoint() {
        let mut norms = UncertaintyNorms::default();
        let lo = ValueQueryResult {
            count: 1,
            mean_ug: 0.0,
            mean_us: 1.0,
            mean_ua: -10.0,
            ..Default::default()
        };
        let hi = ValueQueryResult {
            count: 1,
            mean_ug: 2.0,
            mean_us: 3.0,
            mean_ua: 10.0,
            ..Default::default()
        };
        norms.observe(&lo);
        norms.observe(&hi);
        assert_eq!(&featurize(&lo, &norms)[4..], &[0.0, 0.0, 0.0]);
        assert_eq!(&featurize(&hi, &norms)[4..], &[1.0, 1.0, 1.0]);
        let mid = ValueQueryResult {
            count: 1,
            mean_ug: 1.0,
            mean_us: 2.0,
            mean_ua: 0.0,
            ..Default::default()
        };
        for v in &featurize(&mid, &norms)[4..] {
            assert!((v - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_norms_give_zero() {
        let mut norms = UncertaintyNorms::default();
        let r = ValueQueryResult {
            count: 1,
            mean_ug: 1.0,
            mean_us: 1.0,
            mean_ua: 1.0,
            ..Default::default()
        };
        norms.observe(&r);
        assert_eq!(&featurize(&r, &norms)[4..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn featurize_monotone_in_each_uncertainty() {
        let mut norms = UncertaintyNorms::default();
        let lo = ValueQueryResult {
            count: 1,
            mean_ug: 0.0,
            mean_us: 0.0,
            mean_ua: 0.0,
            ..Default::default()
        };
        let hi = ValueQueryResult {
            count: 1,
            mean_ug: 4.0,
            mean_us: 4.0,
            mean_ua: 4.0,
            ..Default::default()
        };
        norms.observe(&lo);
        norms.observe(&hi);
        let mut prev = [-1.0; 3];
        for step in 0..=8 {
            let v = step as f64 * 0.5;
            let r = ValueQueryResult {
                count: 1,
                mean_ug: v,
                mean_us: v,
                mean_ua: v,
                ..Default::default()
            };
            let f = featurize(&r, &norms);
            for k in 0..3 {
                assert!(f[4 + k] >= prev[k]);
                prev[k] = f[4 + k];
            }
        }
    }
}
