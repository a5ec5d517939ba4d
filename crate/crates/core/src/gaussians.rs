//! Gaussian primitives, covariance factorization, map container, and the
//! bit-exact `SGM1` map file format.
//!
//! Each primitive flattens to a fixed 20-number record:
//! position (3), scale (3), quaternion wxyz (4), opacity (1), color (3),
//! semantic embedding (3), and the three uncertainty scalars. Fields are
//! stored as f32 so that save/load round trips are bit-exact.

use crate::error::{CoreError, Result};
use crate::geometry::PointCloud;
use nalgebra::{Matrix3, Vector3, Vector4};
use std::fs;
use std::path::Path;

/// Numbers in one flattened primitive record.
pub const RECORD_LEN: usize = 20;

/// One Gaussian splat. Scales are linear meters, opacity in [0,1],
/// quaternion in (w, x, y, z) order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPrimitive {
    pub mu: [f32; 3],
    pub e: [f32; 3],
    pub r: [f32; 4],
    pub alpha: f32,
    pub c: [f32; 3],
    pub s: [f32; 3],
    pub ug: f32,
    pub us: f32,
    pub ua: f32,
}

impl GaussianPrimitive {
    pub fn to_record(&self) -> [f32; RECORD_LEN] {
        [
            self.mu[0], self.mu[1], self.mu[2], self.e[0], self.e[1], self.e[2], self.r[0],
            self.r[1], self.r[2], self.r[3], self.alpha, self.c[0], self.c[1], self.c[2],
            self.s[0], self.s[1], self.s[2], self.ug, self.us, self.ua,
        ]
    }

    pub fn from_record(rec: &[f32; RECORD_LEN]) -> Self {
        GaussianPrimitive {
            mu: [rec[0], rec[1], rec[2]],
            e: [rec[3], rec[4], rec[5]],
            r: [rec[6], rec[7], rec[8], rec[9]],
            alpha: rec[10],
            c: [rec[11], rec[12], rec[13]],
            s: [rec[14], rec[15], rec[16]],
            ug: rec[17],
            us: rec[18],
            ua: rec[19],
        }
    }

    pub fn mu_f64(&self) -> Vector3<f64> {
        Vector3::new(self.mu[0].into(), self.mu[1].into(), self.mu[2].into())
    }

    pub fn e_f64(&self) -> Vector3<f64> {
        Vector3::new(self.e[0].into(), self.e[1].into(), self.e[2].into())
    }

    pub fn r_f64(&self) -> Vector4<f64> {
        Vector4::new(
            self.r[0].into(),
            self.r[1].into(),
            self.r[2].into(),
            self.r[3].into(),
        )
    }

    /// Renormalize the quaternion in place.
    pub fn normalize_rotation(&mut self) {
        let n = (self.r.iter().map(|v| f64::from(*v) * f64::from(*v)).sum::<f64>()).sqrt();
        if n > 0.0 {
            for v in &mut self.r {
                *v = (f64::from(*v) / n) as f32;
            }
        } else {
            self.r = [1.0, 0.0, 0.0, 0.0];
        }
    }
}

/// Ordered collection of primitives. `source_frames` is in-memory metadata
/// only; the file format persists just the records.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianMap {
    pub primitives: Vec<GaussianPrimitive>,
    pub source_frames: u32,
}

impl GaussianMap {
    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }
}

/// Rotation matrix from a quaternion in (w, x, y, z) order, normalized
/// internally.
pub fn quat_to_rotation(r: Vector4<f64>) -> Matrix3<f64> {
    let q = r / r.norm();
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Covariance `R E E^T R^T` from the per-axis scale `e` and quaternion `r`.
///
/// Symmetric positive definite with eigenvalues `{e_x^2, e_y^2, e_z^2}`.
pub fn covariance(e: Vector3<f64>, r: Vector4<f64>) -> Result<Matrix3<f64>> {
    if e.min() <= 0.0 {
        return Err(CoreError::RejectedInput(format!(
            "scale components must be positive, got {e:?}"
        )));
    }
    if (r.norm() - 1.0).abs() > 1e-4 {
        return Err(CoreError::RejectedInput(format!(
            "quaternion norm {} deviates from 1 beyond 1e-4; normalize first",
            r.norm()
        )));
    }
    let rot = quat_to_rotation(r);
    let d = Matrix3::from_diagonal(&e.component_mul(&e));
    Ok(rot * d * rot.transpose())
}

/// Unit class embeddings spread over the sphere by the Fibonacci lattice.
/// Index 0 is reserved for void/background and maps to the zero vector.
pub fn class_embeddings(n_classes: usize) -> Vec<[f64; 3]> {
    let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    (0..n_classes)
        .map(|i| {
            if i == 0 {
                return [0.0, 0.0, 0.0];
            }
            let k = (i - 1) as f64;
            let m = (n_classes - 1) as f64;
            let z = 1.0 - 2.0 * (k + 0.5) / m;
            let rad = (1.0 - z * z).max(0.0).sqrt();
            let th = golden * k;
            [rad * th.cos(), rad * th.sin(), z]
        })
        .collect()
}

/// Default opacity for freshly initialized primitives.
pub const ALPHA_INIT: f32 = 0.5;

/// Clamp range for the isotropic scale initialization, meters.
pub const SCALE_INIT_RANGE: (f64, f64) = (1e-3, 0.5);

/// One primitive per cloud point: position and color from the point,
/// semantics from the class table, identity rotation, opacity 0.5, and an
/// isotropic scale of (mean distance to the 3 nearest neighbors) / 3
/// clamped to [1e-3, 0.5] m.
pub fn init_from_cloud(cloud: &PointCloud, class_embeddings: &[[f64; 3]]) -> Result<GaussianMap> {
    if cloud.is_empty() {
        return Err(CoreError::RejectedInput("empty point cloud".into()));
    }
    for &label in &cloud.labels {
        if usize::from(label) >= class_embeddings.len() {
            return Err(CoreError::RejectedInput(format!(
                "unknown class id {label} (embedding table has {} classes)",
                class_embeddings.len()
            )));
        }
    }
    let scales = neighbor_scales(&cloud.points);
    let primitives = cloud
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let s = class_embeddings[usize::from(cloud.labels[i])];
            let e = scales[i] as f32;
            GaussianPrimitive {
                mu: [p.x as f32, p.y as f32, p.z as f32],
                e: [e, e, e],
                r: [1.0, 0.0, 0.0, 0.0],
                alpha: ALPHA_INIT,
                c: [
                    cloud.colors[i][0] as f32,
                    cloud.colors[i][1] as f32,
                    cloud.colors[i][2] as f32,
                ],
                s: [s[0] as f32, s[1] as f32, s[2] as f32],
                ug: 0.0,
                us: 0.0,
                ua: 0.0,
            }
        })
        .collect();
    Ok(GaussianMap {
        primitives,
        source_frames: 0,
    })
}

/// Mean distance to the `min(3, n-1)` nearest neighbors, divided by 3 and
/// clamped, for every point. Exact scan accelerated by a coarse grid.
fn neighbor_scales(points: &[Vector3<f64>]) -> Vec<f64> {
    let (lo, hi) = SCALE_INIT_RANGE;
    let n = points.len();
    if n == 1 {
        return vec![lo.max((hi * 0.1).min(hi))];
    }
    let k = 3.min(n - 1);
    let index = crate::value_map::GridIndex::build(points, 0.25);
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut best = [f64::INFINITY; 3];
            // Expand the search radius until k neighbors are inside it.
            let mut radius = 0.25;
            loop {
                best = [f64::INFINITY; 3];
                let mut found = 0usize;
                index.for_each_in_sphere(points, *p, radius, |j, d| {
                    if j == i {
                        return;
                    }
                    if d < best[k - 1] {
                        best[k - 1] = d;
                        best[..k].sort_by(|a, b| a.partial_cmp(b).unwrap());
                        found += 1;
                    }
                });
                if found >= k || radius > 1e3 {
                    break;
                }
                radius *= 2.0;
            }
            let m = best[..k].iter().sum::<f64>() / k as f64;
            (m / 3.0).clamp(lo, hi)
        })
        .collect()
}

const MAP_MAGIC: &[u8; 4] = b"SGM1";

/// Write the map: `SGM1`, u32 LE count, then count x 20 f32 LE records.
pub fn save_map(map: &GaussianMap, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(8 + map.len() * RECORD_LEN * 4);
    out.extend_from_slice(MAP_MAGIC);
    out.extend_from_slice(&(map.len() as u32).to_le_bytes());
    for p in &map.primitives {
        for v in p.to_record() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_map(path: &Path) -> Result<GaussianMap> {
    let data = fs::read(path)?;
    load_map_bytes(&data)
}

pub fn load_map_bytes(data: &[u8]) -> Result<GaussianMap> {
    if data.len() < 4 || &data[..4] != MAP_MAGIC {
        return Err(CoreError::Format {
            offset: 0,
            what: "bad magic, expected \"SGM1\"".into(),
        });
    }
    if data.len() < 8 {
        return Err(CoreError::Format {
            offset: data.len() as u64,
            what: "truncated header, missing primitive count".into(),
        });
    }
    let count = u32::from_le_bytes([data[4], data[5], data[6], data[7]]) as usize;
    let expect = 8 + count * RECORD_LEN * 4;
    if data.len() != expect {
        return Err(CoreError::Format {
            offset: data.len().min(expect) as u64,
            what: format!(
                "payload is {} bytes but count {count} requires {expect}",
                data.len()
            ),
        });
    }
    let mut primitives = Vec::with_capacity(count);
    let mut pos = 8;
    for _ in 0..count {
        let mut rec = [0.0f32; RECORD_LEN];
        for v in &mut rec {
            *v = f32::from_le_bytes([data[pos], data[pos + 1], data[pos + 2], data[pos + 3]]);
            pos += 4;
        }
        primitives.push(GaussianPrimitive::from_record(&rec));
    }
    Ok(GaussianMap {
        primitives,
        source_frames: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use tempfile::tempdir;

    #[test]
    fn covariance_identity_rotation_is_diagonal() {
        let sigma =
            covariance(Vector3::new(1.0, 2.0, 3.0), Vector4::new(1.0, 0.0, 0.0, 0.0)).unwrap();
        let expect = Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 9.0));
        assert_relative_eq!(sigma, expect, epsilon = 1e-12);
    }

    #[test]
    fn covariance_z_rotation_matches_explicit_product() {
        // 90 degrees about z: q = (cos45, 0, 0, sin45). Oracle is the
        // explicit 3x3 triple product with the rotation written out.
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let q = Vector4::new(h, 0.0, 0.0, h);
        let e = Vector3::new(1.0, 2.0, 1.0);
        let rot = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let oracle = rot * Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1.0)) * rot.transpose();
        let sigma = covariance(e, q).unwrap();
        assert_relative_eq!(sigma, oracle, epsilon = 1e-12);
        assert_relative_eq!(
            sigma,
            Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)),
            epsilon = 1e-12
        );
    }

    #[test]
    fn covariance_symmetric_and_bounded_eigenvalues() {
        let mut rng = crate::rng::rng_for(3, "cov-test");
        for _ in 0..50 {
            let e = Vector3::new(
                rng.gen_range(0.01..2.0),
                rng.gen_range(0.01..2.0),
                rng.gen_range(0.01..2.0),
            );
            let mut q = Vector4::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            q /= q.norm();
            let sigma = covariance(e, q).unwrap();
            assert_relative_eq!(sigma, sigma.transpose(), epsilon = 1e-12);
            let eigs = sigma.symmetric_eigenvalues();
            let min_e2 = e.component_mul(&e).min();
            assert!(eigs.min() >= min_e2 - 1e-9);
        }
    }

    #[test]
    fn covariance_invariant_under_quaternion_sign_flip() {
        let q = Vector4::new(0.5, 0.5, 0.5, 0.5);
        let e = Vector3::new(0.2, 0.5, 1.0);
        assert_eq!(covariance(e, q).unwrap(), covariance(e, -q).unwrap());
    }

    #[test]
    fn covariance_rejects_bad_inputs() {
        assert!(covariance(Vector3::new(0.0, 1.0, 1.0), Vector4::new(1.0, 0.0, 0.0, 0.0)).is_err());
        assert!(covariance(Vector3::new(1.0, 1.0, 1.0), Vector4::new(1.1, 0.0, 0.0, 0.0)).is_err());
    }

    fn cloud_of(points: Vec<Vector3<f64>>) -> PointCloud {
        let n = points.len();
        PointCloud {
            points,
            colors: vec![[0.5, 0.25, 0.75]; n],
            labels: vec![1; n],
        }
    }

    #[test]
    fn init_single_point() {
        let cloud = cloud_of(vec![Vector3::new(1.0, 2.0, 3.0)]);
        let map = init_from_cloud(&cloud, &class_embeddings(3)).unwrap();
        assert_eq!(map.len(), 1);
        assert_eq!(map.primitives[0].mu, [1.0, 2.0, 3.0]);
        assert_eq!(map.primitives[0].alpha, ALPHA_INIT);
        assert_eq!(map.primitives[0].r, [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(
            (map.primitives[0].ug, map.primitives[0].us, map.primitives[0].ua),
            (0.0, 0.0, 0.0)
        );
    }

    #[test]
    fn init_count_matches_cloud() {
        let pts = (0..37)
            .map(|i| Vector3::new(i as f64 * 0.1, 0.0, 0.0))
            .collect();
        let map = init_from_cloud(&cloud_of(pts), &class_embeddings(3)).unwrap();
        assert_eq!(map.len(), 37);
    }

    #[test]
    fn collinear_three_point_scale_rule() {
        // Hand computation: middle point has neighbors at d and d, so its
        // mean neighbor distance is d and e = d/3; endpoints see d and 2d,
        // giving e = d/2.
        let d = 0.3;
        let pts = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(d, 0.0, 0.0),
            Vector3::new(2.0 * d, 0.0, 0.0),
        ];
        let map = init_from_cloud(&cloud_of(pts), &class_embeddings(3)).unwrap();
        let e_mid = map.primitives[1].e;
        for comp in e_mid {
            assert_relative_eq!(f64::from(comp), d / 3.0, epsilon = 1e-6);
        }
        for comp in map.primitives[0].e {
            assert_relative_eq!(f64::from(comp), d / 2.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn init_rejects_unknown_class() {
        let mut cloud = cloud_of(vec![Vector3::zeros()]);
        cloud.labels[0] = 9;
        let err = init_from_cloud(&cloud, &class_embeddings(3)).unwrap_err();
        assert!(err.to_string().contains('9'), "{err}");
    }

    #[test]
    fn init_deterministic() {
        let pts: Vec<_> = (0..50)
            .map(|i| Vector3::new((i % 7) as f64 * 0.2, (i % 5) as f64 * 0.3, i as f64 * 0.01))
            .collect();
        let cloud = cloud_of(pts);
        let table = class_embeddings(3);
        let a = init_from_cloud(&cloud, &table).unwrap();
        let b = init_from_cloud(&cloud, &table).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn embeddings_are_unit_and_separated() {
        let table = class_embeddings(8);
        for (i, e) in table.iter().enumerate().skip(1) {
            let norm = (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt();
            assert_relative_eq!(norm, 1.0, epsilon = 1e-12);
            for other in table.iter().skip(i + 1) {
                let dot: f64 = e.iter().zip(other.iter()).map(|(a, b)| a * b).sum();
                assert!(dot < 0.999, "classes too close: {e:?} vs {other:?}");
            }
        }
    }

    fn random_map(n: usize, seed: u64) -> GaussianMap {
        let mut rng = crate::rng::rng_for(seed, "map-gen");
        let primitives = (0..n)
            .map(|_| {
                let mut p = GaussianPrimitive {
                    mu: [rng.gen_range(-2.0..2.0); 3].map(|_: f32| rng.gen_range(-2.0f32..2.0)),
                    e: [0.0; 3].map(|_| rng.gen_range(0.002f32..0.4)),
                    r: [0.0; 4].map(|_| rng.gen_range(-1.0f32..1.0)),
                    alpha: rng.gen_range(0.0f32..1.0),
                    c: [0.0; 3].map(|_| rng.gen_range(0.0f32..1.0)),
                    s: [0.0; 3].map(|_| rng.gen_range(-1.0f32..1.0)),
                    ug: rng.gen_range(0.0f32..1.0),
                    us: rng.gen_range(0.0f32..1.0),
                    ua: rng.gen_range(-200.0f32..100.0),
                };
                p.normalize_rotation();
                p
            })
            .collect();
        GaussianMap {
            primitives,
            source_frames: 0,
        }
    }

    #[test]
    fn save_load_round_trip_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.sgm");
        let map = random_map(1000, 99);
        save_map(&map, &path).unwrap();
        let back = load_map(&path).unwrap();
        assert_eq!(map.len(), back.len());
        for (a, b) in map.primitives.iter().zip(back.primitives.iter()) {
            for (x, y) in a.to_record().iter().zip(b.to_record().iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn empty_map_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.sgm");
        save_map(&GaussianMap::default(), &path).unwrap();
        let back = load_map(&path).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn corrupted_magic_is_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.sgm");
        save_map(&random_map(3, 1), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        match load_map_bytes(&bytes) {
            Err(CoreError::Format { offset: 0, .. }) => {}
            other => panic!("expected format error at offset 0, got {other:?}"),
        }
    }

    #[test]
    fn truncation_names_offset() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.sgm");
        save_map(&random_map(3, 1), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        match load_map_bytes(&bytes[..bytes.len() - 5]) {
            Err(CoreError::Format { offset, .. }) => {
                assert_eq!(offset, (bytes.len() - 5) as u64)
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn record_has_twenty_finite_numbers() {
        let map = random_map(64, 5);
        for p in &map.primitives {
            let rec = p.to_record();
            assert_eq!(rec.len(), RECORD_LEN);
            assert!(rec.iter().all(|v| v.is_finite()));
            assert_eq!(GaussianPrimitive::from_record(&rec), *p);
        }
    }
}
