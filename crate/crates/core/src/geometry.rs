//! Pinhole camera model, rigid transforms, and RGB-D back-projection.
//!
//! Back-projection of pixel `(u, v)` with depth `z`:
//! `x = (u - cu) * z / fx`, `y = (v - cv) * z / fy`, camera frame with
//! z forward, x right, y down. Depth is metric distance along the camera
//! z-axis. Pixels sample at integer coordinates, so `project` and
//! `back_project` are exact inverses at every pixel.

pub mod frames;

use crate::error::{CoreError, Result};
use nalgebra::{Matrix3, Vector3};

/// Rigid transform camera -> world.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let should_be_identity = rotation.transpose() * rotation;
        let err = (should_be_identity - Matrix3::identity()).abs().max();
        if err > 1e-9 {
            return Err(CoreError::RejectedInput(format!(
                "pose rotation not orthonormal (deviation {err:.3e})"
            )));
        }
        if (rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(CoreError::RejectedInput(format!(
                "pose rotation determinant {} != +1",
                rotation.determinant()
            )));
        }
        Ok(Pose {
            rotation,
            translation,
        })
    }

    /// Camera-frame point to world frame.
    pub fn to_world(&self, p_cam: Vector3<f64>) -> Vector3<f64> {
        self.rotation * p_cam + self.translation
    }

    /// World-frame point to camera frame.
    pub fn to_camera(&self, p_world: Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p_world - self.translation)
    }

    /// Level camera standing at `position`, yawed by `yaw` radians around
    /// world +Z (z-up world; yaw 0 looks along +X).
    pub fn from_yaw(position: Vector3<f64>, yaw: f64) -> Self {
        let (s, c) = yaw.sin_cos();
        // Columns: camera x (right), y (down), z (forward) in world frame.
        let rotation = Matrix3::from_columns(&[
            Vector3::new(s, -c, 0.0),
            Vector3::new(0.0, 0.0, -1.0),
            Vector3::new(c, s, 0.0),
        ]);
        Pose {
            rotation,
            translation: position,
        }
    }
}

/// Pinhole camera: intrinsics in pixels plus a camera->world pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cu: f64,
    pub cv: f64,
    pub width: usize,
    pub height: usize,
    pub pose: Pose,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cu: f64,
        cv: f64,
        width: usize,
        height: usize,
        pose: Pose,
    ) -> Result<Self> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(CoreError::RejectedInput(format!(
                "focal lengths must be positive (fx={fx}, fy={fy})"
            )));
        }
        if cu <= 0.0 || cu >= width as f64 || cv <= 0.0 || cv >= height as f64 {
            return Err(CoreError::RejectedInput(format!(
                "principal point ({cu}, {cv}) outside {width}x{height} image"
            )));
        }
        Ok(Camera {
            fx,
            fy,
            cu,
            cv,
            width,
            height,
            pose,
        })
    }

    pub fn contains_pixel(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64
    }
}

/// World-frame point cloud with per-point color and semantic class id.
#[derive(Debug, Clone, Default)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub colors: Vec<[f64; 3]>,
    pub labels: Vec<u8>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Append another cloud, preserving order.
    pub fn extend(&mut self, other: &PointCloud) {
        self.points.extend_from_slice(&other.points);
        self.colors.extend_from_slice(&other.colors);
        self.labels.extend_from_slice(&other.labels);
    }
}

/// One RGB-D observation: images plus the camera that captured them.
/// `rgb` is row-major HxWx3 in [0,1], `depth` row-major HxW meters
/// (0 marks invalid), `labels` row-major HxW class ids.
#[derive(Debug, Clone)]
pub struct Frame {
    pub rgb: Vec<f64>,
    pub depth: Vec<f64>,
    pub labels: Vec<u8>,
    pub camera: Camera,
}

impl Frame {
    pub fn validate(&self) -> Result<()> {
        let n = self.camera.width * self.camera.height;
        if self.rgb.len() != 3 * n || self.depth.len() != n || self.labels.len() != n {
            return Err(CoreError::RejectedInput(format!(
                "frame buffers do not match camera dimensions {}x{}",
                self.camera.width, self.camera.height
            )));
        }
        Ok(())
    }
}

/// Back-project pixel `(u, v)` at `depth` into the camera frame.
pub fn back_project(u: f64, v: f64, depth: f64, cam: &Camera) -> Result<Vector3<f64>> {
    if !depth.is_finite() || depth <= 0.0 {
        return Err(CoreError::RejectedInput(format!(
            "depth must be finite and positive, got {depth}"
        )));
    }
    if !cam.contains_pixel(u, v) {
        return Err(CoreError::RejectedInput(format!(
            "pixel ({u}, {v}) outside {}x{} image",
            cam.width, cam.height
        )));
    }
    Ok(Vector3::new(
        (u - cam.cu) * depth / cam.fx,
        (v - cam.cv) * depth / cam.fy,
        depth,
    ))
}

/// Project a world point to `(u, v, z_cam)`.
///
/// Inverse of `back_project` composed with the pose: for any valid pixel,
/// `project(pose * back_project(u, v, z))` returns `(u, v, z)`.
pub fn project(p_world: Vector3<f64>, cam: &Camera) -> Result<(f64, f64, f64)> {
    let p = cam.pose.to_camera(p_world);
    if p.z <= 1e-6 {
        return Err(CoreError::BehindCamera { z: p.z });
    }
    Ok((
        cam.fx * p.x / p.z + cam.cu,
        cam.fy * p.y / p.z + cam.cv,
        p.z,
    ))
}

/// Back-project every `stride`-th pixel with valid depth into a world-frame
/// cloud. Zero-depth pixels are skipped.
pub fn frame_to_cloud(frame: &Frame, stride: usize) -> Result<PointCloud> {
    frame.validate()?;
    if stride < 1 {
        return Err(CoreError::RejectedInput("stride must be >= 1".into()));
    }
    let cam = &frame.camera;
    let mut cloud = PointCloud::default();
    let mut v = 0;
    while v < cam.height {
        let mut u = 0;
        while u < cam.width {
            let idx = v * cam.width + u;
            let z = frame.depth[idx];
            if z > 0.0 {
                let p_cam = back_project(u as f64, v as f64, z, cam)?;
                cloud.points.push(cam.pose.to_world(p_cam));
                cloud.colors.push([
                    frame.rgb[3 * idx],
                    frame.rgb[3 * idx + 1],
                    frame.rgb[3 * idx + 2],
                ]);
                cloud.labels.push(frame.labels[idx]);
            }
            u += stride;
        }
        v += stride;
    }
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn test_cam(pose: Pose) -> Camera {
        Camera::new(150.0, 150.0, 112.0, 112.0, 224, 224, pose).unwrap()
    }

    #[test]
    fn principal_point_maps_to_optical_axis() {
        let cam = test_cam(Pose::identity());
        let p = back_project(112.0, 112.0, 2.0, &cam).unwrap();
        assert_eq!(p, Vector3::new(0.0, 0.0, 2.0));
    }

    #[test]
    fn one_focal_length_offset_gives_x_equal_z() {
        let cam = Camera::new(150.0, 150.0, 10.0, 112.0, 224, 224, Pose::identity()).unwrap();
        let p = back_project(10.0 + 150.0, 112.0, 3.0, &cam).unwrap();
        assert_relative_eq!(p.x, 3.0, max_relative = 1e-12);
        assert_relative_eq!(p.y, 0.0);
        assert_eq!(p.z, 3.0);
    }

    #[test]
    fn matches_scalar_formula() {
        // Independent scalar evaluation of the back-projection formula.
        let cam = test_cam(Pose::identity());
        let (u, v, z) = (123.4, 56.7, 1.75);
        let expect_x = (u - 112.0) * z / 150.0;
        let expect_y = (v - 112.0) * z / 150.0;
        let p = back_project(u, v, z, &cam).unwrap();
        assert_relative_eq!(p.x, expect_x, max_relative = 1e-14);
        assert_relative_eq!(p.y, expect_y, max_relative = 1e-14);
        assert_eq!(p.z, z);
    }

    #[test]
    fn rejects_bad_depth() {
        let cam = test_cam(Pose::identity());
        assert!(back_project(10.0, 10.0, 0.0, &cam).is_err());
        assert!(back_project(10.0, 10.0, -1.0, &cam).is_err());
        assert!(back_project(10.0, 10.0, f64::NAN, &cam).is_err());
    }

    #[test]
    fn project_on_axis() {
        let cam = test_cam(Pose::identity());
        let (u, v, z) = project(Vector3::new(0.0, 0.0, 2.0), &cam).unwrap();
        assert_eq!((u, v, z), (112.0, 112.0, 2.0));
    }

    #[test]
    fn behind_camera_rejected() {
        let cam = test_cam(Pose::identity());
        match project(Vector3::new(0.0, 0.0, -1.0), &cam) {
            Err(CoreError::BehindCamera { .. }) => {}
            other => panic!("expected behind-camera error, got {other:?}"),
        }
    }

    #[test]
    fn round_trip_random_pixels() {
        let mut rng = crate::rng::rng_for(11, "geometry-roundtrip");
        let pose = Pose::from_yaw(Vector3::new(0.3, -0.8, 1.1), 0.7);
        let cam = test_cam(pose);
        for _ in 0..100 {
            let u = rng.gen_range(0.0..224.0);
            let v = rng.gen_range(0.0..224.0);
            let z = rng.gen_range(0.1..8.0);
            let world = cam.pose.to_world(back_project(u, v, z, &cam).unwrap());
            let (u2, v2, z2) = project(world, &cam).unwrap();
            assert_relative_eq!(u2, u, epsilon = 1e-6);
            assert_relative_eq!(v2, v, epsilon = 1e-6);
            assert_relative_eq!(z2, z, epsilon = 1e-6);
        }
    }

    #[test]
    fn project_rotated_pose_matches_matrix_oracle() {
        // Hand-rolled 4x4 homogeneous oracle for the world->pixel chain.
        let pose = Pose::from_yaw(Vector3::new(1.0, 2.0, 0.5), -1.2);
        let cam = test_cam(pose);
        let p_world = Vector3::new(2.5, 1.0, 1.3);

        let mut m = [[0.0f64; 4]; 4];
        let rt = pose.rotation.transpose();
        let t = -rt * pose.translation;
        for r in 0..3 {
            for c in 0..3 {
                m[r][c] = rt[(r, c)];
            }
            m[r][3] = t[r];
        }
        m[3][3] = 1.0;
        let hom = [p_world.x, p_world.y, p_world.z, 1.0];
        let mut pc = [0.0f64; 3];
        for r in 0..3 {
            pc[r] = (0..4).map(|c| m[r][c] * hom[c]).sum();
        }
        let expect_u = 150.0 * pc[0] / pc[2] + 112.0;
        let expect_v = 150.0 * pc[1] / pc[2] + 112.0;

        let (u, v, z) = project(p_world, &cam).unwrap();
        assert_relative_eq!(u, expect_u, epsilon = 1e-9);
        assert_relative_eq!(v, expect_v, epsilon = 1e-9);
        assert_relative_eq!(z, pc[2], epsilon = 1e-9);
    }

    #[test]
    fn rigid_transform_preserves_distances() {
        let mut rng = crate::rng::rng_for(5, "geometry-rigid");
        let pose = Pose::from_yaw(Vector3::new(0.1, 0.2, 0.3), 2.1);
        for _ in 0..50 {
            let a = Vector3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>());
            let b = Vector3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>());
            let d0 = (a - b).norm();
            let d1 = (pose.to_world(a) - pose.to_world(b)).norm();
            assert_relative_eq!(d0, d1, max_relative = 1e-9);
        }
    }

    fn single_pixel_frame(pose: Pose) -> Frame {
        let cam = Camera::new(32.0, 32.0, 16.0, 16.0, 32, 32, pose).unwrap();
        let n = 32 * 32;
        let mut depth = vec![0.0; n];
        depth[5 * 32 + 7] = 2.0;
        let mut rgb = vec![0.0; 3 * n];
        rgb[3 * (5 * 32 + 7)] = 1.0;
        Frame {
            rgb,
            depth,
            labels: vec![1; n],
            camera: cam,
        }
    }

    #[test]
    fn single_valid_pixel_yields_one_point() {
        let frame = single_pixel_frame(Pose::identity());
        let cloud = frame_to_cloud(&frame, 1).unwrap();
        assert_eq!(cloud.len(), 1);
        let expect = back_project(7.0, 5.0, 2.0, &frame.camera).unwrap();
        assert_eq!(cloud.points[0], expect);
        assert_eq!(cloud.colors[0], [1.0, 0.0, 0.0]);
        assert_eq!(cloud.labels[0], 1);
    }

    #[test]
    fn all_zero_depth_gives_empty_cloud() {
        let mut frame = single_pixel_frame(Pose::identity());
        frame.depth.iter_mut().for_each(|d| *d = 0.0);
        assert!(frame_to_cloud(&frame, 1).unwrap().is_empty());
    }

    #[test]
    fn pure_translation_shifts_each_point() {
        // Brute-force per-point transform oracle.
        let t = Vector3::new(1.0, 0.0, 0.0);
        let shifted = frame_to_cloud(
            &single_pixel_frame(Pose {
                rotation: Matrix3::identity(),
                translation: t,
            }),
            1,
        )
        .unwrap();
        let base = frame_to_cloud(&single_pixel_frame(Pose::identity()), 1).unwrap();
        for (a, b) in shifted.points.iter().zip(base.points.iter()) {
            assert_eq!(*a, *b + t);
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut frame = single_pixel_frame(Pose::identity());
        frame.depth.pop();
        assert!(frame_to_cloud(&frame, 1).is_err());
    }
}
