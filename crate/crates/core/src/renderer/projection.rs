//! Projection of 3D Gaussians to image-plane splats, with the analytic
//! Jacobians of the projected center, depth, and 2D covariance with
//! respect to the internal primitive parameters.
//!
//! The 2D covariance is `J W Sigma W^T J^T + eps2d I`, where `W` is the
//! world->camera rotation, `J` the affine Jacobian of the perspective
//! projection at the primitive center, and `Sigma = R E E^T R^T`.

use crate::geometry::Camera;
use nalgebra::{Matrix2, Matrix3, Vector2, Vector3, Vector4};

use super::{InternalSplat, RenderSettings};

/// Image-plane footprint of one primitive.
#[derive(Debug, Clone, Copy)]
pub struct Splat2D {
    /// Projected center in pixels.
    pub mu2: Vector2<f64>,
    /// 2D covariance in pixels^2 (symmetric, eigenvalues >= eps2d).
    pub cov2: Matrix2<f64>,
    /// Camera-frame depth of the center, meters.
    pub z: f64,
    /// Index of the source primitive in the map.
    pub source: usize,
}

/// Opacity-modulated Gaussian falloff at `pixel`, clamped to
/// `<= alpha_clamp` (0.999 by default).
pub fn alpha_at(splat: &Splat2D, alpha: f64, pixel: Vector2<f64>, settings: &RenderSettings) -> f64 {
    let inv = invert2(&splat.cov2);
    let d = pixel - splat.mu2;
    let q = inv.0 * d.x * d.x + 2.0 * inv.1 * d.x * d.y + inv.2 * d.y * d.y;
    (alpha * (-0.5 * q).exp()).min(settings.alpha_clamp)
}

/// Inverse of a symmetric positive definite 2x2, packed as (a, b, d).
fn invert2(m: &Matrix2<f64>) -> (f64, f64, f64) {
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    (m[(1, 1)] / det, -m[(0, 1)] / det, m[(0, 0)] / det)
}

/// Rotation matrix of the normalized quaternion together with the four
/// partial derivative matrices with respect to the unit components.
pub fn rotation_and_grads(q: Vector4<f64>) -> (Matrix3<f64>, [Matrix3<f64>; 4]) {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let rot = Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    );
    let dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
    let dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
    let dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
    let dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;
    (rot, [dw, dx, dy, dz])
}

/// Projected splat plus everything the blend passes need per primitive.
#[derive(Debug, Clone)]
pub(super) struct ProjectedSplat {
    pub source: usize,
    pub mu2: Vector2<f64>,
    /// Inverse 2D covariance packed as (a, b, d).
    pub inv: (f64, f64, f64),
    pub z: f64,
    /// Natural opacity after the sigmoid.
    pub alpha: f64,
    pub color: Vector3<f64>,
    pub sem: Vector3<f64>,
    /// Mahalanobis-squared beyond which the contribution is below the
    /// configured cutoff and is skipped.
    pub q_max: f64,
    /// Pixel radius enclosing the q_max contour, for tile binning.
    pub bin_radius: f64,
}

/// Per-splat Jacobians of the pixel-stage quantities with respect to the
/// ten internal geometry parameters [mu(3), log_e(3), rot(4)].
#[derive(Debug, Clone)]
pub(super) struct SplatDerivs {
    /// d(mu2)/d(mu), rows u then v.
    pub dmu2_dmu: [[f64; 3]; 2],
    /// d(z)/d(mu).
    pub dz_dmu: [f64; 3],
    /// d(inv packed a,b,d)/d(theta10).
    pub dinv_dt: [[f64; 10]; 3],
    /// d(alpha_natural)/d(alpha_raw) = a (1 - a).
    pub dalpha: f64,
}

pub(super) struct Projected {
    pub splat: ProjectedSplat,
    pub derivs: Option<SplatDerivs>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Project one primitive. Returns `None` when the primitive is behind the
/// camera plane, its 3-sigma footprint lies outside the image, or its
/// opacity never exceeds the contribution cutoff.
pub(super) fn project_internal(
    splat: &InternalSplat,
    index: usize,
    cam: &Camera,
    settings: &RenderSettings,
    with_derivs: bool,
) -> Option<Projected> {
    let w_rot = cam.pose.rotation.transpose();
    let p_c = w_rot * (splat.mu - cam.pose.translation);
    if p_c.z <= 1e-6 {
        return None;
    }
    let alpha = sigmoid(splat.alpha_raw);
    if alpha <= settings.alpha_cutoff {
        return None;
    }

    let (x, y, z) = (p_c.x, p_c.y, p_c.z);
    let mu2 = Vector2::new(cam.fx * x / z + cam.cu, cam.fy * y / z + cam.cv);

    let e = splat.log_e.map(f64::exp);
    let (rot, drot) = rotation_and_grads(unit_quat(splat.rot));
    let d_diag = Vector3::new(e.x * e.x, e.y * e.y, e.z * e.z);
    let sigma = rot * Matrix3::from_diagonal(&d_diag) * rot.transpose();
    let m = w_rot * sigma * w_rot.transpose();

    // Affine Jacobian of the perspective projection at the center.
    let j00 = cam.fx / z;
    let j02 = -cam.fx * x / (z * z);
    let j11 = cam.fy / z;
    let j12 = -cam.fy * y / (z * z);
    let jm = nalgebra::Matrix2x3::new(j00, 0.0, j02, 0.0, j11, j12);
    let mut cov2 = jm * m * jm.transpose();
    cov2[(0, 0)] += settings.eps2d;
    cov2[(1, 1)] += settings.eps2d;

    let half_tr = 0.5 * (cov2[(0, 0)] + cov2[(1, 1)]);
    let disc = (0.5 * (cov2[(0, 0)] - cov2[(1, 1)])).powi(2) + cov2[(0, 1)].powi(2);
    let lambda_max = half_tr + disc.sqrt();

    // Whole-image cull at the 3-sigma footprint.
    let bb3 = 3.0 * lambda_max.sqrt();
    let (w_img, h_img) = (cam.width as f64 - 1.0, cam.height as f64 - 1.0);
    if mu2.x + bb3 < 0.0 || mu2.x - bb3 > w_img || mu2.y + bb3 < 0.0 || mu2.y - bb3 > h_img {
        return None;
    }

    let q_max = 2.0 * (alpha / settings.alpha_cutoff).ln();
    let bin_radius = (q_max * lambda_max).sqrt();
    let inv = invert2(&cov2);

    let derivs = with_derivs.then(|| {
        build_derivs(
            cam, &w_rot, p_c, alpha, &rot, &drot, &d_diag, &e, splat.rot, &m, &jm, inv,
        )
    });

    Some(Projected {
        splat: ProjectedSplat {
            source: index,
            mu2,
            inv,
            z,
            alpha,
            color: splat.color,
            sem: splat.sem,
            q_max,
            bin_radius,
        },
        derivs,
    })
}

fn unit_quat(r: Vector4<f64>) -> Vector4<f64> {
    let n = r.norm();
    if n > 0.0 {
        r / n
    } else {
        Vector4::new(1.0, 0.0, 0.0, 0.0)
    }
}

#[allow(clippy::too_many_arguments)]
fn build_derivs(
    cam: &Camera,
    w_rot: &Matrix3<f64>,
    p_c: Vector3<f64>,
    alpha: f64,
    rot: &Matrix3<f64>,
    drot: &[Matrix3<f64>; 4],
    d_diag: &Vector3<f64>,
    e: &Vector3<f64>,
    raw_quat: Vector4<f64>,
    m: &Matrix3<f64>,
    jm: &nalgebra::Matrix2x3<f64>,
    inv: (f64, f64, f64),
) -> SplatDerivs {
    let (x, y, z) = (p_c.x, p_c.y, p_c.z);
    let z2 = z * z;
    let z3 = z2 * z;

    // dmu2/dmu = J * W, dz/dmu = third row of W.
    let jw = jm * w_rot;
    let dmu2_dmu = [
        [jw[(0, 0)], jw[(0, 1)], jw[(0, 2)]],
        [jw[(1, 0)], jw[(1, 1)], jw[(1, 2)]],
    ];
    let dz_dmu = [w_rot[(2, 0)], w_rot[(2, 1)], w_rot[(2, 2)]];

    // dC/dtheta for theta = [mu(3), log_e(3), rot(4)], C = J M J^T.
    let mut dc_dt = [[0.0f64; 10]; 3]; // rows: dC_aa, dC_ab, dC_dd

    // Through J: dJ/dp_c has four nonzero entries per axis.
    let dj_dp = [
        // d/dx
        nalgebra::Matrix2x3::new(0.0, 0.0, -cam.fx / z2, 0.0, 0.0, 0.0),
        // d/dy
        nalgebra::Matrix2x3::new(0.0, 0.0, 0.0, 0.0, 0.0, -cam.fy / z2),
        // d/dz
        nalgebra::Matrix2x3::new(
            -cam.fx / z2,
            0.0,
            2.0 * cam.fx * x / z3,
            0.0,
            -cam.fy / z2,
            2.0 * cam.fy * y / z3,
        ),
    ];
    for mu_k in 0..3 {
        // dp_c/dmu_k is column k of W.
        let mut dj = nalgebra::Matrix2x3::zeros();
        for (axis, dj_axis) in dj_dp.iter().enumerate() {
            dj += dj_axis * w_rot[(axis, mu_k)];
        }
        let dc = dj * m * jm.transpose() + jm * m * dj.transpose();
        dc_dt[0][mu_k] = dc[(0, 0)];
        dc_dt[1][mu_k] = dc[(0, 1)];
        dc_dt[2][mu_k] = dc[(1, 1)];
    }

    // Through Sigma: C = J W Sigma W^T J^T, so dC = (J W) dSigma (J W)^T.
    let a = jm * w_rot; // 2x3
    let mut put_sigma_term = |slot: usize, dsigma: &Matrix3<f64>| {
        let dc = a * dsigma * a.transpose();
        dc_dt[0][slot] = dc[(0, 0)];
        dc_dt[1][slot] = dc[(0, 1)];
        dc_dt[2][slot] = dc[(1, 1)];
    };

    // Scale: dSigma/dlog_e_k = 2 e_k^2 r_k r_k^T.
    for k in 0..3 {
        let col = rot.column(k);
        let dsigma = 2.0 * d_diag[k] * col * col.transpose();
        put_sigma_term(3 + k, &dsigma);
        let _ = e;
    }

    // Rotation: through the unit quaternion, then the normalization
    // projection back to the raw components.
    let n = raw_quat.norm().max(1e-300);
    let qu = raw_quat / n;
    let dd = Matrix3::from_diagonal(d_diag);
    let dsig_dq: Vec<Matrix3<f64>> = (0..4)
        .map(|j| {
            let t = drot[j] * dd * rot.transpose();
            t + t.transpose()
        })
        .collect();
    for m_raw in 0..4 {
        let mut dsigma = Matrix3::zeros();
        for j in 0..4 {
            let proj = ((j == m_raw) as usize as f64 - qu[j] * qu[m_raw]) / n;
            dsigma += dsig_dq[j] * proj;
        }
        put_sigma_term(6 + m_raw, &dsigma);
    }

    // dinv/dtheta = -inv (dC/dtheta) inv for the packed entries.
    let (ia, ib, id) = inv;
    let mut dinv_dt = [[0.0f64; 10]; 3];
    for t in 0..10 {
        let (ca, cb, cd) = (dc_dt[0][t], dc_dt[1][t], dc_dt[2][t]);
        // -inv * dC * inv with both matrices symmetric.
        let m00 = ia * ca + ib * cb;
        let m01 = ia * cb + ib * cd;
        let m10 = ib * ca + id * cb;
        let m11 = ib * cb + id * cd;
        dinv_dt[0][t] = -(m00 * ia + m01 * ib);
        dinv_dt[1][t] = -(m00 * ib + m01 * id);
        dinv_dt[2][t] = -(m10 * ib + m11 * id);
    }

    SplatDerivs {
        dmu2_dmu,
        dz_dmu,
        dinv_dt,
        dalpha: alpha * (1.0 - alpha),
    }
}

/// Public projection of a map primitive to its image-plane splat.
/// `None` means the primitive was culled (a normal outcome).
pub fn project_splat(
    g: &crate::gaussians::GaussianPrimitive,
    index: usize,
    cam: &Camera,
    settings: &RenderSettings,
) -> Option<Splat2D> {
    let internal = InternalSplat::from_primitive(g);
    let p = project_internal(&internal, index, cam, settings, false)?;
    let (ia, ib, id) = p.splat.inv;
    let det = ia * id - ib * ib;
    let cov2 = Matrix2::new(id / det, -ib / det, -ib / det, ia / det);
    Some(Splat2D {
        mu2: p.splat.mu2,
        cov2,
        z: p.splat.z,
        source: p.splat.source,
    })
}
