//! Differentiable tile-based splat rasterizer.
//!
//! Primitives are projected to the image plane and alpha-blended
//! front-to-back per pixel: the color at a pixel is
//! `sum_i c_i a'_i prod_{j<i} (1 - a'_j)` with
//! `a'_i = alpha_i exp(-0.5 (x - mu'_i)^T inv(Sigma'_i) (x - mu'_i))`,
//! and depth/semantics blend the same weights over `z_i` / `s_i`.
//! Blending runs in internal coordinates (log-scale, pre-sigmoid opacity,
//! raw quaternion) so gradients are reported in the same parameterization
//! the optimizers step in.
//!
//! Pixels sample at integer coordinates. Background contributes color 0,
//! depth `far_value`, semantics 0 with the leftover transmittance.

mod blend;
pub mod losses;
pub mod projection;

pub use blend::fisher_blocks_single_view;
pub use losses::{losses, losses_with_grad, ssim, LossValues};
pub use projection::{alpha_at, project_splat, rotation_and_grads, Splat2D};

use crate::gaussians::{GaussianMap, GaussianPrimitive};
use crate::geometry::Camera;
use nalgebra::{Vector3, Vector4};

/// Fisher blocks cover the appearance-relevant parameters:
/// mu (3), log-scale (3), quaternion (4), pre-sigmoid opacity (1), color (3).
pub const FISHER_DIM: usize = 14;

/// Gradient record layout, internal coordinates.
pub const G_MU: usize = 0;
pub const G_LOGE: usize = 3;
pub const G_ROT: usize = 6;
pub const G_ALPHA: usize = 10;
pub const G_COLOR: usize = 11;
pub const G_SEM: usize = 14;
pub const GRAD_LEN: usize = 17;

/// Numerical knobs of the rasterizer. `alpha_cutoff` bounds the smallest
/// per-pixel contribution that is still blended; the default matches the
/// usual 1/255 splatting practice, while [`RenderSettings::precise`]
/// lowers it for gradient verification.
#[derive(Debug, Clone, Copy)]
pub struct RenderSettings {
    /// Covariance floor added to the 2D diagonal, px^2.
    pub eps2d: f64,
    /// Background depth, meters.
    pub far_value: f64,
    /// Upper clamp on a single splat's per-pixel opacity.
    pub alpha_clamp: f64,
    /// Front-to-back blending stops below this transmittance.
    pub transmittance_stop: f64,
    /// Contributions below this opacity are skipped.
    pub alpha_cutoff: f64,
    pub tile_size: usize,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            eps2d: 0.3,
            far_value: 10.0,
            alpha_clamp: 0.999,
            transmittance_stop: 1e-4,
            alpha_cutoff: 1.0 / 255.0,
            tile_size: 16,
        }
    }
}

impl RenderSettings {
    /// Settings for gradient verification: the contribution cutoff is
    /// pushed low enough that skipping falls below finite-difference
    /// resolution.
    pub fn precise() -> Self {
        RenderSettings {
            alpha_cutoff: 1e-12,
            ..Default::default()
        }
    }
}

/// One primitive in unconstrained internal coordinates.
#[derive(Debug, Clone, Copy)]
pub struct InternalSplat {
    pub mu: Vector3<f64>,
    pub log_e: Vector3<f64>,
    /// Raw quaternion (w, x, y, z); normalized inside the forward pass.
    pub rot: Vector4<f64>,
    /// Pre-sigmoid opacity.
    pub alpha_raw: f64,
    pub color: Vector3<f64>,
    pub sem: Vector3<f64>,
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl InternalSplat {
    pub fn from_primitive(g: &GaussianPrimitive) -> Self {
        InternalSplat {
            mu: g.mu_f64(),
            log_e: g.e_f64().map(|v| v.max(1e-12).ln()),
            rot: g.r_f64(),
            alpha_raw: logit(f64::from(g.alpha)),
            color: Vector3::new(g.c[0].into(), g.c[1].into(), g.c[2].into()),
            sem: Vector3::new(g.s[0].into(), g.s[1].into(), g.s[2].into()),
        }
    }

    /// Natural-unit primitive; uncertainty fields carried over from `keep`.
    pub fn to_primitive(&self, keep: &GaussianPrimitive) -> GaussianPrimitive {
        let mut r = self.rot;
        let n = r.norm();
        r = if n > 0.0 {
            r / n
        } else {
            Vector4::new(1.0, 0.0, 0.0, 0.0)
        };
        GaussianPrimitive {
            mu: [self.mu.x as f32, self.mu.y as f32, self.mu.z as f32],
            e: [
                self.log_e.x.exp() as f32,
                self.log_e.y.exp() as f32,
                self.log_e.z.exp() as f32,
            ],
            r: [r[0] as f32, r[1] as f32, r[2] as f32, r[3] as f32],
            alpha: sigmoid(self.alpha_raw) as f32,
            c: [
                self.color.x.clamp(0.0, 1.0) as f32,
                self.color.y.clamp(0.0, 1.0) as f32,
                self.color.z.clamp(0.0, 1.0) as f32,
            ],
            s: [self.sem.x as f32, self.sem.y as f32, self.sem.z as f32],
            ug: keep.ug,
            us: keep.us,
            ua: keep.ua,
        }
    }
}

/// All primitives of a map in internal coordinates.
#[derive(Debug, Clone, Default)]
pub struct InternalMap {
    pub splats: Vec<InternalSplat>,
}

impl InternalMap {
    pub fn from_map(map: &GaussianMap) -> Self {
        InternalMap {
            splats: map
                .primitives
                .iter()
                .map(InternalSplat::from_primitive)
                .collect(),
        }
    }

    pub fn to_map(&self, reference: &GaussianMap) -> GaussianMap {
        GaussianMap {
            primitives: self
                .splats
                .iter()
                .zip(reference.primitives.iter())
                .map(|(s, keep)| s.to_primitive(keep))
                .collect(),
            source_frames: reference.source_frames,
        }
    }

    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }
}

/// Rendered outputs, row-major. `color`/`sem` are HxWx3, `depth`/`acc`/
/// `trans` HxW. `acc` is the summed blend weight, `trans` the leftover
/// transmittance.
#[derive(Debug, Clone)]
pub struct RenderBuffers {
    pub width: usize,
    pub height: usize,
    pub color: Vec<f64>,
    pub depth: Vec<f64>,
    pub sem: Vec<f64>,
    pub acc: Vec<f64>,
    pub trans: Vec<f64>,
}

/// Per-pixel adjoints flowing back into the rasterizer. Any buffer may be
/// absent.
#[derive(Debug, Clone, Copy, Default)]
pub struct Upstream<'a> {
    pub color: Option<&'a [f64]>,
    pub depth: Option<&'a [f64]>,
    pub sem: Option<&'a [f64]>,
    pub acc: Option<&'a [f64]>,
}

/// Accumulated gradients per primitive, internal coordinates, laid out as
/// [mu 3, log_e 3, rot 4, alpha_raw 1, color 3, sem 3].
#[derive(Debug, Clone)]
pub struct PrimitiveGrads {
    pub data: Vec<[f64; GRAD_LEN]>,
}

impl PrimitiveGrads {
    pub fn zeros(n: usize) -> Self {
        PrimitiveGrads {
            data: vec![[0.0; GRAD_LEN]; n],
        }
    }
}

/// Render a map in natural units.
pub fn render(map: &GaussianMap, cam: &Camera, settings: &RenderSettings) -> RenderBuffers {
    render_internal(&InternalMap::from_map(map), cam, settings)
}

pub fn render_internal(imap: &InternalMap, cam: &Camera, settings: &RenderSettings) -> RenderBuffers {
    blend::forward(imap, cam, settings)
}

/// Render and accumulate dL/d(params) for the upstream per-pixel adjoints.
pub fn render_with_grad(
    imap: &InternalMap,
    cam: &Camera,
    settings: &RenderSettings,
    upstream: &Upstream<'_>,
) -> (RenderBuffers, PrimitiveGrads) {
    blend::forward_backward(imap, cam, settings, upstream)
}

/// Blend weights `(primitive index, w)` of every contributor at one pixel,
/// front to back. Oracle hook for compositing tests.
pub fn pixel_weights(
    imap: &InternalMap,
    cam: &Camera,
    settings: &RenderSettings,
    u: usize,
    v: usize,
) -> Vec<(usize, f64)> {
    blend::pixel_weights(imap, cam, settings, u, v)
}
