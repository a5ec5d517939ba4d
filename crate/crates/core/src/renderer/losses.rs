//! Rendering losses: L1 + SSIM on color, L1 on depth (valid pixels only)
//! and semantics, combined as `1.0 rgb + 0.5 depth + 0.5 sem`.
//!
//! SSIM follows the reference formulation: 11x11 Gaussian window with
//! sigma 1.5, C1 = 0.01^2 and C2 = 0.03^2 on the [0,1] range, evaluated
//! over valid windows only (no padding). Images smaller than the window
//! have no valid windows and score an SSIM term of zero.

use super::RenderBuffers;
use crate::error::{CoreError, Result};

pub const WEIGHT_RGB: f64 = 1.0;
pub const WEIGHT_DEPTH: f64 = 0.5;
pub const WEIGHT_SEM: f64 = 0.5;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub rgb: f64,
    pub depth: f64,
    pub sem: f64,
    pub total: f64,
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, t) in taps.iter_mut().enumerate() {
        *t = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *t;
    }
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Separable valid convolution of a single-channel image with the window.
fn conv_valid(img: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let k = SSIM_WINDOW;
    let vw = w + 1 - k;
    let vh = h + 1 - k;
    let mut rows = vec![0.0; vw * h];
    for y in 0..h {
        for x in 0..vw {
            let mut s = 0.0;
            for (i, t) in taps.iter().enumerate() {
                s += t * img[y * w + x + i];
            }
            rows[y * vw + x] = s;
        }
    }
    let mut out = vec![0.0; vw * vh];
    for y in 0..vh {
        for x in 0..vw {
            let mut s = 0.0;
            for (i, t) in taps.iter().enumerate() {
                s += t * rows[(y + i) * vw + x];
            }
            out[y * vw + x] = s;
        }
    }
    out
}

/// Adjoint of `conv_valid`: scatter a valid-region map back to image size.
fn conv_valid_adjoint(grad: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let k = SSIM_WINDOW;
    let vw = w + 1 - k;
    let vh = h + 1 - k;
    let mut cols = vec![0.0; vw * h];
    for y in 0..vh {
        for x in 0..vw {
            let g = grad[y * vw + x];
            if g == 0.0 {
                continue;
            }
            for (i, t) in taps.iter().enumerate() {
                cols[(y + i) * vw + x] += t * g;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..vw {
            let g = cols[y * vw + x];
            if g == 0.0 {
                continue;
            }
            for (i, t) in taps.iter().enumerate() {
                out[y * w + x + i] += t * g;
            }
        }
    }
    out
}

struct SsimMaps {
    mean: f64,
    /// Per-valid-pixel coefficient maps for the gradient:
    /// dS_p/dx_q = w(p-q) * (c1(p) + y_q c2(p) + x_q c3(p)).
    c1: Vec<f64>,
    c2: Vec<f64>,
    c3: Vec<f64>,
    n_valid: usize,
}

fn ssim_channel(x: &[f64], y: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Option<SsimMaps> {
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return None;
    }
    let mu_x = conv_valid(x, w, h, taps);
    let mu_y = conv_valid(y, w, h, taps);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y.iter()).map(|(a, b)| a * b).collect();
    let m_xx = conv_valid(&xx, w, h, taps);
    let m_yy = conv_valid(&yy, w, h, taps);
    let m_xy = conv_valid(&xy, w, h, taps);

    let n = mu_x.len();
    let mut sum = 0.0;
    let mut c1 = vec![0.0; n];
    let mut c2 = vec![0.0; n];
    let mut c3 = vec![0.0; n];
    for p in 0..n {
        let (mx, my) = (mu_x[p], mu_y[p]);
        let var_x = m_xx[p] - mx * mx;
        let var_y = m_yy[p] - my * my;
        let cov = m_xy[p] - mx * my;
        let a1 = 2.0 * mx * my + SSIM_C1;
        let a2 = 2.0 * cov + SSIM_C2;
        let b1 = mx * mx + my * my + SSIM_C1;
        let b2 = var_x + var_y + SSIM_C2;
        let s = (a1 * a2) / (b1 * b2);
        sum += s;
        let inv_bb = 1.0 / (b1 * b2);
        c2[p] = 2.0 * a1 * inv_bb;
        c3[p] = -2.0 * s / b2;
        c1[p] = 2.0 * my * a2 * inv_bb - my * c2[p] - 2.0 * mx * s / b1 - mx * c3[p];
    }
    Some(SsimMaps {
        mean: sum / n as f64,
        c1,
        c2,
        c3,
        n_valid: n,
    })
}

/// Mean SSIM between two single-channel images (valid windows).
/// Returns 1.0 when the image is smaller than the window.
pub fn ssim(x: &[f64], y: &[f64], w: usize, h: usize) -> f64 {
    let taps = gaussian_taps();
    ssim_channel(x, y, w, h, &taps).map_or(1.0, |m| m.mean)
}

fn channel(buf: &[f64], k: usize) -> Vec<f64> {
    buf.iter().skip(k).step_by(3).copied().collect()
}

fn check_dims(buffers: &RenderBuffers, gt_rgb: &[f64], gt_depth: &[f64], gt_sem: &[f64]) -> Result<()> {
    let n = buffers.width * buffers.height;
    if gt_rgb.len() != 3 * n || gt_depth.len() != n || gt_sem.len() != 3 * n {
        return Err(CoreError::RejectedInput(format!(
            "ground truth does not match {}x{} buffers",
            buffers.width, buffers.height
        )));
    }
    Ok(())
}

/// Rendering losses against ground truth. Depth pixels with non-positive
/// ground truth are skipped.
pub fn losses(
    buffers: &RenderBuffers,
    gt_rgb: &[f64],
    gt_depth: &[f64],
    gt_sem: &[f64],
) -> Result<LossValues> {
    let (v, _) = losses_impl(buffers, gt_rgb, gt_depth, gt_sem, false)?;
    Ok(v)
}

/// Per-pixel adjoints of the total loss with respect to the rendered
/// buffers, for feeding back through the rasterizer.
pub struct LossGrads {
    pub color: Vec<f64>,
    pub depth: Vec<f64>,
    pub sem: Vec<f64>,
}

pub fn losses_with_grad(
    buffers: &RenderBuffers,
    gt_rgb: &[f64],
    gt_depth: &[f64],
    gt_sem: &[f64],
) -> Result<(LossValues, LossGrads)> {
    let (v, g) = losses_impl(buffers, gt_rgb, gt_depth, gt_sem, true)?;
    Ok((v, g.expect("grads requested")))
}

fn losses_impl(
    buffers: &RenderBuffers,
    gt_rgb: &[f64],
    gt_depth: &[f64],
    gt_sem: &[f64],
    with_grad: bool,
) -> Result<(LossValues, Option<LossGrads>)> {
    check_dims(buffers, gt_rgb, gt_depth, gt_sem)?;
    let (w, h) = (buffers.width, buffers.height);
    let n = w * h;
    let taps = gaussian_taps();

    let mut grads = with_grad.then(|| LossGrads {
        color: vec![0.0; 3 * n],
        depth: vec![0.0; n],
        sem: vec![0.0; 3 * n],
    });

    // L1 color.
    let mut l1_rgb = 0.0;
    for i in 0..3 * n {
        let d = buffers.color[i] - gt_rgb[i];
        l1_rgb += d.abs();
        if let Some(g) = grads.as_mut() {
            g.color[i] = WEIGHT_RGB * d.signum() / (3 * n) as f64;
        }
    }
    l1_rgb /= (3 * n) as f64;

    // SSIM over the three channels.
    let mut ssim_sum = 0.0;
    let mut have_windows = false;
    for k in 0..3 {
        let xc = channel(&buffers.color, k);
        let yc = channel(gt_rgb, k);
        if let Some(maps) = ssim_channel(&xc, &yc, w, h, &taps) {
            have_windows = true;
            ssim_sum += maps.mean;
            if let Some(g) = grads.as_mut() {
                // d mean-SSIM / dx via three window correlations.
                let t1 = conv_valid_adjoint(&maps.c1, w, h, &taps);
                let t2 = conv_valid_adjoint(&maps.c2, w, h, &taps);
                let t3 = conv_valid_adjoint(&maps.c3, w, h, &taps);
                let scale = WEIGHT_RGB * -1.0 / (3.0 * maps.n_valid as f64);
                for q in 0..n {
                    let ds = t1[q] + yc[q] * t2[q] + xc[q] * t3[q];
                    g.color[3 * q + k] += scale * ds;
                }
            }
        }
    }
    let l_ssim = if have_windows { 1.0 - ssim_sum / 3.0 } else { 0.0 };
    let l_rgb = l1_rgb + l_ssim;

    // L1 depth over valid pixels.
    let n_valid = gt_depth.iter().filter(|d| **d > 0.0).count();
    let mut l_depth = 0.0;
    if n_valid > 0 {
        for i in 0..n {
            if gt_depth[i] > 0.0 {
                let d = buffers.depth[i] - gt_depth[i];
                l_depth += d.abs();
                if let Some(g) = grads.as_mut() {
                    g.depth[i] = WEIGHT_DEPTH * d.signum() / n_valid as f64;
                }
            }
        }
        l_depth /= n_valid as f64;
    }

    // L1 semantics.
    let mut l_sem = 0.0;
    for i in 0..3 * n {
        let d = buffers.sem[i] - gt_sem[i];
        l_sem += d.abs();
        if let Some(g) = grads.as_mut() {
            g.sem[i] = WEIGHT_SEM * d.signum() / (3 * n) as f64;
        }
    }
    l_sem /= (3 * n) as f64;

    let total = WEIGHT_RGB * l_rgb + WEIGHT_DEPTH * l_depth + WEIGHT_SEM * l_sem;
    Ok((
        LossValues {
            rgb: l_rgb,
            depth: l_depth,
            sem: l_sem,
            total,
        },
        grads,
    ))
}
