//! Finite-difference verification of the rasterizer's analytic gradients.
//!
//! Probes compare one analytic partial derivative (from a one-hot adjoint
//! backward pass) against a central difference of the forward render in
//! the same internal coordinate.

use crate::geometry::Camera;
use crate::renderer::{
    render_internal, render_with_grad, InternalMap, RenderSettings, Upstream, GRAD_LEN,
};
use rand::Rng;

/// Central difference `(f(x+h) - f(x-h)) / 2h`.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, x0: f64, h: f64) -> f64 {
    (f(x0 + h) - f(x0 - h)) / (2.0 * h)
}

/// Output channels a probe can target.
const CHANNELS: usize = 7; // color rgb, depth, sem xyz

#[derive(Debug, Clone, Copy)]
pub struct GradProbe {
    pub primitive: usize,
    pub param: usize,
    pub pixel: (usize, usize),
    pub channel: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradProbe {
    /// Acceptable when within `rel_tol` relatively or `abs_tol` absolutely.
    pub fn ok(&self, rel_tol: f64, abs_tol: f64) -> bool {
        let diff = (self.analytic - self.numeric).abs();
        diff <= abs_tol || diff <= rel_tol * self.analytic.abs().max(self.numeric.abs())
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub probes: Vec<GradProbe>,
    pub rel_tol: f64,
    pub abs_tol: f64,
}

impl GradCheckReport {
    pub fn failures(&self) -> Vec<&GradProbe> {
        self.probes
            .iter()
            .filter(|p| !p.ok(self.rel_tol, self.abs_tol))
            .collect()
    }

    pub fn all_ok(&self) -> bool {
        self.failures().is_empty()
    }
}

fn read_channel(buffers: &crate::renderer::RenderBuffers, pixel: (usize, usize), ch: usize) -> f64 {
    let gi = pixel.1 * buffers.width + pixel.0;
    match ch {
        0..=2 => buffers.color[3 * gi + ch],
        3 => buffers.depth[gi],
        _ => buffers.sem[3 * gi + (ch - 4)],
    }
}

fn perturb(imap: &InternalMap, primitive: usize, param: usize, delta: f64) -> InternalMap {
    let mut m = imap.clone();
    let s = &mut m.splats[primitive];
    match param {
        0..=2 => s.mu[param] += delta,
        3..=5 => s.log_e[param - 3] += delta,
        6..=9 => s.rot[param - 6] += delta,
        10 => s.alpha_raw += delta,
        11..=13 => s.color[param - 11] += delta,
        _ => s.sem[param - 14] += delta,
    }
    m
}

/// Run `n_probes` random (primitive, parameter, pixel, channel) probes with
/// step `h` in internal coordinates.
pub fn render_grad_probes(
    imap: &InternalMap,
    cam: &Camera,
    settings: &RenderSettings,
    n_probes: usize,
    seed: u64,
    h: f64,
    rel_tol: f64,
    abs_tol: f64,
) -> GradCheckReport {
    let mut rng = crate::rng::rng_for(seed, "grad-check");
    let n = imap.len();
    let npix = cam.width * cam.height;
    let mut probes = Vec::with_capacity(n_probes);

    for _ in 0..n_probes {
        let primitive = rng.gen_range(0..n);
        let param = rng.gen_range(0..GRAD_LEN);
        let gi = rng.gen_range(0..npix);
        let pixel = (gi % cam.width, gi / cam.width);
        let channel = rng.gen_range(0..CHANNELS);

        let mut one_hot_color = vec![0.0; 3 * npix];
        let mut one_hot_depth = vec![0.0; npix];
        let mut one_hot_sem = vec![0.0; 3 * npix];
        match channel {
            0..=2 => one_hot_color[3 * gi + channel] = 1.0,
            3 => one_hot_depth[gi] = 1.0,
            _ => one_hot_sem[3 * gi + (channel - 4)] = 1.0,
        }
        let upstream = Upstream {
            color: Some(&one_hot_color),
            depth: Some(&one_hot_depth),
            sem: Some(&one_hot_sem),
            acc: None,
        };
        let (_, grads) = render_with_grad(imap, cam, settings, &upstream);
        let analytic = grads.data[primitive][param];

        let numeric = central_diff(
            |x| {
                let shifted = perturb(imap, primitive, param, x);
                read_channel(&render_internal(&shifted, cam, settings), pixel, channel)
            },
            0.0,
            h,
        );

        probes.push(GradProbe {
            primitive,
            param,
            pixel,
            channel,
            analytic,
            numeric,
        });
    }
    GradCheckReport {
        probes,
        rel_tol,
        abs_tol,
    }
}
