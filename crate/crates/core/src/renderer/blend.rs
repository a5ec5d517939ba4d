//! Tile-parallel front-to-back compositing with analytic adjoints.
//!
//! Tiles own disjoint pixel ranges and are merged in tile order, so
//! repeated runs are bit-identical regardless of thread count. Splat order
//! along a ray is by center depth with ties broken by primitive index; the
//! order depends only on depth, so one sort per tile serves every pixel.

use super::projection::{project_internal, Projected};
use super::{
    InternalMap, PrimitiveGrads, RenderBuffers, RenderSettings, Upstream, FISHER_DIM, G_ALPHA,
    G_COLOR, G_LOGE, G_MU, G_ROT, G_SEM, GRAD_LEN,
};
use crate::geometry::Camera;
use nalgebra::SMatrix;
use rayon::prelude::*;

pub type FisherBlock = SMatrix<f64, FISHER_DIM, FISHER_DIM>;

struct Prepared {
    projected: Vec<Projected>,
    /// Per tile: indices into `projected`, sorted by (z, source).
    tiles: Vec<Vec<u32>>,
    tiles_x: usize,
    tile_size: usize,
}

fn prepare(
    imap: &InternalMap,
    cam: &Camera,
    settings: &RenderSettings,
    with_derivs: bool,
) -> Prepared {
    let ts = settings.tile_size.max(1);
    let tiles_x = cam.width.div_ceil(ts);
    let tiles_y = cam.height.div_ceil(ts);

    let projected: Vec<Projected> = imap
        .splats
        .par_iter()
        .enumerate()
        .filter_map(|(i, s)| project_internal(s, i, cam, settings, with_derivs))
        .collect();

    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for (pi, p) in projected.iter().enumerate() {
        let s = &p.splat;
        let r = s.bin_radius;
        let x0 = (s.mu2.x - r).floor().max(0.0);
        let x1 = (s.mu2.x + r).ceil().min(cam.width as f64 - 1.0);
        let y0 = (s.mu2.y - r).floor().max(0.0);
        let y1 = (s.mu2.y + r).ceil().min(cam.height as f64 - 1.0);
        if x1 < x0 || y1 < y0 {
            continue;
        }
        let (tx0, tx1) = (x0 as usize / ts, x1 as usize / ts);
        let (ty0, ty1) = (y0 as usize / ts, y1 as usize / ts);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                tiles[ty * tiles_x + tx].push(pi as u32);
            }
        }
    }
    for list in &mut tiles {
        list.sort_by(|&a, &b| {
            let (sa, sb) = (&projected[a as usize].splat, &projected[b as usize].splat);
            sa.z
                .partial_cmp(&sb.z)
                .unwrap()
                .then(sa.source.cmp(&sb.source))
        });
    }
    Prepared {
        projected,
        tiles,
        tiles_x,
        tile_size: ts,
    }
}

fn tile_bounds(prep: &Prepared, tile_idx: usize, cam: &Camera) -> (usize, usize, usize, usize) {
    let ts = prep.tile_size;
    let tx = tile_idx % prep.tiles_x;
    let ty = tile_idx / prep.tiles_x;
    let x0 = tx * ts;
    let y0 = ty * ts;
    (x0, (x0 + ts).min(cam.width), y0, (y0 + ts).min(cam.height))
}

/// One blended splat at one pixel.
#[derive(Clone, Copy)]
struct Contrib {
    /// Position in the tile's splat list.
    local: u32,
    alpha_p: f64,
    t_before: f64,
    w: f64,
    dx: f64,
    dy: f64,
    clamped: bool,
}

/// Walk the tile list at one pixel, pushing contributors and returning the
/// final transmittance.
fn collect_contribs(
    prep: &Prepared,
    list: &[u32],
    px: f64,
    py: f64,
    settings: &RenderSettings,
    out: &mut Vec<Contrib>,
) -> f64 {
    out.clear();
    let mut t = 1.0;
    for (local, &pi) in list.iter().enumerate() {
        if t < settings.transmittance_stop {
            break;
        }
        let s = &prep.projected[pi as usize].splat;
        let dx = px - s.mu2.x;
        let dy = py - s.mu2.y;
        let q = s.inv.0 * dx * dx + 2.0 * s.inv.1 * dx * dy + s.inv.2 * dy * dy;
        if q > s.q_max {
            continue;
        }
        let raw = s.alpha * (-0.5 * q).exp();
        let (alpha_p, clamped) = if raw > settings.alpha_clamp {
            (settings.alpha_clamp, true)
        } else {
            (raw, false)
        };
        out.push(Contrib {
            local: local as u32,
            alpha_p,
            t_before: t,
            w: alpha_p * t,
            dx,
            dy,
            clamped,
        });
        t *= 1.0 - alpha_p;
    }
    t
}

struct TileBuffers {
    color: Vec<f64>,
    depth: Vec<f64>,
    sem: Vec<f64>,
    acc: Vec<f64>,
    trans: Vec<f64>,
}

fn run_tile_forward(
    prep: &Prepared,
    tile_idx: usize,
    cam: &Camera,
    settings: &RenderSettings,
) -> TileBuffers {
    let (x0, x1, y0, y1) = tile_bounds(prep, tile_idx, cam);
    let n = (x1 - x0) * (y1 - y0);
    let mut out = TileBuffers {
        color: vec![0.0; 3 * n],
        depth: vec![0.0; n],
        sem: vec![0.0; 3 * n],
        acc: vec![0.0; n],
        trans: vec![1.0; n],
    };
    let list = &prep.tiles[tile_idx];
    let mut contribs = Vec::with_capacity(64);
    for v in y0..y1 {
        for u in x0..x1 {
            let t_final = collect_contribs(prep, list, u as f64, v as f64, settings, &mut contribs);
            let li = (v - y0) * (x1 - x0) + (u - x0);
            let mut acc = 0.0;
            for c in &contribs {
                let s = &prep.projected[list[c.local as usize] as usize].splat;
                out.color[3 * li] += c.w * s.color.x;
                out.color[3 * li + 1] += c.w * s.color.y;
                out.color[3 * li + 2] += c.w * s.color.z;
                out.sem[3 * li] += c.w * s.sem.x;
                out.sem[3 * li + 1] += c.w * s.sem.y;
                out.sem[3 * li + 2] += c.w * s.sem.z;
                out.depth[li] += c.w * s.z;
                acc += c.w;
            }
            out.depth[li] += settings.far_value * (1.0 - acc);
            out.acc[li] = acc;
            out.trans[li] = t_final;
        }
    }
    out
}

fn merge_tiles(
    prep: &Prepared,
    cam: &Camera,
    tiles: Vec<TileBuffers>,
) -> RenderBuffers {
    let (w, h) = (cam.width, cam.height);
    let mut out = RenderBuffers {
        width: w,
        height: h,
        color: vec![0.0; 3 * w * h],
        depth: vec![0.0; w * h],
        sem: vec![0.0; 3 * w * h],
        acc: vec![0.0; w * h],
        trans: vec![1.0; w * h],
    };
    for (tile_idx, tb) in tiles.into_iter().enumerate() {
        let (x0, x1, y0, y1) = tile_bounds(prep, tile_idx, cam);
        for v in y0..y1 {
            for u in x0..x1 {
                let li = (v - y0) * (x1 - x0) + (u - x0);
                let gi = v * w + u;
                out.color[3 * gi..3 * gi + 3].copy_from_slice(&tb.color[3 * li..3 * li + 3]);
                out.sem[3 * gi..3 * gi + 3].copy_from_slice(&tb.sem[3 * li..3 * li + 3]);
                out.depth[gi] = tb.depth[li];
                out.acc[gi] = tb.acc[li];
                out.trans[gi] = tb.trans[li];
            }
        }
    }
    out
}

pub(super) fn forward(imap: &InternalMap, cam: &Camera, settings: &RenderSettings) -> RenderBuffers {
    let prep = prepare(imap, cam, settings, false);
    let tiles: Vec<TileBuffers> = (0..prep.tiles.len())
        .into_par_iter()
        .map(|t| run_tile_forward(&prep, t, cam, settings))
        .collect();
    merge_tiles(&prep, cam, tiles)
}

/// Pixel-stage accumulator per splat:
/// [dmu2.x, dmu2.y, d_ia, d_ib, d_id, dz, dalpha_nat, dc0..2, ds0..2].
const PIX_ACC: usize = 13;

fn run_tile_backward(
    prep: &Prepared,
    tile_idx: usize,
    cam: &Camera,
    settings: &RenderSettings,
    up: &Upstream<'_>,
) -> (TileBuffers, Vec<[f64; PIX_ACC]>) {
    let (x0, x1, y0, y1) = tile_bounds(prep, tile_idx, cam);
    let n = (x1 - x0) * (y1 - y0);
    let mut out = TileBuffers {
        color: vec![0.0; 3 * n],
        depth: vec![0.0; n],
        sem: vec![0.0; 3 * n],
        acc: vec![0.0; n],
        trans: vec![1.0; n],
    };
    let list = &prep.tiles[tile_idx];
    let mut accum = vec![[0.0f64; PIX_ACC]; list.len()];
    let mut contribs = Vec::with_capacity(64);
    let width = cam.width;

    for v in y0..y1 {
        for u in x0..x1 {
            let t_final = collect_contribs(prep, list, u as f64, v as f64, settings, &mut contribs);
            let li = (v - y0) * (x1 - x0) + (u - x0);
            let gi = v * width + u;

            let mut acc = 0.0;
            for c in &contribs {
                let s = &prep.projected[list[c.local as usize] as usize].splat;
                out.color[3 * li] += c.w * s.color.x;
                out.color[3 * li + 1] += c.w * s.color.y;
                out.color[3 * li + 2] += c.w * s.color.z;
                out.sem[3 * li] += c.w * s.sem.x;
                out.sem[3 * li + 1] += c.w * s.sem.y;
                out.sem[3 * li + 2] += c.w * s.sem.z;
                out.depth[li] += c.w * s.z;
                acc += c.w;
            }
            out.depth[li] += settings.far_value * (1.0 - acc);
            out.acc[li] = acc;
            out.trans[li] = t_final;

            let upc = up.color.map(|b| [b[3 * gi], b[3 * gi + 1], b[3 * gi + 2]]);
            let ups = up.sem.map(|b| [b[3 * gi], b[3 * gi + 1], b[3 * gi + 2]]);
            let upd = up.depth.map(|b| b[gi]);
            let upa = up.acc.map(|b| b[gi]);

            // Reverse pass: dL/dw_i directly, plus the transmittance
            // coupling dw_j/da'_i = -w_j / (1 - a'_i) for j > i.
            let mut s_after = 0.0;
            for c in contribs.iter().rev() {
                let sp = &prep.projected[list[c.local as usize] as usize].splat;
                let mut u_i = 0.0;
                if let Some(upc) = upc {
                    u_i += upc[0] * sp.color.x + upc[1] * sp.color.y + upc[2] * sp.color.z;
                }
                if let Some(ups) = ups {
                    u_i += ups[0] * sp.sem.x + ups[1] * sp.sem.y + ups[2] * sp.sem.z;
                }
                if let Some(upd) = upd {
                    u_i += upd * (sp.z - settings.far_value);
                }
                if let Some(upa) = upa {
                    u_i += upa;
                }

                let a = &mut accum[c.local as usize];
                if let Some(upc) = upc {
                    a[7] += upc[0] * c.w;
                    a[8] += upc[1] * c.w;
                    a[9] += upc[2] * c.w;
                }
                if let Some(ups) = ups {
                    a[10] += ups[0] * c.w;
                    a[11] += ups[1] * c.w;
                    a[12] += ups[2] * c.w;
                }
                if let Some(upd) = upd {
                    a[5] += upd * c.w;
                }

                let dl_dalpha_p = u_i * c.t_before - s_after / (1.0 - c.alpha_p);
                s_after += u_i * c.w;
                if c.clamped {
                    continue;
                }
                // a' = alpha * exp(-q/2)
                let dl_dq = dl_dalpha_p * (-0.5 * c.alpha_p);
                a[6] += dl_dalpha_p * (c.alpha_p / sp.alpha);
                let (ia, ib, id) = sp.inv;
                a[0] += dl_dq * -(2.0 * ia * c.dx + 2.0 * ib * c.dy);
                a[1] += dl_dq * -(2.0 * ib * c.dx + 2.0 * id * c.dy);
                a[2] += dl_dq * c.dx * c.dx;
                a[3] += dl_dq * 2.0 * c.dx * c.dy;
                a[4] += dl_dq * c.dy * c.dy;
            }
        }
    }
    (out, accum)
}

pub(super) fn forward_backward(
    imap: &InternalMap,
    cam: &Camera,
    settings: &RenderSettings,
    up: &Upstream<'_>,
) -> (RenderBuffers, PrimitiveGrads) {
    let prep = prepare(imap, cam, settings, true);
    let results: Vec<(TileBuffers, Vec<[f64; PIX_ACC]>)> = (0..prep.tiles.len())
        .into_par_iter()
        .map(|t| run_tile_backward(&prep, t, cam, settings, up))
        .collect();

    // Merge pixel-stage accumulators in tile order, keyed by projected
    // splat, then chain through the per-splat Jacobians.
    let mut pix = vec![[0.0f64; PIX_ACC]; prep.projected.len()];
    let mut tiles_out = Vec::with_capacity(results.len());
    for (tile_idx, (tb, accum)) in results.into_iter().enumerate() {
        for (local, a) in accum.into_iter().enumerate() {
            let pi = prep.tiles[tile_idx][local] as usize;
            for (dst, src) in pix[pi].iter_mut().zip(a.iter()) {
                *dst += src;
            }
        }
        tiles_out.push(tb);
    }
    let buffers = merge_tiles(&prep, cam, tiles_out);

    let mut grads = PrimitiveGrads::zeros(imap.len());
    for (p, a) in prep.projected.iter().zip(pix.iter()) {
        let d = p.derivs.as_ref().expect("derivs requested");
        let g = &mut grads.data[p.splat.source];
        for k in 0..3 {
            g[G_MU + k] += a[0] * d.dmu2_dmu[0][k]
                + a[1] * d.dmu2_dmu[1][k]
                + a[5] * d.dz_dmu[k]
                + a[2] * d.dinv_dt[0][k]
                + a[3] * d.dinv_dt[1][k]
                + a[4] * d.dinv_dt[2][k];
            g[G_LOGE + k] += a[2] * d.dinv_dt[0][3 + k]
                + a[3] * d.dinv_dt[1][3 + k]
                + a[4] * d.dinv_dt[2][3 + k];
            g[G_COLOR + k] += a[7 + k];
            g[G_SEM + k] += a[10 + k];
        }
        for j in 0..4 {
            g[G_ROT + j] += a[2] * d.dinv_dt[0][6 + j]
                + a[3] * d.dinv_dt[1][6 + j]
                + a[4] * d.dinv_dt[2][6 + j];
        }
        g[G_ALPHA] += a[6] * d.dalpha;
    }
    (buffers, grads)
}

fn run_tile_fisher(
    prep: &Prepared,
    tile_idx: usize,
    cam: &Camera,
    settings: &RenderSettings,
) -> Vec<FisherBlock> {
    let (x0, x1, y0, y1) = tile_bounds(prep, tile_idx, cam);
    let list = &prep.tiles[tile_idx];
    let mut blocks = vec![FisherBlock::zeros(); list.len()];
    let mut contribs = Vec::with_capacity(64);
    let mut suffix = Vec::with_capacity(64);

    for v in y0..y1 {
        for u in x0..x1 {
            collect_contribs(prep, list, u as f64, v as f64, settings, &mut contribs);
            if contribs.is_empty() {
                continue;
            }
            // Suffix color-weight sums S_k(i) = sum_{j>i} c_jk w_j.
            suffix.clear();
            suffix.resize(contribs.len(), [0.0f64; 3]);
            let mut run = [0.0f64; 3];
            for (i, c) in contribs.iter().enumerate().rev() {
                suffix[i] = run;
                let s = &prep.projected[list[c.local as usize] as usize].splat;
                run[0] += s.color.x * c.w;
                run[1] += s.color.y * c.w;
                run[2] += s.color.z * c.w;
            }

            for (i, c) in contribs.iter().enumerate() {
                let pj = &prep.projected[list[c.local as usize] as usize];
                let s = &pj.splat;
                let d = pj.derivs.as_ref().expect("derivs requested");

                // d pixel_k / d a'_i
                let b = [
                    s.color.x * c.t_before - suffix[i][0] / (1.0 - c.alpha_p),
                    s.color.y * c.t_before - suffix[i][1] / (1.0 - c.alpha_p),
                    s.color.z * c.t_before - suffix[i][2] / (1.0 - c.alpha_p),
                ];

                // d a'_i / d theta over [mu, log_e, rot, alpha_raw].
                let mut gvec = [0.0f64; 11];
                if !c.clamped {
                    let (ia, ib, id) = s.inv;
                    let dq_dm2 = [
                        -(2.0 * ia * c.dx + 2.0 * ib * c.dy),
                        -(2.0 * ib * c.dx + 2.0 * id * c.dy),
                    ];
                    let dq_dinv = [c.dx * c.dx, 2.0 * c.dx * c.dy, c.dy * c.dy];
                    let da_dq = -0.5 * c.alpha_p;
                    for t in 0..10 {
                        let mut dq_dt = dq_dinv[0] * d.dinv_dt[0][t]
                            + dq_dinv[1] * d.dinv_dt[1][t]
                            + dq_dinv[2] * d.dinv_dt[2][t];
                        if t < 3 {
                            dq_dt += dq_dm2[0] * d.dmu2_dmu[0][t] + dq_dm2[1] * d.dmu2_dmu[1][t];
                        }
                        gvec[t] = da_dq * dq_dt;
                    }
                    gvec[10] = (c.alpha_p / s.alpha) * d.dalpha;
                }

                let block = &mut blocks[c.local as usize];
                let btot = b[0] * b[0] + b[1] * b[1] + b[2] * b[2];
                for r in 0..11 {
                    if gvec[r] == 0.0 {
                        continue;
                    }
                    for col in r..11 {
                        let v = btot * gvec[r] * gvec[col];
                        block[(r, col)] += v;
                        if col != r {
                            block[(col, r)] += v;
                        }
                    }
                }
                for k in 0..3 {
                    let cross = b[k] * c.w;
                    for r in 0..11 {
                        let v = cross * gvec[r];
                        block[(r, 11 + k)] += v;
                        block[(11 + k, r)] += v;
                    }
                    block[(11 + k, 11 + k)] += c.w * c.w;
                }
            }
        }
    }
    blocks
}

/// Per-primitive Fisher blocks of the rendered color image for one view:
/// `F_i = sum_{pixels, channels} J J^T` with `J` the gradient of the pixel
/// channel with respect to the primitive's 14 appearance parameters.
/// Primitives that never contribute keep a zero block.
pub fn fisher_blocks_single_view(
    imap: &InternalMap,
    cam: &Camera,
    settings: &RenderSettings,
) -> Vec<FisherBlock> {
    let prep = prepare(imap, cam, settings, true);
    let tile_blocks: Vec<Vec<FisherBlock>> = (0..prep.tiles.len())
        .into_par_iter()
        .map(|t| run_tile_fisher(&prep, t, cam, settings))
        .collect();

    let mut out = vec![FisherBlock::zeros(); imap.len()];
    for (tile_idx, blocks) in tile_blocks.into_iter().enumerate() {
        for (local, b) in blocks.into_iter().enumerate() {
            let src = prep.tiles[tile_idx][local] as usize;
            out[prep.projected[src].splat.source] += b;
        }
    }
    out
}

pub(super) fn pixel_weights(
    imap: &InternalMap,
    cam: &Camera,
    settings: &RenderSettings,
    u: usize,
    v: usize,
) -> Vec<(usize, f64)> {
    let prep = prepare(imap, cam, settings, false);
    let ts = prep.tile_size;
    let tile_idx = (v / ts) * prep.tiles_x + u / ts;
    let list = &prep.tiles[tile_idx];
    let mut contribs = Vec::new();
    collect_contribs(&prep, list, u as f64, v as f64, settings, &mut contribs);
    contribs
        .iter()
        .map(|c| {
            (
                prep.projected[list[c.local as usize] as usize].splat.source,
                c.w,
            )
        })
        .collect()
}
