//! Front-to-back compositing over 16x16 tiles and its adjoint.
//!
//! A pixel's contributor set depends only on the per-pixel weight cutoff, and
//! per-tile lists are sorted by depth with ties broken by Gaussian index, so
//! the image is independent of tiling and of the thread count.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use super::project::{project_one, Projected};
use super::{Camera, ImageBuffer, MIN_TRANSMITTANCE, TILE_SIZE, WEIGHT_CUTOFF};
use crate::error::{check_dim, Result};
use crate::gaussian::{GaussianSet, GaussianSetGrads};
use crate::image::Image;

/// Compact per-Gaussian data read in the inner loop.
#[derive(Clone, Copy)]
struct Splat {
    offset: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
    /// Mahalanobis bound beyond which the weight is surely below the cutoff.
    q_max: f64,
    /// Minimum of the quadratic form along a pixel row, per squared row offset.
    row_coef: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RenderStats {
    pub visible: usize,
    pub tile_entries: usize,
}

struct Prepared {
    projected: Vec<Projected>,
    splats: Vec<Splat>,
    tiles_x: usize,
    tiles_y: usize,
    lists: Vec<Vec<u32>>,
}

fn prepare(set: &GaussianSet, cam: &Camera) -> Result<Prepared> {
    set.validate()?;
    cam.validate()?;
    let rot = cam.rotation();
    let trans = cam.translation();
    let projected: Vec<Projected> = (0..set.len())
        .into_par_iter()
        .map(|i| {
            project_one(
                &set.means[i],
                &set.covariances[i],
                set.opacities[i],
                cam,
                &rot,
                &trans,
            )
        })
        .collect();
    let splats = projected
        .iter()
        .enumerate()
        .map(|(i, p)| Splat {
            offset: [p.offset.x, p.offset.y],
            conic: [p.conic[(0, 0)], p.conic[(0, 1)], p.conic[(1, 1)]],
            opacity: set.opacities[i],
            color: [set.colors[i].x, set.colors[i].y, set.colors[i].z],
            q_max: skip_bound(set.opacities[i]),
            row_coef: row_coef(&p.conic),
        })
        .collect();

    let tiles_x = cam.width.div_ceil(TILE_SIZE);
    let tiles_y = cam.height.div_ceil(TILE_SIZE);
    let mut lists = vec![Vec::new(); tiles_x * tiles_y];
    for (i, p) in projected.iter().enumerate() {
        if !p.visible || p.radius <= 0.0 {
            continue;
        }
        // One pixel of slack so rounding never drops a contributing pixel.
        let r = p.radius + 1.0;
        let x0 = (p.mean2d.x - r).floor().max(0.0);
        let y0 = (p.mean2d.y - r).floor().max(0.0);
        let x1 = (p.mean2d.x + r).ceil().min(cam.width as f64 - 1.0);
        let y1 = (p.mean2d.y + r).ceil().min(cam.height as f64 - 1.0);
        if !(x0 <= x1 && y0 <= y1) {
            continue;
        }
        let (tx0, tx1) = (x0 as usize / TILE_SIZE, x1 as usize / TILE_SIZE);
        let (ty0, ty1) = (y0 as usize / TILE_SIZE, y1 as usize / TILE_SIZE);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                lists[ty * tiles_x + tx].push(i as u32);
            }
        }
    }
    lists.par_iter_mut().for_each(|list| {
        list.sort_by(|&a, &b| {
            projected[a as usize]
                .depth
                .total_cmp(&projected[b as usize].depth)
                .then(a.cmp(&b))
        })
    });
    Ok(Prepared {
        projected,
        splats,
        tiles_x,
        tiles_y,
        lists,
    })
}

/// Quadratic-form value past which `opacity * exp(-q / 2)` is below the
/// cutoff by a margin, so the exact test can be skipped without changing any
/// decision.
fn skip_bound(opacity: f64) -> f64 {
    if opacity < WEIGHT_CUTOFF {
        return -1.0;
    }
    let q = 2.0 * (opacity / WEIGHT_CUTOFF).ln();
    q * (1.0 + 1e-9) + 1e-9
}

fn row_coef(conic: &Matrix2<f64>) -> f64 {
    let a = conic[(0, 0)];
    if a <= 0.0 {
        return 0.0;
    }
    ((a * conic[(1, 1)] - conic[(0, 1)] * conic[(0, 1)]) / a).max(0.0)
}

/// Splats of a tile that can reach the given pixel row, with their slot in
/// the tile list. Excluded splats fail the weight test at every pixel of
/// the row, so traversal over this subset makes the same decisions.
fn row_splats(local: &[Splat], rel_y: f64) -> Vec<(usize, Splat)> {
    local
        .iter()
        .enumerate()
        .filter(|(_, s)| {
            let dy = rel_y - s.offset[1];
            dy * dy * s.row_coef <= s.q_max * (1.0 + 1e-6) + 1e-9
        })
        .map(|(i, s)| (i, *s))
        .collect()
}

/// One accepted contribution along a pixel's traversal.
#[derive(Clone, Copy)]
struct Hit {
    slot: usize,
    weight: f64,
    falloff: f64,
    transmittance: f64,
    d: [f64; 2],
}

/// Walks a pixel front to back over a tile's splats in depth order. Returns
/// colour (before background) and the final transmittance.
#[inline]
fn traverse(rel: [f64; 2], splats: &[(usize, Splat)], mut hits: Option<&mut Vec<Hit>>) -> ([f64; 3], f64) {
    let mut t = 1.0;
    let mut rgb = [0.0; 3];
    for &(slot, ref s) in splats {
        let dx = rel[0] - s.offset[0];
        let dy = rel[1] - s.offset[1];
        let q = s.conic[0] * dx * dx + 2.0 * s.conic[1] * dx * dy + s.conic[2] * dy * dy;
        if q > s.q_max {
            continue;
        }
        let falloff = (-0.5 * q).exp();
        let w = s.opacity * falloff;
        if w < WEIGHT_CUTOFF {
            continue;
        }
        let tw = t * w;
        rgb[0] += tw * s.color[0];
        rgb[1] += tw * s.color[1];
        rgb[2] += tw * s.color[2];
        if let Some(h) = hits.as_deref_mut() {
            h.push(Hit {
                slot,
                weight: w,
                falloff,
                transmittance: t,
                d: [dx, dy],
            });
        }
        t *= 1.0 - w;
        if t < MIN_TRANSMITTANCE {
            break;
        }
    }
    (rgb, t)
}

fn tile_splats(prep: &Prepared, tile: usize) -> Vec<Splat> {
    prep.lists[tile].iter().map(|&i| prep.splats[i as usize]).collect()
}

fn tile_bounds(tile: usize, prep: &Prepared, cam: &Camera) -> (usize, usize, usize, usize) {
    let tx = tile % prep.tiles_x;
    let ty = tile / prep.tiles_x;
    let x0 = tx * TILE_SIZE;
    let y0 = ty * TILE_SIZE;
    (
        x0,
        y0,
        (x0 + TILE_SIZE).min(cam.width),
        (y0 + TILE_SIZE).min(cam.height),
    )
}

/// Renders colour and opacity over a constant background.
pub fn render(set: &GaussianSet, cam: &Camera, background: &Vector3<f64>) -> Result<ImageBuffer> {
    Ok(render_with_stats(set, cam, background)?.0)
}

pub fn render_with_stats(
    set: &GaussianSet,
    cam: &Camera,
    background: &Vector3<f64>,
) -> Result<(ImageBuffer, RenderStats)> {
    let prep = prepare(set, cam)?;
    let tiles: Vec<Vec<(usize, [f64; 3], f64)>> = (0..prep.tiles_x * prep.tiles_y)
        .into_par_iter()
        .map(|tile| {
            let (x0, y0, x1, y1) = tile_bounds(tile, &prep, cam);
            let local = tile_splats(&prep, tile);
            let mut out = Vec::with_capacity((x1 - x0) * (y1 - y0));
            for y in y0..y1 {
                let row = row_splats(&local, y as f64 - cam.cy);
                for x in x0..x1 {
                    let rel = [x as f64 - cam.cx, y as f64 - cam.cy];
                    let (rgb, t) = traverse(rel, &row, None);
                    out.push((y * cam.width + x, rgb, t));
                }
            }
            out
        })
        .collect();

    let mut img = ImageBuffer::new(cam.width, cam.height);
    for tile in tiles {
        for (p, rgb, t) in tile {
            for c in 0..3 {
                img.rgb.data[p * 3 + c] = rgb[c] + t * background[c];
            }
            img.alpha.data[p] = 1.0 - t;
        }
    }
    let stats = RenderStats {
        visible: prep.projected.iter().filter(|p| p.visible).count(),
        tile_entries: prep.lists.iter().map(Vec::len).sum(),
    };
    Ok((img, stats))
}

#[derive(Clone, Copy, Default)]
struct ScreenGrad {
    offset: [f64; 2],
    /// Gradient w.r.t. conic entries a, b, c of `a dx² + 2 b dx dy + c dy²`.
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
}

/// Adjoint of [`render`]: given gradients on the output colour and opacity,
/// returns gradients on every Gaussian. Culled Gaussians get zeros.
pub fn render_backward(
    set: &GaussianSet,
    cam: &Camera,
    background: &Vector3<f64>,
    grad_rgb: &Image,
    grad_alpha: &Image,
) -> Result<GaussianSetGrads> {
    check_dim("rgb gradient width", cam.width, grad_rgb.width)?;
    check_dim("rgb gradient height", cam.height, grad_rgb.height)?;
    check_dim("rgb gradient channels", 3, grad_rgb.channels)?;
    check_dim("alpha gradient width", cam.width, grad_alpha.width)?;
    check_dim("alpha gradient height", cam.height, grad_alpha.height)?;
    check_dim("alpha gradient channels", 1, grad_alpha.channels)?;
    let prep = prepare(set, cam)?;
    let bg = [background.x, background.y, background.z];

    let per_tile: Vec<Vec<ScreenGrad>> = (0..prep.tiles_x * prep.tiles_y)
        .into_par_iter()
        .map(|tile| {
            let (x0, y0, x1, y1) = tile_bounds(tile, &prep, cam);
            let list = &prep.lists[tile];
            let mut acc = vec![ScreenGrad::default(); list.len()];
            if list.is_empty() {
                return acc;
            }
            let local = tile_splats(&prep, tile);
            let mut hits = Vec::new();
            for y in y0..y1 {
                let row = row_splats(&local, y as f64 - cam.cy);
                for x in x0..x1 {
                    let p = y * cam.width + x;
                    let g = [
                        grad_rgb.data[p * 3],
                        grad_rgb.data[p * 3 + 1],
                        grad_rgb.data[p * 3 + 2],
                    ];
                    let ga = grad_alpha.data[p];
                    if g == [0.0; 3] && ga == 0.0 {
                        continue;
                    }
                    hits.clear();
                    let rel = [x as f64 - cam.cx, y as f64 - cam.cy];
                    traverse(rel, &row, Some(&mut hits));

                    // dL/dT after the last hit: background term and alpha = 1 - T.
                    let mut d_t_next = g[0] * bg[0] + g[1] * bg[1] + g[2] * bg[2] - ga;
                    for hit in hits.iter().rev() {
                        let s = &local[hit.slot];
                        let gc = g[0] * s.color[0] + g[1] * s.color[1] + g[2] * s.color[2];
                        let tw = hit.transmittance * hit.weight;
                        let a = &mut acc[hit.slot];
                        a.color[0] += g[0] * tw;
                        a.color[1] += g[1] * tw;
                        a.color[2] += g[2] * tw;
                        let d_w = hit.transmittance * (gc - d_t_next);
                        d_t_next = hit.weight * gc + (1.0 - hit.weight) * d_t_next;

                        a.opacity += d_w * hit.falloff;
                        let d_q = -0.5 * hit.weight * d_w;
                        let [dx, dy] = hit.d;
                        a.conic[0] += d_q * dx * dx;
                        a.conic[1] += d_q * 2.0 * dx * dy;
                        a.conic[2] += d_q * dy * dy;
                        // d = rel - offset
                        a.offset[0] -= d_q * 2.0 * (s.conic[0] * dx + s.conic[1] * dy);
                        a.offset[1] -= d_q * 2.0 * (s.conic[1] * dx + s.conic[2] * dy);
                    }
                }
            }
            acc
        })
        .collect();

    // Deterministic reduction in tile order.
    let n = set.len();
    let mut screen = vec![ScreenGrad::default(); n];
    for (tile, acc) in per_tile.iter().enumerate() {
        for (slot, g) in acc.iter().enumerate() {
            let s = &mut screen[prep.lists[tile][slot] as usize];
            for k in 0..2 {
                s.offset[k] += g.offset[k];
            }
            for k in 0..3 {
                s.conic[k] += g.conic[k];
                s.color[k] += g.color[k];
            }
            s.opacity += g.opacity;
        }
    }

    let rot: Matrix3<f64> = cam.rotation();
    let per_gaussian: Vec<(Vector3<f64>, Matrix3<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let p = &prep.projected[i];
            if !p.visible {
                return (Vector3::zeros(), Matrix3::zeros());
            }
            let s = &screen[i];
            let d_offset = Vector2::new(s.offset[0], s.offset[1]);
            let half = 0.5 * s.conic[1];
            let d_conic = Matrix2::new(s.conic[0], half, half, s.conic[2]);
            super::project_backward(p, cam, &rot, &d_offset, &d_conic)
        })
        .collect();

    let mut grads = GaussianSetGrads::zeros(n);
    for (i, (dm, dc)) in per_gaussian.into_iter().enumerate() {
        grads.means[i] = dm;
        grads.covariances[i] = dc;
        grads.opacities[i] = screen[i].opacity;
        grads.colors[i] = Vector3::from(screen[i].color);
    }
    Ok(grads)
}
