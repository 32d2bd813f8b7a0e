//! Perceptual term: a multi-scale structural dissimilarity standing in for a
//! learned perceptual metric behind the same call contract.

use crate::error::Result;
use crate::image::Image;
use crate::ssim::{ssim_gray_with_grad, SsimConfig, SSIM_WINDOW};

/// A differentiable image dissimilarity `P(render, target)`.
pub trait PerceptualLoss: Send + Sync {
    fn name(&self) -> &str;

    /// Value and gradient with respect to `render`.
    fn value_and_grad(&self, render: &Image, target: &Image) -> Result<(f64, Image)>;

    fn value(&self, render: &Image, target: &Image) -> Result<f64> {
        Ok(self.value_and_grad(render, target)?.0)
    }
}

pub const PROXY_SCALES: usize = 3;
const SOBEL_EPS: f64 = 1e-6;

/// Mean over three dyadic scales of `(1 - SSIM) / 2`, plus the mean absolute
/// difference of Sobel gradient magnitudes at full resolution. Both images
/// are reduced to their channel mean first.
///
/// At coarse scales the SSIM window shrinks to the largest odd size that fits;
/// scales that vanish entirely are skipped.
#[derive(Clone, Copy, Debug, Default)]
pub struct StructuralProxy;

pub fn perceptual_proxy(a: &Image, b: &Image) -> Result<f64> {
    StructuralProxy.value(a, b)
}

fn pool2(img: &Image) -> Image {
    let (w, h) = (img.width / 2, img.height / 2);
    let mut out = Image::new(w, h, 1);
    for y in 0..h {
        for x in 0..w {
            let s = img.get(2 * x, 2 * y, 0)
                + img.get(2 * x + 1, 2 * y, 0)
                + img.get(2 * x, 2 * y + 1, 0)
                + img.get(2 * x + 1, 2 * y + 1, 0);
            out.set(x, y, 0, 0.25 * s);
        }
    }
    out
}

fn pool2_adjoint(grad: &Image, width: usize, height: usize) -> Image {
    let mut out = Image::new(width, height, 1);
    for y in 0..grad.height {
        for x in 0..grad.width {
            let g = 0.25 * grad.get(x, y, 0);
            for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let i = out.index(2 * x + dx, 2 * y + dy, 0);
                out.data[i] += g;
            }
        }
    }
    out
}

fn scale_window(w: usize, h: usize) -> usize {
    let m = SSIM_WINDOW.min(w).min(h);
    if m % 2 == 0 {
        m - 1
    } else {
        m
    }
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Sobel responses over interior pixels, row-major `(w-2) x (h-2)`.
fn sobel(img: &Image) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = (img.width, img.height);
    let mut gx = Vec::with_capacity((w - 2) * (h - 2));
    let mut gy = Vec::with_capacity((w - 2) * (h - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let (mut sx, mut sy) = (0.0, 0.0);
            for (j, (rx, ry)) in SOBEL_X.iter().zip(&SOBEL_Y).enumerate() {
                for i in 0..3 {
                    let v = img.get(x + i - 1, y + j - 1, 0);
                    sx += rx[i] * v;
                    sy += ry[i] * v;
                }
            }
            gx.push(sx);
            gy.push(sy);
        }
    }
    (gx, gy)
}

fn sobel_term(a: &Image, b: &Image) -> (f64, Image) {
    let (w, h) = (a.width, a.height);
    let mut grad = Image::new(w, h, 1);
    if w < 3 || h < 3 {
        return (0.0, grad);
    }
    let (ax, ay) = sobel(a);
    let (bx, by) = sobel(b);
    let n = ax.len() as f64;
    let mut total = 0.0;
    let iw = w - 2;
    for k in 0..ax.len() {
        let ma = (ax[k] * ax[k] + ay[k] * ay[k] + SOBEL_EPS).sqrt();
        let mb = (bx[k] * bx[k] + by[k] * by[k] + SOBEL_EPS).sqrt();
        let diff = ma - mb;
        total += diff.abs();
        let sign = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        if sign == 0.0 {
            continue;
        }
        let d_ma = sign / n;
        let (dgx, dgy) = (d_ma * ax[k] / ma, d_ma * ay[k] / ma);
        let (x, y) = (k % iw + 1, k / iw + 1);
        for (j, (rx, ry)) in SOBEL_X.iter().zip(&SOBEL_Y).enumerate() {
            for i in 0..3 {
                let idx = grad.index(x + i - 1, y + j - 1, 0);
                grad.data[idx] += rx[i] * dgx + ry[i] * dgy;
            }
        }
    }
    (total / n, grad)
}

impl PerceptualLoss for StructuralProxy {
    fn name(&self) -> &str {
        "structural-proxy"
    }

    fn value_and_grad(&self, render: &Image, target: &Image) -> Result<(f64, Image)> {
        render.check_same_shape(target, "perceptual proxy")?;
        let ga = render.gray();
        let gb = target.gray();

        let mut pyr_a = vec![ga.clone()];
        let mut pyr_b = vec![gb.clone()];
        for _ in 1..PROXY_SCALES {
            let (na, nb) = (pool2(pyr_a.last().unwrap()), pool2(pyr_b.last().unwrap()));
            if na.width == 0 || na.height == 0 {
                break;
            }
            pyr_a.push(na);
            pyr_b.push(nb);
        }
        let scales = pyr_a.len() as f64;

        let mut value = 0.0;
        let mut grad_levels = Vec::with_capacity(pyr_a.len());
        for (a, b) in pyr_a.iter().zip(&pyr_b) {
            let cfg = SsimConfig {
                window: scale_window(a.width, a.height),
                ..Default::default()
            };
            let (s, g) = ssim_gray_with_grad(a, b, &cfg, true)?;
            value += (1.0 - s) / (2.0 * scales);
            let mut g = g.expect("gradient requested");
            for v in g.data.iter_mut() {
                *v *= -1.0 / (2.0 * scales);
            }
            grad_levels.push(g);
        }
        // Fold coarse-scale gradients back to full resolution.
        let mut acc = grad_levels.pop().expect("at least one scale");
        while let Some(mut finer) = grad_levels.pop() {
            let up = pool2_adjoint(&acc, finer.width, finer.height);
            for (f, u) in finer.data.iter_mut().zip(&up.data) {
                *f += u;
            }
            acc = finer;
        }

        let (edge, edge_grad) = sobel_term(&ga, &gb);
        value += edge;
        for (a, e) in acc.data.iter_mut().zip(&edge_grad.data) {
            *a += e;
        }

        let c = render.channels;
        let mut grad = Image::new(render.width, render.height, c);
        for p in 0..render.pixels() {
            let g = acc.data[p] / c as f64;
            for k in 0..c {
                grad.data[p * c + k] = g;
            }
        }
        Ok((value, grad))
    }
}
