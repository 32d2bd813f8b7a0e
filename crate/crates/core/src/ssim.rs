//! Windowed SSIM on single-channel images, with its gradient.
//!
//! Statistics use a separable Gaussian window over all positions where the
//! window fits inside the image ("valid" windows).

use crate::error::{Error, Result};
use crate::image::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Normalized 1D Gaussian of odd length `size`.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable valid correlation of an `h x w` plane with `k x k` weights
/// `kernel ⊗ kernel`.
fn correlate(src: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let k = kernel.len();
    let (ow, oh) = (w + 1 - k, h + 1 - k);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = kernel.iter().zip(&row[x..x + k]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for (i, kv) in kernel.iter().enumerate() {
            let src_row = &tmp[(y + i) * ow..(y + i + 1) * ow];
            let dst = &mut out[y * ow..(y + 1) * ow];
            for (d, s) in dst.iter_mut().zip(src_row) {
                *d += kv * s;
            }
        }
    }
    out
}

/// Adjoint of [`correlate`]: spreads an `oh x ow` gradient back onto `h x w`.
fn correlate_adjoint(grad: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let k = kernel.len();
    let (ow, oh) = (w + 1 - k, h + 1 - k);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..oh {
        for (i, kv) in kernel.iter().enumerate() {
            let g = &grad[y * ow..(y + 1) * ow];
            let dst = &mut tmp[(y + i) * ow..(y + i + 1) * ow];
            for (d, s) in dst.iter_mut().zip(g) {
                *d += kv * s;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..ow {
            let g = tmp[y * ow + x];
            if g == 0.0 {
                continue;
            }
            for (i, kv) in kernel.iter().enumerate() {
                out[y * w + x + i] += kv * g;
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: SSIM_WINDOW,
            sigma: SSIM_SIGMA,
            k1: SSIM_K1,
            k2: SSIM_K2,
            dynamic_range: 1.0,
        }
    }
}

struct Moments {
    mu_a: Vec<f64>,
    mu_b: Vec<f64>,
    saa: Vec<f64>,
    sbb: Vec<f64>,
    sab: Vec<f64>,
}

fn check_inputs(a: &Image, b: &Image, cfg: &SsimConfig) -> Result<()> {
    a.check_same_shape(b, "ssim")?;
    if a.channels != 1 {
        return Err(Error::invalid("ssim expects single-channel images"));
    }
    if cfg.window == 0 || a.width < cfg.window || a.height < cfg.window {
        return Err(Error::invalid(format!(
            "image {}x{} is smaller than the {}x{} ssim window",
            a.width, a.height, cfg.window, cfg.window
        )));
    }
    Ok(())
}

fn moments(a: &Image, b: &Image, kernel: &[f64]) -> Moments {
    let (w, h) = (a.width, a.height);
    let sq = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    Moments {
        mu_a: correlate(&a.data, w, h, kernel),
        mu_b: correlate(&b.data, w, h, kernel),
        saa: correlate(&sq(&a.data, &a.data), w, h, kernel),
        sbb: correlate(&sq(&b.data, &b.data), w, h, kernel),
        sab: correlate(&sq(&a.data, &b.data), w, h, kernel),
    }
}

/// Mean SSIM over valid windows of two single-channel images.
pub fn ssim_gray(a: &Image, b: &Image, cfg: &SsimConfig) -> Result<f64> {
    Ok(ssim_gray_with_grad(a, b, cfg, false)?.0)
}

/// Mean SSIM and, when requested, its gradient with respect to `a`.
pub fn ssim_gray_with_grad(
    a: &Image,
    b: &Image,
    cfg: &SsimConfig,
    want_grad: bool,
) -> Result<(f64, Option<Image>)> {
    check_inputs(a, b, cfg)?;
    let kernel = gaussian_window(cfg.window, cfg.sigma);
    let m = moments(a, b, &kernel);
    let c1 = (cfg.k1 * cfg.dynamic_range).powi(2);
    let c2 = (cfg.k2 * cfg.dynamic_range).powi(2);
    let count = m.mu_a.len();
    let mut total = 0.0;
    let (mut g_mu, mut g_aa, mut g_ab) = if want_grad {
        (vec![0.0; count], vec![0.0; count], vec![0.0; count])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    let inv = 1.0 / count as f64;
    for p in 0..count {
        let (ma, mb) = (m.mu_a[p], m.mu_b[p]);
        let var_a = m.saa[p] - ma * ma;
        let var_b = m.sbb[p] - mb * mb;
        let cov = m.sab[p] - ma * mb;
        let a1 = 2.0 * ma * mb + c1;
        let a2 = 2.0 * cov + c2;
        let b1 = ma * ma + mb * mb + c1;
        let b2 = var_a + var_b + c2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        if want_grad {
            let d_a1 = a2 / (b1 * b2);
            let d_a2 = a1 / (b1 * b2);
            let d_b1 = -s / b1;
            let d_b2 = -s / b2;
            g_mu[p] = inv * (d_a1 * 2.0 * mb - d_a2 * 2.0 * mb + d_b1 * 2.0 * ma - d_b2 * 2.0 * ma);
            g_aa[p] = inv * d_b2;
            g_ab[p] = inv * 2.0 * d_a2;
        }
    }
    let value = total * inv;
    if !want_grad {
        return Ok((value, None));
    }
    let (w, h) = (a.width, a.height);
    let t_mu = correlate_adjoint(&g_mu, w, h, &kernel);
    let t_aa = correlate_adjoint(&g_aa, w, h, &kernel);
    let t_ab = correlate_adjoint(&g_ab, w, h, &kernel);
    let data = (0..w * h)
        .map(|i| t_mu[i] + 2.0 * a.data[i] * t_aa[i] + b.data[i] * t_ab[i])
        .collect();
    Ok((value, Some(Image::from_vec(w, h, 1, data)?)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
        Image::from_vec(w, h, 1, (0..w * h).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn correlate_adjoint_is_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = gaussian_window(5, 1.5);
        let x = random(&mut rng, 9, 7);
        let y = random(&mut rng, 5, 3);
        let lhs: f64 = correlate(&x.data, 9, 7, &k).iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = correlate_adjoint(&y.data, 9, 7, &k)
            .iter()
            .zip(&x.data)
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, 14, 13);
        let b = random(&mut rng, 14, 13);
        let cfg = SsimConfig::default();
        let (_, g) = ssim_gray_with_grad(&a, &b, &cfg, true).unwrap();
        let g = g.unwrap();
        let h = 1e-6;
        for i in (0..a.data.len()).step_by(7) {
            let mut p = a.clone();
            let mut m = a.clone();
            p.data[i] += h;
            m.data[i] -= h;
            let fd = (ssim_gray(&p, &b, &cfg).unwrap() - ssim_gray(&m, &b, &cfg).unwrap()) / (2.0 * h);
            assert!((fd - g.data[i]).abs() <= 1e-6 + 1e-4 * fd.abs(), "{i}: {fd} vs {}", g.data[i]);
        }
    }

    #[test]
    fn too_small_for_window() {
        let a = Image::new(10, 20, 1);
        assert!(ssim_gray(&a, &a, &SsimConfig::default()).is_err());
    }
}
