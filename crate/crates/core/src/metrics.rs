//! Image and pose metrics: PSNR, SSIM, root-aligned MPJPE, mask IoU, plus
//! variants restricted to the projected body bounding box.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::body_model::{forward_lbs_unchecked, BodyModel};
use crate::dataio::SceneDataset;
use crate::error::{Error, Result};
use crate::gaussian::ScaffoldConfig;
use crate::image::Image;
use crate::pipeline::{forward, Avatar};
use crate::losses::perceptual_proxy;
use crate::raster::Camera;
use crate::ssim::{ssim_gray, SsimConfig};

/// Reported in place of +∞ when two images are identical.
pub const PSNR_CAP: f64 = 99.0;

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b, "mse")?;
    if a.data.is_empty() {
        return Err(Error::invalid("mse of an empty image"));
    }
    let s: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.data.len() as f64)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

/// Windowed SSIM on the channel-mean grayscale images.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b, "ssim")?;
    ssim_gray(&a.gray(), &b.gray(), &SsimConfig::default())
}

/// Mean joint error in millimetres after moving joint 0 of both sets to the
/// origin. Positions are in metres.
pub fn mpjpe(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Dimension {
            what: "joints",
            expected: gt.len(),
            actual: pred.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::invalid("mpjpe needs at least one joint"));
    }
    let (rp, rg) = (pred[0], gt[0]);
    let sum: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| ((p - rp) - (g - rg)).norm())
        .sum();
    Ok(1000.0 * sum / pred.len() as f64)
}

/// Intersection over union of two binary masks (values ≥ 0.5 count as set).
/// Two empty masks score 1.
pub fn mask_iou(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b, "mask iou")?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.data.iter().zip(&b.data) {
        let (p, q) = (*x >= 0.5, *y >= 0.5);
        inter += (p && q) as usize;
        union += (p || q) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Inclusive pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }

    pub fn crop(&self, img: &Image) -> Image {
        let mut out = Image::new(self.width(), self.height(), img.channels);
        for y in 0..self.height() {
            for x in 0..self.width() {
                for c in 0..img.channels {
                    out.set(x, y, c, img.get(self.x0 + x, self.y0 + y, c));
                }
            }
        }
        out
    }
}

/// Pixel box covering the projection of the axis-aligned 3D bounding box of
/// `points`, clipped to the image. `None` when the box is behind the camera
/// or entirely off-screen.
pub fn projected_bbox(points: &[Vector3<f64>], cam: &Camera) -> Option<PixelBox> {
    let first = points.first()?;
    let (mut lo, mut hi) = (*first, *first);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let rot = cam.rotation();
    let trans = cam.translation();
    let (mut u0, mut v0, mut u1, mut v1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for k in 0..8 {
        let corner = Vector3::new(
            if k & 1 == 0 { lo.x } else { hi.x },
            if k & 2 == 0 { lo.y } else { hi.y },
            if k & 4 == 0 { lo.z } else { hi.z },
        );
        let c = rot * corner + trans;
        if c.z <= cam.near {
            return None;
        }
        let u = cam.fx * c.x / c.z + cam.cx;
        let v = cam.fy * c.y / c.z + cam.cy;
        u0 = u0.min(u);
        v0 = v0.min(v);
        u1 = u1.max(u);
        v1 = v1.max(v);
    }
    let (w, h) = (cam.width as f64, cam.height as f64);
    if u1 < 0.0 || v1 < 0.0 || u0 > w - 1.0 || v0 > h - 1.0 {
        return None;
    }
    Some(PixelBox {
        x0: u0.floor().max(0.0) as usize,
        y0: v0.floor().max(0.0) as usize,
        x1: u1.ceil().min(w - 1.0) as usize,
        y1: v1.ceil().min(h - 1.0) as usize,
    })
}

/// Image metrics for one view. SSIM and the proxy are `None` when the
/// region is smaller than their window.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub psnr: f64,
    pub ssim: Option<f64>,
    pub proxy_perceptual: Option<f64>,
}

pub fn image_metrics(render: &Image, target: &Image) -> Result<ImageMetrics> {
    render.check_same_shape(target, "metrics")?;
    let small = |e: Error| -> Result<Option<f64>> {
        match e {
            Error::Invalid(_) => Ok(None),
            e => Err(e),
        }
    };
    Ok(ImageMetrics {
        psnr: psnr(render, target)?,
        ssim: ssim(render, target).map(Some).or_else(small)?,
        proxy_perceptual: perceptual_proxy(render, target).map(Some).or_else(small)?,
    })
}

/// Full-frame and bounding-box metrics of one view.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub full: ImageMetrics,
    pub bbox: Option<ImageMetrics>,
    pub bbox_rect: Option<PixelBox>,
    pub mask_iou: Option<f64>,
}

/// One frame to evaluate.
pub struct EvalView<'a> {
    pub render: &'a Image,
    pub target: &'a Image,
    pub camera: &'a Camera,
    pub render_alpha: Option<&'a Image>,
    pub target_mask: Option<&'a Image>,
}

pub fn evaluate_view(view: &EvalView<'_>, body_points: &[Vector3<f64>]) -> Result<ViewMetrics> {
    let full = image_metrics(view.render, view.target)?;
    let rect = projected_bbox(body_points, view.camera);
    let bbox = match rect {
        Some(r) => Some(image_metrics(&r.crop(view.render), &r.crop(view.target))?),
        None => None,
    };
    let mask_iou = match (view.render_alpha, view.target_mask) {
        (Some(a), Some(m)) => Some(mask_iou(a, m)?),
        _ => None,
    };
    Ok(ViewMetrics {
        full,
        bbox,
        bbox_rect: rect,
        mask_iou,
    })
}

/// Evaluates frames in parallel; results keep the input order.
pub fn evaluate_views(views: &[EvalView<'_>], body_points: &[Vector3<f64>]) -> Result<Vec<ViewMetrics>> {
    views
        .par_iter()
        .map(|v| evaluate_view(v, body_points))
        .collect()
}

/// Means over views; optional entries average over the views that have them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub psnr: f64,
    pub ssim: Option<f64>,
    pub proxy_perceptual: Option<f64>,
    pub bbox_psnr: Option<f64>,
    pub bbox_ssim: Option<f64>,
    pub bbox_proxy_perceptual: Option<f64>,
    pub mask_iou: Option<f64>,
    pub mpjpe_mm: Option<f64>,
}

fn mean_of(it: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let vals: Vec<f64> = it.flatten().collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

pub fn summarize(views: &[ViewMetrics], mpjpe_mm: Option<f64>) -> MetricsSummary {
    let n = views.len().max(1) as f64;
    MetricsSummary {
        psnr: views.iter().map(|v| v.full.psnr).sum::<f64>() / n,
        ssim: mean_of(views.iter().map(|v| v.full.ssim)),
        proxy_perceptual: mean_of(views.iter().map(|v| v.full.proxy_perceptual)),
        bbox_psnr: mean_of(views.iter().map(|v| v.bbox.as_ref().map(|b| b.psnr))),
        bbox_ssim: mean_of(views.iter().map(|v| v.bbox.as_ref().and_then(|b| b.ssim))),
        bbox_proxy_perceptual: mean_of(
            views.iter().map(|v| v.bbox.as_ref().and_then(|b| b.proxy_perceptual)),
        ),
        mask_iou: mean_of(views.iter().map(|v| v.mask_iou)),
        mpjpe_mm,
    }
}

impl MetricsSummary {
    pub const CSV_HEADER: &'static str =
        "view,PSNR,SSIM,proxy-perceptual,PSNR_bbox,SSIM_bbox,proxy-perceptual_bbox,mask_IoU,MPJPE";

    pub fn csv_row(&self, label: &str) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{label},{:.6},{},{},{},{},{},{},{}",
            self.psnr,
            f(self.ssim),
            f(self.proxy_perceptual),
            f(self.bbox_psnr),
            f(self.bbox_ssim),
            f(self.bbox_proxy_perceptual),
            f(self.mask_iou),
            f(self.mpjpe_mm)
        )
    }
}

/// Per-view metrics of an avatar rendered into every camera of a scene, with
/// MPJPE against the scene's ground truth when it has one.
#[derive(Clone, Debug, Serialize)]
pub struct SceneEvaluation {
    pub views: Vec<ViewMetrics>,
    pub summary: MetricsSummary,
}

impl SceneEvaluation {
    /// One row per view followed by a `mean` row.
    pub fn csv(&self) -> String {
        let mut s = format!("{}\n", MetricsSummary::CSV_HEADER);
        for (i, v) in self.views.iter().enumerate() {
            s.push_str(&summarize(std::slice::from_ref(v), None).csv_row(&i.to_string()));
            s.push('\n');
        }
        s.push_str(&self.summary.csv_row("mean"));
        s.push('\n');
        s
    }
}

pub fn evaluate_avatar(
    model: &BodyModel,
    avatar: &Avatar,
    cfg: &ScaffoldConfig,
    ds: &SceneDataset,
) -> Result<SceneEvaluation> {
    ds.validate()?;
    avatar.validate(model, cfg)?;
    let fwd = forward(model, avatar, cfg, &ds.cameras(), &ds.background)?;
    let frames: Vec<EvalView<'_>> = fwd
        .renders
        .iter()
        .zip(&ds.views)
        .map(|(r, v)| EvalView {
            render: &r.rgb,
            target: &v.image,
            camera: &v.camera,
            render_alpha: Some(&r.alpha),
            target_mask: Some(&v.mask),
        })
        .collect();
    let views = evaluate_views(&frames, &fwd.lbs.vertices)?;
    let mpjpe_mm = match &ds.gt {
        Some(gt) => {
            let gt_joints = forward_lbs_unchecked(model, &gt.avatar.pose, &gt.avatar.betas).joints;
            Some(mpjpe(&fwd.lbs.joints, &gt_joints)?)
        }
        None => None,
    };
    let summary = summarize(&views, mpjpe_mm);
    Ok(SceneEvaluation { views, summary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(w: usize, h: usize, c: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..w * h * c).map(|_| rng.random::<f64>()).collect();
        Image::from_vec(w, h, c, data).unwrap()
    }

    /// Direct per-window SSIM with a freshly built Gaussian window.
    fn reference_ssim(a: &Image, b: &Image) -> f64 {
        let (win, sigma) = (11usize, 1.5f64);
        let half = (win / 2) as f64;
        let mut k = vec![0.0; win * win];
        for y in 0..win {
            for x in 0..win {
                let (dx, dy) = (x as f64 - half, y as f64 - half);
                k[y * win + x] = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            }
        }
        let s: f64 = k.iter().sum();
        k.iter_mut().for_each(|v| *v /= s);
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        let (ga, gb) = (a.gray(), b.gray());
        let mut total = 0.0;
        let mut count = 0;
        for oy in 0..=a.height - win {
            for ox in 0..=a.width - win {
                let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in 0..win {
                    for x in 0..win {
                        let w = k[y * win + x];
                        let p = ga.get(ox + x, oy + y, 0);
                        let q = gb.get(ox + x, oy + y, 0);
                        ma += w * p;
                        mb += w * q;
                        aa += w * p * p;
                        bb += w * q * q;
                        ab += w * p * q;
                    }
                }
                let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn psnr_values() {
        let a = random(8, 8, 3, 1);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let zero = Image::new(4, 4, 1);
        let one = Image::filled(4, 4, 1, 1.0);
        assert_relative_eq!(psnr(&zero, &one).unwrap(), 0.0);
        let b = Image::filled(4, 4, 1, 0.1);
        assert_relative_eq!(psnr(&zero, &b).unwrap(), 20.0, epsilon = 1e-12);
        let c = random(8, 8, 3, 2);
        assert_eq!(psnr(&a, &c).unwrap(), psnr(&c, &a).unwrap());
        assert!(psnr(&a, &zero).is_err());
    }

    #[test]
    fn ssim_matches_reference() {
        let a = random(24, 20, 3, 3);
        assert_relative_eq!(ssim(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
        let mut inv = a.clone();
        inv.data.iter_mut().for_each(|v| *v = 1.0 - *v);
        assert_relative_eq!(ssim(&a, &inv).unwrap(), reference_ssim(&a, &inv), epsilon = 1e-6);
        let b = random(24, 20, 3, 4);
        assert_relative_eq!(ssim(&a, &b).unwrap(), reference_ssim(&a, &b), epsilon = 1e-6);
    }

    #[test]
    fn ssim_of_constants_is_closed_form() {
        let (p, q) = (0.3, 0.7);
        let a = Image::filled(16, 16, 1, p);
        let b = Image::filled(16, 16, 1, q);
        let c1 = 1e-4;
        let expected = (2.0 * p * q + c1) / (p * p + q * q + c1);
        assert_relative_eq!(ssim(&a, &b).unwrap(), expected, epsilon = 1e-9);
        assert_relative_eq!(reference_ssim(&a, &b), expected, epsilon = 1e-9);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Image::new(10, 30, 1);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn mpjpe_values() {
        let gt: Vec<Vector3<f64>> = (0..24)
            .map(|i| Vector3::new(i as f64 * 0.1, (i as f64).sin(), 0.2))
            .collect();
        let shifted: Vec<_> = gt.iter().map(|p| p + Vector3::new(1.0, -2.0, 3.0)).collect();
        assert_relative_eq!(mpjpe(&shifted, &gt).unwrap(), 0.0, epsilon = 1e-9);
        let mut one = gt.clone();
        one[5].x += 0.003;
        assert_relative_eq!(mpjpe(&one, &gt).unwrap(), 0.125, epsilon = 1e-9);
        let r = crate::rotation::rot_z(0.3);
        let rotated: Vec<_> = gt.iter().map(|p| r * p).collect();
        assert!(mpjpe(&rotated, &gt).unwrap() > 1.0);
        assert!(mpjpe(&gt[..3], &gt).is_err());
    }

    #[test]
    fn iou_values() {
        let mut a = Image::new(4, 1, 1);
        let mut b = Image::new(4, 1, 1);
        assert_eq!(mask_iou(&a, &b).unwrap(), 1.0);
        a.data = vec![1.0, 1.0, 0.0, 0.0];
        b.data = vec![0.0, 1.0, 1.0, 0.0];
        assert_relative_eq!(mask_iou(&a, &b).unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn bbox_covers_projection_and_clips() {
        let cam = Camera::look_at(
            Vector3::new(0.0, 0.0, 3.0),
            Vector3::zeros(),
            60.0,
            64,
            48,
        )
        .unwrap();
        let pts = [Vector3::new(-0.1, -0.1, -0.1), Vector3::new(0.1, 0.1, 0.1)];
        let b = projected_bbox(&pts, &cam).unwrap();
        let centre = (b.x0 + b.x1) as f64 / 2.0;
        assert!((centre - cam.cx).abs() <= 1.0);
        assert!(b.width() >= 4 && b.width() < 10);
        let big = [Vector3::new(-10.0, -10.0, 0.0), Vector3::new(10.0, 10.0, 0.0)];
        let b = projected_bbox(&big, &cam).unwrap();
        assert_eq!((b.x0, b.y0, b.x1, b.y1), (0, 0, 63, 47));
        let behind = [Vector3::new(0.0, 0.0, 5.0)];
        assert!(projected_bbox(&behind, &cam).is_none());
    }

    #[test]
    fn batch_evaluation_keeps_order() {
        let cam = Camera::look_at(
            Vector3::new(0.0, 0.0, 3.0),
            Vector3::zeros(),
            60.0,
            32,
            32,
        )
        .unwrap();
        let imgs: Vec<Image> = (0..3).map(|s| random(32, 32, 3, s)).collect();
        let views: Vec<EvalView> = imgs
            .iter()
            .map(|im| EvalView {
                render: im,
                target: &imgs[0],
                camera: &cam,
                render_alpha: None,
                target_mask: None,
            })
            .collect();
        let pts = [Vector3::new(-0.5, -0.5, 0.0), Vector3::new(0.5, 0.5, 0.0)];
        let out = evaluate_views(&views, &pts).unwrap();
        assert_eq!(out[0].full.psnr, PSNR_CAP);
        assert!(out[1].full.psnr < 20.0);
        assert!(out[0].bbox.is_some());
        let s = summarize(&out, Some(1.0));
        assert!(s.csv_row("mean").starts_with("mean,"));
    }
}
