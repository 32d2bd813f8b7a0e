//! Image, tightness and shape losses with gradients to the renders and raw
//! parameters.
//!
//! Per view: `mse + λ_perc · P(render, target) + λ_α · mean((mask - alpha)²)`,
//! averaged over views. The total adds `λ_tight · tightness` and
//! `λ_β · ‖β‖²`.

mod perceptual;

pub use perceptual::{perceptual_proxy, PerceptualLoss, StructuralProxy, PROXY_SCALES};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{tightness, tightness_backward, GaussianAttributes};
use crate::image::Image;
use crate::raster::ImageBuffer;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_perceptual: f64,
    pub lambda_alpha: f64,
    pub lambda_tight: f64,
    pub lambda_beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_perceptual: 0.01,
            lambda_alpha: 0.1,
            lambda_tight: 0.1,
            lambda_beta: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_perceptual,
            self.lambda_alpha,
            self.lambda_tight,
            self.lambda_beta,
        ];
        if all.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        Ok(())
    }

    /// Only the MSE term.
    pub fn mse_only() -> Self {
        Self {
            lambda_perceptual: 0.0,
            lambda_alpha: 0.0,
            lambda_tight: 0.0,
            lambda_beta: 0.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ViewLoss {
    pub mse: f64,
    pub perceptual: f64,
    pub alpha_mask: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub mse: f64,
    pub perceptual: f64,
    pub alpha_mask: f64,
    pub tight: f64,
    pub beta_reg: f64,
    pub total: f64,
    pub per_view: Vec<ViewLoss>,
}

impl LossReport {
    /// Recomputes `total` from the terms.
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        self.mse
            + w.lambda_perceptual * self.perceptual
            + w.lambda_alpha * self.alpha_mask
            + w.lambda_tight * self.tight
            + w.lambda_beta * self.beta_reg
    }

    /// Names the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("mse", self.mse),
            ("perceptual", self.perceptual),
            ("alpha_mask", self.alpha_mask),
            ("tight", self.tight),
            ("beta_reg", self.beta_reg),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite_term() {
            Some(term) => Err(Error::NonFiniteLoss { term }),
            None => Ok(()),
        }
    }

    pub const CSV_HEADER: &'static str = "step,total,mse,perceptual,alpha_mask,tight,beta_reg";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.total, self.mse, self.perceptual, self.alpha_mask, self.tight, self.beta_reg
        )
    }
}

/// Supervision for one view.
#[derive(Clone, Copy, Debug)]
pub struct ViewTarget<'a> {
    pub image: &'a Image,
    pub mask: &'a Image,
}

/// Image-loss value and gradients with respect to every rendered view.
#[derive(Clone, Debug)]
pub struct ImageLoss {
    pub report: LossReport,
    pub grad_rgb: Vec<Image>,
    pub grad_alpha: Vec<Image>,
}

pub fn image_loss(
    renders: &[ImageBuffer],
    targets: &[ViewTarget<'_>],
    w: &LossWeights,
) -> Result<ImageLoss> {
    image_loss_with(&StructuralProxy, renders, targets, w)
}

/// [`image_loss`] with a caller-supplied perceptual term.
pub fn image_loss_with(
    perceptual: &dyn PerceptualLoss,
    renders: &[ImageBuffer],
    targets: &[ViewTarget<'_>],
    w: &LossWeights,
) -> Result<ImageLoss> {
    w.validate()?;
    if renders.len() != targets.len() {
        return Err(Error::Dimension {
            what: "views",
            expected: targets.len(),
            actual: renders.len(),
        });
    }
    if renders.is_empty() {
        return Err(Error::invalid("image loss needs at least one view"));
    }
    let m = renders.len() as f64;
    let mut report = LossReport::default();
    let mut grad_rgb = Vec::with_capacity(renders.len());
    let mut grad_alpha = Vec::with_capacity(renders.len());
    for (i, (r, t)) in renders.iter().zip(targets).enumerate() {
        r.rgb.check_same_shape(t.image, "render vs target")?;
        if t.mask.width != r.alpha.width || t.mask.height != r.alpha.height || t.mask.channels != 1 {
            return Err(Error::invalid(format!("view {i}: mask does not match the render")));
        }
        if t.mask.data.iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::invalid(format!("view {i}: mask is not binary")));
        }

        let n_rgb = r.rgb.data.len() as f64;
        let mut g_rgb = Image::new(r.rgb.width, r.rgb.height, r.rgb.channels);
        let mut mse = 0.0;
        for ((g, a), b) in g_rgb.data.iter_mut().zip(&r.rgb.data).zip(&t.image.data) {
            let d = a - b;
            mse += d * d;
            *g = 2.0 * d / (n_rgb * m);
        }
        mse /= n_rgb;

        let (perc, perc_grad) = perceptual.value_and_grad(&r.rgb, t.image)?;
        if w.lambda_perceptual != 0.0 {
            let s = w.lambda_perceptual / m;
            for (g, p) in g_rgb.data.iter_mut().zip(&perc_grad.data) {
                *g += s * p;
            }
        }

        let n_px = r.alpha.data.len() as f64;
        let mut g_alpha = Image::new(r.alpha.width, r.alpha.height, 1);
        let mut alpha_mask = 0.0;
        for ((g, a), mk) in g_alpha.data.iter_mut().zip(&r.alpha.data).zip(&t.mask.data) {
            let d = a - mk;
            alpha_mask += d * d;
            *g = w.lambda_alpha * 2.0 * d / (n_px * m);
        }
        alpha_mask /= n_px;

        report.mse += mse / m;
        report.perceptual += perc / m;
        report.alpha_mask += alpha_mask / m;
        report.per_view.push(ViewLoss {
            mse,
            perceptual: perc,
            alpha_mask,
        });
        grad_rgb.push(g_rgb);
        grad_alpha.push(g_alpha);
    }
    report.total = report.weighted_total(w);
    Ok(ImageLoss {
        report,
        grad_rgb,
        grad_alpha,
    })
}

/// Gradients of the regularizers with respect to the raw parameters.
#[derive(Clone, Debug)]
pub struct RegularizerGrads {
    pub offsets: Vec<Vector3<f64>>,
    pub betas: Vec<f64>,
}

/// Adds tightness and the shape regularizer to an image-loss report.
pub fn total_loss(
    mut img: LossReport,
    attrs: &GaussianAttributes,
    betas: &[f64],
    w: &LossWeights,
) -> Result<LossReport> {
    w.validate()?;
    img.tight = tightness(attrs);
    img.beta_reg = betas.iter().map(|b| b * b).sum();
    img.total = img.weighted_total(w);
    Ok(img)
}

pub fn regularizer_grads(attrs: &GaussianAttributes, betas: &[f64], w: &LossWeights) -> RegularizerGrads {
    RegularizerGrads {
        offsets: tightness_backward(attrs, w.lambda_tight),
        betas: betas.iter().map(|b| 2.0 * w.lambda_beta * b).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn buffer(rgb: Image, alpha: Image) -> ImageBuffer {
        ImageBuffer { rgb, alpha }
    }

    #[test]
    fn identical_views_cost_nothing() {
        let img = Image::filled(12, 12, 3, 0.4);
        let mask = Image::filled(12, 12, 1, 1.0);
        let r = vec![buffer(img.clone(), mask.clone())];
        let t = [ViewTarget { image: &img, mask: &mask }];
        let out = image_loss(&r, &t, &LossWeights::default()).unwrap();
        assert_eq!(out.report.mse, 0.0);
        assert_eq!(out.report.perceptual, 0.0);
        assert_eq!(out.report.alpha_mask, 0.0);
        assert_eq!(out.report.total, 0.0);
    }

    #[test]
    fn single_pixel_error() {
        let target = Image::new(2, 2, 1);
        let mut render = target.clone();
        render.data[3] = 0.1;
        let mask = Image::new(2, 2, 1);
        let r = vec![buffer(render, Image::new(2, 2, 1))];
        let t = [ViewTarget { image: &target, mask: &mask }];
        let out = image_loss(&r, &t, &LossWeights::mse_only()).unwrap();
        assert_relative_eq!(out.report.mse, 0.0025, epsilon = 1e-15);
        assert_relative_eq!(out.report.total, 0.0025, epsilon = 1e-15);
    }

    #[test]
    fn empty_alpha_against_full_mask() {
        let img = Image::filled(4, 4, 3, 0.2);
        let mask = Image::filled(4, 4, 1, 1.0);
        let r = vec![buffer(img.clone(), Image::new(4, 4, 1))];
        let t = [ViewTarget { image: &img, mask: &mask }];
        let w = LossWeights {
            lambda_alpha: 0.1,
            ..LossWeights::mse_only()
        };
        let out = image_loss(&r, &t, &w).unwrap();
        assert_eq!(out.report.alpha_mask, 1.0);
        assert_relative_eq!(out.report.total, 0.1, epsilon = 1e-15);
    }

    #[test]
    fn rejects_bad_masks_and_shapes() {
        let img = Image::filled(4, 4, 3, 0.2);
        let soft = Image::filled(4, 4, 1, 0.5);
        let r = vec![buffer(img.clone(), Image::new(4, 4, 1))];
        let t = [ViewTarget { image: &img, mask: &soft }];
        assert!(image_loss(&r, &t, &LossWeights::default()).is_err());
        let small = Image::filled(3, 4, 3, 0.2);
        let mask = Image::new(3, 4, 1);
        let t = [ViewTarget { image: &small, mask: &mask }];
        assert!(image_loss(&r, &t, &LossWeights::default()).is_err());
    }

    #[test]
    fn total_adds_weighted_regularizers() {
        let mut attrs = GaussianAttributes::initial(2, 0.01);
        let zero = total_loss(LossReport::default(), &attrs, &[0.0; 3], &LossWeights::default())
            .unwrap();
        assert_eq!(zero.total, 0.0);
        attrs.offsets[0] = Vector3::new(3.0, 0.0, 0.0);
        attrs.offsets[1] = Vector3::new(0.0, 4.0, 0.0);
        let w = LossWeights {
            lambda_tight: 0.1,
            ..LossWeights::mse_only()
        };
        let r = total_loss(LossReport::default(), &attrs, &[0.0; 3], &w).unwrap();
        assert_relative_eq!(r.tight, 3.5);
        assert_relative_eq!(r.total, 0.35, epsilon = 1e-15);
        let w2 = LossWeights {
            lambda_tight: 0.2,
            ..w
        };
        let base = LossReport {
            mse: 0.5,
            ..Default::default()
        };
        let r1 = total_loss(base.clone(), &attrs, &[1.0, 2.0], &w).unwrap();
        let r2 = total_loss(base, &attrs, &[1.0, 2.0], &w2).unwrap();
        assert_relative_eq!(r2.total - 0.5, 2.0 * (r1.total - 0.5), epsilon = 1e-12);
        assert_eq!(r1.beta_reg, 5.0);
    }

    #[test]
    fn zero_weight_drops_term_exactly() {
        let attrs = {
            let mut a = GaussianAttributes::initial(3, 0.01);
            a.offsets[1] = Vector3::new(0.01, 0.02, -0.03);
            a
        };
        let base = LossReport {
            mse: 0.123,
            perceptual: 0.456,
            alpha_mask: 0.789,
            ..Default::default()
        };
        let w = LossWeights {
            lambda_perceptual: 0.0,
            lambda_beta: 0.3,
            ..Default::default()
        };
        let r = total_loss(base, &attrs, &[0.5, -0.25], &w).unwrap();
        let expected = 0.123 + 0.1 * 0.789 + 0.1 * r.tight + 0.3 * r.beta_reg;
        assert_eq!(r.total, expected);
    }

    #[test]
    fn non_finite_term_is_named() {
        let r = LossReport {
            alpha_mask: f64::NAN,
            ..Default::default()
        };
        assert!(matches!(
            r.check_finite(),
            Err(Error::NonFiniteLoss { term: "alpha_mask" })
        ));
    }
}
