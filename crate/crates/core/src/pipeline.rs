//! Body parameters to rendered views and back: skinning, scaffold,
//! rasterization, losses and the chained adjoint.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::body_model::{forward_lbs_unchecked, lbs_backward, BodyModel, LbsOutput, PoseParams};
use crate::error::{check_dim, Result};
use crate::gaussian::{scaffold, scaffold_backward, GaussianAttributes, GaussianSet, ScaffoldConfig};
use crate::losses::{image_loss, regularizer_grads, total_loss, LossReport, LossWeights, ViewTarget};
use crate::raster::{render, render_backward, Camera, ImageBuffer};

/// Everything that determines an avatar's appearance.
#[derive(Clone, Debug, PartialEq)]
pub struct Avatar {
    pub pose: PoseParams,
    pub betas: Vec<f64>,
    pub attrs: GaussianAttributes,
}

impl Avatar {
    pub fn validate(&self, model: &BodyModel, cfg: &ScaffoldConfig) -> Result<()> {
        self.pose.validate(model.num_joints())?;
        check_dim("shape coefficients", model.num_betas(), self.betas.len())?;
        check_dim(
            "gaussian rows",
            model.num_vertices() * cfg.gaussians_per_vertex,
            self.attrs.len(),
        )?;
        self.attrs.validate()
    }
}

#[derive(Clone, Debug)]
pub struct AvatarGrads {
    pub joint_rotations: Vec<Matrix3<f64>>,
    pub betas: Vec<f64>,
    pub root_translation: Vector3<f64>,
    pub attrs: GaussianAttributes,
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub lbs: LbsOutput,
    pub set: GaussianSet,
    pub renders: Vec<ImageBuffer>,
}

/// Skins, scaffolds and renders every camera. Views render in parallel;
/// each image is independent of the thread count.
pub fn forward(
    model: &BodyModel,
    avatar: &Avatar,
    cfg: &ScaffoldConfig,
    cameras: &[Camera],
    background: &Vector3<f64>,
) -> Result<Forward> {
    check_dim("shape coefficients", model.num_betas(), avatar.betas.len())?;
    check_dim("pose joint count", model.num_joints(), avatar.pose.joint_rotations.len())?;
    let lbs = forward_lbs_unchecked(model, &avatar.pose, &avatar.betas);
    let set = scaffold(&lbs.vertices, &avatar.attrs, cfg)?;
    let renders = cameras
        .par_iter()
        .map(|cam| render(&set, cam, background))
        .collect::<Result<Vec<_>>>()?;
    Ok(Forward { lbs, set, renders })
}

/// Result of one objective evaluation.
#[derive(Clone, Debug)]
pub struct Objective {
    pub report: LossReport,
    pub grads: Option<AvatarGrads>,
    pub forward: Forward,
}

/// Total loss over all views and, when requested, its gradient with respect
/// to every avatar parameter.
#[allow(clippy::too_many_arguments)]
pub fn objective(
    model: &BodyModel,
    avatar: &Avatar,
    cfg: &ScaffoldConfig,
    cameras: &[Camera],
    targets: &[ViewTarget<'_>],
    background: &Vector3<f64>,
    weights: &LossWeights,
    want_grad: bool,
) -> Result<Objective> {
    let fwd = forward(model, avatar, cfg, cameras, background)?;
    let img = image_loss(&fwd.renders, targets, weights)?;
    let report = total_loss(img.report, &avatar.attrs, &avatar.betas, weights)?;
    report.check_finite()?;
    if !want_grad {
        return Ok(Objective {
            report,
            grads: None,
            forward: fwd,
        });
    }

    let per_view = cameras
        .par_iter()
        .enumerate()
        .map(|(i, cam)| render_backward(&fwd.set, cam, background, &img.grad_rgb[i], &img.grad_alpha[i]))
        .collect::<Result<Vec<_>>>()?;
    let mut set_grads = per_view[0].clone();
    for g in &per_view[1..] {
        set_grads.add_assign(g);
    }
    let (d_vertices, mut d_attrs) = scaffold_backward(&avatar.attrs, cfg, &set_grads);
    let reg = regularizer_grads(&avatar.attrs, &avatar.betas, weights);
    for (d, r) in d_attrs.offsets.iter_mut().zip(&reg.offsets) {
        *d += r;
    }
    let lbs = lbs_backward(model, &avatar.pose, &fwd.lbs.state, &d_vertices, &[]);
    let betas = lbs.betas.iter().zip(&reg.betas).map(|(a, b)| a + b).collect();
    Ok(Objective {
        report,
        grads: Some(AvatarGrads {
            joint_rotations: lbs.joint_rotations,
            betas,
            root_translation: lbs.root_translation,
            attrs: d_attrs,
        }),
        forward: fwd,
    })
}
