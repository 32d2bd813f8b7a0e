//! Per-scene inverse rendering with Adam over pose, shape, root translation
//! and Gaussian attributes.

use std::str::FromStr;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::body_model::{BodyModel, PoseParams};
use crate::dataio::{random_rotation, SceneDataset};
use crate::error::{Error, Result};
use crate::gaussian::{GaussianAttributes, ScaffoldConfig, PARAMS_PER_GAUSSIAN};
use crate::losses::{LossReport, LossWeights};
use crate::optim::{Adam, AdamConfig};
use crate::pipeline::{objective, Avatar};
use crate::rotation::{matrix_to_rot6, rot6_backward, rot6_to_matrix, Rot6};

/// Starting point of a fit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum FitInit {
    /// Ground-truth pose, shape and appearance.
    GroundTruth,
    /// Ground-truth pose with every joint rotated by exactly this many
    /// degrees about a random axis; zero shape and default appearance.
    Perturbed(f64),
    /// Identity joint rotations, zero shape and default appearance.
    TPose,
}

impl FromStr for FitInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gt" => Ok(Self::GroundTruth),
            "tpose" => Ok(Self::TPose),
            _ => {
                let deg = s
                    .strip_prefix("perturbed:")
                    .and_then(|d| d.parse::<f64>().ok())
                    .filter(|d| d.is_finite() && *d >= 0.0)
                    .ok_or_else(|| {
                        Error::invalid(format!("unknown init '{s}' (expected gt, perturbed:<deg> or tpose)"))
                    })?;
                Ok(Self::Perturbed(deg))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub steps: usize,
    /// Learning rate for rotation, scale, opacity and colour of the Gaussians.
    pub lr_attributes: f64,
    /// Learning rate for the Gaussian offsets, in meters.
    pub lr_offsets: f64,
    /// Learning rate for joint rotations, shape and root translation.
    pub lr_body: f64,
    pub optimize_shape: bool,
    pub weights: LossWeights,
    /// Seeds the perturbation of a perturbed init.
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr_attributes: 1e-2,
            lr_offsets: 1e-3,
            lr_body: 1e-3,
            optimize_shape: true,
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        for lr in [self.lr_attributes, self.lr_offsets, self.lr_body] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::invalid(format!("invalid learning rate {lr}")));
            }
        }
        Ok(())
    }
}

/// Builds the starting avatar for `init`.
pub fn initial_avatar(
    ds: &SceneDataset,
    model: &BodyModel,
    cfg: &ScaffoldConfig,
    init: FitInit,
    seed: u64,
) -> Result<Avatar> {
    let default_attrs = || {
        let scale = GaussianAttributes::initial_scale(model.mean_nearest_vertex_distance());
        GaussianAttributes::initial(model.num_vertices() * cfg.gaussians_per_vertex, scale)
    };
    let gt = ds.gt.as_ref();
    match init {
        FitInit::GroundTruth => {
            let gt = gt.ok_or_else(|| Error::invalid("gt init needs ground-truth parameters"))?;
            Ok(gt.avatar.clone())
        }
        FitInit::Perturbed(deg) => {
            let gt = gt.ok_or_else(|| Error::invalid("perturbed init needs ground-truth parameters"))?;
            Ok(Avatar {
                pose: perturb_pose(&gt.avatar.pose, deg, seed),
                betas: vec![0.0; model.num_betas()],
                attrs: default_attrs(),
            })
        }
        FitInit::TPose => Ok(Avatar {
            pose: PoseParams {
                joint_rotations: vec![nalgebra::Matrix3::identity(); model.num_joints()],
                root_translation: gt.map(|g| g.avatar.pose.root_translation).unwrap_or_else(Vector3::zeros),
            },
            betas: vec![0.0; model.num_betas()],
            attrs: default_attrs(),
        }),
    }
}

/// Right-multiplies every joint rotation by a rotation of exactly `deg`
/// degrees about a random axis.
pub fn perturb_pose(pose: &PoseParams, deg: f64, seed: u64) -> PoseParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PoseParams {
        joint_rotations: pose
            .joint_rotations
            .iter()
            .map(|r| r * random_rotation(&mut rng, deg.to_radians()))
            .collect(),
        root_translation: pose.root_translation,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    pub report: LossReport,
    pub best_total: f64,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    /// Parameters of the lowest-loss iterate.
    pub avatar: Avatar,
    pub best_step: usize,
    pub best_total: f64,
    /// One entry per evaluated iterate, including the final one.
    pub trace: Vec<TraceEntry>,
}

impl FitResult {
    pub fn trace_csv(&self) -> String {
        let mut out = format!("{},best_total\n", LossReport::CSV_HEADER);
        for e in &self.trace {
            out.push_str(&format!("{},{:.9e}\n", e.report.csv_row(e.step), e.best_total));
        }
        out
    }
}

/// Optimizer-side parameter layout: 6D rotations, translation and shape in
/// one vector, attributes in another.
struct Packed {
    body: Vec<f64>,
    attrs: Vec<f64>,
    joints: usize,
}

impl Packed {
    fn new(a: &Avatar) -> Self {
        let mut body: Vec<f64> = a
            .pose
            .joint_rotations
            .iter()
            .flat_map(|r| matrix_to_rot6(r))
            .collect();
        body.extend(a.pose.root_translation.iter());
        body.extend(&a.betas);
        Self {
            body,
            attrs: a.attrs.to_flat(),
            joints: a.pose.joint_rotations.len(),
        }
    }

    fn rot6(&self) -> Vec<Rot6> {
        self.body[..self.joints * 6]
            .chunks(6)
            .map(|c| c.try_into().unwrap())
            .collect()
    }

    fn unpack(&self) -> Result<Avatar> {
        let j6 = self.joints * 6;
        Ok(Avatar {
            pose: PoseParams {
                joint_rotations: self.rot6().iter().map(rot6_to_matrix).collect(),
                root_translation: Vector3::from_column_slice(&self.body[j6..j6 + 3]),
            },
            betas: self.body[j6 + 3..].to_vec(),
            attrs: GaussianAttributes::from_flat(&self.attrs)?,
        })
    }
}

/// Minimizes the total loss over the scene's views starting from `init`.
pub fn fit_scene(
    ds: &SceneDataset,
    model: &BodyModel,
    cfg: &ScaffoldConfig,
    init: &Avatar,
    opts: &FitOptions,
) -> Result<FitResult> {
    fit_scene_with(ds, model, cfg, init, opts, |_| {})
}

/// [`fit_scene`] with a callback after every evaluated iterate.
pub fn fit_scene_with(
    ds: &SceneDataset,
    model: &BodyModel,
    cfg: &ScaffoldConfig,
    init: &Avatar,
    opts: &FitOptions,
    mut on_step: impl FnMut(&TraceEntry),
) -> Result<FitResult> {
    if ds.views.is_empty() {
        return Err(Error::invalid("cannot fit an empty dataset"));
    }
    ds.validate()?;
    opts.validate()?;
    init.validate(model, cfg)?;
    let cameras = ds.cameras();
    let targets = ds.targets();

    let mut packed = Packed::new(init);
    let mut body_opt = Adam::new(packed.body.len(), AdamConfig::with_lr(opts.lr_body));
    let attr_lrs = (0..packed.attrs.len())
        .map(|k| {
            if k % PARAMS_PER_GAUSSIAN < 3 {
                opts.lr_offsets
            } else {
                opts.lr_attributes
            }
        })
        .collect();
    let mut attr_opt = Adam::with_learning_rates(attr_lrs, AdamConfig::default());
    let mut best: Option<(f64, usize, Avatar)> = None;
    let mut trace = Vec::with_capacity(opts.steps + 1);

    for step in 0..=opts.steps {
        let avatar = packed.unpack()?;
        let want_grad = step < opts.steps;
        let obj = objective(
            model,
            &avatar,
            cfg,
            &cameras,
            &targets,
            &ds.background,
            &opts.weights,
            want_grad,
        )?;
        let total = obj.report.total;
        if best.as_ref().is_none_or(|(b, _, _)| total < *b) {
            best = Some((total, step, avatar));
        }
        let entry = TraceEntry {
            step,
            report: obj.report,
            best_total: best.as_ref().map(|b| b.0).unwrap_or(total),
        };
        on_step(&entry);
        trace.push(entry);

        if let Some(g) = obj.grads {
            let raw = packed.rot6();
            let mut body_grad: Vec<f64> = raw
                .iter()
                .zip(&g.joint_rotations)
                .flat_map(|(r, gr)| rot6_backward(r, gr))
                .collect();
            body_grad.extend(g.root_translation.iter());
            if opts.optimize_shape {
                body_grad.extend(&g.betas);
            } else {
                body_grad.extend(std::iter::repeat_n(0.0, g.betas.len()));
            }
            body_opt.step(&mut packed.body, &body_grad);
            attr_opt.step(&mut packed.attrs, &g.attrs.to_flat());
        }
    }

    let (best_total, best_step, avatar) = best.expect("at least one iterate");
    Ok(FitResult {
        avatar,
        best_step,
        best_total,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body_model::{forward_lbs_unchecked, SyntheticBodyConfig};
    use crate::dataio::{generate_scene, GenerateOptions, RigConfig};
    use crate::metrics::mpjpe;
    use crate::rotation::rotation_angle;

    fn scene() -> (BodyModel, SceneDataset) {
        let model = SyntheticBodyConfig {
            vertices: 800,
            ..Default::default()
        }
        .build()
        .unwrap();
        let opts = GenerateOptions {
            rig: RigConfig {
                views: 3,
                width: 32,
                height: 32,
                ..Default::default()
            },
            ..Default::default()
        };
        let ds = generate_scene(&model, 3, 4, &opts, "m.gstb").unwrap();
        (model, ds)
    }

    #[test]
    fn parses_init_modes() {
        assert_eq!("gt".parse::<FitInit>().unwrap(), FitInit::GroundTruth);
        assert_eq!("tpose".parse::<FitInit>().unwrap(), FitInit::TPose);
        assert_eq!("perturbed:10".parse::<FitInit>().unwrap(), FitInit::Perturbed(10.0));
        assert!("perturbed:x".parse::<FitInit>().is_err());
        assert!("random".parse::<FitInit>().is_err());
    }

    #[test]
    fn perturbation_has_exact_angle() {
        let pose = PoseParams::identity(24);
        let p = perturb_pose(&pose, 10.0, 5);
        for r in &p.joint_rotations {
            assert!((rotation_angle(r) - 10f64.to_radians()).abs() < 1e-9);
        }
    }

    #[test]
    fn gt_init_is_a_fixed_point_of_the_image_terms() {
        let (model, ds) = scene();
        let gt = ds.gt.clone().unwrap();
        let opts = FitOptions {
            steps: 5,
            weights: LossWeights {
                lambda_alpha: 0.0,
                lambda_tight: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let res = fit_scene(&ds, &model, &gt.scaffold, &gt.avatar, &opts).unwrap();
        assert_eq!(res.trace.len(), 6);
        assert!(res.trace[0].report.mse < 1e-5);
        assert_eq!(res.best_step, 0);
        let j = |a: &Avatar| forward_lbs_unchecked(&model, &a.pose, &a.betas).joints;
        assert!(mpjpe(&j(&res.avatar), &j(&gt.avatar)).unwrap() < 1e-9);
        assert_eq!(res.avatar.attrs, gt.avatar.attrs);
    }

    #[test]
    fn gt_init_never_returns_worse_than_the_floor() {
        let (model, ds) = scene();
        let gt = ds.gt.clone().unwrap();
        let opts = FitOptions {
            steps: 5,
            ..Default::default()
        };
        let res = fit_scene(&ds, &model, &gt.scaffold, &gt.avatar, &opts).unwrap();
        let floor = res.trace[0].report.total;
        assert!(res.best_total <= floor);
        let j = |a: &Avatar| forward_lbs_unchecked(&model, &a.pose, &a.betas).joints;
        // Tightness pulls the offsets in, so the pose drifts by a few mm at most.
        let e = mpjpe(&j(&res.avatar), &j(&gt.avatar)).unwrap();
        assert!(e < 10.0, "{e}");
    }

    #[test]
    fn best_so_far_never_increases_and_runs_are_reproducible() {
        let (model, ds) = scene();
        let gt = ds.gt.clone().unwrap();
        let init = initial_avatar(&ds, &model, &gt.scaffold, FitInit::Perturbed(10.0), 1).unwrap();
        let opts = FitOptions {
            steps: 15,
            ..Default::default()
        };
        let a = fit_scene(&ds, &model, &gt.scaffold, &init, &opts).unwrap();
        for w in a.trace.windows(2) {
            assert!(w[1].best_total <= w[0].best_total);
        }
        assert!(a.best_total < a.trace[0].report.total);
        let b = fit_scene(&ds, &model, &gt.scaffold, &init, &opts).unwrap();
        assert_eq!(a.trace, b.trace);
        assert!(a.trace_csv().lines().count() == 17);
    }

    #[test]
    fn rejects_empty_datasets() {
        let (model, mut ds) = scene();
        let gt = ds.gt.clone().unwrap();
        ds.views.clear();
        assert!(fit_scene(&ds, &model, &gt.scaffold, &gt.avatar, &FitOptions::default()).is_err());
    }
}
