//! Central finite-difference checks of the analytic adjoints.
//!
//! Each suite builds a seeded random problem, evaluates a scalar loss with
//! random weights on every output, and compares the analytic gradient with
//! central differences. Relative error is `|a - f| / max(|a|, |f|, floor)`
//! where `floor` is `1e-4` times the largest gradient magnitude in the
//! parameter group, so exact zeros do not divide by zero.

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::body_model::{forward_lbs_unchecked, lbs_backward, PoseParams, SyntheticBodyConfig};
use crate::dataio::random_rotation;
use crate::error::{Error, Result};
use crate::gaussian::{
    scaffold, scaffold_backward, GaussianAttributes, GaussianSetGrads, ScaffoldConfig, PARAMS_PER_GAUSSIAN,
};
use crate::image::Image;
use crate::losses::{image_loss, regularizer_grads, total_loss, LossWeights, ViewTarget};
use crate::raster::{render, render_backward, Camera, ImageBuffer};
use crate::rotation::{matrix_to_rot6, Rot6};

/// Modules with a gradient suite, in the order [`run_suite`] accepts them.
pub const MODULES: [&str; 4] = ["rasterizer", "scaffold", "lbs", "losses"];
/// Step for paths that pass through the compositing cutoffs.
pub const COMPOSITING_STEP: f64 = 1e-7;
/// Step for smooth paths.
pub const SMOOTH_STEP: f64 = 1e-6;

/// Tolerance for gradients that flow through compositing cutoffs.
pub const COMPOSITING_TOL: f64 = 1e-2;
/// Tolerance for smooth paths.
pub const SMOOTH_TOL: f64 = 1e-3;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckResult {
    pub param: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub checked: usize,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub module: String,
    pub seed: u64,
    pub results: Vec<GradCheckResult>,
    pub pass: bool,
}

impl GradCheckReport {
    fn new(module: &str, seed: u64, results: Vec<GradCheckResult>) -> Self {
        let pass = results.iter().all(|r| r.pass);
        Self {
            module: module.to_string(),
            seed,
            results,
            pass,
        }
    }
}

pub fn rel_err(analytic: f64, fd: f64, floor: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(floor).max(f64::MIN_POSITIVE)
}

/// Central differences of `f` at `x` for the coordinates in `indices`.
pub fn central_differences(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    indices: &[usize],
    h: f64,
) -> Vec<f64> {
    let mut probe = x.to_vec();
    indices
        .iter()
        .map(|&i| {
            probe[i] = x[i] + h;
            let plus = f(&probe);
            probe[i] = x[i] - h;
            let minus = f(&probe);
            probe[i] = x[i];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Compares `analytic[i]` against finite differences, grouped by name.
pub fn compare_groups(
    groups: &[(&str, Vec<usize>)],
    analytic: &[f64],
    fd: &[f64],
    tolerance: f64,
) -> Vec<GradCheckResult> {
    groups
        .iter()
        .map(|(name, idx)| {
            let scale = idx
                .iter()
                .map(|&i| analytic[i].abs().max(fd[i].abs()))
                .fold(0.0, f64::max);
            let floor = (1e-4 * scale).max(1e-10);
            let max_rel_err = idx
                .iter()
                .map(|&i| rel_err(analytic[i], fd[i], floor))
                .fold(0.0, f64::max);
            GradCheckResult {
                param: name.to_string(),
                max_rel_err,
                tolerance,
                checked: idx.len(),
                pass: max_rel_err < tolerance,
            }
        })
        .collect()
}

pub(crate) fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize) -> Image {
    Image::from_vec(w, h, c, (0..w * h * c).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("sized")
}

/// Random Gaussians in front of an identity camera, drawn as raw attributes
/// on top of random anchor vertices.
pub(crate) fn random_splat_scene(
    rng: &mut ChaCha8Rng,
    n: usize,
    size: usize,
) -> (Camera, Vec<Vector3<f64>>, GaussianAttributes) {
    let focal = size as f64 * 1.2;
    let c = (size as f64 - 1.0) / 2.0;
    let cam = Camera::new(Matrix4::identity(), focal, focal, c, c, size, size).expect("valid");
    let vertices: Vec<Vector3<f64>> = (0..n)
        .map(|_| {
            let z = rng.random_range(1.5..3.0);
            Vector3::new(
                rng.random_range(-0.4..0.4) * z,
                rng.random_range(-0.4..0.4) * z,
                z,
            )
        })
        .collect();
    let flat: Vec<f64> = (0..n * PARAMS_PER_GAUSSIAN)
        .map(|k| match k % PARAMS_PER_GAUSSIAN {
            0..=2 => rng.random_range(-0.02..0.02),
            3..=6 => rng.random_range(-1.0..1.0),
            7..=9 => rng.random_range(-3.5..-2.3),
            10 => rng.random_range(-1.0..2.0),
            _ => rng.random_range(-2.0..2.0),
        })
        .collect();
    let attrs = GaussianAttributes::from_flat(&flat).expect("multiple of 14");
    (cam, vertices, attrs)
}

const RASTER_GROUPS: [(&str, std::ops::Range<usize>); 5] = [
    ("offset", 0..3),
    ("rotation", 3..7),
    ("log_scale", 7..10),
    ("opacity", 10..11),
    ("color", 11..14),
];

/// Scaffold + render with a random linear loss on colour and opacity, checked
/// over all 14 raw parameters of every Gaussian.
pub fn check_rasterizer(seed: u64, n: usize, size: usize, h: f64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cam, vertices, attrs) = random_splat_scene(&mut rng, n, size);
    let bg = Vector3::new(
        rng.random_range(0.0..1.0),
        rng.random_range(0.0..1.0),
        rng.random_range(0.0..1.0),
    );
    let w_rgb = random_image(&mut rng, size, size, 3);
    let w_alpha = random_image(&mut rng, size, size, 1);
    let cfg = ScaffoldConfig::default();

    let mut loss = |flat: &[f64]| {
        let attrs = GaussianAttributes::from_flat(flat).expect("sized");
        let set = scaffold(&vertices, &attrs, &cfg).expect("valid scene");
        let img = render(&set, &cam, &bg).expect("valid scene");
        dot(&img.rgb.data, &w_rgb.data) + dot(&img.alpha.data, &w_alpha.data)
    };

    let set = scaffold(&vertices, &attrs, &cfg).expect("valid scene");
    let grads = render_backward(&set, &cam, &bg, &w_rgb, &w_alpha).expect("valid scene");
    let (_, d_attrs) = scaffold_backward(&attrs, &cfg, &grads);
    let analytic = d_attrs.to_flat();
    let x = attrs.to_flat();
    let all: Vec<usize> = (0..x.len()).collect();
    let fd = central_differences(&mut loss, &x, &all, h);

    let groups: Vec<(&str, Vec<usize>)> = RASTER_GROUPS
        .iter()
        .map(|(name, range)| {
            (
                *name,
                (0..n)
                    .flat_map(|g| range.clone().map(move |k| g * PARAMS_PER_GAUSSIAN + k))
                    .collect(),
            )
        })
        .collect();
    GradCheckReport::new(
        "rasterizer",
        seed,
        compare_groups(&groups, &analytic, &fd, COMPOSITING_TOL),
    )
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn range_groups(
    names: &[(&'static str, std::ops::Range<usize>)],
) -> Vec<(&'static str, Vec<usize>)> {
    names.iter().map(|(n, r)| (*n, r.clone().collect())).collect()
}

/// Scaffold with two Gaussians per vertex and a random linear loss on every
/// activated quantity (symmetric weights on the covariances).
pub fn check_scaffold(seed: u64, vertices: usize) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ScaffoldConfig {
        gaussians_per_vertex: 2,
        ..Default::default()
    };
    let n = vertices * cfg.gaussians_per_vertex;
    let (_, verts, _) = random_splat_scene(&mut rng, vertices, 16);
    let (_, _, attrs) = random_splat_scene(&mut rng, n, 16);
    let mut weights = GaussianSetGrads::zeros(n);
    for i in 0..n {
        weights.means[i] = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let a = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        weights.covariances[i] = (a + a.transpose()) * 50.0;
        weights.opacities[i] = rng.random_range(-1.0..1.0);
        weights.colors[i] = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
    }

    let nv = 3 * vertices;
    let mut x: Vec<f64> = verts.iter().flat_map(|v| v.iter().copied().collect::<Vec<_>>()).collect();
    x.extend(attrs.to_flat());
    let mut loss = |p: &[f64]| {
        let verts: Vec<Vector3<f64>> = p[..nv].chunks(3).map(Vector3::from_column_slice).collect();
        let attrs = GaussianAttributes::from_flat(&p[nv..]).expect("sized");
        let set = scaffold(&verts, &attrs, &cfg).expect("valid");
        let mut total = 0.0;
        for i in 0..n {
            total += set.means[i].dot(&weights.means[i])
                + set.covariances[i].component_mul(&weights.covariances[i]).sum()
                + set.opacities[i] * weights.opacities[i]
                + set.colors[i].dot(&weights.colors[i]);
        }
        total
    };
    let (d_verts, d_attrs) = scaffold_backward(&attrs, &cfg, &weights);
    let mut analytic: Vec<f64> = d_verts.iter().flat_map(|v| v.iter().copied().collect::<Vec<_>>()).collect();
    analytic.extend(d_attrs.to_flat());
    let all: Vec<usize> = (0..x.len()).collect();
    let fd = central_differences(&mut loss, &x, &all, SMOOTH_STEP);

    let mut groups = vec![("vertex", (0..nv).collect::<Vec<_>>())];
    for (name, range) in RASTER_GROUPS.iter() {
        groups.push((
            *name,
            (0..n)
                .flat_map(|g| range.clone().map(move |k| nv + g * PARAMS_PER_GAUSSIAN + k))
                .collect(),
        ));
    }
    GradCheckReport::new("scaffold", seed, compare_groups(&groups, &analytic, &fd, SMOOTH_TOL))
}

/// Skinning of a small synthetic body at a random pose, with a random linear
/// loss on the posed vertices and joints. Rotations are checked through the
/// 6D parameterization.
pub fn check_lbs(seed: u64) -> GradCheckReport {
    let model = SyntheticBodyConfig {
        vertices: SyntheticBodyConfig::min_vertices(),
        shape_dim: 4,
        seed,
        ..Default::default()
    }
    .build()
    .expect("valid body configuration");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1b5);
    let nj = model.num_joints();
    let nb = model.num_betas();
    let rot6: Vec<Rot6> = (0..nj)
        .map(|_| {
            let angle = rng.random_range(0.0..1.2);
            let mut r = matrix_to_rot6(&random_rotation(&mut rng, angle));
            // Off-manifold inputs exercise the Gram-Schmidt adjoint.
            for v in r.iter_mut() {
                *v *= rng.random_range(0.7..1.3);
            }
            r
        })
        .collect();
    let betas: Vec<f64> = (0..nb).map(|_| rng.random_range(-1.0..1.0)).collect();
    let trans = Vector3::from_fn(|_, _| rng.random_range(-0.5..0.5));
    let w_v: Vec<Vector3<f64>> = (0..model.num_vertices())
        .map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)))
        .collect();
    let w_j: Vec<Vector3<f64>> = (0..nj).map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();

    let unpack = |p: &[f64]| {
        let raw: Vec<Rot6> = p[..6 * nj]
            .chunks(6)
            .map(|c| c.try_into().expect("six values"))
            .collect();
        let trans = Vector3::from_column_slice(&p[6 * nj + nb..]);
        (raw, p[6 * nj..6 * nj + nb].to_vec(), trans)
    };
    let mut x: Vec<f64> = rot6.iter().flatten().copied().collect();
    x.extend(&betas);
    x.extend(trans.iter());
    let mut loss = |p: &[f64]| {
        let (raw, betas, trans) = unpack(p);
        let out = forward_lbs_unchecked(&model, &PoseParams::from_rot6(&raw, trans), &betas);
        out.vertices.iter().zip(&w_v).map(|(a, b)| a.dot(b)).sum::<f64>()
            + out.joints.iter().zip(&w_j).map(|(a, b)| a.dot(b)).sum::<f64>()
    };
    let pose = PoseParams::from_rot6(&rot6, trans);
    let out = forward_lbs_unchecked(&model, &pose, &betas);
    let g = lbs_backward(&model, &pose, &out.state, &w_v, &w_j);
    let mut analytic: Vec<f64> = g.to_rot6(&rot6).iter().flatten().copied().collect();
    analytic.extend(&g.betas);
    analytic.extend(g.root_translation.iter());
    let all: Vec<usize> = (0..x.len()).collect();
    let fd = central_differences(&mut loss, &x, &all, SMOOTH_STEP);
    let groups = range_groups(&[
        ("joint_rotation", 0..6 * nj),
        ("betas", 6 * nj..6 * nj + nb),
        ("root_translation", 6 * nj + nb..x.len()),
    ]);
    GradCheckReport::new("lbs", seed, compare_groups(&groups, &analytic, &fd, SMOOTH_TOL))
}

/// Every loss term on two random views, one term at a time and all together.
/// Colour and opacity gradients are checked per term; the regularizers are
/// checked against their raw parameters.
pub fn check_losses(seed: u64, size: usize) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let views = 2;
    let renders: Vec<ImageBuffer> = (0..views)
        .map(|_| ImageBuffer {
            rgb: Image::from_vec(
                size,
                size,
                3,
                (0..size * size * 3).map(|_| rng.random_range(0.0..1.0)).collect(),
            )
            .expect("sized"),
            alpha: Image::from_vec(size, size, 1, (0..size * size).map(|_| rng.random_range(0.0..1.0)).collect())
                .expect("sized"),
        })
        .collect();
    let images: Vec<Image> = (0..views)
        .map(|_| {
            Image::from_vec(size, size, 3, (0..size * size * 3).map(|_| rng.random_range(0.0..1.0)).collect())
                .expect("sized")
        })
        .collect();
    let masks: Vec<Image> = (0..views)
        .map(|_| {
            Image::from_vec(
                size,
                size,
                1,
                (0..size * size).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect(),
            )
            .expect("sized")
        })
        .collect();
    let targets: Vec<ViewTarget<'_>> = images
        .iter()
        .zip(&masks)
        .map(|(image, mask)| ViewTarget { image, mask })
        .collect();
    let (_, _, attrs) = random_splat_scene(&mut rng, 8, 16);
    let betas: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();

    let n_rgb = size * size * 3;
    let n_alpha = size * size;
    let per_view = n_rgb + n_alpha;
    let n_img = views * per_view;
    let n_off = 3 * attrs.len();
    let mut x: Vec<f64> = Vec::new();
    for r in &renders {
        x.extend(&r.rgb.data);
        x.extend(&r.alpha.data);
    }
    x.extend(attrs.offsets.iter().flat_map(|o| o.iter().copied().collect::<Vec<_>>()));
    x.extend(&betas);

    let unpack = |p: &[f64]| {
        let renders: Vec<ImageBuffer> = (0..views)
            .map(|v| {
                let base = v * per_view;
                ImageBuffer {
                    rgb: Image::from_vec(size, size, 3, p[base..base + n_rgb].to_vec()).expect("sized"),
                    alpha: Image::from_vec(size, size, 1, p[base + n_rgb..base + per_view].to_vec())
                        .expect("sized"),
                }
            })
            .collect::<Vec<_>>();
        let mut a = attrs.clone();
        for (i, o) in a.offsets.iter_mut().enumerate() {
            *o = Vector3::from_column_slice(&p[n_img + 3 * i..n_img + 3 * i + 3]);
        }
        (renders, a, p[n_img + n_off..].to_vec())
    };

    let rgb_idx: Vec<usize> = (0..views).flat_map(|v| v * per_view..v * per_view + n_rgb).collect();
    let alpha_idx: Vec<usize> = (0..views).flat_map(|v| v * per_view + n_rgb..(v + 1) * per_view).collect();
    let off_idx: Vec<usize> = (n_img..n_img + n_off).collect();
    let beta_idx: Vec<usize> = (n_img + n_off..x.len()).collect();
    let zero = LossWeights {
        lambda_perceptual: 0.0,
        lambda_alpha: 0.0,
        lambda_tight: 0.0,
        lambda_beta: 0.0,
    };
    let configs: [(&str, LossWeights, Vec<usize>); 5] = [
        ("mse", zero, rgb_idx.clone()),
        ("perceptual", LossWeights { lambda_perceptual: 1.0, ..zero }, rgb_idx.clone()),
        ("alpha_mask", LossWeights { lambda_alpha: 1.0, ..zero }, alpha_idx.clone()),
        ("tight", LossWeights { lambda_tight: 1.0, ..zero }, off_idx.clone()),
        ("beta_reg", LossWeights { lambda_beta: 1.0, ..zero }, beta_idx.clone()),
    ];
    let mut all_weights: Vec<(String, LossWeights, Vec<usize>)> = configs
        .into_iter()
        .map(|(name, w, idx)| (name.to_string(), w, idx))
        .collect();
    let full = LossWeights {
        lambda_perceptual: 0.5,
        lambda_alpha: 0.3,
        lambda_tight: 0.2,
        lambda_beta: 0.1,
    };
    all_weights.push(("total".to_string(), full, (0..x.len()).collect()));

    let mut results = Vec::new();
    for (name, w, idx) in &all_weights {
        let mut loss = |p: &[f64]| {
            let (renders, a, betas) = unpack(p);
            let img = image_loss(&renders, &targets, w).expect("valid views");
            total_loss(img.report, &a, &betas, w).expect("valid weights").total
        };
        let img = image_loss(&renders, &targets, w).expect("valid views");
        let reg = regularizer_grads(&attrs, &betas, w);
        let mut analytic = Vec::with_capacity(x.len());
        for v in 0..views {
            analytic.extend(&img.grad_rgb[v].data);
            analytic.extend(&img.grad_alpha[v].data);
        }
        analytic.extend(reg.offsets.iter().flat_map(|o| o.iter().copied().collect::<Vec<_>>()));
        analytic.extend(&reg.betas);
        let fd = central_differences(&mut loss, &x, idx, SMOOTH_STEP);
        let mut fd_full = vec![0.0; x.len()];
        for (&i, d) in idx.iter().zip(fd) {
            fd_full[i] = d;
        }
        results.extend(compare_groups(&[(name.as_str(), idx.clone())], &analytic, &fd_full, SMOOTH_TOL));
    }
    GradCheckReport::new("losses", seed, results)
}

/// Runs one module's suite over `seeds` consecutive seeds starting at `seed`.
pub fn run_suite(module: &str, seed: u64, seeds: usize) -> Result<Vec<GradCheckReport>> {
    let run: Box<dyn Fn(u64) -> GradCheckReport + Sync> = match module {
        "rasterizer" => Box::new(|s| check_rasterizer(s, 50, 32, COMPOSITING_STEP)),
        "scaffold" => Box::new(|s| check_scaffold(s, 6)),
        "lbs" => Box::new(check_lbs),
        "losses" => Box::new(|s| check_losses(s, 16)),
        other => {
            return Err(Error::invalid(format!(
                "unknown gradcheck module '{other}' (expected one of {})",
                MODULES.join(", ")
            )))
        }
    };
    use rayon::prelude::*;
    Ok((0..seeds as u64).into_par_iter().map(|k| run(seed + k)).collect())
}
