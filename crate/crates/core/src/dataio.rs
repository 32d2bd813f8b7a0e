//! Synthetic multi-view scenes and their on-disk layout (see FORMATS.md).

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::body_model::{forward_lbs, BodyModel, PoseParams, ShapeParams};
use crate::error::{Error, Result};
use crate::gaussian::{logit, GaussianAttributes, ScaffoldConfig};
use crate::image::{read_png, write_png, Image};
use crate::losses::ViewTarget;
use crate::pipeline::{forward, Avatar};
use crate::raster::{Camera, DEFAULT_NEAR};
use crate::rotation::axis_angle_matrix;

pub const SCENE_FILE: &str = "scene.json";
pub const CAMERAS_FILE: &str = "cameras.json";
pub const PARAMS_FILE: &str = "params.json";
pub const FORMAT_VERSION: u32 = 1;

pub fn view_file(i: usize) -> String {
    format!("view_{i:03}.png")
}

pub fn mask_file(i: usize) -> String {
    format!("mask_{i:03}.png")
}

/// Cameras evenly spaced on a horizontal ring, all looking at the root joint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigConfig {
    pub views: usize,
    /// Horizontal distance from the root joint in meters.
    pub radius: f64,
    /// Camera height above the root joint in meters.
    pub elevation: f64,
    pub width: usize,
    pub height: usize,
    /// Focal length as a multiple of the image height.
    pub focal_factor: f64,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            views: 8,
            radius: 3.0,
            elevation: 0.3,
            width: 64,
            height: 64,
            focal_factor: 1.4,
        }
    }
}

impl RigConfig {
    pub fn validate(&self) -> Result<()> {
        if self.views == 0 {
            return Err(Error::invalid("rig needs at least one view"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("rig resolution must be positive"));
        }
        if !(self.radius.is_finite() && self.radius > DEFAULT_NEAR) {
            return Err(Error::invalid(format!("invalid rig radius {}", self.radius)));
        }
        if !self.elevation.is_finite() || !(self.focal_factor.is_finite() && self.focal_factor > 0.0) {
            return Err(Error::invalid("rig elevation and focal factor must be finite, focal positive"));
        }
        Ok(())
    }

    pub fn cameras(&self, target: &Vector3<f64>) -> Result<Vec<Camera>> {
        self.validate()?;
        let focal = self.focal_factor * self.height as f64;
        (0..self.views)
            .map(|k| {
                let phi = std::f64::consts::TAU * k as f64 / self.views as f64;
                let eye = target + Vector3::new(self.radius * phi.sin(), self.elevation, self.radius * phi.cos());
                Camera::look_at(eye, *target, focal, self.width, self.height)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateOptions {
    pub rig: RigConfig,
    /// Upper bound on each joint's random rotation angle, in degrees.
    pub joint_limit_deg: f64,
    /// Upper bound on the global orientation angle, in degrees.
    pub root_limit_deg: f64,
    /// Shape coefficients are drawn uniformly from `[-beta_range, beta_range]`.
    pub beta_range: f64,
    /// Offset norms never exceed this many meters.
    pub max_offset: f64,
    pub background: [f64; 3],
    pub scaffold: ScaffoldConfig,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            rig: RigConfig::default(),
            joint_limit_deg: 25.0,
            root_limit_deg: 15.0,
            beta_range: 1.0,
            max_offset: 0.02,
            background: [0.0; 3],
            scaffold: ScaffoldConfig::default(),
        }
    }
}

/// Parameters that rendered a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub avatar: Avatar,
    pub scaffold: ScaffoldConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneView {
    pub camera: Camera,
    /// RGB target in `[0, 1]`, already quantized to 8 bits.
    pub image: Image,
    /// Quantized rendered alpha, present for generated scenes.
    pub alpha: Option<Image>,
    /// Binary silhouette.
    pub mask: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    pub views: Vec<SceneView>,
    pub gt: Option<GroundTruth>,
    /// Body model file, relative paths resolve against the scene directory.
    pub body_model_ref: PathBuf,
    pub background: Vector3<f64>,
}

impl SceneDataset {
    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    pub fn cameras(&self) -> Vec<Camera> {
        self.views.iter().map(|v| v.camera.clone()).collect()
    }

    pub fn targets(&self) -> Vec<ViewTarget<'_>> {
        self.views
            .iter()
            .map(|v| ViewTarget {
                image: &v.image,
                mask: &v.mask,
            })
            .collect()
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.views
            .first()
            .map(|v| (v.camera.width, v.camera.height))
            .unwrap_or((0, 0))
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .views
            .first()
            .ok_or_else(|| Error::invalid("scene has no views"))?;
        let (w, h) = (first.camera.width, first.camera.height);
        for (i, v) in self.views.iter().enumerate() {
            v.camera.validate()?;
            if v.camera.width != w || v.camera.height != h {
                return Err(Error::invalid(format!("view {i}: resolution differs from view 0")));
            }
            if v.image.width != w || v.image.height != h || v.image.channels != 3 {
                return Err(Error::invalid(format!("view {i}: image does not match its camera")));
            }
            if v.mask.width != w || v.mask.height != h || v.mask.channels != 1 {
                return Err(Error::invalid(format!("view {i}: mask does not match its camera")));
            }
        }
        if self.background.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("background".into()));
        }
        Ok(())
    }

    /// Resolves the body model reference against `dir` and reads it.
    pub fn load_body_model(&self, dir: &Path) -> Result<BodyModel> {
        let path = if self.body_model_ref.is_absolute() {
            self.body_model_ref.clone()
        } else {
            dir.join(&self.body_model_ref)
        };
        crate::body_model::read_body_model(&path)
    }
}

/// Mask from a stored alpha: set where alpha exceeds one half.
pub fn threshold_mask(alpha: &Image) -> Image {
    let mut m = alpha.clone();
    m.data.iter_mut().for_each(|a| *a = if *a > 0.5 { 1.0 } else { 0.0 });
    m
}

fn random_axis(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Rotation about a uniformly random axis by `angle` radians.
pub fn random_rotation(rng: &mut ChaCha8Rng, angle: f64) -> Matrix3<f64> {
    axis_angle_matrix(&(random_axis(rng) * angle))
}

/// Random pose with every joint rotated by at most `joint_limit_deg`
/// (`root_limit_deg` for joint 0).
pub fn sample_pose(num_joints: usize, seed: u64, joint_limit_deg: f64, root_limit_deg: f64) -> PoseParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let joint_rotations = (0..num_joints)
        .map(|k| {
            let limit = if k == 0 { root_limit_deg } else { joint_limit_deg };
            let angle = rng.random_range(0.0..=1.0) * limit.to_radians();
            random_rotation(&mut rng, angle)
        })
        .collect();
    PoseParams {
        joint_rotations,
        root_translation: Vector3::zeros(),
    }
}

/// Smooth scalar field: a sum of a few random plane waves, in `[-1, 1]`.
struct SmoothField {
    waves: Vec<(Vector3<f64>, f64)>,
}

impl SmoothField {
    fn new(rng: &mut ChaCha8Rng, waves: usize, max_freq: f64) -> Self {
        Self {
            waves: (0..waves)
                .map(|_| {
                    let dir = random_axis(rng) * rng.random_range(0.3 * max_freq..max_freq);
                    (dir, rng.random_range(0.0..std::f64::consts::TAU))
                })
                .collect(),
        }
    }

    fn eval(&self, p: &Vector3<f64>) -> f64 {
        let s: f64 = self.waves.iter().map(|(k, phase)| (k.dot(p) + phase).sin()).sum();
        s / self.waves.len() as f64
    }
}

/// Ground-truth appearance: smooth colours and smooth offsets bounded by
/// `max_offset`, small random rotations and scale jitter.
pub fn sample_attributes(model: &BodyModel, cfg: &ScaffoldConfig, seed: u64, max_offset: f64) -> GaussianAttributes {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let color: Vec<SmoothField> = (0..3).map(|_| SmoothField::new(&mut rng, 4, 9.0)).collect();
    let offset: Vec<SmoothField> = (0..3).map(|_| SmoothField::new(&mut rng, 3, 12.0)).collect();
    let g = cfg.gaussians_per_vertex;
    let n = model.num_vertices() * g;
    let scale = GaussianAttributes::initial_scale(model.mean_nearest_vertex_distance());
    let mut attrs = GaussianAttributes::initial(n, scale);
    for i in 0..n {
        let p = model.template()[i / g];
        for c in 0..3 {
            attrs.colors_raw[i][c] = logit(0.5 + 0.4 * color[c].eval(&p));
        }
        let o = Vector3::new(offset[0].eval(&p), offset[1].eval(&p), offset[2].eval(&p));
        attrs.offsets[i] = o * max_offset / o.norm().max(1.0);
        let axis = random_axis(&mut rng);
        let half = rng.random_range(0.0..0.5f64);
        attrs.rotations[i] = Vector4::new(half.cos(), axis.x * half.sin(), axis.y * half.sin(), axis.z * half.sin());
        for k in 0..3 {
            attrs.log_scales[i][k] = (scale * rng.random_range(0.8..1.25)).ln();
        }
    }
    attrs
}

/// Renders a random pose and appearance from every rig camera. Targets are
/// quantized to 8 bits so they equal what [`load_scene`] reads back.
pub fn generate_scene(
    model: &BodyModel,
    pose_seed: u64,
    appearance_seed: u64,
    opts: &GenerateOptions,
    body_model_ref: impl Into<PathBuf>,
) -> Result<SceneDataset> {
    opts.rig.validate()?;
    opts.scaffold.validate()?;
    let mut pose = sample_pose(model.num_joints(), pose_seed, opts.joint_limit_deg, opts.root_limit_deg);
    let mut rng = ChaCha8Rng::seed_from_u64(pose_seed ^ 0x5eed_5eed);
    let betas: Vec<f64> = (0..model.num_betas())
        .map(|_| rng.random_range(-opts.beta_range..=opts.beta_range))
        .collect();
    let shape = ShapeParams::new(betas)?;
    pose.root_translation = Vector3::zeros();
    let root = forward_lbs(model, &pose, &shape)?.joints[0];
    let cameras = opts.rig.cameras(&root)?;
    let attrs = sample_attributes(model, &opts.scaffold, appearance_seed, opts.max_offset);
    let avatar = Avatar {
        pose,
        betas: shape.betas().to_vec(),
        attrs,
    };
    let background = Vector3::from(opts.background);
    let fwd = forward(model, &avatar, &opts.scaffold, &cameras, &background)?;
    let views = cameras
        .into_par_iter()
        .zip(fwd.renders.into_par_iter())
        .map(|(camera, buf)| {
            let q = buf.quantized();
            SceneView {
                camera,
                image: q.rgb,
                mask: threshold_mask(&q.alpha),
                alpha: Some(q.alpha),
            }
        })
        .collect();
    Ok(SceneDataset {
        views,
        gt: Some(GroundTruth {
            avatar,
            scaffold: opts.scaffold,
        }),
        body_model_ref: body_model_ref.into(),
        background,
    })
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    version: u32,
    views: usize,
    width: usize,
    height: usize,
    background: [f64; 3],
    body_model: PathBuf,
}

/// One entry of `cameras.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    /// Row-major 4x4 world-to-camera transform (OpenCV axes).
    pub world_to_camera: [f64; 16],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    #[serde(default = "default_near")]
    pub near: f64,
}

fn default_near() -> f64 {
    DEFAULT_NEAR
}

impl CameraRecord {
    pub fn from_camera(cam: &Camera) -> Self {
        let mut m = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                m[r * 4 + c] = cam.world_to_camera[(r, c)];
            }
        }
        Self {
            world_to_camera: m,
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            width: cam.width,
            height: cam.height,
            near: cam.near,
        }
    }

    pub fn to_camera(&self) -> Result<Camera> {
        let mut cam = Camera::new(
            Matrix4::from_row_slice(&self.world_to_camera),
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.width,
            self.height,
        )?;
        cam.near = self.near;
        cam.validate()?;
        Ok(cam)
    }
}

#[derive(Serialize, Deserialize)]
struct CamerasFile {
    cameras: Vec<CameraRecord>,
}

/// Avatar parameters as stored in `params.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamsRecord {
    /// Row-major 3x3 rotation per joint.
    pub joint_rotations: Vec<[f64; 9]>,
    pub root_translation: [f64; 3],
    pub betas: Vec<f64>,
    pub scaffold: ScaffoldConfig,
    pub attributes: GaussianAttributes,
}

impl ParamsRecord {
    pub fn new(avatar: &Avatar, scaffold: &ScaffoldConfig) -> Self {
        Self {
            joint_rotations: avatar
                .pose
                .joint_rotations
                .iter()
                .map(|r| {
                    let mut a = [0.0; 9];
                    for i in 0..3 {
                        for j in 0..3 {
                            a[i * 3 + j] = r[(i, j)];
                        }
                    }
                    a
                })
                .collect(),
            root_translation: avatar.pose.root_translation.into(),
            betas: avatar.betas.clone(),
            scaffold: *scaffold,
            attributes: avatar.attrs.clone(),
        }
    }

    pub fn into_parts(self) -> (Avatar, ScaffoldConfig) {
        let pose = PoseParams {
            joint_rotations: self
                .joint_rotations
                .iter()
                .map(|a| Matrix3::from_row_slice(a))
                .collect(),
            root_translation: Vector3::from(self.root_translation),
        };
        (
            Avatar {
                pose,
                betas: self.betas,
                attrs: self.attributes,
            },
            self.scaffold,
        )
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_params(path: &Path, avatar: &Avatar, scaffold: &ScaffoldConfig) -> Result<()> {
    write_json(path, &ParamsRecord::new(avatar, scaffold))
}

pub fn read_params(path: &Path) -> Result<(Avatar, ScaffoldConfig)> {
    let rec: ParamsRecord = read_json(path)?;
    rec.scaffold.validate()?;
    rec.attributes.validate()?;
    Ok(rec.into_parts())
}

pub fn write_cameras(path: &Path, cameras: &[Camera]) -> Result<()> {
    write_json(
        path,
        &CamerasFile {
            cameras: cameras.iter().map(CameraRecord::from_camera).collect(),
        },
    )
}

pub fn read_cameras(path: &Path) -> Result<Vec<Camera>> {
    let file: CamerasFile = read_json(path)?;
    file.cameras
        .iter()
        .enumerate()
        .map(|(i, c)| {
            c.to_camera()
                .map_err(|e| Error::format(path, format!("camera {i}: {e}")))
        })
        .collect()
}

/// Writes the scene directory. The body model file itself is not copied.
pub fn save_scene(ds: &SceneDataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (width, height) = ds.resolution();
    write_json(
        &dir.join(SCENE_FILE),
        &SceneFile {
            version: FORMAT_VERSION,
            views: ds.num_views(),
            width,
            height,
            background: ds.background.into(),
            body_model: ds.body_model_ref.clone(),
        },
    )?;
    write_cameras(&dir.join(CAMERAS_FILE), &ds.cameras())?;
    for (i, v) in ds.views.iter().enumerate() {
        write_png(&dir.join(view_file(i)), &v.image, v.alpha.as_ref())?;
        write_png(&dir.join(mask_file(i)), &v.mask, None)?;
    }
    let params = dir.join(PARAMS_FILE);
    match &ds.gt {
        Some(gt) => write_params(&params, &gt.avatar, &gt.scaffold)?,
        None if params.exists() => fs::remove_file(&params).map_err(|e| Error::io(&params, e))?,
        None => {}
    }
    Ok(())
}

pub fn load_scene(dir: &Path) -> Result<SceneDataset> {
    let scene_path = dir.join(SCENE_FILE);
    let scene: SceneFile = read_json(&scene_path)?;
    if scene.version != FORMAT_VERSION {
        return Err(Error::format(
            &scene_path,
            format!("unsupported version {}", scene.version),
        ));
    }
    let cam_path = dir.join(CAMERAS_FILE);
    let cameras = read_cameras(&cam_path)?;
    if cameras.len() != scene.views {
        return Err(Error::format(
            &cam_path,
            format!("{} cameras for {} views", cameras.len(), scene.views),
        ));
    }
    let mut views = Vec::with_capacity(cameras.len());
    for (i, camera) in cameras.into_iter().enumerate() {
        let img_path = dir.join(view_file(i));
        let mask_path = dir.join(mask_file(i));
        if !img_path.exists() {
            return Err(Error::format(&img_path, format!("image for view {i} is missing")));
        }
        if !mask_path.exists() {
            return Err(Error::format(&mask_path, format!("mask for view {i} is missing")));
        }
        let (image, alpha) = read_png(&img_path)?;
        let (mask_raw, _) = read_png(&mask_path)?;
        let mask = if mask_raw.channels == 1 {
            threshold_mask(&mask_raw)
        } else {
            threshold_mask(&mask_raw.gray())
        };
        if image.width != camera.width || image.height != camera.height {
            return Err(Error::format(
                &img_path,
                format!("view {i} is {}x{}, camera expects {}x{}", image.width, image.height, camera.width, camera.height),
            ));
        }
        if mask.width != camera.width || mask.height != camera.height {
            return Err(Error::format(&mask_path, format!("mask for view {i} has the wrong size")));
        }
        let image = if image.channels == 3 { image } else { to_rgb(&image) };
        views.push(SceneView {
            camera,
            image,
            alpha,
            mask,
        });
    }
    let params = dir.join(PARAMS_FILE);
    let gt = if params.exists() {
        let (avatar, scaffold) = read_params(&params)?;
        Some(GroundTruth { avatar, scaffold })
    } else {
        None
    };
    let ds = SceneDataset {
        views,
        gt,
        body_model_ref: scene.body_model,
        background: Vector3::from(scene.background),
    };
    ds.validate()?;
    Ok(ds)
}

fn to_rgb(img: &Image) -> Image {
    let mut out = Image::new(img.width, img.height, 3);
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..3 {
                out.set(x, y, c, img.get(x, y, c.min(img.channels - 1)));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body_model::SyntheticBodyConfig;
    use crate::raster::render;

    fn small_model() -> BodyModel {
        SyntheticBodyConfig {
            vertices: 600,
            ..Default::default()
        }
        .build()
        .unwrap()
    }

    fn small_opts() -> GenerateOptions {
        GenerateOptions {
            rig: RigConfig {
                views: 3,
                width: 32,
                height: 32,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let model = small_model();
        let a = generate_scene(&model, 1, 2, &small_opts(), "m.gstb").unwrap();
        let b = generate_scene(&model, 1, 2, &small_opts(), "m.gstb").unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&model, 1, 3, &small_opts(), "m.gstb").unwrap();
        assert_ne!(a.views[0].image, c.views[0].image);
    }

    #[test]
    fn ring_is_equidistant_from_root() {
        let model = small_model();
        let mut opts = small_opts();
        opts.rig.views = 8;
        let ds = generate_scene(&model, 4, 5, &opts, "m.gstb").unwrap();
        assert_eq!(ds.num_views(), 8);
        let gt = ds.gt.as_ref().unwrap();
        let root = forward_lbs(&model, &gt.avatar.pose, &ShapeParams::new(gt.avatar.betas.clone()).unwrap())
            .unwrap()
            .joints[0];
        let d0 = (ds.views[0].camera.center() - root).norm();
        for v in &ds.views {
            assert!(((v.camera.center() - root).norm() - d0).abs() < 1e-9);
        }
    }

    #[test]
    fn ground_truth_is_within_bounds() {
        let model = small_model();
        let opts = small_opts();
        let ds = generate_scene(&model, 6, 7, &opts, "m.gstb").unwrap();
        let gt = ds.gt.unwrap();
        for d in &gt.avatar.attrs.offsets {
            assert!(d.norm() <= opts.max_offset + 1e-12);
        }
        assert!(gt.avatar.attrs.offsets.iter().any(|d| d.norm() > 1e-3));
        for (k, r) in gt.avatar.pose.joint_rotations.iter().enumerate() {
            let limit = if k == 0 { opts.root_limit_deg } else { opts.joint_limit_deg };
            assert!(crate::rotation::rotation_angle(r) <= limit.to_radians() + 1e-9);
        }
        let covered: f64 = ds.views.iter().map(|v| v.mask.data.iter().sum::<f64>()).sum();
        assert!(covered > 0.0);
    }

    #[test]
    fn masks_equal_thresholded_alpha() {
        let model = small_model();
        let ds = generate_scene(&model, 8, 9, &small_opts(), "m.gstb").unwrap();
        for v in &ds.views {
            assert_eq!(v.mask, threshold_mask(v.alpha.as_ref().unwrap()));
        }
    }

    #[test]
    fn save_load_round_trip_and_rerender() {
        let model = small_model();
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_scene(&model, 10, 11, &small_opts(), "m.gstb").unwrap();
        save_scene(&ds, dir.path()).unwrap();
        let back = load_scene(dir.path()).unwrap();
        assert_eq!(back, ds);

        let gt = back.gt.as_ref().unwrap();
        let fwd = forward(&model, &gt.avatar, &gt.scaffold, &back.cameras(), &back.background).unwrap();
        for (v, r) in back.views.iter().zip(&fwd.renders) {
            let q = r.quantized();
            assert_eq!(q.rgb, v.image);
            assert_eq!(Some(&q.alpha), v.alpha.as_ref());
        }
        let again = render(&fwd.set, &back.views[0].camera, &back.background).unwrap();
        assert_eq!(again.quantized().rgb, back.views[0].image);
    }

    #[test]
    fn missing_mask_names_the_view() {
        let model = small_model();
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_scene(&model, 12, 13, &small_opts(), "m.gstb").unwrap();
        save_scene(&ds, dir.path()).unwrap();
        fs::remove_file(dir.path().join(mask_file(2))).unwrap();
        let err = load_scene(dir.path()).unwrap_err().to_string();
        assert!(err.contains("view 2"), "{err}");
        assert!(err.contains("mask_002.png"), "{err}");
    }

    #[test]
    fn minimal_cameras_file_parses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(CAMERAS_FILE);
        fs::write(
            &path,
            r#"{"cameras": [{
                "world_to_camera": [1,0,0,0, 0,1,0,0, 0,0,1,0, 0,0,0,1],
                "fx": 100, "fy": 100, "cx": 15.5, "cy": 15.5,
                "width": 32, "height": 32
            }]}"#,
        )
        .unwrap();
        let cams = read_cameras(&path).unwrap();
        assert_eq!(cams.len(), 1);
        let c = &cams[0];
        assert_eq!(c.world_to_camera, Matrix4::identity());
        assert_eq!((c.fx, c.fy, c.cx, c.cy), (100.0, 100.0, 15.5, 15.5));
        assert_eq!((c.width, c.height), (32, 32));
        assert_eq!(c.near, DEFAULT_NEAR);
        assert_eq!(c.center(), Vector3::zeros());
    }

    #[test]
    fn corrupt_files_name_their_path() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_scene(dir.path()).unwrap_err().to_string();
        assert!(err.contains(SCENE_FILE), "{err}");
        let path = dir.path().join(CAMERAS_FILE);
        fs::write(&path, "{not json").unwrap();
        let err = read_cameras(&path).unwrap_err().to_string();
        assert!(err.contains(CAMERAS_FILE), "{err}");
    }
}
