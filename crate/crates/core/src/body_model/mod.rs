//! Parametric skinned body: pose and shape in, posed vertices and joints out.

mod io;
mod synthetic;

pub use io::{read_body_model, write_body_model, BODY_MAGIC, BODY_VERSION};
pub use synthetic::{SyntheticBodyConfig, JOINT_NAMES, SMPL_PARENTS};

use nalgebra::{Matrix3, Vector3};

use crate::error::{check_dim, Error, Result};
use crate::rotation::{self, Rot6};

pub const DEFAULT_JOINTS: usize = 24;
pub const DEFAULT_VERTICES: usize = 6890;
pub const DEFAULT_BETAS: usize = 10;

const ROW_SUM_TOL: f64 = 1e-6;
const ROTATION_TOL: f64 = 1e-5;
const MAX_BETA: f64 = 10.0;

/// Template mesh, kinematic tree, skinning weights, shape blendshapes and
/// joint regressor. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct BodyModel {
    template: Vec<Vector3<f64>>,
    /// `V x 3 x B`, row-major.
    shape_dirs: Vec<f64>,
    /// `V x J`, row-major.
    skin_weights: Vec<f64>,
    /// `J x V`, row-major.
    regressor: Vec<f64>,
    parents: Vec<Option<usize>>,
    num_betas: usize,
    sparse_skin: Vec<Vec<(usize, f64)>>,
    sparse_regressor: Vec<Vec<(usize, f64)>>,
}

impl BodyModel {
    pub fn new(
        template: Vec<Vector3<f64>>,
        shape_dirs: Vec<f64>,
        skin_weights: Vec<f64>,
        regressor: Vec<f64>,
        parents: Vec<Option<usize>>,
        num_betas: usize,
    ) -> Result<Self> {
        let v = template.len();
        let j = parents.len();
        if v == 0 || j == 0 {
            return Err(Error::invalid("body model needs at least one vertex and one joint"));
        }
        check_dim("shape blendshapes", v * 3 * num_betas, shape_dirs.len())?;
        check_dim("skinning weights", v * j, skin_weights.len())?;
        check_dim("joint regressor", j * v, regressor.len())?;

        if parents[0].is_some() {
            return Err(Error::invalid("joint 0 must be the root"));
        }
        for (k, p) in parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < k => {}
                Some(p) => {
                    return Err(Error::invalid(format!(
                        "joint {k} has parent {p}; parents must precede children"
                    )))
                }
                None => return Err(Error::invalid(format!("joint {k} has no parent"))),
            }
        }
        let all = template
            .iter()
            .flat_map(|p| p.iter())
            .chain(&shape_dirs)
            .chain(&skin_weights)
            .chain(&regressor);
        if all.into_iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("body model arrays".into()));
        }
        for (n, row) in skin_weights.chunks(j).enumerate() {
            if row.iter().any(|w| *w < 0.0) {
                return Err(Error::invalid(format!("negative skinning weight on vertex {n}")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::invalid(format!(
                    "skinning weights of vertex {n} sum to {s}"
                )));
            }
        }
        for (k, row) in regressor.chunks(v).enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::invalid(format!("regressor row {k} sums to {s}")));
            }
        }

        let sparse_skin = skin_weights
            .chunks(j)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter(|(_, w)| **w != 0.0)
                    .map(|(k, w)| (k, *w))
                    .collect()
            })
            .collect();
        let sparse_regressor = regressor
            .chunks(v)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter(|(_, w)| **w != 0.0)
                    .map(|(n, w)| (n, *w))
                    .collect()
            })
            .collect();

        Ok(Self {
            template,
            shape_dirs,
            skin_weights,
            regressor,
            parents,
            num_betas,
            sparse_skin,
            sparse_regressor,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.template.len()
    }

    pub fn num_joints(&self) -> usize {
        self.parents.len()
    }

    pub fn num_betas(&self) -> usize {
        self.num_betas
    }

    pub fn template(&self) -> &[Vector3<f64>] {
        &self.template
    }

    pub fn shape_dirs(&self) -> &[f64] {
        &self.shape_dirs
    }

    pub fn skin_weights(&self) -> &[f64] {
        &self.skin_weights
    }

    pub fn regressor(&self) -> &[f64] {
        &self.regressor
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    /// Template plus the shape blendshapes weighted by `betas`.
    pub fn shaped_vertices(&self, betas: &[f64]) -> Vec<Vector3<f64>> {
        let b = self.num_betas;
        self.template
            .iter()
            .enumerate()
            .map(|(n, t)| {
                let mut v = *t;
                for c in 0..3 {
                    let dirs = &self.shape_dirs[(n * 3 + c) * b..(n * 3 + c + 1) * b];
                    v[c] += dirs.iter().zip(betas).map(|(d, beta)| d * beta).sum::<f64>();
                }
                v
            })
            .collect()
    }

    /// Applies the (linear) joint regressor to an arbitrary vertex array.
    pub fn regress_joints(&self, vertices: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        self.sparse_regressor
            .iter()
            .map(|row| row.iter().map(|(n, w)| vertices[*n] * *w).sum())
            .collect()
    }

    /// Mean distance from each template vertex to its nearest neighbour.
    pub fn mean_nearest_vertex_distance(&self) -> f64 {
        let pts = &self.template;
        if pts.len() < 2 {
            return 0.0;
        }
        // Uniform grid keyed by cell so the search stays near-linear.
        let extent = pts.iter().fold(0.0f64, |acc, p| acc.max(p.amax()));
        let cell = (extent * 2.0 / (pts.len() as f64).cbrt()).max(1e-6);
        let key = |p: &Vector3<f64>| {
            (
                (p.x / cell).floor() as i64,
                (p.y / cell).floor() as i64,
                (p.z / cell).floor() as i64,
            )
        };
        let mut grid: std::collections::HashMap<(i64, i64, i64), Vec<usize>> = Default::default();
        for (i, p) in pts.iter().enumerate() {
            grid.entry(key(p)).or_default().push(i);
        }
        let mut total = 0.0;
        for (i, p) in pts.iter().enumerate() {
            let (cx, cy, cz) = key(p);
            let mut best = f64::INFINITY;
            let mut ring = 1i64;
            loop {
                for dx in -ring..=ring {
                    for dy in -ring..=ring {
                        for dz in -ring..=ring {
                            if let Some(ids) = grid.get(&(cx + dx, cy + dy, cz + dz)) {
                                for &k in ids {
                                    if k != i {
                                        best = best.min((pts[k] - p).norm());
                                    }
                                }
                            }
                        }
                    }
                }
                // Points outside the searched cube are at least `ring * cell` away.
                if best <= ring as f64 * cell || ring > 64 {
                    break;
                }
                ring *= 2;
            }
            total += best;
        }
        total / pts.len() as f64
    }
}

/// Per-joint rotations (joint 0 carries the global orientation) and the root
/// translation.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseParams {
    pub joint_rotations: Vec<Matrix3<f64>>,
    pub root_translation: Vector3<f64>,
}

impl PoseParams {
    pub fn identity(num_joints: usize) -> Self {
        Self {
            joint_rotations: vec![Matrix3::identity(); num_joints],
            root_translation: Vector3::zeros(),
        }
    }

    pub fn from_rot6(raw: &[Rot6], root_translation: Vector3<f64>) -> Self {
        Self {
            joint_rotations: raw.iter().map(rotation::rot6_to_matrix).collect(),
            root_translation,
        }
    }

    pub fn to_rot6(&self) -> Vec<Rot6> {
        self.joint_rotations.iter().map(rotation::matrix_to_rot6).collect()
    }

    pub fn validate(&self, num_joints: usize) -> Result<()> {
        check_dim("pose joint count", num_joints, self.joint_rotations.len())?;
        for (joint, r) in self.joint_rotations.iter().enumerate() {
            rotation::check_rotation(r, ROTATION_TOL)
                .map_err(|reason| Error::InvalidRotation { joint, reason })?;
        }
        if self.root_translation.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("root translation".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeParams {
    betas: Vec<f64>,
}

impl ShapeParams {
    pub fn new(betas: Vec<f64>) -> Result<Self> {
        Self::check(&betas)?;
        Ok(Self { betas })
    }

    pub fn zeros(num_betas: usize) -> Self {
        Self {
            betas: vec![0.0; num_betas],
        }
    }

    /// Builds shape parameters without the magnitude bound. Optimizers use
    /// this for intermediate iterates.
    pub fn unchecked(betas: Vec<f64>) -> Self {
        Self { betas }
    }

    fn check(betas: &[f64]) -> Result<()> {
        if betas.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("shape coefficients".into()));
        }
        if let Some(b) = betas.iter().find(|b| b.abs() > MAX_BETA) {
            return Err(Error::invalid(format!(
                "shape coefficient {b} exceeds the bound {MAX_BETA}"
            )));
        }
        Ok(())
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }
}

/// Intermediates of a forward pass that the backward pass needs.
#[derive(Clone, Debug)]
pub struct LbsState {
    pub shaped: Vec<Vector3<f64>>,
    pub rest_joints: Vec<Vector3<f64>>,
    pub world_rot: Vec<Matrix3<f64>>,
    pub world_pos: Vec<Vector3<f64>>,
}

#[derive(Clone, Debug)]
pub struct LbsOutput {
    pub vertices: Vec<Vector3<f64>>,
    pub joints: Vec<Vector3<f64>>,
    pub state: LbsState,
}

/// Gradients of a scalar loss with respect to the LBS inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LbsGrads {
    pub joint_rotations: Vec<Matrix3<f64>>,
    pub betas: Vec<f64>,
    pub root_translation: Vector3<f64>,
}

impl LbsGrads {
    /// Chains the rotation-matrix gradients into 6D parameter gradients.
    pub fn to_rot6(&self, raw: &[Rot6]) -> Vec<Rot6> {
        raw.iter()
            .zip(&self.joint_rotations)
            .map(|(r, g)| rotation::rot6_backward(r, g))
            .collect()
    }
}

/// Linear blend skinning with shape blendshapes. Validates dimensions and
/// rotation blocks.
pub fn forward_lbs(model: &BodyModel, pose: &PoseParams, shape: &ShapeParams) -> Result<LbsOutput> {
    pose.validate(model.num_joints())?;
    check_dim("shape coefficients", model.num_betas(), shape.betas.len())?;
    Ok(forward_lbs_unchecked(model, pose, shape.betas()))
}

/// Same as [`forward_lbs`] but trusts the inputs. Used inside optimizers
/// where the rotations come straight out of Gram-Schmidt.
pub fn forward_lbs_unchecked(model: &BodyModel, pose: &PoseParams, betas: &[f64]) -> LbsOutput {
    let shaped = model.shaped_vertices(betas);
    let rest_joints = model.regress_joints(&shaped);
    let nj = model.num_joints();

    let mut world_rot = Vec::with_capacity(nj);
    let mut world_pos = Vec::with_capacity(nj);
    for k in 0..nj {
        let r = pose.joint_rotations[k];
        match model.parents[k] {
            None => {
                world_rot.push(r);
                world_pos.push(rest_joints[k]);
            }
            Some(p) => {
                let gr: Matrix3<f64> = world_rot[p];
                world_pos.push(gr * (rest_joints[k] - rest_joints[p]) + world_pos[p]);
                world_rot.push(gr * r);
            }
        }
    }

    // Skinning transform of joint k: x -> R_k x + (t_k - R_k J_k).
    let offsets: Vec<Vector3<f64>> = (0..nj)
        .map(|k| world_pos[k] - world_rot[k] * rest_joints[k])
        .collect();
    let trans = pose.root_translation;
    let vertices = shaped
        .iter()
        .zip(&model.sparse_skin)
        .map(|(v, row)| {
            let mut out = trans;
            for &(k, w) in row {
                out += (world_rot[k] * v + offsets[k]) * w;
            }
            out
        })
        .collect();
    let joints = world_pos.iter().map(|p| p + trans).collect();

    LbsOutput {
        vertices,
        joints,
        state: LbsState {
            shaped,
            rest_joints,
            world_rot,
            world_pos,
        },
    }
}

/// Reverse-mode pass through [`forward_lbs`]. Either upstream gradient may be
/// empty, meaning zero.
pub fn lbs_backward(
    model: &BodyModel,
    pose: &PoseParams,
    state: &LbsState,
    d_vertices: &[Vector3<f64>],
    d_joints: &[Vector3<f64>],
) -> LbsGrads {
    let nj = model.num_joints();
    let nv = model.num_vertices();
    let mut d_world_rot = vec![Matrix3::<f64>::zeros(); nj];
    let mut d_world_pos = vec![Vector3::<f64>::zeros(); nj];
    let mut d_rest_joints = vec![Vector3::<f64>::zeros(); nj];
    let mut d_shaped = vec![Vector3::<f64>::zeros(); nv];
    let mut d_trans = Vector3::zeros();

    // Skinning: v = sum_k w_k (R_k s + o_k), o_k = t_k - R_k J_k.
    let mut d_skin_rot = vec![Matrix3::<f64>::zeros(); nj];
    let mut d_skin_off = vec![Vector3::<f64>::zeros(); nj];
    if !d_vertices.is_empty() {
        for (n, g) in d_vertices.iter().enumerate() {
            d_trans += g;
            let s = state.shaped[n];
            let mut ds = Vector3::zeros();
            for &(k, w) in &model.sparse_skin[n] {
                let wg = g * w;
                d_skin_rot[k] += wg * s.transpose();
                d_skin_off[k] += wg;
                ds += state.world_rot[k].transpose() * wg;
            }
            d_shaped[n] = ds;
        }
    }
    for k in 0..nj {
        d_world_rot[k] += d_skin_rot[k] - d_skin_off[k] * state.rest_joints[k].transpose();
        d_world_pos[k] += d_skin_off[k];
        d_rest_joints[k] -= state.world_rot[k].transpose() * d_skin_off[k];
    }
    if !d_joints.is_empty() {
        for (k, g) in d_joints.iter().enumerate() {
            d_world_pos[k] += g;
            d_trans += g;
        }
    }

    // Kinematic chain, children before parents.
    let mut d_rot = vec![Matrix3::<f64>::zeros(); nj];
    for k in (0..nj).rev() {
        match model.parents[k] {
            None => {
                d_rot[k] = d_world_rot[k];
                d_rest_joints[k] += d_world_pos[k];
            }
            Some(p) => {
                let gr = state.world_rot[p];
                let bone = state.rest_joints[k] - state.rest_joints[p];
                let dwr = d_world_rot[k];
                let dwp = d_world_pos[k];
                d_world_rot[p] += dwr * pose.joint_rotations[k].transpose() + dwp * bone.transpose();
                d_rot[k] = gr.transpose() * dwr;
                d_world_pos[p] += dwp;
                let dj = gr.transpose() * dwp;
                d_rest_joints[k] += dj;
                d_rest_joints[p] -= dj;
            }
        }
    }

    // Joint regressor, then blendshapes.
    for (k, row) in model.sparse_regressor.iter().enumerate() {
        let dj = d_rest_joints[k];
        for &(n, w) in row {
            d_shaped[n] += dj * w;
        }
    }
    let b = model.num_betas;
    let mut d_betas = vec![0.0; b];
    for (n, ds) in d_shaped.iter().enumerate() {
        for c in 0..3 {
            let dirs = &model.shape_dirs[(n * 3 + c) * b..(n * 3 + c + 1) * b];
            for (db, d) in d_betas.iter_mut().zip(dirs) {
                *db += d * ds[c];
            }
        }
    }

    LbsGrads {
        joint_rotations: d_rot,
        betas: d_betas,
        root_translation: d_trans,
    }
}
