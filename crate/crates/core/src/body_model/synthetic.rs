//! Procedural capsule-limb humanoid with the SMPL joint layout.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::BodyModel;
use crate::error::{Error, Result};

pub const JOINT_NAMES: [&str; 24] = [
    "pelvis",
    "left_hip",
    "right_hip",
    "spine1",
    "left_knee",
    "right_knee",
    "spine2",
    "left_ankle",
    "right_ankle",
    "spine3",
    "left_foot",
    "right_foot",
    "neck",
    "left_collar",
    "right_collar",
    "head",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hand",
    "right_hand",
];

pub const SMPL_PARENTS: [Option<usize>; 24] = [
    None,
    Some(0),
    Some(0),
    Some(0),
    Some(1),
    Some(2),
    Some(3),
    Some(4),
    Some(5),
    Some(6),
    Some(7),
    Some(8),
    Some(9),
    Some(9),
    Some(9),
    Some(12),
    Some(13),
    Some(14),
    Some(16),
    Some(17),
    Some(18),
    Some(19),
    Some(20),
    Some(21),
];

/// Rest joint positions in meters; y is up and the body faces +z.
const REST_JOINTS: [[f64; 3]; 24] = [
    [0.0, 0.0, 0.0],
    [0.09, -0.08, 0.0],
    [-0.09, -0.08, 0.0],
    [0.0, 0.11, -0.01],
    [0.10, -0.46, 0.01],
    [-0.10, -0.46, 0.01],
    [0.0, 0.24, -0.01],
    [0.10, -0.86, -0.02],
    [-0.10, -0.86, -0.02],
    [0.0, 0.30, 0.0],
    [0.11, -0.91, 0.11],
    [-0.11, -0.91, 0.11],
    [0.0, 0.50, -0.01],
    [0.07, 0.42, -0.01],
    [-0.07, 0.42, -0.01],
    [0.0, 0.60, 0.02],
    [0.18, 0.44, -0.01],
    [-0.18, 0.44, -0.01],
    [0.44, 0.44, -0.02],
    [-0.44, 0.44, -0.02],
    [0.68, 0.44, -0.01],
    [-0.68, 0.44, -0.01],
    [0.76, 0.44, -0.01],
    [-0.76, 0.44, -0.01],
];

/// Capsule radius of the bone ending at each joint (index = child joint).
const BONE_RADII: [f64; 24] = [
    0.0, 0.09, 0.09, 0.13, 0.075, 0.075, 0.12, 0.05, 0.05, 0.13, 0.04, 0.04, 0.05, 0.06, 0.06,
    0.05, 0.05, 0.05, 0.045, 0.045, 0.035, 0.035, 0.03, 0.03,
];

const HEAD_JOINT: usize = 15;
const HEAD_RADIUS: f64 = 0.1;
const HEAD_LIFT: f64 = 0.09;
const MIN_PER_SEGMENT: usize = 2;
const REGRESSOR_NEIGHBOURS: usize = 8;
/// Blendshape displacement per unit coefficient, in meters.
const SHAPE_AMPLITUDE: f64 = 0.004;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticBodyConfig {
    pub vertices: usize,
    pub shape_dim: usize,
    pub seed: u64,
    /// Multiplies every capsule radius.
    pub radius_scale: f64,
    /// Multiplies every rest joint position (overall limb length).
    pub limb_scale: f64,
    /// Softmax temperature of the skinning weights, in meters.
    pub skin_temperature: f64,
}

impl Default for SyntheticBodyConfig {
    fn default() -> Self {
        Self {
            vertices: super::DEFAULT_VERTICES,
            shape_dim: super::DEFAULT_BETAS,
            seed: 7,
            radius_scale: 1.0,
            limb_scale: 1.0,
            skin_temperature: 0.02,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Segment {
    start: Vector3<f64>,
    end: Vector3<f64>,
    radius: f64,
    /// Joint whose transform moves this segment.
    owner: usize,
}

impl Segment {
    fn closest_on_axis(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let axis = self.end - self.start;
        let len2 = axis.norm_squared();
        if len2 < 1e-18 {
            return self.start;
        }
        let t = ((p - self.start).dot(&axis) / len2).clamp(0.0, 1.0);
        self.start + axis * t
    }

    fn surface_distance(&self, p: &Vector3<f64>) -> f64 {
        (p - self.closest_on_axis(p)).norm() - self.radius
    }

    fn area(&self) -> f64 {
        let len = (self.end - self.start).norm();
        2.0 * std::f64::consts::PI * self.radius * len
            + 4.0 * std::f64::consts::PI * self.radius * self.radius
    }
}

fn segments(cfg: &SyntheticBodyConfig) -> (Vec<Vector3<f64>>, Vec<Segment>) {
    let joints: Vec<Vector3<f64>> = REST_JOINTS
        .iter()
        .map(|j| Vector3::new(j[0], j[1], j[2]) * cfg.limb_scale)
        .collect();
    let mut segs: Vec<Segment> = (1..24)
        .map(|c| {
            let p = SMPL_PARENTS[c].expect("non-root joint");
            Segment {
                start: joints[p],
                end: joints[c],
                radius: BONE_RADII[c] * cfg.radius_scale,
                owner: p,
            }
        })
        .collect();
    let head = joints[HEAD_JOINT] + Vector3::new(0.0, HEAD_LIFT * cfg.limb_scale, 0.0);
    segs.push(Segment {
        start: head,
        end: head,
        radius: HEAD_RADIUS * cfg.radius_scale,
        owner: HEAD_JOINT,
    });
    (joints, segs)
}

/// Splits `total` vertices over segments proportionally to surface area,
/// largest remainders first, with a floor of `MIN_PER_SEGMENT` each.
fn allocate(total: usize, segs: &[Segment]) -> Vec<usize> {
    let spare = total - MIN_PER_SEGMENT * segs.len();
    let area: f64 = segs.iter().map(Segment::area).sum();
    let exact: Vec<f64> = segs.iter().map(|s| spare as f64 * s.area() / area).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = spare - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..segs.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts.iter().map(|c| c + MIN_PER_SEGMENT).collect()
}

fn perpendicular_frame(axis: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if axis.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    let e1 = axis.cross(&helper).normalize();
    let e2 = axis.cross(&e1);
    (e1, e2)
}

fn sphere_direction(u: f64, phi: f64) -> Vector3<f64> {
    let z = 1.0 - 2.0 * u;
    let r = (1.0 - z * z).max(0.0).sqrt();
    Vector3::new(r * phi.cos(), z, r * phi.sin())
}

/// Stratified capsule sampling. Returns points and their outward radial
/// directions.
fn sample_segment(
    seg: &Segment,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    const GOLDEN: f64 = 2.399_963_229_728_653;
    let axis_vec = seg.end - seg.start;
    let len = axis_vec.norm();
    let mut out = Vec::with_capacity(count);
    if len < 1e-12 {
        for i in 0..count {
            let u = (i as f64 + rng.random_range(0.25..0.75)) / count as f64;
            let phi = i as f64 * GOLDEN + rng.random_range(-0.2..0.2);
            let d = sphere_direction(u, phi);
            out.push((seg.start + d * seg.radius, d));
        }
        return out;
    }
    let axis = axis_vec / len;
    let (e1, e2) = perpendicular_frame(&axis);
    let cyl = 2.0 * len;
    let caps = 4.0 * seg.radius;
    let cyl_frac = cyl / (cyl + caps);
    for i in 0..count {
        let u = (i as f64 + rng.random_range(0.25..0.75)) / count as f64;
        let phi = i as f64 * GOLDEN + rng.random_range(-0.2..0.2);
        if u < cyl_frac {
            let t = u / cyl_frac;
            let radial = e1 * phi.cos() + e2 * phi.sin();
            out.push((seg.start + axis_vec * t + radial * seg.radius, radial));
        } else {
            let v = (u - cyl_frac) / (1.0 - cyl_frac);
            let local = sphere_direction(v, phi);
            let d = e1 * local.x + axis * local.y + e2 * local.z;
            let centre = if d.dot(&axis) >= 0.0 { seg.end } else { seg.start };
            out.push((centre + d * seg.radius, d));
        }
    }
    out
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

impl SyntheticBodyConfig {
    pub fn min_vertices() -> usize {
        MIN_PER_SEGMENT * 24
    }

    /// Builds the humanoid. Deterministic in the configuration; every array is
    /// rounded to f32 precision so a saved model reloads bit-identically.
    pub fn build(&self) -> Result<BodyModel> {
        if self.vertices < Self::min_vertices() {
            return Err(Error::invalid(format!(
                "{} vertices cannot cover the 24-segment layout (need at least {})",
                self.vertices,
                Self::min_vertices()
            )));
        }
        if !(self.radius_scale > 0.0 && self.limb_scale > 0.0 && self.skin_temperature > 0.0) {
            return Err(Error::invalid("scales and skin temperature must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (joints, segs) = segments(self);
        let counts = allocate(self.vertices, &segs);

        let mut points = Vec::with_capacity(self.vertices);
        let mut radial = Vec::with_capacity(self.vertices);
        for (seg, &count) in segs.iter().zip(&counts) {
            for (p, d) in sample_segment(seg, count, &mut rng) {
                points.push(p.map(round_f32));
                radial.push(d);
            }
        }
        let nv = points.len();
        let nj = joints.len();

        // Skinning: softmax over the two nearest segments.
        let mut skin = vec![0.0; nv * nj];
        for (n, p) in points.iter().enumerate() {
            let mut best = [(f64::INFINITY, 0usize); 2];
            for seg in &segs {
                let d = seg.surface_distance(p);
                if d < best[0].0 {
                    best[1] = best[0];
                    best[0] = (d, seg.owner);
                } else if d < best[1].0 {
                    best[1] = (d, seg.owner);
                }
            }
            let w0 = 1.0 / (1.0 + (-(best[1].0 - best[0].0) / self.skin_temperature).exp());
            let w0 = round_f32(w0);
            let row = &mut skin[n * nj..(n + 1) * nj];
            row[best[0].1] += w0;
            row[best[1].1] += 1.0 - w0;
        }

        // Joints: inverse-distance average of the nearest template vertices.
        let mut regressor = vec![0.0; nj * nv];
        for (k, j) in joints.iter().enumerate() {
            let mut near: Vec<(f64, usize)> =
                points.iter().enumerate().map(|(n, p)| ((p - j).norm(), n)).collect();
            near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            near.truncate(REGRESSOR_NEIGHBOURS.min(nv));
            let raw: Vec<f64> = near.iter().map(|(d, _)| 1.0 / (d + 1e-3)).collect();
            let total: f64 = raw.iter().sum();
            let mut acc = 0.0;
            for (i, ((_, n), w)) in near.iter().zip(&raw).enumerate() {
                let w = if i + 1 == near.len() {
                    round_f32(1.0 - acc)
                } else {
                    round_f32(w / total)
                };
                acc += w;
                regressor[k * nv + n] = w;
            }
        }

        // Shape modes: smooth radial inflation, mode 0 uniform.
        let b = self.shape_dim;
        let modes: Vec<(f64, f64, f64)> = (0..b)
            .map(|m| {
                if m == 0 {
                    (0.0, 0.0, 0.0)
                } else {
                    (
                        rng.random_range(2.0..8.0),
                        rng.random_range(0.0..std::f64::consts::TAU),
                        rng.random_range(-3.0..3.0),
                    )
                }
            })
            .collect();
        let mut shape_dirs = vec![0.0; nv * 3 * b];
        for (n, (p, d)) in points.iter().zip(&radial).enumerate() {
            for (m, &(freq, phase, lateral)) in modes.iter().enumerate() {
                let gain = if m == 0 {
                    1.0
                } else {
                    (freq * p.y + lateral * p.x + phase).cos()
                };
                for c in 0..3 {
                    shape_dirs[(n * 3 + c) * b + m] = round_f32(SHAPE_AMPLITUDE * gain * d[c]);
                }
            }
        }

        BodyModel::new(
            points,
            shape_dirs,
            skin,
            regressor,
            SMPL_PARENTS.to_vec(),
            b,
        )
    }
}
