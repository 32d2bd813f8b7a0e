//! Per-vertex Gaussian parameters and the scaffold that places them on the
//! posed body.
//!
//! Raw parameters are unconstrained: means are `vertex + offset`, rotations
//! are normalized quaternions, scales are `exp(log_scale)` clamped to
//! `[MIN_SCALE, MAX_SCALE]`, opacity and colour go through a sigmoid.

use nalgebra::{Matrix3, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rotation::{quat_to_matrix, quat_to_matrix_backward};

/// Raw degrees of freedom per Gaussian: offset 3, rotation 4, scale 3,
/// opacity 1, colour 3.
pub const PARAMS_PER_GAUSSIAN: usize = 14;
pub const MIN_SCALE: f64 = 1e-4;
pub const MAX_SCALE: f64 = 0.5;
pub const INIT_OPACITY: f64 = 0.9;
pub const INIT_COLOR: f64 = 0.5;
const QUAT_EPS: f64 = 1e-8;
const TIGHT_EPS: f64 = 1e-8;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScaffoldConfig {
    pub gaussians_per_vertex: usize,
    pub fixed_opacity_one: bool,
    /// Activated scales are clamped to `[min_scale, max_scale]` meters.
    pub min_scale: f64,
    pub max_scale: f64,
}

impl Default for ScaffoldConfig {
    fn default() -> Self {
        Self {
            gaussians_per_vertex: 1,
            fixed_opacity_one: false,
            min_scale: MIN_SCALE,
            max_scale: MAX_SCALE,
        }
    }
}

impl ScaffoldConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.gaussians_per_vertex) {
            return Err(Error::invalid(format!(
                "gaussians_per_vertex must be 1, 2 or 3 (got {})",
                self.gaussians_per_vertex
            )));
        }
        if !(self.min_scale > 0.0 && self.min_scale <= self.max_scale) {
            return Err(Error::invalid(format!(
                "invalid scale bounds [{}, {}]",
                self.min_scale, self.max_scale
            )));
        }
        Ok(())
    }

    pub(crate) fn clamped_scale(&self, log_scale: f64) -> (f64, bool) {
        let s = log_scale.exp();
        if s < self.min_scale {
            (self.min_scale, false)
        } else if s > self.max_scale {
            (self.max_scale, false)
        } else {
            (s, true)
        }
    }
}

/// Raw per-Gaussian parameters, one row per Gaussian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianAttributes {
    pub offsets: Vec<Vector3<f64>>,
    /// Quaternions `(w, x, y, z)`, not necessarily unit length.
    pub rotations: Vec<Vector4<f64>>,
    pub log_scales: Vec<Vector3<f64>>,
    pub opacity_logits: Vec<f64>,
    pub colors_raw: Vec<Vector3<f64>>,
}

impl GaussianAttributes {
    pub fn zeros(n: usize) -> Self {
        Self {
            offsets: vec![Vector3::zeros(); n],
            rotations: vec![Vector4::zeros(); n],
            log_scales: vec![Vector3::zeros(); n],
            opacity_logits: vec![0.0; n],
            colors_raw: vec![Vector3::zeros(); n],
        }
    }

    /// Starting point on the body surface: zero offsets, identity rotations,
    /// isotropic `scale`, opacity 0.9 and mid-grey colour.
    pub fn initial(n: usize, scale: f64) -> Self {
        Self {
            offsets: vec![Vector3::zeros(); n],
            rotations: vec![Vector4::new(1.0, 0.0, 0.0, 0.0); n],
            log_scales: vec![Vector3::repeat(scale.ln()); n],
            opacity_logits: vec![logit(INIT_OPACITY); n],
            colors_raw: vec![Vector3::repeat(logit(INIT_COLOR)); n],
        }
    }

    /// Isotropic initial scale: half the mean nearest-vertex spacing.
    pub fn initial_scale(mean_spacing: f64) -> f64 {
        (mean_spacing / 2.0).clamp(MIN_SCALE, MAX_SCALE)
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        check_dim("rotations", n, self.rotations.len())?;
        check_dim("log scales", n, self.log_scales.len())?;
        check_dim("opacity logits", n, self.opacity_logits.len())?;
        check_dim("colours", n, self.colors_raw.len())?;
        if self.to_flat().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("gaussian attributes".into()));
        }
        Ok(())
    }

    /// Row-major flattening, 14 values per Gaussian in the order offset,
    /// rotation, log scale, opacity logit, colour.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * PARAMS_PER_GAUSSIAN);
        for i in 0..self.len() {
            out.extend(self.offsets[i].iter());
            out.extend(self.rotations[i].iter());
            out.extend(self.log_scales[i].iter());
            out.push(self.opacity_logits[i]);
            out.extend(self.colors_raw[i].iter());
        }
        out
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() % PARAMS_PER_GAUSSIAN != 0 {
            return Err(Error::invalid(format!(
                "flat attribute length {} is not a multiple of {PARAMS_PER_GAUSSIAN}",
                flat.len()
            )));
        }
        let n = flat.len() / PARAMS_PER_GAUSSIAN;
        let mut out = Self::zeros(n);
        for (i, row) in flat.chunks(PARAMS_PER_GAUSSIAN).enumerate() {
            out.offsets[i] = Vector3::new(row[0], row[1], row[2]);
            out.rotations[i] = Vector4::new(row[3], row[4], row[5], row[6]);
            out.log_scales[i] = Vector3::new(row[7], row[8], row[9]);
            out.opacity_logits[i] = row[10];
            out.colors_raw[i] = Vector3::new(row[11], row[12], row[13]);
        }
        Ok(out)
    }
}

/// Activated world-space Gaussians ready for rasterization.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianSet {
    pub means: Vec<Vector3<f64>>,
    pub covariances: Vec<Matrix3<f64>>,
    pub opacities: Vec<f64>,
    pub colors: Vec<Vector3<f64>>,
}

impl GaussianSet {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        check_dim("covariances", n, self.covariances.len())?;
        check_dim("opacities", n, self.opacities.len())?;
        check_dim("colours", n, self.colors.len())?;
        Ok(())
    }
}

/// Gradients with respect to the activated Gaussians. Covariance gradients
/// are symmetric full-matrix gradients.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianSetGrads {
    pub means: Vec<Vector3<f64>>,
    pub covariances: Vec<Matrix3<f64>>,
    pub opacities: Vec<f64>,
    pub colors: Vec<Vector3<f64>>,
}

impl GaussianSetGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            means: vec![Vector3::zeros(); n],
            covariances: vec![Matrix3::zeros(); n],
            opacities: vec![0.0; n],
            colors: vec![Vector3::zeros(); n],
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.means.iter_mut().zip(&other.means) {
            *a += b;
        }
        for (a, b) in self.covariances.iter_mut().zip(&other.covariances) {
            *a += b;
        }
        for (a, b) in self.opacities.iter_mut().zip(&other.opacities) {
            *a += b;
        }
        for (a, b) in self.colors.iter_mut().zip(&other.colors) {
            *a += b;
        }
    }

    pub fn is_zero(&self) -> bool {
        self.means.iter().all(|v| v.iter().all(|x| *x == 0.0))
            && self.covariances.iter().all(|m| m.iter().all(|x| *x == 0.0))
            && self.opacities.iter().all(|x| *x == 0.0)
            && self.colors.iter().all(|v| v.iter().all(|x| *x == 0.0))
    }
}

/// Covariance `R S S^T R^T` from a raw quaternion and log scales.
pub fn covariance(
    rotation: &Vector4<f64>,
    log_scales: &Vector3<f64>,
    cfg: &ScaffoldConfig,
) -> Result<Matrix3<f64>> {
    let norm = rotation.norm();
    if !(norm >= QUAT_EPS) {
        return Err(Error::invalid(format!("quaternion norm {norm:e} is degenerate")));
    }
    let r = quat_to_matrix(&(rotation / norm));
    let s = Vector3::from_fn(|i, _| cfg.clamped_scale(log_scales[i]).0);
    let m = r * Matrix3::from_diagonal(&s);
    Ok(m * m.transpose())
}

/// Places Gaussian `n` at `vertices[n / g] + offsets[n]` and activates the
/// remaining attributes.
pub fn scaffold(
    vertices: &[Vector3<f64>],
    attrs: &GaussianAttributes,
    cfg: &ScaffoldConfig,
) -> Result<GaussianSet> {
    cfg.validate()?;
    let g = cfg.gaussians_per_vertex;
    check_dim("gaussian rows", vertices.len() * g, attrs.len())?;
    attrs.validate()?;
    if vertices.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFinite("vertices".into()));
    }

    let n = attrs.len();
    let mut set = GaussianSet {
        means: Vec::with_capacity(n),
        covariances: Vec::with_capacity(n),
        opacities: Vec::with_capacity(n),
        colors: Vec::with_capacity(n),
    };
    for i in 0..n {
        set.means.push(vertices[i / g] + attrs.offsets[i]);
        set.covariances
            .push(covariance(&attrs.rotations[i], &attrs.log_scales[i], cfg)?);
        set.opacities.push(if cfg.fixed_opacity_one {
            1.0
        } else {
            sigmoid(attrs.opacity_logits[i])
        });
        set.colors.push(attrs.colors_raw[i].map(sigmoid));
    }
    Ok(set)
}

/// Adjoint of [`scaffold`]: returns gradients for the vertices and the raw
/// attributes.
pub fn scaffold_backward(
    attrs: &GaussianAttributes,
    cfg: &ScaffoldConfig,
    grads: &GaussianSetGrads,
) -> (Vec<Vector3<f64>>, GaussianAttributes) {
    let g = cfg.gaussians_per_vertex;
    let n = attrs.len();
    let mut d_vertices = vec![Vector3::zeros(); n / g];
    let mut d_attrs = GaussianAttributes::zeros(n);
    for i in 0..n {
        d_vertices[i / g] += grads.means[i];
        d_attrs.offsets[i] = grads.means[i];

        let q = attrs.rotations[i];
        let norm = q.norm();
        let qn = q / norm;
        let r = quat_to_matrix(&qn);
        let mut s = Vector3::zeros();
        let mut live = [false; 3];
        for k in 0..3 {
            let (v, l) = cfg.clamped_scale(attrs.log_scales[i][k]);
            s[k] = v;
            live[k] = l;
        }
        let m = r * Matrix3::from_diagonal(&s);
        let gs = grads.covariances[i];
        // Sigma = M M^T, M = R S
        let d_m = (gs + gs.transpose()) * m;
        let d_r = d_m * Matrix3::from_diagonal(&s);
        for k in 0..3 {
            if live[k] {
                let d_s = r.column(k).dot(&d_m.column(k));
                d_attrs.log_scales[i][k] = d_s * s[k];
            }
        }
        let d_qn = quat_to_matrix_backward(&qn, &d_r);
        d_attrs.rotations[i] = (d_qn - qn * qn.dot(&d_qn)) / norm;

        if !cfg.fixed_opacity_one {
            let a = sigmoid(attrs.opacity_logits[i]);
            d_attrs.opacity_logits[i] = grads.opacities[i] * a * (1.0 - a);
        }
        let c = attrs.colors_raw[i].map(sigmoid);
        d_attrs.colors_raw[i] = grads.colors[i].component_mul(&c.map(|c| c * (1.0 - c)));
    }
    (d_vertices, d_attrs)
}

/// Mean offset norm (not squared).
pub fn tightness(attrs: &GaussianAttributes) -> f64 {
    if attrs.is_empty() {
        return 0.0;
    }
    attrs.offsets.iter().map(|d| d.norm()).sum::<f64>() / attrs.len() as f64
}

/// Gradient of `scale * tightness` with respect to the offsets.
pub fn tightness_backward(attrs: &GaussianAttributes, scale: f64) -> Vec<Vector3<f64>> {
    let n = attrs.len() as f64;
    attrs
        .offsets
        .iter()
        .map(|d| d * (scale / (n * d.norm().max(TIGHT_EPS))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::SymmetricEigen;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn wide() -> ScaffoldConfig {
        ScaffoldConfig {
            max_scale: 10.0,
            ..Default::default()
        }
    }

    fn random_attrs(n: usize, rng: &mut ChaCha8Rng) -> GaussianAttributes {
        let flat: Vec<f64> = (0..n * PARAMS_PER_GAUSSIAN)
            .map(|k| match k % PARAMS_PER_GAUSSIAN {
                7..=9 => rng.random_range(-4.0..-1.0),
                _ => rng.random_range(-1.0..1.0),
            })
            .collect();
        GaussianAttributes::from_flat(&flat).unwrap()
    }

    #[test]
    fn zero_offsets_keep_vertices() {
        let verts = vec![Vector3::new(0.1, 0.2, 0.3), Vector3::new(-1.0, 0.5, 2.0)];
        let attrs = GaussianAttributes::initial(2, 0.01);
        let set = scaffold(&verts, &attrs, &ScaffoldConfig::default()).unwrap();
        assert_eq!(set.means, verts);
        assert_relative_eq!(set.opacities[0], 0.9, epsilon = 1e-12);
        assert_relative_eq!(set.colors[1], Vector3::repeat(0.5), epsilon = 1e-12);
    }

    #[test]
    fn identity_rotation_gives_squared_scales() {
        let sigma = covariance(
            &Vector4::new(1.0, 0.0, 0.0, 0.0),
            &Vector3::new(0.0, 2f64.ln(), 3f64.ln()),
            &wide(),
        )
        .unwrap();
        assert_relative_eq!(
            sigma,
            Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 9.0)),
            epsilon = 1e-12
        );
    }

    #[test]
    fn quarter_turn_about_z_swaps_axes() {
        let q = crate::rotation::axis_angle_quat(&Vector3::z(), std::f64::consts::FRAC_PI_2);
        let sigma = covariance(&q, &Vector3::new(0.0, 2f64.ln(), 3f64.ln()), &wide()).unwrap();
        // Independent route: nalgebra's rotation matrix and explicit products.
        let r = nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), std::f64::consts::FRAC_PI_2)
            .into_inner();
        let s = Matrix3::from_diagonal(&Vector3::new(1.0, 2.0, 3.0));
        let expected = r * s * s.transpose() * r.transpose();
        assert_relative_eq!(sigma, expected, epsilon = 1e-12);
        assert_relative_eq!(
            sigma,
            Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 9.0)),
            epsilon = 1e-12
        );
    }

    #[test]
    fn clamp_bounds_scales() {
        let sigma = covariance(
            &Vector4::new(1.0, 0.0, 0.0, 0.0),
            &Vector3::new(-20.0, 0.0, 5.0),
            &ScaffoldConfig::default(),
        )
        .unwrap();
        assert_relative_eq!(sigma[(0, 0)], MIN_SCALE * MIN_SCALE, epsilon = 1e-20);
        assert_relative_eq!(sigma[(1, 1)], MAX_SCALE * MAX_SCALE);
        assert_relative_eq!(sigma[(2, 2)], MAX_SCALE * MAX_SCALE);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let verts = vec![Vector3::zeros()];
        let mut attrs = GaussianAttributes::initial(1, 0.01);
        attrs.rotations[0] = Vector4::new(1e-9, 0.0, 0.0, 0.0);
        assert!(scaffold(&verts, &attrs, &ScaffoldConfig::default()).is_err());
        let mut attrs = GaussianAttributes::initial(1, 0.01);
        attrs.colors_raw[0].x = f64::NAN;
        assert!(matches!(
            scaffold(&verts, &attrs, &ScaffoldConfig::default()),
            Err(Error::NonFinite(_))
        ));
        let attrs = GaussianAttributes::initial(2, 0.01);
        assert!(matches!(
            scaffold(&verts, &attrs, &ScaffoldConfig::default()),
            Err(Error::Dimension { .. })
        ));
        let cfg = ScaffoldConfig {
            gaussians_per_vertex: 4,
            ..Default::default()
        };
        assert!(scaffold(&verts, &GaussianAttributes::initial(4, 0.01), &cfg).is_err());
    }

    #[test]
    fn multiple_gaussians_share_a_vertex() {
        let verts = vec![Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 1.0, 0.0)];
        let mut attrs = GaussianAttributes::initial(6, 0.01);
        attrs.offsets[4] = Vector3::new(0.0, 0.0, 0.1);
        let cfg = ScaffoldConfig {
            gaussians_per_vertex: 3,
            fixed_opacity_one: true,
            ..Default::default()
        };
        let set = scaffold(&verts, &attrs, &cfg).unwrap();
        assert_eq!(set.means[2], verts[0]);
        assert_eq!(set.means[4], Vector3::new(0.0, 1.0, 0.1));
        assert!(set.opacities.iter().all(|a| *a == 1.0));
    }

    #[test]
    fn tightness_values() {
        let mut attrs = GaussianAttributes::initial(2, 0.01);
        assert_eq!(tightness(&attrs), 0.0);
        attrs.offsets[0] = Vector3::new(3.0, 0.0, 0.0);
        attrs.offsets[1] = Vector3::new(0.0, 4.0, 0.0);
        assert_relative_eq!(tightness(&attrs), 3.5);
        let grads = tightness_backward(&attrs, 1.0);
        assert_relative_eq!(grads[0], Vector3::new(0.5, 0.0, 0.0));
        assert_relative_eq!(grads[1], Vector3::new(0.0, 0.5, 0.0));
    }

    #[test]
    fn covariance_is_psd_for_random_attributes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let q = Vector4::from_fn(|_, _| rng.random_range(-1.0..1.0));
            if q.norm() < 1e-3 {
                continue;
            }
            let ls = Vector3::from_fn(|_, _| rng.random_range(-10.0..2.0));
            let sigma = covariance(&q, &ls, &ScaffoldConfig::default()).unwrap();
            assert_relative_eq!(sigma, sigma.transpose(), epsilon = 1e-15);
            let eig = SymmetricEigen::new(sigma).eigenvalues;
            assert!(eig.iter().all(|e| *e >= -1e-9), "{eig:?}");
        }
    }

    #[test]
    fn quaternion_sign_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let q = Vector4::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let ls = Vector3::from_fn(|_, _| rng.random_range(-5.0..-1.0));
            let cfg = ScaffoldConfig::default();
            assert_eq!(
                covariance(&q, &ls, &cfg).unwrap(),
                covariance(&-q, &ls, &cfg).unwrap()
            );
        }
    }

    #[test]
    fn vertex_perturbation_moves_means_one_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let attrs = random_attrs(4, &mut rng);
        let verts: Vec<_> = (0..4).map(|i| Vector3::new(i as f64, 0.5, -0.25)).collect();
        let base = scaffold(&verts, &attrs, &ScaffoldConfig::default()).unwrap();
        let mut moved = verts.clone();
        let delta = Vector3::new(0.125, -0.5, 0.25);
        moved[2] += delta;
        let after = scaffold(&moved, &attrs, &ScaffoldConfig::default()).unwrap();
        assert_eq!(after.means[2] - base.means[2], delta);
        assert_eq!(after.means[1], base.means[1]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 5;
        let attrs = random_attrs(n, &mut rng);
        let verts: Vec<_> = (0..n)
            .map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let upstream = GaussianSetGrads {
            means: (0..n).map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect(),
            covariances: (0..n)
                .map(|_| {
                    let a = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
                    a + a.transpose()
                })
                .collect(),
            opacities: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            colors: (0..n).map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect(),
        };
        let cfg = ScaffoldConfig::default();
        let loss = |verts: &[Vector3<f64>], attrs: &GaussianAttributes| {
            let set = scaffold(verts, attrs, &cfg).unwrap();
            let mut total = 0.0;
            for i in 0..n {
                total += set.means[i].dot(&upstream.means[i]);
                total += set.covariances[i].component_mul(&upstream.covariances[i]).sum();
                total += set.opacities[i] * upstream.opacities[i];
                total += set.colors[i].dot(&upstream.colors[i]);
            }
            total
        };
        let (d_verts, d_attrs) = scaffold_backward(&attrs, &cfg, &upstream);
        let flat = attrs.to_flat();
        let d_flat = d_attrs.to_flat();
        let h = 1e-6;
        for k in 0..flat.len() {
            let mut p = flat.clone();
            let mut m = flat.clone();
            p[k] += h;
            m[k] -= h;
            let fd = (loss(&verts, &GaussianAttributes::from_flat(&p).unwrap())
                - loss(&verts, &GaussianAttributes::from_flat(&m).unwrap()))
                / (2.0 * h);
            let err = (fd - d_flat[k]).abs() / fd.abs().max(d_flat[k].abs()).max(1e-6);
            assert!(err < 1e-3, "param {k}: fd {fd} analytic {}", d_flat[k]);
        }
        for i in 0..n {
            assert_eq!(d_verts[i], upstream.means[i]);
        }
    }

    #[test]
    fn tightness_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let attrs = random_attrs(6, &mut rng);
        let grads = tightness_backward(&attrs, 1.0);
        let h = 1e-6;
        for i in 0..6 {
            for c in 0..3 {
                let mut p = attrs.clone();
                let mut m = attrs.clone();
                p.offsets[i][c] += h;
                m.offsets[i][c] -= h;
                let fd = (tightness(&p) - tightness(&m)) / (2.0 * h);
                assert!((fd - grads[i][c]).abs() <= 1e-3 * fd.abs().max(1e-6));
            }
        }
    }
}
