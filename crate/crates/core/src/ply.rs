//! Export of a scaffolded avatar in the PLY layout used by common 3D Gaussian
//! splatting viewers: raw log-scales, logit opacity, `(w, x, y, z)`
//! quaternions and degree-0 spherical-harmonic colour.

use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::gaussian::{logit, GaussianAttributes, ScaffoldConfig};

/// Zeroth spherical-harmonic basis constant.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;

pub const PLY_PROPERTIES: [&str; 17] = [
    "x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
];

/// Opacity logits are clamped to this magnitude so a fixed opacity of one
/// stays finite in the file.
const MAX_LOGIT: f64 = 20.0;

/// One row per Gaussian, in [`PLY_PROPERTIES`] order.
pub fn ply_rows(
    vertices: &[Vector3<f64>],
    attrs: &GaussianAttributes,
    cfg: &ScaffoldConfig,
) -> Result<Vec<[f32; 17]>> {
    let set = crate::gaussian::scaffold(vertices, attrs, cfg)?;
    Ok((0..set.len())
        .map(|i| {
            let p = set.means[i];
            let c = set.colors[i].map(|v| (v - 0.5) / SH_C0);
            let q = attrs.rotations[i] / attrs.rotations[i].norm();
            let s = attrs.log_scales[i].map(|l| cfg.clamped_scale(l).0.ln());
            let o = logit(set.opacities[i].clamp(1e-9, 1.0 - 1e-9)).clamp(-MAX_LOGIT, MAX_LOGIT);
            [
                p.x, p.y, p.z, 0.0, 0.0, 0.0, c.x, c.y, c.z, o, s.x, s.y, s.z, q[0], q[1], q[2], q[3],
            ]
            .map(|v| v as f32)
        })
        .collect())
}

pub fn write_ply<W: Write>(out: &mut W, rows: &[[f32; 17]]) -> std::io::Result<()> {
    let mut header = format!("ply\nformat binary_little_endian 1.0\nelement vertex {}\n", rows.len());
    for p in PLY_PROPERTIES {
        header.push_str(&format!("property float {p}\n"));
    }
    header.push_str("end_header\n");
    out.write_all(header.as_bytes())?;
    let mut buf = Vec::with_capacity(rows.len() * 17 * 4);
    for r in rows {
        for v in r {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Scaffolds the avatar at `vertices` and writes it to `path`.
pub fn export_ply(
    path: &Path,
    vertices: &[Vector3<f64>],
    attrs: &GaussianAttributes,
    cfg: &ScaffoldConfig,
) -> Result<()> {
    let rows = ply_rows(vertices, attrs, cfg)?;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_ply(&mut w, &rows)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}
