//! Single-file binary container for body models.
//!
//! Layout (little-endian): magic `GSTB`, version `u32`, then `V`, `J`, `B` as
//! `u32`, followed by `f32` arrays in order: template `V x 3`, shape
//! blendshapes `V x 3 x B`, skinning weights `V x J`, joint regressor `J x V`,
//! and finally the parents as `J` `i32` values (`-1` for the root).

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use super::BodyModel;
use crate::error::{Error, Result};

pub const BODY_MAGIC: &[u8; 4] = b"GSTB";
pub const BODY_VERSION: u32 = 1;

pub fn write_body_model(model: &BodyModel, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(BODY_MAGIC);
    for x in [
        BODY_VERSION,
        model.num_vertices() as u32,
        model.num_joints() as u32,
        model.num_betas() as u32,
    ] {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    let floats = model
        .template()
        .iter()
        .flat_map(|v| v.iter().copied())
        .chain(model.shape_dirs().iter().copied())
        .chain(model.skin_weights().iter().copied())
        .chain(model.regressor().iter().copied());
    for x in floats {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    for p in model.parents() {
        let idx = p.map_or(-1, |p| p as i32);
        buf.extend_from_slice(&idx.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn take4(&mut self) -> Result<[u8; 4]> {
        let bytes = self
            .data
            .get(self.pos..self.pos + 4)
            .ok_or_else(|| Error::format(self.path, "truncated body model"))?;
        self.pos += 4;
        Ok(bytes.try_into().expect("four bytes"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take4()?))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n)
            .map(|_| Ok(f32::from_le_bytes(self.take4()?) as f64))
            .collect()
    }
}

pub fn read_body_model(path: &Path) -> Result<BodyModel> {
    let mut data = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor {
        data: &data,
        pos: 0,
        path,
    };
    if &cur.take4()? != BODY_MAGIC {
        return Err(Error::format(path, "not a body model (bad magic)"));
    }
    let version = cur.u32()?;
    if version != BODY_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let v = cur.u32()? as usize;
    let j = cur.u32()? as usize;
    let b = cur.u32()? as usize;
    let template = cur
        .f32s(v * 3)?
        .chunks(3)
        .map(|c| Vector3::new(c[0], c[1], c[2]))
        .collect();
    let shape_dirs = cur.f32s(v * 3 * b)?;
    let skin = cur.f32s(v * j)?;
    let regressor = cur.f32s(j * v)?;
    let mut parents = Vec::with_capacity(j);
    for _ in 0..j {
        let p = i32::from_le_bytes(cur.take4()?);
        parents.push(if p < 0 { None } else { Some(p as usize) });
    }
    if cur.pos != data.len() {
        return Err(Error::format(path, "trailing bytes after body model"));
    }
    BodyModel::new(template, shape_dirs, skin, regressor, parents, b)
        .map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body_model::SyntheticBodyConfig;

    #[test]
    fn roundtrip_is_exact() {
        let model = SyntheticBodyConfig {
            vertices: 312,
            shape_dim: 4,
            ..Default::default()
        }
        .build()
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("body.gstb");
        write_body_model(&model, &path).unwrap();
        let back = read_body_model(&path).unwrap();
        assert_eq!(model, back);

        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"GSTB");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 312);
        let expected_len = 20 + 4 * (312 * 3 + 312 * 3 * 4 + 312 * 24 * 2 + 24);
        assert_eq!(bytes.len(), expected_len);
    }

    #[test]
    fn truncated_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.gstb");
        std::fs::write(&path, b"GSTB\x01\x00\x00\x00").unwrap();
        let err = read_body_model(&path).unwrap_err();
        assert!(err.to_string().contains("bad.gstb"));
    }
}
