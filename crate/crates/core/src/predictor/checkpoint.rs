//! GSTP checkpoints: magic, version, the JSON configuration, then named f32
//! parameter blobs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::nn::Mat;
use super::{Predictor, PredictorConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GSTP";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_bytes(w: &mut impl Write, b: &[u8]) -> std::io::Result<()> {
    put_u32(w, b.len() as u32)?;
    w.write_all(b)
}

pub fn write_checkpoint(pred: &Predictor, path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    let file = File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);
    let config = serde_json::to_vec(&pred.config).map_err(|e| Error::format(path, e.to_string()))?;
    w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    put_u32(&mut w, CHECKPOINT_VERSION).map_err(io)?;
    put_bytes(&mut w, &config).map_err(io)?;
    put_u32(&mut w, pred.params.len() as u32).map_err(io)?;
    for (name, value) in pred.params.names().iter().zip(pred.params.values()) {
        put_bytes(&mut w, name.as_bytes()).map_err(io)?;
        put_u32(&mut w, value.nrows() as u32).map_err(io)?;
        put_u32(&mut w, value.ncols() as u32).map_err(io)?;
        for v in value.iter() {
            w.write_all(&(*v as f32).to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::format(self.path, "checkpoint is truncated"));
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn blob(&mut self) -> Result<&[u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

/// Rebuilds the predictor from its stored configuration and loads every
/// parameter by name.
pub fn read_checkpoint(path: &Path) -> Result<Predictor> {
    let mut bytes = Vec::new();
    File::open(path)
        .map_err(|e| Error::io(path, e))
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes).map_err(|e| Error::io(path, e)))?;
    let mut c = Cursor {
        bytes: &bytes,
        at: 0,
        path,
    };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a GSTP checkpoint"));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let config: PredictorConfig =
        serde_json::from_slice(c.blob()?).map_err(|e| Error::format(path, e.to_string()))?;
    let mut pred = Predictor::new(config)?;
    let count = c.u32()? as usize;
    if count != pred.params.len() {
        return Err(Error::format(
            path,
            format!("{count} parameters stored, configuration needs {}", pred.params.len()),
        ));
    }
    for _ in 0..count {
        let name = String::from_utf8(c.blob()?.to_vec()).map_err(|_| Error::format(path, "parameter name is not UTF-8"))?;
        let rows = c.u32()? as usize;
        let cols = c.u32()? as usize;
        let idx = pred
            .params
            .names()
            .iter()
            .position(|n| *n == name)
            .ok_or_else(|| Error::format(path, format!("unknown parameter {name}")))?;
        let target = &mut pred.params.values_mut()[idx];
        if target.dim() != (rows, cols) {
            return Err(Error::format(
                path,
                format!("parameter {name} is {rows}x{cols}, expected {:?}", target.dim()),
            ));
        }
        let raw = c.take(rows * cols * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        *target = Mat::from_shape_vec((rows, cols), data).expect("shape checked");
    }
    if c.at != bytes.len() {
        return Err(Error::format(path, "trailing bytes after the last parameter"));
    }
    Ok(pred)
}
