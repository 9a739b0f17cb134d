//! Versioned little-endian model files.
//!
//! Layout: magic `SFPM`, `u32` format version, architecture id (`u32`
//! length + UTF-8), `u32` class count, `u32` input height and width, `u32`
//! width multiplier, `u32` tensor count, then per tensor a `u32` rank and
//! `u32` dimensions, followed by every weight as a raw `f64`.

use std::path::Path;

use super::{ArchitectureId, ClassifierModel};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SFPM";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(model: &ClassifierModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let arch = model.architecture.as_str().as_bytes();
    out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
    out.extend_from_slice(arch);
    for v in [
        model.n_classes,
        model.input_shape.0,
        model.input_shape.1,
        model.width,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let shapes: Vec<Vec<usize>> = model.layers.iter().flat_map(|l| l.param_shapes()).collect();
    out.extend_from_slice(&(shapes.len() as u32).to_le_bytes());
    for shape in &shapes {
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for layer in &model.layers {
        for tensor in layer.params() {
            for w in tensor {
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format("corrupt model file: truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ClassifierModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| Error::Format("not a model file: missing magic".into()))? != MAGIC {
        return Err(Error::Format("not a model file: wrong magic bytes".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported model format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let len = r.u32()? as usize;
    let arch = std::str::from_utf8(r.take(len)?)
        .map_err(|_| Error::Format("corrupt model file: architecture id is not UTF-8".into()))?;
    let arch: ArchitectureId = arch.parse()?;
    let n_classes = r.u32()? as usize;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let width = r.u32()? as usize;
    let mut model = ClassifierModel::with_width(arch, (h, w), n_classes, width, 0)?;
    let expected: Vec<Vec<usize>> = model.layers.iter().flat_map(|l| l.param_shapes()).collect();
    let n_tensors = r.u32()? as usize;
    if n_tensors != expected.len() {
        return Err(Error::Format(format!(
            "corrupt model file: {n_tensors} tensors, architecture needs {}",
            expected.len()
        )));
    }
    for want in &expected {
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        if &dims != want {
            return Err(Error::Format(format!(
                "corrupt model file: tensor shape {dims:?}, expected {want:?}"
            )));
        }
    }
    for layer in &mut model.layers {
        for tensor in layer.params_mut() {
            for v in tensor.iter_mut() {
                *v = r.f64()?;
            }
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("corrupt model file: trailing bytes".into()));
    }
    Ok(model)
}

pub fn save_model(model: &ClassifierModel, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<ClassifierModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
