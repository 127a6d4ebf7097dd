//! Checkpoint container: a JSON model-config header followed by named
//! little-endian parameter buffers. Loading fails loudly on any name,
//! shape, or element-width mismatch.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, VtamiqModel};
use crate::tensor::params::ParameterStore;
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 8] = b"VTIQCKPT";
const VERSION: u32 = 1;

/// Serializes the model to `path`.
pub fn save<F: Scalar>(model: &VtamiqModel<F>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = serde_json::to_vec(&model.config)
        .map_err(|e| Error::Checkpoint(format!("config serialization failed: {e}")))?;

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(F::DTYPE.tag());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());

    for p in model.store.iter() {
        let name = p.name().as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(p.value().shape().len() as u8);
        for &d in p.value().shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value().data() {
            v.write_le(&mut out);
        }
    }

    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Loads a checkpoint saved by [`save`]. The element type `F` must match
/// the stored width, and the parameter set must agree exactly with the
/// architecture named in the header.
pub fn load<F: Scalar>(path: impl AsRef<Path>) -> Result<VtamiqModel<F>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };

    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let dtype = r.take(1)?[0];
    if dtype != F::DTYPE.tag() {
        return Err(Error::Checkpoint(format!(
            "checkpoint stores {dtype}-byte elements, expected {}",
            F::DTYPE.tag()
        )));
    }
    let header_len = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")) as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| Error::Checkpoint(format!("bad config header: {e}")))?;
    config.validate()?;

    let count = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")) as usize;
    let width = F::DTYPE.byte_width();
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-utf8 parameter name".into()))?;
        let ndim = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * width)?;
        let data: Vec<F> = raw.chunks(width).map(F::read_le).collect();
        store.insert(name, Tensor::new(shape, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after last parameter",
            bytes.len() - r.pos
        )));
    }

    // Validate against the architecture the header names: every expected
    // parameter present with its expected shape, nothing extra.
    let reference = VtamiqModel::<F>::new(config.clone(), 0)?;
    if store.len() != reference.store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, architecture needs {}",
            store.len(),
            reference.store.len()
        )));
    }
    for expected in reference.store.iter() {
        let Some(found) = store.get(expected.name()) else {
            return Err(Error::Checkpoint(format!(
                "missing parameter {:?}",
                expected.name()
            )));
        };
        if found.value().shape() != expected.value().shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {:?} has shape {:?}, expected {:?}",
                expected.name(),
                found.value().shape(),
                expected.value().shape()
            )));
        }
    }
    Ok(VtamiqModel::from_parts(config, store))
}

/// Reads just the element-width tag, so callers can pick the right
/// monomorphization before a full load.
pub fn peek_dtype(path: impl AsRef<Path>) -> Result<crate::tensor::Dtype> {
    let path = path.as_ref();
    let mut head = [0u8; 13];
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    f.read_exact(&mut head).map_err(|e| Error::io(path, e))?;
    if &head[..8] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    match head[12] {
        4 => Ok(crate::tensor::Dtype::F32),
        8 => Ok(crate::tensor::Dtype::F64),
        other => Err(Error::Checkpoint(format!("unknown dtype tag {other}"))),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}
