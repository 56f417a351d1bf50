//! Versioned binary container: a config echo, free-form metadata and named
//! arrays, all little-endian.
//!
//! Layout: magic, format version (u32), scalar tag, config JSON, metadata
//! JSON, then `count` records of name, shape and raw data.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use classwise_tensor::{ParamStore, Scalar, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CWADCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S: Scalar> {
    pub config: serde_json::Value,
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn new(config: serde_json::Value) -> Self {
        Self {
            config: canonical(&config),
            meta: serde_json::Value::Object(Default::default()),
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<S>) {
        self.arrays.push((name.into(), t));
    }

    /// Append every tensor of `store` under `prefix/<name>`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore<S>) {
        for (name, t) in store.iter() {
            self.push(format!("{prefix}/{name}"), t.clone());
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing array `{name}`")))
    }

    /// Overwrite `store` from the arrays under `prefix`; names and shapes must match.
    pub fn restore_store(&self, prefix: &str, store: &mut ParamStore<S>) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = format!("{prefix}/{}", store.name(id));
            let src = self.get(&name)?;
            if src.shape() != store.get(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    src.shape(),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = src.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        write_str(&mut out, S::TAG)?;
        write_str(&mut out, &serde_json::to_string(&self.config)?)?;
        write_str(&mut out, &serde_json::to_string(&self.meta)?)?;
        out.write_u32::<LittleEndian>(self.arrays.len() as u32)?;
        for (name, t) in &self.arrays {
            write_str(&mut out, name)?;
            out.write_u32::<LittleEndian>(t.shape().len() as u32)?;
            for &d in t.shape() {
                out.write_u64::<LittleEndian>(d as u64)?;
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| truncated())?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(|_| truncated())?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("format version {version}, expected {FORMAT_VERSION}")));
        }
        let tag = read_str(&mut r)?;
        if tag != S::TAG {
            return Err(Error::Checkpoint(format!("scalar type `{tag}`, expected `{}`", S::TAG)));
        }
        let config = serde_json::from_str(&read_str(&mut r)?)?;
        let meta = serde_json::from_str(&read_str(&mut r)?)?;
        let count = r.read_u32::<LittleEndian>().map_err(|_| truncated())?;
        let mut arrays = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name = read_str(&mut r)?;
            let ndim = r.read_u32::<LittleEndian>().map_err(|_| truncated())?;
            let mut shape = Vec::with_capacity(ndim as usize);
            for _ in 0..ndim {
                shape.push(r.read_u64::<LittleEndian>().map_err(|_| truncated())? as usize);
            }
            let numel: usize = shape.iter().product();
            let start = r.position() as usize;
            let end = start + numel * S::BYTES;
            if end > bytes.len() {
                return Err(truncated());
            }
            let data = bytes[start..end].chunks_exact(S::BYTES).map(S::read_le).collect();
            r.set_position(end as u64);
            arrays.push((name, Tensor::from_vec(&shape, data)?));
        }
        if (r.position() as usize) != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after the last array".into()));
        }
        Ok(Self { config, meta, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?)
    }

    /// Load and require the stored config to equal `expected`.
    pub fn load_expecting(path: &Path, expected: &serde_json::Value) -> Result<Self> {
        let ck = Self::load(path)?;
        ck.expect_config(expected)?;
        Ok(ck)
    }

    pub fn expect_config(&self, expected: &serde_json::Value) -> Result<()> {
        if canonical(&self.config) != canonical(expected) {
            return Err(Error::Checkpoint("stored configuration differs from the requested one".into()));
        }
        Ok(())
    }
}

/// The value as it reads back from its own JSON text, so that numbers
/// serialized from `f32` compare equal before and after a file round trip.
fn canonical(v: &serde_json::Value) -> serde_json::Value {
    serde_json::from_str(&v.to_string()).expect("JSON text of a value parses")
}

fn truncated() -> Error {
    Error::Checkpoint("truncated file".into())
}

fn write_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    out.write_u32::<LittleEndian>(s.len() as u32)?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn read_str(r: &mut Cursor<&[u8]>) -> Result<String> {
    let len = r.read_u32::<LittleEndian>().map_err(|_| truncated())? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|_| truncated())?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint<f32> {
        let mut ck = Checkpoint::new(serde_json::json!({"k": 3}));
        ck.meta = serde_json::json!({"iteration": 7});
        ck.push("a", Tensor::from_fn(&[2, 3], |i| i as f32 * 0.5));
        ck.push("b/c", Tensor::scalar(-1.25));
        ck
    }

    #[test]
    fn bytes_round_trip() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(Checkpoint::<f32>::from_bytes(&bytes).unwrap(), ck);
    }

    #[test]
    fn wrong_scalar_and_truncation_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::<f32>::from_bytes(b"garbage!").is_err());
    }

    #[test]
    fn config_mismatch_rejected() {
        let ck = sample();
        assert!(ck.expect_config(&serde_json::json!({"k": 4})).is_err());
        assert!(ck.expect_config(&serde_json::json!({"k": 3})).is_ok());
    }

    #[test]
    fn single_precision_config_survives_the_byte_round_trip() {
        let cfg = serde_json::json!({ "rate": 0.05f32, "range": [0.7f32, 1.3f32] });
        let ck = Checkpoint::<f32>::new(cfg.clone());
        let back = Checkpoint::<f32>::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        back.expect_config(&cfg).unwrap();
    }
}
