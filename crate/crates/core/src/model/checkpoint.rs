//! Binary checkpoint format.
//!
//! ```text
//! magic "BINENSCK" | u32 format_version | u32 len | config (TOML, UTF-8)
//! u32 n_tensors
//! repeated: u32 len | name (UTF-8) | u32 ndim | u32 dims[ndim] | f32 data[prod(dims)]
//! ```
//!
//! All integers and floats are little-endian. Tensors are written in name
//! order, so equal models serialize to equal bytes.

use std::collections::BTreeMap;
use std::path::Path;

use super::{EncoderConfig, EncoderModel};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"BINENSCK";
pub const FORMAT_VERSION: u32 = 1;

/// A model snapshot: config plus latent parameter values.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: EncoderModel,
}

impl From<EncoderModel> for Checkpoint {
    fn from(model: EncoderModel) -> Self {
        Self { format_version: FORMAT_VERSION, model }
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn str(&mut self) -> Result<&'a str> {
        let n = self.u32()?;
        std::str::from_utf8(self.take(n)?).map_err(|e| Error::Format(format!("invalid UTF-8: {e}")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config = toml::to_string(&self.model.config).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(64 + 4 * self.model.param_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        put_u32(&mut out, config.len())?;
        out.extend_from_slice(config.as_bytes());
        put_u32(&mut out, self.model.params.len())?;
        for (name, t) in &self.model.params {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape().len())?;
            for &d in t.shape() {
                put_u32(&mut out, d)?;
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Format("bad magic; not a checkpoint".into()));
        }
        let format_version = r.u32()? as u32;
        if format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format_version {format_version} (this build reads {FORMAT_VERSION})"
            )));
        }
        let config: EncoderConfig =
            toml::from_str(r.str()?).map_err(|e| Error::Format(format!("config: {e}")))?;
        let n = r.u32()?;
        let mut params = BTreeMap::new();
        for _ in 0..n {
            let name = r.str()?.to_string();
            let ndim = r.u32()?;
            let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let bytes = r.take(numel.and_then(|n| n.checked_mul(4)).ok_or_else(|| {
                Error::Format(format!("tensor {name} is too large"))
            })?)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if params.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                return Err(Error::Format(format!("duplicate tensor {name}")));
            }
        }
        if r.pos != buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self { format_version, model: EncoderModel::from_parts(config, params)? })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fsutil::read(path)?)
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn sha256(&self) -> Result<String> {
        Ok(fsutil::sha256_hex(&self.to_bytes()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::QuantMap;

    #[test]
    fn round_trip_is_bit_exact() {
        let model = EncoderModel::build(EncoderConfig::tiny(3, 8).with_quant(QuantMap::binary())).unwrap();
        let ck = Checkpoint::from(model);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let ck = Checkpoint::from(EncoderModel::build(EncoderConfig::tiny(2, 1)).unwrap());
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut bad = bytes;
        bad[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(m)) if m.contains("format_version")));
    }
}
