//! Binary parameter file.
//!
//! Layout, little-endian: `b"PYBX"`, `u32` version, `u32` tensor count,
//! then per tensor `u16` name length, UTF-8 name, `u8` dtype (0 = f32),
//! `u8` rank, `u32` dims, raw values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use pyrabox_core::network::ModelParams;
use pyrabox_core::Tensor;

use crate::error::{AppError, AppResult, FormatError};

pub const MAGIC: &[u8; 4] = b"PYBX";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

pub fn encode_model(params: &ModelParams<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.tensors.len() as u32).to_le_bytes());
    for (name, t) in &params.tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], FormatError> {
        let s = self.bytes.get(self.pos..self.pos + n).ok_or_else(|| {
            FormatError::Truncated(format!("{what} needs {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()))
        })?;
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, FormatError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("four bytes")))
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelParams<f32>, FormatError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned();
        return Err(FormatError::BadMagic { expected: "PYBX", found });
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(FormatError::Invalid(format!("model version {version} unsupported (expected {VERSION})")));
    }
    let count = r.u32("tensor count")?;
    let mut tensors = BTreeMap::new();
    for i in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| FormatError::Invalid(format!("tensor {i} name is not UTF-8")))?
            .to_string();
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(FormatError::Invalid(format!("tensor {name}: unknown dtype {dtype}")));
        }
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4, &format!("values of {name}"))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect();
        let t = Tensor::new(&shape, data).map_err(|e| FormatError::Invalid(format!("tensor {name}: {e}")))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(FormatError::Invalid(format!("duplicate tensor name {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(FormatError::Invalid(format!("{} trailing bytes after the last tensor", bytes.len() - r.pos)));
    }
    Ok(ModelParams { tensors })
}

pub fn save_model(path: &Path, params: &ModelParams<f32>) -> AppResult<()> {
    fs::write(path, encode_model(params)).map_err(|e| AppError::io(path, e))
}

pub fn load_model(path: &Path) -> AppResult<ModelParams<f32>> {
    let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
    decode_model(&bytes).map_err(|e| AppError::format(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ModelParams<f32> {
        let mut tensors = BTreeMap::new();
        tensors.insert("a.weight".to_string(), Tensor::new(&[2, 1, 1, 1], vec![1.5, -0.0]).unwrap());
        tensors.insert("b".to_string(), Tensor::new(&[3], vec![f32::MIN_POSITIVE, 7.0, 1e-30]).unwrap());
        ModelParams { tensors }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = sample();
        let back = decode_model(&encode_model(&p)).unwrap();
        for (name, t) in &p.tensors {
            let b = &back.tensors[name];
            assert_eq!(t.shape(), b.shape());
            assert!(t.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn malformed_files() {
        let good = encode_model(&sample());
        let mut bad = good.clone();
        bad[0] = b'Q';
        assert!(matches!(decode_model(&bad), Err(FormatError::BadMagic { .. })));
        assert!(matches!(decode_model(&good[..good.len() - 1]), Err(FormatError::Truncated(_))));
        let mut extra = good.clone();
        extra.push(0);
        assert!(matches!(decode_model(&extra), Err(FormatError::Invalid(_))));
    }
}
