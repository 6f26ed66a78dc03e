//! Binary checkpoints: magic, version, JSON model config, then named `f32`
//! tensors. All integers are little-endian `u32`.

use std::collections::HashMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Result, StamError};
use crate::model::{StamConfig, StamParams};

pub const MAGIC: &[u8; 9] = b"STAMCKPT1";
pub const VERSION: u8 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| StamError::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode(params: &StamParams<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    let config = serde_json::to_vec(&params.config)?;
    put_u32(&mut out, config.len())?;
    out.extend_from_slice(&config);
    let tensors = params.named_tensors();
    put_u32(&mut out, tensors.len())?;
    for (name, t) in tensors {
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

struct Reader<'a> {
    bytes: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() < n {
            return Err(StamError::Format("checkpoint truncated".into()));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<StamParams<f32>> {
    let mut r = Reader { bytes };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(StamError::Format("not a STAM checkpoint".into()));
    }
    let version = r.take(1)?[0];
    if version != VERSION {
        return Err(StamError::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32()?;
    let config: StamConfig = serde_json::from_slice(r.take(len)?)?;
    let count = r.u32()?;
    let mut stored = HashMap::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()?;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| StamError::Format("tensor name is not UTF-8".into()))?;
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| StamError::Format("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        stored.insert(name, Tensor::new(shape, data)?);
    }
    if !r.bytes.is_empty() {
        return Err(StamError::Format(format!("{} trailing bytes", r.bytes.len())));
    }
    let mut params = StamParams::<f32>::init(&config, 0)?;
    for (name, slot) in params.named_tensors_mut() {
        let t = stored
            .remove(&name)
            .ok_or_else(|| StamError::Format(format!("missing tensor {name}")))?;
        if t.shape() != slot.shape() {
            return Err(StamError::Format(format!(
                "tensor {name}: shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    if let Some(extra) = stored.keys().next() {
        return Err(StamError::Format(format!("unexpected tensor {extra}")));
    }
    Ok(params)
}

pub fn save(params: &StamParams<f32>, path: &Path) -> Result<()> {
    let bytes = encode(params)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<StamParams<f32>> {
    let mut f = fs::File::open(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => StamError::FileNotFound(path.display().to_string()),
        _ => e.into(),
    })?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> StamConfig {
        StamConfig {
            channels: vec![4, 6, 8],
            d_u: 3,
            d_h: 5,
            ..StamConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = StamParams::<f32>::init(&small(), 11).unwrap();
        let bytes = encode(&p).unwrap();
        let q = decode(&bytes).unwrap();
        assert_eq!(p, q);
        assert_eq!(encode(&q).unwrap(), bytes);
        assert_eq!(&bytes[..9], b"STAMCKPT1");
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = encode(&StamParams::<f32>::init(&small(), 1).unwrap()).unwrap();
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(StamError::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(StamError::Format(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode(&long), Err(StamError::Format(_))));
    }

    #[test]
    fn missing_file() {
        let err = load(Path::new("/nonexistent/model.ckpt")).unwrap_err();
        assert!(matches!(err, StamError::FileNotFound(_)));
    }
}
