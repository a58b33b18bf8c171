//! Named-tensor checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes   "GFCK"
//! version    u32       currently 1
//! meta_len   u32       length of the metadata blob
//! meta       bytes     UTF-8 JSON object (free-form, owner-defined)
//! count      u32       number of tensors
//! per tensor:
//!   name_len u32, name (UTF-8)
//!   flags    u8        bit 0 = trainable
//!   rank     u32
//!   dims     u64 × rank
//!   payload  f64 × product(dims)
//! ```

use std::path::Path;

use serde_json::Value;

use crate::binio::{self, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GFCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: Value,
    pub params: ParamStore,
}

pub fn encode(meta: &Value, params: &ParamStore) -> Vec<u8> {
    let mut w = ByteWriter::default();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.blob(meta.to_string().as_bytes());
    w.u32(params.len() as u32);
    for e in params.entries() {
        w.blob(e.name.as_bytes());
        w.u8(u8::from(e.trainable));
        w.u32(e.value.rank() as u32);
        for &d in e.value.shape() {
            w.u64(d as u64);
        }
        w.f64s(e.value.data());
    }
    w.buf
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = ByteReader::new(bytes);
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version {
            expected: VERSION,
            found: version,
        });
    }
    let meta_at = r.offset();
    let meta: Value = serde_json::from_slice(r.blob()?).map_err(|e| Error::Malformed {
        offset: meta_at,
        detail: format!("metadata: {e}"),
    })?;
    let count = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let at = r.offset();
        let name = std::str::from_utf8(r.blob()?)
            .map_err(|e| Error::Malformed {
                offset: at,
                detail: format!("tensor name: {e}"),
            })?
            .to_owned();
        let trainable = r.u8()? & 1 == 1;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(Error::Malformed {
            offset: at,
            detail: "tensor size overflows".into(),
        })?;
        let data = r.f64s(n)?;
        params.add(name, Tensor::new(shape, data)?, trainable);
    }
    if r.remaining() != 0 {
        return Err(Error::Malformed {
            offset: r.offset(),
            detail: format!("{} trailing bytes", r.remaining()),
        });
    }
    Ok(Checkpoint { meta, params })
}

pub fn save(path: &Path, meta: &Value, params: &ParamStore) -> Result<()> {
    binio::write_file(path, &encode(meta, params))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&binio::read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> ParamStore {
        let mut p = ParamStore::new();
        p.add("w", Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., -6.5]).unwrap(), true);
        p.add("b", Tensor::vector(vec![0.25, f64::MIN_POSITIVE]), false);
        p.add("s", Tensor::scalar(7.0), true);
        p
    }

    #[test]
    fn round_trip_is_exact() {
        let p = sample();
        let meta = json!({"kind": "test", "n": 3});
        let ck = decode(&encode(&meta, &p)).unwrap();
        assert_eq!(ck.meta, meta);
        assert_eq!(ck.params.checksum(), p.checksum());
        assert!(!ck.params.get(ck.params.id("b").unwrap()).trainable);
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = encode(&json!({}), &sample());
        for cut in [0, 3, 7, 12, bytes.len() / 2, bytes.len() - 1] {
            assert!(decode(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        match decode(&bytes[..bytes.len() - 1]) {
            Err(Error::Truncated { offset, .. }) => assert!(offset > 0),
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode(&json!({}), &sample());
        bytes[4] = 9;
        assert!(matches!(decode(&bytes), Err(Error::Version { found: 9, .. })));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Magic(_))));
    }
}
