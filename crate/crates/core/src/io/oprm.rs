//! OPRM parameter files: the magic `OPRM` followed by records of
//! `u16 name length, name, u8 rank, u32 dims, f32 data`, little-endian.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{ParameterStore, Tensor};

const MAGIC: &[u8; 4] = b"OPRM";

pub fn encode_params(store: &ParameterStore) -> Result<Vec<u8>> {
    let mut buf = MAGIC.to_vec();
    for (name, tensor) in store.iter() {
        let len = u16::try_from(name.len()).map_err(|_| Error::invalid(format!("name too long: {name}")))?;
        let rank = u8::try_from(tensor.rank()).map_err(|_| Error::invalid("rank exceeds 255"))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(rank);
        for &d in tensor.dims() {
            let d = u32::try_from(d).map_err(|_| Error::invalid("dimension exceeds u32"))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

/// Decodes into a store tagged with `seed`.
pub fn decode_params(bytes: &[u8], seed: u64) -> Result<ParameterStore> {
    let bad = |reason: &str| Error::format("OPRM", reason.to_string());
    let rest = bytes.strip_prefix(MAGIC).ok_or_else(|| bad("bad magic"))?;
    let mut store = ParameterStore::empty(seed);
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let end = pos.checked_add(n).filter(|&e| e <= rest.len()).ok_or_else(|| bad("truncated record"))?;
        let s = &rest[pos..end];
        pos = end;
        Ok(s)
    };
    loop {
        let Ok(head) = take(2) else { break };
        let len = u16::from_le_bytes([head[0], head[1]]) as usize;
        let name = std::str::from_utf8(take(len)?)
            .map_err(|_| bad("parameter name is not UTF-8"))?
            .to_string();
        let rank = take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| bad("dimensions overflow"))?;
        let data = take(count)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if store.insert(name.clone(), Tensor::new(dims, data)?).is_some() {
            return Err(Error::format("OPRM", format!("duplicate parameter {name}")));
        }
    }
    Ok(store)
}

pub fn write_params(path: &Path, store: &ParameterStore) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_params(store)?)?;
    Ok(())
}

pub fn read_params(path: &Path, seed: u64) -> Result<ParameterStore> {
    decode_params(&std::fs::read(path)?, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Registry;

    #[test]
    fn round_trip_preserves_order_and_bits() {
        let mut reg = Registry::new();
        reg.linear("a", 3, 2, true).layer_norm("b", 4);
        let store = ParameterStore::build(7, &reg);
        let bytes = encode_params(&store).unwrap();
        let back = decode_params(&bytes, 7).unwrap();
        assert_eq!(back, store);
        assert!(back.check(&reg).is_ok());
        assert!(decode_params(&bytes[..bytes.len() - 2], 7).is_err());
        assert!(decode_params(b"NOPE", 7).is_err());
    }
}
