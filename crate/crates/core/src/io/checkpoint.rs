use std::fs;
use std::path::Path;

use super::{format_err, ByteReader};
use crate::classifier::{self, ClassifierParams};
use crate::error::{Error, Result};
use crate::nn::{ParameterStore, Tensor};
use crate::proposal::{self, ProposalNetParams};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"S2DP";
const CHECKPOINT_VERSION: u32 = 1;

/// Serializes every tensor in name order; values are stored as `f32`.
pub fn encode_checkpoint(store: &ParameterStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParameterStore> {
    let mut r = ByteReader::new(bytes);
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(format_err(0, "bad magic, expected \"S2DP\""));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(format_err(
            4,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let count = r.u32("tensor count")?;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let at = r.pos();
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| format_err(at + 4, "tensor name is not UTF-8"))?
            .to_string();
        if name.is_empty() {
            return Err(format_err(at, "empty tensor name"));
        }
        let rank_at = r.pos();
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(format_err(rank_at, format!("rank {rank} is not supported")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
        let bytes_needed = numel.and_then(|n| n.checked_mul(4));
        let payload_at = r.pos();
        let bytes_needed = match bytes_needed {
            Some(b) if b <= r.remaining() as u64 => b as usize,
            _ => {
                return Err(format_err(
                    bytes.len(),
                    format!("truncated payload for tensor {name} with shape {shape:?}"),
                ))
            }
        };
        let raw = r.take(bytes_needed, "payload")?;
        let mut data = Vec::with_capacity(bytes_needed / 4);
        for (k, c) in raw.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            if !v.is_finite() {
                return Err(format_err(
                    payload_at + 4 * k,
                    format!("non-finite value in {name}"),
                ));
            }
            data.push(v as f64);
        }
        if store.contains(&name) {
            return Err(format_err(at, format!("duplicate tensor {name}")));
        }
        store.insert(name, Tensor::new(shape, data)?)?;
    }
    r.expect_end()?;
    Ok(store)
}

pub fn write_checkpoint(path: impl AsRef<Path>, store: &ParameterStore) -> Result<()> {
    fs::write(path, encode_checkpoint(store))?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ParameterStore> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::NotFound(format!(
            "checkpoint not found: {}",
            path.display()
        )));
    }
    decode_checkpoint(&fs::read(path)?)
}

fn only_prefix(store: &ParameterStore, prefix: &str) -> Result<()> {
    if let Some(name) = store.names().find(|n| !n.starts_with(prefix)) {
        return Err(Error::validation(
            name,
            format!("expected only {prefix}* tensors"),
        ));
    }
    Ok(())
}

pub fn save_proposal(path: impl AsRef<Path>, params: &ProposalNetParams) -> Result<()> {
    write_checkpoint(path, params.store())
}

pub fn load_proposal(path: impl AsRef<Path>) -> Result<ProposalNetParams> {
    let store = read_checkpoint(path)?;
    only_prefix(&store, proposal::PREFIX)?;
    ProposalNetParams::from_store(store)
}

pub fn save_classifier(path: impl AsRef<Path>, params: &ClassifierParams) -> Result<()> {
    write_checkpoint(path, params.store())
}

pub fn load_classifier(path: impl AsRef<Path>) -> Result<ClassifierParams> {
    let store = read_checkpoint(path)?;
    only_prefix(&store, classifier::PREFIX)?;
    ClassifierParams::from_store(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proposal::ProposalArch;

    #[test]
    fn round_trip_is_bit_exact() {
        let arch = ProposalArch {
            input_dim: 3,
            hidden: 4,
            kernel_size: 3,
            conv_layers: 2,
        };
        let params = ProposalNetParams::init(arch, 11).unwrap();
        let bytes = encode_checkpoint(params.store());
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(&back, params.store());
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(
            decode_checkpoint(b"S2DT\x01\0\0\0\0\0\0\0"),
            Err(Error::Format { offset: 0, .. })
        ));
        assert!(matches!(
            decode_checkpoint(b"S2DP\x01\0\0\0\x01\0\0\0"),
            Err(Error::Format { .. })
        ));
        let mut store = ParameterStore::new();
        store.insert("proposal.x", Tensor::zeros(&[2])).unwrap();
        let mut bytes = encode_checkpoint(&store);
        bytes.push(7);
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn missing_file_is_not_found() {
        let err = load_proposal("/nonexistent/proposal.s2dp").unwrap_err();
        assert!(matches!(err, Error::NotFound(_)));
        assert!(err.to_string().contains("checkpoint not found"));
    }
}
