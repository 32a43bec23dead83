use std::fs;
use std::path::Path;

use super::{format_err, ByteReader};
use crate::dataset::ClipFeatureSequence;
use crate::error::Result;

pub const FEATURE_MAGIC: [u8; 4] = *b"S2DT";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_features(features: &ClipFeatureSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + features.data().len() * 4);
    out.extend_from_slice(&FEATURE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(features.num_clips() as u32).to_le_bytes());
    out.extend_from_slice(&(features.dim() as u32).to_le_bytes());
    for v in features.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<ClipFeatureSequence> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != FEATURE_MAGIC {
        return Err(format_err(
            0,
            format!("bad magic {magic:02x?}, expected \"S2DT\""),
        ));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let n = r.u32("clip count")? as usize;
    if n == 0 {
        return Err(format_err(8, "clip count is zero"));
    }
    let d = r.u32("feature dimension")? as usize;
    if d == 0 {
        return Err(format_err(12, "feature dimension is zero"));
    }
    let payload = (n as u64) * (d as u64) * 4;
    if payload > r.remaining() as u64 {
        return Err(format_err(
            bytes.len(),
            format!(
                "truncated payload: {n} x {d} features need {payload} bytes, found {}",
                r.remaining()
            ),
        ));
    }
    let start = r.pos();
    let raw = r.take(payload as usize, "payload")?;
    r.expect_end()?;
    let mut data = Vec::with_capacity(n * d);
    for (k, chunk) in raw.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(format_err(start + 4 * k, "non-finite feature value"));
        }
        data.push(v);
    }
    ClipFeatureSequence::new(n, d, data)
}

pub fn read_features(path: impl AsRef<Path>) -> Result<ClipFeatureSequence> {
    decode_features(&fs::read(path)?)
}

pub fn write_features(path: impl AsRef<Path>, features: &ClipFeatureSequence) -> Result<()> {
    fs::write(path, encode_features(features))?;
    Ok(())
}
