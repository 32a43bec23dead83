//! File formats, configuration, synthetic data and dataset loading.
//!
//! Binary formats are little-endian throughout:
//!
//! - clip features (`.s2dt`): magic `S2DT`, version `u32 = 1`, `N u32`,
//!   `D u32`, then `N * D` `f32` values in clip-major order.
//! - checkpoints (`.s2dp`): magic `S2DP`, version `u32 = 1`, tensor count
//!   `u32`, then per tensor: name length `u32`, UTF-8 name, rank `u32`,
//!   `rank` dims as `u32`, and the `f32` payload.

mod annotations;
mod checkpoint;
mod config;
mod features;
mod synth;

pub use annotations::{
    gts_to_json, read_annotations, read_predictions, write_annotations, write_json,
    write_predictions, MetricsReport, PredictionEntry,
};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_classifier, load_proposal, read_checkpoint,
    save_classifier, save_proposal, write_checkpoint, CHECKPOINT_MAGIC,
};
pub use config::{load_dataset, RunConfig};
pub use features::{
    decode_features, encode_features, read_features, write_features, FEATURE_MAGIC, FORMAT_VERSION,
};
pub use synth::{generate_dataset, write_dataset, SynthDataset, SynthSpec};

use crate::error::{Error, Result};

/// Cursor over a byte buffer that reports the offset of any failure.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub(crate) fn pos(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < len {
            return Err(Error::Format {
                offset: self.bytes.len(),
                msg: format!(
                    "truncated {what}: needs {len} bytes at offset {}, {} available",
                    self.pos,
                    self.remaining()
                ),
            });
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn expect_end(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::Format {
                offset: self.pos,
                msg: format!("{} unexpected trailing bytes", self.remaining()),
            });
        }
        Ok(())
    }
}

pub(crate) fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset,
        msg: msg.into(),
    }
}
